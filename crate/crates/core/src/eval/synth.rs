//! Text-to-signal synthesis: encode text, predict durations, decode
//! features with a prior latent (optionally guidance-mixed against the
//! unconditioned path), then map features to signal frames.

use rand::Rng;

use crate::model::forward::{
    decode_features, predict_durations, prior_sample, round_durations, text_forward, upsample,
};
use crate::model::vocoder::vocode;
use crate::model::ParamStore;
use crate::num::{Graph, Tensor};
use crate::textproc::{tokenize, ByteSeq, IdRegistry, UNKNOWN_ID};
use crate::{Error, Result};

/// A finished synthesis: the signal, the feature sequence it was vocoded
/// from, and how the conditioning request resolved.
#[derive(Debug, Clone)]
pub struct Synthesis {
    pub signal: Tensor,
    pub features: Tensor,
    /// Rounded frames per input token, from the conditional path.
    pub durations: Vec<usize>,
    pub lang_id: usize,
    pub spk_id: usize,
}

impl Synthesis {
    /// Whether the language resolved to the reserved unknown embedding.
    pub fn oov_lang(&self) -> bool {
        self.lang_id == UNKNOWN_ID
    }

    /// Whether the speaker resolved to the reserved unknown embedding.
    pub fn oov_spk(&self) -> bool {
        self.spk_id == UNKNOWN_ID
    }
}

/// Synthesize from names: ids come from the registry, and names it has
/// never seen fall back to the unknown row instead of failing.
pub fn synthesize(
    store: &ParamStore,
    registry: &IdRegistry,
    text: &str,
    lang_name: &str,
    spk_name: &str,
    guidance_w: f64,
    rng: &mut impl Rng,
) -> Result<Synthesis> {
    let tokens = tokenize(text)?;
    let lang_id = registry.language_id(lang_name);
    let spk_id = registry.speaker_id(spk_name);
    synthesize_with_ids(store, &tokens, lang_id, spk_id, guidance_w, rng)
}

/// Synthesize from resolved ids. Durations always come from the conditional
/// path; at `guidance_w` other than 1 the decoded features are mixed as
/// `ẑ_unc + w·(ẑ_cond − ẑ_unc)` with both paths sharing the latent and the
/// durations, so the two feature sequences line up frame for frame.
pub fn synthesize_with_ids(
    store: &ParamStore,
    tokens: &ByteSeq,
    lang_id: usize,
    spk_id: usize,
    guidance_w: f64,
    rng: &mut impl Rng,
) -> Result<Synthesis> {
    if tokens.is_empty() {
        return Err(Error::InvalidArg("cannot synthesize from empty text".into()));
    }
    if !guidance_w.is_finite() {
        return Err(Error::InvalidArg(format!("guidance weight must be finite, got {guidance_w}")));
    }
    let mc = &store.config;
    let latent = prior_sample(mc.vae_dim, rng)?;

    let mut g = Graph::new();
    let b = store.bind(&mut g, &[])?;
    let e_cond = text_forward(&mut g, &b, mc, tokens.ids(), lang_id, spk_id)?;
    let pred = predict_durations(&mut g, &b, e_cond)?;
    let durations = round_durations(g.value(pred).data());
    let up = upsample(&mut g, e_cond, &durations)?;
    let lat = g.constant(latent);
    let outs = decode_features(&mut g, &b, mc, up, lat)?;
    let z_cond = g.value(*outs.last().unwrap()).clone();

    let features = if guidance_w == 1.0 {
        z_cond
    } else {
        let e_unc = text_forward(&mut g, &b, mc, tokens.ids(), UNKNOWN_ID, UNKNOWN_ID)?;
        let up_unc = upsample(&mut g, e_unc, &durations)?;
        let outs_unc = decode_features(&mut g, &b, mc, up_unc, lat)?;
        let z_unc = g.value(*outs_unc.last().unwrap());
        let mixed: Vec<f64> = z_unc
            .data()
            .iter()
            .zip(z_cond.data())
            .map(|(&u, &c)| u + guidance_w * (c - u))
            .collect();
        Tensor::new(z_cond.shape().to_vec(), mixed)?
    };

    let signal = vocode(store, &features)?;
    Ok(Synthesis { signal, features, durations, lang_id, spk_id })
}

// ── tests ───────────────────────────────────────────────────────────────
