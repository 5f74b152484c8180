//! Forward passes of the four network components: speech encoder, shared
//! encoder with its transducer head, the text-to-feature stack (text encoder,
//! duration head, upsampler, iterative feature decoder), and the VAE
//! posterior.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::num::{Graph, Tensor, Var};
use crate::{Error, Result};

use super::blocks::{add_positions, encoder_block, linear};
use super::params::{Bound, ModelConfig};

/// Signal frames -> feature frames at half the rate: adjacent frames are
/// paired, projected to hidden width, encoded, and projected to `d_feat`.
pub fn s2f_forward(g: &mut Graph, b: &Bound, mc: &ModelConfig, signal: &Tensor) -> Result<Var> {
    let (t, d) = signal.dims2();
    if t < 2 {
        return Err(Error::InvalidArg(format!(
            "speech encoder needs at least 2 signal frames, got {t}"
        )));
    }
    if d != mc.d_sig {
        return Err(Error::Shape {
            op: "s2f_forward",
            detail: format!("signal dim {} but model d_sig {}", d, mc.d_sig),
        });
    }
    let x = g.constant(signal.clone());
    let paired = g.pair_rows(x)?;
    let mut h = linear(g, b, paired, "s2f/in")?;
    h = add_positions(g, h)?;
    for i in 0..mc.s2f_layers {
        h = encoder_block(g, b, h, &format!("s2f/b{i}"))?;
    }
    linear(g, b, h, "s2f/out")
}

/// Feature sequence -> hidden sequence of the same length. Accepts both
/// ground-truth features and decoder predictions.
pub fn shared_forward(g: &mut Graph, b: &Bound, mc: &ModelConfig, z: Var) -> Result<Var> {
    let (_, d) = g.value(z).dims2();
    if d != mc.d_feat {
        return Err(Error::Shape {
            op: "shared_forward",
            detail: format!("feature dim {} but model d_feat {}", d, mc.d_feat),
        });
    }
    let mut h = linear(g, b, z, "shared/in")?;
    h = add_positions(g, h)?;
    for i in 0..mc.shared_layers {
        h = encoder_block(g, b, h, &format!("shared/b{i}"))?;
    }
    Ok(h)
}

/// Prediction-network states for prefixes of `labels`: a single-layer tanh
/// recurrence over [start, y_1, ..., y_U], one state per prefix length.
pub fn rnnt_prediction(g: &mut Graph, b: &Bound, labels: &[u16]) -> Result<Var> {
    for &y in labels {
        if y >= 256 {
            return Err(Error::InvalidArg(format!(
                "transducer label {y} outside the byte range"
            )));
        }
    }
    let table = b.var("rnnt/emb")?;
    let mut ids: Vec<usize> = Vec::with_capacity(labels.len() + 1);
    ids.push(256); // the blank row doubles as the start symbol
    ids.extend(labels.iter().map(|&y| y as usize));
    let emb = g.embedding(table, &ids)?;
    let wx = b.var("rnnt/rec_wx")?;
    let wh = b.var("rnnt/rec_wh")?;
    let bias = b.var("rnnt/rec_b")?;

    let mut states = Vec::with_capacity(ids.len());
    let mut prev: Option<Var> = None;
    for u in 0..ids.len() {
        let x_u = g.slice_rows(emb, u, u + 1)?;
        let mut pre = g.matmul(x_u, wx)?;
        if let Some(p) = prev {
            let rec = g.matmul(p, wh)?;
            pre = g.add(pre, rec)?;
        }
        let pre = g.add_row(pre, bias)?;
        let s = g.tanh(pre)?;
        states.push(s);
        prev = Some(s);
    }
    g.concat_rows(&states)
}

/// Joint network: encoder and prediction projections combined additively at
/// every lattice node, producing `[T·(U+1), 257]` logits with blank at 256.
pub fn rnnt_logits(g: &mut Graph, b: &Bound, h_enc: Var, labels: &[u16]) -> Result<Var> {
    let pred = rnnt_prediction(g, b, labels)?;
    let enc_p = linear(g, b, h_enc, "rnnt/enc")?;
    let pred_p = linear(g, b, pred, "rnnt/pred")?;
    let lattice = g.cross_add(enc_p, pred_p)?;
    let lattice = g.tanh(lattice)?;
    linear(g, b, lattice, "rnnt/joint")
}

/// Token encodings: byte embedding concatenated with language and speaker
/// embeddings (id 0 = unknown), then the text encoder stack.
pub fn text_forward(
    g: &mut Graph,
    b: &Bound,
    mc: &ModelConfig,
    ids: &[u16],
    lang_id: usize,
    spk_id: usize,
) -> Result<Var> {
    if ids.is_empty() {
        return Err(Error::InvalidArg("text encoder got an empty token sequence".into()));
    }
    for &t in ids {
        if t >= 257 {
            return Err(Error::InvalidArg(format!("text token {t} out of range (max 256)")));
        }
    }
    if lang_id >= mc.n_langs || spk_id >= mc.n_spks {
        return Err(Error::InvalidArg(format!(
            "conditioning id out of range: lang {lang_id} of {}, spk {spk_id} of {}",
            mc.n_langs, mc.n_spks
        )));
    }
    let table = b.var("text/emb")?;
    let tok_ids: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
    let tok = g.embedding(table, &tok_ids)?;
    let lang_table = b.var("text/lang_emb")?;
    let lang_row = g.embedding(lang_table, &[lang_id])?;
    let lang_bc = g.broadcast_row(lang_row, ids.len())?;
    let spk_table = b.var("text/spk_emb")?;
    let spk_row = g.embedding(spk_table, &[spk_id])?;
    let spk_bc = g.broadcast_row(spk_row, ids.len())?;
    let mut h = g.concat_cols(&[tok, lang_bc, spk_bc])?;
    h = add_positions(g, h)?;
    for i in 0..mc.text_layers {
        h = encoder_block(g, b, h, &format!("text/b{i}"))?;
    }
    Ok(h)
}

/// Strictly positive predicted frame counts per token, `[U, 1]`.
pub fn predict_durations(g: &mut Graph, b: &Bound, e: Var) -> Result<Var> {
    let h = linear(g, b, e, "duration/l1")?;
    let h = g.relu(h)?;
    let out = linear(g, b, h, "duration/l2")?;
    g.exp(out)
}

/// Hard ceiling on rounded per-token durations. The predictor's exp output
/// is unbounded, and early in training it can ask for absurd frame counts;
/// synthesis cost is linear in the sum, so each token is clamped here.
pub const MAX_TOKEN_DURATION: usize = 64;

/// Inference rounding for predicted durations: round half up, clamped to
/// `[1, MAX_TOKEN_DURATION]` frames per token.
pub fn round_durations(predicted: &[f64]) -> Vec<usize> {
    predicted
        .iter()
        .map(|&v| {
            let r = (v + 0.5).floor();
            if !(r >= 1.0) {
                1
            } else if r > MAX_TOKEN_DURATION as f64 {
                MAX_TOKEN_DURATION
            } else {
                r as usize
            }
        })
        .collect()
}

/// Repeat token `i` `durations[i]` times and append a positional ramp column
/// that runs 0 → 1 within each repeat (a lone frame gets 0).
pub fn upsample(g: &mut Graph, e: Var, durations: &[usize]) -> Result<Var> {
    let (u, _) = g.value(e).dims2();
    if durations.len() != u {
        return Err(Error::Shape {
            op: "upsample",
            detail: format!("{u} tokens but {} durations", durations.len()),
        });
    }
    if let Some(i) = durations.iter().position(|&d| d == 0) {
        return Err(Error::InvalidArg(format!(
            "token {i} has zero duration; repair the alignment before upsampling"
        )));
    }
    let rep = g.repeat_rows(e, durations)?;
    let total: usize = durations.iter().sum();
    let mut ramp = Vec::with_capacity(total);
    for &d in durations {
        for j in 0..d {
            ramp.push(if d == 1 { 0.0 } else { j as f64 / (d - 1) as f64 });
        }
    }
    let ramp = g.constant(Tensor::new(vec![total, 1], ramp)?);
    g.concat_cols(&[rep, ramp])
}

/// K iterative feature refinements. Each iteration sees the upsampled
/// encodings, the broadcast latent, and the previous iteration's output;
/// the last element is the Ẑ used for synthesis.
pub fn decode_features(
    g: &mut Graph,
    b: &Bound,
    mc: &ModelConfig,
    upsampled: Var,
    latent: Var,
) -> Result<Vec<Var>> {
    let (t, _) = g.value(upsampled).dims2();
    let (lr, lc) = g.value(latent).dims2();
    if lr != 1 || lc != mc.vae_dim {
        return Err(Error::Shape {
            op: "decode_features",
            detail: format!("latent {:?}, expected [1, {}]", g.value(latent).shape(), mc.vae_dim),
        });
    }
    let lat_bc = g.broadcast_row(latent, t)?;
    let mut prev = g.constant(Tensor::zeros(vec![t, mc.d_feat])?);
    let mut outs = Vec::with_capacity(mc.refinements);
    for k in 0..mc.refinements {
        let inp = g.concat_cols(&[upsampled, lat_bc, prev])?;
        let mut h = linear(g, b, inp, &format!("decoder/it{k}/in"))?;
        h = add_positions(g, h)?;
        for i in 0..mc.decoder_layers {
            h = encoder_block(g, b, h, &format!("decoder/it{k}/b{i}"))?;
        }
        let zhat = linear(g, b, h, &format!("decoder/it{k}/out"))?;
        outs.push(zhat);
        prev = zhat;
    }
    Ok(outs)
}

/// Global Gaussian posterior over mean-pooled features: `([1, vae_dim] mean,
/// [1, vae_dim] log-variance)`.
pub fn vae_posterior(g: &mut Graph, b: &Bound, z: Var) -> Result<(Var, Var)> {
    let pooled = g.mean_rows(z)?;
    let h = linear(g, b, pooled, "vae/l1")?;
    let h = g.relu(h)?;
    let mu = linear(g, b, h, "vae/mu")?;
    let lv = linear(g, b, h, "vae/lv")?;
    Ok((mu, lv))
}

/// Reparameterized posterior sample `mu + exp(lv/2) ⊙ eps` for a fixed
/// noise draw.
pub fn reparam_sample(g: &mut Graph, mu: Var, lv: Var, eps: &Tensor) -> Result<Var> {
    let half = g.scale(lv, 0.5)?;
    let sd = g.exp(half)?;
    let e = g.constant(eps.clone());
    let scaled = g.mul(sd, e)?;
    g.add(mu, scaled)
}

/// A standard-normal draw from the latent prior, `[1, vae_dim]`.
pub fn prior_sample(vae_dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    Tensor::new(
        vec![1, vae_dim],
        (0..vae_dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::ParamStore;
    use crate::rng;

    fn mc() -> ModelConfig {
        ModelConfig {
            hidden_dim: 24,
            n_langs: 4,
            n_spks: 6,
            ..ModelConfig::default()
        }
    }

    fn store() -> ParamStore {
        ParamStore::init(&mc(), 17).unwrap()
    }

    fn random_signal(t: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::rng_for(seed, &[99]);
        Tensor::randn(vec![t, d], 1.0, &mut r).unwrap()
    }

    #[test]
    fn speech_encoder_halves_ten_frames_to_five() {
        let st = store();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        let z = s2f_forward(&mut g, &b, &st.config, &random_signal(10, 16, 1)).unwrap();
        assert_eq!(g.value(z).shape(), &[5, 8]);
        let mut g2 = Graph::new();
        let b2 = st.bind(&mut g2, &[]).unwrap();
        let z2 = s2f_forward(&mut g2, &b2, &st.config, &random_signal(7, 16, 1)).unwrap();
        assert_eq!(g2.value(z2).shape(), &[4, 8]);
    }

    #[test]
    fn speech_encoder_rejects_degenerate_input() {
        let st = store();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        assert!(s2f_forward(&mut g, &b, &st.config, &random_signal(1, 16, 1)).is_err());
    }

    #[test]
    fn speech_encoder_is_deterministic() {
        let st = store();
        let sig = random_signal(8, 16, 2);
        let run = || {
            let mut g = Graph::new();
            let b = st.bind(&mut g, &[]).unwrap();
            let z = s2f_forward(&mut g, &b, &st.config, &sig).unwrap();
            g.value(z).data().to_vec()
        };
        let a: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = run().iter().map(|v| v.to_bits()).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn shared_encoder_preserves_length_and_feeds_gradients_back() {
        let st = store();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        let z = g.leaf(random_signal(6, 8, 3), true);
        let h = shared_forward(&mut g, &b, &st.config, z).unwrap();
        assert_eq!(g.value(h).shape(), &[6, 24]);
        let loss = g.mean(h).unwrap();
        g.backward(loss).unwrap();
        let grad = g.grad(z).expect("gradient should reach the encoder input");
        assert!(grad.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn transducer_lattice_has_byte_plus_blank_width() {
        let st = store();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        let h = g.constant(random_signal(5, 24, 4));
        let logits = rnnt_logits(&mut g, &b, h, &[10, 20, 30]).unwrap();
        assert_eq!(g.value(logits).shape(), &[5 * 4, 257]);
    }

    #[test]
    fn changing_a_label_leaves_shorter_prefixes_untouched() {
        let st = store();
        let enc = random_signal(3, 24, 5);
        let run = |labels: &[u16]| {
            let mut g = Graph::new();
            let b = st.bind(&mut g, &[]).unwrap();
            let h = g.constant(enc.clone());
            let l = rnnt_logits(&mut g, &b, h, labels).unwrap();
            g.value(l).data().to_vec()
        };
        let base = run(&[5, 6, 7]);
        let changed = run(&[5, 9, 7]);
        let u_plus_1 = 4;
        for (i, (a, c)) in base.iter().zip(&changed).enumerate() {
            let prefix = (i / 257) % u_plus_1;
            if prefix <= 1 {
                assert_eq!(a.to_bits(), c.to_bits(), "row prefix {prefix} moved");
            }
        }
        let moved = base
            .iter()
            .zip(&changed)
            .enumerate()
            .any(|(i, (a, c))| (i / 257) % u_plus_1 == 2 && a != c);
        assert!(moved, "changing label 2 should move prefix-2 rows");
    }

    #[test]
    fn unknown_conditioning_ids_share_the_oov_row() {
        let st = store();
        let reg = crate::textproc::IdRegistry::build(
            &["a00".into(), "a01".into()],
            &["spk_a".into()],
        );
        let run = |lang: &str, spk: &str| {
            let mut g = Graph::new();
            let b = st.bind(&mut g, &[]).unwrap();
            let e = text_forward(
                &mut g,
                &b,
                &st.config,
                &[1, 2, 3],
                reg.language_id(lang),
                reg.speaker_id(spk),
            )
            .unwrap();
            g.value(e).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run("martian", "nobody"), run("venusian", "anon"));
        assert_ne!(run("a00", "nobody"), run("martian", "nobody"));
    }

    #[test]
    fn text_encoder_validates_tokens_and_mask_token_passes() {
        let st = store();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        assert!(text_forward(&mut g, &b, &st.config, &[0, 256, 42], 1, 1).is_ok());
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        let err = text_forward(&mut g, &b, &st.config, &[257], 1, 1)
            .unwrap_err()
            .to_string();
        assert!(err.contains("257"), "{err}");
    }

    #[test]
    fn durations_are_positive_and_round_with_floor_one() {
        let st = store();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        let e = text_forward(&mut g, &b, &st.config, &[1, 2, 3, 4], 1, 2).unwrap();
        let d = predict_durations(&mut g, &b, e).unwrap();
        assert_eq!(g.value(d).shape(), &[4, 1]);
        assert!(g.value(d).data().iter().all(|&v| v > 0.0));
        assert_eq!(round_durations(&[0.4, 2.6]), vec![1, 3]);
        assert_eq!(round_durations(&[0.01, 1.5, 1.49]), vec![1, 2, 1]);
        assert_eq!(round_durations(&[1e9, 64.4, 63.5]), vec![64, 64, 64]);
        assert_eq!(round_durations(&[f64::NAN]), vec![1]);
    }

    #[test]
    fn upsample_repeats_tokens_and_ramps_positions() {
        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let up = upsample(&mut g, e, &[2, 3]).unwrap();
        assert_eq!(g.value(up).shape(), &[5, 4]);
        let ramp: Vec<f64> = (0..5).map(|r| g.value(up).row(r)[3]).collect();
        assert_eq!(ramp, vec![0.0, 1.0, 0.0, 0.5, 1.0]);
        assert_eq!(g.value(up).row(2)[..3], [4., 5., 6.]);

        let mut g = Graph::new();
        let e = g.constant(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap());
        let err = upsample(&mut g, e, &[1, 0]).unwrap_err().to_string();
        assert!(err.contains("zero duration"), "{err}");
    }

    #[test]
    fn decoder_emits_k_refinements_and_latents_matter() {
        let st = store();
        let z_for = |latent_seed: u64| {
            let mut g = Graph::new();
            let b = st.bind(&mut g, &[]).unwrap();
            let e = text_forward(&mut g, &b, &st.config, &[1, 2], 1, 1).unwrap();
            let up = upsample(&mut g, e, &[2, 2]).unwrap();
            let mut r = rng::rng_for(latent_seed, &[7]);
            let lat = g.constant(prior_sample(st.config.vae_dim, &mut r).unwrap());
            let outs = decode_features(&mut g, &b, &st.config, up, lat).unwrap();
            assert_eq!(outs.len(), st.config.refinements);
            for &o in &outs {
                assert_eq!(g.value(o).shape(), &[4, st.config.d_feat]);
            }
            g.value(outs[outs.len() - 1]).data().to_vec()
        };
        let a = z_for(1);
        let b = z_for(2);
        let dist: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
        assert!(dist > 0.0, "different prior samples should give different features");
    }

    #[test]
    fn posterior_is_deterministic_and_reparameterization_matches_formula() {
        let st = store();
        let mut g = Graph::new();
        let b = st.bind(&mut g, &[]).unwrap();
        let z = g.constant(random_signal(5, 8, 9));
        let (mu, lv) = vae_posterior(&mut g, &b, z).unwrap();
        assert_eq!(g.value(mu).shape(), &[1, st.config.vae_dim]);
        assert_eq!(g.value(lv).shape(), &[1, st.config.vae_dim]);
        let eps = Tensor::new(vec![1, st.config.vae_dim], vec![2.0; st.config.vae_dim]).unwrap();
        let s = reparam_sample(&mut g, mu, lv, &eps).unwrap();
        for i in 0..st.config.vae_dim {
            let want = g.value(mu).data()[i] + (0.5 * g.value(lv).data()[i]).exp() * 2.0;
            assert!((g.value(s).data()[i] - want).abs() < 1e-12);
        }
    }
}
