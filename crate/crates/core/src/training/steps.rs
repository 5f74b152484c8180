//! The five training step types. Each consumes one drawn batch, builds one
//! graph per item, averages the per-item losses, backpropagates once, and
//! applies a single clipped Adam update to the step's trainable groups.
//! Items whose loss degenerates numerically are skipped and counted.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::Rng;

use crate::corpus::RecordKind;
use crate::eval::{greedy_decode, MAX_EMISSIONS_PER_FRAME};
use crate::losses::bestrq::{apply_span_noise, RandomQuantizer};
use crate::losses::rnnt::{rnnt_loss, rnnt_viterbi_durations};
use crate::losses::{
    check_weighted_sum, duration_loss, iterative_l1, kl_divergence, kl_weight,
    masked_position_cross_entropy, LossWeights, StepKind, TrainStepReport,
};
use crate::model::blocks::linear;
use crate::model::forward::{
    decode_features, predict_durations, prior_sample, reparam_sample, rnnt_logits,
    round_durations, s2f_forward, shared_forward, text_forward, upsample, vae_posterior,
};
use crate::model::{Bound, ModelConfig, ParamStore, GROUPS};
use crate::num::{AdamHyper, Graph, Tensor, Var};
use crate::rng::{self, purpose};
use crate::textproc::{mask_spans, span_mask_flags, tokenize, ByteSeq, UNKNOWN_ID};
use crate::training::data::TrainItem;
use crate::{Error, Result};

// ── trainable-group sets per step type ──────────────────────────────────

pub const TRAIN_STAGE1_SPEECH: &[&str] = &["s2f", "shared"];
pub const TRAIN_STAGE1_TEXT: &[&str] = &["text"];
pub const TRAIN_STAGE2: &[&str] = &["shared", "rnnt"];
pub const TRAIN_SUPERVISED: &[&str] = &["shared", "rnnt", "text", "duration", "decoder", "vae"];
pub const TRAIN_UNSPOKEN: &[&str] = &["text", "decoder"];
pub const TRAIN_UNTRANSCRIBED: &[&str] = &["text", "duration", "decoder", "vae"];
pub const TRAIN_EVAL_ASR: &[&str] = &["s2f", "shared", "rnnt"];

/// Step-invariant knobs shared by all step functions.
#[derive(Clone, Debug)]
pub struct StepConfig {
    pub mc: ModelConfig,
    pub weights: LossWeights,
    pub hyper: AdamHyper,
    pub seed: u64,
    pub max_grad_norm: f64,
    /// Text masking: span length and target masked fraction.
    pub mask_span: usize,
    pub mask_ratio: f64,
    /// Signal-frame masking for masked speech pretraining.
    pub sig_mask_span: usize,
    pub sig_mask_ratio: f64,
    pub sig_noise_std: f64,
}

/// Pseudo-labels from an external recognizer, keyed by the corpus-relative
/// signal path. File format: one `path<TAB>text` line per utterance.
pub struct ExternalLabels {
    map: BTreeMap<String, ByteSeq>,
}

impl ExternalLabels {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut map = BTreeMap::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (rel, text) = line.split_once('\t').ok_or_else(|| {
                Error::Format(format!(
                    "{}:{}: expected `signal_path<TAB>text`",
                    path.display(),
                    i + 1
                ))
            })?;
            map.insert(rel.to_string(), tokenize(text)?);
        }
        Ok(ExternalLabels { map })
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, ByteSeq)>) -> Self {
        ExternalLabels { map: pairs.into_iter().collect() }
    }

    pub fn get(&self, signal_rel: &str) -> Option<&ByteSeq> {
        self.map.get(signal_rel)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

// ── shared helpers ──────────────────────────────────────────────────────

/// Conditioning dropout: each of the language and speaker ids independently
/// falls back to the unknown row. Draws are keyed by (step, item index) so
/// re-running a step over the same batch sees identical dropout.
pub fn cfg_dropout(
    seed: u64,
    step: u64,
    idx: u64,
    prob: f64,
    lang_id: usize,
    spk_id: usize,
) -> (usize, usize) {
    let mut rng = rng::rng_for(seed, &[purpose::CFG_DROPOUT, step, idx]);
    let drop_lang = rng.gen::<f64>() < prob;
    let drop_spk = rng.gen::<f64>() < prob;
    (
        if drop_lang { UNKNOWN_ID } else { lang_id },
        if drop_spk { UNKNOWN_ID } else { spk_id },
    )
}

/// Pre-clip gradient L2 norm of every parameter group, frozen ones included
/// (they read exactly zero).
fn per_group_grad_norms(g: &Graph, b: &Bound, store: &ParamStore) -> Result<Vec<(String, f64)>> {
    let mut out = Vec::with_capacity(GROUPS.len());
    for gname in GROUPS {
        let group = store.group(gname)?;
        let mut sq = 0.0;
        for name in group.param_names() {
            if let Some(grad) = g.grad(b.var(name)?) {
                sq += grad.iter().map(|x| x * x).sum::<f64>();
            }
        }
        out.push((gname.to_string(), sq.sqrt()));
    }
    Ok(out)
}

fn scalar(g: &Graph, v: Var) -> f64 {
    g.value(v).data()[0]
}

/// Mean of per-item scalar losses as a graph node.
fn mean_of(g: &mut Graph, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / terms.len() as f64)
}

/// True only for the failures that mean "this item degenerated numerically",
/// which a step survives by skipping the item.
fn is_skippable(e: &Error) -> bool {
    matches!(e, Error::Numeric(_))
}

// ── the supervised item core ────────────────────────────────────────────

/// Per-item losses of the joint speech-text objective.
struct ItemLosses {
    l_feature: Var,
    l_kl: Var,
    l_dur: Var,
    l_rnnt: Var,
}

/// One paired item through the full joint objective: recognition loss on
/// the acoustic path, then alignment-derived durations driving the
/// text-to-feature path with a posterior latent. Shared by the supervised
/// step and the pseudo-labeled untranscribed step, which differ only in
/// where `labels` come from and which groups the bound store trains.
fn supervised_item(
    g: &mut Graph,
    b: &Bound,
    cfg: &StepConfig,
    step: u64,
    idx: u64,
    signal: &Tensor,
    labels: &ByteSeq,
    lang_id: usize,
    spk_id: usize,
) -> Result<ItemLosses> {
    let mc = &cfg.mc;
    // Acoustic path.
    let z = s2f_forward(g, b, mc, signal)?;
    let h_enc = shared_forward(g, b, mc, z)?;
    let logits = rnnt_logits(g, b, h_enc, labels.ids())?;
    let logits_value = g.value(logits).clone();
    let rnnt = rnnt_loss(&logits_value, labels)?;
    let l_rnnt = g.scalar_with_grad(logits, rnnt.loss, rnnt.grad_logits)?;

    // Alignment audit: the extracted durations must cover every feature
    // frame with every token accounted for.
    let (t_feat, _) = g.value(z).dims2();
    let ali = rnnt_viterbi_durations(&logits_value, labels)?;
    if ali.total_frames() != t_feat || ali.len() != labels.len() {
        return Err(Error::Contract(format!(
            "alignment covers {} of {t_feat} frames over {} of {} tokens",
            ali.total_frames(),
            ali.len(),
            labels.len()
        )));
    }
    let durations = ali.repaired_min_one()?;

    // Text path, conditioned with dropout.
    let (lang_id, spk_id) =
        cfg_dropout(cfg.seed, step, idx, mc.cfg_dropout_prob, lang_id, spk_id);
    let e_text = text_forward(g, b, mc, labels.ids(), lang_id, spk_id)?;
    let pred_dur = predict_durations(g, b, e_text)?;
    let l_dur = duration_loss(g, pred_dur, &durations.durations)?;
    let up = upsample(g, e_text, &durations.durations)?;

    // Posterior latent over the ground-truth features.
    let (mu, lv) = vae_posterior(g, b, z)?;
    let l_kl = kl_divergence(g, mu, lv)?;
    let mut eps_rng = rng::rng_for(cfg.seed, &[purpose::POSTERIOR, step, idx]);
    let eps = prior_sample(mc.vae_dim, &mut eps_rng)?;
    let latent = reparam_sample(g, mu, lv, &eps)?;

    // Feature reconstruction against the (detached) acoustic features.
    let target = g.detach(z);
    let feats = decode_features(g, b, mc, up, latent)?;
    let l_feature = iterative_l1(g, &feats, target)?;

    Ok(ItemLosses { l_feature, l_kl, l_dur, l_rnnt })
}

/// Assemble the weighted joint loss from batch-mean terms, in the fixed
/// association order the report checker recomputes.
fn assemble_joint(
    g: &mut Graph,
    w: &LossWeights,
    klw: f64,
    mf: Var,
    mk: Var,
    md: Var,
    mr: Var,
) -> Result<Var> {
    let a = g.scale(mf, w.w_feature)?;
    let k = g.scale(mk, klw)?;
    let ak = g.add(a, k)?;
    let d = g.scale(md, w.w_dur)?;
    let akd = g.add(ak, d)?;
    let r = g.scale(mr, w.w_rnnt)?;
    g.add(akd, r)
}

/// Run the joint objective over resolved (signal, labels, ids) tuples.
/// `kind` and the trainable set are what distinguish the supervised step
/// from the pseudo-labeled one.
fn joint_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    kind: StepKind,
    trainable: &[&str],
    step: u64,
    batch: &[(usize, &TrainItem, &ByteSeq)],
    total_items: usize,
) -> Result<TrainStepReport> {
    let mut report = TrainStepReport::new(kind, step);
    report.items_skipped = total_items - batch.len();
    if batch.is_empty() {
        return Ok(report);
    }
    let mut g = Graph::new();
    let b = store.bind(&mut g, trainable)?;
    let mut lf = Vec::new();
    let mut lk = Vec::new();
    let mut ld = Vec::new();
    let mut lr = Vec::new();
    for &(idx, item, labels) in batch {
        let signal = item.signal.as_ref().ok_or_else(|| {
            Error::Contract(format!("item {idx} reached the joint step without a signal"))
        })?;
        // Length filter: more tokens than feature frames cannot be given
        // one frame each, so the duration-driven path has no valid target.
        let t_feat = signal.dims2().0.div_ceil(2);
        if labels.len() > t_feat {
            report.items_skipped += 1;
            continue;
        }
        match supervised_item(
            &mut g, &b, cfg, step, idx as u64, signal, labels, item.lang_id, item.spk_id,
        ) {
            Ok(losses) => {
                lf.push(losses.l_feature);
                lk.push(losses.l_kl);
                ld.push(losses.l_dur);
                lr.push(losses.l_rnnt);
            }
            Err(e) if is_skippable(&e) => report.items_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    report.items = lf.len();
    if report.items == 0 {
        return Ok(report);
    }
    let mf = mean_of(&mut g, &lf)?;
    let mk = mean_of(&mut g, &lk)?;
    let md = mean_of(&mut g, &ld)?;
    let mr = mean_of(&mut g, &lr)?;
    let klw = kl_weight(step, &cfg.weights);
    let l_sup = assemble_joint(&mut g, &cfg.weights, klw, mf, mk, md, mr)?;

    g.backward(l_sup)?;
    report.l_feature = Some(scalar(&g, mf));
    report.l_kl = Some(scalar(&g, mk));
    report.l_dur = Some(scalar(&g, md));
    report.l_rnnt = Some(scalar(&g, mr));
    report.l_sup = Some(scalar(&g, l_sup));
    report.kl_weight_applied = Some(klw);
    report.grad_norms = per_group_grad_norms(&g, &b, store)?;
    check_weighted_sum(&report, &cfg.weights)?;
    store.apply_gradients(&g, &b, &cfg.hyper, cfg.max_grad_norm)?;
    Ok(report)
}

// ── step types ──────────────────────────────────────────────────────────

/// Joint training on transcribed speech. When `forbidden_langs` is given,
/// paired data from those languages is a contract violation (the audit for
/// the zero-resource condition).
pub fn supervised_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    step: u64,
    items: &[&TrainItem],
    forbidden_langs: Option<&BTreeSet<String>>,
) -> Result<TrainStepReport> {
    if let Some(forbidden) = forbidden_langs {
        if let Some(item) = items.iter().find(|it| forbidden.contains(&it.lang)) {
            return Err(Error::Contract(format!(
                "paired data for {} must not be trained on under this condition",
                item.lang
            )));
        }
    }
    let batch: Vec<(usize, &TrainItem, &ByteSeq)> = items
        .iter()
        .enumerate()
        .map(|(i, it)| {
            it.tokens
                .as_ref()
                .map(|t| (i, *it, t))
                .ok_or_else(|| Error::Contract(format!("supervised item {i} has no transcript")))
        })
        .collect::<Result<_>>()?;
    joint_step(store, cfg, StepKind::Supervised, TRAIN_SUPERVISED, step, &batch, items.len())
}

/// Joint training on untranscribed speech driven by pseudo-labels: from the
/// external table when one covers the item, otherwise the model's own
/// greedy hypothesis. Items with an empty hypothesis are skipped; the
/// acoustic recognition path stays frozen.
pub fn untranscribed_speech_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    step: u64,
    items: &[&TrainItem],
    external: Option<&ExternalLabels>,
) -> Result<TrainStepReport> {
    let mut hyps: Vec<Option<ByteSeq>> = Vec::with_capacity(items.len());
    for item in items {
        let signal = item
            .signal
            .as_ref()
            .ok_or_else(|| Error::Contract("untranscribed item has no signal".into()))?;
        let ext = item
            .signal_rel
            .as_deref()
            .and_then(|rel| external.and_then(|e| e.get(rel)));
        let hyp: ByteSeq = match ext {
            Some(h) => h.clone(),
            None => {
                let z = acoustic_features(store, &cfg.mc, signal)?;
                greedy_decode(store, &z, MAX_EMISSIONS_PER_FRAME)?.0
            }
        };
        hyps.push(if hyp.is_empty() { None } else { Some(hyp) });
    }
    let batch: Vec<(usize, &TrainItem, &ByteSeq)> = items
        .iter()
        .zip(&hyps)
        .enumerate()
        .filter_map(|(i, (it, h))| h.as_ref().map(|h| (i, *it, h)))
        .collect();
    joint_step(
        store,
        cfg,
        StepKind::UntranscribedSpeech,
        TRAIN_UNTRANSCRIBED,
        step,
        &batch,
        items.len(),
    )
}

/// The acoustic feature sequence of a signal, computed off-graph for
/// decoding.
pub fn acoustic_features(store: &ParamStore, mc: &ModelConfig, signal: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let b = store.bind(&mut g, &[])?;
    let z = s2f_forward(&mut g, &b, mc, signal)?;
    Ok(g.value(z).clone())
}

/// Text-to-feature training on unspoken text: masked tokens in, rounded
/// predicted durations, a prior latent, and recognition loss on the decoded
/// features against the original bytes through the frozen acoustic path.
pub fn unspoken_text_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    step: u64,
    items: &[&TrainItem],
) -> Result<TrainStepReport> {
    let mc = cfg.mc.clone();
    let mut report = TrainStepReport::new(StepKind::UnspokenText, step);
    let mut g = Graph::new();
    let b = store.bind(&mut g, TRAIN_UNSPOKEN)?;
    let mut lr = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let tokens = item.tokens.as_ref().ok_or_else(|| {
            Error::Contract(format!("text item {idx} has no tokens"))
        })?;
        let mut mask_rng = rng::rng_for(cfg.seed, &[purpose::MASKING, step, idx as u64]);
        let masked = mask_spans(tokens, cfg.mask_span, cfg.mask_ratio, &mut mask_rng)?;
        let run = (|| -> Result<Var> {
            let e_text = text_forward(&mut g, &b, &mc, &masked.masked, item.lang_id, UNKNOWN_ID)?;
            let pred_dur = predict_durations(&mut g, &b, e_text)?;
            let durations = round_durations(g.value(pred_dur).data());
            let up = upsample(&mut g, e_text, &durations)?;
            let mut prior_rng = rng::rng_for(cfg.seed, &[purpose::PRIOR, step, idx as u64]);
            let latent_t = prior_sample(mc.vae_dim, &mut prior_rng)?;
            let latent = g.constant(latent_t);
            let feats = decode_features(&mut g, &b, &mc, up, latent)?;
            let z_hat = *feats.last().expect("refinements are validated positive");
            let h_enc = shared_forward(&mut g, &b, &mc, z_hat)?;
            let logits = rnnt_logits(&mut g, &b, h_enc, tokens.ids())?;
            let logits_value = g.value(logits).clone();
            let rnnt = rnnt_loss(&logits_value, tokens)?;
            g.scalar_with_grad(logits, rnnt.loss, rnnt.grad_logits)
        })();
        match run {
            Ok(l) => lr.push(l),
            Err(e) if is_skippable(&e) => report.items_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    report.items = lr.len();
    if report.items == 0 {
        return Ok(report);
    }
    let mr = mean_of(&mut g, &lr)?;
    g.backward(mr)?;
    report.l_rnnt = Some(scalar(&g, mr));
    report.grad_norms = per_group_grad_norms(&g, &b, store)?;
    store.apply_gradients(&g, &b, &cfg.hyper, cfg.max_grad_norm)?;
    Ok(report)
}

/// Masked speech pretraining: quantize the clean signal, corrupt masked
/// spans, and predict the codes of masked frames from the encoder output
/// through two per-parity heads (each feature frame covers two signal
/// frames).
pub fn bestrq_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    step: u64,
    items: &[&TrainItem],
    quantizer: &RandomQuantizer,
) -> Result<TrainStepReport> {
    let mc = cfg.mc.clone();
    let mut report = TrainStepReport::new(StepKind::Stage1, step);
    let mut g = Graph::new();
    let b = store.bind(&mut g, TRAIN_STAGE1_SPEECH)?;
    let mut lb = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let signal = item.signal.as_ref().ok_or_else(|| {
            Error::Contract(format!("speech item {idx} has no signal"))
        })?;
        let (t_sig, _) = signal.dims2();
        let codes = quantizer.quantize_rows(signal)?;
        let mut mask_rng = rng::rng_for(cfg.seed, &[purpose::MASKING, step, idx as u64]);
        let flags = span_mask_flags(t_sig, cfg.sig_mask_span, cfg.sig_mask_ratio, &mut mask_rng)?;
        if flags.iter().all(|&f| f) {
            // No unmasked context to learn from; too short for this config.
            report.items_skipped += 1;
            continue;
        }
        let mut noise_rng = rng::rng_for(cfg.seed, &[purpose::MASK_NOISE, step, idx as u64]);
        let noised = apply_span_noise(signal, &flags, cfg.sig_noise_std, &mut noise_rng)?;
        let z = s2f_forward(&mut g, &b, &mc, &noised)?;
        let h = shared_forward(&mut g, &b, &mc, z)?;
        let (t_feat, _) = g.value(h).dims2();

        // Masked positions per parity: feature frame i covers signal frames
        // 2i and 2i+1 (an odd tail frame only the former).
        let mut pos = [Vec::new(), Vec::new()];
        let mut tgt = [Vec::new(), Vec::new()];
        for i in 0..t_feat {
            for (parity, s) in [(0usize, 2 * i), (1usize, 2 * i + 1)] {
                if s < t_sig && flags[s] {
                    pos[parity].push(i);
                    tgt[parity].push(codes[s]);
                }
            }
        }
        let mut head_losses: Vec<(Var, usize)> = Vec::new();
        for (parity, prefix) in [(0usize, "shared/bestrq_even"), (1usize, "shared/bestrq_odd")] {
            if pos[parity].is_empty() {
                continue;
            }
            let logits = linear(&mut g, &b, h, prefix)?;
            let ce = masked_position_cross_entropy(&mut g, logits, &pos[parity], &tgt[parity])?;
            head_losses.push((ce, pos[parity].len()));
        }
        if head_losses.is_empty() {
            return Err(Error::Contract(
                "masking produced no prediction targets despite masked frames".into(),
            ));
        }
        // Combine heads weighted by how many positions each one scores.
        let total: usize = head_losses.iter().map(|&(_, n)| n).sum();
        let mut item_loss: Option<Var> = None;
        for (ce, n) in head_losses {
            let wterm = g.scale(ce, n as f64 / total as f64)?;
            item_loss = Some(match item_loss {
                None => wterm,
                Some(acc) => g.add(acc, wterm)?,
            });
        }
        lb.push(item_loss.expect("at least one head contributed"));
    }
    report.items = lb.len();
    if report.items == 0 {
        return Ok(report);
    }
    let mb = mean_of(&mut g, &lb)?;
    g.backward(mb)?;
    report.l_bestrq = Some(scalar(&g, mb));
    report.grad_norms = per_group_grad_norms(&g, &b, store)?;
    store.apply_gradients(&g, &b, &cfg.hyper, cfg.max_grad_norm)?;
    Ok(report)
}

/// Masked-token pretraining of the text encoder: span-masked bytes in,
/// original bytes out at the masked positions.
pub fn mlm_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    step: u64,
    items: &[&TrainItem],
) -> Result<TrainStepReport> {
    let mc = cfg.mc.clone();
    let mut report = TrainStepReport::new(StepKind::Stage1, step);
    let mut g = Graph::new();
    let b = store.bind(&mut g, TRAIN_STAGE1_TEXT)?;
    let mut lm = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let tokens = item.tokens.as_ref().ok_or_else(|| {
            Error::Contract(format!("text item {idx} has no tokens"))
        })?;
        let mut mask_rng = rng::rng_for(cfg.seed, &[purpose::MASKING, step, idx as u64]);
        let masked = mask_spans(tokens, cfg.mask_span, cfg.mask_ratio, &mut mask_rng)?;
        let e = text_forward(&mut g, &b, &mc, &masked.masked, item.lang_id, UNKNOWN_ID)?;
        let logits = linear(&mut g, &b, e, "text/mlm")?;
        let targets: Vec<usize> = masked.targets.iter().map(|&t| t as usize).collect();
        let ce = masked_position_cross_entropy(&mut g, logits, &masked.positions, &targets)?;
        lm.push(ce);
    }
    report.items = lm.len();
    if report.items == 0 {
        return Ok(report);
    }
    let mm = mean_of(&mut g, &lm)?;
    g.backward(mm)?;
    report.l_mlm = Some(scalar(&g, mm));
    report.grad_norms = per_group_grad_norms(&g, &b, store)?;
    store.apply_gradients(&g, &b, &cfg.hyper, cfg.max_grad_norm)?;
    Ok(report)
}

/// Recognition-only training on paired data. The trainable set is the
/// caller's: the warm-start stage adapts `shared`+`rnnt`, the evaluation
/// recognizer trains its whole acoustic path.
pub fn asr_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    step: u64,
    items: &[&TrainItem],
    trainable: &[&str],
) -> Result<TrainStepReport> {
    let mc = cfg.mc.clone();
    let mut report = TrainStepReport::new(StepKind::Stage2Asr, step);
    let mut g = Graph::new();
    let b = store.bind(&mut g, trainable)?;
    let mut lr = Vec::new();
    for (idx, item) in items.iter().enumerate() {
        let (signal, tokens) = match (&item.signal, &item.tokens) {
            (Some(s), Some(t)) => (s, t),
            _ => {
                return Err(Error::Contract(format!(
                    "recognition training item {idx} is not a paired record"
                )))
            }
        };
        let run = (|| -> Result<Var> {
            let z = s2f_forward(&mut g, &b, &mc, signal)?;
            let h = shared_forward(&mut g, &b, &mc, z)?;
            let logits = rnnt_logits(&mut g, &b, h, tokens.ids())?;
            let logits_value = g.value(logits).clone();
            let rnnt = rnnt_loss(&logits_value, tokens)?;
            g.scalar_with_grad(logits, rnnt.loss, rnnt.grad_logits)
        })();
        match run {
            Ok(l) => lr.push(l),
            Err(e) if is_skippable(&e) => report.items_skipped += 1,
            Err(e) => return Err(e),
        }
    }
    report.items = lr.len();
    if report.items == 0 {
        return Ok(report);
    }
    let mr = mean_of(&mut g, &lr)?;
    g.backward(mr)?;
    report.l_rnnt = Some(scalar(&g, mr));
    report.grad_norms = per_group_grad_norms(&g, &b, store)?;
    store.apply_gradients(&g, &b, &cfg.hyper, cfg.max_grad_norm)?;
    Ok(report)
}

/// One pretraining step: a masked-speech update and, when text items are
/// given, a masked-token update, merged into a single report.
pub fn stage1_step(
    store: &mut ParamStore,
    cfg: &StepConfig,
    step: u64,
    speech_items: &[&TrainItem],
    text_items: Option<&[&TrainItem]>,
    quantizer: &RandomQuantizer,
) -> Result<TrainStepReport> {
    let speech = bestrq_step(store, cfg, step, speech_items, quantizer)?;
    let text = match text_items {
        Some(items) => Some(mlm_step(store, cfg, step, items)?),
        None => None,
    };
    Ok(merge_stage1(speech, text))
}

/// Merge the two pretraining sub-reports. The per-group norms combine as
/// root-sum-square; the two updates touch disjoint groups, so each group's
/// value is just whichever update produced it.
fn merge_stage1(speech: TrainStepReport, text: Option<TrainStepReport>) -> TrainStepReport {
    let mut merged = speech;
    if let Some(t) = text {
        merged.l_mlm = t.l_mlm;
        merged.items += t.items;
        merged.items_skipped += t.items_skipped;
        if merged.grad_norms.is_empty() {
            merged.grad_norms = t.grad_norms;
        } else if !t.grad_norms.is_empty() {
            for (a, b) in merged.grad_norms.iter_mut().zip(&t.grad_norms) {
                debug_assert_eq!(a.0, b.0);
                a.1 = (a.1 * a.1 + b.1 * b.1).sqrt();
            }
        }
    }
    merged
}

/// Which step kind handles a drawn record kind in joint training.
pub fn kind_to_step(kind: RecordKind) -> StepKind {
    match kind {
        RecordKind::Paired => StepKind::Supervised,
        RecordKind::SpeechOnly => StepKind::UntranscribedSpeech,
        RecordKind::TextOnly => StepKind::UnspokenText,
    }
}

// ── tests ───────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::check_weighted_sum;

    fn small_mc() -> ModelConfig {
        ModelConfig {
            s2f_layers: 1,
            shared_layers: 1,
            text_layers: 1,
            decoder_layers: 1,
            hidden_dim: 24,
            d_feat: 8,
            d_sig: 16,
            vae_dim: 4,
            n_langs: 5,
            n_spks: 7,
            cfg_dropout_prob: 0.1,
            refinements: 2,
            bestrq_codes: 8,
        }
    }

    fn small_cfg(mc: &ModelConfig) -> StepConfig {
        StepConfig {
            mc: mc.clone(),
            weights: LossWeights::default(),
            hyper: AdamHyper::default(),
            seed: 7,
            max_grad_norm: 5.0,
            mask_span: 2,
            mask_ratio: 0.3,
            sig_mask_span: 4,
            sig_mask_ratio: 0.15,
            sig_noise_std: 0.5,
        }
    }

    fn paired_item(seed: u64, t_sig: usize, labels: &[u16]) -> TrainItem {
        let mut rng = rng::rng_for(seed, &[0x7e57, t_sig as u64]);
        TrainItem {
            lang: format!("lang{}", seed % 3),
            lang_id: 1 + (seed as usize % 3),
            spk_id: 1 + (seed as usize % 5),
            signal_rel: Some(format!("sig_{seed}.f64")),
            tokens: Some(ByteSeq(labels.to_vec())),
            signal: Some(Tensor::randn(vec![t_sig, 16], 1.0, &mut rng).unwrap()),
        }
    }

    fn text_item(seed: u64, tokens: &[u16]) -> TrainItem {
        TrainItem {
            lang: format!("lang{}", seed % 3),
            lang_id: 1 + (seed as usize % 3),
            spk_id: UNKNOWN_ID,
            signal_rel: None,
            tokens: Some(ByteSeq(tokens.to_vec())),
            signal: None,
        }
    }

    fn norm_of(report: &TrainStepReport, group: &str) -> f64 {
        report
            .grad_norms
            .iter()
            .find(|(n, _)| n == group)
            .unwrap_or_else(|| panic!("no norm for {group}"))
            .1
    }

    fn checksums(store: &ParamStore) -> Vec<(String, String)> {
        GROUPS
            .iter()
            .map(|g| (g.to_string(), store.checksum(g).unwrap()))
            .collect()
    }

    fn changed_groups(before: &[(String, String)], after: &[(String, String)]) -> Vec<String> {
        before
            .iter()
            .zip(after)
            .filter(|(b, a)| b.1 != a.1)
            .map(|(b, _)| b.0.clone())
            .collect()
    }

    #[test]
    fn conditioning_dropout_rate_matches_its_probability() {
        let n = 100_000u64;
        let mut lang_drops = 0u64;
        let mut spk_drops = 0u64;
        for step in 0..n {
            let (l, s) = cfg_dropout(3, step, 0, 0.1, 4, 6);
            if l == UNKNOWN_ID {
                lang_drops += 1;
            }
            if s == UNKNOWN_ID {
                spk_drops += 1;
            }
        }
        for drops in [lang_drops, spk_drops] {
            let rate = drops as f64 / n as f64;
            assert!((rate - 0.1).abs() < 0.005, "dropout rate {rate} far from 0.1");
        }
        // Zero probability never drops; one always does.
        assert_eq!(cfg_dropout(3, 0, 0, 0.0, 4, 6), (4, 6));
        assert_eq!(cfg_dropout(3, 0, 0, 1.0, 4, 6), (UNKNOWN_ID, UNKNOWN_ID));
    }

    #[test]
    fn supervised_step_reports_every_term_and_freezes_the_acoustic_encoder() {
        let mc = small_mc();
        let cfg = small_cfg(&mc);
        let mut store = ParamStore::init(&mc, 1).unwrap();
        let items = [paired_item(0, 12, &[5, 9, 13]), paired_item(1, 14, &[40, 2, 7, 19])];
        let refs: Vec<&TrainItem> = items.iter().collect();
        let report = supervised_step(&mut store, &cfg, 50, &refs, None).unwrap();

        assert_eq!(report.kind, StepKind::Supervised);
        assert_eq!(report.items, 2);
        assert_eq!(report.items_skipped, 0);
        for v in [report.l_feature, report.l_kl, report.l_dur, report.l_rnnt, report.l_sup] {
            assert!(v.is_some() && v.unwrap().is_finite());
        }
        check_weighted_sum(&report, &cfg.weights).unwrap();

        assert_eq!(norm_of(&report, "s2f"), 0.0, "frozen acoustic encoder must have no grad");
        assert_eq!(norm_of(&report, "vocoder"), 0.0);
        for g in ["shared", "rnnt", "text", "duration", "decoder", "vae"] {
            assert!(norm_of(&report, g) > 0.0, "{g} should receive gradient");
        }
    }

    #[test]
    fn supervised_step_rejects_forbidden_languages() {
        let mc = small_mc();
        let cfg = small_cfg(&mc);
        let mut store = ParamStore::init(&mc, 1).unwrap();
        let items = [paired_item(0, 12, &[5, 9, 13])];
        let refs: Vec<&TrainItem> = items.iter().collect();
        let forbidden: BTreeSet<String> = [items[0].lang.clone()].into();
        let err = supervised_step(&mut store, &cfg, 0, &refs, Some(&forbidden)).err().unwrap();
        assert!(matches!(err, Error::Contract(_)), "got {err:?}");
        assert!(err.to_string().contains(&items[0].lang));
    }

    #[test]
    fn unspoken_step_reaches_only_the_text_and_decoder_groups() {
        let mc = small_mc();
        let cfg = small_cfg(&mc);
        let mut store = ParamStore::init(&mc, 2).unwrap();
        let before = checksums(&store);
        let items = [text_item(0, &[9, 22, 35, 48, 61]), text_item(1, &[100, 101, 102, 103])];
        let refs: Vec<&TrainItem> = items.iter().collect();
        let report = unspoken_text_step(&mut store, &cfg, 3, &refs).unwrap();

        assert_eq!(report.kind, StepKind::UnspokenText);
        assert_eq!(report.items, 2);
        assert!(report.l_rnnt.unwrap().is_finite());
        assert!(report.l_feature.is_none(), "no reconstruction target without speech");
        assert!(norm_of(&report, "text") > 0.0);
        assert!(norm_of(&report, "decoder") > 0.0);
        for g in ["s2f", "shared", "rnnt", "duration", "vae", "vocoder"] {
            assert_eq!(norm_of(&report, g), 0.0, "{g} must stay frozen");
        }
        assert_eq!(changed_groups(&before, &checksums(&store)), vec!["text", "decoder"]);
    }

    #[test]
    fn unspoken_step_survives_fully_masked_input() {
        let mc = small_mc();
        let mut cfg = small_cfg(&mc);
        cfg.mask_ratio = 1.0;
        let mut store = ParamStore::init(&mc, 2).unwrap();
        let items = [text_item(0, &[9, 22, 35])];
        let refs: Vec<&TrainItem> = items.iter().collect();
        let report = unspoken_text_step(&mut store, &cfg, 0, &refs).unwrap();
        assert_eq!(report.items, 1);
        assert!(report.l_rnnt.unwrap().is_finite());
    }

    #[test]
    fn untranscribed_step_matches_supervised_when_pseudo_labels_are_the_truth() {
        let mc = small_mc();
        let cfg = small_cfg(&mc);
        let base = ParamStore::init(&mc, 3).unwrap();
        let items = [paired_item(0, 12, &[5, 9, 13]), paired_item(1, 16, &[40, 2, 7, 19, 88])];
        let refs: Vec<&TrainItem> = items.iter().collect();

        let mut sup_store = base.clone();
        let sup = supervised_step(&mut sup_store, &cfg, 60, &refs, None).unwrap();

        // Strip transcripts; supply them back as external pseudo-labels.
        let external = ExternalLabels::from_pairs(items.iter().map(|it| {
            (it.signal_rel.clone().unwrap(), it.tokens.clone().unwrap())
        }));
        let stripped: Vec<TrainItem> = items
            .iter()
            .map(|it| TrainItem { tokens: None, ..it.clone() })
            .collect();
        let stripped_refs: Vec<&TrainItem> = stripped.iter().collect();
        let mut uns_store = base.clone();
        let uns =
            untranscribed_speech_step(&mut uns_store, &cfg, 60, &stripped_refs, Some(&external))
                .unwrap();

        assert_eq!(uns.kind, StepKind::UntranscribedSpeech);
        assert_eq!(uns.items, sup.items);
        for (a, b) in [
            (sup.l_feature, uns.l_feature),
            (sup.l_kl, uns.l_kl),
            (sup.l_dur, uns.l_dur),
            (sup.l_rnnt, uns.l_rnnt),
            (sup.l_sup, uns.l_sup),
            (sup.kl_weight_applied, uns.kl_weight_applied),
        ] {
            assert_eq!(a.unwrap().to_bits(), b.unwrap().to_bits(), "loss fields must be identical");
        }
        // Same losses, different trainable sets: the pseudo-labeled step
        // must not touch the recognition path.
        assert_eq!(norm_of(&uns, "shared"), 0.0);
        assert_eq!(norm_of(&uns, "rnnt"), 0.0);
        assert!(norm_of(&sup, "shared") > 0.0);
        for g in ["text", "duration", "decoder", "vae"] {
            assert!(norm_of(&uns, g) > 0.0, "{g} should receive gradient");
        }
    }

    #[test]
    fn untranscribed_step_skips_items_whose_hypothesis_is_empty() {
        let mc = small_mc();
        let cfg = small_cfg(&mc);
        let mut store = ParamStore::init(&mc, 4).unwrap();
        // Bias the joint head so blank dominates every frame: the model's
        // own hypotheses all come out empty.
        let mut bias = store.group("rnnt").unwrap().tensor("rnnt/joint_b").unwrap();
        bias.data_mut()[256] = 50.0;
        store.group_mut("rnnt").unwrap().set_tensor("rnnt/joint_b", &bias).unwrap();
        let before = checksums(&store);

        let items = [paired_item(0, 12, &[5])];
        let stripped: Vec<TrainItem> =
            items.iter().map(|it| TrainItem { tokens: None, ..it.clone() }).collect();
        let refs: Vec<&TrainItem> = stripped.iter().collect();
        let report = untranscribed_speech_step(&mut store, &cfg, 0, &refs, None).unwrap();
        assert_eq!(report.items, 0);
        assert_eq!(report.items_skipped, 1);
        assert!(report.l_sup.is_none());
        assert_eq!(checksums(&store), before, "no update without effective items");
    }

    #[test]
    fn pretraining_steps_update_disjoint_group_sets() {
        let mc = small_mc();
        let cfg = small_cfg(&mc);
        let quantizer = RandomQuantizer::new(cfg.seed, mc.d_sig, 4, mc.bestrq_codes).unwrap();
        let mut store = ParamStore::init(&mc, 5).unwrap();

        let speech = [paired_item(0, 16, &[5, 9]), paired_item(1, 14, &[7, 8])];
        let speech_refs: Vec<&TrainItem> = speech.iter().collect();
        let before = checksums(&store);
        let rb = bestrq_step(&mut store, &cfg, 0, &speech_refs, &quantizer).unwrap();
        assert_eq!(rb.kind, StepKind::Stage1);
        assert!(rb.l_bestrq.unwrap().is_finite());
        assert_eq!(changed_groups(&before, &checksums(&store)), vec!["s2f", "shared"]);

        let texts = [text_item(0, &[9, 22, 35, 48]), text_item(1, &[1, 2, 3, 4, 5])];
        let text_refs: Vec<&TrainItem> = texts.iter().collect();
        let before = checksums(&store);
        let rm = mlm_step(&mut store, &cfg, 0, &text_refs).unwrap();
        assert!(rm.l_mlm.unwrap().is_finite());
        assert_eq!(changed_groups(&before, &checksums(&store)), vec!["text"]);

        // The merged pretraining step reports both losses and all touched
        // groups at once.
        let merged =
            stage1_step(&mut store, &cfg, 1, &speech_refs, Some(&text_refs), &quantizer).unwrap();
        assert!(merged.l_bestrq.is_some() && merged.l_mlm.is_some());
        assert_eq!(merged.items, 4);
        for g in ["s2f", "shared", "text"] {
            assert!(norm_of(&merged, g) > 0.0);
        }
        for g in ["rnnt", "duration", "decoder", "vae", "vocoder"] {
            assert_eq!(norm_of(&merged, g), 0.0);
        }
    }

    #[test]
    fn recognition_step_trains_exactly_the_groups_it_is_given() {
        let mc = small_mc();
        let cfg = small_cfg(&mc);
        let mut store = ParamStore::init(&mc, 6).unwrap();
        let items = [paired_item(0, 12, &[5, 9, 13])];
        let refs: Vec<&TrainItem> = items.iter().collect();

        let before = checksums(&store);
        let r2 = asr_step(&mut store, &cfg, 0, &refs, TRAIN_STAGE2).unwrap();
        assert_eq!(r2.kind, StepKind::Stage2Asr);
        assert!(r2.l_rnnt.unwrap().is_finite());
        assert_eq!(changed_groups(&before, &checksums(&store)), vec!["shared", "rnnt"]);

        let before = checksums(&store);
        asr_step(&mut store, &cfg, 1, &refs, TRAIN_EVAL_ASR).unwrap();
        assert_eq!(changed_groups(&before, &checksums(&store)), vec!["s2f", "shared", "rnnt"]);
    }

    #[test]
    fn external_label_files_parse_and_reject_malformed_lines() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("labels.tsv");
        std::fs::write(&good, "a/one.f64\thello\nb/two.f64\tworld\n").unwrap();
        let ext = ExternalLabels::load(&good).unwrap();
        assert_eq!(ext.len(), 2);
        assert_eq!(ext.get("a/one.f64").unwrap().ids(), b"hello".map(u16::from));
        assert!(ext.get("missing").is_none());

        let bad = dir.path().join("bad.tsv");
        std::fs::write(&bad, "no-tab-here\n").unwrap();
        assert!(matches!(ExternalLabels::load(&bad), Err(Error::Format(_))));
    }
}
