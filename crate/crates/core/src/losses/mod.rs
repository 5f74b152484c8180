//! Training objectives: transducer loss and alignment, iterative L1
//! feature loss, KL with a linear annealing schedule, log-domain duration
//! loss, and masked-prediction cross-entropies for signal and text.

pub mod bestrq;
pub mod rnnt;

pub use bestrq::{apply_span_noise, RandomQuantizer};
pub use rnnt::{rnnt_loss, rnnt_viterbi_durations, Alignment, RnntOutput, BLANK_ID};

use crate::error::{Error, Result};
use crate::num::graph::{Graph, Var};
use crate::num::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Weights of the supervised objective's four terms, plus the KL
/// annealing window (in optimizer steps of the joint stage).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub w_feature: f64,
    pub w_kl_max: f64,
    pub w_dur: f64,
    pub w_rnnt: f64,
    pub kl_start_step: u64,
    pub kl_end_step: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_feature: 1.0,
            w_kl_max: 0.01,
            w_dur: 0.1,
            w_rnnt: 1.0,
            kl_start_step: 45,
            kl_end_step: 375,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_feature", self.w_feature),
            ("w_kl_max", self.w_kl_max),
            ("w_dur", self.w_dur),
            ("w_rnnt", self.w_rnnt),
        ] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::InvalidArg(format!(
                    "loss weight {name} must be finite and ≥ 0, got {w}"
                )));
            }
        }
        if self.kl_end_step < self.kl_start_step {
            return Err(Error::InvalidArg(format!(
                "kl schedule ends ({}) before it starts ({})",
                self.kl_end_step, self.kl_start_step
            )));
        }
        Ok(())
    }
}

/// Effective KL weight at a given step: zero before the ramp, linear up to
/// `w_kl_max` across [kl_start_step, kl_end_step], constant after.
pub fn kl_weight(step: u64, w: &LossWeights) -> f64 {
    if step >= w.kl_end_step {
        w.w_kl_max
    } else if step <= w.kl_start_step {
        0.0
    } else {
        w.w_kl_max * (step - w.kl_start_step) as f64 / (w.kl_end_step - w.kl_start_step) as f64
    }
}

/// Which kind of optimizer step produced a report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StepKind {
    Stage1,
    Stage2Asr,
    Supervised,
    UnspokenText,
    UntranscribedSpeech,
}

impl std::fmt::Display for StepKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            StepKind::Stage1 => "stage1",
            StepKind::Stage2Asr => "stage2_asr",
            StepKind::Supervised => "supervised",
            StepKind::UnspokenText => "unspoken_text",
            StepKind::UntranscribedSpeech => "untranscribed_speech",
        };
        f.write_str(s)
    }
}

/// Per-step loss report: batch-mean loss terms (absent when the step kind
/// does not compute them), the applied KL weight, per-group gradient
/// norms, and item accounting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainStepReport {
    pub kind: StepKind,
    pub step: u64,
    pub l_feature: Option<f64>,
    pub l_kl: Option<f64>,
    pub l_dur: Option<f64>,
    pub l_rnnt: Option<f64>,
    pub l_bestrq: Option<f64>,
    pub l_mlm: Option<f64>,
    pub l_sup: Option<f64>,
    pub kl_weight_applied: Option<f64>,
    /// (group name, pre-clip gradient L2 norm) for every bound group.
    pub grad_norms: Vec<(String, f64)>,
    pub items: usize,
    pub items_skipped: usize,
}

impl TrainStepReport {
    pub fn new(kind: StepKind, step: u64) -> Self {
        TrainStepReport {
            kind,
            step,
            l_feature: None,
            l_kl: None,
            l_dur: None,
            l_rnnt: None,
            l_bestrq: None,
            l_mlm: None,
            l_sup: None,
            kl_weight_applied: None,
            grad_norms: Vec::new(),
            items: 0,
            items_skipped: 0,
        }
    }

    /// Named loss values present in this report, for metrics logging.
    pub fn named_losses(&self) -> Vec<(&'static str, f64)> {
        let mut out = Vec::new();
        let fields = [
            ("l_feature", self.l_feature),
            ("l_kl", self.l_kl),
            ("l_dur", self.l_dur),
            ("l_rnnt", self.l_rnnt),
            ("l_bestrq", self.l_bestrq),
            ("l_mlm", self.l_mlm),
            ("l_sup", self.l_sup),
        ];
        for (n, v) in fields {
            if let Some(v) = v {
                out.push((n, v));
            }
        }
        out
    }
}

/// The supervised objective must be exactly the weighted sum of its parts:
/// l_sup = w_feature·l_feature + kl_weight·l_kl + w_dur·l_dur + w_rnnt·l_rnnt,
/// verified to 1e-12 whenever all terms are present.
pub fn check_weighted_sum(report: &TrainStepReport, w: &LossWeights) -> Result<()> {
    let (Some(ls), Some(lf), Some(lk), Some(ld), Some(lr), Some(klw)) = (
        report.l_sup,
        report.l_feature,
        report.l_kl,
        report.l_dur,
        report.l_rnnt,
        report.kl_weight_applied,
    ) else {
        return Ok(()); // nothing to check until all terms are present
    };
    let expected = ((w.w_feature * lf + klw * lk) + w.w_dur * ld) + w.w_rnnt * lr;
    let diff = (ls - expected).abs();
    if diff > 1e-12 {
        return Err(Error::Numeric(format!(
            "objective assembly drift: reported {ls:.17e}, recomputed {expected:.17e} (diff {diff:.3e})"
        )));
    }
    Ok(())
}

/// Mean over K refinement iterations of the per-element mean absolute
/// error against the target.
pub fn iterative_l1(g: &mut Graph, predictions: &[Var], target: Var) -> Result<Var> {
    if predictions.is_empty() {
        return Err(Error::InvalidArg("iterative_l1: no predictions".into()));
    }
    let tgt_shape = g.value(target).shape().to_vec();
    let mut acc: Option<Var> = None;
    for (i, &p) in predictions.iter().enumerate() {
        if g.value(p).shape() != tgt_shape.as_slice() {
            return Err(Error::Shape {
                op: "iterative_l1",
                detail: format!(
                    "prediction {i} has shape {:?}, target {:?}",
                    g.value(p).shape(),
                    tgt_shape
                ),
            });
        }
        let diff = g.sub(p, target)?;
        let mae = g.abs(diff).and_then(|a| g.mean(a))?;
        acc = Some(match acc {
            None => mae,
            Some(prev) => g.add(prev, mae)?,
        });
    }
    g.scale(acc.expect("non-empty checked"), 1.0 / predictions.len() as f64)
}

/// Mean squared error between log(predicted) and log(target) durations.
/// Targets must be ≥ 1 (alignments are repaired before this point).
pub fn duration_loss(g: &mut Graph, predicted: Var, target_durations: &[usize]) -> Result<Var> {
    if g.value(predicted).numel() != target_durations.len() {
        return Err(Error::Shape {
            op: "duration_loss",
            detail: format!(
                "{} predictions for {} target durations",
                g.value(predicted).numel(),
                target_durations.len()
            ),
        });
    }
    if target_durations.contains(&0) {
        return Err(Error::InvalidArg(
            "duration_loss: zero target duration; repair the alignment first".into(),
        ));
    }
    let ln_tgt: Vec<f64> = target_durations.iter().map(|&d| (d as f64).ln()).collect();
    let shape = g.value(predicted).shape().to_vec();
    let tgt = g.constant(Tensor::new(shape, ln_tgt)?);
    let lnp = g.ln(predicted)?;
    let diff = g.sub(lnp, tgt)?;
    let sq = g.mul(diff, diff)?;
    g.mean(sq)
}

/// KL divergence of a diagonal Gaussian from the standard normal:
/// 0.5·Σ(μ² + e^logvar − 1 − logvar).
pub fn kl_divergence(g: &mut Graph, mean: Var, logvar: Var) -> Result<Var> {
    if g.value(mean).shape() != g.value(logvar).shape() {
        return Err(Error::Shape {
            op: "kl_divergence",
            detail: format!(
                "mean {:?} vs logvar {:?}",
                g.value(mean).shape(),
                g.value(logvar).shape()
            ),
        });
    }
    let n = g.value(mean).numel() as f64;
    let mu2 = g.mul(mean, mean)?;
    let s1 = g.sum(mu2)?;
    let ev = g.exp(logvar)?;
    let s2 = g.sum(ev)?;
    let s3 = g.sum(logvar)?;
    let t = g.add(s1, s2)?;
    let t = g.sub(t, s3)?;
    let t = g.add_scalar(t, -n)?;
    g.scale(t, 0.5)
}

/// Cross-entropy of `logits` rows at `positions` against `targets`.
/// Rows outside `positions` cannot influence the value or the gradient.
/// The masked-prediction loss for both signal codes and text bytes.
pub fn masked_position_cross_entropy(
    g: &mut Graph,
    logits: Var,
    positions: &[usize],
    targets: &[usize],
) -> Result<Var> {
    if positions.is_empty() {
        return Err(Error::InvalidArg(
            "masked cross-entropy needs at least one masked position".into(),
        ));
    }
    if positions.len() != targets.len() {
        return Err(Error::InvalidArg(format!(
            "masked cross-entropy: {} positions vs {} targets",
            positions.len(),
            targets.len()
        )));
    }
    let sel = g.select_rows(logits, positions)?;
    let lsm = g.log_softmax(sel)?;
    let picked = g.pick(lsm, targets)?;
    let m = g.mean(picked)?;
    g.scale(m, -1.0)
}
