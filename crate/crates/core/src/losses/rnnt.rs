//! Transducer loss over a time × label lattice, in log space, with exact
//! analytic gradients, plus best-path (Viterbi) duration extraction.
//!
//! Lattice convention: states (t, u) for t ∈ [0, T], u ∈ [0, U]. A blank
//! move (t, u) → (t+1, u) consumes one frame and is scored from logits row
//! (t, u). A label move (t, u) → (t, u+1) emits token u+1 and is scored
//! from logits row (min(t, T−1), u): label moves stay legal after the last
//! frame by re-reading that frame's logits. Every interleaving of T blanks
//! and U labels is therefore a valid path — C(T+U, U) in total — and the
//! loss is −log of their probability sum.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;
use crate::textproc::ByteSeq;

/// Blank id for the full byte vocabulary (256 bytes + blank).
pub const BLANK_ID: usize = 256;

/// Loss value and the exact gradient with respect to the raw logits.
#[derive(Debug, Clone)]
pub struct RnntOutput {
    pub loss: f64,
    /// Row-major gradient, same layout as the [T·(U+1), V] logits.
    pub grad_logits: Vec<f64>,
}

/// Best-path alignment: frames assigned to each token.
///
/// Raw extraction can assign zero frames to a token (two labels emitted
/// back to back); `repaired_min_one` lifts those to one frame each before
/// the alignment is used for upsampling or duration targets.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// Frame count per token, in token order. Sums to T when non-empty.
    pub durations: Vec<usize>,
    /// Log probability of the extracted path.
    pub path_logprob: f64,
}

impl Alignment {
    pub fn len(&self) -> usize {
        self.durations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.durations.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.durations.iter().sum()
    }

    /// Replace zero durations with one frame each, stealing frames from the
    /// largest entries so the total is preserved. Errors when there are
    /// fewer frames than tokens (no valid strictly-positive assignment).
    pub fn repaired_min_one(&self) -> Result<Alignment> {
        let total = self.total_frames();
        if total < self.durations.len() {
            return Err(Error::Data(format!(
                "cannot give each of {} tokens a frame out of {total}",
                self.durations.len()
            )));
        }
        let mut d = self.durations.clone();
        while let Some(zi) = d.iter().position(|&x| x == 0) {
            let (donor, _) = d
                .iter()
                .enumerate()
                .max_by(|(ia, a), (ib, b)| a.cmp(b).then(ib.cmp(ia)))
                .expect("non-empty by the zero found above");
            debug_assert!(d[donor] >= 2, "sum ≥ len guarantees a donor");
            d[donor] -= 1;
            d[zi] += 1;
        }
        Ok(Alignment { durations: d, path_logprob: self.path_logprob })
    }
}

/// Stable log(e^a + e^b) where either side may be −∞.
fn lse2(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Validated lattice dimensions: (T, U, V).
fn lattice_dims(logits: &Tensor, labels: &ByteSeq) -> Result<(usize, usize, usize)> {
    let (rows, vocab) = logits.dims2();
    if vocab < 2 {
        return Err(Error::Shape {
            op: "rnnt_loss",
            detail: format!("vocabulary of {vocab} has no room for blank"),
        });
    }
    let u = labels.len();
    if rows % (u + 1) != 0 {
        return Err(Error::Shape {
            op: "rnnt_loss",
            detail: format!("{rows} lattice rows not divisible by U+1 = {}", u + 1),
        });
    }
    let t = rows / (u + 1);
    if t == 0 {
        return Err(Error::InvalidArg("transducer lattice needs T ≥ 1".into()));
    }
    let blank = vocab - 1;
    if let Some(&bad) = labels.ids().iter().find(|&&l| l as usize >= blank) {
        return Err(Error::InvalidArg(format!(
            "label id {bad} collides with blank or exceeds vocabulary {vocab}"
        )));
    }
    Ok((t, u, vocab))
}

/// Row-wise log-softmax of the logits, flattened to match their layout.
fn log_probs(logits: &Tensor) -> Vec<f64> {
    let (rows, vocab) = logits.dims2();
    let mut lp = vec![0.0; rows * vocab];
    for r in 0..rows {
        let row = logits.row(r);
        let lse = crate::num::graph::logsumexp_slice(row);
        for (k, &x) in row.iter().enumerate() {
            lp[r * vocab + k] = x - lse;
        }
    }
    lp
}

/// −log P(labels | lattice) by forward-backward, with the exact gradient
/// with respect to the raw logits. The blank id is the last vocabulary
/// entry (256 for the full byte vocabulary).
pub fn rnnt_loss(logits: &Tensor, labels: &ByteSeq) -> Result<RnntOutput> {
    let (t_len, u_len, vocab) = lattice_dims(logits, labels)?;
    let blank = vocab - 1;
    let lp = log_probs(logits);
    let w = u_len + 1; // lattice row width
    let row = |t: usize, u: usize| t * w + u;
    let at = |t: usize, u: usize, k: usize| row(t, u) * vocab + k;
    // Label moves taken at t = T re-read the final frame's logits.
    let label_t = |t: usize| t.min(t_len - 1);

    // Forward scores over the (T+1) × (U+1) state grid.
    let mut alpha = vec![f64::NEG_INFINITY; (t_len + 1) * w];
    alpha[0] = 0.0;
    for t in 0..=t_len {
        for u in 0..=u_len {
            if t == 0 && u == 0 {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t > 0 {
                acc = lse2(acc, alpha[(t - 1) * w + u] + lp[at(t - 1, u, blank)]);
            }
            if u > 0 {
                let y = labels.ids()[u - 1] as usize;
                acc = lse2(acc, alpha[t * w + u - 1] + lp[at(label_t(t), u - 1, y)]);
            }
            alpha[t * w + u] = acc;
        }
    }
    let total = alpha[t_len * w + u_len];
    if !total.is_finite() {
        return Err(Error::Numeric(format!(
            "alignment lattice has no finite probability mass (log total = {total})"
        )));
    }

    // Backward scores.
    let mut beta = vec![f64::NEG_INFINITY; (t_len + 1) * w];
    beta[t_len * w + u_len] = 0.0;
    for t in (0..=t_len).rev() {
        for u in (0..=u_len).rev() {
            if t == t_len && u == u_len {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t < t_len {
                acc = lse2(acc, lp[at(t, u, blank)] + beta[(t + 1) * w + u]);
            }
            if u < u_len {
                let y = labels.ids()[u] as usize;
                acc = lse2(acc, lp[at(label_t(t), u, y)] + beta[t * w + u + 1]);
            }
            beta[t * w + u] = acc;
        }
    }

    // Edge posteriors → gradient on log-probs (≤ 2 entries per lattice row).
    let rows = t_len * w;
    let mut glp = vec![0.0; rows * vocab];
    for t in 0..=t_len {
        for u in 0..=u_len {
            let a = alpha[t * w + u];
            if a == f64::NEG_INFINITY {
                continue;
            }
            if t < t_len {
                let p = (a + lp[at(t, u, blank)] + beta[(t + 1) * w + u] - total).exp();
                glp[at(t, u, blank)] -= p;
            }
            if u < u_len {
                let y = labels.ids()[u] as usize;
                let p = (a + lp[at(label_t(t), u, y)] + beta[t * w + u + 1] - total).exp();
                glp[at(label_t(t), u, y)] -= p;
            }
        }
    }
    // Chain through the row-wise log-softmax.
    let mut grad = vec![0.0; rows * vocab];
    for r in 0..rows {
        let gsum: f64 = glp[r * vocab..(r + 1) * vocab].iter().sum();
        for k in 0..vocab {
            grad[r * vocab + k] = glp[r * vocab + k] - lp[r * vocab + k].exp() * gsum;
        }
    }
    Ok(RnntOutput { loss: -total, grad_logits: grad })
}

/// Max-probability path through the same lattice, reduced to per-token
/// frame counts. Frames consumed before the first emission belong to token
/// 1; frames after the last emission belong to the last token. Ties prefer
/// the blank move. U = 0 yields an empty alignment.
pub fn rnnt_viterbi_durations(logits: &Tensor, labels: &ByteSeq) -> Result<Alignment> {
    let (t_len, u_len, vocab) = lattice_dims(logits, labels)?;
    let blank = vocab - 1;
    let lp = log_probs(logits);
    let w = u_len + 1;
    let at = |t: usize, u: usize, k: usize| (t * w + u) * vocab + k;
    let label_t = |t: usize| t.min(t_len - 1);

    // Best score from each state to the terminal (T, U), computed
    // backwards so the path can then be walked forwards — ties at each
    // forward step prefer the blank (frame-advancing) move.
    let mut togo = vec![f64::NEG_INFINITY; (t_len + 1) * w];
    togo[t_len * w + u_len] = 0.0;
    for t in (0..=t_len).rev() {
        for u in (0..=u_len).rev() {
            if t == t_len && u == u_len {
                continue;
            }
            let mut acc = f64::NEG_INFINITY;
            if t < t_len {
                acc = acc.max(lp[at(t, u, blank)] + togo[(t + 1) * w + u]);
            }
            if u < u_len {
                let y = labels.ids()[u] as usize;
                acc = acc.max(lp[at(label_t(t), u, y)] + togo[t * w + u + 1]);
            }
            togo[t * w + u] = acc;
        }
    }
    let path_logprob = togo[0];
    if !path_logprob.is_finite() {
        return Err(Error::Numeric("no finite-probability alignment path".into()));
    }
    if u_len == 0 {
        return Ok(Alignment { durations: Vec::new(), path_logprob });
    }

    // Greedy forward walk, counting blank moves per lattice row u.
    let mut blanks_at_row = vec![0usize; u_len + 1];
    let (mut t, mut u) = (0usize, 0usize);
    while t < t_len || u < u_len {
        let blank_score = if t < t_len {
            lp[at(t, u, blank)] + togo[(t + 1) * w + u]
        } else {
            f64::NEG_INFINITY
        };
        let label_score = if u < u_len {
            let y = labels.ids()[u] as usize;
            lp[at(label_t(t), u, y)] + togo[t * w + u + 1]
        } else {
            f64::NEG_INFINITY
        };
        if blank_score >= label_score {
            blanks_at_row[u] += 1;
            t += 1;
        } else {
            u += 1;
        }
    }
    let mut durations: Vec<usize> = (1..=u_len).map(|i| blanks_at_row[i]).collect();
    durations[0] += blanks_at_row[0];
    debug_assert_eq!(durations.iter().sum::<usize>(), t_len);
    Ok(Alignment { durations, path_logprob })
}
