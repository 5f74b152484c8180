//! Pseudo-vocoder: a least-squares affine map from feature frames back to
//! pairs of signal frames, fitted once and frozen thereafter.

use crate::num::{lstsq, Tensor};
use crate::{Error, Result};

use super::params::ParamStore;

/// Smallest pair count accepted for fitting; fewer rows make the normal
/// equations unreliable at this width.
pub const MIN_FIT_PAIRS: usize = 100;

/// Assemble a `(features, signal_pairs)` training set from one utterance:
/// feature frame `i` maps to concatenated signal frames `2i, 2i+1`. A
/// trailing odd signal frame (self-paired in the encoder) is dropped.
pub fn collect_vocoder_pairs(signal: &Tensor, features: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t_sig, d_sig) = signal.dims2();
    let (t_feat, d_feat) = features.dims2();
    let n = t_sig / 2;
    if t_feat != (t_sig + 1) / 2 {
        return Err(Error::Shape {
            op: "collect_vocoder_pairs",
            detail: format!("{t_sig} signal frames pair into {} features, got {t_feat}", (t_sig + 1) / 2),
        });
    }
    let mut feat_rows = Vec::with_capacity(n * d_feat);
    let mut pair_rows = Vec::with_capacity(n * 2 * d_sig);
    for i in 0..n {
        feat_rows.extend_from_slice(features.row(i));
        pair_rows.extend_from_slice(signal.row(2 * i));
        pair_rows.extend_from_slice(signal.row(2 * i + 1));
    }
    Ok((
        Tensor::new(vec![n, d_feat], feat_rows)?,
        Tensor::new(vec![n, 2 * d_sig], pair_rows)?,
    ))
}

/// Fit the affine map `[features, 1] · W = signal_pairs` by least squares,
/// store `W` in the vocoder group, and freeze it. Returns the mean absolute
/// residual per signal coordinate as a diagnostic.
pub fn fit_pseudo_vocoder(
    store: &mut ParamStore,
    features: &Tensor,
    signal_pairs: &Tensor,
) -> Result<f64> {
    let fitted = store.group("vocoder")?.tensor("vocoder/fitted")?.data()[0];
    if fitted != 0.0 {
        return Err(Error::Contract(
            "the pseudo-vocoder is already fitted and frozen".into(),
        ));
    }
    let (n, d_feat) = features.dims2();
    let (n2, d_out) = signal_pairs.dims2();
    if n != n2 {
        return Err(Error::Shape {
            op: "fit_pseudo_vocoder",
            detail: format!("{n} feature rows vs {n2} signal rows"),
        });
    }
    let expect = store.config.d_feat;
    if d_feat != expect || d_out != 2 * store.config.d_sig {
        return Err(Error::Shape {
            op: "fit_pseudo_vocoder",
            detail: format!(
                "got [{n}, {d_feat}] -> [{n2}, {d_out}], model expects [{expect}] -> [{}]",
                2 * store.config.d_sig
            ),
        });
    }
    if n < MIN_FIT_PAIRS {
        return Err(Error::Data(format!(
            "only {n} feature/signal pairs; need at least {MIN_FIT_PAIRS} to fit the vocoder"
        )));
    }
    // Design matrix with a bias column of ones.
    let mut a = Vec::with_capacity(n * (d_feat + 1));
    for i in 0..n {
        a.extend_from_slice(features.row(i));
        a.push(1.0);
    }
    let w = lstsq(&a, signal_pairs.data(), n, d_feat + 1, d_out)?;
    let w_t = Tensor::new(vec![d_feat + 1, d_out], w)?;

    let mut resid = 0.0;
    for i in 0..n {
        let f = features.row(i);
        for j in 0..d_out {
            let mut pred = w_t.row(d_feat)[j];
            for (k, &fv) in f.iter().enumerate() {
                pred += fv * w_t.row(k)[j];
            }
            resid += (pred - signal_pairs.row(i)[j]).abs();
        }
    }
    resid /= (n * d_out) as f64;

    let group = store.group_mut("vocoder")?;
    group.set_tensor("vocoder/w", &w_t)?;
    group.set_tensor("vocoder/fitted", &Tensor::new(vec![1], vec![1.0])?)?;
    Ok(resid)
}

/// Map `[T, d_feat]` features to `[2T, d_sig]` signal frames with the frozen
/// affine map.
pub fn vocode(store: &ParamStore, features: &Tensor) -> Result<Tensor> {
    let group = store.group("vocoder")?;
    if group.tensor("vocoder/fitted")?.data()[0] == 0.0 {
        return Err(Error::Contract(
            "the pseudo-vocoder has not been fitted yet".into(),
        ));
    }
    let w = group.tensor("vocoder/w")?;
    let (t, d_feat) = features.dims2();
    if d_feat != store.config.d_feat {
        return Err(Error::Shape {
            op: "vocode",
            detail: format!("feature dim {} but model d_feat {}", d_feat, store.config.d_feat),
        });
    }
    let d_sig = store.config.d_sig;
    let mut out = Vec::with_capacity(2 * t * d_sig);
    for i in 0..t {
        let f = features.row(i);
        let mut pair = vec![0.0; 2 * d_sig];
        for (j, p) in pair.iter_mut().enumerate() {
            let mut v = w.row(d_feat)[j];
            for (k, &fv) in f.iter().enumerate() {
                v += fv * w.row(k)[j];
            }
            *p = v;
        }
        out.extend_from_slice(&pair[..d_sig]);
        out.extend_from_slice(&pair[d_sig..]);
    }
    Tensor::new(vec![2 * t, d_sig], out)
}
