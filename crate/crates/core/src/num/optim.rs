//! Adam with bias correction, plus global-norm gradient clipping.

use crate::error::{Error, Result};

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamHyper {
    pub fn with_lr(lr: f64) -> Self {
        AdamHyper { lr, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::InvalidArg(format!("adam lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::InvalidArg(format!("adam {name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return Err(Error::InvalidArg(format!("adam eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter for one
/// parameter group. Serialized into checkpoints so resume is exact.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], steps: 0 }
    }
}

/// One Adam update over a parameter group. `group` names the group in
/// error messages. Rejects non-finite gradients before touching any state.
pub fn adam_step(
    group: &str,
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    hyper.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() || params.len() != state.v.len()
    {
        return Err(Error::InvalidArg(format!(
            "adam_step `{group}`: params {}, grads {}, moments {}/{}",
            params.len(),
            grads.len(),
            state.m.len(),
            state.v.len()
        )));
    }
    if let Some((i, &bad)) = grads.iter().enumerate().find(|(_, g)| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient {bad} at index {i} in parameter group `{group}`"
        )));
    }
    state.steps += 1;
    let t = state.steps as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hyper.beta1 * state.m[i] + (1.0 - hyper.beta1) * g;
        state.v[i] = hyper.beta2 * state.v[i] + (1.0 - hyper.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= hyper.lr * mhat / (vhat.sqrt() + hyper.eps);
    }
    Ok(())
}

/// Scale a set of gradient slices so their joint L2 norm is at most
/// `max_norm`. Returns the pre-clip norm for logging.
pub fn clip_global_norm(grad_slices: &mut [&mut [f64]], max_norm: f64) -> Result<f64> {
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(Error::InvalidArg(format!("clip norm must be positive, got {max_norm}")));
    }
    let mut sq = 0.0;
    for s in grad_slices.iter() {
        for &g in s.iter() {
            if !g.is_finite() {
                return Err(Error::Numeric(format!("non-finite gradient {g} before clipping")));
            }
            sq += g * g;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let f = max_norm / norm;
        for s in grad_slices.iter_mut() {
            for g in s.iter_mut() {
                *g *= f;
            }
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Longhand transcription of the update rule, kept deliberately
    /// separate from the implementation.
    fn adam_by_hand(p0: f64, gs: &[f64], hy: &AdamHyper) -> f64 {
        let (mut p, mut m, mut v) = (p0, 0.0, 0.0);
        for (i, &g) in gs.iter().enumerate() {
            let t = (i + 1) as i32;
            m = hy.beta1 * m + (1.0 - hy.beta1) * g;
            v = hy.beta2 * v + (1.0 - hy.beta2) * g * g;
            let mhat = m / (1.0 - hy.beta1.powi(t));
            let vhat = v / (1.0 - hy.beta2.powi(t));
            p -= hy.lr * mhat / (vhat.sqrt() + hy.eps);
        }
        p
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // After bias correction the first update is lr·g/(|g|+eps).
        let hy = AdamHyper::with_lr(0.1);
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        adam_step("test", &mut p, &[0.5], &mut st, &hy).unwrap();
        let want = 1.0 - 0.1 * 0.5 / (0.5 + hy.eps);
        assert!((p[0] - want).abs() < 1e-12, "{} vs {want}", p[0]);
        assert_eq!(st.steps, 1);
    }

    #[test]
    fn multi_step_matches_longhand() {
        let hy = AdamHyper::default();
        let gs = [0.3, -0.2, 0.05, 0.4, -0.1];
        let mut p = [2.0];
        let mut st = AdamState::new(1);
        for &g in &gs {
            adam_step("test", &mut p, &[g], &mut st, &hy).unwrap();
        }
        let want = adam_by_hand(2.0, &gs, &hy);
        assert!((p[0] - want).abs() < 1e-12, "{} vs {want}", p[0]);
    }

    #[test]
    fn zero_gradient_leaves_parameters_in_place() {
        let hy = AdamHyper::default();
        let mut p = [1.5, -0.5];
        let mut st = AdamState::new(2);
        adam_step("test", &mut p, &[0.0, 0.0], &mut st, &hy).unwrap();
        assert_eq!(p, [1.5, -0.5]);
        assert_eq!(st.steps, 1);
    }

    #[test]
    fn nan_gradient_is_rejected_naming_the_group() {
        let hy = AdamHyper::default();
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        let err = adam_step("decoder", &mut p, &[f64::NAN], &mut st, &hy).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("decoder"), "message should name the group: {msg}");
        // State untouched on failure.
        assert_eq!(st.steps, 0);
        assert_eq!(p, [1.0]);
    }

    #[test]
    fn hyperparameter_ranges_are_validated() {
        let mut p = [1.0];
        let mut st = AdamState::new(1);
        let bad = AdamHyper { beta1: 1.0, ..Default::default() };
        assert!(adam_step("g", &mut p, &[0.1], &mut st, &bad).is_err());
        let bad = AdamHyper { lr: -0.1, ..Default::default() };
        assert!(adam_step("g", &mut p, &[0.1], &mut st, &bad).is_err());
    }

    #[test]
    fn clipping_rescales_to_the_target_norm() {
        let mut a = vec![3.0, 0.0];
        let mut b = vec![0.0, 4.0];
        // Joint norm 5 → clip to 1: every entry shrinks by 5×.
        let mut slices: Vec<&mut [f64]> = vec![&mut a, &mut b];
        let pre = clip_global_norm(&mut slices, 1.0).unwrap();
        assert!((pre - 5.0).abs() < 1e-12);
        assert!((a[0] - 0.6).abs() < 1e-12);
        assert!((b[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn clipping_leaves_small_gradients_untouched() {
        let mut a = vec![0.3, -0.4];
        let before = a.clone();
        let mut slices: Vec<&mut [f64]> = vec![&mut a];
        let pre = clip_global_norm(&mut slices, 1.0).unwrap();
        assert!((pre - 0.5).abs() < 1e-12);
        assert_eq!(a, before);
    }
}
