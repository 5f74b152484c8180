//! Masked signal prediction against a frozen random quantizer: a random
//! projection of raw signal frames is matched to its nearest entry in a
//! random codebook, and the encoder must classify masked frames into those
//! code indices. Projection and codebook are derived from the run seed and
//! never trained or checkpointed.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;
use crate::rng::{purpose, rng_for};

/// Frozen random projection + codebook. Rebuilt deterministically from the
/// seed whenever needed; receives no gradients by construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomQuantizer {
    /// d_sig × d_code projection.
    proj: Tensor,
    /// v_code × d_code codebook.
    codebook: Tensor,
}

impl RandomQuantizer {
    pub fn new(seed: u64, d_sig: usize, d_code: usize, v_code: usize) -> Result<Self> {
        if d_sig == 0 || d_code == 0 || v_code < 2 {
            return Err(Error::InvalidArg(format!(
                "quantizer dims must be positive with ≥ 2 codes, got {d_sig}/{d_code}/{v_code}"
            )));
        }
        let mut rng = rng_for(seed, &[purpose::QUANTIZER]);
        let proj = Tensor::randn(vec![d_sig, d_code], 1.0, &mut rng)?;
        let codebook = Tensor::randn(vec![v_code, d_code], 1.0, &mut rng)?;
        Ok(RandomQuantizer { proj, codebook })
    }

    pub fn code_count(&self) -> usize {
        self.codebook.dims2().0
    }

    /// Project one signal frame and return the index of the nearest
    /// codebook entry (squared L2; ties take the smallest index).
    pub fn quantize(&self, frame: &[f64]) -> Result<usize> {
        let (d_sig, d_code) = self.proj.dims2();
        if frame.len() != d_sig {
            return Err(Error::InvalidArg(format!(
                "quantize: frame has {} dims, projection wants {d_sig}",
                frame.len()
            )));
        }
        let mut px = vec![0.0; d_code];
        for (i, &x) in frame.iter().enumerate() {
            if x != 0.0 {
                for (j, p) in px.iter_mut().enumerate() {
                    *p += x * self.proj.data()[i * d_code + j];
                }
            }
        }
        let (v_code, _) = self.codebook.dims2();
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for v in 0..v_code {
            let row = self.codebook.row(v);
            let d: f64 = px.iter().zip(row).map(|(&a, &b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = v;
            }
        }
        Ok(best)
    }

    /// Code indices for every row of a signal (used to label the original,
    /// un-noised frames).
    pub fn quantize_rows(&self, signal: &Tensor) -> Result<Vec<usize>> {
        let (t, _) = signal.dims2();
        (0..t).map(|i| self.quantize(signal.row(i))).collect()
    }

    /// Raw parameter bytes of projection and codebook, for freeze checks.
    pub fn fingerprint(&self) -> (Vec<f64>, Vec<f64>) {
        (self.proj.data().to_vec(), self.codebook.data().to_vec())
    }
}

/// Replace masked rows of a signal with seeded Gaussian noise, leaving
/// unmasked rows bit-identical. Errors if every row is masked (the loss
/// would have no clean context) or none is.
pub fn apply_span_noise(
    signal: &Tensor,
    masked: &[bool],
    noise_std: f64,
    rng: &mut impl rand::Rng,
) -> Result<Tensor> {
    let (t, d) = signal.dims2();
    if masked.len() != t {
        return Err(Error::InvalidArg(format!(
            "apply_span_noise: {} flags for {t} frames",
            masked.len()
        )));
    }
    if masked.iter().all(|&m| m) {
        return Err(Error::Data("signal masking degenerate: every frame masked".into()));
    }
    if !masked.iter().any(|&m| m) {
        return Err(Error::Data("signal masking degenerate: no frame masked".into()));
    }
    let mut data = signal.data().to_vec();
    for (i, &m) in masked.iter().enumerate() {
        if m {
            let noise = Tensor::randn(vec![d], noise_std, rng)?;
            data[i * d..(i + 1) * d].copy_from_slice(noise.data());
        }
    }
    Tensor::new(vec![t, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::num::linalg::solve_inplace;
    use crate::textproc::span_mask_flags;

    #[test]
    fn quantizer_is_seed_deterministic() {
        let a = RandomQuantizer::new(9, 16, 8, 16).unwrap();
        let b = RandomQuantizer::new(9, 16, 8, 16).unwrap();
        assert_eq!(a, b);
        let c = RandomQuantizer::new(10, 16, 8, 16).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn codebook_preimage_quantizes_to_its_own_index() {
        // Build a frame whose projection lands exactly on codebook entry 3:
        // x = P·y with y = (PᵀP)⁻¹·c₃, so x·P = c₃.
        let q = RandomQuantizer::new(4, 16, 8, 16).unwrap();
        let (d_sig, d_code) = q.proj.dims2();
        let p = q.proj.data();
        let mut ptp = vec![0.0; d_code * d_code];
        for r in 0..d_sig {
            for i in 0..d_code {
                for j in 0..d_code {
                    ptp[i * d_code + j] += p[r * d_code + i] * p[r * d_code + j];
                }
            }
        }
        let mut y = q.codebook.row(3).to_vec();
        solve_inplace(&mut ptp, &mut y, d_code, 1).unwrap();
        let mut x = vec![0.0; d_sig];
        for r in 0..d_sig {
            for (i, &yv) in y.iter().enumerate() {
                x[r] += p[r * d_code + i] * yv;
            }
        }
        assert_eq!(q.quantize(&x).unwrap(), 3);
    }

    #[test]
    fn noise_replaces_only_masked_rows() {
        let signal = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, 4.0],
            vec![5.0, 6.0],
            vec![7.0, 8.0],
        ])
        .unwrap();
        let masked = vec![false, true, false, true];
        let mut rng = crate::rng::rng_for(3, &[1]);
        let noised = apply_span_noise(&signal, &masked, 0.5, &mut rng).unwrap();
        assert_eq!(noised.row(0), signal.row(0));
        assert_eq!(noised.row(2), signal.row(2));
        assert_ne!(noised.row(1), signal.row(1));
        assert_ne!(noised.row(3), signal.row(3));
    }

    #[test]
    fn degenerate_masks_are_rejected() {
        let signal = Tensor::zeros(vec![3, 2]).unwrap();
        let mut rng = crate::rng::rng_for(3, &[2]);
        assert!(apply_span_noise(&signal, &[true, true, true], 0.5, &mut rng).is_err());
        assert!(apply_span_noise(&signal, &[false, false, false], 0.5, &mut rng).is_err());
    }

    #[test]
    fn frame_masking_reuses_span_selection() {
        let mut rng = crate::rng::rng_for(4, &[3]);
        let flags = span_mask_flags(40, 4, 0.3, &mut rng).unwrap();
        let frac = flags.iter().filter(|&&f| f).count() as f64 / 40.0;
        assert!(frac >= 0.3 && frac <= 0.4 + 1e-12, "fraction {frac}");
    }
}
