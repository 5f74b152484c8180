//! Small dense linear algebra: Gaussian elimination, least squares via
//! normal equations, and random orthonormal matrices. Everything is
//! row-major `&[f64]` with explicit dimensions, sized for matrices in the
//! tens of rows and columns.

use crate::error::{Error, Result};
use crate::num::tensor::Tensor;
use rand::Rng;

/// Solve A·X = B for X in place with partial pivoting. `a` is n×n and is
/// destroyed; `b` is n×m and is overwritten with the solution.
pub fn solve_inplace(a: &mut [f64], b: &mut [f64], n: usize, m: usize) -> Result<()> {
    if a.len() != n * n || b.len() != n * m {
        return Err(Error::InvalidArg(format!(
            "solve_inplace: a has {} elements (want {}), b has {} (want {})",
            a.len(),
            n * n,
            b.len(),
            n * m
        )));
    }
    let scale = a.iter().fold(0.0f64, |acc, &x| acc.max(x.abs())).max(1e-30);
    for col in 0..n {
        // Partial pivot: largest remaining entry in this column.
        let mut piv = col;
        for row in col + 1..n {
            if a[row * n + col].abs() > a[piv * n + col].abs() {
                piv = row;
            }
        }
        if a[piv * n + col].abs() < 1e-12 * scale {
            return Err(Error::Numeric(format!(
                "singular system: pivot {:.3e} at column {col}",
                a[piv * n + col]
            )));
        }
        if piv != col {
            for j in 0..n {
                a.swap(col * n + j, piv * n + j);
            }
            for j in 0..m {
                b.swap(col * m + j, piv * m + j);
            }
        }
        let d = a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] / d;
            if f == 0.0 {
                continue;
            }
            for j in col..n {
                a[row * n + j] -= f * a[col * n + j];
            }
            for j in 0..m {
                b[row * m + j] -= f * b[col * m + j];
            }
        }
    }
    // Back substitution.
    for col in (0..n).rev() {
        let d = a[col * n + col];
        for j in 0..m {
            let mut acc = b[col * m + j];
            for k in col + 1..n {
                acc -= a[col * n + k] * b[k * m + j];
            }
            b[col * m + j] = acc / d;
        }
    }
    Ok(())
}

/// Least squares: find X (k×m) minimizing ‖A·X − B‖² for A (n×k), B (n×m),
/// via the normal equations. Errors on rank-deficient A.
pub fn lstsq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Result<Vec<f64>> {
    if a.len() != n * k || b.len() != n * m {
        return Err(Error::InvalidArg(format!(
            "lstsq: a has {} elements (want {}), b has {} (want {})",
            a.len(),
            n * k,
            b.len(),
            n * m
        )));
    }
    if n < k {
        return Err(Error::Numeric(format!(
            "lstsq: underdetermined system ({n} rows for {k} unknowns)"
        )));
    }
    let mut ata = vec![0.0; k * k];
    for row in 0..n {
        let ar = &a[row * k..(row + 1) * k];
        for i in 0..k {
            if ar[i] == 0.0 {
                continue;
            }
            for j in 0..k {
                ata[i * k + j] += ar[i] * ar[j];
            }
        }
    }
    let mut atb = vec![0.0; k * m];
    for row in 0..n {
        let ar = &a[row * k..(row + 1) * k];
        let br = &b[row * m..(row + 1) * m];
        for i in 0..k {
            if ar[i] == 0.0 {
                continue;
            }
            for j in 0..m {
                atb[i * m + j] += ar[i] * br[j];
            }
        }
    }
    solve_inplace(&mut ata, &mut atb, k, m)?;
    Ok(atb)
}

/// Random matrix with orthonormal columns (rows ≥ cols), built by modified
/// Gram-Schmidt on i.i.d. Gaussian entries.
pub fn random_orthonormal_cols(rows: usize, cols: usize, rng: &mut impl Rng) -> Result<Tensor> {
    if rows < cols {
        return Err(Error::InvalidArg(format!(
            "orthonormal columns need rows ≥ cols, got {rows}×{cols}"
        )));
    }
    let raw = Tensor::randn(vec![rows, cols], 1.0, rng)?;
    let mut q = raw.data().to_vec();
    for c in 0..cols {
        // Remove projections onto previous columns, twice for stability.
        for _pass in 0..2 {
            for p in 0..c {
                let mut dot = 0.0;
                for r in 0..rows {
                    dot += q[r * cols + c] * q[r * cols + p];
                }
                for r in 0..rows {
                    q[r * cols + c] -= dot * q[r * cols + p];
                }
            }
        }
        let norm: f64 = (0..rows).map(|r| q[r * cols + c] * q[r * cols + c]).sum::<f64>().sqrt();
        if norm < 1e-10 {
            return Err(Error::Numeric(
                "degenerate random draw while orthonormalizing".into(),
            ));
        }
        for r in 0..rows {
            q[r * cols + c] /= norm;
        }
    }
    Tensor::new(vec![rows, cols], q)
}

/// ‖v − Q·Qᵀ·v‖ for Q (rows×cols) with orthonormal columns: the distance
/// from v to the column space of Q.
pub fn residual_outside_colspace(q: &Tensor, v: &[f64]) -> Result<f64> {
    let (rows, cols) = q.dims2();
    if v.len() != rows {
        return Err(Error::InvalidArg(format!(
            "residual: vector of {} elements against {rows}-row basis",
            v.len()
        )));
    }
    let qd = q.data();
    let mut coeffs = vec![0.0; cols];
    for c in 0..cols {
        for r in 0..rows {
            coeffs[c] += qd[r * cols + c] * v[r];
        }
    }
    let mut res = 0.0;
    for r in 0..rows {
        let mut proj = 0.0;
        for c in 0..cols {
            proj += qd[r * cols + c] * coeffs[c];
        }
        let diff = v[r] - proj;
        res += diff * diff;
    }
    Ok(res.sqrt())
}
