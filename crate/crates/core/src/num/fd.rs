//! Central finite differences. Test harnesses use this as an independent
//! check on every analytic gradient in the crate.

/// d/dx_i of `f`, one element at a time, via (f(x+h) − f(x−h)) / 2h.
pub fn central_diff(f: &mut dyn FnMut(&[f64]) -> f64, x0: &[f64], h: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(x0.len());
    let mut x = x0.to_vec();
    for i in 0..x0.len() {
        x[i] = x0[i] + h;
        let fp = f(&x);
        x[i] = x0[i] - h;
        let fm = f(&x);
        x[i] = x0[i];
        out.push((fp - fm) / (2.0 * h));
    }
    out
}

/// Largest relative disagreement |a−b| / max(floor, |a|, |b|).
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch in max_rel_err");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y).abs() / floor.max(x.abs()).max(y.abs()))
        .fold(0.0, f64::max)
}
