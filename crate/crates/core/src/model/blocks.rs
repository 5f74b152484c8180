//! Shared building blocks for all encoders and decoders: a pre-norm
//! attention/convolution/feed-forward block and sinusoidal positions.

use crate::num::{Graph, Tensor, Var};
use crate::Result;

use super::params::Bound;

/// `x @ W + b` with parameters named `{prefix}_w` / `{prefix}_b`.
pub fn linear(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let w = b.var(&format!("{prefix}_w"))?;
    let bias = b.var(&format!("{prefix}_b"))?;
    let y = g.matmul(x, w)?;
    g.add_row(y, bias)
}

/// Classic sinusoidal position table, `[len, dim]`.
pub fn sinusoidal(len: usize, dim: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(len * dim);
    for pos in 0..len {
        for i in 0..dim {
            let rate = 10_000f64.powf((2 * (i / 2)) as f64 / dim as f64);
            let angle = pos as f64 / rate;
            data.push(if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    Tensor::new(vec![len, dim], data)
}

/// Add sinusoidal positions to a `[T, h]` sequence.
pub fn add_positions(g: &mut Graph, x: Var) -> Result<Var> {
    let (t, h) = g.value(x).dims2();
    let pos = g.constant(sinusoidal(t, h)?);
    g.add(x, pos)
}

fn layer_norm(g: &mut Graph, b: &Bound, x: Var, prefix: &str, which: &str) -> Result<Var> {
    let gain = b.var(&format!("{prefix}/{which}_g"))?;
    let bias = b.var(&format!("{prefix}/{which}_b"))?;
    g.layer_norm(x, gain, bias, 1e-5)
}

/// One encoder block: pre-norm single-head self-attention, a depthwise
/// temporal convolution, and a pointwise feed-forward, each residual.
pub fn encoder_block(g: &mut Graph, b: &Bound, x: Var, prefix: &str) -> Result<Var> {
    let (_, h) = g.value(x).dims2();

    // Self-attention.
    let xn = layer_norm(g, b, x, prefix, "ln1")?;
    let q = {
        let w = b.var(&format!("{prefix}/attn_wq"))?;
        g.matmul(xn, w)?
    };
    let k = {
        let w = b.var(&format!("{prefix}/attn_wk"))?;
        g.matmul(xn, w)?
    };
    let v = {
        let w = b.var(&format!("{prefix}/attn_wv"))?;
        g.matmul(xn, w)?
    };
    let scores = g.matmul_nt(q, k)?;
    let scores = g.scale(scores, 1.0 / (h as f64).sqrt())?;
    let attn = g.softmax(scores)?;
    let mixed = g.matmul(attn, v)?;
    let wo = b.var(&format!("{prefix}/attn_wo"))?;
    let mixed = g.matmul(mixed, wo)?;
    let x = g.add(x, mixed)?;

    // Depthwise temporal convolution.
    let xn = layer_norm(g, b, x, prefix, "ln2")?;
    let cw = b.var(&format!("{prefix}/conv_w"))?;
    let cb = b.var(&format!("{prefix}/conv_b"))?;
    let conv = g.depthwise_conv(xn, cw, cb)?;
    let x = g.add(x, conv)?;

    // Feed-forward.
    let xn = layer_norm(g, b, x, prefix, "ln3")?;
    let f = linear(g, b, xn, &format!("{prefix}/ff1"))?;
    let f = g.relu(f)?;
    let f = linear(g, b, f, &format!("{prefix}/ff2"))?;
    g.add(x, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{ModelConfig, ParamStore};

    #[test]
    fn sinusoidal_table_is_bounded_and_position_dependent() {
        let t = sinusoidal(6, 8).unwrap();
        assert_eq!(t.shape(), &[6, 8]);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(t.row(0), t.row(5));
        assert_eq!(t.row(0)[0], 0.0);
        assert_eq!(t.row(0)[1], 1.0);
    }

    #[test]
    fn encoder_block_preserves_shape_and_is_deterministic() {
        let mc = ModelConfig { hidden_dim: 24, ..ModelConfig::default() };
        let store = ParamStore::init(&mc, 5).unwrap();
        let run = || -> Vec<f64> {
            let mut g = Graph::new();
            let b = store.bind(&mut g, &[]).unwrap();
            let x = g.constant(
                Tensor::new(vec![4, 24], (0..96).map(|i| (i as f64 * 0.37).sin()).collect())
                    .unwrap(),
            );
            let y = encoder_block(&mut g, &b, x, "shared/b0").unwrap();
            assert_eq!(g.value(y).shape(), &[4, 24]);
            g.value(y).data().to_vec()
        };
        let a = run();
        let b2 = run();
        assert_eq!(a, b2);
        assert!(a.iter().all(|v| v.is_finite()));
    }
}
