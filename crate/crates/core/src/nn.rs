//! Transformer building blocks on the tape: masked multi-head attention
//! with rotary positions, pre-norm blocks with optional adaptive
//! scale/shift modulation, and sinusoidal scalar features.

use crate::diffcore::{rope_tables, Bindings, Graph, NodeId, ParamSet, Tensor};
use crate::error::Result;
use crate::Rng;

pub const MASKED: f64 = -1e30;

/// Attention bias where `allow[q][k]` grants visibility. Every query row
/// must keep at least itself visible, otherwise the softmax degenerates.
pub fn mask_bias(allow: &dyn Fn(usize, usize) -> bool, n: usize) -> Tensor {
    let mut data = vec![0.0; n * n];
    for q in 0..n {
        debug_assert!(allow(q, q), "query {q} must see itself");
        for k in 0..n {
            if !allow(q, k) {
                data[q * n + k] = MASKED;
            }
        }
    }
    Tensor::new(&[n, n], data).expect("mask shape")
}

pub fn causal_mask(n: usize) -> Tensor {
    mask_bias(&|q, k| k <= q, n)
}

/// `[sin(t·ω_j), cos(t·ω_j)]` features for a batch of scalars.
pub fn sinusoidal_features(ts: &[f64], dim: usize) -> Tensor {
    assert!(dim % 2 == 0);
    let half = dim / 2;
    let mut data = vec![0.0; ts.len() * dim];
    for (i, &t) in ts.iter().enumerate() {
        for j in 0..half {
            let freq = 10_000f64.powf(-(j as f64) / half as f64);
            data[i * dim + 2 * j] = (t * freq).sin();
            data[i * dim + 2 * j + 1] = (t * freq).cos();
        }
    }
    Tensor::new(&[ts.len(), dim], data).expect("sinusoidal shape")
}

/// Registers one pre-norm transformer block's parameters.
pub fn register_block(params: &mut ParamSet, prefix: &str, dm: usize, rng: &mut Rng) {
    params.add_linear(&format!("{prefix}.wq"), dm, dm, rng);
    params.add_linear(&format!("{prefix}.wk"), dm, dm, rng);
    params.add_linear(&format!("{prefix}.wv"), dm, dm, rng);
    params.add_linear(&format!("{prefix}.wo"), dm, dm, rng);
    params.add(&format!("{prefix}.ln1_g"), Tensor::full(&[dm], 1.0));
    params.add_zeros(&format!("{prefix}.ln1_b"), &[dm]);
    params.add_linear(&format!("{prefix}.w1"), dm, 4 * dm, rng);
    params.add_zeros(&format!("{prefix}.b1"), &[4 * dm]);
    params.add_linear(&format!("{prefix}.w2"), 4 * dm, dm, rng);
    params.add_zeros(&format!("{prefix}.b2"), &[dm]);
    params.add(&format!("{prefix}.ln2_g"), Tensor::full(&[dm], 1.0));
    params.add_zeros(&format!("{prefix}.ln2_b"), &[dm]);
}

/// Per-position scale/shift pairs for adaptive normalization, `[n, dm]` each.
#[derive(Clone, Copy)]
pub struct Modulation {
    pub scale1: NodeId,
    pub shift1: NodeId,
    pub scale2: NodeId,
    pub shift2: NodeId,
}

pub struct BlockCtx<'a> {
    pub graph: &'a mut Graph,
    pub binds: &'a Bindings,
    pub params: &'a ParamSet,
}

impl<'a> BlockCtx<'a> {
    pub fn new(graph: &'a mut Graph, binds: &'a Bindings, params: &'a ParamSet) -> Self {
        BlockCtx {
            graph,
            binds,
            params,
        }
    }

    pub fn p(&self, name: &str) -> NodeId {
        self.binds.node_of(self.params, name)
    }

    pub fn linear(&mut self, x: NodeId, w: &str) -> Result<NodeId> {
        let wn = self.p(w);
        self.graph.matmul(x, wn)
    }

    pub fn linear_bias(&mut self, x: NodeId, w: &str, b: &str) -> Result<NodeId> {
        let y = self.linear(x, w)?;
        let bn = self.p(b);
        self.graph.add_row(y, bn)
    }

    fn affine_norm(&mut self, x: NodeId, gamma: &str, beta: &str) -> Result<NodeId> {
        let n = self.graph.layer_norm(x, 1e-5)?;
        let gn = self.p(gamma);
        let bn = self.p(beta);
        let scaled = self.graph.mul_row(n, gn)?;
        self.graph.add_row(scaled, bn)
    }

    fn modulated_norm(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        let n = self.graph.layer_norm(x, 1e-5)?;
        let one_plus = self.graph.add_scalar(scale, 1.0);
        let scaled = self.graph.mul(n, one_plus)?;
        self.graph.add(scaled, shift)
    }

    /// Masked multi-head self-attention. `rope` applies rotary positions to
    /// queries and keys.
    pub fn attention(
        &mut self,
        x: NodeId,
        prefix: &str,
        heads: usize,
        mask: &Tensor,
        rope: Option<(&Tensor, &Tensor)>,
    ) -> Result<NodeId> {
        let dm = self.graph.value(x).cols();
        let dh = dm / heads;
        assert!(dm % heads == 0, "d_model {dm} not divisible by {heads} heads");
        let q = self.linear(x, &format!("{prefix}.wq"))?;
        let k = self.linear(x, &format!("{prefix}.wk"))?;
        let v = self.linear(x, &format!("{prefix}.wv"))?;
        let mask_node = self.graph.leaf(mask.clone());
        let mut head_outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let mut qh = self.graph.slice_cols(q, h * dh, dh)?;
            let mut kh = self.graph.slice_cols(k, h * dh, dh)?;
            let vh = self.graph.slice_cols(v, h * dh, dh)?;
            if let Some((cos, sin)) = rope {
                qh = self.graph.rope(qh, cos, sin)?;
                kh = self.graph.rope(kh, cos, sin)?;
            }
            let kt = self.graph.transpose(kh)?;
            let scores = self.graph.matmul(qh, kt)?;
            let scores = self.graph.mul_scalar(scores, 1.0 / (dh as f64).sqrt());
            let scores = self.graph.add(scores, mask_node)?;
            let attn = self.graph.softmax_rows(scores)?;
            head_outs.push(self.graph.matmul(attn, vh)?);
        }
        let mut merged = head_outs[0];
        for &h in &head_outs[1..] {
            merged = self.graph.concat_cols(merged, h)?;
        }
        self.linear(merged, &format!("{prefix}.wo"))
    }

    fn mlp(&mut self, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = self.linear_bias(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let gate = self.graph.sigmoid(h);
        let silu = self.graph.mul(h, gate)?;
        self.linear_bias(silu, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    /// Pre-norm block: `x + Attn(norm(x))`, then `x + Mlp(norm(x))`.
    /// With `modulation`, the norms use adaptive scale/shift instead of the
    /// block's own affine parameters.
    pub fn transformer_block(
        &mut self,
        x: NodeId,
        prefix: &str,
        heads: usize,
        mask: &Tensor,
        rope: Option<(&Tensor, &Tensor)>,
        modulation: Option<Modulation>,
    ) -> Result<NodeId> {
        let normed = match modulation {
            Some(m) => self.modulated_norm(x, m.scale1, m.shift1)?,
            None => self.affine_norm(x, &format!("{prefix}.ln1_g"), &format!("{prefix}.ln1_b"))?,
        };
        let attn = self.attention(normed, prefix, heads, mask, rope)?;
        let x = self.graph.add(x, attn)?;
        let normed = match modulation {
            Some(m) => self.modulated_norm(x, m.scale2, m.shift2)?,
            None => self.affine_norm(x, &format!("{prefix}.ln2_g"), &format!("{prefix}.ln2_b"))?,
        };
        let mlp = self.mlp(normed, prefix)?;
        self.graph.add(x, mlp)
    }
}

/// Rotary tables sized for a stream of `len` positions with `heads` heads
/// over `dm` model dims.
pub fn rope_for(len: usize, dm: usize, heads: usize) -> (Tensor, Tensor) {
    rope_tables(len, dm / heads, 10_000.0)
}
