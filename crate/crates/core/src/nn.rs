//! Layers shared by the encoder, embedder and decoder. Token tensors are
//! `(N, D)` rows; spatial tensors are `(C, H, W)`.

use rand::Rng;

use crate::autograd::Var;
use crate::params::{Binder, Builder, ParamId};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let mut s = b.scope(name);
        let w = s.normal("weight", &[fan_out, fan_in], (1.0 / fan_in as f64).sqrt());
        let bias = s.constant("bias", &[fan_out], 0.0);
        Self { w, b: bias, fan_in, fan_out }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.linear(p.var(self.w), Some(p.var(self.b)))
    }
}

/// Two affine maps around a GELU; `Identity` passes tokens through.
#[derive(Clone, Debug)]
pub enum Mlp {
    Identity,
    Dense { fc1: Linear, fc2: Linear },
}

impl Mlp {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> Self {
        let mut s = b.scope(name);
        Mlp::Dense { fc1: Linear::new(&mut s, "fc1", fan_in, hidden), fc2: Linear::new(&mut s, "fc2", hidden, fan_out) }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        match self {
            Mlp::Identity => x,
            Mlp::Dense { fc1, fc2 } => fc2.forward(p, fc1.forward(p, x).gelu()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize) -> Self {
        let mut s = b.scope(name);
        Self { gamma: s.constant("gamma", &[dim], 1.0), beta: s.constant("beta", &[dim], 0.0) }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        x.layer_norm(p.var(self.gamma), p.var(self.beta), 1e-5)
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        assert!(heads > 0 && dim % heads == 0, "width {dim} not divisible by {heads} heads");
        let mut s = b.scope(name);
        Self {
            q: Linear::new(&mut s, "q", dim, dim),
            k: Linear::new(&mut s, "k", dim, dim),
            v: Linear::new(&mut s, "v", dim, dim),
            o: Linear::new(&mut s, "o", dim, dim),
            heads,
        }
    }

    /// `queries (Nq, D)` attend to `context (Nk, D)`.
    pub fn forward<'g>(&self, p: &Binder<'g, '_>, queries: Var<'g>, context: Var<'g>) -> Var<'g> {
        let dim = self.q.fan_out;
        let dh = dim / self.heads;
        let q = self.q.forward(p, queries);
        let k = self.k.forward(p, context);
        let v = self.v.forward(p, context);
        let scale = 1.0 / (dh as f64).sqrt();
        let heads: Vec<Var<'g>> = (0..self.heads)
            .map(|h| {
                let (a, b) = (h * dh, (h + 1) * dh);
                let att = q.slice_cols(a, b).matmul_nt(k.slice_cols(a, b)).scale(scale).softmax(1);
                att.matmul(v.slice_cols(a, b))
            })
            .collect();
        let merged = if heads.len() == 1 { heads[0] } else { Var::concat_cols(&heads) };
        self.o.forward(p, merged)
    }
}

/// Pre-norm self-attention layer with a feed-forward block.
#[derive(Clone, Debug)]
pub struct TransformerLayer {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: Mlp,
}

impl TransformerLayer {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize, mlp_ratio: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            ln1: LayerNorm::new(&mut s, "ln1", dim),
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads),
            ln2: LayerNorm::new(&mut s, "ln2", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, dim * mlp_ratio, dim),
        }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let h = self.ln1.forward(p, x);
        let x = x.add(self.attn.forward(p, h, h));
        x.add(self.mlp.forward(p, self.ln2.forward(p, x)))
    }
}

/// Pre-norm cross-attention followed by a feed-forward block.
#[derive(Clone, Debug)]
pub struct CrossAttentionBlock {
    pub ln_q: LayerNorm,
    pub ln_kv: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln_ff: LayerNorm,
    pub mlp: Mlp,
}

impl CrossAttentionBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, dim: usize, heads: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            ln_q: LayerNorm::new(&mut s, "ln_q", dim),
            ln_kv: LayerNorm::new(&mut s, "ln_kv", dim),
            attn: MultiHeadAttention::new(&mut s, "attn", dim, heads),
            ln_ff: LayerNorm::new(&mut s, "ln_ff", dim),
            mlp: Mlp::new(&mut s, "mlp", dim, 2 * dim, dim),
        }
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, queries: Var<'g>, context: Var<'g>) -> Var<'g> {
        let x = queries.add(self.attn.forward(p, self.ln_q.forward(p, queries), self.ln_kv.forward(p, context)));
        x.add(self.mlp.forward(p, self.ln_ff.forward(p, x)))
    }
}

/// Fixed 2-D sinusoidal position code, `(H·W, dim)`.
pub fn sincos_2d(h: usize, w: usize, dim: usize) -> crate::tensor::Tensor {
    let quarter = (dim / 4).max(1);
    crate::tensor::Tensor::from_fn(&[h * w, dim], |i| {
        let (tok, d) = (i / dim, i % dim);
        let (y, x) = ((tok / w) as f64, (tok % w) as f64);
        let band = d / quarter;
        let f = 1.0 / 100f64.powf((d % quarter) as f64 / quarter as f64);
        match band {
            0 => (y * f).sin(),
            1 => (y * f).cos(),
            2 => (x * f).sin(),
            3 => (x * f).cos(),
            _ => 0.0,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Graph;
    use crate::params::{Group, ParamStore};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn attention_rows_are_convex_combinations() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mha = MultiHeadAttention::new(&mut Builder::new(&mut store, &mut rng, Group::Decoder, "m"), "a", 4, 2);
        let g = Graph::new();
        let p = Binder::frozen(&g, &store);
        // identical context rows: every query receives the same value row
        let ctx = g.constant(Tensor::from_fn(&[3, 4], |i| (i % 4) as f64));
        let q = g.constant(Tensor::from_fn(&[2, 4], |i| i as f64 * 0.3));
        let out = mha.forward(&p, q, ctx).value();
        for c in 0..4 {
            assert!((out.data()[c] - out.data()[4 + c]).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_mlp_passes_through() {
        let store = ParamStore::new();
        let g = Graph::new();
        let p = Binder::frozen(&g, &store);
        let x = g.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        assert_eq!(*Mlp::Identity.forward(&p, x).value(), *x.value());
    }

    #[test]
    fn position_code_is_bounded_and_distinct() {
        let t = sincos_2d(3, 3, 8);
        assert!(t.data().iter().all(|v| v.abs() <= 1.0));
        assert_ne!(&t.data()[0..8], &t.data()[8..16]);
    }
}

/// `(C,H,W)` → `(H·W, C)`.
pub fn to_tokens(x: Var<'_>) -> Var<'_> {
    let s = x.shape();
    x.reshape(&[s[0], s[1] * s[2]]).transpose()
}

/// `(H·W, C)` → `(C,H,W)`.
pub fn to_grid(x: Var<'_>, h: usize, w: usize) -> Var<'_> {
    let c = x.shape()[1];
    x.transpose().reshape(&[c, h, w])
}
