//! Text-conditioned decoder producing `K` logit maps for any `K`.
//!
//! Class prompts and image tokens exchange information through two
//! cross-attention blocks; the image grid is then upsampled twice with skip
//! inputs from backbone blocks 2 and 1, while a third cross-attention block
//! and an MLP turn each prompt into a per-class weight vector. Logits are
//! per-pixel inner products with those weights.

use std::path::Path;

use rand::Rng;

use crate::autograd::Var;
use crate::container::{Container, Kind, Payload};
use crate::error::{invalid, shape, Error, Result};
use crate::fusion_encoder::EncoderVars;
use crate::nn::{to_grid, to_tokens, CrossAttentionBlock, Linear, Mlp};
use crate::params::{Binder, Builder, ParamId};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub text_dim: usize,
    pub heads: usize,
    /// Channel widths of backbone blocks 1 and 2 (skip inputs).
    pub skip_widths: [usize; 2],
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub config: DecoderConfig,
    text_mlp: Mlp,
    attn_text: CrossAttentionBlock,
    attn_image: CrossAttentionBlock,
    attn_weights: CrossAttentionBlock,
    up1: (ParamId, ParamId),
    skip2: Linear,
    up2: (ParamId, ParamId),
    skip1: Linear,
    weight_mlp: Mlp,
}

impl Decoder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: DecoderConfig) -> Self {
        let d = config.d_model;
        assert!(d % 4 == 0, "decoder width must be a multiple of 4");
        let (d2, d4) = (d / 2, d / 4);
        Self {
            text_mlp: Mlp::new(b, "text_mlp", config.text_dim, d, d),
            attn_text: CrossAttentionBlock::new(b, "attn_text", d, config.heads),
            attn_image: CrossAttentionBlock::new(b, "attn_image", d, config.heads),
            attn_weights: CrossAttentionBlock::new(b, "attn_weights", d, config.heads),
            up1: (b.normal("up1.weight", &[d, d2, 2, 2], (d as f64).sqrt().recip()), b.constant("up1.bias", &[d2], 0.0)),
            skip2: Linear::new(b, "skip2", config.skip_widths[1], d2),
            up2: (b.normal("up2.weight", &[d2, d4, 2, 2], (d2 as f64).sqrt().recip()), b.constant("up2.bias", &[d4], 0.0)),
            skip1: Linear::new(b, "skip1", config.skip_widths[0], d4),
            weight_mlp: Mlp::new(b, "weight_mlp", d, d, d4),
            config,
        }
    }

    fn skip<'g>(p: &Binder<'g, '_>, proj: &Linear, feat: Var<'g>, h: usize, w: usize) -> Var<'g> {
        let s = feat.shape();
        to_grid(proj.forward(p, to_tokens(feat)), s[1], s[2]).resize_bilinear(h, w)
    }

    /// Logits `(K, out_h, out_w)` for prompts `(K, text_dim)`.
    pub fn decode<'g>(&self, p: &Binder<'g, '_>, enc: &EncoderVars<'g>, prompts: Var<'g>, out_h: usize, out_w: usize) -> Result<Var<'g>> {
        let ps = prompts.shape();
        if ps.len() != 2 || ps[0] == 0 {
            return Err(invalid(format!("prompts must be (K, dim) with K ≥ 1, got {ps:?}")));
        }
        if ps[1] != self.config.text_dim {
            return Err(shape(format!("prompt width {} but decoder expects {}", ps[1], self.config.text_dim)));
        }
        let es = enc.embedding.shape();
        if es[0] != self.config.d_model {
            return Err(shape(format!("image embedding width {} but decoder expects {}", es[0], self.config.d_model)));
        }
        let k = ps[0];
        let (h3, w3) = (es[1], es[2]);
        let text = self.text_mlp.forward(p, prompts);
        let image = to_tokens(enc.embedding);
        let text = self.attn_text.forward(p, text, image);
        let image = self.attn_image.forward(p, image, text);

        let g = to_grid(image, h3, w3);
        let g = g.conv_transpose2x2(p.var(self.up1.0), Some(p.var(self.up1.1)));
        let g = g.add(Self::skip(p, &self.skip2, enc.blocks[1], 2 * h3, 2 * w3)).gelu();
        let g = g.conv_transpose2x2(p.var(self.up2.0), Some(p.var(self.up2.1)));
        let g = g.add(Self::skip(p, &self.skip1, enc.blocks[0], 4 * h3, 4 * w3)).gelu();

        let text = self.attn_weights.forward(p, text, image);
        let weights = self.weight_mlp.forward(p, text);
        let d4 = self.config.d_model / 4;
        let (h1, w1) = (4 * h3, 4 * w3);
        let logits = weights.matmul(g.reshape(&[d4, h1 * w1])).reshape(&[k, h1, w1]);
        Ok(logits.resize_bilinear(out_h, out_w))
    }
}

/// Per-class probabilities `(K,H,W)` with per-class maximum confidence.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityStack {
    probs: Tensor,
    confidences: Vec<f64>,
    pub taxonomy_id: String,
}

impl ProbabilityStack {
    pub fn new(probs: Tensor, taxonomy_id: impl Into<String>) -> Result<Self> {
        if probs.ndim() != 3 || probs.dim(0) == 0 {
            return Err(shape(format!("probability stack must be (K,H,W), got {:?}", probs.shape())));
        }
        let n = probs.dim(1) * probs.dim(2);
        let confidences = (0..probs.dim(0)).map(|k| probs.data()[k * n..(k + 1) * n].iter().cloned().fold(f64::NEG_INFINITY, f64::max)).collect();
        Ok(Self { probs, confidences, taxonomy_id: taxonomy_id.into() })
    }

    pub fn probs(&self) -> &Tensor {
        &self.probs
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn num_classes(&self) -> usize {
        self.probs.dim(0)
    }

    pub fn height(&self) -> usize {
        self.probs.dim(1)
    }

    pub fn width(&self) -> usize {
        self.probs.dim(2)
    }

    /// Per-pixel argmax; ties go to the lower class index.
    pub fn label_map(&self) -> Vec<u8> {
        argmax_map(&self.probs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Container {
            kind: Kind::Probabilities,
            shape: self.probs.shape().to_vec(),
            wavelengths: Vec::new(),
            gsd: 0.0,
            id: self.taxonomy_id.clone(),
            meta: String::new(),
            payload: Payload::F64(self.probs.data().to_vec()),
        }
        .write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(Kind::Probabilities, path)?;
        if c.shape.len() != 3 {
            return Err(Error::Format { path: path.to_path_buf(), msg: "probability stack must be K×H×W".into() });
        }
        Self::new(Tensor::new(&c.shape, c.payload.to_f64()), c.id)
    }
}

/// Argmax over the leading axis of `(K,H,W)`.
pub fn argmax_map(values: &Tensor) -> Vec<u8> {
    let (k, n) = (values.dim(0), values.dim(1) * values.dim(2));
    let d = values.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// Softmax over classes at every pixel.
pub fn predict_probs(logits: &Tensor, taxonomy_id: &str) -> Result<ProbabilityStack> {
    if logits.ndim() != 3 || logits.dim(0) == 0 {
        return Err(shape(format!("logits must be (K,H,W), got {:?}", logits.shape())));
    }
    let (k, n) = (logits.dim(0), logits.dim(1) * logits.dim(2));
    let d = logits.data();
    let mut out = vec![0.0; k * n];
    for i in 0..n {
        let m = (0..k).map(|c| d[c * n + i]).fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = (0..k).map(|c| (d[c * n + i] - m).exp()).sum();
        for c in 0..k {
            out[c * n + i] = (d[c * n + i] - m).exp() / s;
        }
    }
    ProbabilityStack::new(Tensor::new(logits.shape(), out), taxonomy_id)
}
