//! Frozen four-block hierarchical backbone with an attention-based fusion
//! module (AFM) after every backbone layer.
//!
//! At each layer the backbone output `E`, the tuned high-frequency stack and
//! the tuned block-matched spectral features are each gated by a channel
//! gate and a spatial gate, summed, and passed through a layer MLP, GELU and
//! a block MLP. The result replaces `E` as the input to the next layer.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::data_synth::MultispectralImage;
use crate::error::{invalid, shape, Result};
use crate::hf_extract::{hf_stack, rgb_indices, HF_CHANNELS};
use crate::nn::{to_grid, to_tokens, LayerNorm, Linear, Mlp, TransformerLayer};
use crate::params::{Binder, Builder, Group, ParamId, ParamStore};
use crate::spectral_embed::{SpectralConfig, SpectralEmbedder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub widths: [usize; 4],
    pub layers_per_block: usize,
    /// Patchify stride of the stem; later blocks each halve the grid.
    pub stem_stride: usize,
    pub heads: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { widths: [32, 64, 128, 256], layers_per_block: 2, stem_stride: 4, heads: 4 }
    }
}

impl BackboneConfig {
    /// Input sides must be multiples of this.
    pub fn total_stride(&self) -> usize {
        self.stem_stride * 8
    }

    pub fn block_strides(&self) -> [usize; 4] {
        let s = self.stem_stride;
        [s, 2 * s, 4 * s, 8 * s]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub spectral: SpectralConfig,
    pub afm_enabled: bool,
    pub hf_mask_ratio: f64,
    /// Width of the projected block features handed to the decoder.
    pub d_model: usize,
    pub gate_kernel: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { backbone: BackboneConfig::default(), spectral: SpectralConfig::default(), afm_enabled: true, hf_mask_ratio: 0.25, d_model: 64, gate_kernel: 7 }
    }
}

impl EncoderConfig {
    /// Input sides must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        let (a, b) = (self.backbone.total_stride(), self.spectral.patch_size);
        a / gcd(a, b) * b
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[derive(Clone, Debug)]
enum BackboneLayer {
    /// Depthwise 3×3 mixing, then a per-pixel MLP, with a residual.
    Conv { dw_w: ParamId, dw_b: ParamId, ln: LayerNorm, mlp: Mlp },
    Attention(TransformerLayer),
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    /// Stem and three stride-2 downsampling convolutions as `(weight, bias)`.
    down: Vec<(ParamId, ParamId)>,
    layers: Vec<Vec<BackboneLayer>>,
}

impl Backbone {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: BackboneConfig) -> Self {
        let w = config.widths;
        let mut down = Vec::new();
        let mut layers = Vec::new();
        for blk in 0..4 {
            let mut s = b.scope(&format!("block{blk}"));
            let (cin, k) = if blk == 0 { (3, config.stem_stride) } else { (w[blk - 1], 2) };
            let fan = (cin * k * k) as f64;
            down.push((s.normal("down.weight", &[w[blk], cin, k, k], fan.sqrt().recip()), s.constant("down.bias", &[w[blk]], 0.0)));
            let mut bl = Vec::new();
            for i in 0..config.layers_per_block {
                let mut ls = s.scope(&format!("layer{i}"));
                bl.push(if blk < 2 {
                    BackboneLayer::Conv {
                        dw_w: ls.normal("dw.weight", &[w[blk], 1, 3, 3], 1.0 / 3.0),
                        dw_b: ls.constant("dw.bias", &[w[blk]], 0.0),
                        ln: LayerNorm::new(&mut ls, "ln", w[blk]),
                        mlp: Mlp::new(&mut ls, "mlp", w[blk], 2 * w[blk], w[blk]),
                    }
                } else {
                    BackboneLayer::Attention(TransformerLayer::new(&mut ls, "attn", w[blk], config.heads.min(w[blk]), 2))
                });
            }
            layers.push(bl);
        }
        Self { config, down, layers }
    }

    fn downsample<'g>(&self, p: &Binder<'g, '_>, blk: usize, x: Var<'g>) -> Var<'g> {
        let (w, b) = self.down[blk];
        let k = if blk == 0 { self.config.stem_stride } else { 2 };
        x.conv2d(p.var(w), Some(p.var(b)), k, 0)
    }

    fn layer<'g>(&self, p: &Binder<'g, '_>, blk: usize, i: usize, x: Var<'g>) -> Var<'g> {
        let s = x.shape();
        let (h, w) = (s[1], s[2]);
        match &self.layers[blk][i] {
            BackboneLayer::Conv { dw_w, dw_b, ln, mlp } => {
                let mixed = to_tokens(x.depthwise_conv2d(p.var(*dw_w), Some(p.var(*dw_b))));
                x.add(to_grid(mlp.forward(p, ln.forward(p, mixed)), h, w))
            }
            BackboneLayer::Attention(t) => to_grid(t.forward(p, to_tokens(x)), h, w),
        }
    }

    /// Plain block outputs without any fusion.
    pub fn forward<'g>(&self, p: &Binder<'g, '_>, rgb: Var<'g>) -> Vec<Var<'g>> {
        let mut x = rgb;
        let mut outs = Vec::new();
        for blk in 0..4 {
            x = self.downsample(p, blk, x);
            for i in 0..self.config.layers_per_block {
                x = self.layer(p, blk, i, x);
            }
            outs.push(x);
        }
        outs
    }
}

/// Channel gate MLP plus spatial-gate convolution for one stream.
#[derive(Clone, Debug)]
pub struct AttentionGates {
    pub channel_mlp: Mlp,
    pub spatial_w: ParamId,
    pub spatial_b: ParamId,
}

impl AttentionGates {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, width: usize, kernel: usize) -> Self {
        let mut s = b.scope(name);
        let hidden = width.div_ceil(4);
        Self {
            channel_mlp: Mlp::new(&mut s, "channel", width, hidden, width),
            spatial_w: s.normal("spatial.weight", &[1, 2, kernel, kernel], (2.0 * (kernel * kernel) as f64).sqrt().recip()),
            spatial_b: s.constant("spatial.bias", &[1], 0.0),
        }
    }
}

/// `sigmoid(MLP(avg_pool F) + MLP(max_pool F))` for tokens `(N, C)`; returns `(C)`.
pub fn feature_attention<'g>(p: &Binder<'g, '_>, mlp: &Mlp, f: Var<'g>) -> Var<'g> {
    let c = f.shape()[1];
    let avg = f.mean_axis(0).reshape(&[1, c]);
    let max = f.max_axis(0).reshape(&[1, c]);
    mlp.forward(p, avg).add(mlp.forward(p, max)).sigmoid().reshape(&[c])
}

/// `sigmoid(conv([max_c F; mean_c F]))` for tokens `(N, C)` on an `h×w` grid; returns `(N)`.
pub fn position_attention<'g>(p: &Binder<'g, '_>, gates: &AttentionGates, f: Var<'g>, h: usize, w: usize) -> Var<'g> {
    let n = h * w;
    let stack = Var::concat_rows(&[f.max_axis(1).reshape(&[1, n]), f.mean_axis(1).reshape(&[1, n])]).reshape(&[2, h, w]);
    let k = p.store().value(gates.spatial_w).dim(2);
    stack.conv2d(p.var(gates.spatial_w), Some(p.var(gates.spatial_b)), 1, k / 2).sigmoid().reshape(&[n])
}

/// `F ⊗ a_f(F) ⊗ a_p(F ⊗ a_f(F))`.
pub fn attention_enhance<'g>(p: &Binder<'g, '_>, gates: &AttentionGates, f: Var<'g>, h: usize, w: usize) -> Var<'g> {
    let ff = f.mul_row(feature_attention(p, &gates.channel_mlp, f));
    ff.mul_col(position_attention(p, gates, ff, h, w))
}

/// Three affine maps with GELU between them.
#[derive(Clone, Debug)]
pub struct TuningBlock(pub [Linear; 3]);

impl TuningBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, fan_in: usize, width: usize) -> Self {
        let mut s = b.scope(name);
        Self([Linear::new(&mut s, "fc1", fan_in, width), Linear::new(&mut s, "fc2", width, width), Linear::new(&mut s, "fc3", width, width)])
    }

    pub fn forward<'g>(&self, p: &Binder<'g, '_>, x: Var<'g>) -> Var<'g> {
        let [a, b, c] = &self.0;
        c.forward(p, b.forward(p, a.forward(p, x).gelu()).gelu())
    }
}

#[derive(Clone, Debug)]
pub struct AfmLayer {
    pub tune_hf: TuningBlock,
    pub tune_spe: TuningBlock,
    pub gates_main: AttentionGates,
    pub gates_hf: AttentionGates,
    pub gates_spe: AttentionGates,
    pub mlp_layer: Mlp,
}

#[derive(Clone, Debug)]
pub struct AfmBlock {
    pub layers: Vec<AfmLayer>,
    pub mlp_block: Mlp,
}

impl AfmBlock {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, blk: usize, width: usize, layers: usize, spe_dim: usize, kernel: usize) -> Self {
        let mut s = b.scope(&format!("block{blk}"));
        let layers = (0..layers)
            .map(|i| {
                let mut ls = s.scope(&format!("layer{i}"));
                AfmLayer {
                    tune_hf: TuningBlock::new(&mut ls, "tune_hf", HF_CHANNELS, width),
                    tune_spe: TuningBlock::new(&mut ls, "tune_spe", spe_dim, width),
                    gates_main: AttentionGates::new(&mut ls, "gates_main", width, kernel),
                    gates_hf: AttentionGates::new(&mut ls, "gates_hf", width, kernel),
                    gates_spe: AttentionGates::new(&mut ls, "gates_spe", width, kernel),
                    mlp_layer: Mlp::new(&mut ls, "mlp_layer", width, width, width),
                }
            })
            .collect();
        Self { layers, mlp_block: Mlp::new(&mut s, "mlp_block", width, width, width) }
    }

    /// Fused tokens `(N, C)` from backbone tokens `(N, C)`, HF tokens `(N, 6)`
    /// and spectral tokens `(N, d)`, all on the same `h×w` grid.
    pub fn afm_layer<'g>(&self, p: &Binder<'g, '_>, i: usize, e: Var<'g>, hf: Var<'g>, spe: Var<'g>, h: usize, w: usize) -> Result<Var<'g>> {
        let l = &self.layers[i];
        let hf_t = l.tune_hf.forward(p, hf);
        let spe_t = l.tune_spe.forward(p, spe);
        let (se, sh, ss) = (e.shape(), hf_t.shape(), spe_t.shape());
        if se != sh || se != ss || se[0] != h * w {
            return Err(shape(format!("AFM streams disagree: main {se:?}, high-frequency {sh:?}, spectral {ss:?}")));
        }
        let sum = attention_enhance(p, &l.gates_main, e, h, w).add(attention_enhance(p, &l.gates_hf, hf_t, h, w)).add(attention_enhance(p, &l.gates_spe, spe_t, h, w));
        Ok(self.mlp_block.forward(p, l.mlp_layer.forward(p, sum).gelu()))
    }
}

/// Graph-resident encoder outputs.
#[derive(Clone, Debug)]
pub struct EncoderVars<'g> {
    /// Raw block outputs `(C_b, H_b, W_b)`.
    pub blocks: Vec<Var<'g>>,
    /// Sum of the upsampled block-4 projection and the block-3 projection, `(d, H_3, W_3)`.
    pub embedding: Var<'g>,
}

/// Detached encoder outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderFeatures {
    pub per_block: Vec<Tensor>,
    pub decoder_embedding: Tensor,
}

impl From<&EncoderVars<'_>> for EncoderFeatures {
    fn from(v: &EncoderVars<'_>) -> Self {
        Self { per_block: v.blocks.iter().map(|b| (*b.value()).clone()).collect(), decoder_embedding: (*v.embedding.value()).clone() }
    }
}

#[derive(Clone, Debug)]
pub struct FusionEncoder {
    pub config: EncoderConfig,
    pub backbone: Backbone,
    pub afm: Vec<AfmBlock>,
    pub neck: Vec<Linear>,
    pub spectral: SpectralEmbedder,
}

impl FusionEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: EncoderConfig) -> Self {
        let bc = &config.backbone;
        let backbone = Backbone::new(&mut Builder::new(store, rng, Group::Backbone, "backbone"), bc.clone());
        let spectral = SpectralEmbedder::new(&mut Builder::new(store, rng, Group::Spectral, "spectral"), config.spectral.clone());
        let mut ab = Builder::new(store, rng, Group::Afm, "afm");
        let afm = (0..4).map(|b| AfmBlock::new(&mut ab, b, bc.widths[b], bc.layers_per_block, config.spectral.embed_dim, config.gate_kernel)).collect();
        let mut nb = Builder::new(store, rng, Group::Neck, "neck");
        let neck = (0..4).map(|b| Linear::new(&mut nb, &format!("proj{b}"), bc.widths[b], config.d_model)).collect();
        Self { config, backbone, afm, neck, spectral }
    }

    pub fn check_input(&self, image: &MultispectralImage) -> Result<()> {
        let (_, h, w) = image.dims();
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(invalid(format!("{h}×{w} input must have sides divisible by {m}")));
        }
        rgb_indices(image.wavelengths())?;
        Ok(())
    }

    /// Runs the encoder on a normalised image.
    pub fn encode<'g>(&self, p: &Binder<'g, '_>, image: &MultispectralImage) -> Result<EncoderVars<'g>> {
        self.check_input(image)?;
        let g = p.graph();
        let (_, h, w) = image.dims();
        let rgb_idx = rgb_indices(image.wavelengths())?;
        let n = h * w;
        let px = image.pixels().data();
        let rgb = Tensor::new(&[3, h, w], rgb_idx.iter().flat_map(|&b| px[b * n..(b + 1) * n].iter().copied()).collect());
        let mut x = g.constant(rgb);

        let (hf, spe) = if self.config.afm_enabled {
            let hf = g.constant(hf_stack(image, self.config.hf_mask_ratio)?);
            (Some(hf), self.spectral.features(p, image.pixels(), image.wavelengths())?)
        } else {
            (None, Vec::new())
        };

        let mut blocks = Vec::with_capacity(4);
        for blk in 0..4 {
            x = self.backbone.downsample(p, blk, x);
            let s = x.shape();
            let (bh, bw) = (s[1], s[2]);
            let streams = hf.map(|hf| (to_tokens(hf.resize_bilinear(bh, bw)), to_tokens(spe[blk].resize_bilinear(bh, bw))));
            for i in 0..self.config.backbone.layers_per_block {
                let e = self.backbone.layer(p, blk, i, x);
                x = match streams {
                    Some((hf_t, spe_t)) => to_grid(self.afm[blk].afm_layer(p, i, to_tokens(e), hf_t, spe_t, bh, bw)?, bh, bw),
                    None => e,
                };
            }
            blocks.push(x);
        }
        let project = |b: usize| {
            let s = blocks[b].shape();
            to_grid(self.neck[b].forward(p, to_tokens(blocks[b])), s[1], s[2])
        };
        let s3 = blocks[2].shape();
        let embedding = project(3).resize_bilinear(s3[1], s3[2]).add(project(2));
        Ok(EncoderVars { blocks, embedding })
    }

    pub fn encode_features(&self, store: &ParamStore, image: &MultispectralImage) -> Result<EncoderFeatures> {
        let g = Graph::new();
        let p = Binder::frozen(&g, store);
        Ok(EncoderFeatures::from(&self.encode(&p, image)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::check_param_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> EncoderConfig {
        EncoderConfig {
            backbone: BackboneConfig { widths: [4, 4, 8, 8], layers_per_block: 1, stem_stride: 2, heads: 2 },
            spectral: SpectralConfig { embed_dim: 4, patch_size: 4, depth: 4, output_layers: [0, 1, 2, 3], heads: 1, wave_freqs: 2, hidden: 4, pos_embed: true },
            d_model: 8,
            ..Default::default()
        }
    }

    fn image(h: usize, w: usize) -> MultispectralImage {
        let wl = vec![0.49, 0.56, 0.665, 0.842];
        MultispectralImage::new(Tensor::from_fn(&[4, h, w], |i| ((i * 37) % 23) as f64 / 23.0 - 0.5), wl, 10.0, "t").unwrap()
    }

    fn gates(store: &mut ParamStore, width: usize) -> AttentionGates {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        AttentionGates::new(&mut Builder::new(store, &mut rng, Group::Afm, "g"), "x", width, 7)
    }

    fn set(store: &mut ParamStore, id: ParamId, v: f64) {
        store.value_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
    }

    fn zero_mlp(store: &mut ParamStore, mlp: &Mlp, out_bias: f64) {
        if let Mlp::Dense { fc1, fc2 } = mlp {
            for id in [fc1.w, fc1.b, fc2.w] {
                set(store, id, 0.0);
            }
            set(store, fc2.b, out_bias);
        }
    }

    #[test]
    fn zero_mlp_channel_gate_is_half() {
        let mut s = ParamStore::new();
        let gt = gates(&mut s, 3);
        zero_mlp(&mut s, &gt.channel_mlp, 0.0);
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let f = g.constant(Tensor::from_fn(&[4, 3], |i| i as f64));
        assert!(feature_attention(&p, &gt.channel_mlp, f).value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn constant_grid_channel_gate() {
        let mut s = ParamStore::new();
        let gt = gates(&mut s, 2);
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let v = Tensor::new(&[1, 2], vec![0.3, -1.2]);
        let f = g.constant(Tensor::from_fn(&[9, 2], |i| v.data()[i % 2]));
        let gate = feature_attention(&p, &gt.channel_mlp, f).value();
        let m = gt.channel_mlp.forward(&p, g.constant(v)).value();
        for c in 0..2 {
            let want = 1.0 / (1.0 + (-2.0 * m.data()[c]).exp());
            assert!((gate.data()[c] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_set_channel_gate() {
        // 2×4×4 grid; one-layer MLP with W = [[1,0],[0,-1]], b = [0.1, 0.2]
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = Builder::new(&mut s, &mut rng, Group::Afm, "h");
        let fc = Linear::new(&mut b, "fc", 2, 2);
        s.value_mut(fc.w).data_mut().copy_from_slice(&[1.0, 0.0, 0.0, -1.0]);
        s.value_mut(fc.b).data_mut().copy_from_slice(&[0.1, 0.2]);
        let mlp = Mlp::Dense { fc1: fc.clone(), fc2: fc };
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let grid = Tensor::from_fn(&[16, 2], |i| if i % 2 == 0 { (i / 2) as f64 / 16.0 } else { 1.0 - (i / 2) as f64 / 8.0 });
        let gate = feature_attention(&p, &mlp, g.constant(grid.clone())).value();
        // independent evaluation
        let gelu = crate::autograd::gelu_scalar;
        let lin = |v: [f64; 2]| [v[0] + 0.1, -v[1] + 0.2];
        let mlp_h = |v: [f64; 2]| {
            let a = lin(v);
            lin([gelu(a[0]), gelu(a[1])])
        };
        let col = |c: usize| (0..16).map(|r| grid.data()[r * 2 + c]).collect::<Vec<_>>();
        let avg = [col(0).iter().sum::<f64>() / 16.0, col(1).iter().sum::<f64>() / 16.0];
        let max = [col(0).iter().cloned().fold(f64::MIN, f64::max), col(1).iter().cloned().fold(f64::MIN, f64::max)];
        let (ma, mm) = (mlp_h(avg), mlp_h(max));
        for c in 0..2 {
            let want = 1.0 / (1.0 + (-(ma[c] + mm[c])).exp());
            assert!((gate.data()[c] - want).abs() < 1e-6);
        }
    }

    #[test]
    fn position_gate_cases() {
        let mut s = ParamStore::new();
        let gt = gates(&mut s, 3);
        let g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[16, 3], |i| (i as f64 * 0.7).sin()));
        {
            let p = Binder::frozen(&g, &s);
            let a = position_attention(&p, &gt, f, 4, 4).value();
            assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
        set(&mut s, gt.spatial_w, 0.0);
        let p = Binder::frozen(&g, &s);
        assert!(position_attention(&p, &gt, f, 4, 4).value().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn position_gate_constant_input() {
        // one channel, constant value v: max = mean = v; interior pixels see the
        // whole kernel, so the pre-activation is v · Σw + b
        let mut s = ParamStore::new();
        let gt = gates(&mut s, 1);
        set(&mut s, gt.spatial_w, 0.01);
        set(&mut s, gt.spatial_b, 0.0);
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let v = 0.8;
        let a = position_attention(&p, &gt, g.constant(Tensor::full(&[15 * 15, 1], v)), 15, 15).value();
        let want = 1.0 / (1.0 + (-(v * 0.01 * 98.0)).exp());
        assert!((a.data()[7 * 15 + 7] - want).abs() < 1e-12);
    }

    #[test]
    fn gate_surgery() {
        let mut s = ParamStore::new();
        let gt = gates(&mut s, 2);
        zero_mlp(&mut s, &gt.channel_mlp, 40.0);
        set(&mut s, gt.spatial_w, 0.0);
        set(&mut s, gt.spatial_b, 40.0);
        let g = Graph::new();
        let f = g.constant(Tensor::from_fn(&[4, 2], |i| i as f64 - 3.0));
        {
            let p = Binder::frozen(&g, &s);
            assert_eq!(*attention_enhance(&p, &gt, f, 2, 2).value(), *f.value());
        }
        zero_mlp(&mut s, &gt.channel_mlp, -400.0);
        let p = Binder::frozen(&g, &s);
        assert!(attention_enhance(&p, &gt, f, 2, 2).value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_set_enhance() {
        // 2×2×2 grid with channel gate (0.5, 1) and uniform spatial gate 1
        let mut s = ParamStore::new();
        let gt = gates(&mut s, 2);
        zero_mlp(&mut s, &gt.channel_mlp, 0.0);
        if let Mlp::Dense { fc2, .. } = &gt.channel_mlp {
            s.value_mut(fc2.b).data_mut().copy_from_slice(&[0.0, 40.0]);
        }
        set(&mut s, gt.spatial_w, 0.0);
        set(&mut s, gt.spatial_b, 40.0);
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let f = Tensor::new(&[4, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let out = attention_enhance(&p, &gt, g.constant(f), 2, 2).value();
        // channel gate: sigmoid(0 + 0) = 0.5 for channel 0, sigmoid(80) = 1 for channel 1
        assert_eq!(out.data(), &[0.5, 2.0, 1.5, 4.0, 2.5, 6.0, 3.5, 8.0]);
    }

    fn afm_setup() -> (ParamStore, AfmBlock) {
        let mut s = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let blk = AfmBlock::new(&mut Builder::new(&mut s, &mut rng, Group::Afm, "afm"), 0, 3, 1, 4, 7);
        (s, blk)
    }

    #[test]
    fn afm_zero_side_streams() {
        let (mut s, mut blk) = afm_setup();
        // zeroed tuning output weights make the side streams exactly zero
        let l = &blk.layers[0];
        for id in [l.tune_hf.0[2].w, l.tune_hf.0[2].b, l.tune_spe.0[2].w, l.tune_spe.0[2].b] {
            set(&mut s, id, 0.0);
        }
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let e = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).cos()));
        let hf = g.constant(Tensor::from_fn(&[4, 6], |i| i as f64));
        let spe = g.constant(Tensor::from_fn(&[4, 4], |i| -(i as f64)));
        let out = blk.afm_layer(&p, 0, e, hf, spe, 2, 2).unwrap().value();
        let enh = attention_enhance(&p, &blk.layers[0].gates_main, e, 2, 2);
        let want = blk.mlp_block.forward(&p, blk.layers[0].mlp_layer.forward(&p, enh).gelu()).value();
        assert!(out.max_abs_diff(&want) < 1e-14);

        // identity MLPs and open gates reduce to GELU of the stream sum
        blk.mlp_block = Mlp::Identity;
        blk.layers[0].mlp_layer = Mlp::Identity;
        drop(p);
        for gts in [&blk.layers[0].gates_main, &blk.layers[0].gates_hf, &blk.layers[0].gates_spe] {
            zero_mlp(&mut s, &gts.channel_mlp, 40.0);
            set(&mut s, gts.spatial_w, 0.0);
            set(&mut s, gts.spatial_b, 40.0);
        }
        let (mut s2, blk2) = (s.clone(), blk.clone());
        let l = &blk2.layers[0];
        for id in [l.tune_hf.0[2].b, l.tune_spe.0[2].b] {
            set(&mut s2, id, 0.5);
        }
        let g = Graph::new();
        let p = Binder::frozen(&g, &s2);
        let e = g.constant(Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).cos()));
        let hf = g.constant(Tensor::from_fn(&[4, 6], |i| i as f64));
        let spe = g.constant(Tensor::from_fn(&[4, 4], |i| -(i as f64)));
        let out = blk2.afm_layer(&p, 0, e, hf, spe, 2, 2).unwrap().value();
        let want = e.value().map(|v| crate::autograd::gelu_scalar(v + 1.0));
        assert!(out.max_abs_diff(&want) < 1e-14);
    }

    #[test]
    fn afm_rejects_misaligned_streams() {
        let (s, blk) = afm_setup();
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let e = g.constant(Tensor::zeros(&[4, 3]));
        let hf = g.constant(Tensor::zeros(&[6, 6]));
        let spe = g.constant(Tensor::zeros(&[4, 4]));
        assert!(blk.afm_layer(&p, 0, e, hf, spe, 2, 2).is_err());
    }

    #[test]
    fn tuning_block_gradients() {
        let (s, blk) = afm_setup();
        let e = Tensor::from_fn(&[4, 3], |i| (i as f64 * 0.37).cos());
        let hf = Tensor::from_fn(&[4, 6], |i| (i as f64 * 0.11).sin());
        let spe = Tensor::from_fn(&[4, 4], |i| (i as f64 * 0.23).cos());
        let wts = Tensor::from_fn(&[4, 3], |i| (i % 5) as f64 - 2.0);
        let samples = check_param_gradients(&s, &[Group::Afm], 8, 1e-5, |p| {
            let g = p.graph();
            blk.afm_layer(p, 0, g.constant(e.clone()), g.constant(hf.clone()), g.constant(spe.clone()), 2, 2).unwrap().mul(g.constant(wts.clone())).sum()
        });
        let tuning: Vec<_> = samples.iter().filter(|s| s.name.contains("tune_")).collect();
        assert!(tuning.len() > 10);
        for smp in tuning {
            let err = crate::autograd::gradcheck::relative_error(smp.analytic, smp.numeric, 1e-6);
            assert!(err < 1e-4, "{}[{}]: {} vs {}", smp.name, smp.index, smp.analytic, smp.numeric);
        }
    }

    #[test]
    fn grid_sizes_follow_strides() {
        let cfg = EncoderConfig {
            backbone: BackboneConfig { widths: [4, 4, 8, 8], layers_per_block: 1, stem_stride: 4, heads: 2 },
            spectral: SpectralConfig { patch_size: 8, ..micro().spectral },
            ..micro()
        };
        let mut s = ParamStore::new();
        let enc = FusionEncoder::new(&mut s, &mut ChaCha8Rng::seed_from_u64(1), cfg);
        let f = enc.encode_features(&s, &image(256, 256)).unwrap();
        let sides: Vec<usize> = f.per_block.iter().map(|b| b.dim(1)).collect();
        assert_eq!(sides, vec![64, 32, 16, 8]);
        assert_eq!(f.decoder_embedding.shape(), &[8, 16, 16]);
    }

    #[test]
    fn ablation_matches_plain_backbone() {
        let mut s = ParamStore::new();
        let enc = FusionEncoder::new(&mut s, &mut ChaCha8Rng::seed_from_u64(1), EncoderConfig { afm_enabled: false, ..micro() });
        let img = image(16, 16);
        let f = enc.encode_features(&s, &img).unwrap();
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let rgb_idx = rgb_indices(img.wavelengths()).unwrap();
        let rgb = Tensor::from_fn(&[3, 16, 16], |i| img.pixels().data()[rgb_idx[i / 256] * 256 + i % 256]);
        let plain = enc.backbone.forward(&p, g.constant(rgb));
        for (a, b) in f.per_block.iter().zip(plain) {
            assert_eq!(a, &*b.value());
        }
    }

    #[test]
    fn rejects_indivisible_and_too_few_bands() {
        let mut s = ParamStore::new();
        let enc = FusionEncoder::new(&mut s, &mut ChaCha8Rng::seed_from_u64(1), micro());
        assert!(enc.encode_features(&s, &image(24, 16)).is_err());
        let two = MultispectralImage::new(Tensor::zeros(&[2, 16, 16]), vec![0.5, 0.6], 1.0, "t").unwrap();
        assert!(enc.encode_features(&s, &two).is_err());
    }

    #[test]
    fn gates_bounded_inside_encoder_inputs() {
        let mut s = ParamStore::new();
        let enc = FusionEncoder::new(&mut s, &mut ChaCha8Rng::seed_from_u64(1), micro());
        let g = Graph::new();
        let p = Binder::frozen(&g, &s);
        let f = g.constant(Tensor::from_fn(&[64, 4], |i| (i as f64 * 1.3).sin() * 5.0));
        let l = &enc.afm[0].layers[0];
        let af = feature_attention(&p, &l.gates_main.channel_mlp, f).value();
        let ap = position_attention(&p, &l.gates_main, f, 8, 8).value();
        assert!(af.data().iter().chain(ap.data()).all(|&v| v > 0.0 && v < 1.0));
    }
}
