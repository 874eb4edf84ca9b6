//! Wavelength-conditioned patch embedding followed by a small transformer
//! trunk whose intermediate layers feed the fusion encoder.
//!
//! Each band's kernel is generated from a sinusoidal code of its log
//! wavelength, so any band count and ordering is accepted and per-band
//! responses are summed into one token embedding.

use rand::Rng;

use crate::autograd::{Graph, Var};
use crate::error::{invalid, shape, Result};
use crate::nn::{sincos_2d, Linear, TransformerLayer};
use crate::params::{Binder, Builder};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralConfig {
    pub embed_dim: usize,
    pub patch_size: usize,
    pub depth: usize,
    /// Trunk layers (0-based) whose outputs are returned, one per encoder block.
    pub output_layers: [usize; 4],
    pub heads: usize,
    /// Number of sinusoid frequencies in the wavelength code.
    pub wave_freqs: usize,
    pub hidden: usize,
    pub pos_embed: bool,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self { embed_dim: 32, patch_size: 4, depth: 12, output_layers: [1, 4, 9, 11], heads: 4, wave_freqs: 6, hidden: 32, pos_embed: true }
    }
}

impl SpectralConfig {
    pub fn validate(&self) -> Result<()> {
        let l = self.output_layers;
        if !(l[0] < l[1] && l[1] < l[2] && l[2] < l[3] && l[3] < self.depth) {
            return Err(invalid(format!("output layers {l:?} must increase strictly and stay below depth {}", self.depth)));
        }
        if self.embed_dim % self.heads != 0 || self.patch_size == 0 {
            return Err(invalid("spectral embed width must split evenly across heads"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct SpectralEmbedder {
    pub config: SpectralConfig,
    gen1: Linear,
    gen2: Linear,
    kernel_head: Linear,
    bias_head: Linear,
    layers: Vec<TransformerLayer>,
}

/// Sin/cos features of `ln λ` at frequencies `2^j`, `(C, 2F)`.
pub fn wavelength_code(wavelengths: &[f64], freqs: usize) -> Tensor {
    Tensor::from_fn(&[wavelengths.len(), 2 * freqs], |i| {
        let (c, j) = (i / (2 * freqs), i % (2 * freqs));
        let t = wavelengths[c].ln() * (1u64 << (j / 2)) as f64;
        if j % 2 == 0 {
            t.sin()
        } else {
            t.cos()
        }
    })
}

impl SpectralEmbedder {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, config: SpectralConfig) -> Self {
        let (d, p, hid) = (config.embed_dim, config.patch_size, config.hidden);
        let gen1 = Linear::new(b, "gen1", 2 * config.wave_freqs, hid);
        let gen2 = Linear::new(b, "gen2", hid, hid);
        let kernel_head = Linear::new(b, "kernel_head", hid, p * p * d);
        let bias_head = Linear::new(b, "bias_head", hid, d);
        let layers = (0..config.depth).map(|i| TransformerLayer::new(b, &format!("layer{i}"), d, config.heads, 2)).collect();
        Self { config, gen1, gen2, kernel_head, bias_head, layers }
    }

    fn check_wavelengths(wavelengths: &[f64]) -> Result<()> {
        if wavelengths.is_empty() {
            return Err(invalid("at least one band is required"));
        }
        if let Some(w) = wavelengths.iter().find(|w| !(**w > 0.0) || !w.is_finite()) {
            return Err(invalid(format!("wavelengths must be positive, got {w}")));
        }
        Ok(())
    }

    /// Stacked per-band kernels as a `(C·p·p, d)` matrix, and the shared bias `(d)`.
    pub fn kernel_vars<'g>(&self, p: &Binder<'g, '_>, wavelengths: &[f64]) -> Result<(Var<'g>, Var<'g>)> {
        Self::check_wavelengths(wavelengths)?;
        let (c, d, ps) = (wavelengths.len(), self.config.embed_dim, self.config.patch_size);
        let code = p.graph().constant(wavelength_code(wavelengths, self.config.wave_freqs));
        let hidden = self.gen2.forward(p, self.gen1.forward(p, code).gelu()).gelu();
        let kernels = self.kernel_head.forward(p, hidden).reshape(&[c * ps * ps, d]);
        let bias = self.bias_head.forward(p, hidden.mean_axis(0).reshape(&[1, self.config.hidden])).reshape(&[d]);
        Ok((kernels, bias))
    }

    /// Generated kernels `(C, d, p, p)` and bias `(d)`.
    pub fn make_kernels(&self, p: &Binder<'_, '_>, wavelengths: &[f64]) -> Result<(Tensor, Tensor)> {
        let (k, b) = self.kernel_vars(p, wavelengths)?;
        let (c, d, ps) = (wavelengths.len(), self.config.embed_dim, self.config.patch_size);
        let kv = k.value();
        let out = Tensor::from_fn(&[c, d, ps, ps], |i| {
            let (band, rest) = (i / (d * ps * ps), i % (d * ps * ps));
            let (ch, pix) = (rest / (ps * ps), rest % (ps * ps));
            kv.data()[(band * ps * ps + pix) * d + ch]
        });
        Ok((out, (*b.value()).clone()))
    }

    /// `(C,H,W)` → `(H/p·W/p, C·p·p)` with columns ordered band, row, column.
    pub fn patch_matrix(pixels: &Tensor, ps: usize) -> Tensor {
        let (c, h, w) = (pixels.dim(0), pixels.dim(1), pixels.dim(2));
        let (th, tw) = (h / ps, w / ps);
        let cols = c * ps * ps;
        Tensor::from_fn(&[th * tw, cols], |i| {
            let (tok, col) = (i / cols, i % cols);
            let (band, pix) = (col / (ps * ps), col % (ps * ps));
            let y = (tok / tw) * ps + pix / ps;
            let x = (tok % tw) * ps + pix % ps;
            pixels.data()[band * h * w + y * w + x]
        })
    }

    /// Feature maps `(d, H/p, W/p)` after each configured trunk layer.
    pub fn features<'g>(&self, p: &Binder<'g, '_>, pixels: &Tensor, wavelengths: &[f64]) -> Result<Vec<Var<'g>>> {
        let ps = self.config.patch_size;
        if pixels.ndim() != 3 || pixels.dim(0) != wavelengths.len() {
            return Err(shape(format!("image {:?} with {} wavelengths", pixels.shape(), wavelengths.len())));
        }
        let (h, w) = (pixels.dim(1), pixels.dim(2));
        if h % ps != 0 || w % ps != 0 || h == 0 || w == 0 {
            return Err(shape(format!("{h}×{w} image is not divisible by patch size {ps}")));
        }
        let (th, tw) = (h / ps, w / ps);
        let (kernels, bias) = self.kernel_vars(p, wavelengths)?;
        let g = p.graph();
        let mut x = g.constant(Self::patch_matrix(pixels, ps)).matmul(kernels).add_row(bias);
        if self.config.pos_embed {
            x = x.add(g.constant(sincos_2d(th, tw, self.config.embed_dim)));
        }
        let mut outs = Vec::with_capacity(4);
        for (i, layer) in self.layers.iter().enumerate().take(self.config.output_layers[3] + 1) {
            x = layer.forward(p, x);
            if self.config.output_layers.contains(&i) {
                outs.push(x.transpose().reshape(&[self.config.embed_dim, th, tw]));
            }
        }
        Ok(outs)
    }

    /// Inference-only feature maps as plain tensors.
    pub fn spectral_features(&self, store: &crate::params::ParamStore, pixels: &Tensor, wavelengths: &[f64]) -> Result<Vec<Tensor>> {
        let g = Graph::new();
        let p = Binder::frozen(&g, store);
        Ok(self.features(&p, pixels, wavelengths)?.iter().map(|v| (*v.value()).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::{check_param_gradients, Group, ParamStore};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(config: SpectralConfig) -> (ParamStore, SpectralEmbedder) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = SpectralEmbedder::new(&mut Builder::new(&mut store, &mut rng, Group::Spectral, "spectral"), config);
        (store, e)
    }

    fn tiny() -> SpectralConfig {
        SpectralConfig { embed_dim: 8, patch_size: 4, depth: 12, heads: 2, hidden: 8, wave_freqs: 4, ..Default::default() }
    }

    fn kernels(store: &ParamStore, e: &SpectralEmbedder, wl: &[f64]) -> Result<(Tensor, Tensor)> {
        let g = Graph::new();
        e.make_kernels(&Binder::frozen(&g, store), wl)
    }

    #[test]
    fn equal_wavelengths_equal_kernels() {
        let (s, e) = build(tiny());
        let (k, _) = kernels(&s, &e, &[0.665, 0.665]).unwrap();
        let n = k.len() / 2;
        assert_eq!(&k.data()[..n], &k.data()[n..]);
    }

    #[test]
    fn kernel_shapes() {
        let (s, e) = build(tiny());
        assert_eq!(kernels(&s, &e, &[0.5]).unwrap().0.shape(), &[1, 8, 4, 4]);
        let s2 = crate::data_synth::S2_WAVELENGTHS;
        assert_eq!(kernels(&s, &e, &s2).unwrap().0.shape(), &[13, 8, 4, 4]);
        assert!(kernels(&s, &e, &[0.5, 0.0]).is_err());
        assert!(kernels(&s, &e, &[]).is_err());
    }

    #[test]
    fn kernels_continuous_in_wavelength() {
        let (s, e) = build(tiny());
        let (a, _) = kernels(&s, &e, &[0.842]).unwrap();
        let (b, _) = kernels(&s, &e, &[0.842 + 1e-6]).unwrap();
        let diff = a.zip_map(&b, |x, y| x - y).norm();
        assert!(diff < 1e-3 * a.norm(), "{diff} vs {}", a.norm());
    }

    #[test]
    fn token_grid_size() {
        let (s, e) = build(SpectralConfig { patch_size: 8, ..tiny() });
        let px = Tensor::from_fn(&[3, 64, 64], |i| ((i * 7) % 13) as f64 / 13.0);
        let f = e.spectral_features(&s, &px, &[0.665, 0.56, 0.49]).unwrap();
        assert_eq!(f.len(), 4);
        for m in f {
            assert_eq!(m.shape(), &[8, 8, 8]);
        }
        assert!(e.spectral_features(&s, &Tensor::zeros(&[3, 30, 32]), &[0.665, 0.56, 0.49]).is_err());
    }

    #[test]
    fn band_order_invariance() {
        let (s, e) = build(tiny());
        let wl = [0.443, 0.56, 0.865, 1.61];
        let px = Tensor::from_fn(&[4, 8, 8], |i| ((i * 31) % 17) as f64 / 17.0 - 0.5);
        let order = [2, 0, 3, 1];
        let perm_px = Tensor::from_fn(&[4, 8, 8], |i| px.data()[order[i / 64] * 64 + i % 64]);
        let perm_wl: Vec<f64> = order.iter().map(|&o| wl[o]).collect();
        let a = e.spectral_features(&s, &px, &wl).unwrap();
        let b = e.spectral_features(&s, &perm_px, &perm_wl).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!(x.max_abs_diff(y) < 1e-5);
        }
    }

    #[test]
    fn zero_image_spatially_constant_without_position_code() {
        let (s, e) = build(SpectralConfig { pos_embed: false, ..tiny() });
        let f = e.spectral_features(&s, &Tensor::zeros(&[2, 8, 8]), &[0.5, 0.8]).unwrap();
        for m in f {
            for ch in 0..8 {
                let plane = &m.data()[ch * 4..(ch + 1) * 4];
                assert!(plane.iter().all(|v| (v - plane[0]).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn hypernet_gradients_match_finite_differences() {
        let cfg = SpectralConfig { depth: 4, output_layers: [0, 1, 2, 3], ..tiny() };
        let (s, e) = build(cfg);
        let px = Tensor::from_fn(&[3, 8, 8], |i| ((i * 13) % 11) as f64 / 11.0 - 0.5);
        let wl = [0.49, 0.56, 0.665];
        let weights: Vec<Tensor> = (0..4).map(|k| Tensor::from_fn(&[8, 2, 2], |i| ((i * (k + 3)) % 7) as f64 / 7.0 - 0.4)).collect();
        let samples = check_param_gradients(&s, &[Group::Spectral], 6, 1e-5, |p| {
            let f = e.features(p, &px, &wl).unwrap();
            let g = p.graph();
            let terms: Vec<_> = f.iter().zip(&weights).map(|(m, w)| m.mul(g.constant(w.clone())).sum()).collect();
            terms[1..].iter().fold(terms[0], |a, b| a.add(*b))
        });
        let gen: Vec<_> = samples.iter().filter(|s| s.name.contains("gen") || s.name.contains("head")).collect();
        assert!(!gen.is_empty());
        for smp in gen {
            let err = crate::autograd::gradcheck::relative_error(smp.analytic, smp.numeric, 1e-6);
            assert!(err < 1e-4, "{}[{}]: {} vs {}", smp.name, smp.index, smp.analytic, smp.numeric);
        }
    }
}
