//! Six-channel high-frequency stream computed by Fourier masking.
//!
//! Each band is transformed with a 2-D DFT, the zero frequency is shifted to
//! the centre, a centred axis-aligned rectangle covering `mask_ratio` of each
//! side is zeroed, and the inverse transform's real part is kept. The stack
//! reports the high-pass R, G and B bands followed by the per-pixel minimum,
//! maximum and mean over all bands.

use std::cell::RefCell;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::data_synth::MultispectralImage;
use crate::error::{invalid, Result};
use crate::parallel;
use crate::tensor::Tensor;

/// Number of channels in the high-frequency stack.
pub const HF_CHANNELS: usize = 6;

/// Reference wavelengths (µm) used to locate red, green and blue bands.
pub const RGB_WAVELENGTHS: [f64; 3] = [0.665, 0.560, 0.490];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HfConfig {
    /// Fraction of each spectrum side removed around the zero frequency.
    pub mask_ratio: f64,
}

impl Default for HfConfig {
    fn default() -> Self {
        Self { mask_ratio: 0.25 }
    }
}

impl HfConfig {
    pub fn new(mask_ratio: f64) -> Result<Self> {
        check_ratio(mask_ratio)?;
        Ok(Self { mask_ratio })
    }
}

fn check_ratio(tau: f64) -> Result<()> {
    if !(0.0..1.0).contains(&tau) {
        return Err(invalid(format!("mask ratio must lie in [0, 1), got {tau}")));
    }
    Ok(())
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn fft2(buf: &mut [Complex<f64>], h: usize, w: usize, inverse: bool) {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (row, col) = if inverse { (p.plan_fft_inverse(w), p.plan_fft_inverse(h)) } else { (p.plan_fft_forward(w), p.plan_fft_forward(h)) };
        for r in buf.chunks_mut(w) {
            row.process(r);
        }
        let mut column = vec![Complex::new(0.0, 0.0); h];
        for x in 0..w {
            for y in 0..h {
                column[y] = buf[y * w + x];
            }
            col.process(&mut column);
            for y in 0..h {
                buf[y * w + x] = column[y];
            }
        }
    });
}

/// Half-extent of the removed rectangle along an axis of length `n`, or `None`
/// when nothing is removed.
pub(crate) fn mask_radius(n: usize, tau: f64) -> Option<usize> {
    (tau > 0.0).then(|| (tau * n as f64 / 2.0).floor() as usize)
}

/// Distance of unshifted frequency index `i` from the centre of the shifted spectrum.
fn centred_distance(i: usize, n: usize) -> usize {
    let shifted = (i + n / 2) % n;
    shifted.abs_diff(n / 2)
}

/// The binary pass mask (1 kept, 0 removed) in unshifted frequency layout.
pub fn pass_mask(h: usize, w: usize, tau: f64) -> Vec<bool> {
    let mut mask = vec![true; h * w];
    if let (Some(ry), Some(rx)) = (mask_radius(h, tau), mask_radius(w, tau)) {
        for y in 0..h {
            if centred_distance(y, h) > ry {
                continue;
            }
            for x in 0..w {
                if centred_distance(x, w) <= rx {
                    mask[y * w + x] = false;
                }
            }
        }
    }
    mask
}

/// Real part of the masked inverse transform, plus the largest imaginary residue.
fn highpass_with_residue(x: &[f64], h: usize, w: usize, tau: f64) -> (Vec<f64>, f64) {
    let mut buf: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft2(&mut buf, h, w, false);
    for (z, keep) in buf.iter_mut().zip(pass_mask(h, w, tau)) {
        if !keep {
            *z = Complex::new(0.0, 0.0);
        }
    }
    fft2(&mut buf, h, w, true);
    let norm = 1.0 / (h * w) as f64;
    let residue = buf.iter().fold(0.0f64, |m, z| m.max(z.im.abs() * norm));
    (buf.iter().map(|z| z.re * norm).collect(), residue)
}

pub(crate) fn highpass(x: &[f64], h: usize, w: usize, tau: f64) -> Vec<f64> {
    let (out, residue) = highpass_with_residue(x, h, w, tau);
    debug_assert!(
        residue <= 1e-6 * x.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE),
        "imaginary residue {residue} after masking"
    );
    out
}

/// High-frequency component of one `(H,W)` band.
pub fn hf_channel(band: &Tensor, mask_ratio: f64) -> Result<Tensor> {
    check_ratio(mask_ratio)?;
    if band.ndim() != 2 || band.dim(0) < 2 || band.dim(1) < 2 {
        return Err(invalid(format!("band must be an H×W grid with H, W ≥ 2, got {:?}", band.shape())));
    }
    let (h, w) = (band.dim(0), band.dim(1));
    Ok(Tensor::new(&[h, w], highpass(band.data(), h, w, mask_ratio)))
}

/// Largest imaginary magnitude left after inverse-transforming the masked spectrum.
pub fn imaginary_residue(band: &Tensor, mask_ratio: f64) -> f64 {
    highpass_with_residue(band.data(), band.dim(0), band.dim(1), mask_ratio).1
}

/// Indices of the bands closest to the red, green and blue reference wavelengths.
pub fn rgb_indices(wavelengths: &[f64]) -> Result<[usize; 3]> {
    if wavelengths.len() < 3 {
        return Err(invalid(format!("need at least 3 bands to resolve RGB, got {}", wavelengths.len())));
    }
    Ok(RGB_WAVELENGTHS.map(|target| {
        let mut best = 0;
        for (i, w) in wavelengths.iter().enumerate() {
            if (w - target).abs() < (wavelengths[best] - target).abs() {
                best = i;
            }
        }
        best
    }))
}

/// `(6,H,W)` stack: HF(R), HF(G), HF(B), then per-pixel min, max and mean over all bands.
pub fn hf_stack(image: &MultispectralImage, mask_ratio: f64) -> Result<Tensor> {
    check_ratio(mask_ratio)?;
    let rgb = rgb_indices(image.wavelengths())?;
    let (c, h, w) = image.dims();
    if h < 2 || w < 2 {
        return Err(invalid(format!("image must be at least 2×2, got {h}×{w}")));
    }
    let px = image.pixels().data();
    let bands: Vec<Vec<f64>> = parallel::map_range(c, h * w * 64, |b| highpass(&px[b * h * w..(b + 1) * h * w], h, w, mask_ratio));
    let n = h * w;
    let mut out = vec![0.0; HF_CHANNELS * n];
    for (k, &b) in rgb.iter().enumerate() {
        out[k * n..(k + 1) * n].copy_from_slice(&bands[b]);
    }
    for p in 0..n {
        let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        for band in &bands {
            lo = lo.min(band[p]);
            hi = hi.max(band[p]);
            sum += band[p];
        }
        out[3 * n + p] = lo;
        out[4 * n + p] = hi;
        out[5 * n + p] = sum / c as f64;
    }
    Ok(Tensor::new(&[HF_CHANNELS, h, w], out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck::{finite_difference, relative_error};
    use crate::autograd::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_band(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[h, w], |_| rng.random_range(-1.0..1.0))
    }

    /// Direct O(N²) DFT with the same centred mask, independent of the FFT path.
    fn brute_force_highpass(x: &Tensor, tau: f64) -> Tensor {
        use std::f64::consts::PI;
        let (h, w) = (x.dim(0), x.dim(1));
        let mask = pass_mask(h, w, tau);
        let mut spec = vec![(0.0, 0.0); h * w];
        for u in 0..h {
            for v in 0..w {
                let (mut re, mut im) = (0.0, 0.0);
                for y in 0..h {
                    for xx in 0..w {
                        let a = -2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                        re += x.data()[y * w + xx] * a.cos();
                        im += x.data()[y * w + xx] * a.sin();
                    }
                }
                spec[u * w + v] = if mask[u * w + v] { (re, im) } else { (0.0, 0.0) };
            }
        }
        Tensor::from_fn(&[h, w], |i| {
            let (y, xx) = (i / w, i % w);
            let mut re = 0.0;
            for u in 0..h {
                for v in 0..w {
                    let a = 2.0 * PI * ((u * y) as f64 / h as f64 + (v * xx) as f64 / w as f64);
                    let (sr, si) = spec[u * w + v];
                    re += sr * a.cos() - si * a.sin();
                }
            }
            re / (h * w) as f64
        })
    }

    #[test]
    fn zero_ratio_round_trips() {
        let x = random_band(12, 10, 1);
        let y = hf_channel(&x, 0.0).unwrap();
        assert!(y.max_abs_diff(&x) <= 1e-6 * x.max_abs());
    }

    #[test]
    fn constant_band_is_removed() {
        for tau in [0.01, 0.25, 0.5, 0.9] {
            let y = hf_channel(&Tensor::full(&[8, 8], 3.0), tau).unwrap();
            assert!(y.max_abs() < 1e-12, "tau {tau}");
        }
    }

    #[test]
    fn centred_impulse_matches_direct_dft() {
        let mut x = Tensor::zeros(&[8, 8]);
        x.data_mut()[4 * 8 + 4] = 1.0;
        let got = hf_channel(&x, 0.5).unwrap();
        let want = brute_force_highpass(&x, 0.5);
        assert!(got.max_abs_diff(&want) < 1e-12);
        // τ=0.5 on 8×8 removes |f| ≤ 2 on both axes: a 5×5 block of 64 coefficients.
        assert_eq!(pass_mask(8, 8, 0.5).iter().filter(|k| !**k).count(), 25);
    }

    #[test]
    fn odd_sizes_match_direct_dft() {
        let x = random_band(7, 5, 3);
        let got = hf_channel(&x, 0.6).unwrap();
        assert!(got.max_abs_diff(&brute_force_highpass(&x, 0.6)) < 1e-12);
    }

    #[test]
    fn invalid_ratio_and_tiny_bands_are_rejected() {
        assert!(hf_channel(&Tensor::zeros(&[4, 4]), 1.0).is_err());
        assert!(hf_channel(&Tensor::zeros(&[4, 4]), -0.1).is_err());
        assert!(hf_channel(&Tensor::zeros(&[1, 4]), 0.2).is_err());
    }

    #[test]
    fn linear_idempotent_and_energy_bounded() {
        let (a, b) = (random_band(16, 16, 4), random_band(16, 16, 5));
        let tau = 0.3;
        let comb = a.zip_map(&b, |x, y| 2.5 * x - 0.75 * y);
        let lhs = hf_channel(&comb, tau).unwrap();
        let ha = hf_channel(&a, tau).unwrap();
        let hb = hf_channel(&b, tau).unwrap();
        let rhs = ha.zip_map(&hb, |x, y| 2.5 * x - 0.75 * y);
        assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        let twice = hf_channel(&ha, tau).unwrap();
        assert!(twice.max_abs_diff(&ha) < 1e-5);
        // Parseval: spatial energy equals spectral energy up to the DFT scale.
        assert!(ha.norm() <= a.norm() + 1e-12);
        assert!(imaginary_residue(&a, tau) < 1e-6 * a.norm());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let x = random_band(4, 4, 9);
        let weights = random_band(4, 4, 10);
        let tau = 0.5;
        let loss = |t: &Tensor| {
            let y = Tensor::new(&[4, 4], highpass(t.data(), 4, 4, tau));
            y.zip_map(&weights, |a, b| (a * b).sin()).sum()
        };
        let g = Graph::new();
        let v = g.leaf(x.clone(), true);
        let w = g.constant(weights.clone());
        let out = v.hf_filter(tau).mul(w);
        // sin(out) = out - out³/6 + ...: build it from exp-free ops for the check.
        let s = out.value();
        let cosines = g.constant(s.map(f64::cos));
        let l = out.mul(cosines).sum();
        let grads = g.backward(l);
        let analytic = grads.get(v).unwrap().clone();
        let numeric = finite_difference(loss, &x, 1e-6);
        for (a, n) in analytic.data().iter().zip(numeric.data()) {
            assert!(relative_error(*a, *n, 1e-8) < 1e-4, "{a} vs {n}");
        }
    }

    #[test]
    fn rgb_resolution_on_sentinel2_layout() {
        let s2 = [0.443, 0.490, 0.56, 0.665, 0.705, 0.740, 0.783, 0.842, 0.865, 0.940, 1.375, 1.61, 2.19];
        // B4, B3, B2
        assert_eq!(rgb_indices(&s2).unwrap(), [3, 2, 1]);
        let landsat_toa = [0.443, 0.482, 0.561, 0.655, 0.865, 1.610, 2.200, 0.590, 1.373, 10.895, 12.005];
        assert_eq!(rgb_indices(&landsat_toa).unwrap(), [3, 2, 1]);
        assert!(rgb_indices(&[0.5, 0.6]).is_err());
    }
}
