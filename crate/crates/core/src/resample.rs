//! Separable bilinear resampling with half-pixel centres (`align_corners = false`).

use crate::parallel;

/// For each output index: two source indices and their weights.
pub(crate) type Taps = Vec<(usize, usize, f64, f64)>;

pub(crate) fn axis_taps(src: usize, dst: usize) -> Taps {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (pos.floor() as usize).min(src - 1);
            let i1 = (i0 + 1).min(src - 1);
            let f = pos - i0 as f64;
            (i0, i1, 1.0 - f, f)
        })
        .collect()
}

pub(crate) fn apply(x: &[f64], c: usize, h: usize, w: usize, ry: &Taps, rx: &Taps) -> Vec<f64> {
    let (oh, ow) = (ry.len(), rx.len());
    let mut out = vec![0.0; c * oh * ow];
    parallel::for_each_chunk(&mut out, oh * ow, oh * ow * 4, |ch, o| {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, wy0, wy1)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in rx.iter().enumerate() {
                o[oy * ow + ox] = wy0 * (wx0 * src[y0 * w + x0] + wx1 * src[y0 * w + x1])
                    + wy1 * (wx0 * src[y1 * w + x0] + wx1 * src[y1 * w + x1]);
            }
        }
    });
    out
}

pub(crate) fn apply_adjoint(g: &[f64], c: usize, h: usize, w: usize, ry: &Taps, rx: &Taps) -> Vec<f64> {
    let (oh, ow) = (ry.len(), rx.len());
    let mut out = vec![0.0; c * h * w];
    parallel::for_each_chunk(&mut out, h * w, oh * ow * 4, |ch, o| {
        let src = &g[ch * oh * ow..(ch + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ry.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in rx.iter().enumerate() {
                let v = src[oy * ow + ox];
                o[y0 * w + x0] += wy0 * wx0 * v;
                o[y0 * w + x1] += wy0 * wx1 * v;
                o[y1 * w + x0] += wy1 * wx0 * v;
                o[y1 * w + x1] += wy1 * wx1 * v;
            }
        }
    });
    out
}

/// Resamples a `(C,H,W)` buffer without recording gradients.
pub fn bilinear(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    apply(x, c, h, w, &axis_taps(h, oh), &axis_taps(w, ow))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_field_is_preserved() {
        let x = vec![3.5; 2 * 4 * 6];
        let y = bilinear(&x, 2, 4, 6, 9, 3);
        assert!(y.iter().all(|v| (v - 3.5).abs() < 1e-12));
    }

    #[test]
    fn upsample_by_two_matches_half_pixel_convention() {
        // 1-D ramp [0, 1] upsampled to 4 samples: [0, 0.25, 0.75, 1].
        let y = bilinear(&[0.0, 1.0], 1, 1, 2, 1, 4);
        let want = [0.0, 0.25, 0.75, 1.0];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
