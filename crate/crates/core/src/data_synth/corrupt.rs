use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabelMask, LabelQuality};
use crate::error::{invalid, Result};

/// Reassigns `round(rate · valid)` non-ignore pixels by flipping whole
/// sub-regions.
///
/// The mask is split into Voronoi cells around jittered grid sites. Cells are
/// visited in random order and every valid pixel in a visited cell moves from
/// class `c` to `(c + o) mod num_classes` with a per-cell offset `o ≥ 1`; the
/// last cell is cut short so the count is exact.
pub fn corrupt_labels(clean: &LabelMask, num_classes: usize, rate: f64, seed: u64) -> Result<LabelMask> {
    if !(0.0..1.0).contains(&rate) {
        return Err(invalid(format!("corruption rate must lie in [0,1), got {rate}")));
    }
    let valid = clean.valid_count();
    let target = (rate * valid as f64).round() as usize;
    if target == 0 {
        return Ok(clean.clone());
    }
    if num_classes < 2 {
        return Err(invalid("label corruption needs at least 2 classes"));
    }
    clean.validate(num_classes)?;

    let (h, w) = (clean.height(), clean.width());
    let side = (h.min(w) / 8).max(4);
    let (gy, gx) = (h.div_ceil(side), w.div_ceil(side));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sites: Vec<(f64, f64)> = (0..gy * gx)
        .map(|i| {
            let (cy, cx) = ((i / gx) as f64, (i % gx) as f64);
            ((cy + rng.random::<f64>()) * side as f64, (cx + rng.random::<f64>()) * side as f64)
        })
        .collect();

    let mut members: Vec<Vec<usize>> = vec![Vec::new(); sites.len()];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if clean.is_ignored(i) {
                continue;
            }
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let (cy, cx) = (y / side, x / side);
            let mut best = (f64::INFINITY, 0);
            for ny in cy.saturating_sub(1)..(cy + 2).min(gy) {
                for nx in cx.saturating_sub(1)..(cx + 2).min(gx) {
                    let s = ny * gx + nx;
                    let d = (sites[s].0 - py).powi(2) + (sites[s].1 - px).powi(2);
                    if d < best.0 {
                        best = (d, s);
                    }
                }
            }
            members[best.1].push(i);
        }
    }

    let mut order: Vec<usize> = (0..sites.len()).collect();
    order.shuffle(&mut rng);
    let mut out = clean.classes().to_vec();
    let mut flipped = 0;
    for cell in order {
        if flipped == target {
            break;
        }
        let offset = rng.random_range(1..num_classes);
        for &i in members[cell].iter().take(target - flipped) {
            out[i] = ((out[i] as usize + offset) % num_classes) as u8;
            flipped += 1;
        }
    }
    clean.with_classes(out, LabelQuality::Weak { corruption_rate: rate })
}
