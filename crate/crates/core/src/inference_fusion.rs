//! Zero-shot inference helpers: confidence-guided fusion of two probability
//! stacks, proxy-attention refinement, segmentation metrics, threshold
//! sweeps, and a small centroid classifier that stands in for a CLIP-style
//! second model.

use std::fmt::Write;

use crate::data_synth::{LabelMask, MultispectralImage};
use crate::error::{invalid, shape, Error, Result};
use crate::fusion_encoder::EncoderFeatures;
use crate::hf_extract::rgb_indices;
use crate::kv::{join_list, KvFile};
use crate::parallel::map_range;
use crate::resample::bilinear;
use crate::seg_decoder::{argmax_map, ProbabilityStack};
use crate::taxonomy::ClassTaxonomy;
use crate::tensor::{matmul, matmul_nt, Tensor};

pub const DEFAULT_SWEEP: [f64; 5] = [0.4, 0.5, 0.6, 0.7, 0.8];

#[derive(Clone, Debug, PartialEq)]
pub struct FusionConfig {
    pub threshold: f64,
    /// Weights when only the second model is confident about a class.
    pub boosted_land: f64,
    pub boosted_clip: f64,
    /// Weight on each model otherwise.
    pub balanced: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self { threshold: 0.6, boosted_land: 1.0, boosted_clip: 3.0, balanced: 2.0 }
    }
}

impl FusionConfig {
    pub fn with_threshold(threshold: f64) -> Self {
        Self { threshold, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(invalid(format!("confidence threshold {} must lie in (0, 1)", self.threshold)));
        }
        if [self.boosted_land, self.boosted_clip, self.balanced].iter().any(|&w| !(w > 0.0)) {
            return Err(invalid("fusion weights must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Branch {
    /// Segmenter unsure, second model confident.
    Boosted,
    Balanced,
}

pub fn branch(c_land: f64, c_clip: f64, threshold: f64) -> Branch {
    if c_land <= threshold && c_clip > threshold {
        Branch::Boosted
    } else {
        Branch::Balanced
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedStack {
    /// Weighted sums before normalisation, `(K,H,W)`.
    pub raw: Tensor,
    pub branches: Vec<Branch>,
    /// Per-pixel renormalised probabilities.
    pub probs: ProbabilityStack,
    /// Argmax of `raw`.
    pub labels: Vec<u8>,
}

fn check_pair(a: &ProbabilityStack, b: &ProbabilityStack) -> Result<()> {
    if a.probs().shape() != b.probs().shape() {
        return Err(shape(format!("cannot fuse stacks of shape {:?} and {:?}", a.probs().shape(), b.probs().shape())));
    }
    Ok(())
}

fn class_weights(land: &ProbabilityStack, clip: &ProbabilityStack, cfg: &FusionConfig) -> Vec<(Branch, f64, f64)> {
    land.confidences()
        .iter()
        .zip(clip.confidences())
        .map(|(&cl, &cc)| match branch(cl, cc, cfg.threshold) {
            Branch::Boosted => (Branch::Boosted, cfg.boosted_land, cfg.boosted_clip),
            Branch::Balanced => (Branch::Balanced, cfg.balanced, cfg.balanced),
        })
        .collect()
}

/// Class-wise confidence-guided fusion.
pub fn fuse(land: &ProbabilityStack, clip: &ProbabilityStack, cfg: &FusionConfig) -> Result<FusedStack> {
    cfg.validate()?;
    check_pair(land, clip)?;
    let (k, h, w) = (land.num_classes(), land.height(), land.width());
    let n = h * w;
    let weights = class_weights(land, clip, cfg);
    let (pl, pc) = (land.probs().data(), clip.probs().data());
    let rows = map_range(k, n, |c| {
        let (_, wl, wc) = weights[c];
        pl[c * n..(c + 1) * n].iter().zip(&pc[c * n..(c + 1) * n]).map(|(&a, &b)| wl * a + wc * b).collect::<Vec<f64>>()
    });
    let raw = Tensor::new(&[k, h, w], rows.concat());
    let mut norm = raw.clone();
    let d = norm.data_mut();
    for i in 0..n {
        let s: f64 = (0..k).map(|c| d[c * n + i]).sum();
        for c in 0..k {
            d[c * n + i] /= s;
        }
    }
    let labels = argmax_map(&raw);
    Ok(FusedStack { branches: weights.iter().map(|w| w.0).collect(), probs: ProbabilityStack::new(norm, land.taxonomy_id.clone())?, raw, labels })
}

/// Literal per-class, per-row, per-column evaluation of the fusion rule.
pub fn fuse_reference(land: &ProbabilityStack, clip: &ProbabilityStack, cfg: &FusionConfig) -> Result<Tensor> {
    check_pair(land, clip)?;
    let (k, h, w) = (land.num_classes(), land.height(), land.width());
    let mut out = Tensor::zeros(&[k, h, w]);
    for c in 0..k {
        let cl = land.confidences()[c];
        let cc = clip.confidences()[c];
        for y in 0..h {
            for x in 0..w {
                let i = c * h * w + y * w + x;
                let (a, b) = (land.probs().data()[i], clip.probs().data()[i]);
                out.data_mut()[i] = if cl <= cfg.threshold && cc > cfg.threshold { cfg.boosted_land * a + cfg.boosted_clip * b } else { cfg.balanced * a + cfg.balanced * b };
            }
        }
    }
    Ok(out)
}

/// `softmax(Q Kᵀ / √d)` with `Q = K = tokens (N,d)`.
pub fn proxy_attention(tokens: &Tensor) -> Tensor {
    let (n, d) = (tokens.dim(0), tokens.dim(1));
    let mut a = matmul_nt(tokens.data(), tokens.data(), n, d, n);
    let s = 1.0 / (d as f64).sqrt();
    for row in a.chunks_mut(n) {
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b * s));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v * s - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(&[n, n], a)
}

/// Uses the segmenter's block-3 embedding as queries and keys over the second
/// model's probabilities as values, then upsamples back to full resolution.
pub fn proxy_refine(features: &EncoderFeatures, clip: &ProbabilityStack) -> Result<ProbabilityStack> {
    let e = &features.decoder_embedding;
    let (d, gh, gw) = (e.dim(0), e.dim(1), e.dim(2));
    let (k, h, w) = (clip.num_classes(), clip.height(), clip.width());
    if gh == 0 || gw == 0 || h % gh != 0 || w % gw != 0 || h / gh != w / gw {
        return Err(shape(format!("feature grid {gh}×{gw} does not tile a {h}×{w} stack")));
    }
    let n = gh * gw;
    let v = bilinear(clip.probs().data(), k, h, w, gh, gw);
    let v_tokens = Tensor::new(&[k, n], v).transpose();
    let attn = proxy_attention(&e.chw_to_tokens());
    let out = Tensor::new(&[n, k], matmul(attn.data(), v_tokens.data(), n, n, k)).transpose();
    let mut up = bilinear(out.data(), k, gh, gw, h, w);
    let hw = h * w;
    for i in 0..hw {
        let s: f64 = (0..k).map(|c| up[c * hw + i].max(0.0)).sum();
        for c in 0..k {
            up[c * hw + i] = up[c * hw + i].max(0.0) / s;
        }
    }
    debug_assert_eq!(d, e.dim(0));
    ProbabilityStack::new(Tensor::new(&[k, h, w], up), clip.taxonomy_id.clone())
}

/// Confusion counts with ground truth on rows and predictions on columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub k: usize,
    pub counts: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    /// `None` for classes absent from both ground truth and prediction.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    pub confusion: ConfusionMatrix,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self { k, counts: vec![0; k * k] }
    }

    pub fn add(&mut self, pred: &[u8], gt: &LabelMask) -> Result<()> {
        if pred.len() != gt.classes().len() {
            return Err(shape(format!("{} predictions for {} labels", pred.len(), gt.classes().len())));
        }
        for (i, (&p, &g)) in pred.iter().zip(gt.classes()).enumerate() {
            if gt.is_ignored(i) {
                continue;
            }
            if p as usize >= self.k || g as usize >= self.k {
                return Err(invalid(format!("class {} out of range for {} classes", p.max(g), self.k)));
            }
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let k = self.k;
        let total = self.total();
        if total == 0 {
            return Err(Error::Empty("no evaluable pixels".into()));
        }
        let mut ious = Vec::with_capacity(k);
        let mut trace = 0;
        for c in 0..k {
            let tp = self.counts[c * k + c];
            trace += tp;
            let row: u64 = self.counts[c * k..(c + 1) * k].iter().sum();
            let col: u64 = (0..k).map(|r| self.counts[r * k + c]).sum();
            let union = row + col - tp;
            ious.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = ious.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        Ok(Metrics { per_class_iou: ious, miou, oa: trace as f64 / total as f64, confusion: self.clone() })
    }
}

pub fn evaluate(pred: &[u8], gt: &LabelMask, num_classes: usize) -> Result<Metrics> {
    let mut cm = ConfusionMatrix::new(num_classes);
    cm.add(pred, gt)?;
    cm.metrics()
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub threshold: f64,
    pub metrics: Metrics,
}

pub fn threshold_sweep(land: &ProbabilityStack, clip: &ProbabilityStack, gt: &LabelMask, thresholds: &[f64]) -> Result<Vec<SweepRow>> {
    thresholds
        .iter()
        .map(|&t| {
            let f = fuse(land, clip, &FusionConfig::with_threshold(t))?;
            Ok(SweepRow { threshold: t, metrics: evaluate(&f.labels, gt, land.num_classes())? })
        })
        .collect()
}

/// `C_t,mIoU,OA,<class>...` with empty cells for absent classes.
pub fn sweep_csv(rows: &[SweepRow], class_names: &[String]) -> String {
    let mut s = String::from("C_t,mIoU,OA");
    for n in class_names {
        let _ = write!(s, ",{}", n.replace(',', " "));
    }
    s.push('\n');
    for r in rows {
        let _ = write!(s, "{},{},{}", r.threshold, r.metrics.miou, r.metrics.oa);
        for v in &r.metrics.per_class_iou {
            match v {
                Some(v) => {
                    let _ = write!(s, ",{v}");
                }
                None => s.push(','),
            }
        }
        s.push('\n');
    }
    s
}

pub fn sweep_plot(rows: &[SweepRow]) -> String {
    let pts = |f: fn(&Metrics) -> f64| rows.iter().map(|r| (r.threshold, f(&r.metrics))).collect::<Vec<_>>();
    crate::plot::line_plot("Fusion threshold sweep", "confidence threshold", "score", &[("mIoU".into(), pts(|m| m.miou)), ("OA".into(), pts(|m| m.oa))])
}

/// Nearest-centroid pixel classifier on box-smoothed RGB chromaticity.
///
/// Chromaticity discards brightness, so it confuses grey-ish classes that the
/// segmenter separates; the smoothing window gives it a receptive field
/// unlike the segmenter's.
#[derive(Clone, Debug, PartialEq)]
pub struct CentroidClassifier {
    pub radius: usize,
    pub temperature: f64,
    /// Canonical class name and mean feature.
    pub centroids: Vec<(String, [f64; 3])>,
}

fn chroma_features(image: &MultispectralImage, radius: usize) -> Result<Vec<[f64; 3]>> {
    let idx = rgb_indices(image.wavelengths())?;
    let (_, h, w) = image.dims();
    let n = h * w;
    let px = image.pixels().data();
    let band = |b: usize| -> Vec<f64> {
        let src = &px[idx[b] * n..(idx[b] + 1) * n];
        // separable box filter with edge clamping
        let r = radius as isize;
        let mut tmp = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dx in -r..=r {
                    s += src[y * w + (x as isize + dx).clamp(0, w as isize - 1) as usize];
                }
                tmp[y * w + x] = s;
            }
        }
        let mut out = vec![0.0; n];
        for y in 0..h {
            for x in 0..w {
                let mut s = 0.0;
                for dy in -r..=r {
                    s += tmp[(y as isize + dy).clamp(0, h as isize - 1) as usize * w + x];
                }
                out[y * w + x] = s;
            }
        }
        out
    };
    let (r, g, b) = (band(0), band(1), band(2));
    Ok((0..n)
        .map(|i| {
            let s = (r[i] + g[i] + b[i]).max(1e-12);
            [r[i] / s, g[i] / s, b[i] / s]
        })
        .collect())
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (0..3).map(|i| (a[i] - b[i]).powi(2)).sum()
}

impl CentroidClassifier {
    /// Fits one centroid per canonical class name over all given samples.
    pub fn fit<'a>(samples: impl IntoIterator<Item = (&'a MultispectralImage, &'a LabelMask, &'a ClassTaxonomy)>, radius: usize) -> Result<Self> {
        let mut acc: Vec<(String, [f64; 3], usize)> = Vec::new();
        let mut feats_all = Vec::new();
        for (img, lab, tax) in samples {
            let f = chroma_features(img, radius)?;
            for (i, &c) in lab.classes().iter().enumerate() {
                if lab.is_ignored(i) || c as usize >= tax.len() {
                    continue;
                }
                let name = tax.classes()[c as usize].canonical();
                let slot = match acc.iter().position(|a| a.0 == name) {
                    Some(p) => p,
                    None => {
                        acc.push((name.to_string(), [0.0; 3], 0));
                        acc.len() - 1
                    }
                };
                for j in 0..3 {
                    acc[slot].1[j] += f[i][j];
                }
                acc[slot].2 += 1;
                feats_all.push((slot, f[i]));
            }
        }
        if acc.is_empty() {
            return Err(Error::Empty("no labelled pixels to fit centroids".into()));
        }
        let centroids: Vec<(String, [f64; 3])> = acc.into_iter().map(|(n, s, c)| (n, s.map(|v| v / c as f64))).collect();
        let spread = feats_all.iter().map(|(s, f)| dist2(f, &centroids[*s].1)).sum::<f64>() / feats_all.len() as f64;
        Ok(Self { radius, temperature: spread.max(1e-8), centroids })
    }

    /// Softmax over negative scaled squared distances; classes the classifier
    /// has never seen get the largest known distance.
    pub fn predict(&self, image: &MultispectralImage, taxonomy: &ClassTaxonomy) -> Result<ProbabilityStack> {
        let f = chroma_features(image, self.radius)?;
        let (_, h, w) = image.dims();
        let n = h * w;
        let k = taxonomy.len();
        let slots: Vec<Option<usize>> = taxonomy.classes().iter().map(|c| self.centroids.iter().position(|(name, _)| name == c.canonical())).collect();
        let mut out = vec![0.0; k * n];
        for (i, fi) in f.iter().enumerate() {
            let known: Vec<f64> = slots.iter().map(|s| s.map_or(f64::NAN, |s| dist2(fi, &self.centroids[s].1))).collect();
            let worst = known.iter().filter(|v| v.is_finite()).fold(0.0f64, |a, &b| a.max(b));
            let logits: Vec<f64> = known.iter().map(|&d| -(if d.is_finite() { d } else { worst }) / (2.0 * self.temperature)).collect();
            let m = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let s: f64 = logits.iter().map(|l| (l - m).exp()).sum();
            for c in 0..k {
                out[c * n + i] = (logits[c] - m).exp() / s;
            }
        }
        ProbabilityStack::new(Tensor::new(&[k, h, w], out), taxonomy.id())
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("clip.radius", self.radius);
        kv.set("clip.temperature", self.temperature);
        for (i, (name, c)) in self.centroids.iter().enumerate() {
            kv.set(&format!("centroid.{i:03}"), format!("{name}|{}", join_list(c)));
        }
        kv
    }

    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let radius = kv.parsed_or("clip.radius", 0usize)?;
        let temperature: f64 = kv.parsed("clip.temperature")?.ok_or_else(|| invalid("missing clip.temperature"))?;
        let mut centroids = Vec::new();
        for e in kv.entries().iter().filter(|e| e.key.starts_with("centroid.")) {
            let bad = || Error::Parse { line: e.line, msg: format!("malformed centroid `{}`", e.value) };
            let (name, vals) = e.value.split_once('|').ok_or_else(bad)?;
            let v: Vec<f64> = vals.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect::<Result<_>>()?;
            centroids.push((name.to_string(), <[f64; 3]>::try_from(v).map_err(|_| bad())?));
        }
        if centroids.is_empty() {
            return Err(Error::Empty("classifier file has no centroids".into()));
        }
        Ok(Self { radius, temperature, centroids })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{generate_scene, LabelQuality, SyntheticSceneSpec, IGNORE_VALUE};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn stack(k: usize, h: usize, w: usize, rng: &mut impl Rng) -> ProbabilityStack {
        let logits = Tensor::from_fn(&[k, h, w], |_| rng.random_range(-3.0..3.0));
        crate::seg_decoder::predict_probs(&logits, "t").unwrap()
    }

    fn mask(c: Vec<u8>, h: usize, w: usize) -> LabelMask {
        LabelMask::new(h, w, c, LabelQuality::Exact, "t").unwrap()
    }

    #[test]
    fn hand_example_two_classes() {
        let land = ProbabilityStack::new(Tensor::new(&[2, 1, 1], vec![0.9, 0.1]), "t").unwrap();
        let clip = ProbabilityStack::new(Tensor::new(&[2, 1, 1], vec![0.2, 0.8]), "t").unwrap();
        let f = fuse(&land, &clip, &FusionConfig::default()).unwrap();
        assert_eq!(f.branches, vec![Branch::Balanced, Branch::Boosted]);
        assert_eq!(f.raw.data(), &[2.0 * 0.9 + 2.0 * 0.2, 1.0 * 0.1 + 3.0 * 0.8]);
        assert!((f.raw.data()[0] - 2.2).abs() < 1e-15 && (f.raw.data()[1] - 2.5).abs() < 1e-15);
        assert_eq!(f.labels, vec![1]);
        assert!((f.probs.probs().data()[1] - 2.5 / 4.7).abs() < 1e-15);
    }

    #[test]
    fn matches_reference_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..30 {
            let (k, h, w) = (rng.random_range(2..6), rng.random_range(1..7), rng.random_range(1..7));
            let (a, b) = (stack(k, h, w, &mut rng), stack(k, h, w, &mut rng));
            let cfg = FusionConfig::with_threshold(rng.random_range(0.05..0.95));
            assert_eq!(fuse(&a, &b, &cfg).unwrap().raw, fuse_reference(&a, &b, &cfg).unwrap());
        }
    }

    #[test]
    fn identical_inputs_keep_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = stack(4, 5, 5, &mut rng);
        let f = fuse(&a, &a, &FusionConfig::with_threshold(0.01)).unwrap();
        assert!(f.branches.iter().all(|&b| b == Branch::Balanced));
        assert_eq!(f.labels, a.label_map());
        assert!(f.probs.probs().max_abs_diff(a.probs()) < 1e-15);
    }

    #[test]
    fn threshold_limits_take_balanced_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (a, b) = (stack(3, 4, 4, &mut rng), stack(3, 4, 4, &mut rng));
        for t in [1e-9, 1.0 - 1e-9] {
            let f = fuse(&a, &b, &FusionConfig::with_threshold(t)).unwrap();
            assert!(f.branches.iter().all(|&br| br == Branch::Balanced));
            let avg = a.probs().zip_map(b.probs(), |x, y| 2.0 * x + 2.0 * y);
            assert_eq!(f.raw, avg);
        }
    }

    #[test]
    fn rejects_mismatched_stacks_and_bad_thresholds() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (a, b) = (stack(3, 4, 4, &mut rng), stack(2, 4, 4, &mut rng));
        assert!(fuse(&a, &b, &FusionConfig::default()).is_err());
        assert!(fuse(&a, &a, &FusionConfig::with_threshold(1.0)).is_err());
    }

    #[test]
    fn metric_hand_example() {
        let m = evaluate(&[0, 1, 1, 1], &mask(vec![0, 0, 1, 1], 2, 2), 2).unwrap();
        assert_eq!(m.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert_eq!(m.miou, (0.5 + 2.0 / 3.0) / 2.0);
        assert!((m.miou - 7.0 / 12.0).abs() < 1e-15);
        assert_eq!(m.oa, 0.75);
        let p = evaluate(&[2, 0, 1], &mask(vec![2, 0, 1], 1, 3), 5).unwrap();
        assert_eq!((p.miou, p.oa), (1.0, 1.0));
        assert_eq!(p.per_class_iou[3], None);
        assert!(matches!(evaluate(&[0], &mask(vec![IGNORE_VALUE], 1, 1), 2), Err(Error::Empty(_))));
    }

    #[test]
    fn proxy_attention_limits() {
        // constant features: uniform attention, every position gets the mean
        let feats = EncoderFeatures { per_block: vec![], decoder_embedding: Tensor::full(&[4, 2, 2], 0.3) };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clip = stack(3, 2, 2, &mut rng);
        let out = proxy_refine(&feats, &clip).unwrap();
        for c in 0..3 {
            let mean = clip.probs().data()[c * 4..(c + 1) * 4].iter().sum::<f64>() / 4.0;
            for i in 0..4 {
                assert!((out.probs().data()[c * 4 + i] - mean).abs() < 1e-12);
            }
        }
        // orthogonal, large features: attention ≈ identity
        let emb = Tensor::from_fn(&[4, 2, 2], |i| if i / 4 == i % 4 { 40.0 } else { 0.0 });
        let out = proxy_refine(&EncoderFeatures { per_block: vec![], decoder_embedding: emb }, &clip).unwrap();
        assert!(out.probs().max_abs_diff(clip.probs()) < 1e-3);
        let bad = EncoderFeatures { per_block: vec![], decoder_embedding: Tensor::zeros(&[4, 3, 2]) };
        assert!(proxy_refine(&bad, &clip).is_err());
    }

    #[test]
    fn sweep_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (a, b) = (stack(3, 4, 4, &mut rng), stack(3, 4, 4, &mut rng));
        let gt = mask((0..16).map(|i| (i % 3) as u8).collect(), 4, 4);
        let rows = threshold_sweep(&a, &b, &gt, &DEFAULT_SWEEP).unwrap();
        let csv = sweep_csv(&rows, &["a".into(), "b".into(), "c".into()]);
        assert_eq!(csv.lines().next().unwrap(), "C_t,mIoU,OA,a,b,c");
        assert_eq!(csv.lines().skip(1).map(|l| l.split(',').next().unwrap().to_string()).collect::<Vec<_>>(), ["0.4", "0.5", "0.6", "0.7", "0.8"]);
        assert!(sweep_plot(&rows).contains("<polyline"));
    }

    #[test]
    fn centroid_classifier_is_weak_but_useful() {
        let ds = generate_scene(&SyntheticSceneSpec::smoke(3)).unwrap();
        let s = &ds.subsets[0];
        let clf = CentroidClassifier::fit(s.samples[..10].iter().map(|x| (&x.image, &x.clean, &s.taxonomy)), 1).unwrap();
        let mut cm = ConfusionMatrix::new(4);
        for x in &s.samples[10..20] {
            let p = clf.predict(&x.image, &s.taxonomy).unwrap();
            cm.add(&p.label_map(), &x.clean).unwrap();
        }
        let m = cm.metrics().unwrap();
        assert!(m.oa > 0.4, "{m:?}");
        let back = CentroidClassifier::from_kv(&KvFile::parse(&clf.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back.centroids.len(), clf.centroids.len());
        assert_eq!(back.predict(&s.samples[0].image, &s.taxonomy).unwrap().label_map(), clf.predict(&s.samples[0].image, &s.taxonomy).unwrap().label_map());
    }

    fn oracle_miou(pred: &[u8], gt: &[u8], k: usize) -> (f64, f64) {
        // per-class set counting, independent of the matrix code
        let pairs: Vec<(u8, u8)> = pred.iter().zip(gt).filter(|(_, &g)| g != IGNORE_VALUE).map(|(&p, &g)| (p, g)).collect();
        let mut ious = Vec::new();
        for c in 0..k as u8 {
            let inter = pairs.iter().filter(|&&(p, g)| p == c && g == c).count();
            let union = pairs.iter().filter(|&&(p, g)| p == c || g == c).count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        let oa = pairs.iter().filter(|(p, g)| p == g).count() as f64 / pairs.len() as f64;
        (ious.iter().sum::<f64>() / ious.len() as f64, oa)
    }

    proptest! {
        #[test]
        fn exactly_one_branch(cl in 0.0f64..1.0, cc in 0.0f64..1.0, t in 0.01f64..0.99) {
            let boosted = cl <= t && cc > t;
            let balanced = !(cl <= t) || !(cc > t);
            prop_assert!(boosted != balanced);
            prop_assert_eq!(branch(cl, cc, t) == Branch::Boosted, boosted);
        }

        #[test]
        fn fused_probs_are_simplices(seed in 0u64..1000, k in 2usize..6, t in 0.05f64..0.95) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (stack(k, 3, 3, &mut rng), stack(k, 3, 3, &mut rng));
            let f = fuse(&a, &b, &FusionConfig::with_threshold(t)).unwrap();
            for i in 0..9 {
                let s: f64 = (0..k).map(|c| f.probs.probs().data()[c * 9 + i]).sum();
                prop_assert!((s - 1.0).abs() < 1e-12);
            }
            // renormalising never changes the winner
            prop_assert_eq!(f.probs.label_map(), f.labels);
        }

        #[test]
        fn metrics_match_oracle(seed in 0u64..1000, k in 2usize..6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<u8> = (0..36).map(|_| rng.random_range(0..k as u8)).collect();
            let gt: Vec<u8> = (0..36).map(|_| if rng.random_bool(0.1) { IGNORE_VALUE } else { rng.random_range(0..k as u8) }).collect();
            prop_assume!(gt.iter().any(|&g| g != IGNORE_VALUE));
            let m = evaluate(&pred, &mask(gt.clone(), 6, 6), k).unwrap();
            let (miou, oa) = oracle_miou(&pred, &gt, k);
            prop_assert!((m.miou - miou).abs() < 1e-12);
            prop_assert!((m.oa - oa).abs() < 1e-12);
        }

        #[test]
        fn attention_rows_sum_to_one(vals in prop::collection::vec(-5.0f64..5.0, 24)) {
            let a = proxy_attention(&Tensor::new(&[6, 4], vals));
            for row in a.data().chunks(6) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
        }
    }
}
