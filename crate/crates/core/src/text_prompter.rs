//! Frozen class-name text encoder, prompt sampling, and embedding-cluster
//! diagnostics (silhouette score, optional exact t-SNE).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::Graph;
use crate::error::{invalid, Result};
use crate::nn::{sincos_2d, LayerNorm, TransformerLayer};
use crate::params::{Binder, Builder, Group, ParamStore};
use crate::taxonomy::ClassTaxonomy;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TextConfig {
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self { dim: 32, layers: 2, heads: 4 }
    }
}

/// Hash-seeded token table followed by a small frozen transformer; output is
/// the unit-normalised mean of the final token states.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    layers: Vec<TransformerLayer>,
    ln: LayerNorm,
}

fn fnv(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(|t| t.to_lowercase()).collect()
}

impl TextEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, config: TextConfig) -> Self {
        let mut b = Builder::new(store, rng, Group::Text, "text");
        let layers = (0..config.layers).map(|i| TransformerLayer::new(&mut b, &format!("layer{i}"), config.dim, config.heads, 2)).collect();
        let ln = LayerNorm::new(&mut b, "ln", config.dim);
        Self { config, layers, ln }
    }

    fn token_vector(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(fnv(token));
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        (0..self.config.dim).map(|_| n.sample(&mut rng)).collect()
    }

    pub fn embed(&self, store: &ParamStore, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text);
        if tokens.is_empty() {
            return Err(invalid(format!("class name `{text}` has no tokens")));
        }
        let d = self.config.dim;
        let t = tokens.len();
        let table: Vec<f64> = tokens.iter().flat_map(|tok| self.token_vector(tok)).collect();
        let g = Graph::new();
        let p = Binder::frozen(&g, store);
        let mut x = g.constant(Tensor::new(&[t, d], table)).add(g.constant(sincos_2d(1, t, d).map(|v| 0.5 * v)));
        for l in &self.layers {
            x = l.forward(&p, x);
        }
        let pooled = self.ln.forward(&p, x).mean_axis(0).value();
        let norm = pooled.norm();
        Ok(pooled.data().iter().map(|v| v / norm).collect())
    }

    pub fn embed_names(&self, store: &ParamStore, taxonomy: &ClassTaxonomy) -> Result<PromptSet> {
        let classes = taxonomy.classes().iter().map(|c| c.variants.iter().map(|v| self.embed(store, v)).collect::<Result<Vec<_>>>()).collect::<Result<Vec<_>>>()?;
        PromptSet::new(classes)
    }
}

/// Per-class variant embeddings; the first variant of each class is canonical.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    classes: Vec<Vec<Vec<f64>>>,
    dim: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    /// One variant drawn uniformly per class.
    Train,
    /// Canonical names only.
    Infer,
}

impl PromptSet {
    pub fn new(classes: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        let dim = classes.first().and_then(|c| c.first()).map(|v| v.len()).ok_or_else(|| invalid("prompt set needs at least one class with one variant"))?;
        if classes.iter().any(|c| c.is_empty() || c.iter().any(|v| v.len() != dim)) {
            return Err(invalid("every class needs variants of one common dimension"));
        }
        Ok(Self { classes, dim })
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn variants(&self, k: usize) -> &[Vec<f64>] {
        &self.classes[k]
    }

    /// `(K, dim)` prompt matrix.
    pub fn sample<R: Rng>(&self, mode: PromptMode, rng: &mut R) -> Tensor {
        let mut data = Vec::with_capacity(self.classes.len() * self.dim);
        for c in &self.classes {
            let i = match mode {
                PromptMode::Infer => 0,
                PromptMode::Train => rng.random_range(0..c.len()),
            };
            data.extend_from_slice(&c[i]);
        }
        Tensor::new(&[self.classes.len(), self.dim], data)
    }

    pub fn canonical(&self) -> Tensor {
        self.sample(PromptMode::Infer, &mut ChaCha8Rng::seed_from_u64(0))
    }

    /// Rows reordered by `order`.
    pub fn permuted(&self, order: &[usize]) -> Self {
        Self { classes: order.iter().map(|&k| self.classes[k].clone()).collect(), dim: self.dim }
    }
}

pub fn sample_prompts<R: Rng>(prompts: &PromptSet, mode: PromptMode, rng: &mut R) -> Tensor {
    prompts.sample(mode, rng)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Mean silhouette over all points (Euclidean distance). Points alone in
/// their class score 0, as do points with `a = b = 0`.
pub fn silhouette_score(points: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if points.len() != labels.len() || points.is_empty() {
        return Err(invalid("silhouette needs one label per point"));
    }
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut sizes = vec![0usize; k];
    labels.iter().for_each(|&l| sizes[l] += 1);
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Err(invalid("silhouette needs at least two non-empty classes"));
    }
    let scores: Vec<f64> = crate::parallel::map_range(points.len(), points.len() * points[0].len(), |i| {
        if sizes[labels[i]] == 1 {
            return 0.0;
        }
        let mut sums = vec![0.0; k];
        for (j, q) in points.iter().enumerate() {
            if j != i {
                sums[labels[j]] += dist(&points[i], q);
            }
        }
        let a = sums[labels[i]] / (sizes[labels[i]] - 1) as f64;
        let b = (0..k).filter(|&c| c != labels[i] && sizes[c] > 0).map(|c| sums[c] / sizes[c] as f64).fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m == 0.0 {
            0.0
        } else {
            (b - a) / m
        }
    });
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// Exact t-SNE to two dimensions.
pub fn tsne(points: &[Vec<f64>], perplexity: f64, iterations: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let n = points.len();
    if n < 2 {
        return Err(invalid("t-SNE needs at least two points"));
    }
    let perplexity = perplexity.min((n - 1) as f64 / 3.0).max(1.0);
    let d2: Vec<f64> = (0..n * n).map(|i| dist(&points[i / n], &points[i % n]).powi(2)).collect();
    // conditional affinities with per-point bandwidth matched to the perplexity
    let target = perplexity.ln();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let (mut lo, mut hi, mut beta) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let mut sum = 0.0;
            let mut hsum = 0.0;
            for j in (0..n).filter(|&j| j != i) {
                let e = (-beta * d2[i * n + j]).exp();
                p[i * n + j] = e;
                sum += e;
                hsum += beta * d2[i * n + j] * e;
            }
            let sum = sum.max(1e-300);
            let entropy = sum.ln() + hsum / sum;
            for j in 0..n {
                p[i * n + j] /= sum;
            }
            if (entropy - target).abs() < 1e-6 {
                break;
            }
            if entropy > target {
                lo = beta;
                beta = if hi.is_finite() { (beta + hi) / 2.0 } else { beta * 2.0 };
            } else {
                hi = beta;
                beta = (beta + lo) / 2.0;
            }
        }
    }
    let sym: Vec<f64> = (0..n * n).map(|i| ((p[i] + p[(i % n) * n + i / n]) / (2.0 * n as f64)).max(1e-12)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init = Normal::new(0.0, 1e-4).expect("finite std");
    let mut y: Vec<f64> = (0..2 * n).map(|_| init.sample(&mut rng)).collect();
    let mut vel = vec![0.0; 2 * n];
    let lr = (n as f64 / 48.0).max(10.0);
    for it in 0..iterations {
        let exaggeration = if it < iterations / 4 { 4.0 } else { 1.0 };
        let momentum = if it < iterations / 4 { 0.5 } else { 0.8 };
        let mut q = vec![0.0; n * n];
        let mut qsum = 0.0;
        for i in 0..n {
            for j in (0..n).filter(|&j| j != i) {
                let dy = (y[2 * i] - y[2 * j]).powi(2) + (y[2 * i + 1] - y[2 * j + 1]).powi(2);
                q[i * n + j] = 1.0 / (1.0 + dy);
                qsum += q[i * n + j];
            }
        }
        for i in 0..n {
            let mut g = [0.0; 2];
            for j in (0..n).filter(|&j| j != i) {
                let m = 4.0 * (exaggeration * sym[i * n + j] - q[i * n + j] / qsum) * q[i * n + j];
                g[0] += m * (y[2 * i] - y[2 * j]);
                g[1] += m * (y[2 * i + 1] - y[2 * j + 1]);
            }
            for a in 0..2 {
                vel[2 * i + a] = momentum * vel[2 * i + a] - lr * g[a];
            }
        }
        y.iter_mut().zip(&vel).for_each(|(y, v)| *y += v);
    }
    Ok(y.chunks(2).map(|c| c.to_vec()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taxonomy::ClassEntry;
    use proptest::prelude::*;

    fn encoder() -> (ParamStore, TextEncoder) {
        let mut s = ParamStore::new();
        let e = TextEncoder::new(&mut s, &mut ChaCha8Rng::seed_from_u64(4), TextConfig { dim: 16, layers: 2, heads: 2 });
        (s, e)
    }

    fn taxonomy() -> ClassTaxonomy {
        ClassTaxonomy::new(
            "t",
            vec![ClassEntry::new(["water", "open water", "lake", "river"]), ClassEntry::new(["tree"]), ClassEntry::new(["building", "roof"])],
        )
        .unwrap()
    }

    #[test]
    fn deterministic_unit_embeddings() {
        let (s, e) = encoder();
        let a = e.embed_names(&s, &taxonomy()).unwrap();
        let b = e.embed_names(&s, &taxonomy()).unwrap();
        assert_eq!(a, b);
        for k in 0..3 {
            for v in a.variants(k) {
                assert!((v.iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!(e.embed(&s, " ;, ").is_err());
        assert!(e.embed(&s, "").is_err());
    }

    #[test]
    fn single_class_prompt_set() {
        let (s, e) = encoder();
        let t = ClassTaxonomy::new("one", vec![ClassEntry::new(["water"])]).unwrap();
        assert_eq!(e.embed_names(&s, &t).unwrap().num_classes(), 1);
    }

    #[test]
    fn distinct_strings_not_parallel() {
        let (s, e) = encoder();
        let a = e.embed(&s, "water").unwrap();
        let b = e.embed(&s, "barren land").unwrap();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!(cos < 1.0);
    }

    #[test]
    fn infer_mode_is_canonical() {
        let (s, e) = encoder();
        let ps = e.embed_names(&s, &taxonomy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let m = ps.sample(PromptMode::Infer, &mut rng);
            for k in 0..3 {
                assert_eq!(&m.data()[k * 16..(k + 1) * 16], ps.variants(k)[0].as_slice());
            }
        }
    }

    #[test]
    fn train_mode_frequencies() {
        let (s, e) = encoder();
        let ps = e.embed_names(&s, &taxonomy()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut counts = [0usize; 4];
        for _ in 0..1000 {
            let m = ps.sample(PromptMode::Train, &mut rng);
            let row = &m.data()[0..16];
            counts[ps.variants(0).iter().position(|v| v.as_slice() == row).unwrap()] += 1;
            assert_eq!(&m.data()[16..32], ps.variants(1)[0].as_slice());
        }
        for c in counts {
            let f = c as f64 / 1000.0;
            assert!((0.2..=0.3).contains(&f), "{counts:?}");
        }
    }

    #[test]
    fn silhouette_hand_example() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]];
        let s = silhouette_score(&pts, &[0, 0, 1, 1]).unwrap();
        let b = (10.0 + 101f64.sqrt()) / 2.0;
        assert!((s - (b - 1.0) / b).abs() < 1e-12);
        assert!((s - 0.9005).abs() < 1e-3);
    }

    #[test]
    fn silhouette_degenerate_cases() {
        let same = vec![vec![1.0, 1.0]; 4];
        assert_eq!(silhouette_score(&same, &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(silhouette_score(&same, &[0, 0, 0, 0]).is_err());
        // singleton class contributes 0 for its point
        let pts = vec![vec![0.0], vec![0.1], vec![5.0]];
        let s = silhouette_score(&pts, &[0, 0, 1]).unwrap();
        let each = |a: f64, b: f64| (b - a) / a.max(b);
        assert!((s - (each(0.1, 5.0) + each(0.1, 4.9)) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn silhouette_separation_limit() {
        let pts = vec![vec![0.0, 0.0], vec![0.0, 1.0], vec![1e4, 0.0], vec![1e4, 1.0]];
        assert!(silhouette_score(&pts, &[0, 0, 1, 1]).unwrap() > 0.99);
    }

    #[test]
    fn tsne_keeps_clusters_apart() {
        let mut pts = Vec::new();
        let mut labels = Vec::new();
        for c in 0..2 {
            for i in 0..8 {
                pts.push(vec![c as f64 * 20.0 + (i as f64 * 0.7).sin(), (i as f64 * 1.3).cos(), c as f64 * -5.0]);
                labels.push(c);
            }
        }
        let y = tsne(&pts, 5.0, 300, 3).unwrap();
        assert_eq!(y.len(), 16);
        assert!(silhouette_score(&y, &labels).unwrap() > 0.5);
        assert_eq!(y, tsne(&pts, 5.0, 300, 3).unwrap());
    }

    proptest! {
        #[test]
        fn silhouette_bounded(raw in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, 0usize..3), 3..30)) {
            let pts: Vec<Vec<f64>> = raw.iter().map(|r| vec![r.0, r.1]).collect();
            let mut labels: Vec<usize> = raw.iter().map(|r| r.2).collect();
            labels[0] = 0;
            labels[1] = 1;
            let s = silhouette_score(&pts, &labels).unwrap();
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
