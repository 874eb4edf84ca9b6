use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::catalog::{concept, Concept};
use super::{corrupt_labels, LabelMask, LabelQuality, MultispectralImage, SubsetSpec, SyntheticSceneSpec};
use crate::error::Result;
use crate::parallel;
use crate::taxonomy::{ClassEntry, ClassTaxonomy};
use crate::tensor::Tensor;

/// Additive per-pixel noise in unit reflectance.
pub const PIXEL_NOISE: f64 = 0.015;
/// Half-width of the multiplicative per-region brightness jitter.
pub const REGION_JITTER: f64 = 0.03;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: MultispectralImage,
    /// The mask training sees; weak for noisy subsets.
    pub label: LabelMask,
    /// Ground truth kept for evaluation only.
    pub clean: LabelMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Subset {
    pub spec: SubsetSpec,
    pub taxonomy: ClassTaxonomy,
    pub samples: Vec<Sample>,
}

impl Subset {
    pub fn id(&self) -> &str {
        &self.spec.id
    }

    /// Class reference spectra in the subset's value range.
    pub fn class_spectra(&self) -> Vec<Vec<f64>> {
        class_spectra(&self.spec)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: SyntheticSceneSpec,
    pub subsets: Vec<Subset>,
}

impl Dataset {
    pub fn subset(&self, id: &str) -> Option<&Subset> {
        self.subsets.iter().find(|s| s.spec.id == id)
    }

    pub fn num_samples(&self) -> usize {
        self.subsets.iter().map(|s| s.samples.len()).sum()
    }
}

pub fn subset_taxonomy(spec: &SubsetSpec) -> Result<ClassTaxonomy> {
    let classes = spec
        .concepts
        .iter()
        .map(|n| {
            let c = concept(n).expect("validated concept");
            ClassEntry::new(c.variants.iter().copied()).with_color(c.color)
        })
        .collect();
    ClassTaxonomy::new(spec.id.clone(), classes)
}

fn class_spectra(spec: &SubsetSpec) -> Vec<Vec<f64>> {
    spec.concepts.iter().map(|n| concept(n).expect("validated concept").spectrum(&spec.wavelengths).iter().map(|v| v * spec.scale).collect()).collect()
}

fn patch_rng(seed: u64, subset: usize, patch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((subset as u64) << 32) | patch as u64);
    rng
}

fn generate_patch(spec: &SyntheticSceneSpec, s: usize, p: usize) -> Result<Sample> {
    let sub = &spec.subsets[s];
    let n = spec.patch_size;
    let k = sub.num_classes();
    let concepts: Vec<&Concept> = sub.concepts.iter().map(|c| concept(c).expect("validated concept")).collect();
    let mut rng = patch_rng(spec.seed, s, p);

    let num_sites = rng.random_range(3..=8usize);
    let sites: Vec<(f64, f64, u8, f64)> = (0..num_sites)
        .map(|_| {
            let y = rng.random::<f64>() * n as f64;
            let x = rng.random::<f64>() * n as f64;
            let class = rng.random_range(0..k) as u8;
            let jitter = 1.0 + rng.random_range(-REGION_JITTER..=REGION_JITTER);
            (y, x, class, jitter)
        })
        .collect();
    let mut region = vec![0usize; n * n];
    for y in 0..n {
        for x in 0..n {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            region[y * n + x] = (0..num_sites)
                .min_by(|&a, &b| {
                    let d = |i: usize| (sites[i].0 - py).powi(2) + (sites[i].1 - px).powi(2);
                    d(a).total_cmp(&d(b))
                })
                .expect("at least one site");
        }
    }

    let c = sub.wavelengths.len();
    let spectra: Vec<Vec<f64>> = concepts.iter().map(|cc| cc.spectrum(&sub.wavelengths)).collect();
    let noise = Normal::new(0.0, PIXEL_NOISE).expect("finite std");
    let mut px = vec![0.0; c * n * n];
    for b in 0..c {
        for i in 0..n * n {
            let (_, _, class, jitter) = sites[region[i]];
            // stored as f32 on disk, so keep the in-memory copy identical
            px[b * n * n + i] = ((spectra[class as usize][b] * jitter + noise.sample(&mut rng)) * sub.scale) as f32 as f64;
        }
    }
    let image = MultispectralImage::new(Tensor::new(&[c, n, n], px), sub.wavelengths.clone(), sub.gsd, sub.id.clone())?;
    let clean = LabelMask::new(n, n, region.iter().map(|&r| sites[r].2).collect(), LabelQuality::Exact, sub.id.clone())?;
    let label = if sub.exact { clean.clone() } else { corrupt_labels(&clean, k, sub.noise_rate, rng.random())? };
    Ok(Sample { image, label, clean })
}

/// Builds every subset in memory. Each patch draws from its own ChaCha stream,
/// so the result does not depend on thread scheduling.
pub fn generate_scene(spec: &SyntheticSceneSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut subsets = Vec::with_capacity(spec.subsets.len());
    for (s, sub) in spec.subsets.iter().enumerate() {
        let work = spec.patch_size * spec.patch_size * (sub.wavelengths.len() + 8);
        let samples = parallel::map_range(spec.patches_per_subset, work, |p| generate_patch(spec, s, p)).into_iter().collect::<Result<Vec<_>>>()?;
        subsets.push(Subset { spec: sub.clone(), taxonomy: subset_taxonomy(sub)?, samples });
    }
    Ok(Dataset { spec: spec.clone(), subsets })
}

/// Labels each pixel with the class whose reference spectrum is nearest in
/// Euclidean distance.
pub fn nearest_spectrum_classify(image: &MultispectralImage, spectra: &[Vec<f64>]) -> Vec<u8> {
    let (c, h, w) = image.dims();
    let px = image.pixels().data();
    (0..h * w)
        .map(|i| {
            let d = |s: &Vec<f64>| (0..c).map(|b| (px[b * h * w + i] - s[b]).powi(2)).sum::<f64>();
            (0..spectra.len()).min_by(|&a, &b| d(&spectra[a]).total_cmp(&d(&spectra[b]))).unwrap_or(0) as u8
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_synth::{SyntheticSceneSpec, RGB, S2_WAVELENGTHS};

    fn two_subset_spec() -> SyntheticSceneSpec {
        let mut s = SyntheticSceneSpec::smoke(7);
        s.patches_per_subset = 10;
        s
    }

    #[test]
    fn counts_and_determinism() {
        let spec = two_subset_spec();
        let a = generate_scene(&spec).unwrap();
        assert_eq!(a.num_samples(), 20);
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        parallel::set_enabled(false);
        let c = generate_scene(&spec).unwrap();
        parallel::set_enabled(true);
        assert_eq!(a, c);
    }

    #[test]
    fn exact_subset_masks_are_exact() {
        let d = generate_scene(&two_subset_spec()).unwrap();
        for s in &d.subsets[0].samples {
            assert_eq!(s.label.quality(), LabelQuality::Exact);
            assert_eq!(s.label, s.clean);
        }
    }

    #[test]
    fn weak_subset_noise_in_band() {
        let d = generate_scene(&two_subset_spec()).unwrap();
        let (mut diff, mut n) = (0usize, 0usize);
        for s in &d.subsets[1].samples {
            assert_eq!(s.label.quality(), LabelQuality::Weak { corruption_rate: 0.3 });
            for (a, b) in s.label.classes().iter().zip(s.clean.classes()) {
                diff += (a != b) as usize;
                n += 1;
            }
        }
        assert!(n >= 10_000);
        let frac = diff as f64 / n as f64;
        assert!((0.25..=0.35).contains(&frac), "{frac}");
    }

    #[test]
    fn masks_respect_taxonomy() {
        let d = generate_scene(&SyntheticSceneSpec::las_like(2)).unwrap();
        for s in &d.subsets {
            for p in &s.samples {
                p.label.validate(s.taxonomy.len()).unwrap();
                p.clean.validate(s.taxonomy.len()).unwrap();
                assert_eq!(p.image.dims().0, s.spec.wavelengths.len());
            }
        }
    }

    #[test]
    fn classes_learnable_from_spectra() {
        let mut spec = SyntheticSceneSpec::las_like(5);
        spec.patches_per_subset = 4;
        let d = generate_scene(&spec).unwrap();
        for s in &d.subsets {
            let refs = s.class_spectra();
            let (mut hit, mut n) = (0usize, 0usize);
            for p in &s.samples {
                let pred = nearest_spectrum_classify(&p.image, &refs);
                hit += pred.iter().zip(p.clean.classes()).filter(|(a, b)| a == b).count();
                n += pred.len();
            }
            let acc = hit as f64 / n as f64;
            assert!(acc > 0.8, "subset {} accuracy {acc}", s.id());
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let mut spec = two_subset_spec();
        spec.subsets[0].concepts.clear();
        assert!(generate_scene(&spec).is_err());
        let mut spec = two_subset_spec();
        spec.patch_size = 33;
        assert!(generate_scene(&spec).is_err());
        assert_eq!(RGB.len(), 3);
        assert_eq!(S2_WAVELENGTHS.len(), 13);
    }
}
