//! Synthetic multi-subset datasets with exact and weak labels.
//!
//! Every subset has its own band layout, ground sample distance, class system
//! and label-noise rate. Ground truth is a Voronoi partition; each region's
//! pixels follow the class's spectral signature so classes are separable from
//! spectra alone. Weak subsets emit region-correlated corrupted masks and keep
//! the clean masks in a sidecar directory for evaluation.

mod catalog;
mod corrupt;
mod generate;
mod io;
mod names;
mod stats;

pub use catalog::{concept, concept_names, Concept, CONCEPTS};
pub use corrupt::corrupt_labels;
pub use generate::{generate_scene, nearest_spectrum_classify, Dataset, Sample, Subset};
pub use io::{load_dataset, write_dataset, MANIFEST_FILE};
pub use names::harmonize_names;
pub use stats::{compute_band_stats, BandStats};

use crate::container::{Container, Kind, Payload};
use crate::error::{invalid, Error, Result};
use crate::kv::KvFile;
use crate::tensor::Tensor;
use std::path::Path;

/// Label value excluded from training and evaluation.
pub const IGNORE_VALUE: u8 = 255;

/// An `H×W×C` reflectance-like image stored channel-first as `(C,H,W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultispectralImage {
    pixels: Tensor,
    wavelengths: Vec<f64>,
    gsd: f64,
    subset_id: String,
}

impl MultispectralImage {
    pub fn new(pixels: Tensor, wavelengths: Vec<f64>, gsd: f64, subset_id: impl Into<String>) -> Result<Self> {
        if pixels.ndim() != 3 {
            return Err(invalid(format!("image pixels must be (C,H,W), got {:?}", pixels.shape())));
        }
        if wavelengths.len() != pixels.dim(0) {
            return Err(invalid(format!("{} wavelengths for {} bands", wavelengths.len(), pixels.dim(0))));
        }
        if let Some(w) = wavelengths.iter().find(|w| !(**w > 0.0)) {
            return Err(invalid(format!("wavelengths must be positive, got {w}")));
        }
        Ok(Self { pixels, wavelengths, gsd, subset_id: subset_id.into() })
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths
    }

    pub fn gsd(&self) -> f64 {
        self.gsd
    }

    pub fn subset_id(&self) -> &str {
        &self.subset_id
    }

    /// `(C, H, W)`.
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.pixels.dim(0), self.pixels.dim(1), self.pixels.dim(2))
    }

    pub fn band(&self, c: usize) -> Tensor {
        let (_, h, w) = self.dims();
        Tensor::new(&[h, w], self.pixels.data()[c * h * w..(c + 1) * h * w].to_vec())
    }

    /// Per-band `(x - mean) / std`; a zero std leaves the band centred only.
    pub fn normalized(&self, stats: &BandStats) -> Result<Self> {
        let (c, h, w) = self.dims();
        if stats.mean.len() != c {
            return Err(invalid(format!("band statistics for {} bands applied to a {c}-band image", stats.mean.len())));
        }
        let mut px = self.pixels.clone();
        for b in 0..c {
            let s = if stats.std[b] > 0.0 { stats.std[b] } else { 1.0 };
            for v in &mut px.data_mut()[b * h * w..(b + 1) * h * w] {
                *v = (*v - stats.mean[b]) / s;
            }
        }
        Ok(Self { pixels: px, ..self.clone() })
    }

    pub fn with_pixels(&self, pixels: Tensor) -> Result<Self> {
        Self::new(pixels, self.wavelengths.clone(), self.gsd, self.subset_id.clone())
    }

    /// Keeps only the listed bands, in the given order.
    pub fn select_bands(&self, bands: &[usize]) -> Result<Self> {
        let (c, h, w) = self.dims();
        if let Some(b) = bands.iter().find(|&&b| b >= c) {
            return Err(invalid(format!("band {b} out of range for {c} bands")));
        }
        let mut data = Vec::with_capacity(bands.len() * h * w);
        for &b in bands {
            data.extend_from_slice(&self.pixels.data()[b * h * w..(b + 1) * h * w]);
        }
        Self::new(Tensor::new(&[bands.len(), h, w], data), bands.iter().map(|&b| self.wavelengths[b]).collect(), self.gsd, self.subset_id.clone())
    }

    pub fn to_container(&self) -> Container {
        Container {
            kind: Kind::Image,
            shape: self.pixels.shape().to_vec(),
            wavelengths: self.wavelengths.clone(),
            gsd: self.gsd,
            id: self.subset_id.clone(),
            meta: String::new(),
            payload: Payload::F32(self.pixels.data().iter().map(|&v| v as f32).collect()),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != Kind::Image || c.shape.len() != 3 {
            return Err(invalid("container does not hold a C×H×W image"));
        }
        Self::new(Tensor::new(&c.shape, c.payload.to_f64()), c.wavelengths, c.gsd, c.id)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(Kind::Image, path)?;
        Self::from_container(c).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum LabelQuality {
    Exact,
    /// Automatically produced labels with a known fraction of corrupted pixels.
    Weak { corruption_rate: f64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabelMask {
    height: usize,
    width: usize,
    classes: Vec<u8>,
    ignore_value: u8,
    quality: LabelQuality,
    taxonomy_id: String,
}

impl LabelMask {
    pub fn new(height: usize, width: usize, classes: Vec<u8>, quality: LabelQuality, taxonomy_id: impl Into<String>) -> Result<Self> {
        if classes.len() != height * width {
            return Err(invalid(format!("{} labels for a {height}×{width} mask", classes.len())));
        }
        if let LabelQuality::Weak { corruption_rate } = quality {
            if !(corruption_rate > 0.0 && corruption_rate < 1.0) {
                return Err(invalid(format!("weak masks need a corruption rate in (0,1), got {corruption_rate}")));
            }
        }
        Ok(Self { height, width, classes, ignore_value: IGNORE_VALUE, quality, taxonomy_id: taxonomy_id.into() })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn ignore_value(&self) -> u8 {
        self.ignore_value
    }

    pub fn quality(&self) -> LabelQuality {
        self.quality
    }

    pub fn taxonomy_id(&self) -> &str {
        &self.taxonomy_id
    }

    pub fn is_ignored(&self, i: usize) -> bool {
        self.classes[i] == self.ignore_value
    }

    pub fn valid_count(&self) -> usize {
        self.classes.iter().filter(|&&c| c != self.ignore_value).count()
    }

    /// Checks every non-ignore value lies in `[0, k)`.
    pub fn validate(&self, k: usize) -> Result<()> {
        match self.classes.iter().find(|&&c| c != self.ignore_value && c as usize >= k) {
            Some(c) => Err(invalid(format!("label {c} outside taxonomy `{}` of size {k}", self.taxonomy_id))),
            None => Ok(()),
        }
    }

    pub(crate) fn with_classes(&self, classes: Vec<u8>, quality: LabelQuality) -> Result<Self> {
        let mut m = Self::new(self.height, self.width, classes, quality, self.taxonomy_id.clone())?;
        m.ignore_value = self.ignore_value;
        Ok(m)
    }

    /// Fraction of commonly-valid pixels whose labels differ.
    pub fn disagreement(&self, other: &LabelMask) -> f64 {
        let (mut n, mut diff) = (0usize, 0usize);
        for (a, b) in self.classes.iter().zip(&other.classes) {
            if *a == self.ignore_value || *b == other.ignore_value {
                continue;
            }
            n += 1;
            diff += (a != b) as usize;
        }
        if n == 0 {
            0.0
        } else {
            diff as f64 / n as f64
        }
    }

    pub fn to_container(&self) -> Container {
        let mut meta = KvFile::new();
        meta.set("ignore_value", self.ignore_value);
        match self.quality {
            LabelQuality::Exact => meta.set("quality", "exact"),
            LabelQuality::Weak { corruption_rate } => {
                meta.set("quality", "weak");
                meta.set("corruption_rate", corruption_rate);
            }
        }
        Container {
            kind: Kind::Label,
            shape: vec![self.height, self.width],
            wavelengths: Vec::new(),
            gsd: 0.0,
            id: self.taxonomy_id.clone(),
            meta: meta.to_text(),
            payload: Payload::U8(self.classes.clone()),
        }
    }

    pub fn from_container(c: Container) -> Result<Self> {
        if c.kind != Kind::Label || c.shape.len() != 2 {
            return Err(invalid("container does not hold an H×W label mask"));
        }
        let meta = KvFile::parse(&c.meta)?;
        let quality = match meta.get("quality").unwrap_or("exact") {
            "exact" => LabelQuality::Exact,
            "weak" => LabelQuality::Weak { corruption_rate: meta.parsed_or("corruption_rate", 0.0)? },
            q => return Err(invalid(format!("unknown label quality `{q}`"))),
        };
        let classes = match c.payload {
            Payload::U8(v) => v,
            other => other.to_f64().into_iter().map(|v| v as u8).collect(),
        };
        let mut m = Self::new(c.shape[0], c.shape[1], classes, quality, c.id)?;
        m.ignore_value = meta.parsed_or("ignore_value", IGNORE_VALUE)?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = Container::read(path)?.expect_kind(Kind::Label, path)?;
        Self::from_container(c).map_err(|e| Error::Format { path: path.to_path_buf(), msg: e.to_string() })
    }
}

/// Band layout and label properties of one synthetic subset.
#[derive(Clone, Debug, PartialEq)]
pub struct SubsetSpec {
    pub id: String,
    pub wavelengths: Vec<f64>,
    pub gsd: f64,
    /// Multiplier applied to unit reflectance, mimicking the product's value range.
    pub scale: f64,
    pub exact: bool,
    pub noise_rate: f64,
    /// Catalogue concepts forming the class system, in class-id order.
    pub concepts: Vec<String>,
}

impl SubsetSpec {
    pub fn num_classes(&self) -> usize {
        self.concepts.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneSpec {
    pub patches_per_subset: usize,
    pub patch_size: usize,
    /// Every patch side must be a multiple of this (the encoder's total stride).
    pub patch_multiple: usize,
    pub subsets: Vec<SubsetSpec>,
    pub seed: u64,
}

pub const S2_WAVELENGTHS: [f64; 13] = [0.443, 0.490, 0.56, 0.665, 0.705, 0.740, 0.783, 0.842, 0.865, 0.940, 1.375, 1.61, 2.19];
pub const S2_NO_CIRRUS: [f64; 12] = [0.443, 0.490, 0.56, 0.665, 0.705, 0.740, 0.783, 0.842, 0.865, 0.940, 1.61, 2.19];
pub const L8_TOA: [f64; 11] = [0.443, 0.482, 0.561, 0.655, 0.865, 1.610, 2.200, 0.590, 1.373, 10.895, 12.005];
pub const L8_SR: [f64; 7] = [0.443, 0.482, 0.561, 0.655, 0.865, 1.610, 2.200];
pub const RGB: [f64; 3] = [0.665, 0.56, 0.49];
pub const RGBN: [f64; 4] = [0.655, 0.560, 0.480, 0.865];

impl SyntheticSceneSpec {
    /// Eight subsets mirroring the exact/weak and sensor mix of the original
    /// pretraining corpus. Noise rates are arbitrary placeholders.
    pub fn las_like(seed: u64) -> Self {
        let sub = |id: &str, wl: &[f64], gsd: f64, scale: f64, noise: f64, k: usize, offset: usize| {
            let names = concept_names();
            SubsetSpec {
                id: id.into(),
                wavelengths: wl.to_vec(),
                gsd,
                scale,
                exact: noise == 0.0,
                noise_rate: noise,
                concepts: (0..k).map(|i| names[(i + offset) % names.len()].to_string()).collect(),
            }
        };
        Self {
            patches_per_subset: 12,
            patch_size: 64,
            patch_multiple: 32,
            seed,
            subsets: vec![
                sub("oem", &RGB, 0.5, 255.0, 0.0, 8, 0),
                sub("den", &RGBN, 3.0, 3000.0, 0.0, 7, 2),
                sub("iran", &S2_WAVELENGTHS, 10.0, 10000.0, 0.1, 10, 4),
                sub("ghsl", &S2_WAVELENGTHS, 10.0, 10000.0, 0.2, 3, 3),
                sub("wc", &S2_NO_CIRRUS, 10.0, 10000.0, 0.3, 11, 1),
                sub("nlcd", &L8_TOA, 30.0, 1.0, 0.1, 14, 0),
                sub("usfs", &L8_SR, 30.0, 10000.0, 0.2, 9, 5),
                sub("sbtn", &L8_SR, 30.0, 10000.0, 0.3, 3, 7),
            ],
        }
    }

    /// Two 4-class subsets sharing one class system: exact RGB and 30%-weak Sentinel-2.
    pub fn smoke(seed: u64) -> Self {
        let concepts: Vec<String> = ["water", "tree", "building", "barren land"].iter().map(|s| s.to_string()).collect();
        Self {
            patches_per_subset: 60,
            patch_size: 32,
            patch_multiple: 16,
            seed,
            subsets: vec![
                SubsetSpec { id: "rgb_exact".into(), wavelengths: RGB.to_vec(), gsd: 0.5, scale: 255.0, exact: true, noise_rate: 0.0, concepts: concepts.clone() },
                SubsetSpec { id: "s2_weak".into(), wavelengths: S2_WAVELENGTHS.to_vec(), gsd: 10.0, scale: 10000.0, exact: false, noise_rate: 0.3, concepts },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.subsets.is_empty() {
            return bad("no subsets".into());
        }
        if self.patches_per_subset == 0 {
            return bad("patches_per_subset must be positive".into());
        }
        if self.patch_multiple == 0 || self.patch_size == 0 || self.patch_size % self.patch_multiple != 0 {
            return bad(format!("patch size {} is not divisible by {}", self.patch_size, self.patch_multiple));
        }
        let mut ids = std::collections::HashSet::new();
        for s in &self.subsets {
            if !ids.insert(&s.id) {
                return bad(format!("duplicate subset id `{}`", s.id));
            }
            if s.concepts.is_empty() {
                return bad(format!("subset `{}` has zero classes", s.id));
            }
            if s.concepts.len() > 254 {
                return bad(format!("subset `{}` has too many classes", s.id));
            }
            for c in &s.concepts {
                if concept(c).is_none() {
                    return bad(format!("subset `{}`: unknown class concept `{c}`", s.id));
                }
            }
            if s.wavelengths.is_empty() || s.wavelengths.iter().any(|w| !(*w > 0.0)) {
                return bad(format!("subset `{}` needs positive wavelengths", s.id));
            }
            if !(0.0..1.0).contains(&s.noise_rate) {
                return bad(format!("subset `{}` noise rate {} outside [0,1)", s.id, s.noise_rate));
            }
            if s.exact != (s.noise_rate == 0.0) {
                return bad(format!("subset `{}`: noise rate must be 0 exactly when the subset is exact", s.id));
            }
            if !s.exact && s.concepts.len() < 2 {
                return bad(format!("weak subset `{}` needs at least 2 classes", s.id));
            }
        }
        Ok(())
    }

    /// Reads the `key = value` scene description.
    ///
    /// ```text
    /// seed = 7
    /// patches_per_subset = 10
    /// patch_size = 64
    /// patch_multiple = 32
    /// subset.oem.bands = 0.665,0.56,0.49
    /// subset.oem.gsd = 0.5
    /// subset.oem.scale = 255
    /// subset.oem.noise_rate = 0
    /// subset.oem.classes = water,tree,building
    /// ```
    ///
    /// `subset.<id>.exact` defaults to `noise_rate == 0`. `subset.<id>.num_classes`
    /// may replace `classes` to take the first catalogue concepts.
    pub fn from_kv(kv: &KvFile) -> Result<Self> {
        let mut spec = Self {
            patches_per_subset: kv.parsed_or("patches_per_subset", 10)?,
            patch_size: kv.parsed_or("patch_size", 64)?,
            patch_multiple: kv.parsed_or("patch_multiple", 32)?,
            seed: kv.parsed_or("seed", 0)?,
            subsets: Vec::new(),
        };
        for id in kv.sections("subset") {
            let key = |f: &str| format!("subset.{id}.{f}");
            let wavelengths = kv.list::<f64>(&key("bands"))?.ok_or_else(|| missing(kv, &key("bands")))?;
            let noise_rate = kv.parsed_or(&key("noise_rate"), 0.0)?;
            let concepts = match kv.list::<String>(&key("classes"))? {
                Some(c) => c,
                None => {
                    let k: usize = kv.parsed(&key("num_classes"))?.ok_or_else(|| missing(kv, &key("classes")))?;
                    concept_names().iter().cycle().take(k).map(|s| s.to_string()).collect()
                }
            };
            spec.subsets.push(SubsetSpec {
                exact: kv.parsed_or(&key("exact"), noise_rate == 0.0)?,
                gsd: kv.parsed_or(&key("gsd"), 10.0)?,
                scale: kv.parsed_or(&key("scale"), 1.0)?,
                id,
                wavelengths,
                noise_rate,
                concepts,
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_kv(&self) -> KvFile {
        let mut kv = KvFile::new();
        kv.set("seed", self.seed);
        kv.set("patches_per_subset", self.patches_per_subset);
        kv.set("patch_size", self.patch_size);
        kv.set("patch_multiple", self.patch_multiple);
        for s in &self.subsets {
            let key = |f: &str| format!("subset.{}.{f}", s.id);
            kv.set(&key("bands"), crate::kv::join_list(&s.wavelengths));
            kv.set(&key("gsd"), s.gsd);
            kv.set(&key("scale"), s.scale);
            kv.set(&key("exact"), s.exact);
            kv.set(&key("noise_rate"), s.noise_rate);
            kv.set(&key("classes"), s.concepts.join(","));
        }
        kv
    }
}

fn missing(kv: &KvFile, key: &str) -> Error {
    let line = kv.entries().iter().rev().find(|e| key.starts_with(e.key.rsplit_once('.').map_or("", |p| p.0))).map_or(0, |e| e.line);
    Error::Parse { line, msg: format!("missing key `{key}`") }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_mismatched_wavelengths() {
        let px = Tensor::zeros(&[3, 4, 4]);
        assert!(MultispectralImage::new(px.clone(), vec![0.5, 0.6], 1.0, "s").is_err());
        assert!(MultispectralImage::new(px.clone(), vec![0.5, 0.0, 0.6], 1.0, "s").is_err());
        // non-monotone layouts are fine
        assert!(MultispectralImage::new(px, vec![0.665, 0.56, 0.49], 1.0, "s").is_ok());
    }

    #[test]
    fn weak_masks_need_a_rate() {
        assert!(LabelMask::new(1, 2, vec![0, 1], LabelQuality::Weak { corruption_rate: 0.0 }, "t").is_err());
        let m = LabelMask::new(1, 3, vec![0, 1, IGNORE_VALUE], LabelQuality::Exact, "t").unwrap();
        assert!(m.validate(2).is_ok());
        assert!(m.validate(1).is_err());
        assert_eq!(m.valid_count(), 2);
    }

    #[test]
    fn spec_validation() {
        let mut s = SyntheticSceneSpec::smoke(1);
        assert!(s.validate().is_ok());
        s.patch_size = 30;
        assert!(matches!(s.validate(), Err(Error::InvalidSpec(_))));
        let mut s = SyntheticSceneSpec::smoke(1);
        s.subsets[0].concepts.clear();
        assert!(s.validate().is_err());
        let mut s = SyntheticSceneSpec::smoke(1);
        s.subsets[1].exact = true;
        assert!(s.validate().is_err());
        assert_eq!(SyntheticSceneSpec::las_like(0).subsets.len(), 8);
        assert!(SyntheticSceneSpec::las_like(0).validate().is_ok());
    }

    #[test]
    fn spec_kv_round_trip() {
        let s = SyntheticSceneSpec::las_like(3);
        let back = SyntheticSceneSpec::from_kv(&KvFile::parse(&s.to_kv().to_text()).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn malformed_spec_reports_line() {
        let kv = KvFile::parse("seed = 1\npatch_size = big\n").unwrap();
        match SyntheticSceneSpec::from_kv(&kv) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }
}
