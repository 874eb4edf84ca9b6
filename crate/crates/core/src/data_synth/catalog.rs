//! Land-cover concepts used to populate synthetic class systems.
//!
//! Reflectance of a concept at wavelength `λ` (µm) is
//! `base + amp · exp(-(ln λ - ln peak)² / (2 width²))`.

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Concept {
    pub name: &'static str,
    /// Name-text variants; the first equals `name`.
    pub variants: &'static [&'static str],
    pub color: [u8; 3],
    pub base: f64,
    pub peak: f64,
    pub amp: f64,
    pub width: f64,
}

impl Concept {
    pub fn reflectance(&self, wavelength: f64) -> f64 {
        let z = (wavelength.ln() - self.peak.ln()) / self.width;
        self.base + self.amp * (-0.5 * z * z).exp()
    }

    pub fn spectrum(&self, wavelengths: &[f64]) -> Vec<f64> {
        wavelengths.iter().map(|&w| self.reflectance(w)).collect()
    }
}

macro_rules! concept {
    ($name:literal, [$($v:literal),*], $color:expr, $base:expr, $peak:expr, $amp:expr, $width:expr) => {
        Concept { name: $name, variants: &[$name, $($v),*], color: $color, base: $base, peak: $peak, amp: $amp, width: $width }
    };
}

pub const CONCEPTS: [Concept; 16] = [
    concept!("water", ["open water", "lake, reservoir, river and ocean"], [0, 69, 255], 0.03, 0.45, 0.08, 0.2),
    concept!("tree", ["forest", "tree cover"], [0, 100, 0], 0.03, 0.90, 0.40, 0.15),
    concept!("grass", ["grassland", "herbaceous vegetation"], [170, 255, 100], 0.05, 0.56, 0.12, 0.12),
    concept!("cropland", ["cultivated land", "agricultural field"], [240, 150, 255], 0.10, 0.62, 0.10, 0.30),
    concept!("building", ["built-up area", "urban structure"], [220, 0, 0], 0.25, 1.60, 0.10, 0.50),
    concept!("road", ["paved surface", "impervious road"], [110, 110, 110], 0.10, 0.45, 0.10, 0.30),
    concept!("barren land", ["bare ground", "sparse vegetation"], [180, 150, 100], 0.12, 2.00, 0.35, 0.60),
    concept!("snow", ["permanent snow", "snowfield"], [240, 240, 255], 0.75, 0.50, 0.10, 0.40),
    concept!("wetland", ["marsh", "herbaceous wetland"], [0, 150, 160], 0.06, 0.75, 0.15, 0.20),
    concept!("shrub", ["shrubland", "scrub"], [255, 187, 34], 0.07, 0.80, 0.22, 0.25),
    concept!("bare rock", ["rock outcrop", "exposed rock"], [90, 80, 70], 0.20, 0.90, 0.15, 0.40),
    concept!("cloud", ["cloud cover", "haze"], [200, 200, 200], 0.60, 1.00, 0.20, 0.80),
    concept!("sand", ["beach", "dune"], [250, 230, 160], 0.30, 1.20, 0.25, 0.50),
    concept!("moss", ["moss and lichen", "lichen"], [140, 160, 60], 0.04, 0.55, 0.18, 0.10),
    concept!("mangrove", ["mangrove forest", "mangrove swamp"], [0, 207, 117], 0.01, 0.70, 0.20, 0.08),
    concept!("ice", ["glacier", "sea ice"], [150, 220, 255], 0.50, 0.45, 0.30, 0.30),
];

pub fn concept(name: &str) -> Option<&'static Concept> {
    CONCEPTS.iter().find(|c| c.name == name)
}

pub fn concept_names() -> Vec<&'static str> {
    CONCEPTS.iter().map(|c| c.name).collect()
}
