//! On-disk layout:
//!
//! ```text
//! <root>/manifest.txt
//! <root>/<subset>/taxonomy.txt
//! <root>/<subset>/images/0000.lsb
//! <root>/<subset>/labels/0000.lsb
//! <root>/<subset>/.clean/0000.lsb
//! ```

use std::fs;
use std::path::Path;

use super::{compute_band_stats, Dataset, LabelMask, MultispectralImage, Sample, Subset, SyntheticSceneSpec};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvFile};
use crate::taxonomy::ClassTaxonomy;

pub const MANIFEST_FILE: &str = "manifest.txt";

fn file_name(i: usize) -> String {
    format!("{i:04}.lsb")
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<()> {
    let stats = compute_band_stats(dataset)?;
    let mut manifest = dataset.spec.to_kv();
    for (sub, (_, st)) in dataset.subsets.iter().zip(&stats) {
        let dir = root.join(sub.id());
        for d in ["images", "labels", ".clean"] {
            fs::create_dir_all(dir.join(d))?;
        }
        fs::write(dir.join("taxonomy.txt"), sub.taxonomy.to_text())?;
        for (i, s) in sub.samples.iter().enumerate() {
            s.image.save(&dir.join("images").join(file_name(i)))?;
            s.label.save(&dir.join("labels").join(file_name(i)))?;
            s.clean.save(&dir.join(".clean").join(file_name(i)))?;
        }
        let key = |f: &str| format!("subset.{}.{f}", sub.id());
        manifest.set(&key("count"), sub.samples.len());
        manifest.set(&key("taxonomy"), format!("{}/taxonomy.txt", sub.id()));
        manifest.set(&key("band_mean"), join_list(&st.mean));
        manifest.set(&key("band_std"), join_list(&st.std));
    }
    fs::write(root.join(MANIFEST_FILE), manifest.to_text())?;
    Ok(())
}

pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::Format { path: manifest_path.clone(), msg: e.to_string() })?;
    let kv = KvFile::parse(&text).map_err(|e| Error::Format { path: manifest_path.clone(), msg: e.to_string() })?;
    let spec = SyntheticSceneSpec::from_kv(&kv)?;
    let mut subsets = Vec::new();
    for sub in &spec.subsets {
        let dir = root.join(&sub.id);
        let tax_path = dir.join("taxonomy.txt");
        let taxonomy = ClassTaxonomy::parse(&sub.id, &fs::read_to_string(&tax_path)?).map_err(|e| Error::Format { path: tax_path, msg: e.to_string() })?;
        let count: usize = kv.parsed(&format!("subset.{}.count", sub.id))?.unwrap_or(spec.patches_per_subset);
        let mut samples = Vec::with_capacity(count);
        for i in 0..count {
            let image = MultispectralImage::load(&dir.join("images").join(file_name(i)))?;
            let label = LabelMask::load(&dir.join("labels").join(file_name(i)))?;
            let clean_path = dir.join(".clean").join(file_name(i));
            let clean = if clean_path.exists() { LabelMask::load(&clean_path)? } else { label.clone() };
            samples.push(Sample { image, label, clean });
        }
        subsets.push(Subset { spec: sub.clone(), taxonomy, samples });
    }
    Ok(Dataset { spec, subsets })
}
