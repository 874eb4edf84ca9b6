use super::{Dataset, MultispectralImage};
use crate::error::{Error, Result};

/// Per-band mean and population standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct BandStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl BandStats {
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a MultispectralImage>) -> Result<Self> {
        let mut sum: Vec<f64> = Vec::new();
        let mut count = 0usize;
        let images: Vec<&MultispectralImage> = images.into_iter().collect();
        let Some(first) = images.first() else {
            return Err(Error::Empty("band statistics need at least one image".into()));
        };
        let c = first.dims().0;
        sum.resize(c, 0.0);
        for im in &images {
            let (ci, h, w) = im.dims();
            if ci != c {
                return Err(crate::error::shape(format!("{ci}-band image among {c}-band images")));
            }
            for (b, s) in sum.iter_mut().enumerate() {
                *s += im.pixels().data()[b * h * w..(b + 1) * h * w].iter().sum::<f64>();
            }
            count += h * w;
        }
        if count == 0 {
            return Err(Error::Empty("band statistics over zero pixels".into()));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
        // second pass keeps constant bands at exactly zero variance
        let mut sq = vec![0.0; c];
        for im in &images {
            let (_, h, w) = im.dims();
            for (b, q) in sq.iter_mut().enumerate() {
                *q += im.pixels().data()[b * h * w..(b + 1) * h * w].iter().map(|v| (v - mean[b]).powi(2)).sum::<f64>();
            }
        }
        let std = sq.iter().map(|q| (q / count as f64).sqrt()).collect();
        Ok(Self { mean, std })
    }
}

/// Statistics for every subset, in subset order.
pub fn compute_band_stats(dataset: &Dataset) -> Result<Vec<(String, BandStats)>> {
    if dataset.subsets.is_empty() {
        return Err(Error::Empty("dataset has no subsets".into()));
    }
    dataset
        .subsets
        .iter()
        .map(|s| {
            if s.samples.is_empty() {
                return Err(Error::Empty(format!("subset `{}` has no images", s.id())));
            }
            Ok((s.id().to_string(), BandStats::from_images(s.samples.iter().map(|p| &p.image))?))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn img(c: usize, h: usize, w: usize, v: Vec<f64>) -> MultispectralImage {
        MultispectralImage::new(Tensor::new(&[c, h, w], v), vec![0.5; c], 1.0, "s").unwrap()
    }

    #[test]
    fn constant_band() {
        let s = BandStats::from_images([&img(1, 2, 2, vec![5.0; 4])]).unwrap();
        assert_eq!(s.mean, vec![5.0]);
        assert_eq!(s.std, vec![0.0]);
    }

    #[test]
    fn population_std() {
        let s = BandStats::from_images([&img(1, 1, 2, vec![0.0, 2.0])]).unwrap();
        assert_eq!(s.mean, vec![1.0]);
        assert_eq!(s.std, vec![1.0]);
    }

    #[test]
    fn pooled_over_images() {
        let a = img(2, 1, 1, vec![1.0, 10.0]);
        let b = img(2, 1, 1, vec![3.0, 10.0]);
        let s = BandStats::from_images([&a, &b]).unwrap();
        assert_eq!(s.mean, vec![2.0, 10.0]);
        assert_eq!(s.std, vec![1.0, 0.0]);
    }

    #[test]
    fn empty_rejected() {
        assert!(matches!(BandStats::from_images(std::iter::empty()), Err(Error::Empty(_))));
        let d = Dataset { spec: crate::data_synth::SyntheticSceneSpec::smoke(0), subsets: vec![] };
        assert!(compute_band_stats(&d).is_err());
    }
}
