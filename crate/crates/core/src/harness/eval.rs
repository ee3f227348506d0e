//! SIFID and diversity report over a set of samples.

use crate::error::{Error, Result};
use crate::image_tensor::ImageTensor;
use crate::metrics::{lpips_diversity, sifid, DiversityReport, FeatureExtractor, LpipsLike};
use crate::par;
use crate::resample::resize_bicubic;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TapReport {
    pub mean: f64,
    pub per_sample: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub sifid: BTreeMap<String, TapReport>,
    /// Absent for a single sample.
    pub diversity: Option<DiversityReport>,
    /// Samples were bicubically resized to the training image size.
    pub resized: bool,
}

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,tap,samples,value\n");
        for (tap, r) in &self.sifid {
            s.push_str(&format!("sifid,{tap},{},{:.10}\n", self.samples, r.mean));
        }
        if let Some(d) = &self.diversity {
            s.push_str(&format!("lpips_diversity,all,{},{:.10}\n", d.samples, d.mean));
        }
        s
    }
}

fn to_size(img: &ImageTensor, size: (usize, usize)) -> ImageTensor {
    if img.size() == size {
        img.clone()
    } else {
        ImageTensor::new(resize_bicubic(img.tensor(), size.0, size.1).clamp(-1.0, 1.0)).expect("rgb shape")
    }
}

pub fn evaluate(train: &ImageTensor, samples: &[ImageTensor], extractor: &dyn FeatureExtractor) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::invalid("metrics", "no samples to evaluate"));
    }
    let size = train.size();
    let resized = samples.iter().any(|s| s.size() != size);
    let samples: Vec<ImageTensor> = samples.iter().map(|s| to_size(s, size)).collect();
    let mut out = BTreeMap::new();
    for tap in extractor.tap_names() {
        let per_sample = par::map_range_bounded(samples.len(), par::threads(), |i| sifid(train, &samples[i], extractor, &tap))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        let mean = per_sample.iter().sum::<f64>() / per_sample.len() as f64;
        out.insert(tap, TapReport { mean, per_sample });
    }
    let diversity = if samples.len() >= 2 {
        Some(lpips_diversity(&samples, &LpipsLike { extractor }, par::threads())?)
    } else {
        None
    };
    Ok(EvalReport {
        samples: samples.len(),
        sifid: out,
        diversity,
        resized,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::RandomFeatureNet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identical_samples_score_zero() {
        let x = ImageTensor::random(24, 24, &mut ChaCha8Rng::seed_from_u64(0));
        let net = RandomFeatureNet::desk();
        let r = evaluate(&x, &[x.clone(), x.clone(), x.clone()], &net).unwrap();
        assert!(r.sifid.values().all(|t| t.mean.abs() < 1e-9));
        let d = r.diversity.clone().unwrap();
        assert_eq!((d.pairs, d.mean), (3, 0.0));
        assert!(!r.resized);
        assert!(r.to_csv().starts_with("metric,tap,samples,value\nsifid,deep,3,"));
    }

    #[test]
    fn other_sizes_are_resized() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = ImageTensor::random(24, 24, &mut rng);
        let y = ImageTensor::random(32, 32, &mut rng);
        let r = evaluate(&x, &[y], &RandomFeatureNet::desk()).unwrap();
        assert!(r.resized && r.diversity.is_none());
        assert!(evaluate(&x, &[], &RandomFeatureNet::desk()).is_err());
    }
}
