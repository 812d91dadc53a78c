use std::collections::HashSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::{Extractor, FeatureVector};
use crate::image::ImageTensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Distance {
    #[default]
    Euclidean,
    Cosine,
}

impl Distance {
    pub fn between(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub probe: String,
    pub matched: String,
    pub distance: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RecognitionReport {
    pub extractor_id: String,
    pub distance: Distance,
    pub accuracy: f64,
    pub probes: Vec<ProbeResult>,
}

/// Nearest-gallery identification over precomputed feature rows. The first
/// gallery entry wins exact ties.
pub fn rank1_from_features(
    extractor_id: &str,
    gallery: &[(String, Vec<f64>)],
    probes: &[(String, Vec<f64>)],
    distance: Distance,
) -> Result<RecognitionReport> {
    if gallery.is_empty() || probes.is_empty() {
        return Err(Error::Precondition("empty gallery or probe set".into()));
    }
    let mut ids = HashSet::new();
    for (id, f) in gallery {
        if !ids.insert(id.as_str()) {
            return Err(Error::Duplicate(format!("gallery identity {id}")));
        }
        if f.len() != gallery[0].1.len() {
            return Err(Error::ShapeMismatch(format!("gallery feature {id} has dim {}", f.len())));
        }
    }
    let dim = gallery[0].1.len();
    let mut results = Vec::with_capacity(probes.len());
    for (pid, pf) in probes {
        if !ids.contains(pid.as_str()) {
            return Err(Error::Unknown(format!("probe identity {pid} not in gallery")));
        }
        if pf.len() != dim {
            return Err(Error::ShapeMismatch(format!("probe feature {pid} has dim {}, gallery {dim}", pf.len())));
        }
        let mut best = (0, f64::INFINITY);
        for (g, (_, gf)) in gallery.iter().enumerate() {
            let d = distance.between(pf, gf);
            if d < best.1 {
                best = (g, d);
            }
        }
        let matched = gallery[best.0].0.clone();
        results.push(ProbeResult { correct: &matched == pid, probe: pid.clone(), matched, distance: best.1 });
    }
    let accuracy = results.iter().filter(|r| r.correct).count() as f64 / results.len() as f64;
    Ok(RecognitionReport { extractor_id: extractor_id.to_string(), distance, accuracy, probes: results })
}

/// Rank-1 accuracy of `probes` against `gallery` in the extractor's feature space.
pub fn rank1_accuracy(
    gallery: &[(String, ImageTensor)],
    probes: &[(String, ImageTensor)],
    extractor: &Extractor,
    distance: Distance,
) -> Result<RecognitionReport> {
    let feats = |set: &[(String, ImageTensor)]| -> Result<Vec<(String, Vec<f64>)>> {
        set.par_iter()
            .map(|(id, img)| extractor.extract(img).map(|f: FeatureVector| (id.clone(), f.values().to_vec())))
            .collect()
    };
    rank1_from_features(extractor.id(), &feats(gallery)?, &feats(probes)?, distance)
}
