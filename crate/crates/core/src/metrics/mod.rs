//! Full-reference image quality (SSIM, FSIM, VIF) and rank-1 identification.
//!
//! Quality metrics work on the luminance plane (0.299/0.587/0.114).

mod fsim;
mod rank;
mod ssim;
mod vif;

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::image::ImageTensor;

pub use fsim::{fsim, fsim_gray, phase_congruency};
pub use rank::{rank1_accuracy, rank1_from_features, Distance, ProbeResult, RecognitionReport};
pub use ssim::{ssim, ssim_gray};
pub use vif::{vif, vif_gray};

/// Normalized 1-D Gaussian of odd length `n`.
pub(crate) fn gaussian_1d(n: usize, sigma: f64) -> Vec<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - c;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Separable correlation keeping only fully covered positions.
pub(crate) fn filter_valid(x: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let n = k.len();
    let (h, w) = x.dim();
    if h < n || w < n {
        return Array2::zeros((h.saturating_sub(n - 1), w.saturating_sub(n - 1)));
    }
    let (oh, ow) = (h - n + 1, w - n + 1);
    let rows = Array2::from_shape_fn((h, ow), |(i, j)| (0..n).map(|t| k[t] * x[[i, j + t]]).sum::<f64>());
    Array2::from_shape_fn((oh, ow), |(i, j)| (0..n).map(|t| k[t] * rows[[i + t, j]]).sum::<f64>())
}

pub(crate) fn same_dims(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("image sizes {:?} vs {:?}", a.dim(), b.dim())));
    }
    Ok(())
}

fn luma_pair(a: &ImageTensor, b: &ImageTensor) -> Result<(Array2<f64>, Array2<f64>)> {
    let (la, lb) = (a.luminance()?, b.luminance()?);
    same_dims(&la, &lb)?;
    Ok((la, lb))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IqaRow {
    pub name: String,
    pub ssim: f64,
    pub fsim: f64,
    pub vif: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IqaReport {
    pub rows: Vec<IqaRow>,
    pub mean_ssim: f64,
    pub mean_fsim: f64,
    pub mean_vif: f64,
}

/// All three metrics for `(name, reference, distorted)` triples.
pub fn iqa_report(pairs: &[(String, ImageTensor, ImageTensor)]) -> Result<IqaReport> {
    if pairs.is_empty() {
        return Err(Error::Precondition("no image pairs to evaluate".into()));
    }
    let rows: Vec<IqaRow> = pairs
        .par_iter()
        .map(|(name, r, d)| {
            let (a, b) = luma_pair(r, d)?;
            Ok(IqaRow {
                name: name.clone(),
                ssim: ssim_gray(&a, &b)?,
                fsim: fsim_gray(&a, &b)?,
                vif: vif_gray(&a, &b)?,
            })
        })
        .collect::<Result<_>>()?;
    let n = rows.len() as f64;
    let mean = |f: fn(&IqaRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    Ok(IqaReport {
        mean_ssim: mean(|r| r.ssim),
        mean_fsim: mean(|r| r.fsim),
        mean_vif: mean(|r| r.vif),
        rows,
    })
}

impl IqaReport {
    /// Per-pair CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(e.to_string()))?;
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
        }
        w.flush()?;
        Ok(())
    }

    /// One-row summary table: `method,SSIM,FSIM,VIF`.
    pub fn summary_table(&self, method: &str) -> String {
        format!(
            "method,SSIM,FSIM,VIF\n{method},{:.4},{:.4},{:.4}\n",
            self.mean_ssim, self.mean_fsim, self.mean_vif
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_normalized_and_symmetric() {
        let g = gaussian_1d(11, 1.5);
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        for i in 0..11 {
            assert_eq!(g[i], g[10 - i]);
        }
    }

    #[test]
    fn valid_filter_shapes() {
        let x = Array2::from_shape_fn((12, 20), |(i, j)| (i + j) as f64);
        assert_eq!(filter_valid(&x, &gaussian_1d(5, 1.0)).dim(), (8, 16));
        assert_eq!(filter_valid(&x, &gaussian_1d(17, 3.4)).dim(), (0, 4));
        let c = Array2::from_elem((9, 9), 3.0);
        assert!(filter_valid(&c, &gaussian_1d(3, 0.6)).iter().all(|v| (v - 3.0).abs() < 1e-12));
    }
}
