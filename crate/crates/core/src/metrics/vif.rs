use ndarray::{s, Array2, Zip};

use super::{filter_valid, gaussian_1d, luma_pair, same_dims};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

const SIGMA_NSQ: f64 = 2.0;
const TINY: f64 = 1e-10;

/// Pixel-domain VIF over four scales, on the 0–255 scale. `reference` comes
/// first; the measure is not symmetric.
pub fn vif_gray(reference: &Array2<f64>, distorted: &Array2<f64>) -> Result<f64> {
    same_dims(reference, distorted)?;
    let mut r = reference.mapv(|v| v * 255.0);
    let mut d = distorted.mapv(|v| v * 255.0);
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let win = gaussian_1d(n, n as f64 / 5.0);
        if scale > 1 {
            r = filter_valid(&r, &win).slice(s![..;2, ..;2]).to_owned();
            d = filter_valid(&d, &win).slice(s![..;2, ..;2]).to_owned();
        }
        let mu1 = filter_valid(&r, &win);
        let mu2 = filter_valid(&d, &win);
        let s11 = filter_valid(&(&r * &r), &win);
        let s22 = filter_valid(&(&d * &d), &win);
        let s12 = filter_valid(&(&r * &d), &win);
        Zip::from(&mu1)
            .and(&mu2)
            .and(&s11)
            .and(&s22)
            .and(&s12)
            .for_each(|&m1, &m2, &a, &b, &c| {
                let mut sigma1_sq = (a - m1 * m1).max(0.0);
                let sigma2_sq = (b - m2 * m2).max(0.0);
                let sigma12 = c - m1 * m2;
                let mut g = sigma12 / (sigma1_sq + TINY);
                let mut sv_sq = sigma2_sq - g * sigma12;
                if sigma1_sq < TINY {
                    g = 0.0;
                    sv_sq = sigma2_sq;
                    sigma1_sq = 0.0;
                }
                if sigma2_sq < TINY {
                    g = 0.0;
                    sv_sq = 0.0;
                }
                if g < 0.0 {
                    sv_sq = sigma2_sq;
                    g = 0.0;
                }
                if sv_sq <= TINY {
                    sv_sq = TINY;
                }
                num += (1.0 + g * g * sigma1_sq / (sv_sq + SIGMA_NSQ)).log10();
                den += (1.0 + sigma1_sq / SIGMA_NSQ).log10();
            });
    }
    if den <= 0.0 {
        return Err(Error::DegenerateImage("VIF reference has no local variance".into()));
    }
    Ok(num / den)
}

pub fn vif(reference: &ImageTensor, distorted: &ImageTensor) -> Result<f64> {
    let (a, b) = luma_pair(reference, distorted)?;
    vif_gray(&a, &b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_and_constant_reference() {
        let a = Array2::from_shape_fn((32, 32), |(i, j)| ((i * 5 + j * 3) % 11) as f64 / 10.0);
        assert!((vif_gray(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        let c = Array2::from_elem((32, 32), 0.5);
        assert!(matches!(vif_gray(&c, &a), Err(Error::DegenerateImage(_))));
    }
}
