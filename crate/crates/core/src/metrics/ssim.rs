use ndarray::{Array2, Zip};

use super::{filter_valid, gaussian_1d, luma_pair, same_dims};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

/// Mean SSIM of two unit-range luminance planes (dynamic range 1).
pub fn ssim_gray(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_dims(a, b)?;
    let (h, w) = a.dim();
    if h < WINDOW || w < WINDOW {
        return Err(Error::DegenerateImage(format!("SSIM needs at least {WINDOW}x{WINDOW}, got {h}x{w}")));
    }
    let g = gaussian_1d(WINDOW, SIGMA);
    let mu_a = filter_valid(a, &g);
    let mu_b = filter_valid(b, &g);
    let saa = filter_valid(&(a * a), &g);
    let sbb = filter_valid(&(b * b), &g);
    let sab = filter_valid(&(a * b), &g);
    let mut total = 0.0;
    Zip::from(&mu_a)
        .and(&mu_b)
        .and(&saa)
        .and(&sbb)
        .and(&sab)
        .for_each(|&ma, &mb, &xx, &yy, &xy| {
            let va = xx - ma * ma;
            let vb = yy - mb * mb;
            let cov = xy - ma * mb;
            total += ((2.0 * ma * mb + C1) * (2.0 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
        });
    Ok(total / mu_a.len() as f64)
}

pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (la, lb) = luma_pair(a, b)?;
    ssim_gray(&la, &lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_symmetry_and_size_checks() {
        let a = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 5 + j * 3) % 11) as f64 / 10.0);
        let b = Array2::from_shape_fn((16, 16), |(i, j)| ((i * 2 + j * 7) % 13) as f64 / 12.0);
        assert!((ssim_gray(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(ssim_gray(&a, &b).unwrap(), ssim_gray(&b, &a).unwrap());
        assert!(ssim_gray(&a, &Array2::zeros((16, 15))).is_err());
        assert!(ssim_gray(&Array2::zeros((10, 10)), &Array2::zeros((10, 10))).is_err());
    }
}
