use std::f64::consts::PI;

use ndarray::{Array2, Zip};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::{luma_pair, same_dims};
use crate::error::{Error, Result};
use crate::image::ImageTensor;

const NSCALE: usize = 4;
const NORIENT: usize = 4;
const MIN_WAVELENGTH: f64 = 6.0;
const MULT: f64 = 2.0;
const SIGMA_ON_F: f64 = 0.55;
const D_THETA_ON_SIGMA: f64 = 1.2;
const K: f64 = 2.0;
const EPSILON: f64 = 1e-4;
const T1: f64 = 0.85;
const T2: f64 = 160.0;

fn fft2(x: &mut Array2<Complex64>, inverse: bool) {
    let (h, w) = x.dim();
    let mut planner = FftPlanner::new();
    let (fr, fc) = if inverse {
        (planner.plan_fft_inverse(w), planner.plan_fft_inverse(h))
    } else {
        (planner.plan_fft_forward(w), planner.plan_fft_forward(h))
    };
    for mut row in x.rows_mut() {
        let mut buf = row.to_vec();
        fr.process(&mut buf);
        row.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    for mut col in x.columns_mut() {
        let mut buf = col.to_vec();
        fc.process(&mut buf);
        col.iter_mut().zip(buf).for_each(|(d, s)| *d = s);
    }
    if inverse {
        let n = (h * w) as f64;
        x.mapv_inplace(|v| v / n);
    }
}

/// Normalized frequency coordinates, already moved to FFT order.
fn freq_range(n: usize) -> Vec<f64> {
    let centred: Vec<f64> = if n % 2 == 1 {
        let d = (n as f64 - 1.0).max(1.0);
        (0..n).map(|i| (i as f64 - (n as f64 - 1.0) / 2.0) / d).collect()
    } else {
        (0..n).map(|i| (i as f64 - n as f64 / 2.0) / n as f64).collect()
    };
    (0..n).map(|i| centred[(i + n / 2) % n]).collect()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Phase congruency map of a 0–255 luminance plane (log-Gabor bank,
/// 4 scales × 4 orientations, noise compensated).
pub fn phase_congruency(im: &Array2<f64>) -> Array2<f64> {
    let (rows, cols) = im.dim();
    let xr = freq_range(cols);
    let yr = freq_range(rows);
    let mut radius = Array2::from_shape_fn((rows, cols), |(i, j)| (xr[j] * xr[j] + yr[i] * yr[i]).sqrt());
    let theta = Array2::from_shape_fn((rows, cols), |(i, j)| (-yr[i]).atan2(xr[j]));
    let lp = radius.mapv(|r| 1.0 / (1.0 + (r / 0.45).powi(30)));
    radius[[0, 0]] = 1.0;

    let log_gabor: Vec<Array2<f64>> = (0..NSCALE)
        .map(|s| {
            let fo = 1.0 / (MIN_WAVELENGTH * MULT.powi(s as i32));
            let denom = 2.0 * SIGMA_ON_F.ln().powi(2);
            let mut g = Zip::from(&radius).and(&lp).map_collect(|&r, &l| (-(r / fo).ln().powi(2) / denom).exp() * l);
            g[[0, 0]] = 0.0;
            g
        })
        .collect();
    let theta_sigma = PI / NORIENT as f64 / D_THETA_ON_SIGMA;

    let mut spectrum = im.mapv(|v| Complex64::new(v, 0.0));
    fft2(&mut spectrum, false);
    let size_sqrt = ((rows * cols) as f64).sqrt();

    let mut energy_all = Array2::<f64>::zeros((rows, cols));
    let mut an_all = Array2::<f64>::zeros((rows, cols));
    for o in 0..NORIENT {
        let angl = o as f64 * PI / NORIENT as f64;
        let (sa, ca) = angl.sin_cos();
        let spread = theta.mapv(|t| {
            let (st, ct) = t.sin_cos();
            let ds = st * ca - ct * sa;
            let dc = ct * ca + st * sa;
            let dt = ds.atan2(dc).abs();
            (-dt * dt / (2.0 * theta_sigma * theta_sigma)).exp()
        });
        let mut sum_e = Array2::<f64>::zeros((rows, cols));
        let mut sum_o = Array2::<f64>::zeros((rows, cols));
        let mut sum_an = Array2::<f64>::zeros((rows, cols));
        let mut eo = Vec::with_capacity(NSCALE);
        let mut ifft_filters = Vec::with_capacity(NSCALE);
        let mut em_n = 0.0;
        for (s, lg) in log_gabor.iter().enumerate() {
            let filter = lg * &spread;
            let mut f = filter.mapv(|v| Complex64::new(v, 0.0));
            fft2(&mut f, true);
            ifft_filters.push(f.mapv(|c| c.re * size_sqrt));
            let mut resp = Zip::from(&spectrum).and(&filter).map_collect(|&c, &g| c * g);
            fft2(&mut resp, true);
            Zip::from(&mut sum_an).and(&mut sum_e).and(&mut sum_o).and(&resp).for_each(|a, e, od, c| {
                *a += c.norm();
                *e += c.re;
                *od += c.im;
            });
            if s == 0 {
                em_n = filter.iter().map(|v| v * v).sum();
            }
            eo.push(resp);
        }
        let mut energy = Array2::<f64>::zeros((rows, cols));
        Zip::indexed(&mut energy).for_each(|ix, en| {
            let x_energy = (sum_e[ix].powi(2) + sum_o[ix].powi(2)).sqrt() + EPSILON;
            let me = sum_e[ix] / x_energy;
            let mo = sum_o[ix] / x_energy;
            for r in &eo {
                let (e, od) = (r[ix].re, r[ix].im);
                *en += e * me + od * mo - (e * mo - od * me).abs();
            }
        });
        let median_e2n = median(eo[0].iter().map(|c| c.norm_sqr()).collect());
        let mean_e2n = -median_e2n / 0.5f64.ln();
        let noise_power = mean_e2n / em_n;
        let sum_an2: f64 = ifft_filters.iter().map(|f| f.iter().map(|v| v * v).sum::<f64>()).sum();
        let mut sum_aiaj = 0.0;
        for si in 0..NSCALE {
            for sj in si + 1..NSCALE {
                sum_aiaj += (&ifft_filters[si] * &ifft_filters[sj]).sum();
            }
        }
        let est_noise_energy2 = 2.0 * noise_power * sum_an2 + 4.0 * noise_power * sum_aiaj;
        let tau = (est_noise_energy2 / 2.0).sqrt();
        let est_noise = tau * (PI / 2.0).sqrt();
        let est_noise_sigma = ((2.0 - PI / 2.0) * tau * tau).sqrt();
        let t = (est_noise + K * est_noise_sigma) / 1.7;
        energy_all.zip_mut_with(&energy, |a, &e| *a += (e - t).max(0.0));
        an_all += &sum_an;
    }
    Zip::from(&energy_all).and(&an_all).map_collect(|&e, &a| if a > 0.0 { e / a } else { 0.0 })
}

/// Zero-padded 2-D convolution cropped to the input size.
fn conv2_same(x: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let (kh, kw) = k.dim();
    let (oy, ox) = (kh / 2, kw / 2);
    Array2::from_shape_fn((h, w), |(i, j)| {
        let mut acc = 0.0;
        for a in 0..kh {
            for b in 0..kw {
                let (yi, xj) = ((i + oy) as isize - a as isize, (j + ox) as isize - b as isize);
                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < w {
                    acc += k[[a, b]] * x[[yi as usize, xj as usize]];
                }
            }
        }
        acc
    })
}

fn gradient_magnitude(y: &Array2<f64>) -> Array2<f64> {
    let dx = ndarray::array![[3.0, 0.0, -3.0], [10.0, 0.0, -10.0], [3.0, 0.0, -3.0]] / 16.0;
    let dy = dx.t().to_owned();
    let gx = conv2_same(y, &dx);
    let gy = conv2_same(y, &dy);
    Zip::from(&gx).and(&gy).map_collect(|a, b| (a * a + b * b).sqrt())
}

/// Box-filter then subsample so the short side is about 256 pixels.
fn downsample(y: &Array2<f64>) -> Array2<f64> {
    let (h, w) = y.dim();
    let f = ((h.min(w) as f64 / 256.0).round() as usize).max(1);
    if f == 1 {
        return y.clone();
    }
    let avg = Array2::from_elem((f, f), 1.0 / (f * f) as f64);
    let smooth = conv2_same(y, &avg);
    smooth.slice(ndarray::s![..;f, ..;f]).to_owned()
}

/// FSIM of two unit-range luminance planes.
pub fn fsim_gray(a: &Array2<f64>, b: &Array2<f64>) -> Result<f64> {
    same_dims(a, b)?;
    if a.is_empty() {
        return Err(Error::DegenerateImage("FSIM of an empty image".into()));
    }
    let y1 = downsample(&a.mapv(|v| v * 255.0));
    let y2 = downsample(&b.mapv(|v| v * 255.0));
    let pc1 = phase_congruency(&y1);
    let pc2 = phase_congruency(&y2);
    let g1 = gradient_magnitude(&y1);
    let g2 = gradient_magnitude(&y2);
    let (mut num, mut den) = (0.0, 0.0);
    Zip::from(&pc1).and(&pc2).and(&g1).and(&g2).for_each(|&p1, &p2, &m1, &m2| {
        let pc_sim = (2.0 * p1 * p2 + T1) / (p1 * p1 + p2 * p2 + T1);
        let g_sim = (2.0 * m1 * m2 + T2) / (m1 * m1 + m2 * m2 + T2);
        let pcm = p1.max(p2);
        num += g_sim * pc_sim * pcm;
        den += pcm;
    });
    if den <= 0.0 {
        return Err(Error::DegenerateImage("FSIM: no phase congruency in either image".into()));
    }
    Ok(num / den)
}

pub fn fsim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    let (la, lb) = luma_pair(a, b)?;
    fsim_gray(&la, &lb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pattern(h: usize, w: usize, k: usize) -> Array2<f64> {
        Array2::from_shape_fn((h, w), |(i, j)| (((i * k + j * 3) % 17) as f64 / 16.0 + ((i as f64) * 0.4).sin() * 0.2).clamp(0.0, 1.0))
    }

    #[test]
    fn freq_range_matches_ifftshifted_grid() {
        assert_eq!(freq_range(4), vec![0.0, 0.25, -0.5, -0.25]);
        assert_eq!(freq_range(5), vec![0.0, 0.25, 0.5, -0.5, -0.25]);
    }

    #[test]
    fn fft_round_trip() {
        let x = pattern(6, 9, 5);
        let mut c = x.mapv(|v| Complex64::new(v, 0.0));
        fft2(&mut c, false);
        assert!((c[[0, 0]].re - x.sum()).abs() < 1e-9);
        fft2(&mut c, true);
        Zip::from(&c).and(&x).for_each(|c, x| assert!((c.re - x).abs() < 1e-12 && c.im.abs() < 1e-12));
    }

    #[test]
    fn identity_symmetry_range() {
        let a = pattern(24, 20, 5);
        let b = pattern(24, 20, 7);
        assert!((fsim_gray(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let ab = fsim_gray(&a, &b).unwrap();
        assert_eq!(ab, fsim_gray(&b, &a).unwrap());
        assert!((0.0..=1.0).contains(&ab));
        assert!(fsim_gray(&a, &pattern(20, 24, 5)).is_err());
    }

    #[test]
    fn phase_congruency_is_bounded() {
        let pc = phase_congruency(&pattern(32, 32, 5).mapv(|v| v * 255.0));
        assert!(pc.iter().all(|&v| (0.0..=1.0 + 1e-9).contains(&v)));
        assert!(pc.iter().any(|&v| v > 0.0));
    }

    #[test]
    fn downsample_factor() {
        assert_eq!(downsample(&Array2::zeros((300, 700))).dim(), (300, 700));
        assert_eq!(downsample(&Array2::zeros((400, 800))).dim(), (200, 400));
        assert_eq!(downsample(&Array2::zeros((401, 801))).dim(), (201, 401));
    }
}
