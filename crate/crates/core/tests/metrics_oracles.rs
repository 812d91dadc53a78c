use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sketch2face::metrics::{fsim_gray, phase_congruency, ssim_gray, vif_gray};

fn textured(seed: u64, h: usize, w: usize) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (a, b): (f64, f64) = (rng.random_range(0.1..0.5), rng.random_range(0.1..0.5));
    Array2::from_shape_fn((h, w), |(i, j)| {
        (0.5 + 0.3 * (a * i as f64).sin() * (b * j as f64).cos() + 0.05 * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0)
    })
}

fn noisy(x: &Array2<f64>, sigma: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    x.mapv(|v| (v + sigma * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0))
}

fn gauss2d(n: usize, sd: f64) -> Array2<f64> {
    let c = (n as f64 - 1.0) / 2.0;
    let k = Array2::from_shape_fn((n, n), |(i, j)| {
        let (y, x) = (i as f64 - c, j as f64 - c);
        (-(x * x + y * y) / (2.0 * sd * sd)).exp()
    });
    let s = k.sum();
    k / s
}

fn filter2_valid(x: &Array2<f64>, k: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let n = k.nrows();
    Array2::from_shape_fn((h + 1 - n, w + 1 - n), |(i, j)| {
        let mut s = 0.0;
        for a in 0..n {
            for b in 0..n {
                s += k[[a, b]] * x[[i + a, j + b]];
            }
        }
        s
    })
}

/// Pixel-domain VIF with direct 2-D windows.
fn vif_oracle(r: &Array2<f64>, d: &Array2<f64>) -> f64 {
    let (mut r, mut d) = (r * 255.0, d * 255.0);
    let sn = 2.0;
    let tiny = 1e-10;
    let (mut num, mut den) = (0.0, 0.0);
    for scale in 1..=4u32 {
        let n = (1usize << (5 - scale)) + 1;
        let k = gauss2d(n, n as f64 / 5.0);
        if scale > 1 {
            r = filter2_valid(&r, &k).slice(ndarray::s![..;2, ..;2]).to_owned();
            d = filter2_valid(&d, &k).slice(ndarray::s![..;2, ..;2]).to_owned();
        }
        let m1 = filter2_valid(&r, &k);
        let m2 = filter2_valid(&d, &k);
        let s11 = filter2_valid(&(&r * &r), &k);
        let s22 = filter2_valid(&(&d * &d), &k);
        let s12 = filter2_valid(&(&r * &d), &k);
        for idx in ndarray::indices(m1.dim()) {
            let mut v1 = (s11[idx] - m1[idx] * m1[idx]).max(0.0);
            let v2 = (s22[idx] - m2[idx] * m2[idx]).max(0.0);
            let c12 = s12[idx] - m1[idx] * m2[idx];
            let mut g = c12 / (v1 + tiny);
            let mut sv = v2 - g * c12;
            if v1 < tiny {
                g = 0.0;
                sv = v2;
                v1 = 0.0;
            }
            if v2 < tiny {
                g = 0.0;
                sv = 0.0;
            }
            if g < 0.0 {
                sv = v2;
                g = 0.0;
            }
            sv = sv.max(tiny);
            num += (1.0 + g * g * v1 / (sv + sn)).log10();
            den += (1.0 + v1 / sn).log10();
        }
    }
    num / den
}

#[test]
fn vif_matches_the_direct_oracle() {
    for seed in 0..3 {
        let r = textured(seed, 64, 72);
        let d = noisy(&r, 0.1, seed + 10);
        let got = vif_gray(&r, &d).unwrap();
        let want = vif_oracle(&r, &d);
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }
}

#[test]
fn noise_lowers_every_score() {
    let r = textured(4, 48, 48);
    let mut last = (1.0 + 1e-9, 1.0 + 1e-9, 1.0 + 1e-9);
    for sigma in [0.05, 0.15, 0.3] {
        let d = noisy(&r, sigma, 99);
        let now = (ssim_gray(&r, &d).unwrap(), fsim_gray(&r, &d).unwrap(), vif_gray(&r, &d).unwrap());
        assert!(now.0 < last.0 && now.1 < last.1 && now.2 < last.2, "sigma {sigma}: {now:?} vs {last:?}");
        last = now;
    }
}

#[test]
fn fsim_is_symmetric_and_nearly_transpose_invariant() {
    let a = textured(5, 40, 40);
    let b = noisy(&a, 0.1, 6);
    let ab = fsim_gray(&a, &b).unwrap();
    assert!((ab - fsim_gray(&b, &a).unwrap()).abs() < 1e-12);
    let t = fsim_gray(&a.t().to_owned(), &b.t().to_owned()).unwrap();
    assert!((ab - t).abs() < 1e-4, "{ab} vs {t}");
}

#[test]
fn phase_congruency_peaks_on_a_step_edge() {
    let img = Array2::from_shape_fn((32, 32), |(_, j)| if j < 16 { 50.0 } else { 200.0 });
    let pc = phase_congruency(&img);
    let edge = pc[[16, 15]].max(pc[[16, 16]]);
    assert!(edge > 0.5, "edge {edge}");
    assert!(pc[[16, 4]] < 0.5 * edge);
    assert!(pc.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
}
