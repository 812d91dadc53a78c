//! Frozen outputs of the seeded toy networks. Any change to seeding, layer
//! order or initialization shows up here first.

use approx::assert_relative_eq;
use sketch2face::extractors::Extractor;
use sketch2face::generator::{sample_noise, ToyGenerator};
use sketch2face::GeneratorHandle;

#[test]
fn toy_checkpoint_ids_are_frozen() {
    assert_eq!(GeneratorHandle::toy(1234).checkpoint_id(), "sketch2face-toy-generator-f3e80051c964");
    assert_eq!(Extractor::toy().weights_id(), Some("sketch2face-toy-extractor-4d4492cb29d6"));
}

#[test]
fn toy_mapping_matches_a_loop_oracle() {
    let g = ToyGenerator::from_seed(1234);
    let p = g.params();
    let z = sample_noise(7);
    let z = z.as_slice();
    let rms = (z.iter().map(|v| v * v).sum::<f64>() / z.len() as f64 + 1e-8).sqrt();
    let (w1, b1) = (&p["map.fc1.weight"], &p["map.fc1.bias"]);
    let (w2, b2) = (&p["map.fc2.weight"], &p["map.fc2.bias"]);
    let mut h = vec![0.0; b1.len()];
    for (i, hi) in h.iter_mut().enumerate() {
        let mut s = b1[[i]];
        for (j, zj) in z.iter().enumerate() {
            s += w1[[i, j]] * zj / rms;
        }
        *hi = s.tanh();
    }
    let w = GeneratorHandle::toy(1234).map_noise(&sample_noise(7)).unwrap();
    for k in 0..b2.len() {
        let mut s = b2[[k]];
        for (i, hi) in h.iter().enumerate() {
            s += w2[[k, i]] * hi;
        }
        for r in 0..18 {
            assert_relative_eq!(w.rows()[[r, k]], s, max_relative = 1e-12);
        }
    }
    assert_relative_eq!(w.rows()[[0, 0]], -0.672471534645373, max_relative = 1e-12);
}

#[test]
fn toy_synthesis_and_features_are_frozen() {
    let gen = GeneratorHandle::toy(1234);
    let img = gen.synthesize(&gen.map_noise(&sample_noise(7)).unwrap()).unwrap();
    let p = img.pixels();
    assert_eq!(p.dim(), (32, 32, 3));
    assert_relative_eq!(p[[0, 0, 0]], 0.4228758818498374, max_relative = 1e-10);
    assert_relative_eq!(p[[16, 16, 1]], -0.731054865233773, max_relative = 1e-10);
    assert_relative_eq!(p[[31, 5, 2]], 0.19737436673179798, max_relative = 1e-10);
    assert_relative_eq!(p.sum(), -55.59217027084625, max_relative = 1e-10);
    let f = Extractor::toy().extract(&img).unwrap();
    assert_eq!(f.dim(), 64);
    assert_relative_eq!(f.values()[0], -0.7090860835575274, max_relative = 1e-10);
    assert_relative_eq!(f.values()[63], 0.46484857959666603, max_relative = 1e-10);
    assert_relative_eq!(f.values().iter().map(|v| v * v).sum::<f64>(), 15.518307334174546, max_relative = 1e-10);
}
