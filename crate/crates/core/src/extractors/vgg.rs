//! VGG-16 feature network (torchvision tensor names). Features are the
//! second fully connected layer's activations after ReLU.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureNet;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{expect_shape, ParamMap};
use crate::error::{Error, Result};
use crate::nn::{self, Bound};

const CONFIG: [usize; 18] = [64, 64, 0, 128, 128, 0, 256, 256, 256, 0, 512, 512, 512, 0, 512, 512, 512, 0];

struct ConvLayer {
    name: String,
    pool_after: bool,
}

pub struct Vgg16 {
    params: ParamMap,
    convs: Vec<ConvLayer>,
    feature_dim: usize,
}

/// `(tensor prefix, channels, pool_after)` per convolution.
fn layout(width_div: usize) -> Vec<(String, usize, bool)> {
    let mut out = Vec::new();
    let mut idx = 0;
    for (i, &c) in CONFIG.iter().enumerate() {
        if c == 0 {
            idx += 1;
            continue;
        }
        let pool = CONFIG.get(i + 1) == Some(&0);
        out.push((format!("features.{idx}"), (c / width_div).max(1), pool));
        idx += 2;
    }
    out
}

fn pooled_side(resolution: usize) -> usize {
    (0..5).fold(resolution, |s, _| s / 2)
}

impl Vgg16 {
    pub fn from_params(params: ParamMap, resolution: usize) -> Result<Self> {
        let get = |name: &str| {
            params
                .get(name)
                .cloned()
                .ok_or_else(|| Error::CorruptWeights(format!("missing tensor `{name}`")))
        };
        let side = pooled_side(resolution);
        if side == 0 {
            return Err(Error::Config(format!("VGG-16 needs input resolution ≥ 32, got {resolution}")));
        }
        let mut cin = 3;
        let mut convs = Vec::new();
        for (prefix, _, pool) in layout(1) {
            let w = get(&format!("{prefix}.weight"))?;
            let cout = w.shape()[0];
            expect_shape(&format!("{prefix}.weight"), &w, &[cout, cin, 3, 3])?;
            expect_shape(&format!("{prefix}.bias"), &*get(&format!("{prefix}.bias"))?, &[cout])?;
            convs.push(ConvLayer { name: prefix, pool_after: pool });
            cin = cout;
        }
        let fc6 = get("classifier.0.weight")?;
        let hidden = fc6.shape()[0];
        expect_shape("classifier.0.weight", &fc6, &[hidden, cin * side * side])?;
        expect_shape("classifier.0.bias", &*get("classifier.0.bias")?, &[hidden])?;
        let fc7 = get("classifier.3.weight")?;
        let feature_dim = fc7.shape()[0];
        expect_shape("classifier.3.weight", &fc7, &[feature_dim, hidden])?;
        expect_shape("classifier.3.bias", &*get("classifier.3.bias")?, &[feature_dim])?;
        Ok(Vgg16 { params, convs, feature_dim })
    }
}

impl FeatureNet for Vgg16 {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let b = Bound::bind(tape, &self.params, false);
        let mut h = x;
        for layer in &self.convs {
            h = h
                .conv2d(b.get(&format!("{}.weight", layer.name)), 1, 1)
                .add_channel_bias(b.get(&format!("{}.bias", layer.name)))
                .relu();
            if layer.pool_after {
                h = h.max_pool2d(2, 2, 0);
            }
        }
        h.flatten()
            .linear(b.get("classifier.0.weight"), Some(b.get("classifier.0.bias")))
            .relu()
            .linear(b.get("classifier.3.weight"), Some(b.get("classifier.3.bias")))
            .relu()
    }
}

/// Randomly initialized VGG-16 weights with channel widths divided by
/// `width_div`; used for fixtures and tests.
pub fn random_vgg16_params(seed: u64, width_div: usize, hidden: usize, resolution: usize) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamMap::new();
    let mut cin = 3;
    for (prefix, cout, _) in layout(width_div) {
        p.insert(format!("{prefix}.weight"), nn::scaled_normal(&mut rng, &[cout, cin, 3, 3], cin * 9, 2f64.sqrt()));
        p.insert(format!("{prefix}.bias"), nn::filled(&[cout], 0.01));
        cin = cout;
    }
    let side = pooled_side(resolution);
    let flat = cin * side * side;
    p.insert("classifier.0.weight".into(), nn::scaled_normal(&mut rng, &[hidden, flat], flat, 2f64.sqrt()));
    p.insert("classifier.0.bias".into(), nn::filled(&[hidden], 0.01));
    p.insert("classifier.3.weight".into(), nn::scaled_normal(&mut rng, &[hidden, hidden], hidden, 2f64.sqrt()));
    p.insert("classifier.3.bias".into(), nn::filled(&[hidden], 0.01));
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn torchvision_indices() {
        let idx: Vec<String> = layout(1).into_iter().map(|(p, _, _)| p).collect();
        let want = [0, 2, 5, 7, 10, 12, 14, 17, 19, 21, 24, 26, 28];
        assert_eq!(idx, want.iter().map(|i| format!("features.{i}")).collect::<Vec<_>>());
    }

    #[test]
    fn forward_shape_and_validation() {
        let p = random_vgg16_params(3, 16, 24, 32);
        let net = Vgg16::from_params(p.clone(), 32).unwrap();
        assert_eq!(net.feature_dim(), 24);
        let tape = Tape::new();
        let x = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 3, 32, 32]), 0.3));
        assert_eq!(net.forward(&tape, x).shape(), vec![1, 24]);
        assert!(matches!(Vgg16::from_params(p.clone(), 64), Err(Error::CorruptWeights(_))));
        let mut broken = p;
        broken.remove("features.5.bias");
        assert!(matches!(Vgg16::from_params(broken, 32), Err(Error::CorruptWeights(_))));
    }
}
