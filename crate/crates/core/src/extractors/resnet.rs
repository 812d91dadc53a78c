//! ResNet-50 feature network (torchvision tensor names, inference-mode batch
//! normalization). Features are the 2048-d global average pool.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureNet;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{expect_shape, ParamMap};
use crate::error::{Error, Result};
use crate::nn::{self, Bound, Mode};

const BLOCKS: [usize; 4] = [3, 4, 6, 3];
const PLANES: [usize; 4] = [64, 128, 256, 512];
const BN_EPS: f64 = 1e-5;

pub struct ResNet50 {
    params: ParamMap,
    /// Converted Caffe models put the block stride in the first 1×1 conv.
    stride_in_1x1: bool,
    downsample: Vec<Vec<bool>>,
    feature_dim: usize,
}

struct Checker<'a> {
    params: &'a ParamMap,
}

impl Checker<'_> {
    fn conv(&self, name: &str, cin: usize, k: usize) -> Result<usize> {
        let key = format!("{name}.weight");
        let w = self
            .params
            .get(&key)
            .ok_or_else(|| Error::CorruptWeights(format!("missing tensor `{key}`")))?;
        let cout = w.shape().first().copied().unwrap_or(0);
        expect_shape(&key, w, &[cout, cin, k, k])?;
        Ok(cout)
    }

    fn bn(&self, name: &str, c: usize) -> Result<()> {
        for part in ["weight", "bias", "running_mean", "running_var"] {
            let key = format!("{name}.{part}");
            let t = self
                .params
                .get(&key)
                .ok_or_else(|| Error::CorruptWeights(format!("missing tensor `{key}`")))?;
            expect_shape(&key, t, &[c])?;
        }
        Ok(())
    }
}

impl ResNet50 {
    pub fn from_params(params: ParamMap, stride_in_1x1: bool) -> Result<Self> {
        let ck = Checker { params: &params };
        let mut c = ck.conv("conv1", 3, 7)?;
        ck.bn("bn1", c)?;
        let mut downsample = Vec::new();
        for (l, &n) in BLOCKS.iter().enumerate() {
            let mut flags = Vec::new();
            for blk in 0..n {
                let p = format!("layer{}.{blk}", l + 1);
                let planes = ck.conv(&format!("{p}.conv1"), c, 1)?;
                ck.bn(&format!("{p}.bn1"), planes)?;
                let mid = ck.conv(&format!("{p}.conv2"), planes, 3)?;
                ck.bn(&format!("{p}.bn2"), mid)?;
                let out = ck.conv(&format!("{p}.conv3"), mid, 1)?;
                ck.bn(&format!("{p}.bn3"), out)?;
                let has_ds = params.contains_key(&format!("{p}.downsample.0.weight"));
                if has_ds {
                    let d = ck.conv(&format!("{p}.downsample.0"), c, 1)?;
                    if d != out {
                        return Err(Error::CorruptWeights(format!("{p}.downsample width {d} vs {out}")));
                    }
                    ck.bn(&format!("{p}.downsample.1"), out)?;
                } else if out != c || (blk == 0 && l > 0) {
                    return Err(Error::CorruptWeights(format!("{p} needs a downsample branch")));
                }
                flags.push(has_ds);
                c = out;
            }
            downsample.push(flags);
        }
        Ok(ResNet50 { params, stride_in_1x1, downsample, feature_dim: c })
    }

    fn bn<'t>(&self, x: Var<'t>, b: &Bound<'t>, prefix: &str) -> Var<'t> {
        nn::batch_norm(x, b, &self.params, prefix, Mode::Eval, BN_EPS, &mut Vec::new())
    }
}

impl FeatureNet for ResNet50 {
    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let b = Bound::bind(tape, &self.params, false);
        let mut h = self.bn(x.conv2d(b.get("conv1.weight"), 2, 3), &b, "bn1").relu().max_pool2d(3, 2, 1);
        for (l, flags) in self.downsample.iter().enumerate() {
            for (blk, &has_ds) in flags.iter().enumerate() {
                let p = format!("layer{}.{blk}", l + 1);
                let stride = if blk == 0 && l > 0 { 2 } else { 1 };
                let (s1, s2) = if self.stride_in_1x1 { (stride, 1) } else { (1, stride) };
                let w = |n: &str| b.get(&format!("{p}.{n}.weight"));
                let main = self.bn(h.conv2d(w("conv1"), s1, 0), &b, &format!("{p}.bn1")).relu();
                let main = self.bn(main.conv2d(w("conv2"), s2, 1), &b, &format!("{p}.bn2")).relu();
                let main = self.bn(main.conv2d(w("conv3"), 1, 0), &b, &format!("{p}.bn3"));
                let skip = if has_ds {
                    self.bn(h.conv2d(w("downsample.0"), stride, 0), &b, &format!("{p}.downsample.1"))
                } else {
                    h
                };
                h = main.add(skip).relu();
            }
        }
        h.global_avg_pool()
    }
}

/// Randomly initialized ResNet-50 weights with widths divided by
/// `width_div`; used for fixtures and tests.
pub fn random_resnet50_params(seed: u64, width_div: usize) -> ParamMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = ParamMap::new();
    let mut conv = |p: &mut ParamMap, name: &str, cout: usize, cin: usize, k: usize| {
        p.insert(format!("{name}.weight"), nn::scaled_normal(&mut rng, &[cout, cin, k, k], cin * k * k, 2f64.sqrt()));
        nn::insert_batch_norm(p, &name.replace("conv", "bn").replace("downsample.0", "downsample.1"), cout);
    };
    let stem = (64 / width_div).max(1);
    conv(&mut p, "conv1", stem, 3, 7);
    let mut c = stem;
    for (l, (&n, &planes)) in BLOCKS.iter().zip(&PLANES).enumerate() {
        let planes = (planes / width_div).max(1);
        for blk in 0..n {
            let pre = format!("layer{}.{blk}", l + 1);
            conv(&mut p, &format!("{pre}.conv1"), planes, c, 1);
            conv(&mut p, &format!("{pre}.conv2"), planes, planes, 3);
            conv(&mut p, &format!("{pre}.conv3"), planes * 4, planes, 1);
            if blk == 0 {
                conv(&mut p, &format!("{pre}.downsample.0"), planes * 4, c, 1);
            }
            c = planes * 4;
        }
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_shape_and_validation() {
        let p = random_resnet50_params(5, 16);
        assert!(p.contains_key("layer2.0.downsample.1.running_var"));
        assert!(p.contains_key("layer1.2.bn3.weight"));
        let net = ResNet50::from_params(p.clone(), true).unwrap();
        assert_eq!(net.feature_dim(), 128);
        let tape = Tape::new();
        let x = tape.constant(ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1, 3, 32, 32]), 0.1));
        let f = net.forward(&tape, x);
        assert_eq!(f.shape(), vec![1, 128]);
        assert!(f.value().iter().all(|v| v.is_finite()));
        let mut broken = p;
        broken.remove("layer3.1.bn2.running_mean");
        assert!(matches!(ResNet50::from_params(broken, true), Err(Error::CorruptWeights(_))));
    }
}
