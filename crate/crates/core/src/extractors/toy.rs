//! Seeded toy extractor: three stride-2 `tanh` convolutions and a linear
//! head, 32×32 input, 64 features.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::FeatureNet;
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, expect_shape, Manifest, ParamMap};
use crate::error::Result;
use crate::nn::{self, Bound};

pub const TOY_EXTRACTOR_FORMAT: &str = "sketch2face-toy-extractor";
pub const TOY_EXTRACTOR_SEED: u64 = 1234;
pub(super) const TOY_FEATURE_DIM: usize = 64;

const CHANNELS: [usize; 4] = [3, 8, 16, 16];

pub struct ToyExtractor {
    params: ParamMap,
    seed: u64,
    id: String,
}

impl ToyExtractor {
    /// Weights come from stream 1 of the seed so they differ from a toy
    /// generator built from the same seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let mut p = ParamMap::new();
        for l in 0..3 {
            let (cin, cout) = (CHANNELS[l], CHANNELS[l + 1]);
            p.insert(format!("conv{l}.weight"), nn::scaled_normal(&mut rng, &[cout, cin, 3, 3], cin * 9, 1.5));
            p.insert(format!("conv{l}.bias"), Arc::new(nn::normal_tensor(&mut rng, &[cout], 0.1)));
        }
        let flat = CHANNELS[3] * 16;
        p.insert("fc.weight".into(), nn::scaled_normal(&mut rng, &[TOY_FEATURE_DIM, flat], flat, 1.0));
        p.insert("fc.bias".into(), Arc::new(nn::normal_tensor(&mut rng, &[TOY_FEATURE_DIM], 0.1)));
        let blob = checkpoint::encode_tensors(&p).expect("toy tensors serialize");
        ToyExtractor {
            id: checkpoint::checkpoint_id(TOY_EXTRACTOR_FORMAT, &blob),
            params: p,
            seed,
        }
    }

    pub fn checkpoint_id(&self) -> String {
        self.id.clone()
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut m = Manifest::new(TOY_EXTRACTOR_FORMAT, 1);
        m.set("feature_dim", TOY_FEATURE_DIM);
        m.set("input_resolution", 32);
        m.set("seed", self.seed);
        checkpoint::write_checkpoint(path, &m, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read_checkpoint(path, TOY_EXTRACTOR_FORMAT, 1)?;
        let reference = ToyExtractor::from_seed(0);
        for (name, t) in reference.params.iter() {
            expect_shape(name, &*ck.tensor(name)?, t.shape())?;
        }
        Ok(ToyExtractor {
            seed: ck.manifest.parse_or("seed", 0)?,
            params: ck.tensors,
            id: ck.id,
        })
    }
}

impl FeatureNet for ToyExtractor {
    fn feature_dim(&self) -> usize {
        TOY_FEATURE_DIM
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Var<'t> {
        let b = Bound::bind(tape, &self.params, false);
        let mut h = x;
        for l in 0..3 {
            h = h
                .conv2d(b.get(&format!("conv{l}.weight")), 2, 1)
                .add_channel_bias(b.get(&format!("conv{l}.bias")))
                .tanh();
        }
        h.flatten().linear(b.get("fc.weight"), Some(b.get("fc.bias")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("toy_extractor.safetensors");
        let t = ToyExtractor::from_seed(TOY_EXTRACTOR_SEED);
        let id = t.save(&path).unwrap();
        assert_eq!(id, t.checkpoint_id());
        let back = ToyExtractor::load(&path).unwrap();
        assert_eq!(back.params, t.params);
        assert_eq!(back.checkpoint_id(), id);
    }
}
