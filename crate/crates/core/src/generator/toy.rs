//! Seeded toy decoder for desk-scale tests.
//!
//! Latent `18 × 16`; rows are averaged in three groups of six and each group
//! modulates one upsampling stage (4 → 8 → 16 → 32). All activations are
//! `tanh`, so the map from latent to pixels is smooth.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Synthesis, LATENT_ROWS, NOISE_DIM};
use crate::autodiff::{Tape, Var};
use crate::checkpoint::{self, expect_shape, Manifest, ParamMap};
use crate::error::Result;
use crate::nn::{self, Bound};

pub const TOY_GENERATOR_FORMAT: &str = "sketch2face-toy-generator";
pub const TOY_RESOLUTION: usize = 32;
pub const TOY_LATENT_WIDTH: usize = 16;

const MAP_HIDDEN: usize = 64;
const BASE_CHANNELS: usize = 16;
const STAGE_CHANNELS: [usize; 3] = [16, 12, 8];
const GROUP_ROWS: usize = LATENT_ROWS / 3;

pub struct ToyGenerator {
    params: ParamMap,
    seed: u64,
    id: String,
}

impl ToyGenerator {
    pub fn from_seed(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamMap::new();
        let lw = TOY_LATENT_WIDTH;
        p.insert("map.fc1.weight".into(), nn::scaled_normal(&mut rng, &[MAP_HIDDEN, NOISE_DIM], NOISE_DIM, 1.0));
        p.insert("map.fc1.bias".into(), Arc::new(nn::normal_tensor(&mut rng, &[MAP_HIDDEN], 0.1)));
        p.insert("map.fc2.weight".into(), nn::scaled_normal(&mut rng, &[lw, MAP_HIDDEN], MAP_HIDDEN, 1.0));
        p.insert("map.fc2.bias".into(), Arc::new(nn::normal_tensor(&mut rng, &[lw], 0.1)));
        let base = BASE_CHANNELS * 16;
        p.insert("syn.input.weight".into(), nn::scaled_normal(&mut rng, &[base, lw], lw, 1.5));
        p.insert("syn.input.bias".into(), Arc::new(nn::normal_tensor(&mut rng, &[base], 0.2)));
        let mut cin = BASE_CHANNELS;
        for (g, &cout) in STAGE_CHANNELS.iter().enumerate() {
            p.insert(format!("syn.stage{g}.conv.weight"), nn::scaled_normal(&mut rng, &[cout, cin, 3, 3], cin * 9, 1.5));
            p.insert(format!("syn.stage{g}.conv.bias"), Arc::new(nn::normal_tensor(&mut rng, &[cout], 0.1)));
            p.insert(format!("syn.stage{g}.style.weight"), nn::scaled_normal(&mut rng, &[cout, lw], lw, 0.5));
            p.insert(format!("syn.stage{g}.style.bias"), nn::filled(&[cout], 1.0));
            cin = cout;
        }
        p.insert("syn.to_rgb.weight".into(), nn::scaled_normal(&mut rng, &[3, cin, 1, 1], cin, 1.5));
        p.insert("syn.to_rgb.bias".into(), nn::zeros(&[3]));
        let blob = checkpoint::encode_tensors(&p).expect("toy tensors serialize");
        ToyGenerator {
            id: checkpoint::checkpoint_id(TOY_GENERATOR_FORMAT, &blob),
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

    pub fn manifest(&self) -> Manifest {
        let mut m = Manifest::new(TOY_GENERATOR_FORMAT, 1);
        m.set("resolution", TOY_RESOLUTION);
        m.set("latent_rows", LATENT_ROWS);
        m.set("latent_width", TOY_LATENT_WIDTH);
        m.set("noise_dim", NOISE_DIM);
        m.set("seed", self.seed);
        m
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        checkpoint::write_checkpoint(path, &self.manifest(), &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read_checkpoint(path, TOY_GENERATOR_FORMAT, 1)?;
        let m = &ck.manifest;
        for (key, want) in [
            ("resolution", TOY_RESOLUTION),
            ("latent_rows", LATENT_ROWS),
            ("latent_width", TOY_LATENT_WIDTH),
        ] {
            let got: usize = m.parse_key(key)?;
            if got != want {
                return Err(crate::Error::VersionMismatch(format!(
                    "toy generator `{key}` is {got}, expected {want}"
                )));
            }
        }
        let reference = ToyGenerator::from_seed(0);
        for (name, t) in reference.params.iter() {
            expect_shape(name, &*ck.tensor(name)?, t.shape())?;
        }
        Ok(ToyGenerator {
            params: ck.tensors,
            seed: m.parse_or("seed", 0)?,
            id: ck.id,
        })
    }

    fn group_mean<'t>(tape: &'t Tape, w: Var<'t>, g: usize) -> Var<'t> {
        let mut avg = Array2::<f64>::zeros((1, LATENT_ROWS));
        for r in g * GROUP_ROWS..(g + 1) * GROUP_ROWS {
            avg[[0, r]] = 1.0 / GROUP_ROWS as f64;
        }
        tape.constant(avg.into_dyn()).matmul(w)
    }
}

impl Synthesis for ToyGenerator {
    fn resolution(&self) -> usize {
        TOY_RESOLUTION
    }

    fn latent_width(&self) -> usize {
        TOY_LATENT_WIDTH
    }

    fn map_noise(&self, z: &[f64]) -> Array2<f64> {
        let p = &self.params;
        let z = Array1::from(z.to_vec());
        let norm = (z.mapv(|v| v * v).mean().unwrap() + 1e-8).sqrt();
        let z = z / norm;
        let w1 = p["map.fc1.weight"].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b1 = p["map.fc1.bias"].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let h = (w1.dot(&z) + b1).mapv(f64::tanh);
        let w2 = p["map.fc2.weight"].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let b2 = p["map.fc2.bias"].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let row = w2.dot(&h) + b2;
        Array2::from_shape_fn((LATENT_ROWS, TOY_LATENT_WIDTH), |(_, j)| row[j])
    }

    fn synthesize<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t> {
        let b = Bound::bind(tape, &self.params, false);
        let styles: Vec<Var<'t>> = (0..3).map(|g| Self::group_mean(tape, w, g)).collect();
        let mut x = styles[0]
            .linear(b.get("syn.input.weight"), Some(b.get("syn.input.bias")))
            .tanh()
            .reshape(&[1, BASE_CHANNELS, 4, 4]);
        for (g, style) in styles.iter().enumerate() {
            let modulation = style.linear(
                b.get(&format!("syn.stage{g}.style.weight")),
                Some(b.get(&format!("syn.stage{g}.style.bias"))),
            );
            x = x
                .upsample_nearest(2)
                .conv2d(b.get(&format!("syn.stage{g}.conv.weight")), 1, 1)
                .add_channel_bias(b.get(&format!("syn.stage{g}.conv.bias")))
                .scale_channels(modulation)
                .tanh();
        }
        x.conv2d(b.get("syn.to_rgb.weight"), 1, 0)
            .add_channel_bias(b.get("syn.to_rgb.bias"))
            .tanh()
    }
}
