//! Face generators: noise → intermediate latent code → image.

mod stylegan;
mod toy;

use std::fmt;
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::image::{ImageRange, ImageTensor};

pub use stylegan::{write_random_stylegan2, StyleGan2, StyleGan2Config, STYLEGAN2_FORMAT};
pub use toy::{ToyGenerator, TOY_GENERATOR_FORMAT, TOY_LATENT_WIDTH, TOY_RESOLUTION};

pub const NOISE_DIM: usize = 512;
pub const LATENT_ROWS: usize = 18;
pub const LATENT_WIDTH: usize = 512;

/// Input noise `z`, length 512.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseVector(Vec<f64>);

impl NoiseVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != NOISE_DIM {
            return Err(Error::ShapeMismatch(format!(
                "noise vectors have length {NOISE_DIM}, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("noise vector".into()));
        }
        Ok(NoiseVector(values))
    }

    pub fn zeros() -> Self {
        NoiseVector(vec![0.0; NOISE_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Standard-normal noise, reproducible per seed.
pub fn sample_noise(seed: u64) -> NoiseVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    NoiseVector((0..NOISE_DIM).map(|_| StandardNormal.sample(&mut rng)).collect())
}

/// Intermediate latent code `w`: 18 rows. Pretrained generators use 512
/// columns, the toy generator 16.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Array2<f64>);

impl LatentCode {
    pub fn new(rows: Array2<f64>) -> Result<Self> {
        if rows.nrows() != LATENT_ROWS || rows.ncols() == 0 {
            return Err(Error::ShapeMismatch(format!(
                "latent codes have {LATENT_ROWS} rows, got {:?}",
                rows.dim()
            )));
        }
        if rows.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent code".into()));
        }
        Ok(LatentCode(rows))
    }

    /// Repeats one row into every row.
    pub fn broadcast(row: &[f64]) -> Result<Self> {
        let w = row.len();
        Self::new(Array2::from_shape_fn((LATENT_ROWS, w), |(_, j)| row[j]))
    }

    pub fn rows(&self) -> &Array2<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.0
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.dim()
    }

    /// Euclidean distance over all entries.
    pub fn distance(&self, other: &LatentCode) -> f64 {
        (&self.0 - &other.0).mapv(|v| v * v).sum().sqrt()
    }

    pub fn mean_squared_error(&self, other: &LatentCode) -> f64 {
        (&self.0 - &other.0).mapv(|v| v * v).mean().unwrap_or(0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Pretrained,
    Toy,
}

impl std::str::FromStr for GeneratorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrained" => Ok(GeneratorKind::Pretrained),
            "toy" => Ok(GeneratorKind::Toy),
            other => Err(Error::Config(format!("unknown generator kind `{other}`"))),
        }
    }
}

/// Network behind a [`GeneratorHandle`].
pub trait Synthesis: Send + Sync {
    fn resolution(&self) -> usize;
    fn latent_width(&self) -> usize;
    /// `z → w`, `18 × width`.
    fn map_noise(&self, z: &[f64]) -> Array2<f64>;
    /// `18 × width` latent on the tape → `1 × 3 × R × R` image in `[-1, 1]`.
    fn synthesize<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Var<'t>;
}

/// Loaded, immutable generator.
#[derive(Clone)]
pub struct GeneratorHandle {
    kind: GeneratorKind,
    checkpoint_id: String,
    net: Arc<dyn Synthesis>,
}

impl fmt::Debug for GeneratorHandle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("GeneratorHandle")
            .field("kind", &self.kind)
            .field("checkpoint_id", &self.checkpoint_id)
            .field("resolution", &self.net.resolution())
            .finish()
    }
}

impl GeneratorHandle {
    pub fn new(kind: GeneratorKind, checkpoint_id: String, net: Arc<dyn Synthesis>) -> Self {
        GeneratorHandle { kind, checkpoint_id, net }
    }

    /// Toy generator built directly from its seed, without a file.
    pub fn toy(seed: u64) -> Self {
        let g = ToyGenerator::from_seed(seed);
        let id = g.checkpoint_id();
        GeneratorHandle::new(GeneratorKind::Toy, id, Arc::new(g))
    }

    pub fn kind(&self) -> GeneratorKind {
        self.kind
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.checkpoint_id
    }

    pub fn output_resolution(&self) -> usize {
        self.net.resolution()
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        (LATENT_ROWS, self.net.latent_width())
    }

    pub fn check_latent(&self, w: &LatentCode) -> Result<()> {
        if w.shape() != self.latent_shape() {
            return Err(Error::ShapeMismatch(format!(
                "generator expects latent {:?}, got {:?}",
                self.latent_shape(),
                w.shape()
            )));
        }
        Ok(())
    }

    pub fn map_noise(&self, z: &NoiseVector) -> Result<LatentCode> {
        if z.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("noise vector".into()));
        }
        LatentCode::new(self.net.map_noise(&z.0))
    }

    /// Differentiable synthesis; `w` must be `18 × width`.
    pub fn synthesize_var<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Result<Var<'t>> {
        let shape = w.shape();
        if shape != [LATENT_ROWS, self.net.latent_width()] {
            return Err(Error::ShapeMismatch(format!(
                "generator expects latent {:?}, got {shape:?}",
                self.latent_shape()
            )));
        }
        Ok(self.net.synthesize(tape, w))
    }

    pub fn synthesize(&self, w: &LatentCode) -> Result<ImageTensor> {
        self.check_latent(w)?;
        let tape = Tape::new();
        let wv = tape.constant(w.rows().clone().into_dyn());
        let img = self.net.synthesize(&tape, wv);
        ImageTensor::from_nchw(&img.value(), ImageRange::SignedUnit)
    }
}

/// Loads a generator checkpoint (`*.safetensors` plus `*.manifest` sidecar).
pub fn load_generator(path: &Path, kind: GeneratorKind) -> Result<GeneratorHandle> {
    match kind {
        GeneratorKind::Toy => {
            let g = ToyGenerator::load(path)?;
            let id = g.checkpoint_id();
            Ok(GeneratorHandle::new(kind, id, Arc::new(g)))
        }
        GeneratorKind::Pretrained => {
            let (g, id) = StyleGan2::load(path)?;
            Ok(GeneratorHandle::new(kind, id, Arc::new(g)))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_is_seeded() {
        assert_eq!(sample_noise(0), sample_noise(0));
        assert_ne!(sample_noise(0), sample_noise(1));
        assert_eq!(sample_noise(5).as_slice().len(), NOISE_DIM);
    }

    #[test]
    fn noise_moments() {
        // 10,000 draws: per-coordinate mean and variance close to N(0, 1).
        let n = 10_000;
        let mut sum = vec![0.0; NOISE_DIM];
        let mut sq = vec![0.0; NOISE_DIM];
        for s in 0..n {
            for (j, v) in sample_noise(s as u64).as_slice().iter().enumerate() {
                sum[j] += v;
                sq[j] += v * v;
            }
        }
        for j in 0..NOISE_DIM {
            let mean = sum[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            assert!(mean.abs() <= 0.05, "coordinate {j} mean {mean}");
            assert!((var - 1.0).abs() <= 0.1, "coordinate {j} variance {var}");
        }
    }

    #[test]
    fn latent_shape_contract() {
        assert!(LatentCode::new(Array2::zeros((17, 16))).is_err());
        assert!(LatentCode::new(Array2::from_elem((18, 4), f64::NAN)).is_err());
        assert!(NoiseVector::new(vec![0.0; 3]).is_err());
        let b = LatentCode::broadcast(&[1.0, 2.0]).unwrap();
        assert_eq!(b.shape(), (18, 2));
    }

    #[test]
    fn handle_rejects_wrong_latent_shape() {
        let g = GeneratorHandle::toy(1234);
        let w = LatentCode::new(Array2::zeros((18, 512))).unwrap();
        assert!(matches!(g.synthesize(&w), Err(Error::ShapeMismatch(_))));
    }
}
