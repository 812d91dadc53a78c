//! Faceness: ground-truth oracles, scored image datasets and the HOGFD
//! regressor behind the manifold-preservation loss.

mod hogfd;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::f2w::record_noise;
use crate::generator::{GeneratorHandle, LatentCode};
use crate::image::ImageTensor;

pub use hogfd::{train_hogfd, HogfdConfig, HogfdModel, HOGFD_FORMAT};

pub const SCORED_DATASET_FORMAT: &str = "sketch2face-faceness-dataset";

#[derive(Clone, Copy, Debug, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct FacenessScore(f64);

impl FacenessScore {
    pub fn new(v: f64) -> Result<Self> {
        if !v.is_finite() {
            return Err(Error::NonFinite("faceness score".into()));
        }
        Ok(FacenessScore(v))
    }

    /// Oracle label; must be non-negative.
    pub fn ground_truth(v: f64) -> Result<Self> {
        if v < 0.0 {
            return Err(Error::Oracle(format!("negative ground-truth score {v}")));
        }
        Self::new(v)
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// Non-differentiable labeler working on the 8-bit grayscale image.
pub trait FacenessOracle: Send + Sync {
    fn name(&self) -> String;
    fn score_gray(&self, gray: &Array2<u8>) -> Result<f64>;
}

/// Oracle score of an image.
pub fn hog_faceness(oracle: &dyn FacenessOracle, img: &ImageTensor) -> Result<FacenessScore> {
    let gray = img.to_gray8()?;
    FacenessScore::ground_truth(oracle.score_gray(&gray)?)
}

/// Toy stand-in for the HOG detector: `2 · exp(−8 · TV)` where TV is the
/// mean absolute difference between 4-neighbours of the gray image in
/// `[0, 1]`. Smooth images score near 2, noisy ones near 0.
#[derive(Clone, Copy, Debug, Default)]
pub struct SmoothnessOracle;

impl FacenessOracle for SmoothnessOracle {
    fn name(&self) -> String {
        "smoothness".into()
    }

    fn score_gray(&self, gray: &Array2<u8>) -> Result<f64> {
        let (h, w) = gray.dim();
        if h < 2 && w < 2 {
            return Err(Error::DegenerateImage(format!("{h}x{w} image has no neighbours")));
        }
        let g = gray.mapv(|v| v as f64 / 255.0);
        let mut total = 0.0;
        let mut count = 0usize;
        for i in 0..h {
            for j in 0..w {
                if j + 1 < w {
                    total += (g[[i, j + 1]] - g[[i, j]]).abs();
                    count += 1;
                }
                if i + 1 < h {
                    total += (g[[i + 1, j]] - g[[i, j]]).abs();
                    count += 1;
                }
            }
        }
        Ok(2.0 * (-8.0 * total / count as f64).exp())
    }
}

/// External detector: the image is written as a grayscale PNG, the program
/// runs as `program args… <png>` and prints the maximum detection
/// confidence (0 without detections) on its last stdout line.
#[derive(Clone, Debug, PartialEq)]
pub struct CommandOracle {
    pub program: PathBuf,
    pub args: Vec<String>,
}

impl CommandOracle {
    pub fn new(program: impl Into<PathBuf>, args: Vec<String>) -> Self {
        CommandOracle { program: program.into(), args }
    }
}

impl FacenessOracle for CommandOracle {
    fn name(&self) -> String {
        let mut s = self.program.display().to_string();
        for a in &self.args {
            s.push(' ');
            s.push_str(a);
        }
        s
    }

    fn score_gray(&self, gray: &Array2<u8>) -> Result<f64> {
        let (h, w) = gray.dim();
        if h == 0 || w == 0 {
            return Err(Error::DegenerateImage("empty image".into()));
        }
        let file = tempfile::Builder::new().suffix(".png").tempfile()?;
        let g3 = gray.clone().insert_axis(Axis(2));
        ImageTensor::from_u8(&g3)?.save_png(file.path())?;
        let out = Command::new(&self.program)
            .args(&self.args)
            .arg(file.path())
            .output()
            .map_err(|e| Error::Oracle(format!("cannot run {}: {e}", self.program.display())))?;
        if !out.status.success() {
            return Err(Error::Oracle(format!(
                "{} exited with {}: {}",
                self.name(),
                out.status,
                String::from_utf8_lossy(&out.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        let line = stdout.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("");
        line.trim()
            .parse::<f64>()
            .map_err(|_| Error::Oracle(format!("{} printed `{}`, expected a number", self.name(), line.trim())))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FacenessDataConfig {
    pub n: usize,
    pub seed: u64,
    /// Record `i` adds `latent_jitter · u_i · ε` to its latent, with
    /// `u_i ~ U(0, 1)` and `ε` standard normal, to include degraded faces.
    pub latent_jitter: f64,
    /// Stored images are resized to this side after labeling.
    pub store_resolution: Option<usize>,
}

impl Default for FacenessDataConfig {
    fn default() -> Self {
        FacenessDataConfig { n: 100_000, seed: 0, latent_jitter: 0.0, store_resolution: Some(128) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredRecord {
    pub index: usize,
    /// Noise seed of the record's latent.
    pub seed: u64,
    pub score: f64,
}

/// Generated images with oracle scores. Images are kept as 8-bit RGB so the
/// on-disk PNGs reproduce them exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredImageDataset {
    images: Vec<Array3<u8>>,
    records: Vec<ScoredRecord>,
    generator_id: String,
    oracle: String,
    seed: u64,
}

fn jittered_latent(gen: &GeneratorHandle, cfg: &FacenessDataConfig, i: u64) -> Result<LatentCode> {
    let w = gen.map_noise(&record_noise(cfg.seed, i))?;
    if cfg.latent_jitter == 0.0 {
        return Ok(w);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(i));
    rng.set_stream(2);
    let u: f64 = Uniform::new(0.0, 1.0).unwrap().sample(&mut rng);
    let k = cfg.latent_jitter * u;
    let rows = w.rows().mapv(|v| {
        let e: f64 = StandardNormal.sample(&mut rng);
        v + k * e
    });
    LatentCode::new(rows)
}

pub fn build_faceness_dataset(
    gen: &GeneratorHandle,
    oracle: &dyn FacenessOracle,
    cfg: &FacenessDataConfig,
) -> Result<ScoredImageDataset> {
    if cfg.n == 0 {
        return Err(Error::Precondition("faceness dataset needs n ≥ 1".into()));
    }
    if !cfg.latent_jitter.is_finite() || cfg.latent_jitter < 0.0 {
        return Err(Error::Config("latent_jitter must be finite and ≥ 0".into()));
    }
    let made: Vec<(Array3<u8>, ScoredRecord)> = (0..cfg.n)
        .into_par_iter()
        .map(|i| {
            let w = jittered_latent(gen, cfg, i as u64)?;
            let img = ImageTensor::from_u8(&gen.synthesize(&w)?.to_u8()?)?;
            let score = hog_faceness(oracle, &img)?.value();
            let stored = match cfg.store_resolution {
                Some(r) => img.resize(r, r)?,
                None => img,
            };
            Ok((
                stored.to_u8()?,
                ScoredRecord { index: i, seed: cfg.seed.wrapping_add(i as u64), score },
            ))
        })
        .collect::<Result<_>>()?;
    let (images, records) = made.into_iter().unzip();
    Ok(ScoredImageDataset {
        images,
        records,
        generator_id: gen.checkpoint_id().to_string(),
        oracle: oracle.name(),
        seed: cfg.seed,
    })
}

impl ScoredImageDataset {
    pub fn from_images(images: Vec<ImageTensor>, scores: Vec<f64>, generator_id: &str, oracle: &str) -> Result<Self> {
        if images.len() != scores.len() {
            return Err(Error::ShapeMismatch(format!("{} images vs {} scores", images.len(), scores.len())));
        }
        let mut bytes = Vec::with_capacity(images.len());
        let mut records = Vec::with_capacity(images.len());
        for (i, (img, s)) in images.iter().zip(scores).enumerate() {
            FacenessScore::new(s)?;
            bytes.push(img.to_u8()?);
            records.push(ScoredRecord { index: i, seed: 0, score: s });
        }
        Ok(ScoredImageDataset {
            images: bytes,
            records,
            generator_id: generator_id.to_string(),
            oracle: oracle.to_string(),
            seed: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ScoredRecord] {
        &self.records
    }

    pub fn image(&self, i: usize) -> Result<ImageTensor> {
        ImageTensor::from_u8(&self.images[i])
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    pub fn oracle(&self) -> &str {
        &self.oracle
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn image_path(dir: &Path, index: usize) -> PathBuf {
        dir.join("images").join(format!("{index:06}.png"))
    }

    /// `images/<index>.png`, `scores.csv` (index, seed, score) and
    /// `dataset.manifest`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir.join("images"))?;
        for (bytes, rec) in self.images.iter().zip(&self.records) {
            ImageTensor::from_u8(bytes)?.save_png(&Self::image_path(dir, rec.index))?;
        }
        let mut wr = csv::Writer::from_path(dir.join("scores.csv")).map_err(|e| Error::Data(e.to_string()))?;
        for rec in &self.records {
            wr.serialize(rec).map_err(|e| Error::Data(e.to_string()))?;
        }
        wr.flush()?;
        let mut m = crate::checkpoint::Manifest::new(SCORED_DATASET_FORMAT, 1);
        m.set("records", self.len());
        m.set("generator_id", &self.generator_id);
        m.set("oracle", &self.oracle);
        m.set("seed", self.seed);
        m.write(&dir.join("dataset.manifest"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = crate::checkpoint::Manifest::read(&dir.join("dataset.manifest"))?;
        m.expect_format(SCORED_DATASET_FORMAT, 1)?;
        let csv_path = dir.join("scores.csv");
        if !csv_path.exists() {
            return Err(Error::MissingFile(csv_path));
        }
        let mut rd = csv::Reader::from_path(&csv_path).map_err(|e| Error::Data(e.to_string()))?;
        let mut records = Vec::new();
        let mut images = Vec::new();
        for row in rd.deserialize() {
            let rec: ScoredRecord = row.map_err(|e| Error::Data(e.to_string()))?;
            FacenessScore::new(rec.score)?;
            images.push(ImageTensor::load_png(&Self::image_path(dir, rec.index))?.to_u8()?);
            records.push(rec);
        }
        if records.len() != m.parse_key::<usize>("records")? {
            return Err(Error::Data("score table disagrees with manifest record count".into()));
        }
        Ok(ScoredImageDataset {
            images,
            records,
            generator_id: m.require("generator_id")?.to_string(),
            oracle: m.require("oracle")?.to_string(),
            seed: m.parse_key("seed")?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoothness_oracle_orders_images() {
        let flat = Array2::from_elem((8, 8), 120u8);
        let checker = Array2::from_shape_fn((8, 8), |(i, j)| if (i + j) % 2 == 0 { 0u8 } else { 255 });
        let o = SmoothnessOracle;
        assert_eq!(o.score_gray(&flat).unwrap(), 2.0);
        assert!(o.score_gray(&checker).unwrap() < 1e-3);
        assert!(o.score_gray(&Array2::from_elem((1, 1), 0u8)).is_err());
    }

    #[test]
    fn command_oracle_protocol() {
        let ok = CommandOracle::new("sh", vec!["-c".into(), "echo noise; echo 1.25".into(), "sh".into()]);
        let g = Array2::from_elem((4, 4), 0u8);
        assert_eq!(ok.score_gray(&g).unwrap(), 1.25);
        let bad = CommandOracle::new("sh", vec!["-c".into(), "echo nope".into(), "sh".into()]);
        assert!(matches!(bad.score_gray(&g), Err(Error::Oracle(_))));
        let fail = CommandOracle::new("sh", vec!["-c".into(), "exit 3".into(), "sh".into()]);
        assert!(matches!(fail.score_gray(&g), Err(Error::Oracle(_))));
        let neg = CommandOracle::new("sh", vec!["-c".into(), "echo -1".into(), "sh".into()]);
        let img = ImageTensor::filled(4, 4, 1, 0.0, crate::image::ImageRange::Unit).unwrap();
        assert!(matches!(hog_faceness(&neg, &img), Err(Error::Oracle(_))));
    }

    #[test]
    fn scored_dataset_round_trip() {
        let gen = GeneratorHandle::toy(1234);
        let cfg = FacenessDataConfig { n: 4, seed: 3, latent_jitter: 0.5, store_resolution: None };
        let ds = build_faceness_dataset(&gen, &SmoothnessOracle, &cfg).unwrap();
        assert_eq!(ds.len(), 4);
        assert_eq!(ds, build_faceness_dataset(&gen, &SmoothnessOracle, &cfg).unwrap());
        let dir = tempfile::tempdir().unwrap();
        ds.save(dir.path()).unwrap();
        let back = ScoredImageDataset::load(dir.path()).unwrap();
        assert_eq!(back, ds);
        for (i, rec) in back.records().iter().enumerate() {
            let again = hog_faceness(&SmoothnessOracle, &back.image(i).unwrap()).unwrap();
            assert_eq!(again.value(), rec.score);
        }
    }
}
