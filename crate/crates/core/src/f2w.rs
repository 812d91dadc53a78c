//! Feature-to-latent mapper: a `(feature, latent)` dataset drawn from the
//! generator and the two-layer network trained on it.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array1, Array2, Array3, Axis};
use ndarray_npy::{read_npy, write_npy};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint::{self, expect_shape, Manifest, ParamMap};
use crate::error::{Error, Result};
use crate::extractors::{Extractor, FeatureVector};
use crate::generator::{sample_noise, GeneratorHandle, LatentCode, NoiseVector, LATENT_ROWS};
use crate::nn::{self, Adam, Bound};

pub const PAIR_DATASET_FORMAT: &str = "sketch2face-pair-dataset";
pub const MAPPER_FORMAT: &str = "sketch2face-f2w";

/// `(f, w)` records; record `i` of a dataset built with `seed` comes from
/// noise seed `seed + i`.
#[derive(Clone, Debug, PartialEq)]
pub struct PairDataset {
    features: Array2<f64>,
    latents: Array3<f64>,
    indices: Vec<u64>,
    extractor_id: String,
    generator_id: String,
    seed: u64,
}

pub fn record_noise(seed: u64, i: u64) -> NoiseVector {
    sample_noise(seed.wrapping_add(i))
}

pub fn build_pair_dataset(gen: &GeneratorHandle, ext: &Extractor, n: usize, seed: u64) -> Result<PairDataset> {
    if n == 0 {
        return Err(Error::Precondition("pair dataset needs n ≥ 1".into()));
    }
    let records: Vec<(Vec<f64>, Array2<f64>)> = (0..n as u64)
        .into_par_iter()
        .map(|i| {
            let w = gen.map_noise(&record_noise(seed, i))?;
            let img = gen.synthesize(&w)?;
            let f = ext.extract(&img)?;
            Ok((f.values().to_vec(), w.into_inner()))
        })
        .collect::<Result<_>>()?;
    let d = records[0].0.len();
    let (rows, width) = records[0].1.dim();
    let mut features = Array2::zeros((n, d));
    let mut latents = Array3::zeros((n, rows, width));
    for (i, (f, w)) in records.into_iter().enumerate() {
        features.row_mut(i).assign(&Array1::from(f));
        latents.index_axis_mut(Axis(0), i).assign(&w);
    }
    Ok(PairDataset {
        features,
        latents,
        indices: (0..n as u64).collect(),
        extractor_id: ext.id().to_string(),
        generator_id: gen.checkpoint_id().to_string(),
        seed,
    })
}

impl PairDataset {
    pub fn new(
        features: Array2<f64>,
        latents: Array3<f64>,
        extractor_id: &str,
        generator_id: &str,
        seed: u64,
    ) -> Result<Self> {
        let n = features.nrows();
        if latents.dim().0 != n {
            return Err(Error::ShapeMismatch(format!("{n} feature rows vs {} latents", latents.dim().0)));
        }
        if latents.dim().1 != LATENT_ROWS {
            return Err(Error::ShapeMismatch(format!("latents need {LATENT_ROWS} rows")));
        }
        if features.iter().chain(latents.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("pair dataset".into()));
        }
        Ok(PairDataset {
            features,
            latents,
            indices: (0..n as u64).collect(),
            extractor_id: extractor_id.to_string(),
            generator_id: generator_id.to_string(),
            seed,
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn feature_dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        let (_, r, w) = self.latents.dim();
        (r, w)
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Record positions within the originating dataset.
    pub fn indices(&self) -> &[u64] {
        &self.indices
    }

    pub fn features(&self) -> &Array2<f64> {
        &self.features
    }

    pub fn feature(&self, i: usize) -> Result<FeatureVector> {
        FeatureVector::new(self.features.row(i).to_vec(), &self.extractor_id)
    }

    pub fn latent(&self, i: usize) -> Result<LatentCode> {
        LatentCode::new(self.latents.index_axis(Axis(0), i).to_owned())
    }

    /// `n × (rows · width)` view of the latents.
    pub fn flat_latents(&self) -> Array2<f64> {
        let (n, r, w) = self.latents.dim();
        self.latents
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((n, r * w))
            .unwrap()
    }

    pub fn subset(&self, rows: &[usize]) -> PairDataset {
        PairDataset {
            features: self.features.select(Axis(0), rows),
            latents: self.latents.select(Axis(0), rows),
            indices: rows.iter().map(|&r| self.indices[r]).collect(),
            extractor_id: self.extractor_id.clone(),
            generator_id: self.generator_id.clone(),
            seed: self.seed,
        }
    }

    /// Seeded split; the holdout gets `floor(len · fraction)` records.
    pub fn split(&self, holdout_fraction: f64, seed: u64) -> (PairDataset, PairDataset) {
        let n = self.len();
        let k = ((n as f64) * holdout_fraction).floor() as usize;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (hold, train) = order.split_at(k);
        let (mut hold, mut train) = (hold.to_vec(), train.to_vec());
        hold.sort_unstable();
        train.sort_unstable();
        (self.subset(&train), self.subset(&hold))
    }

    /// Writes `features.npy`, `latents.npy`, `indices.npy` and
    /// `dataset.manifest` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let npy = |e: ndarray_npy::WriteNpyError| Error::Data(e.to_string());
        write_npy(dir.join("features.npy"), &self.features).map_err(npy)?;
        write_npy(dir.join("latents.npy"), &self.latents).map_err(npy)?;
        write_npy(dir.join("indices.npy"), &Array1::from(self.indices.clone())).map_err(npy)?;
        let (r, w) = self.latent_shape();
        let mut m = Manifest::new(PAIR_DATASET_FORMAT, 1);
        m.set("records", self.len());
        m.set("feature_dim", self.feature_dim());
        m.set("latent_shape", format!("{r},{w}"));
        m.set("dtype", "f64");
        m.set("extractor_id", &self.extractor_id);
        m.set("generator_id", &self.generator_id);
        m.set("seed", self.seed);
        m.write(&dir.join("dataset.manifest"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m = Manifest::read(&dir.join("dataset.manifest"))?;
        m.expect_format(PAIR_DATASET_FORMAT, 1)?;
        let npy = |e: ndarray_npy::ReadNpyError| Error::Data(e.to_string());
        for f in ["features.npy", "latents.npy", "indices.npy"] {
            if !dir.join(f).exists() {
                return Err(Error::MissingFile(dir.join(f)));
            }
        }
        let features: Array2<f64> = read_npy(dir.join("features.npy")).map_err(npy)?;
        let latents: Array3<f64> = read_npy(dir.join("latents.npy")).map_err(npy)?;
        let indices: Array1<u64> = read_npy(dir.join("indices.npy")).map_err(npy)?;
        let mut ds = PairDataset::new(
            features,
            latents,
            m.require("extractor_id")?,
            m.require("generator_id")?,
            m.parse_key("seed")?,
        )?;
        if ds.len() != m.parse_key::<usize>("records")? || indices.len() != ds.len() {
            return Err(Error::Data("pair dataset record count disagrees with manifest".into()));
        }
        ds.indices = indices.to_vec();
        Ok(ds)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MapperConfig {
    pub hidden: usize,
    pub epochs: usize,
    /// Stops early once this many updates have run.
    pub max_steps: Option<usize>,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub holdout_fraction: f64,
    /// Update counts after which holdout error is logged.
    pub eval_steps: Vec<usize>,
}

impl Default for MapperConfig {
    fn default() -> Self {
        MapperConfig {
            hidden: 4096,
            epochs: 20,
            max_steps: None,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            holdout_fraction: 0.05,
            eval_steps: vec![20, 40, 80, 160, 320, 620, 1000],
        }
    }
}

impl MapperConfig {
    pub fn toy() -> Self {
        MapperConfig { hidden: 128, epochs: 40, max_steps: Some(1000), ..Self::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingLog {
    /// Mini-batch loss before each update.
    pub train_loss: Vec<f64>,
    /// `(updates done, holdout latent MSE)`.
    pub holdout: Vec<(usize, f64)>,
    pub epochs: usize,
    pub seed: u64,
}

/// `w = W2 · tanh(W1 · (f − μ) / σ + b1) + b2`, reshaped to the latent shape.
#[derive(Clone, Debug)]
pub struct MapperModel {
    params: ParamMap,
    feature_mean: Array1<f64>,
    feature_std: Array1<f64>,
    latent_shape: (usize, usize),
    extractor_id: String,
    generator_id: String,
    log: TrainingLog,
    id: String,
}

impl MapperModel {
    fn assemble(
        params: ParamMap,
        feature_mean: Array1<f64>,
        feature_std: Array1<f64>,
        latent_shape: (usize, usize),
        extractor_id: &str,
        generator_id: &str,
    ) -> Self {
        let mut m = MapperModel {
            params,
            feature_mean,
            feature_std,
            latent_shape,
            extractor_id: extractor_id.to_string(),
            generator_id: generator_id.to_string(),
            log: TrainingLog::default(),
            id: String::new(),
        };
        m.refresh_id();
        m
    }

    /// Randomly initialized mapper with identity input standardization.
    pub fn init(d: usize, hidden: usize, latent_shape: (usize, usize), extractor_id: &str, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let out = latent_shape.0 * latent_shape.1;
        let mut p = ParamMap::new();
        p.insert("fc1.weight".into(), nn::scaled_normal(&mut rng, &[hidden, d], d, 1.0));
        p.insert("fc1.bias".into(), nn::zeros(&[hidden]));
        p.insert("fc2.weight".into(), nn::scaled_normal(&mut rng, &[out, hidden], hidden, 1.0));
        p.insert("fc2.bias".into(), nn::zeros(&[out]));
        Self::assemble(p, Array1::zeros(d), Array1::ones(d), latent_shape, extractor_id, "")
    }

    /// All weights and biases zero.
    pub fn zeros(d: usize, hidden: usize, latent_shape: (usize, usize), extractor_id: &str) -> Self {
        let out = latent_shape.0 * latent_shape.1;
        let mut p = ParamMap::new();
        p.insert("fc1.weight".into(), nn::zeros(&[hidden, d]));
        p.insert("fc1.bias".into(), nn::zeros(&[hidden]));
        p.insert("fc2.weight".into(), nn::zeros(&[out, hidden]));
        p.insert("fc2.bias".into(), nn::zeros(&[out]));
        Self::assemble(p, Array1::zeros(d), Array1::ones(d), latent_shape, extractor_id, "")
    }

    fn refresh_id(&mut self) {
        let blob = checkpoint::encode_tensors(&self.all_tensors()).expect("mapper tensors serialize");
        self.id = checkpoint::checkpoint_id(MAPPER_FORMAT, &blob);
    }

    fn all_tensors(&self) -> ParamMap {
        let mut t = self.params.clone();
        t.insert("input.mean".into(), Arc::new(self.feature_mean.clone().into_dyn()));
        t.insert("input.std".into(), Arc::new(self.feature_std.clone().into_dyn()));
        t.insert("log.train_loss".into(), Arc::new(Array1::from(self.log.train_loss.clone()).into_dyn()));
        let h = Array2::from_shape_fn((self.log.holdout.len(), 2), |(i, j)| {
            let (s, v) = self.log.holdout[i];
            if j == 0 { s as f64 } else { v }
        });
        t.insert("log.holdout".into(), Arc::new(h.into_dyn()));
        t
    }

    pub fn params(&self) -> &ParamMap {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamMap {
        &mut self.params
    }

    pub fn log(&self) -> &TrainingLog {
        &self.log
    }

    pub fn extractor_id(&self) -> &str {
        &self.extractor_id
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn latent_shape(&self) -> (usize, usize) {
        self.latent_shape
    }

    fn standardize(&self, x: &Array2<f64>) -> Array2<f64> {
        (x - &self.feature_mean) / &self.feature_std
    }

    /// Row-wise prediction for an `n × d` feature matrix; `n × (rows·width)`.
    pub fn predict(&self, features: &Array2<f64>) -> Array2<f64> {
        let x = self.standardize(features);
        let mat = |n: &str| self.params[n].view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let vec = |n: &str| self.params[n].view().into_dimensionality::<ndarray::Ix1>().unwrap();
        let h = (x.dot(&mat("fc1.weight").t()) + vec("fc1.bias")).mapv(f64::tanh);
        h.dot(&mat("fc2.weight").t()) + vec("fc2.bias")
    }

    pub fn map_features(&self, f: &FeatureVector) -> Result<LatentCode> {
        f.expect_extractor(&self.extractor_id)?;
        if f.dim() != self.feature_dim() {
            return Err(Error::ShapeMismatch(format!(
                "mapper expects {} features, got {}",
                self.feature_dim(),
                f.dim()
            )));
        }
        let x = Array2::from_shape_vec((1, f.dim()), f.values().to_vec()).unwrap();
        let y = self.predict(&x);
        LatentCode::new(y.into_shape_with_order(self.latent_shape).unwrap())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut m = Manifest::new(MAPPER_FORMAT, 1);
        m.set("feature_dim", self.feature_dim());
        m.set("hidden", self.params["fc1.bias"].len());
        m.set("latent_shape", format!("{},{}", self.latent_shape.0, self.latent_shape.1));
        m.set("extractor_id", &self.extractor_id);
        m.set("generator_id", &self.generator_id);
        m.set("epochs", self.log.epochs);
        m.set("steps", self.log.train_loss.len());
        m.set("seed", self.log.seed);
        checkpoint::write_checkpoint(path, &m, &self.all_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read_checkpoint(path, MAPPER_FORMAT, 1)?;
        let m = &ck.manifest;
        let d: usize = m.parse_key("feature_dim")?;
        let hidden: usize = m.parse_key("hidden")?;
        let shape: Vec<usize> = m
            .parse_list("latent_shape")?
            .ok_or_else(|| Error::VersionMismatch("manifest lacks key `latent_shape`".into()))?;
        if shape.len() != 2 || shape[0] != LATENT_ROWS {
            return Err(Error::VersionMismatch(format!("bad latent_shape {shape:?}")));
        }
        let out = shape[0] * shape[1];
        let mut params = ParamMap::new();
        for (name, dims) in [
            ("fc1.weight", vec![hidden, d]),
            ("fc1.bias", vec![hidden]),
            ("fc2.weight", vec![out, hidden]),
            ("fc2.bias", vec![out]),
        ] {
            let t = ck.tensor(name)?;
            expect_shape(name, &t, &dims)?;
            params.insert(name.into(), t);
        }
        let vec1 = |name: &str| -> Result<Array1<f64>> {
            let t = ck.tensor(name)?;
            expect_shape(name, &t, &[d])?;
            Ok(t.iter().copied().collect())
        };
        let holdout = ck.tensor("log.holdout")?;
        let log = TrainingLog {
            train_loss: ck.tensor("log.train_loss")?.iter().copied().collect(),
            holdout: holdout
                .view()
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::CorruptWeights(e.to_string()))?
                .rows()
                .into_iter()
                .map(|r| (r[0] as usize, r[1]))
                .collect(),
            epochs: m.parse_or("epochs", 0)?,
            seed: m.parse_or("seed", 0)?,
        };
        Ok(MapperModel {
            params,
            feature_mean: vec1("input.mean")?,
            feature_std: vec1("input.std")?,
            latent_shape: (shape[0], shape[1]),
            extractor_id: m.require("extractor_id")?.to_string(),
            generator_id: m.require("generator_id")?.to_string(),
            log,
            id: ck.id,
        })
    }
}

fn latent_mse(model: &MapperModel, ds: &PairDataset) -> f64 {
    let pred = model.predict(ds.features());
    (pred - ds.flat_latents()).mapv(|v| v * v).mean().unwrap_or(f64::NAN)
}

/// Trains on the seeded 1 − holdout_fraction share of `ds`; holdout error
/// is logged at `cfg.eval_steps` and at the end.
pub fn train_mapper(ds: &PairDataset, cfg: &MapperConfig) -> Result<MapperModel> {
    if ds.is_empty() {
        return Err(Error::Precondition("empty pair dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || cfg.hidden == 0 {
        return Err(Error::Precondition("epochs, batch_size and hidden must be ≥ 1".into()));
    }
    if !(cfg.learning_rate > 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::Precondition("learning_rate must be positive".into()));
    }
    let (train, holdout) = ds.split(cfg.holdout_fraction, cfg.seed);
    let d = ds.feature_dim();
    let mut model = MapperModel::init(d, cfg.hidden, ds.latent_shape(), ds.extractor_id(), cfg.seed);
    model.generator_id = ds.generator_id().to_string();
    model.feature_mean = train.features.mean_axis(Axis(0)).unwrap();
    model.feature_std = train
        .features
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-8 { s } else { 1.0 });

    let x_all = model.standardize(&train.features);
    let y_all = train.flat_latents();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut log = TrainingLog { seed: cfg.seed, ..TrainingLog::default() };
    let max_steps = cfg.max_steps.unwrap_or(usize::MAX);
    let mut step = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            if step >= max_steps {
                break 'epochs;
            }
            let x = x_all.select(Axis(0), chunk);
            let y = y_all.select(Axis(0), chunk);
            let tape = Tape::new();
            let b = Bound::bind(&tape, &model.params, true);
            let pred = tape
                .constant(x.into_dyn())
                .linear(b.get("fc1.weight"), Some(b.get("fc1.bias")))
                .tanh()
                .linear(b.get("fc2.weight"), Some(b.get("fc2.bias")));
            let loss = pred.sub(tape.constant(y.into_dyn())).square().mean();
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("mapper loss {lv} at step {step}")));
            }
            log.train_loss.push(lv);
            let mut grads = tape.gradients(loss);
            let g = b.collect_grads(&mut grads);
            adam.step(&mut model.params, &g);
            step += 1;
            if !holdout.is_empty() && cfg.eval_steps.contains(&step) {
                log.holdout.push((step, latent_mse(&model, &holdout)));
            }
        }
        log.epochs = epoch + 1;
    }
    if !holdout.is_empty() && log.holdout.last().map(|h| h.0) != Some(step) {
        log.holdout.push((step, latent_mse(&model, &holdout)));
    }
    if let Some(&(s, v)) = log.holdout.iter().find(|h| !h.1.is_finite()) {
        return Err(Error::Divergence(format!("holdout error {v} at step {s}")));
    }
    model.log = log;
    model.refresh_id();
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapperReport {
    pub records: usize,
    pub latent_mse_mean: f64,
    pub latent_mse_median: f64,
    /// Present when a generator was supplied for re-synthesis.
    pub image_mse_mean: Option<f64>,
}

pub fn evaluate_mapper(m: &MapperModel, holdout: &PairDataset, gen: Option<&GeneratorHandle>) -> Result<MapperReport> {
    if holdout.is_empty() {
        return Err(Error::Precondition("empty holdout".into()));
    }
    if holdout.extractor_id() != m.extractor_id() {
        return Err(Error::ExtractorMismatch {
            expected: m.extractor_id().to_string(),
            found: holdout.extractor_id().to_string(),
        });
    }
    let pred = m.predict(holdout.features());
    let truth = holdout.flat_latents();
    let mut per: Vec<f64> = (0..holdout.len())
        .map(|i| (&pred.row(i) - &truth.row(i)).mapv(|v| v * v).mean().unwrap())
        .collect();
    let mean = per.iter().sum::<f64>() / per.len() as f64;
    per.sort_by(f64::total_cmp);
    let k = per.len();
    let median = if k % 2 == 1 { per[k / 2] } else { 0.5 * (per[k / 2 - 1] + per[k / 2]) };
    let image_mse_mean = match gen {
        None => None,
        Some(g) => {
            let errs = (0..holdout.len())
                .into_par_iter()
                .map(|i| {
                    let w_hat = LatentCode::new(pred.slice(s![i, ..]).to_owned().into_shape_with_order(m.latent_shape).unwrap())?;
                    let a = g.synthesize(&w_hat)?;
                    let b = g.synthesize(&holdout.latent(i)?)?;
                    Ok((a.pixels() - b.pixels()).mapv(|v| v * v).mean().unwrap())
                })
                .collect::<Result<Vec<f64>>>()?;
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
    };
    Ok(MapperReport { records: k, latent_mse_mean: mean, latent_mse_median: median, image_mse_mean })
}
