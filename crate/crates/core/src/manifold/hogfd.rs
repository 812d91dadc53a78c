//! HOGFD: a small CNN regressing the oracle's faceness score.
//!
//! Four 3×3 conv blocks (16/32/64/128 filters, batch norm, ReLU, 2×2 max
//! pool), then FC 16 (batch norm, ReLU, dropout), FC 4 (ReLU), FC 1.

use std::path::Path;
use std::sync::Arc;

use ndarray::{Array4, Axis, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{FacenessScore, ScoredImageDataset};
use crate::autodiff::{bilinear_matrix, Tape, Tensor, Var};
use crate::checkpoint::{self, expect_shape, Manifest, ParamMap};
use crate::error::{Error, Result};
use crate::image::{ImageRange, ImageTensor};
use crate::nn::{self, Adam, BatchStats, Bound, Mode};

pub const HOGFD_FORMAT: &str = "sketch2face-hogfd";

const CONV: [usize; 4] = [16, 32, 64, 128];
const FC: [usize; 3] = [16, 4, 1];
const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HogfdConfig {
    pub input_resolution: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub dropout: f64,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for HogfdConfig {
    fn default() -> Self {
        HogfdConfig {
            input_resolution: 128,
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            dropout: 0.5,
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl HogfdConfig {
    pub fn toy() -> Self {
        HogfdConfig { input_resolution: 32, epochs: 30, learning_rate: 1e-2, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct HogfdModel {
    params: ParamMap,
    input_resolution: usize,
    max_score: Option<f64>,
    /// Largest ground-truth target of the training set, kept for comparison.
    max_target: Option<f64>,
    train_loss: Vec<f64>,
    generator_id: String,
    id: String,
}

/// Images are fed as signed-range RGB at the model resolution.
fn input_var<'t>(x: Var<'t>, range: &ImageRange, res: usize) -> Result<Var<'t>> {
    let shape = x.shape();
    if shape.len() != 4 || (shape[1] != 1 && shape[1] != 3) {
        return Err(Error::ShapeMismatch(format!("expected N×{{1,3}}×H×W, got {shape:?}")));
    }
    if shape[2] == 0 || shape[3] == 0 {
        return Err(Error::DegenerateImage("zero-area input".into()));
    }
    let signed = match range {
        ImageRange::SignedUnit => x,
        ImageRange::Unit => x.scale(2.0).add_scalar(-1.0),
        ImageRange::Normalized(id) => {
            return Err(Error::ExtractorMismatch { expected: "signed or unit range".into(), found: id.clone() })
        }
    };
    let rgb = if shape[1] == 1 { signed.repeat_channels(3) } else { signed };
    Ok(if shape[2] == res && shape[3] == res {
        rgb
    } else {
        rgb.resample(Arc::new(bilinear_matrix(res, shape[2])), Arc::new(bilinear_matrix(res, shape[3])))
    })
}

fn image_input(img: &ImageTensor, res: usize) -> Result<Tensor> {
    let tape = Tape::new();
    let x = tape.constant(img.to_nchw());
    Ok((*input_var(x, img.range(), res)?.value()).clone())
}

struct Dropout<'a> {
    rng: &'a mut ChaCha8Rng,
    p: f64,
}

impl HogfdModel {
    pub fn init(input_resolution: usize, seed: u64) -> Result<Self> {
        if input_resolution < 16 {
            return Err(Error::Config(format!("HOGFD input resolution {input_resolution} < 16")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamMap::new();
        let mut cin = 3;
        for (l, &c) in CONV.iter().enumerate() {
            p.insert(format!("conv{l}.weight"), nn::scaled_normal(&mut rng, &[c, cin, 3, 3], cin * 9, 2f64.sqrt()));
            p.insert(format!("conv{l}.bias"), nn::zeros(&[c]));
            nn::insert_batch_norm(&mut p, &format!("bn{l}"), c);
            cin = c;
        }
        let side = input_resolution >> 4;
        let mut fin = cin * side * side;
        for (l, &f) in FC.iter().enumerate() {
            p.insert(format!("fc{l}.weight"), nn::scaled_normal(&mut rng, &[f, fin], fin, 2f64.sqrt()));
            p.insert(format!("fc{l}.bias"), nn::zeros(&[f]));
            fin = f;
        }
        nn::insert_batch_norm(&mut p, "bn4", FC[0]);
        let mut m = HogfdModel {
            params: p,
            input_resolution,
            max_score: None,
            max_target: None,
            train_loss: Vec::new(),
            generator_id: String::new(),
            id: String::new(),
        };
        m.refresh_id();
        Ok(m)
    }

    fn all_tensors(&self) -> ParamMap {
        let mut t = self.params.clone();
        let log = Tensor::from_shape_vec(IxDyn(&[self.train_loss.len()]), self.train_loss.clone()).unwrap();
        t.insert("log.train_loss".into(), Arc::new(log));
        t
    }

    fn refresh_id(&mut self) {
        let blob = checkpoint::encode_tensors(&self.all_tensors()).expect("hogfd tensors serialize");
        self.id = checkpoint::checkpoint_id(HOGFD_FORMAT, &blob);
    }

    pub fn input_resolution(&self) -> usize {
        self.input_resolution
    }

    pub fn max_score(&self) -> Option<f64> {
        self.max_score
    }

    pub fn max_target(&self) -> Option<f64> {
        self.max_target
    }

    pub fn set_max_score(&mut self, v: f64) {
        self.max_score = Some(v);
    }

    pub fn train_loss(&self) -> &[f64] {
        &self.train_loss
    }

    pub fn checkpoint_id(&self) -> &str {
        &self.id
    }

    pub fn generator_id(&self) -> &str {
        &self.generator_id
    }

    fn forward<'t>(
        &self,
        params: &ParamMap,
        b: &Bound<'t>,
        x: Var<'t>,
        mode: Mode,
        dropout: Option<Dropout<'_>>,
        stats: &mut Vec<BatchStats>,
    ) -> Var<'t> {
        let mut h = x;
        for l in 0..CONV.len() {
            let y = h
                .conv2d(b.get(&format!("conv{l}.weight")), 1, 1)
                .add_channel_bias(b.get(&format!("conv{l}.bias")));
            h = nn::batch_norm(y, b, params, &format!("bn{l}"), mode, BN_EPS, stats)
                .relu()
                .max_pool2d(2, 2, 0);
        }
        let fc = |h: Var<'t>, l: usize| h.linear(b.get(&format!("fc{l}.weight")), Some(b.get(&format!("fc{l}.bias"))));
        let mut h = nn::batch_norm(fc(h.flatten(), 0), b, params, "bn4", mode, BN_EPS, stats).relu();
        if let Some(d) = dropout {
            if d.p > 0.0 {
                let keep = 1.0 / (1.0 - d.p);
                let mask = Tensor::from_shape_simple_fn(IxDyn(&h.shape()), || {
                    if d.rng.random::<f64>() < d.p { 0.0 } else { keep }
                });
                h = h.mul_const(mask);
            }
        }
        fc(fc(h, 1).relu(), 2)
    }

    /// Inference-mode score of a single `1 × C × H × W` image; differentiable.
    pub fn score_var<'t>(&self, x: Var<'t>, range: &ImageRange) -> Result<Var<'t>> {
        if x.shape().first() != Some(&1) {
            return Err(Error::ShapeMismatch(format!("expected a single image, got {:?}", x.shape())));
        }
        let input = input_var(x, range, self.input_resolution)?;
        let b = Bound::bind(x.tape(), &self.params, false);
        let out = self.forward(&self.params, &b, input, Mode::Eval, None, &mut Vec::new());
        Ok(out.reshape(&[]))
    }

    pub fn hogfd_score(&self, img: &ImageTensor) -> Result<FacenessScore> {
        let tape = Tape::new();
        let x = tape.constant(img.to_nchw());
        FacenessScore::new(self.score_var(x, img.range())?.item())
    }

    fn require_max(&self) -> Result<f64> {
        self.max_score
            .ok_or_else(|| Error::Precondition("HOGFD model has no max_score".into()))
    }

    /// `max_score − HOGFD(x)`, unclamped.
    pub fn manifold_loss_var<'t>(&self, x: Var<'t>, range: &ImageRange) -> Result<Var<'t>> {
        let m = self.require_max()?;
        Ok(self.score_var(x, range)?.neg().add_scalar(m))
    }

    pub fn manifold_loss(&self, img: &ImageTensor) -> Result<f64> {
        let m = self.require_max()?;
        Ok(m - self.hogfd_score(img)?.value())
    }

    pub fn save(&self, path: &Path) -> Result<String> {
        let mut m = Manifest::new(HOGFD_FORMAT, 1);
        m.set("input_resolution", self.input_resolution);
        if let Some(v) = self.max_score {
            m.set("max_score", format!("{v:e}"));
        }
        if let Some(v) = self.max_target {
            m.set("max_target", format!("{v:e}"));
        }
        m.set("generator_id", &self.generator_id);
        checkpoint::write_checkpoint(path, &m, &self.all_tensors())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = checkpoint::read_checkpoint(path, HOGFD_FORMAT, 1)?;
        let res: usize = ck.manifest.parse_key("input_resolution")?;
        let reference = HogfdModel::init(res, 0)?;
        let mut params = ParamMap::new();
        for (name, t) in reference.params.iter() {
            let got = ck.tensor(name)?;
            expect_shape(name, &got, t.shape())?;
            params.insert(name.clone(), got);
        }
        let opt = |k: &str| -> Result<Option<f64>> {
            ck.manifest.get(k).map(|_| ck.manifest.parse_key(k)).transpose()
        };
        let mut m = HogfdModel {
            params,
            input_resolution: res,
            max_score: opt("max_score")?,
            max_target: opt("max_target")?,
            train_loss: ck.tensors.get("log.train_loss").map(|t| t.iter().copied().collect()).unwrap_or_default(),
            generator_id: ck.manifest.get("generator_id").unwrap_or("").to_string(),
            id: String::new(),
        };
        m.refresh_id();
        Ok(m)
    }
}

/// Batches of the given order; a trailing singleton joins the previous batch
/// so batch statistics are always defined.
fn batches(order: &[usize], size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(size.max(1)).map(|c| c.to_vec()).collect();
    if out.len() > 1 && out.last().map(|c| c.len()) == Some(1) {
        let last = out.pop().unwrap();
        out.last_mut().unwrap().extend(last);
    }
    out
}

fn stack(inputs: &[Tensor], idx: &[usize]) -> Tensor {
    let views: Vec<_> = idx
        .iter()
        .map(|&i| inputs[i].view().into_dimensionality::<ndarray::Ix4>().unwrap())
        .collect();
    let arr: Array4<f64> = ndarray::concatenate(Axis(0), &views).unwrap();
    arr.into_dyn()
}

/// Trains with MSE and Adam, then resets the batch-norm statistics to their
/// average over one dropout-free pass of the training set and sets
/// `max_score` to the largest inference-mode score over the training images.
pub fn train_hogfd(ds: &ScoredImageDataset, cfg: &HogfdConfig) -> Result<HogfdModel> {
    if ds.is_empty() {
        return Err(Error::Precondition("empty faceness dataset".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Precondition("epochs and batch_size must be ≥ 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.dropout) {
        return Err(Error::Config(format!("dropout {} outside [0, 1)", cfg.dropout)));
    }
    let mut model = HogfdModel::init(cfg.input_resolution, cfg.seed)?;
    model.generator_id = ds.generator_id().to_string();
    let images: Vec<ImageTensor> = (0..ds.len()).map(|i| ds.image(i)).collect::<Result<_>>()?;
    let inputs: Vec<Tensor> = images
        .iter()
        .map(|img| image_input(img, cfg.input_resolution))
        .collect::<Result<_>>()?;
    let targets = ds.scores();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut params = model.params.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in batches(&order, cfg.batch_size) {
            let tape = Tape::new();
            let b = Bound::bind(&tape, &params, true);
            let x = tape.constant(stack(&inputs, &batch));
            let y = Tensor::from_shape_fn(IxDyn(&[batch.len(), 1]), |i| targets[batch[i[0]]]);
            let mut stats = Vec::new();
            let mode = if batch.len() > 1 { Mode::Train } else { Mode::Eval };
            let drop = Dropout { rng: &mut rng, p: cfg.dropout };
            let out = model.forward(&params, &b, x, mode, Some(drop), &mut stats);
            let loss = out.sub(tape.constant(y)).square().mean();
            let lv = loss.item();
            if !lv.is_finite() {
                return Err(Error::Divergence(format!("HOGFD loss {lv} in epoch {epoch}")));
            }
            model.train_loss.push(lv);
            let mut grads = tape.gradients(loss);
            let g = b.collect_grads(&mut grads);
            adam.step(&mut params, &g);
            nn::update_running_stats(&mut params, &stats, cfg.bn_momentum, batch.len());
        }
    }
    if ds.len() > 1 {
        recalibrate(&model, &mut params, &inputs, cfg.batch_size);
    }
    model.params = params;
    let mut best = f64::NEG_INFINITY;
    for img in &images {
        let s = model.hogfd_score(img)?.value();
        best = best.max(s);
    }
    model.max_score = Some(best);
    model.max_target = targets.iter().copied().reduce(f64::max);
    model.refresh_id();
    Ok(model)
}

/// Size-weighted average of per-batch statistics (biased variance).
fn recalibrate(model: &HogfdModel, params: &mut ParamMap, inputs: &[Tensor], batch_size: usize) {
    let order: Vec<usize> = (0..inputs.len()).collect();
    let mut acc: Vec<(String, Vec<f64>, Vec<f64>)> = Vec::new();
    let mut total = 0.0;
    for batch in batches(&order, batch_size) {
        let tape = Tape::new();
        let b = Bound::bind(&tape, params, false);
        let x = tape.constant(stack(inputs, &batch));
        let mut stats = Vec::new();
        model.forward(params, &b, x, Mode::Train, None, &mut stats);
        let k = batch.len() as f64;
        total += k;
        if acc.is_empty() {
            acc = stats.iter().map(|s| (s.prefix.clone(), vec![0.0; s.mean.len()], vec![0.0; s.var.len()])).collect();
        }
        for (a, s) in acc.iter_mut().zip(&stats) {
            for (m, v) in a.1.iter_mut().zip(&s.mean) {
                *m += k * v;
            }
            for (m, v) in a.2.iter_mut().zip(&s.var) {
                *m += k * v;
            }
        }
    }
    for (prefix, mean, var) in acc {
        let c = mean.len();
        let rm = Tensor::from_shape_vec(IxDyn(&[c]), mean.iter().map(|m| m / total).collect()).unwrap();
        let rv = Tensor::from_shape_vec(IxDyn(&[c]), var.iter().map(|v| v / total).collect()).unwrap();
        params.insert(format!("{prefix}.running_mean"), Arc::new(rm));
        params.insert(format!("{prefix}.running_var"), Arc::new(rv));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn batches_never_end_in_a_singleton() {
        let order: Vec<usize> = (0..9).collect();
        let b = batches(&order, 4);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 5]);
        assert_eq!(batches(&order[..1], 4), vec![vec![0]]);
    }

    #[test]
    fn max_score_unset_is_an_error() {
        let m = HogfdModel::init(32, 1).unwrap();
        let img = ImageTensor::filled(32, 32, 3, 0.2, ImageRange::SignedUnit).unwrap();
        assert!(m.hogfd_score(&img).is_ok());
        assert!(matches!(m.manifold_loss(&img), Err(Error::Precondition(_))));
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = HogfdModel::init(32, 2).unwrap();
        m.set_max_score(1.2345678901234567);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("hogfd.safetensors");
        m.save(&path).unwrap();
        let back = HogfdModel::load(&path).unwrap();
        assert_eq!(back.max_score(), m.max_score());
        assert_eq!(back.checkpoint_id(), m.checkpoint_id());
        let img = ImageTensor::filled(40, 40, 1, 0.7, ImageRange::Unit).unwrap();
        assert_eq!(back.hogfd_score(&img).unwrap(), m.hogfd_score(&img).unwrap());
    }
}
