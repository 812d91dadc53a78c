//! Loss composition and latent-space optimization.
//!
//! The objective is a weighted sum of appearance terms (feature distance to
//! the sketch under one extractor) and an optional manifold term
//! (`max_score − HOGFD(image)`). Optimization runs over the 18 latent rows.

use std::fmt;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use ndarray::{Array2, Axis, Ix2};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::checkpoint::ParamMap;
use crate::error::{Error, Result};
use crate::extractors::{Extractor, FeatureVector, Registry};
use crate::f2w::MapperModel;
use crate::generator::{GeneratorHandle, LatentCode, LATENT_ROWS};
use crate::image::{ImageRange, ImageTensor};
use crate::manifold::HogfdModel;
use crate::nn::Adam;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TermKind {
    Appearance,
    Manifold,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossTermSpec {
    pub kind: TermKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extractor_id: Option<String>,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

impl LossTermSpec {
    pub fn appearance(extractor_id: &str) -> Self {
        LossTermSpec { kind: TermKind::Appearance, extractor_id: Some(extractor_id.to_string()), weight: 1.0 }
    }

    pub fn manifold() -> Self {
        LossTermSpec { kind: TermKind::Manifold, extractor_id: None, weight: 1.0 }
    }

    pub fn weighted(mut self, weight: f64) -> Self {
        self.weight = weight;
        self
    }

    /// Column name used in loss tables: `app:<extractor>` or `manifold`.
    pub fn label(&self) -> String {
        match (&self.kind, &self.extractor_id) {
            (TermKind::Appearance, Some(id)) => format!("app:{id}"),
            (TermKind::Appearance, None) => "app:?".into(),
            (TermKind::Manifold, _) => "manifold".into(),
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.weight.is_finite() || self.weight < 0.0 {
            return Err(Error::Config(format!("term {} has weight {}", self.label(), self.weight)));
        }
        match (self.kind, &self.extractor_id) {
            (TermKind::Appearance, None) => Err(Error::Config("appearance term without extractor_id".into())),
            (TermKind::Manifold, Some(_)) => Err(Error::Config("manifold term takes no extractor_id".into())),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for LossTermSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}×{}", self.weight, self.label())
    }
}

/// The full objective: VGGFace, VGGFace2 and VGG16 appearance plus manifold.
pub fn default_terms() -> Vec<LossTermSpec> {
    vec![
        LossTermSpec::appearance("vggface"),
        LossTermSpec::appearance("vggface2"),
        LossTermSpec::appearance("vgg16"),
        LossTermSpec::manifold(),
    ]
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum RowMode {
    /// All 18 rows are free.
    #[default]
    #[serde(rename = "joint_18")]
    Joint18,
    /// One shared row broadcast to all 18; starts from the row mean of `w0`.
    #[serde(rename = "shared_1")]
    Shared1,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InversionConfig {
    pub terms: Vec<LossTermSpec>,
    pub optimizer: OptimizerKind,
    pub step_size: f64,
    pub max_iterations: usize,
    pub plateau_patience: usize,
    pub plateau_tolerance: f64,
    pub optimize_rows: RowMode,
    pub seed: u64,
    pub snapshot_every: usize,
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            terms: default_terms(),
            optimizer: OptimizerKind::Adam,
            step_size: 0.01,
            max_iterations: 1000,
            plateau_patience: 50,
            plateau_tolerance: 1e-4,
            optimize_rows: RowMode::Joint18,
            seed: 0,
            snapshot_every: 50,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.terms.is_empty() {
            return Err(Error::Precondition("no loss terms".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Precondition("max_iterations must be ≥ 1".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config(format!("step_size {} must be positive", self.step_size)));
        }
        if !(self.plateau_tolerance.is_finite() && self.plateau_tolerance >= 0.0) {
            return Err(Error::Config(format!("plateau_tolerance {}", self.plateau_tolerance)));
        }
        let mut seen = std::collections::HashSet::new();
        for t in &self.terms {
            t.validate()?;
            if !seen.insert(t.label()) {
                return Err(Error::Duplicate(format!("loss term {}", t.label())));
            }
        }
        Ok(())
    }
}

/// `‖FR(syn) − FR(sketch)‖₂` for one extractor.
pub fn appearance_loss(syn: &ImageTensor, sketch: &ImageTensor, ext: &Extractor) -> Result<f64> {
    ext.extract(syn)?.distance(&ext.extract(sketch)?)
}

/// Differentiable appearance term against a cached target feature.
pub fn appearance_loss_var<'t>(
    syn: Var<'t>,
    range: &ImageRange,
    target: &FeatureVector,
    ext: &Extractor,
) -> Result<Var<'t>> {
    target.expect_extractor(ext.id())?;
    let f = ext.features_var(syn, range)?;
    if f.shape() != [target.dim()] {
        return Err(Error::ShapeMismatch(format!("feature dim {:?} vs target {}", f.shape(), target.dim())));
    }
    let t = syn.tape().constant(Tensor::from_shape_vec(ndarray::IxDyn(&[target.dim()]), target.values().to_vec()).unwrap());
    Ok(f.sub(t).norm2())
}

enum Term<'a> {
    Appearance { ext: &'a Extractor, target: FeatureVector },
    Manifold { hogfd: &'a HogfdModel },
}

/// Per-term values and their weighted sum at one latent code.
#[derive(Clone, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub terms: Vec<(String, f64)>,
}

/// A loss function of `w` with sketch features computed once.
pub struct Objective<'a> {
    gen: &'a GeneratorHandle,
    specs: Vec<LossTermSpec>,
    terms: Vec<Term<'a>>,
}

impl<'a> Objective<'a> {
    pub fn new(
        gen: &'a GeneratorHandle,
        specs: &[LossTermSpec],
        registry: &'a Registry,
        hogfd: Option<&'a HogfdModel>,
        sketch: &ImageTensor,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Precondition("no loss terms".into()));
        }
        let mut terms = Vec::with_capacity(specs.len());
        for spec in specs {
            spec.validate()?;
            let wrap = |e| Error::Term { term: spec.label(), source: Box::new(e) };
            let term = match spec.kind {
                TermKind::Appearance => {
                    let ext = registry.get(spec.extractor_id.as_deref().unwrap_or_default()).map_err(wrap)?;
                    let target = ext.extract(sketch).map_err(wrap)?;
                    Term::Appearance { ext, target }
                }
                TermKind::Manifold => {
                    let hogfd = hogfd.ok_or_else(|| wrap(Error::Precondition("manifold term needs a HOGFD model".into())))?;
                    hogfd.max_score().ok_or_else(|| wrap(Error::Precondition("HOGFD model has no max_score".into())))?;
                    Term::Manifold { hogfd }
                }
            };
            terms.push(term);
        }
        Ok(Objective { gen, specs: specs.to_vec(), terms })
    }

    pub fn labels(&self) -> Vec<String> {
        self.specs.iter().map(LossTermSpec::label).collect()
    }

    /// Builds the total on `tape` from an `18 × width` latent variable.
    /// Zero-weight terms are evaluated for the record but left out of the sum.
    fn build<'t>(&self, tape: &'t Tape, w: Var<'t>) -> Result<(Var<'t>, Vec<(String, f64)>)> {
        let img = self.gen.synthesize_var(tape, w)?;
        let range = ImageRange::SignedUnit;
        let mut total: Option<Var<'t>> = None;
        let mut parts = Vec::with_capacity(self.terms.len());
        for (spec, term) in self.specs.iter().zip(&self.terms) {
            let wrap = |e| Error::Term { term: spec.label(), source: Box::new(e) };
            let v = match term {
                Term::Appearance { ext, target } => appearance_loss_var(img, &range, target, ext).map_err(wrap)?,
                Term::Manifold { hogfd } => hogfd.manifold_loss_var(img, &range).map_err(wrap)?,
            };
            parts.push((spec.label(), v.item()));
            if spec.weight != 0.0 {
                let wv = if spec.weight == 1.0 { v } else { v.scale(spec.weight) };
                total = Some(match total {
                    Some(t) => t.add(wv),
                    None => wv,
                });
            }
        }
        let total = total.unwrap_or_else(|| tape.constant(Tensor::from_elem(ndarray::IxDyn(&[]), 0.0)));
        Ok((total, parts))
    }

    pub fn evaluate(&self, w: &LatentCode) -> Result<LossBreakdown> {
        self.gen.check_latent(w)?;
        let tape = Tape::new();
        let wv = tape.constant(w.rows().clone().into_dyn());
        let (total, terms) = self.build(&tape, wv)?;
        Ok(LossBreakdown { total: total.item(), terms })
    }

    /// Loss and its gradient with respect to all 18 rows.
    pub fn value_and_grad(&self, w: &LatentCode) -> Result<(LossBreakdown, Array2<f64>)> {
        self.gen.check_latent(w)?;
        let tape = Tape::new();
        let wv = tape.leaf(w.rows().clone().into_dyn());
        let (total, terms) = self.build(&tape, wv)?;
        let grads = tape.gradients(total);
        let g = grads
            .wrt(wv)
            .cloned()
            .map(|g| g.into_dimensionality::<Ix2>().unwrap())
            .unwrap_or_else(|| Array2::zeros(w.shape()));
        Ok((LossBreakdown { total: total.item(), terms }, g))
    }
}

/// One-shot evaluation of the objective at `w`.
pub fn total_loss(
    w: &LatentCode,
    gen: &GeneratorHandle,
    terms: &[LossTermSpec],
    sketch: &ImageTensor,
    registry: &Registry,
    hogfd: Option<&HogfdModel>,
) -> Result<LossBreakdown> {
    Objective::new(gen, terms, registry, hogfd, sketch)?.evaluate(w)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxIter,
    Plateau,
    Divergence,
}

#[derive(Clone, Debug)]
pub struct InversionRun {
    pub initial: LatentCode,
    pub final_w: LatentCode,
    pub term_labels: Vec<String>,
    /// Total loss before each executed step.
    pub total: Vec<f64>,
    /// Per-term values, one row per executed step.
    pub per_term: Vec<Vec<f64>>,
    /// Loss at `final_w`; `None` after divergence.
    pub final_loss: Option<f64>,
    pub snapshots: Vec<(usize, ImageTensor)>,
    pub stop: StopReason,
    pub config: InversionConfig,
    pub wall_time: Duration,
}

impl InversionRun {
    pub fn iterations(&self) -> usize {
        self.total.len()
    }

    /// Loss table: `iteration,total,<term labels…>`.
    pub fn losses_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["iteration".to_string(), "total".to_string()];
        header.extend(self.term_labels.iter().cloned());
        w.write_record(&header).map_err(|e| Error::Data(e.to_string()))?;
        for (i, (t, parts)) in self.total.iter().zip(&self.per_term).enumerate() {
            let mut rec = vec![i.to_string(), format!("{t:e}")];
            rec.extend(parts.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec).map_err(|e| Error::Data(e.to_string()))?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::Data(e.to_string()))?).map_err(|e| Error::Data(e.to_string()))
    }

    pub fn summary(&self) -> serde_json::Value {
        serde_json::json!({
            "iterations": self.iterations(),
            "stop": self.stop,
            "initial_loss": self.total.first(),
            "final_loss": self.final_loss,
            "terms": self.term_labels,
            "wall_time_s": self.wall_time.as_secs_f64(),
        })
    }

    /// Writes the run directory: `config.toml`, `losses.csv`, `snapshots/`,
    /// `final.png`, `summary.json` and both latent codes as `.npy`.
    pub fn save(&self, dir: &Path, final_image: &ImageTensor) -> Result<()> {
        std::fs::create_dir_all(dir.join("snapshots"))?;
        let cfg = toml::to_string(&self.config).map_err(|e| Error::Config(e.to_string()))?;
        std::fs::write(dir.join("config.toml"), cfg)?;
        std::fs::write(dir.join("losses.csv"), self.losses_csv()?)?;
        for (it, img) in &self.snapshots {
            img.save_png(&dir.join("snapshots").join(format!("iter_{it:05}.png")))?;
        }
        final_image.save_png(&dir.join("final.png"))?;
        let summary = serde_json::to_string_pretty(&self.summary()).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(dir.join("summary.json"), summary + "\n")?;
        let npy = |name: &str, w: &LatentCode| {
            ndarray_npy::write_npy(dir.join(name), w.rows()).map_err(|e| Error::Data(e.to_string()))
        };
        npy("w_initial.npy", &self.initial)?;
        npy("w_final.npy", &self.final_w)
    }
}

enum Stepper {
    Adam(Adam),
    Sgd(f64),
}

impl Stepper {
    fn step(&mut self, x: &mut Array2<f64>, g: &Array2<f64>) {
        match self {
            Stepper::Adam(adam) => {
                let mut p = ParamMap::new();
                p.insert("w".into(), Arc::new(std::mem::take(x).into_dyn()));
                let grads = std::iter::once(("w".to_string(), g.clone().into_dyn())).collect();
                adam.step(&mut p, &grads);
                let v = p.remove("w").unwrap();
                *x = Arc::unwrap_or_clone(v).into_dimensionality::<Ix2>().unwrap();
            }
            Stepper::Sgd(lr) => x.scaled_add(-*lr, g),
        }
    }
}

fn expand(x: &Array2<f64>, mode: RowMode) -> Result<LatentCode> {
    match mode {
        RowMode::Joint18 => LatentCode::new(x.clone()),
        RowMode::Shared1 => LatentCode::broadcast(x.row(0).as_slice().unwrap()),
    }
}

/// Gradient descent on the latent code, recording the trajectory.
///
/// Losses are recorded before each step. A non-finite loss or gradient ends
/// the run with `StopReason::Divergence` and the last finite iterate.
pub fn optimize(w0: &LatentCode, objective: &Objective<'_>, cfg: &InversionConfig) -> Result<InversionRun> {
    cfg.validate()?;
    if w0.rows().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("initial latent code".into()));
    }
    objective.gen.check_latent(w0)?;
    let start = Instant::now();
    let mut x = match cfg.optimize_rows {
        RowMode::Joint18 => w0.rows().clone(),
        RowMode::Shared1 => w0.rows().mean_axis(Axis(0)).unwrap().insert_axis(Axis(0)),
    };
    let mut stepper = match cfg.optimizer {
        OptimizerKind::Adam => Stepper::Adam(Adam::new(cfg.step_size)),
        OptimizerKind::Sgd => Stepper::Sgd(cfg.step_size),
    };
    let mut total = Vec::new();
    let mut per_term = Vec::new();
    let mut snapshots = Vec::new();
    let mut stop = StopReason::MaxIter;
    let mut last_good = x.clone();
    for it in 0..cfg.max_iterations {
        let w = expand(&x, cfg.optimize_rows)?;
        let (loss, g18) = objective.value_and_grad(&w)?;
        if !loss.total.is_finite() || g18.iter().any(|v| !v.is_finite()) {
            stop = StopReason::Divergence;
            x = last_good;
            break;
        }
        total.push(loss.total);
        per_term.push(loss.terms.iter().map(|(_, v)| *v).collect());
        if cfg.snapshot_every > 0 && it % cfg.snapshot_every == 0 {
            snapshots.push((it, objective.gen.synthesize(&w)?));
        }
        let n = total.len();
        if cfg.plateau_patience > 0 && n > cfg.plateau_patience {
            let old = total[n - 1 - cfg.plateau_patience];
            let gain = (old - loss.total) / old.abs().max(1e-12);
            if gain < cfg.plateau_tolerance {
                stop = StopReason::Plateau;
                break;
            }
        }
        let g = match cfg.optimize_rows {
            RowMode::Joint18 => g18,
            RowMode::Shared1 => g18.sum_axis(Axis(0)).insert_axis(Axis(0)),
        };
        last_good = x.clone();
        stepper.step(&mut x, &g);
        if x.iter().any(|v| !v.is_finite()) {
            stop = StopReason::Divergence;
            x = last_good;
            break;
        }
    }
    let final_w = expand(&x, cfg.optimize_rows)?;
    let final_loss = match stop {
        StopReason::Divergence => None,
        _ => Some(objective.evaluate(&final_w)?.total).filter(|v| v.is_finite()),
    };
    Ok(InversionRun {
        initial: w0.clone(),
        final_w,
        term_labels: objective.labels(),
        total,
        per_term,
        final_loss,
        snapshots,
        stop,
        config: cfg.clone(),
        wall_time: start.elapsed(),
    })
}

/// Everything needed to turn a sketch into a photo.
pub struct Bundle {
    pub gen: GeneratorHandle,
    pub mapper: MapperModel,
    pub registry: Registry,
    pub hogfd: Option<HogfdModel>,
    pub config: InversionConfig,
}

impl Bundle {
    /// Checks that the mapper speaks the generator's latent shape and that
    /// its extractor is registered and loaded.
    pub fn check(&self) -> Result<()> {
        let ext = self.registry.get(self.mapper.extractor_id())?;
        if !ext.is_loaded() {
            return Err(Error::WeightsMissing(ext.id().to_string()));
        }
        if ext.spec().feature_dim != self.mapper.feature_dim() {
            return Err(Error::ExtractorMismatch {
                expected: format!("{} (d={})", self.mapper.extractor_id(), self.mapper.feature_dim()),
                found: format!("{} (d={})", ext.id(), ext.spec().feature_dim),
            });
        }
        if self.mapper.latent_shape() != self.gen.latent_shape() {
            return Err(Error::ShapeMismatch(format!(
                "mapper predicts {:?}, generator takes {:?}",
                self.mapper.latent_shape(),
                self.gen.latent_shape()
            )));
        }
        let gid = self.mapper.generator_id();
        if !gid.is_empty() && gid != self.gen.checkpoint_id() {
            return Err(Error::Precondition(format!(
                "mapper was trained on generator {gid}, bundle has {}",
                self.gen.checkpoint_id()
            )));
        }
        self.config.validate()
    }

    /// F2W initialization from the sketch.
    pub fn initial_latent(&self, sketch: &ImageTensor) -> Result<LatentCode> {
        let ext = self.registry.get(self.mapper.extractor_id())?;
        self.mapper.map_features(&ext.extract(sketch)?)
    }
}

/// Initialize with F2W, optimize, and synthesize the final code.
pub fn invert_sketch(sketch: &ImageTensor, bundle: &Bundle) -> Result<(ImageTensor, InversionRun)> {
    invert_with(sketch, bundle, &bundle.config)
}

/// As [`invert_sketch`] with an explicit configuration.
pub fn invert_with(sketch: &ImageTensor, bundle: &Bundle, cfg: &InversionConfig) -> Result<(ImageTensor, InversionRun)> {
    bundle.check()?;
    cfg.validate()?;
    let w0 = bundle.initial_latent(sketch)?;
    let objective = Objective::new(&bundle.gen, &cfg.terms, &bundle.registry, bundle.hogfd.as_ref(), sketch)?;
    let run = optimize(&w0, &objective, cfg)?;
    let img = bundle.gen.synthesize(&run.final_w)?;
    debug_assert_eq!(run.final_w.shape().0, LATENT_ROWS);
    Ok((img, run))
}
