//! Corpus handling, configuration, run manifests and the stage drivers used
//! by the command-line tool.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extractors::ToyExtractor;
use crate::extractors::{Extractor, Registry};
use crate::f2w::{self, MapperConfig, MapperModel};
use crate::generator::ToyGenerator;
use crate::generator::{load_generator, sample_noise, GeneratorHandle, GeneratorKind};
use crate::image::{ImageRange, ImageTensor};
use crate::inversion::{invert_with, Bundle, InversionConfig, InversionRun, LossTermSpec, StopReason};
use crate::manifold::{
    build_faceness_dataset, train_hogfd, CommandOracle, FacenessDataConfig, FacenessOracle, HogfdConfig, HogfdModel,
    SmoothnessOracle,
};
use crate::metrics::{self, Distance, IqaReport, RecognitionReport};

/// Root against which relative asset paths are resolved.
pub const ASSET_ROOT_ENV: &str = "SKETCH2FACE_ASSETS";
pub const TOOLKIT_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn resolve_asset(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_path_buf();
    }
    match std::env::var_os(ASSET_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusRecord {
    pub id: String,
    pub photo: PathBuf,
    pub sketch: PathBuf,
    pub split: Option<Split>,
}

/// Photo/sketch pairs matched by file stem, sorted by identity.
#[derive(Clone, Debug, PartialEq)]
pub struct PairedCorpus {
    pub root: PathBuf,
    pub records: Vec<CorpusRecord>,
    /// Files without a partner, reported but not loaded.
    pub orphans: Vec<PathBuf>,
    pub split_seed: Option<u64>,
}

fn pngs(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir)? {
        let path = entry?.path();
        let is_png = path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"));
        if let (true, Some(stem)) = (is_png, path.file_stem().and_then(|s| s.to_str())) {
            out.insert(stem.to_string(), path.clone());
        }
    }
    Ok(out)
}

/// Reads `photos/<id>.png` and `sketches/<id>.png` under `root`.
pub fn load_corpus(root: &Path) -> Result<PairedCorpus> {
    if !root.is_dir() {
        return Err(Error::MissingFile(root.to_path_buf()));
    }
    let photos = pngs(&root.join("photos"))?;
    let sketches = pngs(&root.join("sketches"))?;
    let mut records = Vec::new();
    let mut orphans = Vec::new();
    for (id, photo) in &photos {
        match sketches.get(id) {
            Some(sketch) => records.push(CorpusRecord {
                id: id.clone(),
                photo: photo.clone(),
                sketch: sketch.clone(),
                split: None,
            }),
            None => orphans.push(photo.clone()),
        }
    }
    orphans.extend(sketches.iter().filter(|(id, _)| !photos.contains_key(*id)).map(|(_, p)| p.clone()));
    if records.is_empty() {
        let listed: Vec<String> = orphans.iter().map(|p| p.display().to_string()).collect();
        return Err(Error::Data(format!(
            "no photo/sketch pairs under {} (orphans: [{}])",
            root.display(),
            listed.join(", ")
        )));
    }
    for o in &orphans {
        log::warn!("unpaired corpus file {}", o.display());
    }
    Ok(PairedCorpus { root: root.to_path_buf(), records, orphans, split_seed: None })
}

impl PairedCorpus {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn subset(&self, split: Split) -> Vec<&CorpusRecord> {
        self.records.iter().filter(|r| r.split == Some(split)).collect()
    }
}

/// Seeded random choice of `n_train` training records; the rest are test.
pub fn split_corpus(c: &PairedCorpus, n_train: usize, seed: u64) -> Result<PairedCorpus> {
    if n_train >= c.len() {
        return Err(Error::Precondition(format!("n_train {n_train} must be below the record count {}", c.len())));
    }
    let mut order: Vec<usize> = (0..c.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let train: BTreeSet<usize> = order[..n_train].iter().copied().collect();
    let mut out = c.clone();
    for (i, r) in out.records.iter_mut().enumerate() {
        r.split = Some(if train.contains(&i) { Split::Train } else { Split::Test });
    }
    out.split_seed = Some(seed);
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssetConfig {
    pub generator_kind: GeneratorKind,
    /// Toy generator seed used when `generator` is unset.
    pub toy_seed: u64,
    pub generator: Option<PathBuf>,
    /// TOML registry of extractor weights.
    pub extractors: Option<PathBuf>,
    pub mapper: Option<PathBuf>,
    pub hogfd: Option<PathBuf>,
}

impl Default for AssetConfig {
    fn default() -> Self {
        AssetConfig {
            generator_kind: GeneratorKind::Pretrained,
            toy_seed: 1234,
            generator: None,
            extractors: None,
            mapper: None,
            hogfd: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PairDataConfig {
    pub n: usize,
    pub seed: u64,
    /// Extractor whose features feed the mapper.
    pub extractor: String,
}

impl Default for PairDataConfig {
    fn default() -> Self {
        PairDataConfig { n: 50_000, seed: 0, extractor: crate::extractors::INIT_EXTRACTOR.into() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OracleConfig {
    /// Toy stand-in scoring image smoothness.
    #[default]
    Smoothness,
    /// External detector, see [`CommandOracle`].
    Command {
        program: PathBuf,
        #[serde(default)]
        args: Vec<String>,
    },
}

impl OracleConfig {
    pub fn build(&self) -> Box<dyn FacenessOracle> {
        match self {
            OracleConfig::Smoothness => Box::new(SmoothnessOracle),
            OracleConfig::Command { program, args } => Box::new(CommandOracle::new(program.clone(), args.clone())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub n_train: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig { n_train: 40, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    /// Extractor ids standing for L1, L2 and L3 in the combination labels.
    pub extractors: [String; 3],
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig { extractors: ["vggface".into(), "vggface2".into(), "vgg16".into()] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    pub distance: Distance,
    /// Recognizers for rank-1; defaults to every loaded extractor.
    pub recognizers: Vec<String>,
}

impl Default for EvaluationConfig {
    fn default() -> Self {
        EvaluationConfig { distance: Distance::Euclidean, recognizers: Vec::new() }
    }
}

/// Whole-toolkit configuration, one TOML table per stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub assets: AssetConfig,
    pub pairs: PairDataConfig,
    pub mapper: MapperConfig,
    pub faceness: FacenessDataConfig,
    pub oracle: OracleConfig,
    pub hogfd: HogfdConfig,
    pub inversion: InversionConfig,
    pub corpus: CorpusConfig,
    pub ablation: AblationConfig,
    pub evaluation: EvaluationConfig,
}

impl Config {
    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = fs::read_to_string(path)?;
        let cfg: Config = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.inversion.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Settings matching the toy assets written by [`make_toy_assets`].
    pub fn toy(seed: u64) -> Self {
        Config {
            assets: AssetConfig {
                generator_kind: GeneratorKind::Toy,
                toy_seed: seed,
                generator: Some("generator.safetensors".into()),
                extractors: Some("extractors.toml".into()),
                mapper: Some("mapper.safetensors".into()),
                hogfd: Some("hogfd.safetensors".into()),
            },
            pairs: PairDataConfig { n: 1000, seed, extractor: "toy".into() },
            mapper: MapperConfig { seed, ..MapperConfig::toy() },
            faceness: FacenessDataConfig { n: 300, seed, latent_jitter: 1.0, store_resolution: Some(32) },
            oracle: OracleConfig::Smoothness,
            hogfd: HogfdConfig { seed, ..HogfdConfig::toy() },
            inversion: InversionConfig {
                terms: vec![LossTermSpec::appearance("toy"), LossTermSpec::manifold()],
                step_size: 0.05,
                max_iterations: 200,
                seed,
                snapshot_every: 50,
                ..InversionConfig::default()
            },
            corpus: CorpusConfig { n_train: 4, seed },
            ablation: AblationConfig { extractors: ["toy".into(), TOY_EXTRA[0].0.into(), TOY_EXTRA[1].0.into()] },
            evaluation: EvaluationConfig::default(),
        }
    }

    /// Relative asset paths resolve against `base` when given, otherwise
    /// against the asset root.
    pub fn rebase(&mut self, base: &Path) {
        let a = &mut self.assets;
        for p in [&mut a.generator, &mut a.extractors, &mut a.mapper, &mut a.hogfd].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

fn asset(p: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    p.as_ref()
        .map(|p| resolve_asset(p))
        .ok_or_else(|| Error::Config(format!("no {what} path configured")))
}

pub fn load_generator_from(cfg: &AssetConfig) -> Result<GeneratorHandle> {
    match (&cfg.generator, cfg.generator_kind) {
        (None, GeneratorKind::Toy) => Ok(GeneratorHandle::toy(cfg.toy_seed)),
        (p, kind) => load_generator(&asset(p, "generator")?, kind),
    }
}

pub fn load_registry(cfg: &AssetConfig) -> Result<Registry> {
    match &cfg.extractors {
        None => Ok(Registry::builtin()),
        Some(p) => Registry::from_manifest(&resolve_asset(p)),
    }
}

pub fn load_bundle(cfg: &Config) -> Result<Bundle> {
    let gen = load_generator_from(&cfg.assets)?;
    let registry = load_registry(&cfg.assets)?;
    let mapper = MapperModel::load(&asset(&cfg.assets.mapper, "mapper")?)?;
    let needs_hogfd = cfg.inversion.terms.iter().any(|t| t.kind == crate::inversion::TermKind::Manifold);
    let hogfd = match (&cfg.assets.hogfd, needs_hogfd) {
        (Some(p), _) => Some(HogfdModel::load(&resolve_asset(p))?),
        (None, true) => return Err(Error::Config("manifold term configured but no hogfd path".into())),
        (None, false) => None,
    };
    let bundle = Bundle { gen, mapper, registry, hogfd, config: cfg.inversion.clone() };
    bundle.check()?;
    Ok(bundle)
}

/// Provenance record written next to every stage output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub toolkit_version: String,
    pub stage: String,
    pub checkpoints: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    pub config: String,
    pub started_unix: u64,
    pub finished_unix: u64,
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

impl RunManifest {
    pub fn start(stage: &str, cfg: &Config) -> Result<Self> {
        Ok(RunManifest {
            toolkit_version: TOOLKIT_VERSION.into(),
            stage: stage.into(),
            checkpoints: BTreeMap::new(),
            seeds: BTreeMap::new(),
            config: cfg.to_toml()?,
            started_unix: unix_now(),
            finished_unix: 0,
        })
    }

    pub fn checkpoint(&mut self, role: &str, id: &str) -> &mut Self {
        self.checkpoints.insert(role.into(), id.into());
        self
    }

    pub fn seed(&mut self, name: &str, seed: u64) -> &mut Self {
        self.seeds.insert(name.into(), seed);
        self
    }

    pub fn bundle(&mut self, b: &Bundle) -> &mut Self {
        self.checkpoint("generator", b.gen.checkpoint_id());
        self.checkpoint("mapper", b.mapper.checkpoint_id());
        if let Some(h) = &b.hogfd {
            self.checkpoint("hogfd", h.checkpoint_id());
        }
        for t in &b.config.terms {
            if let Some(id) = &t.extractor_id {
                if let Some(w) = b.registry.get(id).ok().and_then(|e| e.weights_id()) {
                    self.checkpoints.insert(format!("extractor.{id}"), w.to_string());
                }
            }
        }
        self
    }

    /// Writes `dir/run_manifest.toml`.
    pub fn write(&mut self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.write_to(&dir.join("run_manifest.toml"))
    }

    pub fn write_to(&mut self, path: &Path) -> Result<()> {
        self.finished_unix = unix_now();
        let text = toml::to_string(self).map_err(|e| Error::Config(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }
}

/// Extra toy extractors so the ablation grid has three distinct recognizers.
pub const TOY_EXTRA: [(&str, u64); 2] = [("toy2", 1235), ("toy3", 1236)];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ToyAssetSizes {
    pub pairs: usize,
    pub faceness: usize,
    pub corpus: usize,
}

impl Default for ToyAssetSizes {
    fn default() -> Self {
        ToyAssetSizes { pairs: 1000, faceness: 300, corpus: 12 }
    }
}

/// Writes a complete toy asset set under `dir`: generator, extractors,
/// F2W data and mapper, faceness data and HOGFD, a small corpus and a
/// `config.toml` pointing at all of it. Identical seeds give identical files.
pub fn make_toy_assets(dir: &Path, seed: u64, sizes: &ToyAssetSizes) -> Result<Config> {
    fs::create_dir_all(dir)?;
    let mut cfg = Config::toy(seed);
    cfg.pairs.n = sizes.pairs;
    cfg.faceness.n = sizes.faceness;
    cfg.corpus.n_train = sizes.corpus / 3;

    let gen_net = ToyGenerator::from_seed(seed);
    gen_net.save(&dir.join("generator.safetensors"))?;
    let gen = GeneratorHandle::toy(seed);

    let mut manifest = String::new();
    for (id, s) in TOY_EXTRA {
        let file = format!("extractor_{id}.safetensors");
        ToyExtractor::from_seed(s).save(&dir.join(&file))?;
        manifest.push_str(&format!("[[extractor]]\nid = \"{id}\"\narch = \"toy\"\nweights = \"{file}\"\ninput_resolution = 32\nmean = [0.5, 0.5, 0.5]\nscale = [0.5, 0.5, 0.5]\n\n"));
    }
    fs::write(dir.join("extractors.toml"), manifest)?;
    let registry = Registry::from_manifest(&dir.join("extractors.toml"))?;

    let ext = registry.get(&cfg.pairs.extractor)?;
    let pairs = f2w::build_pair_dataset(&gen, ext, cfg.pairs.n, cfg.pairs.seed)?;
    pairs.save(&dir.join("f2w_data"))?;
    let mapper = f2w::train_mapper(&pairs, &cfg.mapper)?;
    mapper.save(&dir.join("mapper.safetensors"))?;

    let faces = build_faceness_dataset(&gen, cfg.oracle.build().as_ref(), &cfg.faceness)?;
    faces.save(&dir.join("faceness_data"))?;
    let hogfd = train_hogfd(&faces, &cfg.hogfd)?;
    hogfd.save(&dir.join("hogfd.safetensors"))?;

    write_toy_corpus(&gen, &dir.join("corpus"), sizes.corpus, seed)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;

    let mut m = RunManifest::start("make-toy-assets", &cfg)?;
    m.checkpoint("generator", gen.checkpoint_id())
        .checkpoint("mapper", mapper.checkpoint_id())
        .checkpoint("hogfd", hogfd.checkpoint_id())
        .seed("toy", seed);
    m.write(dir)?;
    Ok(cfg)
}

/// Toy photos with grayscale copies standing in for sketches.
fn write_toy_corpus(gen: &GeneratorHandle, dir: &Path, n: usize, seed: u64) -> Result<()> {
    fs::create_dir_all(dir.join("photos"))?;
    fs::create_dir_all(dir.join("sketches"))?;
    for i in 0..n {
        let w = gen.map_noise(&sample_noise(seed.wrapping_mul(1000).wrapping_add(i as u64 + 500_000)))?;
        let photo = gen.synthesize(&w)?;
        let id = format!("id{i:03}");
        photo.save_png(&dir.join("photos").join(format!("{id}.png")))?;
        let gray = photo.luminance()?.insert_axis(ndarray::Axis(2));
        ImageTensor::new(gray, ImageRange::Unit)?.save_png(&dir.join("sketches").join(format!("{id}.png")))?;
    }
    Ok(())
}

/// The seven loss combinations of the ablation grid, labeled `d` to `j`.
pub fn ablation_combos(l: &[String; 3]) -> Vec<(String, Vec<LossTermSpec>)> {
    let app = |i: usize| LossTermSpec::appearance(&l[i]);
    let m = LossTermSpec::manifold;
    vec![
        ("d".into(), vec![app(0)]),
        ("e".into(), vec![app(1)]),
        ("f".into(), vec![app(0), app(1), app(2)]),
        ("g".into(), vec![app(0), m()]),
        ("h".into(), vec![app(1), m()]),
        ("i".into(), vec![app(0), app(1), m()]),
        ("j".into(), vec![app(0), app(1), app(2), m()]),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum CellOutcome {
    Ok {
        iterations: usize,
        initial_loss: Option<f64>,
        final_loss: Option<f64>,
        stop: StopReason,
    },
    Failed {
        error: String,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationCell {
    pub sketch: String,
    pub combo: String,
    pub outcome: CellOutcome,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub combos: Vec<String>,
    pub cells: Vec<AblationCell>,
}

impl AblationReport {
    /// `sketch,combo,status,iterations,initial_loss,final_loss,stop,error`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sketch,combo,status,iterations,initial_loss,final_loss,stop,error\n");
        let f = |v: &Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        for c in &self.cells {
            match &c.outcome {
                CellOutcome::Ok { iterations, initial_loss, final_loss, stop } => s.push_str(&format!(
                    "{},{},ok,{iterations},{},{},{},\n",
                    c.sketch,
                    c.combo,
                    f(initial_loss),
                    f(final_loss),
                    serde_json::to_value(stop).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default()
                )),
                CellOutcome::Failed { error } => {
                    s.push_str(&format!("{},{},failed,,,,,\"{}\"\n", c.sketch, c.combo, error.replace('"', "'")))
                }
            }
        }
        s
    }
}

/// One inversion per (sketch, combination). Cells run independently; a
/// failing cell is recorded and the others still complete. With `out`, each
/// successful cell writes `out/<sketch>/<combo>/`.
pub fn run_ablation(
    sketches: &[(String, ImageTensor)],
    bundle: &Bundle,
    combos: &[(String, Vec<LossTermSpec>)],
    out: Option<&Path>,
) -> Result<AblationReport> {
    if combos.is_empty() {
        return Err(Error::Precondition("no ablation combinations".into()));
    }
    let jobs: Vec<(&(String, ImageTensor), &(String, Vec<LossTermSpec>))> =
        sketches.iter().flat_map(|s| combos.iter().map(move |c| (s, c))).collect();
    let cells = jobs
        .par_iter()
        .map(|((sid, sketch), (label, terms))| {
            let cfg = InversionConfig { terms: terms.clone(), ..bundle.config.clone() };
            let run = invert_with(sketch, bundle, &cfg).and_then(|(img, run)| {
                if let Some(dir) = out {
                    run.save(&dir.join(sid).join(label), &img)?;
                }
                Ok(run)
            });
            let outcome = match run {
                Ok(run) => CellOutcome::Ok {
                    iterations: run.iterations(),
                    initial_loss: run.total.first().copied(),
                    final_loss: run.final_loss,
                    stop: run.stop,
                },
                Err(e) => CellOutcome::Failed { error: e.to_string() },
            };
            AblationCell { sketch: sid.clone(), combo: label.clone(), outcome }
        })
        .collect();
    Ok(AblationReport { combos: combos.iter().map(|c| c.0.clone()).collect(), cells })
}

/// Inverts one sketch and writes the run directory plus its manifest.
pub fn invert_to_dir(sketch_path: &Path, bundle: &Bundle, cfg: &Config, out: &Path) -> Result<InversionRun> {
    let sketch = ImageTensor::load_png(sketch_path)?;
    let mut manifest = RunManifest::start("invert", cfg)?;
    manifest.bundle(bundle).seed("inversion", cfg.inversion.seed);
    let (img, run) = invert_with(&sketch, bundle, &cfg.inversion)?;
    run.save(out, &img)?;
    manifest.write(out)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Evaluation {
    pub iqa: IqaReport,
    pub recognition: Vec<RecognitionReport>,
}

fn load_dir(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(Error::MissingFile(dir.to_path_buf()));
    }
    pngs(dir)
}

/// Image quality and rank-1 recognition of synthesized photos against
/// references with the same file names. References form the gallery.
pub fn evaluate_dirs(
    reference: &Path,
    synthesized: &Path,
    registry: &Registry,
    cfg: &EvaluationConfig,
) -> Result<Evaluation> {
    let refs = load_dir(reference)?;
    let syns = load_dir(synthesized)?;
    let names: Vec<&String> = refs.keys().filter(|k| syns.contains_key(*k)).collect();
    if names.is_empty() {
        return Err(Error::Data(format!(
            "no common file names in {} and {}",
            reference.display(),
            synthesized.display()
        )));
    }
    let pairs: Vec<(String, ImageTensor, ImageTensor)> = names
        .par_iter()
        .map(|n| Ok(((*n).clone(), ImageTensor::load_png(&refs[*n])?, ImageTensor::load_png(&syns[*n])?)))
        .collect::<Result<_>>()?;
    let matched: Vec<(String, ImageTensor, ImageTensor)> = pairs
        .into_iter()
        .map(|(n, r, s)| {
            let s = if (s.height(), s.width()) == (r.height(), r.width()) { s } else { s.resize(r.height(), r.width())? };
            let s = if s.channels() == r.channels() { s } else { ImageTensor::new(s.luminance()?.insert_axis(ndarray::Axis(2)), ImageRange::Unit)? };
            let r = if r.channels() == s.channels() { r } else { ImageTensor::new(r.luminance()?.insert_axis(ndarray::Axis(2)), ImageRange::Unit)? };
            Ok((n, r, s))
        })
        .collect::<Result<_>>()?;
    let iqa = metrics::iqa_report(&matched)?;
    let recognizers: Vec<&Extractor> = if cfg.recognizers.is_empty() {
        registry.ids().into_iter().filter_map(|id| registry.get(id).ok()).filter(|e| e.is_loaded()).collect()
    } else {
        cfg.recognizers.iter().map(|id| registry.get(id)).collect::<Result<_>>()?
    };
    let gallery: Vec<(String, ImageTensor)> = matched.iter().map(|(n, r, _)| (n.clone(), r.clone())).collect();
    let probes: Vec<(String, ImageTensor)> = matched.iter().map(|(n, _, s)| (n.clone(), s.clone())).collect();
    let recognition = recognizers
        .into_iter()
        .map(|e| metrics::rank1_accuracy(&gallery, &probes, e, cfg.distance))
        .collect::<Result<_>>()?;
    Ok(Evaluation { iqa, recognition })
}

impl Evaluation {
    /// Writes `iqa.csv`, `table_iqa.csv` and `table_rank1.csv` into `dir`.
    pub fn save(&self, dir: &Path, method: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        self.iqa.write_csv(&dir.join("iqa.csv"))?;
        fs::write(dir.join("table_iqa.csv"), self.iqa.summary_table(method))?;
        let mut t = String::from("method");
        for r in &self.recognition {
            t.push_str(&format!(",{}", r.extractor_id));
        }
        t.push_str(&format!("\n{method}"));
        for r in &self.recognition {
            t.push_str(&format!(",{:.4}", r.accuracy));
        }
        t.push('\n');
        fs::write(dir.join("table_rank1.csv"), t)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch_png(path: &Path) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        ImageTensor::filled(4, 4, 1, 0.5, ImageRange::Unit).unwrap().save_png(path).unwrap();
    }

    #[test]
    fn corpus_matching_and_orphans() {
        let dir = tempfile::tempdir().unwrap();
        for id in ["a", "b", "c"] {
            touch_png(&dir.path().join("photos").join(format!("{id}.png")));
        }
        for id in ["a", "b"] {
            touch_png(&dir.path().join("sketches").join(format!("{id}.png")));
        }
        let c = load_corpus(dir.path()).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(c.orphans.len(), 1);
        assert!(c.orphans[0].ends_with("photos/c.png"));
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::Data(_))));
        touch_png(&dir.path().join("photos/x.png"));
        let err = load_corpus(dir.path()).unwrap_err().to_string();
        assert!(err.contains("x.png"));
    }

    fn fake_corpus(n: usize) -> PairedCorpus {
        PairedCorpus {
            root: PathBuf::new(),
            records: (0..n)
                .map(|i| CorpusRecord {
                    id: format!("{i:03}"),
                    photo: PathBuf::new(),
                    sketch: PathBuf::new(),
                    split: None,
                })
                .collect(),
            orphans: vec![],
            split_seed: None,
        }
    }

    #[test]
    fn split_40_of_123() {
        let c = fake_corpus(123);
        let s = split_corpus(&c, 40, 7).unwrap();
        assert_eq!(s.subset(Split::Train).len(), 40);
        assert_eq!(s.subset(Split::Test).len(), 83);
        assert_eq!(s, split_corpus(&c, 40, 7).unwrap());
        assert_ne!(s, split_corpus(&c, 40, 8).unwrap());
        assert!(split_corpus(&c, 123, 7).is_err());
    }

    #[test]
    fn combos_are_labeled_d_to_j() {
        let l = AblationConfig::default().extractors;
        let c = ablation_combos(&l);
        assert_eq!(c.iter().map(|c| c.0.as_str()).collect::<String>(), "defghij");
        assert_eq!(c[6].1.len(), 4);
    }

    #[test]
    fn config_round_trip_and_rejects_unknown_keys() {
        let cfg = Config::toy(3);
        let back: Config = toml::from_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert!(toml::from_str::<Config>("[inversion]\nstepsize = 1.0\n").is_err());
        let partial: Config = toml::from_str("[inversion]\nstep_size = 0.5\n").unwrap();
        assert_eq!(partial.inversion.step_size, 0.5);
        assert_eq!(partial.inversion.max_iterations, 1000);
    }

    #[test]
    fn command_oracle_config() {
        let cfg: Config = toml::from_str("[oracle]\nkind = \"command\"\nprogram = \"python3\"\nargs = [\"tools/hog_faceness.py\"]\n").unwrap();
        assert_eq!(cfg.oracle.build().name(), "python3 tools/hog_faceness.py");
    }
}
