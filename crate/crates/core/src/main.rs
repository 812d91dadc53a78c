use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use sketch2face::f2w::{self, PairDataset};
use sketch2face::inversion::StopReason;
use sketch2face::manifold::{self, ScoredImageDataset};
use sketch2face::pipeline::{self, Config, RunManifest, Split, ToyAssetSizes, ASSET_ROOT_ENV};
use sketch2face::{Error, ImageTensor, Result};

#[derive(Parser)]
#[command(name = "sketch2face", version, about = "Sketch-to-photo face synthesis by latent-space inversion")]
struct Cli {
    /// TOML configuration; relative asset paths resolve against its directory
    /// unless the asset root variable is set.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum Command {
    /// Sample (feature, latent) pairs for mapper training.
    PrepareF2wData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the feature-to-latent mapper.
    TrainF2w {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate images and label them with the faceness oracle.
    PrepareFacenessData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the HOGFD faceness regressor.
    TrainHogfd {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Invert one sketch into a photo.
    Invert {
        #[arg(long)]
        sketch: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        max_iterations: Option<usize>,
        #[arg(long)]
        step_size: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the seven loss combinations over corpus sketches.
    Ablate {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Use only the first N sketches.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Image quality and rank-1 tables for synthesized photos.
    Evaluate {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        synthesized: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "proposed")]
        method: String,
    },
    /// Write a deterministic toy asset set and matching config.
    MakeToyAssets {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1234)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long, default_value_t = 300)]
        faceness: usize,
        #[arg(long, default_value_t = 12)]
        corpus: usize,
    },
}

fn load_config(path: &Option<PathBuf>) -> Result<Config> {
    let Some(path) = path else {
        return Ok(Config::default());
    };
    let mut cfg = Config::load(path)?;
    if std::env::var_os(ASSET_ROOT_ENV).is_none_or(|v| v.is_empty()) {
        cfg.rebase(path.parent().unwrap_or(Path::new(".")));
    }
    Ok(cfg)
}

fn sidecar(out: &Path) -> PathBuf {
    out.with_extension("run_manifest.toml")
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config)?;
    match cli.command {
        Command::PrepareF2wData { out, n, seed } => {
            cfg.pairs.n = n.unwrap_or(cfg.pairs.n);
            cfg.pairs.seed = seed.unwrap_or(cfg.pairs.seed);
            let gen = pipeline::load_generator_from(&cfg.assets)?;
            let registry = pipeline::load_registry(&cfg.assets)?;
            let ds = f2w::build_pair_dataset(&gen, registry.get(&cfg.pairs.extractor)?, cfg.pairs.n, cfg.pairs.seed)?;
            ds.save(&out)?;
            let mut m = RunManifest::start("prepare-f2w-data", &cfg)?;
            m.checkpoint("generator", gen.checkpoint_id()).seed("pairs", cfg.pairs.seed);
            m.write(&out)?;
            println!("wrote {} pairs to {}", ds.len(), out.display());
        }
        Command::TrainF2w { data, out, epochs } => {
            cfg.mapper.epochs = epochs.unwrap_or(cfg.mapper.epochs);
            let ds = PairDataset::load(&data)?;
            let model = f2w::train_mapper(&ds, &cfg.mapper)?;
            let id = model.save(&out)?;
            let mut m = RunManifest::start("train-f2w", &cfg)?;
            m.checkpoint("generator", ds.generator_id()).checkpoint("mapper", &id).seed("mapper", cfg.mapper.seed);
            m.write_to(&sidecar(&out))?;
            for (step, mse) in &model.log().holdout {
                println!("step {step:>6}  holdout latent mse {mse:.6e}");
            }
            println!("mapper {id}");
        }
        Command::PrepareFacenessData { out, n, seed } => {
            cfg.faceness.n = n.unwrap_or(cfg.faceness.n);
            cfg.faceness.seed = seed.unwrap_or(cfg.faceness.seed);
            let gen = pipeline::load_generator_from(&cfg.assets)?;
            let oracle = cfg.oracle.build();
            let ds = manifold::build_faceness_dataset(&gen, oracle.as_ref(), &cfg.faceness)?;
            ds.save(&out)?;
            let mut m = RunManifest::start("prepare-faceness-data", &cfg)?;
            m.checkpoint("generator", gen.checkpoint_id()).seed("faceness", cfg.faceness.seed);
            m.write(&out)?;
            println!("wrote {} scored images to {}", ds.len(), out.display());
        }
        Command::TrainHogfd { data, out, epochs } => {
            cfg.hogfd.epochs = epochs.unwrap_or(cfg.hogfd.epochs);
            let ds = ScoredImageDataset::load(&data)?;
            let model = manifold::train_hogfd(&ds, &cfg.hogfd)?;
            let id = model.save(&out)?;
            let mut m = RunManifest::start("train-hogfd", &cfg)?;
            m.checkpoint("generator", ds.generator_id()).checkpoint("hogfd", &id).seed("hogfd", cfg.hogfd.seed);
            m.write_to(&sidecar(&out))?;
            println!("hogfd {id}  max_score {:.6}", model.max_score().unwrap_or(f64::NAN));
        }
        Command::Invert { sketch, out, max_iterations, step_size, seed } => {
            let inv = &mut cfg.inversion;
            inv.max_iterations = max_iterations.unwrap_or(inv.max_iterations);
            inv.step_size = step_size.unwrap_or(inv.step_size);
            inv.seed = seed.unwrap_or(inv.seed);
            let bundle = pipeline::load_bundle(&cfg)?;
            let run = pipeline::invert_to_dir(&sketch, &bundle, &cfg, &out)?;
            println!(
                "{} iterations, stop {:?}, loss {:.6e} -> {:.6e}",
                run.iterations(),
                run.stop,
                run.total.first().copied().unwrap_or(f64::NAN),
                run.final_loss.unwrap_or(f64::NAN)
            );
            if run.stop == StopReason::Divergence {
                return Err(Error::Divergence(format!("inversion of {} diverged", sketch.display())));
            }
        }
        Command::Ablate { corpus, out, split, limit } => {
            let c = pipeline::load_corpus(&corpus)?;
            let c = match split {
                SplitArg::All => c,
                _ => pipeline::split_corpus(&c, cfg.corpus.n_train, cfg.corpus.seed)?,
            };
            let records: Vec<_> = match split {
                SplitArg::All => c.records.iter().collect(),
                SplitArg::Train => c.subset(Split::Train),
                SplitArg::Test => c.subset(Split::Test),
            };
            let sketches: Vec<(String, ImageTensor)> = records
                .iter()
                .take(limit.unwrap_or(usize::MAX))
                .map(|r| Ok((r.id.clone(), ImageTensor::load_png(&r.sketch)?)))
                .collect::<Result<_>>()?;
            let bundle = pipeline::load_bundle(&cfg)?;
            let combos = pipeline::ablation_combos(&cfg.ablation.extractors);
            let report = pipeline::run_ablation(&sketches, &bundle, &combos, Some(&out))?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("ablation.csv"), report.to_csv())?;
            let mut m = RunManifest::start("ablate", &cfg)?;
            m.bundle(&bundle).seed("corpus", cfg.corpus.seed);
            m.write(&out)?;
            let failed = report.cells.iter().filter(|c| matches!(c.outcome, pipeline::CellOutcome::Failed { .. })).count();
            println!("{} cells, {failed} failed; report in {}", report.cells.len(), out.join("ablation.csv").display());
        }
        Command::Evaluate { reference, synthesized, out, method } => {
            let registry = pipeline::load_registry(&cfg.assets)?;
            let ev = pipeline::evaluate_dirs(&reference, &synthesized, &registry, &cfg.evaluation)?;
            ev.save(&out, &method)?;
            let mut m = RunManifest::start("evaluate", &cfg)?;
            m.write(&out)?;
            print!("{}", ev.iqa.summary_table(&method));
            for r in &ev.recognition {
                println!("rank-1 {}: {:.4}", r.extractor_id, r.accuracy);
            }
        }
        Command::MakeToyAssets { out, seed, pairs, faceness, corpus } => {
            pipeline::make_toy_assets(&out, seed, &ToyAssetSizes { pairs, faceness, corpus })?;
            println!("toy assets in {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
