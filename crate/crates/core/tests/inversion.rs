use sketch2face::extractors::Registry;
use sketch2face::f2w::MapperModel;
use sketch2face::generator::sample_noise;
use sketch2face::inversion::{invert_with, optimize, Bundle, InversionConfig, LossTermSpec, Objective, OptimizerKind, StopReason};
use sketch2face::manifold::HogfdModel;
use sketch2face::{GeneratorHandle, ImageTensor, LatentCode};

fn setup() -> (GeneratorHandle, Registry, HogfdModel, ImageTensor) {
    let gen = GeneratorHandle::toy(1234);
    let mut hogfd = HogfdModel::init(32, 5).unwrap();
    hogfd.set_max_score(1.0);
    let sketch = gen.synthesize(&gen.map_noise(&sample_noise(11)).unwrap()).unwrap();
    (gen, Registry::builtin(), hogfd, sketch)
}

fn start(gen: &GeneratorHandle) -> LatentCode {
    gen.map_noise(&sample_noise(12)).unwrap()
}

#[test]
fn negative_gradient_is_a_descent_direction() {
    let (gen, reg, hogfd, sketch) = setup();
    let terms = [LossTermSpec::appearance("toy"), LossTermSpec::manifold().weighted(0.3)];
    let obj = Objective::new(&gen, &terms, &reg, Some(&hogfd), &sketch).unwrap();
    for seed in 20..25 {
        let w = gen.map_noise(&sample_noise(seed)).unwrap();
        let (b, g) = obj.value_and_grad(&w).unwrap();
        let mut h = 0.1;
        let mut decreased = false;
        for _ in 0..30 {
            let next = LatentCode::new(w.rows() - &(&g * h)).unwrap();
            if obj.evaluate(&next).unwrap().total < b.total {
                decreased = true;
                break;
            }
            h /= 2.0;
        }
        assert!(decreased, "seed {seed}: no decrease along -grad");
    }
}

#[test]
fn zero_weight_terms_leave_the_trajectory_unchanged() {
    let (gen, reg, hogfd, sketch) = setup();
    let cfg = InversionConfig { max_iterations: 25, step_size: 0.05, ..InversionConfig::default() };
    let a = [LossTermSpec::appearance("toy")];
    let b = [LossTermSpec::appearance("toy"), LossTermSpec::manifold().weighted(0.0)];
    let oa = Objective::new(&gen, &a, &reg, Some(&hogfd), &sketch).unwrap();
    let ob = Objective::new(&gen, &b, &reg, Some(&hogfd), &sketch).unwrap();
    let ra = optimize(&start(&gen), &oa, &InversionConfig { terms: a.to_vec(), ..cfg.clone() }).unwrap();
    let rb = optimize(&start(&gen), &ob, &InversionConfig { terms: b.to_vec(), ..cfg }).unwrap();
    assert_eq!(ra.total, rb.total);
    assert_eq!(ra.final_w, rb.final_w);
    assert_eq!(rb.term_labels, ["app:toy", "manifold"]);
}

#[test]
fn sgd_and_adam_both_reduce_the_loss() {
    let (gen, reg, hogfd, sketch) = setup();
    let terms = vec![LossTermSpec::appearance("toy"), LossTermSpec::manifold()];
    let obj = Objective::new(&gen, &terms, &reg, Some(&hogfd), &sketch).unwrap();
    for (optimizer, step_size) in [(OptimizerKind::Adam, 0.05), (OptimizerKind::Sgd, 0.01)] {
        let cfg = InversionConfig { terms: terms.clone(), optimizer, step_size, max_iterations: 60, ..InversionConfig::default() };
        let run = optimize(&start(&gen), &obj, &cfg).unwrap();
        assert_ne!(run.stop, StopReason::Divergence);
        assert!(run.final_loss.unwrap() < run.total[0], "{optimizer:?}");
    }
}

#[test]
fn end_to_end_inversion_improves_on_the_mapper_start() {
    let (gen, reg, hogfd, sketch) = setup();
    let bundle = Bundle {
        mapper: MapperModel::init(64, 32, gen.latent_shape(), "toy", 0),
        gen,
        registry: reg,
        hogfd: Some(hogfd),
        config: InversionConfig {
            terms: vec![LossTermSpec::appearance("toy"), LossTermSpec::manifold()],
            step_size: 0.05,
            max_iterations: 80,
            ..InversionConfig::default()
        },
    };
    let (img, run) = invert_with(&sketch, &bundle, &bundle.config).unwrap();
    assert_eq!(img.pixels().dim(), (32, 32, 3));
    assert!(run.final_loss.unwrap() < run.total[0]);
    assert_eq!(run.initial, bundle.initial_latent(&sketch).unwrap());
    let dir = tempfile::tempdir().unwrap();
    run.save(dir.path(), &img).unwrap();
    for f in ["config.toml", "losses.csv", "summary.json", "final.png", "w_initial.npy", "w_final.npy"] {
        assert!(dir.path().join(f).is_file(), "{f}");
    }
}

#[test]
fn bundle_rejects_a_mapper_for_another_extractor() {
    let (gen, reg, _, sketch) = setup();
    let bundle = Bundle {
        mapper: MapperModel::init(32, 8, gen.latent_shape(), "toy", 0),
        gen,
        registry: reg,
        hogfd: None,
        config: InversionConfig { terms: vec![LossTermSpec::appearance("toy")], ..InversionConfig::default() },
    };
    let err = invert_with(&sketch, &bundle, &bundle.config).unwrap_err();
    assert_eq!(err.code(), sketch2face::Error::ExtractorMismatch { expected: String::new(), found: String::new() }.code());
}
