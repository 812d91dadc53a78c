use sketch2face::extractors::Registry;
use sketch2face::f2w::MapperModel;
use sketch2face::generator::sample_noise;
use sketch2face::inversion::{Bundle, InversionConfig, LossTermSpec};
use sketch2face::pipeline::{self, run_ablation, CellOutcome};
use sketch2face::{GeneratorHandle, ImageTensor};

fn bundle() -> Bundle {
    let gen = GeneratorHandle::toy(1234);
    Bundle {
        mapper: MapperModel::init(64, 16, gen.latent_shape(), "toy", 0),
        gen,
        registry: Registry::builtin(),
        hogfd: None,
        config: InversionConfig {
            terms: vec![LossTermSpec::appearance("toy")],
            max_iterations: 10,
            ..InversionConfig::default()
        },
    }
}

fn sketch(seed: u64) -> (String, ImageTensor) {
    let gen = GeneratorHandle::toy(1234);
    (format!("s{seed}"), gen.synthesize(&gen.map_noise(&sample_noise(seed)).unwrap()).unwrap())
}

#[test]
fn one_sketch_two_combos_gives_two_cells() {
    let combos = vec![
        ("a".to_string(), vec![LossTermSpec::appearance("toy")]),
        ("b".to_string(), vec![LossTermSpec::appearance("toy").weighted(2.0)]),
    ];
    let dir = tempfile::tempdir().unwrap();
    let report = run_ablation(&[sketch(1)], &bundle(), &combos, Some(dir.path())).unwrap();
    assert_eq!(report.cells.len(), 2);
    assert!(report.cells.iter().all(|c| matches!(c.outcome, CellOutcome::Ok { .. })));
    assert!(dir.path().join("s1/a/final.png").is_file());
    assert!(dir.path().join("s1/b/losses.csv").is_file());
    assert_eq!(report.to_csv().lines().count(), 3);
}

#[test]
fn a_failing_cell_does_not_stop_the_others() {
    let combos = vec![
        ("good".to_string(), vec![LossTermSpec::appearance("toy")]),
        ("bad".to_string(), vec![LossTermSpec::manifold()]),
    ];
    let report = run_ablation(&[sketch(1), sketch(2)], &bundle(), &combos, None).unwrap();
    assert_eq!(report.cells.len(), 4);
    for c in &report.cells {
        match (&c.combo[..], &c.outcome) {
            ("good", CellOutcome::Ok { .. }) => {}
            ("bad", CellOutcome::Failed { error }) => assert!(error.contains("manifold"), "{error}"),
            other => panic!("unexpected cell {other:?}"),
        }
    }
    assert!(report.to_csv().contains(",failed,"));
}

#[test]
fn toy_ablation_combos_cover_seven_cells() {
    let ids = ["toy".to_string(), "toy2".to_string(), "toy3".to_string()];
    let combos = pipeline::ablation_combos(&ids);
    let sizes: Vec<usize> = combos.iter().map(|c| c.1.len()).collect();
    assert_eq!(sizes, [1, 1, 3, 2, 2, 3, 4]);
}

#[test]
fn evaluate_dirs_matches_by_file_name() {
    let dir = tempfile::tempdir().unwrap();
    let (r, s) = (dir.path().join("ref"), dir.path().join("syn"));
    std::fs::create_dir_all(&r).unwrap();
    std::fs::create_dir_all(&s).unwrap();
    for seed in 1..4 {
        let (name, img) = sketch(seed);
        img.save_png(&r.join(format!("{name}.png"))).unwrap();
        img.save_png(&s.join(format!("{name}.png"))).unwrap();
    }
    let cfg = pipeline::EvaluationConfig { recognizers: vec!["toy".into()], ..Default::default() };
    let ev = pipeline::evaluate_dirs(&r, &s, &Registry::builtin(), &cfg).unwrap();
    assert_eq!(ev.iqa.rows.len(), 3);
    assert!((ev.iqa.mean_ssim - 1.0).abs() < 1e-9);
    assert_eq!(ev.recognition[0].accuracy, 1.0);
    ev.save(&dir.path().join("out"), "copy").unwrap();
    let table = std::fs::read_to_string(dir.path().join("out/table_iqa.csv")).unwrap();
    assert!(table.starts_with("method,SSIM,FSIM,VIF\ncopy,"));
}
