use sketch2face::extractors::Extractor;
use sketch2face::f2w::{build_pair_dataset, evaluate_mapper, train_mapper, MapperConfig, MapperModel, PairDataset};
use sketch2face::GeneratorHandle;

#[test]
fn dataset_and_mapper_round_trip_through_disk() {
    let gen = GeneratorHandle::toy(1234);
    let ds = build_pair_dataset(&gen, &Extractor::toy(), 120, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    ds.save(&dir.path().join("pairs")).unwrap();
    let back = PairDataset::load(&dir.path().join("pairs")).unwrap();
    assert_eq!(back.features(), ds.features());
    assert_eq!(back.flat_latents(), ds.flat_latents());
    assert_eq!(back.generator_id(), gen.checkpoint_id());

    let cfg = MapperConfig { hidden: 32, epochs: 3, ..MapperConfig::toy() };
    let m = train_mapper(&ds, &cfg).unwrap();
    let path = dir.path().join("mapper.safetensors");
    let id = m.save(&path).unwrap();
    let loaded = MapperModel::load(&path).unwrap();
    assert_eq!(loaded.checkpoint_id(), id);
    assert_eq!(loaded.predict(ds.features()), m.predict(ds.features()));
    assert_eq!(loaded.log().holdout, m.log().holdout);
}

#[test]
fn trained_mapper_beats_a_zero_mapper() {
    let gen = GeneratorHandle::toy(1234);
    let ds = build_pair_dataset(&gen, &Extractor::toy(), 400, 4).unwrap();
    let (train, holdout) = ds.split(0.1, 0);
    let m = train_mapper(&train, &MapperConfig { epochs: 20, ..MapperConfig::toy() }).unwrap();
    let zero = MapperModel::zeros(64, 8, gen.latent_shape(), "toy");
    let a = evaluate_mapper(&m, &holdout, None).unwrap();
    let b = evaluate_mapper(&zero, &holdout, None).unwrap();
    assert!(a.latent_mse_mean < b.latent_mse_mean, "{a:?} vs {b:?}");
}

#[test]
fn same_seed_gives_identical_training() {
    let gen = GeneratorHandle::toy(1234);
    let ds = build_pair_dataset(&gen, &Extractor::toy(), 100, 5).unwrap();
    let cfg = MapperConfig { hidden: 16, epochs: 2, ..MapperConfig::toy() };
    let a = train_mapper(&ds, &cfg).unwrap();
    let b = train_mapper(&ds, &cfg).unwrap();
    assert_eq!(a.checkpoint_id(), b.checkpoint_id());
}
