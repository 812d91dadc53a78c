use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

fn exe() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_sketch2face"));
    c.env_remove("SKETCH2FACE_ASSETS");
    c
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in std::fs::read_dir(&dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if !p.to_string_lossy().ends_with("run_manifest.toml") {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = exe().arg("frobnicate").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_sketch_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = exe()
        .args(["invert", "--sketch"])
        .arg(dir.path().join("nope.png"))
        .arg("--out")
        .arg(dir.path().join("o"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn toy_assets_are_reproducible_and_invertible() {
    let dir = tempfile::tempdir().unwrap();
    let make = |name: &str| {
        let out = exe()
            .args(["make-toy-assets", "--pairs", "120", "--faceness", "24", "--corpus", "2", "--out"])
            .arg(dir.path().join(name))
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        tree(&dir.path().join(name))
    };
    let a = make("a");
    let b = make("b");
    assert!(a.contains_key("config.toml") && a.contains_key("generator.safetensors"));
    assert_eq!(a.keys().collect::<Vec<_>>(), b.keys().collect::<Vec<_>>());
    for (k, v) in &a {
        assert!(b[k] == *v, "{k} differs");
    }

    let run = dir.path().join("run");
    let out = exe()
        .arg("--config")
        .arg(dir.path().join("a/config.toml"))
        .args(["invert", "--max-iterations", "5", "--sketch"])
        .arg(dir.path().join("a/corpus/sketches/id000.png"))
        .arg("--out")
        .arg(&run)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("final.png").is_file());
    assert!(run.join("run_manifest.toml").is_file());
    let csv = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert!(csv.starts_with("iteration,total,app:toy,manifold\n"), "{csv}");
}
