//! Runs the dlib detector script through the command oracle. Skipped when
//! python3 or dlib is unavailable.

use std::path::PathBuf;
use std::process::Command;

use ndarray::Array2;
use sketch2face::manifold::{CommandOracle, FacenessOracle};

fn script() -> Option<PathBuf> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../tools/hog_faceness.py");
    let ok = Command::new("python3").args(["-c", "import dlib"]).status().map(|s| s.success()).unwrap_or(false);
    (ok && path.is_file()).then_some(path)
}

#[test]
fn black_image_scores_zero() {
    let Some(path) = script() else {
        eprintln!("skipping: python3 with dlib not available");
        return;
    };
    let oracle = CommandOracle::new("python3", vec![path.display().to_string()]);
    assert_eq!(oracle.score_gray(&Array2::zeros((64, 64))).unwrap(), 0.0);
}

#[test]
fn failing_program_is_an_oracle_error() {
    let oracle = CommandOracle::new("false", Vec::new());
    let err = oracle.score_gray(&Array2::zeros((8, 8))).unwrap_err();
    assert!(matches!(err, sketch2face::Error::Oracle(_)), "{err}");
}
