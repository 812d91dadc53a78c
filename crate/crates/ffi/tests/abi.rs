use std::ffi::{CStr, CString};
use std::ptr;

use sketch2face::pipeline::{make_toy_assets, ToyAssetSizes};
use sketch2face_ffi::*;

fn last_error() -> String {
    let p = s2f_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn error_codes_match_the_toolkit() {
    use sketch2face::Error;
    let cases = [
        (Error::MissingFile("x".into()), S2F_ERR_MISSING_FILE),
        (Error::ShapeMismatch(String::new()), S2F_ERR_SHAPE_MISMATCH),
        (Error::Divergence(String::new()), S2F_ERR_DIVERGENCE),
        (Error::Config(String::new()), S2F_ERR_CONFIG),
    ];
    for (e, code) in cases {
        assert_eq!(e.code(), code, "{e}");
    }
}

#[test]
fn toy_generator_renders_into_a_caller_buffer() {
    unsafe {
        let mut g = ptr::null_mut();
        assert_eq!(s2f_generator_toy(1234, &mut g), S2F_OK);
        assert!(s2f_last_error_message().is_null());
        let (mut rows, mut width, mut res) = (0, 0, 0);
        assert_eq!(s2f_generator_shape(g, &mut rows, &mut width, &mut res), S2F_OK);
        assert_eq!((rows, width, res), (18, 16, 32));
        let w = vec![0.1; rows * width];
        let mut px = vec![-1.0; res * res * 3];
        assert_eq!(s2f_generator_synthesize(g, w.as_ptr(), w.len(), px.as_mut_ptr(), px.len()), S2F_OK);
        assert!(px.iter().all(|v| (0.0..=1.0).contains(v)));

        let mut short = vec![0.0; 10];
        assert_eq!(s2f_generator_synthesize(g, w.as_ptr(), w.len(), short.as_mut_ptr(), short.len()), S2F_ERR_BUFFER);
        assert!(last_error().contains("pixel buffer"));
        s2f_generator_free(g);
    }
}

#[test]
fn null_and_missing_inputs_report_codes() {
    unsafe {
        assert_eq!(s2f_generator_toy(1, ptr::null_mut()), S2F_ERR_NULL);
        assert!(last_error().contains("out"));
        let mut b = ptr::null_mut();
        let missing = CString::new("/nonexistent/config.toml").unwrap();
        let code = s2f_bundle_load(missing.as_ptr(), &mut b);
        assert!(code > 0, "code {code}");
        assert!(b.is_null());
        assert!(!last_error().is_empty());
        let kind = CString::new("bogus").unwrap();
        let mut g = ptr::null_mut();
        assert_eq!(s2f_generator_load(missing.as_ptr(), kind.as_ptr(), &mut g), S2F_ERR_CONFIG);
        s2f_generator_free(ptr::null_mut());
        s2f_bundle_free(ptr::null_mut());
    }
}

#[test]
fn bundle_inverts_a_toy_sketch() {
    let dir = tempfile::tempdir().unwrap();
    let assets = dir.path().join("assets");
    make_toy_assets(&assets, 1234, &ToyAssetSizes { pairs: 100, faceness: 20, corpus: 2 }).unwrap();
    let cfg = CString::new(assets.join("config.toml").to_str().unwrap()).unwrap();
    let sketch = CString::new(assets.join("corpus/sketches/id000.png").to_str().unwrap()).unwrap();
    let out = CString::new(dir.path().join("run").to_str().unwrap()).unwrap();
    unsafe {
        let mut b = ptr::null_mut();
        assert_eq!(s2f_bundle_load(cfg.as_ptr(), &mut b), S2F_OK, "{}", last_error());
        let mut loss = f64::NAN;
        assert_eq!(s2f_bundle_invert_file(b, sketch.as_ptr(), out.as_ptr(), 5, &mut loss), S2F_OK);
        assert!(loss.is_finite());
        s2f_bundle_free(b);
    }
    assert!(dir.path().join("run/final.png").is_file());
}

#[test]
fn header_declares_the_abi() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/sketch2face.h")).unwrap();
    for name in [
        "s2f_generator_toy",
        "s2f_generator_synthesize",
        "s2f_bundle_load",
        "s2f_bundle_invert_file",
        "s2f_last_error_message",
        "typedef struct S2fBundle S2fBundle",
        "#define S2F_ERR_DIVERGENCE 12",
    ] {
        assert!(h.contains(name), "{name}");
    }
    let v = unsafe { CStr::from_ptr(s2f_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}
