#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

pub fn ocm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ocm"))
        .args(args)
        .output()
        .expect("failed to launch ocm")
}

/// Runs `ocm` and panics with its stderr unless it succeeds.
pub fn ocm_ok(args: &[&str]) -> String {
    let out = ocm(args);
    assert!(
        out.status.success(),
        "ocm {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn p(path: &Path) -> &str {
    path.to_str().expect("non-UTF-8 temp path")
}

/// Small phantom: 20 s gives 17 images, 14 of them with a full patch of history.
pub fn small_phantom(dir: &Path, seed: u64) {
    ocm_ok(&[
        "phantom",
        "--seed",
        &seed.to_string(),
        "--duration-s",
        "20",
        "--out-dir",
        p(dir),
    ]);
}

/// JSON with every `timing` object removed.
pub fn without_timing(path: &Path) -> serde_json::Value {
    let mut v: serde_json::Value = serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap();
    if let Some(obj) = v.as_object_mut() {
        obj.remove("timing");
    }
    v
}
