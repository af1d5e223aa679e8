//! Drives the `defbias` binary over the bundled toy corpus.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn fixture(name: &str) -> String {
    fixtures().join(name).display().to_string()
}

pub fn defbias(args: &[&str]) -> Output {
    defbias_in(Path::new("."), args)
}

pub fn defbias_in(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_defbias"))
        .current_dir(cwd)
        .args(args)
        .env_remove("DEFBIAS_API_BASE")
        .env_remove("DEFBIAS_API_KEY")
        .env_remove("DEFBIAS_CACHE_DIR")
        .output()
        .expect("binary runs")
}

/// Runs inside `root` with the toy registry and `--out-dir dir` (relative
/// to `root`); panics unless exit 0.
pub fn step(root: &Path, dir: &str, args: &[&str]) -> Output {
    let registry = fixture("registry.json");
    let mut full = vec!["--registry", registry.as_str(), "--out-dir", dir];
    full.extend_from_slice(args);
    let out = defbias_in(root, &full);
    assert!(
        out.status.success(),
        "defbias {full:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

pub const DATASETS: [(&str, &str); 2] = [("toy_news", "Toy News"), ("toy_wire", "Toy Wire")];

/// ingest -> prompts -> probe (replay) -> score -> kappa for each toy
/// dataset, then rewards over both. Paths inside `root` are relative so two
/// runs in different directories write identical bytes. Returns every
/// manifest written, relative to `root`.
pub fn run_pipeline(root: &Path) -> Vec<String> {
    let recordings = fixture("recordings.jsonl");
    let constants = fixture("constants.json");
    let mut manifests = Vec::new();
    let mut canon = Vec::new();
    for (slug, name) in DATASETS {
        let train = fixture(&format!("{slug}.train.conll"));
        let test = fixture(&format!("{slug}.test.conll"));
        let data = format!("data/{slug}");
        step(
            root,
            &data,
            &[
                "ingest", "--name", name, "--format", "conll", "--train", &train, "--test", &test,
            ],
        );
        manifests.push(format!("{data}/ingest.manifest.json"));
        let jsonl = format!("{data}/{slug}.jsonl");

        let prompts = format!("{slug}/prompts.jsonl");
        let preds = format!("{slug}/predictions.jsonl");
        step(
            root,
            slug,
            &[
                "prompts", "--data", &jsonl, "--sample", "0", "--shots", "2", "--source", "true",
            ],
        );
        step(
            root,
            slug,
            &[
                "probe",
                "--prompts",
                &prompts,
                "--replay",
                "--recordings",
                &recordings,
                "--cache-dir",
                "cache",
            ],
        );
        step(root, slug, &["score", "--gold", &jsonl, "--pred", &preds]);
        step(
            root,
            slug,
            &["kappa", "--mode", "dataset", "--gold", &jsonl, "--pred", &preds],
        );
        for cmd in ["prompts", "probe", "score", "kappa"] {
            manifests.push(format!("{slug}/{cmd}.manifest.json"));
        }
        canon.push(jsonl);
    }
    step(
        root,
        "rewards",
        &[
            "rewards",
            "--in",
            &canon[0],
            "--in",
            &canon[1],
            "--constants",
            &constants,
            "--samples",
            "10",
        ],
    );
    manifests.push("rewards/rewards.manifest.json".into());
    manifests
}

/// Runs `verify-manifest` on each manifest; returns the ones that fail.
pub fn failing_manifests(root: &Path, manifests: &[String]) -> Vec<String> {
    manifests
        .iter()
        .filter(|m| !defbias_in(root, &["verify-manifest", m]).status.success())
        .cloned()
        .collect()
}

/// Every file under `root`, relative path -> bytes, skipping the cache.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    walk(root, root, &mut out);
    out.sort();
    out
}

fn walk(root: &Path, dir: &Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let rel = path.strip_prefix(root).unwrap().display().to_string();
        if rel == "cache" {
            continue;
        }
        if path.is_dir() {
            walk(root, &path, out);
        } else {
            out.push((rel, fs::read(&path).unwrap()));
        }
    }
}
