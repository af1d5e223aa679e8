//! Run manifests and staged output writing.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seeds: BTreeMap<String, u64>,
    /// Input path as given on the command line -> SHA-256 of its bytes.
    pub input_digests: BTreeMap<String, String>,
    /// Output file name, relative to the manifest's directory -> SHA-256.
    pub output_digests: BTreeMap<String, String>,
    pub tool_version: String,
}

impl RunManifest {
    pub fn file_name(command: &str) -> String {
        format!("{command}.manifest.json")
    }

    /// Re-hashes every input and output; returns the mismatches.
    pub fn verify(&self, manifest_dir: &Path) -> Vec<String> {
        let mut problems = Vec::new();
        let check = |label: &str, path: &Path, want: &str, problems: &mut Vec<String>| match file_digest(path) {
            Ok(got) if got == want => {}
            Ok(_) => problems.push(format!("{label} {} changed", path.display())),
            Err(e) => problems.push(format!("{label} {}: {e:#}", path.display())),
        };
        for (p, d) in &self.input_digests {
            check("input", Path::new(p), d, &mut problems);
        }
        for (p, d) in &self.output_digests {
            check("output", &manifest_dir.join(p), d, &mut problems);
        }
        problems
    }
}

/// Collects a command's inputs, settings and outputs; nothing touches the
/// output directory until [`Run::commit`], so a failing command leaves no
/// partial artifacts behind.
pub struct Run {
    command: String,
    settings: BTreeMap<String, Value>,
    seeds: BTreeMap<String, u64>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<(String, Vec<u8>)>,
}

impl Run {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            settings: BTreeMap::new(),
            seeds: BTreeMap::new(),
            inputs: BTreeMap::new(),
            outputs: Vec::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl Serialize) {
        self.settings.insert(
            key.to_string(),
            serde_json::to_value(value).expect("settings serialize"),
        );
    }

    pub fn seed(&mut self, key: &str, seed: u64) {
        self.seeds.insert(key.to_string(), seed);
        self.setting(key, seed);
    }

    /// Reads an input file, recording its digest.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_input_text(&mut self, path: &Path) -> Result<String> {
        let bytes = self.read_input(path)?;
        String::from_utf8(bytes).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn output(&mut self, name: &str, bytes: impl Into<Vec<u8>>) {
        self.outputs.push((name.to_string(), bytes.into()));
    }

    pub fn output_names(&self) -> Vec<String> {
        self.outputs.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn config_hash(&self) -> String {
        let canonical = serde_json::json!({"command": self.command, "settings": self.settings});
        sha256_hex(canonical.to_string().as_bytes())
    }

    /// Writes every output (temp file, then rename) and the manifest last.
    pub fn commit(self, out_dir: &Path) -> Result<(PathBuf, RunManifest)> {
        fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
        let manifest = RunManifest {
            command: self.command.clone(),
            config_hash: self.config_hash(),
            seeds: self.seeds.clone(),
            input_digests: self.inputs.clone(),
            output_digests: self.outputs.iter().map(|(n, b)| (n.clone(), sha256_hex(b))).collect(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
        };
        for (name, bytes) in &self.outputs {
            write_atomic(&out_dir.join(name), bytes)?;
        }
        let path = out_dir.join(RunManifest::file_name(&self.command));
        let mut text = serde_json::to_string_pretty(&manifest).expect("manifests serialize");
        text.push('\n');
        write_atomic(&path, text.as_bytes())?;
        Ok((path, manifest))
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let Some(name) = path.file_name() else {
        bail!("bad output path {}", path.display());
    };
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

pub fn load_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing manifest {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_and_verify() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        fs::write(&input, "hello").unwrap();
        let mut run = Run::new("demo");
        run.seed("seed", 7);
        assert_eq!(run.read_input_text(&input).unwrap(), "hello");
        run.output("a.txt", "A");
        let out = dir.path().join("out");
        let (path, m) = run.commit(&out).unwrap();
        assert_eq!(load_manifest(&path).unwrap(), m);
        assert!(m.verify(&out).is_empty());
        fs::write(out.join("a.txt"), "B").unwrap();
        assert_eq!(m.verify(&out).len(), 1);
    }

    #[test]
    fn config_hash_tracks_settings() {
        let mut a = Run::new("x");
        a.setting("sigma", 0.7);
        let mut b = Run::new("x");
        b.setting("sigma", 0.9);
        assert_ne!(a.config_hash(), b.config_hash());
        let mut c = Run::new("x");
        c.setting("sigma", 0.7);
        assert_eq!(a.config_hash(), c.config_hash());
    }
}
