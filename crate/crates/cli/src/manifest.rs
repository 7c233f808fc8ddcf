//! Run manifests and output bookkeeping.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};
use tempbc::{Error, Result};

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_error(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

/// Provenance record written next to every command's outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_sha256: String,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

/// Tracks the files a command writes. Unless [`Outputs::commit`] runs, every
/// registered file is deleted when the tracker is dropped.
pub struct Outputs {
    command: &'static str,
    manifest: String,
    dir: PathBuf,
    paths: Vec<PathBuf>,
    inputs: Vec<PathBuf>,
    seeds: BTreeMap<String, u64>,
    committed: bool,
}

impl Outputs {
    pub fn new(command: &'static str, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
        Ok(Outputs {
            command,
            manifest: format!("{command}.manifest.json"),
            dir: dir.to_path_buf(),
            paths: Vec::new(),
            inputs: Vec::new(),
            seeds: BTreeMap::new(),
            committed: false,
        })
    }

    /// Overrides the manifest file name.
    pub fn manifest_name(&mut self, name: String) {
        self.manifest = name;
    }

    /// Registers `name` inside the output directory.
    pub fn file(&mut self, name: &str) -> PathBuf {
        self.register(self.dir.join(name))
    }

    pub fn register(&mut self, path: PathBuf) -> PathBuf {
        if !self.paths.contains(&path) {
            self.paths.push(path.clone());
        }
        path
    }

    pub fn input(&mut self, path: &Path) {
        self.inputs.push(path.to_path_buf());
    }

    pub fn seed(&mut self, name: &str, seed: u64) {
        self.seeds.insert(name.into(), seed);
    }

    /// Writes `<command>.manifest.json` and keeps all outputs.
    pub fn commit<C: Serialize>(mut self, config: &C) -> Result<PathBuf> {
        let config = serde_json::to_value(config)?;
        let config_sha256 = hex::encode(Sha256::digest(serde_json::to_string(&config)?.as_bytes()));
        let dir = self.dir.clone();
        let digests = |paths: &[PathBuf]| -> Result<BTreeMap<String, String>> {
            paths
                .iter()
                .map(|p| {
                    let name = p.strip_prefix(&dir).unwrap_or(p);
                    Ok((name.display().to_string(), sha256_file(p)?))
                })
                .collect()
        };
        let manifest = RunManifest {
            command: self.command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_sha256,
            config,
            seeds: self.seeds.clone(),
            inputs: digests(&self.inputs)?,
            outputs: digests(&self.paths)?,
        };
        let path = self.dir.join(&self.manifest);
        if let Err(e) = write_json(&path, &manifest) {
            let _ = fs::remove_file(&path);
            return Err(e);
        }
        self.committed = true;
        Ok(path)
    }
}

impl Drop for Outputs {
    fn drop(&mut self) {
        if !self.committed {
            for p in &self.paths {
                let _ = fs::remove_file(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_outputs_are_removed() {
        let dir = tempfile::tempdir().unwrap();
        {
            let mut out = Outputs::new("x", dir.path()).unwrap();
            write_text(&out.file("a.csv"), "1\n").unwrap();
            write_text(&out.file("b.csv"), "2\n").unwrap();
        }
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
    }

    #[test]
    fn commit_keeps_outputs_and_records_digests() {
        let dir = tempfile::tempdir().unwrap();
        let input = dir.path().join("in.txt");
        write_text(&input, "abc").unwrap();
        let mut out = Outputs::new("x", &dir.path().join("run")).unwrap();
        out.input(&input);
        out.seed("s", 4);
        write_text(&out.file("a.csv"), "1\n").unwrap();
        let path = out.commit(&serde_json::json!({"k": 1})).unwrap();
        assert!(path.ends_with("x.manifest.json"));
        let m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        assert_eq!(
            m["inputs"][input.display().to_string()],
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        assert_eq!(m["outputs"]["a.csv"], sha256_file(&dir.path().join("run/a.csv")).unwrap());
        assert_eq!(m["seeds"]["s"], 4);
        assert_eq!(m["command"], "x");
    }
}
