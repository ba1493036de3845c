use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, RunnerError};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "FUNLORA_OUT";

/// `$FUNLORA_OUT/<command>`, or `funlora-out/<command>` when unset.
pub fn default_out_root(command: &str) -> PathBuf {
    std::env::var_os(OUT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("funlora-out")).join(command)
}

/// Pretty JSON with object keys sorted.
pub fn canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes");
    let mut s = serde_json::to_string_pretty(&v).expect("json value prints");
    s.push('\n');
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTime {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub command: String,
    pub config_hash: Option<String>,
    pub seeds: Vec<u64>,
    pub wall_times: Vec<StepTime>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    /// Command-specific notes, such as the selected layers.
    pub notes: serde_json::Map<String, serde_json::Value>,
}

/// Output directory that records every file written into it.
pub(crate) struct OutDir {
    root: PathBuf,
    canonical: bool,
    written: Vec<String>,
    times: Vec<StepTime>,
    pub notes: serde_json::Map<String, serde_json::Value>,
}

pub(crate) fn io_err(path: &Path, source: std::io::Error) -> RunnerError {
    RunnerError::Io { path: path.display().to_string(), source }
}

impl OutDir {
    pub fn create(root: &Path, canonical: bool) -> Result<Self> {
        std::fs::create_dir_all(root).map_err(|e| io_err(root, e))?;
        Ok(Self {
            root: root.to_path_buf(),
            canonical,
            written: Vec::new(),
            times: Vec::new(),
            notes: Default::default(),
        })
    }

    pub fn write(&mut self, rel: &str, contents: &str) -> Result<PathBuf> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
        }
        std::fs::write(&path, contents).map_err(|e| io_err(&path, e))?;
        self.written.push(rel.to_string());
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<PathBuf> {
        self.write(rel, &canonical_json(value))
    }

    pub fn time(&mut self, name: impl Into<String>, seconds: f64) {
        self.times.push(StepTime { name: name.into(), seconds: if self.canonical { 0.0 } else { seconds } });
    }

    pub fn finish(mut self, command: &str, config_hash: Option<String>, seeds: Vec<u64>) -> Result<RunManifest> {
        self.written.push("manifest.json".into());
        let manifest = RunManifest {
            artifact_version: ARTIFACT_VERSION.into(),
            command: command.into(),
            config_hash,
            seeds,
            wall_times: std::mem::take(&mut self.times),
            outputs: self.written.clone(),
            notes: std::mem::take(&mut self.notes),
        };
        let path = self.root.join("manifest.json");
        std::fs::write(&path, canonical_json(&manifest)).map_err(|e| io_err(&path, e))?;
        Ok(manifest)
    }
}
