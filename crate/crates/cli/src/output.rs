//! Artifact writing and the per-run manifest.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use log::info;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::Failure;

pub struct Run {
    pub name: &'static str,
    pub cfg: RunConfig,
    pub hash: String,
    out: PathBuf,
    started: Instant,
    started_unix: u64,
    artifacts: Vec<PathBuf>,
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().fold(String::new(), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

impl Run {
    pub fn start(name: &'static str, cfg: RunConfig) -> Result<Self, Failure> {
        let out = cfg.out.clone();
        fs::create_dir_all(&out).map_err(|e| io_failure(&out, e))?;
        let hash = cfg.hash();
        info!("{name}: config {hash}, seed {}, output {}", cfg.seed, out.display());
        Ok(Run {
            name,
            cfg,
            hash,
            out,
            started: Instant::now(),
            started_unix: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            artifacts: Vec::new(),
        })
    }

    /// Output path for an artifact, recorded in the manifest.
    pub fn artifact(&mut self, file: &str) -> PathBuf {
        let path = self.out.join(file);
        self.artifacts.push(path.clone());
        path
    }

    /// `configured` when set, else `default_file` in the output directory;
    /// it must exist.
    pub fn input(&self, field: &str, configured: Option<&PathBuf>, default_file: &str) -> Result<PathBuf, Failure> {
        let path = configured.cloned().unwrap_or_else(|| self.out.join(default_file));
        if !path.exists() {
            return Err(Failure::Config {
                field: field.to_string(),
                message: format!("{} does not exist", path.display()),
            });
        }
        Ok(path)
    }

    /// `configured` when set, else `default_file` in the output directory,
    /// without the existence check.
    pub fn maybe_input(&self, configured: Option<&PathBuf>, default_file: &str) -> Option<PathBuf> {
        let path = configured.cloned().unwrap_or_else(|| self.out.join(default_file));
        path.exists().then_some(path)
    }

    fn stamp(&self, mut v: Value) -> Value {
        if let Value::Object(map) = &mut v {
            map.insert("config_hash".into(), Value::String(self.hash.clone()));
            map.insert("seed".into(), json!(self.cfg.seed));
        }
        v
    }

    pub fn write_text(&mut self, file: &str, text: &str) -> Result<PathBuf, Failure> {
        let path = self.artifact(file);
        fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
        info!("wrote {}", path.display());
        Ok(path)
    }

    /// Pretty JSON with `config_hash` and `seed` added at the top level.
    pub fn write_json(&mut self, file: &str, value: &impl Serialize) -> Result<PathBuf, Failure> {
        let v = self.stamp(serde_json::to_value(value).map_err(|e| Failure::Runtime(e.to_string()))?);
        let text = serde_json::to_string_pretty(&v).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
        self.write_text(file, &text)
    }

    /// One stamped JSON object per line.
    pub fn write_jsonl<T: Serialize>(&mut self, file: &str, rows: impl IntoIterator<Item = T>) -> Result<PathBuf, Failure> {
        let mut text = String::new();
        for row in rows {
            let v = self.stamp(serde_json::to_value(row).map_err(|e| Failure::Runtime(e.to_string()))?);
            text.push_str(&v.to_string());
            text.push('\n');
        }
        self.write_text(file, &text)
    }

    /// Writes `<subcommand>.manifest.json`.
    pub fn finish(&self, failure: Option<&Failure>) -> Result<(), Failure> {
        let mut artifacts = Vec::new();
        for path in &self.artifacts {
            if let Ok(bytes) = fs::read(path) {
                artifacts.push(json!({ "path": path.display().to_string(), "sha256": sha256_hex(&bytes) }));
            }
        }
        let manifest = json!({
            "subcommand": self.name,
            "status": failure.map_or_else(|| "ok".to_string(), |f| format!("failed: {f}")),
            "config_hash": self.hash,
            "seed": self.cfg.seed,
            "versions": {
                "storyvae": env!("CARGO_PKG_VERSION"),
                "os": std::env::consts::OS,
                "arch": std::env::consts::ARCH,
            },
            "started_unix": self.started_unix,
            "wall_time_secs": self.started.elapsed().as_secs_f64(),
            "artifacts": artifacts,
            "config": self.cfg,
        });
        let path = self.out.join(format!("{}.manifest.json", self.name));
        let text = serde_json::to_string_pretty(&manifest).map_err(|e| Failure::Runtime(e.to_string()))? + "\n";
        fs::write(&path, text).map_err(|e| io_failure(&path, e))
    }
}
