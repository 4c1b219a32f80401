//! Content-hash stage markers and run headers.

use std::fs;
use std::path::{Path, PathBuf};

use dlvit::{Error, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_hash(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| io(path, e))?;
    Ok(hex(&Sha256::digest(bytes)))
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// Hash over a stage's settings and the contents of its input files.
pub fn stage_key(name: &str, settings: &impl Serialize, inputs: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    h.update(name.as_bytes());
    h.update(serde_json::to_vec(settings).map_err(|e| Error::Config(e.to_string()))?);
    for p in inputs {
        h.update(file_hash(p)?.as_bytes());
    }
    Ok(hex(&h.finalize()))
}

pub struct Stages {
    dir: PathBuf,
}

impl Stages {
    pub fn new(out_dir: &Path) -> Result<Self> {
        let dir = out_dir.join(".stages");
        fs::create_dir_all(&dir).map_err(|e| io(&dir, e))?;
        Ok(Self { dir })
    }

    fn marker(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}.sha256"))
    }

    /// True when the marker records `key` and every output still hashes to
    /// its recorded value.
    pub fn is_done(&self, name: &str, key: &str) -> bool {
        let Ok(text) = fs::read_to_string(self.marker(name)) else {
            return false;
        };
        let mut lines = text.lines();
        if lines.next() != Some(&format!("key {key}")) {
            return false;
        }
        let mut any = false;
        for line in lines {
            let Some((hash, path)) = line.split_once("  ") else {
                return false;
            };
            if file_hash(Path::new(path)).ok().as_deref() != Some(hash) {
                return false;
            }
            any = true;
        }
        any
    }

    pub fn mark_done(&self, name: &str, key: &str, outputs: &[&Path]) -> Result<()> {
        let mut text = format!("key {key}\n");
        for p in outputs {
            text.push_str(&format!("{}  {}\n", file_hash(p)?, p.display()));
        }
        let m = self.marker(name);
        fs::write(&m, text).map_err(|e| io(&m, e))
    }
}

#[derive(Serialize)]
struct Header<'a> {
    command: &'a str,
    version: &'a str,
    seed: u64,
    dl_sign: &'a str,
    threads: usize,
    args: Vec<String>,
    config: &'a RunConfig,
}

/// Writes `run_header_<command>.json` into `out_dir`.
pub fn write_header(out_dir: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    fs::create_dir_all(out_dir).map_err(|e| io(out_dir, e))?;
    let h = Header {
        command,
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.seed,
        dl_sign: cfg.label.dl_sign.as_str(),
        threads: dlvit::par::current_threads(),
        args: std::env::args().collect(),
        config: cfg,
    };
    let path = out_dir.join(format!("run_header_{command}.json"));
    let text = serde_json::to_string_pretty(&h).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| io(&path, e))?;
    Ok(path)
}
