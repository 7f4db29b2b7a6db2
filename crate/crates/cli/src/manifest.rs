use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::Failure;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct InputDigest {
    pub role: String,
    pub path: PathBuf,
    pub sha256: String,
    pub bytes: u64,
}

/// Record of one command invocation, written next to its outputs.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub flags: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub inputs: Vec<InputDigest>,
    pub outputs: Vec<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_classes: Option<usize>,
    pub version: &'static str,
    pub started_unix_ms: u128,
    pub finished_unix_ms: u128,
}

fn now_ms() -> u128 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn start(command: &str, flags: &impl Serialize) -> Self {
        RunManifest {
            command: command.to_string(),
            argv: std::env::args().collect(),
            flags: serde_json::to_value(flags).unwrap_or(serde_json::Value::Null),
            seeds: BTreeMap::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            n_classes: None,
            version: env!("CARGO_PKG_VERSION"),
            started_unix_ms: now_ms(),
            finished_unix_ms: 0,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn input(&mut self, role: &str, path: &Path) -> Result<(), Failure> {
        let (sha256, bytes) = digest_file(path)?;
        self.inputs.push(InputDigest {
            role: role.to_string(),
            path: path.to_path_buf(),
            sha256,
            bytes,
        });
        Ok(())
    }

    pub fn output(&mut self, path: &Path) {
        self.outputs.push(path.to_path_buf());
    }

    /// Writes `manifest.json` into the directory of the first output,
    /// replacing any earlier manifest there.
    pub fn finish(mut self) -> Result<PathBuf, Failure> {
        self.finished_unix_ms = now_ms();
        let dir = self
            .outputs
            .first()
            .and_then(|p| p.parent())
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let path = dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self).map_err(|e| Failure::data(e.to_string()))?;
        fs::write(&path, text).map_err(|e| Failure::io(&path, e))?;
        Ok(path)
    }
}

pub fn digest_file(path: &Path) -> Result<(String, u64), Failure> {
    let mut file = fs::File::open(path).map_err(|e| Failure::io(path, e))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 64 * 1024];
    let mut total = 0u64;
    loop {
        let n = file.read(&mut buf).map_err(|e| Failure::io(path, e))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
        total += n as u64;
    }
    Ok((hex::encode(hasher.finalize()), total))
}
