//! Run directories: staged writes, content hashes, and the provenance record.
//!
//! Outputs are written into a hidden staging directory and renamed into place
//! only when the whole run succeeds, so a failed run leaves nothing behind and
//! an existing run directory is never touched.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use orthoiqa::data::sha256_hex;
use orthoiqa::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::Command;

pub const PROVENANCE_FILE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub config: Command,
    /// Input path → sha256 of its bytes at the time of the run.
    pub inputs: BTreeMap<String, String>,
    /// Output file name → sha256.
    pub outputs: BTreeMap<String, String>,
}

pub fn config_hash(cfg: &Command) -> String {
    sha256_hex(&serde_json::to_vec(cfg).expect("config serializes"))
}

pub struct RunDir {
    staging: PathBuf,
    final_path: PathBuf,
    config: Command,
    inputs: BTreeMap<String, String>,
    outputs: BTreeMap<String, String>,
    committed: bool,
}

impl RunDir {
    /// Reserves `<root>/<subcommand>-<unix seconds>-<config hash8>[-k]`.
    pub fn create(root: &Path, config: &Command) -> Result<Self> {
        fs::create_dir_all(root)?;
        let secs = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let stem = format!("{}-{secs}-{}", config.name(), &config_hash(config)[..8]);
        let mut k = 0;
        let (staging, final_path) = loop {
            let name = if k == 0 { stem.clone() } else { format!("{stem}-{k}") };
            let final_path = root.join(&name);
            let staging = root.join(format!(".{name}.partial"));
            // create_dir fails on an existing path, which reserves the name.
            if !final_path.exists() && fs::create_dir(&staging).is_ok() {
                break (staging, final_path);
            }
            k += 1;
        };
        Ok(Self { staging, final_path, config: config.clone(), inputs: BTreeMap::new(), outputs: BTreeMap::new(), committed: false })
    }

    pub fn path(&self) -> &Path {
        &self.final_path
    }

    /// Reads an input file and records its hash.
    pub fn read_input(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        assert!(!self.outputs.contains_key(name) && name != PROVENANCE_FILE, "output {name} written twice");
        fs::write(self.staging.join(name), bytes)?;
        self.outputs.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    /// Writes the provenance record and moves the run into place.
    pub fn commit(mut self) -> Result<(PathBuf, Provenance)> {
        let provenance = Provenance {
            tool: "oiqa".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&provenance)?;
        bytes.push(b'\n');
        fs::write(self.staging.join(PROVENANCE_FILE), bytes)?;
        if self.final_path.exists() {
            return Err(Error::Io(std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                format!("{} appeared during the run", self.final_path.display()),
            )));
        }
        fs::rename(&self.staging, &self.final_path)?;
        self.committed = true;
        Ok((self.final_path.clone(), provenance))
    }
}

impl Drop for RunDir {
    fn drop(&mut self) {
        if !self.committed {
            let _ = fs::remove_dir_all(&self.staging);
        }
    }
}

pub fn load_provenance(path: &Path) -> Result<Provenance> {
    let bytes = fs::read(path).map_err(|e| Error::Input(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("invalid provenance {}: {e}", path.display())))
}
