//! Staged artifact writes with run manifests. Outputs are written to hidden
//! temporary files next to their destination and only renamed into place
//! once every output of the command has been produced.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lsrlab::digest::sha256_hex;
use serde::Serialize;

use crate::CliError;

pub const MANIFEST_SUFFIX: &str = ".manifest.json";

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub command: &'a str,
    pub version: &'a str,
    pub config: serde_json::Value,
    pub config_hash: String,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| CliError::Data(format!("cannot read {}: {e}", path.display())))
}

/// Inputs read so far (path to SHA-256) and outputs pending a commit.
#[derive(Debug, Default)]
pub struct Run {
    inputs: BTreeMap<String, String>,
    outputs: Vec<(PathBuf, Vec<u8>)>,
}

impl Run {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, path: &Path) -> Result<Vec<u8>, CliError> {
        let bytes = read_bytes(path)?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn input_text(&mut self, path: &Path) -> Result<String, CliError> {
        let bytes = self.input(path)?;
        String::from_utf8(bytes).map_err(|_| CliError::Data(format!("{} is not valid UTF-8", path.display())))
    }

    pub fn output(&mut self, path: &Path, bytes: Vec<u8>) {
        self.outputs.push((path.to_path_buf(), bytes));
    }

    /// Writes every output plus one manifest per output. Nothing lands at a
    /// destination path unless all temporary files were written.
    pub fn commit(self, command: &str, config: &impl Serialize) -> Result<(), CliError> {
        let config = serde_json::to_value(config).expect("config serializes");
        let config_hash = sha256_hex(config.to_string().as_bytes());
        let outputs: BTreeMap<String, String> = self
            .outputs
            .iter()
            .map(|(p, b)| (p.display().to_string(), sha256_hex(b)))
            .collect();
        let manifest = Manifest {
            command,
            version: env!("CARGO_PKG_VERSION"),
            config,
            config_hash,
            inputs: self.inputs,
            outputs,
        };
        let manifest_bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut files: Vec<(PathBuf, Vec<u8>)> = Vec::new();
        for (path, bytes) in self.outputs {
            let mut m = path.clone().into_os_string();
            m.push(MANIFEST_SUFFIX);
            files.push((PathBuf::from(m), manifest_bytes.clone()));
            files.push((path, bytes));
        }
        let mut staged = Vec::with_capacity(files.len());
        for (path, bytes) in &files {
            let tmp = temp_path(path);
            if let Err(e) = fs::write(&tmp, bytes) {
                let _ = fs::remove_file(&tmp);
                for (t, _) in &staged {
                    let _ = fs::remove_file(t);
                }
                return Err(CliError::Data(format!("cannot write {}: {e}", path.display())));
            }
            staged.push((tmp, path.clone()));
        }
        for (tmp, path) in staged {
            fs::rename(&tmp, &path).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))?;
        }
        Ok(())
    }
}

fn temp_path(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp-{}", std::process::id()))
}
