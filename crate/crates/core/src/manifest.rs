//! Run manifests and write-once result locations.

use std::fs;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::artifact::write_atomic;
use crate::config::KeyValues;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub output: PathBuf,
    /// [`content_hash`] of the input files.
    pub input_hash: String,
}

/// SHA-256 over the inputs in order, each framed as `blob <len>\0<bytes>`.
pub fn content_hash(paths: &[&Path]) -> Result<String> {
    let mut h = Sha256::new();
    for p in paths {
        let bytes = fs::read(p)?;
        h.update(format!("blob {}\0", bytes.len()).as_bytes());
        h.update(&bytes);
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn to_text(&self) -> String {
        let mut kv = KeyValues::default();
        kv.set("command", &self.command);
        kv.set(
            "config",
            self.config_path
                .as_ref()
                .map_or_else(|| "-".to_string(), |p| p.display().to_string()),
        );
        kv.set("seed", self.seed);
        kv.set("output", self.output.display());
        kv.set("input_hash", &self.input_hash);
        kv.to_text()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let get = |k: &str| {
            kv.get(k)
                .ok_or_else(|| Error::Format(format!("manifest lacks {k}")))
        };
        Ok(Self {
            command: get("command")?.to_string(),
            config_path: match get("config")? {
                "-" => None,
                p => Some(PathBuf::from(p)),
            },
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Format("manifest seed is not an integer".into()))?,
            output: PathBuf::from(get("output")?),
            input_hash: get("input_hash")?.to_string(),
        })
    }

    /// Writes the manifest to `path`, refusing to replace an existing one.
    pub fn write_new(&self, path: &Path) -> Result<()> {
        if path.exists() {
            return Err(Error::Conflict(format!(
                "{} already exists",
                path.display()
            )));
        }
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        write_atomic(path, self.to_text().as_bytes())
    }
}

/// Creates `dir` for results, or accepts it if it exists and is empty.
pub fn claim_output_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        if fs::read_dir(dir)?.next().is_some() {
            return Err(Error::Conflict(format!(
                "results directory {} is not empty",
                dir.display()
            )));
        }
        return Ok(());
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

/// Refuses to overwrite a result file.
pub fn claim_output_file(path: &Path) -> Result<()> {
    if path.exists() {
        return Err(Error::Conflict(format!(
            "{} already exists",
            path.display()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip() {
        let m = RunManifest {
            command: "build-dataset".into(),
            config_path: None,
            seed: 3,
            output: PathBuf::from("out/pairs.tsv"),
            input_hash: "ab".repeat(32),
        };
        assert_eq!(RunManifest::parse(&m.to_text()).unwrap(), m);
    }
}
