//! `run.txt`: what a subcommand was asked to do and what it produced.

use std::fs;
use std::path::{Path, PathBuf};

use pionono::{kv, Error};
use sha2::{Digest, Sha256};

use crate::CliResult;

pub const RUN_FILE: &str = "run.txt";

#[derive(Debug, Default)]
pub struct RunManifest {
    pub subcommand: String,
    pub argv: Vec<String>,
    pub seed: Option<u64>,
    pub config: Vec<(String, String)>,
    pub inputs: Vec<(String, PathBuf)>,
    pub outputs: Vec<(String, PathBuf)>,
    /// Files whose SHA-256 is recorded, by label.
    pub hashed: Vec<(String, PathBuf)>,
    pub notes: Vec<(String, String)>,
}

impl RunManifest {
    pub fn new(subcommand: &str, argv: &[String]) -> Self {
        RunManifest {
            subcommand: subcommand.to_string(),
            argv: argv.to_vec(),
            ..RunManifest::default()
        }
    }

    pub fn input(&mut self, label: &str, path: &Path) -> &mut Self {
        self.inputs.push((label.into(), path.to_path_buf()));
        self
    }

    pub fn output(&mut self, label: &str, path: &Path) -> &mut Self {
        self.outputs.push((label.into(), path.to_path_buf()));
        self
    }

    pub fn hash(&mut self, label: &str, path: &Path) -> &mut Self {
        self.hashed.push((label.into(), path.to_path_buf()));
        self
    }

    pub fn note(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.notes.push((key.into(), value.to_string()));
        self
    }

    fn entries(&self) -> CliResult<Vec<(String, String)>> {
        let mut kv = vec![
            ("subcommand".to_string(), self.subcommand.clone()),
            ("argv".into(), self.argv.join(" ")),
        ];
        if let Some(seed) = self.seed {
            kv.push(("seed".into(), seed.to_string()));
        }
        for (k, v) in &self.config {
            kv.push((format!("config.{k}"), v.clone()));
        }
        for (k, p) in &self.inputs {
            kv.push((format!("input.{k}"), p.display().to_string()));
        }
        for (k, p) in &self.outputs {
            kv.push((format!("output.{k}"), p.display().to_string()));
        }
        for (k, p) in &self.hashed {
            kv.push((format!("sha256.{k}"), sha256_file(p)?));
        }
        for (k, v) in &self.notes {
            kv.push((k.clone(), v.clone()));
        }
        Ok(kv)
    }

    /// Writes `dir/run.txt` through a temporary file and a rename.
    pub fn write(&self, dir: &Path) -> CliResult<PathBuf> {
        let text = kv::render(&self.entries()?);
        let path = dir.join(RUN_FILE);
        write_atomic(&path, text.as_bytes())?;
        Ok(path)
    }
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(())
}
