//! Artifact files stamped with the config hash and artifact version.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::Result;

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    config_hash: &'a str,
    version: &'a str,
    report: &'a T,
}

/// Output directory. CSVs open with a `# config_hash=..., version=...`
/// comment line; JSON reports are wrapped in `{config_hash, version, report}`.
#[derive(Debug, Clone)]
pub struct Artifacts {
    dir: PathBuf,
    hash: String,
    written: Vec<PathBuf>,
}

impl Artifacts {
    pub fn new(dir: &Path, hash: &str) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf(), hash: hash.to_string(), written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }
    pub fn hash(&self) -> &str {
        &self.hash
    }
    pub fn written(&self) -> &[PathBuf] {
        &self.written
    }

    pub fn csv<F>(&mut self, name: &str, body: F) -> Result<PathBuf>
    where
        F: FnOnce(&mut BufWriter<File>) -> Result<()>,
    {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        writeln!(w, "# config_hash={}, version={}", self.hash, ARTIFACT_VERSION)?;
        body(&mut w)?;
        w.flush()?;
        self.written.push(path.clone());
        Ok(path)
    }

    pub fn json<T: Serialize>(&mut self, name: &str, report: &T) -> Result<PathBuf> {
        let path = self.dir.join(name);
        let mut w = BufWriter::new(File::create(&path)?);
        let env = Envelope { config_hash: &self.hash, version: ARTIFACT_VERSION, report };
        serde_json::to_writer_pretty(&mut w, &env)?;
        writeln!(w)?;
        w.flush()?;
        self.written.push(path.clone());
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn files_carry_hash_and_version() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = Artifacts::new(dir.path(), "abc").unwrap();
        let c = a.csv("x.csv", |w| Ok(writeln!(w, "a,b")?)).unwrap();
        let j = a.json("x.json", &vec![1, 2]).unwrap();
        let text = std::fs::read_to_string(c).unwrap();
        assert!(text.starts_with(&format!("# config_hash=abc, version={ARTIFACT_VERSION}\n")));
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(j).unwrap()).unwrap();
        assert_eq!(v["config_hash"], "abc");
        assert_eq!(v["report"][1], 2);
        assert_eq!(a.written().len(), 2);
    }
}
