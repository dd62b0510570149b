//! Per-run provenance record: settings, configuration and file digests.

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::CliError;

pub fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Usage(format!("{}: {e}", path.display()))
}

pub fn sha256_file(path: &Path) -> Result<String, CliError> {
    let bytes = fs::read(path).map_err(|e| io_error(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Every regular file under `dir`, sorted, as paths relative to `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>, CliError> {
    fn walk(root: &Path, rel: &Path, out: &mut Vec<PathBuf>) -> Result<(), CliError> {
        let here = root.join(rel);
        let mut entries: Vec<_> = fs::read_dir(&here)
            .map_err(|e| io_error(&here, e))?
            .collect::<Result<_, _>>()
            .map_err(|e| io_error(&here, e))?;
        entries.sort_by_key(|e| e.file_name());
        for entry in entries {
            let rel = rel.join(entry.file_name());
            let ty = entry.file_type().map_err(|e| io_error(&entry.path(), e))?;
            if ty.is_dir() {
                walk(root, &rel, out)?;
            } else if ty.is_file() {
                out.push(rel);
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(dir, Path::new(""), &mut out)?;
    Ok(out)
}

fn slash(path: &Path) -> String {
    path.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Files are recorded relative to a named root so manifests do not depend
/// on where the run happened.
#[derive(Debug, Default)]
pub struct Manifest {
    inputs: Vec<Value>,
    outputs: Vec<Value>,
}

impl Manifest {
    fn entry(role: &str, root: &Path, rel: &Path) -> Result<Value, CliError> {
        Ok(json!({
            "root": role,
            "path": slash(rel),
            "sha256": sha256_file(&root.join(rel))?,
        }))
    }

    pub fn input_file(&mut self, role: &str, root: &Path, rel: &Path) -> Result<(), CliError> {
        self.inputs.push(Self::entry(role, root, rel)?);
        Ok(())
    }

    pub fn input_dir(&mut self, role: &str, dir: &Path) -> Result<(), CliError> {
        for rel in list_files(dir)? {
            self.inputs.push(Self::entry(role, dir, &rel)?);
        }
        Ok(())
    }

    /// `rel` is relative to the output directory; directories are expanded.
    pub fn output(&mut self, out: &Path, rel: &str) -> Result<(), CliError> {
        let full = out.join(rel);
        if full.is_dir() {
            for sub in list_files(&full)? {
                self.outputs.push(Self::entry("out", out, &Path::new(rel).join(sub))?);
            }
        } else {
            self.outputs.push(Self::entry("out", out, Path::new(rel))?);
        }
        Ok(())
    }

    pub fn to_json(&self, command: &str, seed: Option<u64>, settings: Value, config: Value, extra: Value) -> Value {
        json!({
            "command": command,
            "seed": seed,
            "settings": settings,
            "config": config,
            "summary": extra,
            "inputs": self.inputs,
            "outputs": self.outputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn digests_and_listing_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("b")).unwrap();
        fs::write(dir.path().join("b/x.txt"), "abc").unwrap();
        fs::write(dir.path().join("a.txt"), "").unwrap();
        let files: Vec<String> = list_files(dir.path()).unwrap().iter().map(|p| slash(p)).collect();
        assert_eq!(files, ["a.txt", "b/x.txt"]);
        assert_eq!(
            sha256_file(&dir.path().join("b/x.txt")).unwrap(),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }
}
