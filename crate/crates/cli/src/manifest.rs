//! Run manifests: everything needed to rerun a command and check that it
//! reproduced the same bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Effective command line after config merging, without the program name.
    pub args: Vec<String>,
    pub seed: Option<u64>,
    /// Input path as given on the command line -> SHA-256.
    pub inputs: BTreeMap<String, String>,
    /// Output path relative to the output location -> SHA-256.
    pub outputs: BTreeMap<String, String>,
}

/// Where a command put its results.
pub enum OutputSpec<'a> {
    Dir(&'a Path),
    File(&'a Path),
}

impl OutputSpec<'_> {
    pub fn manifest_path(&self) -> PathBuf {
        match self {
            OutputSpec::Dir(d) => d.join(MANIFEST_FILE),
            OutputSpec::File(f) => {
                let mut name = f.file_name().unwrap_or_default().to_os_string();
                name.push(".");
                name.push(MANIFEST_FILE);
                f.with_file_name(name)
            }
        }
    }
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Relative path -> digest for every regular file under `dir`, manifests
/// excluded.
fn digest_tree(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![PathBuf::new()];
    while let Some(rel) = stack.pop() {
        let abs = dir.join(&rel);
        for entry in fs::read_dir(&abs).with_context(|| format!("listing {}", abs.display()))? {
            let entry = entry?;
            let name = rel.join(entry.file_name());
            if entry.file_type()?.is_dir() {
                stack.push(name);
            } else if entry.file_name() != MANIFEST_FILE {
                let key = name.to_string_lossy().replace('\\', "/");
                out.insert(key, sha256_file(&entry.path())?);
            }
        }
    }
    Ok(out)
}

/// Digest of a file, or of a directory's sorted (name, digest) listing.
pub fn sha256_path(path: &Path) -> Result<String> {
    if path.is_dir() {
        let mut h = Sha256::new();
        for (name, digest) in digest_tree(path)? {
            h.update(name.as_bytes());
            h.update([0]);
            h.update(digest.as_bytes());
            h.update([b'\n']);
        }
        Ok(hex::encode(h.finalize()))
    } else {
        sha256_file(path)
    }
}

pub fn output_digests(spec: &OutputSpec) -> Result<BTreeMap<String, String>> {
    match spec {
        OutputSpec::Dir(d) => digest_tree(d),
        OutputSpec::File(f) => {
            let name = f.file_name().unwrap_or_default().to_string_lossy().into_owned();
            Ok(BTreeMap::from([(name, sha256_file(f)?)]))
        }
    }
}

pub fn input_digests(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    paths
        .iter()
        .map(|p| Ok((p.to_string_lossy().into_owned(), sha256_path(p)?)))
        .collect()
}

pub fn write(path: &Path, m: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m)? + "\n";
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn directory_digest_ignores_manifest_and_tracks_content() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir(dir.path().join("sub")).unwrap();
        fs::write(dir.path().join("a.tsv"), "1\n").unwrap();
        fs::write(dir.path().join("sub/b.csv"), "2\n").unwrap();
        let before = sha256_path(dir.path()).unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "{}").unwrap();
        assert_eq!(sha256_path(dir.path()).unwrap(), before);
        let outs = output_digests(&OutputSpec::Dir(dir.path())).unwrap();
        assert_eq!(outs.keys().collect::<Vec<_>>(), ["a.tsv", "sub/b.csv"]);
        fs::write(dir.path().join("sub/b.csv"), "3\n").unwrap();
        assert_ne!(sha256_path(dir.path()).unwrap(), before);
    }

    #[test]
    fn file_manifest_sits_beside_output() {
        let p = Path::new("out/pred.tsv");
        assert_eq!(OutputSpec::File(p).manifest_path(), Path::new("out/pred.tsv.manifest.json"));
    }
}
