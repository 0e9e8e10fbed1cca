//! Output manifest: inputs that determine a run and content hashes of every artifact.

use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub bytes: u64,
    /// SHA-256 over `"blob <len>\0" + content`, as git's SHA-256 object format.
    pub blob_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub subcommand: String,
    pub version: String,
    pub config_sha256: Option<String>,
    pub seed: Option<u64>,
    pub outputs: Vec<OutputEntry>,
}

pub fn blob_hash(content: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", content.len()).as_bytes());
    h.update(content);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn collect(root: &Path, dir: &Path, out: &mut Vec<OutputEntry>) -> io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let path = e.path();
        if path.is_dir() {
            collect(root, &path, out)?;
            continue;
        }
        let rel = path.strip_prefix(root).expect("walk stays under root");
        let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
        if rel == MANIFEST_NAME {
            continue;
        }
        let content = std::fs::read(&path)?;
        out.push(OutputEntry { path: rel, bytes: content.len() as u64, blob_sha256: blob_hash(&content) });
    }
    Ok(())
}

/// Hashes every file under `dir` and writes `dir/manifest.json`.
pub fn write_manifest(dir: &Path, subcommand: &str, config_sha256: Option<String>, seed: Option<u64>) -> io::Result<Manifest> {
    let mut outputs = Vec::new();
    collect(dir, dir, &mut outputs)?;
    let m = Manifest { subcommand: subcommand.into(), version: env!("CARGO_PKG_VERSION").into(), config_sha256, seed, outputs };
    std::fs::write(dir.join(MANIFEST_NAME), serde_json::to_string_pretty(&m).expect("manifest serializes") + "\n")?;
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_matches_git_framing() {
        let expect = {
            let mut h = Sha256::new();
            h.update(b"blob 5\0hello");
            h.finalize().iter().map(|b| format!("{b:02x}")).collect::<String>()
        };
        assert_eq!(blob_hash(b"hello"), expect);
        assert_ne!(blob_hash(b"hello"), blob_hash(b"hellp"));
    }

    #[test]
    fn manifest_lists_nested_files_sorted() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("sub")).unwrap();
        std::fs::write(dir.path().join("b.txt"), "b").unwrap();
        std::fs::write(dir.path().join("sub/a.txt"), "a").unwrap();
        write_manifest(dir.path(), "x", None, Some(3)).unwrap();
        let m = write_manifest(dir.path(), "x", None, Some(3)).unwrap();
        let paths: Vec<&str> = m.outputs.iter().map(|o| o.path.as_str()).collect();
        assert_eq!(paths, ["b.txt", "sub/a.txt"]);
        assert_eq!(m.outputs[0].bytes, 1);
    }
}
