//! On-disk layout, checksums and the run manifest.
//!
//! An artifact is committed by staging its files under a `.tmp` name and
//! renaming them into place. Its manifest entry is dropped before the rename
//! and restored after it, so a file that exists without an entry is simply
//! treated as missing.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{PipelineError, WeekRange};
use crate::ingest::Cursor;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub sha256: String,
    /// Digest of everything the artifact was derived from.
    pub inputs: String,
    /// Stream position just past this week, for raw artifacts.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub resume: Option<Cursor>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RunManifest {
    pub tool_version: String,
    pub config_hash: String,
    pub source: String,
    pub weeks: Option<WeekRange>,
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a sequence of strings, unambiguous with respect to boundaries.
pub fn digest_parts<S: AsRef<str>>(parts: impl IntoIterator<Item = S>) -> String {
    let mut h = Sha256::new();
    for p in parts {
        let p = p.as_ref();
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// A unit of committed output: either one file or a directory of files.
#[derive(Debug, Clone)]
pub struct Artifact {
    pub key: String,
    /// Directory holding `files`, relative to the store root; `None` for a
    /// bare file artifact.
    pub dir: Option<PathBuf>,
    /// Paths relative to the store root, in checksum order.
    pub files: Vec<PathBuf>,
}

impl Artifact {
    pub fn file(key: impl Into<String>, path: impl Into<PathBuf>) -> Self {
        Artifact { key: key.into(), dir: None, files: vec![path.into()] }
    }

    pub fn files(key: impl Into<String>, paths: Vec<PathBuf>) -> Self {
        Artifact { key: key.into(), dir: None, files: paths }
    }

    pub fn dir(key: impl Into<String>, dir: impl Into<PathBuf>, names: &[&str]) -> Self {
        let dir = dir.into();
        let files = names.iter().map(|n| dir.join(n)).collect();
        Artifact { key: key.into(), dir: Some(dir), files }
    }
}

fn io_at(path: &Path) -> impl FnOnce(io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io { path: path.to_path_buf(), source }
}

/// Combined checksum of the artifact's files as they are on disk, or `None`
/// if any is missing.
pub fn artifact_sha(root: &Path, art: &Artifact) -> Result<Option<String>, PipelineError> {
    let mut parts = Vec::with_capacity(art.files.len() * 2);
    for rel in &art.files {
        let path = root.join(rel);
        match fs::read(&path) {
            Ok(bytes) => {
                parts.push(rel.to_string_lossy().into_owned());
                parts.push(sha256_hex(&bytes));
            }
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(io_at(&path)(e)),
        }
    }
    Ok(Some(digest_parts(parts)))
}

/// Checksum of the artifact if it is current: recorded, derived from
/// `inputs`, and present. A present artifact whose bytes disagree with its
/// recorded checksum is an error.
pub fn current_sha(
    root: &Path,
    art: &Artifact,
    entry: Option<&ArtifactEntry>,
    inputs: &str,
) -> Result<Option<String>, PipelineError> {
    let Some(entry) = entry else { return Ok(None) };
    if entry.inputs != inputs {
        return Ok(None);
    }
    match artifact_sha(root, art)? {
        None => Ok(None),
        Some(sha) if sha == entry.sha256 => Ok(Some(sha)),
        Some(_) => Err(PipelineError::ChecksumMismatch(art.key.clone())),
    }
}

fn tmp_sibling(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!(".{name}.tmp"))
}

fn write_synced(path: &Path, bytes: &[u8]) -> io::Result<()> {
    use std::io::Write;
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()
}

/// Writes the artifact's files next to their destination and renames them
/// into place. On failure the staged files are removed.
fn place(root: &Path, art: &Artifact, contents: &[Vec<u8>]) -> io::Result<()> {
    assert_eq!(art.files.len(), contents.len(), "one content buffer per file");
    match &art.dir {
        Some(dir) => {
            let dest = root.join(dir);
            let tmp = tmp_sibling(&dest);
            let staged = (|| {
                if tmp.exists() {
                    fs::remove_dir_all(&tmp)?;
                }
                fs::create_dir_all(&tmp)?;
                for (rel, bytes) in art.files.iter().zip(contents) {
                    write_synced(&tmp.join(rel.file_name().expect("file name")), bytes)?;
                }
                if dest.exists() {
                    fs::remove_dir_all(&dest)?;
                }
                fs::rename(&tmp, &dest)
            })();
            if staged.is_err() {
                let _ = fs::remove_dir_all(&tmp);
            }
            staged
        }
        None => {
            let mut staged = Vec::new();
            let result = (|| {
                for (rel, bytes) in art.files.iter().zip(contents) {
                    let dest = root.join(rel);
                    if let Some(parent) = dest.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    let tmp = tmp_sibling(&dest);
                    write_synced(&tmp, bytes)?;
                    staged.push((tmp, dest));
                }
                for (tmp, dest) in &staged {
                    fs::rename(tmp, dest)?;
                }
                Ok(())
            })();
            if result.is_err() {
                for (tmp, _) in &staged {
                    let _ = fs::remove_file(tmp);
                }
            }
            result
        }
    }
}

pub struct Store {
    root: PathBuf,
    manifest: RunManifest,
}

impl Store {
    pub fn open(root: &Path) -> Result<Self, PipelineError> {
        fs::create_dir_all(root).map_err(io_at(root))?;
        for sub in ["raw", "clusters", "graphs", "metrics"] {
            let dir = root.join(sub);
            fs::create_dir_all(&dir).map_err(io_at(&dir))?;
            remove_stale_tmp(&dir).map_err(io_at(&dir))?;
        }
        let path = root.join(MANIFEST_FILE);
        let manifest = match fs::read(&path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map_err(|e| PipelineError::Manifest(format!("{}: {e}", path.display())))?,
            Err(e) if e.kind() == io::ErrorKind::NotFound => RunManifest::default(),
            Err(e) => return Err(io_at(&path)(e)),
        };
        Ok(Store { root: root.to_path_buf(), manifest })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    pub fn manifest_mut(&mut self) -> &mut RunManifest {
        &mut self.manifest
    }

    pub fn entry(&self, key: &str) -> Option<&ArtifactEntry> {
        self.manifest.artifacts.get(key)
    }

    pub fn current(&self, art: &Artifact, inputs: &str) -> Result<Option<String>, PipelineError> {
        current_sha(&self.root, art, self.entry(&art.key), inputs)
    }

    pub fn save(&self) -> io::Result<()> {
        let path = self.root.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(&self.manifest).map_err(io::Error::other)?;
        bytes.push(b'\n');
        let tmp = tmp_sibling(&path);
        write_synced(&tmp, &bytes)?;
        fs::rename(&tmp, &path)
    }

    /// Commits the artifact and records it; returns its checksum.
    pub fn commit(
        &mut self,
        art: &Artifact,
        contents: &[Vec<u8>],
        inputs: String,
        resume: Option<Cursor>,
    ) -> io::Result<String> {
        if self.manifest.artifacts.remove(&art.key).is_some() {
            self.save()?;
        }
        place(&self.root, art, contents)?;
        let parts: Vec<String> = art
            .files
            .iter()
            .zip(contents)
            .flat_map(|(rel, bytes)| [rel.to_string_lossy().into_owned(), sha256_hex(bytes)])
            .collect();
        let sha = digest_parts(parts);
        self.manifest.artifacts.insert(art.key.clone(), ArtifactEntry { sha256: sha.clone(), inputs, resume });
        self.save()?;
        log::debug!("committed {} ({})", art.key, &sha[..12]);
        Ok(sha)
    }
}

/// Removes staging leftovers of an interrupted run.
fn remove_stale_tmp(dir: &Path) -> io::Result<()> {
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if name.starts_with('.') && name.ends_with(".tmp") {
            if entry.file_type()?.is_dir() {
                fs::remove_dir_all(entry.path())?;
            } else {
                fs::remove_file(entry.path())?;
            }
        }
    }
    Ok(())
}
