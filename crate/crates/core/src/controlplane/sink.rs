//! Upload sinks: where finished scans land instead of the undersea PC.
//!
//! The required implementation is a directory tree,
//! `session-<id>/cam<k>/pat<idx>.pgm` plus one `manifest.json` per session
//! listing every image with its SHA-256, so uploads are verifiable after the
//! fact. An in-memory sink backs the simulation tests.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graycode::SequenceManifest;

/// Destination for captured stacks and reconstructions.
pub trait UploadSink: Send + Sync {
    /// Store `bytes` under a sink-relative path like
    /// `session-3/cam0/pat7.pgm`.
    fn put(&self, rel_path: &str, bytes: &[u8]) -> io::Result<()>;
}

/// Directory-tree sink rooted at `root`.
pub struct DirectorySink {
    root: PathBuf,
}

impl DirectorySink {
    pub fn new<P: AsRef<Path>>(root: P) -> io::Result<Self> {
        fs::create_dir_all(&root)?;
        Ok(Self {
            root: root.as_ref().to_path_buf(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl UploadSink for DirectorySink {
    fn put(&self, rel_path: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.root.join(rel_path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(path, bytes)
    }
}

/// In-memory sink for simulations.
#[derive(Default)]
pub struct MemorySink {
    files: Mutex<BTreeMap<String, Vec<u8>>>,
}

impl MemorySink {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.files.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains(&self, rel_path: &str) -> bool {
        self.files.lock().unwrap().contains_key(rel_path)
    }

    pub fn get(&self, rel_path: &str) -> Option<Vec<u8>> {
        self.files.lock().unwrap().get(rel_path).cloned()
    }

    pub fn paths(&self) -> Vec<String> {
        self.files.lock().unwrap().keys().cloned().collect()
    }

    /// Paths under `session-<id>/`.
    pub fn session_paths(&self, session_id: &str) -> Vec<String> {
        let prefix = format!("session-{session_id}/");
        self.files
            .lock()
            .unwrap()
            .keys()
            .filter(|k| k.starts_with(&prefix))
            .cloned()
            .collect()
    }
}

impl UploadSink for MemorySink {
    fn put(&self, rel_path: &str, bytes: &[u8]) -> io::Result<()> {
        self.files
            .lock()
            .unwrap()
            .insert(rel_path.to_string(), bytes.to_vec());
        Ok(())
    }
}

/// Manifest written next to each uploaded stack. The same schema describes
/// `simulate` output, so decoding works directly against a sink session.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionManifest {
    pub version: u32,
    pub session_id: String,
    pub pattern_manifest: SequenceManifest,
    pub cameras: Vec<String>,
    pub images: Vec<ImageEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ImageEntry {
    pub camera: String,
    pub pattern: usize,
    /// Path relative to the session directory.
    pub file: String,
    pub sha256: String,
    pub bytes: usize,
}

impl SessionManifest {
    pub fn image_rel_path(camera: &str, pattern: usize) -> String {
        format!("{camera}/pat{pattern}.pgm")
    }

    pub fn session_dir(session_id: &str) -> String {
        format!("session-{session_id}")
    }

    pub fn load<P: AsRef<Path>>(path: P) -> io::Result<Self> {
        let manifest: Self = serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?;
        Ok(manifest)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
