//! Content-addressed response cache on disk: `<root>/<first2>/<hash>.json`.

use std::fs;
use std::path::{Path, PathBuf};

use refine_core::advisor::ResponseCache;
use serde::{Deserialize, Serialize};

use crate::formats::write_atomic;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub prompt_hash: String,
    pub backend: String,
    pub response: String,
    /// RFC 3339, UTC.
    pub timestamp: String,
}

#[derive(Debug, Clone)]
pub struct DiskCache {
    root: PathBuf,
}

impl DiskCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// `None` for anything that is not a plain lower-case hex hash.
    pub fn entry_path(&self, hash: &str) -> Option<PathBuf> {
        if hash.len() < 3 || !hash.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b)) {
            return None;
        }
        Some(self.root.join(&hash[..2]).join(format!("{hash}.json")))
    }

    pub fn entry(&self, hash: &str) -> Option<CacheEntry> {
        let text = fs::read_to_string(self.entry_path(hash)?).ok()?;
        let entry: CacheEntry = serde_json::from_str(&text).ok()?;
        (entry.prompt_hash == hash).then_some(entry)
    }
}

impl ResponseCache for DiskCache {
    fn get(&mut self, hash: &str) -> Option<String> {
        self.entry(hash).map(|e| e.response)
    }

    fn put(&mut self, hash: &str, backend: &str, response: &str) -> Result<(), String> {
        let path = self.entry_path(hash).ok_or_else(|| format!("invalid prompt hash {hash:?}"))?;
        let entry = CacheEntry {
            prompt_hash: hash.into(),
            backend: backend.into(),
            response: response.into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let mut text = serde_json::to_string_pretty(&entry).map_err(|e| e.to_string())?;
        text.push('\n');
        write_atomic(&path, text.as_bytes()).map_err(|e| e.to_string())
    }
}
