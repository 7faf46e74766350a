//! Content-addressed file cache for provider responses.
//!
//! Layout: `<root>/<model_id>/<first two hex chars of key>/<key>.json`.
//! Writes go through a temp file in the same directory followed by a rename,
//! so interrupted runs leave complete entries or none at all.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{de::DeserializeOwned, Serialize};

use super::GatewayError;

static TEMP_COUNTER: AtomicU64 = AtomicU64::new(0);

pub struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn new(root: impl Into<PathBuf>) -> ResponseCache {
        ResponseCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, model_id: &str, key: &str) -> PathBuf {
        let shard = &key[..2.min(key.len())];
        self.root
            .join(sanitize_component(model_id))
            .join(shard)
            .join(format!("{}.json", key))
    }

    pub fn get<T: DeserializeOwned>(&self, model_id: &str, key: &str) -> Option<T> {
        let path = self.entry_path(model_id, key);
        let bytes = std::fs::read(&path).ok()?;
        match serde_json::from_slice(&bytes) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("discarding unreadable cache entry {}: {}", path.display(), e);
                None
            }
        }
    }

    pub fn put<T: Serialize>(
        &self,
        model_id: &str,
        key: &str,
        value: &T,
    ) -> Result<(), GatewayError> {
        let path = self.entry_path(model_id, key);
        let dir = path.parent().expect("entry path has parent");
        std::fs::create_dir_all(dir)
            .map_err(|e| GatewayError::CacheIo(format!("{}: {}", dir.display(), e)))?;
        let tmp = dir.join(format!(
            ".{}.tmp.{}.{}",
            key,
            std::process::id(),
            TEMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| GatewayError::CacheIo(e.to_string()))?;
        std::fs::write(&tmp, bytes)
            .map_err(|e| GatewayError::CacheIo(format!("{}: {}", tmp.display(), e)))?;
        std::fs::rename(&tmp, &path)
            .map_err(|e| GatewayError::CacheIo(format!("{}: {}", path.display(), e)))?;
        Ok(())
    }
}

/// Makes a model id safe as a directory name.
pub fn sanitize_component(raw: &str) -> String {
    let cleaned: String = raw
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '-' | '_' | '.' => c,
            _ => '_',
        })
        .collect();
    if cleaned.is_empty() {
        "_".to_string()
    } else {
        cleaned
    }
}
