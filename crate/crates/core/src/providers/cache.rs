//! Content-addressed response cache: `<root>/<model_id>/<sha256(key)>.json`.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CachedCompletion, CompletionRequest, ProviderError};

#[derive(Serialize)]
struct KeyFields<'a> {
    model_id: &'a str,
    prompt: &'a str,
    temperature: f64,
    sample_index: u32,
    logprobs_for: &'a Option<Vec<String>>,
}

/// Hex sha256 of the canonical JSON of the key fields.
pub fn cache_key(model_id: &str, request: &CompletionRequest) -> String {
    let fields = KeyFields {
        model_id,
        prompt: &request.prompt,
        temperature: request.temperature,
        sample_index: request.sample_index,
        logprobs_for: &request.logprobs_for,
    };
    let canonical = serde_json::to_vec(&fields).expect("key serializes");
    hex::encode(Sha256::digest(&canonical))
}

fn sanitize(model_id: &str) -> String {
    model_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') { c } else { '_' })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    key: String,
    prompt: String,
    completion: CachedCompletion,
}

#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn new(root: &Path, model_id: &str) -> Self {
        ResponseCache {
            dir: root.join(sanitize(model_id)),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<CachedCompletion> {
        let text = std::fs::read_to_string(self.path_for(key)).ok()?;
        match serde_json::from_str::<Entry>(&text) {
            Ok(entry) if entry.key == key => Some(entry.completion),
            _ => {
                log::warn!("ignoring unreadable cache entry {key}");
                None
            }
        }
    }

    /// Writes to a temp file in the same directory and renames it into place.
    pub fn put(&self, key: &str, request: &CompletionRequest, completion: &CachedCompletion) -> Result<(), ProviderError> {
        std::fs::create_dir_all(&self.dir).map_err(|e| ProviderError::Cache(e.to_string()))?;
        let entry = Entry {
            key: key.to_string(),
            prompt: request.prompt.clone(),
            completion: completion.clone(),
        };
        let text = serde_json::to_string_pretty(&entry).expect("cache entry serializes");
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        std::fs::write(&tmp, text).map_err(|e| ProviderError::Cache(e.to_string()))?;
        std::fs::rename(&tmp, self.path_for(key)).map_err(|e| ProviderError::Cache(e.to_string()))
    }
}
