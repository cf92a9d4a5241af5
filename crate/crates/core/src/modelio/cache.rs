use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Mutex, RwLock};

use serde::{Deserialize, Serialize};

#[derive(Serialize, Deserialize)]
struct CacheLine {
    model: String,
    text: String,
    vector: Vec<f64>,
}

/// Embedding cache keyed by `(model, exact text)`, optionally persisted as
/// an append-only JSONL file.
#[derive(Debug, Default)]
pub struct EmbeddingCache {
    entries: RwLock<HashMap<(String, String), Vec<f64>>>,
    file: Option<Mutex<File>>,
}

impl EmbeddingCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Loads existing entries from `path` and appends new ones to it.
    pub fn open(path: &Path) -> std::io::Result<Self> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut entries = HashMap::new();
        if path.exists() {
            for line in BufReader::new(File::open(path)?).lines() {
                let line = line?;
                // a torn trailing line from an interrupted run is skipped
                if let Ok(entry) = serde_json::from_str::<CacheLine>(&line) {
                    entries.insert((entry.model, entry.text), entry.vector);
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self {
            entries: RwLock::new(entries),
            file: Some(Mutex::new(file)),
        })
    }

    pub fn get(&self, model: &str, text: &str) -> Option<Vec<f64>> {
        self.entries
            .read()
            .unwrap()
            .get(&(model.to_string(), text.to_string()))
            .cloned()
    }

    pub fn insert(&self, model: &str, text: &str, vector: Vec<f64>) -> std::io::Result<()> {
        let key = (model.to_string(), text.to_string());
        let mut entries = self.entries.write().unwrap();
        if entries.contains_key(&key) {
            return Ok(());
        }
        if let Some(file) = &self.file {
            let line = CacheLine {
                model: model.to_string(),
                text: text.to_string(),
                vector: vector.clone(),
            };
            let mut file = file.lock().unwrap();
            serde_json::to_writer(&mut *file, &line)?;
            file.write_all(b"\n")?;
        }
        entries.insert(key, vector);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn persists_across_opens() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache/emb.jsonl");
        {
            let cache = EmbeddingCache::open(&path).unwrap();
            cache.insert("m", "hello", vec![0.5, 0.25]).unwrap();
            cache.insert("m", "hello", vec![9.0, 9.0]).unwrap();
        }
        let cache = EmbeddingCache::open(&path).unwrap();
        assert_eq!(cache.get("m", "hello"), Some(vec![0.5, 0.25]));
        assert_eq!(cache.get("other", "hello"), None);
        assert_eq!(cache.len(), 1);
    }
}
