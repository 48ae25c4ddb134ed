//! Checkpoint directories: one `SDT1` file per tensor plus `manifest.json`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    /// Tensor name to file name, relative to the checkpoint directory.
    pub tensors: BTreeMap<String, String>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

/// Named tensors plus free-form metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub tensors: BTreeMap<String, Tensor<T>>,
    pub meta: serde_json::Value,
}

impl<T: Scalar> Default for Checkpoint<T> {
    fn default() -> Self {
        Checkpoint {
            tensors: BTreeMap::new(),
            meta: serde_json::Value::Null,
        }
    }
}

fn file_name(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '.' || c == '_' || c == '-' {
                c
            } else {
                '_'
            }
        })
        .collect();
    format!("{safe}.sdt")
}

impl<T: Scalar> Checkpoint<T> {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Ingestion(format!("checkpoint has no tensor `{name}`")))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = file_name(name);
            t.save(&dir.join(&file))?;
            files.insert(name.clone(), file);
        }
        let manifest = Manifest {
            format: "SDT1".into(),
            tensors: files,
            meta: self.meta.clone(),
        };
        let path = dir.join(MANIFEST);
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != "SDT1" {
            return Err(Error::Ingestion(format!(
                "unknown checkpoint format `{}`",
                manifest.format
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, file) in manifest.tensors {
            tensors.insert(name, Tensor::load(&dir.join(file))?);
        }
        Ok(Checkpoint {
            tensors,
            meta: manifest.meta,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = Checkpoint::<f32>::default();
        c.insert(
            "a.weight",
            Tensor::from_fn(Shape::new(2, 1, 1, 3), |[n, _, _, w]| (n * 3 + w) as f32 * 0.1),
        );
        c.insert("b/odd name", Tensor::scalar(-1.5));
        c.meta = serde_json::json!({"iteration": 7});
        c.save(dir.path()).unwrap();
        assert_eq!(Checkpoint::<f32>::load(dir.path()).unwrap(), c);
    }
}
