//! Named-tensor checkpoints: a JSON file holding shape metadata plus flat
//! f64 arrays. Round-trips are bit-exact for finite values (non-finite
//! parameters are rejected at save time).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Checkpoint {
    /// Free-form metadata (model shape, dynamics config, task info).
    pub meta: serde_json::Value,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Checkpoint {
        Checkpoint {
            meta,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: &Tensor) -> Result<()> {
        let data = tensor.to_vec();
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("checkpoint tensor {name} ({v})")));
        }
        self.tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: tensor.shape().to_vec(),
                data,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&TensorEntry> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Contract(format!("checkpoint is missing tensor {name}")))
    }

    /// Copy a stored entry into an existing tensor (shape-checked).
    pub fn restore(&self, name: &str, target: &Tensor) -> Result<()> {
        let entry = self.get(name)?;
        if entry.shape != target.shape() {
            return Err(Error::ShapeMismatch {
                op: "checkpoint restore",
                lhs: entry.shape.clone(),
                rhs: target.shape().to_vec(),
            });
        }
        target.set_data(&entry.data)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).map_err(|e| Error::Serialization(e.to_string()))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let raw = std::fs::read_to_string(path)?;
        serde_json::from_str(&raw).map_err(|e| Error::Serialization(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        // Awkward values: negative zero, subnormals, long mantissas.
        let values = vec![
            -0.0,
            f64::MIN_POSITIVE,
            f64::MIN_POSITIVE / 8.0,
            0.1 + 0.2,
            -1.234567890123456789e-200,
            9.87654321e123,
        ];
        let t = Tensor::new(values.clone(), vec![values.len()]).unwrap();
        let mut ckpt = Checkpoint::new(serde_json::json!({"kind": "test"}));
        ckpt.insert("weights", &t).unwrap();
        ckpt.save(&path).unwrap();

        let loaded = Checkpoint::load(&path).unwrap();
        let entry = loaded.get("weights").unwrap();
        assert_eq!(entry.shape, vec![values.len()]);
        for (a, b) in entry.data.iter().zip(values.iter()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_non_finite_parameters() {
        let t = Tensor::zeros(vec![2]);
        t.set_data(&[1.0, 1.0]).unwrap();
        let mut ckpt = Checkpoint::new(serde_json::Value::Null);
        ckpt.insert("ok", &t).unwrap();
        // Smuggle a non-finite value in via set_data on a zeros tensor.
        let bad = Tensor::zeros(vec![1]);
        bad.set_data(&[f64::INFINITY]).unwrap();
        assert!(ckpt.insert("bad", &bad).is_err());
    }

    #[test]
    fn restore_checks_shape() {
        let mut ckpt = Checkpoint::new(serde_json::Value::Null);
        let t = Tensor::new(vec![1.0, 2.0], vec![2]).unwrap();
        ckpt.insert("t", &t).unwrap();
        let wrong = Tensor::zeros(vec![3]);
        assert!(ckpt.restore("t", &wrong).is_err());
        let right = Tensor::zeros(vec![2]);
        ckpt.restore("t", &right).unwrap();
        assert_eq!(right.to_vec(), vec![1.0, 2.0]);
    }
}
