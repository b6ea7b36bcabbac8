//! Versioned JSON container for named tensors, shared by the classifier and
//! the upsampler.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    #[serde(default)]
    pub meta: BTreeMap<String, serde_json::Value>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn new(format: &str) -> Self {
        Self {
            format: format.to_string(),
            version: CHECKPOINT_VERSION,
            meta: BTreeMap::new(),
            tensors: Vec::new(),
        }
    }

    pub fn push_matrix(&mut self, name: impl Into<String>, m: &Array2<f64>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape: vec![m.nrows(), m.ncols()],
            data: m.iter().copied().collect(),
        });
    }

    pub fn push_vector(&mut self, name: impl Into<String>, v: &Array1<f64>) {
        self.tensors.push(Tensor {
            name: name.into(),
            shape: vec![v.len()],
            data: v.to_vec(),
        });
    }

    fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| Error::contract(format!("checkpoint has no tensor {name:?}")))
    }

    pub fn matrix(&self, name: &str) -> Result<Array2<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 2 || t.shape[0] * t.shape[1] != t.data.len() {
            return Err(Error::contract(format!("tensor {name:?} is not a consistent matrix")));
        }
        Array2::from_shape_vec((t.shape[0], t.shape[1]), t.data.clone())
            .map_err(|e| Error::contract(format!("tensor {name:?}: {e}")))
    }

    pub fn vector(&self, name: &str) -> Result<Array1<f64>> {
        let t = self.tensor(name)?;
        if t.shape.len() != 1 || t.shape[0] != t.data.len() {
            return Err(Error::contract(format!("tensor {name:?} is not a consistent vector")));
        }
        Ok(Array1::from(t.data.clone()))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        self.meta
            .get(key)
            .and_then(|v| v.as_u64())
            .map(|v| v as usize)
            .ok_or_else(|| Error::contract(format!("checkpoint meta {key:?} missing or not an integer")))
    }

    pub fn expect_format(&self, format: &str) -> Result<()> {
        if self.format != format {
            return Err(Error::contract(format!(
                "expected a {format:?} checkpoint, found {:?}",
                self.format
            )));
        }
        if self.version != CHECKPOINT_VERSION {
            return Err(Error::contract(format!(
                "unsupported checkpoint version {}",
                self.version
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self)?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.tensors.iter().flat_map(|t| &t.data).any(|v| !v.is_finite()) {
            return Err(Error::contract(format!("{} contains non-finite values", path.display())));
        }
        Ok(ck)
    }
}
