//! Synthetic labeled shape datasets and their on-disk layout.
//!
//! A dataset directory holds `{train,test}/{class}/{id}.xyz` plus a
//! `manifest.json` listing the class names and every entry with its label.

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cloud::{self, LabeledCloud, ShapeFamily};
use crate::error::{Error, Result};
use crate::geom::derive_seed;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSpec {
    pub classes: Vec<ShapeFamily>,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub points: usize,
    pub jitter: f64,
    pub seed: u64,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            classes: ShapeFamily::ALL.to_vec(),
            train_per_class: 300,
            test_per_class: 60,
            points: 1024,
            jitter: 0.005,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::param("a dataset needs at least two classes"));
        }
        let mut seen = self.classes.clone();
        seen.sort_by_key(|f| f.name());
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(Error::param("dataset classes must be distinct"));
        }
        if self.points == 0 {
            return Err(Error::param("clouds need at least one point"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::param("jitter must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    /// Relative path from the dataset root, `/`-separated.
    pub path: String,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<DatasetSpec>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: Vec<String>,
    pub train: Vec<LabeledCloud>,
    pub test: Vec<LabeledCloud>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn split(&self, split: Split) -> &[LabeledCloud] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }
}

/// Clouds are interleaved by class (`class = position % C`), so every prefix
/// of a split is close to class-balanced.
fn generate_split(spec: &DatasetSpec, split: Split, per_class: usize) -> Result<Vec<LabeledCloud>> {
    let c = spec.classes.len();
    (0..per_class * c)
        .into_par_iter()
        .map(|pos| {
            let (label, idx) = (pos % c, pos / c);
            let seed = derive_seed(spec.seed, &[split.tag(), label as u64, idx as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let shape = spec.classes[label].random_spec(&mut rng, spec.jitter);
            let raw = cloud::sample_shape(&shape, spec.points, derive_seed(seed, &[0]))?;
            Ok(LabeledCloud {
                cloud: cloud::normalize_unit_cube(&raw),
                label,
            })
        })
        .collect()
}

/// Deterministic for a fixed spec regardless of thread count.
pub fn generate(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    Ok(Dataset {
        classes: spec.classes.iter().map(|f| f.name().to_string()).collect(),
        train: generate_split(spec, Split::Train, spec.train_per_class)?,
        test: generate_split(spec, Split::Test, spec.test_per_class)?,
    })
}

fn entry_path(classes: &[String], split: Split, label: usize, id: usize) -> String {
    format!("{}/{}/{id:05}.xyz", split.name(), classes[label])
}

pub fn write_dataset(dataset: &Dataset, spec: Option<&DatasetSpec>, dir: impl AsRef<Path>) -> Result<Manifest> {
    let dir = dir.as_ref();
    let mut entries = Vec::new();
    for split in [Split::Train, Split::Test] {
        for class in &dataset.classes {
            let d = dir.join(split.name()).join(class);
            fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
        }
        for (id, item) in dataset.split(split).iter().enumerate() {
            if item.label >= dataset.classes.len() {
                return Err(Error::contract(format!("label {} out of range", item.label)));
            }
            let rel = entry_path(&dataset.classes, split, item.label, id);
            cloud::save_cloud(&item.cloud, dir.join(&rel))?;
            entries.push(ManifestEntry {
                split,
                path: rel,
                label: item.label,
            });
        }
    }
    let manifest = Manifest {
        classes: dataset.classes.clone(),
        spec: spec.cloned(),
        entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let path = dir.as_ref().join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.classes.len() < 2 {
        return Err(Error::contract("manifest lists fewer than two classes"));
    }
    if let Some(e) = m.entries.iter().find(|e| e.label >= m.classes.len()) {
        return Err(Error::contract(format!("{}: label {} out of range", e.path, e.label)));
    }
    Ok(m)
}

/// Loads every entry listed in the manifest, keeping manifest order.
pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let m = read_manifest(dir)?;
    let loaded: Vec<Result<(Split, LabeledCloud)>> = m
        .entries
        .par_iter()
        .map(|e| {
            let path: PathBuf = dir.join(&e.path);
            Ok((
                e.split,
                LabeledCloud {
                    cloud: cloud::load_cloud(path)?,
                    label: e.label,
                },
            ))
        })
        .collect();
    let mut ds = Dataset {
        classes: m.classes,
        train: Vec::new(),
        test: Vec::new(),
    };
    for r in loaded {
        let (split, item) = r?;
        match split {
            Split::Train => ds.train.push(item),
            Split::Test => ds.test.push(item),
        }
    }
    Ok(ds)
}
