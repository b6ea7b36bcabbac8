//! Experiment configuration and the commands behind the CLI.
//!
//! Every command reads one JSON [`ExperimentConfig`]. Relative paths in the
//! config resolve against the config file's directory. Outputs go under
//! `output_dir`:
//!
//! ```text
//! train_curve.csv                 epoch,train_loss,train_accuracy,test_accuracy
//! upsampler_curve.csv             epoch,train_loss,train_reconstruction,validation_reconstruction
//! attacks/{attack}/{id}.xyz       adversarial cloud for test cloud `id`
//! attacks/{attack}/{id}.json      provenance (AttackProvenance)
//! attacks/{attack}/summary.json   AttackSummary
//! defended/{attack}/{defense}/{id}.xyz
//! report.csv                      attack,defense,correct,count,accuracy
//! report.json                     ExperimentReport
//! ratio_study.csv                 id,label,outcome,sor_removed,srs_removed,adv_points,p_sor,p_srs
//! ratio_summary.json              RatioSummary
//! report.md                       rendered accuracy grid
//! ```
//!
//! CSV files carry no timing data, so a rerun with the same config produces
//! byte-identical CSVs.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{self, AttackResult, CwConfig, SaliencyConfig, SetMetric};
use crate::checkpoint::Checkpoint;
use crate::classifier::{self, ClassifierParams, TrainConfig};
use crate::cloud::{self, LabeledCloud, PointCloud, ShapeFamily};
use crate::dataset::{self, DatasetSpec};
use crate::defenses::{self, SorConfig, Upsampler};
use crate::error::{Error, Result};
use crate::geom::derive_seed;
use crate::metrics::{self, AdvMode, RemovalOutcome};
use crate::upsampler::{self, Patch, UpsamplerParams, UpsamplerTrainConfig};

pub const CLEAN_ROW: &str = "clean";
pub const NO_DEFENSE: &str = "none";

const TAG_ATTACK: u64 = 0xa77a;
const TAG_DEFENSE: u64 = 0xdefe;
const TAG_RATIO: u64 = 0x5a70;
const TAG_PATCHES: u64 = 0x9a7c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every per-cloud seed derives from it.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub dataset: DatasetConfig,
    pub classifier: ClassifierConfig,
    #[serde(default)]
    pub upsampler: Option<UpsamplerConfig>,
    #[serde(default)]
    pub attacks: Vec<AttackSpec>,
    #[serde(default)]
    pub defenses: Vec<DefenseSpec>,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
    #[serde(default)]
    pub ratio_study: Option<RatioStudyConfig>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub dir: PathBuf,
    #[serde(default)]
    pub spec: DatasetSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsamplerConfig {
    pub checkpoint: PathBuf,
    #[serde(default)]
    pub train: UpsamplerTrainConfig,
    #[serde(default)]
    pub patches: PatchConfig,
}

/// Training patches are cut from freshly sampled dense clouds, independent of
/// the classifier dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PatchConfig {
    pub families: Vec<ShapeFamily>,
    pub clouds_per_family: usize,
    pub validation_clouds_per_family: usize,
    /// Sparse resolution; dense clouds have `points * rate` points.
    pub points: usize,
    pub jitter: f64,
    pub patch_size: usize,
    pub patches_per_cloud: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        Self {
            families: ShapeFamily::ALL.to_vec(),
            clouds_per_family: 10,
            validation_clouds_per_family: 2,
            points: 1024,
            jitter: 0.005,
            patch_size: 32,
            patches_per_cloud: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSpec {
    /// Row label in reports and directory name under `attacks/`.
    pub name: String,
    #[serde(flatten)]
    pub kind: AttackKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttackKind {
    CwShift {
        #[serde(default)]
        cw: CwConfig,
    },
    CwAdd {
        #[serde(default)]
        cw: CwConfig,
        metric: SetMetric,
    },
    Drop {
        #[serde(default)]
        saliency: SaliencyConfig,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DefenseSpec {
    /// Column label in reports.
    pub name: String,
    #[serde(flatten)]
    pub kind: DefenseKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum DefenseKind {
    Srs {
        r: usize,
    },
    Sor {
        #[serde(flatten)]
        sor: SorConfig,
    },
    Upsample {
        upsampler: UpsamplerChoice,
    },
    Dup {
        #[serde(flatten)]
        sor: SorConfig,
        upsampler: UpsamplerChoice,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UpsamplerChoice {
    /// The network stored at `upsampler.checkpoint`.
    Learned,
    Midpoint { rate: usize },
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Use only the first `test_limit` test clouds (the test split is
    /// interleaved by class, so prefixes stay balanced).
    pub test_limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RatioStudyConfig {
    pub attack: String,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default)]
    pub sor: SorConfig,
}

fn default_epsilon() -> f64 {
    0.04
}

fn check_name(kind: &str, name: &str) -> Result<()> {
    let ok = !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
        && !name.starts_with('.');
    if !ok {
        return Err(Error::param(format!(
            "{kind} name {name:?} must be nonempty [A-Za-z0-9._-] not starting with '.'"
        )));
    }
    Ok(())
}

impl ExperimentConfig {
    /// Parses and validates a config file, resolving relative paths against
    /// its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.dir);
        fix(&mut self.classifier.checkpoint);
        if let Some(u) = &mut self.upsampler {
            fix(&mut u.checkpoint);
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.spec.validate()?;
        let mut seen = BTreeSet::new();
        for a in &self.attacks {
            check_name("attack", &a.name)?;
            if a.name == CLEAN_ROW || !seen.insert(a.name.as_str()) {
                return Err(Error::param(format!("duplicate or reserved attack name {:?}", a.name)));
            }
        }
        let mut seen = BTreeSet::new();
        for d in &self.defenses {
            check_name("defense", &d.name)?;
            if d.name == NO_DEFENSE || !seen.insert(d.name.as_str()) {
                return Err(Error::param(format!("duplicate or reserved defense name {:?}", d.name)));
            }
            if d.uses_learned_upsampler() && self.upsampler.is_none() {
                return Err(Error::param(format!(
                    "defense {:?} needs an upsampler section",
                    d.name
                )));
            }
        }
        if let Some(r) = &self.ratio_study {
            let a = self.attack(&r.attack)?;
            if matches!(a.kind, AttackKind::Drop { .. }) {
                return Err(Error::param("the ratio study needs a C&W attack"));
            }
            if !(r.epsilon > 0.0 && r.epsilon < 1.0) {
                return Err(Error::param("ratio study epsilon must lie in (0, 1)"));
            }
        }
        if self.evaluation.test_limit == Some(0) {
            return Err(Error::param("test_limit must be positive"));
        }
        Ok(())
    }

    pub fn attack(&self, name: &str) -> Result<&AttackSpec> {
        self.attacks
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::param(format!("no attack named {name:?} in config")))
    }

    pub fn defense(&self, name: &str) -> Result<&DefenseSpec> {
        self.defenses
            .iter()
            .find(|d| d.name == name)
            .ok_or_else(|| Error::param(format!("no defense named {name:?} in config")))
    }

    fn attack_dir(&self, name: &str) -> PathBuf {
        self.output_dir.join("attacks").join(name)
    }
}

impl DefenseSpec {
    fn uses_learned_upsampler(&self) -> bool {
        matches!(
            self.kind,
            DefenseKind::Upsample { upsampler: UpsamplerChoice::Learned }
                | DefenseKind::Dup { upsampler: UpsamplerChoice::Learned, .. }
        )
    }
}

/// Stable 64-bit FNV-1a, used to fold names into seeds.
fn name_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn write_csv<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    if let Some(parent) = path.parent() {
        create_dir(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| csv_error(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: e.position().map_or(0, |p| p.line() as usize),
        message: e.to_string(),
    }
}

pub fn load_classifier(cfg: &ExperimentConfig) -> Result<ClassifierParams> {
    ClassifierParams::from_checkpoint(&Checkpoint::load(&cfg.classifier.checkpoint)?)
}

pub fn load_upsampler(cfg: &ExperimentConfig) -> Result<UpsamplerParams> {
    let u = cfg
        .upsampler
        .as_ref()
        .ok_or_else(|| Error::param("config has no upsampler section"))?;
    UpsamplerParams::from_checkpoint(&Checkpoint::load(&u.checkpoint)?)
}

/// The evaluated test clouds: the first `test_limit` of the test split.
pub fn test_subset(cfg: &ExperimentConfig) -> Result<Vec<LabeledCloud>> {
    let ds = dataset::load_dataset(&cfg.dataset.dir)?;
    let mut test = ds.test;
    if let Some(limit) = cfg.evaluation.test_limit {
        test.truncate(limit);
    }
    if test.is_empty() {
        return Err(Error::contract("the test split is empty"));
    }
    Ok(test)
}

pub fn cmd_generate_data(cfg: &ExperimentConfig) -> Result<dataset::Manifest> {
    let ds = dataset::generate(&cfg.dataset.spec)?;
    create_dir(&cfg.dataset.dir)?;
    let m = dataset::write_dataset(&ds, Some(&cfg.dataset.spec), &cfg.dataset.dir)?;
    info!(
        "wrote {} clouds ({} classes) to {}",
        m.entries.len(),
        m.classes.len(),
        cfg.dataset.dir.display()
    );
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainCurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
}

pub fn cmd_train(cfg: &ExperimentConfig) -> Result<Vec<TrainCurveRow>> {
    let ds = dataset::load_dataset(&cfg.dataset.dir)?;
    if ds.train.is_empty() {
        return Err(Error::contract("the training split is empty"));
    }
    let test = (!ds.test.is_empty()).then_some(ds.test.as_slice());
    let (params, history) = classifier::train(&ds.train, test, ds.num_classes(), &cfg.classifier.train, |s| {
        info!(
            "epoch {}: loss {:.4} train acc {:.4} test acc {:?}",
            s.epoch, s.train_loss, s.train_accuracy, s.test_accuracy
        )
    })?;
    if let Some(parent) = cfg.classifier.checkpoint.parent() {
        create_dir(parent)?;
    }
    params.to_checkpoint().save(&cfg.classifier.checkpoint)?;
    let rows: Vec<TrainCurveRow> = history
        .into_iter()
        .map(|s| TrainCurveRow {
            epoch: s.epoch,
            train_loss: s.train_loss,
            train_accuracy: s.train_accuracy,
            test_accuracy: s.test_accuracy,
        })
        .collect();
    write_csv(&cfg.output_dir.join("train_curve.csv"), &rows)?;
    Ok(rows)
}

/// Patches cut from `clouds_per_family` dense clouds of each family.
pub fn make_patches(p: &PatchConfig, rate: usize, clouds_per_family: usize, seed: u64) -> Result<Vec<Patch>> {
    if p.families.is_empty() || p.points == 0 {
        return Err(Error::param("patch config needs families and a positive point count"));
    }
    let jobs: Vec<(usize, usize)> = (0..p.families.len())
        .flat_map(|f| (0..clouds_per_family).map(move |i| (f, i)))
        .collect();
    let per_cloud: Vec<Result<Vec<Patch>>> = jobs
        .par_iter()
        .map(|&(f, i)| {
            let family = p.families[f];
            let s = derive_seed(seed, &[name_hash(family.name()), i as u64]);
            let mut rng = ChaCha8Rng::seed_from_u64(s);
            let spec = family.random_spec(&mut rng, p.jitter);
            let dense = cloud::normalize_unit_cube(&cloud::sample_shape(&spec, p.points * rate, derive_seed(s, &[1]))?);
            upsampler::extract_patches(&dense, p.patch_size, rate, p.patches_per_cloud, derive_seed(s, &[2]))
        })
        .collect();
    let mut out = Vec::new();
    for r in per_cloud {
        out.extend(r?);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpsamplerCurveRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_reconstruction: f64,
    pub validation_reconstruction: Option<f64>,
}

pub fn cmd_train_upsampler(cfg: &ExperimentConfig) -> Result<Vec<UpsamplerCurveRow>> {
    let u = cfg
        .upsampler
        .as_ref()
        .ok_or_else(|| Error::param("config has no upsampler section"))?;
    let rate = u.train.rate;
    let train = make_patches(&u.patches, rate, u.patches.clouds_per_family, derive_seed(cfg.seed, &[TAG_PATCHES, 1]))?;
    let validation = if u.patches.validation_clouds_per_family > 0 {
        Some(make_patches(
            &u.patches,
            rate,
            u.patches.validation_clouds_per_family,
            derive_seed(cfg.seed, &[TAG_PATCHES, 2]),
        )?)
    } else {
        None
    };
    info!("training upsampler on {} patches", train.len());
    let (params, history) = upsampler::train_upsampler(&train, validation.as_deref(), &u.train, |e| {
        info!(
            "epoch {}: loss {:.5} rec {:.5} val rec {:?}",
            e.epoch, e.train_loss, e.train_reconstruction, e.validation_reconstruction
        )
    })?;
    if let Some(parent) = u.checkpoint.parent() {
        create_dir(parent)?;
    }
    params.to_checkpoint().save(&u.checkpoint)?;
    let rows: Vec<UpsamplerCurveRow> = history
        .into_iter()
        .map(|e| UpsamplerCurveRow {
            epoch: e.epoch,
            train_loss: e.train_loss,
            train_reconstruction: e.train_reconstruction,
            validation_reconstruction: e.validation_reconstruction,
        })
        .collect();
    write_csv(&cfg.output_dir.join("upsampler_curve.csv"), &rows)?;
    Ok(rows)
}

/// Everything about one attacked cloud except the points themselves.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackProvenance {
    pub attack: AttackSpec,
    pub cloud_id: usize,
    pub label: usize,
    pub seed: u64,
    pub classifier_checkpoint: PathBuf,
    /// Set when the attack raised an error; the clean cloud is stored instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub success: bool,
    pub skipped: bool,
    pub distortion: f64,
    pub predicted: usize,
    pub target: Option<usize>,
    pub iterations: usize,
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub dropped: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackSummary {
    pub attack: AttackSpec,
    pub count: usize,
    pub skipped: usize,
    pub errors: usize,
    pub successes: usize,
    /// Successes over attempted (non-skipped) clouds.
    pub success_rate: f64,
    /// Mean distortion over successful examples.
    pub mean_distortion: Option<f64>,
}

fn run_attack(params: &ClassifierParams, spec: &AttackSpec, item: &LabeledCloud, seed: u64) -> Result<AttackResult> {
    match &spec.kind {
        AttackKind::CwShift { cw } => {
            let cw = CwConfig { seed, ..cw.clone() };
            attacks::cw_shift(params, &item.cloud, item.label, &cw)
        }
        AttackKind::CwAdd { cw, metric } => {
            let cw = CwConfig { seed, ..cw.clone() };
            attacks::cw_add(params, &item.cloud, item.label, &cw, *metric)
        }
        AttackKind::Drop { saliency } => attacks::drop_attack(params, &item.cloud, item.label, saliency),
    }
}

fn cloud_file(id: usize) -> String {
    format!("{id:05}.xyz")
}

fn provenance_file(id: usize) -> String {
    format!("{id:05}.json")
}

/// Attacks every evaluated test cloud with each configured attack (or only
/// `only`). Per-cloud failures are logged and recorded, not fatal.
pub fn cmd_attack(cfg: &ExperimentConfig, only: Option<&str>) -> Result<Vec<AttackSummary>> {
    let params = load_classifier(cfg)?;
    let test = test_subset(cfg)?;
    let selected: Vec<&AttackSpec> = match only {
        Some(name) => vec![cfg.attack(name)?],
        None => cfg.attacks.iter().collect(),
    };
    let mut summaries = Vec::new();
    for spec in selected {
        let dir = cfg.attack_dir(&spec.name);
        create_dir(&dir)?;
        let started = Instant::now();
        let outcomes: Vec<(AttackProvenance, PointCloud)> = test
            .par_iter()
            .enumerate()
            .map(|(id, item)| {
                let seed = derive_seed(cfg.seed, &[TAG_ATTACK, name_hash(&spec.name), id as u64]);
                let mut prov = AttackProvenance {
                    attack: spec.clone(),
                    cloud_id: id,
                    label: item.label,
                    seed,
                    classifier_checkpoint: cfg.classifier.checkpoint.clone(),
                    error: None,
                    success: false,
                    skipped: false,
                    distortion: 0.0,
                    predicted: item.label,
                    target: None,
                    iterations: 0,
                    c: None,
                    dropped: Vec::new(),
                };
                match run_attack(&params, spec, item, seed) {
                    Ok(r) => {
                        prov.success = r.success;
                        prov.skipped = r.skipped;
                        prov.distortion = r.distortion;
                        prov.predicted = r.predicted;
                        prov.target = r.target;
                        prov.iterations = r.iterations;
                        prov.c = r.c;
                        prov.dropped = r.dropped;
                        (prov, r.cloud)
                    }
                    Err(e) => {
                        warn!("attack {} failed on cloud {id}: {e}", spec.name);
                        prov.error = Some(e.to_string());
                        (prov, item.cloud.clone())
                    }
                }
            })
            .collect();
        for (prov, c) in &outcomes {
            cloud::save_cloud(c, dir.join(cloud_file(prov.cloud_id)))?;
            write_json(&dir.join(provenance_file(prov.cloud_id)), prov)?;
        }
        let skipped = outcomes.iter().filter(|(p, _)| p.skipped).count();
        let errors = outcomes.iter().filter(|(p, _)| p.error.is_some()).count();
        let wins: Vec<f64> = outcomes
            .iter()
            .filter(|(p, _)| p.success)
            .map(|(p, _)| p.distortion)
            .collect();
        let attempted = outcomes.len() - skipped;
        let summary = AttackSummary {
            attack: spec.clone(),
            count: outcomes.len(),
            skipped,
            errors,
            successes: wins.len(),
            success_rate: if attempted == 0 { 0.0 } else { wins.len() as f64 / attempted as f64 },
            mean_distortion: (!wins.is_empty()).then(|| wins.iter().sum::<f64>() / wins.len() as f64),
        };
        info!(
            "attack {}: {}/{} successful, {} skipped, {} errors ({:.1}s)",
            spec.name,
            summary.successes,
            attempted,
            skipped,
            errors,
            started.elapsed().as_secs_f64()
        );
        write_json(&dir.join("summary.json"), &summary)?;
        summaries.push(summary);
    }
    Ok(summaries)
}

/// One attacked cloud as reloaded from disk.
#[derive(Debug, Clone)]
pub struct AttackedCloud {
    pub provenance: AttackProvenance,
    pub cloud: PointCloud,
}

pub fn load_attack(cfg: &ExperimentConfig, name: &str, expected: usize) -> Result<Vec<AttackedCloud>> {
    let dir = cfg.attack_dir(name);
    let summary: AttackSummary = read_json(&dir.join("summary.json"))?;
    if summary.count != expected {
        return Err(Error::contract(format!(
            "attack {name} covers {} clouds but {expected} are evaluated; rerun the attack command",
            summary.count
        )));
    }
    (0..expected)
        .into_par_iter()
        .map(|id| {
            Ok(AttackedCloud {
                provenance: read_json(&dir.join(provenance_file(id)))?,
                cloud: cloud::load_cloud(dir.join(cloud_file(id)))?,
            })
        })
        .collect()
}

/// Applies a defense; `row` and `id` only feed the seed of random defenses.
pub fn apply_defense(
    cfg: &ExperimentConfig,
    spec: &DefenseSpec,
    learned: Option<&UpsamplerParams>,
    row: &str,
    id: usize,
    input: &PointCloud,
) -> Result<PointCloud> {
    let upsampler = |choice: UpsamplerChoice| -> Result<Upsampler<'_>> {
        match choice {
            UpsamplerChoice::Midpoint { rate } => Ok(Upsampler::Midpoint { rate }),
            UpsamplerChoice::Learned => learned
                .map(Upsampler::Learned)
                .ok_or_else(|| Error::contract("learned upsampler is not loaded")),
        }
    };
    match &spec.kind {
        DefenseKind::Srs { r } => {
            let seed = derive_seed(cfg.seed, &[TAG_DEFENSE, name_hash(&spec.name), name_hash(row), id as u64]);
            Ok(defenses::srs(input, *r, seed)?.cloud)
        }
        DefenseKind::Sor { sor } => Ok(defenses::sor(input, sor)?.cloud),
        DefenseKind::Upsample { upsampler: u } => upsampler(*u)?.apply(input),
        DefenseKind::Dup { sor, upsampler: u } => defenses::dup_pipeline(input, sor, upsampler(*u)?),
    }
}

fn learned_if_needed(cfg: &ExperimentConfig, specs: &[&DefenseSpec]) -> Result<Option<UpsamplerParams>> {
    if specs.iter().any(|d| d.uses_learned_upsampler()) {
        Ok(Some(load_upsampler(cfg)?))
    } else {
        Ok(None)
    }
}

/// Writes defended clouds under `defended/{attack or clean}/{defense}/`.
pub fn cmd_defend(cfg: &ExperimentConfig, attack: Option<&str>, defense: &str) -> Result<usize> {
    let spec = cfg.defense(defense)?;
    let learned = learned_if_needed(cfg, &[spec])?;
    let test = test_subset(cfg)?;
    let (row, inputs): (&str, Vec<PointCloud>) = match attack {
        Some(name) => {
            cfg.attack(name)?;
            (name, load_attack(cfg, name, test.len())?.into_iter().map(|a| a.cloud).collect())
        }
        None => (CLEAN_ROW, test.into_iter().map(|t| t.cloud).collect()),
    };
    let dir = cfg.output_dir.join("defended").join(row).join(defense);
    create_dir(&dir)?;
    let out: Vec<Result<PointCloud>> = inputs
        .par_iter()
        .enumerate()
        .map(|(id, c)| apply_defense(cfg, spec, learned.as_ref(), row, id, c))
        .collect();
    for (id, c) in out.into_iter().enumerate() {
        cloud::save_cloud(&c?, dir.join(cloud_file(id)))?;
    }
    Ok(inputs.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportCell {
    pub attack: String,
    pub defense: String,
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Effective configuration, defaults filled in.
    pub config: ExperimentConfig,
    /// Row labels, `clean` first.
    pub attacks: Vec<String>,
    /// Column labels, `none` first.
    pub defenses: Vec<String>,
    /// Row-major over `attacks` x `defenses`.
    pub cells: Vec<ReportCell>,
    pub attack_summaries: Vec<AttackSummary>,
    #[serde(default)]
    pub ratio: Option<RatioSummary>,
    pub wall_time_seconds: f64,
}

impl ExperimentReport {
    pub fn cell(&self, attack: &str, defense: &str) -> Option<&ReportCell> {
        self.cells.iter().find(|c| c.attack == attack && c.defense == defense)
    }

    pub fn accuracy(&self, attack: &str, defense: &str) -> Option<f64> {
        self.cell(attack, defense).map(|c| c.accuracy)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        read_json(path.as_ref())
    }
}

/// Accuracy grid over (clean + attacks) x (no defense + defenses). Attack rows
/// exclude clouds the attack skipped because they were misclassified clean.
pub fn cmd_evaluate(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let started = Instant::now();
    let params = load_classifier(cfg)?;
    let test = test_subset(cfg)?;
    let defense_refs: Vec<&DefenseSpec> = cfg.defenses.iter().collect();
    let learned = learned_if_needed(cfg, &defense_refs)?;

    let mut rows: Vec<(String, Vec<(usize, PointCloud, usize)>)> = vec![(
        CLEAN_ROW.to_string(),
        test.iter()
            .enumerate()
            .map(|(id, t)| (id, t.cloud.clone(), t.label))
            .collect(),
    )];
    let mut attack_summaries = Vec::new();
    for spec in &cfg.attacks {
        let loaded = load_attack(cfg, &spec.name, test.len())?;
        attack_summaries.push(read_json(&cfg.attack_dir(&spec.name).join("summary.json"))?);
        let kept = loaded
            .into_iter()
            .filter(|a| !a.provenance.skipped)
            .map(|a| (a.provenance.cloud_id, a.cloud, test[a.provenance.cloud_id].label))
            .collect::<Vec<_>>();
        info!("{}: evaluating {} of {} clouds", spec.name, kept.len(), test.len());
        rows.push((spec.name.clone(), kept));
    }

    let mut cells = Vec::new();
    for (row, items) in &rows {
        let none_correct = items
            .par_iter()
            .filter(|(_, c, l)| classifier::predict(&params, c) == *l)
            .count();
        cells.push(make_cell(row, NO_DEFENSE, none_correct, items.len()));
        for spec in &cfg.defenses {
            let hits: Vec<Result<bool>> = items
                .par_iter()
                .map(|(id, c, l)| {
                    let d = apply_defense(cfg, spec, learned.as_ref(), row, *id, c)?;
                    Ok(classifier::predict(&params, &d) == *l)
                })
                .collect();
            let mut correct = 0;
            for h in hits {
                correct += usize::from(h?);
            }
            cells.push(make_cell(row, &spec.name, correct, items.len()));
        }
    }

    let ratio = match &cfg.ratio_study {
        Some(_) => Some(run_ratio_study(cfg, &test)?.1),
        None => None,
    };
    let report = ExperimentReport {
        config: cfg.clone(),
        attacks: rows.iter().map(|(r, _)| r.clone()).collect(),
        defenses: std::iter::once(NO_DEFENSE.to_string())
            .chain(cfg.defenses.iter().map(|d| d.name.clone()))
            .collect(),
        cells,
        attack_summaries,
        ratio,
        wall_time_seconds: started.elapsed().as_secs_f64(),
    };
    write_csv(&cfg.output_dir.join("report.csv"), &report.cells)?;
    write_json(&cfg.output_dir.join("report.json"), &report)?;
    Ok(report)
}

fn make_cell(attack: &str, defense: &str, correct: usize, count: usize) -> ReportCell {
    ReportCell {
        attack: attack.to_string(),
        defense: defense.to_string(),
        correct,
        count,
        accuracy: if count == 0 { 0.0 } else { correct as f64 / count as f64 },
    }
}

pub fn read_report_csv(path: impl AsRef<Path>) -> Result<Vec<ReportCell>> {
    read_csv(path.as_ref())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub id: usize,
    pub label: usize,
    /// `ratio` when SOR removed something, otherwise `undefined`.
    pub outcome: String,
    pub sor_removed: usize,
    pub srs_removed: usize,
    pub adv_points: usize,
    pub p_sor: Option<f64>,
    pub p_srs: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioSummary {
    pub attack: String,
    pub epsilon: f64,
    pub mode: AdvMode,
    /// Clouds with a defined ratio (SOR removed at least one point).
    pub defined: usize,
    /// Clouds where SOR removed nothing, so neither ratio is defined.
    pub undefined: usize,
    /// Unsuccessful or skipped attacks, left out of the study.
    pub excluded: usize,
    pub mean_p_sor: Option<f64>,
    pub mean_p_srs: Option<f64>,
    /// Fraction of defined clouds with `p_sor > p_srs`.
    pub win_rate: Option<f64>,
}

fn run_ratio_study(cfg: &ExperimentConfig, test: &[LabeledCloud]) -> Result<(Vec<RatioRow>, RatioSummary)> {
    let rc = cfg
        .ratio_study
        .as_ref()
        .ok_or_else(|| Error::param("config has no ratio_study section"))?;
    let spec = cfg.attack(&rc.attack)?;
    let mode = match spec.kind {
        AttackKind::CwShift { .. } => AdvMode::PairedL2,
        AttackKind::CwAdd { .. } => AdvMode::SetDistance,
        AttackKind::Drop { .. } => return Err(Error::param("the ratio study needs a C&W attack")),
    };
    let attacked = load_attack(cfg, &rc.attack, test.len())?;
    let studied: Vec<&AttackedCloud> = attacked.iter().filter(|a| a.provenance.success).collect();
    let rows: Vec<Result<RatioRow>> = studied
        .par_iter()
        .map(|a| {
            let id = a.provenance.cloud_id;
            let report = metrics::identify_adv_points(&test[id].cloud, &a.cloud, rc.epsilon, mode)?;
            let sor = defenses::sor(&a.cloud, &rc.sor)?;
            let mut row = RatioRow {
                id,
                label: a.provenance.label,
                outcome: "undefined".into(),
                sor_removed: sor.removed.len(),
                srs_removed: 0,
                adv_points: report.adv_indices.len(),
                p_sor: None,
                p_srs: None,
            };
            if let RemovalOutcome::Ratio(ps) = metrics::removal_ratio(&a.cloud, &sor.removed, &report)? {
                let seed = derive_seed(cfg.seed, &[TAG_RATIO, name_hash(&rc.attack), id as u64]);
                let srs = defenses::srs(&a.cloud, sor.removed.len(), seed)?;
                row.outcome = "ratio".into();
                row.srs_removed = srs.removed.len();
                row.p_sor = Some(ps.p);
                row.p_srs = metrics::removal_ratio(&a.cloud, &srs.removed, &report)?.ratio();
            }
            Ok(row)
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let defined: Vec<&RatioRow> = rows.iter().filter(|r| r.p_sor.is_some()).collect();
    let mean = |f: fn(&RatioRow) -> f64| {
        (!defined.is_empty()).then(|| defined.iter().map(|r| f(r)).sum::<f64>() / defined.len() as f64)
    };
    let summary = RatioSummary {
        attack: rc.attack.clone(),
        epsilon: rc.epsilon,
        mode,
        defined: defined.len(),
        undefined: rows.len() - defined.len(),
        excluded: attacked.len() - studied.len(),
        mean_p_sor: mean(|r| r.p_sor.unwrap_or(0.0)),
        mean_p_srs: mean(|r| r.p_srs.unwrap_or(0.0)),
        win_rate: mean(|r| f64::from(u8::from(r.p_sor > r.p_srs))),
    };
    Ok((rows, summary))
}

pub fn cmd_ratio_study(cfg: &ExperimentConfig) -> Result<(Vec<RatioRow>, RatioSummary)> {
    let test = test_subset(cfg)?;
    let (rows, summary) = run_ratio_study(cfg, &test)?;
    write_csv(&cfg.output_dir.join("ratio_study.csv"), &rows)?;
    write_json(&cfg.output_dir.join("ratio_summary.json"), &summary)?;
    Ok((rows, summary))
}

pub fn read_ratio_csv(path: impl AsRef<Path>) -> Result<Vec<RatioRow>> {
    read_csv(path.as_ref())
}

/// Renders `report.json` as a Markdown accuracy grid and writes `report.md`.
pub fn cmd_report(cfg: &ExperimentConfig) -> Result<String> {
    let report = ExperimentReport::load(cfg.output_dir.join("report.json"))?;
    let text = render_report(&report);
    write_text(&cfg.output_dir.join("report.md"), &text)?;
    Ok(text)
}

pub fn render_report(report: &ExperimentReport) -> String {
    let mut s = String::new();
    s.push_str("| attack | n |");
    for d in &report.defenses {
        s.push_str(&format!(" {d} |"));
    }
    s.push_str("\n|---|---|");
    s.push_str(&"---|".repeat(report.defenses.len()));
    s.push('\n');
    for a in &report.attacks {
        let n = report.cell(a, NO_DEFENSE).map_or(0, |c| c.count);
        s.push_str(&format!("| {a} | {n} |"));
        for d in &report.defenses {
            match report.accuracy(a, d) {
                Some(acc) => s.push_str(&format!(" {:.1}% |", 100.0 * acc)),
                None => s.push_str(" - |"),
            }
        }
        s.push('\n');
    }
    if let Some(r) = &report.ratio {
        s.push_str(&format!(
            "\nRemoval ratio on {} (epsilon {}): {} defined, {} undefined",
            r.attack, r.epsilon, r.defined, r.undefined
        ));
        if let (Some(a), Some(b), Some(w)) = (r.mean_p_sor, r.mean_p_srs, r.win_rate) {
            s.push_str(&format!(
                "; mean p_sor {a:.4}, mean p_srs {b:.4}, sor wins on {:.1}% of clouds",
                100.0 * w
            ));
        }
        s.push('\n');
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_json_roundtrip_fills_defaults() {
        let text = r#"{
            "seed": 3,
            "output_dir": "out",
            "dataset": {"dir": "data"},
            "classifier": {"checkpoint": "cls.json"},
            "attacks": [
                {"name": "cw", "type": "cw_shift"},
                {"name": "add", "type": "cw_add", "metric": "chamfer", "cw": {"added_points": 16}},
                {"name": "drop200", "type": "drop", "saliency": {"total_drop": 200}}
            ],
            "defenses": [
                {"name": "srs", "type": "srs", "r": 500},
                {"name": "sor", "type": "sor", "k": 2, "alpha": 1.1},
                {"name": "dup", "type": "dup", "k": 2, "alpha": 1.1, "upsampler": {"midpoint": {"rate": 2}}}
            ],
            "ratio_study": {"attack": "cw"}
        }"#;
        let cfg: ExperimentConfig = serde_json::from_str(text).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.attacks[1].kind, AttackKind::CwAdd {
            cw: CwConfig { added_points: 16, ..Default::default() },
            metric: SetMetric::Chamfer,
        });
        assert_eq!(cfg.ratio_study.as_ref().unwrap().epsilon, 0.04);
        let echoed = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&echoed).unwrap(), cfg);
    }

    #[test]
    fn validation_rejects_bad_names_and_references() {
        let base = ExperimentConfig {
            seed: 0,
            output_dir: "o".into(),
            dataset: DatasetConfig { dir: "d".into(), spec: DatasetSpec::default() },
            classifier: ClassifierConfig { checkpoint: "c".into(), train: TrainConfig::default() },
            upsampler: None,
            attacks: vec![],
            defenses: vec![],
            evaluation: EvaluationConfig::default(),
            ratio_study: None,
        };
        let mut c = base.clone();
        c.defenses.push(DefenseSpec {
            name: "up".into(),
            kind: DefenseKind::Upsample { upsampler: UpsamplerChoice::Learned },
        });
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.attacks.push(AttackSpec { name: "../x".into(), kind: AttackKind::Drop { saliency: Default::default() } });
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.ratio_study = Some(RatioStudyConfig { attack: "missing".into(), epsilon: 0.04, sor: SorConfig::default() });
        assert!(c.validate().is_err());
        base.validate().unwrap();
    }

    #[test]
    fn name_hash_is_stable() {
        assert_eq!(name_hash(""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(name_hash("a"), 0xaf63_dc4c_8601_ec8c);
    }
}
