//! Experiment configuration, dataset splits, training orchestration and
//! evaluation sweeps shared by the command-line tool and the tests.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array3, Axis};
use num_complex::Complex64;
use rand::Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::baselines::{mmse_precode, svd_precode, CeModel, CsiAutoencoder, JfpNet};
use crate::channel::ScenarioConfig;
use crate::checkpoint::fnv1a;
use crate::dataset::{read_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{spectral_efficiency, SnrConfig, NMSE_FLOOR_DB};
use crate::model::{JefpNet, ModelConfig, PilotKind, Sample};
use crate::precoder::UserMask;
use crate::rng::{derive, seeded};
use crate::training::{load_checkpoint, save_checkpoint, train, AnyModel, ModelKind, TrainConfig, TrainState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pipeline {
    Jefpnet,
    Sefpnet,
    JfpnetIdealCe,
    SvdWf,
    Mmse,
    DftPilot,
    Qam(u32),
}

impl fmt::Display for Pipeline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Jefpnet => f.write_str("jefpnet"),
            Self::Sefpnet => f.write_str("sefpnet"),
            Self::JfpnetIdealCe => f.write_str("jfpnet-idealCE"),
            Self::SvdWf => f.write_str("svd-wf"),
            Self::Mmse => f.write_str("mmse"),
            Self::DftPilot => f.write_str("dft-pilot"),
            Self::Qam(b) => write!(f, "qam:{b}"),
        }
    }
}

impl FromStr for Pipeline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "jefpnet" => Self::Jefpnet,
            "sefpnet" => Self::Sefpnet,
            "jfpnet-idealCE" => Self::JfpnetIdealCe,
            "svd-wf" => Self::SvdWf,
            "mmse" => Self::Mmse,
            "dft-pilot" => Self::DftPilot,
            _ => match s.strip_prefix("qam:").map(str::parse::<u32>) {
                Some(Ok(b)) => Self::Qam(b),
                _ => return Err(Error::Config(format!("unknown pipeline {s:?}"))),
            },
        })
    }
}

impl Serialize for Pipeline {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Pipeline {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

impl Pipeline {
    /// Trained networks this pipeline evaluates.
    pub fn targets(self) -> &'static [Target] {
        match self {
            Self::Jefpnet | Self::Qam(_) => &[Target::Jefpnet],
            Self::DftPilot => &[Target::DftPilot],
            Self::Sefpnet => &[Target::Ce, Target::Feedback],
            Self::JfpnetIdealCe => &[Target::Jfp],
            Self::SvdWf | Self::Mmse => &[],
        }
    }
}

/// A network that gets its own checkpoint.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Target {
    Jefpnet,
    DftPilot,
    Ce,
    Feedback,
    Jfp,
}

impl Target {
    pub const ALL: [Target; 5] = [Self::Jefpnet, Self::DftPilot, Self::Ce, Self::Feedback, Self::Jfp];

    pub fn name(self) -> &'static str {
        match self {
            Self::Jefpnet => "jefpnet",
            Self::DftPilot => "dft-pilot",
            Self::Ce => "ce",
            Self::Feedback => "feedback",
            Self::Jfp => "jfp",
        }
    }

    pub fn kind(self) -> ModelKind {
        match self {
            Self::Jefpnet | Self::DftPilot => ModelKind::Jefpnet,
            Self::Ce => ModelKind::Ce,
            Self::Feedback => ModelKind::Feedback,
            Self::Jfp => ModelKind::Jfp,
        }
    }

    pub fn model_config(self, base: &ModelConfig) -> ModelConfig {
        let pilots = if self == Self::DftPilot { PilotKind::Dft } else { base.pilots };
        ModelConfig { pilots, ..base.clone() }
    }
}

/// Scenario given either by preset name or in full.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioChoice {
    Preset(String),
    Full(ScenarioConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemConfig {
    pub nc: usize,
    pub nt: usize,
    /// Pilot subcarrier spacing.
    pub g: usize,
    pub l: usize,
    pub z: usize,
    pub k_max: usize,
    #[serde(default = "one")]
    pub power: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    #[serde(default)]
    pub base_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SnrGrid {
    pub snr_ce_db: Vec<f64>,
    pub snr_u_db: Vec<f64>,
    pub snr_d_db: Vec<f64>,
    /// Active user counts; defaults to `K_max` only.
    #[serde(default)]
    pub k: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_eval_batch")]
    pub batch_size: usize,
}

fn default_eval_batch() -> usize {
    128
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { seed: 0, batch_size: default_eval_batch() }
    }
}

fn default_architecture() -> String {
    "desk".into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    /// Model preset (`desk`, `full`, `tiny`) supplying the layer widths;
    /// `system` overrides its dimensions.
    #[serde(default = "default_architecture")]
    pub architecture: String,
    pub scenario: ScenarioChoice,
    pub system: SystemConfig,
    pub data: DataConfig,
    pub snr: SnrGrid,
    pub pipelines: Vec<Pipeline>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("experiment config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.snr.snr_ce_db.is_empty() || self.snr.snr_u_db.is_empty() || self.snr.snr_d_db.is_empty() {
            return Err(Error::Config("SNR grids must be non-empty".into()));
        }
        if self.pipelines.is_empty() {
            return Err(Error::Config("no pipelines selected".into()));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval.batch_size must be positive".into()));
        }
        let cfg = self.model_config()?;
        if let Some(&k) = self.snr.k.iter().find(|&&k| k == 0 || k > cfg.k_max) {
            return Err(Error::Config(format!("K = {k} outside 1..={}", cfg.k_max)));
        }
        self.scenario_config()?;
        self.train.validate()
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let base = ModelConfig::preset(&self.architecture)
            .ok_or_else(|| Error::Config(format!("unknown architecture {:?}", self.architecture)))?;
        let s = &self.system;
        let cfg =
            ModelConfig { nc: s.nc, nt: s.nt, spacing: s.g, l: s.l, z: s.z, k_max: s.k_max, power: s.power, ..base };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn scenario_config(&self) -> Result<ScenarioConfig> {
        let s = &self.system;
        let sc = match &self.scenario {
            ScenarioChoice::Preset(name) => ScenarioConfig::preset(name, s.nc, s.nt, s.k_max)
                .ok_or_else(|| Error::Config(format!("unknown scenario preset {name:?}")))?,
            ScenarioChoice::Full(sc) => sc.clone(),
        };
        if (sc.n_subcarriers, sc.n_tx_antennas, sc.k_max) != (s.nc, s.nt, s.k_max) {
            return Err(Error::Config("scenario dimensions disagree with [system]".into()));
        }
        sc.validate()?;
        Ok(sc)
    }

    /// Overrides every seed (data, training, evaluation).
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.base_seed = seed;
        self.train.seed = seed;
        self.eval.seed = seed;
        self
    }

    /// Stable hash of everything that affects results (all fields but
    /// `output_dir`), hex encoded.
    pub fn hash(&self) -> String {
        let canonical = Self { output_dir: PathBuf::new(), ..self.clone() };
        format!("{:016x}", fnv1a(canonical.to_toml().as_bytes()))
    }

    pub fn targets(&self) -> Vec<Target> {
        let mut t: Vec<Target> = self.pipelines.iter().flat_map(|p| p.targets().iter().copied()).collect();
        t.sort();
        t.dedup();
        t
    }

    pub fn k_values(&self) -> Vec<usize> {
        if self.snr.k.is_empty() {
            vec![self.system.k_max]
        } else {
            self.snr.k.clone()
        }
    }

    pub fn grid(&self) -> Vec<GridPoint> {
        let mut out = Vec::new();
        for &k in &self.k_values() {
            for &snr_ce_db in &self.snr.snr_ce_db {
                for &snr_u_db in &self.snr.snr_u_db {
                    for &snr_d_db in &self.snr.snr_d_db {
                        out.push(GridPoint { k, snr: SnrConfig { snr_ce_db, snr_u_db, snr_d_db, power: self.system.power } });
                    }
                }
            }
        }
        out
    }

    pub fn data_dir(&self) -> PathBuf {
        self.output_dir.join("data")
    }

    pub fn split_path(&self, split: Split) -> PathBuf {
        self.data_dir().join(format!("{}.jefp", split.name()))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.data_dir().join("manifest.json")
    }

    pub fn checkpoint_path(&self, target: Target) -> PathBuf {
        self.output_dir.join("checkpoints").join(format!("{}.ckpt", target.name()))
    }

    pub fn history_path(&self, target: Target) -> PathBuf {
        self.output_dir.join("checkpoints").join(format!("{}.history.csv", target.name()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Self::Train, Self::Val, Self::Test];

    pub fn name(self) -> &'static str {
        match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub split: Split,
    pub file: String,
    pub n_samples: usize,
    /// Sample seeds are `seed_start..seed_end`.
    pub seed_start: u64,
    pub seed_end: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub scenario: String,
    pub config_hash: String,
    pub base_seed: u64,
    pub splits: Vec<SplitRecord>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_str(&std::fs::read_to_string(path)?).map_err(|e| Error::Metadata(e.to_string()))
    }
}

fn ensure_absent(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::AlreadyExists(path.display().to_string()));
    }
    Ok(())
}

/// Generates the three splits from consecutive, non-overlapping seed ranges
/// starting at `data.base_seed`.
pub fn generate_splits(cfg: &ExperimentConfig, force: bool) -> Result<Manifest> {
    let scenario = cfg.scenario_config()?;
    for s in Split::ALL {
        ensure_absent(&cfg.split_path(s), force)?;
    }
    ensure_absent(&cfg.manifest_path(), force)?;
    std::fs::create_dir_all(cfg.data_dir())?;
    let counts = [cfg.data.n_train, cfg.data.n_val, cfg.data.n_test];
    let mut next = cfg.data.base_seed;
    let mut splits = Vec::new();
    for (split, n) in Split::ALL.into_iter().zip(counts) {
        let end = next.checked_add(n as u64).ok_or_else(|| Error::Config("seed range overflows".into()))?;
        let seeds: Vec<u64> = (next..end).collect();
        let mut ds = Dataset::generate(&scenario, cfg.data.base_seed, seeds)?;
        ds.meta.split = Some(split.name().into());
        write_dataset(&cfg.split_path(split), &ds.samples, &ds.meta)?;
        splits.push(SplitRecord {
            split,
            file: format!("{}.jefp", split.name()),
            n_samples: n,
            seed_start: next,
            seed_end: end,
        });
        next = end;
    }
    let manifest =
        Manifest { scenario: scenario.name.clone(), config_hash: cfg.hash(), base_seed: cfg.data.base_seed, splits };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Metadata(e.to_string()))?;
    std::fs::write(cfg.manifest_path(), json)?;
    Ok(manifest)
}

/// Loads one split, checking that it was generated for this scenario.
pub fn load_split(cfg: &ExperimentConfig, split: Split) -> Result<Vec<Sample>> {
    let scenario = cfg.scenario_config()?;
    let manifest = Manifest::load(&cfg.manifest_path())?;
    if manifest.scenario != scenario.name {
        return Err(Error::Config(format!(
            "dataset manifest is for scenario {:?}, config expects {:?}",
            manifest.scenario, scenario.name
        )));
    }
    let ds = read_dataset(&cfg.split_path(split))?;
    if ds.meta.scenario != scenario {
        return Err(Error::Config(format!("{} split was generated for a different scenario", split.name())));
    }
    Ok(ds.samples.iter().map(Sample::from).collect())
}

/// Trains `target` on the given splits, writing a checkpoint after every
/// epoch when `ckpt` is set. An unfinished checkpoint at `ckpt` is resumed.
pub fn train_target(
    target: Target,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    ckpt: Option<&Path>,
    scenario: Option<&str>,
) -> Result<(AnyModel, TrainState)> {
    let cfg = target.model_config(model_cfg);
    let (mut model, mut state) = match ckpt.filter(|p| p.exists()) {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            if loaded.meta.kind != target.kind() || loaded.meta.model != cfg {
                return Err(Error::Checkpoint(format!("{} does not match the configured model", path.display())));
            }
            let same_train = TrainConfig { epochs: train_cfg.epochs, ..loaded.meta.train.clone() };
            if &same_train != train_cfg {
                return Err(Error::Checkpoint(format!(
                    "{} was trained with a different configuration (only epochs may change)",
                    path.display()
                )));
            }
            (loaded.current, loaded.state)
        }
        None => {
            let model = AnyModel::new(target.kind(), &cfg, train_cfg.seed)?;
            let state = TrainState::new(model.store(), train_cfg);
            (model, state)
        }
    };
    if let Some(dir) = ckpt.and_then(Path::parent) {
        std::fs::create_dir_all(dir)?;
    }
    train(&mut model, train_cfg, train_set, val_set, &mut state, |m, s| {
        log::info!(
            "{} epoch {}: train {:.4} val {:.4} lr {:.2e}",
            target.name(),
            s.history.last().map_or(0, |h| h.epoch),
            s.history.last().map_or(f64::NAN, |h| h.train_obj),
            s.history.last().map_or(f64::NAN, |h| h.val_obj),
            s.lr
        );
        match ckpt {
            Some(path) => save_checkpoint(path, m, train_cfg, s, scenario),
            None => Ok(()),
        }
    })?;
    Ok((model, state))
}

/// Trained networks available to the evaluation pipelines.
#[derive(Clone, Debug, Default)]
pub struct Models {
    pub jefpnet: Option<JefpNet>,
    pub dft_pilot: Option<JefpNet>,
    pub ce: Option<CeModel>,
    pub feedback: Option<CsiAutoencoder>,
    pub jfp: Option<JfpNet>,
}

impl Models {
    pub fn insert(&mut self, target: Target, model: AnyModel) -> Result<()> {
        match (target, model) {
            (Target::Jefpnet, AnyModel::Jefpnet(m)) => self.jefpnet = Some(m),
            (Target::DftPilot, AnyModel::Jefpnet(m)) => self.dft_pilot = Some(m),
            (Target::Ce, AnyModel::Ce(m)) => self.ce = Some(m),
            (Target::Feedback, AnyModel::Feedback(m)) => self.feedback = Some(m),
            (Target::Jfp, AnyModel::Jfp(m)) => self.jfp = Some(m),
            (t, m) => {
                return Err(Error::Checkpoint(format!("{} checkpoint holds a {} model", t.name(), m.kind().name())))
            }
        }
        Ok(())
    }

    /// Loads the best-validation parameters of every target.
    pub fn load(cfg: &ExperimentConfig, targets: &[Target]) -> Result<Self> {
        let mut out = Self::default();
        for &t in targets {
            let path = cfg.checkpoint_path(t);
            if !path.exists() {
                return Err(Error::Checkpoint(format!("missing checkpoint {} for {}", path.display(), t.name())));
            }
            out.insert(t, load_checkpoint(&path)?.best)?;
        }
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridPoint {
    pub k: usize,
    pub snr: SnrConfig,
}

impl GridPoint {
    /// Seed of this point, shared by every pipeline so that `eval` and
    /// `shift` reproduce each other.
    pub fn seed(&self, eval_seed: u64) -> u64 {
        let key = format!("{}|{}|{}|{}", self.k, self.snr.snr_ce_db, self.snr.snr_u_db, self.snr.snr_d_db);
        derive(eval_seed, fnv1a(key.as_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointResult {
    /// Masked sum-rate over subcarriers, one per test sample.
    pub rates: Vec<f64>,
    /// NMSE of the CSI the precoder was computed from, where it exists.
    pub nmse_db: Option<f64>,
}

impl PointResult {
    pub fn mean(&self) -> f64 {
        mean(&self.rates)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn missing(p: Pipeline) -> Error {
    Error::Checkpoint(format!("pipeline {p} needs a trained checkpoint"))
}

struct NmseAcc {
    err: f64,
    reference: f64,
}

impl NmseAcc {
    fn add(&mut self, h: &Array3<Complex64>, h_hat: &Array3<Complex64>, mask: &UserMask) {
        for k in (0..h.dim().0).filter(|&k| mask.is_active(k)) {
            let (a, b) = (h.index_axis(Axis(0), k), h_hat.index_axis(Axis(0), k));
            self.reference += a.iter().map(|v| v.norm_sqr()).sum::<f64>();
            self.err += a.iter().zip(b.iter()).map(|(x, y)| (x - y).norm_sqr()).sum::<f64>();
        }
    }

    fn db(&self) -> Result<f64> {
        if self.reference == 0.0 {
            return Err(Error::ZeroReference);
        }
        if self.err == 0.0 {
            return Ok(NMSE_FLOOR_DB);
        }
        Ok((10.0 * (self.err / self.reference).log10()).max(NMSE_FLOOR_DB))
    }
}

/// Evaluates `pipeline` on `test` at one grid point. The first `k` user
/// slots are active.
pub fn evaluate_point(
    pipeline: Pipeline,
    models: &Models,
    test: &[Sample],
    point: &GridPoint,
    eval: &EvalConfig,
) -> Result<PointResult> {
    let k_max = test.first().map(|s| s.h_dl.dim().0).ok_or_else(|| Error::Config("empty test set".into()))?;
    let mask = UserMask::first(point.k, k_max);
    let snr = &point.snr;
    let sigma_d = snr.sigma_d_sq();
    let mut rng = seeded(point.seed(eval.seed), 0);
    let mut rates = Vec::with_capacity(test.len());
    let mut acc = NmseAcc { err: 0.0, reference: 0.0 };
    let mut has_nmse = false;
    for chunk in test.chunks(eval.batch_size) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let masks = vec![mask.clone(); batch.len()];
        match pipeline {
            Pipeline::Jefpnet | Pipeline::DftPilot | Pipeline::Qam(_) => {
                let net = match pipeline {
                    Pipeline::DftPilot => models.dft_pilot.as_ref(),
                    _ => models.jefpnet.as_ref(),
                }
                .ok_or_else(|| missing(pipeline))?;
                let bits = if let Pipeline::Qam(b) = pipeline { Some(b) } else { None };
                rates.extend(net.evaluate(&batch, &masks, snr, &mut rng, bits)?.rates);
            }
            Pipeline::Sefpnet => {
                let ce = models.ce.as_ref().ok_or_else(|| missing(pipeline))?;
                let fb = models.feedback.as_ref().ok_or_else(|| missing(pipeline))?;
                let est = ce.estimate_plain(&batch, snr.sigma_ce_sq(), &mut rng);
                let refs: Vec<&Array3<Complex64>> = est.iter().collect();
                let rec = fb.reconstruct(&batch, &refs, snr.sigma_u_sq(), &mut rng)?;
                for (s, h_hat) in batch.iter().zip(&rec) {
                    acc.add(&s.h_dl, h_hat, &mask);
                    let v = mmse_precode(h_hat, &mask, sigma_d, snr.power)?;
                    rates.push(spectral_efficiency(&s.h_dl, &v, &mask, sigma_d).total);
                }
                has_nmse = true;
            }
            Pipeline::JfpnetIdealCe => {
                let net = models.jfp.as_ref().ok_or_else(|| missing(pipeline))?;
                let input: Vec<&Array3<Complex64>> = batch.iter().map(|s| &s.h_dl).collect();
                rates.extend(net.evaluate(&batch, &input, &masks, snr, &mut rng)?.0);
            }
            Pipeline::SvdWf | Pipeline::Mmse => {
                for s in &batch {
                    let v = if pipeline == Pipeline::SvdWf {
                        svd_precode(&s.h_dl, &mask, sigma_d, snr.power)?
                    } else {
                        mmse_precode(&s.h_dl, &mask, sigma_d, snr.power)?
                    };
                    rates.push(spectral_efficiency(&s.h_dl, &v, &mask, sigma_d).total);
                }
            }
        }
    }
    Ok(PointResult { rates, nmse_db: if has_nmse { Some(acc.db()?) } else { None } })
}

/// One output row of an evaluation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub pipeline: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub snr_ce_db: f64,
    pub snr_u_db: f64,
    pub snr_d_db: f64,
    pub bits: Option<u32>,
    #[serde(rename = "R_total")]
    pub r_total: f64,
    #[serde(rename = "R_per_subcarrier")]
    pub r_per_subcarrier: f64,
    pub nmse_db: Option<f64>,
    pub n_samples: usize,
    pub config_hash: String,
    pub data_seed: u64,
    pub train_seed: u64,
    pub eval_seed: u64,
    pub point_seed: u64,
}

/// Sweeps every pipeline over the grid.
pub fn evaluate_grid(cfg: &ExperimentConfig, models: &Models, test: &[Sample]) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    let nc = cfg.system.nc as f64;
    for point in cfg.grid() {
        for &pipeline in &cfg.pipelines {
            let r = evaluate_point(pipeline, models, test, &point, &cfg.eval)?;
            let m = r.mean();
            rows.push(ResultRow {
                pipeline: pipeline.to_string(),
                k: point.k,
                snr_ce_db: point.snr.snr_ce_db,
                snr_u_db: point.snr.snr_u_db,
                snr_d_db: point.snr.snr_d_db,
                bits: if let Pipeline::Qam(b) = pipeline { Some(b) } else { None },
                r_total: m,
                r_per_subcarrier: m / nc,
                nmse_db: r.nmse_db,
                n_samples: r.rates.len(),
                config_hash: cfg.hash(),
                data_seed: cfg.data.base_seed,
                train_seed: cfg.train.seed,
                eval_seed: cfg.eval.seed,
                point_seed: point.seed(cfg.eval.seed),
            });
        }
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(e.into()))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Io(e.into()))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Io(e.into()))).collect()
}

/// One cell of a scenario-shift matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShiftRow {
    pub train_scenario: String,
    pub test_scenario: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub snr_u_db: f64,
    #[serde(rename = "R_total")]
    pub r_total: f64,
    #[serde(rename = "R_per_subcarrier")]
    pub r_per_subcarrier: f64,
    pub n_samples: usize,
    pub point_seed: u64,
}

/// Evaluates the JEFPNet checkpoint of each experiment on the test split of
/// each experiment. Both must share model dimensions; the grid, evaluation
/// seed and SNRs come from `a`.
pub fn scenario_shift(a: &ExperimentConfig, b: &ExperimentConfig) -> Result<Vec<ShiftRow>> {
    if a.model_config()? != b.model_config()? {
        return Err(Error::Config("shift experiments must share the model configuration".into()));
    }
    let exps = [a, b];
    let mut models = Vec::new();
    let mut tests = Vec::new();
    for e in exps {
        models.push(Models::load(e, &[Target::Jefpnet])?);
        tests.push((e.scenario_config()?.name, load_split(e, Split::Test)?));
    }
    let mut rows = Vec::new();
    for point in a.grid() {
        for (e, m) in exps.iter().zip(&models) {
            for (test_name, test) in &tests {
                let r = evaluate_point(Pipeline::Jefpnet, m, test, &point, &a.eval)?;
                rows.push(ShiftRow {
                    train_scenario: e.scenario_config()?.name,
                    test_scenario: test_name.clone(),
                    k: point.k,
                    snr_u_db: point.snr.snr_u_db,
                    r_total: r.mean(),
                    r_per_subcarrier: r.mean() / a.system.nc as f64,
                    n_samples: r.rates.len(),
                    point_seed: point.seed(a.eval.seed),
                });
            }
        }
    }
    Ok(rows)
}

/// Fraction of paired bootstrap resamples in which `mean(a - b) > 0`.
pub fn paired_bootstrap(a: &[f64], b: &[f64], resamples: usize, rng: &mut impl Rng) -> f64 {
    assert_eq!(a.len(), b.len(), "paired samples");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let mut wins = 0;
    for _ in 0..resamples {
        let s: f64 = (0..n).map(|_| d[rng.random_range(0..n)]).sum();
        if s > 0.0 {
            wins += 1;
        }
    }
    wins as f64 / resamples as f64
}

/// Two-sided percentile bootstrap interval of `mean(a - b)`.
pub fn bootstrap_interval(a: &[f64], b: &[f64], resamples: usize, level: f64, rng: &mut impl Rng) -> (f64, f64) {
    assert_eq!(a.len(), b.len(), "paired samples");
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let n = d.len();
    let mut means: Vec<f64> =
        (0..resamples).map(|_| (0..n).map(|_| d[rng.random_range(0..n)]).sum::<f64>() / n as f64).collect();
    means.sort_by(f64::total_cmp);
    let lo = ((1.0 - level) / 2.0 * resamples as f64) as usize;
    let hi = (((1.0 + level) / 2.0 * resamples as f64) as usize).min(resamples - 1);
    (means[lo], means[hi])
}

pub fn median(x: &[f64]) -> f64 {
    let mut v = x.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Trainable parameter counts split by where the network runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub jefpnet_ue: usize,
    pub jefpnet_bs: usize,
    pub separate_ue: usize,
    pub separate_bs: usize,
    pub modules: std::collections::BTreeMap<String, usize>,
}

/// UE side: JEFPNet's encoder versus the separate chain's CE network and
/// CSI encoder. Pilots and everything after the uplink count as BS side.
pub fn footprint(cfg: &ModelConfig) -> Result<Footprint> {
    let jefp = JefpNet::new(cfg, 0)?;
    let ce = CeModel::new(cfg, 0)?;
    let fb = CsiAutoencoder::new(cfg, 0)?;
    let mut modules = jefp.store.count_by_module();
    let ue_jefp = modules["encoder"];
    let bs_jefp = jefp.store.count() - ue_jefp;
    let ce_by = ce.store.count_by_module();
    let fb_by = fb.store.count_by_module();
    let separate_ue = ce.store.count() + fb_by["fb_encoder"];
    let separate_bs = fb_by["fb_decoder"];
    for (k, v) in ce_by.into_iter().chain(fb_by) {
        modules.insert(k, v);
    }
    Ok(Footprint { jefpnet_ue: ue_jefp, jefpnet_bs: bs_jefp, separate_ue, separate_bs, modules })
}
