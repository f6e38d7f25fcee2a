//! Training loop shared by every network: Adam with plateau learning-rate
//! decay, per-batch SNR and mask sampling, best-validation selection and
//! resumable checkpoints.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::baselines::{CeModel, CsiAutoencoder, JfpNet};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::metrics::SnrConfig;
use crate::model::{JefpNet, ModelConfig, Sample};
use crate::nn::{Adam, Bound, ParamId, ParamStore};
use crate::precoder::UserMask;
use crate::rng::seeded;

const TAG_EPOCH: u64 = 0x7A11_0000;
const TAG_VALIDATION: u64 = 0x7A1D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskPolicy {
    /// `K` uniform on `1..=K_max`, then a uniformly random subset of size `K`.
    UniformK,
    /// Every user active.
    All,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_init: f64,
    pub plateau_patience_epochs: usize,
    pub lr_decay: f64,
    pub snr_u_range_db: (f64, f64),
    pub snr_ce_db: f64,
    pub snr_d_db: f64,
    pub mask_sampling: MaskPolicy,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 32,
            lr_init: 1e-3,
            plateau_patience_epochs: 20,
            lr_decay: 0.5,
            snr_u_range_db: (-10.0, 10.0),
            snr_ce_db: 10.0,
            snr_d_db: 10.0,
            mask_sampling: MaskPolicy::UniformK,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn full() -> Self {
        Self { epochs: 500, batch_size: 128, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.plateau_patience_epochs == 0 {
            return Err(Error::Config("epochs, batch_size and plateau_patience_epochs must be positive".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return Err(Error::Config(format!("lr_decay must lie in (0, 1), got {}", self.lr_decay)));
        }
        if !(self.lr_init > 0.0) {
            return Err(Error::Config("lr_init must be positive".into()));
        }
        let (lo, hi) = self.snr_u_range_db;
        if !(lo <= hi) {
            return Err(Error::Config(format!("snr_u_range_db ({lo}, {hi}) is empty")));
        }
        Ok(())
    }

    /// SNRs of one batch: `snr_u` uniform (in dB) over the configured range.
    pub fn sample_snr(&self, rng: &mut impl Rng, power: f64) -> SnrConfig {
        let (lo, hi) = self.snr_u_range_db;
        let snr_u_db = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        SnrConfig { snr_ce_db: self.snr_ce_db, snr_u_db, snr_d_db: self.snr_d_db, power }
    }
}

pub fn sample_mask(rng: &mut impl Rng, k_max: usize, policy: MaskPolicy) -> UserMask {
    match policy {
        MaskPolicy::All => UserMask::all(k_max),
        MaskPolicy::UniformK => {
            let k = rng.random_range(1..=k_max);
            let idx: Vec<usize> = (0..k_max).collect();
            let mut mask = vec![false; k_max];
            for &i in idx.choose_multiple(rng, k) {
                mask[i] = true;
            }
            UserMask(mask)
        }
    }
}

/// Halves the learning rate once the validation objective has not improved
/// for `patience` consecutive epochs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plateau {
    pub best: Option<f64>,
    pub wait: usize,
    pub patience: usize,
    pub decay: f64,
}

impl Plateau {
    pub fn new(patience: usize, decay: f64) -> Self {
        Self { best: None, wait: 0, patience, decay }
    }

    /// Records one validation value and returns the (possibly decayed)
    /// learning rate.
    pub fn step(&mut self, val: f64, lr: f64) -> f64 {
        if self.best.is_none_or(|b| val > b) {
            self.best = Some(val);
            self.wait = 0;
            return lr;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.wait = 0;
            lr * self.decay
        } else {
            lr
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_obj: f64,
    pub val_obj: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Jefpnet,
    Ce,
    Feedback,
    Jfp,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Jefpnet => "jefpnet",
            Self::Ce => "ce",
            Self::Feedback => "feedback",
            Self::Jfp => "jfp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Self::Jefpnet, Self::Ce, Self::Feedback, Self::Jfp].into_iter().find(|k| k.name() == s)
    }
}

/// Any of the trainable networks.
#[derive(Clone, Debug)]
pub enum AnyModel {
    Jefpnet(JefpNet),
    Ce(CeModel),
    Feedback(CsiAutoencoder),
    Jfp(JfpNet),
}

impl AnyModel {
    pub fn new(kind: ModelKind, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(match kind {
            ModelKind::Jefpnet => Self::Jefpnet(JefpNet::new(cfg, seed)?),
            ModelKind::Ce => Self::Ce(CeModel::new(cfg, seed)?),
            ModelKind::Feedback => Self::Feedback(CsiAutoencoder::new(cfg, seed)?),
            ModelKind::Jfp => Self::Jfp(JfpNet::new(cfg, seed)?),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Self::Jefpnet(_) => ModelKind::Jefpnet,
            Self::Ce(_) => ModelKind::Ce,
            Self::Feedback(_) => ModelKind::Feedback,
            Self::Jfp(_) => ModelKind::Jfp,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Jefpnet(m) => &m.cfg,
            Self::Ce(m) => &m.cfg,
            Self::Feedback(m) => &m.cfg,
            Self::Jfp(m) => &m.cfg,
        }
    }

    pub fn store(&self) -> &ParamStore {
        match self {
            Self::Jefpnet(m) => &m.store,
            Self::Ce(m) => &m.store,
            Self::Feedback(m) => &m.store,
            Self::Jfp(m) => &m.store,
        }
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        match self {
            Self::Jefpnet(m) => &mut m.store,
            Self::Ce(m) => &mut m.store,
            Self::Feedback(m) => &mut m.store,
            Self::Jfp(m) => &mut m.store,
        }
    }

    pub fn frozen(&self) -> Vec<ParamId> {
        match self {
            Self::Jefpnet(m) => m.frozen(),
            _ => Vec::new(),
        }
    }

    /// Loss to minimize on one batch. Spectral-efficiency models return the
    /// negative mean per-subcarrier sum-rate, the estimators the MSE.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &[&Sample],
        masks: &[UserMask],
        snr: &SnrConfig,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        match self {
            Self::Jefpnet(m) => m.loss(g, p, batch, masks, snr, rng),
            Self::Ce(m) => Ok(m.loss(g, p, batch, snr, rng)),
            Self::Feedback(m) => m.loss(g, p, batch, snr, rng),
            Self::Jfp(m) => m.loss(g, p, batch, masks, snr, rng),
        }
    }
}

/// Mutable optimizer state that a checkpoint must capture to resume.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub next_epoch: usize,
    pub lr: f64,
    pub adam: Adam,
    pub scheduler: Plateau,
    pub history: Vec<EpochRecord>,
    pub best: Option<(f64, usize, ParamStore)>,
}

impl TrainState {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        Self {
            next_epoch: 0,
            lr: cfg.lr_init,
            adam: Adam::new(store, cfg.lr_init),
            scheduler: Plateau::new(cfg.plateau_patience_epochs, cfg.lr_decay),
            history: Vec::new(),
            best: None,
        }
    }
}

fn batch_masks(rng: &mut impl Rng, k_max: usize, policy: MaskPolicy, n: usize) -> Vec<UserMask> {
    // one mask per batch
    let m = sample_mask(rng, k_max, policy);
    vec![m; n]
}

fn grad_diagnostics(store: &ParamStore, grads: &[Tensor], loss: f64) -> String {
    let mut norms: BTreeMap<String, f64> = BTreeMap::new();
    for ((name, _), g) in store.iter().zip(grads) {
        let module = name.split('.').next().unwrap_or(name).to_string();
        *norms.entry(module).or_insert(0.0) += g.iter().map(|v| v * v).sum::<f64>();
    }
    let parts: Vec<String> = norms.iter().map(|(k, v)| format!("{k}: |grad| = {:.3e}", v.sqrt())).collect();
    format!("loss = {loss}; {}", parts.join(", "))
}

/// Mean of the negative batch loss over `data`, with SNRs and masks drawn
/// from a generator that is reset on every call.
pub fn validation_objective(model: &AnyModel, cfg: &TrainConfig, data: &[Sample]) -> Result<f64> {
    let mut rng = seeded(cfg.seed, TAG_VALIDATION);
    let mut total = 0.0;
    let mut count = 0usize;
    let k_max = model.config().k_max;
    for chunk in data.chunks(cfg.batch_size.max(64)) {
        let batch: Vec<&Sample> = chunk.iter().collect();
        let masks = batch_masks(&mut rng, k_max, cfg.mask_sampling, batch.len());
        let snr = cfg.sample_snr(&mut rng, model.config().power);
        let mut g = Graph::new();
        let p = model.store().bind(&mut g, false);
        let l = model.batch_loss(&mut g, &p, &batch, &masks, &snr, &mut rng)?;
        total += -g.scalar(l) * batch.len() as f64;
        count += batch.len();
    }
    Ok(total / count.max(1) as f64)
}

/// Runs epochs `state.next_epoch..cfg.epochs`. After every epoch
/// `on_epoch` sees the model and state (used for checkpointing). On return
/// the model holds the best-validation parameters.
pub fn train(
    model: &mut AnyModel,
    cfg: &TrainConfig,
    train_set: &[Sample],
    val_set: &[Sample],
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&AnyModel, &TrainState) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let frozen = model.frozen();
    let k_max = model.config().k_max;
    let power = model.config().power;
    while state.next_epoch < cfg.epochs {
        let epoch = state.next_epoch;
        let mut rng: ChaCha8Rng = seeded(cfg.seed, TAG_EPOCH + epoch as u64);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        state.adam.lr = state.lr;
        let mut obj = 0.0;
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let masks = batch_masks(&mut rng, k_max, cfg.mask_sampling, batch.len());
            let snr = cfg.sample_snr(&mut rng, power);
            let mut g = Graph::new();
            let p = model.store().bind(&mut g, true);
            let l = model.batch_loss(&mut g, &p, &batch, &masks, &snr, &mut rng)?;
            let loss = g.scalar(l);
            let mut grads = p.collect(&g.backward(l), model.store());
            for id in &frozen {
                grads[id_index(model.store(), *id)].fill(0.0);
            }
            if !loss.is_finite() || grads.iter().any(|t| t.iter().any(|v| !v.is_finite())) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: bi,
                    diagnostics: grad_diagnostics(model.store(), &grads, loss),
                });
            }
            state.adam.update(model.store_mut(), &grads);
            obj += -loss * batch.len() as f64;
        }
        let train_obj = obj / train_set.len() as f64;
        let val_obj = validation_objective(model, cfg, val_set)?;
        if !val_obj.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch: usize::MAX, diagnostics: "validation objective".into() });
        }
        state.history.push(EpochRecord { epoch, train_obj, val_obj, lr: state.lr });
        if state.best.as_ref().is_none_or(|(b, _, _)| val_obj > *b) {
            state.best = Some((val_obj, epoch, model.store().clone()));
        }
        state.lr = state.scheduler.step(val_obj, state.lr);
        state.next_epoch += 1;
        on_epoch(model, state)?;
    }
    if let Some((_, _, best)) = &state.best {
        *model.store_mut() = best.clone();
    }
    Ok(())
}

fn id_index(store: &ParamStore, id: ParamId) -> usize {
    store.ids().position(|i| i == id).expect("parameter of this store")
}

/// Checkpoint header.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Scenario the training data came from.
    pub scenario: Option<String>,
    pub next_epoch: usize,
    pub lr: f64,
    pub scheduler: Plateau,
    pub adam_step: u64,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
    pub history: Vec<EpochRecord>,
    /// Every epoch's generator is derived from `(seed, epoch)`, so the seed
    /// and the next epoch are the complete random state.
    pub rng_seed: u64,
}

/// Writes the current parameters, best parameters and optimizer moments.
pub fn save_checkpoint(path: &Path, model: &AnyModel, cfg: &TrainConfig, state: &TrainState, scenario: Option<&str>) -> Result<()> {
    let store = model.store();
    let meta = CheckpointMeta {
        kind: model.kind(),
        model: model.config().clone(),
        train: cfg.clone(),
        scenario: scenario.map(str::to_string),
        next_epoch: state.next_epoch,
        lr: state.lr,
        scheduler: state.scheduler.clone(),
        adam_step: state.adam.step,
        best_val: state.best.as_ref().map(|b| b.0),
        best_epoch: state.best.as_ref().map(|b| b.1),
        history: state.history.clone(),
        rng_seed: cfg.seed,
    };
    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in store.iter() {
        tensors.push((format!("param/{name}"), t));
    }
    if let Some((_, _, best)) = &state.best {
        for (name, t) in best.iter() {
            tensors.push((format!("best/{name}"), t));
        }
    }
    for ((name, _), (m, v)) in store.iter().zip(state.adam.m.iter().zip(&state.adam.v)) {
        tensors.push((format!("adam.m/{name}"), m));
        tensors.push((format!("adam.v/{name}"), v));
    }
    checkpoint::write(path, &meta, &tensors)
}

pub struct LoadedCheckpoint {
    pub meta: CheckpointMeta,
    /// Model holding the best-validation parameters (current ones if no
    /// epoch finished).
    pub best: AnyModel,
    /// Model holding the parameters at the end of the last epoch.
    pub current: AnyModel,
    pub state: TrainState,
}

fn fill(store: &mut ParamStore, tensors: &BTreeMap<String, Tensor>, prefix: &str) -> Result<bool> {
    let ids: Vec<ParamId> = store.ids().collect();
    let mut found = 0;
    for id in &ids {
        let key = format!("{prefix}/{}", store.name(*id));
        if let Some(t) = tensors.get(&key) {
            if t.shape() != store.get(*id).shape() {
                return Err(Error::Checkpoint(format!("{key}: shape {:?} != {:?}", t.shape(), store.get(*id).shape())));
            }
            *store.get_mut(*id) = t.clone();
            found += 1;
        }
    }
    match found {
        0 => Ok(false),
        n if n == ids.len() => Ok(true),
        _ => Err(Error::Checkpoint(format!("incomplete tensor group {prefix}"))),
    }
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let (meta, list): (CheckpointMeta, _) = checkpoint::read(path)?;
    let tensors: BTreeMap<String, Tensor> = list.into_iter().collect();
    let mut current = AnyModel::new(meta.kind, &meta.model, meta.rng_seed)?;
    if !fill(current.store_mut(), &tensors, "param")? {
        return Err(Error::Checkpoint("no parameters".into()));
    }
    let mut best = current.clone();
    let has_best = fill(best.store_mut(), &tensors, "best")?;
    let mut adam = Adam::new(current.store(), meta.lr);
    adam.step = meta.adam_step;
    let mut m_store = current.store().clone();
    let mut v_store = current.store().clone();
    if fill(&mut m_store, &tensors, "adam.m")? && fill(&mut v_store, &tensors, "adam.v")? {
        adam.m = m_store.iter().map(|(_, t)| t.clone()).collect();
        adam.v = v_store.iter().map(|(_, t)| t.clone()).collect();
    }
    let state = TrainState {
        next_epoch: meta.next_epoch,
        lr: meta.lr,
        adam,
        scheduler: meta.scheduler.clone(),
        history: meta.history.clone(),
        best: match (has_best, meta.best_val, meta.best_epoch) {
            (true, Some(v), Some(e)) => Some((v, e, best.store().clone())),
            _ => None,
        },
    };
    Ok(LoadedCheckpoint { meta, best, current, state })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{generate_realization, ScenarioConfig};
    use rand::SeedableRng;

    #[test]
    fn mask_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(sample_mask(&mut rng, 1, MaskPolicy::UniformK), UserMask(vec![true]));
        }
        let a = sample_mask(&mut ChaCha8Rng::seed_from_u64(9), 6, MaskPolicy::UniformK);
        let b = sample_mask(&mut ChaCha8Rng::seed_from_u64(9), 6, MaskPolicy::UniformK);
        assert_eq!(a, b);
        let mut counts = [0usize; 7];
        let n = 100_000;
        for _ in 0..n {
            counts[sample_mask(&mut rng, 6, MaskPolicy::UniformK).active()] += 1;
        }
        assert_eq!(counts[0], 0);
        for c in &counts[1..] {
            let p = *c as f64 / n as f64;
            assert!((6.0 * p - 1.0).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn plateau_halves_after_exactly_patience_epochs() {
        let mut s = Plateau::new(3, 0.5);
        let mut lr = 1e-3;
        let mut lrs = Vec::new();
        for _ in 0..8 {
            lr = s.step(1.0, lr);
            lrs.push(lr);
        }
        assert_eq!(lrs, vec![1e-3, 1e-3, 1e-3, 5e-4, 5e-4, 5e-4, 2.5e-4, 2.5e-4]);
    }

    fn toy(cfg: &ModelConfig, n: usize, base: u64) -> Vec<Sample> {
        let sc = ScenarioConfig::umi_like(cfg.nc, cfg.nt, cfg.k_max);
        (0..n).map(|i| Sample::from(&generate_realization(&sc, base + i as u64).unwrap())).collect()
    }

    #[test]
    fn smoke_run_checkpoint_and_resume() {
        let cfg = ModelConfig::tiny();
        let tc = TrainConfig { epochs: 2, batch_size: 16, ..TrainConfig::default() };
        let data = toy(&cfg, 64, 0);
        let val = toy(&cfg, 16, 1000);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");

        let mut model = AnyModel::new(ModelKind::Jefpnet, &cfg, 1).unwrap();
        let mut state = TrainState::new(model.store(), &tc);
        train(&mut model, &tc, &data, &val, &mut state, |m, s| save_checkpoint(&path, m, &tc, s, None)).unwrap();
        assert_eq!(state.history.len(), 2);
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.meta.history, state.history);
        assert_eq!(loaded.best.store().flatten(), model.store().flatten());

        // 1 + 1 epochs through a checkpoint equals 2 epochs straight
        let tc1 = TrainConfig { epochs: 1, ..tc.clone() };
        let mut m1 = AnyModel::new(ModelKind::Jefpnet, &cfg, 1).unwrap();
        let mut s1 = TrainState::new(m1.store(), &tc1);
        let p1 = dir.path().join("half.ckpt");
        train(&mut m1, &tc1, &data, &val, &mut s1, |m, s| save_checkpoint(&p1, m, &tc1, s, None)).unwrap();
        let resumed = load_checkpoint(&p1).unwrap();
        let mut m2 = resumed.current;
        let mut s2 = resumed.state;
        train(&mut m2, &tc, &data, &val, &mut s2, |_, _| Ok(())).unwrap();
        assert_eq!(s2.history, state.history);
        assert_eq!(m2.store().flatten(), model.store().flatten());
    }

    #[test]
    fn frozen_dft_pilots_stay_fixed() {
        let cfg = ModelConfig { pilots: crate::model::PilotKind::Dft, ..ModelConfig::tiny() };
        let tc = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let mut model = AnyModel::new(ModelKind::Jefpnet, &cfg, 2).unwrap();
        let before = match &model {
            AnyModel::Jefpnet(m) => m.store.get(m.pilots.raw).clone(),
            _ => unreachable!(),
        };
        let mut state = TrainState::new(model.store(), &tc);
        train(&mut model, &tc, &toy(&cfg, 16, 0), &toy(&cfg, 8, 99), &mut state, |_, _| Ok(())).unwrap();
        match &model {
            AnyModel::Jefpnet(m) => assert_eq!(m.store.get(m.pilots.raw), &before),
            _ => unreachable!(),
        }
    }

    #[test]
    fn non_finite_loss_aborts_with_diagnostics() {
        let cfg = ModelConfig::tiny();
        let tc = TrainConfig { epochs: 1, batch_size: 8, ..TrainConfig::default() };
        let mut model = AnyModel::new(ModelKind::Ce, &cfg, 3).unwrap();
        let id = model.store().ids().next().unwrap();
        model.store_mut().get_mut(id).fill(f64::NAN);
        let mut state = TrainState::new(model.store(), &tc);
        let err = train(&mut model, &tc, &toy(&cfg, 8, 0), &toy(&cfg, 8, 50), &mut state, |_, _| Ok(())).unwrap_err();
        match err {
            Error::NonFiniteLoss { epoch: 0, batch: 0, diagnostics } => assert!(diagnostics.contains("ce")),
            other => panic!("{other}"),
        }
    }
}
