//! Noisy-label training: asymmetric smoothed targets, EMA target correction,
//! soft cross-entropy, and co-training with peer target exchange.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{InstanceDataset, Repertoire, SequenceRecord};
use crate::error::{Error, Result};
use crate::eval::roc_auc;
use crate::kv::{self, KvConfig};
use crate::nn::{
    adam_step, backward, forward, init_params, predict_encoded, AdamConfig, Batch, EncodedSet,
    ModelConfig, ModelState,
};
use crate::scalar::Scalar;

/// Per-instance soft targets t_{i,j} of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTable<T> {
    values: Vec<T>,
    epoch: usize,
}

impl<T: Scalar> TargetTable<T> {
    pub fn from_values(values: Vec<T>) -> Result<Self> {
        if let Some(i) = values.iter().position(|t| !(*t >= T::zero() && *t <= T::one())) {
            return Err(Error::InvalidArgument(format!(
                "target {i} = {} outside [0, 1]",
                values[i]
            )));
        }
        Ok(Self { values, epoch: 0 })
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    /// Number of EMA updates applied so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Asymmetric label smoothing: 1 − β for noisy positives, exactly 0 for negatives.
pub fn init_targets<T: Scalar>(noisy_labels: &[bool], beta: f64) -> Result<TargetTable<T>> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta must be in [0, 1), got {beta}")));
    }
    let pos = T::one() - T::from_f64_lossy(beta);
    Ok(TargetTable {
        values: noisy_labels
            .iter()
            .map(|&y| if y { pos } else { T::zero() })
            .collect(),
        epoch: 0,
    })
}

/// Hard 0/1 targets (no smoothing, never updated).
pub fn hard_targets<T: Scalar>(noisy_labels: &[bool]) -> TargetTable<T> {
    TargetTable {
        values: noisy_labels
            .iter()
            .map(|&y| if y { T::one() } else { T::zero() })
            .collect(),
        epoch: 0,
    }
}

/// t ← α·t + (1 − α)·p for every instance.
pub fn ema_update<T: Scalar>(table: &TargetTable<T>, preds: &[T], alpha: f64) -> Result<TargetTable<T>> {
    ema_update_masked(table, preds, alpha, None)
}

/// As [`ema_update`], touching only instances where `mask` is true.
pub fn ema_update_masked<T: Scalar>(
    table: &TargetTable<T>,
    preds: &[T],
    alpha: f64,
    mask: Option<&[bool]>,
) -> Result<TargetTable<T>> {
    if preds.len() != table.len() || mask.is_some_and(|m| m.len() != table.len()) {
        return Err(Error::Shape(format!(
            "{} predictions for a table of {} targets",
            preds.len(),
            table.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must be in [0, 1], got {alpha}")));
    }
    if let Some(i) = preds.iter().position(|p| !(*p >= T::zero() && *p <= T::one())) {
        return Err(Error::InvalidArgument(format!(
            "prediction {i} = {} outside [0, 1]",
            preds[i]
        )));
    }
    let a = T::from_f64_lossy(alpha);
    let b = T::one() - a;
    let values = table
        .values
        .iter()
        .zip(preds)
        .enumerate()
        .map(|(i, (&t, &p))| {
            if mask.is_some_and(|m| !m[i]) {
                t
            } else {
                (a * t + b * p).max(T::zero()).min(T::one())
            }
        })
        .collect();
    Ok(TargetTable {
        values,
        epoch: table.epoch + 1,
    })
}

/// Mean soft cross-entropy −[t·ln p₁ + (1 − t)·ln p₀] with log arguments
/// clamped at `eps_log`, and its gradient with respect to the probabilities.
pub fn soft_ce_loss<T: Scalar>(probs: &[[T; 2]], targets: &[T], eps_log: T) -> (T, Vec<[T; 2]>) {
    let n = T::from_usize_lossy(probs.len().max(1));
    let mut loss = T::zero();
    let mut grad = Vec::with_capacity(probs.len());
    for (p, &t) in probs.iter().zip(targets) {
        let w = [T::one() - t, t];
        let mut g = [T::zero(); 2];
        for c in 0..2 {
            if w[c] == T::zero() {
                continue;
            }
            loss = loss - w[c] * p[c].max(eps_log).ln();
            if p[c] > eps_log {
                g[c] = -w[c] / (n * p[c]);
            }
        }
        grad.push(g);
    }
    (loss / n, grad)
}

macro_rules! kv_enum {
    ($name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $(Self::$variant => $text),+ })
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($text => Ok(Self::$variant),)+
                    _ => Err(format!("expected one of: {}", [$($text),+].join(", "))),
                }
            }
        }
    };
}

/// Which instances the EMA correction touches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EmaScope {
    #[default]
    All,
    PositivesOnly,
}
kv_enum!(EmaScope { All => "all", PositivesOnly => "positives" });

/// How co-training peers exchange targets.
///
/// `TrainOnPeerTable`: each table is corrected with its own model's
/// predictions and each model trains on its peer's table.
/// `UpdateFromPeer`: each table is corrected with the peer's predictions and
/// each model trains on its own table.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum PeerExchange {
    #[default]
    TrainOnPeerTable,
    UpdateFromPeer,
}
kv_enum!(PeerExchange { TrainOnPeerTable => "train_on_peer", UpdateFromPeer => "update_from_peer" });

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum EarlyStopMetric {
    #[default]
    Ensemble,
    Single,
}
kv_enum!(EarlyStopMetric { Ensemble => "ensemble", Single => "single" });

/// The four configurations of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainingMode {
    Full,
    NoAsa,
    NoCotrain,
    Erm,
}
kv_enum!(TrainingMode { Full => "full", NoAsa => "no_asa", NoCotrain => "no_cotrain", Erm => "erm" });

impl TrainingMode {
    pub const ALL: [TrainingMode; 4] = [Self::Full, Self::NoAsa, Self::NoCotrain, Self::Erm];

    pub fn flags(self) -> (bool, bool) {
        match self {
            Self::Full => (true, true),
            Self::NoAsa => (false, true),
            Self::NoCotrain => (true, false),
            Self::Erm => (false, false),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub alpha: f64,
    pub beta: f64,
    pub warmup_epochs: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub asa_enabled: bool,
    pub cotrain_enabled: bool,
    pub ema_scope: EmaScope,
    pub peer_exchange: PeerExchange,
    pub early_stop: EarlyStopMetric,
    pub seed_a: u64,
    pub seed_b: u64,
    pub data_seed: u64,
    pub eps_log: f64,
    /// Train the two peers on separate threads.
    pub parallel_peers: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::cmv()
    }
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl TrainConfig {
    /// α = 0.99, β = 0.7, 15 warm-up epochs, lr 0.005, batch 256.
    pub fn cmv() -> Self {
        Self {
            alpha: 0.99,
            beta: 0.7,
            warmup_epochs: 15,
            max_epochs: 40,
            patience: 5,
            batch_size: 256,
            lr: 0.005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            asa_enabled: true,
            cotrain_enabled: true,
            ema_scope: EmaScope::All,
            peer_exchange: PeerExchange::TrainOnPeerTable,
            early_stop: EarlyStopMetric::Ensemble,
            seed_a: 1,
            seed_b: 2,
            data_seed: 3,
            eps_log: 1e-12,
            parallel_peers: true,
        }
    }

    /// α = 0.95, β = 0.4, 8 warm-up epochs, lr 0.0005, batch 256.
    pub fn cancer() -> Self {
        Self {
            alpha: 0.95,
            beta: 0.4,
            warmup_epochs: 8,
            max_epochs: 30,
            lr: 0.0005,
            ..Self::cmv()
        }
    }

    /// Shortened schedule for the synthetic benchmark.
    pub fn bench() -> Self {
        Self {
            alpha: 0.9,
            beta: 0.7,
            warmup_epochs: 4,
            max_epochs: 24,
            patience: 6,
            batch_size: 32,
            lr: 0.001,
            ..Self::cmv()
        }
    }

    /// Derives the two model seeds and the data-order seed from one run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed_a = splitmix(seed.wrapping_mul(3));
        self.seed_b = splitmix(seed.wrapping_mul(3).wrapping_add(1));
        self.data_seed = splitmix(seed.wrapping_mul(3).wrapping_add(2));
        self
    }

    pub fn with_mode(mut self, mode: TrainingMode) -> Self {
        (self.asa_enabled, self.cotrain_enabled) = mode.flags();
        self
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha must be in [0, 1], got {}", self.alpha));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return bad(format!("beta must be in [0, 1), got {}", self.beta));
        }
        if self.warmup_epochs >= self.max_epochs {
            return bad(format!(
                "warmup_epochs ({}) must be below max_epochs ({})",
                self.warmup_epochs, self.max_epochs
            ));
        }
        if self.batch_size == 0 || self.patience == 0 {
            return bad("batch_size and patience must be at least 1".into());
        }
        if !(self.lr >= 0.0) || !(self.eps_log > 0.0 && self.eps_log < 0.5) {
            return bad("lr must be nonnegative and eps_log in (0, 0.5)".into());
        }
        Ok(())
    }
}

impl KvConfig for TrainConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "alpha" => self.alpha = kv::value(key, v)?,
            "beta" => self.beta = kv::value(key, v)?,
            "warmup_epochs" => self.warmup_epochs = kv::value(key, v)?,
            "max_epochs" => self.max_epochs = kv::value(key, v)?,
            "patience" => self.patience = kv::value(key, v)?,
            "batch_size" => self.batch_size = kv::value(key, v)?,
            "lr" => self.lr = kv::value(key, v)?,
            "adam_beta1" => self.adam_beta1 = kv::value(key, v)?,
            "adam_beta2" => self.adam_beta2 = kv::value(key, v)?,
            "adam_eps" => self.adam_eps = kv::value(key, v)?,
            "asa" => self.asa_enabled = kv::value(key, v)?,
            "cotrain" => self.cotrain_enabled = kv::value(key, v)?,
            "ema_scope" => self.ema_scope = kv::value(key, v)?,
            "peer_exchange" => self.peer_exchange = kv::value(key, v)?,
            "early_stop" => self.early_stop = kv::value(key, v)?,
            "seed_a" => self.seed_a = kv::value(key, v)?,
            "seed_b" => self.seed_b = kv::value(key, v)?,
            "data_seed" => self.data_seed = kv::value(key, v)?,
            "eps_log" => self.eps_log = kv::value(key, v)?,
            "parallel_peers" => self.parallel_peers = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        [
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("max_epochs", self.max_epochs.to_string()),
            ("patience", self.patience.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr", self.lr.to_string()),
            ("adam_beta1", self.adam_beta1.to_string()),
            ("adam_beta2", self.adam_beta2.to_string()),
            ("adam_eps", self.adam_eps.to_string()),
            ("asa", self.asa_enabled.to_string()),
            ("cotrain", self.cotrain_enabled.to_string()),
            ("ema_scope", self.ema_scope.to_string()),
            ("peer_exchange", self.peer_exchange.to_string()),
            ("early_stop", self.early_stop.to_string()),
            ("seed_a", self.seed_a.to_string()),
            ("seed_b", self.seed_b.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("eps_log", self.eps_log.to_string()),
            ("parallel_peers", self.parallel_peers.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_owned(), v))
        .collect()
    }
}

/// A single model or a co-trained pair whose probabilities are averaged.
#[derive(Debug, Clone, Copy)]
pub enum Predictor<'a, T: Scalar> {
    Single(&'a ModelState<T>),
    Ensemble(&'a ModelState<T>, &'a ModelState<T>),
}

impl<'a, T: Scalar> Predictor<'a, T> {
    pub fn new(a: &'a ModelState<T>, b: Option<&'a ModelState<T>>) -> Result<Self> {
        match b {
            None => Ok(Self::Single(a)),
            Some(b) => {
                if a.config != b.config {
                    return Err(Error::InvalidArgument(
                        "ensemble members have different model configurations".into(),
                    ));
                }
                Ok(Self::Ensemble(a, b))
            }
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            Self::Single(a) | Self::Ensemble(a, _) => &a.config,
        }
    }

    pub fn predict_encoded(&self, set: &EncodedSet) -> Result<Vec<T>> {
        match self {
            Self::Single(a) => predict_encoded(a, set),
            Self::Ensemble(a, b) => {
                let pa = predict_encoded(a, set)?;
                let pb = predict_encoded(b, set)?;
                Ok(average(&pa, &pb))
            }
        }
    }

    pub fn predict(&self, records: &[SequenceRecord]) -> Result<Vec<T>> {
        self.predict_encoded(&EncodedSet::new(records, self.config())?)
    }
}

fn average<T: Scalar>(a: &[T], b: &[T]) -> Vec<T> {
    let half = T::from_f64_lossy(0.5);
    a.iter().zip(b).map(|(&x, &y)| (x + y) * half).collect()
}

/// Elementwise mean of the two models' p(y = 1).
pub fn ensemble_proba<T: Scalar>(
    a: &ModelState<T>,
    b: &ModelState<T>,
    records: &[SequenceRecord],
) -> Result<Vec<T>> {
    Predictor::new(a, Some(b))?.predict(records)
}

/// F(R) = Σ ρ·f(s) over the repertoire's sequences.
pub fn score_repertoire<T: Scalar>(predictor: &Predictor<T>, rep: &Repertoire) -> Result<f64> {
    if rep.is_empty() {
        return Err(Error::InvalidRepertoire {
            id: rep.id().to_owned(),
            reason: "no sequences".into(),
        });
    }
    let f = predictor.predict(rep.sequences())?;
    Ok(weighted_score(rep.sequences(), &f))
}

/// Σ ρ·f over `records`, with `f[i]` the score of `records[i]`.
pub fn weighted_score<T: Scalar>(records: &[SequenceRecord], f: &[T]) -> f64 {
    records
        .iter()
        .zip(f)
        .map(|(r, &p)| r.frequency() * p.to_f64_lossy())
        .sum()
}

/// Repertoire scores for many repertoires with one prediction pass.
pub fn score_repertoires<T: Scalar>(predictor: &Predictor<T>, reps: &[Repertoire]) -> Result<Vec<f64>> {
    let set = EncodedSet::new(reps.iter().flat_map(|r| r.sequences()), predictor.config())?;
    let f = predictor.predict_encoded(&set)?;
    score_from_flat(reps, &f)
}

fn score_from_flat<T: Scalar>(reps: &[Repertoire], f: &[T]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(reps.len());
    let mut start = 0;
    for rep in reps {
        if rep.is_empty() {
            return Err(Error::InvalidRepertoire {
                id: rep.id().to_owned(),
                reason: "no sequences".into(),
            });
        }
        let end = start + rep.len();
        out.push(weighted_score(rep.sequences(), &f[start..end]));
        start = end;
    }
    Ok(out)
}

/// Mean probability of the noisy class, split by noisy class.
pub fn class_confidence<T: Scalar>(preds: &[T], noisy_labels: &[bool]) -> (f64, f64) {
    let (mut pos, mut npos, mut neg, mut nneg) = (0.0, 0usize, 0.0, 0usize);
    for (&p, &y) in preds.iter().zip(noisy_labels) {
        let p = p.to_f64_lossy();
        if y {
            pos += p;
            npos += 1;
        } else {
            neg += 1.0 - p;
            nneg += 1;
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { s / n as f64 };
    (mean(pos, npos), mean(neg, nneg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_a: f64,
    pub loss_b: Option<f64>,
    pub val_auc: f64,
    pub mean_conf_pos: f64,
    pub mean_conf_neg: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T: Scalar> {
    pub model_a: ModelState<T>,
    pub model_b: Option<ModelState<T>>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_auc: f64,
}

impl<T: Scalar> FitResult<T> {
    pub fn predictor(&self) -> Predictor<'_, T> {
        match &self.model_b {
            None => Predictor::Single(&self.model_a),
            Some(b) => Predictor::Ensemble(&self.model_a, b),
        }
    }
}

/// Target tables in force for one epoch, passed to the [`fit_observed`] callback.
pub struct EpochTargets<'a, T> {
    pub epoch: usize,
    pub table_a: &'a TargetTable<T>,
    pub table_b: Option<&'a TargetTable<T>>,
}

pub fn fit<T: Scalar>(
    train: &InstanceDataset,
    val: &[Repertoire],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<FitResult<T>> {
    fit_observed(train, val, model_cfg, cfg, |_| {})
}

struct Peer<T: Scalar> {
    state: ModelState<T>,
    table: TargetTable<T>,
    /// Clean predictions on the training set after the latest epoch.
    preds: Vec<T>,
}

fn batch_order(data_seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

fn train_epoch<T: Scalar>(
    state: &mut ModelState<T>,
    set: &EncodedSet,
    targets: &[T],
    order: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<f64> {
    let adam = cfg.adam();
    let eps = T::from_f64_lossy(cfg.eps_log);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(state.seed);
    dropout_rng.set_stream(epoch as u64);
    let mut total = 0.0;
    for rows in order.chunks(cfg.batch_size) {
        let tgt: Vec<T> = rows.iter().map(|&r| targets[r]).collect();
        let batch = Batch::from_encoded(set, rows, tgt)?;
        let (probs, cache) = forward(state, &batch, true, dropout_rng.next_u64())?;
        let (loss, dprobs) = soft_ce_loss(&probs, &batch.targets, eps);
        let loss = loss.to_f64_lossy();
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("loss is {loss}"),
            });
        }
        let grads = backward(state, &cache, &dprobs)?;
        adam_step(state, &grads, &adam).map_err(|e| Error::Diverged {
            epoch,
            reason: e.to_string(),
        })?;
        total += loss * rows.len() as f64;
    }
    Ok(total / order.len() as f64)
}

/// [`fit`], calling `observe` with the target tables at the start of every epoch.
pub fn fit_observed<T: Scalar>(
    train: &InstanceDataset,
    val: &[Repertoire],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut observe: impl FnMut(&EpochTargets<T>),
) -> Result<FitResult<T>> {
    cfg.validate()?;
    model_cfg.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if val.is_empty() {
        return Err(Error::InvalidArgument("empty validation set".into()));
    }
    let val_labels: Vec<bool> = val
        .iter()
        .map(|r| r.label().ok_or_else(|| Error::MissingLabel(r.id().to_owned())))
        .collect::<Result<_>>()?;
    if val_labels.iter().all(|&l| l) || val_labels.iter().all(|&l| !l) {
        return Err(Error::SingleClass(
            "validation repertoires must include both labels".into(),
        ));
    }

    let labels = train.noisy_labels();
    let train_set = EncodedSet::new(train.records(), model_cfg)?;
    let val_set = EncodedSet::new(val.iter().flat_map(|r| r.sequences()), model_cfg)?;
    let positives_mask: Vec<bool> = labels.clone();
    let ema_mask = match cfg.ema_scope {
        EmaScope::All => None,
        EmaScope::PositivesOnly => Some(positives_mask.as_slice()),
    };

    let initial = if cfg.asa_enabled {
        init_targets::<T>(&labels, cfg.beta)?
    } else {
        hard_targets::<T>(&labels)
    };
    let new_peer = |seed: u64| -> Result<Peer<T>> {
        Ok(Peer {
            state: init_params(model_cfg, seed)?,
            table: initial.clone(),
            preds: Vec::new(),
        })
    };
    let mut a = new_peer(cfg.seed_a)?;
    let mut b = if cfg.cotrain_enabled {
        Some(new_peer(cfg.seed_b)?)
    } else {
        None
    };

    let mut history = Vec::new();
    let mut best: Option<(f64, usize, ModelState<T>, Option<ModelState<T>>)> = None;
    for epoch in 0..cfg.max_epochs {
        if cfg.asa_enabled && epoch >= cfg.warmup_epochs {
            match &mut b {
                None => a.table = ema_update_masked(&a.table, &a.preds, cfg.alpha, ema_mask)?,
                Some(b) => {
                    let (src_a, src_b) = match cfg.peer_exchange {
                        PeerExchange::TrainOnPeerTable => (&a.preds, &b.preds),
                        PeerExchange::UpdateFromPeer => (&b.preds, &a.preds),
                    };
                    let ta = ema_update_masked(&a.table, src_a, cfg.alpha, ema_mask)?;
                    let tb = ema_update_masked(&b.table, src_b, cfg.alpha, ema_mask)?;
                    a.table = ta;
                    b.table = tb;
                }
            }
        }
        observe(&EpochTargets {
            epoch,
            table_a: &a.table,
            table_b: b.as_ref().map(|b| &b.table),
        });

        let order = batch_order(cfg.data_seed, epoch, train.len());
        let (loss_a, loss_b) = match &mut b {
            None => (train_epoch(&mut a.state, &train_set, a.table.values(), &order, cfg, epoch)?, None),
            Some(b) => {
                let (ta, tb) = match cfg.peer_exchange {
                    PeerExchange::TrainOnPeerTable => (b.table.values(), a.table.values()),
                    PeerExchange::UpdateFromPeer => (a.table.values(), b.table.values()),
                };
                let (sa, sb) = (&mut a.state, &mut b.state);
                let (ra, rb) = if cfg.parallel_peers {
                    rayon::join(
                        || train_epoch(sa, &train_set, ta, &order, cfg, epoch),
                        || train_epoch(sb, &train_set, tb, &order, cfg, epoch),
                    )
                } else {
                    (
                        train_epoch(sa, &train_set, ta, &order, cfg, epoch),
                        train_epoch(sb, &train_set, tb, &order, cfg, epoch),
                    )
                };
                (ra?, Some(rb?))
            }
        };

        a.preds = predict_encoded(&a.state, &train_set)?;
        if let Some(b) = &mut b {
            b.preds = predict_encoded(&b.state, &train_set)?;
        }
        let train_probs = match &b {
            None => a.preds.clone(),
            Some(b) => average(&a.preds, &b.preds),
        };
        let (mean_conf_pos, mean_conf_neg) = class_confidence(&train_probs, &labels);

        let stop_predictor = match (&b, cfg.early_stop) {
            (Some(b), EarlyStopMetric::Ensemble) => Predictor::Ensemble(&a.state, &b.state),
            _ => Predictor::Single(&a.state),
        };
        let val_scores = score_from_flat(val, &stop_predictor.predict_encoded(&val_set)?)?;
        let val_auc = roc_auc(&val_scores, &val_labels)?;

        history.push(EpochRecord {
            epoch,
            loss_a,
            loss_b,
            val_auc,
            mean_conf_pos,
            mean_conf_neg,
        });

        if best.as_ref().is_none_or(|(auc, ..)| val_auc > *auc) {
            best = Some((val_auc, epoch, a.state.clone(), b.as_ref().map(|b| b.state.clone())));
        }
        let best_epoch = best.as_ref().map_or(epoch, |(_, e, ..)| *e);
        if epoch + 1 >= cfg.warmup_epochs + cfg.patience && epoch - best_epoch >= cfg.patience {
            break;
        }
    }
    let (best_val_auc, best_epoch, model_a, model_b) = best.expect("at least one epoch");
    Ok(FitResult {
        model_a,
        model_b,
        history,
        best_epoch,
        best_val_auc,
    })
}

pub fn write_history_csv(history: &[EpochRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let io = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(["epoch", "loss_a", "loss_b", "val_auc", "mean_conf_pos", "mean_conf_neg"])
        .map_err(io)?;
    for h in history {
        w.write_record([
            h.epoch.to_string(),
            h.loss_a.to_string(),
            h.loss_b.map(|l| l.to_string()).unwrap_or_default(),
            h.val_auc.to_string(),
            h.mean_conf_pos.to_string(),
            h.mean_conf_neg.to_string(),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
