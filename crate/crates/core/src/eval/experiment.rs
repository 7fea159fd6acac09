//! Cross-validation, sequence identification and ablation protocols.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{flatten_to_instances, kfold_split, Dataset, GeneVocabs, KnownAssociationSet, MatchKey, Repertoire};
use crate::error::{Error, Result};
use crate::nn::{EncodedSet, ModelConfig};
use crate::robust::{fit, score_repertoires, EpochRecord, FitResult, Predictor, TrainConfig, TrainingMode};
use crate::scalar::Scalar;

use super::metrics::{f1_accuracy, mean_std, roc_auc, roc_points, select_threshold, RocPoint};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEval {
    pub auc: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub roc: Vec<RocPoint>,
}

/// Sequence-level ROC: known-set members from any test repertoire against
/// non-members from negative test repertoires.
pub fn sequence_identification_eval<T: Scalar>(
    predictor: &Predictor<T>,
    test: &[Repertoire],
    known: &KnownAssociationSet,
    vocab: &GeneVocabs,
    key: MatchKey,
) -> Result<SequenceEval> {
    if known.is_empty() {
        return Err(Error::InvalidArgument("known association set is empty".into()));
    }
    let mut records = Vec::new();
    let mut labels = Vec::new();
    for rep in test {
        let negative_bag = rep.label() == Some(false);
        for rec in rep.sequences() {
            let hit = known.matches(rec, vocab, key);
            if hit || negative_bag {
                records.push(rec);
                labels.push(hit);
            }
        }
    }
    let n_positive = labels.iter().filter(|&&y| y).count();
    let n_negative = labels.len() - n_positive;
    if n_positive == 0 {
        return Err(Error::InvalidArgument(
            "no test sequence matches the known set; use larger folds or a larger known set".into(),
        ));
    }
    if n_negative == 0 {
        return Err(Error::InvalidArgument(
            "no negative-labeled test repertoire contributes background sequences".into(),
        ));
    }
    let set = EncodedSet::new(records.iter().copied(), predictor.config())?;
    let scores: Vec<f64> = predictor
        .predict_encoded(&set)?
        .into_iter()
        .map(Scalar::to_f64_lossy)
        .collect();
    Ok(SequenceEval {
        auc: roc_auc(&scores, &labels)?,
        n_positive,
        n_negative,
        roc: roc_points(&scores, &labels)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidencePoint {
    pub epoch: usize,
    pub mean_conf_neg: f64,
    pub mean_conf_pos: f64,
}

/// Per-epoch mean confidence in the noisy class, by noisy class.
pub fn confidence_curves(history: &[EpochRecord]) -> Vec<ConfidencePoint> {
    history
        .iter()
        .map(|h| ConfidencePoint {
            epoch: h.epoch,
            mean_conf_neg: h.mean_conf_neg,
            mean_conf_pos: h.mean_conf_pos,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        let (mean, std) = mean_std(values);
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub rotation: usize,
    pub validation_fold: usize,
    pub test_fold: usize,
    pub threshold: f64,
    pub repertoire_auc: f64,
    pub f1: f64,
    pub accuracy: f64,
    pub sequence_auc: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub best_val_auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldReport>,
    pub repertoire_auc: Summary,
    pub f1: Summary,
    pub accuracy: Summary,
    pub sequence_auc: Option<Summary>,
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldReport>) -> Self {
        let col = |f: fn(&FoldReport) -> f64| Summary::of(&folds.iter().map(f).collect::<Vec<_>>());
        let seq: Option<Vec<f64>> = folds.iter().map(|f| f.sequence_auc).collect();
        Self {
            repertoire_auc: col(|f| f.repertoire_auc),
            f1: col(|f| f.f1),
            accuracy: col(|f| f.accuracy),
            sequence_auc: seq.map(|s| Summary::of(&s)),
            folds,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvOptions {
    pub k: usize,
    pub split_seed: u64,
    /// Rotations to run; `None` runs all `k`.
    pub rotations: Option<Vec<usize>>,
    pub match_key: MatchKey,
}

impl Default for CvOptions {
    fn default() -> Self {
        Self {
            k: 5,
            split_seed: 0,
            rotations: None,
            match_key: MatchKey::Cdr3,
        }
    }
}

/// Everything one rotation produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FoldRun<T: Scalar> {
    pub report: FoldReport,
    pub fit: FitResult<T>,
    pub sequence_eval: Option<SequenceEval>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CvRun<T: Scalar> {
    pub report: EvalReport,
    pub folds: Vec<FoldRun<T>>,
}

fn labels_of(reps: &[Repertoire]) -> Result<Vec<bool>> {
    reps.iter()
        .map(|r| r.label().ok_or_else(|| Error::MissingLabel(r.id().to_owned())))
        .collect()
}

/// k-fold protocol: rotation r tests on fold r, validates on fold r + 1 and
/// trains on the rest. The threshold is chosen on validation scores.
pub fn run_cv_experiment<T: Scalar>(
    dataset: &Dataset,
    known: Option<&KnownAssociationSet>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    opts: &CvOptions,
) -> Result<CvRun<T>> {
    let split = kfold_split(&dataset.ids(), opts.k, opts.split_seed)?;
    let rotations: Vec<usize> = opts.rotations.clone().unwrap_or_else(|| (0..opts.k).collect());
    if let Some(&r) = rotations.iter().find(|&&r| r >= opts.k) {
        return Err(Error::InvalidArgument(format!("rotation {r} out of range for k = {}", opts.k)));
    }
    let model_cfg = model_cfg.clone().with_vocab(&dataset.vocab);
    let folds: Vec<FoldRun<T>> = rotations
        .par_iter()
        .map(|&rotation| {
            let roles = split.roles(rotation);
            let train = dataset.select(&split.ids_in(&roles.train));
            let val = dataset.select(&split.ids_in(&[roles.validation]));
            let test = dataset.select(&split.ids_in(&[roles.test]));
            let fit = fit::<T>(&flatten_to_instances(&train)?, &val, &model_cfg, train_cfg)?;
            let predictor = fit.predictor();
            let threshold = select_threshold(&score_repertoires(&predictor, &val)?, &labels_of(&val)?)?;
            let test_scores = score_repertoires(&predictor, &test)?;
            let test_labels = labels_of(&test)?;
            let repertoire_auc = roc_auc(&test_scores, &test_labels)?;
            let (f1, accuracy) = f1_accuracy(&test_scores, &test_labels, threshold)?;
            let sequence_eval = known
                .map(|k| sequence_identification_eval(&predictor, &test, k, &dataset.vocab, opts.match_key))
                .transpose()?;
            let report = FoldReport {
                rotation,
                validation_fold: roles.validation,
                test_fold: roles.test,
                threshold,
                repertoire_auc,
                f1,
                accuracy,
                sequence_auc: sequence_eval.as_ref().map(|s| s.auc),
                best_epoch: fit.best_epoch,
                epochs_run: fit.history.len(),
                best_val_auc: fit.best_val_auc,
            };
            Ok(FoldRun {
                report,
                fit,
                sequence_eval,
            })
        })
        .collect::<Result<_>>()?;
    Ok(CvRun {
        report: EvalReport::from_folds(folds.iter().map(|f| f.report.clone()).collect()),
        folds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub mode: TrainingMode,
    pub seed: u64,
    pub repertoire_auc: f64,
    pub sequence_auc: Option<f64>,
    pub f1: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: TrainingMode,
    pub n_seeds: usize,
    pub repertoire_auc: Summary,
    pub sequence_auc: Option<Summary>,
    pub f1: Summary,
    pub accuracy: Summary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCell>,
}

impl AblationTable {
    pub fn row(&self, mode: TrainingMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }
}

impl AblationCell {
    pub fn from_report(mode: TrainingMode, seed: u64, report: &EvalReport) -> Self {
        Self {
            mode,
            seed,
            repertoire_auc: report.repertoire_auc.mean,
            sequence_auc: report.sequence_auc.map(|s| s.mean),
            f1: report.f1.mean,
            accuracy: report.accuracy.mean,
        }
    }
}

impl AblationTable {
    /// Summarizes `cells` into one row per entry of `modes`.
    pub fn from_cells(modes: &[TrainingMode], cells: Vec<AblationCell>) -> Self {
        let rows = modes
            .iter()
            .map(|&mode| {
                let mine: Vec<&AblationCell> = cells.iter().filter(|c| c.mode == mode).collect();
                let col = |f: fn(&AblationCell) -> f64| {
                    Summary::of(&mine.iter().map(|c| f(c)).collect::<Vec<_>>())
                };
                let seq: Option<Vec<f64>> = mine.iter().map(|c| c.sequence_auc).collect();
                AblationRow {
                    mode,
                    n_seeds: mine.len(),
                    repertoire_auc: col(|c| c.repertoire_auc),
                    sequence_auc: seq.map(|s| Summary::of(&s)),
                    f1: col(|c| c.f1),
                    accuracy: col(|c| c.accuracy),
                }
            })
            .collect();
        Self { rows, cells }
    }
}

/// Runs every mode for every seed on the same dataset. The seed drives the
/// fold split and the model and data-order seeds; each cell's metrics are
/// averaged over the rotations in `opts`.
pub fn run_ablation<T: Scalar>(
    dataset: &Dataset,
    known: Option<&KnownAssociationSet>,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    modes: &[TrainingMode],
    seeds: &[u64],
    opts: &CvOptions,
) -> Result<AblationTable> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("ablation needs at least two seeds".into()));
    }
    let jobs: Vec<(TrainingMode, u64)> = modes
        .iter()
        .flat_map(|&m| seeds.iter().map(move |&s| (m, s)))
        .collect();
    let cells: Vec<AblationCell> = jobs
        .par_iter()
        .map(|&(mode, seed)| {
            let cfg = train_cfg.clone().with_seed(seed).with_mode(mode);
            let cv_opts = CvOptions {
                split_seed: seed,
                ..opts.clone()
            };
            let run = run_cv_experiment::<T>(dataset, known, model_cfg, &cfg, &cv_opts)?;
            Ok(AblationCell::from_report(mode, seed, &run.report))
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable::from_cells(modes, cells))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(header).map_err(err)?;
    for row in rows {
        w.write_record(&row).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_roc_csv(points: &[RocPoint], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["fpr", "tpr", "threshold"],
        points
            .iter()
            .map(|p| vec![p.fpr.to_string(), p.tpr.to_string(), p.threshold.to_string()]),
    )
}

pub fn write_confidence_csv(curves: &[ConfidencePoint], path: &Path) -> Result<()> {
    write_rows(
        path,
        &["epoch", "mean_conf_neg", "mean_conf_pos"],
        curves.iter().map(|c| {
            vec![
                c.epoch.to_string(),
                c.mean_conf_neg.to_string(),
                c.mean_conf_pos.to_string(),
            ]
        }),
    )
}

pub fn write_ablation_csv(table: &AblationTable, path: &Path) -> Result<()> {
    write_rows(
        path,
        &[
            "mode",
            "n_seeds",
            "repertoire_auc_mean",
            "repertoire_auc_std",
            "sequence_auc_mean",
            "sequence_auc_std",
            "f1_mean",
            "f1_std",
            "accuracy_mean",
            "accuracy_std",
        ],
        table.rows.iter().map(|r| {
            vec![
                r.mode.to_string(),
                r.n_seeds.to_string(),
                r.repertoire_auc.mean.to_string(),
                r.repertoire_auc.std.to_string(),
                opt(r.sequence_auc.map(|s| s.mean)),
                opt(r.sequence_auc.map(|s| s.std)),
                r.f1.mean.to_string(),
                r.f1.std.to_string(),
                r.accuracy.mean.to_string(),
                r.accuracy.std.to_string(),
            ]
        }),
    )
}

pub fn write_json<S: Serialize>(value: &S, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}
