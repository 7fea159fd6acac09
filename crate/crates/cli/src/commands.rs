use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use replik::data::{flatten_to_instances, kfold_split, GeneVocabs, KnownAssociationSet, MatchKey, Repertoire};
use replik::eval::{
    confidence_curves, f1_accuracy, roc_auc, roc_points, run_ablation, run_cv_experiment,
    select_threshold, sequence_identification_eval, write_ablation_csv, write_confidence_csv,
    write_json, write_roc_csv, CvOptions,
};
use replik::ingest::{
    load_known_set, load_repertoires, load_repertoires_with_vocab, load_sequence_file,
    write_known_set, write_repertoires, ColumnMap, DatasetManifest,
};
use replik::kv::{self, KvConfig};
use replik::nn::{load_checkpoint, save_checkpoint, ModelState};
use replik::robust::{fit, score_repertoires, weighted_score, write_history_csv, Predictor, TrainingMode};
use replik::scalar::Scalar;
use replik::synth::generate;
use replik::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::config::{layered, resolve_synth, RunConfig, ScalarKind};
use crate::{ColumnsArg, ConfigArgs, TrainingArgs};

const MODEL_A: &str = "model_a.json";
const MODEL_B: &str = "model_b.json";
const SUMMARY: &str = "training.json";
const SPLIT: &str = "split.tsv";
const RESOLVED: &str = "resolved_config";

macro_rules! dispatch {
    ($kind:expr, $f:ident($($arg:expr),* $(,)?)) => {
        match $kind {
            ScalarKind::F32 => $f::<f32>($($arg),*),
            ScalarKind::F64 => $f::<f64>($($arg),*),
        }
    };
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_owned(),
        source: e,
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_err(path, e))
}

/// Line-oriented progress on stderr; timestamped copies go to `run.log`.
struct Log {
    file: Option<fs::File>,
}

impl Log {
    fn open(out: &Path) -> Self {
        let file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(out.join("run.log"))
            .ok();
        Self { file }
    }

    fn line(&mut self, msg: &str) {
        eprintln!("{msg}");
        if let Some(f) = &mut self.file {
            let t = SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs_f64())
                .unwrap_or(0.0);
            let _ = writeln!(f, "[{t:.3}] {msg}");
        }
    }
}

fn run_config(t: &TrainingArgs) -> Result<RunConfig> {
    let mut map = layered(t.config.config.as_deref(), &t.config.sets)?;
    if let Some(p) = t.profile {
        let name = match p {
            crate::ProfileArg::Cmv => "cmv",
            crate::ProfileArg::Cancer => "cancer",
            crate::ProfileArg::Custom => "custom",
        };
        map.insert("profile".into(), name.into());
    }
    if let Some(s) = t.seed {
        map.insert("seed".into(), s.to_string());
    }
    if t.no_asa {
        map.insert("asa".into(), "false".into());
    }
    if t.no_cotrain {
        map.insert("cotrain".into(), "false".into());
    }
    RunConfig::resolve(map)
}

fn open_dataset(path: &Path, log: &mut Log) -> Result<(DatasetManifest, replik::data::Dataset)> {
    let manifest = DatasetManifest::open(path)?;
    let report = load_repertoires(&manifest)?;
    report_skips(&report.warnings, log);
    log.line(&format!(
        "loaded {} repertoires, {} sequences from {}",
        report.dataset.repertoires.len(),
        report.dataset.n_sequences(),
        path.display()
    ));
    Ok((manifest, report.dataset))
}

fn report_skips(warnings: &[String], log: &mut Log) {
    for w in warnings.iter().take(10) {
        log.line(&format!("warning: {w}"));
    }
    if warnings.len() > 10 {
        log.line(&format!("warning: {} more rows skipped", warnings.len() - 10));
    }
}

fn labels(reps: &[Repertoire]) -> Result<Vec<bool>> {
    reps.iter()
        .map(|r| r.label().ok_or_else(|| Error::MissingLabel(r.id().to_owned())))
        .collect()
}

// ------------------------------------------------------------------ synth

pub fn synth(args: &ConfigArgs, out: &Path) -> Result<()> {
    let cfg = resolve_synth(layered(args.config.as_deref(), &args.sets)?)?;
    let ds = generate(&cfg)?;
    create_dir(out)?;
    let mut log = Log::open(out);
    write_repertoires(&ds.dataset, Some(&ds.ground_truth), out)?;
    write_known_set(&ds.known_set(), &out.join("known_set.tsv"))?;
    write_text(&out.join(RESOLVED), &kv::render(&cfg.to_pairs()))?;
    let positives = ds.ground_truth.iter().filter(|&&y| y).count();
    log.line(&format!(
        "wrote {} repertoires ({} sequences, {positives} motif-bearing) to {}",
        ds.dataset.repertoires.len(),
        ds.dataset.n_sequences(),
        out.display()
    ));
    Ok(())
}

// ------------------------------------------------------------------ train

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TrainingSummary {
    scalar: String,
    profile_config: String,
    cotrained: bool,
    best_epoch: usize,
    epochs_run: usize,
    best_val_auc: f64,
    /// F1-maximizing repertoire-score threshold on the validation set.
    threshold: f64,
}

pub fn train(data: &Path, val_data: Option<&Path>, args: &TrainingArgs, out: &Path) -> Result<()> {
    let rc = run_config(args)?;
    create_dir(out)?;
    write_text(&out.join(RESOLVED), &rc.render())?;
    dispatch!(rc.scalar, train_with(data, val_data, &rc, out))
}

fn train_with<T: Scalar>(data: &Path, val_data: Option<&Path>, rc: &RunConfig, out: &Path) -> Result<()> {
    let mut log = Log::open(out);
    let (_, dataset) = open_dataset(data, &mut log)?;
    let mut roles: Vec<(String, &str)> = Vec::new();
    let (train_reps, val_reps) = match val_data {
        Some(p) => {
            let report = load_repertoires_with_vocab(&DatasetManifest::open(p)?, &dataset.vocab)?;
            report_skips(&report.warnings, &mut log);
            roles.extend(dataset.repertoires.iter().map(|r| (r.id().to_owned(), "train")));
            (dataset.repertoires.clone(), report.dataset.repertoires)
        }
        None => {
            if rc.rotation >= rc.folds {
                return Err(Error::InvalidConfig(format!(
                    "rotation {} out of range for {} folds",
                    rc.rotation, rc.folds
                )));
            }
            let split = kfold_split(&dataset.ids(), rc.folds, rc.split_seed)?;
            let r = split.roles(rc.rotation);
            let train_ids = split.ids_in(&r.train);
            let val_ids = split.ids_in(&[r.validation]);
            let test_ids = split.ids_in(&[r.test]);
            for (ids, role) in [(&train_ids, "train"), (&val_ids, "validation"), (&test_ids, "test")] {
                roles.extend(ids.iter().map(|id| (id.clone(), role)));
            }
            (dataset.select(&train_ids), dataset.select(&val_ids))
        }
    };
    let mut split_tsv = String::from("repertoire_id\trole\n");
    for (id, role) in &roles {
        split_tsv.push_str(&format!("{id}\t{role}\n"));
    }
    write_text(&out.join(SPLIT), &split_tsv)?;

    let model_cfg = rc.model.clone().with_vocab(&dataset.vocab);
    let instances = flatten_to_instances(&train_reps)?;
    log.line(&format!(
        "training on {} sequences from {} repertoires; validating on {} repertoires",
        instances.len(),
        train_reps.len(),
        val_reps.len()
    ));
    let result = fit::<T>(&instances, &val_reps, &model_cfg, &rc.train)?;
    for h in &result.history {
        log.line(&format!(
            "epoch {:>3}  loss {:.5}  val_auc {:.4}  conf+ {:.4}  conf- {:.4}",
            h.epoch, h.loss_a, h.val_auc, h.mean_conf_pos, h.mean_conf_neg
        ));
    }
    let predictor = result.predictor();
    let val_scores = score_repertoires(&predictor, &val_reps)?;
    let threshold = select_threshold(&val_scores, &labels(&val_reps)?)?;

    save_checkpoint(&result.model_a, &dataset.vocab, &out.join(MODEL_A))?;
    let stale_b = out.join(MODEL_B);
    match &result.model_b {
        Some(b) => save_checkpoint(b, &dataset.vocab, &stale_b)?,
        None if stale_b.exists() => fs::remove_file(&stale_b).map_err(|e| io_err(&stale_b, e))?,
        None => {}
    }
    write_history_csv(&result.history, &out.join("history.csv"))?;
    write_json(
        &TrainingSummary {
            scalar: T::NAME.into(),
            profile_config: RESOLVED.into(),
            cotrained: result.model_b.is_some(),
            best_epoch: result.best_epoch,
            epochs_run: result.history.len(),
            best_val_auc: result.best_val_auc,
            threshold,
        },
        &out.join(SUMMARY),
    )?;
    log.line(&format!(
        "best epoch {} (validation AUC {:.4}); models written to {}",
        result.best_epoch,
        result.best_val_auc,
        out.display()
    ));
    Ok(())
}

// ------------------------------------------------------ trained-model access

struct Trained<T: Scalar> {
    a: ModelState<T>,
    b: Option<ModelState<T>>,
    vocab: GeneVocabs,
    summary: TrainingSummary,
}

impl<T: Scalar> Trained<T> {
    fn predictor(&self) -> Result<Predictor<'_, T>> {
        Predictor::new(&self.a, self.b.as_ref())
    }
}

fn read_summary(dir: &Path) -> Result<TrainingSummary> {
    let path = dir.join(SUMMARY);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path,
        message: e.to_string(),
    })
}

fn summary_scalar(dir: &Path) -> Result<ScalarKind> {
    ScalarKind::parse(&read_summary(dir)?.scalar)
}

fn load_trained<T: Scalar>(dir: &Path) -> Result<Trained<T>> {
    let summary = read_summary(dir)?;
    let a = load_checkpoint::<T>(&dir.join(MODEL_A))?;
    let b = if summary.cotrained {
        let b = load_checkpoint::<T>(&dir.join(MODEL_B))?;
        if b.vocab != a.vocab {
            return Err(Error::Checkpoint("peer checkpoints disagree on the gene vocabulary".into()));
        }
        Some(b.state)
    } else {
        None
    };
    Ok(Trained {
        a: a.state,
        b,
        vocab: a.vocab,
        summary,
    })
}

// ------------------------------------------------------------------- eval

#[derive(Debug, Serialize)]
struct EvalOutput {
    n_repertoires: usize,
    n_positive: usize,
    n_negative: usize,
    threshold: f64,
    repertoire_auc: f64,
    f1: f64,
    accuracy: f64,
    sequence_auc: Option<f64>,
    n_positive_sequences: Option<usize>,
    n_negative_sequences: Option<usize>,
}

pub fn eval(
    model: &Path,
    data: &Path,
    known: Option<&Path>,
    role: Option<&str>,
    match_v: bool,
    out: &Path,
) -> Result<()> {
    let kind = summary_scalar(model)?;
    let key = if match_v { MatchKey::Cdr3AndV } else { MatchKey::Cdr3 };
    dispatch!(kind, eval_with(model, data, known, role, key, out))
}

fn eval_with<T: Scalar>(
    model: &Path,
    data: &Path,
    known: Option<&Path>,
    role: Option<&str>,
    key: MatchKey,
    out: &Path,
) -> Result<()> {
    let trained = load_trained::<T>(model)?;
    create_dir(out)?;
    let mut log = Log::open(out);
    let report = load_repertoires_with_vocab(&DatasetManifest::open(data)?, &trained.vocab)?;
    report_skips(&report.warnings, &mut log);
    let mut reps = report.dataset.repertoires;
    if let Some(role) = role {
        let roles = read_roles(model)?;
        if !roles.values().any(|r| r == role) {
            return Err(Error::InvalidArgument(format!("no repertoire has role `{role}` in the model's split")));
        }
        reps.retain(|r| roles.get(r.id()).is_some_and(|x| x == role));
    }
    let y = labels(&reps)?;
    let predictor = trained.predictor()?;
    let scores = score_repertoires(&predictor, &reps)?;
    let threshold = trained.summary.threshold;
    let (f1, accuracy) = f1_accuracy(&scores, &y, threshold)?;
    let auc = roc_auc(&scores, &y)?;
    write_roc_csv(&roc_points(&scores, &y)?, &out.join("roc_points.csv"))?;

    let mut scores_tsv = String::from("repertoire_id\tlabel\tscore\n");
    for ((r, s), l) in reps.iter().zip(&scores).zip(&y) {
        scores_tsv.push_str(&format!("{}\t{}\t{s}\n", r.id(), u8::from(*l)));
    }
    write_text(&out.join("scores.tsv"), &scores_tsv)?;

    let seq = match known {
        Some(p) => {
            let known: KnownAssociationSet = load_known_set(p)?;
            let s = sequence_identification_eval(&predictor, &reps, &known, &trained.vocab, key)?;
            write_roc_csv(&s.roc, &out.join("sequence_roc.csv"))?;
            Some(s)
        }
        None => None,
    };
    let output = EvalOutput {
        n_repertoires: reps.len(),
        n_positive: y.iter().filter(|&&l| l).count(),
        n_negative: y.iter().filter(|&&l| !l).count(),
        threshold,
        repertoire_auc: auc,
        f1,
        accuracy,
        sequence_auc: seq.as_ref().map(|s| s.auc),
        n_positive_sequences: seq.as_ref().map(|s| s.n_positive),
        n_negative_sequences: seq.as_ref().map(|s| s.n_negative),
    };
    write_json(&output, &out.join("report.json"))?;
    let seq_msg = output
        .sequence_auc
        .map(|a| format!(", sequence AUC {a:.4}"))
        .unwrap_or_default();
    log.line(&format!(
        "{} repertoires: AUC {auc:.4}, F1 {f1:.4}, accuracy {accuracy:.4}{seq_msg}",
        reps.len()
    ));
    Ok(())
}

fn read_roles(model: &Path) -> Result<HashMap<String, String>> {
    let path = model.join(SPLIT);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter_map(|l| l.split_once('\t'))
        .map(|(id, role)| (id.to_owned(), role.to_owned()))
        .collect())
}

// ---------------------------------------------------------------- predict

pub fn predict(model: &Path, repertoire: &Path, columns: ColumnsArg) -> Result<()> {
    let kind = summary_scalar(model)?;
    dispatch!(kind, predict_with(model, repertoire, columns))
}

fn predict_with<T: Scalar>(model: &Path, repertoire: &Path, columns: ColumnsArg) -> Result<()> {
    let trained = load_trained::<T>(model)?;
    let cols = match columns {
        ColumnsArg::Default => ColumnMap::default(),
        ColumnsArg::Immuneaccess => ColumnMap::immuneaccess(),
    };
    let (rep, warnings) = load_sequence_file(repertoire, &cols, &trained.vocab)?;
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    let f = trained.predictor()?.predict(rep.sequences())?;
    let v = &trained.vocab;
    let mut out = String::from("cdr3\tv_gene\td_gene\tj_gene\tfrequency\tscore\n");
    for (s, p) in rep.sequences().iter().zip(&f) {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\t{}\n",
            s.cdr3(),
            v.v.name(s.v_gene()).unwrap_or(""),
            s.d_gene().and_then(|d| v.d.name(d)).unwrap_or(""),
            v.j.name(s.j_gene()).unwrap_or(""),
            s.frequency(),
            p.to_f64().unwrap_or(f64::NAN)
        ));
    }
    out.push_str(&format!("repertoire_score = {}\n", weighted_score(rep.sequences(), &f)));
    let mut stdout = std::io::stdout().lock();
    stdout
        .write_all(out.as_bytes())
        .map_err(|e| io_err(Path::new("<stdout>"), e))
}

// ------------------------------------------------------------- cv / ablate

fn cv_options(rc: &RunConfig) -> CvOptions {
    CvOptions {
        k: rc.folds,
        split_seed: rc.split_seed,
        rotations: (!rc.rotations.is_empty()).then(|| rc.rotations.clone()),
        match_key: rc.match_key,
    }
}

fn load_known(known: Option<&Path>) -> Result<Option<KnownAssociationSet>> {
    known.map(load_known_set).transpose()
}

pub fn cv(data: &Path, known: Option<&Path>, args: &TrainingArgs, out: &Path) -> Result<()> {
    let rc = run_config(args)?;
    create_dir(out)?;
    write_text(&out.join(RESOLVED), &rc.render())?;
    dispatch!(rc.scalar, cv_with(data, known, &rc, out))
}

fn cv_with<T: Scalar>(data: &Path, known: Option<&Path>, rc: &RunConfig, out: &Path) -> Result<()> {
    let mut log = Log::open(out);
    let (_, dataset) = open_dataset(data, &mut log)?;
    let known = load_known(known)?;
    let run = run_cv_experiment::<T>(&dataset, known.as_ref(), &rc.model, &rc.train, &cv_options(rc))?;
    for fold in &run.folds {
        let dir = out.join(format!("fold{}", fold.report.rotation));
        create_dir(&dir)?;
        write_history_csv(&fold.fit.history, &dir.join("history.csv"))?;
        write_confidence_csv(&confidence_curves(&fold.fit.history), &dir.join("confidence.csv"))?;
        if let Some(s) = &fold.sequence_eval {
            write_roc_csv(&s.roc, &dir.join("sequence_roc.csv"))?;
        }
        let r = &fold.report;
        log.line(&format!(
            "rotation {}: AUC {:.4}, F1 {:.4}, accuracy {:.4}, best epoch {}",
            r.rotation, r.repertoire_auc, r.f1, r.accuracy, r.best_epoch
        ));
    }
    write_json(&run.report, &out.join("report.json"))?;
    let r = &run.report;
    log.line(&format!(
        "AUC {:.4} +- {:.4}, F1 {:.4} +- {:.4}, accuracy {:.4} +- {:.4}",
        r.repertoire_auc.mean, r.repertoire_auc.std, r.f1.mean, r.f1.std, r.accuracy.mean, r.accuracy.std
    ));
    Ok(())
}

pub fn ablate(data: &Path, known: Option<&Path>, args: &TrainingArgs, out: &Path) -> Result<()> {
    let rc = run_config(args)?;
    create_dir(out)?;
    write_text(&out.join(RESOLVED), &rc.render())?;
    dispatch!(rc.scalar, ablate_with(data, known, &rc, out))
}

fn ablate_with<T: Scalar>(data: &Path, known: Option<&Path>, rc: &RunConfig, out: &Path) -> Result<()> {
    let mut log = Log::open(out);
    let (_, dataset) = open_dataset(data, &mut log)?;
    let known = load_known(known)?;
    let modes: Vec<TrainingMode> = rc
        .modes
        .iter()
        .map(|m| m.parse().map_err(|_| Error::InvalidConfig(format!("unknown training mode `{m}`"))))
        .collect::<Result<_>>()?;
    let table = run_ablation::<T>(
        &dataset,
        known.as_ref(),
        &rc.model,
        &rc.train,
        &modes,
        &rc.seeds,
        &cv_options(rc),
    )?;
    write_ablation_csv(&table, &out.join("ablation.csv"))?;
    write_json(&table, &out.join("ablation.json"))?;
    for row in &table.rows {
        let seq = row
            .sequence_auc
            .map(|s| format!(", sequence AUC {:.4} +- {:.4}", s.mean, s.std))
            .unwrap_or_default();
        log.line(&format!(
            "{}: AUC {:.4} +- {:.4}{seq}",
            row.mode, row.repertoire_auc.mean, row.repertoire_auc.std
        ));
    }
    Ok(())
}
