#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use replik::data::{SequenceRecord, AMINO_ACIDS};
use replik::nn::{backward, forward, init_params, Batch, EncodedSet, ModelConfig, ModelState};

pub fn random_records(rng: &mut impl Rng, n: usize, cfg: &ModelConfig) -> Vec<SequenceRecord> {
    (0..n)
        .map(|_| {
            let len = rng.gen_range(3..=cfg.max_cdr3_len.min(12));
            let cdr3: String = (0..len)
                .map(|_| AMINO_ACIDS[rng.gen_range(0..20)] as char)
                .collect();
            let d = rng.gen_range(0..cfg.n_d_genes as u16);
            SequenceRecord::new(
                cdr3,
                rng.gen_range(0..cfg.n_v_genes as u16),
                (d != 0).then_some(d),
                rng.gen_range(0..cfg.n_j_genes as u16),
                0.0,
            )
            .unwrap()
        })
        .collect()
}

/// Mean soft cross-entropy and its derivative, written out independently of
/// the library's loss.
pub fn reference_ce(probs: &[[f64; 2]], targets: &[f64]) -> (f64, Vec<[f64; 2]>) {
    let b = probs.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::new();
    for (p, &t) in probs.iter().zip(targets) {
        loss -= t * p[1].ln() + (1.0 - t) * p[0].ln();
        grad.push([-(1.0 - t) / (b * p[0]), -t / (b * p[1])]);
    }
    (loss / b, grad)
}

#[derive(Debug, Clone)]
pub struct TensorCheck {
    pub name: String,
    /// ‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, floor).
    pub relative: f64,
    /// Largest elementwise |a − n| / max(|a|, |n|) over entries above the noise floor.
    pub worst_element: f64,
}

pub const FD_STEP: f64 = 1e-3;
const ELEMENT_FLOOR: f64 = 1e-7;

/// Central finite differences of the batch loss against the analytic gradient.
pub fn gradient_check(cfg: &ModelConfig, batch_size: usize, seed: u64, train_mode: bool) -> Vec<TensorCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let records = random_records(&mut rng, batch_size, cfg);
    let set = EncodedSet::new(&records, cfg).unwrap();
    let rows: Vec<usize> = (0..batch_size).collect();
    let targets: Vec<f64> = (0..batch_size).map(|_| rng.gen_range(0.0..1.0)).collect();
    let batch = Batch::from_encoded(&set, &rows, targets.clone()).unwrap();
    let mut state: ModelState<f64> = init_params(cfg, seed).unwrap();
    // Nonzero biases and norm parameters so every path carries signal.
    for p in state.params.iter_mut() {
        *p += rng.gen_range(-0.1..0.1);
    }
    let dropout_seed = 99;

    let (probs, cache) = forward(&state, &batch, train_mode, dropout_seed).unwrap();
    let (_, dprobs) = reference_ce(&probs, &targets);
    let grads = backward(&state, &cache, &dprobs).unwrap();

    let loss_at = |s: &ModelState<f64>| {
        let (p, _) = forward(s, &batch, train_mode, dropout_seed).unwrap();
        reference_ce(&p, &targets).0
    };
    let mut numeric = vec![0.0; state.params.len()];
    for i in 0..state.params.len() {
        let orig = state.params[i];
        state.params[i] = orig + FD_STEP;
        let up = loss_at(&state);
        state.params[i] = orig - FD_STEP;
        let down = loss_at(&state);
        state.params[i] = orig;
        numeric[i] = (up - down) / (2.0 * FD_STEP);
    }

    state
        .layout
        .tensors()
        .map(|(name, slot)| {
            let a = &grads.values[slot.range()];
            let n = &numeric[slot.range()];
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let diff: Vec<f64> = a.iter().zip(n).map(|(x, y)| x - y).collect();
            // Tensors whose true gradient is identically zero (e.g. key biases,
            // which shift every attention score equally) are compared against the floor.
            let scale = norm(a).max(norm(n)).max(ELEMENT_FLOOR);
            let relative = norm(&diff) / scale;
            let worst_element = a
                .iter()
                .zip(n)
                .filter(|(x, y)| x.abs().max(y.abs()) > ELEMENT_FLOOR)
                .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()))
                .fold(0.0, f64::max);
            TensorCheck {
                name: name.to_owned(),
                relative,
                worst_element,
            }
        })
        .collect()
}

pub fn small_config(d: usize, layers: usize, heads: usize, dropout: f64) -> ModelConfig {
    ModelConfig {
        token_dim: d,
        n_layers: layers,
        n_heads: heads,
        dropout,
        max_cdr3_len: 16,
        n_v_genes: 5,
        n_d_genes: 3,
        n_j_genes: 4,
        ..ModelConfig::cmv()
    }
}

pub struct Tiny {
    pub synth: replik::synth::SynthDataset,
    pub train: replik::data::InstanceDataset,
    pub val: Vec<replik::data::Repertoire>,
    pub test: Vec<replik::data::Repertoire>,
    pub model: ModelConfig,
}

/// A small, easy benchmark for exercising the training loop quickly.
pub fn tiny(seed: u64) -> Tiny {
    tiny_with(10, seed)
}

pub fn tiny_with(bags_per_class: usize, seed: u64) -> Tiny {
    use replik::data::{flatten_to_instances, kfold_split};
    use replik::synth::{generate, SynthConfig};
    let synth = generate(&SynthConfig {
        n_pos_bags: bags_per_class,
        n_neg_bags: bags_per_class,
        seqs_per_bag: 40,
        seq_len_min: 6,
        seq_len_max: 9,
        witness_rate_pos: 0.2,
        contamination_rate_neg: 0.02,
        seed,
        ..SynthConfig::default()
    })
    .unwrap();
    let mixed = |reps: &[replik::data::Repertoire]| {
        reps.iter().any(|r| r.label() == Some(true)) && reps.iter().any(|r| r.label() == Some(false))
    };
    let split = kfold_split(&synth.dataset.ids(), 5, seed).unwrap();
    let (train, val, test) = (0..5)
        .map(|r| {
            let roles = split.roles(r);
            (
                synth.dataset.select(&split.ids_in(&roles.train)),
                synth.dataset.select(&split.ids_in(&[roles.validation])),
                synth.dataset.select(&split.ids_in(&[roles.test])),
            )
        })
        .find(|(_, v, t)| mixed(v) && mixed(t))
        .expect("a rotation with both classes in validation and test");
    let model = ModelConfig {
        token_dim: 8,
        ..ModelConfig::cmv()
    }
    .with_vocab(&synth.dataset.vocab);
    Tiny {
        train: flatten_to_instances(&train).unwrap(),
        val,
        test,
        model,
        synth,
    }
}

pub fn tiny_train_config() -> replik::robust::TrainConfig {
    replik::robust::TrainConfig {
        alpha: 0.7,
        warmup_epochs: 2,
        max_epochs: 5,
        patience: 2,
        batch_size: 32,
        ..replik::robust::TrainConfig::bench()
    }
}

/// A small random synthetic dataset; some repertoires lose their labels.
pub fn random_dataset(rng: &mut impl Rng) -> replik::synth::SynthDataset {
    use replik::synth::{generate, SynthConfig};
    let seq_len_min = rng.gen_range(5..=8);
    let mut ds = generate(&SynthConfig {
        n_pos_bags: rng.gen_range(1..=4),
        n_neg_bags: rng.gen_range(1..=4),
        seqs_per_bag: rng.gen_range(1..=25),
        seq_len_min,
        seq_len_max: seq_len_min + rng.gen_range(0..=6),
        witness_rate_pos: rng.gen_range(0.05..0.9),
        contamination_rate_neg: 0.0,
        freq_law: rng.gen_range(0.0..2.0),
        n_v_genes: rng.gen_range(1..=6),
        n_d_genes: rng.gen_range(1..=3),
        n_j_genes: rng.gen_range(1..=4),
        seed: rng.gen(),
        ..SynthConfig::default()
    })
    .unwrap();
    for rep in ds.dataset.repertoires.iter_mut() {
        if rng.gen_bool(0.2) {
            *rep = rep.with_label(None);
        }
    }
    ds
}

/// Lines the loader must skip, each paired with nothing valid.
pub const MALFORMED_ROWS: &[&str] = &[
    "CASS*LF\tV1\t\tJ1\t0.01",
    "CASSLF\tV1\t\tJ1\t1.5",
    "CASSLF\tV1\t\tJ1\t-0.1",
    "CASSLF\tV1\t\tJ1\tabc",
    "CASSLF\tV1",
    "\tV1\t\tJ1\t0.01",
    "casslf\tV1\t\tJ1\t0.01",
];

/// Appends `k` malformed rows (and `dups` duplicated valid rows) at random
/// positions of the sequence file at `path`.
pub fn corrupt_file(rng: &mut impl Rng, path: &std::path::Path, k: usize, dups: usize) {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let valid: Vec<String> = lines[1..].to_vec();
    for _ in 0..k {
        let bad = MALFORMED_ROWS[rng.gen_range(0..MALFORMED_ROWS.len())];
        let at = rng.gen_range(1..=lines.len());
        lines.insert(at, bad.to_owned());
    }
    for _ in 0..dups {
        if valid.is_empty() {
            break;
        }
        let row = valid[rng.gen_range(0..valid.len())].clone();
        lines.push(row);
    }
    std::fs::write(path, lines.join("\n") + "\n").unwrap();
}

/// All-pairs Mann-Whitney count, the definition the fast AUC must reproduce.
pub fn brute_force_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u128, 0u128);
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1;
            twice += match si.partial_cmp(&sj).unwrap() {
                std::cmp::Ordering::Greater => 2,
                std::cmp::Ordering::Equal => 1,
                std::cmp::Ordering::Less => 0,
            };
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Scores drawn from a few levels so that ties are common.
pub fn tied_instance(rng: &mut impl Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let levels = rng.gen_range(2..40);
    let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
    labels[0] = true;
    labels[1] = false;
    let scores = labels
        .iter()
        .map(|&y| {
            let shift = if y { 3 } else { 0 };
            (rng.gen_range(0..levels) + shift) as f64 / (levels + 3) as f64
        })
        .collect();
    (scores, labels)
}


/// F1 and accuracy from an explicitly tallied confusion matrix.
pub fn confusion_f1_acc(scores: &[f64], labels: &[bool], t: f64) -> (f64, f64) {
    let mut m = std::collections::BTreeMap::new();
    for (&s, &y) in scores.iter().zip(labels) {
        *m.entry((s >= t, y)).or_insert(0usize) += 1;
    }
    let c = |k| *m.get(&k).unwrap_or(&0) as f64;
    let (tp, fp, fneg, tn) = (c((true, true)), c((true, false)), c((false, true)), c((false, false)));
    let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let recall = if tp + fneg > 0.0 { tp / (tp + fneg) } else { 0.0 };
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    (f1, (tp + tn) / scores.len() as f64)
}

