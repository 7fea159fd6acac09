//! Seeded synthetic repertoire benchmark with hidden sequence-level truth.
//!
//! Background CDR3s are i.i.d. uniform residues. A sequence is
//! disease-associated iff it contains one of the configured motifs; positive
//! bags carry associated sequences at the witness rate, negative bags at the
//! (smaller) contamination rate. Clone frequencies follow a rank power law.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    Dataset, GeneVocabs, KnownAssociationSet, Repertoire, SequenceRecord, AMINO_ACIDS,
};
use crate::error::{Error, Result};
use crate::kv::{self, KvConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_pos_bags: usize,
    pub n_neg_bags: usize,
    pub seqs_per_bag: usize,
    pub seq_len_min: usize,
    pub seq_len_max: usize,
    pub motifs: Vec<String>,
    pub witness_rate_pos: f64,
    pub contamination_rate_neg: f64,
    /// Exponent of the rank power law for clone sizes (0 gives uniform frequencies).
    pub freq_law: f64,
    /// Clone-size multiplier for associated sequences in positive bags.
    pub assoc_freq_multiplier: f64,
    pub n_v_genes: usize,
    pub n_d_genes: usize,
    pub n_j_genes: usize,
    /// Give associated sequences V gene 1 instead of a uniform draw.
    pub correlate_v_gene: bool,
    /// Motifs implanted into non-associated sequences of negative bags.
    pub control_motifs: Vec<String>,
    pub control_rate_neg: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_pos_bags: 100,
            n_neg_bags: 100,
            seqs_per_bag: 200,
            seq_len_min: 8,
            seq_len_max: 12,
            motifs: vec!["WHCM".into()],
            witness_rate_pos: 0.04,
            contamination_rate_neg: 0.005,
            freq_law: 1.0,
            assoc_freq_multiplier: 1.0,
            n_v_genes: 24,
            n_d_genes: 2,
            n_j_genes: 13,
            correlate_v_gene: false,
            control_motifs: Vec::new(),
            control_rate_neg: 0.0,
            seed: 0,
        }
    }
}

fn check_motif(m: &str, min_len: usize, what: &str) -> Result<()> {
    if !(3..=5).contains(&m.len()) {
        return Err(Error::InvalidConfig(format!(
            "{what} `{m}` must have length 3 to 5"
        )));
    }
    if !m.bytes().all(crate::data::is_amino_acid) {
        return Err(Error::InvalidConfig(format!(
            "{what} `{m}` contains a non amino-acid character"
        )));
    }
    if m.len() > min_len {
        return Err(Error::InvalidConfig(format!(
            "{what} `{m}` is longer than the minimum sequence length {min_len}"
        )));
    }
    Ok(())
}

impl SynthConfig {
    /// The default configuration with uniform clone sizes; the reference
    /// end-to-end benchmark.
    pub fn benchmark() -> Self {
        Self {
            freq_law: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.n_pos_bags == 0 || self.n_neg_bags == 0 {
            return bad("need at least one positive and one negative bag".into());
        }
        if self.seqs_per_bag == 0 {
            return bad("seqs_per_bag must be positive".into());
        }
        if self.seq_len_min == 0 || self.seq_len_min > self.seq_len_max {
            return bad(format!(
                "invalid sequence length range {}..={}",
                self.seq_len_min, self.seq_len_max
            ));
        }
        if self.motifs.is_empty() {
            return bad("at least one motif is required".into());
        }
        for m in &self.motifs {
            check_motif(m, self.seq_len_min, "motif")?;
        }
        for m in &self.control_motifs {
            check_motif(m, self.seq_len_min, "control motif")?;
        }
        if !(self.witness_rate_pos > 0.0 && self.witness_rate_pos <= 1.0) {
            return bad(format!(
                "witness_rate_pos must be in (0, 1], got {}",
                self.witness_rate_pos
            ));
        }
        if !(0.0..1.0).contains(&self.contamination_rate_neg)
            || self.contamination_rate_neg >= self.witness_rate_pos
        {
            return bad(format!(
                "contamination_rate_neg must be in [0, witness_rate_pos), got {}",
                self.contamination_rate_neg
            ));
        }
        if !(0.0..=1.0).contains(&self.control_rate_neg) {
            return bad("control_rate_neg must be in [0, 1]".into());
        }
        if self.control_rate_neg > 0.0 && self.control_motifs.is_empty() {
            return bad("control_rate_neg > 0 requires control_motifs".into());
        }
        if !(self.freq_law >= 0.0 && self.freq_law.is_finite()) {
            return bad("freq_law must be a finite nonnegative exponent".into());
        }
        if !(self.assoc_freq_multiplier > 0.0 && self.assoc_freq_multiplier.is_finite()) {
            return bad("assoc_freq_multiplier must be positive".into());
        }
        if self.n_v_genes == 0 || self.n_j_genes == 0 {
            return bad("need at least one V and one J gene".into());
        }
        Ok(())
    }

    /// Number of distinct CDR3 strings available, used to refuse impossible configs.
    fn sequence_space(&self) -> f64 {
        (self.seq_len_min..=self.seq_len_max)
            .map(|l| 20f64.powi(l as i32))
            .sum()
    }
}

impl KvConfig for SynthConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "n_pos_bags" => self.n_pos_bags = kv::value(key, v)?,
            "n_neg_bags" => self.n_neg_bags = kv::value(key, v)?,
            "seqs_per_bag" => self.seqs_per_bag = kv::value(key, v)?,
            "seq_len_min" => self.seq_len_min = kv::value(key, v)?,
            "seq_len_max" => self.seq_len_max = kv::value(key, v)?,
            "motifs" => self.motifs = kv::list(v),
            "witness_rate_pos" => self.witness_rate_pos = kv::value(key, v)?,
            "contamination_rate_neg" => self.contamination_rate_neg = kv::value(key, v)?,
            "freq_law" => self.freq_law = kv::value(key, v)?,
            "assoc_freq_multiplier" => self.assoc_freq_multiplier = kv::value(key, v)?,
            "n_v_genes" => self.n_v_genes = kv::value(key, v)?,
            "n_d_genes" => self.n_d_genes = kv::value(key, v)?,
            "n_j_genes" => self.n_j_genes = kv::value(key, v)?,
            "correlate_v_gene" => self.correlate_v_gene = kv::value(key, v)?,
            "control_motifs" => self.control_motifs = kv::list(v),
            "control_rate_neg" => self.control_rate_neg = kv::value(key, v)?,
            "seed" => self.seed = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        let p = |k: &str, v: String| (k.to_owned(), v);
        vec![
            p("n_pos_bags", self.n_pos_bags.to_string()),
            p("n_neg_bags", self.n_neg_bags.to_string()),
            p("seqs_per_bag", self.seqs_per_bag.to_string()),
            p("seq_len_min", self.seq_len_min.to_string()),
            p("seq_len_max", self.seq_len_max.to_string()),
            p("motifs", self.motifs.join(",")),
            p("witness_rate_pos", self.witness_rate_pos.to_string()),
            p("contamination_rate_neg", self.contamination_rate_neg.to_string()),
            p("freq_law", self.freq_law.to_string()),
            p("assoc_freq_multiplier", self.assoc_freq_multiplier.to_string()),
            p("n_v_genes", self.n_v_genes.to_string()),
            p("n_d_genes", self.n_d_genes.to_string()),
            p("n_j_genes", self.n_j_genes.to_string()),
            p("correlate_v_gene", self.correlate_v_gene.to_string()),
            p("control_motifs", self.control_motifs.join(",")),
            p("control_rate_neg", self.control_rate_neg.to_string()),
            p("seed", self.seed.to_string()),
        ]
    }
}

/// Generated repertoires plus ground truth indexed in flattened instance order
/// (bag order, then sequence order within the bag).
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub dataset: Dataset,
    pub ground_truth: Vec<bool>,
    pub motifs: Vec<String>,
}

impl SynthDataset {
    /// The CDR3s of all associated sequences, for evaluation.
    pub fn known_set(&self) -> KnownAssociationSet {
        let cdr3s = self
            .dataset
            .repertoires
            .iter()
            .flat_map(|r| r.sequences())
            .zip(&self.ground_truth)
            .filter(|(_, &y)| y)
            .map(|(s, _)| s.cdr3().to_owned());
        KnownAssociationSet::from_cdr3s(cdr3s)
    }
}

pub fn contains_motif(cdr3: &str, motifs: &[String]) -> bool {
    motifs.iter().any(|m| cdr3.contains(m.as_str()))
}

fn random_residues(rng: &mut ChaCha8Rng, len: usize) -> Vec<u8> {
    (0..len)
        .map(|_| AMINO_ACIDS[rng.gen_range(0..AMINO_ACIDS.len())])
        .collect()
}

fn implant(rng: &mut ChaCha8Rng, seq: &mut [u8], motifs: &[String]) {
    let motif = motifs[rng.gen_range(0..motifs.len())].as_bytes();
    let offset = rng.gen_range(0..=seq.len() - motif.len());
    seq[offset..offset + motif.len()].copy_from_slice(motif);
}

pub fn bag_id(positive: bool, index: usize) -> String {
    if positive {
        format!("pos{index:04}")
    } else {
        format!("neg{index:04}")
    }
}

pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    if config.sequence_space() < 4.0 * config.seqs_per_bag as f64 {
        return Err(Error::InvalidConfig(
            "sequence length range too small for the requested bag size".into(),
        ));
    }
    let mut vocab = GeneVocabs::default();
    for i in 1..=config.n_v_genes {
        vocab.v.intern(&format!("TCRBV{i:02}"));
    }
    for i in 1..=config.n_d_genes {
        vocab.d.intern(&format!("TCRBD{i:02}"));
    }
    for i in 1..=config.n_j_genes {
        vocab.j.intern(&format!("TCRBJ{i:02}"));
    }

    let n_bags = config.n_pos_bags + config.n_neg_bags;
    let mut repertoires = Vec::with_capacity(n_bags);
    let mut ground_truth = Vec::with_capacity(n_bags * config.seqs_per_bag);
    for bag in 0..n_bags {
        let positive = bag < config.n_pos_bags;
        let local = if positive { bag } else { bag - config.n_pos_bags };
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(bag as u64);
        let (rep, truth) = generate_bag(config, &mut rng, bag_id(positive, local), positive)?;
        repertoires.push(rep);
        ground_truth.extend(truth);
    }
    Ok(SynthDataset {
        dataset: Dataset {
            vocab,
            repertoires,
        },
        ground_truth,
        motifs: config.motifs.clone(),
    })
}

fn generate_bag(
    config: &SynthConfig,
    rng: &mut ChaCha8Rng,
    id: String,
    positive: bool,
) -> Result<(Repertoire, Vec<bool>)> {
    let rate = if positive {
        config.witness_rate_pos
    } else {
        config.contamination_rate_neg
    };
    let m = config.seqs_per_bag;
    let mut seen = std::collections::HashSet::with_capacity(m);
    let mut drafts = Vec::with_capacity(m);
    while drafts.len() < m {
        let associated = rng.gen_bool(rate);
        let len = rng.gen_range(config.seq_len_min..=config.seq_len_max);
        let mut seq = random_residues(rng, len);
        if associated {
            implant(rng, &mut seq, &config.motifs);
        } else if !positive && config.control_rate_neg > 0.0 && rng.gen_bool(config.control_rate_neg)
        {
            implant(rng, &mut seq, &config.control_motifs);
        }
        let cdr3 = String::from_utf8(seq).expect("ascii residues");
        let v = if associated && config.correlate_v_gene {
            1
        } else {
            rng.gen_range(1..=config.n_v_genes) as u16
        };
        let d = (config.n_d_genes > 0).then(|| rng.gen_range(1..=config.n_d_genes) as u16);
        let j = rng.gen_range(1..=config.n_j_genes) as u16;
        if seen.insert((cdr3.clone(), v, d, j)) {
            drafts.push((cdr3, v, d, j, associated));
        }
    }

    let mut ranks: Vec<usize> = (1..=m).collect();
    ranks.shuffle(rng);
    let sizes: Vec<f64> = drafts
        .iter()
        .zip(&ranks)
        .map(|(d, &r)| {
            let base = (r as f64).powf(-config.freq_law);
            if positive && d.4 {
                base * config.assoc_freq_multiplier
            } else {
                base
            }
        })
        .collect();
    let total: f64 = sizes.iter().sum();

    let mut records = Vec::with_capacity(m);
    let mut truth = Vec::with_capacity(m);
    for ((cdr3, v, d, j, _), size) in drafts.into_iter().zip(sizes) {
        truth.push(contains_motif(&cdr3, &config.motifs));
        records.push(SequenceRecord::new(cdr3, v, d, j, size / total)?);
    }
    Ok((Repertoire::new(id, Some(positive), records)?, truth))
}

/// Counts of label noise after copying bag labels onto sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseProfile {
    pub n_instances: usize,
    /// Noisy label 1, true label 0.
    pub false_positives: usize,
    /// Noisy label 0, true label 1.
    pub false_negatives: usize,
    pub true_positives: usize,
    pub true_negatives: usize,
}

pub fn noise_profile(ds: &SynthDataset) -> Result<NoiseProfile> {
    let instances = crate::data::flatten_to_instances(&ds.dataset.repertoires)?;
    if instances.len() != ds.ground_truth.len() {
        return Err(Error::Shape(format!(
            "{} instances but {} ground-truth labels",
            instances.len(),
            ds.ground_truth.len()
        )));
    }
    let mut p = NoiseProfile {
        n_instances: instances.len(),
        false_positives: 0,
        false_negatives: 0,
        true_positives: 0,
        true_negatives: 0,
    };
    for (inst, &y) in instances.instances().iter().zip(&ds.ground_truth) {
        match (inst.noisy_label, y) {
            (true, false) => p.false_positives += 1,
            (false, true) => p.false_negatives += 1,
            (true, true) => p.true_positives += 1,
            (false, false) => p.true_negatives += 1,
        }
    }
    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            n_pos_bags: 6,
            n_neg_bags: 5,
            seqs_per_bag: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn ground_truth_is_motif_membership() {
        let ds = generate(&small()).unwrap();
        let seqs: Vec<&SequenceRecord> =
            ds.dataset.repertoires.iter().flat_map(|r| r.sequences()).collect();
        assert_eq!(seqs.len(), ds.ground_truth.len());
        for (s, &y) in seqs.iter().zip(&ds.ground_truth) {
            assert_eq!(contains_motif(s.cdr3(), &ds.motifs), y);
        }
    }

    #[test]
    fn frequencies_normalized() {
        let ds = generate(&small()).unwrap();
        for r in &ds.dataset.repertoires {
            assert!((r.total_frequency() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&small()).unwrap();
        let b = generate(&small()).unwrap();
        assert_eq!(a, b);
        let c = generate(&SynthConfig { seed: 1, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_contamination_means_clean_negatives() {
        let cfg = SynthConfig {
            contamination_rate_neg: 0.0,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let p = noise_profile(&ds).unwrap();
        assert_eq!(p.false_negatives, 0);
    }

    #[test]
    fn noiseless_corner() {
        let cfg = SynthConfig {
            witness_rate_pos: 1.0,
            contamination_rate_neg: 0.0,
            ..small()
        };
        let p = noise_profile(&generate(&cfg).unwrap()).unwrap();
        assert_eq!(p.false_positives, 0);
        assert_eq!(p.false_negatives, 0);
    }

    #[test]
    fn rejects_bad_configs() {
        let long = SynthConfig {
            motifs: vec!["WHCMW".into()],
            seq_len_min: 4,
            seq_len_max: 8,
            ..small()
        };
        assert!(matches!(generate(&long), Err(Error::InvalidConfig(_))));
        let no_witness = SynthConfig {
            witness_rate_pos: 0.0,
            contamination_rate_neg: 0.0,
            ..small()
        };
        assert!(generate(&no_witness).is_err());
        let inverted = SynthConfig {
            witness_rate_pos: 0.01,
            contamination_rate_neg: 0.02,
            ..small()
        };
        assert!(generate(&inverted).is_err());
        assert!(generate(&SynthConfig { motifs: vec![], ..small() }).is_err());
    }

    #[test]
    fn correlated_v_gene() {
        let cfg = SynthConfig {
            correlate_v_gene: true,
            witness_rate_pos: 0.5,
            ..small()
        };
        let ds = generate(&cfg).unwrap();
        let seqs = ds.dataset.repertoires.iter().flat_map(|r| r.sequences());
        let (mut on_v1, mut assoc) = (0, 0);
        for (s, &y) in seqs.zip(&ds.ground_truth) {
            if y {
                assoc += 1;
                on_v1 += usize::from(s.v_gene() == 1);
            }
        }
        // chance motif occurrences in backgrounds keep a random V gene
        assert!(on_v1 as f64 > 0.95 * assoc as f64);
    }

    #[test]
    fn kv_round_trip() {
        let cfg = SynthConfig {
            motifs: vec!["WHC".into(), "KRM".into()],
            seed: 17,
            ..SynthConfig::default()
        };
        let mut back = SynthConfig::default();
        for (k, v) in cfg.to_pairs() {
            back.set(&k, &v).unwrap();
        }
        assert_eq!(back, cfg);
        assert!(back.set("bogus", "1").is_err());
    }
}
