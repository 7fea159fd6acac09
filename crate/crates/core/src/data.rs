//! Domain types shared by every stage: sequences, repertoires, the flattened
//! instance view used for training, fold splits and the evaluation-only set
//! of known disease-associated sequences.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The 20 standard amino acids, in the order used for token ids `1..=20`.
pub const AMINO_ACIDS: &[u8; 20] = b"ACDEFGHIKLMNPQRSTVWY";

/// Gene id reserved for absent or unknown gene calls.
pub const MISSING_GENE: u16 = 0;

pub fn is_amino_acid(c: u8) -> bool {
    AMINO_ACIDS.contains(&c)
}

/// One T-cell receptor: CDR3 amino-acid string, V/D/J gene ids and the clone's
/// productive frequency within its repertoire.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceRecord {
    cdr3: String,
    v_gene: u16,
    d_gene: Option<u16>,
    j_gene: u16,
    frequency: f64,
}

impl SequenceRecord {
    pub fn new(
        cdr3: impl Into<String>,
        v_gene: u16,
        d_gene: Option<u16>,
        j_gene: u16,
        frequency: f64,
    ) -> Result<Self> {
        let cdr3 = cdr3.into();
        if cdr3.is_empty() {
            return Err(Error::InvalidRecord("empty CDR3".into()));
        }
        if let Some(bad) = cdr3.bytes().find(|c| !is_amino_acid(*c)) {
            return Err(Error::InvalidRecord(format!(
                "CDR3 `{cdr3}` contains non amino-acid character `{}`",
                bad as char
            )));
        }
        if !(0.0..=1.0).contains(&frequency) {
            return Err(Error::InvalidRecord(format!(
                "frequency {frequency} outside [0, 1] for `{cdr3}`"
            )));
        }
        Ok(Self {
            cdr3,
            v_gene,
            d_gene,
            j_gene,
            frequency,
        })
    }

    pub fn cdr3(&self) -> &str {
        &self.cdr3
    }

    pub fn v_gene(&self) -> u16 {
        self.v_gene
    }

    pub fn d_gene(&self) -> Option<u16> {
        self.d_gene
    }

    /// D gene id with absence mapped onto [`MISSING_GENE`].
    pub fn d_gene_id(&self) -> u16 {
        self.d_gene.unwrap_or(MISSING_GENE)
    }

    pub fn j_gene(&self) -> u16 {
        self.j_gene
    }

    pub fn frequency(&self) -> f64 {
        self.frequency
    }

    pub(crate) fn with_frequency(&self, frequency: f64) -> Self {
        Self {
            frequency,
            ..self.clone()
        }
    }

    /// Checks gene ids against vocabulary sizes (each size counts the missing row).
    pub fn check_genes(&self, vocab: &GeneVocabs) -> Result<()> {
        let check = |id: u16, size: usize, kind: &str| {
            if usize::from(id) >= size {
                Err(Error::InvalidRecord(format!(
                    "{kind} gene id {id} outside vocabulary of size {size}"
                )))
            } else {
                Ok(())
            }
        };
        check(self.v_gene, vocab.v.len(), "V")?;
        check(self.d_gene_id(), vocab.d.len(), "D")?;
        check(self.j_gene, vocab.j.len(), "J")
    }

    fn key(&self) -> (&str, u16, Option<u16>, u16) {
        (&self.cdr3, self.v_gene, self.d_gene, self.j_gene)
    }
}

/// A labeled bag of sequences from one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Repertoire {
    id: String,
    label: Option<bool>,
    sequences: Vec<SequenceRecord>,
}

impl Repertoire {
    pub fn new(
        id: impl Into<String>,
        label: Option<bool>,
        sequences: Vec<SequenceRecord>,
    ) -> Result<Self> {
        let id = id.into();
        let invalid = |reason: String| Error::InvalidRepertoire {
            id: id.clone(),
            reason,
        };
        if sequences.is_empty() {
            return Err(invalid("no sequences".into()));
        }
        let total: f64 = sequences.iter().map(|s| s.frequency).sum();
        if total > 1.0 + 1e-6 {
            return Err(invalid(format!("frequencies sum to {total} > 1")));
        }
        let mut seen = HashSet::with_capacity(sequences.len());
        for s in &sequences {
            if !seen.insert(s.key()) {
                return Err(invalid(format!("duplicate row for CDR3 `{}`", s.cdr3)));
            }
        }
        Ok(Self {
            id,
            label,
            sequences,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn label(&self) -> Option<bool> {
        self.label
    }

    pub fn sequences(&self) -> &[SequenceRecord] {
        &self.sequences
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_frequency(&self) -> f64 {
        self.sequences.iter().map(|s| s.frequency).sum()
    }

    /// Same repertoire with a different label; used by evaluation audits.
    pub fn with_label(&self, label: Option<bool>) -> Self {
        Self {
            label,
            ..self.clone()
        }
    }
}

/// Name ↔ id table for one gene segment. Id 0 is the missing/unknown row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GeneVocab {
    names: Vec<String>,
    ids: HashMap<String, u16>,
}

impl Default for GeneVocab {
    fn default() -> Self {
        Self {
            names: vec![String::new()],
            ids: HashMap::new(),
        }
    }
}

impl GeneVocab {
    /// Interns `name`, returning its id. Empty names map to the missing id.
    pub fn intern(&mut self, name: &str) -> u16 {
        if name.is_empty() {
            return MISSING_GENE;
        }
        if let Some(&id) = self.ids.get(name) {
            return id;
        }
        let id = u16::try_from(self.names.len()).expect("gene vocabulary overflow");
        self.names.push(name.to_owned());
        self.ids.insert(name.to_owned(), id);
        id
    }

    /// Looks up `name` without growing the table; unknown names map to missing.
    pub fn lookup(&self, name: &str) -> u16 {
        self.ids.get(name).copied().unwrap_or(MISSING_GENE)
    }

    pub fn name(&self, id: u16) -> Option<&str> {
        match id {
            MISSING_GENE => None,
            _ => self.names.get(usize::from(id)).map(String::as_str),
        }
    }

    /// Number of rows, including the missing row.
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.len() <= 1
    }

    /// Whether every name present in both tables has the same id.
    pub fn agrees_with(&self, other: &GeneVocab) -> bool {
        self.ids
            .iter()
            .all(|(name, id)| other.ids.get(name).is_none_or(|o| o == id))
    }

    pub fn to_map(&self) -> BTreeMap<String, u16> {
        self.ids.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn from_map(map: &BTreeMap<String, u16>) -> Result<Self> {
        let mut names = vec![String::new(); map.len() + 1];
        for (name, &id) in map {
            let slot = names.get_mut(usize::from(id)).filter(|_| id != MISSING_GENE);
            match slot {
                Some(s) if s.is_empty() => *s = name.clone(),
                _ => {
                    return Err(Error::InvalidConfig(format!(
                        "gene vocabulary ids must be dense 1..=n, got `{name}` -> {id}"
                    )))
                }
            }
        }
        if names.iter().skip(1).any(String::is_empty) {
            return Err(Error::InvalidConfig("gene vocabulary has gaps".into()));
        }
        let ids = map.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Self { names, ids })
    }
}

impl Serialize for GeneVocab {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_map().serialize(s)
    }
}

impl<'de> Deserialize<'de> for GeneVocab {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let map = BTreeMap::<String, u16>::deserialize(d)?;
        GeneVocab::from_map(&map).map_err(serde::de::Error::custom)
    }
}

/// Vocabularies for the three gene segments.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneVocabs {
    pub v: GeneVocab,
    pub d: GeneVocab,
    pub j: GeneVocab,
}

impl GeneVocabs {
    pub fn agrees_with(&self, other: &GeneVocabs) -> bool {
        self.v.agrees_with(&other.v) && self.d.agrees_with(&other.d) && self.j.agrees_with(&other.j)
    }
}

/// Repertoires together with the gene vocabulary their ids refer to.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub vocab: GeneVocabs,
    pub repertoires: Vec<Repertoire>,
}

impl Dataset {
    pub fn n_sequences(&self) -> usize {
        self.repertoires.iter().map(Repertoire::len).sum()
    }

    /// Repertoires whose ids are in `ids`, in dataset order.
    pub fn select(&self, ids: &[String]) -> Vec<Repertoire> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        self.repertoires
            .iter()
            .filter(|r| wanted.contains(r.id()))
            .cloned()
            .collect()
    }

    pub fn ids(&self) -> Vec<String> {
        self.repertoires.iter().map(|r| r.id.clone()).collect()
    }
}

/// One training instance: a sequence carrying its bag's label.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub index: usize,
    pub record: SequenceRecord,
    pub noisy_label: bool,
    pub bag_id: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct InstanceDataset {
    instances: Vec<Instance>,
}

impl InstanceDataset {
    pub fn instances(&self) -> &[Instance] {
        &self.instances
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn noisy_labels(&self) -> Vec<bool> {
        self.instances.iter().map(|i| i.noisy_label).collect()
    }

    pub fn records(&self) -> impl Iterator<Item = &SequenceRecord> {
        self.instances.iter().map(|i| &i.record)
    }
}

/// Copies every repertoire's label onto each of its sequences.
pub fn flatten_to_instances(repertoires: &[Repertoire]) -> Result<InstanceDataset> {
    let mut instances = Vec::with_capacity(repertoires.iter().map(Repertoire::len).sum());
    for rep in repertoires {
        let label = rep.label.ok_or_else(|| Error::MissingLabel(rep.id.clone()))?;
        if rep.sequences.is_empty() {
            return Err(Error::InvalidRepertoire {
                id: rep.id.clone(),
                reason: "no sequences".into(),
            });
        }
        for record in &rep.sequences {
            instances.push(Instance {
                index: instances.len(),
                record: record.clone(),
                noisy_label: label,
                bag_id: rep.id.clone(),
            });
        }
    }
    Ok(InstanceDataset { instances })
}

/// Which folds play which role in one cross-validation rotation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldRoles {
    pub train: Vec<usize>,
    pub validation: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldSplit {
    k: usize,
    assignment: BTreeMap<String, usize>,
    order: Vec<String>,
}

impl FoldSplit {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<String, usize> {
        &self.assignment
    }

    /// Members of each fold, in input order.
    pub fn folds(&self) -> Vec<Vec<String>> {
        let mut folds = vec![Vec::new(); self.k];
        for id in &self.order {
            folds[self.assignment[id]].push(id.clone());
        }
        folds
    }

    /// Rotation `r`: fold `r` is the test fold, `r + 1` validation, the rest train.
    pub fn roles(&self, rotation: usize) -> FoldRoles {
        let test = rotation % self.k;
        let validation = (rotation + 1) % self.k;
        let train = (0..self.k)
            .filter(|f| *f != test && *f != validation)
            .collect();
        FoldRoles {
            train,
            validation,
            test,
        }
    }

    pub fn ids_in(&self, folds: &[usize]) -> Vec<String> {
        self.order
            .iter()
            .filter(|id| folds.contains(&self.assignment[*id]))
            .cloned()
            .collect()
    }
}

/// Seeded, balanced assignment of repertoire ids to `k` folds.
pub fn kfold_split(repertoire_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k must be at least 2, got {k}")));
    }
    if k > repertoire_ids.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the number of repertoires ({})",
            repertoire_ids.len()
        )));
    }
    let mut seen = HashSet::new();
    if let Some(dup) = repertoire_ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::InvalidArgument(format!("duplicate repertoire id `{dup}`")));
    }
    let mut shuffled: Vec<&String> = repertoire_ids.iter().collect();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let assignment = shuffled
        .into_iter()
        .enumerate()
        .map(|(pos, id)| (id.clone(), pos % k))
        .collect();
    Ok(FoldSplit {
        k,
        assignment,
        order: repertoire_ids.to_vec(),
    })
}

/// Keeps the `max(1, floor(fraction * M))` most frequent sequences.
///
/// Ties are broken by lexicographic CDR3; retained sequences keep their
/// original order and frequencies are left as-is.
pub fn subsample_top_frequency(rep: &Repertoire, fraction: f64) -> Result<Repertoire> {
    subsample_top_frequency_with(rep, fraction, false)
}

/// As [`subsample_top_frequency`], optionally rescaling kept frequencies to sum to 1.
pub fn subsample_top_frequency_with(
    rep: &Repertoire,
    fraction: f64,
    renormalize: bool,
) -> Result<Repertoire> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "sub-sample fraction must be in (0, 1], got {fraction}"
        )));
    }
    if rep.sequences.is_empty() {
        return Err(Error::InvalidRepertoire {
            id: rep.id.clone(),
            reason: "no sequences".into(),
        });
    }
    let m = rep.sequences.len();
    let keep = ((fraction * m as f64).floor() as usize).clamp(1, m);
    let mut ranked: Vec<usize> = (0..m).collect();
    ranked.sort_by(|&a, &b| {
        let (sa, sb) = (&rep.sequences[a], &rep.sequences[b]);
        sb.frequency
            .total_cmp(&sa.frequency)
            .then_with(|| sa.cdr3.cmp(&sb.cdr3))
            .then(a.cmp(&b))
    });
    let mut kept = ranked[..keep].to_vec();
    kept.sort_unstable();
    let mut sequences: Vec<SequenceRecord> =
        kept.into_iter().map(|i| rep.sequences[i].clone()).collect();
    if renormalize {
        let total: f64 = sequences.iter().map(|s| s.frequency).sum();
        if total > 0.0 {
            sequences = sequences
                .iter()
                .map(|s| s.with_frequency(s.frequency / total))
                .collect();
        }
    }
    Repertoire::new(rep.id.clone(), rep.label, sequences)
}

/// How a sequence is matched against the known-association set.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKey {
    #[default]
    Cdr3,
    Cdr3AndV,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct KnownEntry {
    pub cdr3: String,
    pub v_gene: Option<String>,
}

/// Sequences known to be disease-associated. Consumed only by evaluation.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnownAssociationSet {
    entries: BTreeSet<KnownEntry>,
    cdr3s: HashSet<String>,
}

impl KnownAssociationSet {
    pub fn from_entries(entries: impl IntoIterator<Item = KnownEntry>) -> Self {
        let entries: BTreeSet<KnownEntry> = entries.into_iter().collect();
        let cdr3s = entries.iter().map(|e| e.cdr3.clone()).collect();
        Self { entries, cdr3s }
    }

    pub fn from_cdr3s<S: Into<String>>(cdr3s: impl IntoIterator<Item = S>) -> Self {
        Self::from_entries(cdr3s.into_iter().map(|c| KnownEntry {
            cdr3: c.into(),
            v_gene: None,
        }))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl Iterator<Item = &KnownEntry> {
        self.entries.iter()
    }

    /// Whether `record` is in the set. With [`MatchKey::Cdr3AndV`], entries
    /// without a V gene match on CDR3 alone.
    pub fn matches(&self, record: &SequenceRecord, vocab: &GeneVocabs, key: MatchKey) -> bool {
        if !self.cdr3s.contains(record.cdr3()) {
            return false;
        }
        match key {
            MatchKey::Cdr3 => true,
            MatchKey::Cdr3AndV => {
                let v = vocab.v.name(record.v_gene()).map(str::to_owned);
                self.entries
                    .range(
                        KnownEntry {
                            cdr3: record.cdr3().to_owned(),
                            v_gene: None,
                        }..,
                    )
                    .take_while(|e| e.cdr3 == record.cdr3())
                    .any(|e| e.v_gene.is_none() || e.v_gene == v)
            }
        }
    }
}
