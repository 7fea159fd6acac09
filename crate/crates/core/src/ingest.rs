//! Tab-separated repertoire files, metadata, gene vocabularies and
//! known-association lists.
//!
//! On-disk layout written by [`write_repertoires`]:
//!
//! ```text
//! <dir>/manifest.json          column mapping and relative paths
//! <dir>/metadata.tsv           repertoire_id  label  file
//! <dir>/repertoires/<id>.tsv   cdr3  v_gene  d_gene  j_gene  frequency
//! <dir>/genes.json             {"v": {name: id}, "d": {...}, "j": {...}}
//! <dir>/ground_truth.tsv       instance  repertoire_id  cdr3  y   (optional)
//! ```
//!
//! All files are UTF-8, tab-delimited, `\n`-terminated, with a header row.
//! Numbers use `.` as the decimal point and no grouping separators.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    Dataset, GeneVocabs, KnownAssociationSet, KnownEntry, Repertoire, SequenceRecord,
};
use crate::error::{Error, Result};

pub const METADATA_FILE: &str = "metadata.tsv";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "genes.json";
pub const GROUND_TRUTH_FILE: &str = "ground_truth.tsv";
pub const REPERTOIRE_DIR: &str = "repertoires";

/// Column names in the per-repertoire sequence files.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnMap {
    pub cdr3: String,
    pub v_gene: String,
    /// `None` when the files carry no D gene column.
    pub d_gene: Option<String>,
    pub j_gene: String,
    pub frequency: String,
}

impl Default for ColumnMap {
    fn default() -> Self {
        Self {
            cdr3: "cdr3".into(),
            v_gene: "v_gene".into(),
            d_gene: Some("d_gene".into()),
            j_gene: "j_gene".into(),
            frequency: "frequency".into(),
        }
    }
}

impl ColumnMap {
    /// ImmuneACCESS-style exports.
    pub fn immuneaccess() -> Self {
        Self {
            cdr3: "amino_acid".into(),
            v_gene: "v_gene".into(),
            d_gene: None,
            j_gene: "j_gene".into(),
            frequency: "productive_frequency".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    /// Metadata TSV; sequence-file paths inside it are relative to its directory.
    pub metadata: PathBuf,
    #[serde(default)]
    pub columns: ColumnMap,
    #[serde(default = "default_id_column")]
    pub id_column: String,
    #[serde(default = "default_label_column")]
    pub label_column: String,
    #[serde(default = "default_file_column")]
    pub file_column: String,
    /// Gene vocabulary to start from; unseen names are appended.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
}

fn default_id_column() -> String {
    "repertoire_id".into()
}
fn default_label_column() -> String {
    "label".into()
}
fn default_file_column() -> String {
    "file".into()
}

impl DatasetManifest {
    pub fn new(metadata: impl Into<PathBuf>) -> Self {
        Self {
            metadata: metadata.into(),
            columns: ColumnMap::default(),
            id_column: default_id_column(),
            label_column: default_label_column(),
            file_column: default_file_column(),
            vocab: None,
            ground_truth: None,
        }
    }

    /// Reads a manifest. A `.json` file is parsed as a manifest (relative
    /// paths resolved against its directory); a directory is searched for
    /// `manifest.json` or `metadata.tsv`; any other file is taken to be the
    /// metadata TSV itself with default columns.
    pub fn open(path: &Path) -> Result<Self> {
        if path.is_dir() {
            let json = path.join(MANIFEST_FILE);
            if json.exists() {
                return Self::open(&json);
            }
            return Self::open(&path.join(METADATA_FILE));
        }
        if !path.exists() {
            return Err(Error::io(
                path,
                std::io::Error::new(std::io::ErrorKind::NotFound, "dataset not found"),
            ));
        }
        if path.extension().is_some_and(|e| e == "json") {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let mut m: Self =
                serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))?;
            let base = path.parent().unwrap_or(Path::new("."));
            m.metadata = base.join(&m.metadata);
            m.vocab = m.vocab.map(|p| base.join(p));
            m.ground_truth = m.ground_truth.map(|p| base.join(p));
            return Ok(m);
        }
        Ok(Self::new(path))
    }

    fn base_dir(&self) -> &Path {
        self.metadata.parent().unwrap_or(Path::new("."))
    }
}

/// Result of [`load_repertoires`]: the dataset plus a record of skipped rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadReport {
    pub dataset: Dataset,
    pub skipped_rows: usize,
    pub warnings: Vec<String>,
}

struct RawRow {
    cdr3: String,
    v: String,
    d: String,
    j: String,
    frequency: f64,
}

struct RawRepertoire {
    id: String,
    label: Option<bool>,
    rows: Vec<RawRow>,
    warnings: Vec<String>,
}

fn tsv_reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .delimiter(b'\t')
        .quoting(false)
        .flexible(true)
        .has_headers(true)
        .from_reader(file))
}

fn column(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::MissingColumn {
            column: name.to_owned(),
            path: path.to_owned(),
        })
}

pub fn parse_label(raw: &str) -> Option<Option<bool>> {
    match raw.trim() {
        "" => Some(None),
        "1" | "true" | "True" | "TRUE" | "positive" | "+" => Some(Some(true)),
        "0" | "false" | "False" | "FALSE" | "negative" | "-" => Some(Some(false)),
        _ => None,
    }
}

fn read_metadata(m: &DatasetManifest) -> Result<Vec<(String, Option<bool>, PathBuf)>> {
    let path = &m.metadata;
    let mut rdr = tsv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let id_col = column(&headers, &m.id_column, path)?;
    let label_col = column(&headers, &m.label_column, path)?;
    let file_col = column(&headers, &m.file_column, path)?;
    let mut out = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        let field = |c: usize| {
            row.get(c).ok_or_else(|| {
                Error::parse(path, format!("line {}: missing field", n + 2))
            })
        };
        let id = field(id_col)?.to_owned();
        let label = parse_label(field(label_col)?).ok_or_else(|| {
            Error::parse(path, format!("line {}: unreadable label", n + 2))
        })?;
        let file = m.base_dir().join(field(file_col)?);
        if !file.exists() {
            return Err(Error::io(
                &file,
                std::io::Error::new(std::io::ErrorKind::NotFound, "sequence file missing"),
            ));
        }
        out.push((id, label, file));
    }
    Ok(out)
}

fn read_sequence_file(
    cols: &ColumnMap,
    id: String,
    label: Option<bool>,
    path: &Path,
) -> Result<RawRepertoire> {
    let mut rdr = tsv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let c_cdr3 = column(&headers, &cols.cdr3, path)?;
    let c_v = column(&headers, &cols.v_gene, path)?;
    let c_d = cols
        .d_gene
        .as_deref()
        .map(|d| column(&headers, d, path))
        .transpose()?;
    let c_j = column(&headers, &cols.j_gene, path)?;
    let c_f = column(&headers, &cols.frequency, path)?;

    let mut rows = Vec::new();
    let mut warnings = Vec::new();
    for (n, rec) in rdr.records().enumerate() {
        let line = n + 2;
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let get = |c: usize| rec.get(c);
        let parsed = (|| {
            let cdr3 = get(c_cdr3).ok_or("missing CDR3 field")?;
            let v = get(c_v).ok_or("missing V field")?;
            let d = match c_d {
                Some(c) => get(c).ok_or("missing D field")?,
                None => "",
            };
            let j = get(c_j).ok_or("missing J field")?;
            let f: f64 = get(c_f)
                .ok_or("missing frequency field")?
                .parse()
                .map_err(|_| "unparseable frequency")?;
            if !(0.0..=1.0).contains(&f) {
                return Err("frequency outside [0, 1]");
            }
            if cdr3.is_empty() || !cdr3.bytes().all(crate::data::is_amino_acid) {
                return Err("CDR3 is not an amino-acid string");
            }
            Ok(RawRow {
                cdr3: cdr3.to_owned(),
                v: v.to_owned(),
                d: d.to_owned(),
                j: j.to_owned(),
                frequency: f,
            })
        })();
        match parsed {
            Ok(r) => rows.push(r),
            Err(why) => warnings.push(format!("{}:{line}: skipped row: {why}", path.display())),
        }
    }
    Ok(RawRepertoire {
        id,
        label,
        rows,
        warnings,
    })
}

/// Loads every repertoire listed in the manifest's metadata, interning gene
/// names into the dataset vocabulary. Invalid rows are skipped and counted.
pub fn load_repertoires(manifest: &DatasetManifest) -> Result<LoadReport> {
    let mut vocab = match &manifest.vocab {
        Some(p) => load_vocab(p)?,
        None => GeneVocabs::default(),
    };
    load_with(manifest, |names, vocab_in: &mut GeneVocabs| {
        (
            vocab_in.v.intern(names.0),
            vocab_in.d.intern(names.1),
            vocab_in.j.intern(names.2),
        )
    }, &mut vocab)
    .map(|(repertoires, skipped_rows, warnings)| LoadReport {
        dataset: Dataset { vocab, repertoires },
        skipped_rows,
        warnings,
    })
}

/// Loads repertoires against a fixed vocabulary (inference on unseen data):
/// gene names absent from `vocab` map to the missing id. Fails if the
/// dataset ships a vocabulary that contradicts `vocab`.
pub fn load_repertoires_with_vocab(
    manifest: &DatasetManifest,
    vocab: &GeneVocabs,
) -> Result<LoadReport> {
    if let Some(p) = &manifest.vocab {
        if !load_vocab(p)?.agrees_with(vocab) {
            return Err(Error::InvalidArgument(format!(
                "gene vocabulary {} assigns different ids than the model's",
                p.display()
            )));
        }
    }
    let mut fixed = vocab.clone();
    load_with(manifest, lookup_genes, &mut fixed)
    .map(|(repertoires, skipped_rows, warnings)| LoadReport {
        dataset: Dataset {
            vocab: vocab.clone(),
            repertoires,
        },
        skipped_rows,
        warnings,
    })
}

type GeneMapper = fn((&str, &str, &str), &mut GeneVocabs) -> (u16, u16, u16);

fn load_with(
    manifest: &DatasetManifest,
    map_genes: GeneMapper,
    vocab: &mut GeneVocabs,
) -> Result<(Vec<Repertoire>, usize, Vec<String>)> {
    let meta = read_metadata(manifest)?;
    let raw: Vec<RawRepertoire> = meta
        .into_par_iter()
        .map(|(id, label, file)| read_sequence_file(&manifest.columns, id, label, &file))
        .collect::<Result<_>>()?;

    let mut repertoires = Vec::with_capacity(raw.len());
    let mut warnings = Vec::new();
    for r in raw {
        let (rep, w) = build_repertoire(r, map_genes, vocab)?;
        repertoires.push(rep);
        warnings.extend(w);
    }
    let skipped = warnings.len();
    Ok((repertoires, skipped, warnings))
}

fn build_repertoire(
    r: RawRepertoire,
    map_genes: GeneMapper,
    vocab: &mut GeneVocabs,
) -> Result<(Repertoire, Vec<String>)> {
    let mut warnings = r.warnings;
    let mut seen = std::collections::HashSet::new();
    let mut records = Vec::with_capacity(r.rows.len());
    for row in r.rows {
        let (v, d, j) = map_genes((&row.v, &row.d, &row.j), vocab);
        let d = (d != crate::data::MISSING_GENE).then_some(d);
        let record = SequenceRecord::new(row.cdr3, v, d, j, row.frequency)?;
        if seen.insert((record.cdr3().to_owned(), v, d, j)) {
            records.push(record);
        } else {
            warnings.push(format!(
                "repertoire `{}`: skipped duplicate row for `{}`",
                r.id,
                record.cdr3()
            ));
        }
    }
    Ok((Repertoire::new(r.id, r.label, records)?, warnings))
}

/// Reads one unlabeled sequence file against a fixed vocabulary. Returns the
/// repertoire and one warning per skipped row.
pub fn load_sequence_file(
    path: &Path,
    columns: &ColumnMap,
    vocab: &GeneVocabs,
) -> Result<(Repertoire, Vec<String>)> {
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "repertoire".into());
    let raw = read_sequence_file(columns, id, None, path)?;
    let mut fixed = vocab.clone();
    build_repertoire(raw, lookup_genes, &mut fixed)
}

fn lookup_genes(names: (&str, &str, &str), v: &mut GeneVocabs) -> (u16, u16, u16) {
    (v.v.lookup(names.0), v.d.lookup(names.1), v.j.lookup(names.2))
}

pub fn load_vocab(path: &Path) -> Result<GeneVocabs> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

pub fn write_vocab(vocab: &GeneVocabs, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(vocab).expect("vocabulary serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Reads a known-association list: one CDR3 per line, optionally followed by
/// a tab and a V gene name. A leading header line naming the CDR3 column is
/// skipped. Duplicates collapse.
pub fn load_known_set(path: &Path) -> Result<KnownAssociationSet> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split('\t');
        let cdr3 = fields.next().unwrap_or("").trim();
        if n == 0 && matches!(cdr3, "cdr3" | "amino_acid" | "cdr3_aa") {
            continue;
        }
        if !cdr3.bytes().all(crate::data::is_amino_acid) || cdr3.is_empty() {
            return Err(Error::parse(
                path,
                format!("line {}: `{cdr3}` is not an amino-acid string", n + 1),
            ));
        }
        let v_gene = fields
            .next()
            .map(str::trim)
            .filter(|v| !v.is_empty())
            .map(str::to_owned);
        entries.push(KnownEntry {
            cdr3: cdr3.to_owned(),
            v_gene,
        });
    }
    if entries.is_empty() {
        return Err(Error::parse(path, "known-association list is empty"));
    }
    Ok(KnownAssociationSet::from_entries(entries))
}

/// Writes a known-association list readable by [`load_known_set`].
pub fn write_known_set(set: &KnownAssociationSet, path: &Path) -> Result<()> {
    let mut out = String::from("cdr3\tv_gene\n");
    for e in set.entries() {
        out.push_str(&e.cdr3);
        out.push('\t');
        out.push_str(e.v_gene.as_deref().unwrap_or(""));
        out.push('\n');
    }
    write_file(path, &out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn label_str(label: Option<bool>) -> &'static str {
    match label {
        Some(true) => "1",
        Some(false) => "0",
        None => "",
    }
}

/// Renders one repertoire in the canonical sequence-file format.
pub fn repertoire_tsv(rep: &Repertoire, vocab: &GeneVocabs) -> String {
    let mut out = String::from("cdr3\tv_gene\td_gene\tj_gene\tfrequency\n");
    for s in rep.sequences() {
        let d = s.d_gene().and_then(|d| vocab.d.name(d)).unwrap_or("");
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            s.cdr3(),
            vocab.v.name(s.v_gene()).unwrap_or(""),
            d,
            vocab.j.name(s.j_gene()).unwrap_or(""),
            s.frequency()
        ));
    }
    out
}

/// Writes a dataset (and optional per-instance ground truth) under `dir`,
/// returning the manifest that loads it back.
pub fn write_repertoires(
    dataset: &Dataset,
    ground_truth: Option<&[bool]>,
    dir: &Path,
) -> Result<DatasetManifest> {
    fs::create_dir_all(dir.join(REPERTOIRE_DIR)).map_err(|e| Error::io(dir, e))?;
    let mut meta = String::from("repertoire_id\tlabel\tfile\n");
    for rep in &dataset.repertoires {
        if rep.id().contains(['/', '\\', '\t', '\n']) {
            return Err(Error::InvalidArgument(format!(
                "repertoire id `{}` is not usable as a file name",
                rep.id()
            )));
        }
        let rel = format!("{REPERTOIRE_DIR}/{}.tsv", rep.id());
        write_file(&dir.join(&rel), &repertoire_tsv(rep, &dataset.vocab))?;
        meta.push_str(&format!("{}\t{}\t{rel}\n", rep.id(), label_str(rep.label())));
    }
    write_file(&dir.join(METADATA_FILE), &meta)?;
    write_vocab(&dataset.vocab, &dir.join(VOCAB_FILE))?;

    let mut manifest = DatasetManifest::new(METADATA_FILE);
    manifest.vocab = Some(VOCAB_FILE.into());
    if let Some(truth) = ground_truth {
        let n = dataset.n_sequences();
        if truth.len() != n {
            return Err(Error::Shape(format!(
                "{} ground-truth labels for {n} sequences",
                truth.len()
            )));
        }
        let mut out = String::from("instance\trepertoire_id\tcdr3\ty\n");
        let seqs = dataset
            .repertoires
            .iter()
            .flat_map(|r| r.sequences().iter().map(move |s| (r.id(), s)));
        for (i, ((rid, s), y)) in seqs.zip(truth).enumerate() {
            out.push_str(&format!("{i}\t{rid}\t{}\t{}\n", s.cdr3(), u8::from(*y)));
        }
        write_file(&dir.join(GROUND_TRUTH_FILE), &out)?;
        manifest.ground_truth = Some(GROUND_TRUTH_FILE.into());
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write_file(&dir.join(MANIFEST_FILE), &(json + "\n"))?;

    let mut resolved = manifest;
    resolved.metadata = dir.join(METADATA_FILE);
    resolved.vocab = resolved.vocab.map(|p| dir.join(p));
    resolved.ground_truth = resolved.ground_truth.map(|p| dir.join(p));
    Ok(resolved)
}

/// Reads a ground-truth sidecar into a vector indexed by instance key.
pub fn load_ground_truth(path: &Path) -> Result<Vec<bool>> {
    let mut rdr = tsv_reader(path)?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::parse(path, e.to_string()))?
        .clone();
    let c_i = column(&headers, "instance", path)?;
    let c_y = column(&headers, "y", path)?;
    let mut out = Vec::new();
    for (n, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| Error::parse(path, e.to_string()))?;
        let bad = || Error::parse(path, format!("line {}: malformed row", n + 2));
        let i: usize = row.get(c_i).and_then(|s| s.parse().ok()).ok_or_else(bad)?;
        if i != out.len() {
            return Err(Error::parse(path, format!("line {}: instance keys must be dense", n + 2)));
        }
        match row.get(c_y) {
            Some("1") => out.push(true),
            Some("0") => out.push(false),
            _ => return Err(bad()),
        }
    }
    Ok(out)
}
