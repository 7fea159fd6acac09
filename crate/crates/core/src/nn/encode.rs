use crate::data::{SequenceRecord, AMINO_ACIDS};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ModelConfig;

/// Residue tokens `1..=20` plus padding.
pub const AA_VOCAB: usize = 21;
pub const PAD: u8 = 0;

fn residue_token(c: u8) -> Option<u8> {
    AMINO_ACIDS.iter().position(|&a| a == c).map(|i| i as u8 + 1)
}

pub fn encode_cdr3(cdr3: &str) -> Result<Vec<u8>> {
    cdr3.bytes()
        .map(|c| {
            residue_token(c).ok_or_else(|| {
                Error::ModelInput(format!(
                    "unknown amino-acid character `{}` in `{cdr3}`",
                    c as char
                ))
            })
        })
        .collect()
}

/// Pre-tokenized instances for repeated passes over the same data.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct EncodedSet {
    tokens: Vec<u8>,
    offsets: Vec<usize>,
    pub(crate) v: Vec<u16>,
    pub(crate) d: Vec<u16>,
    pub(crate) j: Vec<u16>,
}

impl EncodedSet {
    pub fn new<'a>(
        records: impl IntoIterator<Item = &'a SequenceRecord>,
        config: &ModelConfig,
    ) -> Result<Self> {
        let mut set = Self {
            offsets: vec![0],
            ..Self::default()
        };
        for r in records {
            let toks = encode_cdr3(r.cdr3())?;
            if toks.len() > config.max_cdr3_len {
                return Err(Error::ModelInput(format!(
                    "CDR3 `{}` has length {} > max_cdr3_len {}",
                    r.cdr3(),
                    toks.len(),
                    config.max_cdr3_len
                )));
            }
            set.tokens.extend_from_slice(&toks);
            set.offsets.push(set.tokens.len());
            set.v.push(r.v_gene());
            set.d.push(r.d_gene_id());
            set.j.push(r.j_gene());
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn tokens(&self, i: usize) -> &[u8] {
        &self.tokens[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn max_len(&self) -> usize {
        self.offsets.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// A padded mini-batch. Row `r` holds `lengths[r]` residue tokens followed by
/// [`PAD`] up to `width`; the mask is implied by `lengths`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch<T> {
    tokens: Vec<u8>,
    width: usize,
    lengths: Vec<usize>,
    pub(crate) v: Vec<u16>,
    pub(crate) d: Vec<u16>,
    pub(crate) j: Vec<u16>,
    pub targets: Vec<T>,
    pub indices: Vec<usize>,
}

impl<T: Scalar> Batch<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        tokens: Vec<u8>,
        width: usize,
        lengths: Vec<usize>,
        v: Vec<u16>,
        d: Vec<u16>,
        j: Vec<u16>,
        targets: Vec<T>,
        indices: Vec<usize>,
    ) -> Result<Self> {
        let b = lengths.len();
        if tokens.len() != b * width
            || [v.len(), d.len(), j.len(), targets.len(), indices.len()]
                .iter()
                .any(|&n| n != b)
        {
            return Err(Error::Shape("batch columns disagree on row count".into()));
        }
        for (r, &len) in lengths.iter().enumerate() {
            let row = &tokens[r * width..(r + 1) * width];
            if len == 0 || len > width {
                return Err(Error::ModelInput(format!("row {r}: invalid length {len}")));
            }
            let residues_ok = row[..len]
                .iter()
                .all(|&t| t != PAD && usize::from(t) < AA_VOCAB);
            if !residues_ok || row[len..].iter().any(|&t| t != PAD) {
                return Err(Error::ModelInput(format!(
                    "row {r}: mask inconsistent with length {len}"
                )));
            }
        }
        if targets
            .iter()
            .any(|t| !(*t >= T::zero() && *t <= T::one()))
        {
            return Err(Error::ModelInput("targets must lie in [0, 1]".into()));
        }
        Ok(Self {
            tokens,
            width,
            lengths,
            v,
            d,
            j,
            targets,
            indices,
        })
    }

    /// Gathers `rows` of `set`; `targets[k]` belongs to `rows[k]`.
    pub fn from_encoded(set: &EncodedSet, rows: &[usize], targets: Vec<T>) -> Result<Self> {
        let width = rows.iter().map(|&r| set.tokens(r).len()).max().unwrap_or(1);
        Self::from_encoded_padded(set, rows, targets, width)
    }

    pub fn from_encoded_padded(
        set: &EncodedSet,
        rows: &[usize],
        targets: Vec<T>,
        width: usize,
    ) -> Result<Self> {
        let mut tokens = vec![PAD; rows.len() * width];
        let mut lengths = Vec::with_capacity(rows.len());
        for (k, &r) in rows.iter().enumerate() {
            let t = set.tokens(r);
            if t.len() > width {
                return Err(Error::ModelInput(format!("row {r} longer than batch width")));
            }
            tokens[k * width..k * width + t.len()].copy_from_slice(t);
            lengths.push(t.len());
        }
        let pick = |col: &[u16]| rows.iter().map(|&r| col[r]).collect::<Vec<_>>();
        Self::new(
            tokens,
            width,
            lengths,
            pick(&set.v),
            pick(&set.d),
            pick(&set.j),
            targets,
            rows.to_vec(),
        )
    }

    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Unpadded residue tokens of row `r`.
    pub fn row_tokens(&self, r: usize) -> &[u8] {
        &self.tokens[r * self.width..r * self.width + self.lengths[r]]
    }

    pub fn mask(&self, r: usize) -> impl Iterator<Item = bool> + '_ {
        (0..self.width).map(move |i| i < self.lengths[r])
    }
}
