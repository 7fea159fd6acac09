//! Feature-token transformer over a CDR3 encoder and V/D/J gene tokens,
//! with hand-written reverse mode and Adam.
//!
//! Token layout per instance: `[CLS, cdr3, V, D, J]`. The CDR3 token is the
//! masked mean of residue + position embeddings, linearly projected. Layers
//! are pre-norm (attention, then a GELU feed-forward block); the final CLS
//! state goes through a layer norm and a linear head to two logits.

mod adam;
mod checkpoint;
mod encode;
mod network;

pub use adam::{adam_step, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use encode::{encode_cdr3, Batch, EncodedSet, AA_VOCAB, PAD};
pub use network::{backward, forward, predict_encoded, predict_proba, ForwardCache};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::GeneVocabs;
use crate::error::{Error, Result};
use crate::kv::{self, KvConfig};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub token_dim: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_cdr3_len: usize,
    /// Vocabulary sizes, each including the missing-gene row.
    pub n_v_genes: usize,
    pub n_d_genes: usize,
    pub n_j_genes: usize,
    pub ffn_factor: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::cmv()
    }
}

impl ModelConfig {
    /// 1 layer, 1 head, 16-dimensional tokens, no dropout.
    pub fn cmv() -> Self {
        Self {
            token_dim: 16,
            n_layers: 1,
            n_heads: 1,
            dropout: 0.0,
            max_cdr3_len: 32,
            n_v_genes: 1,
            n_d_genes: 1,
            n_j_genes: 1,
            ffn_factor: 4.0 / 3.0,
        }
    }

    /// 2 layers, 4 heads, 192-dimensional tokens, dropout 0.1.
    pub fn cancer() -> Self {
        Self {
            token_dim: 192,
            n_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            ..Self::cmv()
        }
    }

    pub fn with_vocab(mut self, vocab: &GeneVocabs) -> Self {
        self.n_v_genes = vocab.v.len();
        self.n_d_genes = vocab.d.len();
        self.n_j_genes = vocab.j.len();
        self
    }

    pub fn ffn_hidden(&self) -> usize {
        ((self.ffn_factor * self.token_dim as f64).round() as usize).max(1)
    }

    pub fn head_dim(&self) -> usize {
        self.token_dim / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.token_dim == 0 || self.n_heads == 0 || self.n_layers == 0 {
            return bad("token_dim, n_heads and n_layers must be positive".into());
        }
        if !self.token_dim.is_multiple_of(self.n_heads) {
            return bad(format!(
                "token_dim {} is not divisible by n_heads {}",
                self.token_dim, self.n_heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.max_cdr3_len == 0 {
            return bad("max_cdr3_len must be positive".into());
        }
        if self.n_v_genes == 0 || self.n_d_genes == 0 || self.n_j_genes == 0 {
            return bad("gene vocabulary sizes must include the missing row".into());
        }
        if !(self.ffn_factor > 0.0) {
            return bad("ffn_factor must be positive".into());
        }
        Ok(())
    }
}

impl KvConfig for ModelConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "token_dim" => self.token_dim = kv::value(key, v)?,
            "n_layers" => self.n_layers = kv::value(key, v)?,
            "n_heads" => self.n_heads = kv::value(key, v)?,
            "dropout" => self.dropout = kv::value(key, v)?,
            "max_cdr3_len" => self.max_cdr3_len = kv::value(key, v)?,
            "ffn_factor" => self.ffn_factor = kv::value(key, v)?,
            _ => return Err(kv::unknown(key)),
        }
        Ok(())
    }

    fn to_pairs(&self) -> Vec<(String, String)> {
        vec![
            ("token_dim".into(), self.token_dim.to_string()),
            ("n_layers".into(), self.n_layers.to_string()),
            ("n_heads".into(), self.n_heads.to_string()),
            ("dropout".into(), self.dropout.to_string()),
            ("max_cdr3_len".into(), self.max_cdr3_len.to_string()),
            ("ffn_factor".into(), self.ffn_factor.to_string()),
        ]
    }
}

/// Position of one tensor inside the flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Slot {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Slot {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerSlots {
    pub attn_norm_scale: Slot,
    pub attn_norm_offset: Slot,
    pub query_w: Slot,
    pub query_b: Slot,
    pub key_w: Slot,
    pub key_b: Slot,
    pub value_w: Slot,
    pub value_b: Slot,
    pub out_w: Slot,
    pub out_b: Slot,
    pub ffn_norm_scale: Slot,
    pub ffn_norm_offset: Slot,
    pub hidden_w: Slot,
    pub hidden_b: Slot,
    pub ffn_out_w: Slot,
    pub ffn_out_b: Slot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Init {
    Xavier,
    Zero,
    One,
}

/// Named tensor table over the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct Layout {
    tensors: Vec<(String, Slot, Init)>,
    pub(crate) aa: Slot,
    pub(crate) pos: Slot,
    pub(crate) proj_w: Slot,
    pub(crate) proj_b: Slot,
    pub(crate) v_emb: Slot,
    pub(crate) d_emb: Slot,
    pub(crate) j_emb: Slot,
    pub(crate) cls: Slot,
    pub(crate) layers: Vec<LayerSlots>,
    pub(crate) final_scale: Slot,
    pub(crate) final_offset: Slot,
    pub(crate) head_w: Slot,
    pub(crate) head_b: Slot,
    total: usize,
}

struct LayoutBuilder {
    tensors: Vec<(String, Slot, Init)>,
    total: usize,
}

impl LayoutBuilder {
    fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, init: Init) -> Slot {
        let slot = Slot {
            offset: self.total,
            rows,
            cols,
        };
        self.total += rows * cols;
        self.tensors.push((name.into(), slot, init));
        slot
    }
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Self {
        use Init::*;
        let d = cfg.token_dim;
        let h = cfg.ffn_hidden();
        let mut b = LayoutBuilder {
            tensors: Vec::new(),
            total: 0,
        };
        let aa = b.add("aa_embedding", AA_VOCAB, d, Xavier);
        let pos = b.add("position_embedding", cfg.max_cdr3_len, d, Xavier);
        let proj_w = b.add("cdr3_projection.weight", d, d, Xavier);
        let proj_b = b.add("cdr3_projection.bias", 1, d, Zero);
        let v_emb = b.add("v_embedding", cfg.n_v_genes, d, Xavier);
        let d_emb = b.add("d_embedding", cfg.n_d_genes, d, Xavier);
        let j_emb = b.add("j_embedding", cfg.n_j_genes, d, Xavier);
        let cls = b.add("cls_token", 1, d, Xavier);
        let layers = (0..cfg.n_layers)
            .map(|l| {
                let p = |s: &str| format!("layers.{l}.{s}");
                LayerSlots {
                    attn_norm_scale: b.add(p("attn_norm.scale"), 1, d, One),
                    attn_norm_offset: b.add(p("attn_norm.offset"), 1, d, Zero),
                    query_w: b.add(p("attn.query.weight"), d, d, Xavier),
                    query_b: b.add(p("attn.query.bias"), 1, d, Zero),
                    key_w: b.add(p("attn.key.weight"), d, d, Xavier),
                    key_b: b.add(p("attn.key.bias"), 1, d, Zero),
                    value_w: b.add(p("attn.value.weight"), d, d, Xavier),
                    value_b: b.add(p("attn.value.bias"), 1, d, Zero),
                    out_w: b.add(p("attn.output.weight"), d, d, Xavier),
                    out_b: b.add(p("attn.output.bias"), 1, d, Zero),
                    ffn_norm_scale: b.add(p("ffn_norm.scale"), 1, d, One),
                    ffn_norm_offset: b.add(p("ffn_norm.offset"), 1, d, Zero),
                    hidden_w: b.add(p("ffn.hidden.weight"), d, h, Xavier),
                    hidden_b: b.add(p("ffn.hidden.bias"), 1, h, Zero),
                    ffn_out_w: b.add(p("ffn.output.weight"), h, d, Xavier),
                    ffn_out_b: b.add(p("ffn.output.bias"), 1, d, Zero),
                }
            })
            .collect();
        let final_scale = b.add("final_norm.scale", 1, d, One);
        let final_offset = b.add("final_norm.offset", 1, d, Zero);
        let head_w = b.add("head.weight", d, 2, Xavier);
        let head_b = b.add("head.bias", 1, 2, Zero);
        Self {
            tensors: b.tensors,
            aa,
            pos,
            proj_w,
            proj_b,
            v_emb,
            d_emb,
            j_emb,
            cls,
            layers,
            final_scale,
            final_offset,
            head_w,
            head_b,
            total: b.total,
        }
    }

    pub fn n_params(&self) -> usize {
        self.total
    }

    /// Tensor names and slots, in storage order.
    pub fn tensors(&self) -> impl Iterator<Item = (&str, Slot)> {
        self.tensors.iter().map(|(n, s, _)| (n.as_str(), *s))
    }

    pub fn slot(&self, name: &str) -> Option<Slot> {
        self.tensors().find(|(n, _)| *n == name).map(|(_, s)| s)
    }

    /// Name of the tensor containing flat index `i`.
    pub fn name_of(&self, i: usize) -> &str {
        self.tensors()
            .find(|(_, s)| s.range().contains(&i))
            .map(|(n, _)| n)
            .unwrap_or("?")
    }
}

/// Learnable parameters of one model plus its Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<T>,
    pub first_moment: Vec<T>,
    pub second_moment: Vec<T>,
    pub step: u64,
    /// Initialization seed; also keys this model's dropout stream.
    pub seed: u64,
}

impl<T: Scalar> ModelState<T> {
    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.layout.slot(name).map(|s| &self.params[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let slot = self.layout.slot(name)?;
        Some(&mut self.params[slot.range()])
    }

    #[inline]
    pub(crate) fn get(&self, slot: Slot) -> &[T] {
        &self.params[slot.range()]
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// Zeroes the classification head so every input maps to (0.5, 0.5).
    pub fn zero_head(&mut self) {
        for slot in [self.layout.head_w, self.layout.head_b] {
            self.params[slot.range()].fill(T::zero());
        }
    }
}

/// Xavier-uniform weights, zero biases, unit norm scales; deterministic in `seed`.
pub fn init_params<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<ModelState<T>> {
    config.validate()?;
    let layout = Layout::new(config);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = vec![T::zero(); layout.n_params()];
    for (_, slot, init) in &layout.tensors {
        let dst = &mut params[slot.range()];
        match init {
            Init::Zero => dst.fill(T::zero()),
            Init::One => dst.fill(T::one()),
            Init::Xavier => {
                let bound = (6.0 / (slot.rows + slot.cols) as f64).sqrt();
                for p in dst {
                    *p = T::from_f64_lossy(rng.gen_range(-bound..bound));
                }
            }
        }
    }
    let n = params.len();
    Ok(ModelState {
        config: config.clone(),
        layout,
        params,
        first_moment: vec![T::zero(); n],
        second_moment: vec![T::zero(); n],
        step: 0,
        seed,
    })
}

/// Gradient of a scalar loss with respect to every parameter, in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub values: Vec<T>,
}

impl<T: Scalar> Gradients<T> {
    pub fn tensor<'a>(&'a self, layout: &Layout, name: &str) -> Option<&'a [T]> {
        layout.slot(name).map(|s| &self.values[s.range()])
    }
}
