//! Per-instance forward and reverse passes.
//!
//! Instances never interact, so a batch is processed as independent rows in
//! fixed-size chunks. Chunk gradients are summed in chunk order, which keeps
//! results identical for any thread count.

use rayon::prelude::*;

use crate::data::SequenceRecord;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::encode::{Batch, EncodedSet};
use super::{Gradients, LayerSlots, ModelState, Slot};

const N_TOKENS: usize = 5;
const CHUNK: usize = 16;
const LN_EPS: f64 = 1e-5;
const PREDICT_BATCH: usize = 512;

/// y[r] = x[r] W + b for `rows` rows; W stored input-major (`n_in × n_out`).
fn affine<T: Scalar>(x: &[T], w: &[T], b: &[T], rows: usize, n_in: usize, n_out: usize) -> Vec<T> {
    let mut y = Vec::with_capacity(rows * n_out);
    for r in 0..rows {
        y.extend_from_slice(b);
        let out = &mut y[r * n_out..(r + 1) * n_out];
        for (i, &xi) in x[r * n_in..(r + 1) * n_in].iter().enumerate() {
            let wrow = &w[i * n_out..(i + 1) * n_out];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o = *o + xi * wv;
            }
        }
    }
    y
}

/// Accumulates dW += xᵀ dy, db += Σ dy, and (optionally) dx += dy Wᵀ.
#[allow(clippy::too_many_arguments)]
fn affine_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    rows: usize,
    n_in: usize,
    n_out: usize,
    dw: &mut [T],
    db: &mut [T],
    mut dx: Option<&mut [T]>,
) {
    for r in 0..rows {
        let dyr = &dy[r * n_out..(r + 1) * n_out];
        for (acc, &g) in db.iter_mut().zip(dyr) {
            *acc = *acc + g;
        }
        for i in 0..n_in {
            let xi = x[r * n_in + i];
            let wrow = &w[i * n_out..(i + 1) * n_out];
            let dwrow = &mut dw[i * n_out..(i + 1) * n_out];
            let mut acc = T::zero();
            for ((dwv, &wv), &g) in dwrow.iter_mut().zip(wrow).zip(dyr) {
                *dwv = *dwv + xi * g;
                acc = acc + wv * g;
            }
            if let Some(dx) = dx.as_deref_mut() {
                dx[r * n_in + i] = dx[r * n_in + i] + acc;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct NormCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

fn layer_norm<T: Scalar>(x: &[T], scale: &[T], offset: &[T], rows: usize) -> (Vec<T>, NormCache<T>) {
    let d = scale.len();
    let n = T::from_usize_lossy(d);
    let eps = T::from_f64_lossy(LN_EPS);
    let mut out = Vec::with_capacity(rows * d);
    let mut xhat = Vec::with_capacity(rows * d);
    let mut rstd = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        for c in 0..d {
            let h = (row[c] - mean) * rs;
            xhat.push(h);
            out.push(h * scale[c] + offset[c]);
        }
    }
    (out, NormCache { xhat, rstd })
}

/// Accumulates scale/offset gradients and returns dx.
fn layer_norm_backward<T: Scalar>(
    cache: &NormCache<T>,
    scale: &[T],
    dy: &[T],
    dscale: &mut [T],
    doffset: &mut [T],
) -> Vec<T> {
    let d = scale.len();
    let n = T::from_usize_lossy(d);
    let rows = cache.rstd.len();
    let mut dx = vec![T::zero(); rows * d];
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xh = &cache.xhat[r * d..(r + 1) * d];
        let g = &dy[r * d..(r + 1) * d];
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dscale[c] = dscale[c] + g[c] * xh[c];
            doffset[c] = doffset[c] + g[c];
            dxhat[c] = g[c] * scale[c];
            mean_dxhat = mean_dxhat + dxhat[c];
            mean_dxhat_xhat = mean_dxhat_xhat + dxhat[c] * xh[c];
        }
        mean_dxhat = mean_dxhat / n;
        mean_dxhat_xhat = mean_dxhat_xhat / n;
        let rs = cache.rstd[r];
        for c in 0..d {
            dx[r * d + c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

struct Gelu<T> {
    k: T,
    c: T,
    half: T,
    three_c: T,
}

impl<T: Scalar> Gelu<T> {
    fn new() -> Self {
        let c = 0.044715;
        Self {
            k: T::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt()),
            c: T::from_f64_lossy(c),
            half: T::from_f64_lossy(0.5),
            three_c: T::from_f64_lossy(3.0 * c),
        }
    }

    fn value(&self, x: T) -> T {
        let th = (self.k * (x + self.c * x * x * x)).tanh();
        self.half * x * (T::one() + th)
    }

    fn derivative(&self, x: T) -> T {
        let th = (self.k * (x + self.c * x * x * x)).tanh();
        self.half * (T::one() + th)
            + self.half * x * (T::one() - th * th) * self.k * (T::one() + self.three_c * x * x)
    }
}

/// Counter-based uniform in [0, 1) from a 64-bit key.
fn hash_uniform(mut z: u64) -> f64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    (z >> 11) as f64 / (1u64 << 53) as f64
}

fn mix(a: u64, b: u64) -> u64 {
    let h = hash_uniform(a ^ b.rotate_left(17).wrapping_mul(0xD6E8_FEB8_6659_FD93));
    (h * (1u64 << 53) as f64) as u64 ^ b
}

/// Inverted-dropout scale factors, or `None` when dropout is inactive.
fn dropout_mask<T: Scalar>(key: Option<u64>, rate: f64, site: u64, n: usize) -> Option<Vec<T>> {
    let key = key?;
    if rate <= 0.0 {
        return None;
    }
    let keep = T::from_f64_lossy(1.0 / (1.0 - rate));
    let base = mix(key, site);
    Some(
        (0..n as u64)
            .map(|i| {
                if hash_uniform(mix(base, i)) < rate {
                    T::zero()
                } else {
                    keep
                }
            })
            .collect(),
    )
}

fn apply_mask<T: Scalar>(x: &[T], mask: &Option<Vec<T>>) -> Vec<T> {
    match mask {
        Some(m) => x.iter().zip(m).map(|(&a, &s)| a * s).collect(),
        None => x.to_vec(),
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerCache<T> {
    rows_out: usize,
    x: Vec<T>,
    ln1: NormCache<T>,
    z: Vec<T>,
    q: Vec<T>,
    k: Vec<T>,
    v: Vec<T>,
    /// Attention weights before dropout, `rows_out × heads × N_TOKENS`.
    attn: Vec<T>,
    attn_mask: Option<Vec<T>>,
    o: Vec<T>,
    ln2: NormCache<T>,
    u: Vec<T>,
    f: Vec<T>,
    ffn_mask: Option<Vec<T>>,
}

#[derive(Debug, Clone, PartialEq)]
struct RowCache<T> {
    tokens: Vec<u8>,
    genes: [u16; 3],
    pooled: Vec<T>,
    layers: Vec<LayerCache<T>>,
    final_norm: NormCache<T>,
    normed: Vec<T>,
    probs: [T; 2],
}

/// Activations saved by [`forward`] for the matching [`backward`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardCache<T> {
    rows: Vec<RowCache<T>>,
    step: u64,
    seed: u64,
    n_params: usize,
}

impl<T> ForwardCache<T> {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

struct RowInput<'a> {
    tokens: &'a [u8],
    genes: [u16; 3],
    dropout_key: Option<u64>,
}

fn check_row<T: Scalar>(state: &ModelState<T>, input: &RowInput) -> Result<()> {
    let cfg = &state.config;
    if input.tokens.is_empty() {
        return Err(Error::ModelInput("empty CDR3".into()));
    }
    if input.tokens.len() > cfg.max_cdr3_len {
        return Err(Error::ModelInput(format!(
            "CDR3 length {} exceeds max_cdr3_len {}",
            input.tokens.len(),
            cfg.max_cdr3_len
        )));
    }
    let sizes = [cfg.n_v_genes, cfg.n_d_genes, cfg.n_j_genes];
    for (kind, (&id, size)) in ["V", "D", "J"].iter().zip(input.genes.iter().zip(sizes)) {
        if usize::from(id) >= size {
            return Err(Error::ModelInput(format!(
                "{kind} gene id {id} outside vocabulary of size {size}"
            )));
        }
    }
    Ok(())
}

fn row_of<T: Scalar>(state: &ModelState<T>, slot: Slot, row: usize) -> &[T] {
    let d = slot.cols;
    &state.get(slot)[row * d..(row + 1) * d]
}

fn layer_forward<T: Scalar>(
    state: &ModelState<T>,
    ls: &LayerSlots,
    x: Vec<T>,
    rows_out: usize,
    dropout_key: Option<u64>,
    gelu: &Gelu<T>,
) -> (Vec<T>, LayerCache<T>) {
    let cfg = &state.config;
    let d = cfg.token_dim;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let hidden = cfg.ffn_hidden();
    let p = |s: Slot| state.get(s);

    let (z, ln1) = layer_norm(&x, p(ls.attn_norm_scale), p(ls.attn_norm_offset), N_TOKENS);
    let q = affine(&z[..rows_out * d], p(ls.query_w), p(ls.query_b), rows_out, d, d);
    let k = affine(&z, p(ls.key_w), p(ls.key_b), N_TOKENS, d, d);
    let v = affine(&z, p(ls.value_w), p(ls.value_b), N_TOKENS, d, d);

    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut attn = vec![T::zero(); rows_out * heads * N_TOKENS];
    for r in 0..rows_out {
        for h in 0..heads {
            let qr = &q[r * d + h * dh..r * d + (h + 1) * dh];
            let w = &mut attn[(r * heads + h) * N_TOKENS..(r * heads + h + 1) * N_TOKENS];
            for t in 0..N_TOKENS {
                let kt = &k[t * d + h * dh..t * d + (h + 1) * dh];
                w[t] = qr.iter().zip(kt).map(|(&a, &b)| a * b).sum::<T>() * scale;
            }
            let max = w.iter().copied().fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for e in w.iter_mut() {
                *e = (*e - max).exp();
                total = total + *e;
            }
            for e in w.iter_mut() {
                *e = *e / total;
            }
        }
    }
    let attn_mask = dropout_mask(dropout_key, cfg.dropout, 1, attn.len());
    let attn_used = apply_mask(&attn, &attn_mask);
    let mut o = vec![T::zero(); rows_out * d];
    for r in 0..rows_out {
        for h in 0..heads {
            let w = &attn_used[(r * heads + h) * N_TOKENS..(r * heads + h + 1) * N_TOKENS];
            let orow = &mut o[r * d + h * dh..r * d + (h + 1) * dh];
            for (t, &wt) in w.iter().enumerate() {
                let vt = &v[t * d + h * dh..t * d + (h + 1) * dh];
                for (oc, &vc) in orow.iter_mut().zip(vt) {
                    *oc = *oc + wt * vc;
                }
            }
        }
    }
    let y = affine(&o, p(ls.out_w), p(ls.out_b), rows_out, d, d);
    let hres: Vec<T> = x[..rows_out * d].iter().zip(&y).map(|(&a, &b)| a + b).collect();

    let (u, ln2) = layer_norm(&hres, p(ls.ffn_norm_scale), p(ls.ffn_norm_offset), rows_out);
    let f = affine(&u, p(ls.hidden_w), p(ls.hidden_b), rows_out, d, hidden);
    let ffn_mask = dropout_mask(dropout_key, cfg.dropout, 2, f.len());
    let g: Vec<T> = f.iter().map(|&a| gelu.value(a)).collect();
    let g = apply_mask(&g, &ffn_mask);
    let e = affine(&g, p(ls.ffn_out_w), p(ls.ffn_out_b), rows_out, hidden, d);
    let out: Vec<T> = hres.iter().zip(&e).map(|(&a, &b)| a + b).collect();

    let cache = LayerCache {
        rows_out,
        x,
        ln1,
        z,
        q,
        k,
        v,
        attn,
        attn_mask,
        o,
        ln2,
        u,
        f,
        ffn_mask,
    };
    (out, cache)
}

fn row_forward<T: Scalar>(state: &ModelState<T>, input: &RowInput, gelu: &Gelu<T>) -> RowCache<T> {
    let l = &state.layout;
    let d = state.config.token_dim;
    let n = input.tokens.len();

    let mut pooled = vec![T::zero(); d];
    let aa = state.get(l.aa);
    let pos = state.get(l.pos);
    for (i, &t) in input.tokens.iter().enumerate() {
        let a = &aa[usize::from(t) * d..(usize::from(t) + 1) * d];
        let p = &pos[i * d..(i + 1) * d];
        for c in 0..d {
            pooled[c] = pooled[c] + a[c] + p[c];
        }
    }
    let inv_n = T::one() / T::from_usize_lossy(n);
    pooled.iter_mut().for_each(|x| *x = *x * inv_n);

    let cdr3_token = affine(&pooled, state.get(l.proj_w), state.get(l.proj_b), 1, d, d);
    let [gv, gd, gj] = input.genes;
    let mut x = Vec::with_capacity(N_TOKENS * d);
    x.extend_from_slice(state.get(l.cls));
    x.extend_from_slice(&cdr3_token);
    x.extend_from_slice(row_of(state, l.v_emb, usize::from(gv)));
    x.extend_from_slice(row_of(state, l.d_emb, usize::from(gd)));
    x.extend_from_slice(row_of(state, l.j_emb, usize::from(gj)));

    let n_layers = l.layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    for (li, ls) in l.layers.iter().enumerate() {
        // Only the CLS row feeds the head, so the last layer computes just that row.
        let rows_out = if li + 1 == n_layers { 1 } else { N_TOKENS };
        let key = input.dropout_key.map(|k| mix(k, li as u64 + 1));
        let (out, cache) = layer_forward(state, ls, x, rows_out, key, gelu);
        layers.push(cache);
        x = out;
    }

    let cls = &x[..d];
    let (normed, final_norm) =
        layer_norm(cls, state.get(l.final_scale), state.get(l.final_offset), 1);
    let logits = affine(&normed, state.get(l.head_w), state.get(l.head_b), 1, d, 2);
    let max = logits[0].max(logits[1]);
    let e0 = (logits[0] - max).exp();
    let e1 = (logits[1] - max).exp();
    let total = e0 + e1;
    RowCache {
        tokens: input.tokens.to_vec(),
        genes: input.genes,
        pooled,
        layers,
        final_norm,
        normed,
        probs: [e0 / total, e1 / total],
    }
}

/// Mutable views of every tensor's gradient, addressed by slot.
struct GradBuf<'a, T> {
    g: &'a mut [T],
}

impl<T: Scalar> GradBuf<'_, T> {
    fn at(&mut self, slot: Slot) -> &mut [T] {
        &mut self.g[slot.range()]
    }

    fn two(&mut self, a: Slot, b: Slot) -> (&mut [T], &mut [T]) {
        debug_assert!(a.offset + a.len() <= b.offset);
        let (lo, hi) = self.g.split_at_mut(b.offset);
        (&mut lo[a.range()], &mut hi[..b.len()])
    }
}

fn layer_backward<T: Scalar>(
    state: &ModelState<T>,
    ls: &LayerSlots,
    cache: &LayerCache<T>,
    dout: &[T],
    grads: &mut GradBuf<T>,
    gelu: &Gelu<T>,
) -> Vec<T> {
    let cfg = &state.config;
    let d = cfg.token_dim;
    let heads = cfg.n_heads;
    let dh = cfg.head_dim();
    let hidden = cfg.ffn_hidden();
    let r_out = cache.rows_out;
    let p = |s: Slot| state.get(s);

    // feed-forward block
    let g_used: Vec<T> = {
        let g: Vec<T> = cache.f.iter().map(|&a| gelu.value(a)).collect();
        apply_mask(&g, &cache.ffn_mask)
    };
    let mut dg = vec![T::zero(); r_out * hidden];
    {
        let (dw, db) = grads.two(ls.ffn_out_w, ls.ffn_out_b);
        affine_backward(&g_used, p(ls.ffn_out_w), dout, r_out, hidden, d, dw, db, Some(&mut dg));
    }
    let df: Vec<T> = dg
        .iter()
        .enumerate()
        .map(|(i, &gv)| {
            let gv = match &cache.ffn_mask {
                Some(m) => gv * m[i],
                None => gv,
            };
            gv * gelu.derivative(cache.f[i])
        })
        .collect();
    let mut du = vec![T::zero(); r_out * d];
    {
        let (dw, db) = grads.two(ls.hidden_w, ls.hidden_b);
        affine_backward(&cache.u, p(ls.hidden_w), &df, r_out, d, hidden, dw, db, Some(&mut du));
    }
    let dh_ln = {
        let (ds, dofs) = grads.two(ls.ffn_norm_scale, ls.ffn_norm_offset);
        layer_norm_backward(&cache.ln2, p(ls.ffn_norm_scale), &du, ds, dofs)
    };
    let dhres: Vec<T> = dout.iter().zip(&dh_ln).map(|(&a, &b)| a + b).collect();

    // attention block
    let mut dx = vec![T::zero(); N_TOKENS * d];
    dx[..r_out * d].copy_from_slice(&dhres);
    let attn_used = apply_mask(&cache.attn, &cache.attn_mask);
    let mut d_o = vec![T::zero(); r_out * d];
    {
        let (dw, db) = grads.two(ls.out_w, ls.out_b);
        affine_backward(&cache.o, p(ls.out_w), &dhres, r_out, d, d, dw, db, Some(&mut d_o));
    }
    let scale = T::one() / T::from_usize_lossy(dh).sqrt();
    let mut dq = vec![T::zero(); r_out * d];
    let mut dk = vec![T::zero(); N_TOKENS * d];
    let mut dv = vec![T::zero(); N_TOKENS * d];
    let mut dw_att = [T::zero(); N_TOKENS];
    for r in 0..r_out {
        for h in 0..heads {
            let base = (r * heads + h) * N_TOKENS;
            let dor = &d_o[r * d + h * dh..r * d + (h + 1) * dh];
            for t in 0..N_TOKENS {
                let vt = &cache.v[t * d + h * dh..t * d + (h + 1) * dh];
                let mut acc = T::zero();
                let a = attn_used[base + t];
                let dvt = &mut dv[t * d + h * dh..t * d + (h + 1) * dh];
                for c in 0..dh {
                    acc = acc + dor[c] * vt[c];
                    dvt[c] = dvt[c] + a * dor[c];
                }
                dw_att[t] = match &cache.attn_mask {
                    Some(m) => acc * m[base + t],
                    None => acc,
                };
            }
            let w = &cache.attn[base..base + N_TOKENS];
            let dot: T = w.iter().zip(&dw_att).map(|(&a, &b)| a * b).sum();
            for t in 0..N_TOKENS {
                let ds = w[t] * (dw_att[t] - dot) * scale;
                let kt = &cache.k[t * d + h * dh..t * d + (h + 1) * dh];
                let qr = &cache.q[r * d + h * dh..r * d + (h + 1) * dh];
                for c in 0..dh {
                    dq[r * d + h * dh + c] = dq[r * d + h * dh + c] + ds * kt[c];
                    dk[t * d + h * dh + c] = dk[t * d + h * dh + c] + ds * qr[c];
                }
            }
        }
    }
    let mut dz = vec![T::zero(); N_TOKENS * d];
    {
        let (dw, db) = grads.two(ls.query_w, ls.query_b);
        affine_backward(
            &cache.z[..r_out * d],
            p(ls.query_w),
            &dq,
            r_out,
            d,
            d,
            dw,
            db,
            Some(&mut dz[..r_out * d]),
        );
    }
    {
        let (dw, db) = grads.two(ls.key_w, ls.key_b);
        affine_backward(&cache.z, p(ls.key_w), &dk, N_TOKENS, d, d, dw, db, Some(&mut dz));
    }
    {
        let (dw, db) = grads.two(ls.value_w, ls.value_b);
        affine_backward(&cache.z, p(ls.value_w), &dv, N_TOKENS, d, d, dw, db, Some(&mut dz));
    }
    let dx_ln = {
        let (ds, dofs) = grads.two(ls.attn_norm_scale, ls.attn_norm_offset);
        layer_norm_backward(&cache.ln1, p(ls.attn_norm_scale), &dz, ds, dofs)
    };
    for (a, b) in dx.iter_mut().zip(&dx_ln) {
        *a = *a + *b;
    }
    dx
}

fn row_backward<T: Scalar>(
    state: &ModelState<T>,
    cache: &RowCache<T>,
    dprobs: [T; 2],
    grads: &mut GradBuf<T>,
    gelu: &Gelu<T>,
) {
    let l = &state.layout;
    let d = state.config.token_dim;
    let [p0, p1] = cache.probs;
    let dot = p0 * dprobs[0] + p1 * dprobs[1];
    let dlogits = [p0 * (dprobs[0] - dot), p1 * (dprobs[1] - dot)];

    let mut dnormed = vec![T::zero(); d];
    {
        let (dw, db) = grads.two(l.head_w, l.head_b);
        affine_backward(&cache.normed, state.get(l.head_w), &dlogits, 1, d, 2, dw, db, Some(&mut dnormed));
    }
    let dcls = {
        let (ds, dofs) = grads.two(l.final_scale, l.final_offset);
        layer_norm_backward(&cache.final_norm, state.get(l.final_scale), &dnormed, ds, dofs)
    };
    let mut dx = dcls;
    for (ls, lc) in l.layers.iter().zip(&cache.layers).rev() {
        dx = layer_backward(state, ls, lc, &dx, grads, gelu);
    }

    let tok = |i: usize| &dx[i * d..(i + 1) * d];
    let add = |dst: &mut [T], src: &[T]| {
        for (a, &b) in dst.iter_mut().zip(src) {
            *a = *a + b;
        }
    };
    add(grads.at(l.cls), tok(0));
    let [gv, gd, gj] = cache.genes.map(usize::from);
    add(&mut grads.at(l.v_emb)[gv * d..(gv + 1) * d], tok(2));
    add(&mut grads.at(l.d_emb)[gd * d..(gd + 1) * d], tok(3));
    add(&mut grads.at(l.j_emb)[gj * d..(gj + 1) * d], tok(4));

    let mut dpooled = vec![T::zero(); d];
    {
        let (dw, db) = grads.two(l.proj_w, l.proj_b);
        affine_backward(&cache.pooled, state.get(l.proj_w), tok(1), 1, d, d, dw, db, Some(&mut dpooled));
    }
    let inv_n = T::one() / T::from_usize_lossy(cache.tokens.len());
    dpooled.iter_mut().for_each(|x| *x = *x * inv_n);
    for (i, &t) in cache.tokens.iter().enumerate() {
        let t = usize::from(t);
        add(&mut grads.at(l.aa)[t * d..(t + 1) * d], &dpooled);
        add(&mut grads.at(l.pos)[i * d..(i + 1) * d], &dpooled);
    }
}

/// Runs the network on every row of `batch`, returning `[p(y=0), p(y=1)]`
/// per row and the activations needed by [`backward`].
///
/// Dropout is active only when `train_mode` is set; its masks are a pure
/// function of `(dropout_seed, instance index, layer, element)`.
pub fn forward<T: Scalar>(
    state: &ModelState<T>,
    batch: &Batch<T>,
    train_mode: bool,
    dropout_seed: u64,
) -> Result<(Vec<[T; 2]>, ForwardCache<T>)> {
    let gelu = Gelu::new();
    let inputs: Vec<RowInput> = (0..batch.len())
        .map(|r| RowInput {
            tokens: batch.row_tokens(r),
            genes: [batch.v[r], batch.d[r], batch.j[r]],
            dropout_key: (train_mode && state.config.dropout > 0.0)
                .then(|| mix(dropout_seed, batch.indices[r] as u64)),
        })
        .collect();
    for input in &inputs {
        check_row(state, input)?;
    }
    let rows: Vec<RowCache<T>> = inputs
        .par_chunks(CHUNK)
        .flat_map_iter(|chunk| chunk.iter().map(|i| row_forward(state, i, &gelu)))
        .collect();
    let probs = rows.iter().map(|r| r.probs).collect();
    Ok((
        probs,
        ForwardCache {
            rows,
            step: state.step,
            seed: state.seed,
            n_params: state.params.len(),
        },
    ))
}

/// Reverse pass: gradients of a loss whose derivative with respect to the
/// output probabilities is `dprobs`, summed over rows.
pub fn backward<T: Scalar>(
    state: &ModelState<T>,
    cache: &ForwardCache<T>,
    dprobs: &[[T; 2]],
) -> Result<Gradients<T>> {
    if cache.step != state.step || cache.seed != state.seed || cache.n_params != state.params.len()
    {
        return Err(Error::Shape(
            "forward cache was produced by a different model state".into(),
        ));
    }
    if dprobs.len() != cache.rows.len() {
        return Err(Error::Shape(format!(
            "{} upstream gradients for {} cached rows",
            dprobs.len(),
            cache.rows.len()
        )));
    }
    let gelu = Gelu::new();
    let n = state.params.len();
    let partials: Vec<Vec<T>> = cache
        .rows
        .par_chunks(CHUNK)
        .zip(dprobs.par_chunks(CHUNK))
        .map(|(rows, dps)| {
            let mut g = vec![T::zero(); n];
            let mut buf = GradBuf { g: &mut g };
            for (row, dp) in rows.iter().zip(dps) {
                row_backward(state, row, *dp, &mut buf, &gelu);
            }
            g
        })
        .collect();
    let mut values = vec![T::zero(); n];
    for part in &partials {
        for (a, &b) in values.iter_mut().zip(part) {
            *a = *a + b;
        }
    }
    Ok(Gradients { values })
}

/// p(y = 1) for every instance of `set`, without dropout.
pub fn predict_encoded<T: Scalar>(state: &ModelState<T>, set: &EncodedSet) -> Result<Vec<T>> {
    let gelu = Gelu::new();
    let inputs: Vec<RowInput> = (0..set.len())
        .map(|i| RowInput {
            tokens: set.tokens(i),
            genes: [set.v[i], set.d[i], set.j[i]],
            dropout_key: None,
        })
        .collect();
    for input in &inputs {
        check_row(state, input)?;
    }
    Ok(inputs
        .par_chunks(PREDICT_BATCH)
        .flat_map_iter(|chunk| chunk.iter().map(|i| row_forward(state, i, &gelu).probs[1]))
        .collect())
}

/// f(s): the model's disease-association probability for each record.
pub fn predict_proba<T: Scalar>(state: &ModelState<T>, records: &[SequenceRecord]) -> Result<Vec<T>> {
    let set = EncodedSet::new(records, &state.config)?;
    predict_encoded(state, &set)
}
