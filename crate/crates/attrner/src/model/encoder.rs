//! Transformer encoder with deterministic forward and analytic backward
//! passes. Sequences are processed one at a time at their true length;
//! position 0 of every sequence is the classification slot.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use thiserror::Error;

use crate::injection::{self, InjectionMode, InjectionSite};

use super::config::ModelConfig;
use super::params::ParamSet;

#[derive(Debug, Error)]
pub enum EncodeError {
    #[error("encoding error: {0}")]
    IdOutOfRange(String),
    #[error("encoding error: sequence length {0} exceeds position budget {1}")]
    TooLong(usize, usize),
}

const LN_EPS: f64 = 1e-12;

/// One sequence as the encoder sees it: augmented token ids (no
/// classification slot; text mode already carries its pseudo-token),
/// aligned POS ids (0 = no POS attribute at that slot), and the sentence
/// label id.
#[derive(Debug, Clone)]
pub struct SeqInput<'a> {
    pub token_ids: &'a [usize],
    pub pos_ids: &'a [usize],
    pub label_id: usize,
    pub mode: InjectionMode,
}

/// Inverted dropout with its own deterministic stream.
pub struct Dropout {
    pub rate: f64,
    rng: ChaCha8Rng,
}

impl Dropout {
    pub fn new(rate: f64, seed: u64) -> Self {
        Dropout { rate, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn mask(&mut self, len: usize) -> Vec<f64> {
        let keep = 1.0 - self.rate;
        (0..len)
            .map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct LnTrace {
    pub inv_std: Vec<f64>,
    pub norm: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub x: Vec<Vec<f64>>,
    pub q: Vec<Vec<f64>>,
    pub k: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    /// Softmax rows per head, pre-dropout: [head][query][key].
    pub probs: Vec<Vec<Vec<f64>>>,
    pub drop_attn: Option<Vec<Vec<Vec<f64>>>>,
    pub attn_concat: Vec<Vec<f64>>,
    pub ln1: LnTrace,
    pub y: Vec<Vec<f64>>,
    pub ff_pre: Vec<Vec<f64>>,
    pub ff_act: Vec<Vec<f64>>,
    pub drop_ff: Option<Vec<Vec<f64>>>,
    pub ln2: LnTrace,
}

/// Cached activations sufficient to compute exact gradients of any scalar
/// loss with respect to all parameters.
#[derive(Debug, Clone)]
pub struct Trace {
    pub token_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub label_id: usize,
    pub mode: InjectionMode,
    /// Raw embedding rows before any injection-site transform.
    pub base: Vec<Vec<f64>>,
    /// Embedding-mode concatenated inputs, one [3d] row per slot.
    pub cat: Option<Vec<Vec<f64>>>,
    pub x0: Vec<Vec<f64>>,
    pub layers: Vec<LayerTrace>,
    pub h: Vec<Vec<f64>>,
}

impl Trace {
    /// Number of slots including the classification slot.
    pub fn slots(&self) -> usize {
        self.token_ids.len() + 1
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// y = W x with W row-major [rows, cols].
fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    (0..rows).map(|i| dot(&w[i * cols..(i + 1) * cols], x)).collect()
}

/// y = W^T x.
fn matvec_t(w: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    for i in 0..rows {
        let row = &w[i * cols..(i + 1) * cols];
        let xi = x[i];
        for (o, r) in out.iter_mut().zip(row) {
            *o += xi * r;
        }
    }
    out
}

/// grad += dy (outer) x for W of shape [rows, cols].
fn accumulate_outer(grad: &mut [f64], dy: &[f64], x: &[f64]) {
    let cols = x.len();
    for (i, &d) in dy.iter().enumerate() {
        let row = &mut grad[i * cols..(i + 1) * cols];
        for (g, &xv) in row.iter_mut().zip(x) {
            *g += d * xv;
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_backward(probs: &[f64], d_probs: &[f64]) -> Vec<f64> {
    let inner: f64 = probs.iter().zip(d_probs).map(|(p, d)| p * d).sum();
    probs.iter().zip(d_probs).map(|(p, d)| p * (d - inner)).collect()
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.7978845608028654;
    const A: f64 = 0.044715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * C * (1.0 + 3.0 * A * x * x)
}

fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let norm: Vec<f64> = x.iter().map(|v| (v - mean) * inv_std).collect();
    let out = norm.iter().zip(gamma).zip(beta).map(|((n, g), b)| n * g + b).collect();
    (out, norm, inv_std)
}

fn layer_norm_backward(
    d_out: &[f64],
    norm: &[f64],
    inv_std: f64,
    gamma: &[f64],
    d_gamma: &mut [f64],
    d_beta: &mut [f64],
) -> Vec<f64> {
    let d = d_out.len() as f64;
    let mut d_norm = vec![0.0; d_out.len()];
    for i in 0..d_out.len() {
        d_gamma[i] += d_out[i] * norm[i];
        d_beta[i] += d_out[i];
        d_norm[i] = d_out[i] * gamma[i];
    }
    let mean_dn = d_norm.iter().sum::<f64>() / d;
    let mean_dn_norm = d_norm.iter().zip(norm).map(|(a, b)| a * b).sum::<f64>() / d;
    d_norm
        .iter()
        .zip(norm)
        .map(|(dn, n)| inv_std * (dn - mean_dn - n * mean_dn_norm))
        .collect()
}

/// Standalone masked scaled-dot-product attention for a single head.
/// Masked keys receive an effectively negative-infinite score; a fully
/// masked row is forced to attend to position 0.
pub fn attention(
    q: &[Vec<f64>],
    k: &[Vec<f64>],
    v: &[Vec<f64>],
    mask: &[u8],
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let dim = q[0].len() as f64;
    let scale = 1.0 / dim.sqrt();
    let any_live = mask.iter().any(|&m| m == 1);
    let mut weights = Vec::with_capacity(q.len());
    let mut mixed = Vec::with_capacity(q.len());
    for qi in q {
        let scores: Vec<f64> = k
            .iter()
            .enumerate()
            .map(|(j, kj)| {
                let live = if any_live { mask[j] == 1 } else { j == 0 };
                if live {
                    dot(qi, kj) * scale
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        let w = softmax(&scores);
        let mut out = vec![0.0; v[0].len()];
        for (j, vj) in v.iter().enumerate() {
            if w[j] != 0.0 {
                for (o, &val) in out.iter_mut().zip(vj) {
                    *o += w[j] * val;
                }
            }
        }
        weights.push(w);
        mixed.push(out);
    }
    (weights, mixed)
}

struct AttrVectors {
    label: Option<Vec<f64>>,
    pos: Vec<Option<Vec<f64>>>,
}

fn attr_vectors(
    inp: &SeqInput,
    params: &ParamSet,
    slots: usize,
) -> Result<AttrVectors, EncodeError> {
    let lab = params.get("lab_emb");
    let posattr = params.get("posattr_emb");
    let label = if inp.mode.use_label() {
        if inp.label_id >= lab.shape[0] {
            return Err(EncodeError::IdOutOfRange(format!(
                "label id {} >= {}",
                inp.label_id, lab.shape[0]
            )));
        }
        Some(lab.row(inp.label_id).to_vec())
    } else {
        None
    };
    let mut pos = vec![None; slots];
    if inp.mode.use_pos() {
        for (j, &p) in inp.pos_ids.iter().enumerate() {
            if p >= posattr.shape[0] {
                return Err(EncodeError::IdOutOfRange(format!("pos id {p} out of range")));
            }
            if p != 0 {
                pos[j + 1] = Some(posattr.row(p).to_vec());
            }
        }
    }
    Ok(AttrVectors { label, pos })
}

pub fn encode_sequence(
    inp: &SeqInput,
    params: &ParamSet,
    cfg: &ModelConfig,
    mut dropout: Option<&mut Dropout>,
) -> Result<(Vec<Vec<f64>>, Trace), EncodeError> {
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let slots = inp.token_ids.len() + 1;
    assert_eq!(inp.token_ids.len(), inp.pos_ids.len());
    if slots > cfg.max_len + 1 {
        return Err(EncodeError::TooLong(slots, cfg.max_len + 1));
    }

    let tok_emb = params.get("tok_emb");
    let posit_emb = params.get("posit_emb");
    let cls = params.get("cls_emb");

    // base embeddings: classification slot, then tokens
    let mut base = Vec::with_capacity(slots);
    {
        let mut row = cls.data.clone();
        add_into(&mut row, posit_emb.row(0));
        base.push(row);
    }
    for (j, &id) in inp.token_ids.iter().enumerate() {
        if id >= tok_emb.shape[0] {
            return Err(EncodeError::IdOutOfRange(format!("token id {id} out of range")));
        }
        let mut row = tok_emb.row(id).to_vec();
        add_into(&mut row, posit_emb.row(j + 1));
        base.push(row);
    }

    let attrs = attr_vectors(inp, params, slots)?;

    // injection-site transform of the embedding rows
    let mut cat = None;
    let mut x: Vec<Vec<f64>> = match inp.mode.site {
        InjectionSite::Embedding => {
            let proj = params.get("emb_proj");
            let mut rows = Vec::with_capacity(slots);
            let mut cats = Vec::with_capacity(slots);
            for (t, b) in base.iter().enumerate() {
                let (row, c) = injection::embed_with_attributes(
                    b,
                    attrs.label.as_deref(),
                    attrs.pos[t].as_deref(),
                    &proj.data,
                );
                rows.push(row);
                cats.push(c);
            }
            cat = Some(cats);
            rows
        }
        InjectionSite::Attention => {
            let mut rows = base.clone();
            for (t, row) in rows.iter_mut().enumerate() {
                if t > 0 {
                    if let Some(l) = &attrs.label {
                        add_into(row, l);
                    }
                }
                if let Some(p) = &attrs.pos[t] {
                    add_into(row, p);
                }
            }
            rows
        }
        _ => base.clone(),
    };

    let attention_site = inp.mode.site == InjectionSite::Attention;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let wq = params.get(&format!("l{l}.wq"));
        let wk = params.get(&format!("l{l}.wk"));
        let wv = params.get(&format!("l{l}.wv"));
        let wo = params.get(&format!("l{l}.wo"));
        let bq = params.get(&format!("l{l}.bq"));
        let bk = params.get(&format!("l{l}.bk"));
        let bv = params.get(&format!("l{l}.bv"));
        let bo = params.get(&format!("l{l}.bo"));

        // per-slot Q/K injection biases (attention site only)
        let (qbias, kbias) = if attention_site {
            let wsq = params.get(&format!("l{l}.wsq"));
            let wpq = params.get(&format!("l{l}.wpq"));
            let wsk = params.get(&format!("l{l}.wsk"));
            let wpk = params.get(&format!("l{l}.wpk"));
            let mut qb = Vec::with_capacity(slots);
            let mut kb = Vec::with_capacity(slots);
            for t in 0..slots {
                qb.push(injection::attention_bias(
                    &wsq.data,
                    attrs.label.as_deref(),
                    &wpq.data,
                    attrs.pos[t].as_deref(),
                    d,
                ));
                kb.push(injection::attention_bias(
                    &wsk.data,
                    attrs.label.as_deref(),
                    &wpk.data,
                    attrs.pos[t].as_deref(),
                    d,
                ));
            }
            (Some(qb), Some(kb))
        } else {
            (None, None)
        };

        let mut q = Vec::with_capacity(slots);
        let mut k = Vec::with_capacity(slots);
        let mut v = Vec::with_capacity(slots);
        for (t, xt) in x.iter().enumerate() {
            let mut qt = matvec(&wq.data, d, d, xt);
            add_into(&mut qt, &bq.data);
            if let Some(qb) = &qbias {
                add_into(&mut qt, &qb[t]);
            }
            let mut kt = matvec(&wk.data, d, d, xt);
            add_into(&mut kt, &bk.data);
            if let Some(kb) = &kbias {
                add_into(&mut kt, &kb[t]);
            }
            let mut vt = matvec(&wv.data, d, d, xt);
            add_into(&mut vt, &bv.data);
            q.push(qt);
            k.push(kt);
            v.push(vt);
        }

        let scale = 1.0 / (hd as f64).sqrt();
        let mut probs = vec![vec![vec![0.0; slots]; slots]; n_heads];
        let mut drop_attn: Option<Vec<Vec<Vec<f64>>>> = None;
        let mut attn_concat = vec![vec![0.0; d]; slots];
        for h in 0..n_heads {
            let lo = h * hd;
            let hi = lo + hd;
            for t in 0..slots {
                let scores: Vec<f64> =
                    (0..slots).map(|s| dot(&q[t][lo..hi], &k[s][lo..hi]) * scale).collect();
                probs[h][t] = softmax(&scores);
            }
        }
        if let Some(dr) = dropout.as_deref_mut() {
            if dr.rate > 0.0 {
                let mut masks = vec![vec![vec![0.0; slots]; slots]; n_heads];
                for hm in masks.iter_mut() {
                    for row in hm.iter_mut() {
                        *row = dr.mask(slots);
                    }
                }
                drop_attn = Some(masks);
            }
        }
        for h in 0..n_heads {
            let lo = h * hd;
            for t in 0..slots {
                for s in 0..slots {
                    let mut p = probs[h][t][s];
                    if let Some(m) = &drop_attn {
                        p *= m[h][t][s];
                    }
                    if p != 0.0 {
                        for j in 0..hd {
                            attn_concat[t][lo + j] += p * v[s][lo + j];
                        }
                    }
                }
            }
        }

        let ln1_g = params.get(&format!("l{l}.ln1_g"));
        let ln1_b = params.get(&format!("l{l}.ln1_b"));
        let mut y = Vec::with_capacity(slots);
        let mut ln1_norm = Vec::with_capacity(slots);
        let mut ln1_inv = Vec::with_capacity(slots);
        for t in 0..slots {
            let mut attn_out = matvec(&wo.data, d, d, &attn_concat[t]);
            add_into(&mut attn_out, &bo.data);
            add_into(&mut attn_out, &x[t]); // residual
            let (out, norm, inv) = layer_norm(&attn_out, &ln1_g.data, &ln1_b.data);
            y.push(out);
            ln1_norm.push(norm);
            ln1_inv.push(inv);
        }

        let w1 = params.get(&format!("l{l}.ff_w1"));
        let b1 = params.get(&format!("l{l}.ff_b1"));
        let w2 = params.get(&format!("l{l}.ff_w2"));
        let b2 = params.get(&format!("l{l}.ff_b2"));
        let ln2_g = params.get(&format!("l{l}.ln2_g"));
        let ln2_b = params.get(&format!("l{l}.ln2_b"));

        let mut ff_pre = Vec::with_capacity(slots);
        let mut ff_act = Vec::with_capacity(slots);
        let mut drop_ff: Option<Vec<Vec<f64>>> = None;
        if let Some(dr) = dropout.as_deref_mut() {
            if dr.rate > 0.0 {
                drop_ff = Some((0..slots).map(|_| dr.mask(cfg.d_ff)).collect());
            }
        }
        let mut next_x = Vec::with_capacity(slots);
        let mut ln2_norm = Vec::with_capacity(slots);
        let mut ln2_inv = Vec::with_capacity(slots);
        for t in 0..slots {
            let mut pre = matvec(&w1.data, cfg.d_ff, d, &y[t]);
            add_into(&mut pre, &b1.data);
            let mut act: Vec<f64> = pre.iter().map(|&z| gelu(z)).collect();
            if let Some(m) = &drop_ff {
                for (a, &mv) in act.iter_mut().zip(&m[t]) {
                    *a *= mv;
                }
            }
            let mut out = matvec(&w2.data, d, cfg.d_ff, &act);
            add_into(&mut out, &b2.data);
            add_into(&mut out, &y[t]); // residual
            let (o, norm, inv) = layer_norm(&out, &ln2_g.data, &ln2_b.data);
            ff_pre.push(pre);
            ff_act.push(act);
            next_x.push(o);
            ln2_norm.push(norm);
            ln2_inv.push(inv);
        }

        layers.push(LayerTrace {
            x: x.clone(),
            q,
            k,
            v,
            probs,
            drop_attn,
            attn_concat,
            ln1: LnTrace { inv_std: ln1_inv, norm: ln1_norm },
            y,
            ff_pre,
            ff_act,
            drop_ff,
            ln2: LnTrace { inv_std: ln2_inv, norm: ln2_norm },
        });
        x = next_x;
    }

    let trace = Trace {
        token_ids: inp.token_ids.to_vec(),
        pos_ids: inp.pos_ids.to_vec(),
        label_id: inp.label_id,
        mode: inp.mode,
        base,
        cat,
        x0: layers.first().map(|l| l.x.clone()).unwrap_or_default(),
        layers,
        h: x.clone(),
    };
    Ok((x, trace))
}

/// Accumulates exact gradients of a scalar loss into `grads`, given the
/// loss gradient w.r.t. the encoder output rows.
pub fn backward_sequence(
    d_h: &[Vec<f64>],
    trace: &Trace,
    params: &ParamSet,
    cfg: &ModelConfig,
    grads: &mut ParamSet,
) {
    let d = cfg.d_model;
    let n_heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let slots = trace.slots();
    let attention_site = trace.mode.site == InjectionSite::Attention;

    let label_vec = trace
        .mode
        .use_label()
        .then(|| params.get("lab_emb").row(trace.label_id).to_vec());
    let pos_vecs: Vec<Option<Vec<f64>>> = {
        let mut v = vec![None; slots];
        if trace.mode.use_pos() {
            let posattr = params.get("posattr_emb");
            for (j, &p) in trace.pos_ids.iter().enumerate() {
                if p != 0 {
                    v[j + 1] = Some(posattr.row(p).to_vec());
                }
            }
        }
        v
    };
    let mut d_label_vec = vec![0.0; d];
    let mut d_pos_vecs = vec![vec![0.0; d]; slots];

    let mut d_x: Vec<Vec<f64>> = d_h.to_vec();

    for (l, lt) in trace.layers.iter().enumerate().rev() {
        let wq = params.get(&format!("l{l}.wq"));
        let wk = params.get(&format!("l{l}.wk"));
        let wv = params.get(&format!("l{l}.wv"));
        let wo = params.get(&format!("l{l}.wo"));
        let w1 = params.get(&format!("l{l}.ff_w1"));
        let w2 = params.get(&format!("l{l}.ff_w2"));
        let ln1_g = params.get(&format!("l{l}.ln1_g")).data.clone();
        let ln2_g = params.get(&format!("l{l}.ln2_g")).data.clone();

        // LN2 backward -> d r2
        let mut d_r2 = Vec::with_capacity(slots);
        {
            let g2 = grads.get_mut(&format!("l{l}.ln2_g"));
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for t in 0..slots {
                d_r2.push(layer_norm_backward(
                    &d_x[t],
                    &lt.ln2.norm[t],
                    lt.ln2.inv_std[t],
                    &ln2_g,
                    &mut dg,
                    &mut db,
                ));
            }
            add_into(&mut g2.data, &dg);
            add_into(&mut grads.get_mut(&format!("l{l}.ln2_b")).data, &db);
        }

        // feed-forward backward; residual sends d_r2 into d_y too
        let mut d_y: Vec<Vec<f64>> = d_r2.clone();
        {
            let mut d_w1 = vec![0.0; cfg.d_ff * d];
            let mut d_b1 = vec![0.0; cfg.d_ff];
            let mut d_w2 = vec![0.0; d * cfg.d_ff];
            let mut d_b2 = vec![0.0; d];
            for t in 0..slots {
                let d_ffout = &d_r2[t];
                accumulate_outer(&mut d_w2, d_ffout, &lt.ff_act[t]);
                add_into(&mut d_b2, d_ffout);
                let mut d_act = matvec_t(&w2.data, d, cfg.d_ff, d_ffout);
                if let Some(m) = &lt.drop_ff {
                    for (a, &mv) in d_act.iter_mut().zip(&m[t]) {
                        *a *= mv;
                    }
                }
                let d_pre: Vec<f64> = d_act
                    .iter()
                    .zip(&lt.ff_pre[t])
                    .map(|(da, &z)| da * gelu_grad(z))
                    .collect();
                accumulate_outer(&mut d_w1, &d_pre, &lt.y[t]);
                add_into(&mut d_b1, &d_pre);
                let back = matvec_t(&w1.data, cfg.d_ff, d, &d_pre);
                add_into(&mut d_y[t], &back);
            }
            add_into(&mut grads.get_mut(&format!("l{l}.ff_w1")).data, &d_w1);
            add_into(&mut grads.get_mut(&format!("l{l}.ff_b1")).data, &d_b1);
            add_into(&mut grads.get_mut(&format!("l{l}.ff_w2")).data, &d_w2);
            add_into(&mut grads.get_mut(&format!("l{l}.ff_b2")).data, &d_b2);
        }

        // LN1 backward -> d r1
        let mut d_r1 = Vec::with_capacity(slots);
        {
            let mut dg = vec![0.0; d];
            let mut db = vec![0.0; d];
            for t in 0..slots {
                d_r1.push(layer_norm_backward(
                    &d_y[t],
                    &lt.ln1.norm[t],
                    lt.ln1.inv_std[t],
                    &ln1_g,
                    &mut dg,
                    &mut db,
                ));
            }
            add_into(&mut grads.get_mut(&format!("l{l}.ln1_g")).data, &dg);
            add_into(&mut grads.get_mut(&format!("l{l}.ln1_b")).data, &db);
        }

        // residual: d x gets d_r1 directly; attention output gets it too
        let mut d_x_prev: Vec<Vec<f64>> = d_r1.clone();

        // attention output projection backward
        let mut d_concat = vec![vec![0.0; d]; slots];
        {
            let mut d_wo = vec![0.0; d * d];
            let mut d_bo = vec![0.0; d];
            for t in 0..slots {
                accumulate_outer(&mut d_wo, &d_r1[t], &lt.attn_concat[t]);
                add_into(&mut d_bo, &d_r1[t]);
                let back = matvec_t(&wo.data, d, d, &d_r1[t]);
                add_into(&mut d_concat[t], &back);
            }
            add_into(&mut grads.get_mut(&format!("l{l}.wo")).data, &d_wo);
            add_into(&mut grads.get_mut(&format!("l{l}.bo")).data, &d_bo);
        }

        // per-head attention backward
        let scale = 1.0 / (hd as f64).sqrt();
        let mut d_q = vec![vec![0.0; d]; slots];
        let mut d_k = vec![vec![0.0; d]; slots];
        let mut d_v = vec![vec![0.0; d]; slots];
        for h in 0..n_heads {
            let lo = h * hd;
            let hi = lo + hd;
            for t in 0..slots {
                let d_out = &d_concat[t][lo..hi];
                // d probs (post-dropout), d v
                let mut d_probs_used = vec![0.0; slots];
                for s in 0..slots {
                    let mut p = lt.probs[h][t][s];
                    if let Some(m) = &lt.drop_attn {
                        p *= m[h][t][s];
                    }
                    d_probs_used[s] = dot(d_out, &lt.v[s][lo..hi]);
                    if p != 0.0 {
                        for j in 0..hd {
                            d_v[s][lo + j] += p * d_out[j];
                        }
                    }
                }
                let d_probs_raw: Vec<f64> = match &lt.drop_attn {
                    Some(m) => {
                        d_probs_used.iter().zip(&m[h][t]).map(|(dp, &mv)| dp * mv).collect()
                    }
                    None => d_probs_used,
                };
                let d_scores = softmax_backward(&lt.probs[h][t], &d_probs_raw);
                for s in 0..slots {
                    let ds = d_scores[s] * scale;
                    if ds != 0.0 {
                        for j in 0..hd {
                            d_q[t][lo + j] += ds * lt.k[s][lo + j];
                            d_k[s][lo + j] += ds * lt.q[t][lo + j];
                        }
                    }
                }
            }
        }

        // Q/K/V projection backward (plus attention-site injection weights)
        {
            let mut d_wq = vec![0.0; d * d];
            let mut d_wk = vec![0.0; d * d];
            let mut d_wv = vec![0.0; d * d];
            let mut d_bq = vec![0.0; d];
            let mut d_bk = vec![0.0; d];
            let mut d_bv = vec![0.0; d];
            let mut d_wsq = vec![0.0; d * d];
            let mut d_wpq = vec![0.0; d * d];
            let mut d_wsk = vec![0.0; d * d];
            let mut d_wpk = vec![0.0; d * d];
            let wsq = attention_site.then(|| params.get(&format!("l{l}.wsq")));
            let wpq = attention_site.then(|| params.get(&format!("l{l}.wpq")));
            let wsk = attention_site.then(|| params.get(&format!("l{l}.wsk")));
            let wpk = attention_site.then(|| params.get(&format!("l{l}.wpk")));
            for t in 0..slots {
                accumulate_outer(&mut d_wq, &d_q[t], &lt.x[t]);
                accumulate_outer(&mut d_wk, &d_k[t], &lt.x[t]);
                accumulate_outer(&mut d_wv, &d_v[t], &lt.x[t]);
                add_into(&mut d_bq, &d_q[t]);
                add_into(&mut d_bk, &d_k[t]);
                add_into(&mut d_bv, &d_v[t]);
                add_into(&mut d_x_prev[t], &matvec_t(&wq.data, d, d, &d_q[t]));
                add_into(&mut d_x_prev[t], &matvec_t(&wk.data, d, d, &d_k[t]));
                add_into(&mut d_x_prev[t], &matvec_t(&wv.data, d, d, &d_v[t]));
                if attention_site {
                    if let Some(lv) = &label_vec {
                        accumulate_outer(&mut d_wsq, &d_q[t], lv);
                        accumulate_outer(&mut d_wsk, &d_k[t], lv);
                        add_into(&mut d_label_vec, &matvec_t(&wsq.unwrap().data, d, d, &d_q[t]));
                        add_into(&mut d_label_vec, &matvec_t(&wsk.unwrap().data, d, d, &d_k[t]));
                    }
                    if let Some(pv) = &pos_vecs[t] {
                        accumulate_outer(&mut d_wpq, &d_q[t], pv);
                        accumulate_outer(&mut d_wpk, &d_k[t], pv);
                        add_into(&mut d_pos_vecs[t], &matvec_t(&wpq.unwrap().data, d, d, &d_q[t]));
                        add_into(&mut d_pos_vecs[t], &matvec_t(&wpk.unwrap().data, d, d, &d_k[t]));
                    }
                }
            }
            add_into(&mut grads.get_mut(&format!("l{l}.wq")).data, &d_wq);
            add_into(&mut grads.get_mut(&format!("l{l}.wk")).data, &d_wk);
            add_into(&mut grads.get_mut(&format!("l{l}.wv")).data, &d_wv);
            add_into(&mut grads.get_mut(&format!("l{l}.bq")).data, &d_bq);
            add_into(&mut grads.get_mut(&format!("l{l}.bk")).data, &d_bk);
            add_into(&mut grads.get_mut(&format!("l{l}.bv")).data, &d_bv);
            if attention_site {
                add_into(&mut grads.get_mut(&format!("l{l}.wsq")).data, &d_wsq);
                add_into(&mut grads.get_mut(&format!("l{l}.wpq")).data, &d_wpq);
                add_into(&mut grads.get_mut(&format!("l{l}.wsk")).data, &d_wsk);
                add_into(&mut grads.get_mut(&format!("l{l}.wpk")).data, &d_wpk);
            }
        }

        d_x = d_x_prev;
    }

    // embedding backward
    let mut d_base: Vec<Vec<f64>> = vec![vec![0.0; d]; slots];
    match trace.mode.site {
        InjectionSite::Embedding => {
            let proj = params.get("emb_proj");
            let cat = trace.cat.as_ref().expect("embedding mode trace has cat rows");
            let mut d_proj = vec![0.0; d * 3 * d];
            for t in 0..slots {
                accumulate_outer(&mut d_proj, &d_x[t], &cat[t]);
                let d_cat = matvec_t(&proj.data, d, 3 * d, &d_x[t]);
                add_into(&mut d_base[t], &d_cat[..d]);
                if label_vec.is_some() {
                    add_into(&mut d_label_vec, &d_cat[d..2 * d]);
                }
                if pos_vecs[t].is_some() {
                    add_into(&mut d_pos_vecs[t], &d_cat[2 * d..]);
                }
            }
            add_into(&mut grads.get_mut("emb_proj").data, &d_proj);
        }
        InjectionSite::Attention => {
            for t in 0..slots {
                add_into(&mut d_base[t], &d_x[t]);
                if t > 0 && label_vec.is_some() {
                    add_into(&mut d_label_vec, &d_x[t]);
                }
                if pos_vecs[t].is_some() {
                    add_into(&mut d_pos_vecs[t], &d_x[t]);
                }
            }
        }
        _ => {
            for t in 0..slots {
                add_into(&mut d_base[t], &d_x[t]);
            }
        }
    }

    {
        let posit = grads.get_mut("posit_emb");
        for (t, db) in d_base.iter().enumerate() {
            add_into(posit.row_mut(t), db);
        }
    }
    add_into(&mut grads.get_mut("cls_emb").data, &d_base[0]);
    {
        let tok = grads.get_mut("tok_emb");
        for (j, &id) in trace.token_ids.iter().enumerate() {
            add_into(tok.row_mut(id), &d_base[j + 1]);
        }
    }
    if trace.mode.use_label() {
        add_into(grads.get_mut("lab_emb").row_mut(trace.label_id), &d_label_vec);
    }
    if trace.mode.use_pos() {
        let posattr = grads.get_mut("posattr_emb");
        for (j, &p) in trace.pos_ids.iter().enumerate() {
            if p != 0 {
                add_into(posattr.row_mut(p), &d_pos_vecs[j + 1]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    fn cfg() -> ModelConfig {
        let mut c = ModelConfig::tiny(12, 5, 3, 3);
        c.n_layers = 1;
        c
    }

    fn input<'a>(tok: &'a [usize], pos: &'a [usize]) -> SeqInput<'a> {
        SeqInput { token_ids: tok, pos_ids: pos, label_id: 0, mode: InjectionMode::none() }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = cfg();
        let p = init_params(&c, 5).unwrap();
        let toks = [4usize];
        let pos = [1usize];
        let (h1, _) = encode_sequence(&input(&toks, &pos), &p, &c, None).unwrap();
        let (h2, _) = encode_sequence(&input(&toks, &pos), &p, &c, None).unwrap();
        assert_eq!(h1, h2);
    }

    #[test]
    fn id_out_of_range_is_an_error() {
        let c = cfg();
        let p = init_params(&c, 5).unwrap();
        let toks = [99usize];
        let pos = [1usize];
        assert!(encode_sequence(&input(&toks, &pos), &p, &c, None).is_err());
    }

    #[test]
    fn attention_equal_keys_split_evenly() {
        let q = vec![vec![1.0, 0.0]];
        let k = vec![vec![0.5, 0.5], vec![0.5, 0.5]];
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (w, mixed) = attention(&q, &k, &v, &[1, 1]);
        assert!((w[0][0] - 0.5).abs() < 1e-12);
        assert!((w[0][1] - 0.5).abs() < 1e-12);
        assert!((mixed[0][0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn attention_mask_renormalizes() {
        let q = vec![vec![1.0, 2.0]];
        let k = vec![vec![0.3, -0.4], vec![1.5, 0.9]];
        let v = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let (w, mixed) = attention(&q, &k, &v, &[1, 0]);
        assert_eq!(w[0][0], 1.0);
        assert_eq!(w[0][1], 0.0);
        assert_eq!(mixed[0], vec![1.0, 0.0]);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let rand_rows = |rng: &mut rand_chacha::ChaCha8Rng, n: usize, d: usize| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()
        };
        let q = rand_rows(&mut rng, 4, 3);
        let k = rand_rows(&mut rng, 4, 3);
        let v = rand_rows(&mut rng, 4, 3);
        let (w, _) = attention(&q, &k, &v, &[1, 1, 1, 1]);
        for row in &w {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn layer_norm_invariant() {
        let x = vec![3.0, -1.0, 0.5, 2.0];
        let g = vec![1.0; 4];
        let b = vec![0.0; 4];
        let (out, _, _) = layer_norm(&x, &g, &b);
        let mean: f64 = out.iter().sum::<f64>() / 4.0;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-6);
        assert!((var - 1.0).abs() < 1e-6);
    }

    #[test]
    fn doubling_output_grad_doubles_param_grads() {
        let c = cfg();
        let p = init_params(&c, 9).unwrap();
        let toks = [2usize, 3];
        let pos = [1usize, 2];
        let (h, trace) = encode_sequence(&input(&toks, &pos), &p, &c, None).unwrap();
        let d_h: Vec<Vec<f64>> = h.iter().map(|r| r.iter().map(|v| v * 0.1).collect()).collect();
        let d_h2: Vec<Vec<f64>> = d_h.iter().map(|r| r.iter().map(|v| v * 2.0).collect()).collect();
        let mut g1 = p.zeros_like();
        let mut g2 = p.zeros_like();
        backward_sequence(&d_h, &trace, &p, &c, &mut g1);
        backward_sequence(&d_h2, &trace, &p, &c, &mut g2);
        for ((_, a), (_, b)) in g1.iter().zip(g2.iter()) {
            for (x, y) in a.tensor.data.iter().zip(&b.tensor.data) {
                assert!((2.0 * x - y).abs() < 1e-12);
            }
        }
    }
}
