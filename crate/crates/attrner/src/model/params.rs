//! Named parameter tensors and deterministic initialization.

use indexmap::IndexMap;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use super::config::{ConfigError, ModelConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; len] }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn uniform(shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a 2-d tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.shape[1];
        &mut self.data[i * w..(i + 1) * w]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    /// Weight decay applies only to genuine weight matrices/embeddings, not
    /// biases or layer-norm parameters.
    pub decay: bool,
}

/// Ordered collection of named tensors. The same structure holds gradients
/// and optimizer moments.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamSet {
    entries: IndexMap<String, ParamEntry>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor, decay: bool) {
        let name = name.into();
        let prev = self.entries.insert(name.clone(), ParamEntry { tensor, decay });
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> &Tensor {
        &self.entries.get(name).unwrap_or_else(|| panic!("missing parameter {name}")).tensor
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor {
        &mut self.entries.get_mut(name).unwrap_or_else(|| panic!("missing parameter {name}")).tensor
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut ParamEntry)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.keys().cloned().collect()
    }

    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, e) in &self.entries {
            out.register(name.clone(), Tensor::zeros(&e.tensor.shape), e.decay);
        }
        out
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(|e| e.tensor.data.iter().all(|v| v.is_finite()))
    }

    /// Zeroes every attribute-specific tensor so injected runs reduce to the
    /// baseline: the attention/classifier injection weights, the attribute
    /// embedding tables, and the attribute columns of the embedding-mode
    /// projection.
    pub fn zero_attribute_weights(&mut self, cfg: &ModelConfig) {
        let d = cfg.d_model;
        for (name, e) in self.entries.iter_mut() {
            if name == "lab_emb"
                || name == "posattr_emb"
                || name == "tag_ws"
                || name == "tag_wp"
                || name.ends_with(".wsq")
                || name.ends_with(".wpq")
                || name.ends_with(".wsk")
                || name.ends_with(".wpk")
            {
                e.tensor.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let proj = self.get_mut("emb_proj");
        for i in 0..d {
            for j in d..3 * d {
                proj.data[i * 3 * d + j] = 0.0;
            }
        }
    }
}

/// Deterministic initialization: scaled uniform in
/// [-1/sqrt(d_model), 1/sqrt(d_model)] for weights and embeddings, zero
/// biases, unit layer-norm scales. The embedding-mode projection starts as
/// [I | 0 | 0] so training begins at baseline behavior.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamSet, ConfigError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = cfg.d_model;
    let bound = 1.0 / (d as f64).sqrt();
    let mut p = ParamSet::new();

    let uni = |shape: &[usize], rng: &mut ChaCha8Rng| Tensor::uniform(shape, bound, rng);

    p.register("tok_emb", uni(&[cfg.n_tokens, d], &mut rng), true);
    p.register("posit_emb", uni(&[cfg.max_len + 1, d], &mut rng), true);
    p.register("cls_emb", uni(&[d], &mut rng), true);
    p.register("lab_emb", uni(&[cfg.n_labels, d], &mut rng), true);
    p.register("posattr_emb", uni(&[cfg.n_pos, d], &mut rng), true);

    let mut proj = Tensor::zeros(&[d, 3 * d]);
    for i in 0..d {
        proj.data[i * 3 * d + i] = 1.0;
    }
    p.register("emb_proj", proj, true);

    for l in 0..cfg.n_layers {
        for mat in ["wq", "wk", "wv", "wo"] {
            p.register(format!("l{l}.{mat}"), uni(&[d, d], &mut rng), true);
        }
        for bias in ["bq", "bk", "bv", "bo"] {
            p.register(format!("l{l}.{bias}"), Tensor::zeros(&[d]), false);
        }
        for mat in ["wsq", "wpq", "wsk", "wpk"] {
            p.register(format!("l{l}.{mat}"), uni(&[d, d], &mut rng), true);
        }
        p.register(format!("l{l}.ln1_g"), Tensor::filled(&[d], 1.0), false);
        p.register(format!("l{l}.ln1_b"), Tensor::zeros(&[d]), false);
        p.register(format!("l{l}.ff_w1"), uni(&[cfg.d_ff, d], &mut rng), true);
        p.register(format!("l{l}.ff_b1"), Tensor::zeros(&[cfg.d_ff]), false);
        p.register(format!("l{l}.ff_w2"), uni(&[d, cfg.d_ff], &mut rng), true);
        p.register(format!("l{l}.ff_b2"), Tensor::zeros(&[d]), false);
        p.register(format!("l{l}.ln2_g"), Tensor::filled(&[d], 1.0), false);
        p.register(format!("l{l}.ln2_b"), Tensor::zeros(&[d]), false);
    }

    p.register("tag_w", uni(&[cfg.n_tags, d], &mut rng), true);
    p.register("tag_b", Tensor::zeros(&[cfg.n_tags]), false);
    p.register("tag_ws", uni(&[cfg.n_tags, d], &mut rng), true);
    p.register("tag_wp", uni(&[cfg.n_tags, d], &mut rng), true);

    p.register("sent_w", uni(&[cfg.n_labels, d], &mut rng), true);
    p.register("sent_b", Tensor::zeros(&[cfg.n_labels]), false);
    p.register("ent_w", uni(&[d], &mut rng), true);
    p.register("ent_b", Tensor::zeros(&[1]), false);

    p.register("crf_trans", uni(&[cfg.n_tags, cfg.n_tags], &mut rng), true);
    p.register("crf_start", uni(&[cfg.n_tags], &mut rng), true);
    p.register("crf_end", uni(&[cfg.n_tags], &mut rng), true);

    Ok(p)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> ModelConfig {
        ModelConfig::tiny(10, 4, 3, 3)
    }

    #[test]
    fn same_seed_same_params() {
        let a = init_params(&cfg(), 42).unwrap();
        let b = init_params(&cfg(), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_differ() {
        let a = init_params(&cfg(), 1).unwrap();
        let b = init_params(&cfg(), 2).unwrap();
        assert!(a.iter().zip(b.iter()).any(|((_, x), (_, y))| x.tensor != y.tensor));
    }

    #[test]
    fn attribute_embedding_dims_match_hidden() {
        let c = cfg();
        let p = init_params(&c, 0).unwrap();
        assert_eq!(p.get("lab_emb").shape, vec![c.n_labels, c.d_model]);
        assert_eq!(p.get("posattr_emb").shape, vec![c.n_pos, c.d_model]);
    }

    #[test]
    fn biases_start_at_zero() {
        let p = init_params(&cfg(), 3).unwrap();
        assert!(p.get("l0.bq").data.iter().all(|&v| v == 0.0));
        assert!(p.get("tag_b").data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn emb_proj_starts_as_identity_on_token_block() {
        let c = cfg();
        let p = init_params(&c, 3).unwrap();
        let proj = p.get("emb_proj");
        let d = c.d_model;
        for i in 0..d {
            for j in 0..3 * d {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_eq!(proj.data[i * 3 * d + j], expect);
            }
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let mut c = cfg();
        c.n_heads = 3; // 8 % 3 != 0
        assert!(init_params(&c, 0).is_err());
        c = cfg();
        c.dropout_rate = 1.0;
        assert!(init_params(&c, 0).is_err());
    }
}
