//! Output heads: token-level NER emissions (with the classifier injection
//! site), the entailment-reformulated sentence classifier, and the joint
//! sentence-label + NER objective.

use indexmap::IndexMap;
use thiserror::Error;

use crate::corpus::{Sentence, Vocabulary, EOS_TOKEN, SEP_TOKEN};
use crate::injection::{self, InjectionMode, InjectionSite};
use crate::model::config::ModelConfig;
use crate::model::encoder::{self, dot, SeqInput};
use crate::model::params::ParamSet;

#[derive(Debug, Error)]
pub enum HeadError {
    #[error("no template for label {0:?}")]
    MissingTemplate(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("encoding error: {0}")]
    Encode(#[from] crate::model::encoder::EncodeError),
}

/// Per-token tag logits. `first_token_slot` is where raw tokens begin in
/// the encoded sequence (after the classification slot and, in text mode,
/// the label pseudo-token).
pub fn ner_head(
    h: &[Vec<f64>],
    first_token_slot: usize,
    n_tokens: usize,
    label_id: usize,
    raw_pos_ids: &[usize],
    mode: InjectionMode,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Vec<Vec<f64>> {
    let d = cfg.d_model;
    let k = cfg.n_tags;
    let tag_w = params.get("tag_w");
    let tag_b = params.get("tag_b");
    let classifier_site = mode.site == InjectionSite::Classifier;
    let label_vec = (classifier_site && mode.channels.use_label)
        .then(|| params.get("lab_emb").row(label_id).to_vec());
    let mut out = Vec::with_capacity(n_tokens);
    for i in 0..n_tokens {
        let hi = &h[first_token_slot + i];
        let mut logits: Vec<f64> = (0..k).map(|t| dot(tag_w.row(t), hi) + tag_b.data[t]).collect();
        if classifier_site {
            let pos_vec = (mode.channels.use_pos && raw_pos_ids[i] != 0)
                .then(|| params.get("posattr_emb").row(raw_pos_ids[i]).to_vec());
            let bias = injection::classifier_bias(
                &params.get("tag_ws").data,
                label_vec.as_deref(),
                &params.get("tag_wp").data,
                pos_vec.as_deref(),
                k,
                d,
            );
            for (l, b) in logits.iter_mut().zip(&bias) {
                *l += b;
            }
        }
        out.push(logits);
    }
    out
}

/// Backward of [`ner_head`]: accumulates parameter gradients and adds the
/// hidden-state gradient into `d_h`.
#[allow(clippy::too_many_arguments)]
pub fn ner_head_backward(
    d_emissions: &[Vec<f64>],
    h: &[Vec<f64>],
    first_token_slot: usize,
    label_id: usize,
    raw_pos_ids: &[usize],
    mode: InjectionMode,
    params: &ParamSet,
    cfg: &ModelConfig,
    grads: &mut ParamSet,
    d_h: &mut [Vec<f64>],
) {
    let d = cfg.d_model;
    let tag_w = params.get("tag_w").clone();
    let classifier_site = mode.site == InjectionSite::Classifier;
    let use_label = classifier_site && mode.channels.use_label;
    let use_pos = classifier_site && mode.channels.use_pos;
    let label_vec = use_label.then(|| params.get("lab_emb").row(label_id).to_vec());
    let tag_ws = use_label.then(|| params.get("tag_ws").clone());
    let tag_wp = use_pos.then(|| params.get("tag_wp").clone());

    let mut d_label_vec = vec![0.0; d];
    for (i, de) in d_emissions.iter().enumerate() {
        let slot = first_token_slot + i;
        let hi = h[slot].clone();
        {
            let gw = grads.get_mut("tag_w");
            for (t, &g) in de.iter().enumerate() {
                for (w, &x) in gw.row_mut(t).iter_mut().zip(&hi) {
                    *w += g * x;
                }
            }
        }
        for (t, &g) in de.iter().enumerate() {
            grads.get_mut("tag_b").data[t] += g;
            for (dh, &w) in d_h[slot].iter_mut().zip(tag_w.row(t)) {
                *dh += g * w;
            }
        }
        if let (Some(lv), Some(ws)) = (&label_vec, &tag_ws) {
            let gw = grads.get_mut("tag_ws");
            for (t, &g) in de.iter().enumerate() {
                for (w, &x) in gw.row_mut(t).iter_mut().zip(lv) {
                    *w += g * x;
                }
                for (dl, &w) in d_label_vec.iter_mut().zip(ws.row(t)) {
                    *dl += g * w;
                }
            }
        }
        if use_pos && raw_pos_ids[i] != 0 {
            let pv = params.get("posattr_emb").row(raw_pos_ids[i]).to_vec();
            let wp = tag_wp.as_ref().unwrap();
            let mut d_pv = vec![0.0; d];
            {
                let gw = grads.get_mut("tag_wp");
                for (t, &g) in de.iter().enumerate() {
                    for (w, &x) in gw.row_mut(t).iter_mut().zip(&pv) {
                        *w += g * x;
                    }
                    for (dp, &w) in d_pv.iter_mut().zip(wp.row(t)) {
                        *dp += g * w;
                    }
                }
            }
            let ge = grads.get_mut("posattr_emb");
            for (g, &v) in ge.row_mut(raw_pos_ids[i]).iter_mut().zip(&d_pv) {
                *g += v;
            }
        }
    }
    if use_label {
        let ge = grads.get_mut("lab_emb");
        for (g, &v) in ge.row_mut(label_id).iter_mut().zip(&d_label_vec) {
            *g += v;
        }
    }
}

/// Sentence-label logits from the classification slot.
pub fn sentence_head(h0: &[f64], params: &ParamSet) -> Vec<f64> {
    let w = params.get("sent_w");
    let b = params.get("sent_b");
    (0..w.shape[0]).map(|i| dot(w.row(i), h0) + b.data[i]).collect()
}

pub fn sentence_head_backward(
    d_logits: &[f64],
    h0: &[f64],
    params: &ParamSet,
    grads: &mut ParamSet,
    d_h0: &mut [f64],
) {
    let w = params.get("sent_w").clone();
    let gw = grads.get_mut("sent_w");
    for (i, &g) in d_logits.iter().enumerate() {
        for (wv, &x) in gw.row_mut(i).iter_mut().zip(h0) {
            *wv += g * x;
        }
    }
    for (i, &g) in d_logits.iter().enumerate() {
        grads.get_mut("sent_b").data[i] += g;
        for (dh, &wv) in d_h0.iter_mut().zip(w.row(i)) {
            *dh += g * wv;
        }
    }
}

/// Binary entailment logit from the classification slot.
pub fn entailment_logit(h0: &[f64], params: &ParamSet) -> f64 {
    dot(&params.get("ent_w").data, h0) + params.get("ent_b").data[0]
}

pub fn entailment_backward(
    d_logit: f64,
    h0: &[f64],
    params: &ParamSet,
    grads: &mut ParamSet,
    d_h0: &mut [f64],
) {
    let w = params.get("ent_w").clone();
    {
        let gw = grads.get_mut("ent_w");
        for (g, &x) in gw.data.iter_mut().zip(h0) {
            *g += d_logit * x;
        }
    }
    grads.get_mut("ent_b").data[0] += d_logit;
    for (dh, &wv) in d_h0.iter_mut().zip(&w.data) {
        *dh += d_logit * wv;
    }
}

/// Cross-entropy over a logit vector; returns loss and d loss / d logits.
pub fn softmax_ce(logits: &[f64], gold: usize) -> (f64, Vec<f64>) {
    let probs = encoder::softmax(logits);
    let loss = -probs[gold].max(1e-300).ln();
    let mut d = probs;
    d[gold] -= 1.0;
    (loss, d)
}

/// Numerically stable binary cross-entropy on a raw logit.
pub fn bce_logit(logit: f64, target: f64) -> (f64, f64) {
    let loss = logit.max(0.0) - logit * target + (1.0 + (-logit.abs()).exp()).ln();
    let sig = 1.0 / (1.0 + (-logit).exp());
    (loss, sig - target)
}

/// Sentence loss and NER loss summed with a configurable sentence weight
/// (default 1.0).
pub fn combine_joint(sentence_loss: f64, ner_loss: f64, sentence_weight: f64) -> f64 {
    sentence_weight * sentence_loss + ner_loss
}

/// label -> template with one `{type}` slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateSet {
    templates: IndexMap<String, String>,
}

impl TemplateSet {
    /// Count-aware defaults covering the `T-one` / `T-more` / `None` label
    /// family plus bare type labels.
    pub fn default_for(labels: &[&str]) -> TemplateSet {
        let mut templates = IndexMap::new();
        for &label in labels {
            let t = if label == "None" {
                "It contains no entity mention".to_string()
            } else if label.ends_with("-one") {
                "It contains one {type} mention".to_string()
            } else if label.ends_with("-more") {
                "It contains more than one {type} mention".to_string()
            } else {
                "It contains a {type} mention".to_string()
            };
            templates.insert(label.to_string(), t);
        }
        TemplateSet { templates }
    }

    pub fn parse(text: &str) -> Result<TemplateSet, HeadError> {
        let mut templates = IndexMap::new();
        for line in text.lines() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let (label, tpl) = line
                .split_once('\t')
                .ok_or_else(|| HeadError::Template(format!("bad template line {line:?}")))?;
            templates.insert(label.to_string(), tpl.to_string());
        }
        Ok(TemplateSet { templates })
    }

    fn entity_type_of(label: &str) -> &str {
        label
            .strip_suffix("-one")
            .or_else(|| label.strip_suffix("-more"))
            .unwrap_or(label)
    }

    /// Renders the hypothesis for a label as whitespace tokens.
    pub fn render(&self, label: &str) -> Result<Vec<String>, HeadError> {
        let tpl = self
            .templates
            .get(label)
            .ok_or_else(|| HeadError::MissingTemplate(label.to_string()))?;
        let ty = Self::entity_type_of(label).to_lowercase();
        let rendered = tpl.replace("{type}", &ty);
        Ok(rendered.split_whitespace().map(str::to_string).collect())
    }

    pub fn covers(&self, label: &str) -> bool {
        self.templates.contains_key(label)
    }
}

/// One premise/hypothesis pair with its candidate label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntailmentInstance {
    pub premise: Vec<String>,
    pub hypothesis: Vec<String>,
    pub candidate_label: String,
    /// Training target: true = entail. None at inference.
    pub target: Option<bool>,
}

impl EntailmentInstance {
    /// Full token sequence: premise [SEP] hypothesis [EOS].
    pub fn tokens(&self) -> Vec<String> {
        let mut out = self.premise.clone();
        out.push(SEP_TOKEN.to_string());
        out.extend(self.hypothesis.iter().cloned());
        out.push(EOS_TOKEN.to_string());
        out
    }
}

/// Reformulates sentence classification as entailment: one instance per
/// candidate label; when `gold_label` is given, exactly that instance
/// targets entail.
pub fn reformulate_entailment(
    s: &Sentence,
    templates: &TemplateSet,
    candidate_labels: &[&str],
    gold_label: Option<&str>,
) -> Result<Vec<EntailmentInstance>, HeadError> {
    let mut out = Vec::with_capacity(candidate_labels.len());
    for &label in candidate_labels {
        let hypothesis = templates.render(label)?;
        out.push(EntailmentInstance {
            premise: s.tokens.clone(),
            hypothesis,
            candidate_label: label.to_string(),
            target: gold_label.map(|g| g == label),
        });
    }
    Ok(out)
}

/// Encodes one entailment instance and returns the encoder input ids.
/// Hypothesis tokens and separators carry no POS attribute.
pub fn entailment_ids(
    inst: &EntailmentInstance,
    s: &Sentence,
    v: &Vocabulary,
) -> (Vec<usize>, Vec<usize>) {
    let tokens = inst.tokens();
    let mut tok_ids = Vec::with_capacity(tokens.len());
    let mut pos_ids = Vec::with_capacity(tokens.len());
    for (i, t) in tokens.iter().enumerate() {
        tok_ids.push(v.token_id(t));
        pos_ids.push(if i < s.len() { v.pos_id(&s.pos[i]) } else { 0 });
    }
    (tok_ids, pos_ids)
}

/// Entailment probability of one instance under the classifier parameters.
pub fn score_entailment(
    inst: &EntailmentInstance,
    s: &Sentence,
    params: &ParamSet,
    cfg: &ModelConfig,
    v: &Vocabulary,
) -> Result<f64, HeadError> {
    let (tok_ids, pos_ids) = entailment_ids(inst, s, v);
    let inp = SeqInput {
        token_ids: &tok_ids,
        pos_ids: &pos_ids,
        label_id: 0,
        mode: InjectionMode::none(),
    };
    let (h, _) = encoder::encode_sequence(&inp, params, cfg, None)?;
    let z = entailment_logit(&h[0], params);
    Ok(1.0 / (1.0 + (-z).exp()))
}

/// Predicted label = argmax entailment probability over candidates, ties
/// broken toward the lowest label id.
pub fn classify_sentence(
    s: &Sentence,
    params: &ParamSet,
    cfg: &ModelConfig,
    v: &Vocabulary,
    templates: &TemplateSet,
) -> Result<(String, Vec<(String, f64)>), HeadError> {
    let labels = v.labels();
    let mut scores = Vec::with_capacity(labels.len());
    let mut best: Option<(usize, f64)> = None;
    for (id, &label) in labels.iter().enumerate() {
        let insts = reformulate_entailment(s, templates, &[label], None)?;
        let p = score_entailment(&insts[0], s, params, cfg, v)?;
        scores.push((label.to_string(), p));
        if best.map(|(_, bp)| p > bp).unwrap_or(true) {
            best = Some((id, p));
        }
    }
    let (best_id, _) = best.expect("at least one candidate label");
    Ok((labels[best_id].to_string(), scores))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::{init_params, Tensor};

    fn sentence(tokens: &[&str]) -> Sentence {
        Sentence {
            tokens: tokens.iter().map(|s| s.to_string()).collect(),
            pos: tokens.iter().map(|_| "NN".to_string()).collect(),
            gold_tags: None,
            sentence_label: None,
            bio_valid: true,
        }
    }

    #[test]
    fn templates_render_count_variants() {
        let t = TemplateSet::default_for(&["Disease-one", "Disease-more", "None", "Disease"]);
        assert_eq!(
            t.render("Disease-one").unwrap().join(" "),
            "It contains one disease mention"
        );
        assert_eq!(
            t.render("Disease-more").unwrap().join(" "),
            "It contains more than one disease mention"
        );
        assert_eq!(t.render("None").unwrap().join(" "), "It contains no entity mention");
        assert_eq!(t.render("Disease").unwrap().join(" "), "It contains a disease mention");
    }

    #[test]
    fn reformulation_has_one_entail_target() {
        let t = TemplateSet::default_for(&["A-one", "B-one", "None"]);
        let s = sentence(&["x", "y"]);
        let insts =
            reformulate_entailment(&s, &t, &["A-one", "B-one", "None"], Some("B-one")).unwrap();
        assert_eq!(insts.len(), 3);
        let entails: Vec<_> = insts.iter().filter(|i| i.target == Some(true)).collect();
        assert_eq!(entails.len(), 1);
        assert_eq!(entails[0].candidate_label, "B-one");
    }

    #[test]
    fn reformulation_token_layout() {
        let t = TemplateSet::default_for(&["Disease"]);
        let s = sentence(&["Torsades", "de", "Pointes"]);
        let insts = reformulate_entailment(&s, &t, &["Disease"], Some("Disease")).unwrap();
        let toks = insts[0].tokens();
        assert_eq!(
            toks.join(" "),
            "Torsades de Pointes [SEP] It contains a disease mention [EOS]"
        );
        assert_eq!(insts[0].target, Some(true));
    }

    #[test]
    fn missing_template_names_label() {
        let t = TemplateSet::default_for(&["A-one"]);
        let s = sentence(&["x"]);
        let err = reformulate_entailment(&s, &t, &["B-one"], None).unwrap_err();
        assert!(err.to_string().contains("B-one"));
    }

    #[test]
    fn zero_entailment_head_ties_break_low() {
        use crate::corpus::{build_vocab, parse_column_file};
        let text = "#scheme: A\n\n#label: A-one\nx\tNN\tB-A\n\n#label: None\ny\tNN\tO\n";
        let c = parse_column_file(text, "train").unwrap();
        let v = build_vocab(&c, 1).unwrap();
        let cfg = ModelConfig::tiny(v.num_tokens(), v.num_pos(), v.num_labels(), 3);
        let mut p = init_params(&cfg, 0).unwrap();
        *p.get_mut("ent_w") = Tensor::zeros(&[cfg.d_model]);
        *p.get_mut("ent_b") = Tensor::zeros(&[1]);
        let t = TemplateSet::default_for(&v.labels());
        let s = sentence(&["x"]);
        let (label, scores) = classify_sentence(&s, &p, &cfg, &v, &t).unwrap();
        for (_, p) in &scores {
            assert!((p - 0.5).abs() < 1e-12);
        }
        // lowest label id wins the tie
        assert_eq!(label, v.label_name(0).unwrap());
    }

    #[test]
    fn sentence_head_zero_weights_uniform() {
        let cfg = ModelConfig::tiny(10, 4, 3, 3);
        let mut p = init_params(&cfg, 0).unwrap();
        *p.get_mut("sent_w") = Tensor::zeros(&[cfg.n_labels, cfg.d_model]);
        let h0 = vec![0.3; cfg.d_model];
        let logits = sentence_head(&h0, &p);
        assert_eq!(logits.len(), cfg.n_labels);
        let probs = encoder::softmax(&logits);
        for pr in probs {
            assert!((pr - 1.0 / cfg.n_labels as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_ce_gradient_sums_to_zero() {
        let (loss, d) = softmax_ce(&[0.2, -1.0, 0.5], 2);
        assert!(loss > 0.0);
        assert!(d.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn bce_matches_reference() {
        let (loss, grad) = bce_logit(0.0, 1.0);
        assert!((loss - (2.0f64).ln()).abs() < 1e-12);
        assert!((grad + 0.5).abs() < 1e-12);
    }

    #[test]
    fn joint_combination_is_additive() {
        assert_eq!(combine_joint(1.5, 2.5, 1.0), 4.0);
        assert_eq!(combine_joint(1.5, 2.5, 0.0), 2.5);
    }
}
