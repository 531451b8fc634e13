//! Glue between encoder, heads and CRF: per-sentence loss with full
//! gradients, tag decoding, and corpus-level evaluation.

use thiserror::Error;

use crate::corpus::{CorpusError, Sentence, Vocabulary, PAD_ID};
use crate::crf::{self, ConstraintMask, CrfError, CrfParams};
use crate::heads;
use crate::injection::{attr_token, InjectionMode, InjectionSite};
use crate::model::config::ModelConfig;
use crate::model::encoder::{self, Dropout, SeqInput};
use crate::model::params::ParamSet;
use crate::tagging::{self, PrecisionRecallF1, Span, TagScheme, TagSequence};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Crf(#[from] CrfError),
    #[error(transparent)]
    Encode(#[from] crate::model::encoder::EncodeError),
    #[error(transparent)]
    Head(#[from] crate::heads::HeadError),
    #[error("engine error: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Softmax,
    Crf,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self, EngineError> {
        match s {
            "softmax" => Ok(HeadKind::Softmax),
            "crf" => Ok(HeadKind::Crf),
            other => Err(EngineError::Invalid(format!("unknown head kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Softmax => "softmax",
            HeadKind::Crf => "crf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunKind {
    NerOnly,
    Pipeline,
    Joint,
}

impl RunKind {
    pub fn parse(s: &str) -> Result<Self, EngineError> {
        match s {
            "ner-only" => Ok(RunKind::NerOnly),
            "pipeline" => Ok(RunKind::Pipeline),
            "joint" => Ok(RunKind::Joint),
            other => Err(EngineError::Invalid(format!("unknown run kind {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            RunKind::NerOnly => "ner-only",
            RunKind::Pipeline => "pipeline",
            RunKind::Joint => "joint",
        }
    }
}

/// One sentence in model-ready form. `token_ids` includes the text-mode
/// pseudo-token when present; `token_offset` tells where raw tokens start.
#[derive(Debug, Clone)]
pub struct SentenceExample {
    pub token_ids: Vec<usize>,
    pub pos_ids: Vec<usize>,
    pub label_id: usize,
    pub gold_tags: Option<TagSequence>,
    pub token_offset: usize,
}

impl SentenceExample {
    pub fn n_tokens(&self) -> usize {
        self.token_ids.len() - self.token_offset
    }

    pub fn raw_pos_ids(&self) -> &[usize] {
        &self.pos_ids[self.token_offset..]
    }
}

/// Encodes one sentence to ids. `label_override` substitutes a predicted
/// sentence label for the annotated one (pipeline inference).
pub fn encode_example(
    s: &Sentence,
    v: &Vocabulary,
    mode: InjectionMode,
    max_len: usize,
    label_override: Option<&str>,
) -> Result<SentenceExample, EngineError> {
    if s.is_empty() {
        return Err(EngineError::Invalid("sentence with no tokens".into()));
    }
    let label = label_override.or(s.sentence_label.as_deref());
    let label_id = label.and_then(|l| v.label_id(l));
    if mode.use_label() && label_id.is_none() {
        return Err(EngineError::Invalid(format!(
            "mode {:?} needs a sentence label known to the vocabulary, got {label:?}",
            mode.site.name()
        )));
    }
    let text_mode = mode.site == InjectionSite::Text;
    let token_offset = usize::from(text_mode);
    let mut token_ids = Vec::with_capacity(s.len() + token_offset);
    let mut pos_ids = Vec::with_capacity(s.len() + token_offset);
    if text_mode {
        token_ids.push(v.token_id(&attr_token(label.unwrap())));
        pos_ids.push(PAD_ID);
    }
    for (t, p) in s.tokens.iter().zip(&s.pos) {
        token_ids.push(v.token_id(t));
        pos_ids.push(v.pos_id(p));
    }
    if token_ids.len() > max_len {
        return Err(EngineError::Invalid(format!(
            "sentence of augmented length {} exceeds max_len {max_len}",
            token_ids.len()
        )));
    }
    Ok(SentenceExample {
        token_ids,
        pos_ids,
        label_id: label_id.unwrap_or(0),
        gold_tags: s.gold_tags.clone(),
        token_offset,
    })
}

/// Shared per-run settings for loss and decoding.
pub struct TaskConfig<'a> {
    pub model: &'a ModelConfig,
    pub mode: InjectionMode,
    pub head: HeadKind,
    pub constraints: Option<&'a ConstraintMask>,
    pub sentence_loss_weight: f64,
}

pub struct LossParts {
    pub total: f64,
    pub ner: f64,
    pub sentence: f64,
}

/// Loss plus exact gradients for one sentence. `sentence_gold` enables the
/// joint objective with the given gold sentence-label id.
pub fn sentence_loss_grads(
    ex: &SentenceExample,
    sentence_gold: Option<usize>,
    task: &TaskConfig,
    params: &ParamSet,
    grads: &mut ParamSet,
    dropout: Option<&mut Dropout>,
) -> Result<LossParts, EngineError> {
    let gold = ex
        .gold_tags
        .as_ref()
        .ok_or_else(|| EngineError::Invalid("training sentence without gold tags".into()))?;
    let inp = SeqInput {
        token_ids: &ex.token_ids,
        pos_ids: &ex.pos_ids,
        label_id: ex.label_id,
        mode: task.mode,
    };
    let (h, trace) = encoder::encode_sequence(&inp, params, task.model, dropout)?;
    let first_token_slot = 1 + ex.token_offset;
    let n = ex.n_tokens();
    let emissions = heads::ner_head(
        &h,
        first_token_slot,
        n,
        ex.label_id,
        ex.raw_pos_ids(),
        task.mode,
        params,
        task.model,
    );

    let (ner_loss, d_emissions) = match task.head {
        HeadKind::Softmax => {
            let mut loss = 0.0;
            let mut d = Vec::with_capacity(n);
            for (row, &g) in emissions.iter().zip(&gold.labels) {
                let (l, dr) = heads::softmax_ce(row, g);
                loss += l;
                d.push(dr);
            }
            (loss, d)
        }
        HeadKind::Crf => {
            let trans = params.get("crf_trans").data.clone();
            let start = params.get("crf_start").data.clone();
            let end = params.get("crf_end").data.clone();
            let crf_params = CrfParams {
                num_tags: task.model.n_tags,
                transitions: &trans,
                start_scores: &start,
                end_scores: &end,
                constraints: task.constraints,
            };
            let out = crf::crf_nll(&emissions, gold, &crf_params)?;
            for (g, v) in grads.get_mut("crf_trans").data.iter_mut().zip(&out.d_transitions) {
                *g += v;
            }
            for (g, v) in grads.get_mut("crf_start").data.iter_mut().zip(&out.d_start) {
                *g += v;
            }
            for (g, v) in grads.get_mut("crf_end").data.iter_mut().zip(&out.d_end) {
                *g += v;
            }
            (out.loss, out.d_emissions)
        }
    };

    let mut d_h = vec![vec![0.0; task.model.d_model]; h.len()];
    heads::ner_head_backward(
        &d_emissions,
        &h,
        first_token_slot,
        ex.label_id,
        ex.raw_pos_ids(),
        task.mode,
        params,
        task.model,
        grads,
        &mut d_h,
    );

    let mut sentence_loss = 0.0;
    if let Some(gold_label) = sentence_gold {
        let logits = heads::sentence_head(&h[0], params);
        let (l, mut d_logits) = heads::softmax_ce(&logits, gold_label);
        sentence_loss = l;
        for dl in d_logits.iter_mut() {
            *dl *= task.sentence_loss_weight;
        }
        heads::sentence_head_backward(&d_logits, &h[0], params, grads, &mut d_h[0]);
    }

    encoder::backward_sequence(&d_h, &trace, params, task.model, grads);

    Ok(LossParts {
        total: heads::combine_joint(sentence_loss, ner_loss, task.sentence_loss_weight),
        ner: ner_loss,
        sentence: sentence_loss,
    })
}

/// Loss only, no gradients (finite-difference probes).
pub fn sentence_loss_only(
    ex: &SentenceExample,
    sentence_gold: Option<usize>,
    task: &TaskConfig,
    params: &ParamSet,
) -> Result<f64, EngineError> {
    let gold = ex
        .gold_tags
        .as_ref()
        .ok_or_else(|| EngineError::Invalid("sentence without gold tags".into()))?;
    let inp = SeqInput {
        token_ids: &ex.token_ids,
        pos_ids: &ex.pos_ids,
        label_id: ex.label_id,
        mode: task.mode,
    };
    let (h, _) = encoder::encode_sequence(&inp, params, task.model, None)?;
    let first_token_slot = 1 + ex.token_offset;
    let emissions = heads::ner_head(
        &h,
        first_token_slot,
        ex.n_tokens(),
        ex.label_id,
        ex.raw_pos_ids(),
        task.mode,
        params,
        task.model,
    );
    let ner_loss = match task.head {
        HeadKind::Softmax => emissions
            .iter()
            .zip(&gold.labels)
            .map(|(row, &g)| heads::softmax_ce(row, g).0)
            .sum(),
        HeadKind::Crf => {
            let trans = params.get("crf_trans").data.clone();
            let start = params.get("crf_start").data.clone();
            let end = params.get("crf_end").data.clone();
            let crf_params = CrfParams {
                num_tags: task.model.n_tags,
                transitions: &trans,
                start_scores: &start,
                end_scores: &end,
                constraints: task.constraints,
            };
            crf::crf_nll(&emissions, gold, &crf_params)?.loss
        }
    };
    let sentence_loss = match sentence_gold {
        Some(gl) => heads::softmax_ce(&heads::sentence_head(&h[0], params), gl).0,
        None => 0.0,
    };
    Ok(heads::combine_joint(sentence_loss, ner_loss, task.sentence_loss_weight))
}

/// Decodes one sentence: constrained Viterbi for the CRF head, argmax plus
/// BIO repair for the softmax head. Output always passes `validate_bio`.
pub fn predict_tags(
    ex: &SentenceExample,
    task: &TaskConfig,
    params: &ParamSet,
    scheme: &TagScheme,
) -> Result<TagSequence, EngineError> {
    let inp = SeqInput {
        token_ids: &ex.token_ids,
        pos_ids: &ex.pos_ids,
        label_id: ex.label_id,
        mode: task.mode,
    };
    let (h, _) = encoder::encode_sequence(&inp, params, task.model, None)?;
    let emissions = heads::ner_head(
        &h,
        1 + ex.token_offset,
        ex.n_tokens(),
        ex.label_id,
        ex.raw_pos_ids(),
        task.mode,
        params,
        task.model,
    );
    match task.head {
        HeadKind::Crf => {
            let trans = params.get("crf_trans").data.clone();
            let start = params.get("crf_start").data.clone();
            let end = params.get("crf_end").data.clone();
            let crf_params = CrfParams {
                num_tags: task.model.n_tags,
                transitions: &trans,
                start_scores: &start,
                end_scores: &end,
                constraints: task.constraints,
            };
            let (seq, _) = crf::viterbi(&emissions, &crf_params);
            Ok(seq)
        }
        HeadKind::Softmax => {
            let raw: Vec<usize> = emissions
                .iter()
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(i, _)| i)
                        .unwrap()
                })
                .collect();
            Ok(tagging::repair_bio(&TagSequence::new(raw), scheme))
        }
    }
}

/// Predicted sentence label from the joint model's sentence head.
pub fn predict_sentence_label_joint(
    ex: &SentenceExample,
    task: &TaskConfig,
    params: &ParamSet,
    v: &Vocabulary,
) -> Result<String, EngineError> {
    let inp = SeqInput {
        token_ids: &ex.token_ids,
        pos_ids: &ex.pos_ids,
        label_id: ex.label_id,
        mode: task.mode,
    };
    let (h, _) = encoder::encode_sequence(&inp, params, task.model, None)?;
    let logits = heads::sentence_head(&h[0], params);
    let mut best = 0;
    for (i, &l) in logits.iter().enumerate() {
        if l > logits[best] {
            best = i;
        }
    }
    v.label_name(best)
        .map(str::to_string)
        .ok_or_else(|| EngineError::Invalid(format!("sentence label id {best} unknown")))
}

/// Gold and predicted span sets plus micro-F1 for a corpus.
pub struct Evaluation {
    pub metrics: PrecisionRecallF1,
    pub token_metrics: PrecisionRecallF1,
    pub predictions: Vec<TagSequence>,
}

/// Which sentence label feeds injection during evaluation.
pub enum LabelSource<'a> {
    Gold,
    Predicted(&'a [String]),
}

pub fn evaluate_ner(
    sentences: &[Sentence],
    v: &Vocabulary,
    task: &TaskConfig,
    params: &ParamSet,
    scheme: &TagScheme,
    labels: &LabelSource,
) -> Result<Evaluation, EngineError> {
    let mut gold_spans: Vec<Vec<Span>> = Vec::with_capacity(sentences.len());
    let mut pred_spans: Vec<Vec<Span>> = Vec::with_capacity(sentences.len());
    let mut gold_tags = Vec::with_capacity(sentences.len());
    let mut predictions = Vec::with_capacity(sentences.len());
    for (i, s) in sentences.iter().enumerate() {
        let overr = match labels {
            LabelSource::Gold => None,
            LabelSource::Predicted(p) => Some(p[i].as_str()),
        };
        let ex = encode_example(s, v, task.mode, task.model.max_len, overr)?;
        let pred = predict_tags(&ex, task, params, scheme)?;
        let g = s
            .gold_tags
            .as_ref()
            .ok_or_else(|| EngineError::Invalid("evaluation needs gold tags".into()))?;
        gold_spans.push(
            tagging::spans_from_tags(g, scheme).map_err(|e| EngineError::Invalid(e.to_string()))?,
        );
        pred_spans
            .push(tagging::spans_from_tags(&pred, scheme).expect("decoded output is BIO-valid"));
        gold_tags.push(g.clone());
        predictions.push(pred);
    }
    let metrics =
        tagging::micro_f1(&gold_spans, &pred_spans).map_err(|e| EngineError::Invalid(e.to_string()))?;
    let token_metrics = tagging::token_micro_f1(&gold_tags, &predictions)
        .map_err(|e| EngineError::Invalid(e.to_string()))?;
    Ok(Evaluation { metrics, token_metrics, predictions })
}

/// Entailment-classifier loss and gradients for one sentence: binary
/// cross-entropy summed over all candidate labels.
pub fn entailment_loss_grads(
    s: &Sentence,
    gold_label: &str,
    v: &Vocabulary,
    templates: &heads::TemplateSet,
    params: &ParamSet,
    cfg: &ModelConfig,
    grads: &mut ParamSet,
) -> Result<f64, EngineError> {
    let labels = v.labels();
    let insts = heads::reformulate_entailment(s, templates, &labels, Some(gold_label))?;
    let mut total = 0.0;
    for inst in &insts {
        let (tok_ids, pos_ids) = heads::entailment_ids(inst, s, v);
        let inp = SeqInput {
            token_ids: &tok_ids,
            pos_ids: &pos_ids,
            label_id: 0,
            mode: InjectionMode::none(),
        };
        let (h, trace) = encoder::encode_sequence(&inp, params, cfg, None)?;
        let z = heads::entailment_logit(&h[0], params);
        let target = if inst.target == Some(true) { 1.0 } else { 0.0 };
        let (loss, d_z) = heads::bce_logit(z, target);
        total += loss;
        let mut d_h = vec![vec![0.0; cfg.d_model]; h.len()];
        heads::entailment_backward(d_z, &h[0], params, grads, &mut d_h[0]);
        encoder::backward_sequence(&d_h, &trace, params, cfg, grads);
    }
    Ok(total)
}
