//! Mini-batch training loops with warmup/decay scheduling, periodic dev
//! evaluation, early stopping by epoch patience, and best-checkpoint keeping.

use rand::seq::SliceRandom;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use thiserror::Error;

use crate::corpus::{Corpus, CorpusError, Vocabulary};
use crate::crf::ConstraintMask;
use crate::engine::{self, EngineError, LabelSource, SentenceExample, TaskConfig};
use crate::heads::{self, TemplateSet};
use crate::model::config::ModelConfig;
use crate::model::encoder::Dropout;
use crate::model::params::{init_params, ParamSet};

use super::config::TrainConfig;
use super::optimizer::{adamw_step, AdamState, OptimError};
use super::schedule::lr_at;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Head(#[from] heads::HeadError),
    #[error("training error: {0}")]
    Invalid(String),
}

/// One dev evaluation point on the training curve.
#[derive(Debug, Clone, Copy)]
pub struct CurvePoint {
    pub step: usize,
    pub epoch: usize,
    pub dev_metric: f64,
}

pub struct TrainOutcome {
    /// Parameters at the best dev evaluation seen.
    pub params: ParamSet,
    pub best_dev_metric: f64,
    pub best_step: usize,
    pub epochs_run: usize,
    /// Mean training loss per completed epoch.
    pub epoch_losses: Vec<f64>,
    pub curve: Vec<CurvePoint>,
}

struct EarlyStopper {
    best: f64,
    best_step: usize,
    best_params: Option<ParamSet>,
    improved_this_epoch: bool,
    bad_epochs: usize,
}

impl EarlyStopper {
    fn new() -> EarlyStopper {
        EarlyStopper {
            best: f64::NEG_INFINITY,
            best_step: 0,
            best_params: None,
            improved_this_epoch: false,
            bad_epochs: 0,
        }
    }

    fn observe(&mut self, metric: f64, step: usize, params: &ParamSet) {
        if metric > self.best {
            self.best = metric;
            self.best_step = step;
            self.best_params = Some(params.clone());
            self.improved_this_epoch = true;
        }
    }

    /// Returns true when patience is exhausted.
    fn end_epoch(&mut self, patience: usize) -> bool {
        if self.improved_this_epoch {
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        self.improved_this_epoch = false;
        self.bad_epochs >= patience
    }
}

fn scale_grads(grads: &mut ParamSet, factor: f64) {
    for (_, e) in grads.iter_mut() {
        for g in e.tensor.data.iter_mut() {
            *g *= factor;
        }
    }
}

fn steps_per_epoch(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Trains the tagger (optionally with the joint sentence objective) and
/// returns the parameters of the best dev-F1 evaluation.
pub fn train_ner(
    tc: &TrainConfig,
    cfg: &ModelConfig,
    train: &Corpus,
    dev: &Corpus,
    v: &Vocabulary,
    joint: bool,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    if train.sentences.is_empty() || dev.sentences.is_empty() {
        return Err(TrainError::Invalid("train and dev splits must be non-empty".into()));
    }
    if train.scheme != dev.scheme {
        return Err(TrainError::Invalid("train and dev tag schemes differ".into()));
    }
    let scheme = &train.scheme;
    let mask = ConstraintMask::bio(scheme);
    let task = TaskConfig {
        model: cfg,
        mode: tc.mode,
        head: tc.head_kind,
        constraints: (tc.head_kind == crate::engine::HeadKind::Crf).then_some(&mask),
        sentence_loss_weight: tc.sentence_loss_weight,
    };

    let mut examples: Vec<(SentenceExample, Option<usize>)> = Vec::new();
    for s in &train.sentences {
        if s.gold_tags.is_none() || !s.bio_valid {
            continue;
        }
        let ex = engine::encode_example(s, v, tc.mode, cfg.max_len, None)?;
        let gold_label = if joint {
            let label = s.sentence_label.as_deref().ok_or_else(|| {
                TrainError::Invalid("joint training needs sentence labels on every sentence".into())
            })?;
            Some(v.label_id(label).ok_or_else(|| {
                TrainError::Invalid(format!("sentence label {label:?} not in the vocabulary"))
            })?)
        } else {
            None
        };
        examples.push((ex, gold_label));
    }
    if examples.is_empty() {
        return Err(TrainError::Invalid("no trainable sentences (gold tags required)".into()));
    }

    let mut params = init_params(cfg, seed).map_err(|e| TrainError::Invalid(e.to_string()))?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dropout =
        (cfg.dropout_rate > 0.0).then(|| Dropout::new(cfg.dropout_rate, seed ^ 0xd0));

    let per_epoch = steps_per_epoch(examples.len(), tc.batch_size);
    let total_steps = tc.epochs * per_epoch;
    let mut stopper = EarlyStopper::new();
    let mut curve = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..examples.len()).collect();
    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let (ex, gl) = &examples[i];
                let parts = engine::sentence_loss_grads(
                    ex,
                    *gl,
                    &task,
                    &params,
                    &mut grads,
                    dropout.as_mut(),
                )?;
                batch_loss += parts.total;
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            let lr = lr_at(step, total_steps, tc);
            adamw_step(&mut params, &grads, &mut state, lr, tc.weight_decay)?;
            epoch_loss += batch_loss / chunk.len() as f64;
            step += 1;
            if step % tc.eval_every_steps == 0 {
                let f1 = eval_dev_f1(dev, v, &task, &params)?;
                curve.push(CurvePoint { step, epoch: epoch + 1, dev_metric: f1 });
                stopper.observe(f1, step, &params);
            }
        }
        let f1 = eval_dev_f1(dev, v, &task, &params)?;
        curve.push(CurvePoint { step, epoch: epoch + 1, dev_metric: f1 });
        stopper.observe(f1, step, &params);
        epoch_losses.push(epoch_loss / per_epoch as f64);
        epochs_run = epoch + 1;
        if stopper.end_epoch(tc.patience_epochs) {
            break 'epochs;
        }
    }

    Ok(TrainOutcome {
        params: stopper.best_params.unwrap_or(params),
        best_dev_metric: stopper.best,
        best_step: stopper.best_step,
        epochs_run,
        epoch_losses,
        curve,
    })
}

fn eval_dev_f1(
    dev: &Corpus,
    v: &Vocabulary,
    task: &TaskConfig,
    params: &ParamSet,
) -> Result<f64, TrainError> {
    let evaluable: Vec<_> = dev
        .sentences
        .iter()
        .filter(|s| s.gold_tags.is_some() && s.bio_valid)
        .cloned()
        .collect();
    if evaluable.is_empty() {
        return Err(TrainError::Invalid("dev split has no evaluable sentences".into()));
    }
    let ev = engine::evaluate_ner(&evaluable, v, task, params, task_scheme(dev), &LabelSource::Gold)?;
    Ok(ev.metrics.f1)
}

fn task_scheme(c: &Corpus) -> &crate::tagging::TagScheme {
    &c.scheme
}

/// Trains the entailment-reformulated sentence classifier; the dev metric
/// is label accuracy.
pub fn train_classifier(
    tc: &TrainConfig,
    cfg: &ModelConfig,
    train: &Corpus,
    dev: &Corpus,
    v: &Vocabulary,
    templates: &TemplateSet,
    seed: u64,
) -> Result<TrainOutcome, TrainError> {
    let labeled: Vec<_> = train
        .sentences
        .iter()
        .filter(|s| s.sentence_label.is_some())
        .cloned()
        .collect();
    if labeled.is_empty() {
        return Err(TrainError::Invalid(
            "classifier training needs sentences with sentence labels".into(),
        ));
    }
    for label in v.labels() {
        if !templates.covers(label) {
            return Err(TrainError::Invalid(format!("no template for label {label:?}")));
        }
    }

    let mut params = init_params(cfg, seed).map_err(|e| TrainError::Invalid(e.to_string()))?;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let per_epoch = steps_per_epoch(labeled.len(), tc.batch_size);
    let total_steps = tc.epochs * per_epoch;
    let mut stopper = EarlyStopper::new();
    let mut curve = Vec::new();
    let mut epoch_losses = Vec::new();
    let mut step = 0usize;
    let mut epochs_run = 0usize;

    let mut order: Vec<usize> = (0..labeled.len()).collect();
    'epochs: for epoch in 0..tc.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_size) {
            let mut grads = params.zeros_like();
            let mut batch_loss = 0.0;
            for &i in chunk {
                let s = &labeled[i];
                let gold = s.sentence_label.as_deref().unwrap();
                batch_loss +=
                    engine::entailment_loss_grads(s, gold, v, templates, &params, cfg, &mut grads)?;
            }
            scale_grads(&mut grads, 1.0 / chunk.len() as f64);
            let lr = lr_at(step, total_steps, tc);
            adamw_step(&mut params, &grads, &mut state, lr, tc.weight_decay)?;
            epoch_loss += batch_loss / chunk.len() as f64;
            step += 1;
            if step % tc.eval_every_steps == 0 {
                let acc = classifier_accuracy(dev, v, templates, &params, cfg)?;
                curve.push(CurvePoint { step, epoch: epoch + 1, dev_metric: acc });
                stopper.observe(acc, step, &params);
            }
        }
        let acc = classifier_accuracy(dev, v, templates, &params, cfg)?;
        curve.push(CurvePoint { step, epoch: epoch + 1, dev_metric: acc });
        stopper.observe(acc, step, &params);
        epoch_losses.push(epoch_loss / per_epoch as f64);
        epochs_run = epoch + 1;
        if stopper.end_epoch(tc.patience_epochs) {
            break 'epochs;
        }
    }

    Ok(TrainOutcome {
        params: stopper.best_params.unwrap_or(params),
        best_dev_metric: stopper.best,
        best_step: stopper.best_step,
        epochs_run,
        epoch_losses,
        curve,
    })
}

/// Fraction of dev sentences whose predicted label matches the annotation.
pub fn classifier_accuracy(
    dev: &Corpus,
    v: &Vocabulary,
    templates: &TemplateSet,
    params: &ParamSet,
    cfg: &ModelConfig,
) -> Result<f64, TrainError> {
    let labeled: Vec<_> =
        dev.sentences.iter().filter(|s| s.sentence_label.is_some()).collect();
    if labeled.is_empty() {
        return Err(TrainError::Invalid("dev split has no labeled sentences".into()));
    }
    let mut correct = 0usize;
    for s in &labeled {
        let (pred, _) = heads::classify_sentence(s, params, cfg, v, templates)?;
        if Some(pred.as_str()) == s.sentence_label.as_deref() {
            correct += 1;
        }
    }
    Ok(correct as f64 / labeled.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, derive_all_labels, parse_column_file};
    use crate::engine::HeadKind;

    fn tiny_corpus() -> Corpus {
        let text = "#scheme: A\n\n\
#label: A-one\nalpha\tNN\tB-A\nfiller\tDT\tO\n\n\
#label: None\nfiller\tDT\tO\nother\tNN\tO\n";
        let mut c = parse_column_file(text, "train").unwrap();
        derive_all_labels(&mut c).unwrap();
        c
    }

    fn tiny_tc() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            patience_epochs: 2,
            batch_size: 2,
            base_lr: 1e-3,
            head_kind: HeadKind::Softmax,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn training_runs_and_reports_curve() {
        let c = tiny_corpus();
        let v = build_vocab(&c, 1).unwrap();
        let tc = tiny_tc();
        let cfg = crate::model::config::ModelConfig::tiny(
            v.num_tokens(),
            v.num_pos(),
            v.num_labels(),
            c.scheme.num_labels(),
        );
        let out = train_ner(&tc, &cfg, &c, &c, &v, false, 1).unwrap();
        assert_eq!(out.epochs_run, 2);
        assert_eq!(out.epoch_losses.len(), 2);
        // one end-of-epoch eval per epoch (eval_every_steps=500 never fires)
        assert_eq!(out.curve.len(), 2);
        assert!(out.best_dev_metric >= 0.0);
        assert!(out.params.all_finite());
    }

    #[test]
    fn zero_lr_patience_one_stops_after_two_epochs() {
        let c = tiny_corpus();
        let v = build_vocab(&c, 1).unwrap();
        let mut tc = tiny_tc();
        tc.base_lr = 0.0;
        tc.epochs = 30;
        tc.patience_epochs = 1;
        let cfg = crate::model::config::ModelConfig::tiny(
            v.num_tokens(),
            v.num_pos(),
            v.num_labels(),
            c.scheme.num_labels(),
        );
        let out = train_ner(&tc, &cfg, &c, &c, &v, false, 1).unwrap();
        // epoch 1 sets the best; epoch 2 cannot improve and exhausts patience
        assert_eq!(out.epochs_run, 2);
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let c = tiny_corpus();
        let v = build_vocab(&c, 1).unwrap();
        let tc = tiny_tc();
        let cfg = crate::model::config::ModelConfig::tiny(
            v.num_tokens(),
            v.num_pos(),
            v.num_labels(),
            c.scheme.num_labels(),
        );
        let a = train_ner(&tc, &cfg, &c, &c, &v, false, 7).unwrap();
        let b = train_ner(&tc, &cfg, &c, &c, &v, false, 7).unwrap();
        for name in a.params.names() {
            assert_eq!(a.params.get(&name).data, b.params.get(&name).data, "{name}");
        }
        assert_eq!(a.epoch_losses, b.epoch_losses);
    }

    #[test]
    fn classifier_training_runs() {
        let c = tiny_corpus();
        let v = build_vocab(&c, 1).unwrap();
        let tc = tiny_tc();
        // entailment sequences (premise [SEP] hypothesis [EOS]) need headroom
        let cfg = crate::model::config::ModelConfig {
            max_len: 32,
            ..crate::model::config::ModelConfig::tiny(v.num_tokens(), v.num_pos(), 1, 3)
        };
        let templates = crate::heads::TemplateSet::default_for(&v.labels());
        let out = train_classifier(&tc, &cfg, &c, &c, &v, &templates, 1).unwrap();
        assert!(out.best_dev_metric >= 0.0 && out.best_dev_metric <= 1.0);
    }
}
