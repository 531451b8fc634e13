//! Multi-seed experiment driver: trains per seed, evaluates on the test
//! split, and aggregates span F1 as mean±std over seeds.

use crate::corpus::{build_vocab, derive_all_labels, Corpus, Vocabulary};
use crate::crf::ConstraintMask;
use crate::engine::{self, HeadKind, LabelSource, RunKind, TaskConfig};
use crate::heads::{self, TemplateSet};
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;

use super::config::TrainConfig;
use super::trainer::{self, TrainError, TrainOutcome};

#[derive(Debug, Clone, Copy)]
pub struct SeedResult {
    pub seed: u64,
    pub dev_metric: f64,
    pub test_f1: f64,
}

pub struct ExperimentResult {
    pub cell: String,
    pub per_seed: Vec<SeedResult>,
    pub mean_test_f1: f64,
    pub std_test_f1: f64,
}

/// Everything a caller may want to persist after a run: aggregate numbers
/// plus the trained models of the first seed.
pub struct ExperimentArtifacts {
    pub result: ExperimentResult,
    pub vocab: Vocabulary,
    pub model_config: ModelConfig,
    pub first_seed_ner: ParamSet,
    pub first_seed_classifier: Option<ParamSet>,
    pub first_seed_outcome: TrainOutcome,
}

/// "85.06±0.19" — percentages with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{:.2}±{:.2}", 100.0 * mean, 100.0 * std)
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Trains once per configured seed and evaluates span F1 on `test`.
/// Sentence labels are derived from gold spans wherever absent; the label
/// fed to injection at test time follows the run kind (gold for ner-only
/// and joint teacher-forced runs, classifier predictions for the pipeline).
pub fn run_experiment(
    tc: &TrainConfig,
    train: &Corpus,
    dev: &Corpus,
    test: &Corpus,
) -> Result<ExperimentArtifacts, TrainError> {
    let mut train = train.clone();
    let mut dev = dev.clone();
    let mut test = test.clone();
    derive_all_labels(&mut train)?;
    derive_all_labels(&mut dev)?;
    derive_all_labels(&mut test)?;
    if train.scheme != test.scheme {
        return Err(TrainError::Invalid("train and test tag schemes differ".into()));
    }

    let v = build_vocab(&train, tc.min_token_freq)?;
    let cfg = tc.model_config(v.num_tokens(), v.num_pos(), v.num_labels(), train.scheme.num_labels());
    let scheme = train.scheme.clone();
    let mask = ConstraintMask::bio(&scheme);
    let templates = TemplateSet::default_for(&v.labels());
    let joint = tc.run_kind == RunKind::Joint;
    let needs_classifier = tc.run_kind == RunKind::Pipeline && tc.mode.use_label();

    let mut per_seed = Vec::with_capacity(tc.seeds.len());
    let mut first_models: Option<(ParamSet, Option<ParamSet>, TrainOutcome)> = None;

    for &seed in &tc.seeds {
        let classifier = if needs_classifier {
            Some(trainer::train_classifier(tc, &cfg, &train, &dev, &v, &templates, seed)?)
        } else {
            None
        };
        let outcome = trainer::train_ner(tc, &cfg, &train, &dev, &v, joint, seed)?;

        let task = TaskConfig {
            model: &cfg,
            mode: tc.mode,
            head: tc.head_kind,
            constraints: (tc.head_kind == HeadKind::Crf).then_some(&mask),
            sentence_loss_weight: tc.sentence_loss_weight,
        };
        let evaluable: Vec<_> = test
            .sentences
            .iter()
            .filter(|s| s.gold_tags.is_some() && s.bio_valid)
            .cloned()
            .collect();
        if evaluable.is_empty() {
            return Err(TrainError::Invalid("test split has no evaluable sentences".into()));
        }
        let test_f1 = match &classifier {
            Some(cl) => {
                let mut predicted = Vec::with_capacity(evaluable.len());
                for s in &evaluable {
                    let (label, _) =
                        heads::classify_sentence(s, &cl.params, &cfg, &v, &templates)?;
                    predicted.push(label);
                }
                engine::evaluate_ner(
                    &evaluable,
                    &v,
                    &task,
                    &outcome.params,
                    &scheme,
                    &LabelSource::Predicted(&predicted),
                )?
                .metrics
                .f1
            }
            None => engine::evaluate_ner(
                &evaluable,
                &v,
                &task,
                &outcome.params,
                &scheme,
                &LabelSource::Gold,
            )?
            .metrics
            .f1,
        };

        per_seed.push(SeedResult { seed, dev_metric: outcome.best_dev_metric, test_f1 });
        if first_models.is_none() {
            first_models =
                Some((outcome.params.clone(), classifier.map(|c| c.params), outcome));
        }
    }

    let f1s: Vec<f64> = per_seed.iter().map(|r| r.test_f1).collect();
    let (mean, std) = mean_std(&f1s);
    let (first_ner, first_classifier, first_outcome) = first_models.unwrap();
    Ok(ExperimentArtifacts {
        result: ExperimentResult {
            cell: tc.cell_name(),
            per_seed,
            mean_test_f1: mean,
            std_test_f1: std,
        },
        vocab: v,
        model_config: cfg,
        first_seed_ner: first_ner,
        first_seed_classifier: first_classifier,
        first_seed_outcome: first_outcome,
    })
}

/// Stable text rendering of an experiment result.
pub fn render_result(r: &ExperimentResult) -> String {
    let mut out = String::new();
    out.push_str(&format!("cell {}\n", r.cell));
    for s in &r.per_seed {
        out.push_str(&format!(
            "seed={} dev_metric={:.6} test_f1={:.6}\n",
            s.seed, s.dev_metric, s.test_f1
        ));
    }
    out.push_str(&format!(
        "aggregate test_f1 {}\n",
        format_mean_std(r.mean_test_f1, r.std_test_f1)
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_reference_values() {
        let (m, s) = mean_std(&[0.8, 0.9, 1.0]);
        assert!((m - 0.9).abs() < 1e-12);
        assert!((s - (0.02f64 / 3.0).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn formatting_matches_reporting_convention() {
        assert_eq!(format_mean_std(0.8506, 0.0019), "85.06±0.19");
        assert_eq!(format_mean_std(1.0, 0.0), "100.00±0.00");
    }
}
