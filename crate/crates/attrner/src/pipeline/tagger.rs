//! End-to-end tagging of raw (possibly unlabeled) sentences: classify the
//! sentence, inject its predicted attributes, decode tags.

use crate::corpus::{Corpus, Sentence, Vocabulary};
use crate::engine::{self, TaskConfig};
use crate::heads::{self, TemplateSet};
use crate::model::config::ModelConfig;
use crate::model::params::ParamSet;
use crate::tagging::TagScheme;

use super::trainer::TrainError;

/// Sentence classifier used ahead of the tagger when the injection mode
/// consumes the sentence label.
pub struct ClassifierModel<'a> {
    pub params: &'a ParamSet,
    pub config: &'a ModelConfig,
    pub templates: &'a TemplateSet,
}

/// Runs the two-stage pipeline over `sentences` and returns a corpus whose
/// gold column holds the predicted tags and whose `#label:` annotations are
/// the labels that fed injection. Sentences keep their input order.
pub fn tag_pipeline(
    sentences: &[Sentence],
    v: &Vocabulary,
    scheme: &TagScheme,
    task: &TaskConfig,
    params: &ParamSet,
    classifier: Option<&ClassifierModel>,
) -> Result<Corpus, TrainError> {
    let mut out = Vec::with_capacity(sentences.len());
    for s in sentences {
        let label = if task.mode.use_label() {
            match classifier {
                Some(cl) => {
                    let (l, _) =
                        heads::classify_sentence(s, cl.params, cl.config, v, cl.templates)?;
                    Some(l)
                }
                None => match &s.sentence_label {
                    Some(l) => Some(l.clone()),
                    None => {
                        return Err(TrainError::Invalid(format!(
                            "mode {} needs a sentence label: supply a classifier or \
                             pre-labeled input",
                            task.mode.site.name()
                        )))
                    }
                },
            }
        } else {
            None
        };
        let ex = engine::encode_example(s, v, task.mode, task.model.max_len, label.as_deref())?;
        let tags = engine::predict_tags(&ex, task, params, scheme)?;
        out.push(Sentence {
            tokens: s.tokens.clone(),
            pos: s.pos.clone(),
            gold_tags: Some(tags),
            sentence_label: label.or_else(|| s.sentence_label.clone()),
            bio_valid: true,
        });
    }
    Ok(Corpus { sentences: out, scheme: scheme.clone(), split_name: "tagged".to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, derive_all_labels, parse_column_file, serialize_corpus};
    use crate::crf::ConstraintMask;
    use crate::engine::HeadKind;
    use crate::injection::InjectionMode;
    use crate::model::params::init_params;
    use crate::tagging;

    #[test]
    fn pipeline_output_is_bio_valid_and_reparseable() {
        let text = "#scheme: A\n\nalpha\tNN\tB-A\nfiller\tDT\tO\n\nfiller\tDT\tO\n";
        let mut c = parse_column_file(text, "train").unwrap();
        derive_all_labels(&mut c).unwrap();
        let v = build_vocab(&c, 1).unwrap();
        let cfg = ModelConfig::tiny(v.num_tokens(), v.num_pos(), v.num_labels(), 3);
        let params = init_params(&cfg, 5).unwrap();
        let mask = ConstraintMask::bio(&c.scheme);
        let task = TaskConfig {
            model: &cfg,
            mode: InjectionMode::none(),
            head: HeadKind::Crf,
            constraints: Some(&mask),
            sentence_loss_weight: 1.0,
        };
        // strip gold so the tagger sees raw input
        let raw: Vec<Sentence> = c
            .sentences
            .iter()
            .map(|s| Sentence { gold_tags: None, sentence_label: None, ..s.clone() })
            .collect();
        let tagged = tag_pipeline(&raw, &v, &c.scheme, &task, &params, None).unwrap();
        for s in &tagged.sentences {
            let t = s.gold_tags.as_ref().unwrap();
            assert!(tagging::validate_bio(t, &c.scheme).is_empty());
        }
        let round = parse_column_file(&serialize_corpus(&tagged), "tagged").unwrap();
        assert_eq!(round.sentences.len(), 2);
    }

    #[test]
    fn label_mode_without_labels_or_classifier_errors() {
        let text = "#scheme: A\n\nalpha\tNN\tB-A\n";
        let c = parse_column_file(text, "train").unwrap();
        let mut labeled = c.clone();
        derive_all_labels(&mut labeled).unwrap();
        let v = build_vocab(&labeled, 1).unwrap();
        let cfg = ModelConfig::tiny(v.num_tokens(), v.num_pos(), v.num_labels(), 3);
        let params = init_params(&cfg, 5).unwrap();
        let task = TaskConfig {
            model: &cfg,
            mode: InjectionMode::new(
                crate::injection::InjectionSite::Embedding,
                crate::injection::Channels::LABEL,
            )
            .unwrap(),
            head: HeadKind::Softmax,
            constraints: None,
            sentence_loss_weight: 1.0,
        };
        let raw: Vec<Sentence> = c
            .sentences
            .iter()
            .map(|s| Sentence { gold_tags: None, sentence_label: None, ..s.clone() })
            .collect();
        assert!(tag_pipeline(&raw, &v, &c.scheme, &task, &params, None).is_err());
    }
}
