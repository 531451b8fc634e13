//! Command-line interface: training/evaluation experiments, two-stage
//! tagging, sentence classification, label derivation, gradient checking,
//! and the brute-force CRF oracle.

use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use attrner::checkpoint;
use attrner::corpus::{self, Corpus};
use attrner::crf::{self, ConstraintMask, CrfParams};
use attrner::engine::{self, HeadKind, LabelSource, TaskConfig};
use attrner::heads::TemplateSet;
use attrner::injection::{Channels, InjectionMode, InjectionSite};
use attrner::model::gradcheck;
use attrner::pipeline::{self, ClassifierModel, TrainConfig};
use attrner::tagging::TagSequence;

#[derive(Parser)]
#[command(name = "attrner", about = "Attribute-injected sequence labeling", version)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every command that runs the model on data.
#[derive(Args, Clone)]
struct ModeArgs {
    /// Injection site: none | text | embedding | attention | classifier
    #[arg(long, default_value = "none")]
    mode: String,
    /// Attribute channels, e.g. "label", "pos" or "label,pos"
    #[arg(long)]
    channels: Option<String>,
    /// Output head: crf | softmax
    #[arg(long, default_value = "crf")]
    head: String,
}

impl ModeArgs {
    fn injection_mode(&self) -> Result<InjectionMode, Box<dyn Error>> {
        let site = InjectionSite::parse(&self.mode)?;
        let channels = match &self.channels {
            Some(c) => Some(Channels::parse(c)?),
            None => None,
        };
        Ok(match (site, channels) {
            (InjectionSite::None, None) => InjectionMode::none(),
            (site, Some(ch)) => InjectionMode::new(site, ch)?,
            (site, None) => InjectionMode::new(site, Channels::LABEL)?,
        })
    }

    fn head_kind(&self) -> Result<HeadKind, Box<dyn Error>> {
        Ok(HeadKind::parse(&self.head)?)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train over the configured seeds and write models plus results.
    Train {
        /// key = value training configuration file
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        dev: PathBuf,
        /// Test split; defaults to the dev split.
        #[arg(long)]
        test: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        mode: ModeArgs,
        /// ner-only | pipeline | joint
        #[arg(long)]
        run_kind: Option<String>,
        /// Single seed overriding the configured seed list.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Span and token F1 of a trained model on a gold-tagged split.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Classifier checkpoint; when given, its predicted sentence labels
        /// feed injection instead of gold-derived ones.
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Tag raw sentences (column files with `_` tags) and write the result.
    Tag {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        classifier: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeArgs,
    },
    /// Predict sentence labels with the entailment classifier.
    Classify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Derive sentence labels from gold spans and rewrite the file.
    DeriveLabels {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference gradient verification; non-zero exit on failure.
    Gradcheck {
        #[command(flatten)]
        mode: ModeArgs,
        /// Include the joint sentence objective.
        #[arg(long)]
        joint: bool,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Compare CRF inference against brute-force enumeration on random
    /// instances; non-zero exit on disagreement.
    Oracle {
        #[arg(long, default_value_t = 200)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 1e-9)]
        tolerance: f64,
    },
}

fn load_corpus(path: &Path, split: &str) -> Result<Corpus, Box<dyn Error>> {
    let text = fs::read_to_string(path)
        .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    Ok(corpus::parse_column_file(&text, split)?)
}

fn main() -> Result<(), Box<dyn Error>> {
    match Cli::parse().cmd {
        Cmd::Train { config, train, dev, test, out, mode, run_kind, seed } => {
            let mut tc = match config {
                Some(p) => TrainConfig::parse(&fs::read_to_string(&p)?)?,
                None => TrainConfig::default(),
            };
            let site = InjectionSite::parse(&mode.mode)?;
            let channels = mode.channels.as_deref().map(Channels::parse).transpose()?;
            tc.set_mode(site, channels)?;
            tc.head_kind = mode.head_kind()?;
            if let Some(rk) = run_kind {
                tc.run_kind = engine::RunKind::parse(&rk)?;
            }
            if let Some(s) = seed {
                tc.seeds = vec![s];
            }
            tc.validate()?;

            let train_c = load_corpus(&train, "train")?;
            let dev_c = load_corpus(&dev, "dev")?;
            let test_c = match &test {
                Some(p) => load_corpus(p, "test")?,
                None => dev_c.clone(),
            };
            let art = pipeline::run_experiment(&tc, &train_c, &dev_c, &test_c)?;

            fs::create_dir_all(&out)?;
            fs::write(out.join("results.txt"), pipeline::render_result(&art.result))?;
            fs::write(out.join("vocab.tsv"), art.vocab.serialize())?;
            checkpoint::save_checkpoint(
                &out.join("model.ckpt"),
                &art.model_config,
                &art.first_seed_ner,
            )?;
            if let Some(cl) = &art.first_seed_classifier {
                checkpoint::save_checkpoint(&out.join("classifier.ckpt"), &art.model_config, cl)?;
            }
            let mut curve = String::from("step\tepoch\tdev_metric\n");
            for p in &art.first_seed_outcome.curve {
                curve.push_str(&format!("{}\t{}\t{:.6}\n", p.step, p.epoch, p.dev_metric));
            }
            fs::write(out.join("curve.tsv"), curve)?;
            print!("{}", pipeline::render_result(&art.result));
        }
        Cmd::Evaluate { model, vocab, data, classifier, mode } => {
            let (cfg, params) = checkpoint::load_checkpoint(&model)?;
            let v = corpus::Vocabulary::parse(&fs::read_to_string(&vocab)?)?;
            let mut c = load_corpus(&data, "eval")?;
            corpus::derive_all_labels(&mut c)?;
            let im = mode.injection_mode()?;
            let head = mode.head_kind()?;
            let mask = ConstraintMask::bio(&c.scheme);
            let task = TaskConfig {
                model: &cfg,
                mode: im,
                head,
                constraints: (head == HeadKind::Crf).then_some(&mask),
                sentence_loss_weight: 1.0,
            };
            let sentences: Vec<_> = c
                .sentences
                .iter()
                .filter(|s| s.gold_tags.is_some() && s.bio_valid)
                .cloned()
                .collect();
            let source_labels;
            let source = match &classifier {
                Some(p) => {
                    let (ccfg, cparams) = checkpoint::load_checkpoint(p)?;
                    let templates = TemplateSet::default_for(&v.labels());
                    let mut preds = Vec::with_capacity(sentences.len());
                    for s in &sentences {
                        let (l, _) =
                            attrner::heads::classify_sentence(s, &cparams, &ccfg, &v, &templates)?;
                        preds.push(l);
                    }
                    source_labels = preds;
                    LabelSource::Predicted(&source_labels)
                }
                None => LabelSource::Gold,
            };
            let ev = engine::evaluate_ner(&sentences, &v, &task, &params, &c.scheme, &source)?;
            println!(
                "span precision={:.6} recall={:.6} f1={:.6}",
                ev.metrics.precision, ev.metrics.recall, ev.metrics.f1
            );
            println!(
                "token precision={:.6} recall={:.6} f1={:.6}",
                ev.token_metrics.precision, ev.token_metrics.recall, ev.token_metrics.f1
            );
        }
        Cmd::Tag { model, vocab, data, out, classifier, mode } => {
            let (cfg, params) = checkpoint::load_checkpoint(&model)?;
            let v = corpus::Vocabulary::parse(&fs::read_to_string(&vocab)?)?;
            let c = load_corpus(&data, "input")?;
            let im = mode.injection_mode()?;
            let head = mode.head_kind()?;
            let mask = ConstraintMask::bio(&c.scheme);
            let task = TaskConfig {
                model: &cfg,
                mode: im,
                head,
                constraints: (head == HeadKind::Crf).then_some(&mask),
                sentence_loss_weight: 1.0,
            };
            let templates = TemplateSet::default_for(&v.labels());
            let loaded = classifier.map(|p| checkpoint::load_checkpoint(&p)).transpose()?;
            let cl = loaded.as_ref().map(|(ccfg, cparams)| ClassifierModel {
                params: cparams,
                config: ccfg,
                templates: &templates,
            });
            let tagged =
                pipeline::tag_pipeline(&c.sentences, &v, &c.scheme, &task, &params, cl.as_ref())?;
            fs::write(&out, corpus::serialize_corpus(&tagged))?;
        }
        Cmd::Classify { model, vocab, data } => {
            let (cfg, params) = checkpoint::load_checkpoint(&model)?;
            let v = corpus::Vocabulary::parse(&fs::read_to_string(&vocab)?)?;
            let c = load_corpus(&data, "input")?;
            let templates = TemplateSet::default_for(&v.labels());
            for (i, s) in c.sentences.iter().enumerate() {
                let (label, _) =
                    attrner::heads::classify_sentence(s, &params, &cfg, &v, &templates)?;
                println!("{i}\t{label}");
            }
        }
        Cmd::DeriveLabels { data, out } => {
            let mut c = load_corpus(&data, "input")?;
            corpus::derive_all_labels(&mut c)?;
            fs::write(&out, corpus::serialize_corpus(&c))?;
        }
        Cmd::Gradcheck { mode, joint, tolerance, seed } => {
            let im = mode.injection_mode()?;
            let head = mode.head_kind()?;
            let r = gradcheck::grad_check(im, joint, head, tolerance, seed);
            println!(
                "gradcheck mode={} channels={} head={} joint={} checked={} max_rel={:.3e} worst={} => {}",
                im.site.name(),
                im.channels.name(),
                head.name(),
                joint,
                r.checked_coordinates,
                r.max_rel_error,
                r.worst_parameter,
                if r.pass { "PASS" } else { "FAIL" }
            );
            if !r.pass {
                std::process::exit(1);
            }
        }
        Cmd::Oracle { instances, seed, tolerance } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut max_log_z = 0.0f64;
            let mut max_marginal = 0.0f64;
            let mut viterbi_mismatches = 0usize;
            for _ in 0..instances {
                let k = [3usize, 4, 5][rng.gen_range(0..3)];
                let n = rng.gen_range(1..=6);
                let emissions: Vec<Vec<f64>> =
                    (0..n).map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
                let trans: Vec<f64> = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let start: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let end: Vec<f64> = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let c = CrfParams {
                    num_tags: k,
                    transitions: &trans,
                    start_scores: &start,
                    end_scores: &end,
                    constraints: None,
                };
                let oracle = crf::brute_force_oracle(&emissions, &c)?;
                let log_z = crf::log_partition(&emissions, &c);
                max_log_z = max_log_z.max((log_z - oracle.log_z).abs());
                let marg = crf::marginals(&emissions, &c);
                for (m, om) in marg.iter().zip(&oracle.marginals) {
                    for (a, b) in m.iter().zip(om) {
                        max_marginal = max_marginal.max((a - b).abs());
                    }
                }
                let (path, score) = crf::viterbi(&emissions, &c);
                let same_score = (score - oracle.best_score).abs() <= tolerance;
                let same_path = path == oracle.best_sequence
                    || same_score && tie_equivalent(&emissions, &c, &path, &oracle.best_sequence);
                if !(same_score && same_path) {
                    viterbi_mismatches += 1;
                }
            }
            println!(
                "oracle instances={instances} max_log_z_diff={max_log_z:.3e} \
                 max_marginal_diff={max_marginal:.3e} viterbi_mismatches={viterbi_mismatches}"
            );
            if max_log_z > tolerance || max_marginal > tolerance || viterbi_mismatches > 0 {
                std::process::exit(1);
            }
        }
    }
    Ok(())
}

/// Two decoded paths are interchangeable when they score identically.
fn tie_equivalent(
    emissions: &[Vec<f64>],
    c: &CrfParams,
    a: &TagSequence,
    b: &TagSequence,
) -> bool {
    (crf::sequence_score(emissions, a, c) - crf::sequence_score(emissions, b, c)).abs() < 1e-9
}
