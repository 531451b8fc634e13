//! Finite-difference verification of the analytic gradients, over every
//! parameter tensor and every injection mode / head / run-kind combination.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

use crate::crf::ConstraintMask;
use crate::engine::{self, HeadKind, SentenceExample, TaskConfig};
use crate::injection::InjectionMode;
use crate::tagging::{build_scheme, TagSequence};

use super::config::ModelConfig;
use super::params::{init_params, ParamSet};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_parameter: String,
    pub tolerance: f64,
    pub pass: bool,
    pub checked_coordinates: usize,
}

const FD_EPSILON: f64 = 1e-5;
const MAX_COORDS_PER_TENSOR: usize = 64;

fn fixture_examples(mode: InjectionMode) -> Vec<(SentenceExample, usize)> {
    let text = mode.site == crate::injection::InjectionSite::Text;
    let off = usize::from(text);
    // token vocab 10, pos vocab 4, 3 sentence labels, 3 tags (scheme {A})
    let mut exs = Vec::new();
    {
        let mut toks = vec![4usize, 7, 5];
        let mut pos = vec![1usize, 2, 3];
        if text {
            toks.insert(0, 2);
            pos.insert(0, 0);
        }
        exs.push((
            SentenceExample {
                token_ids: toks,
                pos_ids: pos,
                label_id: 1,
                gold_tags: Some(TagSequence::new(vec![0, 1, 2])),
                token_offset: off,
            },
            1usize,
        ));
    }
    {
        let mut toks = vec![9usize, 3, 8, 6];
        let mut pos = vec![2usize, 1, 1, 3];
        if text {
            toks.insert(0, 3);
            pos.insert(0, 0);
        }
        exs.push((
            SentenceExample {
                token_ids: toks,
                pos_ids: pos,
                label_id: 2,
                gold_tags: Some(TagSequence::new(vec![1, 0, 1, 2])),
                token_offset: off,
            },
            2usize,
        ));
    }
    exs
}

fn total_loss(
    examples: &[(SentenceExample, usize)],
    joint: bool,
    task: &TaskConfig,
    params: &ParamSet,
) -> f64 {
    examples
        .iter()
        .map(|(ex, gl)| {
            engine::sentence_loss_only(ex, joint.then_some(*gl), task, params).unwrap()
        })
        .sum()
}

/// Compares analytic gradients against central finite differences on a tiny
/// configuration, sampling at most 64 coordinates per tensor.
pub fn grad_check(
    mode: InjectionMode,
    joint: bool,
    head: HeadKind,
    tolerance: f64,
    seed: u64,
) -> GradCheckReport {
    let cfg = ModelConfig::tiny(10, 4, 3, 3);
    let scheme = build_scheme(["A"]).unwrap();
    let mask = ConstraintMask::bio(&scheme);
    let task = TaskConfig {
        model: &cfg,
        mode,
        head,
        constraints: (head == HeadKind::Crf).then_some(&mask),
        sentence_loss_weight: 1.0,
    };
    let mut params = init_params(&cfg, seed).unwrap();
    let examples = fixture_examples(mode);

    let mut grads = params.zeros_like();
    for (ex, gl) in &examples {
        engine::sentence_loss_grads(ex, joint.then_some(*gl), &task, &params, &mut grads, None)
            .unwrap();
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut max_rel = 0.0;
    let mut worst = String::new();
    let mut checked = 0;
    let names = params.names();
    for name in names {
        let len = params.get(&name).len();
        let coords: Vec<usize> = if len <= MAX_COORDS_PER_TENSOR {
            (0..len).collect()
        } else {
            (0..MAX_COORDS_PER_TENSOR).map(|_| rng.gen_range(0..len)).collect()
        };
        for idx in coords {
            let orig = params.get(&name).data[idx];
            params.get_mut(&name).data[idx] = orig + FD_EPSILON;
            let hi = total_loss(&examples, joint, &task, &params);
            params.get_mut(&name).data[idx] = orig - FD_EPSILON;
            let lo = total_loss(&examples, joint, &task, &params);
            params.get_mut(&name).data[idx] = orig;
            let numeric = (hi - lo) / (2.0 * FD_EPSILON);
            let analytic = grads.get(&name).data[idx];
            let rel = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1.0);
            if rel > max_rel {
                max_rel = rel;
                worst = format!("{name}[{idx}]");
            }
            checked += 1;
        }
    }

    GradCheckReport {
        max_rel_error: max_rel,
        worst_parameter: worst,
        tolerance,
        pass: max_rel < tolerance,
        checked_coordinates: checked,
    }
}

/// Analytic gradients for the tiny fixture, exposed for unused-parameter
/// checks.
pub fn fixture_gradients(mode: InjectionMode, joint: bool, head: HeadKind, seed: u64) -> ParamSet {
    let cfg = ModelConfig::tiny(10, 4, 3, 3);
    let scheme = build_scheme(["A"]).unwrap();
    let mask = ConstraintMask::bio(&scheme);
    let task = TaskConfig {
        model: &cfg,
        mode,
        head,
        constraints: (head == HeadKind::Crf).then_some(&mask),
        sentence_loss_weight: 1.0,
    };
    let params = init_params(&cfg, seed).unwrap();
    let mut grads = params.zeros_like();
    for (ex, gl) in &fixture_examples(mode) {
        engine::sentence_loss_grads(ex, joint.then_some(*gl), &task, &params, &mut grads, None)
            .unwrap();
    }
    grads
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::injection::{Channels, InjectionSite};

    #[test]
    fn baseline_softmax_grads_match() {
        let r = grad_check(InjectionMode::none(), false, HeadKind::Softmax, 1e-4, 1);
        assert!(r.pass, "max rel error {} at {}", r.max_rel_error, r.worst_parameter);
    }

    #[test]
    fn attention_mode_crf_grads_match() {
        let mode = InjectionMode::new(InjectionSite::Attention, Channels::BOTH).unwrap();
        let r = grad_check(mode, false, HeadKind::Crf, 1e-4, 2);
        assert!(r.pass, "max rel error {} at {}", r.max_rel_error, r.worst_parameter);
    }

    #[test]
    fn unused_injection_weights_have_zero_gradient() {
        let g = fixture_gradients(InjectionMode::none(), false, HeadKind::Softmax, 3);
        assert!(g.get("l0.wsq").data.iter().all(|&v| v == 0.0));
        assert!(g.get("tag_ws").data.iter().all(|&v| v == 0.0));
        assert!(g.get("lab_emb").data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_tolerance_always_fails() {
        let r = grad_check(InjectionMode::none(), false, HeadKind::Softmax, 0.0, 1);
        assert!(!r.pass);
    }
}
