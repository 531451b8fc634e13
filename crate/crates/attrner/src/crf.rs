//! Linear-chain CRF: sequence scoring, log-partition via the forward
//! algorithm, exact NLL gradients via forward-backward, Viterbi decoding,
//! BIO transition constraints, and a brute-force enumeration oracle for
//! small instances.

use thiserror::Error;

use crate::tagging::{BioLabel, TagScheme, TagSequence};

#[derive(Debug, Error)]
pub enum CrfError {
    #[error("gold sequence is infeasible under the BIO constraints: {0}")]
    InfeasibleGold(String),
    #[error("oracle refusal: {0}")]
    OracleRefusal(String),
    #[error("crf error: {0}")]
    Invalid(String),
}

/// Additive penalty standing in for -inf on constrained moves. Score
/// magnitudes stay below ~1e2 in this engine, which the scoring paths
/// assert, so one penalty dominates any legal score difference.
pub const CONSTRAINT_PENALTY: f64 = 1e4;

const SCORE_SCALE_LIMIT: f64 = 1e3;

/// BIO-legal moves including the virtual start and end positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConstraintMask {
    pub num_tags: usize,
    pub start_ok: Vec<bool>,
    pub end_ok: Vec<bool>,
    pub trans_ok: Vec<bool>, // [from * K + to]
}

impl ConstraintMask {
    /// Builds the BIO mask for a scheme: start cannot enter I-T, and I-T is
    /// reachable only from B-T or I-T of the same type.
    pub fn bio(scheme: &TagScheme) -> ConstraintMask {
        let k = scheme.num_labels();
        let mut start_ok = vec![true; k];
        let end_ok = vec![true; k];
        let mut trans_ok = vec![true; k * k];
        for to in 0..k {
            if let BioLabel::Inside(ty) = scheme.decompose(to) {
                start_ok[to] = false;
                for from in 0..k {
                    let legal = matches!(
                        scheme.decompose(from),
                        BioLabel::Begin(f) | BioLabel::Inside(f) if f == ty
                    );
                    trans_ok[from * k + to] = legal;
                }
            }
        }
        ConstraintMask { num_tags: k, start_ok, end_ok, trans_ok }
    }

    pub fn allows(&self, from: usize, to: usize) -> bool {
        self.trans_ok[from * self.num_tags + to]
    }
}

/// Transition parameters plus the optional constraint mask. `transitions`
/// is row-major [from, to].
#[derive(Debug, Clone)]
pub struct CrfParams<'a> {
    pub num_tags: usize,
    pub transitions: &'a [f64],
    pub start_scores: &'a [f64],
    pub end_scores: &'a [f64],
    pub constraints: Option<&'a ConstraintMask>,
}

impl<'a> CrfParams<'a> {
    fn start(&self, tag: usize) -> f64 {
        let mut s = self.start_scores[tag];
        if let Some(m) = self.constraints {
            if !m.start_ok[tag] {
                s -= CONSTRAINT_PENALTY;
            }
        }
        s
    }

    fn end(&self, tag: usize) -> f64 {
        let mut s = self.end_scores[tag];
        if let Some(m) = self.constraints {
            if !m.end_ok[tag] {
                s -= CONSTRAINT_PENALTY;
            }
        }
        s
    }

    fn trans(&self, from: usize, to: usize) -> f64 {
        let mut s = self.transitions[from * self.num_tags + to];
        if let Some(m) = self.constraints {
            if !m.allows(from, to) {
                s -= CONSTRAINT_PENALTY;
            }
        }
        s
    }

    fn assert_scale(&self, emissions: &[Vec<f64>]) {
        debug_assert!(
            self.transitions.iter().chain(self.start_scores).chain(self.end_scores).all(|v| {
                v.abs() <= SCORE_SCALE_LIMIT
            }),
            "crf scores exceed the scale the constraint penalty assumes"
        );
        debug_assert!(
            emissions.iter().flatten().all(|v| v.abs() <= SCORE_SCALE_LIMIT),
            "emission scores exceed the scale the constraint penalty assumes"
        );
    }

    fn gold_is_legal(&self, tags: &[usize]) -> bool {
        match self.constraints {
            None => true,
            Some(m) => {
                m.start_ok[tags[0]]
                    && m.end_ok[*tags.last().unwrap()]
                    && tags.windows(2).all(|w| m.allows(w[0], w[1]))
            }
        }
    }
}

fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sequence_score(emissions: &[Vec<f64>], tags: &TagSequence, c: &CrfParams) -> f64 {
    assert_eq!(emissions.len(), tags.len());
    c.assert_scale(emissions);
    let y = &tags.labels;
    let mut score = c.start(y[0]) + emissions[0][y[0]];
    for i in 1..y.len() {
        score += c.trans(y[i - 1], y[i]) + emissions[i][y[i]];
    }
    score + c.end(y[y.len() - 1])
}

pub fn log_partition(emissions: &[Vec<f64>], c: &CrfParams) -> f64 {
    let (alphas, log_z) = forward_alphas(emissions, c);
    let _ = alphas;
    log_z
}

fn forward_alphas(emissions: &[Vec<f64>], c: &CrfParams) -> (Vec<Vec<f64>>, f64) {
    c.assert_scale(emissions);
    let n = emissions.len();
    let k = c.num_tags;
    let mut alphas = vec![vec![0.0; k]; n];
    for t in 0..k {
        alphas[0][t] = c.start(t) + emissions[0][t];
    }
    let mut buf = vec![0.0; k];
    for i in 1..n {
        for to in 0..k {
            for (from, b) in buf.iter_mut().enumerate() {
                *b = alphas[i - 1][from] + c.trans(from, to);
            }
            alphas[i][to] = log_sum_exp(&buf) + emissions[i][to];
        }
    }
    let final_scores: Vec<f64> = (0..k).map(|t| alphas[n - 1][t] + c.end(t)).collect();
    let log_z = log_sum_exp(&final_scores);
    (alphas, log_z)
}

fn backward_betas(emissions: &[Vec<f64>], c: &CrfParams) -> Vec<Vec<f64>> {
    let n = emissions.len();
    let k = c.num_tags;
    let mut betas = vec![vec![0.0; k]; n];
    for t in 0..k {
        betas[n - 1][t] = c.end(t);
    }
    let mut buf = vec![0.0; k];
    for i in (0..n - 1).rev() {
        for from in 0..k {
            for (to, b) in buf.iter_mut().enumerate() {
                *b = c.trans(from, to) + emissions[i + 1][to] + betas[i + 1][to];
            }
            betas[i][from] = log_sum_exp(&buf);
        }
    }
    betas
}

/// Per-position tag marginals p(y_i = k | x).
pub fn marginals(emissions: &[Vec<f64>], c: &CrfParams) -> Vec<Vec<f64>> {
    let (alphas, log_z) = forward_alphas(emissions, c);
    let betas = backward_betas(emissions, c);
    alphas
        .iter()
        .zip(&betas)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x + y - log_z).exp()).collect())
        .collect()
}

/// NLL with exact gradients for emissions, transitions and the virtual
/// start/end scores.
pub struct CrfNll {
    pub loss: f64,
    pub d_emissions: Vec<Vec<f64>>,
    pub d_transitions: Vec<f64>,
    pub d_start: Vec<f64>,
    pub d_end: Vec<f64>,
}

pub fn crf_nll(
    emissions: &[Vec<f64>],
    tags: &TagSequence,
    c: &CrfParams,
) -> Result<CrfNll, CrfError> {
    let n = emissions.len();
    let k = c.num_tags;
    if tags.len() != n {
        return Err(CrfError::Invalid(format!(
            "tag length {} does not match emission length {n}",
            tags.len()
        )));
    }
    if !c.gold_is_legal(&tags.labels) {
        return Err(CrfError::InfeasibleGold(format!("{:?}", tags.labels)));
    }
    let (alphas, log_z) = forward_alphas(emissions, c);
    let betas = backward_betas(emissions, c);
    let gold_score = sequence_score(emissions, tags, c);
    let loss = log_z - gold_score;

    let mut d_emissions = vec![vec![0.0; k]; n];
    for i in 0..n {
        for t in 0..k {
            d_emissions[i][t] = (alphas[i][t] + betas[i][t] - log_z).exp();
        }
        d_emissions[i][tags.labels[i]] -= 1.0;
    }

    let mut d_start = vec![0.0; k];
    let mut d_end = vec![0.0; k];
    for t in 0..k {
        d_start[t] = (alphas[0][t] + betas[0][t] - log_z).exp();
        d_end[t] = (alphas[n - 1][t] + betas[n - 1][t] - log_z).exp();
    }
    d_start[tags.labels[0]] -= 1.0;
    d_end[tags.labels[n - 1]] -= 1.0;

    let mut d_transitions = vec![0.0; k * k];
    for i in 0..n - 1 {
        for from in 0..k {
            for to in 0..k {
                let p = (alphas[i][from]
                    + c.trans(from, to)
                    + emissions[i + 1][to]
                    + betas[i + 1][to]
                    - log_z)
                    .exp();
                d_transitions[from * k + to] += p;
            }
        }
        d_transitions[tags.labels[i] * k + tags.labels[i + 1]] -= 1.0;
    }

    Ok(CrfNll { loss, d_emissions, d_transitions, d_start, d_end })
}

/// Best-scoring legal path; ties broken toward the lowest tag index.
pub fn viterbi(emissions: &[Vec<f64>], c: &CrfParams) -> (TagSequence, f64) {
    c.assert_scale(emissions);
    let n = emissions.len();
    let k = c.num_tags;
    let mut score = vec![vec![0.0; k]; n];
    let mut back = vec![vec![0usize; k]; n];
    for t in 0..k {
        score[0][t] = c.start(t) + emissions[0][t];
    }
    for i in 1..n {
        for to in 0..k {
            let mut best_from = 0;
            let mut best = score[i - 1][0] + c.trans(0, to);
            for from in 1..k {
                let s = score[i - 1][from] + c.trans(from, to);
                if s > best {
                    best = s;
                    best_from = from;
                }
            }
            // accumulate as prefix + (trans + emission), the association
            // order of `sequence_score`, so decoded scores are bit-equal to
            // rescoring the decoded path
            score[i][to] = score[i - 1][best_from] + (c.trans(best_from, to) + emissions[i][to]);
            back[i][to] = best_from;
        }
    }
    let mut best_last = 0;
    let mut best = score[n - 1][0] + c.end(0);
    for t in 1..k {
        let s = score[n - 1][t] + c.end(t);
        if s > best {
            best = s;
            best_last = t;
        }
    }
    let mut path = vec![0usize; n];
    path[n - 1] = best_last;
    for i in (1..n).rev() {
        path[i - 1] = back[i][path[i]];
    }
    (TagSequence::new(path), best)
}

pub struct OracleReport {
    pub log_z: f64,
    pub best_sequence: TagSequence,
    pub best_score: f64,
    pub marginals: Vec<Vec<f64>>,
}

const ORACLE_BOUND: usize = 100_000;

/// Exact enumeration over all K^n sequences. Refuses instances above
/// 100,000 sequences.
pub fn brute_force_oracle(
    emissions: &[Vec<f64>],
    c: &CrfParams,
) -> Result<OracleReport, CrfError> {
    let n = emissions.len();
    let k = c.num_tags;
    let total = (k as f64).powi(n as i32);
    if total > ORACLE_BOUND as f64 {
        return Err(CrfError::OracleRefusal(format!(
            "{k}^{n} = {total} sequences exceeds the {ORACLE_BOUND} bound"
        )));
    }
    let total = total as usize;

    let mut scores = Vec::with_capacity(total);
    let mut best_score = f64::NEG_INFINITY;
    let mut best_seq = vec![0usize; n];
    let mut seq = vec![0usize; n];
    for code in 0..total {
        let mut rem = code;
        for s in seq.iter_mut() {
            *s = rem % k;
            rem /= k;
        }
        let sc = sequence_score(emissions, &TagSequence::new(seq.clone()), c);
        if sc > best_score {
            best_score = sc;
            best_seq = seq.clone();
        }
        scores.push((sc, seq.clone()));
    }
    let all: Vec<f64> = scores.iter().map(|(s, _)| *s).collect();
    let log_z = log_sum_exp(&all);

    let mut marg = vec![vec![0.0; k]; n];
    for (sc, s) in &scores {
        let p = (sc - log_z).exp();
        for (i, &t) in s.iter().enumerate() {
            marg[i][t] += p;
        }
    }

    Ok(OracleReport {
        log_z,
        best_sequence: TagSequence::new(best_seq),
        best_score,
        marginals: marg,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tagging::build_scheme;
    use rand::Rng;
    use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

    fn random_instance(
        rng: &mut ChaCha8Rng,
        n: usize,
        k: usize,
    ) -> (Vec<Vec<f64>>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let emissions =
            (0..n).map(|_| (0..k).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect();
        let trans = (0..k * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let start = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let end = (0..k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (emissions, trans, start, end)
    }

    #[test]
    fn single_token_score_is_emission() {
        let e = vec![vec![0.3, -0.7]];
        let trans = vec![0.0; 4];
        let zero = vec![0.0; 2];
        let c = CrfParams {
            num_tags: 2,
            transitions: &trans,
            start_scores: &zero,
            end_scores: &zero,
            constraints: None,
        };
        assert_eq!(sequence_score(&e, &TagSequence::new(vec![1]), &c), -0.7);
    }

    #[test]
    fn zero_params_score_zero() {
        let e = vec![vec![0.0; 3]; 4];
        let trans = vec![0.0; 9];
        let zero = vec![0.0; 3];
        let c = CrfParams {
            num_tags: 3,
            transitions: &trans,
            start_scores: &zero,
            end_scores: &zero,
            constraints: None,
        };
        assert_eq!(sequence_score(&e, &TagSequence::new(vec![0, 2, 1, 0]), &c), 0.0);
    }

    #[test]
    fn uniform_log_partition_counts_sequences() {
        let k = 3;
        let n = 4;
        let e = vec![vec![0.0; k]; n];
        let trans = vec![0.0; k * k];
        let zero = vec![0.0; k];
        let c = CrfParams {
            num_tags: k,
            transitions: &trans,
            start_scores: &zero,
            end_scores: &zero,
            constraints: None,
        };
        let lz = log_partition(&e, &c);
        assert!((lz - (n as f64) * (k as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_partition_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let (e, trans, start, end) = random_instance(&mut rng, 3, 3);
            let c = CrfParams {
                num_tags: 3,
                transitions: &trans,
                start_scores: &start,
                end_scores: &end,
                constraints: None,
            };
            let oracle = brute_force_oracle(&e, &c).unwrap();
            assert!((log_partition(&e, &c) - oracle.log_z).abs() <= 1e-9);
        }
    }

    #[test]
    fn constrained_log_partition_not_larger() {
        let scheme = build_scheme(["A"]).unwrap();
        let mask = ConstraintMask::bio(&scheme);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (e, trans, start, end) = random_instance(&mut rng, 4, 3);
        let free = CrfParams {
            num_tags: 3,
            transitions: &trans,
            start_scores: &start,
            end_scores: &end,
            constraints: None,
        };
        let constrained = CrfParams { constraints: Some(&mask), ..free.clone() };
        assert!(log_partition(&e, &constrained) <= log_partition(&e, &free));
    }

    #[test]
    fn nll_properties() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (e, trans, start, end) = random_instance(&mut rng, 4, 3);
        let c = CrfParams {
            num_tags: 3,
            transitions: &trans,
            start_scores: &start,
            end_scores: &end,
            constraints: None,
        };
        let gold = TagSequence::new(vec![0, 1, 2, 0]);
        let out = crf_nll(&e, &gold, &c).unwrap();
        assert!(out.loss >= 0.0);
        // marginals at each position sum to 1
        let m = marginals(&e, &c);
        for row in &m {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn nll_near_zero_when_gold_dominates() {
        let k = 2;
        let e = vec![vec![50.0, -50.0], vec![-50.0, 50.0]];
        let trans = vec![0.0; k * k];
        let zero = vec![0.0; k];
        let c = CrfParams {
            num_tags: k,
            transitions: &trans,
            start_scores: &zero,
            end_scores: &zero,
            constraints: None,
        };
        let out = crf_nll(&e, &TagSequence::new(vec![0, 1]), &c).unwrap();
        assert!(out.loss < 1e-9);
    }

    #[test]
    fn nll_emission_gradient_matches_finite_difference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut e, trans, start, end) = random_instance(&mut rng, 3, 3);
        let gold = TagSequence::new(vec![1, 0, 2]);
        let c = CrfParams {
            num_tags: 3,
            transitions: &trans,
            start_scores: &start,
            end_scores: &end,
            constraints: None,
        };
        let analytic = crf_nll(&e, &gold, &c).unwrap();
        let eps = 1e-6;
        for i in 0..3 {
            for t in 0..3 {
                e[i][t] += eps;
                let hi = crf_nll(&e, &gold, &c).unwrap().loss;
                e[i][t] -= 2.0 * eps;
                let lo = crf_nll(&e, &gold, &c).unwrap().loss;
                e[i][t] += eps;
                let num = (hi - lo) / (2.0 * eps);
                assert!(
                    (num - analytic.d_emissions[i][t]).abs() < 1e-6,
                    "mismatch at ({i},{t}): {num} vs {}",
                    analytic.d_emissions[i][t]
                );
            }
        }
    }

    #[test]
    fn infeasible_gold_is_an_error() {
        let scheme = build_scheme(["A"]).unwrap();
        let mask = ConstraintMask::bio(&scheme);
        let e = vec![vec![0.0; 3]; 2];
        let trans = vec![0.0; 9];
        let zero = vec![0.0; 3];
        let c = CrfParams {
            num_tags: 3,
            transitions: &trans,
            start_scores: &zero,
            end_scores: &zero,
            constraints: Some(&mask),
        };
        // starts with I-A
        let r = crf_nll(&e, &TagSequence::new(vec![2, 0]), &c);
        assert!(matches!(r, Err(CrfError::InfeasibleGold(_))));
    }

    #[test]
    fn viterbi_single_token() {
        let e = vec![vec![0.1, 0.9, 0.3]];
        let trans = vec![0.0; 9];
        let zero = vec![0.0; 3];
        let c = CrfParams {
            num_tags: 3,
            transitions: &trans,
            start_scores: &zero,
            end_scores: &zero,
            constraints: None,
        };
        let (seq, score) = viterbi(&e, &c);
        assert_eq!(seq.labels, vec![1]);
        assert!((score - 0.9).abs() < 1e-12);
    }

    #[test]
    fn viterbi_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let (e, trans, start, end) = random_instance(&mut rng, 3, 3);
            let c = CrfParams {
                num_tags: 3,
                transitions: &trans,
                start_scores: &start,
                end_scores: &end,
                constraints: None,
            };
            let oracle = brute_force_oracle(&e, &c).unwrap();
            let (seq, score) = viterbi(&e, &c);
            assert!((score - oracle.best_score).abs() < 1e-12);
            assert_eq!(
                sequence_score(&e, &seq, &c),
                score,
                "returned score must equal the path's own score"
            );
        }
    }

    #[test]
    fn constrained_viterbi_is_bio_valid() {
        let scheme = build_scheme(["A", "B"]).unwrap();
        let mask = ConstraintMask::bio(&scheme);
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..30 {
            let (e, trans, start, end) = random_instance(&mut rng, 5, 5);
            let c = CrfParams {
                num_tags: 5,
                transitions: &trans,
                start_scores: &start,
                end_scores: &end,
                constraints: Some(&mask),
            };
            let (seq, _) = viterbi(&e, &c);
            assert!(crate::tagging::validate_bio(&seq, &scheme).is_empty());
        }
    }

    #[test]
    fn oracle_refuses_large_instances() {
        let e = vec![vec![0.0; 5]; 8];
        let trans = vec![0.0; 25];
        let zero = vec![0.0; 5];
        let c = CrfParams {
            num_tags: 5,
            transitions: &trans,
            start_scores: &zero,
            end_scores: &zero,
            constraints: None,
        };
        assert!(matches!(brute_force_oracle(&e, &c), Err(CrfError::OracleRefusal(_))));
    }

    #[test]
    fn emission_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (mut e, trans, start, end) = random_instance(&mut rng, 4, 3);
        let c = CrfParams {
            num_tags: 3,
            transitions: &trans,
            start_scores: &start,
            end_scores: &end,
            constraints: None,
        };
        let gold = TagSequence::new(vec![0, 1, 2, 1]);
        let base_nll = crf_nll(&e, &gold, &c).unwrap().loss;
        let (base_path, _) = viterbi(&e, &c);
        let shift = 0.37;
        for t in 0..3 {
            e[2][t] += shift;
        }
        let shifted_nll = crf_nll(&e, &gold, &c).unwrap().loss;
        let (shifted_path, _) = viterbi(&e, &c);
        assert!((base_nll - shifted_nll).abs() < 1e-9);
        assert_eq!(base_path, shifted_path);
    }
}
