//! Deterministic synthetic corpora: a small fully learnable tagging fixture
//! and a two-type corpus whose entity tokens are ambiguous without the
//! sentence label.

use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};

struct Row {
    token: &'static str,
    pos: &'static str,
    tag: String,
}

fn render(scheme: &str, sentences: &[Vec<Row>]) -> String {
    let mut out = String::new();
    out.push_str(&format!("#scheme: {scheme}\n"));
    for s in sentences {
        out.push('\n');
        for r in s {
            out.push_str(&format!("{}\t{}\t{}\n", r.token, r.pos, r.tag));
        }
    }
    out
}

const FILLERS: &[(&str, &str)] = &[
    ("the", "DT"),
    ("patient", "NN"),
    ("showed", "VBD"),
    ("signs", "NNS"),
    ("of", "IN"),
    ("mild", "JJ"),
    ("severe", "JJ"),
    ("today", "RB"),
];

const SINGLE_ENTITIES: &[&str] = &["fever", "cough", "rash", "anemia"];

const MULTI_ENTITIES: &[&[(&str, &str)]] = &[
    &[("cardiac", "JJ"), ("arrest", "NN")],
    &[("torsades", "NNP"), ("de", "IN"), ("pointes", "NNP")],
];

/// Fifty-sentence corpus over one `Disease` type where every token's tag is
/// determined by its surface form; a small model can reach span F1 = 1.0.
/// Fully deterministic (fixed internal seed).
pub fn learnable_fixture() -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut sentences = Vec::with_capacity(50);
    for i in 0..50 {
        // cycle entity counts 0,1,2 so every sentence-label class appears
        let n_entities = i % 3;
        let n_fillers = rng.gen_range(2..=4);
        let mut chunks: Vec<Vec<Row>> = Vec::new();
        for _ in 0..n_fillers {
            let (token, pos) = FILLERS[rng.gen_range(0..FILLERS.len())];
            chunks.push(vec![Row { token, pos, tag: "O".to_string() }]);
        }
        for _ in 0..n_entities {
            if rng.gen_bool(0.5) {
                let token = SINGLE_ENTITIES[rng.gen_range(0..SINGLE_ENTITIES.len())];
                chunks.push(vec![Row { token, pos: "NN", tag: "B-Disease".to_string() }]);
            } else {
                let parts = MULTI_ENTITIES[rng.gen_range(0..MULTI_ENTITIES.len())];
                chunks.push(
                    parts
                        .iter()
                        .enumerate()
                        .map(|(j, &(token, pos))| Row {
                            token,
                            pos,
                            tag: if j == 0 { "B-Disease" } else { "I-Disease" }.to_string(),
                        })
                        .collect(),
                );
            }
        }
        // deterministic interleave: swap chunk order by rng
        for k in (1..chunks.len()).rev() {
            let j = rng.gen_range(0..=k);
            chunks.swap(k, j);
        }
        sentences.push(chunks.into_iter().flatten().collect());
    }
    render("Disease", &sentences)
}

const AMBIGUOUS_ENTITIES: &[&str] =
    &["ent0", "ent1", "ent2", "ent3", "ent4", "ent5", "ent6", "ent7"];

const PLAIN_FILLERS: &[&str] = &["f0", "f1", "f2", "f3", "f4", "f5", "f6", "f7", "f8", "f9"];

/// Two-type corpus (`A`, `B`) whose entity surface tokens appear under both
/// types with equal probability. Within a sentence all entities share one
/// type, so the sentence label disambiguates them; a cue token correlated
/// with the type appears with probability `cue_fraction` (tagged `O`), which
/// bounds what a label-blind model can recover.
pub fn ambiguous_corpus(seed: u64, n_sentences: usize, cue_fraction: f64) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sentences = Vec::with_capacity(n_sentences);
    for _ in 0..n_sentences {
        let ty = if rng.gen_bool(0.5) { "A" } else { "B" };
        let n_entities = rng.gen_range(1..=2);
        let n_fillers = rng.gen_range(2..=3);
        let mut chunks: Vec<Vec<Row>> = Vec::new();
        for _ in 0..n_fillers {
            let token = PLAIN_FILLERS[rng.gen_range(0..PLAIN_FILLERS.len())];
            chunks.push(vec![Row { token, pos: "DT", tag: "O".to_string() }]);
        }
        for _ in 0..n_entities {
            let token = AMBIGUOUS_ENTITIES[rng.gen_range(0..AMBIGUOUS_ENTITIES.len())];
            chunks.push(vec![Row { token, pos: "NN", tag: format!("B-{ty}") }]);
        }
        for k in (1..chunks.len()).rev() {
            let j = rng.gen_range(0..=k);
            chunks.swap(k, j);
        }
        let mut rows: Vec<Row> = chunks.into_iter().flatten().collect();
        if rng.gen_bool(cue_fraction) {
            let token = if ty == "A" { "cueA" } else { "cueB" };
            rows.push(Row { token, pos: "RB", tag: "O".to_string() });
        }
        sentences.push(rows);
    }
    render("A,B", &sentences)
}
