//! BIO tag scheme, tag-sequence validity, span conversions and span-level
//! micro-F1 evaluation.

use std::fmt;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TagError {
    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("invalid BIO sequence: {0}")]
    InvalidBio(String),
    #[error("overlapping spans {0:?} and {1:?}")]
    Overlap(Span, Span),
    #[error("evaluation error: {0}")]
    Evaluation(String),
}

/// BIO label inventory. Label index 0 is always "O", followed by
/// "B-T"/"I-T" pairs in entity-type declaration order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagScheme {
    entity_types: Vec<String>,
    labels: Vec<String>,
}

impl TagScheme {
    pub fn entity_types(&self) -> &[String] {
        &self.entity_types
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn num_labels(&self) -> usize {
        self.labels.len()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn label_name(&self, idx: usize) -> &str {
        &self.labels[idx]
    }

    /// Decomposes a label index into (kind, entity type). Index 0 is `O`.
    pub fn decompose(&self, idx: usize) -> BioLabel<'_> {
        if idx == 0 {
            BioLabel::Outside
        } else {
            let ty = &self.entity_types[(idx - 1) / 2];
            if (idx - 1) % 2 == 0 {
                BioLabel::Begin(ty)
            } else {
                BioLabel::Inside(ty)
            }
        }
    }

    pub fn begin_index(&self, entity_type: &str) -> Option<usize> {
        self.entity_types
            .iter()
            .position(|t| t == entity_type)
            .map(|t| 1 + 2 * t)
    }

    pub fn inside_index(&self, entity_type: &str) -> Option<usize> {
        self.begin_index(entity_type).map(|b| b + 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BioLabel<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn build_scheme<I, S>(entity_types: I) -> Result<TagScheme, TagError>
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let entity_types: Vec<String> = entity_types.into_iter().map(Into::into).collect();
    if entity_types.is_empty() {
        return Err(TagError::InvalidScheme("no entity types declared".into()));
    }
    for (i, t) in entity_types.iter().enumerate() {
        if t.is_empty() {
            return Err(TagError::InvalidScheme(format!("empty type name at position {i}")));
        }
        if entity_types[..i].contains(t) {
            return Err(TagError::InvalidScheme(format!("duplicate type name {t:?}")));
        }
    }
    let mut labels = vec!["O".to_string()];
    for t in &entity_types {
        labels.push(format!("B-{t}"));
        labels.push(format!("I-{t}"));
    }
    Ok(TagScheme { entity_types, labels })
}

/// Per-token label indices into a [`TagScheme`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TagSequence {
    pub labels: Vec<usize>,
}

impl TagSequence {
    pub fn new(labels: Vec<usize>) -> Self {
        TagSequence { labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// A maximal B..I run viewed as an entity span; `end` is exclusive.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub entity_type: String,
}

impl Span {
    pub fn new(start: usize, end: usize, entity_type: impl Into<String>) -> Self {
        Span { start, end, entity_type: entity_type.into() }
    }
}

impl fmt::Display for Span {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}) {}", self.start, self.end, self.entity_type)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BioViolation {
    pub position: usize,
    pub rule: String,
}

/// Returns all BIO violations; empty means the sequence is valid.
pub fn validate_bio(seq: &TagSequence, scheme: &TagScheme) -> Vec<BioViolation> {
    let mut violations = Vec::new();
    let mut prev = BioLabel::Outside;
    for (i, &idx) in seq.labels.iter().enumerate() {
        let cur = scheme.decompose(idx);
        if let BioLabel::Inside(ty) = cur {
            let ok = matches!(prev, BioLabel::Begin(p) | BioLabel::Inside(p) if p == ty);
            if !ok {
                violations.push(BioViolation {
                    position: i,
                    rule: format!("I-{ty} without preceding B/I of same type"),
                });
            }
        }
        prev = cur;
    }
    violations
}

/// Strict conversion: errors on the first BIO violation instead of repairing.
pub fn spans_from_tags(seq: &TagSequence, scheme: &TagScheme) -> Result<Vec<Span>, TagError> {
    let violations = validate_bio(seq, scheme);
    if let Some(v) = violations.first() {
        return Err(TagError::InvalidBio(format!("position {}: {}", v.position, v.rule)));
    }
    let mut spans = Vec::new();
    let mut open: Option<(usize, String)> = None;
    for (i, &idx) in seq.labels.iter().enumerate() {
        match scheme.decompose(idx) {
            BioLabel::Outside => {
                if let Some((start, ty)) = open.take() {
                    spans.push(Span::new(start, i, ty));
                }
            }
            BioLabel::Begin(ty) => {
                if let Some((start, prev_ty)) = open.take() {
                    spans.push(Span::new(start, i, prev_ty));
                }
                open = Some((i, ty.to_string()));
            }
            BioLabel::Inside(_) => {}
        }
    }
    if let Some((start, ty)) = open {
        spans.push(Span::new(start, seq.len(), ty));
    }
    Ok(spans)
}

/// Reinterprets headless I-T as B-T so unconstrained decoder output can be
/// scored; output always passes `validate_bio`.
pub fn repair_bio(seq: &TagSequence, scheme: &TagScheme) -> TagSequence {
    let mut out = Vec::with_capacity(seq.len());
    let mut prev = BioLabel::Outside;
    for &idx in &seq.labels {
        let cur = scheme.decompose(idx);
        let fixed = match cur {
            BioLabel::Inside(ty) => {
                let headed = matches!(prev, BioLabel::Begin(p) | BioLabel::Inside(p) if p == ty);
                if headed {
                    idx
                } else {
                    scheme.begin_index(ty).unwrap()
                }
            }
            _ => idx,
        };
        prev = scheme.decompose(fixed);
        out.push(fixed);
    }
    TagSequence::new(out)
}

pub fn tags_from_spans(
    spans: &[Span],
    n: usize,
    scheme: &TagScheme,
) -> Result<TagSequence, TagError> {
    let mut sorted: Vec<&Span> = spans.iter().collect();
    sorted.sort();
    for w in sorted.windows(2) {
        if w[1].start < w[0].end {
            return Err(TagError::Overlap(w[0].clone(), w[1].clone()));
        }
    }
    let mut labels = vec![0usize; n];
    for s in spans {
        if s.start >= s.end || s.end > n {
            return Err(TagError::InvalidBio(format!("span {s} out of bounds for length {n}")));
        }
        let b = scheme
            .begin_index(&s.entity_type)
            .ok_or_else(|| TagError::InvalidScheme(format!("unknown type {:?}", s.entity_type)))?;
        labels[s.start] = b;
        for pos in s.start + 1..s.end {
            labels[pos] = b + 1;
        }
    }
    Ok(TagSequence::new(labels))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrecisionRecallF1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> PrecisionRecallF1 {
    // 0/0 ratios are defined as 0.
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrecisionRecallF1 { precision, recall, f1 }
}

/// Exact-match span micro-F1 pooled over all sentences.
pub fn micro_f1(
    gold: &[Vec<Span>],
    pred: &[Vec<Span>],
) -> Result<PrecisionRecallF1, TagError> {
    if gold.len() != pred.len() {
        return Err(TagError::Evaluation(format!(
            "sentence count mismatch: {} gold vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (g, p) in gold.iter().zip(pred) {
        let mut g_left: Vec<&Span> = g.iter().collect();
        for span in p {
            if let Some(at) = g_left.iter().position(|s| *s == span) {
                g_left.remove(at);
                tp += 1;
            } else {
                fp += 1;
            }
        }
        fn_ += g_left.len();
    }
    Ok(prf(tp, fp, fn_))
}

/// Token-level micro-F1: a token counts as a hit when its non-O label
/// matches exactly. Exposed alongside the span-level default.
pub fn token_micro_f1(
    gold: &[TagSequence],
    pred: &[TagSequence],
) -> Result<PrecisionRecallF1, TagError> {
    if gold.len() != pred.len() {
        return Err(TagError::Evaluation(format!(
            "sentence count mismatch: {} gold vs {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    let mut tp = 0;
    let mut fp = 0;
    let mut fn_ = 0;
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(TagError::Evaluation("token count mismatch within sentence".into()));
        }
        for (&gi, &pi) in g.labels.iter().zip(&p.labels) {
            match (gi, pi) {
                (0, 0) => {}
                (0, _) => fp += 1,
                (_, 0) => fn_ += 1,
                (a, b) if a == b => tp += 1,
                _ => {
                    fp += 1;
                    fn_ += 1;
                }
            }
        }
    }
    Ok(prf(tp, fp, fn_))
}
