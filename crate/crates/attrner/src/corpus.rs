//! Column-formatted corpus parsing, sentence-label derivation, vocabulary
//! construction and padded batch encoding.
//!
//! File format: optional header `#scheme: T1,T2,...`; one token per line as
//! `TOKEN<TAB>POS<TAB>BIOTAG`; a blank line terminates a sentence; lines
//! starting with `#` are comments. `#label: L` ahead of a sentence attaches
//! a sentence label. Files without gold tags use `_` in column 3.

use std::collections::HashMap;

use indexmap::IndexMap;
use thiserror::Error;

use crate::injection::{attr_token, InjectionMode, InjectionSite};
use crate::tagging::{self, TagScheme, TagSequence};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("label derivation error: {0}")]
    Derivation(String),
    #[error("batch encoding error: {0}")]
    Encode(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const SEP_TOKEN: &str = "[SEP]";
pub const EOS_TOKEN: &str = "[EOS]";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub pos: Vec<String>,
    pub gold_tags: Option<TagSequence>,
    pub sentence_label: Option<String>,
    /// False when the parsed gold tags violate BIO validity.
    pub bio_valid: bool,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    pub sentences: Vec<Sentence>,
    pub scheme: TagScheme,
    pub split_name: String,
}

/// Derives the sentence-level categorical label from gold spans:
/// no entities -> "None"; otherwise the majority entity type T (ties broken
/// to the lexicographically smallest name) with a one/more count suffix.
pub fn derive_sentence_label(s: &Sentence, scheme: &TagScheme) -> Result<String, CorpusError> {
    let tags = s
        .gold_tags
        .as_ref()
        .ok_or_else(|| CorpusError::Derivation("sentence has no gold tags".into()))?;
    let spans = tagging::spans_from_tags(tags, scheme)
        .map_err(|e| CorpusError::Derivation(e.to_string()))?;
    if spans.is_empty() {
        return Ok("None".to_string());
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for sp in &spans {
        *counts.entry(sp.entity_type.as_str()).or_default() += 1;
    }
    let (ty, n) = counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .unwrap();
    Ok(if n == 1 { format!("{ty}-one") } else { format!("{ty}-more") })
}

/// Annotates every sentence that has gold tags with its derived label.
pub fn derive_all_labels(c: &mut Corpus) -> Result<(), CorpusError> {
    let scheme = c.scheme.clone();
    for s in &mut c.sentences {
        if s.gold_tags.is_some() && s.bio_valid {
            s.sentence_label = Some(derive_sentence_label(s, &scheme)?);
        }
    }
    Ok(())
}

struct RawBlock {
    start_line: usize,
    label: Option<String>,
    rows: Vec<(usize, String, String, String)>,
}

pub fn parse_column_file(text: &str, split_name: &str) -> Result<Corpus, CorpusError> {
    let mut scheme: Option<TagScheme> = None;
    let mut blocks: Vec<RawBlock> = Vec::new();
    let mut cur: Option<RawBlock> = None;

    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if let Some(b) = cur.take() {
                if b.rows.is_empty() {
                    return Err(CorpusError::Parse {
                        line: b.start_line,
                        msg: "sentence block with no token lines".into(),
                    });
                }
                blocks.push(b);
            }
            continue;
        }
        if let Some(rest) = line.strip_prefix("#scheme:") {
            let types: Vec<String> =
                rest.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect();
            scheme = Some(tagging::build_scheme(types).map_err(|e| CorpusError::Parse {
                line: lineno,
                msg: e.to_string(),
            })?);
            continue;
        }
        if let Some(rest) = line.strip_prefix("#label:") {
            let b = cur.get_or_insert_with(|| RawBlock {
                start_line: lineno,
                label: None,
                rows: Vec::new(),
            });
            b.label = Some(rest.trim().to_string());
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(CorpusError::Parse {
                line: lineno,
                msg: format!("expected 3 tab-separated columns, found {}", cols.len()),
            });
        }
        if cols.iter().any(|c| c.is_empty()) {
            return Err(CorpusError::Parse { line: lineno, msg: "empty column".into() });
        }
        let b = cur.get_or_insert_with(|| RawBlock {
            start_line: lineno,
            label: None,
            rows: Vec::new(),
        });
        b.rows.push((lineno, cols[0].to_string(), cols[1].to_string(), cols[2].to_string()));
    }
    if let Some(b) = cur.take() {
        if b.rows.is_empty() {
            return Err(CorpusError::Parse {
                line: b.start_line,
                msg: "sentence block with no token lines".into(),
            });
        }
        blocks.push(b);
    }

    // Without a header the scheme is inferred from tags in first-appearance
    // order.
    let scheme = match scheme {
        Some(s) => s,
        None => {
            let mut types: Vec<String> = Vec::new();
            for b in &blocks {
                for (_, _, _, tag) in &b.rows {
                    if let Some(ty) = tag.strip_prefix("B-").or_else(|| tag.strip_prefix("I-")) {
                        if !types.iter().any(|t| t == ty) {
                            types.push(ty.to_string());
                        }
                    }
                }
            }
            if types.is_empty() {
                return Err(CorpusError::Parse {
                    line: 1,
                    msg: "no #scheme header and no B-/I- tags to infer one from".into(),
                });
            }
            tagging::build_scheme(types)
                .map_err(|e| CorpusError::Parse { line: 1, msg: e.to_string() })?
        }
    };

    let mut sentences = Vec::with_capacity(blocks.len());
    for b in blocks {
        let untagged = b.rows.iter().filter(|(_, _, _, t)| t == "_").count();
        if untagged > 0 && untagged != b.rows.len() {
            return Err(CorpusError::Parse {
                line: b.start_line,
                msg: "mixed `_` and gold tags within one sentence".into(),
            });
        }
        let mut tokens = Vec::with_capacity(b.rows.len());
        let mut pos = Vec::with_capacity(b.rows.len());
        let mut tag_ids = Vec::with_capacity(b.rows.len());
        for (lineno, tok, p, tag) in &b.rows {
            tokens.push(tok.clone());
            pos.push(p.clone());
            if untagged == 0 {
                let idx = scheme.label_index(tag).ok_or_else(|| CorpusError::Parse {
                    line: *lineno,
                    msg: format!("unknown tag {tag:?} for scheme {:?}", scheme.entity_types()),
                })?;
                tag_ids.push(idx);
            }
        }
        let gold_tags = (untagged == 0).then(|| TagSequence::new(tag_ids));
        let bio_valid = gold_tags
            .as_ref()
            .map(|t| tagging::validate_bio(t, &scheme).is_empty())
            .unwrap_or(true);
        sentences.push(Sentence { tokens, pos, gold_tags, sentence_label: b.label, bio_valid });
    }

    Ok(Corpus { sentences, scheme, split_name: split_name.to_string() })
}

pub fn serialize_corpus(c: &Corpus) -> String {
    let mut out = String::new();
    out.push_str("#scheme: ");
    out.push_str(&c.scheme.entity_types().join(","));
    out.push('\n');
    for s in &c.sentences {
        out.push('\n');
        if let Some(label) = &s.sentence_label {
            out.push_str(&format!("#label: {label}\n"));
        }
        for i in 0..s.len() {
            let tag = match &s.gold_tags {
                Some(t) => c.scheme.label_name(t.labels[i]).to_string(),
                None => "_".to_string(),
            };
            out.push_str(&format!("{}\t{}\t{}\n", s.tokens[i], s.pos[i], tag));
        }
    }
    out
}

/// Injective surface->id maps; token and POS maps reserve 0 = padding and
/// 1 = unknown. Immutable after build.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    pub token_to_id: IndexMap<String, usize>,
    pub pos_to_id: IndexMap<String, usize>,
    pub label_to_id: IndexMap<String, usize>,
}

impl Vocabulary {
    pub fn num_tokens(&self) -> usize {
        self.token_to_id.len()
    }

    pub fn num_pos(&self) -> usize {
        self.pos_to_id.len()
    }

    pub fn num_labels(&self) -> usize {
        self.label_to_id.len()
    }

    pub fn token_id(&self, tok: &str) -> usize {
        self.token_to_id.get(tok).copied().unwrap_or(UNK_ID)
    }

    pub fn pos_id(&self, p: &str) -> usize {
        self.pos_to_id.get(p).copied().unwrap_or(UNK_ID)
    }

    pub fn label_id(&self, l: &str) -> Option<usize> {
        self.label_to_id.get(l).copied()
    }

    pub fn label_name(&self, id: usize) -> Option<&str> {
        self.label_to_id.iter().find(|(_, &v)| v == id).map(|(k, _)| k.as_str())
    }

    pub fn labels(&self) -> Vec<&str> {
        self.label_to_id.keys().map(String::as_str).collect()
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        for (surface, id) in &self.token_to_id {
            out.push_str(&format!("token\t{surface}\t{id}\n"));
        }
        for (surface, id) in &self.pos_to_id {
            out.push_str(&format!("pos\t{surface}\t{id}\n"));
        }
        for (surface, id) in &self.label_to_id {
            out.push_str(&format!("label\t{surface}\t{id}\n"));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Vocabulary, CorpusError> {
        let mut v = Vocabulary {
            token_to_id: IndexMap::new(),
            pos_to_id: IndexMap::new(),
            label_to_id: IndexMap::new(),
        };
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 3 {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    msg: "vocabulary lines need 3 columns".into(),
                });
            }
            let id: usize = cols[2].parse().map_err(|_| CorpusError::Parse {
                line: i + 1,
                msg: format!("bad id {:?}", cols[2]),
            })?;
            let map = match cols[0] {
                "token" => &mut v.token_to_id,
                "pos" => &mut v.pos_to_id,
                "label" => &mut v.label_to_id,
                other => {
                    return Err(CorpusError::Parse {
                        line: i + 1,
                        msg: format!("unknown vocabulary kind {other:?}"),
                    })
                }
            };
            if map.insert(cols[1].to_string(), id).is_some() {
                return Err(CorpusError::Parse {
                    line: i + 1,
                    msg: format!("duplicate entry {:?}", cols[1]),
                });
            }
        }
        Ok(v)
    }
}

fn ranked_surfaces(freq: &HashMap<String, usize>, min_freq: usize) -> Vec<String> {
    let mut items: Vec<(&String, usize)> =
        freq.iter().filter(|(_, &c)| c >= min_freq).map(|(s, &c)| (s, c)).collect();
    items.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    items.into_iter().map(|(s, _)| s.clone()).collect()
}

/// Builds the vocabulary from a training corpus. Sentence labels are taken
/// from annotated labels or derived from gold tags; the label pseudo-tokens
/// for text-mode injection and the `[SEP]`/`[EOS]` markers always get ids.
pub fn build_vocab(c: &Corpus, min_token_freq: usize) -> Result<Vocabulary, CorpusError> {
    if c.sentences.is_empty() {
        return Err(CorpusError::Encode("cannot build a vocabulary from an empty corpus".into()));
    }
    let mut tok_freq: HashMap<String, usize> = HashMap::new();
    let mut pos_freq: HashMap<String, usize> = HashMap::new();
    let mut label_freq: HashMap<String, usize> = HashMap::new();
    for s in &c.sentences {
        for t in &s.tokens {
            *tok_freq.entry(t.clone()).or_default() += 1;
        }
        for p in &s.pos {
            *pos_freq.entry(p.clone()).or_default() += 1;
        }
        let label = match &s.sentence_label {
            Some(l) => Some(l.clone()),
            None if s.gold_tags.is_some() && s.bio_valid => {
                Some(derive_sentence_label(s, &c.scheme)?)
            }
            None => None,
        };
        if let Some(l) = label {
            *label_freq.entry(l).or_default() += 1;
        }
    }

    let mut label_to_id = IndexMap::new();
    for l in ranked_surfaces(&label_freq, 1) {
        let id = label_to_id.len();
        label_to_id.insert(l, id);
    }

    let mut token_to_id = IndexMap::new();
    token_to_id.insert("<pad>".to_string(), PAD_ID);
    token_to_id.insert("<unk>".to_string(), UNK_ID);
    token_to_id.insert(SEP_TOKEN.to_string(), 2);
    token_to_id.insert(EOS_TOKEN.to_string(), 3);
    for label in label_to_id.keys() {
        let id = token_to_id.len();
        token_to_id.insert(attr_token(label), id);
    }
    for t in ranked_surfaces(&tok_freq, min_token_freq) {
        if !token_to_id.contains_key(&t) {
            let id = token_to_id.len();
            token_to_id.insert(t, id);
        }
    }

    let mut pos_to_id = IndexMap::new();
    pos_to_id.insert("<pad>".to_string(), PAD_ID);
    pos_to_id.insert("<unk>".to_string(), UNK_ID);
    for p in ranked_surfaces(&pos_freq, 1) {
        if !pos_to_id.contains_key(&p) {
            let id = pos_to_id.len();
            pos_to_id.insert(p, id);
        }
    }

    Ok(Vocabulary { token_to_id, pos_to_id, label_to_id })
}

/// Padded, masked batch. Row widths equal the longest (possibly text-mode
/// augmented) sequence; padded positions carry id 0 everywhere.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Batch {
    pub token_ids: Vec<Vec<usize>>,
    pub pos_ids: Vec<Vec<usize>>,
    pub sentence_label_ids: Vec<usize>,
    pub attention_mask: Vec<Vec<u8>>,
    pub gold_tag_ids: Option<Vec<Vec<usize>>>,
    /// Offset of the first real token within each row (1 in text mode where
    /// the label pseudo-token occupies slot 0).
    pub token_offset: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn width(&self) -> usize {
        self.token_ids.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Augmented sequence length of row `i`.
    pub fn seq_len(&self, i: usize) -> usize {
        self.attention_mask[i].iter().map(|&m| m as usize).sum()
    }
}

pub fn encode_batch(
    sentences: &[Sentence],
    v: &Vocabulary,
    mode: InjectionMode,
    max_len: usize,
) -> Result<Batch, CorpusError> {
    if sentences.is_empty() {
        return Err(CorpusError::Encode("empty batch".into()));
    }
    let text_mode = mode.site == InjectionSite::Text;
    let token_offset = usize::from(text_mode);

    let mut rows_tok: Vec<Vec<usize>> = Vec::with_capacity(sentences.len());
    let mut rows_pos: Vec<Vec<usize>> = Vec::with_capacity(sentences.len());
    let mut label_ids: Vec<usize> = Vec::with_capacity(sentences.len());
    let mut rows_tags: Vec<Vec<usize>> = Vec::with_capacity(sentences.len());
    let mut all_tagged = true;

    for s in sentences {
        if s.is_empty() {
            return Err(CorpusError::Encode("sentence with no tokens".into()));
        }
        let label_id = match &s.sentence_label {
            Some(l) => v.label_id(l),
            None => None,
        };
        if mode.use_label() && label_id.is_none() {
            return Err(CorpusError::Encode(format!(
                "mode {:?} needs a sentence label known to the vocabulary, got {:?}",
                mode.site.name(),
                s.sentence_label
            )));
        }
        let mut toks: Vec<usize> = Vec::with_capacity(s.len() + token_offset);
        let mut pos: Vec<usize> = Vec::with_capacity(s.len() + token_offset);
        if text_mode {
            let label = s.sentence_label.as_ref().unwrap();
            toks.push(v.token_id(&attr_token(label)));
            pos.push(PAD_ID);
        }
        for (t, p) in s.tokens.iter().zip(&s.pos) {
            toks.push(v.token_id(t));
            pos.push(v.pos_id(p));
        }
        if toks.len() > max_len {
            return Err(CorpusError::Encode(format!(
                "sentence of augmented length {} exceeds max_len {max_len}",
                toks.len()
            )));
        }
        match &s.gold_tags {
            Some(t) => rows_tags.push(t.labels.clone()),
            None => all_tagged = false,
        }
        rows_tok.push(toks);
        rows_pos.push(pos);
        label_ids.push(label_id.unwrap_or(0));
    }

    let width = rows_tok.iter().map(Vec::len).max().unwrap();
    let mut mask = Vec::with_capacity(rows_tok.len());
    for (tok, pos) in rows_tok.iter_mut().zip(&mut rows_pos) {
        let n = tok.len();
        tok.resize(width, PAD_ID);
        pos.resize(width, PAD_ID);
        let mut m = vec![1u8; n];
        m.resize(width, 0);
        mask.push(m);
    }
    let gold_tag_ids = if all_tagged {
        Some(
            rows_tags
                .into_iter()
                .map(|mut t| {
                    // gold rows align with raw token positions, padded with 0
                    t.resize(width - token_offset, 0);
                    t
                })
                .collect(),
        )
    } else {
        None
    };

    Ok(Batch {
        token_ids: rows_tok,
        pos_ids: rows_pos,
        sentence_label_ids: label_ids,
        attention_mask: mask,
        gold_tag_ids,
        token_offset,
    })
}
