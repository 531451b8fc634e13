//! The four attribute-injection sites: text, embedding, attention bias and
//! classifier bias. Each reduces exactly to the baseline when its attribute
//! weights are zero.
//!
//! The functions here are row-level math over plain slices; the encoder and
//! the NER head call into them so every site lives in one place.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InjectionError {
    #[error("injection configuration error: {0}")]
    Config(String),
}

/// Where attributes enter the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InjectionSite {
    #[default]
    None,
    Text,
    Embedding,
    Attention,
    Classifier,
}

impl InjectionSite {
    pub fn parse(s: &str) -> Result<Self, InjectionError> {
        match s {
            "none" => Ok(InjectionSite::None),
            "text" => Ok(InjectionSite::Text),
            "embedding" => Ok(InjectionSite::Embedding),
            "attention" => Ok(InjectionSite::Attention),
            "classifier" => Ok(InjectionSite::Classifier),
            other => Err(InjectionError::Config(format!("unknown injection mode {other:?}"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            InjectionSite::None => "none",
            InjectionSite::Text => "text",
            InjectionSite::Embedding => "embedding",
            InjectionSite::Attention => "attention",
            InjectionSite::Classifier => "classifier",
        }
    }
}

/// Which attribute channels feed the selected site.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Channels {
    pub use_label: bool,
    pub use_pos: bool,
}

impl Channels {
    pub const LABEL: Channels = Channels { use_label: true, use_pos: false };
    pub const POS: Channels = Channels { use_label: false, use_pos: true };
    pub const BOTH: Channels = Channels { use_label: true, use_pos: true };

    pub fn parse(s: &str) -> Result<Self, InjectionError> {
        let mut ch = Channels { use_label: false, use_pos: false };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "label" => ch.use_label = true,
                "pos" => ch.use_pos = true,
                other => {
                    return Err(InjectionError::Config(format!("unknown channel {other:?}")))
                }
            }
        }
        Ok(ch)
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.use_label {
            parts.push("label");
        }
        if self.use_pos {
            parts.push("pos");
        }
        parts.join(",")
    }
}

/// Site plus channel flags; validated as a unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionMode {
    pub site: InjectionSite,
    pub channels: Channels,
}

impl Default for InjectionMode {
    fn default() -> Self {
        InjectionMode::none()
    }
}

impl InjectionMode {
    pub fn none() -> Self {
        InjectionMode {
            site: InjectionSite::None,
            channels: Channels { use_label: false, use_pos: false },
        }
    }

    pub fn new(site: InjectionSite, channels: Channels) -> Result<Self, InjectionError> {
        match site {
            InjectionSite::None => Ok(InjectionMode::none()),
            InjectionSite::Text => {
                // POS has no per-token textual serialization in this mode.
                if !channels.use_label {
                    return Err(InjectionError::Config(
                        "text mode requires the label channel".into(),
                    ));
                }
                if channels.use_pos {
                    return Err(InjectionError::Config(
                        "text mode cannot carry the pos channel".into(),
                    ));
                }
                Ok(InjectionMode { site, channels })
            }
            _ => {
                if !channels.use_label && !channels.use_pos {
                    return Err(InjectionError::Config(format!(
                        "mode {:?} needs at least one channel",
                        site.name()
                    )));
                }
                Ok(InjectionMode { site, channels })
            }
        }
    }

    pub fn use_label(&self) -> bool {
        self.site != InjectionSite::None && self.channels.use_label
    }

    pub fn use_pos(&self) -> bool {
        self.site != InjectionSite::None && self.channels.use_pos
    }
}

/// Sentence label id plus per-token POS ids, with provenance.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttributeSet {
    pub sentence_label_id: usize,
    pub pos_ids: Vec<usize>,
    pub source: AttributeSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeSource {
    Gold,
    Predicted,
}

/// Surface form of the label pseudo-token used by text-mode injection.
pub fn attr_token(label: &str) -> String {
    format!("[ATTR:{label}]")
}

/// Text-site injection: prepend the label pseudo-token to the token list.
pub fn inject_text(tokens: &[String], label: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(tokens.len() + 1);
    out.push(attr_token(label));
    out.extend(tokens.iter().cloned());
    out
}

/// Embedding-site injection for one token row: concat the base embedding
/// with the enabled attribute embeddings (disabled channels are a zero
/// block) and project back to `d_model` with `proj` of shape [d, 3d].
///
/// Returns the projected row and the concatenated input, which the backward
/// pass needs.
pub fn embed_with_attributes(
    base: &[f64],
    label_emb: Option<&[f64]>,
    pos_emb: Option<&[f64]>,
    proj: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let d = base.len();
    let mut cat = vec![0.0; 3 * d];
    cat[..d].copy_from_slice(base);
    if let Some(l) = label_emb {
        cat[d..2 * d].copy_from_slice(l);
    }
    if let Some(p) = pos_emb {
        cat[2 * d..].copy_from_slice(p);
    }
    let mut out = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        let row = &proj[i * 3 * d..(i + 1) * 3 * d];
        let mut acc = 0.0;
        for (r, c) in row.iter().zip(&cat) {
            acc += r * c;
        }
        *o = acc;
    }
    (out, cat)
}

/// Attention-site bias for one position: W_s·e(s) + W_p·e(p_i), added to the
/// query (or key) projection bias. `w_label`/`w_pos` are [d, d] row-major.
pub fn attention_bias(
    w_label: &[f64],
    label_emb: Option<&[f64]>,
    w_pos: &[f64],
    pos_emb: Option<&[f64]>,
    d: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; d];
    if let Some(l) = label_emb {
        for i in 0..d {
            let row = &w_label[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for (r, e) in row.iter().zip(l) {
                acc += r * e;
            }
            out[i] += acc;
        }
    }
    if let Some(p) = pos_emb {
        for i in 0..d {
            let row = &w_pos[i * d..(i + 1) * d];
            let mut acc = 0.0;
            for (r, e) in row.iter().zip(p) {
                acc += r * e;
            }
            out[i] += acc;
        }
    }
    out
}

/// Classifier-site bias over tag logits: W_s·e(s) + W_p·e(p_i) with weights
/// of shape [num_tags, d].
pub fn classifier_bias(
    w_label: &[f64],
    label_emb: Option<&[f64]>,
    w_pos: &[f64],
    pos_emb: Option<&[f64]>,
    num_tags: usize,
    d: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; num_tags];
    if let Some(l) = label_emb {
        for k in 0..num_tags {
            let row = &w_label[k * d..(k + 1) * d];
            let mut acc = 0.0;
            for (r, e) in row.iter().zip(l) {
                acc += r * e;
            }
            out[k] += acc;
        }
    }
    if let Some(p) = pos_emb {
        for k in 0..num_tags {
            let row = &w_pos[k * d..(k + 1) * d];
            let mut acc = 0.0;
            for (r, e) in row.iter().zip(p) {
                acc += r * e;
            }
            out[k] += acc;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_injection_prepends_pseudo_token() {
        let toks: Vec<String> =
            ["Torsades", "de", "Pointes"].iter().map(|s| s.to_string()).collect();
        let out = inject_text(&toks, "Disease-more");
        assert_eq!(out[0], "[ATTR:Disease-more]");
        assert_eq!(&out[1..], &toks[..]);
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn none_label_still_injected() {
        let toks = vec!["a".to_string()];
        assert_eq!(inject_text(&toks, "None")[0], "[ATTR:None]");
    }

    #[test]
    fn mode_validation() {
        assert!(InjectionMode::new(InjectionSite::Text, Channels::LABEL).is_ok());
        assert!(InjectionMode::new(InjectionSite::Text, Channels::POS).is_err());
        assert!(InjectionMode::new(
            InjectionSite::Embedding,
            Channels { use_label: false, use_pos: false }
        )
        .is_err());
        assert!(InjectionMode::new(InjectionSite::None, Channels::BOTH).is_ok());
    }

    #[test]
    fn embedding_zero_attribute_columns_reduce_to_base() {
        let d = 3;
        let base = vec![1.0, -2.0, 0.5];
        // proj = [I | 0 | 0]
        let mut proj = vec![0.0; d * 3 * d];
        for i in 0..d {
            proj[i * 3 * d + i] = 1.0;
        }
        let label = vec![9.0, 9.0, 9.0];
        let (out, _) = embed_with_attributes(&base, Some(&label), None, &proj);
        assert_eq!(out, base);
    }

    #[test]
    fn attention_bias_zero_weights_is_zero() {
        let d = 2;
        let b = attention_bias(&[0.0; 4], Some(&[1.0, 2.0]), &[0.0; 4], Some(&[3.0, 4.0]), d);
        assert_eq!(b, vec![0.0, 0.0]);
    }

    #[test]
    fn classifier_bias_shape_and_value() {
        let d = 2;
        let k = 3;
        let w_label = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]; // [3,2]
        let b = classifier_bias(&w_label, Some(&[2.0, 5.0]), &[0.0; 6], None, k, d);
        assert_eq!(b, vec![2.0, 5.0, 7.0]);
    }
}
