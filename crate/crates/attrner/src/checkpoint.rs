//! Model checkpoints: a text header echoing the model configuration, one
//! descriptor line per tensor, then the tensor values as raw little-endian
//! f64 bytes. The format is stable across runs and platforms.
//!
//! ```text
//! attrner-checkpoint v1
//! d_model=64
//! ...            (all ten model-config keys)
//! tensors=57
//! tensor tok_emb decay=0 shape=120,64
//! <8 * 120 * 64 bytes>\n
//! ...
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::model::config::ModelConfig;
use crate::model::params::{ParamSet, Tensor};

const MAGIC: &str = "attrner-checkpoint v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format error: {0}")]
    Format(String),
}

fn push_line(buf: &mut Vec<u8>, line: &str) {
    buf.extend_from_slice(line.as_bytes());
    buf.push(b'\n');
}

pub fn serialize_checkpoint(cfg: &ModelConfig, params: &ParamSet) -> Vec<u8> {
    let mut buf = Vec::new();
    push_line(&mut buf, MAGIC);
    push_line(&mut buf, &format!("d_model={}", cfg.d_model));
    push_line(&mut buf, &format!("n_heads={}", cfg.n_heads));
    push_line(&mut buf, &format!("n_layers={}", cfg.n_layers));
    push_line(&mut buf, &format!("d_ff={}", cfg.d_ff));
    push_line(&mut buf, &format!("max_len={}", cfg.max_len));
    push_line(&mut buf, &format!("dropout_rate={}", cfg.dropout_rate));
    push_line(&mut buf, &format!("n_tokens={}", cfg.n_tokens));
    push_line(&mut buf, &format!("n_pos={}", cfg.n_pos));
    push_line(&mut buf, &format!("n_labels={}", cfg.n_labels));
    push_line(&mut buf, &format!("n_tags={}", cfg.n_tags));
    push_line(&mut buf, &format!("tensors={}", params.names().len()));
    for (name, entry) in params.iter() {
        let shape: Vec<String> = entry.tensor.shape.iter().map(|d| d.to_string()).collect();
        push_line(
            &mut buf,
            &format!("tensor {name} decay={} shape={}", u8::from(entry.decay), shape.join(",")),
        );
        for v in &entry.tensor.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(b'\n');
    }
    buf
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    params: &ParamSet,
) -> Result<(), CheckpointError> {
    fs::write(path, serialize_checkpoint(cfg, params))?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn line(&mut self) -> Result<&'a str, CheckpointError> {
        let rest = &self.bytes[self.pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| CheckpointError::Format("unexpected end of file".into()))?;
        self.pos += nl + 1;
        std::str::from_utf8(&rest[..nl])
            .map_err(|_| CheckpointError::Format("non-UTF8 header line".into()))
    }

    fn raw(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.bytes.len() {
            return Err(CheckpointError::Format("truncated tensor payload".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
}

fn header_value<'a>(line: &'a str, key: &str) -> Result<&'a str, CheckpointError> {
    line.strip_prefix(key)
        .and_then(|r| r.strip_prefix('='))
        .ok_or_else(|| CheckpointError::Format(format!("expected `{key}=...`, got {line:?}")))
}

fn parse_usize(s: &str, what: &str) -> Result<usize, CheckpointError> {
    s.parse().map_err(|_| CheckpointError::Format(format!("bad {what} value {s:?}")))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ParamSet), CheckpointError> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.line()?;
    if magic != MAGIC {
        return Err(CheckpointError::Format(format!("bad magic line {magic:?}")));
    }
    let d_model = parse_usize(header_value(cur.line()?, "d_model")?, "d_model")?;
    let n_heads = parse_usize(header_value(cur.line()?, "n_heads")?, "n_heads")?;
    let n_layers = parse_usize(header_value(cur.line()?, "n_layers")?, "n_layers")?;
    let d_ff = parse_usize(header_value(cur.line()?, "d_ff")?, "d_ff")?;
    let max_len = parse_usize(header_value(cur.line()?, "max_len")?, "max_len")?;
    let dropout_rate: f64 = header_value(cur.line()?, "dropout_rate")?
        .parse()
        .map_err(|_| CheckpointError::Format("bad dropout_rate".into()))?;
    let n_tokens = parse_usize(header_value(cur.line()?, "n_tokens")?, "n_tokens")?;
    let n_pos = parse_usize(header_value(cur.line()?, "n_pos")?, "n_pos")?;
    let n_labels = parse_usize(header_value(cur.line()?, "n_labels")?, "n_labels")?;
    let n_tags = parse_usize(header_value(cur.line()?, "n_tags")?, "n_tags")?;
    let cfg = ModelConfig {
        d_model,
        n_heads,
        n_layers,
        d_ff,
        max_len,
        dropout_rate,
        n_tokens,
        n_pos,
        n_labels,
        n_tags,
    };
    let count = parse_usize(header_value(cur.line()?, "tensors")?, "tensors")?;

    let mut params = ParamSet::new();
    for _ in 0..count {
        let line = cur.line()?;
        let mut parts = line.split(' ');
        if parts.next() != Some("tensor") {
            return Err(CheckpointError::Format(format!("expected tensor line, got {line:?}")));
        }
        let name = parts
            .next()
            .ok_or_else(|| CheckpointError::Format("tensor line missing name".into()))?;
        let decay = header_value(
            parts.next().ok_or_else(|| CheckpointError::Format("missing decay".into()))?,
            "decay",
        )? == "1";
        let shape_str = header_value(
            parts.next().ok_or_else(|| CheckpointError::Format("missing shape".into()))?,
            "shape",
        )?;
        let shape: Vec<usize> = shape_str
            .split(',')
            .map(|d| parse_usize(d, "shape"))
            .collect::<Result<_, _>>()?;
        let len: usize = shape.iter().product();
        let raw = cur.raw(len * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if cur.raw(1)? != b"\n" {
            return Err(CheckpointError::Format(format!(
                "tensor {name:?} payload not newline-terminated"
            )));
        }
        params.register(name, Tensor { shape, data }, decay);
    }
    if cur.pos != bytes.len() {
        return Err(CheckpointError::Format("trailing bytes after last tensor".into()));
    }
    Ok((cfg, params))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ParamSet), CheckpointError> {
    parse_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::params::init_params;

    #[test]
    fn round_trip_is_exact() {
        let cfg = ModelConfig::tiny(10, 4, 3, 3);
        let params = init_params(&cfg, 11).unwrap();
        let bytes = serialize_checkpoint(&cfg, &params);
        let (cfg2, params2) = parse_checkpoint(&bytes).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params.names(), params2.names());
        for name in params.names() {
            let a = params.get(&name);
            let b = params2.get(&name);
            assert_eq!(a.shape, b.shape, "{name}");
            // bit-exact round trip
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(x.to_bits(), y.to_bits(), "{name}");
            }
        }
    }

    #[test]
    fn serialization_is_deterministic() {
        let cfg = ModelConfig::tiny(10, 4, 3, 3);
        let params = init_params(&cfg, 11).unwrap();
        assert_eq!(serialize_checkpoint(&cfg, &params), serialize_checkpoint(&cfg, &params));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let cfg = ModelConfig::tiny(10, 4, 3, 3);
        let params = init_params(&cfg, 11).unwrap();
        let mut bytes = serialize_checkpoint(&cfg, &params);
        bytes[0] = b'x';
        assert!(parse_checkpoint(&bytes).is_err());
    }

    #[test]
    fn truncation_is_rejected() {
        let cfg = ModelConfig::tiny(10, 4, 3, 3);
        let params = init_params(&cfg, 11).unwrap();
        let bytes = serialize_checkpoint(&cfg, &params);
        assert!(parse_checkpoint(&bytes[..bytes.len() - 9]).is_err());
    }
}
