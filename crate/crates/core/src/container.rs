//! The `.ftc` model container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! 0..8      magic "FTCLIP01" ("FTCLIP" + two-digit version)
//! 8..12     u32 manifest length L
//! 12..12+L  UTF-8 JSON manifest (topology, shapes, format, thresholds)
//! ...       tensor payloads in manifest order, each a contiguous u32 array
//! last 4    CRC32 over the payload bytes
//! ```
//!
//! Words are stored verbatim, so loading is bit-exact. Files written by
//! [`save_model`] are canonical: loading and re-saving one reproduces it
//! byte for byte.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::format::NumericFormat;
use crate::model::{LayerParams, LayerSpec, Model, Normalization, WordTensor};

pub const MAGIC_PREFIX: &[u8; 6] = b"FTCLIP";
pub const VERSION: &[u8; 2] = b"01";
const HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorRole {
    Weight,
    Bias,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub layer: usize,
    pub role: TensorRole,
    pub shape: Vec<usize>,
    pub words: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub name: String,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub numeric_format: NumericFormat,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub metadata: BTreeMap<String, String>,
    pub layers: Vec<LayerSpec>,
    pub tensors: Vec<TensorEntry>,
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    from_bytes(&std::fs::read(path)?)
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, to_bytes(model)?)?;
    Ok(())
}

pub fn to_bytes(model: &Model) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(model.total_words() * 4);
    for (i, p) in model.params().iter().enumerate() {
        let Some(p) = p else { continue };
        let layer = &model.layers()[i];
        for (role, t) in [(TensorRole::Weight, &p.weight), (TensorRole::Bias, &p.bias)] {
            let suffix = match role {
                TensorRole::Weight => "weight",
                TensorRole::Bias => "bias",
            };
            tensors.push(TensorEntry {
                name: format!("{}.{suffix}", layer.name),
                layer: i,
                role,
                shape: t.shape.clone(),
                words: t.words.len(),
            });
            for w in &t.words {
                payload.extend_from_slice(&w.to_le_bytes());
            }
        }
    }
    let manifest = Manifest {
        format_version: 1,
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        num_classes: model.num_classes,
        numeric_format: model.format,
        normalization: model.normalization.clone(),
        metadata: model.metadata.clone(),
        layers: model.layers().to_vec(),
        tensors,
    };
    let json = serde_json::to_vec(&manifest)?;
    let len = u32::try_from(json.len())
        .map_err(|_| Error::Manifest("manifest exceeds 4 GiB".into()))?;

    let mut out = Vec::with_capacity(HEADER_LEN + json.len() + payload.len() + 4);
    out.extend_from_slice(MAGIC_PREFIX);
    out.extend_from_slice(VERSION);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model> {
    if bytes.len() < HEADER_LEN {
        return Err(Error::TruncatedHeader(format!(
            "{} bytes, header needs {HEADER_LEN}",
            bytes.len()
        )));
    }
    if &bytes[..6] != MAGIC_PREFIX {
        return Err(Error::BadMagic {
            found: bytes[..8].to_vec(),
        });
    }
    if &bytes[6..8] != VERSION {
        return Err(Error::VersionMismatch {
            found: String::from_utf8_lossy(&bytes[6..8]).into_owned(),
        });
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let body = &bytes[HEADER_LEN..];
    if body.len() < len {
        return Err(Error::TruncatedHeader(format!(
            "manifest declares {len} bytes, {} present",
            body.len()
        )));
    }
    let manifest: Manifest = serde_json::from_slice(&body[..len])
        .map_err(|e| Error::Manifest(e.to_string()))?;
    if manifest.format_version != 1 {
        return Err(Error::VersionMismatch {
            found: manifest.format_version.to_string(),
        });
    }

    let rest = &body[len..];
    let mut params: Vec<Option<LayerParams>> = vec![None; manifest.layers.len()];
    let mut weights: Vec<Option<WordTensor>> = vec![None; manifest.layers.len()];
    let mut biases: Vec<Option<WordTensor>> = vec![None; manifest.layers.len()];
    let mut offset = 0usize;
    for t in &manifest.tensors {
        let expected: usize = t.shape.iter().product();
        if expected != t.words {
            return Err(Error::InconsistentTensorSize {
                tensor: t.name.clone(),
                shape: t.shape.clone(),
                expected,
                declared: t.words,
            });
        }
        let needed = t.words * 4;
        // The trailing CRC is not payload.
        let available = rest.len().saturating_sub(4).saturating_sub(offset);
        if needed > available {
            return Err(Error::TruncatedTensor {
                tensor: t.name.clone(),
                needed,
                available,
            });
        }
        let words = rest[offset..offset + needed]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        offset += needed;
        let slot = match t.role {
            TensorRole::Weight => weights.get_mut(t.layer),
            TensorRole::Bias => biases.get_mut(t.layer),
        }
        .ok_or_else(|| Error::Manifest(format!("tensor {} refers to missing layer {}", t.name, t.layer)))?;
        if slot.is_some() {
            return Err(Error::Manifest(format!("duplicate {:?} for layer {}", t.role, t.layer)));
        }
        *slot = Some(WordTensor {
            shape: t.shape.clone(),
            words,
        });
    }
    if rest.len() < offset + 4 {
        return Err(Error::TruncatedTensor {
            tensor: "checksum".into(),
            needed: 4,
            available: rest.len() - offset,
        });
    }
    if rest.len() > offset + 4 {
        return Err(Error::Manifest(format!(
            "{} unexpected trailing bytes",
            rest.len() - offset - 4
        )));
    }
    let payload = &rest[..offset];
    let stored = u32::from_le_bytes(rest[offset..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }

    for (i, (w, b)) in weights.into_iter().zip(biases).enumerate() {
        params[i] = match (w, b) {
            (Some(weight), Some(bias)) => Some(LayerParams { weight, bias }),
            (None, None) => None,
            _ => {
                return Err(Error::Manifest(format!(
                    "layer {i} needs both a weight and a bias tensor"
                )))
            }
        };
    }

    let mut model = Model::new(
        manifest.name,
        manifest.input_shape,
        manifest.num_classes,
        manifest.numeric_format,
        manifest.layers,
        params,
    )?
    .with_normalization(manifest.normalization)?;
    model.metadata = manifest.metadata;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::format::encode_word;
    use crate::model::LayerKind;

    fn tiny() -> Model {
        let fmt = NumericFormat::Float32;
        let words = |vals: &[f64]| vals.iter().map(|&v| encode_word(v, fmt).word).collect();
        Model::new(
            "tiny",
            vec![1, 2, 2],
            2,
            fmt,
            vec![
                LayerSpec::new("flat", LayerKind::Flatten),
                LayerSpec::new("fc", LayerKind::FullyConnected { in_features: 4, out_features: 2 }),
                LayerSpec::new("act", LayerKind::ClippedRelu { threshold: f32::INFINITY }),
            ],
            vec![
                None,
                Some(LayerParams {
                    weight: WordTensor {
                        shape: vec![2, 4],
                        words: words(&[1.0, 0.5, -0.25, 2.0, 0.0, -1.0, 3.0, 0.125]),
                    },
                    bias: WordTensor { shape: vec![2], words: words(&[0.1, -0.2]) },
                }),
                None,
            ],
        )
        .unwrap()
    }

    #[test]
    fn roundtrip_is_byte_identical() {
        let bytes = to_bytes(&tiny()).unwrap();
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, tiny());
        assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn infinite_threshold_serialises_as_string() {
        let bytes = to_bytes(&tiny()).unwrap();
        let text = String::from_utf8_lossy(&bytes);
        assert!(text.contains(r#""threshold":"inf""#));
    }

    #[test]
    fn zero_length_is_truncated_header() {
        assert!(matches!(from_bytes(&[]), Err(Error::TruncatedHeader(_))));
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes[0] = b'X';
        assert!(matches!(from_bytes(&bytes), Err(Error::BadMagic { .. })));
        let mut bytes = to_bytes(&tiny()).unwrap();
        bytes[7] = b'9';
        assert!(matches!(from_bytes(&bytes), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn truncated_payload() {
        let bytes = to_bytes(&tiny()).unwrap();
        let err = from_bytes(&bytes[..bytes.len() - 10]).unwrap_err();
        assert!(matches!(err, Error::TruncatedTensor { .. }), "{err:?}");
    }

    #[test]
    fn corrupted_payload_fails_checksum() {
        let mut bytes = to_bytes(&tiny()).unwrap();
        let n = bytes.len();
        bytes[n - 6] ^= 0x01;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checksum { .. })));
    }

    #[test]
    fn word_count_mismatch_is_inconsistent_size() {
        let bytes = to_bytes(&tiny()).unwrap();
        let len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let json = std::str::from_utf8(&bytes[12..12 + len]).unwrap();
        let bad = json.replace(r#""shape":[2,4],"words":8"#, r#""shape":[2,4],"words":7"#);
        assert_ne!(bad, json);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(bad.len() as u32).to_le_bytes());
        out.extend_from_slice(bad.as_bytes());
        out.extend_from_slice(&bytes[12 + len..]);
        assert!(matches!(from_bytes(&out), Err(Error::InconsistentTensorSize { .. })));
    }
}
