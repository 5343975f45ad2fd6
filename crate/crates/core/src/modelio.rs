//! Binary model files shared by decoders and matchers.
//!
//! Layout: the 4-byte magic `MFM1`, a little-endian u32 header length, a JSON
//! header, then little-endian f64 arrays: mean (d), components (d×k,
//! row-major), singular values (k).

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::EigenfaceDecoder;
use crate::matcher::{EmbeddingModel, FeatureMap};
use crate::numerics::{Matrix, Pca};

const MAGIC: &[u8; 4] = b"MFM1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Decoder,
    Matcher,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub kind: ModelKind,
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub k: usize,
    pub n_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_map: Option<FeatureMap>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub residuals: Option<Vec<f64>>,
    /// Free-form provenance (config digest, seed, …).
    #[serde(default)]
    pub metadata: BTreeMap<String, String>,
}

fn encode(header: &ModelHeader, pca: &Pca) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let len =
        u32::try_from(json.len()).map_err(|_| Error::ModelFormat("header too large".into()))?;
    let floats = pca.mean().len() + pca.components().as_slice().len() + pca.k();
    let mut out = Vec::with_capacity(8 + json.len() + 8 * floats);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in pca
        .mean()
        .iter()
        .chain(pca.components().as_slice())
        .chain(pca.singular_values())
    {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8]) -> Result<(ModelHeader, Pca)> {
    let bad = |m: &str| Error::ModelFormat(m.to_string());
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(bad("missing MFM1 magic"));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let body = bytes
        .get(8..8 + len)
        .ok_or_else(|| bad("truncated header"))?;
    let header: ModelHeader = serde_json::from_slice(body)?;
    let (d, k) = (header.dim, header.k);
    let need = d
        .checked_mul(k)
        .and_then(|dk| dk.checked_add(d + k))
        .ok_or_else(|| bad("array sizes overflow"))?;
    let raw = &bytes[8 + len..];
    if raw.len() != need * 8 {
        return Err(Error::ModelFormat(format!(
            "expected {} bytes of arrays, found {}",
            need * 8,
            raw.len()
        )));
    }
    let mut values = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mean: Vec<f64> = values.by_ref().take(d).collect();
    let comps: Vec<f64> = values.by_ref().take(d * k).collect();
    let sv: Vec<f64> = values.collect();
    let pca = Pca::from_parts(mean, Matrix::from_vec(d, k, comps)?, sv, header.n_samples)?;
    Ok((header, pca))
}

pub fn encode_decoder(
    decoder: &EigenfaceDecoder,
    metadata: BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let pca = decoder.pca();
    let header = ModelHeader {
        kind: ModelKind::Decoder,
        width: decoder.width(),
        height: decoder.height(),
        dim: pca.dim(),
        k: pca.k(),
        n_samples: pca.n_samples(),
        tag: None,
        feature_map: None,
        residuals: Some(decoder.residuals().to_vec()),
        metadata,
    };
    encode(&header, pca)
}

pub fn decode_decoder(bytes: &[u8]) -> Result<(EigenfaceDecoder, ModelHeader)> {
    let (header, pca) = decode(bytes)?;
    if header.kind != ModelKind::Decoder {
        return Err(Error::ModelFormat(
            "file holds a matcher, not a decoder".into(),
        ));
    }
    let residuals = header.residuals.clone().unwrap_or_default();
    let decoder = EigenfaceDecoder::from_parts(header.width, header.height, pca, residuals)?;
    Ok((decoder, header))
}

pub fn encode_matcher(
    model: &EmbeddingModel,
    metadata: BTreeMap<String, String>,
) -> Result<Vec<u8>> {
    let pca = model.pca();
    let header = ModelHeader {
        kind: ModelKind::Matcher,
        width: model.width(),
        height: model.height(),
        dim: pca.dim(),
        k: pca.k(),
        n_samples: pca.n_samples(),
        tag: Some(model.tag().to_string()),
        feature_map: Some(model.feature_map()),
        residuals: None,
        metadata,
    };
    encode(&header, pca)
}

pub fn decode_matcher(bytes: &[u8]) -> Result<(EmbeddingModel, ModelHeader)> {
    let (header, pca) = decode(bytes)?;
    if header.kind != ModelKind::Matcher {
        return Err(Error::ModelFormat(
            "file holds a decoder, not a matcher".into(),
        ));
    }
    let tag = header
        .tag
        .clone()
        .ok_or_else(|| Error::ModelFormat("matcher without tag".into()))?;
    let model = EmbeddingModel::from_parts(
        &tag,
        header.feature_map.unwrap_or_default(),
        header.width,
        header.height,
        pca,
    )?;
    Ok((model, header))
}

pub fn save_decoder(
    path: &Path,
    decoder: &EigenfaceDecoder,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    fs::write(path, encode_decoder(decoder, metadata)?).map_err(|e| Error::io(path, e))
}

pub fn load_decoder(path: &Path) -> Result<(EigenfaceDecoder, ModelHeader)> {
    decode_decoder(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn save_matcher(
    path: &Path,
    model: &EmbeddingModel,
    metadata: BTreeMap<String, String>,
) -> Result<()> {
    fs::write(path, encode_matcher(model, metadata)?).map_err(|e| Error::io(path, e))
}

pub fn load_matcher(path: &Path) -> Result<(EmbeddingModel, ModelHeader)> {
    decode_matcher(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
