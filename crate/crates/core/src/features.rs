//! Feature construction: concatenated hidden-state vectors, standard
//! scaling, raw-opcode vectors for the baselines, and square zero-padded
//! image embeddings.
//!
//! For a corpus with K families and truncation length L, each sample yields
//! a K*L vector: its first L tokens are posterior-decoded under every family
//! model in canonical family order and the state sequences are concatenated.
//! Scaled vectors are embedded into a `side x side` image by filling a
//! centered `ceil(sqrt(K*L))` square row-major and zero-padding the edges.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::OpcodeSample;
use crate::error::{Error, Result};
use crate::hmm::{self, HmmModel};

/// Magic bytes of the binary feature file format.
pub const FEATURE_MAGIC: &[u8; 4] = b"HMF1";

/// A per-sample feature vector with its provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub sample_id: String,
    pub label: String,
}

/// Per-dimension standardization statistics fitted on the training split.
/// Dimensions with zero standard deviation divide by 1 instead.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

impl Scaler {
    pub fn dims(&self) -> usize {
        self.mu.len()
    }
}

/// A square image holding a feature vector in its centered payload square;
/// everything outside is exactly zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageMatrix {
    /// side x side pixels, row-major.
    pub pixels: Vec<f64>,
    pub side: usize,
    pub payload_side: usize,
}

impl ImageMatrix {
    /// Top/left margin of the payload square.
    pub fn margin(&self) -> usize {
        (self.side - self.payload_side) / 2
    }

    /// Read back the first `len` payload cells row-major; inverse of
    /// [`embed_image`] on the embedded prefix.
    pub fn payload_values(&self, len: usize) -> Vec<f64> {
        let margin = self.margin();
        let mut out = Vec::with_capacity(len);
        for idx in 0..len {
            let r = idx / self.payload_side;
            let c = idx % self.payload_side;
            out.push(self.pixels[(margin + r) * self.side + (margin + c)]);
        }
        out
    }

    pub fn pixel_sum(&self) -> f64 {
        self.pixels.iter().sum()
    }
}

fn check_models(models: &BTreeMap<String, HmmModel>) -> Result<()> {
    let mut iter = models.values();
    let first = iter
        .next()
        .ok_or_else(|| Error::EmptyInput("no family models".into()))?;
    for model in iter {
        if model.n != first.n || model.m != first.m {
            return Err(Error::ModelMismatch(format!(
                "family {} has shape ({}, {}) but {} has ({}, {})",
                model.family, model.n, model.m, first.family, first.n, first.m
            )));
        }
    }
    Ok(())
}

/// Posterior-decode the first `l` tokens under every family model (canonical
/// order) and concatenate the K state sequences into one K*l vector.
pub fn extract_hidden_features(
    sample: &OpcodeSample,
    models: &BTreeMap<String, HmmModel>,
    l: usize,
) -> Result<FeatureVector> {
    check_models(models)?;
    let tokens = sample.encoded()?;
    if tokens.len() < l {
        return Err(Error::SampleTooShort(format!(
            "sample {} has {} tokens, need {l}",
            sample.sample_id,
            tokens.len()
        )));
    }
    let prefix = &tokens[..l];
    let mut values = Vec::with_capacity(models.len() * l);
    for model in models.values() {
        let decoded = hmm::posterior_decode(model, prefix)?;
        values.extend(decoded.states.iter().map(|&s| s as f64));
    }
    Ok(FeatureVector {
        values,
        sample_id: sample.sample_id.clone(),
        label: sample.family.clone(),
    })
}

/// The first `l` vocabulary indices as floats; the featurization used by the
/// raw-opcode baseline models.
pub fn raw_features(sample: &OpcodeSample, l: usize) -> Result<FeatureVector> {
    let tokens = sample.encoded()?;
    if tokens.len() < l {
        return Err(Error::SampleTooShort(format!(
            "sample {} has {} tokens, need {l}",
            sample.sample_id,
            tokens.len()
        )));
    }
    Ok(FeatureVector {
        values: tokens[..l].iter().map(|&t| f64::from(t)).collect(),
        sample_id: sample.sample_id.clone(),
        label: sample.family.clone(),
    })
}

/// Per-dimension population mean and standard deviation over the training
/// vectors.
pub fn fit_scaler(train_vectors: &[FeatureVector]) -> Result<Scaler> {
    let first = train_vectors
        .first()
        .ok_or_else(|| Error::EmptyInput("no training vectors".into()))?;
    let dims = first.values.len();
    for v in train_vectors {
        if v.values.len() != dims {
            return Err(Error::RaggedInput(format!(
                "vector {} has {} dims, expected {dims}",
                v.sample_id,
                v.values.len()
            )));
        }
    }
    let count = train_vectors.len() as f64;
    let mut mu = vec![0.0; dims];
    for v in train_vectors {
        for (m, x) in mu.iter_mut().zip(&v.values) {
            *m += x;
        }
    }
    for m in &mut mu {
        *m /= count;
    }
    let mut var = vec![0.0; dims];
    for v in train_vectors {
        for d in 0..dims {
            let diff = v.values[d] - mu[d];
            var[d] += diff * diff;
        }
    }
    let sigma = var.into_iter().map(|v| (v / count).sqrt()).collect();
    Ok(Scaler { mu, sigma })
}

/// Elementwise `(x - mu) / sigma` with the sigma-zero-divides-by-one rule.
/// Test vectors use training statistics unchanged.
pub fn apply_scaler(scaler: &Scaler, v: &FeatureVector) -> Result<FeatureVector> {
    if v.values.len() != scaler.dims() {
        return Err(Error::DimensionMismatch(format!(
            "vector {} has {} dims, scaler has {}",
            v.sample_id,
            v.values.len(),
            scaler.dims()
        )));
    }
    let values = v
        .values
        .iter()
        .zip(scaler.mu.iter().zip(&scaler.sigma))
        .map(|(x, (mu, sigma))| {
            let divisor = if *sigma > 0.0 { *sigma } else { 1.0 };
            (x - mu) / divisor
        })
        .collect();
    Ok(FeatureVector {
        values,
        sample_id: v.sample_id.clone(),
        label: v.label.clone(),
    })
}

/// Embed a vector into a `side x side` image: fill a `ceil(sqrt(len))`
/// square row-major (trailing cells zero) and center it, with the
/// left/top margin `floor((side - payload) / 2)` and the remainder on the
/// right/bottom.
pub fn embed_image(v: &FeatureVector, side: usize) -> Result<ImageMatrix> {
    let len = v.values.len();
    if len == 0 {
        return Err(Error::EmptyInput("cannot embed an empty vector".into()));
    }
    let mut payload_side = (len as f64).sqrt().ceil() as usize;
    // Guard against floating-point sqrt edge cases.
    while payload_side * payload_side < len {
        payload_side += 1;
    }
    while payload_side > 1 && (payload_side - 1) * (payload_side - 1) >= len {
        payload_side -= 1;
    }
    if payload_side > side {
        return Err(Error::PayloadTooLarge(format!(
            "payload {payload_side} exceeds image side {side}"
        )));
    }
    let margin = (side - payload_side) / 2;
    let mut pixels = vec![0.0; side * side];
    for (idx, &value) in v.values.iter().enumerate() {
        let r = idx / payload_side;
        let c = idx % payload_side;
        pixels[(margin + r) * side + (margin + c)] = value;
    }
    Ok(ImageMatrix {
        pixels,
        side,
        payload_side,
    })
}

/// Write vectors in the binary feature format: a 16-byte header (magic
/// `HMF1`, u32 count, u32 dim, u32 reserved, little-endian) followed by
/// `count * dim` little-endian 32-bit floats, row-major.
pub fn write_feature_file(path: &Path, vectors: &[FeatureVector]) -> Result<()> {
    let first = vectors
        .first()
        .ok_or_else(|| Error::EmptyInput("no vectors to write".into()))?;
    let dim = first.values.len();
    for v in vectors {
        if v.values.len() != dim {
            return Err(Error::RaggedInput(format!(
                "vector {} has {} dims, expected {dim}",
                v.sample_id,
                v.values.len()
            )));
        }
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    w.write_all(&(vectors.len() as u32).to_le_bytes())?;
    w.write_all(&(dim as u32).to_le_bytes())?;
    w.write_all(&0u32.to_le_bytes())?;
    for v in vectors {
        for &x in &v.values {
            w.write_all(&(x as f32).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a feature file back as rows of f64 (widened from the stored f32).
pub fn read_feature_file(path: &Path) -> Result<Vec<Vec<f64>>> {
    let mut file = fs::File::open(path)?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header)?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(Error::InvalidInput(format!(
            "{} is not a feature file",
            path.display()
        )));
    }
    let count = u32::from_le_bytes(header[4..8].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != count * dim * 4 {
        return Err(Error::LengthMismatch(format!(
            "{}: expected {} payload bytes, found {}",
            path.display(),
            count * dim * 4,
            payload.len()
        )));
    }
    let mut rows = Vec::with_capacity(count);
    for r in 0..count {
        let mut row = Vec::with_capacity(dim);
        for d in 0..dim {
            let off = (r * dim + d) * 4;
            row.push(f64::from(f32::from_le_bytes(
                payload[off..off + 4].try_into().unwrap(),
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

/// Write an image as ASCII PGM (P2) after affine mapping of [min, max] to
/// [0, 255]; intended for human inspection only.
pub fn write_pgm(path: &Path, image: &ImageMatrix) -> Result<()> {
    let min = image.pixels.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = image
        .pixels
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let scale = if max > min { 255.0 / (max - min) } else { 0.0 };
    let mut w = BufWriter::new(fs::File::create(path)?);
    writeln!(w, "P2")?;
    writeln!(w, "{} {}", image.side, image.side)?;
    writeln!(w, "255")?;
    for row in 0..image.side {
        let line: Vec<String> = (0..image.side)
            .map(|col| {
                let v = image.pixels[row * image.side + col];
                format!("{}", ((v - min) * scale).round() as u32)
            })
            .collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}
