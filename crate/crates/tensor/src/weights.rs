//! Weight files: a text manifest of `name shape byte_offset` lines plus a
//! flat little-endian `f32` blob.

use std::fs;
use std::path::Path;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

const HEADER: &str = "# msdet-weights v1 f32le";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: usize,
}

impl ManifestEntry {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

fn format_shape(shape: &[usize]) -> String {
    if shape.is_empty() {
        return "scalar".into();
    }
    shape.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_shape(s: &str) -> Option<Vec<usize>> {
    if s == "scalar" {
        return Some(Vec::new());
    }
    s.split(',').map(|d| d.parse().ok()).collect()
}

/// Serializes named tensors in the given order.
pub fn encode(named: &[(String, Tensor)]) -> (String, Vec<u8>) {
    let mut manifest = String::from(HEADER);
    manifest.push('\n');
    let mut blob = Vec::new();
    for (name, t) in named {
        manifest.push_str(&format!("{} {} {}\n", name, format_shape(t.shape()), blob.len()));
        for &v in t.data().iter() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    (manifest, blob)
}

pub fn parse_manifest(manifest: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut line_start = 0;
    for line in manifest.split_inclusive('\n') {
        let offset = line_start;
        line_start += line.len();
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| TensorError::Format { offset, message };
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [name, shape, byte_offset] = fields[..] else {
            return Err(bad(format!("expected `name shape offset`, got {line:?}")));
        };
        let shape = parse_shape(shape).ok_or_else(|| bad(format!("bad shape {shape:?}")))?;
        let byte_offset = byte_offset
            .parse()
            .map_err(|_| bad(format!("bad offset {byte_offset:?}")))?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape,
            offset: byte_offset,
        });
    }
    Ok(entries)
}

pub fn decode(manifest: &str, blob: &[u8]) -> Result<Vec<(String, Tensor)>> {
    parse_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let end = e.offset + 4 * e.numel();
            if end > blob.len() {
                return Err(TensorError::Format {
                    offset: blob.len(),
                    message: format!("`{}` needs bytes {}..{end}, blob has {}", e.name, e.offset, blob.len()),
                });
            }
            let data = blob[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            Ok((e.name.clone(), Tensor::new(&e.shape, data)?))
        })
        .collect()
}

pub fn save(named: &[(String, Tensor)], manifest_path: &Path, blob_path: &Path) -> Result<()> {
    let (manifest, blob) = encode(named);
    fs::write(manifest_path, manifest)?;
    fs::write(blob_path, blob)?;
    Ok(())
}

pub fn load(manifest_path: &Path, blob_path: &Path) -> Result<Vec<(String, Tensor)>> {
    let manifest = fs::read_to_string(manifest_path)?;
    let blob = fs::read(blob_path)?;
    decode(&manifest, &blob)
}
