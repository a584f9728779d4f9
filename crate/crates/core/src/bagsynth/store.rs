//! Dataset persistence: a JSON manifest from which bags are regenerated,
//! and an optional materialized JSON-lines form.
//!
//! Each JSON-lines record holds one bag with its instances as base64 of
//! little-endian f32. Image bags are stored as their sampled tiles only; the
//! slide is not kept, so a materialized image bag behaves like a feature bag.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{generate, Bag, BagRecipe};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST_FORMAT: &str = "milkit-dataset/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub recipe: BagRecipe,
}

impl Manifest {
    pub fn new(recipe: BagRecipe) -> Self {
        Self {
            format: MANIFEST_FORMAT.into(),
            recipe,
        }
    }

    pub fn generate(&self) -> Result<Vec<Bag>> {
        generate(&self.recipe)
    }
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let text = serde_json::to_string_pretty(manifest)?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(Error::Data(format!("{}: unknown manifest format {:?}", path.display(), manifest.format)));
    }
    manifest.recipe.validate()?;
    Ok(manifest)
}

pub(crate) fn encode_f32(values: &[f32]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub(crate) fn decode_f32(bytes: &[u8]) -> Result<Vec<f32>> {
    if !bytes.len().is_multiple_of(4) {
        return Err(Error::Data(format!("payload of {} bytes is not a whole number of f32", bytes.len())));
    }
    Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
}

#[derive(Serialize, Deserialize)]
struct BagLine {
    id: usize,
    label: usize,
    shape: Vec<usize>,
    instances: String,
    patterns: Vec<usize>,
}

pub fn write_jsonl(path: &Path, bags: &[Bag]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for bag in bags {
        let line = BagLine {
            id: bag.id,
            label: bag.label,
            shape: bag.instances.shape().to_vec(),
            instances: STANDARD.encode(encode_f32(bag.instances.data())),
            patterns: bag.patterns.clone(),
        };
        serde_json::to_writer(&mut out, &line)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Bag>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bags = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BagLine = serde_json::from_str(&line)?;
        let bytes = STANDARD
            .decode(rec.instances.as_bytes())
            .map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1)))?;
        let instances = Tensor::new(rec.shape, decode_f32(&bytes)?)?;
        if instances.shape()[0] != rec.patterns.len() {
            return Err(Error::Data(format!("{}:{}: pattern count does not match instances", path.display(), n + 1)));
        }
        bags.push(Bag {
            id: rec.id,
            label: rec.label,
            instances,
            patterns: rec.patterns,
            slide: None,
        });
    }
    Ok(bags)
}
