//! Bit-exact model serialization.
//!
//! # File layout
//!
//! ```text
//! offset      size        content
//! 0           8           magic bytes `CZLABCKP`
//! 8           4           header length H, u32 little-endian
//! 12          H           JSON header, UTF-8
//! 12 + H      8 * total   payload: f64 values, little-endian, arrays
//!                         concatenated in header order
//! ```
//!
//! The header records the composition-space manifest, the model dimension,
//! the seeds of the frozen components, prompt metadata (owner and original
//! text), and the name and shape of every payload array. The payload holds
//! every named array of the model — trainable tokens, their frozen
//! initialization copies, the frozen featurizer and composition map, and
//! prompt rows.
//!
//! Loading rebuilds the frozen components from their recorded seeds and
//! verifies them bitwise against the stored arrays, so a checkpoint written
//! by a different vocabulary, dimension, or seed lineage is rejected rather
//! than silently reinterpreted.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::compspace::Manifest;
use crate::error::{Error, Result};
use crate::tokenmodel::{Model, PromptSlot, TokenTable};

const MAGIC: &[u8; 8] = b"CZLABCKP";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PromptEntry {
    owner: usize,
    init_text: String,
    rows: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    dim: usize,
    featurizer_seed: u64,
    frozen_map_seed: u64,
    word_seed: u64,
    manifest: Manifest,
    prompts: Vec<PromptEntry>,
    arrays: Vec<ArrayEntry>,
}

fn array_shape(model: &Model, name: &str) -> [usize; 2] {
    let space = &model.space;
    let d = model.dim;
    match name {
        "attr_tokens" | "attr_tokens_base" => [space.num_attributes(), d],
        "obj_tokens" | "obj_tokens_base" => [space.num_objects(), d],
        "featurizer_w" => [d, crate::tokenmodel::RAW_FEATURE_DIM],
        "frozen_map_m" => [d, d],
        _ => {
            // prompt_{i:03}
            let idx: usize = name
                .strip_prefix("prompt_")
                .and_then(|s| s.parse().ok())
                .expect("named_arrays produced an unexpected array name");
            [model.prompts[idx].tokens.nrows(), d]
        }
    }
}

/// Serializes the model (and the manifest that defines its composition
/// space) to `path` in the documented binary layout.
pub fn save_model(model: &Model, manifest: &Manifest, path: &Path) -> Result<()> {
    let (check_space, _) = manifest.resolve()?;
    if check_space != model.space {
        return Err(Error::Checkpoint(
            "manifest does not describe the model's composition space".into(),
        ));
    }
    let named = model.named_arrays();
    let arrays: Vec<ArrayEntry> = named
        .iter()
        .map(|(name, values)| {
            let shape = array_shape(model, name);
            debug_assert_eq!(shape[0] * shape[1], values.len());
            ArrayEntry {
                name: name.clone(),
                shape,
            }
        })
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: "f64-le".to_string(),
        dim: model.dim,
        featurizer_seed: model.featurizer.seed(),
        frozen_map_seed: model.frozen_map.seed(),
        word_seed: model.word_seed(),
        manifest: manifest.clone(),
        prompts: model
            .prompts
            .iter()
            .map(|p| PromptEntry {
                owner: p.owner,
                init_text: p.init_text.clone(),
                rows: p.tokens.nrows(),
            })
            .collect(),
        arrays,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let total_values: usize = named.iter().map(|(_, v)| v.len()).sum();
    let mut out = Vec::with_capacity(12 + header_bytes.len() + 8 * total_values);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for (_, values) in &named {
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

fn take_array(
    payload: &mut std::slice::Iter<'_, u8>,
    shape: [usize; 2],
) -> Result<Array2<f64>> {
    let n = shape[0] * shape[1];
    let mut values = Vec::with_capacity(n);
    for _ in 0..n {
        let mut buf = [0u8; 8];
        for b in &mut buf {
            *b = *payload
                .next()
                .ok_or_else(|| Error::Checkpoint("payload shorter than header declares".into()))?;
        }
        values.push(f64::from_le_bytes(buf));
    }
    Array2::from_shape_vec((shape[0], shape[1]), values)
        .map_err(|e| Error::Checkpoint(format!("bad array shape: {e}")))
}

/// Reads a checkpoint. When `expected` is given, the embedded manifest must
/// match it exactly. Returns the reconstructed model and the embedded
/// manifest.
pub fn load_model(path: &Path, expected: Option<&Manifest>) -> Result<(Model, Manifest)> {
    let bytes = fs::read(path)?;
    if bytes.len() < 12 || &bytes[0..8] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a model checkpoint (bad magic)",
            path.display()
        )));
    }
    let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + header_len {
        return Err(Error::Checkpoint("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + header_len])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    if header.dtype != "f64-le" {
        return Err(Error::Checkpoint(format!("unsupported dtype {}", header.dtype)));
    }
    if let Some(expected) = expected {
        if *expected != header.manifest {
            return Err(Error::Checkpoint(
                "checkpoint manifest does not match the expected manifest".into(),
            ));
        }
    }
    let (space, _) = header.manifest.resolve()?;
    let dim = header.dim;

    let expected_payload: usize = header
        .arrays
        .iter()
        .map(|a| 8 * a.shape[0] * a.shape[1])
        .sum();
    if bytes.len() != 12 + header_len + expected_payload {
        return Err(Error::Checkpoint(format!(
            "payload is {} bytes, header declares {}",
            bytes.len() - 12 - header_len,
            expected_payload
        )));
    }

    let mut payload = bytes[12 + header_len..].iter();
    let mut attr = None;
    let mut obj = None;
    let mut attr_base = None;
    let mut obj_base = None;
    let mut featurizer_w = None;
    let mut frozen_map_m = None;
    let mut prompt_tokens: Vec<Option<Array2<f64>>> = vec![None; header.prompts.len()];
    for entry in &header.arrays {
        let array = take_array(&mut payload, entry.shape)?;
        match entry.name.as_str() {
            "attr_tokens" => attr = Some(array),
            "obj_tokens" => obj = Some(array),
            "attr_tokens_base" => attr_base = Some(array),
            "obj_tokens_base" => obj_base = Some(array),
            "featurizer_w" => featurizer_w = Some(array),
            "frozen_map_m" => frozen_map_m = Some(array),
            name => {
                let idx: usize = name
                    .strip_prefix("prompt_")
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| {
                        Error::Checkpoint(format!("unknown array {name:?} in checkpoint"))
                    })?;
                if idx >= prompt_tokens.len() {
                    return Err(Error::Checkpoint(format!(
                        "array {name:?} has no matching prompt entry"
                    )));
                }
                prompt_tokens[idx] = Some(array);
            }
        }
    }

    let missing = |what: &str| Error::Checkpoint(format!("checkpoint is missing {what}"));
    let attr = attr.ok_or_else(|| missing("attr_tokens"))?;
    let obj = obj.ok_or_else(|| missing("obj_tokens"))?;
    let attr_base = attr_base.ok_or_else(|| missing("attr_tokens_base"))?;
    let obj_base = obj_base.ok_or_else(|| missing("obj_tokens_base"))?;
    let featurizer_w = featurizer_w.ok_or_else(|| missing("featurizer_w"))?;
    let frozen_map_m = frozen_map_m.ok_or_else(|| missing("frozen_map_m"))?;

    let check = |name: &str, got: [usize; 2], want: (usize, usize)| -> Result<()> {
        if got != [want.0, want.1] {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {got:?}, expected [{}, {}]",
                want.0, want.1
            )));
        }
        Ok(())
    };
    check("attr_tokens", [attr.nrows(), attr.ncols()], (space.num_attributes(), dim))?;
    check("obj_tokens", [obj.nrows(), obj.ncols()], (space.num_objects(), dim))?;
    check(
        "attr_tokens_base",
        [attr_base.nrows(), attr_base.ncols()],
        (space.num_attributes(), dim),
    )?;
    check(
        "obj_tokens_base",
        [obj_base.nrows(), obj_base.ncols()],
        (space.num_objects(), dim),
    )?;

    let mut prompts = Vec::with_capacity(header.prompts.len());
    for (i, meta) in header.prompts.iter().enumerate() {
        let tokens = prompt_tokens[i]
            .take()
            .ok_or_else(|| missing(&format!("prompt_{i:03}")))?;
        check(&format!("prompt_{i:03}"), [tokens.nrows(), tokens.ncols()], (meta.rows, dim))?;
        space.decompose(meta.owner)?;
        prompts.push(PromptSlot {
            owner: meta.owner,
            init_text: meta.init_text.clone(),
            tokens,
        });
    }

    let table = TokenTable::from_parts(attr, obj, attr_base, obj_base);
    let model = Model::from_parts(
        space,
        dim,
        table,
        prompts,
        header.featurizer_seed,
        header.frozen_map_seed,
        header.word_seed,
    );

    // Frozen parts are rebuilt from seeds; the stored copies must agree
    // bitwise or the checkpoint came from a different lineage.
    if model.featurizer.weights() != featurizer_w.view() {
        return Err(Error::Checkpoint(
            "stored featurizer does not match its seed reconstruction".into(),
        ));
    }
    if model.frozen_map.matrix() != frozen_map_m.view() {
        return Err(Error::Checkpoint(
            "stored composition map does not match its seed reconstruction".into(),
        ));
    }

    Ok((model, header.manifest))
}
