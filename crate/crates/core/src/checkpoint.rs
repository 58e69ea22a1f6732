//! Checkpoint directories: a JSON manifest describing each parameter
//! plus flat binary value files.
//!
//! Layout inside a checkpoint directory:
//! - `manifest.json` — parameter names, shapes, arithmetic tags, and
//!   element offsets into the value file, plus optional ticket metadata;
//! - `weights.bin` — little-endian `f64`, concatenated per manifest;
//! - `masks.bin` — parallel 8-bit 0/1 arrays at the same element
//!   offsets, present only when masks were saved.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::ModelParams;
use crate::pruning::{Mask, MaskPhase, MaskSet, PruneConfig, TicketState};
use crate::tape::Arithmetic;
use crate::tensor::Tensor;

pub const FORMAT_TAG: &str = "qmpnn-checkpoint-v1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub arithmetic: Arithmetic,
    /// Offset into the flat files, in elements.
    pub offset: usize,
    pub len: usize,
    /// Whether pruning masks may cover this parameter; global sparsity
    /// is computed over prunable entries only.
    #[serde(default)]
    pub prunable: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TicketMeta {
    pub rounds: usize,
    pub sparsity: f64,
    pub config: PruneConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub params: Vec<ParamEntry>,
    pub has_masks: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ticket: Option<TicketMeta>,
}

/// Write a checkpoint directory. `values` defaults to the model's
/// current parameter values; pass `ticket` to export a lottery ticket
/// (its `W⁰` and hard mask).
pub fn save_checkpoint(
    dir: &Path,
    mp: &ModelParams,
    masks: Option<&MaskSet>,
    ticket: Option<&TicketState>,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let values: Vec<&Tensor> = match ticket {
        Some(t) => t.w0.iter().collect(),
        None => mp.set.params.iter().map(|p| &p.value).collect(),
    };
    let masks = ticket.map(|t| &t.masks).or(masks);
    if values.len() != mp.set.len() {
        return Err(Error::Checkpoint("value count mismatch".into()));
    }

    let mut entries = Vec::with_capacity(mp.set.len());
    let mut offset = 0usize;
    let mut weight_bytes: Vec<u8> = Vec::new();
    for (p, v) in mp.set.params.iter().zip(&values) {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: v.shape().to_vec(),
            arithmetic: p.arith,
            offset,
            len: v.len(),
            prunable: p.prunable,
        });
        offset += v.len();
        for x in v.data() {
            weight_bytes.extend_from_slice(&x.to_le_bytes());
        }
    }

    let ticket_meta = ticket.map(|t| TicketMeta {
        rounds: t.rounds,
        sparsity: t.sparsity,
        config: PruneConfig::default(),
    });
    let manifest = Manifest {
        format: FORMAT_TAG.to_string(),
        params: entries,
        has_masks: masks.is_some(),
        ticket: ticket_meta,
    };
    fs::write(
        dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    fs::write(dir.join("weights.bin"), &weight_bytes)?;

    if let Some(ms) = masks {
        let mut mask_bytes: Vec<u8> = Vec::with_capacity(offset);
        for (i, v) in values.iter().enumerate() {
            match ms.values(i) {
                Some(vals) => {
                    if vals.len() != v.len() {
                        return Err(Error::Checkpoint(format!(
                            "mask length mismatch on parameter {i}"
                        )));
                    }
                    mask_bytes.extend(vals.iter().map(|&m| u8::from(m != 0.0)));
                }
                // Unmasked parameters serialize as fully dense.
                None => mask_bytes.extend(std::iter::repeat(1u8).take(v.len())),
            }
        }
        fs::write(dir.join("masks.bin"), &mask_bytes)?;
    }
    Ok(())
}

/// Save a ticket checkpoint with its metadata echoed into the manifest.
pub fn save_ticket_checkpoint(
    dir: &Path,
    mp: &ModelParams,
    ticket: &TicketState,
    config: &PruneConfig,
) -> Result<()> {
    save_checkpoint(dir, mp, None, Some(ticket))?;
    // Rewrite the manifest with the real prune configuration.
    let path = dir.join("manifest.json");
    let mut manifest: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
    manifest.ticket = Some(TicketMeta {
        rounds: ticket.rounds,
        sparsity: ticket.sparsity,
        config: *config,
    });
    fs::write(path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub values: Vec<Tensor>,
    /// Parallel 0/1 mask arrays when the checkpoint carries masks.
    pub masks: Option<Vec<Vec<u8>>>,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join("manifest.json");
    let manifest: Manifest = serde_json::from_str(
        &fs::read_to_string(&manifest_path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", manifest_path.display())))?,
    )
    .map_err(|e| Error::Checkpoint(format!("corrupt manifest: {e}")))?;
    if manifest.format != FORMAT_TAG {
        return Err(Error::Checkpoint(format!(
            "unsupported format tag `{}`",
            manifest.format
        )));
    }
    let total: usize = manifest.params.iter().map(|p| p.len).sum();
    for p in &manifest.params {
        if p.shape.iter().product::<usize>() != p.len {
            return Err(Error::Checkpoint(format!(
                "parameter {} shape {:?} disagrees with length {}",
                p.name, p.shape, p.len
            )));
        }
    }

    let weight_bytes = fs::read(dir.join("weights.bin"))?;
    if weight_bytes.len() != total * 8 {
        return Err(Error::Checkpoint(format!(
            "weights.bin is corrupt: expected {} bytes, found {}",
            total * 8,
            weight_bytes.len()
        )));
    }
    let mut values = Vec::with_capacity(manifest.params.len());
    for p in &manifest.params {
        let mut data = Vec::with_capacity(p.len);
        for i in 0..p.len {
            let at = (p.offset + i) * 8;
            let mut buf = [0u8; 8];
            buf.copy_from_slice(&weight_bytes[at..at + 8]);
            data.push(f64::from_le_bytes(buf));
        }
        values.push(Tensor::new(p.shape.clone(), data)?);
    }

    let masks = if manifest.has_masks {
        let mask_bytes = fs::read(dir.join("masks.bin"))?;
        if mask_bytes.len() != total {
            return Err(Error::Checkpoint(format!(
                "masks.bin is corrupt: expected {total} bytes, found {}",
                mask_bytes.len()
            )));
        }
        Some(
            manifest
                .params
                .iter()
                .map(|p| mask_bytes[p.offset..p.offset + p.len].to_vec())
                .collect(),
        )
    } else {
        None
    };

    Ok(Checkpoint {
        manifest,
        values,
        masks,
    })
}

/// Restore checkpoint values (and masks, when present) into a model with
/// a matching parameter layout.
pub fn restore_into(mp: &mut ModelParams, ckpt: &Checkpoint) -> Result<Option<MaskSet>> {
    if ckpt.values.len() != mp.set.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} parameters, model has {}",
            ckpt.values.len(),
            mp.set.len()
        )));
    }
    for (p, (entry, v)) in mp
        .set
        .params
        .iter_mut()
        .zip(ckpt.manifest.params.iter().zip(&ckpt.values))
    {
        if p.name != entry.name || p.value.shape() != v.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter mismatch: {} {:?} vs {} {:?}",
                p.name,
                p.value.shape(),
                entry.name,
                v.shape()
            )));
        }
        p.value = v.clone();
    }
    Ok(ckpt.masks.as_ref().map(|masks| MaskSet {
        masks: masks
            .iter()
            .zip(&mp.set.params)
            .map(|(bytes, p)| {
                p.prunable.then(|| Mask {
                    values: bytes.iter().map(|&b| f64::from(b != 0)).collect(),
                    frozen: bytes.iter().map(|&b| b == 0).collect(),
                    phase: MaskPhase::Hard,
                })
            })
            .collect(),
    }))
}

/// Human-readable checkpoint summary: one line per parameter (name,
/// shape, arithmetic tag, nonzero fraction) plus global sparsity.
pub fn inspect(dir: &Path) -> Result<String> {
    let ckpt = load_checkpoint(dir)?;
    let mut out = String::new();
    out.push_str(&format!("checkpoint {}\n", dir.display()));
    out.push_str(&format!(
        "{:<28} {:>14} {:>12} {:>9}\n",
        "param", "shape", "arithmetic", "nonzero"
    ));
    let mut zeros = 0usize;
    let mut total = 0usize;
    for (i, (entry, value)) in ckpt.manifest.params.iter().zip(&ckpt.values).enumerate() {
        let nonzero = match &ckpt.masks {
            Some(masks) => masks[i].iter().filter(|&&b| b != 0).count(),
            None => value.data().iter().filter(|&&v| v != 0.0).count(),
        };
        if entry.prunable {
            zeros += entry.len - nonzero;
            total += entry.len;
        }
        let shape = entry
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        out.push_str(&format!(
            "{:<28} {:>14} {:>12} {:>9.4}\n",
            entry.name,
            shape,
            entry.arithmetic.as_str(),
            nonzero as f64 / entry.len as f64
        ));
    }
    out.push_str(&format!(
        "global sparsity: {:.3}\n",
        if total > 0 {
            zeros as f64 / total as f64
        } else {
            0.0
        }
    ));
    if let Some(t) = &ckpt.manifest.ticket {
        out.push_str(&format!(
            "ticket: {} rounds, sparsity {:.3}\n",
            t.rounds, t.sparsity
        ));
    }
    Ok(out)
}
