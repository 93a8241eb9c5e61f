//! Checkpoint container: a flat little-endian f64 array file plus a JSON
//! index that embeds the input configuration, so a checkpoint can be loaded
//! without external context.

use super::{build_unet, InputConfiguration, UNet};
use crate::error::{Error, Result};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

#[derive(Debug, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
    /// Offset into the binary file, in f64 elements.
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointIndex {
    format: String,
    input: InputConfiguration,
    base_features: usize,
    depth: usize,
    seed: u64,
    arrays: Vec<ArrayEntry>,
}

fn paths(base: &Path) -> (PathBuf, PathBuf) {
    let s = base.to_string_lossy();
    let stem = s
        .strip_suffix(".ckpt.json")
        .or_else(|| s.strip_suffix(".ckpt.bin"))
        .or_else(|| s.strip_suffix(".ckpt"))
        .unwrap_or(&s)
        .to_string();
    (
        PathBuf::from(format!("{stem}.ckpt.bin")),
        PathBuf::from(format!("{stem}.ckpt.json")),
    )
}

pub fn save_checkpoint(net: &UNet, base: &Path) -> Result<()> {
    let (bin_path, json_path) = paths(base);
    let mut arrays = Vec::new();
    let mut offset = 0usize;
    let mut bin = BufWriter::new(std::fs::File::create(&bin_path)?);
    let mut io_err: Option<std::io::Error> = None;
    net.visit_params(|name, p| {
        if io_err.is_some() {
            return;
        }
        for (suffix, shape, data) in [
            ("w", p.weights.shape.to_vec(), &p.weights.data),
            ("b", vec![p.bias.len()], &p.bias),
        ] {
            arrays.push(ArrayEntry {
                name: format!("{name}.{suffix}"),
                shape,
                offset,
                len: data.len(),
            });
            offset += data.len();
            for &v in data {
                if let Err(e) = bin.write_f64::<LittleEndian>(v) {
                    io_err = Some(e);
                    return;
                }
            }
        }
    });
    if let Some(e) = io_err {
        return Err(e.into());
    }
    bin.flush()?;

    let index = CheckpointIndex {
        format: "metdetect-checkpoint-v1".into(),
        input: net.input.clone(),
        base_features: net.base_features,
        depth: net.depth,
        seed: net.seed,
        arrays,
    };
    std::fs::write(&json_path, serde_json::to_string_pretty(&index)?)?;
    Ok(())
}

pub fn load_checkpoint(base: &Path) -> Result<UNet> {
    let (bin_path, json_path) = paths(base);
    let index: CheckpointIndex =
        serde_json::from_str(&std::fs::read_to_string(&json_path)?)?;
    if index.format != "metdetect-checkpoint-v1" {
        return Err(Error::Format {
            path: json_path.clone(),
            offset: 0,
            message: format!("unknown checkpoint format {:?}", index.format),
        });
    }
    let total: usize = index.arrays.iter().map(|a| a.len).sum();
    let mut data = vec![0.0f64; total];
    let mut r = BufReader::new(std::fs::File::open(&bin_path)?);
    for (i, v) in data.iter_mut().enumerate() {
        *v = r.read_f64::<LittleEndian>().map_err(|_| Error::Format {
            path: bin_path.clone(),
            offset: (i * 8) as u64,
            message: format!("checkpoint binary truncated, expected {total} f64 values"),
        })?;
    }

    let mut net = build_unet(&index.input, index.base_features, index.depth, index.seed)?;
    let mut missing: Vec<String> = Vec::new();
    net.visit_params_mut(|name, p| {
        for (suffix, dest, shape) in [
            ("w", &mut p.weights.data, Some(p.weights.shape.to_vec())),
            ("b", &mut p.bias, None),
        ] {
            let full = format!("{name}.{suffix}");
            match index.arrays.iter().find(|a| a.name == full) {
                Some(entry) => {
                    let ok_shape = match &shape {
                        Some(s) => &entry.shape == s,
                        None => entry.shape == vec![dest.len()],
                    };
                    if !ok_shape || entry.len != dest.len() {
                        missing.push(format!("{full} (shape mismatch)"));
                    } else {
                        dest.copy_from_slice(&data[entry.offset..entry.offset + entry.len]);
                    }
                }
                None => missing.push(full),
            }
        }
    });
    if !missing.is_empty() {
        return Err(Error::Format {
            path: json_path,
            offset: 0,
            message: format!("checkpoint arrays missing or mismatched: {}", missing.join(", ")),
        });
    }
    Ok(net)
}
