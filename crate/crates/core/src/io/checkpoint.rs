//! Training checkpoints.
//!
//! Layout: the 8-byte magic `HDNCKPT1`, a little-endian u64 header length,
//! a JSON header (format version, precision, architecture, epoch, learning
//! rate, master seed, and an index of the parameter arrays), then the
//! arrays themselves as one little-endian blob in index order. Parameters
//! are stored bit-exactly at the run's precision, so save → load → forward
//! reproduces the pre-save outputs to the last bit. The master seed plus
//! the completed-epoch counter fully determine every RNG stream of a
//! resumed run, so no separate generator state is needed.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::{plan_wiring, ArchitectureSpec, NetworkGraph};
use crate::ops::conv::ConvKernelBank;
use crate::scalar::Scalar;
use crate::train::OptimizerState;

const MAGIC: &[u8; 8] = b"HDNCKPT1";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    precision: String,
    arch: ArchitectureSpec,
    /// Last completed 1-based epoch.
    epoch: usize,
    /// Learning rate most recently applied.
    lr: f64,
    /// Master seed of the run; with `epoch` this pins all RNG streams.
    seed: u64,
    arrays: Vec<ArrayEntry>,
}

/// Everything needed to resume training (or just run inference).
#[derive(Debug)]
pub struct TrainCheckpoint<T> {
    pub net: NetworkGraph<T>,
    pub state: OptimizerState<T>,
    pub seed: u64,
}

fn push<T: Scalar>(arrays: &mut Vec<ArrayEntry>, blob: &mut Vec<u8>, name: String, values: &[T]) {
    arrays.push(ArrayEntry { name, len: values.len() });
    for &v in values {
        v.write_le(blob);
    }
}

/// Save the network, optimizer state, and run seed atomically.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    net: &NetworkGraph<T>,
    state: &OptimizerState<T>,
    seed: u64,
) -> Result<()> {
    if state.r.len() != 3 * net.banks.len() || state.v.len() != state.r.len() {
        return Err(Error::ShapeMismatch(format!(
            "optimizer state has {} arrays, the network's {} banks need {}",
            state.r.len(),
            net.banks.len(),
            3 * net.banks.len()
        )));
    }
    let mut arrays = Vec::new();
    let mut blob = Vec::new();
    for (i, bank) in net.banks.iter().enumerate() {
        let id = net.plan.nodes[i].key.name();
        push(&mut arrays, &mut blob, format!("{id}.weights"), &bank.weights);
        push(&mut arrays, &mut blob, format!("{id}.bias"), &bank.bias);
        if let Some(slopes) = &bank.prelu {
            push(&mut arrays, &mut blob, format!("{id}.prelu"), slopes);
        }
    }
    for (i, bank) in net.banks.iter().enumerate() {
        let id = net.plan.nodes[i].key.name();
        for (prefix, half) in [("r", &state.r), ("v", &state.v)] {
            push(&mut arrays, &mut blob, format!("{id}.{prefix}.weights"), &half[3 * i]);
            push(&mut arrays, &mut blob, format!("{id}.{prefix}.bias"), &half[3 * i + 1]);
            if bank.prelu.is_some() {
                push(&mut arrays, &mut blob, format!("{id}.{prefix}.prelu"), &half[3 * i + 2]);
            }
        }
    }

    let header = Header {
        version: VERSION,
        precision: T::DTYPE.to_string(),
        arch: net.plan.spec.clone(),
        epoch: state.epoch,
        lr: state.lr,
        seed,
        arrays,
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::json(path.display().to_string(), e))?;

    let mut bytes = Vec::with_capacity(16 + header_json.len() + blob.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_json);
    bytes.extend_from_slice(&blob);
    super::atomic_write(path, &bytes)
}

fn read_header(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    if bytes.len() < 16 || &bytes[0..8] != MAGIC {
        return Err(Error::format(p, "not a checkpoint (bad magic)"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    if bytes.len() < 16 + header_len {
        return Err(Error::format(p, "truncated checkpoint header"));
    }
    let header: Header = serde_json::from_slice(&bytes[16..16 + header_len])
        .map_err(|e| Error::json(p.clone(), e))?;
    if header.version != VERSION {
        return Err(Error::format(
            p,
            format!("checkpoint format version {} is not supported (expected {VERSION})", header.version),
        ));
    }
    Ok((header, bytes[16 + header_len..].to_vec()))
}

/// Precision a checkpoint was written at (`"f32"` or `"f64"`), without
/// loading its arrays.
pub fn peek_precision(path: &Path) -> Result<String> {
    Ok(read_header(path)?.0.precision)
}

/// Load a checkpoint saved at precision `T`.
pub fn load_checkpoint<T: Scalar>(path: &Path) -> Result<TrainCheckpoint<T>> {
    let (header, blob) = read_header(path)?;
    let p = path.display().to_string();
    if header.precision != T::DTYPE {
        return Err(Error::format(
            p,
            format!("checkpoint precision is {} but {} was requested", header.precision, T::DTYPE),
        ));
    }
    let total: usize = header.arrays.iter().map(|a| a.len).sum();
    if blob.len() != total * T::BYTES {
        return Err(Error::format(
            p,
            format!("parameter blob is {} bytes but the index needs {}", blob.len(), total * T::BYTES),
        ));
    }

    // array name -> values, consumed in index order
    let mut offset = 0usize;
    let mut by_name = std::collections::HashMap::new();
    for entry in &header.arrays {
        let end = offset + entry.len * T::BYTES;
        let values: Vec<T> = blob[offset..end].chunks_exact(T::BYTES).map(T::read_le).collect();
        if by_name.insert(entry.name.clone(), values).is_some() {
            return Err(Error::format(p, format!("duplicate array '{}' in checkpoint index", entry.name)));
        }
        offset = end;
    }
    let mut take = |name: &str, len: usize| -> Result<Vec<T>> {
        let values = by_name
            .remove(name)
            .ok_or_else(|| Error::format(p.clone(), format!("checkpoint lacks array '{name}'")))?;
        if values.len() != len {
            return Err(Error::format(
                p.clone(),
                format!("array '{name}' has {} values, the architecture needs {len}", values.len()),
            ));
        }
        Ok(values)
    };

    let plan = plan_wiring(&header.arch)?;
    let mut banks = Vec::with_capacity(plan.nodes.len());
    let mut r = Vec::with_capacity(3 * plan.nodes.len());
    let mut v = Vec::with_capacity(3 * plan.nodes.len());
    for node in &plan.nodes {
        let id = node.key.name();
        let mut bank: ConvKernelBank<T> =
            ConvKernelBank::zeros(node.out_channels, node.in_channels, node.kernel, node.prelu);
        bank.weights = take(&format!("{id}.weights"), bank.weights.len())?;
        bank.bias = take(&format!("{id}.bias"), bank.bias.len())?;
        if node.prelu {
            bank.prelu = Some(take(&format!("{id}.prelu"), node.out_channels)?);
        }
        for (prefix, half) in [("r", &mut r), ("v", &mut v)] {
            half.push(take(&format!("{id}.{prefix}.weights"), bank.weights.len())?);
            half.push(take(&format!("{id}.{prefix}.bias"), bank.bias.len())?);
            half.push(if node.prelu {
                take(&format!("{id}.{prefix}.prelu"), node.out_channels)?
            } else {
                Vec::new()
            });
        }
        banks.push(bank);
    }
    if !by_name.is_empty() {
        let mut extra: Vec<_> = by_name.into_keys().collect();
        extra.sort();
        return Err(Error::format(p, format!("checkpoint carries unknown arrays: {}", extra.join(", "))));
    }

    let net = NetworkGraph::from_parts(plan, banks)?;
    let state = OptimizerState { r, v, epoch: header.epoch, lr: header.lr };
    Ok(TrainCheckpoint { net, state, seed: header.seed })
}
