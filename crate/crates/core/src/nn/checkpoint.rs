//! `FQL1` checkpoints: magic, little-endian `u32` metadata length, JSON
//! metadata, then every parameter and buffer as little-endian `f32` in
//! declaration order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Buffer, LayerDesc, Network, Param, ParamKind};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FQL1";
const FORMAT_VERSION: u32 = 1;

/// Run provenance stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub seed: u64,
    pub epoch: usize,
    pub config_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamMeta {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BufferMeta {
    pub name: String,
    pub len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub format_version: u32,
    pub input_channels: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerDesc>,
    pub params: Vec<ParamMeta>,
    pub buffers: Vec<BufferMeta>,
    #[serde(flatten)]
    pub info: CheckpointInfo,
}

impl Metadata {
    pub fn of(net: &Network, info: &CheckpointInfo) -> Self {
        Metadata {
            format_version: FORMAT_VERSION,
            input_channels: net.input_channels,
            num_classes: net.num_classes,
            layers: net.layers.clone(),
            params: net
                .params
                .iter()
                .map(|p| ParamMeta {
                    name: p.name.clone(),
                    kind: p.kind,
                    shape: p.tensor.shape().to_vec(),
                    trainable: p.tensor.requires_grad(),
                })
                .collect(),
            buffers: net
                .buffers
                .iter()
                .map(|b| BufferMeta {
                    name: b.name.clone(),
                    len: b.data.len(),
                })
                .collect(),
            info: info.clone(),
        }
    }

    fn float_count(&self) -> usize {
        self.params
            .iter()
            .map(|p| p.shape.iter().product::<usize>())
            .sum::<usize>()
            + self.buffers.iter().map(|b| b.len).sum::<usize>()
    }
}

pub fn encode(net: &Network, info: &CheckpointInfo) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&Metadata::of(net, info)).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    let meta_len = u32::try_from(meta.len()).map_err(|_| Error::Checkpoint("metadata too large".into()))?;
    let mut out = Vec::with_capacity(8 + meta.len() + 4 * net.param_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&meta_len.to_le_bytes());
    out.extend_from_slice(&meta);
    let floats = net
        .params
        .iter()
        .flat_map(|p| p.tensor.data().iter())
        .chain(net.buffers.iter().flat_map(|b| b.data.iter()));
    for v in floats {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Reads only the metadata block.
pub fn decode_metadata(bytes: &[u8]) -> Result<(Metadata, usize)> {
    if bytes.len() < 8 {
        return Err(Error::Checkpoint(format!("file of {} bytes is too short", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected \"FQL1\"",
            String::from_utf8_lossy(&bytes[..4])
        )));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let end = 8 + len;
    if bytes.len() < end {
        return Err(Error::Checkpoint(format!(
            "metadata length {len} runs past end of file ({} bytes)",
            bytes.len()
        )));
    }
    let meta: Metadata =
        serde_json::from_slice(&bytes[8..end]).map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            meta.format_version
        )));
    }
    Ok((meta, end))
}

pub fn decode(bytes: &[u8]) -> Result<(Network, CheckpointInfo)> {
    let (meta, start) = decode_metadata(bytes)?;
    let expected = 4 * meta.float_count();
    let payload = &bytes[start..];
    if payload.len() != expected {
        return Err(Error::Checkpoint(format!(
            "parameter payload is {} bytes, metadata shapes need {expected}",
            payload.len()
        )));
    }
    let mut floats = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let mut take = |n: usize| floats.by_ref().take(n).collect::<Vec<f32>>();
    let params = meta
        .params
        .iter()
        .map(|p| {
            let data = take(p.shape.iter().product());
            Ok(Param {
                name: p.name.clone(),
                kind: p.kind,
                tensor: Tensor::new(p.shape.clone(), data)?.with_requires_grad(p.trainable),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let buffers = meta
        .buffers
        .iter()
        .map(|b| Buffer {
            name: b.name.clone(),
            data: take(b.len),
        })
        .collect();
    let net = Network {
        layers: meta.layers,
        params,
        buffers,
        input_channels: meta.input_channels,
        num_classes: meta.num_classes,
    };
    check_layout(&net)?;
    Ok((net, meta.info))
}

/// Confirms the stored parameters are the ones the layer list would create.
fn check_layout(net: &Network) -> Result<()> {
    let fresh = Network::from_layers(net.layers.clone(), net.input_channels, net.num_classes, 0)
        .map_err(|e| Error::Checkpoint(format!("layer list: {e}")))?;
    if fresh.params.len() != net.params.len() || fresh.buffers.len() != net.buffers.len() {
        return Err(Error::Checkpoint(format!(
            "layer list implies {} parameters and {} buffers, file has {} and {}",
            fresh.params.len(),
            fresh.buffers.len(),
            net.params.len(),
            net.buffers.len()
        )));
    }
    for (a, b) in fresh.params.iter().zip(&net.params) {
        if a.name != b.name || a.tensor.shape() != b.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, layer list expects `{}` {:?}",
                b.name,
                b.tensor.shape(),
                a.name,
                a.tensor.shape()
            )));
        }
    }
    for (a, b) in fresh.buffers.iter().zip(&net.buffers) {
        if a.name != b.name || a.data.len() != b.data.len() {
            return Err(Error::Checkpoint(format!(
                "buffer `{}` does not match layer list",
                b.name
            )));
        }
    }
    Ok(())
}

pub fn save(path: &Path, net: &Network, info: &CheckpointInfo) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode(net, info)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<(Network, CheckpointInfo)> {
    let bytes = fs::read(path)?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
