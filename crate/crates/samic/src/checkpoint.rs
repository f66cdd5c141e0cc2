//! Checkpoint files: a magic line, a little-endian `u32` header length, a
//! JSON header with the network config and parameter layout, then every
//! parameter as a little-endian f64.

use std::path::Path;

use samic_core::net::{CorrelationNet, NetConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read, write_atomic};

pub const CHECKPOINT_MAGIC: &[u8] = b"SAMIC-CKPT-1\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub net: NetConfig,
    pub params: Vec<ParamEntry>,
    pub count: usize,
    /// Fingerprint of the frozen backbone the network was trained against.
    pub backbone_fingerprint: u64,
    #[serde(default)]
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

pub fn checkpoint_bytes(net: &CorrelationNet, backbone_fingerprint: u64, epoch: Option<usize>) -> Vec<u8> {
    let header = CheckpointHeader {
        net: net.config().clone(),
        params: net
            .param_specs()
            .iter()
            .map(|s| ParamEntry { name: s.name.clone(), shape: s.shape.clone(), offset: s.offset })
            .collect(),
        count: net.param_count(),
        backbone_fingerprint,
        epoch,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 4 + json.len() + 8 * net.param_count());
    out.extend(CHECKPOINT_MAGIC);
    out.extend((json.len() as u32).to_le_bytes());
    out.extend(json);
    for p in net.params() {
        out.extend(p.to_le_bytes());
    }
    out
}

pub fn save_checkpoint(path: &Path, net: &CorrelationNet, backbone_fingerprint: u64, epoch: Option<usize>) -> Result<()> {
    write_atomic(path, &checkpoint_bytes(net, backbone_fingerprint, epoch))
}

pub fn parse_checkpoint(path: &Path, bytes: &[u8]) -> Result<(CorrelationNet, CheckpointHeader)> {
    let bad = |m: &str| Error::format(path, m);
    let rest = bytes.strip_prefix(CHECKPOINT_MAGIC).ok_or_else(|| bad("not a checkpoint file"))?;
    if rest.len() < 4 {
        return Err(bad("truncated header"));
    }
    let hlen = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
    let rest = &rest[4..];
    if rest.len() < hlen {
        return Err(bad("truncated header"));
    }
    let header: CheckpointHeader = serde_json::from_slice(&rest[..hlen]).map_err(|e| Error::format(path, e))?;
    let body = &rest[hlen..];
    if body.len() != 8 * header.count {
        return Err(bad("parameter block does not match the declared count"));
    }
    let mut net = CorrelationNet::new(header.net.clone())?;
    let layout_matches = net.param_count() == header.count
        && net.param_specs().len() == header.params.len()
        && net
            .param_specs()
            .iter()
            .zip(&header.params)
            .all(|(s, e)| s.name == e.name && s.shape == e.shape && s.offset == e.offset);
    if !layout_matches {
        return Err(bad("parameter layout does not match the network built from its config"));
    }
    let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    net.set_params(params)?;
    Ok((net, header))
}

pub fn load_checkpoint(path: &Path) -> Result<(CorrelationNet, CheckpointHeader)> {
    parse_checkpoint(path, &read(path)?)
}
