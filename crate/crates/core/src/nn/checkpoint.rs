//! Model checkpoints: one JSON header line, then every parameter as a
//! little-endian `f64`, layer by layer, weights before biases.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layer::LayerSpec;
use super::net::MicroNet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FORMAT: &str = "micronet-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub architecture_id: String,
    pub input_shape: [usize; 3],
    pub head_start: usize,
    pub layers: Vec<LayerSpec>,
    pub param_count: usize,
}

pub fn encode<T: Scalar>(net: &MicroNet<T>) -> Vec<u8> {
    let header = CheckpointHeader {
        format: FORMAT.into(),
        architecture_id: net.architecture_id().into(),
        input_shape: net.input_shape(),
        head_start: net.head_start(),
        layers: net.specs(),
        param_count: net.param_count(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for v in net.flat_params(0..net.layers().len()) {
        out.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    out
}

pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<MicroNet<T>> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::invalid("checkpoint header not terminated"))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::invalid(format!("checkpoint header: {e}")))?;
    if header.format != FORMAT {
        return Err(Error::invalid(format!("unsupported checkpoint format {:?}", header.format)));
    }
    let body = &bytes[nl + 1..];
    if body.len() != header.param_count * 8 {
        return Err(Error::invalid(format!(
            "checkpoint body holds {} bytes, header promises {} parameters",
            body.len(),
            header.param_count
        )));
    }
    let values: Vec<T> = body
        .chunks_exact(8)
        .map(|c| T::lit(f64::from_le_bytes(c.try_into().expect("8 bytes"))))
        .collect();
    // initialization is overwritten below
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
    let mut net = MicroNet::new(
        header.architecture_id,
        header.input_shape,
        header.layers,
        header.head_start,
        &mut rng,
    )?;
    if net.param_count() != header.param_count {
        return Err(Error::invalid("checkpoint parameter count does not match its layers"));
    }
    let mut offset = 0;
    for i in 0..net.layers().len() {
        let (wl, bl) = (net.layers()[i].weight.len(), net.layers()[i].bias.len());
        let w = values[offset..offset + wl].to_vec();
        let b = values[offset + wl..offset + wl + bl].to_vec();
        offset += wl + bl;
        net.set_params(i, w, b)?;
    }
    Ok(net)
}

pub fn save<T: Scalar>(net: &MicroNet<T>, path: &Path) -> Result<()> {
    std::fs::write(path, encode(net)).map_err(|e| Error::io(path, e))
}

pub fn load<T: Scalar>(path: &Path) -> Result<MicroNet<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| Error::data(path, None, e.to_string()))
}
