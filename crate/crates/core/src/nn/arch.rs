//! Built-in base-learner architectures.
//!
//! Each variant is a small conv backbone followed by a dense head with
//! dropout. Inputs larger than 48 pixels are first max-pooled down so the
//! dense head stays small at any resolution.

use rand::Rng;

use super::layer::{LayerKind, LayerSpec};
use super::net::MicroNet;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stable id of the `index`-th built-in architecture (`micro_a`, `micro_b`, ...).
pub fn architecture_id(index: usize) -> String {
    let letter = (b'a' + (index % 26) as u8) as char;
    if index < 26 {
        format!("micro_{letter}")
    } else {
        format!("micro_{letter}{}", index / 26)
    }
}

struct Blueprint {
    /// `(out_channels, kernel, pool_after)` per conv layer.
    convs: &'static [(usize, usize, bool)],
    hidden: usize,
}

const BLUEPRINTS: [Blueprint; 3] = [
    Blueprint {
        convs: &[(6, 3, true), (12, 3, true)],
        hidden: 16,
    },
    Blueprint {
        convs: &[(4, 5, true), (8, 3, true)],
        hidden: 12,
    },
    Blueprint {
        convs: &[(8, 3, true), (8, 3, true), (8, 3, false)],
        hidden: 16,
    },
];

/// Layer specs and head start for built-in architecture `index` on a
/// single-channel `side` x `side` input.
pub fn builtin_specs(index: usize, side: usize, dropout: f64) -> Result<(Vec<LayerSpec>, usize)> {
    let bp = &BLUEPRINTS[index % BLUEPRINTS.len()];
    // wider variants once the blueprints repeat
    let width = 1 + index / BLUEPRINTS.len();
    let mut specs = Vec::new();
    let mut s = side;
    while s > 48 {
        specs.push(LayerSpec::new(LayerKind::MaxPool2));
        s /= 2;
    }
    let mut ch = 1;
    for &(out, k, pool) in bp.convs {
        let out = out * width;
        specs.push(LayerSpec::new(LayerKind::Conv2d { in_ch: ch, out_ch: out, kernel: k }));
        specs.push(LayerSpec::new(LayerKind::Relu));
        if s < k {
            return Err(Error::invalid(format!("input side {side} too small for {}", architecture_id(index))));
        }
        s = s - k + 1;
        if pool {
            specs.push(LayerSpec::new(LayerKind::MaxPool2));
            s /= 2;
        }
        ch = out;
    }
    if s == 0 {
        return Err(Error::invalid(format!("input side {side} too small for {}", architecture_id(index))));
    }
    let head_start = specs.len();
    let hidden = bp.hidden * width;
    specs.push(LayerSpec::new(LayerKind::Dense { inputs: ch * s * s, units: hidden }));
    specs.push(LayerSpec::new(LayerKind::Relu));
    specs.push(LayerSpec::new(LayerKind::Dropout { rate: dropout }));
    specs.push(LayerSpec::new(LayerKind::Dense { inputs: hidden, units: 1 }));
    specs.push(LayerSpec::new(LayerKind::SigmoidHead));
    Ok((specs, head_start))
}

pub fn build<T: Scalar, R: Rng>(index: usize, side: usize, dropout: f64, rng: &mut R) -> Result<MicroNet<T>> {
    let (specs, head_start) = builtin_specs(index, side, dropout)?;
    MicroNet::new(architecture_id(index), [1, side, side], specs, head_start, rng)
}
