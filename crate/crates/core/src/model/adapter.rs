use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomStream};

use super::backbone::Linear;

pub const DEFAULT_ALPHA: f64 = 32.0;
pub const DEFAULT_DROPOUT: f64 = 0.05;

/// Which attention projection an adapter is attached to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Projection {
    Query,
    Value,
    Output,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Value, Projection::Output];

    fn index(self) -> usize {
        match self {
            Projection::Query => 0,
            Projection::Value => 1,
            Projection::Output => 2,
        }
    }
}

/// Adapted layer identity; ids order by encoder layer, then q, v, o.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct AdapterTarget {
    pub layer: usize,
    pub projection: Projection,
}

impl AdapterTarget {
    pub fn id(&self) -> usize {
        self.layer * Projection::ALL.len() + self.projection.index()
    }
}

impl fmt::Display for AdapterTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let p = match self.projection {
            Projection::Query => "q",
            Projection::Value => "v",
            Projection::Output => "o",
        };
        write!(f, "layer{}.{}", self.layer, p)
    }
}

/// Trainable low-rank update `ΔW = (alpha/r)·B·A` for a frozen `d1 × d2` map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    /// `d1 × r`, zero at initialization.
    pub b: Matrix,
    /// `r × d2`, Kaiming-uniform at initialization.
    pub a: Matrix,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.b.rows()
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.b.as_slice().len() + self.a.as_slice().len()
    }

    /// Dense `(alpha/r)·B·A`.
    pub fn delta_weight(&self) -> Matrix {
        self.b.matmul_unchecked(&self.a).scale(self.scaling())
    }
}

/// Fresh adapter: `B = 0`, `A ~ U(−√(6/d2), √(6/d2))`.
pub fn init_adapter(
    d1: usize,
    d2: usize,
    rank: usize,
    alpha: f64,
    dropout: f64,
    stream: &mut RandomStream,
) -> Result<LoraAdapter> {
    init_adapter_for(
        AdapterTarget {
            layer: 0,
            projection: Projection::Query,
        },
        d1,
        d2,
        rank,
        alpha,
        dropout,
        stream,
    )
}

pub(crate) fn init_adapter_for(
    target: AdapterTarget,
    d1: usize,
    d2: usize,
    rank: usize,
    alpha: f64,
    dropout: f64,
    stream: &mut RandomStream,
) -> Result<LoraAdapter> {
    if rank == 0 || 2 * rank > d1.min(d2) {
        return Err(Error::invalid(format!(
            "LoRA rank {rank} outside [1, min({d1}, {d2})/2]"
        )));
    }
    if !alpha.is_finite() || alpha < 0.0 {
        return Err(Error::invalid("LoRA alpha must be finite and non-negative"));
    }
    if !(0.0..1.0).contains(&dropout) {
        return Err(Error::invalid("LoRA dropout must lie in [0, 1)"));
    }
    let bound = (6.0 / d2 as f64).sqrt();
    let a: Vec<f64> = (0..rank * d2).map(|_| stream.uniform(-bound, bound)).collect();
    Ok(LoraAdapter {
        target,
        b: Matrix::zeros(d1, rank),
        a: Matrix::from_vec(rank, d2, a)?,
        alpha,
        dropout,
    })
}

/// `h = W₀·a + (alpha/r)·B·A·dropout(a)`; dropout only when `train` carries a
/// stream, so evaluation is deterministic.
pub fn lora_forward(
    layer: &Linear,
    adapter: &LoraAdapter,
    a: &[f64],
    train: Option<&mut RandomStream>,
) -> Result<Vec<f64>> {
    if a.len() != layer.in_dim() || adapter.in_dim() != layer.in_dim() {
        return Err(Error::invalid(format!(
            "input of length {} does not match layer input width {}",
            a.len(),
            layer.in_dim()
        )));
    }
    if adapter.out_dim() != layer.out_dim() {
        return Err(Error::invalid("adapter output width does not match layer"));
    }
    let mut h = layer.weight.matvec(a)?;
    for (v, b) in h.iter_mut().zip(&layer.bias) {
        *v += b;
    }
    let x = match train {
        Some(stream) => {
            let mask = dropout_mask(a.len(), adapter.dropout, stream);
            a.iter().zip(&mask).map(|(v, m)| v * m).collect()
        }
        None => a.to_vec(),
    };
    let u = adapter.a.matvec(&x)?;
    let delta = adapter.b.matvec(&u)?;
    let s = adapter.scaling();
    for (v, d) in h.iter_mut().zip(delta) {
        *v += s * d;
    }
    Ok(h)
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1−rate)`.
pub(crate) fn dropout_mask(n: usize, rate: f64, stream: &mut RandomStream) -> Vec<f64> {
    if rate == 0.0 {
        return vec![1.0; n];
    }
    let keep = 1.0 / (1.0 - rate);
    (0..n)
        .map(|_| if stream.uniform(0.0, 1.0) < rate { 0.0 } else { keep })
        .collect()
}
