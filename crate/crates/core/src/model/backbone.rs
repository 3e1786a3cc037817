use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, RandomStream};

/// Shape of the frozen encoder.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub num_layers: usize,
    pub max_seq_len: usize,
    /// Hidden width of the feed-forward block.
    pub ffn_dim: usize,
    /// Token id treated as padding (masked out as an attention key).
    pub pad_id: u32,
}

pub const NUM_CLASSES: usize = 2;

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::new(64, 32, 2, 2)
    }
}

impl BackboneConfig {
    /// Config with `max_seq_len = 50`, `ffn_dim = 4·embed_dim` and pad id 0.
    pub fn new(vocab_size: usize, embed_dim: usize, num_heads: usize, num_layers: usize) -> Self {
        Self {
            vocab_size,
            embed_dim,
            num_heads,
            num_layers,
            max_seq_len: 50,
            ffn_dim: 4 * embed_dim,
            pad_id: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.embed_dim == 0 || self.num_heads == 0 {
            return Err(Error::invalid("backbone dimensions must be positive"));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::invalid(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_seq_len == 0 {
            return Err(Error::invalid("max_seq_len must be at least 1"));
        }
        if self.ffn_dim == 0 {
            return Err(Error::invalid("ffn_dim must be positive"));
        }
        if self.pad_id as usize >= self.vocab_size {
            return Err(Error::invalid("pad id outside the vocabulary"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }
}

/// Frozen affine map `y = W·x + b` with `W` stored `out × in`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    fn random(out_dim: usize, in_dim: usize, rng: &mut RandomStream) -> Self {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = rng.gaussian(out_dim * in_dim).into_iter().map(|v| v * std).collect();
        Self {
            weight: Matrix::from_vec(out_dim, in_dim, w).expect("finite init"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    /// Applies the map to every row of `x` (`T × in` → `T × out`).
    pub fn apply_rows(&self, x: &Matrix) -> Matrix {
        let mut y = x.matmul_transposed(&self.weight);
        for r in 0..y.rows() {
            for (v, b) in y.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        y
    }

    fn param_count(&self) -> usize {
        self.weight.rows() * self.weight.cols() + self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

impl LayerNorm {
    fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    fn param_count(&self) -> usize {
        self.gamma.len() + self.beta.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderLayer {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub norm_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

/// Pre-norm transformer encoder with a two-class head on the first position.
///
/// Weights are drawn once from the seed and never mutated afterwards; the
/// type exposes no mutable access.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenBackbone {
    config: BackboneConfig,
    seed: u64,
    pub(crate) token_embedding: Matrix,
    pub(crate) position_embedding: Matrix,
    pub(crate) layers: Vec<EncoderLayer>,
    pub(crate) final_norm: LayerNorm,
    pub(crate) head: Linear,
}

impl FrozenBackbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[EncoderLayer] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        let emb = self.token_embedding.as_slice().len() + self.position_embedding.as_slice().len();
        let layers: usize = self
            .layers
            .iter()
            .map(|l| {
                l.norm_attn.param_count()
                    + l.query.param_count()
                    + l.key.param_count()
                    + l.value.param_count()
                    + l.output.param_count()
                    + l.norm_ffn.param_count()
                    + l.ffn_in.param_count()
                    + l.ffn_out.param_count()
            })
            .sum();
        emb + layers + self.final_norm.param_count() + self.head.param_count()
    }

    /// Every frozen weight in a fixed order; used for bit-identity checks.
    pub fn weights_snapshot(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        let mut lin = |l: &Linear| {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
        };
        let mut ln_buf = Vec::new();
        for layer in &self.layers {
            lin(&layer.query);
            lin(&layer.key);
            lin(&layer.value);
            lin(&layer.output);
            lin(&layer.ffn_in);
            lin(&layer.ffn_out);
            for n in [&layer.norm_attn, &layer.norm_ffn] {
                ln_buf.extend_from_slice(&n.gamma);
                ln_buf.extend_from_slice(&n.beta);
            }
        }
        lin(&self.head);
        out.extend_from_slice(self.token_embedding.as_slice());
        out.extend_from_slice(self.position_embedding.as_slice());
        out.extend(ln_buf);
        out.extend_from_slice(&self.final_norm.gamma);
        out.extend_from_slice(&self.final_norm.beta);
        out
    }
}

/// Deterministic random backbone standing in for a pretrained encoder.
pub fn init_backbone(config: &BackboneConfig, seed: u64) -> Result<FrozenBackbone> {
    config.validate()?;
    let d = config.embed_dim;
    let mut rng = RandomStream::new(seed);
    let token_embedding = Matrix::from_vec(config.vocab_size, d, rng.gaussian(config.vocab_size * d))?;
    let position_embedding = Matrix::from_vec(
        config.max_seq_len,
        d,
        rng.gaussian(config.max_seq_len * d)
            .into_iter()
            .map(|v| 0.5 * v)
            .collect(),
    )?;
    let layers = (0..config.num_layers)
        .map(|_| EncoderLayer {
            norm_attn: LayerNorm::new(d),
            query: Linear::random(d, d, &mut rng),
            key: Linear::random(d, d, &mut rng),
            value: Linear::random(d, d, &mut rng),
            output: Linear::random(d, d, &mut rng),
            norm_ffn: LayerNorm::new(d),
            ffn_in: Linear::random(config.ffn_dim, d, &mut rng),
            ffn_out: Linear::random(d, config.ffn_dim, &mut rng),
        })
        .collect();
    let head = Linear::random(NUM_CLASSES, d, &mut rng);
    Ok(FrozenBackbone {
        config: config.clone(),
        seed,
        token_embedding,
        position_embedding,
        layers,
        final_norm: LayerNorm::new(d),
        head,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_weights() {
        let cfg = BackboneConfig::default();
        assert_eq!(init_backbone(&cfg, 5).unwrap(), init_backbone(&cfg, 5).unwrap());
        assert_ne!(
            init_backbone(&cfg, 5).unwrap().weights_snapshot(),
            init_backbone(&cfg, 6).unwrap().weights_snapshot()
        );
    }

    #[test]
    fn heads_must_divide_embedding() {
        let cfg = BackboneConfig::new(64, 33, 2, 2);
        assert!(matches!(init_backbone(&cfg, 0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn parameter_count_closed_form() {
        // vocab 64, dim 32, heads 2, layers 2, seq 50, ffn 128.
        let (v, d, s, f, layers) = (64, 32, 50, 128, 2);
        let embeddings = v * d + s * d;
        let attention = 4 * (d * d + d);
        let norms = 2 * (2 * d);
        let ffn = (f * d + f) + (d * f + d);
        let head = 2 * d + 2;
        let final_norm = 2 * d;
        let expected = embeddings + layers * (attention + norms + ffn) + final_norm + head;
        assert_eq!(expected, 29_186);
        let b = init_backbone(&BackboneConfig::new(64, 32, 2, 2), 1).unwrap();
        assert_eq!(b.param_count(), expected);
        assert_eq!(b.weights_snapshot().len(), expected);
    }
}
