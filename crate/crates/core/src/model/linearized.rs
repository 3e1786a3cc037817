use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// A contiguous slice of the parameter vector that acts as the weight of a
/// linear map `s = W·a` (`W` stored `out_dim × in_dim`, row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LinearBlock {
    pub name: String,
    pub offset: usize,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl LinearBlock {
    pub fn len(&self) -> usize {
        self.out_dim * self.in_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Per-block record for one input: the activations feeding the block and
/// the gradient of each logit with respect to the block's pre-activations,
/// one row per (non-padding) position.
#[derive(Clone, Debug)]
pub struct BlockLinearization {
    pub activations: Matrix,
    pub output_grads: [Matrix; 2],
}

/// First-order information about the logits at the current parameters.
#[derive(Clone, Debug)]
pub struct LogitLinearization {
    pub logits: [f64; 2],
    /// `jacobian[c]` is the gradient of logit `c` w.r.t. the parameters.
    pub jacobian: [Vec<f64>; 2],
    pub blocks: Vec<BlockLinearization>,
}

/// A two-class model whose trainable parameters are partitioned into linear
/// blocks. Curvature estimation and the linearized predictive work on any
/// implementor.
pub trait LinearizedClassifier: Sync {
    type Input: ?Sized + Sync;

    fn param_count(&self) -> usize;

    fn params(&self) -> Vec<f64>;

    /// Blocks in parameter order, covering every parameter exactly once.
    fn linear_blocks(&self) -> Vec<LinearBlock>;

    fn eval_logits(&self, x: &Self::Input) -> Result<[f64; 2]>;

    fn linearize(&self, x: &Self::Input) -> Result<LogitLinearization>;
}

/// Single linear layer `logits = W·x + b` with trainable `W` (2 × d) and a
/// frozen bias. Small enough for exact dense curvature checks.
#[derive(Clone, Debug)]
pub struct LinearClassifier {
    pub weight: Matrix,
    pub bias: [f64; 2],
}

impl LinearClassifier {
    pub fn new(weight: Matrix, bias: [f64; 2]) -> Result<Self> {
        if weight.rows() != 2 {
            return Err(Error::invalid("linear classifier needs exactly two output rows"));
        }
        Ok(Self { weight, bias })
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.weight.cols() {
            return Err(Error::invalid(format!(
                "input length {} does not match width {}",
                x.len(),
                self.weight.cols()
            )));
        }
        Ok(())
    }
}

impl LinearizedClassifier for LinearClassifier {
    type Input = [f64];

    fn param_count(&self) -> usize {
        self.weight.as_slice().len()
    }

    fn params(&self) -> Vec<f64> {
        self.weight.as_slice().to_vec()
    }

    fn linear_blocks(&self) -> Vec<LinearBlock> {
        vec![LinearBlock {
            name: "linear".into(),
            offset: 0,
            out_dim: 2,
            in_dim: self.weight.cols(),
        }]
    }

    fn eval_logits(&self, x: &[f64]) -> Result<[f64; 2]> {
        self.check(x)?;
        let l = self.weight.matvec(x)?;
        Ok([l[0] + self.bias[0], l[1] + self.bias[1]])
    }

    fn linearize(&self, x: &[f64]) -> Result<LogitLinearization> {
        let logits = self.eval_logits(x)?;
        let d = x.len();
        let mut j0 = vec![0.0; 2 * d];
        let mut j1 = vec![0.0; 2 * d];
        j0[..d].copy_from_slice(x);
        j1[d..].copy_from_slice(x);
        Ok(LogitLinearization {
            logits,
            jacobian: [j0, j1],
            blocks: vec![BlockLinearization {
                activations: Matrix::from_vec(1, d, x.to_vec())?,
                output_grads: [
                    Matrix::from_vec(1, 2, vec![1.0, 0.0])?,
                    Matrix::from_vec(1, 2, vec![0.0, 1.0])?,
                ],
            }],
        })
    }
}
