//! Post-hoc Laplace approximation over the adapter weights.
//!
//! The Fisher is approximated block-diagonally, one block per LoRA matrix,
//! each block a Kronecker product of a gradient factor and an activation
//! factor. With parameters stored row-major (`W[o][i]` at `o·in + i`) the
//! per-example weight gradient is `g ⊗ a`, so a block is reconstructed as
//! `kron(grad_factor, act_factor) / N`, where both factors hold sums over the
//! `N` datapoints. Sequence positions follow the "expand" convention: the
//! activation factor averages `a aᵀ` over positions and the gradient factor
//! sums `g gᵀ`, which is exact for a single position.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio::{read_json, write_json};
use crate::model::{check_header, LinearBlock, LinearizedClassifier, LogitLinearization, CHECKPOINT_VERSION};
use crate::numerics::{low_rank_update, softmax, symmetric_eigen, truncated_svd, Matrix};

pub const DEFAULT_PRIOR_PRECISION: f64 = 0.1;
pub const DEFAULT_COMPRESSION_BUDGET: usize = 10;
pub const DEFAULT_WIDTH_THRESHOLD: usize = 64;
const FISHER_DIM_GUARD: usize = 2000;
const PSD_TOL: f64 = 1e-6;
const POSTERIOR_FORMAT: &str = "uqlora-posterior";

/// A symmetric PSD factor, stored densely or as `L` with `M ≈ L·Lᵀ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FactorMatrix {
    Dense(Matrix),
    LowRank(Matrix),
}

impl FactorMatrix {
    pub fn dim(&self) -> usize {
        match self {
            FactorMatrix::Dense(m) | FactorMatrix::LowRank(m) => m.rows(),
        }
    }

    pub fn is_compressed(&self) -> bool {
        matches!(self, FactorMatrix::LowRank(_))
    }

    pub fn to_dense(&self) -> Matrix {
        match self {
            FactorMatrix::Dense(m) => m.clone(),
            FactorMatrix::LowRank(l) => l.matmul_transposed(l),
        }
    }

    pub fn trace(&self) -> f64 {
        match self {
            FactorMatrix::Dense(m) => m.trace(),
            FactorMatrix::LowRank(l) => l.as_slice().iter().map(|v| v * v).sum(),
        }
    }

    /// Eigenpairs with non-negligible support; dense factors give a full basis.
    fn eigen(&self) -> Result<(Vec<f64>, Matrix)> {
        match self {
            FactorMatrix::Dense(m) => {
                let e = symmetric_eigen(m)?;
                let floor = -PSD_TOL * m.max_abs().max(1.0);
                if let Some(&min) = e.values.last() {
                    if min < floor {
                        return Err(Error::computation(format!(
                            "Kronecker factor has eigenvalue {min:e} below the PSD floor"
                        )));
                    }
                }
                Ok((e.values.iter().map(|v| v.max(0.0)).collect(), e.vectors))
            }
            FactorMatrix::LowRank(l) => {
                if l.cols() == 0 {
                    return Ok((Vec::new(), Matrix::zeros(l.rows(), 0)));
                }
                let svd = truncated_svd(l, l.cols().min(l.rows()))?;
                Ok((svd.s.iter().map(|s| s * s).collect(), svd.u))
            }
        }
    }
}

/// Kronecker factors for one linear block of the parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KfacFactor {
    pub layer_id: usize,
    pub name: String,
    pub offset: usize,
    pub out_dim: usize,
    pub in_dim: usize,
    /// Σₙ (1/Tₙ) Σₜ a aᵀ, `in_dim × in_dim`.
    pub act_factor: FactorMatrix,
    /// Σₙ Σ_c p(c|xₙ) Σₜ g_c g_cᵀ, `out_dim × out_dim`.
    pub grad_factor: FactorMatrix,
    pub sample_count: usize,
}

impl KfacFactor {
    pub fn len(&self) -> usize {
        self.out_dim * self.in_dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Dense `kron(grad, act) / N`; zero when no samples were seen.
    pub fn reconstruct(&self) -> Matrix {
        if self.sample_count == 0 {
            return Matrix::zeros(self.len(), self.len());
        }
        self.grad_factor
            .to_dense()
            .kron(&self.act_factor.to_dense())
            .scale(1.0 / self.sample_count as f64)
    }

    pub fn kfac_trace(&self) -> f64 {
        if self.sample_count == 0 {
            return 0.0;
        }
        self.grad_factor.trace() * self.act_factor.trace() / self.sample_count as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KfacOptions {
    /// Rank kept for factors wider than `width_threshold`; `None` keeps all dense.
    pub compression_budget: Option<usize>,
    pub width_threshold: usize,
}

impl Default for KfacOptions {
    fn default() -> Self {
        Self {
            compression_budget: Some(DEFAULT_COMPRESSION_BUDGET),
            width_threshold: DEFAULT_WIDTH_THRESHOLD,
        }
    }
}

/// Score-function directions `g_c = ∇ log p(c) = Σ_k (δ_ck − p_k)·∇f_k`
/// applied to per-logit quantities.
fn score_weights(p: &[f64]) -> [[f64; 2]; 2] {
    [[1.0 - p[0], -p[1]], [-p[0], 1.0 - p[1]]]
}

enum Accumulator {
    Dense(Matrix),
    Streaming {
        factor: Matrix,
        pending: Vec<Vec<f64>>,
        budget: usize,
    },
}

impl Accumulator {
    fn new(dim: usize, options: &KfacOptions) -> Self {
        match options.compression_budget {
            Some(budget) if dim > options.width_threshold => Accumulator::Streaming {
                factor: Matrix::zeros(dim, 0),
                pending: Vec::new(),
                budget,
            },
            _ => Accumulator::Dense(Matrix::zeros(dim, dim)),
        }
    }

    /// Adds `w · Σ_rows rowᵀrow` for the rows of `m`.
    fn add_rows(&mut self, m: &Matrix, w: f64) -> Result<()> {
        if w == 0.0 {
            return Ok(());
        }
        match self {
            Accumulator::Dense(acc) => {
                acc.add_assign_scaled(&m.transpose_matmul(m), w);
                Ok(())
            }
            Accumulator::Streaming {
                factor,
                pending,
                budget,
            } => {
                let s = w.sqrt();
                for r in 0..m.rows() {
                    pending.push(m.row(r).iter().map(|v| v * s).collect());
                }
                // Re-truncate once a full batch of new directions is buffered.
                if pending.len() >= factor.rows() {
                    *factor = flush(factor, pending, *budget)?;
                }
                Ok(())
            }
        }
    }

    fn finish(self) -> Result<FactorMatrix> {
        match self {
            Accumulator::Dense(mut m) => {
                m.symmetrize();
                Ok(FactorMatrix::Dense(m))
            }
            Accumulator::Streaming {
                factor,
                mut pending,
                budget,
            } => Ok(FactorMatrix::LowRank(flush(&factor, &mut pending, budget)?)),
        }
    }
}

fn flush(factor: &Matrix, pending: &mut Vec<Vec<f64>>, budget: usize) -> Result<Matrix> {
    if pending.is_empty() {
        return Ok(factor.clone());
    }
    let n = factor.rows();
    let mut cols = Matrix::zeros(n, pending.len());
    for (j, c) in pending.iter().enumerate() {
        cols.set_col(j, c);
    }
    pending.clear();
    low_rank_update(factor, &cols, budget)
}

struct BlockAccumulator {
    act: Accumulator,
    grad: Accumulator,
}

/// K-FAC factors for every linear block of `model`, with the expectation over
/// the model's own predictive distribution taken exactly over both classes.
pub fn accumulate_kfac<M, I>(model: &M, inputs: &[I], options: &KfacOptions) -> Result<Vec<KfacFactor>>
where
    M: LinearizedClassifier,
    I: AsRef<M::Input>,
{
    if inputs.is_empty() {
        return Err(Error::invalid("K-FAC accumulation needs at least one datapoint"));
    }
    if options.compression_budget == Some(0) {
        return Err(Error::invalid("compression budget must be at least 1"));
    }
    let blocks = model.linear_blocks();
    let mut accs: Vec<BlockAccumulator> = blocks
        .iter()
        .map(|b| BlockAccumulator {
            act: Accumulator::new(b.in_dim, options),
            grad: Accumulator::new(b.out_dim, options),
        })
        .collect();
    for x in inputs {
        let lin = model.linearize(x.as_ref())?;
        check_linearization(&lin, &blocks)?;
        let p = softmax(&lin.logits);
        let weights = score_weights(&p);
        for (acc, bl) in accs.iter_mut().zip(&lin.blocks) {
            let t = bl.activations.rows();
            if t == 0 {
                continue;
            }
            acc.act.add_rows(&bl.activations, 1.0 / t as f64)?;
            for (c, w) in weights.iter().enumerate() {
                let mut g = bl.output_grads[0].scale(w[0]);
                g.add_assign_scaled(&bl.output_grads[1], w[1]);
                acc.grad.add_rows(&g, p[c])?;
            }
        }
    }
    blocks
        .into_iter()
        .zip(accs)
        .enumerate()
        .map(|(layer_id, (b, acc))| {
            Ok(KfacFactor {
                layer_id,
                name: b.name,
                offset: b.offset,
                out_dim: b.out_dim,
                in_dim: b.in_dim,
                act_factor: acc.act.finish()?,
                grad_factor: acc.grad.finish()?,
                sample_count: inputs.len(),
            })
        })
        .collect()
}

fn check_linearization(lin: &LogitLinearization, blocks: &[LinearBlock]) -> Result<()> {
    if lin.blocks.len() != blocks.len() {
        return Err(Error::computation("linearization block count does not match the model"));
    }
    Ok(())
}

/// Dense Fisher `Σₙ Σ_c p(c|xₙ) g gᵀ` with `g = ∇_θ log p(c|xₙ)`.
pub fn fisher_bruteforce<M, I>(model: &M, inputs: &[I]) -> Result<Matrix>
where
    M: LinearizedClassifier,
    I: AsRef<M::Input>,
{
    let dim = model.param_count();
    if dim > FISHER_DIM_GUARD {
        return Err(Error::invalid(format!(
            "dense Fisher over {dim} parameters exceeds the {FISHER_DIM_GUARD} guard"
        )));
    }
    let mut f = Matrix::zeros(dim, dim);
    for x in inputs {
        let lin = model.linearize(x.as_ref())?;
        let p = softmax(&lin.logits);
        for (c, w) in score_weights(&p).iter().enumerate() {
            let g: Vec<f64> = lin.jacobian[0]
                .iter()
                .zip(&lin.jacobian[1])
                .map(|(j0, j1)| w[0] * j0 + w[1] * j1)
                .collect();
            f.add_outer(&g, p[c]);
        }
    }
    f.symmetrize();
    Ok(f)
}

/// Per-block traces of the K-FAC reconstruction against the exact Fisher.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceGap {
    pub name: String,
    pub kfac_trace: f64,
    pub exact_trace: f64,
}

impl TraceGap {
    /// `kfac / exact`; 1 when both vanish.
    pub fn ratio(&self) -> f64 {
        if self.exact_trace == 0.0 {
            if self.kfac_trace == 0.0 {
                1.0
            } else {
                f64::INFINITY
            }
        } else {
            self.kfac_trace / self.exact_trace
        }
    }
}

/// Trace of every exact Fisher block (no dense matrix needed) next to the
/// trace of its K-FAC reconstruction.
pub fn kfac_trace_gap<M, I>(model: &M, inputs: &[I], factors: &[KfacFactor]) -> Result<Vec<TraceGap>>
where
    M: LinearizedClassifier,
    I: AsRef<M::Input>,
{
    let mut exact = vec![0.0; factors.len()];
    for x in inputs {
        let lin = model.linearize(x.as_ref())?;
        let p = softmax(&lin.logits);
        for (c, w) in score_weights(&p).iter().enumerate() {
            for (e, f) in exact.iter_mut().zip(factors) {
                let r = f.offset..f.offset + f.len();
                let sq: f64 = lin.jacobian[0][r.clone()]
                    .iter()
                    .zip(&lin.jacobian[1][r])
                    .map(|(a, b)| (w[0] * a + w[1] * b).powi(2))
                    .sum();
                *e += p[c] * sq;
            }
        }
    }
    Ok(factors
        .iter()
        .zip(exact)
        .map(|(f, exact_trace)| TraceGap {
            name: f.name.clone(),
            kfac_trace: f.kfac_trace(),
            exact_trace,
        })
        .collect())
}

/// Eigenbases of both Kronecker sides of one block.
#[derive(Clone, Debug)]
struct BlockEigen {
    offset: usize,
    out_dim: usize,
    in_dim: usize,
    grad_values: Vec<f64>,
    grad_vectors: Matrix,
    act_values: Vec<f64>,
    act_vectors: Matrix,
    inv_n: f64,
}

/// Gaussian posterior `N(θ_MAP, H⁻¹)` with `H = F_kfac + λI`.
#[derive(Clone, Debug)]
pub struct LaplacePosterior {
    map_estimate: Vec<f64>,
    factors: Vec<KfacFactor>,
    prior_precision: f64,
    eigen: Vec<BlockEigen>,
}

pub fn posterior_from_factors(
    map_estimate: Vec<f64>,
    factors: Vec<KfacFactor>,
    prior_precision: f64,
) -> Result<LaplacePosterior> {
    if !(prior_precision.is_finite() && prior_precision > 0.0) {
        return Err(Error::invalid("prior precision must be positive"));
    }
    if !map_estimate.iter().all(|v| v.is_finite()) {
        return Err(Error::invalid("MAP estimate has non-finite entries"));
    }
    if !factors.is_empty() {
        let mut expected = 0;
        for f in &factors {
            if f.offset != expected {
                return Err(Error::invalid(format!(
                    "factor {} does not start at parameter {expected}",
                    f.name
                )));
            }
            if f.act_factor.dim() != f.in_dim || f.grad_factor.dim() != f.out_dim {
                return Err(Error::invalid(format!(
                    "factor {} has mismatched side dimensions",
                    f.name
                )));
            }
            expected += f.len();
        }
        if expected != map_estimate.len() {
            return Err(Error::invalid(format!(
                "factors cover {expected} parameters but the MAP estimate has {}",
                map_estimate.len()
            )));
        }
    }
    let eigen = factors
        .iter()
        .map(|f| {
            let (grad_values, grad_vectors) = f.grad_factor.eigen()?;
            let (act_values, act_vectors) = f.act_factor.eigen()?;
            Ok(BlockEigen {
                offset: f.offset,
                out_dim: f.out_dim,
                in_dim: f.in_dim,
                grad_values,
                grad_vectors,
                act_values,
                act_vectors,
                inv_n: if f.sample_count == 0 {
                    0.0
                } else {
                    1.0 / f.sample_count as f64
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LaplacePosterior {
        map_estimate,
        factors,
        prior_precision,
        eigen,
    })
}

impl LaplacePosterior {
    pub fn map_estimate(&self) -> &[f64] {
        &self.map_estimate
    }

    pub fn factors(&self) -> &[KfacFactor] {
        &self.factors
    }

    pub fn prior_precision(&self) -> f64 {
        self.prior_precision
    }

    pub fn dim(&self) -> usize {
        self.map_estimate.len()
    }

    pub fn sample_count(&self) -> usize {
        self.factors.first().map_or(0, |f| f.sample_count)
    }

    /// `H⁻¹ v`, block by block. Within a block with eigenbases `Q_G`, `Q_A`:
    /// `H⁻¹V = V/λ + Q_G [C ⊙ (1/(γαᵀ/N + λ) − 1/λ)] Q_Aᵀ`, `C = Q_Gᵀ V Q_A`,
    /// which stays exact when either basis covers only part of the space.
    pub fn apply_inverse(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(Error::invalid(format!(
                "vector of length {} does not match posterior dimension {}",
                v.len(),
                self.dim()
            )));
        }
        let lam = self.prior_precision;
        let mut out: Vec<f64> = v.iter().map(|x| x / lam).collect();
        for e in &self.eigen {
            let len = e.out_dim * e.in_dim;
            let block = Matrix::from_vec(e.out_dim, e.in_dim, v[e.offset..e.offset + len].to_vec())?;
            let mut c = e.grad_vectors.transpose_matmul(&block).matmul_unchecked(&e.act_vectors);
            for (i, &g) in e.grad_values.iter().enumerate() {
                for (j, &a) in e.act_values.iter().enumerate() {
                    let h = g * a * e.inv_n + lam;
                    c[(i, j)] *= 1.0 / h - 1.0 / lam;
                }
            }
            let correction = e.grad_vectors.matmul_unchecked(&c).matmul_transposed(&e.act_vectors);
            for (o, d) in out[e.offset..e.offset + len].iter_mut().zip(correction.as_slice()) {
                *o += d;
            }
        }
        Ok(out)
    }

    /// Dense precision `H` (small models only).
    pub fn precision_dense(&self) -> Result<Matrix> {
        let n = self.dim();
        if n > FISHER_DIM_GUARD {
            return Err(Error::invalid("dense precision exceeds the dimension guard"));
        }
        let mut h = Matrix::identity(n).scale(self.prior_precision);
        for f in &self.factors {
            let block = f.reconstruct();
            for i in 0..f.len() {
                for j in 0..f.len() {
                    h[(f.offset + i, f.offset + j)] += block[(i, j)];
                }
            }
        }
        Ok(h)
    }

    /// Dense `H⁻¹` assembled column by column from [`Self::apply_inverse`].
    pub fn covariance_dense(&self) -> Result<Matrix> {
        let n = self.dim();
        if n > FISHER_DIM_GUARD {
            return Err(Error::invalid("dense covariance exceeds the dimension guard"));
        }
        let mut cov = Matrix::zeros(n, n);
        let mut e = vec![0.0; n];
        for j in 0..n {
            e[j] = 1.0;
            cov.set_col(j, &self.apply_inverse(&e)?);
            e[j] = 0.0;
        }
        Ok(cov)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &PosteriorCheckpoint::from_posterior(self))
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json::<PosteriorCheckpoint>(path)?.into_posterior()
    }
}

/// Serialized posterior; eigenbases are recomputed on load.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PosteriorCheckpoint {
    pub format: String,
    pub version: u32,
    pub prior_precision: f64,
    pub sample_count: usize,
    pub map_estimate: Vec<f64>,
    pub factors: Vec<KfacFactor>,
}

impl PosteriorCheckpoint {
    pub fn from_posterior(p: &LaplacePosterior) -> Self {
        Self {
            format: POSTERIOR_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            prior_precision: p.prior_precision,
            sample_count: p.sample_count(),
            map_estimate: p.map_estimate.clone(),
            factors: p.factors.clone(),
        }
    }

    pub fn into_posterior(self) -> Result<LaplacePosterior> {
        check_header(&self.format, POSTERIOR_FORMAT, self.version)?;
        posterior_from_factors(self.map_estimate, self.factors, self.prior_precision)
    }
}

/// Fits the posterior of `model` on `inputs` in one step.
pub fn fit_laplace<M, I>(
    model: &M,
    inputs: &[I],
    prior_precision: f64,
    options: &KfacOptions,
) -> Result<LaplacePosterior>
where
    M: LinearizedClassifier,
    I: AsRef<M::Input>,
{
    let factors = accumulate_kfac(model, inputs, options)?;
    posterior_from_factors(model.params(), factors, prior_precision)
}
