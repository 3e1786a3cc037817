//! Linearized Gaussian predictive at the MAP: logit Jacobians, the logit
//! covariance `Λ = Jᵀ H⁻¹ J`, Cholesky sampling and Bayesian model averaging.

use crate::error::{Error, Result};
use crate::laplace::LaplacePosterior;
use crate::model::LinearizedClassifier;
use crate::numerics::{cholesky, gaussian_sample, softmax, Matrix, RandomStream};

pub const DEFAULT_SAMPLES: usize = 100;
const JITTER_START: f64 = 1e-10;
const JITTER_MAX: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveDistribution {
    pub mean_logits: [f64; 2],
    pub covariance: Matrix,
    /// Lower-triangular with `chol·cholᵀ = covariance + jitter·I`.
    pub chol: Matrix,
    pub jitter: f64,
}

/// Logits and the `params × 2` Jacobian; column `c` is ∇_θ f_c.
pub fn jacobian_logits<M: LinearizedClassifier>(model: &M, x: &M::Input) -> Result<([f64; 2], Matrix)> {
    let lin = model.linearize(x)?;
    let n = model.param_count();
    let mut j = Matrix::zeros(n, 2);
    for i in 0..n {
        j[(i, 0)] = lin.jacobian[0][i];
        j[(i, 1)] = lin.jacobian[1][i];
    }
    Ok((lin.logits, j))
}

/// Cholesky with a jitter ladder: `1e-10`, ×10 per retry, up to `1e-4`.
/// An exactly zero matrix yields a zero factor without jitter.
pub fn cholesky_with_jitter(s: &Matrix) -> Result<(Matrix, f64)> {
    if s.as_slice().iter().all(|&v| v == 0.0) {
        return Ok((Matrix::zeros(s.rows(), s.cols()), 0.0));
    }
    if let Ok(l) = cholesky(s) {
        return Ok((l, 0.0));
    }
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * (1.0 + 1e-9) {
        let shifted = s.add(&Matrix::identity(s.rows()).scale(jitter))?;
        if let Ok(l) = cholesky(&shifted) {
            return Ok((l, jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::computation(format!(
        "covariance not positive definite even with jitter {JITTER_MAX:e}"
    )))
}

pub fn predictive_distribution(
    mean_logits: [f64; 2],
    jacobian: &Matrix,
    posterior: &LaplacePosterior,
) -> Result<PredictiveDistribution> {
    if jacobian.shape() != (posterior.dim(), 2) {
        return Err(Error::invalid(format!(
            "Jacobian shape {:?} does not match posterior dimension {}",
            jacobian.shape(),
            posterior.dim()
        )));
    }
    let cols = [jacobian.col(0), jacobian.col(1)];
    let solved = [posterior.apply_inverse(&cols[0])?, posterior.apply_inverse(&cols[1])?];
    let mut cov = Matrix::zeros(2, 2);
    for a in 0..2 {
        for b in 0..2 {
            cov[(a, b)] = crate::numerics::dot(&cols[a], &solved[b]);
        }
    }
    cov.symmetrize();
    let (chol, jitter) = cholesky_with_jitter(&cov)?;
    Ok(PredictiveDistribution {
        mean_logits,
        covariance: cov,
        chol,
        jitter,
    })
}

/// `S` draws of `mean + L·z`, `z ~ N(0, I)`.
pub fn sample_logits(
    dist: &PredictiveDistribution,
    samples: usize,
    stream: &mut RandomStream,
) -> Result<Vec<[f64; 2]>> {
    if samples == 0 {
        return Err(Error::invalid("at least one predictive sample is required"));
    }
    let l = &dist.chol;
    Ok((0..samples)
        .map(|_| {
            let z = gaussian_sample(stream, 2);
            [
                dist.mean_logits[0] + l[(0, 0)] * z[0] + l[(0, 1)] * z[1],
                dist.mean_logits[1] + l[(1, 0)] * z[0] + l[(1, 1)] * z[1],
            ]
        })
        .collect())
}

/// Mean of the per-sample softmax vectors.
pub fn bma_probability(samples: &[[f64; 2]]) -> Result<[f64; 2]> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to average"));
    }
    let mut acc = [0.0; 2];
    for s in samples {
        let p = softmax(s);
        acc[0] += p[0];
        acc[1] += p[1];
    }
    let n = samples.len() as f64;
    Ok([acc[0] / n, acc[1] / n])
}

/// Bayesian prediction for one input.
#[derive(Clone, Debug, PartialEq)]
pub struct BayesPrediction {
    pub map_probs: [f64; 2],
    pub probs: [f64; 2],
    pub covariance: Matrix,
    pub jitter: f64,
}

/// Linearized-Laplace predictions; example `i` samples from a stream seeded
/// with `seed ^ i`, so results do not depend on evaluation order.
pub fn predict_bayesian<M, I>(
    model: &M,
    posterior: &LaplacePosterior,
    inputs: &[I],
    samples: usize,
    seed: u64,
) -> Result<Vec<BayesPrediction>>
where
    M: LinearizedClassifier,
    I: AsRef<M::Input>,
{
    if model.param_count() != posterior.dim() {
        return Err(Error::invalid("posterior dimension does not match the model"));
    }
    inputs
        .iter()
        .enumerate()
        .map(|(i, x)| {
            let (logits, j) = jacobian_logits(model, x.as_ref())?;
            let dist = predictive_distribution(logits, &j, posterior)?;
            let mut stream = RandomStream::new(seed ^ i as u64);
            let draws = sample_logits(&dist, samples, &mut stream)?;
            let map = softmax(&logits);
            Ok(BayesPrediction {
                map_probs: [map[0], map[1]],
                probs: bma_probability(&draws)?,
                covariance: dist.covariance,
                jitter: dist.jitter,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::sync::Arc;

    use nalgebra::DMatrix;

    use super::*;
    use crate::laplace::{fit_laplace, posterior_from_factors, KfacOptions};
    use crate::model::{init_backbone, BackboneConfig, LinearClassifier, LoraModel, Mode};

    fn toy_lora() -> LoraModel {
        let mut cfg = BackboneConfig::new(12, 4, 2, 1);
        cfg.max_seq_len = 6;
        let bb = Arc::new(init_backbone(&cfg, 2).unwrap());
        let mut rng = RandomStream::new(77);
        let mut m = LoraModel::new(bb, 1, 2.0, 0.0, &mut rng).unwrap();
        let p: Vec<f64> = m
            .flatten_params()
            .iter()
            .map(|v| v + 0.5 * rng.standard_normal())
            .collect();
        m.unflatten_params(&p).unwrap();
        m
    }

    fn dist(cov: [[f64; 2]; 2]) -> PredictiveDistribution {
        let c = Matrix::from_rows(&[cov[0].to_vec(), cov[1].to_vec()]).unwrap();
        let (chol, jitter) = cholesky_with_jitter(&c).unwrap();
        PredictiveDistribution {
            mean_logits: [0.5, -1.0],
            covariance: c,
            chol,
            jitter,
        }
    }

    #[test]
    fn jacobian_shape_and_finite_differences() {
        let model = toy_lora();
        let x = [1u32, 4, 7, 2, 9, 0];
        let (logits, j) = jacobian_logits(&model, &x[..]).unwrap();
        assert_eq!(j.shape(), (model.num_params(), 2));
        assert_eq!(logits, model.forward(&x, Mode::Eval, None).unwrap());
        let base = model.flatten_params();
        let mut rng = RandomStream::new(3);
        for _ in 0..20 {
            let i = rng.below(base.len());
            let mut probe = model.clone();
            let mut p = base.clone();
            p[i] += 1e-4;
            probe.unflatten_params(&p).unwrap();
            let up = probe.forward(&x, Mode::Eval, None).unwrap();
            p[i] -= 2e-4;
            probe.unflatten_params(&p).unwrap();
            let down = probe.forward(&x, Mode::Eval, None).unwrap();
            for c in 0..2 {
                let fd = (up[c] - down[c]) / 2e-4;
                let an = j[(i, c)];
                assert!((fd - an).abs() / fd.abs().max(an.abs()).max(1e-7) < 1e-3);
            }
        }
    }

    #[test]
    fn constant_logit_has_zero_column() {
        let w = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, -1.0]]).unwrap();
        let m = LinearClassifier::new(w, [0.0, 0.0]).unwrap();
        let (_, j) = jacobian_logits(&m, &[0.0, 0.0][..]).unwrap();
        assert_eq!(j, Matrix::zeros(4, 2));
    }

    #[test]
    fn zero_jacobian_is_degenerate() {
        let post = posterior_from_factors(vec![0.0; 4], Vec::new(), 0.1).unwrap();
        let d = predictive_distribution([1.0, 2.0], &Matrix::zeros(4, 2), &post).unwrap();
        assert_eq!(d.covariance, Matrix::zeros(2, 2));
        assert_eq!(d.jitter, 0.0);
        let s = sample_logits(&d, 50, &mut RandomStream::new(1)).unwrap();
        assert!(s.iter().all(|v| *v == [1.0, 2.0]));
    }

    #[test]
    fn prior_only_covariance_is_scaled_gram() {
        let mut rng = RandomStream::new(4);
        let j = Matrix::from_vec(6, 2, rng.gaussian(12)).unwrap();
        let post = posterior_from_factors(vec![0.0; 6], Vec::new(), 0.1).unwrap();
        let d = predictive_distribution([0.0, 0.0], &j, &post).unwrap();
        let expected = j.transpose_matmul(&j).scale(10.0);
        assert!(d.covariance.sub(&expected).unwrap().max_abs() < 1e-12);
    }

    #[test]
    fn covariance_matches_dense_oracle() {
        let model = toy_lora();
        let data: Vec<Vec<u32>> = vec![vec![1, 3, 5, 2, 6, 0], vec![1, 8, 2, 9, 4, 2], vec![1, 10, 11, 2, 0, 0]];
        let post = fit_laplace(&model, &data, 0.1, &KfacOptions::default()).unwrap();
        let h = post.precision_dense().unwrap();
        let h_inv = DMatrix::from_row_slice(h.rows(), h.cols(), h.as_slice())
            .try_inverse()
            .unwrap();
        let x = [1u32, 7, 3, 2, 5, 0];
        let (logits, j) = jacobian_logits(&model, &x[..]).unwrap();
        let jn = DMatrix::from_row_slice(j.rows(), 2, j.as_slice());
        let oracle = jn.transpose() * h_inv * &jn;
        let d = predictive_distribution(logits, &j, &post).unwrap();
        for a in 0..2 {
            for b in 0..2 {
                assert!((d.covariance[(a, b)] - oracle[(a, b)]).abs() <= 1e-8);
            }
        }
        let rec = d.chol.matmul_transposed(&d.chol);
        let shift = Matrix::identity(2).scale(d.jitter);
        assert!(rec.sub(&d.covariance.add(&shift).unwrap()).unwrap().max_abs() < 1e-9);
        // Scaling the Jacobian by √c scales Λ by c.
        let c: f64 = 3.0;
        let scaled = predictive_distribution(logits, &j.scale(c.sqrt()), &post).unwrap();
        for (a, b) in scaled.covariance.as_slice().iter().zip(d.covariance.as_slice()) {
            assert!((a - c * b).abs() <= 1e-10 * b.abs().max(1.0));
        }
    }

    #[test]
    fn sampled_covariance_matches() {
        let d = dist([[1.0, 0.0], [0.0, 4.0]]);
        let s = sample_logits(&d, 100_000, &mut RandomStream::new(11)).unwrap();
        let n = s.len() as f64;
        let mean = [
            s.iter().map(|v| v[0]).sum::<f64>() / n,
            s.iter().map(|v| v[1]).sum::<f64>() / n,
        ];
        for (a, b, target) in [(0, 0, 1.0), (0, 1, 0.0), (1, 1, 4.0)] {
            let c = s.iter().map(|v| (v[a] - mean[a]) * (v[b] - mean[b])).sum::<f64>() / (n - 1.0);
            assert!((c - target).abs() <= 0.05, "entry ({a},{b}) = {c}");
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let d = dist([[2.0, 0.5], [0.5, 1.0]]);
        let a = sample_logits(&d, 10, &mut RandomStream::new(5)).unwrap();
        let b = sample_logits(&d, 10, &mut RandomStream::new(5)).unwrap();
        assert_eq!(a, b);
        assert!(sample_logits(&d, 0, &mut RandomStream::new(5)).is_err());
    }

    #[test]
    fn jitter_ladder_rescues_semidefinite() {
        let c = Matrix::from_rows(&[vec![1.0, 1.0], vec![1.0, 1.0]]).unwrap();
        let (l, jitter) = cholesky_with_jitter(&c).unwrap();
        assert!((1e-10..=1e-4).contains(&jitter));
        assert!(l.matmul_transposed(&l).sub(&c).unwrap().max_abs() <= 2.0 * jitter);
        let bad = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_with_jitter(&bad), Err(Error::Computation(_))));
    }

    #[test]
    fn bma_examples() {
        let s = [[0.3, -0.4]];
        let p = softmax(&s[0]);
        assert_eq!(bma_probability(&s).unwrap(), [p[0], p[1]]);
        let t = 1.7;
        let sym = bma_probability(&[[t, -t], [-t, t]]).unwrap();
        assert!((sym[0] - 0.5).abs() < 1e-15 && (sym[1] - 0.5).abs() < 1e-15);
        let three = [[1.0, 0.0], [0.0, 2.0], [-1.0, 1.0]];
        let e = std::f64::consts::E;
        let hand = (e / (e + 1.0) + 1.0 / (1.0 + e * e) + 1.0 / (1.0 + e * e)) / 3.0;
        let got = bma_probability(&three).unwrap();
        assert!((got[0] - hand).abs() < 1e-15);
        assert!((got[0] + got[1] - 1.0).abs() < 1e-12);
        assert!(bma_probability(&[]).is_err());
    }

    #[test]
    fn bma_converges_with_sample_count() {
        let d = dist([[2.0, 0.3], [0.3, 1.5]]);
        let a = bma_probability(&sample_logits(&d, 10_000, &mut RandomStream::new(21)).unwrap()).unwrap();
        let b = bma_probability(&sample_logits(&d, 100_000, &mut RandomStream::new(22)).unwrap()).unwrap();
        assert!((a[0] - b[0]).abs() <= 0.01);
    }

    #[test]
    fn tiny_covariance_keeps_map_class() {
        let model = toy_lora();
        let post = posterior_from_factors(model.flatten_params(), Vec::new(), 1e12).unwrap();
        let inputs: Vec<Vec<u32>> = (1..8).map(|k| vec![1, k, 2, k + 3, 2, 0]).collect();
        let preds = predict_bayesian(&model, &post, &inputs, 50, 9).unwrap();
        for p in &preds {
            let eig_max = p.covariance.as_slice().iter().map(|v| v.abs()).sum::<f64>();
            assert!(eig_max <= 1e-6);
            assert_eq!(p.probs[1] >= 0.5, p.map_probs[1] >= 0.5);
        }
        let again = predict_bayesian(&model, &post, &inputs, 50, 9).unwrap();
        assert_eq!(preds, again);
    }
}
