//! LoRA fine-tuning: cross-entropy, adapter-only backpropagation and AdamW
//! with decoupled weight decay (the Gaussian prior of the MAP objective).

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data::EncodedExample;
use crate::error::{Error, Result};
use crate::laplace::DEFAULT_PRIOR_PRECISION;
use crate::model::{FrozenBackbone, LoraModel, Mode, DEFAULT_ALPHA, DEFAULT_DROPOUT};
use crate::numerics::{softmax, RandomStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// λ/2 for prior precision λ.
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            epochs: 4,
            batch_size: 4,
            weight_decay: DEFAULT_PRIOR_PRECISION / 2.0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.learning_rate) || !positive(self.epsilon) {
            return Err(Error::invalid("learning rate and epsilon must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::invalid("weight decay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch size must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        Self {
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
        }
    }
}

/// `−log softmax(logits)[label]`.
pub fn cross_entropy(logits: [f64; 2], label: u8) -> Result<f64> {
    if !logits.iter().all(|l| l.is_finite()) {
        return Err(Error::computation(format!("non-finite logits {logits:?}")));
    }
    if label > 1 {
        return Err(Error::invalid(format!("label {label} outside {{0, 1}}")));
    }
    let max = logits[0].max(logits[1]);
    let lse = max + ((logits[0] - max).exp() + (logits[1] - max).exp()).ln();
    Ok(lse - logits[label as usize])
}

/// Mean batch loss and its gradient with respect to the adapter parameters.
pub fn batch_gradient(model: &LoraModel, batch: &[EncodedExample], mut mode: Mode<'_>) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; model.num_params()];
    let mut loss = 0.0;
    for ex in batch {
        let m = match &mut mode {
            Mode::Eval => Mode::Eval,
            Mode::Train(s) => Mode::Train(s),
        };
        let cache = model.forward_cached(&ex.tokens, m)?;
        let logits = cache.logits();
        loss += cross_entropy(logits, ex.label)?;
        let p = softmax(&logits);
        let mut dl = [p[0], p[1]];
        dl[ex.label as usize] -= 1.0;
        for (g, v) in grad.iter_mut().zip(model.backward(&cache, dl, None)) {
            *g += scale * v;
        }
    }
    Ok((loss * scale, grad))
}

/// AdamW with bias correction; decay multiplies parameters by
/// `1 − lr·weight_decay` before the adaptive step.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, config: &TrainConfig) -> Result<()> {
    let n = params.len();
    if grads.len() != n || state.first_moment.len() != n || state.second_moment.len() != n {
        return Err(Error::invalid("parameter, gradient and moment lengths differ"));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let decay = 1.0 - config.learning_rate * config.weight_decay;
    for i in 0..n {
        let g = grads[i];
        let m = b1 * state.first_moment[i] + (1.0 - b1) * g;
        let v = b2 * state.second_moment[i] + (1.0 - b2) * g * g;
        state.first_moment[i] = m;
        state.second_moment[i] = v;
        let update = (m / c1) / ((v / c2).sqrt() + config.epsilon);
        params[i] = params[i] * decay - config.learning_rate * update;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: LoraModel,
    pub loss_log: Vec<LossRecord>,
}

impl TrainOutcome {
    pub fn epoch_mean_loss(&self, epoch: usize) -> Option<f64> {
        let v: Vec<f64> = self
            .loss_log
            .iter()
            .filter(|r| r.epoch == epoch)
            .map(|r| r.loss)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Adapter hyperparameters shared by every adapted projection.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: DEFAULT_ALPHA,
            dropout: DEFAULT_DROPOUT,
        }
    }
}

/// Fresh adapters drawn from the first sub-stream of `seed`; the remaining
/// sub-streams drive shuffling and dropout in [`train_lora`].
pub fn init_lora_model(
    backbone: Arc<FrozenBackbone>,
    rank: usize,
    alpha: f64,
    dropout: f64,
    seed: u64,
) -> Result<LoraModel> {
    LoraModel::new(backbone, rank, alpha, dropout, &mut RandomStream::new(seed).fork(0))
}

/// Initializes adapters from `seed` and trains them with `config.seed = seed`.
pub fn train_from_seed(
    backbone: Arc<FrozenBackbone>,
    lora: &LoraConfig,
    train_set: &[EncodedExample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let model = init_lora_model(backbone, lora.rank, lora.alpha, lora.dropout, seed)?;
    train_lora(&model, train_set, &TrainConfig { seed, ..config.clone() })
}

/// Minibatch AdamW over `epochs` full reshuffles of the training set.
/// Loss records are numbered by epoch (from 1) and global step (from 1).
pub fn train_lora(model: &LoraModel, train_set: &[EncodedExample], config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::invalid("empty training set"));
    }
    let root = RandomStream::new(config.seed);
    let mut shuffle = root.fork(1);
    let mut dropout = root.fork(2);
    let mut model = model.clone();
    let mut params = model.flatten_params();
    let mut state = OptimizerState::new(params.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut loss_log = Vec::with_capacity(config.epochs * train_set.len().div_ceil(config.batch_size));
    let mut batch = Vec::with_capacity(config.batch_size);
    for epoch in 1..=config.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train_set[i].clone()));
            let (loss, grad) = batch_gradient(&model, &batch, Mode::Train(&mut dropout))?;
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::computation(format!(
                    "non-finite loss or gradient at epoch {epoch}"
                )));
            }
            adamw_step(&mut params, &grad, &mut state, config)?;
            model.unflatten_params(&params)?;
            loss_log.push(LossRecord {
                epoch,
                step: loss_log.len() + 1,
                loss,
            });
        }
    }
    Ok(TrainOutcome { model, loss_log })
}

pub fn loss_log_csv(log: &[LossRecord]) -> String {
    let mut out = String::from("epoch,step,loss\n");
    for r in log {
        let _ = writeln!(out, "{},{},{}", r.epoch, r.step, r.loss);
    }
    out
}

pub fn write_loss_log(log: &[LossRecord], path: &Path) -> Result<()> {
    crate::fsio::write_text(path, &loss_log_csv(log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_backbone, BackboneConfig};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cross_entropy_examples() {
        assert!(close(
            cross_entropy([0.0, 0.0], 0).unwrap(),
            std::f64::consts::LN_2,
            1e-15
        ));
        assert!(close(
            cross_entropy([0.0, 0.0], 1).unwrap(),
            std::f64::consts::LN_2,
            1e-15
        ));
        assert!(cross_entropy([30.0, -30.0], 0).unwrap() < 1e-10);
        let expected = 2.0 + (1.0 + (-2.0f64).exp()).ln();
        assert!(close(cross_entropy([1.0, -1.0], 1).unwrap(), expected, 1e-14));
        assert!(close(expected, 2.126928, 1e-6));
        assert!(matches!(cross_entropy([f64::NAN, 0.0], 0), Err(Error::Computation(_))));
        assert!(cross_entropy([800.0, -800.0], 1).unwrap().is_finite());
    }

    #[test]
    fn adamw_examples() {
        let cfg = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0, -2.0];
        let mut st = OptimizerState::new(2);
        adamw_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut p = vec![0.0];
        let mut st = OptimizerState::new(1);
        adamw_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        assert!(close(p[0], -0.1 / (1.0 + 1e-8), 1e-15));
        assert_eq!(st.step, 1);

        let decay = TrainConfig {
            learning_rate: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut p = vec![1.0];
        adamw_step(&mut p, &[0.0], &mut OptimizerState::new(1), &decay).unwrap();
        assert!(close(p[0], 0.95, 1e-15));
        assert!(adamw_step(&mut p, &[0.0, 1.0], &mut OptimizerState::new(1), &decay).is_err());
    }

    #[test]
    fn pure_decay_is_geometric() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.3, -1.2, 2.0];
        let mut st = OptimizerState::new(3);
        let mut prev = p.iter().map(|v| v * v).sum::<f64>();
        for _ in 0..10 {
            adamw_step(&mut p, &[0.0; 3], &mut st, &cfg).unwrap();
            let norm = p.iter().map(|v| v * v).sum::<f64>();
            assert!(norm < prev);
            prev = norm;
        }
    }

    fn tiny_model() -> LoraModel {
        let mut cfg = BackboneConfig::new(41, 8, 2, 1);
        cfg.max_seq_len = 8;
        let bb = Arc::new(init_backbone(&cfg, 2).unwrap());
        init_lora_model(bb, 2, 4.0, 0.05, 3).unwrap()
    }

    fn ex(tokens: Vec<u32>, label: u8) -> EncodedExample {
        EncodedExample { tokens, label }
    }

    #[test]
    fn duplicated_example_has_same_gradient() {
        let mut model = tiny_model();
        let p: Vec<f64> = (0..model.num_params()).map(|i| 0.01 * (i as f64).sin()).collect();
        model.unflatten_params(&p).unwrap();
        let e = ex(vec![1, 5, 6, 2, 7, 2, 0, 0], 1);
        let (l1, g1) = batch_gradient(&model, std::slice::from_ref(&e), Mode::Eval).unwrap();
        let (l2, g2) = batch_gradient(&model, &[e.clone(), e], Mode::Eval).unwrap();
        assert!(close(l1, l2, 1e-15));
        for (a, b) in g1.iter().zip(&g2) {
            assert!(close(*a, *b, 1e-15));
        }
        assert!(batch_gradient(&model, &[], Mode::Eval).is_err());
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let mut model = tiny_model();
        let mut rng = RandomStream::new(8);
        let p: Vec<f64> = (0..model.num_params()).map(|_| 0.2 * rng.standard_normal()).collect();
        model.unflatten_params(&p).unwrap();
        let batch: Vec<_> = (0..4)
            .map(|i| ex((0..8).map(|_| 1 + rng.below(40) as u32).collect(), (i % 2) as u8))
            .collect();
        let (_, grad) = batch_gradient(&model, &batch, Mode::Eval).unwrap();
        let loss_at = |params: &[f64]| {
            let mut m = model.clone();
            m.unflatten_params(params).unwrap();
            batch_gradient(&m, &batch, Mode::Eval).unwrap().0
        };
        for _ in 0..20 {
            let i = rng.below(p.len());
            let mut up = p.clone();
            up[i] += 1e-4;
            let mut down = p.clone();
            down[i] -= 1e-4;
            let fd = (loss_at(&up) - loss_at(&down)) / 2e-4;
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-7);
            assert!(rel < 1e-3, "coordinate {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn training_is_deterministic_and_leaves_backbone() {
        let model = tiny_model();
        let before = model.backbone().weights_snapshot();
        let data: Vec<_> = (0..10)
            .map(|i| ex(vec![1, 4 + i, 2, 5 + i, 2, 0, 0, 0], (i % 2) as u8))
            .collect();
        let cfg = TrainConfig {
            batch_size: 3,
            epochs: 2,
            learning_rate: 1e-2,
            seed: 4,
            ..TrainConfig::default()
        };
        let a = train_lora(&model, &data, &cfg).unwrap();
        let b = train_lora(&model, &data, &cfg).unwrap();
        assert_eq!(a.model.flatten_params(), b.model.flatten_params());
        assert_eq!(a.loss_log.len(), 2 * 4);
        assert!(a.loss_log.iter().all(|r| r.loss.is_finite()));
        assert_eq!(a.model.backbone().weights_snapshot(), before);
        assert_ne!(a.model.flatten_params(), model.flatten_params());
        let csv = loss_log_csv(&a.loss_log);
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.starts_with("epoch,step,loss\n1,1,"));
    }

    #[test]
    fn separable_data_loss_decreases() {
        let mut cfg = BackboneConfig::new(41, 16, 2, 1);
        cfg.max_seq_len = 6;
        let bb = Arc::new(init_backbone(&cfg, 5).unwrap());
        let model = init_lora_model(bb, 4, 32.0, 0.05, 1).unwrap();
        let mut rng = RandomStream::new(2);
        // Label is decided by which of two disjoint token ranges fills the pair.
        let data: Vec<_> = (0..200)
            .map(|i| {
                let label = (i % 2) as u8;
                let base = if label == 1 { 4 } else { 20 };
                let mut t = vec![1];
                t.push(base + rng.below(10) as u32);
                t.push(2);
                t.push(base + rng.below(10) as u32);
                t.push(2);
                t.push(0);
                ex(t, label)
            })
            .collect();
        let out = train_lora(
            &model,
            &data,
            &TrainConfig {
                seed: 3,
                ..TrainConfig::default()
            },
        )
        .unwrap();
        let first = out.epoch_mean_loss(1).unwrap();
        let last = out.epoch_mean_loss(4).unwrap();
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn rejects_bad_inputs() {
        let model = tiny_model();
        let data = vec![ex(vec![1, 4, 2, 5, 2], 0)];
        let zero_epochs = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train_lora(&model, &data, &zero_epochs),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            train_lora(&model, &[], &TrainConfig::default()),
            Err(Error::InvalidInput(_))
        ));
    }
}
