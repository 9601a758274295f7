//! Minibatch Adam training of the LRCN against PCA-coefficient targets, and
//! a finite-difference gradient checker.

use std::ops::ControlFlow;
use std::time::Instant;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lrcn::{ArchSpec, LrcnModel, Mode};
use crate::real::Real;
use crate::sigproc::SpeedPatch;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetNormalization {
    Off,
    PerComponent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub target_normalization: TargetNormalization,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs: 1000,
            batch_size: 20,
            seed: 0,
            target_normalization: TargetNormalization::Off,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("beta1 and beta2 must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid("epsilon must be positive"));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::invalid("epochs and batch_size must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss of each completed epoch.
    pub epoch_losses: Vec<f64>,
    pub final_loss: f64,
    pub wall_time_s: f64,
    pub seed: u64,
    pub config: TrainConfig,
}

/// Affine map applied to targets before training and undone on prediction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetScaler {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl TargetScaler {
    pub fn identity(k: usize) -> Self {
        Self {
            mean: vec![0.0; k],
            scale: vec![1.0; k],
        }
    }

    /// Per-component standardisation; components with zero spread keep scale 1.
    pub fn fit(targets: &[Vec<f64>], mode: TargetNormalization) -> Result<Self> {
        let k = targets.first().map_or(0, Vec::len);
        if targets.iter().any(|t| t.len() != k) {
            return Err(Error::shape("targets have inconsistent lengths"));
        }
        if mode == TargetNormalization::Off {
            return Ok(Self::identity(k));
        }
        let n = targets.len() as f64;
        let mean: Vec<f64> = (0..k).map(|c| targets.iter().map(|t| t[c]).sum::<f64>() / n).collect();
        let scale = (0..k)
            .map(|c| {
                let var = targets.iter().map(|t| (t[c] - mean[c]).powi(2)).sum::<f64>() / n;
                if var > 0.0 {
                    var.sqrt()
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn apply(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| v * s + m).collect()
    }
}

/// Mean squared error over components and its gradient w.r.t. `y_pred`.
pub fn mse_loss(y_pred: &[f64], y_true: &[f64]) -> Result<(f64, Vec<f64>)> {
    if y_pred.len() != y_true.len() || y_pred.is_empty() {
        return Err(Error::shape(format!(
            "prediction has {} components, target {}",
            y_pred.len(),
            y_true.len()
        )));
    }
    let k = y_pred.len() as f64;
    let diff: Vec<f64> = y_pred.iter().zip(y_true).map(|(p, t)| p - t).collect();
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / k;
    Ok((loss, diff.into_iter().map(|d| 2.0 * d / k).collect()))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update. Rejects the whole step if any gradient
/// entry is non-finite, leaving parameters and state untouched.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::shape(format!(
            "{} parameters, {} gradients, {} optimizer slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if let Some(index) = grads.iter().position(|g| !g.to_f64().is_finite()) {
        return Err(Error::NonFinite {
            index,
            context: "gradient".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        let g = g.to_f64();
        *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
        *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
        let update = cfg.lr * (*m / c1) / ((*v / c2).sqrt() + cfg.epsilon);
        *p = T::from_f64(p.to_f64() - update);
    }
    Ok(())
}

pub struct TrainOutcome {
    pub model: LrcnModel<f32>,
    pub scaler: TargetScaler,
    pub report: TrainReport,
}

pub fn train(patches: &[SpeedPatch], targets: &[Vec<f64>], arch: &ArchSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(patches, targets, arch, config, |_, _| ControlFlow::Continue(()))
}

/// Like [`train`], calling `on_epoch(epoch, mean_loss)` after every epoch;
/// returning `Break` stops training after that epoch.
pub fn train_observed(
    patches: &[SpeedPatch],
    targets: &[Vec<f64>],
    arch: &ArchSpec,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    config.validate()?;
    arch.validate()?;
    if patches.is_empty() {
        return Err(Error::invalid("training needs at least one pair"));
    }
    if patches.len() != targets.len() {
        return Err(Error::shape(format!(
            "{} patches but {} targets",
            patches.len(),
            targets.len()
        )));
    }
    if targets.iter().any(|t| t.len() != arch.output_dim) {
        return Err(Error::shape(format!("targets must have {} components", arch.output_dim)));
    }
    let scaler = TargetScaler::fit(targets, config.target_normalization)?;
    let scaled: Vec<Vec<f64>> = targets.iter().map(|t| scaler.apply(t)).collect();

    let started = Instant::now();
    let mut model = LrcnModel::<f32>::init(arch, config.seed)?;
    let mut adam = AdamState::new(model.param_count());
    let n = patches.len();
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64 + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let dropout_seeds: Vec<u64> = (0..n).map(|_| rng.gen()).collect();

        let mut loss_sum = 0.0;
        for (batch, seeds) in order.chunks(config.batch_size).zip(dropout_seeds.chunks(config.batch_size)) {
            let per_sample: Vec<Result<(f64, Vec<f32>)>> = batch
                .par_iter()
                .zip(seeds)
                .map(|(&i, &dropout_seed)| {
                    let (y, tape) = model.forward(&patches[i], Mode::Train { dropout_seed })?;
                    let y: Vec<f64> = y.iter().map(|v| v.to_f64()).collect();
                    let (loss, dy) = mse_loss(&y, &scaled[i])?;
                    let dy: Vec<f32> = dy.iter().map(|&v| v as f32).collect();
                    Ok((loss, model.backward(&tape, &dy)?))
                })
                .collect();
            // summed in batch order so the result does not depend on scheduling
            let mut grad = vec![0.0f32; model.param_count()];
            for r in per_sample {
                let (loss, g) = r?;
                loss_sum += loss;
                for (a, b) in grad.iter_mut().zip(&g) {
                    *a += b;
                }
            }
            let inv = 1.0 / batch.len() as f32;
            grad.iter_mut().for_each(|g| *g *= inv);
            adam_step(model.params_mut(), &grad, &mut adam, config)?;
        }
        let mean_loss = loss_sum / n as f64;
        if !mean_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: mean_loss });
        }
        epoch_losses.push(mean_loss);
        if on_epoch(epoch, mean_loss).is_break() {
            break;
        }
    }

    let report = TrainReport {
        final_loss: *epoch_losses.last().unwrap(),
        epoch_losses,
        wall_time_s: started.elapsed().as_secs_f64(),
        seed: config.seed,
        config: config.clone(),
    };
    Ok(TrainOutcome { model, scaler, report })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameters compared.
    pub checked: usize,
    /// Sampled parameters where both gradients were below 1e-10.
    pub negligible: usize,
}

/// Compares backpropagated gradients of the MSE loss against central
/// differences (h = 1e-5) in f64, on `n_sampled` randomly chosen parameters
/// of a freshly initialised model with a random input and target.
pub fn grad_check(arch: &ArchSpec, n_sampled: usize, seed: u64) -> Result<GradCheckReport> {
    let mut model = LrcnModel::<f64>::init(arch, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let data = (0..arch.input_d * arch.input_n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let patch = SpeedPatch::new(data, arch.input_d, arch.input_n, arch.input_n - 1)?;
    let target: Vec<f64> = (0..arch.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mode = Mode::Train { dropout_seed: seed };

    let loss_at = |m: &LrcnModel<f64>| -> Result<f64> { Ok(mse_loss(&m.forward(&patch, mode)?.0, &target)?.0) };
    let (y, tape) = model.forward(&patch, mode)?;
    let (_, dy) = mse_loss(&y, &target)?;
    let grad = model.backward(&tape, &dy)?;

    let total = model.param_count();
    let picked = index::sample(&mut rng, total, n_sampled.min(total));
    let h = 1e-5;
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        negligible: 0,
    };
    for i in picked.iter() {
        let orig = model.params()[i];
        model.params_mut()[i] = orig + h;
        let up = loss_at(&model)?;
        model.params_mut()[i] = orig - h;
        let down = loss_at(&model)?;
        model.params_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let analytic = grad[i];
        if analytic.abs() < 1e-10 && numeric.abs() < 1e-10 {
            report.negligible += 1;
            continue;
        }
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-10);
        report.max_rel_error = report.max_rel_error.max(rel);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mse_basics() {
        let (l, g) = mse_loss(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
        assert_eq!(mse_loss(&[2.0, 3.0, 4.0], &[1.0, 2.0, 3.0]).unwrap().0, 1.0);
        assert!(mse_loss(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn mse_gradient_matches_finite_difference() {
        let p = [0.3, -1.2, 2.5];
        let t = [0.1, 0.4, -0.7];
        let (_, g) = mse_loss(&p, &t).unwrap();
        let h = 1e-6;
        for i in 0..3 {
            let mut up = p;
            let mut down = p;
            up[i] += h;
            down[i] -= h;
            let fd = (mse_loss(&up, &t).unwrap().0 - mse_loss(&down, &t).unwrap().0) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![1.0f64, -2.0];
        let mut s = AdamState::new(2);
        adam_step(&mut p, &[0.0, 0.0], &mut s, &TrainConfig::default()).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.0f64; 3];
        let mut s = AdamState::new(3);
        adam_step(&mut p, &[0.5, -3.0, 100.0], &mut s, &cfg).unwrap();
        // m̂ = g and v̂ = g², so the step is lr·g/(|g| + ε)
        for (x, g) in p.iter().zip([0.5f64, -3.0, 100.0]) {
            let expect = -cfg.lr * g / (g.abs() + cfg.epsilon);
            assert!((x - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![0.0f32; 3];
        let mut s = AdamState::new(3);
        let err = adam_step(&mut p, &[0.0, f32::NAN, 1.0], &mut s, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::NonFinite { index: 1, .. }));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn adam_solves_quadratic() {
        let cfg = TrainConfig {
            lr: 0.01,
            ..TrainConfig::default()
        };
        let target = [3.0, -1.5, 0.25, 0.0];
        let mut w = vec![0.0f64; 4];
        let mut s = AdamState::new(4);
        for _ in 0..5000 {
            let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            adam_step(&mut w, &g, &mut s, &cfg).unwrap();
        }
        for (a, b) in w.iter().zip(&target) {
            assert!((a - b).abs() < 1e-3, "{a} vs {b}");
        }
    }

    #[test]
    fn scaler_round_trip() {
        let t = vec![vec![1.0, 10.0], vec![3.0, 10.0], vec![5.0, 10.0]];
        let s = TargetScaler::fit(&t, TargetNormalization::PerComponent).unwrap();
        assert_eq!(s.scale[1], 1.0);
        let z = s.apply(&t[2]);
        assert!((z[0] - 1.5f64.sqrt()).abs() < 1e-12);
        let back = s.invert(&z);
        assert!((back[0] - 5.0).abs() < 1e-12 && (back[1] - 10.0).abs() < 1e-12);
        assert_eq!(TargetScaler::fit(&t, TargetNormalization::Off).unwrap(), TargetScaler::identity(2));
    }

    #[test]
    fn grad_check_linear_head_only() {
        let arch = ArchSpec {
            conv_channels: vec![],
            kernel_size: 1,
            pool_size: 1,
            lstm_units: vec![],
            output_dim: 3,
            dropout_rate: 0.0,
            input_d: 6,
            input_n: 2,
        };
        let r = grad_check(&arch, 100, 1).unwrap();
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(r.checked + r.negligible, arch.input_d * 3 + 3);
    }

    #[test]
    fn grad_check_reduced_arch() {
        let r = grad_check(&ArchSpec::reduced(), 200, 3).unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert_eq!(grad_check(&ArchSpec::reduced(), 0, 3).unwrap().max_rel_error, 0.0);
    }

    fn toy_data(arch: &ArchSpec, n: usize) -> (Vec<SpeedPatch>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let patches = (0..n)
            .map(|_| {
                let data = (0..arch.input_d * arch.input_n).map(|_| rng.gen_range(-1.0..1.0)).collect();
                SpeedPatch::new(data, arch.input_d, arch.input_n, arch.input_n - 1).unwrap()
            })
            .collect();
        let targets = (0..n).map(|_| (0..arch.output_dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
        (patches, targets)
    }

    #[test]
    fn memorises_one_sample() {
        let arch = ArchSpec::reduced();
        let (p, t) = toy_data(&arch, 1);
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.01,
            ..TrainConfig::default()
        };
        let out = train(&p, &t, &arch, &cfg).unwrap();
        let r = &out.report;
        assert_eq!(r.epoch_losses.len(), 200);
        assert!(r.final_loss < 1e-3 * r.epoch_losses[0], "{} vs {}", r.final_loss, r.epoch_losses[0]);
    }

    #[test]
    fn training_is_deterministic_and_observable() {
        let arch = ArchSpec {
            dropout_rate: 0.2,
            ..ArchSpec::reduced()
        };
        let (p, t) = toy_data(&arch, 7);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 3,
            seed: 4,
            target_normalization: TargetNormalization::PerComponent,
            ..TrainConfig::default()
        };
        let a = train(&p, &t, &arch, &cfg).unwrap();
        let b = train(&p, &t, &arch, &cfg).unwrap();
        assert_eq!(a.model.params(), b.model.params());
        assert_eq!(a.report.epoch_losses, b.report.epoch_losses);
        let mut seen = Vec::new();
        let c = train_observed(&p, &t, &arch, &cfg, |e, _| {
            seen.push(e);
            if e == 1 {
                ControlFlow::Break(())
            } else {
                ControlFlow::Continue(())
            }
        })
        .unwrap();
        assert_eq!(seen, vec![0, 1]);
        assert_eq!(c.report.epoch_losses, a.report.epoch_losses[..2]);
    }

    #[test]
    fn rejects_empty_and_mismatched_data() {
        let arch = ArchSpec::reduced();
        let cfg = TrainConfig::default();
        assert!(matches!(train(&[], &[], &arch, &cfg), Err(Error::InvalidInput(_))));
        let (p, _) = toy_data(&arch, 2);
        assert!(matches!(train(&p, &[vec![0.0; 10]], &arch, &cfg), Err(Error::Shape(_))));
        let bad = TrainConfig { lr: 0.0, ..cfg };
        assert!(train(&p, &vec![vec![0.0; 10]; 2], &arch, &bad).is_err());
    }
}
