//! Denoising score-matching training with condition dropout and an early
//! "weak" snapshot for autoguidance.

use crate::distributions::DataSource;
use crate::error::{Error, Result};
use crate::linalg::Vec2;
use crate::nn::{check_dropout_p, AdamState, Architecture, Condition, DenoiserNet, EvalMode, SIGMA_DATA};
use crate::rng::RngStream;

/// Loss is considered divergent above this value.
pub const DIVERGENCE_LOSS: f64 = 1e6;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub steps: usize,
    /// Peak learning rate; decays with a cosine schedule to `lr_min`.
    pub lr: f64,
    pub lr_min: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// `ln(sigma) ~ N(p_mean, p_std^2)`.
    pub p_mean: f64,
    pub p_std: f64,
    /// Probability of replacing the label with the null token.
    pub cond_drop: f64,
    /// Dropout probability during training.
    pub p_train: f64,
    /// Number of updates after which the weak snapshot is taken.
    pub weak_step: usize,
    /// Further snapshot steps, kept alongside the weak snapshot.
    pub extra_snapshots: Vec<usize>,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub sigma_embed_dim: usize,
    pub class_embed_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 256,
            steps: 20_000,
            lr: 1e-3,
            lr_min: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            p_mean: -1.2,
            p_std: 1.2,
            cond_drop: 0.1,
            p_train: 0.1,
            weak_step: 2_000,
            extra_snapshots: Vec::new(),
            seed: 0,
            hidden: crate::nn::DEFAULT_HIDDEN.to_vec(),
            sigma_embed_dim: crate::nn::DEFAULT_SIGMA_EMBED_DIM,
            class_embed_dim: crate::nn::DEFAULT_CLASS_EMBED_DIM,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        if self.steps == 0 {
            return bad("train.steps must be positive".into());
        }
        if self.weak_step >= self.steps {
            return bad(format!(
                "train.weak_step ({}) must be smaller than train.steps ({})",
                self.weak_step, self.steps
            ));
        }
        if let Some(&s) = self.extra_snapshots.iter().find(|&&s| s >= self.steps) {
            return bad(format!("train.extra_snapshots entry {s} must be smaller than train.steps ({})", self.steps));
        }
        for (name, p) in [("train.cond_drop", self.cond_drop), ("train.p_train", self.p_train)] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1), got {p}"));
            }
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return bad("need 0 <= train.lr_min <= train.lr and train.lr > 0".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("Adam needs beta1, beta2 in [0, 1) and eps > 0".into());
        }
        if !(self.p_std >= 0.0) || !self.p_mean.is_finite() {
            return bad("sigma distribution needs finite p_mean and p_std >= 0".into());
        }
        Ok(())
    }

    pub fn architecture(&self, num_classes: usize) -> Architecture {
        Architecture::with_hidden(&self.hidden, num_classes, self.sigma_embed_dim, self.class_embed_dim)
    }

    /// Cosine decay from `lr` at step 0 to `lr_min` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let t = step as f64 / self.steps as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// Loss weight `(sigma^2 + sd^2) / (sigma * sd)^2`.
pub fn loss_weight(sigma: f64) -> f64 {
    (sigma * sigma + SIGMA_DATA * SIGMA_DATA) / (sigma * SIGMA_DATA).powi(2)
}

/// Clean points with their noise, noise levels and conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub x0: Vec<Vec2>,
    pub noise: Vec<Vec2>,
    pub sigma: Vec<f64>,
    pub labels: Vec<Condition>,
    pub x_sigma: Vec<Vec2>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }
}

/// `x_sigma = x0 + sigma * n` with `n ~ N(0, I)` drawn from `stream` (4 draws per point).
pub fn noising(x0: &[Vec2], sigma: &[f64], labels: &[Condition], stream: &mut RngStream) -> Result<SampleBatch> {
    if x0.len() != sigma.len() || x0.len() != labels.len() {
        return Err(Error::Internal(format!(
            "noising: {} points, {} sigmas, {} labels",
            x0.len(),
            sigma.len(),
            labels.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s >= 0.0)) {
        return Err(Error::Domain(format!("noise level must be >= 0, got {s}")));
    }
    let noise: Vec<Vec2> = (0..x0.len()).map(|_| Vec2::new(stream.gaussian(), stream.gaussian())).collect();
    let x_sigma = x0.iter().zip(&noise).zip(sigma).map(|((&x, &n), &s)| x + n * s).collect();
    Ok(SampleBatch {
        x0: x0.to_vec(),
        noise,
        sigma: sigma.to_vec(),
        labels: labels.to_vec(),
        x_sigma,
    })
}

/// Mean of `lambda(sigma) * |d - x0|^2` over the batch.
pub fn weighted_loss(denoised: &[Vec2], batch: &SampleBatch) -> f64 {
    denoised
        .iter()
        .zip(&batch.x0)
        .zip(&batch.sigma)
        .map(|((d, x0), &s)| loss_weight(s) * (*d - *x0).norm_sq())
        .sum::<f64>()
        / batch.len() as f64
}

/// Weighted denoising loss and its exact gradient, with dropout at `p_train`.
/// Row `i` draws its masks from `stream.fork(i)`.
pub fn loss_and_grad(net: &DenoiserNet, batch: &SampleBatch, p_train: f64, stream: &RngStream) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Internal("loss on an empty batch".into()));
    }
    check_dropout_p(p_train)?;
    let mut streams: Vec<RngStream> = (0..batch.len() as u64).map(|i| stream.fork(i)).collect();
    let tape = net.forward_batch(
        &batch.x_sigma,
        &batch.sigma,
        &batch.labels,
        EvalMode::Stochastic { p: p_train, streams: &mut streams },
    )?;
    let loss = weighted_loss(tape.outputs(), batch);
    if !loss.is_finite() {
        return Err(Error::Training { step: 0, message: format!("non-finite loss {loss}") });
    }
    let scale = 2.0 / batch.len() as f64;
    let d_out: Vec<Vec2> = tape
        .outputs()
        .iter()
        .zip(&batch.x0)
        .zip(&batch.sigma)
        .map(|((d, x0), &s)| (*d - *x0) * (scale * loss_weight(s)))
        .collect();
    let grad = net.backward(&tape, &d_out)?;
    Ok((loss, grad))
}

/// Draw one training batch: uniform classes, data points, log-normal noise
/// levels and condition dropout, each from its own fork of `stream`.
pub fn draw_batch(data: &DataSource, cfg: &TrainConfig, stream: &RngStream, size: usize) -> Result<SampleBatch> {
    let k = data.num_classes() as u64;
    let mut label_s = stream.fork(0);
    let data_s = stream.fork(1);
    let mut sigma_s = stream.fork(2);
    let mut noise_s = stream.fork(3);
    let mut drop_s = stream.fork(4);
    let mut x0 = Vec::with_capacity(size);
    let mut labels = Vec::with_capacity(size);
    for i in 0..size {
        let class = label_s.below(k) as usize;
        x0.push(data.sample(class, &mut data_s.fork(i as u64), 1)?[0]);
        labels.push(if drop_s.uniform() < cfg.cond_drop {
            Condition::Null
        } else {
            Condition::Class(class)
        });
    }
    let sigma: Vec<f64> = (0..size).map(|_| (cfg.p_mean + cfg.p_std * sigma_s.gaussian()).exp()).collect();
    noising(&x0, &sigma, &labels, &mut noise_s)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_net: DenoiserNet,
    pub weak_net: DenoiserNet,
    /// Nets at `extra_snapshots`, sorted by step, duplicates removed.
    pub snapshots: Vec<(usize, DenoiserNet)>,
    /// Training loss of every step.
    pub losses: Vec<f64>,
    /// Steps in which the null-token embedding row got a nonzero gradient.
    pub null_grad_steps: usize,
}

/// The full training run; a pure function of `cfg` and `data`.
pub fn train(cfg: &TrainConfig, data: &DataSource) -> Result<TrainOutcome> {
    train_with_progress(cfg, data, |_, _| {})
}

pub fn train_with_progress(
    cfg: &TrainConfig,
    data: &DataSource,
    mut progress: impl FnMut(usize, f64),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut net = DenoiserNet::new(cfg.architecture(data.num_classes()), cfg.seed)?;
    let mut adam = AdamState::new(net.params().len(), cfg.lr, cfg.beta1, cfg.beta2, cfg.eps);
    let root = RngStream::new(cfg.seed, "train")?;
    let null_row = net.embedding_range(Condition::Null);
    let mut weak = None;
    let mut extra: Vec<usize> = cfg.extra_snapshots.clone();
    extra.sort_unstable();
    extra.dedup();
    let mut snapshots = Vec::with_capacity(extra.len());
    let mut losses = Vec::with_capacity(cfg.steps);
    let mut null_grad_steps = 0;
    for step in 0..cfg.steps {
        if step == cfg.weak_step {
            weak = Some(net.clone());
        }
        if extra.binary_search(&step).is_ok() {
            snapshots.push((step, net.clone()));
        }
        let step_stream = root.fork(step as u64);
        let batch = draw_batch(data, cfg, &step_stream, cfg.batch_size)?;
        let (loss, grad) = loss_and_grad(&net, &batch, cfg.p_train, &step_stream.fork(5)).map_err(|e| match e {
            Error::Training { message, .. } => Error::Training { step, message },
            other => other,
        })?;
        if !(loss <= DIVERGENCE_LOSS) {
            return Err(Error::Training { step, message: format!("loss diverged: {loss}") });
        }
        if grad[null_row.clone()].iter().any(|&g| g != 0.0) {
            null_grad_steps += 1;
        }
        adam.lr = cfg.lr_at(step);
        adam.step_net(&mut net, &grad).map_err(|e| match e {
            Error::Training { message, .. } => Error::Training { step, message },
            other => other,
        })?;
        losses.push(loss);
        progress(step, loss);
    }
    Ok(TrainOutcome {
        final_net: net,
        weak_net: weak.expect("weak_step < steps"),
        snapshots,
        losses,
        null_grad_steps,
    })
}

/// Deterministic-mode weighted loss on a held-out batch drawn from `(seed, "heldout")`.
pub fn heldout_loss(net: &DenoiserNet, data: &DataSource, cfg: &TrainConfig, seed: u64, size: usize) -> Result<f64> {
    let batch = draw_batch(data, cfg, &RngStream::new(seed, "heldout")?, size)?;
    let tape = net.forward_batch(&batch.x_sigma, &batch.sigma, &batch.labels, EvalMode::Deterministic)?;
    Ok(weighted_loss(tape.outputs(), &batch))
}
