//! Training loop: seeded shuffling, minibatch gradient averaging, and an
//! Adam-style optimizer. Bit-reproducible given the seed: per-epoch
//! shuffles derive from `(seed, epoch)`, batch members run in parallel but
//! their gradients reduce in batch order.

use rayon::prelude::*;

use super::loss::{loss_with_grad, LossConfig, LossParts};
use super::net::{backward_from_tape, forward_with_tape, net_forward, NetParams, ParamBlock};
use super::RestorerError;
use crate::phantom::SampleMeta;
use crate::rng::{tag, SeedStream};
use crate::scalar::Scalar;
use crate::voxel::Volume3D;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Divide inputs and targets by the mean intensity of the training
    /// targets; the constant is stored and undone at inference.
    TargetMean,
    None,
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub n_epochs: usize,
    pub seed: u64,
    pub normalization: NormMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 4,
            n_epochs: 10,
            seed: 0,
            normalization: NormMode::TargetMean,
        }
    }
}

/// One training pair with its truth record (in the crop frame).
#[derive(Debug, Clone)]
pub struct TrainSample<T: Scalar = f64> {
    pub input: Volume3D<T>,
    pub target: Volume3D<T>,
    pub meta: SampleMeta,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Scalar = f64> {
    pub m: Vec<ParamBlock<T>>,
    pub v: Vec<ParamBlock<T>>,
    pub step: u64,
}

/// Optimizer state that checkpoints carry so an interrupted run resumes
/// exactly where it stopped.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState<T: Scalar = f64> {
    pub params: NetParams<T>,
    pub adam: AdamState<T>,
    pub epochs_done: usize,
    pub norm: f64,
}

impl<T: Scalar> TrainState<T> {
    pub fn fresh(params: NetParams<T>, dataset: &[TrainSample<T>], mode: NormMode) -> Result<Self, RestorerError> {
        let norm = match mode {
            NormMode::None => 1.0,
            NormMode::TargetMean => {
                let (mut sum, mut n) = (0.0, 0usize);
                for s in dataset {
                    sum += s.target.sum();
                    n += s.target.data().len();
                }
                let mean = if n == 0 { 0.0 } else { sum / n as f64 };
                if !(mean > 0.0) {
                    return Err(RestorerError::Train(format!(
                        "target mean {mean} cannot normalize"
                    )));
                }
                mean
            }
        };
        let adam = AdamState {
            m: params.zero_grads(),
            v: params.zero_grads(),
            step: 0,
        };
        Ok(Self { params, adam, epochs_done: 0, norm })
    }
}

#[derive(Debug, Clone, Copy)]
pub struct EpochStats {
    pub epoch: usize,
    pub total: f64,
    pub fidelity: f64,
    pub channel: f64,
}

pub type History = Vec<EpochStats>;

/// Scales a volume by `k`.
pub fn scaled<T: Scalar>(vol: &Volume3D<T>, k: f64) -> Volume3D<T> {
    let kk = T::cast(k);
    Volume3D::new(vol.dims(), vol.voxel_mm(), vol.data().iter().map(|&v| v * kk).collect())
        .expect("same dims")
}

/// Gradient of the per-sample loss with respect to every parameter:
/// forward with tape, loss gradient at the output, reverse pass through
/// the network. Returns the loss parts alongside.
pub fn net_backward<T: Scalar>(
    params: &NetParams<T>,
    input: &Volume3D<T>,
    truth: &Volume3D<T>,
    meta: &SampleMeta,
    loss_cfg: &LossConfig<T>,
) -> Result<(Vec<ParamBlock<T>>, LossParts), RestorerError> {
    let (est, tape) = forward_with_tape(params, input)?;
    let (parts, grad_est) = loss_with_grad(&est, truth, meta, loss_cfg)?;
    let grads = backward_from_tape(params, input, &tape, &grad_est);
    Ok((grads, parts))
}

fn validate_cfg(cfg: &TrainConfig) -> Result<(), RestorerError> {
    if cfg.learning_rate < 0.0 || cfg.batch_size == 0 {
        return Err(RestorerError::Train("learning rate must be >= 0, batch size >= 1".into()));
    }
    if !(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0 && cfg.beta2 >= 0.0 && cfg.beta2 < 1.0 && cfg.eps > 0.0) {
        return Err(RestorerError::Train("invalid Adam constants".into()));
    }
    Ok(())
}

fn adam_step<T: Scalar>(
    params: &mut NetParams<T>,
    adam: &mut AdamState<T>,
    grads: &[ParamBlock<T>],
    cfg: &TrainConfig,
) {
    adam.step += 1;
    let t = adam.step as i32;
    let (b1, b2) = (T::cast(cfg.beta1), T::cast(cfg.beta2));
    let one = T::one();
    let bc1 = T::cast(1.0 - cfg.beta1.powi(t));
    let bc2 = T::cast(1.0 - cfg.beta2.powi(t));
    let lr = T::cast(cfg.learning_rate);
    let eps = T::cast(cfg.eps);
    for (i, g) in grads.iter().enumerate() {
        let pb = &mut params.blocks[i];
        let mb = &mut adam.m[i];
        let vb = &mut adam.v[i];
        for ((p, m), (v, &gr)) in pb
            .w
            .iter_mut()
            .chain(pb.b.iter_mut())
            .zip(mb.w.iter_mut().chain(mb.b.iter_mut()))
            .zip(vb.w.iter_mut().chain(vb.b.iter_mut()).zip(g.w.iter().chain(g.b.iter())))
        {
            *m = b1 * *m + (one - b1) * gr;
            *v = b2 * *v + (one - b2) * gr * gr;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p = *p - lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Trains from a fresh state; see [`train_resume`].
pub fn train<T: Scalar>(
    dataset: &[TrainSample<T>],
    params_init: NetParams<T>,
    loss_cfg: &LossConfig<T>,
    cfg: &TrainConfig,
) -> Result<(TrainState<T>, History), RestorerError> {
    let state = TrainState::fresh(params_init, dataset, cfg.normalization)?;
    train_resume(dataset, state, loss_cfg, cfg)
}

/// Runs epochs `state.epochs_done .. cfg.n_epochs`. Resuming a checkpointed
/// state reproduces an uninterrupted run exactly because shuffles are keyed
/// by `(seed, epoch)` and the Adam state travels with the checkpoint.
pub fn train_resume<T: Scalar>(
    dataset: &[TrainSample<T>],
    mut state: TrainState<T>,
    loss_cfg: &LossConfig<T>,
    cfg: &TrainConfig,
) -> Result<(TrainState<T>, History), RestorerError> {
    validate_cfg(cfg)?;
    if dataset.is_empty() {
        return Err(RestorerError::Train("empty training set".into()));
    }
    let dims = dataset[0].input.dims();
    for s in dataset {
        if s.input.dims() != dims || s.target.dims() != dims {
            return Err(RestorerError::Train("all samples must share dims".into()));
        }
    }
    state.params.arch().check_dims(dims)?;

    let scale = 1.0 / state.norm;
    let working: Vec<TrainSample<T>> = dataset
        .iter()
        .map(|s| TrainSample {
            input: scaled(&s.input, scale),
            target: scaled(&s.target, scale),
            meta: s.meta.clone(),
        })
        .collect();

    let mut history = History::new();
    for epoch in state.epochs_done..cfg.n_epochs {
        let mut order: Vec<usize> = (0..working.len()).collect();
        SeedStream::new(cfg.seed, &[tag::TRAIN_SHUFFLE, epoch as u64]).shuffle(&mut order);

        let mut epoch_parts = LossParts::default();
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Result<Vec<_>, _> = batch
                .par_iter()
                .map(|&i| {
                    let s = &working[i];
                    net_backward(&state.params, &s.input, &s.target, &s.meta, loss_cfg)
                })
                .collect();
            let results = results?;

            let inv = T::cast(1.0 / batch.len() as f64);
            let mut grads = state.params.zero_grads();
            let mut batch_parts = LossParts::default();
            for (g, parts) in &results {
                batch_parts.add(parts);
                for (acc, blk) in grads.iter_mut().zip(g) {
                    for (a, &v) in acc.w.iter_mut().zip(&blk.w) {
                        *a += v * inv;
                    }
                    for (a, &v) in acc.b.iter_mut().zip(&blk.b) {
                        *a += v * inv;
                    }
                }
            }
            if !batch_parts.total.is_finite() {
                return Err(RestorerError::Divergence {
                    epoch,
                    batch: batch_idx,
                    value: batch_parts.total,
                });
            }
            epoch_parts.add(&batch_parts);
            adam_step(&mut state.params, &mut state.adam, &grads, cfg);
        }

        epoch_parts.scale(1.0 / working.len() as f64);
        history.push(EpochStats {
            epoch,
            total: epoch_parts.total,
            fidelity: epoch_parts.fidelity,
            channel: epoch_parts.channel,
        });
        state.epochs_done = epoch + 1;
    }

    if state.params.blocks.iter().any(|b| b.iter().any(|v| !v.is_finite())) {
        return Err(RestorerError::Divergence {
            epoch: state.epochs_done,
            batch: 0,
            value: f64::NAN,
        });
    }
    Ok((state, history))
}

/// Mean loss of a dataset under fixed parameters, evaluated in the
/// normalized space used for training (for validation-based model
/// selection).
pub fn mean_loss<T: Scalar>(
    dataset: &[TrainSample<T>],
    params: &NetParams<T>,
    loss_cfg: &LossConfig<T>,
    norm: f64,
) -> Result<LossParts, RestorerError> {
    if dataset.is_empty() {
        return Err(RestorerError::Train("empty dataset".into()));
    }
    let scale = 1.0 / norm;
    let parts: Result<Vec<LossParts>, RestorerError> = dataset
        .par_iter()
        .map(|s| {
            let est = net_forward(params, &scaled(&s.input, scale))?;
            super::loss::loss_parts(&est, &scaled(&s.target, scale), &s.meta, loss_cfg)
        })
        .collect();
    let mut mean = LossParts::default();
    for p in parts? {
        mean.add(&p);
    }
    mean.scale(1.0 / dataset.len() as f64);
    Ok(mean)
}
