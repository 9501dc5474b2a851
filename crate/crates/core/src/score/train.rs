//! Denoising score matching training with Adam.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::neural::NeuralScore;
use crate::error::{dim_err, Error, Result};
use crate::rng::{normal_vec, stream};
use crate::volume::Slice2D;

/// Lower end of the training-time interval `[T_MIN, 1]`.
pub const T_MIN: f64 = 1e-5;

const TRAIN_STREAM_TAG: u64 = 0x5452_4149_4e00_0000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            iterations: 1000,
            learning_rate: 2e-4,
            seed: 0,
            grad_clip: Some(1.0),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("grad_clip must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Adam moments and the number of completed iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl TrainState {
    pub fn new(param_count: usize) -> Self {
        Self {
            step: 0,
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub iteration: u64,
    pub loss: f64,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

fn check_dataset(dataset: &[Slice2D]) -> Result<()> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::EmptyInput("training dataset is empty".into()))?;
    if let Some(bad) = dataset.iter().find(|s| s.shape() != first.shape()) {
        return dim_err(format!(
            "training slices differ in shape: {:?} vs {:?}",
            bad.shape(),
            first.shape()
        ));
    }
    Ok(())
}

/// Runs `cfg.iterations` Adam steps on the DSM loss, starting from scratch.
pub fn train(
    model: NeuralScore,
    dataset: &[Slice2D],
    cfg: &TrainConfig,
) -> Result<(NeuralScore, TrainState, Vec<LossPoint>)> {
    let state = TrainState::new(model.param_count());
    train_from(model, state, dataset, cfg)
}

/// Continues training from a saved optimiser state. Iteration `k` always
/// draws its batch from the same counter-based stream, so a resumed run
/// sees the same samples an uninterrupted one would.
pub fn train_from(
    mut model: NeuralScore,
    mut state: TrainState,
    dataset: &[Slice2D],
    cfg: &TrainConfig,
) -> Result<(NeuralScore, TrainState, Vec<LossPoint>)> {
    cfg.validate()?;
    if cfg.iterations == 0 {
        return Ok((model, state, Vec::new()));
    }
    check_dataset(dataset)?;
    let n_params = model.param_count();
    if state.m.len() != n_params || state.v.len() != n_params {
        return dim_err("optimiser state does not match parameter count");
    }
    let shape = dataset[0].shape();
    let mut trace = Vec::with_capacity(cfg.iterations);

    for _ in 0..cfg.iterations {
        let iteration = state.step;
        let mut rng = stream(cfg.seed, TRAIN_STREAM_TAG ^ iteration);
        let batch: Vec<(usize, f64, Slice2D)> = (0..cfg.batch_size)
            .map(|_| {
                let idx = rng.gen_range(0..dataset.len());
                let t = T_MIN + (1.0 - T_MIN) * rng.gen::<f64>();
                let z =
                    Slice2D::new(shape, normal_vec(&mut rng, shape.0 * shape.1)).expect("shape");
                (idx, t, z)
            })
            .collect();

        let per_sample: Vec<(f64, Vec<f64>)> = batch
            .par_iter()
            .map(|(idx, t, z)| {
                let mut g = vec![0.0; n_params];
                let l = model.dsm_loss_and_grad(&dataset[*idx], *t, z, &mut g);
                (l, g)
            })
            .collect();

        let scale = 1.0 / cfg.batch_size as f64;
        let mut grad = vec![0.0; n_params];
        let mut loss = 0.0;
        for (l, g) in &per_sample {
            loss += l;
            for (a, b) in grad.iter_mut().zip(g) {
                *a += b;
            }
        }
        loss *= scale;
        grad.iter_mut().for_each(|g| *g *= scale);
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step: iteration as usize,
            });
        }

        if let Some(clip) = cfg.grad_clip {
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > clip {
                let f = clip / norm;
                grad.iter_mut().for_each(|g| *g *= f);
            }
        }

        state.step += 1;
        let bc1 = 1.0 - BETA1.powi(state.step as i32);
        let bc2 = 1.0 - BETA2.powi(state.step as i32);
        for (((p, g), m), v) in model
            .params_mut()
            .iter_mut()
            .zip(&grad)
            .zip(&mut state.m)
            .zip(&mut state.v)
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= cfg.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
        }
        trace.push(LossPoint { iteration, loss });
    }
    Ok((model, state, trace))
}

/// Trailing moving average used to compare loss levels.
pub fn smoothed(trace: &[LossPoint], window: usize) -> Vec<f64> {
    let w = window.max(1);
    let mut out = Vec::with_capacity(trace.len());
    let mut acc = 0.0;
    for (i, p) in trace.iter().enumerate() {
        acc += p.loss;
        if i >= w {
            acc -= trace[i - w].loss;
        }
        out.push(acc / (i + 1).min(w) as f64);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::Architecture;
    use crate::sde::NoiseSchedule;

    fn tiny_net(seed: u64) -> NeuralScore {
        let arch = Architecture {
            layers: 3,
            channels: 4,
            kernel: 3,
            sigma_data: 0.5,
        };
        NeuralScore::new(arch, NoiseSchedule::default(), seed).unwrap()
    }

    fn blobs() -> Vec<Slice2D> {
        (0..6)
            .map(|k| {
                let (cy, cx) = (2.0 + (k % 3) as f64, 3.0 + (k / 3) as f64);
                Slice2D::from_fn((8, 8), |r, c| {
                    let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
                    (-d2 / 4.0).exp()
                })
            })
            .collect()
    }

    #[test]
    fn zero_iterations_is_noop() {
        let net = tiny_net(1);
        let cfg = TrainConfig {
            iterations: 0,
            ..Default::default()
        };
        let (out, state, trace) = train(net.clone(), &blobs(), &cfg).unwrap();
        assert_eq!(out, net);
        assert_eq!(state.step, 0);
        assert!(trace.is_empty());
    }

    #[test]
    fn deterministic_under_seed() {
        let cfg = TrainConfig {
            iterations: 5,
            seed: 9,
            ..Default::default()
        };
        let a = train(tiny_net(1), &blobs(), &cfg).unwrap();
        let b = train(tiny_net(1), &blobs(), &cfg).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.2, b.2);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let full = TrainConfig {
            iterations: 6,
            seed: 4,
            ..Default::default()
        };
        let half = TrainConfig {
            iterations: 3,
            ..full.clone()
        };
        let (a, _, ta) = train(tiny_net(2), &blobs(), &full).unwrap();
        let (m, s, t1) = train(tiny_net(2), &blobs(), &half).unwrap();
        let (b, s2, t2) = train_from(m, s, &blobs(), &half).unwrap();
        assert_eq!(a, b);
        assert_eq!(s2.step, 6);
        assert_eq!(ta, [t1, t2].concat());
    }

    #[test]
    fn rejects_mixed_shapes() {
        let mut data = blobs();
        data.push(Slice2D::zeros((4, 4)));
        let cfg = TrainConfig {
            iterations: 1,
            ..Default::default()
        };
        assert!(matches!(
            train(tiny_net(1), &data, &cfg),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn smoothing_window() {
        let t: Vec<LossPoint> = [4.0, 2.0, 0.0]
            .iter()
            .enumerate()
            .map(|(i, &l)| LossPoint {
                iteration: i as u64,
                loss: l,
            })
            .collect();
        assert_eq!(smoothed(&t, 2), vec![4.0, 3.0, 1.0]);
    }
}
