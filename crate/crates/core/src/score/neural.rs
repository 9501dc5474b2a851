//! Small convolutional score network.
//!
//! Input `x` is scaled by `c_in = 1/sqrt(sigma^2 + sigma_data^2)` and a
//! constant channel `ln sigma / ln sigma_max` is appended. A stack of
//! same-padded convolutions with SiLU between them produces `F`, and the
//! score is
//!
//! ```text
//! s(x, t) = (b F(u) - a u) / sigma,   u = c_in x,
//! a = sigma / sqrt(sigma^2 + sigma_data^2),  b = sigma_data / sqrt(sigma^2 + sigma_data^2)
//! ```
//!
//! so with `F = 0` the network is the exact score of `N(0, sigma_data^2)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::autodiff::{ConvLayout, NodeId, Tape, Tensor};
use super::{Pullback, ScoreModel};
use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::sde::NoiseSchedule;
use crate::volume::Slice2D;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Architecture {
    pub layers: usize,
    pub channels: usize,
    pub kernel: usize,
    pub sigma_data: f64,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            layers: 4,
            channels: 32,
            kernel: 3,
            sigma_data: 0.5,
        }
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config(format!(
                "need >= 2 conv layers, got {}",
                self.layers
            )));
        }
        if self.channels == 0 {
            return Err(Error::Config("channels must be positive".into()));
        }
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel must be odd, got {}",
                self.kernel
            )));
        }
        if !(self.sigma_data > 0.0) {
            return Err(Error::Config("sigma_data must be positive".into()));
        }
        Ok(())
    }

    /// Convolution layouts in parameter order.
    pub fn layouts(&self) -> Vec<ConvLayout> {
        let mut out = Vec::with_capacity(self.layers);
        let mut offset = 0;
        for l in 0..self.layers {
            let cin = if l == 0 { 2 } else { self.channels };
            let cout = if l + 1 == self.layers {
                1
            } else {
                self.channels
            };
            let weight_len = cout * cin * self.kernel * self.kernel;
            out.push(ConvLayout {
                cin,
                cout,
                kernel: self.kernel,
                weight_offset: offset,
                bias_offset: offset + weight_len,
            });
            offset += weight_len + cout;
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layouts().iter().map(ConvLayout::param_len).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NeuralScore {
    arch: Architecture,
    schedule: NoiseSchedule,
    layouts: Vec<ConvLayout>,
    params: Vec<f64>,
}

struct Forward<'p> {
    tape: Tape<'p>,
    input: NodeId,
    output: NodeId,
}

impl NeuralScore {
    pub fn new(arch: Architecture, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        arch.validate()?;
        schedule.validate()?;
        let layouts = arch.layouts();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; arch.param_count()];
        for (l, lay) in layouts.iter().enumerate() {
            let fan_in = (lay.cin * lay.kernel * lay.kernel) as f64;
            let gain = if l + 1 == layouts.len() { 0.1 } else { 1.0 };
            let std = gain * (2.0 / fan_in).sqrt();
            let w = normal_vec(&mut rng, lay.weight_len());
            for (p, v) in params[lay.weight_offset..lay.weight_offset + lay.weight_len()]
                .iter_mut()
                .zip(w)
            {
                *p = std * v;
            }
        }
        Ok(Self {
            arch,
            schedule,
            layouts,
            params,
        })
    }

    pub fn from_params(
        arch: Architecture,
        schedule: NoiseSchedule,
        params: Vec<f64>,
    ) -> Result<Self> {
        arch.validate()?;
        schedule.validate()?;
        if params.len() != arch.param_count() {
            return Err(Error::Dimension(format!(
                "architecture needs {} parameters, got {}",
                arch.param_count(),
                params.len()
            )));
        }
        Ok(Self {
            layouts: arch.layouts(),
            arch,
            schedule,
            params,
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn coefficients(&self, t: f64) -> (f64, f64, f64, f64, f64) {
        let sigma = self.schedule.sigma_unchecked(t.clamp(0.0, 1.0));
        let sd = self.arch.sigma_data;
        let norm = (sigma * sigma + sd * sd).sqrt();
        let time = sigma.ln() / self.schedule.sigma_max.ln();
        // (c_in, a / sigma, b / sigma, time channel, sigma)
        (1.0 / norm, 1.0 / norm, sd / (norm * sigma), time, sigma)
    }

    fn forward(&self, x: &Slice2D, t: f64, keep_cols: bool) -> Forward<'_> {
        let (c_in, a_over_s, b_over_s, time, _) = self.coefficients(t);
        let mut tape = Tape::new(&self.params, keep_cols);
        let input = tape.leaf(Tensor {
            channels: 1,
            rows: x.rows(),
            cols: x.cols(),
            data: x.data().to_vec(),
        });
        let u = tape.scale(input, c_in);
        let mut h = tape.append_const(u, time);
        for (l, lay) in self.layouts.iter().enumerate() {
            h = tape.conv(h, *lay);
            if l + 1 < self.layouts.len() {
                h = tape.silu(h);
            }
        }
        let output = tape.sum(h, b_over_s, u, -a_over_s);
        Forward {
            tape,
            input,
            output,
        }
    }

    fn to_slice(t: &Tensor) -> Slice2D {
        Slice2D::new((t.rows, t.cols), t.data.clone()).expect("single channel")
    }

    fn to_tensor(s: &Slice2D) -> Tensor {
        Tensor {
            channels: 1,
            rows: s.rows(),
            cols: s.cols(),
            data: s.data().to_vec(),
        }
    }

    /// DSM loss `|sigma s(x0 + sigma z, t) + z|^2` of one sample and its
    /// gradient with respect to the parameters, accumulated into `grad`.
    pub fn dsm_loss_and_grad(&self, x0: &Slice2D, t: f64, z: &Slice2D, grad: &mut [f64]) -> f64 {
        let sigma = self.schedule.sigma_unchecked(t);
        let xt = x0.add_scaled(sigma, z);
        let fwd = self.forward(&xt, t, true);
        let s = fwd.tape.value(fwd.output);
        let mut seed = Tensor::zeros(1, xt.rows(), xt.cols());
        let mut loss = 0.0;
        for ((g, &sv), &zv) in seed.data.iter_mut().zip(&s.data).zip(z.data()) {
            let r = sigma * sv + zv;
            loss += r * r;
            *g = 2.0 * sigma * r;
        }
        fwd.tape.backward(fwd.output, seed, Some(grad));
        loss
    }
}

impl ScoreModel for NeuralScore {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn eval(&self, x: &Slice2D, t: f64) -> Slice2D {
        let fwd = self.forward(x, t, false);
        Self::to_slice(fwd.tape.value(fwd.output))
    }

    fn vjp(&self, x: &Slice2D, t: f64, v: &Slice2D) -> Slice2D {
        self.eval_with_pullback(x, t).1(v)
    }

    fn eval_with_pullback<'a>(&'a self, x: &Slice2D, t: f64) -> (Slice2D, Pullback<'a>) {
        let fwd = self.forward(x, t, false);
        let score = Self::to_slice(fwd.tape.value(fwd.output));
        let pullback = move |v: &Slice2D| {
            let grads = fwd.tape.backward(fwd.output, Self::to_tensor(v), None);
            match &grads[fwd.input] {
                Some(g) => Self::to_slice(g),
                None => Slice2D::zeros(v.shape()),
            }
        };
        (score, Box::new(pullback))
    }
}
