//! Per-slice score models, denoising score matching and slice datasets.

pub mod autodiff;
pub mod checkpoint;
pub mod neural;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::sde::NoiseSchedule;
use crate::volume::{Slice2D, SliceAxis, Volume3D};

pub use checkpoint::Checkpoint;
pub use neural::{Architecture, NeuralScore};
pub use train::{train, LossPoint, TrainConfig, TrainState};

/// Maps a cotangent to `J^T v`, where `J` is the Jacobian of a score
/// evaluation with respect to its input slice.
pub type Pullback<'a> = Box<dyn Fn(&Slice2D) -> Slice2D + Send + Sync + 'a>;

/// A time-conditioned 2D score estimator `s(x, t) ~ grad log p_t(x)`.
pub trait ScoreModel: Send + Sync {
    fn schedule(&self) -> &NoiseSchedule;

    fn eval(&self, x: &Slice2D, t: f64) -> Slice2D;

    /// `(d eval / d x)^T v`.
    fn vjp(&self, x: &Slice2D, t: f64, v: &Slice2D) -> Slice2D;

    /// Score plus a pullback that reuses the forward pass.
    fn eval_with_pullback<'a>(&'a self, x: &Slice2D, t: f64) -> (Slice2D, Pullback<'a>) {
        let score = self.eval(x, t);
        let x = x.clone();
        (score, Box::new(move |v| self.vjp(&x, t, v)))
    }

    /// Score plus the pullback of the denoiser `x + sigma^2 s(x, t)`.
    fn eval_with_denoiser_pullback<'a>(
        &'a self,
        x: &Slice2D,
        t: f64,
        sigma: f64,
    ) -> (Slice2D, Pullback<'a>) {
        let (score, pullback) = self.eval_with_pullback(x, t);
        let s2 = sigma * sigma;
        (score, Box::new(move |v| v.add_scaled(s2, &pullback(v))))
    }
}

/// Prior mean of an [`AnalyticGaussianScore`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum GaussianMean {
    Scalar(f64),
    Slice(Vec<f64>),
}

/// Exact score of `N(mu, tau^2 I)` diffused by the VE kernel:
/// `-(x - mu) / (tau^2 + sigma(t)^2)`.
#[derive(Clone, Debug)]
pub struct AnalyticGaussianScore {
    mean: GaussianMean,
    tau: f64,
    schedule: NoiseSchedule,
}

impl AnalyticGaussianScore {
    pub fn new(mean: GaussianMean, tau: f64, schedule: NoiseSchedule) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::Domain(format!("tau must be positive, got {tau}")));
        }
        schedule.validate()?;
        Ok(Self {
            mean,
            tau,
            schedule,
        })
    }

    pub fn scalar(mu: f64, tau: f64, schedule: NoiseSchedule) -> Result<Self> {
        Self::new(GaussianMean::Scalar(mu), tau, schedule)
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn mean(&self) -> &GaussianMean {
        &self.mean
    }

    fn variance(&self, t: f64) -> f64 {
        let s = self.schedule.sigma_unchecked(t.clamp(0.0, 1.0));
        self.tau * self.tau + s * s
    }

    fn mu_at(&self, k: usize) -> f64 {
        match &self.mean {
            GaussianMean::Scalar(m) => *m,
            GaussianMean::Slice(v) => v[k],
        }
    }
}

/// Free-function form of the analytic score at noise level `sigma(t)`.
pub fn analytic_score(x: &Slice2D, sigma: f64, mu: f64, tau: f64) -> Slice2D {
    let var = tau * tau + sigma * sigma;
    x.map(|v| -(v - mu) / var)
}

impl ScoreModel for AnalyticGaussianScore {
    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn eval(&self, x: &Slice2D, t: f64) -> Slice2D {
        let var = self.variance(t);
        if let GaussianMean::Slice(m) = &self.mean {
            assert_eq!(m.len(), x.len(), "mean slice size differs from input");
        }
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(k, &v)| -(v - self.mu_at(k)) / var)
            .collect();
        Slice2D::new(x.shape(), data).expect("same shape")
    }

    fn vjp(&self, _x: &Slice2D, t: f64, v: &Slice2D) -> Slice2D {
        let var = self.variance(t);
        v.map(|c| -c / var)
    }

    fn eval_with_denoiser_pullback<'a>(
        &'a self,
        x: &Slice2D,
        t: f64,
        sigma: f64,
    ) -> (Slice2D, Pullback<'a>) {
        let tau2 = self.tau * self.tau;
        let shrink = tau2 / (tau2 + sigma * sigma);
        (self.eval(x, t), Box::new(move |v| v.scale(shrink)))
    }
}

/// Weighted denoising score matching loss with weight `sigma(t)^2`:
/// the batch mean of `sigma^2 |s(x0 + sigma z, t) + z / sigma|^2`.
pub fn dsm_loss(
    model: &dyn ScoreModel,
    x0: &[Slice2D],
    t: &[f64],
    z: &[Slice2D],
    sched: &NoiseSchedule,
) -> Result<f64> {
    if x0.len() != t.len() || x0.len() != z.len() || x0.is_empty() {
        return dim_err(format!(
            "dsm_loss: batch sizes differ or empty ({}, {}, {})",
            x0.len(),
            t.len(),
            z.len()
        ));
    }
    let mut total = 0.0;
    for ((x, &tt), zz) in x0.iter().zip(t).zip(z) {
        x.check_same_shape(zz)?;
        let sigma = sched.sigma(tt)?;
        let xt = x.add_scaled(sigma, zz);
        let s = model.eval(&xt, tt);
        let r: f64 = s
            .data()
            .iter()
            .zip(zz.data())
            .map(|(sv, zv)| {
                let d = sigma * sv + zv;
                d * d
            })
            .sum();
        total += r;
    }
    Ok(total / x0.len() as f64)
}

/// Primary (axis-3) and auxiliary (axis-1) slice datasets of a volume set.
pub fn build_slice_datasets(volumes: &[Volume3D]) -> Result<(Vec<Slice2D>, Vec<Slice2D>)> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::EmptyInput("no volumes for slice datasets".into()))?;
    let shape = first.shape();
    let mut primary = Vec::with_capacity(volumes.len() * shape.2);
    let mut auxiliary = Vec::with_capacity(volumes.len() * shape.0);
    for v in volumes {
        if v.shape() != shape {
            return dim_err(format!(
                "volume shapes differ: {:?} vs {:?}",
                v.shape(),
                shape
            ));
        }
        primary.extend(v.slices(SliceAxis::Axis3));
        auxiliary.extend(v.slices(SliceAxis::Axis1));
    }
    Ok((primary, auxiliary))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn gaussian_denoiser_pullback_matches_chain_rule() {
        let model = AnalyticGaussianScore::scalar(0.3, 0.5, sched()).unwrap();
        let x = Slice2D::from_fn((3, 4), |r, c| r as f64 - 0.5 * c as f64);
        let v = Slice2D::from_fn((3, 4), |r, c| (r * 4 + c) as f64 * 0.1 - 0.4);
        let t = 0.3;
        let sigma = sched().sigma(t).unwrap();
        let (s1, special) = model.eval_with_denoiser_pullback(&x, t, sigma);
        let (s2, generic) = model.eval_with_pullback(&x, t);
        assert_eq!(s1, s2);
        let want = v.add_scaled(sigma * sigma, &generic(&v));
        let got = special(&v);
        assert!(got.add_scaled(-1.0, &want).norm() < 1e-12 * want.norm());
    }

    /// Returns the exact conditional score of one fixed (x0, z) pair.
    struct Oracle {
        x0: Slice2D,
        sched: NoiseSchedule,
    }

    impl ScoreModel for Oracle {
        fn schedule(&self) -> &NoiseSchedule {
            &self.sched
        }
        fn eval(&self, x: &Slice2D, t: f64) -> Slice2D {
            let s = self.sched.sigma(t).unwrap();
            x.add_scaled(-1.0, &self.x0).scale(-1.0 / (s * s))
        }
        fn vjp(&self, _x: &Slice2D, t: f64, v: &Slice2D) -> Slice2D {
            let s = self.sched.sigma(t).unwrap();
            v.scale(-1.0 / (s * s))
        }
    }

    struct Zero(NoiseSchedule);

    impl ScoreModel for Zero {
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn eval(&self, x: &Slice2D, _t: f64) -> Slice2D {
            Slice2D::zeros(x.shape())
        }
        fn vjp(&self, x: &Slice2D, _t: f64, _v: &Slice2D) -> Slice2D {
            Slice2D::zeros(x.shape())
        }
    }

    #[test]
    fn analytic_score_examples() {
        let x = Slice2D::filled((2, 2), 0.7);
        assert!(analytic_score(&x, 1.0, 0.7, 1.0)
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert_eq!(
            analytic_score(&Slice2D::filled((1, 1), 2.0), 1.0, 0.0, 1.0).get(0, 0),
            -1.0
        );
        assert!(
            analytic_score(&Slice2D::filled((1, 1), 2.0), 1e8, 0.0, 1.0)
                .get(0, 0)
                .abs()
                < 1e-15
        );
    }

    #[test]
    fn analytic_vjp_example() {
        // sigma(t) = 1 needs t with geometric schedule 0.01..100: t = 0.5
        let s = NoiseSchedule::new(0.01, 100.0, 10).unwrap();
        let m = AnalyticGaussianScore::scalar(0.0, 1.0, s).unwrap();
        let v = Slice2D::filled((1, 1), 2.0);
        let out = m.vjp(&v, 0.5, &v);
        assert!((out.get(0, 0) + 1.0).abs() < 1e-12);
        assert!(m.vjp(&v, 0.5, &Slice2D::zeros((1, 1))).data()[0] == 0.0);
    }

    #[test]
    fn analytic_rejects_bad_tau() {
        assert!(AnalyticGaussianScore::scalar(0.0, 0.0, sched()).is_err());
    }

    #[test]
    fn dsm_perfect_model_is_zero() {
        let x0 = Slice2D::from_fn((3, 3), |r, c| (r * 3 + c) as f64 * 0.1);
        let z = Slice2D::from_fn((3, 3), |r, c| (r as f64 - c as f64) * 0.3);
        let m = Oracle {
            x0: x0.clone(),
            sched: sched(),
        };
        let l = dsm_loss(&m, &[x0], &[0.4], &[z], &sched()).unwrap();
        assert!(l < 1e-18, "{l}");
    }

    #[test]
    fn dsm_zero_model_is_mean_noise_energy() {
        let x0 = vec![Slice2D::zeros((2, 2)), Slice2D::filled((2, 2), 0.5)];
        let z = vec![
            Slice2D::new((2, 2), vec![1.0, -1.0, 0.5, 0.0]).unwrap(),
            Slice2D::new((2, 2), vec![2.0, 0.0, 0.0, 1.0]).unwrap(),
        ];
        let l = dsm_loss(&Zero(sched()), &x0, &[0.1, 0.9], &z, &sched()).unwrap();
        let expected = (2.25 + 5.0) / 2.0;
        assert!((l - expected).abs() < 1e-12);

        let lp = dsm_loss(
            &Zero(sched()),
            &[x0[1].clone(), x0[0].clone()],
            &[0.9, 0.1],
            &[z[1].clone(), z[0].clone()],
            &sched(),
        )
        .unwrap();
        assert_eq!(l, lp);
    }

    #[test]
    fn datasets_count_and_content() {
        let v = Volume3D::from_fn((16, 16, 16), |a, b, c| (a * 256 + b * 16 + c) as f64);
        let (p, a) = build_slice_datasets(std::slice::from_ref(&v)).unwrap();
        assert_eq!((p.len(), a.len()), (16, 16));
        for (j, s) in p.iter().enumerate() {
            assert_eq!(s, &v.slice_extract(SliceAxis::Axis3, j).unwrap());
        }
        assert!(build_slice_datasets(&[]).is_err());
        let w = Volume3D::zeros((16, 16, 8));
        assert!(build_slice_datasets(&[v, w]).is_err());
    }
}
