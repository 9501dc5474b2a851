//! Image quality metrics: PSNR over a whole volume and SSIM averaged over
//! the 2D slices of one direction.
//!
//! Both metrics clip their inputs to `[0, data_range]` first. SSIM uses an
//! 11x11 Gaussian window with standard deviation 1.5, `K1 = 0.01`,
//! `K2 = 0.03`, and averages the SSIM map over the positions where the window
//! fits entirely inside the slice.

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{dim_err, Error, Result};
use crate::volume::{Slice2D, Volume3D};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Volume axis held fixed while slicing; the three directions of a volume.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Axis1,
    Axis2,
    Axis3,
}

impl Direction {
    pub const ALL: [Direction; 3] = [Direction::Axis1, Direction::Axis2, Direction::Axis3];

    fn count(self, (d1, d2, d3): (usize, usize, usize)) -> usize {
        match self {
            Direction::Axis1 => d1,
            Direction::Axis2 => d2,
            Direction::Axis3 => d3,
        }
    }
}

/// Slice `index` of `v` with axis `dir` held fixed, remaining axes in order.
pub fn direction_slice(v: &Volume3D, dir: Direction, index: usize) -> Slice2D {
    let (d1, d2, d3) = v.shape();
    match dir {
        Direction::Axis1 => Slice2D::from_fn((d2, d3), |b, c| v.get(index, b, c)),
        Direction::Axis2 => Slice2D::from_fn((d1, d3), |a, c| v.get(a, index, c)),
        Direction::Axis3 => Slice2D::from_fn((d1, d2), |a, b| v.get(a, b, index)),
    }
}

fn check_range(data_range: f64) -> Result<()> {
    if !(data_range > 0.0 && data_range.is_finite()) {
        return Err(Error::Domain(format!(
            "data_range must be positive, got {data_range}"
        )));
    }
    Ok(())
}

/// `20 log10(range) - 10 log10(MSE)`; `+inf` for identical inputs.
pub fn psnr3d(x: &Volume3D, reference: &Volume3D, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    if x.shape() != reference.shape() {
        return dim_err(format!(
            "psnr: shapes differ {:?} vs {:?}",
            x.shape(),
            reference.shape()
        ));
    }
    if x.is_empty() {
        return Err(Error::EmptyInput("psnr of an empty volume".into()));
    }
    let clip = |v: f64| v.clamp(0.0, data_range);
    let sse: f64 = x
        .data()
        .iter()
        .zip(reference.data())
        .map(|(&a, &b)| (clip(a) - clip(b)).powi(2))
        .sum();
    let mse = sse / x.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * data_range.log10() - 10.0 * mse.log10())
}

fn gaussian_taps() -> [f64; SSIM_WINDOW] {
    let mut taps = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (k, t) in taps.iter_mut().enumerate() {
        let d = k as f64 - half;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= total);
    taps
}

/// Valid-mode separable filtering with the SSIM window.
fn filter_valid(data: &[f64], (h, w): (usize, usize), taps: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        let line = &data[r * w..(r + 1) * w];
        for c in 0..ow {
            rows[r * ow + c] = taps
                .iter()
                .zip(&line[c..c + SSIM_WINDOW])
                .map(|(t, v)| t * v)
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for (k, t) in taps.iter().enumerate() {
            let src = &rows[(r + k) * ow..(r + k + 1) * ow];
            for (o, v) in out[r * ow..(r + 1) * ow].iter_mut().zip(src) {
                *o += t * v;
            }
        }
    }
    out
}

pub fn ssim2d(a: &Slice2D, b: &Slice2D, data_range: f64) -> Result<f64> {
    check_range(data_range)?;
    a.check_same_shape(b)?;
    let (h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return dim_err(format!(
            "ssim needs slices of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        ));
    }
    let clip = |v: f64| v.clamp(0.0, data_range);
    let xa: Vec<f64> = a.data().iter().map(|&v| clip(v)).collect();
    let xb: Vec<f64> = b.data().iter().map(|&v| clip(v)).collect();
    let aa: Vec<f64> = xa.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = xb.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = xa.iter().zip(&xb).map(|(p, q)| p * q).collect();
    let taps = gaussian_taps();
    let [mu_a, mu_b, e_aa, e_bb, e_ab] =
        [&xa, &xb, &aa, &bb, &ab].map(|d| filter_valid(d, (h, w), &taps));
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let n = mu_a.len();
    let mut total = 0.0;
    for k in 0..n {
        let (ma, mb) = (mu_a[k], mu_b[k]);
        let va = e_aa[k] - ma * ma;
        let vb = e_bb[k] - mb * mb;
        let cov = e_ab[k] - ma * mb;
        total +=
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Mean of [`ssim2d`] over every slice in direction `dir`.
pub fn ssim_direction_mean(
    x: &Volume3D,
    reference: &Volume3D,
    dir: Direction,
    data_range: f64,
) -> Result<f64> {
    if x.shape() != reference.shape() {
        return dim_err(format!(
            "ssim: shapes differ {:?} vs {:?}",
            x.shape(),
            reference.shape()
        ));
    }
    let n = dir.count(x.shape());
    if n == 0 {
        return Err(Error::EmptyInput("no slices in this direction".into()));
    }
    let per_slice: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|j| {
            ssim2d(
                &direction_slice(x, dir, j),
                &direction_slice(reference, dir, j),
                data_range,
            )
        })
        .collect::<Result<_>>()?;
    Ok(per_slice.iter().sum::<f64>() / n as f64)
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(v),
        Raw::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Raw::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t:?}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// dB; identical volumes give `+inf`, written as `"inf"` in JSON.
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr_3d: f64,
    pub ssim_axis1: f64,
    pub ssim_axis2: f64,
    pub ssim_axis3: f64,
}

impl MetricReport {
    pub fn compute(x: &Volume3D, reference: &Volume3D, data_range: f64) -> Result<Self> {
        Ok(Self {
            psnr_3d: psnr3d(x, reference, data_range)?,
            ssim_axis1: ssim_direction_mean(x, reference, Direction::Axis1, data_range)?,
            ssim_axis2: ssim_direction_mean(x, reference, Direction::Axis2, data_range)?,
            ssim_axis3: ssim_direction_mean(x, reference, Direction::Axis3, data_range)?,
        })
    }

    pub fn worst_ssim(&self) -> f64 {
        self.ssim_axis1.min(self.ssim_axis2).min(self.ssim_axis3)
    }

    pub const CSV_HEADER: &'static str = "run_id,psnr_3d,ssim_axis1,ssim_axis2,ssim_axis3";

    pub fn csv_row(&self, run_id: &str) -> String {
        let psnr = if self.psnr_3d.is_infinite() {
            "inf".to_string()
        } else {
            format!("{}", self.psnr_3d)
        };
        format!(
            "{run_id},{psnr},{},{},{}",
            self.ssim_axis1, self.ssim_axis2, self.ssim_axis3
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_examples() {
        let r = Volume3D::from_fn((2, 3, 4), |_, _, _| 0.1);
        let x = Volume3D::zeros((2, 3, 4));
        assert!((psnr3d(&x, &r, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr3d(&r, &r, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(psnr3d(&x, &r, 1.0).unwrap(), psnr3d(&r, &x, 1.0).unwrap());
        assert!(psnr3d(&x, &Volume3D::zeros((2, 3, 5)), 1.0).is_err());
    }

    #[test]
    fn psnr_clips_to_range() {
        let r = Volume3D::from_fn((2, 2, 2), |_, _, _| 1.0);
        let x = Volume3D::from_fn((2, 2, 2), |_, _, _| 1.7);
        assert_eq!(psnr3d(&x, &r, 1.0).unwrap(), f64::INFINITY);
    }

    #[test]
    fn ssim_constant_patches() {
        let a = Slice2D::zeros((12, 13));
        let b = Slice2D::filled((12, 13), 1.0);
        let c1 = 1e-4;
        let got = ssim2d(&a, &b, 1.0).unwrap();
        assert!((got - c1 / (1.0 + c1)).abs() < 1e-12);
        assert!((ssim2d(&b, &b, 1.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ssim_symmetric_and_bounded() {
        let a = Slice2D::from_fn((16, 14), |r, c| ((r * 5 + c * 3) % 7) as f64 / 7.0);
        let b = Slice2D::from_fn((16, 14), |r, c| ((r * 2 + c) % 5) as f64 / 5.0);
        let ab = ssim2d(&a, &b, 1.0).unwrap();
        assert_eq!(ab, ssim2d(&b, &a, 1.0).unwrap());
        assert!((-1.0..=1.0).contains(&ab) && ab < 1.0);
    }

    #[test]
    fn ssim_rejects_small_slices() {
        let a = Slice2D::zeros((10, 20));
        assert!(ssim2d(&a, &a, 1.0).is_err());
    }

    #[test]
    fn direction_mean_of_two_slices() {
        let r = Volume3D::from_fn((2, 12, 12), |a, b, c| ((a + b * c) % 9) as f64 / 9.0);
        let x = Volume3D::from_fn((2, 12, 12), |a, b, c| ((a * 3 + b + c) % 7) as f64 / 7.0);
        let s0 = ssim2d(
            &direction_slice(&x, Direction::Axis1, 0),
            &direction_slice(&r, Direction::Axis1, 0),
            1.0,
        )
        .unwrap();
        let s1 = ssim2d(
            &direction_slice(&x, Direction::Axis1, 1),
            &direction_slice(&r, Direction::Axis1, 1),
            1.0,
        )
        .unwrap();
        let m = ssim_direction_mean(&x, &r, Direction::Axis1, 1.0).unwrap();
        assert!((m - 0.5 * (s0 + s1)).abs() < 1e-15);
    }

    #[test]
    fn report_json_and_csv() {
        let v = Volume3D::from_fn((11, 11, 11), |a, b, c| ((a + b + c) % 4) as f64 / 4.0);
        let rep = MetricReport::compute(&v, &v, 1.0).unwrap();
        assert_eq!(rep.psnr_3d, f64::INFINITY);
        assert!((rep.worst_ssim() - 1.0).abs() < 1e-12);
        let json = serde_json::to_string(&rep).unwrap();
        assert!(json.contains("\"psnr_3d\":\"inf\""));
        let back: MetricReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, rep);
        assert!(rep.csv_row("r").starts_with("r,inf,"));
    }
}
