//! Parallel-beam projector.
//!
//! A ray at angle `theta` and detector offset `s` is the line
//! `s (cos theta, sin theta) + u (-sin theta, cos theta)` in centred pixel
//! coordinates `(x, y) = (col - c, row - c)` with `c = (w - 1) / 2`. It is
//! sampled at unit steps in `u` with bilinear interpolation; pixels whose
//! centre lies outside the inscribed disc of radius `c` are ignored. Both
//! directions walk the same weights, so the adjoint is the exact transpose.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{Measurement2D, MeasurementOperator};
use crate::error::{dim_err, Error, Result};
use crate::volume::Slice2D;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadonGeometry {
    size: usize,
    angles: Vec<f64>,
}

impl RadonGeometry {
    /// `n_angles` views spaced uniformly over `[0, pi)`, `size` detectors.
    pub fn new(size: usize, n_angles: usize) -> Result<Self> {
        if size == 0 || n_angles == 0 {
            return Err(Error::Domain(
                "radon geometry needs size and n_angles > 0".into(),
            ));
        }
        Ok(Self {
            size,
            angles: (0..n_angles)
                .map(|k| k as f64 * PI / n_angles as f64)
                .collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn n_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn angles(&self) -> &[f64] {
        &self.angles
    }

    fn samples_per_ray(&self) -> usize {
        self.size + 4
    }

    fn in_support(&self, r: usize, c: usize) -> bool {
        let ctr = (self.size as f64 - 1.0) / 2.0;
        let (dy, dx) = (r as f64 - ctr, c as f64 - ctr);
        dy * dy + dx * dx <= ctr * ctr + 1e-9
    }

    /// Calls `f(sinogram_index, pixel_index, weight)` for every nonzero
    /// interpolation weight of ray `(angle, detector)`.
    fn for_each_ray_weight(&self, angle: usize, det: usize, mut f: impl FnMut(usize, f64)) {
        let w = self.size;
        let ctr = (w as f64 - 1.0) / 2.0;
        let (sin, cos) = self.angles[angle].sin_cos();
        let s = det as f64 - ctr;
        let n_u = self.samples_per_ray();
        let u_ctr = (n_u as f64 - 1.0) / 2.0;
        for m in 0..n_u {
            let u = m as f64 - u_ctr;
            let col = s * cos - u * sin + ctr;
            let row = s * sin + u * cos + ctr;
            let (r0, c0) = (row.floor(), col.floor());
            let (fr, fc) = (row - r0, col - c0);
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    let (pr, pc) = (r0 as i64 + dr, c0 as i64 + dc);
                    let wt = wr * wc;
                    if wt == 0.0 || pr < 0 || pc < 0 || pr >= w as i64 || pc >= w as i64 {
                        continue;
                    }
                    let (pr, pc) = (pr as usize, pc as usize);
                    if self.in_support(pr, pc) {
                        f(pr * w + pc, wt);
                    }
                }
            }
        }
    }
}

pub fn radon_apply(x: &Slice2D, geom: &RadonGeometry) -> Result<Measurement2D> {
    if x.rows() != x.cols() {
        return dim_err(format!("radon needs a square slice, got {:?}", x.shape()));
    }
    if x.rows() != geom.size {
        return dim_err(format!(
            "slice width {} does not match geometry size {}",
            x.rows(),
            geom.size
        ));
    }
    let w = geom.size;
    let mut sino = vec![0.0; geom.n_angles() * w];
    let data = x.data();
    for a in 0..geom.n_angles() {
        for d in 0..w {
            let mut acc = 0.0;
            geom.for_each_ray_weight(a, d, |p, wt| acc += wt * data[p]);
            sino[a * w + d] = acc;
        }
    }
    Measurement2D::real((geom.n_angles(), w), sino)
}

pub fn radon_adjoint(m: &Measurement2D, geom: &RadonGeometry) -> Result<Slice2D> {
    let w = geom.size;
    let Some(sino) = m.as_real() else {
        return dim_err("radon adjoint needs a real sinogram");
    };
    if m.shape() != (geom.n_angles(), w) {
        return dim_err(format!(
            "sinogram {:?} does not match geometry ({}, {w})",
            m.shape(),
            geom.n_angles()
        ));
    }
    let mut out = vec![0.0; w * w];
    for a in 0..geom.n_angles() {
        for d in 0..w {
            let v = sino[a * w + d];
            if v != 0.0 {
                geom.for_each_ray_weight(a, d, |p, wt| out[p] += wt * v);
            }
        }
    }
    Slice2D::new((w, w), out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RadonOperator {
    geom: RadonGeometry,
}

impl RadonOperator {
    pub fn new(geom: RadonGeometry) -> Self {
        Self { geom }
    }

    pub fn geometry(&self) -> &RadonGeometry {
        &self.geom
    }
}

impl MeasurementOperator for RadonOperator {
    fn input_shape(&self) -> (usize, usize) {
        (self.geom.size, self.geom.size)
    }
    fn output_shape(&self) -> (usize, usize) {
        (self.geom.n_angles(), self.geom.size)
    }
    fn is_complex(&self) -> bool {
        false
    }
    fn apply(&self, x: &Slice2D) -> Result<Measurement2D> {
        radon_apply(x, &self.geom)
    }
    fn adjoint(&self, m: &Measurement2D) -> Result<Slice2D> {
        radon_adjoint(m, &self.geom)
    }
}
