use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use super::mask::KSpaceMask;
use super::{Measurement2D, MeasurementOperator};
use crate::error::{dim_err, Result};
use crate::volume::Slice2D;

/// Planned forward and inverse transforms for one `(h, w)` grid.
#[derive(Clone)]
pub struct Fft2 {
    shape: (usize, usize),
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("shape", &self.shape).finish()
    }
}

fn roll(data: &[Complex64], (h, w): (usize, usize), sr: usize, sc: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..h {
        let orow = (r + sr) % h;
        for c in 0..w {
            out[orow * w + (c + sc) % w] = data[r * w + c];
        }
    }
    out
}

impl Fft2 {
    pub fn new(shape: (usize, usize)) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            shape,
            row_fwd: planner.plan_fft_forward(shape.1),
            row_inv: planner.plan_fft_inverse(shape.1),
            col_fwd: planner.plan_fft_forward(shape.0),
            col_inv: planner.plan_fft_inverse(shape.0),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    fn raw(&self, data: &mut [Complex64], inverse: bool) {
        let (h, w) = self.shape;
        let (rows, cols) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        rows.process(data);
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = data[r * w + c];
            }
            cols.process(&mut column);
            for r in 0..h {
                data[r * w + c] = column[r];
            }
        }
        let scale = 1.0 / ((h * w) as f64).sqrt();
        data.iter_mut().for_each(|v| *v *= scale);
    }

    /// Orthonormal DFT with the zero frequency at `(h/2, w/2)`.
    pub fn forward_centered(&self, data: &[Complex64]) -> Vec<Complex64> {
        let (h, w) = self.shape;
        let mut buf = roll(data, self.shape, h - h / 2, w - w / 2);
        self.raw(&mut buf, false);
        roll(&buf, self.shape, h / 2, w / 2)
    }

    /// Inverse of [`Fft2::forward_centered`].
    pub fn inverse_centered(&self, data: &[Complex64]) -> Vec<Complex64> {
        let (h, w) = self.shape;
        let mut buf = roll(data, self.shape, h - h / 2, w - w / 2);
        self.raw(&mut buf, true);
        roll(&buf, self.shape, h / 2, w / 2)
    }
}

/// Centered orthonormal 2D DFT followed by a sampling mask.
#[derive(Clone, Debug)]
pub struct KSpaceOperator {
    mask: KSpaceMask,
    fft: Fft2,
}

impl KSpaceOperator {
    pub fn new(mask: KSpaceMask) -> Self {
        Self {
            fft: Fft2::new(mask.shape()),
            mask,
        }
    }

    pub fn mask(&self) -> &KSpaceMask {
        &self.mask
    }
}

pub fn kspace_apply(x: &Slice2D, mask: &KSpaceMask) -> Result<Measurement2D> {
    KSpaceOperator::new(mask.clone()).apply(x)
}

pub fn kspace_adjoint(m: &Measurement2D, mask: &KSpaceMask) -> Result<Slice2D> {
    KSpaceOperator::new(mask.clone()).adjoint(m)
}

impl MeasurementOperator for KSpaceOperator {
    fn input_shape(&self) -> (usize, usize) {
        self.mask.shape()
    }
    fn output_shape(&self) -> (usize, usize) {
        self.mask.shape()
    }
    fn is_complex(&self) -> bool {
        true
    }

    fn apply(&self, x: &Slice2D) -> Result<Measurement2D> {
        if x.shape() != self.mask.shape() {
            return dim_err(format!(
                "k-space mask {:?} does not match slice {:?}",
                self.mask.shape(),
                x.shape()
            ));
        }
        let input: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        let mut k = self.fft.forward_centered(&input);
        for (v, &keep) in k.iter_mut().zip(self.mask.data()) {
            if !keep {
                *v = Complex64::new(0.0, 0.0);
            }
        }
        Measurement2D::complex(x.shape(), k)
    }

    fn adjoint(&self, m: &Measurement2D) -> Result<Slice2D> {
        self.check_measurement(m)?;
        let filled: Vec<Complex64> = m
            .as_complex()
            .expect("complex")
            .iter()
            .zip(self.mask.data())
            .map(|(&v, &keep)| if keep { v } else { Complex64::new(0.0, 0.0) })
            .collect();
        let img = self.fft.inverse_centered(&filled);
        Slice2D::new(self.mask.shape(), img.iter().map(|v| v.re).collect())
    }
}
