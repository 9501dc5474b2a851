//! Per-slice linear measurement operators and their adjoints.

pub mod kspace;
pub mod mask;
pub mod radon;
pub mod zmerge;

use std::sync::Arc;

use num_complex::{Complex32, Complex64};

use crate::container::{Container, Payload};
use crate::error::{dim_err, Error, Result};
use crate::volume::Slice2D;

pub use kspace::KSpaceOperator;
pub use mask::{poisson_mask, KSpaceMask};
pub use radon::{RadonGeometry, RadonOperator};
pub use zmerge::{MergeAxis, MergeVariant, ZMergeOperator};

#[derive(Clone, Debug, PartialEq)]
pub enum MeasurementData {
    Real(Vec<f64>),
    Complex(Vec<Complex64>),
}

/// Output of a [`MeasurementOperator`] for one slice.
#[derive(Clone, Debug, PartialEq)]
pub struct Measurement2D {
    shape: (usize, usize),
    data: MeasurementData,
}

impl Measurement2D {
    pub fn real(shape: (usize, usize), data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 {
            return dim_err(format!(
                "measurement shape {shape:?} vs {} values",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data: MeasurementData::Real(data),
        })
    }

    pub fn complex(shape: (usize, usize), data: Vec<Complex64>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 {
            return dim_err(format!(
                "measurement shape {shape:?} vs {} values",
                data.len()
            ));
        }
        Ok(Self {
            shape,
            data: MeasurementData::Complex(data),
        })
    }

    pub fn zeros_like(&self) -> Self {
        let data = match &self.data {
            MeasurementData::Real(v) => MeasurementData::Real(vec![0.0; v.len()]),
            MeasurementData::Complex(v) => {
                MeasurementData::Complex(vec![Complex64::new(0.0, 0.0); v.len()])
            }
        };
        Self {
            shape: self.shape,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn data(&self) -> &MeasurementData {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut MeasurementData {
        &mut self.data
    }

    pub fn is_complex(&self) -> bool {
        matches!(self.data, MeasurementData::Complex(_))
    }

    pub fn as_real(&self) -> Option<&[f64]> {
        match &self.data {
            MeasurementData::Real(v) => Some(v),
            MeasurementData::Complex(_) => None,
        }
    }

    pub fn as_complex(&self) -> Option<&[Complex64]> {
        match &self.data {
            MeasurementData::Complex(v) => Some(v),
            MeasurementData::Real(_) => None,
        }
    }

    /// `self + alpha * other`.
    pub fn add_scaled(&self, alpha: f64, other: &Measurement2D) -> Result<Measurement2D> {
        if self.shape != other.shape {
            return dim_err(format!(
                "measurement shapes differ: {:?} vs {:?}",
                self.shape, other.shape
            ));
        }
        let data = match (&self.data, &other.data) {
            (MeasurementData::Real(a), MeasurementData::Real(b)) => {
                MeasurementData::Real(a.iter().zip(b).map(|(x, y)| x + alpha * y).collect())
            }
            (MeasurementData::Complex(a), MeasurementData::Complex(b)) => {
                MeasurementData::Complex(a.iter().zip(b).map(|(x, y)| x + y * alpha).collect())
            }
            _ => return dim_err("cannot combine real and complex measurements"),
        };
        Ok(Measurement2D {
            shape: self.shape,
            data,
        })
    }

    pub fn scale(&self, alpha: f64) -> Measurement2D {
        let data = match &self.data {
            MeasurementData::Real(a) => {
                MeasurementData::Real(a.iter().map(|x| alpha * x).collect())
            }
            MeasurementData::Complex(a) => {
                MeasurementData::Complex(a.iter().map(|x| x * alpha).collect())
            }
        };
        Measurement2D {
            shape: self.shape,
            data,
        }
    }

    /// Real inner product `Re sum a_k conj(b_k)`.
    pub fn dot(&self, other: &Measurement2D) -> Result<f64> {
        match (&self.data, &other.data) {
            _ if self.shape != other.shape => dim_err("measurement shapes differ"),
            (MeasurementData::Real(a), MeasurementData::Real(b)) => {
                Ok(a.iter().zip(b).map(|(x, y)| x * y).sum())
            }
            (MeasurementData::Complex(a), MeasurementData::Complex(b)) => {
                Ok(a.iter().zip(b).map(|(x, y)| (x * y.conj()).re).sum())
            }
            _ => dim_err("cannot pair real and complex measurements"),
        }
    }

    pub fn norm_sq(&self) -> f64 {
        match &self.data {
            MeasurementData::Real(a) => a.iter().map(|x| x * x).sum(),
            MeasurementData::Complex(a) => a.iter().map(|x| x.norm_sqr()).sum(),
        }
    }

    /// Adds `sigma * n` elementwise; complex values take one draw per part.
    pub fn add_noise(&mut self, sigma: f64, draws: &[f64]) {
        match &mut self.data {
            MeasurementData::Real(a) => {
                for (x, n) in a.iter_mut().zip(draws) {
                    *x += sigma * n;
                }
            }
            MeasurementData::Complex(a) => {
                for (x, n) in a.iter_mut().zip(draws.chunks_exact(2)) {
                    *x += Complex64::new(sigma * n[0], sigma * n[1]);
                }
            }
        }
    }

    /// Number of scalar draws `add_noise` consumes.
    pub fn noise_len(&self) -> usize {
        let n = self.shape.0 * self.shape.1;
        if self.is_complex() {
            2 * n
        } else {
            n
        }
    }
}

/// A linear map from a `(h, w)` slice to a measurement, with its adjoint
/// under the real inner product.
pub trait MeasurementOperator: Send + Sync {
    fn input_shape(&self) -> (usize, usize);
    fn output_shape(&self) -> (usize, usize);
    fn is_complex(&self) -> bool;
    fn apply(&self, x: &Slice2D) -> Result<Measurement2D>;
    fn adjoint(&self, m: &Measurement2D) -> Result<Slice2D>;

    fn check_input(&self, x: &Slice2D) -> Result<()> {
        if x.shape() != self.input_shape() {
            return dim_err(format!(
                "operator expects input {:?}, got {:?}",
                self.input_shape(),
                x.shape()
            ));
        }
        Ok(())
    }

    fn check_measurement(&self, m: &Measurement2D) -> Result<()> {
        if m.shape() != self.output_shape() || m.is_complex() != self.is_complex() {
            return dim_err(format!(
                "operator expects {} measurement {:?}, got {} {:?}",
                if self.is_complex() { "complex" } else { "real" },
                self.output_shape(),
                if m.is_complex() { "complex" } else { "real" },
                m.shape()
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IdentityOperator {
    shape: (usize, usize),
}

impl IdentityOperator {
    pub fn new(shape: (usize, usize)) -> Self {
        Self { shape }
    }
}

impl MeasurementOperator for IdentityOperator {
    fn input_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.shape
    }
    fn is_complex(&self) -> bool {
        false
    }
    fn apply(&self, x: &Slice2D) -> Result<Measurement2D> {
        self.check_input(x)?;
        Measurement2D::real(x.shape(), x.data().to_vec())
    }
    fn adjoint(&self, m: &Measurement2D) -> Result<Slice2D> {
        self.check_measurement(m)?;
        Slice2D::new(self.shape, m.as_real().expect("real").to_vec())
    }
}

/// `2 A^T (A x - y)`, the gradient of `|A x - y|^2` in `x`.
pub fn residual_grad(
    op: &dyn MeasurementOperator,
    x_hat: &Slice2D,
    y: &Measurement2D,
) -> Result<Slice2D> {
    let r = op.apply(x_hat)?.add_scaled(-1.0, y)?;
    Ok(op.adjoint(&r.scale(2.0))?)
}

/// Packs per-slice measurements into a container of shape
/// `[rows, cols, n_slices]` with the slice index fastest, stored as f32 or
/// c64 to match their kind. A single measurement is `[rows, cols, 1]`.
pub fn stack_to_container(stack: &[Measurement2D]) -> Result<Container> {
    let Some(first) = stack.first() else {
        return Err(Error::EmptyInput("no measurements to store".into()));
    };
    let (r, c) = first.shape();
    if let Some(bad) = stack
        .iter()
        .find(|m| m.shape() != first.shape() || m.is_complex() != first.is_complex())
    {
        return dim_err(format!(
            "measurement stack mixes {:?} and {:?}",
            first.shape(),
            bad.shape()
        ));
    }
    let n = stack.len();
    let payload = match first.data() {
        MeasurementData::Complex(_) => Payload::C64(
            (0..r * c * n)
                .map(|k| {
                    let v = stack[k % n].as_complex().expect("complex")[k / n];
                    Complex32::new(v.re as f32, v.im as f32)
                })
                .collect(),
        ),
        MeasurementData::Real(_) => Payload::F32(
            (0..r * c * n)
                .map(|k| stack[k % n].as_real().expect("real")[k / n] as f32)
                .collect(),
        ),
    };
    Ok(Container {
        shape: [r, c, n],
        payload,
    })
}

/// Inverse of [`stack_to_container`].
pub fn stack_from_container(c: &Container) -> Result<Vec<Measurement2D>> {
    let [rows, cols, n] = c.shape;
    let per = rows * cols;
    (0..n)
        .map(|j| match &c.payload {
            Payload::F32(v) => Measurement2D::real(
                (rows, cols),
                (0..per).map(|p| v[p * n + j] as f64).collect(),
            ),
            Payload::C64(v) => Measurement2D::complex(
                (rows, cols),
                (0..per)
                    .map(|p| {
                        let x = v[p * n + j];
                        Complex64::new(x.re as f64, x.im as f64)
                    })
                    .collect(),
            ),
        })
        .collect()
}

/// Largest eigenvalue of `A^T A` by power iteration from a seeded start.
pub fn estimate_norm_sq(op: &dyn MeasurementOperator, iterations: usize, seed: u64) -> Result<f64> {
    use rand::SeedableRng;
    let shape = op.input_shape();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut x = Slice2D::new(shape, crate::rng::normal_vec(&mut rng, shape.0 * shape.1))?;
    let mut estimate = 0.0;
    for _ in 0..iterations.max(1) {
        let n = x.norm();
        if n == 0.0 {
            return Ok(0.0);
        }
        x = x.scale(1.0 / n);
        let next = op.adjoint(&op.apply(&x)?)?;
        estimate = x.dot(&next);
        x = next;
    }
    Ok(estimate)
}

/// One operator per primary slice, or one shared by all of them.
#[derive(Clone)]
pub struct OperatorStack {
    ops: Vec<Arc<dyn MeasurementOperator>>,
}

impl OperatorStack {
    pub fn shared(op: Arc<dyn MeasurementOperator>) -> Self {
        Self { ops: vec![op] }
    }

    pub fn per_slice(ops: Vec<Arc<dyn MeasurementOperator>>) -> Self {
        assert!(
            !ops.is_empty(),
            "operator stack needs at least one operator"
        );
        Self { ops }
    }

    pub fn get(&self, j: usize) -> &dyn MeasurementOperator {
        if self.ops.len() == 1 {
            self.ops[0].as_ref()
        } else {
            self.ops[j].as_ref()
        }
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    pub fn is_shared(&self) -> bool {
        self.ops.len() == 1
    }
}
