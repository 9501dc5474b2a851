//! Slice-thickness degradation: groups of `M` consecutive lines averaged
//! into one.

use serde::{Deserialize, Serialize};

use super::{Measurement2D, MeasurementOperator};
use crate::error::{dim_err, Error, Result};
use crate::volume::Slice2D;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeVariant {
    /// Group sum divided by `M`.
    Mean,
    /// Group sum divided by `sqrt(M)`.
    RootM,
}

impl MergeVariant {
    fn divisor(self, m: usize) -> f64 {
        match self {
            MergeVariant::Mean => m as f64,
            MergeVariant::RootM => (m as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeAxis {
    Rows,
    Cols,
}

fn merged_shape(shape: (usize, usize), m: usize, axis: MergeAxis) -> Result<(usize, usize)> {
    if m == 0 {
        return Err(Error::Domain("merge size must be >= 1".into()));
    }
    let extent = match axis {
        MergeAxis::Rows => shape.0,
        MergeAxis::Cols => shape.1,
    };
    if extent % m != 0 {
        return dim_err(format!(
            "extent {extent} along {axis:?} is not divisible by merge size {m}"
        ));
    }
    Ok(match axis {
        MergeAxis::Rows => (shape.0 / m, shape.1),
        MergeAxis::Cols => (shape.0, shape.1 / m),
    })
}

pub fn zmerge_apply(
    x: &Slice2D,
    m: usize,
    variant: MergeVariant,
    axis: MergeAxis,
) -> Result<Measurement2D> {
    let out_shape = merged_shape(x.shape(), m, axis)?;
    let d = variant.divisor(m);
    let mut out = vec![0.0; out_shape.0 * out_shape.1];
    for r in 0..x.rows() {
        for c in 0..x.cols() {
            let (orow, ocol) = match axis {
                MergeAxis::Rows => (r / m, c),
                MergeAxis::Cols => (r, c / m),
            };
            out[orow * out_shape.1 + ocol] += x.get(r, c);
        }
    }
    out.iter_mut().for_each(|v| *v /= d);
    Measurement2D::real(out_shape, out)
}

pub fn zmerge_adjoint(
    y: &Measurement2D,
    in_shape: (usize, usize),
    m: usize,
    variant: MergeVariant,
    axis: MergeAxis,
) -> Result<Slice2D> {
    let out_shape = merged_shape(in_shape, m, axis)?;
    let Some(vals) = y.as_real() else {
        return dim_err("merge adjoint needs a real measurement");
    };
    if y.shape() != out_shape {
        return dim_err(format!(
            "merge adjoint: measurement {:?}, expected {:?}",
            y.shape(),
            out_shape
        ));
    }
    let d = variant.divisor(m);
    Ok(Slice2D::from_fn(in_shape, |r, c| {
        let (orow, ocol) = match axis {
            MergeAxis::Rows => (r / m, c),
            MergeAxis::Cols => (r, c / m),
        };
        vals[orow * out_shape.1 + ocol] / d
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ZMergeOperator {
    input_shape: (usize, usize),
    output_shape: (usize, usize),
    merge: usize,
    variant: MergeVariant,
    axis: MergeAxis,
}

impl ZMergeOperator {
    pub fn new(
        input_shape: (usize, usize),
        merge: usize,
        variant: MergeVariant,
        axis: MergeAxis,
    ) -> Result<Self> {
        Ok(Self {
            output_shape: merged_shape(input_shape, merge, axis)?,
            input_shape,
            merge,
            variant,
            axis,
        })
    }

    pub fn merge(&self) -> usize {
        self.merge
    }

    pub fn variant(&self) -> MergeVariant {
        self.variant
    }
}

impl MeasurementOperator for ZMergeOperator {
    fn input_shape(&self) -> (usize, usize) {
        self.input_shape
    }
    fn output_shape(&self) -> (usize, usize) {
        self.output_shape
    }
    fn is_complex(&self) -> bool {
        false
    }
    fn apply(&self, x: &Slice2D) -> Result<Measurement2D> {
        self.check_input(x)?;
        zmerge_apply(x, self.merge, self.variant, self.axis)
    }
    fn adjoint(&self, m: &Measurement2D) -> Result<Slice2D> {
        zmerge_adjoint(m, self.input_shape, self.merge, self.variant, self.axis)
    }
}
