//! Synthetic ellipsoid phantoms and retrospective measurement simulation.

use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::operators::mask::DEFAULT_CENTER_FRAC;
use crate::operators::{
    poisson_mask, KSpaceMask, KSpaceOperator, Measurement2D, MeasurementData, MeasurementOperator,
    MergeAxis, MergeVariant, OperatorStack, RadonGeometry, RadonOperator, ZMergeOperator,
};
use crate::rng::{normal_vec, stream, Purpose, StreamKey};
use crate::volume::{Slice2D, SliceAxis, Volume3D};

pub const MIN_PHANTOM_EXTENT: usize = 8;

fn default_intensity() -> [f64; 2] {
    [0.2, 1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub n_ellipsoids: usize,
    #[serde(default = "default_intensity")]
    pub intensity: [f64; 2],
    #[serde(default)]
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(shape: [usize; 3], n_ellipsoids: usize, seed: u64) -> Self {
        Self {
            shape,
            n_ellipsoids,
            intensity: default_intensity(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.shape.iter().any(|&d| d < MIN_PHANTOM_EXTENT) {
            return dim_err(format!(
                "phantom extents must be >= {MIN_PHANTOM_EXTENT}, got {:?}",
                self.shape
            ));
        }
        let [lo, hi] = self.intensity;
        if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!(
                "intensity range must satisfy 0 <= lo <= hi <= 1, got {:?}",
                self.intensity
            )));
        }
        Ok(())
    }
}

struct Ellipsoid {
    center: [f64; 3],
    semi: [f64; 3],
    /// Rows are the body axes in volume coordinates.
    rot: [[f64; 3]; 3],
    value: f64,
}

fn random_rotation(rng: &mut ChaCha8Rng) -> [[f64; 3]; 3] {
    // uniform unit quaternion
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (
        a * (2.0 * PI * u2).sin(),
        a * (2.0 * PI * u2).cos(),
        b * (2.0 * PI * u3).sin(),
        b * (2.0 * PI * u3).cos(),
    );
    [
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - z * w),
            2.0 * (x * z + y * w),
        ],
        [
            2.0 * (x * y + z * w),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - x * w),
        ],
        [
            2.0 * (x * z - y * w),
            2.0 * (y * z + x * w),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]
}

impl Ellipsoid {
    fn random(rng: &mut ChaCha8Rng, shape: [usize; 3], first: bool, intensity: [f64; 2]) -> Self {
        let ext = shape.map(|d| d as f64);
        let (lo, hi) = if first { (0.28, 0.42) } else { (0.06, 0.22) };
        let spread = if first { 0.05 } else { 0.22 };
        let center = [0, 1, 2].map(|k| ext[k] * (0.5 + rng.gen_range(-spread..=spread)));
        let semi = [0, 1, 2].map(|k| ext[k] * rng.gen_range(lo..=hi));
        Self {
            center,
            semi,
            rot: random_rotation(rng),
            value: rng.gen_range(intensity[0]..=intensity[1]),
        }
    }

    /// Occupancy in `[0, 1]` with a cosine ramp one voxel wide.
    fn weight(&self, p: [f64; 3]) -> f64 {
        let d = [0, 1, 2].map(|k| p[k] - self.center[k]);
        let body = self
            .rot
            .map(|row| row[0] * d[0] + row[1] * d[1] + row[2] * d[2]);
        let rho = (0..3)
            .map(|k| (body[k] / self.semi[k]).powi(2))
            .sum::<f64>()
            .sqrt();
        let len = d.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dist = if rho > 0.0 {
            len * (1.0 - 1.0 / rho)
        } else {
            -f64::INFINITY
        };
        if dist <= -0.5 {
            1.0
        } else if dist >= 0.5 {
            0.0
        } else {
            0.5 * (1.0 + (PI * (dist + 0.5)).cos())
        }
    }
}

/// Sum of random soft-edged ellipsoids, clipped to `[0, 1]`. The first
/// ellipsoid is large and central; the rest are smaller inclusions.
pub fn make_phantom(spec: &PhantomSpec) -> Result<Volume3D> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let shapes: Vec<Ellipsoid> = (0..spec.n_ellipsoids)
        .map(|k| Ellipsoid::random(&mut rng, spec.shape, k == 0, spec.intensity))
        .collect();
    let [d1, d2, d3] = spec.shape;
    Ok(Volume3D::from_fn((d1, d2, d3), |a, b, c| {
        let p = [a as f64 + 0.5, b as f64 + 0.5, c as f64 + 0.5];
        shapes
            .iter()
            .map(|e| e.value * e.weight(p))
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Groups of `merge` rows of every axis-3 slice averaged into one.
    Zsr { merge: usize },
    /// Poisson-disc k-space subsampling of every axis-3 slice.
    Csmri {
        acceleration: f64,
        #[serde(default = "default_center_frac")]
        center_frac: f64,
        #[serde(default)]
        mask_seed: u64,
        #[serde(default = "default_true")]
        shared_mask: bool,
    },
    /// Parallel-beam sinograms of every axis-3 slice.
    Svct { n_angles: usize },
}

fn default_center_frac() -> f64 {
    DEFAULT_CENTER_FRAC
}

fn default_true() -> bool {
    true
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::Zsr { .. } => "zsr",
            Task::Csmri { .. } => "csmri",
            Task::Svct { .. } => "svct",
        }
    }

    /// Sampling masks of a `csmri` task: one when shared, else one per
    /// slice. Empty for the other tasks.
    pub fn kspace_masks(&self, shape: (usize, usize), n_slices: usize) -> Result<Vec<KSpaceMask>> {
        let Task::Csmri {
            acceleration,
            center_frac,
            mask_seed,
            shared_mask,
        } = *self
        else {
            return Ok(Vec::new());
        };
        let count = if shared_mask { 1 } else { n_slices };
        (0..count)
            .map(|j| {
                poisson_mask(
                    shape,
                    acceleration,
                    center_frac,
                    mask_seed.wrapping_add(j as u64),
                )
            })
            .collect()
    }

    /// Per-slice operators for an axis-3 slice shape.
    pub fn operators(&self, (h, w): (usize, usize), n_slices: usize) -> Result<OperatorStack> {
        Ok(match *self {
            Task::Zsr { merge } => OperatorStack::shared(Arc::new(ZMergeOperator::new(
                (h, w),
                merge,
                MergeVariant::RootM,
                MergeAxis::Rows,
            )?)),
            Task::Csmri { .. } => {
                let ops: Vec<Arc<dyn MeasurementOperator>> = self
                    .kspace_masks((h, w), n_slices)?
                    .into_iter()
                    .map(|m| Arc::new(KSpaceOperator::new(m)) as Arc<dyn MeasurementOperator>)
                    .collect();
                if ops.len() == 1 {
                    OperatorStack::shared(ops.into_iter().next().expect("one mask"))
                } else {
                    OperatorStack::per_slice(ops)
                }
            }
            Task::Svct { n_angles } => {
                if h != w {
                    return dim_err(format!("sparse-view CT needs square slices, got {h}x{w}"));
                }
                OperatorStack::shared(Arc::new(RadonOperator::new(RadonGeometry::new(
                    h, n_angles,
                )?)))
            }
        })
    }
}

/// Measurements of one volume ready for guidance, plus the operators.
#[derive(Clone)]
pub struct Simulated {
    pub task: Task,
    /// Data as acquired. For `zsr` these are the averaged thick slices.
    pub acquired: Vec<Measurement2D>,
    /// Data matched to `ops`. For `zsr` this is `acquired` times `sqrt(M)`,
    /// because the guidance operator divides by `sqrt(M)`.
    pub y: Vec<Measurement2D>,
    pub ops: OperatorStack,
}

pub fn simulate_measurement(
    vol: &Volume3D,
    task: &Task,
    noise_sigma: f64,
    noise_seed: u64,
) -> Result<Simulated> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise_sigma must be >= 0, got {noise_sigma}"
        )));
    }
    let n = vol.slice_count(SliceAxis::Axis3);
    let ops = task.operators(vol.slice_shape(SliceAxis::Axis3), n)?;
    let slices = vol.slices(SliceAxis::Axis3);
    let masks = task.kspace_masks(vol.slice_shape(SliceAxis::Axis3), n)?;
    let mut acquired = Vec::with_capacity(n);
    for (j, s) in slices.iter().enumerate() {
        let mut m = match *task {
            Task::Zsr { merge } => {
                ZMergeOperator::new(s.shape(), merge, MergeVariant::Mean, MergeAxis::Rows)?
                    .apply(s)?
            }
            _ => ops.get(j).apply(s)?,
        };
        if noise_sigma > 0.0 {
            let key = StreamKey {
                step: 0,
                branch: 0,
                slice: j as u16,
                purpose: Purpose::Measurement,
            };
            let draws = normal_vec(&mut stream(noise_seed, key.id()), m.noise_len());
            m.add_noise(noise_sigma, &draws);
            if let Some(mask) = masks.get(if masks.len() == 1 { 0 } else { j }) {
                if let MeasurementData::Complex(vals) = m.data_mut() {
                    for (v, &keep) in vals.iter_mut().zip(mask.data()) {
                        if !keep {
                            *v = Complex64::new(0.0, 0.0);
                        }
                    }
                }
            }
        }
        acquired.push(m);
    }
    let y = match *task {
        Task::Zsr { merge } => acquired
            .iter()
            .map(|m| m.scale((merge as f64).sqrt()))
            .collect(),
        _ => acquired.clone(),
    };
    Ok(Simulated {
        task: task.clone(),
        acquired,
        y,
        ops,
    })
}

/// Rebuilds operators and guidance data from stored acquisitions of a
/// volume with the given shape.
pub fn prepare_measurements(
    task: &Task,
    volume_shape: [usize; 3],
    acquired: Vec<Measurement2D>,
) -> Result<Simulated> {
    let [d1, d2, d3] = volume_shape;
    if acquired.len() != d3 {
        return dim_err(format!(
            "{} measurement slices for a volume with {d3} axis-3 slices",
            acquired.len()
        ));
    }
    let ops = task.operators((d1, d2), d3)?;
    for (j, m) in acquired.iter().enumerate() {
        ops.get(j).check_measurement(m)?;
    }
    let y = match *task {
        Task::Zsr { merge } => acquired
            .iter()
            .map(|m| m.scale((merge as f64).sqrt()))
            .collect(),
        _ => acquired.clone(),
    };
    Ok(Simulated {
        task: task.clone(),
        acquired,
        y,
        ops,
    })
}

/// Least-squares-scaled adjoint reconstruction `alpha A^T y` per slice, with
/// `alpha` fitted in measurement space. For k-space this is the zero-filled
/// inverse FFT and for the merge operator nearest-neighbour upsampling.
pub fn adjoint_baseline(sim: &Simulated) -> Result<Volume3D> {
    let slices: Vec<Slice2D> = sim
        .y
        .iter()
        .enumerate()
        .map(|(j, y)| {
            let op = sim.ops.get(j);
            let back = op.adjoint(y)?;
            let fwd = op.apply(&back)?;
            let denom = fwd.norm_sq();
            let alpha = if denom > 0.0 {
                y.dot(&fwd)? / denom
            } else {
                0.0
            };
            Ok(back.scale(alpha))
        })
        .collect::<Result<_>>()?;
    let (d1, d2) = sim.ops.get(0).input_shape();
    Volume3D::from_slices((d1, d2, slices.len()), SliceAxis::Axis3, &slices)
}
