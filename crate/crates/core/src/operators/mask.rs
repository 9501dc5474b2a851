//! Variable-density Poisson-disc k-space masks.
//!
//! Candidates are visited in a seeded random order and kept when no
//! earlier sample lies within `r(d) = r0 (1 + d / d_max)`, where `d` is the
//! distance to the zero-frequency bin. `r0` is bisected until the kept
//! fraction is within 20% of `1/R`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

pub const DEFAULT_CENTER_FRAC: f64 = 1.0 / 16.0;

const BISECTION_STEPS: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct KSpaceMask {
    shape: (usize, usize),
    data: Vec<bool>,
    acceleration: f64,
    center: (usize, usize),
    seed: u64,
}

impl KSpaceMask {
    pub fn full(shape: (usize, usize)) -> Self {
        Self {
            shape,
            data: vec![true; shape.0 * shape.1],
            acceleration: 1.0,
            center: shape,
            seed: 0,
        }
    }

    /// Wraps an existing grid, e.g. one read from a PGM file. The recorded
    /// acceleration is the realised `n / kept`.
    pub fn from_grid(shape: (usize, usize), data: Vec<bool>) -> Result<Self> {
        if data.len() != shape.0 * shape.1 || data.is_empty() {
            return dim_err(format!("mask shape {shape:?} vs {} entries", data.len()));
        }
        let kept = data.iter().filter(|&&b| b).count();
        Ok(Self {
            shape,
            acceleration: if kept == 0 {
                f64::INFINITY
            } else {
                data.len() as f64 / kept as f64
            },
            data,
            center: (0, 0),
            seed: 0,
        })
    }

    pub fn shape(&self) -> (usize, usize) {
        self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.shape.1 + c]
    }

    pub fn acceleration(&self) -> f64 {
        self.acceleration
    }

    /// Extents of the fully sampled block around the zero frequency.
    pub fn center_block(&self) -> (usize, usize) {
        self.center
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn kept(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn kept_fraction(&self) -> f64 {
        self.kept() as f64 / self.data.len() as f64
    }

    /// Row and column ranges of the centre block.
    pub fn center_ranges(&self) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
        center_ranges(self.shape, self.center)
    }
}

fn center_ranges(
    (h, w): (usize, usize),
    (ch, cw): (usize, usize),
) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let r0 = (h / 2).saturating_sub(ch / 2).min(h - ch);
    let c0 = (w / 2).saturating_sub(cw / 2).min(w - cw);
    (r0..r0 + ch, c0..c0 + cw)
}

struct Thrower<'a> {
    shape: (usize, usize),
    order: &'a [usize],
    base: &'a [bool],
    dist: &'a [f64],
    d_max: f64,
}

impl Thrower<'_> {
    fn throw(&self, r0: f64) -> Vec<bool> {
        let (h, w) = self.shape;
        let mut grid = self.base.to_vec();
        let mut accepted: Vec<(usize, usize)> = Vec::new();
        for &idx in self.order {
            if grid[idx] {
                continue;
            }
            let (r, c) = (idx / w, idx % w);
            let rad = r0 * (1.0 + self.dist[idx] / self.d_max);
            let rad2 = rad * rad;
            let close = |&(ar, ac): &(usize, usize)| {
                let dr = ar as f64 - r as f64;
                let dc = ac as f64 - c as f64;
                dr * dr + dc * dc < rad2
            };
            let reach = rad.ceil() as usize;
            let window = (2 * reach + 1).pow(2);
            let blocked = if accepted.len() < window {
                accepted.iter().any(close)
            } else {
                let rr = r.saturating_sub(reach)..(r + reach + 1).min(h);
                rr.into_iter().any(|ar| {
                    (c.saturating_sub(reach)..(c + reach + 1).min(w))
                        .any(|ac| grid[ar * w + ac] && !self.base[ar * w + ac] && close(&(ar, ac)))
                })
            };
            if !blocked {
                grid[idx] = true;
                accepted.push((r, c));
            }
        }
        grid
    }
}

/// Generates a mask with kept fraction in `[0.8/R, 1.2/R]`.
pub fn poisson_mask(
    shape: (usize, usize),
    acceleration: f64,
    center_frac: f64,
    seed: u64,
) -> Result<KSpaceMask> {
    let (h, w) = shape;
    if h == 0 || w == 0 {
        return dim_err("mask shape must be non-empty");
    }
    if !(acceleration >= 1.0) || !acceleration.is_finite() {
        return Err(Error::Domain(format!(
            "acceleration must be >= 1, got {acceleration}"
        )));
    }
    if !(0.0..1.0).contains(&center_frac) {
        return Err(Error::Domain(format!(
            "center_frac must be in [0, 1), got {center_frac}"
        )));
    }
    let center = (
        (center_frac * h as f64).ceil() as usize,
        (center_frac * w as f64).ceil() as usize,
    );
    if acceleration == 1.0 {
        return Ok(KSpaceMask {
            shape,
            data: vec![true; h * w],
            acceleration,
            center,
            seed,
        });
    }

    let n = (h * w) as f64;
    let lo_count = 0.8 * n / acceleration;
    let hi_count = 1.2 * n / acceleration;

    let mut base = vec![false; h * w];
    let (rows, cols) = center_ranges(shape, center);
    for r in rows {
        for c in cols.clone() {
            base[r * w + c] = true;
        }
    }
    let base_count = base.iter().filter(|&&b| b).count() as f64;
    if base_count > hi_count {
        return Err(Error::Feasibility(format!(
            "centre block of {center:?} already exceeds 1.2/R of a {h}x{w} grid"
        )));
    }

    let (cr, cc) = ((h / 2) as f64, (w / 2) as f64);
    let dist: Vec<f64> = (0..h * w)
        .map(|i| ((((i / w) as f64) - cr).powi(2) + (((i % w) as f64) - cc).powi(2)).sqrt())
        .collect();
    let d_max = dist.iter().cloned().fold(0.0, f64::max).max(1.0);
    let mut order: Vec<usize> = (0..h * w).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let thrower = Thrower {
        shape,
        order: &order,
        base: &base,
        dist: &dist,
        d_max,
    };

    let finish = |data: Vec<bool>| KSpaceMask {
        shape,
        data,
        acceleration,
        center,
        seed,
    };
    let in_band = |g: &[bool]| {
        let k = g.iter().filter(|&&b| b).count() as f64;
        (k >= lo_count && k <= hi_count, k)
    };

    // Radius 0 keeps everything, radius (h + w) keeps one sample outside the centre.
    let (mut lo, mut hi) = (0.0, (h + w) as f64);
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let grid = thrower.throw(mid);
        let (ok, k) = in_band(&grid);
        if ok {
            return Ok(finish(grid));
        }
        if k > hi_count {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Err(Error::Feasibility(format!(
        "no radius gives a kept fraction within 20% of 1/{acceleration} on a {h}x{w} grid"
    )))
}
