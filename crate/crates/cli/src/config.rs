//! The JSON run configuration shared by every subcommand.
//!
//! Each subcommand reads the sections it needs and ignores the rest, so one
//! file can drive a whole experiment. Unknown keys are rejected everywhere.
//! Relative paths are resolved against the directory holding the config.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpdm_core::phantom::{PhantomSpec, Task};
use tpdm_core::sampler::SamplerConfig;
use tpdm_core::score::{Architecture, TrainConfig};
use tpdm_core::sde::NoiseSchedule;

use crate::exit::{CliError, ExitCode};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub phantom: Option<PhantomSection>,
    pub task: Option<Task>,
    pub noise: Option<NoiseSection>,
    pub train: Option<TrainSection>,
    pub models: Option<ModelSection>,
    pub sampler: Option<SamplerConfig>,
    pub reconstruct: Option<ReconstructSection>,
    pub generate: Option<GenerateSection>,
    pub evaluate: Option<EvaluateSection>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSection {
    pub count: usize,
    pub shape: [usize; 3],
    #[serde(default = "default_ellipsoids")]
    pub n_ellipsoids: usize,
    #[serde(default = "default_intensity")]
    pub intensity: [f64; 2],
    /// Volume `i` uses seed `seed + i`.
    #[serde(default)]
    pub seed: u64,
}

fn default_ellipsoids() -> usize {
    6
}

fn default_intensity() -> [f64; 2] {
    [0.2, 1.0]
}

impl PhantomSection {
    pub fn spec(&self, index: usize) -> PhantomSpec {
        let mut spec = PhantomSpec::new(
            self.shape,
            self.n_ellipsoids,
            self.seed.wrapping_add(index as u64),
        );
        spec.intensity = self.intensity;
        spec
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseSection {
    /// Standard deviation of additive Gaussian noise on every measurement.
    pub sigma: f64,
    /// Volume `i` uses noise seed `seed + i`.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    /// Directory written by `tpdm phantom`.
    pub data: PathBuf,
    #[serde(default)]
    pub architecture: Architecture,
    #[serde(default)]
    pub schedule: NoiseSchedule,
    /// Optimiser settings. The auxiliary model uses `seed + 1`.
    #[serde(default)]
    pub optim: TrainConfig,
    /// Directory holding `primary.ckpt` and `auxiliary.ckpt` to continue
    /// from; `optim.iterations` more steps are taken.
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ModelSection {
    Neural {
        primary: PathBuf,
        auxiliary: PathBuf,
    },
    /// Closed-form score of an isotropic Gaussian prior, used on both axes.
    Gaussian {
        mean: f64,
        tau: f64,
        #[serde(default)]
        schedule: NoiseSchedule,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReconstructSection {
    /// A case directory written by `tpdm phantom`.
    pub case: PathBuf,
    /// Reference volume for metrics; defaults to the case's `truth.tpdm`
    /// when present.
    #[serde(default)]
    pub ground_truth: Option<PathBuf>,
    /// Divide `lambda` by a power-iteration estimate of `|A|^2`.
    #[serde(default)]
    pub normalize_lambda: bool,
    #[serde(default = "default_range")]
    pub data_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSection {
    pub shape: [usize; 3],
    /// Also write the three central orthogonal slices as PGM images.
    #[serde(default)]
    pub export_pgm: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateSection {
    pub pairs: Vec<EvaluatePair>,
    #[serde(default = "default_range")]
    pub data_range: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluatePair {
    pub run_id: String,
    pub reconstruction: PathBuf,
    pub reference: PathBuf,
}

fn default_range() -> f64 {
    1.0
}

/// Parses a config document, reporting the JSON path of the first error.
pub fn parse_config(text: &str) -> Result<RunConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::new(
            ExitCode::Config,
            format!("config error at `{path}`: {}", e.inner()),
        )
    })
}

/// Reads and parses a config file, then makes its paths absolute.
pub fn load_config(path: &Path) -> Result<RunConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        CliError::new(
            ExitCode::MissingInput,
            format!("cannot read config {}: {e}", path.display()),
        )
    })?;
    let mut cfg = parse_config(&text)?;
    let base = path.parent().unwrap_or(Path::new("."));
    cfg.resolve_paths(base);
    Ok(cfg)
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(t) = &mut self.train {
            resolve(base, &mut t.data);
            if let Some(r) = &mut t.resume_from {
                resolve(base, r);
            }
        }
        if let Some(ModelSection::Neural { primary, auxiliary }) = &mut self.models {
            resolve(base, primary);
            resolve(base, auxiliary);
        }
        if let Some(r) = &mut self.reconstruct {
            resolve(base, &mut r.case);
            if let Some(g) = &mut r.ground_truth {
                resolve(base, g);
            }
        }
        if let Some(e) = &mut self.evaluate {
            for p in &mut e.pairs {
                resolve(base, &mut p.reconstruction);
                resolve(base, &mut p.reference);
            }
        }
    }
}

/// Returns a required section or a config error naming it.
pub fn require<'a, T>(section: &'a Option<T>, name: &str) -> Result<&'a T, CliError> {
    section
        .as_ref()
        .ok_or_else(|| CliError::new(ExitCode::Config, format!("config error at `{name}`: section is required")))
}
