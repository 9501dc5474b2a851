use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tpdm_core::container::Container;
use tpdm_core::metrics::{direction_slice, Direction, MetricReport, SSIM_WINDOW};
use tpdm_core::operators::{estimate_norm_sq, stack_from_container, stack_to_container};
use tpdm_core::phantom::{
    adjoint_baseline, make_phantom, prepare_measurements, simulate_measurement, PhantomSpec, Task,
};
use tpdm_core::sampler::{
    generate_observed, solve_inverse_observed, Measurements, RunManifest,
    SamplerConfig, StepEvent,
};
use tpdm_core::score::checkpoint::{loss_csv, TrainingMeta};
use tpdm_core::score::train::train_from;
use tpdm_core::score::{
    build_slice_datasets, AnalyticGaussianScore, Checkpoint, LossPoint, NeuralScore, ScoreModel,
    TrainState,
};
use tpdm_core::volume::Volume3D;
use tpdm_core::pgm;

use crate::config::{require, ModelSection, NoiseSection, RunConfig};
use crate::exit::{with_path, CliError, ExitCode};

pub const CASE_PREFIX: &str = "case_";
pub const TRUTH_FILE: &str = "truth.tpdm";
pub const MEASUREMENTS_FILE: &str = "measurements.tpdm";
pub const BASELINE_FILE: &str = "baseline.tpdm";
pub const CASE_FILE: &str = "case.json";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PRIMARY_CKPT: &str = "primary.ckpt";
pub const AUXILIARY_CKPT: &str = "auxiliary.ckpt";

/// Flags that override or extend the config file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
}

/// Per-case record written next to a phantom's data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseRecord {
    pub shape: [usize; 3],
    pub phantom: PhantomSpec,
    pub task: Option<Task>,
    pub noise: NoiseSection,
}

#[derive(Serialize)]
struct PhantomManifest<'a> {
    command: &'static str,
    cases: Vec<String>,
    task: &'a Option<Task>,
    noise: &'a NoiseSection,
}

#[derive(Serialize)]
struct TrainManifest {
    command: &'static str,
    volumes: usize,
    primary_slices: usize,
    auxiliary_slices: usize,
    primary: TrainingMeta,
    auxiliary: TrainingMeta,
}

#[derive(Serialize)]
struct ReconstructManifest<'a> {
    #[serde(flatten)]
    run: RunManifest,
    case: &'a Path,
    task: &'a Task,
    /// `lambda` after optional operator-norm scaling.
    effective_lambda: f64,
    metrics: Option<MetricReport>,
}

#[derive(Serialize)]
struct EvaluateRow<'a> {
    run_id: &'a str,
    #[serde(flatten)]
    report: MetricReport,
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    let code = if e.kind() == std::io::ErrorKind::NotFound {
        ExitCode::MissingInput
    } else {
        ExitCode::Failure
    };
    CliError::new(code, format!("{}: {e}", path.display()))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::new(ExitCode::Failure, e.to_string()))?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

fn read_bytes(path: &Path) -> Result<Vec<u8>, CliError> {
    fs::read(path).map_err(|e| io_err(path, e))
}

fn load_volume(path: &Path) -> Result<Volume3D, CliError> {
    with_path(Volume3D::from_bytes(&read_bytes(path)?), path)
}

fn save_volume(path: &Path, v: &Volume3D) -> Result<(), CliError> {
    write_bytes(path, &v.to_bytes())
}

fn progress(msg: impl AsRef<str>) {
    eprintln!("[tpdm] {}", msg.as_ref());
}

fn step_reporter(label: &'static str) -> impl FnMut(StepEvent) {
    move |ev: StepEvent| {
        let stride = (ev.n_steps / 20).max(1);
        let done = ev.n_steps - ev.step;
        if done % stride == 0 || ev.step == 0 {
            progress(format!(
                "{label}: step {done}/{} ({:?})",
                ev.n_steps, ev.branch
            ));
        }
    }
}

pub fn cmd_phantom(cfg: &RunConfig, ov: &Overrides, out: &Path) -> Result<(), CliError> {
    let mut section = require(&cfg.phantom, "phantom")?.clone();
    if let Some(seed) = ov.seed {
        section.seed = seed;
    }
    if section.count == 0 {
        return Err(CliError::new(
            ExitCode::Config,
            "config error at `phantom.count`: must be positive",
        ));
    }
    let noise = cfg.noise.clone().unwrap_or_default();
    let mut cases = Vec::with_capacity(section.count);
    for i in 0..section.count {
        let spec = section.spec(i);
        spec.validate()?;
        let name = format!("{CASE_PREFIX}{i:04}");
        let dir = out.join(&name);
        let vol = make_phantom(&spec)?;
        save_volume(&dir.join(TRUTH_FILE), &vol)?;
        let case_noise = NoiseSection {
            sigma: noise.sigma,
            seed: noise.seed.wrapping_add(i as u64),
        };
        if let Some(task) = &cfg.task {
            let sim = simulate_measurement(&vol, task, case_noise.sigma, case_noise.seed)?;
            write_bytes(
                &dir.join(MEASUREMENTS_FILE),
                &stack_to_container(&sim.acquired)?.encode(),
            )?;
            save_volume(&dir.join(BASELINE_FILE), &adjoint_baseline(&sim)?)?;
            let (d1, d2, d3) = vol.shape();
            let masks = task.kspace_masks((d1, d2), d3)?;
            if masks.len() == 1 {
                write_bytes(
                    &dir.join("mask.pgm"),
                    &pgm::encode(
                        masks[0].shape(),
                        &masks[0]
                            .data()
                            .iter()
                            .map(|&b| if b { 255 } else { 0 })
                            .collect::<Vec<u8>>(),
                    ),
                )?;
            }
        }
        write_json(
            &dir.join(CASE_FILE),
            &CaseRecord {
                shape: spec.shape,
                phantom: spec.clone(),
                task: cfg.task.clone(),
                noise: case_noise,
            },
        )?;
        progress(format!("phantom {}/{}: {name}", i + 1, section.count));
        cases.push(name);
    }
    write_json(
        &out.join(MANIFEST_FILE),
        &PhantomManifest {
            command: "phantom",
            cases,
            task: &cfg.task,
            noise: &noise,
        },
    )
}

/// Sorted case directories under `data` that contain a ground-truth volume.
pub fn list_cases(data: &Path) -> Result<Vec<PathBuf>, CliError> {
    let entries = fs::read_dir(data).map_err(|e| io_err(data, e))?;
    let mut cases: Vec<PathBuf> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with(CASE_PREFIX))
                && p.join(TRUTH_FILE).is_file()
        })
        .collect();
    cases.sort();
    if cases.is_empty() {
        return Err(CliError::new(
            ExitCode::MissingInput,
            format!("no phantom cases with {TRUTH_FILE} under {}", data.display()),
        ));
    }
    Ok(cases)
}

fn load_resume(path: &Path) -> Result<(NeuralScore, TrainState, TrainingMeta), CliError> {
    let ck = with_path(Checkpoint::decode(&read_bytes(path)?), path)?;
    let state = ck.state.ok_or_else(|| {
        CliError::new(
            ExitCode::MissingInput,
            format!("{}: checkpoint has no optimiser state", path.display()),
        )
    })?;
    Ok((ck.model, state, ck.header.training))
}

pub fn cmd_train(cfg: &RunConfig, ov: &Overrides, out: &Path) -> Result<(), CliError> {
    let section = require(&cfg.train, "train")?;
    let mut optim = section.optim.clone();
    if let Some(seed) = ov.seed {
        optim.seed = seed;
    }
    optim.validate()?;
    section.architecture.validate()?;
    section.schedule.validate()?;

    let cases = list_cases(&section.data)?;
    let volumes = cases
        .iter()
        .map(|c| load_volume(&c.join(TRUTH_FILE)))
        .collect::<Result<Vec<_>, _>>()?;
    let (primary_set, auxiliary_set) = build_slice_datasets(&volumes)?;
    progress(format!(
        "train: {} volumes, {} primary and {} auxiliary slices",
        volumes.len(),
        primary_set.len(),
        auxiliary_set.len()
    ));

    let families = [
        ("primary", "axis3", PRIMARY_CKPT, &primary_set, 0u64),
        ("auxiliary", "axis1", AUXILIARY_CKPT, &auxiliary_set, 1u64),
    ];
    let mut metas = Vec::new();
    for (name, axis, file, data, seed_offset) in families {
        let mut fam_cfg = optim.clone();
        fam_cfg.seed = optim.seed.wrapping_add(seed_offset);
        let (mut model, mut state, prior) = match &section.resume_from {
            Some(dir) => {
                let (m, s, meta) = load_resume(&dir.join(file))?;
                (m, s, meta.iterations)
            }
            None => {
                let m = NeuralScore::new(section.architecture, section.schedule, fam_cfg.seed)?;
                let s = TrainState::new(m.param_count());
                (m, s, 0)
            }
        };
        let total = fam_cfg.iterations;
        let chunk = (total / 10).max(1);
        let mut trace: Vec<LossPoint> = Vec::with_capacity(total);
        let mut done = 0;
        while done < total {
            let mut part = fam_cfg.clone();
            part.iterations = chunk.min(total - done);
            let (m, s, t) = train_from(model, state, data, &part)?;
            model = m;
            state = s;
            done += part.iterations;
            let recent = &t[t.len().saturating_sub(50)..];
            let avg = recent.iter().map(|p| p.loss).sum::<f64>() / recent.len().max(1) as f64;
            progress(format!("train {name}: {done}/{total} iterations, loss {avg:.4}"));
            trace.extend(t);
        }
        let meta = TrainingMeta {
            iterations: prior + total as u64,
            seed: fam_cfg.seed,
            batch_size: fam_cfg.batch_size,
            learning_rate: fam_cfg.learning_rate,
            slice_axis: axis.into(),
        };
        let ck = Checkpoint::new(model, Some(state), meta.clone());
        write_bytes(&out.join(file), &ck.encode())?;
        write_bytes(
            &out.join(format!("{name}_loss.csv")),
            loss_csv(&trace).as_bytes(),
        )?;
        metas.push(meta);
    }
    let auxiliary = metas.pop().expect("two families");
    let primary = metas.pop().expect("two families");
    write_json(
        &out.join(MANIFEST_FILE),
        &TrainManifest {
            command: "train",
            volumes: volumes.len(),
            primary_slices: primary_set.len(),
            auxiliary_slices: auxiliary_set.len(),
            primary,
            auxiliary,
        },
    )
}

/// Builds the primary and auxiliary score models named in the config.
pub fn load_models(
    cfg: &RunConfig,
) -> Result<(Box<dyn ScoreModel>, Box<dyn ScoreModel>), CliError> {
    match require(&cfg.models, "models")? {
        ModelSection::Neural { primary, auxiliary } => {
            let load = |p: &PathBuf| -> Result<Box<dyn ScoreModel>, CliError> {
                let ck = with_path(Checkpoint::decode(&read_bytes(p)?), p)?;
                Ok(Box::new(ck.model))
            };
            Ok((load(primary)?, load(auxiliary)?))
        }
        ModelSection::Gaussian {
            mean,
            tau,
            schedule,
        } => {
            let m = AnalyticGaussianScore::scalar(*mean, *tau, *schedule)?;
            Ok((Box::new(m.clone()), Box::new(m)))
        }
    }
}

fn sampler_config(cfg: &RunConfig, ov: &Overrides) -> Result<SamplerConfig, CliError> {
    let mut s = cfg.sampler.clone().unwrap_or_default();
    if let Some(seed) = ov.seed {
        s.seed = seed;
    }
    s.validate()?;
    Ok(s)
}

fn write_metrics(out: &Path, rows: &[(String, MetricReport)]) -> Result<(), CliError> {
    let mut csv = String::from(MetricReport::CSV_HEADER);
    csv.push('\n');
    for (id, r) in rows {
        csv.push_str(&r.csv_row(id));
        csv.push('\n');
    }
    write_bytes(&out.join("metrics.csv"), csv.as_bytes())?;
    let json: Vec<EvaluateRow> = rows
        .iter()
        .map(|(id, r)| EvaluateRow {
            run_id: id,
            report: r.clone(),
        })
        .collect();
    write_json(&out.join("metrics.json"), &json)
}

/// Ground truth must match the reconstruction and be large enough for SSIM.
fn check_metric_shape(
    truth: (usize, usize, usize),
    recon: (usize, usize, usize),
) -> Result<(), CliError> {
    if truth != recon {
        return Err(CliError::new(
            ExitCode::Shape,
            format!("ground truth has shape {truth:?}, reconstruction {recon:?}"),
        ));
    }
    let smallest = truth.0.min(truth.1).min(truth.2);
    if smallest < SSIM_WINDOW {
        return Err(CliError::new(
            ExitCode::Shape,
            format!(
                "metrics need every extent >= {SSIM_WINDOW}, ground truth is {truth:?}"
            ),
        ));
    }
    Ok(())
}

pub fn cmd_reconstruct(cfg: &RunConfig, ov: &Overrides, out: &Path) -> Result<(), CliError> {
    let section = require(&cfg.reconstruct, "reconstruct")?;
    let mut sampler = sampler_config(cfg, ov)?;
    let case_path = section.case.join(CASE_FILE);
    let case: CaseRecord = serde_json::from_slice(&read_bytes(&case_path)?).map_err(|e| {
        CliError::new(
            ExitCode::MissingInput,
            format!("{}: {e}", case_path.display()),
        )
    })?;
    let task = case.task.as_ref().ok_or_else(|| {
        CliError::new(
            ExitCode::MissingInput,
            format!("{} has no measurement task", case_path.display()),
        )
    })?;
    let meas_path = section.case.join(MEASUREMENTS_FILE);
    let stack = with_path(
        Container::decode(&read_bytes(&meas_path)?).and_then(|c| stack_from_container(&c)),
        &meas_path,
    )?;
    let sim = prepare_measurements(task, case.shape, stack)?;
    let (model_p, model_a) = load_models(cfg)?;

    let requested_lambda = sampler.lambda;
    if section.normalize_lambda && sampler.lambda > 0.0 {
        let norm_sq = estimate_norm_sq(sim.ops.get(0), 50, 0)?;
        if norm_sq > 0.0 {
            sampler.lambda /= norm_sq;
        }
    }
    let effective_lambda = sampler.lambda;
    progress(format!(
        "reconstruct: {} case {:?}, N = {}, K = {}, lambda = {effective_lambda:.4e}",
        task.name(),
        case.shape,
        sampler.n_steps,
        sampler.k
    ));
    let meas = Measurements::new(&sim.y, &sim.ops)?;
    let shape = meas.volume_shape();

    let truth = match &section.ground_truth {
        Some(p) => {
            let t = load_volume(p)?;
            check_metric_shape(t.shape(), shape)?;
            Some(t)
        }
        None => {
            let p = section.case.join(TRUTH_FILE);
            let t = if p.is_file() { Some(load_volume(&p)?) } else { None };
            match t.map(|t| check_metric_shape(t.shape(), shape).map(|_| t)) {
                Some(Err(e)) => {
                    progress(format!("reconstruct: metrics skipped, {}", e.message));
                    None
                }
                other => other.transpose()?,
            }
        }
    };
    let result = solve_inverse_observed(
        meas,
        model_p.as_ref(),
        model_a.as_ref(),
        &sampler,
        &mut step_reporter("reconstruct"),
    )?;
    save_volume(&out.join("reconstruction.tpdm"), &result.volume)?;

    let metrics = match truth {
        Some(truth) => {
            let report = MetricReport::compute(&result.volume, &truth, section.data_range)?;
            write_metrics(out, &[("reconstruction".to_string(), report.clone())])?;
            Some(report)
        }
        None => {
            progress("reconstruct: metrics omitted");
            None
        }
    };
    let mut recorded = sampler.clone();
    recorded.lambda = requested_lambda;
    write_json(
        &out.join(MANIFEST_FILE),
        &ReconstructManifest {
            run: RunManifest::new(
                "reconstruct",
                effective_lambda == 0.0,
                shape,
                &recorded,
                &result.plan,
                &result.residual_trace,
            ),
            case: &section.case,
            task,
            effective_lambda,
            metrics,
        },
    )
}

pub fn cmd_generate(cfg: &RunConfig, ov: &Overrides, out: &Path) -> Result<(), CliError> {
    let section = require(&cfg.generate, "generate")?;
    let sampler = sampler_config(cfg, ov)?;
    let [d1, d2, d3] = section.shape;
    if d1 == 0 || d2 == 0 || d3 == 0 {
        return Err(CliError::new(
            ExitCode::Config,
            "config error at `generate.shape`: extents must be positive",
        ));
    }
    let (model_p, model_a) = load_models(cfg)?;
    progress(format!(
        "generate: shape {:?}, N = {}, K = {}",
        section.shape, sampler.n_steps, sampler.k
    ));
    let result = generate_observed(
        (d1, d2, d3),
        model_p.as_ref(),
        model_a.as_ref(),
        &sampler,
        &mut step_reporter("generate"),
    )?;
    save_volume(&out.join("sample.tpdm"), &result.volume)?;
    if section.export_pgm {
        for (dir, extent, name) in [
            (Direction::Axis1, d1, "axis1"),
            (Direction::Axis2, d2, "axis2"),
            (Direction::Axis3, d3, "axis3"),
        ] {
            let s = direction_slice(&result.volume, dir, extent / 2);
            write_bytes(
                &out.join(format!("sample_{name}.pgm")),
                &pgm::encode(s.shape(), &pgm::slice_pixels(&s)),
            )?;
        }
    }
    write_json(
        &out.join(MANIFEST_FILE),
        &RunManifest::new(
            "generate",
            true,
            (d1, d2, d3),
            &sampler,
            &result.plan,
            &result.residual_trace,
        ),
    )
}

pub fn cmd_evaluate(cfg: &RunConfig, _ov: &Overrides, out: &Path) -> Result<(), CliError> {
    let section = require(&cfg.evaluate, "evaluate")?;
    if section.pairs.is_empty() {
        return Err(CliError::new(
            ExitCode::Config,
            "config error at `evaluate.pairs`: at least one pair is required",
        ));
    }
    let mut rows = Vec::with_capacity(section.pairs.len());
    for pair in &section.pairs {
        let x = load_volume(&pair.reconstruction)?;
        let r = load_volume(&pair.reference)?;
        if x.shape() != r.shape() {
            return Err(CliError::new(
                ExitCode::Shape,
                format!(
                    "{}: shape {:?} does not match reference {:?}",
                    pair.run_id,
                    x.shape(),
                    r.shape()
                ),
            ));
        }
        let report = MetricReport::compute(&x, &r, section.data_range)?;
        progress(format!(
            "evaluate {}: PSNR {:.3} dB, worst SSIM {:.4}",
            pair.run_id,
            report.psnr_3d,
            report.worst_ssim()
        ));
        rows.push((pair.run_id.clone(), report));
    }
    write_metrics(out, &rows)
}
