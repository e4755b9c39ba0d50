//! Scenario configuration, the closed-loop runner, metrics and the
//! experiment drivers behind the command-line tool.

pub mod config;
pub mod metrics;
pub mod runner;

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use config::{ConfigError, ScenarioConfig, ScenarioId};
pub use metrics::RunMetrics;
pub use runner::{run_scenario, RunError, RunLog, RunOutcome};

use crate::bus::{decode_stream, read_stream, Decoded, TimestampRecovery};
use crate::geomag::{attitude_sweep_report, roll_pitch_grid, SweepReport, SweepRig};
use crate::geometry::Vec3;
use crate::plant::SensorLayout;
use crate::tactile::{
    calibrate, flux_to_force, force_to_flux, CalibrationBundle, CalibrationFit, FluxSample, SensorCalibration,
};

/// Writes `ticks.csv`, `forces.csv` and `metrics.txt` into `dir`.
pub fn write_run(dir: &Path, outcome: &RunOutcome) -> std::io::Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("ticks.csv"), outcome.log.tick_csv())?;
    fs::write(dir.join("forces.csv"), outcome.log.snapshot_csv())?;
    let mut metrics = outcome.metrics.to_kv();
    if let Some(e) = &outcome.error {
        let _ = writeln!(metrics, "error = \"{}\"", e.to_string().replace('"', "'"));
    }
    fs::write(dir.join("metrics.txt"), metrics)
}

/// The same scenario with the ablation axis on and off.
#[derive(Debug)]
pub struct AblationPair {
    pub with: AblationSide,
    pub without: AblationSide,
}

#[derive(Debug)]
pub enum AblationSide {
    Run(Box<RunOutcome>),
    Sweep(SweepOutcome),
}

impl AblationSide {
    fn kv(&self) -> String {
        match self {
            AblationSide::Run(o) => o.metrics.to_kv(),
            AblationSide::Sweep(s) => s.metrics_kv(),
        }
    }

    fn write(&self, dir: &Path) -> std::io::Result<()> {
        match self {
            AblationSide::Run(o) => write_run(dir, o),
            AblationSide::Sweep(s) => s.write(dir),
        }
    }
}

/// Force feedback and payload feedforward for object scenarios, geomagnetic
/// compensation for the sweep.
pub fn run_ablation_pair(cfg: &ScenarioConfig) -> Result<AblationPair, RunError> {
    if cfg.scenario == ScenarioId::Sweep {
        let mut on = cfg.clone();
        on.flags.geomag_comp = true;
        let mut off = cfg.clone();
        off.flags.geomag_comp = false;
        return Ok(AblationPair {
            with: AblationSide::Sweep(run_sweep(&on)?),
            without: AblationSide::Sweep(run_sweep(&off)?),
        });
    }
    let mut on = cfg.clone();
    on.flags.force_feedback = true;
    on.flags.payload_ff = true;
    let mut off = cfg.clone();
    off.flags.force_feedback = false;
    off.flags.payload_ff = false;
    Ok(AblationPair {
        with: AblationSide::Run(Box::new(run_scenario(&on)?)),
        without: AblationSide::Run(Box::new(run_scenario(&off)?)),
    })
}

impl AblationPair {
    /// Side-by-side `key = with | without` lines.
    pub fn comparison(&self) -> String {
        let with = self.with.kv();
        let without = self.without.kv();
        let mut out = String::from("# key = with | without\n");
        for (a, b) in with.lines().zip(without.lines()) {
            let (key, va) = a.split_once(" = ").unwrap_or((a, ""));
            let vb = b.split_once(" = ").map_or("", |x| x.1);
            let _ = writeln!(out, "{key} = {va} | {vb}");
        }
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        self.with.write(&dir.join("with"))?;
        self.without.write(&dir.join("without"))?;
        fs::write(dir.join("comparison.txt"), self.comparison())
    }

    pub fn error(&self) -> Option<&RunError> {
        [&self.with, &self.without].into_iter().find_map(|s| match s {
            AblationSide::Run(o) => o.error.as_ref(),
            AblationSide::Sweep(_) => None,
        })
    }
}

/// No-load attitude sweep of every tactile sensor.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub reports: Vec<SweepReport>,
    pub geomag_comp: bool,
}

impl SweepOutcome {
    /// Worst deviation of the estimator selected by the compensation flag, N.
    pub fn max_deviation(&self) -> f64 {
        self.reports
            .iter()
            .map(|r| if self.geomag_comp { r.max_dev_comp } else { r.max_dev_raw })
            .fold(0.0, f64::max)
    }

    pub fn max_dev_raw(&self) -> f64 {
        self.reports.iter().map(|r| r.max_dev_raw).fold(0.0, f64::max)
    }

    pub fn max_dev_comp(&self) -> f64 {
        self.reports.iter().map(|r| r.max_dev_comp).fold(0.0, f64::max)
    }

    pub fn metrics_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "geomag_comp = {}", self.geomag_comp);
        let _ = writeln!(out, "max_deviation = {:.6}", self.max_deviation());
        let _ = writeln!(out, "max_dev_raw = {:.6}", self.max_dev_raw());
        let _ = writeln!(out, "max_dev_comp = {:.6}", self.max_dev_comp());
        for r in &self.reports {
            let _ = writeln!(out, "node.{}.max_dev_raw = {:.6}", r.node_id, r.max_dev_raw);
            let _ = writeln!(out, "node.{}.max_dev_comp = {:.6}", r.node_id, r.max_dev_comp);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        for r in &self.reports {
            fs::write(dir.join(format!("sweep_node{}.csv", r.node_id)), r.to_csv())?;
        }
        fs::write(dir.join("metrics.txt"), self.metrics_kv())
    }
}

pub fn run_sweep(cfg: &ScenarioConfig) -> Result<SweepOutcome, RunError> {
    cfg.validate()?;
    let layout = SensorLayout::hexagon();
    let rig = SweepRig {
        sensors: runner::nominal_sensors(&layout, &cfg.sensors.coefficients)?,
        coefficients: cfg.sensors.coefficients,
        reference_mount: cfg.sensors.reference_mount(),
        gauge: cfg.sensors.gauge.gauge(),
    };
    let grid = roll_pitch_grid(cfg.sweep.limit_deg, cfg.sweep.step_deg);
    let earth = cfg.sensors.earth_field.vec();
    let reports = rig
        .sensors
        .iter()
        .map(|s| attitude_sweep_report(&grid, &earth, &rig, s.node_id))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| RunError::Calibration { path: "<sweep>".into(), message: e.to_string() })?;
    Ok(SweepOutcome { reports, geomag_comp: cfg.flags.geomag_comp })
}

/// Per-sensor calibration fit and its held-out error.
#[derive(Debug, Clone)]
pub struct CalibrationOutcome {
    pub bundle: CalibrationBundle,
    pub fits: Vec<CalibrationFit>,
    /// Per-axis RMS force error on held-out noisy samples, N.
    pub holdout_rms: Vec<Vec3>,
}

impl CalibrationOutcome {
    pub fn report(&self) -> String {
        let mut out = String::new();
        for (s, (fit, rms)) in self.bundle.sensors.iter().zip(self.fits.iter().zip(&self.holdout_rms)) {
            let id = s.node_id;
            let _ = writeln!(out, "node.{id}.a = [{:.6}, {:.6}, {:.6}]", fit.a.x, fit.a.y, fit.a.z);
            let _ = writeln!(out, "node.{id}.b = [{:.6}, {:.6}, {:.6}]", fit.b_off.x, fit.b_off.y, fit.b_off.z);
            let _ = writeln!(out, "node.{id}.fit_rms = [{:.6}, {:.6}, {:.6}]", fit.residual_rms.x, fit.residual_rms.y, fit.residual_rms.z);
            let _ = writeln!(out, "node.{id}.holdout_rms = [{:.6}, {:.6}, {:.6}]", rms.x, rms.y, rms.z);
        }
        out
    }

    pub fn write(&self, dir: &Path) -> std::io::Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("calibration.toml"), self.bundle.to_toml_string())?;
        fs::write(dir.join("calibration_report.txt"), self.report())
    }
}

/// Uniform random force inside the film's working envelope.
pub fn random_envelope_force(rng: &mut impl Rng, cal: &SensorCalibration) -> Vec3 {
    let e = &cal.envelope;
    let shear = e.xy_limit_mm * e.shear_stiffness_n_per_mm;
    let normal = e.z_halfwidth_mm * e.normal_stiffness_n_per_mm;
    Vec3::new(rng.random_range(-shear..=shear), rng.random_range(-shear..=shear), rng.random_range(-normal..=normal))
}

/// Noisy flux reading of `truth` under force `f`.
fn noisy_reading(
    rng: &mut ChaCha8Rng,
    noise: Option<&Normal<f64>>,
    f: &Vec3,
    truth: &SensorCalibration,
    cfg: &ScenarioConfig,
) -> Result<FluxSample, RunError> {
    let c = &cfg.sensors.coefficients;
    let mut b = force_to_flux(f, truth, c, cfg.sensors.gauge.gauge())?.b;
    if let Some(n) = noise {
        b += Vec3::new(n.sample(rng), n.sample(rng), n.sample(rng));
    }
    Ok(FluxSample::new(b, truth.node_id, 0.0)?)
}

/// Synthesizes loading pairs with flux noise, fits each sensor and scores
/// the fit on independent held-out samples.
pub fn run_calibration(cfg: &ScenarioConfig) -> Result<CalibrationOutcome, RunError> {
    cfg.validate()?;
    let layout = SensorLayout::hexagon();
    let c = cfg.sensors.coefficients;
    let films = runner::nominal_sensors(&layout, &c)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = (cfg.noise.flux_sigma_ut > 0.0).then(|| Normal::new(0.0, cfg.noise.flux_sigma_ut).expect("finite sigma"));
    let mut sensors = Vec::with_capacity(films.len());
    let mut fits = Vec::with_capacity(films.len());
    let mut holdout_rms = Vec::with_capacity(films.len());
    for film in &films {
        let mut pairs = Vec::with_capacity(cfg.calibration.samples);
        for _ in 0..cfg.calibration.samples {
            let f = random_envelope_force(&mut rng, film);
            pairs.push((noisy_reading(&mut rng, noise.as_ref(), &f, film, cfg)?, f));
        }
        let fit = calibrate(&pairs, &c)?;
        let fitted = fit.apply_to(film);
        let mut sq = Vec3::zeros();
        for _ in 0..cfg.calibration.holdout {
            let f = random_envelope_force(&mut rng, film);
            let b = noisy_reading(&mut rng, noise.as_ref(), &f, film, cfg)?;
            let err = flux_to_force(&b, &fitted, &c)?.f - f;
            sq += err.component_mul(&err);
        }
        holdout_rms.push((sq / cfg.calibration.holdout.max(1) as f64).map(f64::sqrt));
        sensors.push(fitted);
        fits.push(fit);
    }
    Ok(CalibrationOutcome { bundle: CalibrationBundle { coefficients: c, sensors }, fits, holdout_rms })
}

/// Decoded frames of a recorded stream.
#[derive(Debug, Clone, Default)]
pub struct ReplayOutcome {
    pub csv: String,
    pub frames: usize,
    pub errors: usize,
}

pub const REPLAY_CSV_HEADER: &str = "t,node,seq,bx,by,bz";

/// Decodes a stream recorded with the default schedule.
pub fn replay_stream(path: &Path) -> std::io::Result<ReplayOutcome> {
    let bytes = read_stream(path)?;
    let mut recovery = TimestampRecovery::new(crate::bus::BusSchedule::default());
    let mut out = ReplayOutcome { csv: format!("{REPLAY_CSV_HEADER}\n"), ..Default::default() };
    for event in decode_stream(&bytes) {
        match event {
            Decoded::Frame { frame, .. } => {
                let t = recovery.recover(&frame, 0).map_or(f64::NAN, |t| t as f64 * 1e-6);
                let b = frame.flux();
                let _ = writeln!(out.csv, "{t:.6},{},{},{:.1},{:.1},{:.1}", frame.node_id, frame.seq, b.x, b.y, b.z);
                out.frames += 1;
            }
            Decoded::Error(e) => {
                log::warn!("{:?} at byte {} ({} bytes)", e.kind, e.offset, e.len);
                out.errors += 1;
            }
        }
    }
    Ok(out)
}
