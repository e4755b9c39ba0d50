//! Fixed-step closed-loop simulation of one scenario.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use super::config::{ConfigError, ScenarioConfig};
use super::metrics::{compute_metrics, RunMetrics};
use crate::bus::BusEmulator;
use crate::control::{ControlFlags, ControlStack, Reference};
use crate::geometry::Vec3;
use crate::perception::{ForceSnapshot, Perception, PerceptionConfig, PerceptionError, QualityFlags, SNAPSHOT_CSV_HEADER};
use crate::plant::{
    step_dynamics, step_servo, update_object, Actuators, ObjectModel, ObjectState, PlantError, PlantEvent, QuadrotorState,
    SensorLayout, Support,
};
use crate::tactile::{force_to_flux, CalibrationBundle, CompensationCoefficients, ForwardGauge, SensorCalibration, TactileError};

pub const TICK_CSV_HEADER: &str = "t,px,py,pz,vx,vy,vz,roll,pitch,yaw,theta,f_g,f_d,fext_x,fext_y,fext_z,thrust_z,payload_mass,burst,dropped,flags";

/// Halvings tried when a contact force has no flux preimage.
const FORCE_BACKOFF_STEPS: usize = 20;

#[derive(Debug, Error)]
pub enum RunError {
    #[error("invalid configuration:\n{0}")]
    Config(#[from] ConfigError),
    #[error("calibration file {path}: {message}")]
    Calibration { path: String, message: String },
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error(transparent)]
    Tactile(#[from] TactileError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl RunError {
    pub fn is_validation(&self) -> bool {
        matches!(self, RunError::Config(_) | RunError::Calibration { .. })
    }
}

/// One logged sensor-rate tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TickRow {
    pub t: f64,
    pub p: Vec3,
    pub v: Vec3,
    pub rpy: Vec3,
    pub theta: f64,
    pub f_g: f64,
    pub f_d: Option<f64>,
    pub f_ext: Vec3,
    pub thrust_z: f64,
    pub payload_mass: f64,
    pub burst: bool,
    pub dropped: bool,
    pub flags: QualityFlags,
    /// Reference position at this tick.
    pub p_ref: Vec3,
    /// Simulated total normal force on the pads.
    pub f_g_true: f64,
    /// Simulated net contact force, world frame.
    pub f_ext_true: Vec3,
    /// Whether offsets had been initialized when this tick was taken.
    pub calibrated: bool,
}

impl TickRow {
    pub fn csv_line(&self) -> String {
        let f_d = self.f_d.unwrap_or(f64::NAN);
        format!(
            "{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{},{}",
            self.t,
            self.p.x,
            self.p.y,
            self.p.z,
            self.v.x,
            self.v.y,
            self.v.z,
            self.rpy.x,
            self.rpy.y,
            self.rpy.z,
            self.theta,
            self.f_g,
            f_d,
            self.f_ext.x,
            self.f_ext.y,
            self.f_ext.z,
            self.thrust_z,
            self.payload_mass,
            u8::from(self.burst),
            u8::from(self.dropped),
            self.flags.bits()
        )
    }
}

#[derive(Debug, Clone)]
pub struct RunLog {
    pub ticks: Vec<TickRow>,
    pub snapshots: Vec<ForceSnapshot>,
    pub events: Vec<(f64, PlantEvent)>,
    pub thrust_saturations: u64,
    pub grasp_clamps: u64,
    /// Contact forces that had to be scaled down to be representable.
    pub force_backoffs: u64,
}

impl RunLog {
    pub fn tick_csv(&self) -> String {
        let mut out = String::with_capacity(200 * (self.ticks.len() + 1));
        out.push_str(TICK_CSV_HEADER);
        out.push('\n');
        for row in &self.ticks {
            out.push_str(&row.csv_line());
            out.push('\n');
        }
        out
    }

    pub fn snapshot_csv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{SNAPSHOT_CSV_HEADER}");
        for s in &self.snapshots {
            out.push_str(&s.csv_rows());
        }
        out
    }

    pub fn event_time(&self, event: PlantEvent) -> Option<f64> {
        self.events.iter().find(|(_, e)| *e == event).map(|(t, _)| *t)
    }
}

/// A finished or aborted run. `error` holds the reason for an abort; the
/// log covers everything up to it.
#[derive(Debug)]
pub struct RunOutcome {
    pub log: RunLog,
    pub metrics: RunMetrics,
    pub error: Option<RunError>,
}

/// Calibrations the estimator uses: the configured bundle or the nominal films.
pub fn estimator_sensors(cfg: &ScenarioConfig, layout: &SensorLayout) -> Result<(Vec<SensorCalibration>, CompensationCoefficients), RunError> {
    match &cfg.sensors.calibration_file {
        Some(path) => {
            let err = |message: String| RunError::Calibration { path: path.clone(), message };
            let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
            let bundle = CalibrationBundle::from_toml_str(&text).map_err(|e| err(e.to_string()))?;
            if bundle.sensors.len() != layout.len() {
                return Err(err(format!("expected {} sensors, got {}", layout.len(), bundle.sensors.len())));
            }
            Ok((bundle.sensors, bundle.coefficients))
        }
        None => Ok((nominal_sensors(layout, &cfg.sensors.coefficients)?, cfg.sensors.coefficients)),
    }
}

pub fn nominal_sensors(layout: &SensorLayout, c: &CompensationCoefficients) -> Result<Vec<SensorCalibration>, TactileError> {
    layout
        .mounts
        .iter()
        .enumerate()
        .map(|(i, m)| SensorCalibration::nominal(i as u8 + 1, *m, c))
        .collect()
}

pub fn perception_config(cfg: &ScenarioConfig, sensors: Vec<SensorCalibration>, c: CompensationCoefficients) -> PerceptionConfig {
    PerceptionConfig {
        sensors,
        coefficients: c,
        reference_mount: cfg.sensors.reference_mount(),
        schedule: cfg.sensors.schedule(),
        staleness_s: cfg.sensors.staleness_ms * 1e-3,
        noise_sigma_ut: cfg.noise.flux_sigma_ut,
        seed: cfg.seed,
        geomag_comp: cfg.flags.geomag_comp,
    }
}

/// Flux a film reads under a contact force, backing the force off toward
/// zero when the film model has no preimage for it.
fn contact_flux(f: &Vec3, cal: &SensorCalibration, c: &CompensationCoefficients, gauge: ForwardGauge) -> (Vec3, bool) {
    let mut scale = 1.0;
    for _ in 0..FORCE_BACKOFF_STEPS {
        if let Ok(b) = force_to_flux(&(f * scale), cal, c, gauge) {
            return (b.b, scale < 1.0);
        }
        scale *= 0.5;
    }
    let rest = force_to_flux(&Vec3::zeros(), cal, c, gauge).map(|b| b.b).unwrap_or_else(|_| Vec3::zeros());
    (rest, true)
}

/// Runs `cfg` to completion or divergence.
pub fn run_scenario(cfg: &ScenarioConfig) -> Result<RunOutcome, RunError> {
    cfg.validate()?;
    let params = cfg.plant.params();
    let servo = cfg.plant.servo();
    let layout = SensorLayout::hexagon();
    let object: Option<ObjectModel> = cfg.object.as_ref().map(|o| o.model()).transpose()?;
    let c = cfg.sensors.coefficients;
    let gauge = cfg.sensors.gauge.gauge();
    let films = nominal_sensors(&layout, &c)?;
    let (est_sensors, est_c) = estimator_sensors(cfg, &layout)?;
    let mut perception = Perception::new(perception_config(cfg, est_sensors, est_c))?;
    let schedule = cfg.sensors.schedule();
    let mut bus = BusEmulator::new(schedule.clone());
    let earth = cfg.sensors.earth_field.vec();
    let ref_mount = cfg.sensors.reference_mount();

    let dt_us = (cfg.dt * 1e6).round() as u64;
    let dt = dt_us as f64 * 1e-6;
    let period_us = schedule.period_us;
    let period = period_us as f64 * 1e-6;
    let end_us = (cfg.duration * 1e6).round() as u64;
    let baseline_us = (cfg.sensors.baseline_s * 1e6).round() as u64;

    let (_, p0) = cfg.setpoint_at(0.0);
    let theta_r = cfg.grasp.theta_r;
    let mut state = QuadrotorState::at_rest(p0, params.mass_base, theta_r);
    let mut act = Actuators::hover(params.mass_base);
    let flags = ControlFlags { force_feedback: cfg.flags.force_feedback, payload_ff: cfg.flags.payload_ff };
    let mut stack = ControlStack::new(cfg.gains(), flags, cfg.open_loop(), servo, params.mass_base, params.max_thrust, p0);
    let mut obj_state = ObjectState::default();
    let mut pos_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let pos_noise = (cfg.noise.position_sigma_m > 0.0).then(|| Normal::new(0.0, cfg.noise.position_sigma_m).expect("finite sigma"));

    let mut log = RunLog {
        ticks: Vec::with_capacity((end_us / period_us) as usize + 1),
        snapshots: Vec::new(),
        events: Vec::new(),
        thrust_saturations: 0,
        grasp_clamps: 0,
        force_backoffs: 0,
    };
    let mut pending = Vec::new();
    let mut calibrated = false;
    let mut grounded_before = false;
    let mut error = None;
    perception.begin_baseline();

    let mut t_us = 0;
    while t_us < end_us {
        let t = t_us as f64 * 1e-6;
        let upd = match &object {
            Some(obj) => {
                let u = update_object(&state, obj, &mut obj_state, &layout, &params, t);
                log.events.extend(u.events.iter().map(|e| (t, *e)));
                Some(u)
            }
            None => None,
        };

        let field_body = state.r.inverse().rotate(&earth);
        let mut backoffs = 0;
        let bytes = bus.poll(t_us, |node, _| {
            if node == 0 {
                return ref_mount.inverse().rotate(&field_body);
            }
            let i = usize::from(node) - 1;
            let film = &films[i];
            let f = upd.as_ref().map(|u| u.contact.forces[i]).unwrap_or_else(Vec3::zeros);
            let (contact, backed_off) = contact_flux(&f, film, &c, gauge);
            if backed_off {
                backoffs += 1;
            }
            contact + film.mount_rotation.inverse().rotate(&field_body)
        });
        if backoffs > 0 {
            if log.force_backoffs == 0 {
                log::warn!("contact force beyond the film model at t = {t:.3} s, scaled down");
            }
            log.force_backoffs += backoffs;
        }
        pending.extend_from_slice(&bytes);

        if t_us % period_us == 0 {
            perception.ingest_bytes(&pending, t_us);
            pending.clear();
            if !calibrated && t_us >= baseline_us {
                let offsets = perception.finish_baseline()?;
                log::debug!("offsets initialized: {offsets:?}");
                calibrated = true;
            }
            let snap = perception.snapshot(&state.r, t);
            let (f_d_sched, p_ref) = cfg.setpoint_at(t);
            let f_d = if calibrated { f_d_sched } else { None };
            let f_ext = if calibrated { snap.f_ext } else { Vec3::zeros() };
            stack.slow_update(&f_ext, snap.f_g, f_d, Reference::hold(p_ref), period);
            if stack.grasp_clamped {
                log.grasp_clamps += 1;
            }
            let (roll, pitch, yaw) = state.r.to_euler();
            let carried = matches!(obj_state.support, Support::Gripped | Support::Slipping) && obj_state.present();
            log.ticks.push(TickRow {
                t,
                p: state.p,
                v: state.v,
                rpy: Vec3::new(roll, pitch, yaw),
                theta: state.theta,
                f_g: snap.f_g,
                f_d,
                f_ext: snap.f_ext,
                thrust_z: act.thrust,
                payload_mass: match (&object, carried) {
                    (Some(obj), true) => obj.mass_at(t),
                    _ => 0.0,
                },
                burst: obj_state.burst,
                dropped: obj_state.support == Support::Dropped,
                flags: snap.flags,
                p_ref,
                f_g_true: upd.as_ref().map_or(0.0, |u| u.contact.total_normal),
                f_ext_true: upd.as_ref().map_or_else(Vec3::zeros, |u| u.contact.net_world(&layout, &state.r)),
                calibrated,
            });
            log.snapshots.push(snap);
        }

        let mut measured = state;
        if let Some(n) = &pos_noise {
            measured.p += Vec3::new(n.sample(&mut pos_rng), n.sample(&mut pos_rng), n.sample(&mut pos_rng));
        }
        let out = stack.fast_update(&measured, dt);
        if out.thrust.saturated {
            log.thrust_saturations += 1;
        }
        act.step(out.thrust.scalar, &out.torque, &params, dt);
        let theta = step_servo(state.theta, stack.theta_cmd, &servo, dt);
        let (reaction, extra) = upd.as_ref().map_or((Vec3::zeros(), 0.0), |u| (u.reaction, u.attached_mass));
        match step_dynamics(&state, &act, &reaction, extra, &params, t, dt) {
            Ok((mut next, grounded)) => {
                next.theta = theta;
                if grounded && !grounded_before {
                    log.events.push((t + dt, PlantEvent::Ground));
                    log::info!("vehicle reached the ground at t = {:.3} s", t + dt);
                }
                grounded_before = grounded;
                state = next;
            }
            Err(e) => {
                log::error!("{e}");
                error = Some(RunError::Plant(e));
                break;
            }
        }
        t_us += dt_us;
    }

    let metrics = compute_metrics(cfg, &log);
    Ok(RunOutcome { log, metrics, error })
}
