//! Scenario configuration: a flat TOML file with dotted keys.
//!
//! ```text
//! scenario = "balloon"
//! duration = 30.0
//! control.K.z = 60.0
//! object.kind = "balloon"
//! setpoints = [{ t = 0.5, f_d = 0.25 }, { t = 10.0, f_d = 0.65 }]
//! ```
//!
//! Unknown keys are rejected. Every key has a default except `scenario`
//! and `duration`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bus::BusSchedule;
use crate::control::{
    ControllerGains, GraspAdmittanceParams, OpenLoopGrasp, PositionAdmittanceParams, TrackingGains,
};
use crate::geometry::{Rotation, Vec3};
use crate::plant::{
    ApertureGeometry, MassSchedule, ObjectKind, ObjectModel, PlantParams, ServoParams, StiffnessCurve,
};
use crate::tactile::{CompensationCoefficients, ForwardGauge, Polarity};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Xyz {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Xyz {
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub const fn splat(v: f64) -> Self {
        Self { x: v, y: v, z: v }
    }

    pub fn vec(&self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }
}

impl From<Vec3> for Xyz {
    fn from(v: Vec3) -> Self {
        Self { x: v.x, y: v.y, z: v.z }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenarioId {
    Balloon,
    DynamicLoad,
    Bottle,
    Sweep,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Flags {
    pub force_feedback: bool,
    pub geomag_comp: bool,
    pub payload_ff: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self { force_feedback: true, geomag_comp: true, payload_ff: true }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Flux noise per component, µT.
    pub flux_sigma_ut: f64,
    /// Position measurement noise per component, m.
    pub position_sigma_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServoConfig {
    pub theta_min: f64,
    pub theta_max: f64,
    pub rate_max: f64,
    pub tau: f64,
}

impl Default for ServoConfig {
    fn default() -> Self {
        let s = ServoParams::default();
        Self { theta_min: s.theta_min, theta_max: s.theta_max, rate_max: s.rate_max, tau: s.tau }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ApertureConfig {
    pub r_max: f64,
    pub r_min: f64,
    pub standoff: f64,
}

impl Default for ApertureConfig {
    fn default() -> Self {
        let a = ApertureGeometry::default();
        Self { r_max: a.r_max, r_min: a.r_min, standoff: a.standoff }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantConfig {
    pub mass_base: f64,
    pub inertia: Xyz,
    pub max_thrust: f64,
    pub motor_tau: f64,
    pub pad_stiffness: f64,
    pub servo: ServoConfig,
    pub aperture: ApertureConfig,
}

impl Default for PlantConfig {
    fn default() -> Self {
        let p = PlantParams::default();
        Self {
            mass_base: p.mass_base,
            inertia: p.inertia.into(),
            max_thrust: p.max_thrust,
            motor_tau: p.motor_tau,
            pad_stiffness: p.pad_stiffness,
            servo: ServoConfig::default(),
            aperture: ApertureConfig::default(),
        }
    }
}

impl PlantConfig {
    pub fn params(&self) -> PlantParams {
        PlantParams {
            mass_base: self.mass_base,
            inertia: self.inertia.vec(),
            max_thrust: self.max_thrust,
            motor_tau: self.motor_tau,
            servo: self.servo(),
            aperture: ApertureGeometry {
                r_max: self.aperture.r_max,
                r_min: self.aperture.r_min,
                standoff: self.aperture.standoff,
            },
            pad_stiffness: self.pad_stiffness,
        }
    }

    pub fn servo(&self) -> ServoParams {
        ServoParams {
            theta_min: self.servo.theta_min,
            theta_max: self.servo.theta_max,
            rate_max: self.servo.rate_max,
            tau: self.servo.tau,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    #[serde(rename = "M")]
    pub m: Xyz,
    /// Defaults to `2√(MK)` per axis when absent.
    #[serde(rename = "D", skip_serializing_if = "Option::is_none")]
    pub d: Option<Xyz>,
    #[serde(rename = "K")]
    pub k: Xyz,
    pub kp: Xyz,
    pub kv: Xyz,
    pub k_r: Xyz,
    pub kp_omega: Xyz,
    pub ki_omega: Xyz,
    pub kd_omega: Xyz,
    pub integral_clamp: f64,
    pub derivative_cutoff_hz: f64,
    pub payload_cutoff_hz: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        let a = PositionAdmittanceParams::default();
        let t = TrackingGains::default();
        Self {
            m: a.m.into(),
            d: None,
            k: a.k.into(),
            kp: t.kp.into(),
            kv: t.kv.into(),
            k_r: t.k_r.into(),
            kp_omega: t.kp_omega.into(),
            ki_omega: t.ki_omega.into(),
            kd_omega: t.kd_omega.into(),
            integral_clamp: t.integral_clamp,
            derivative_cutoff_hz: t.derivative_cutoff_hz,
            payload_cutoff_hz: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraspConfig {
    #[serde(rename = "M")]
    pub m: f64,
    #[serde(rename = "B")]
    pub b: f64,
    #[serde(rename = "K")]
    pub k: f64,
    pub theta_r: f64,
    /// Servo target of the open-loop grasp used without force feedback.
    pub open_loop_theta: f64,
    pub open_loop_rate: f64,
}

impl Default for GraspConfig {
    fn default() -> Self {
        let g = GraspAdmittanceParams::default();
        Self { m: g.m, b: g.b, k: g.k, theta_r: g.theta_r, open_loop_theta: 1.0, open_loop_rate: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ObjectConfig {
    Balloon {
        rest_radius: f64,
        burst_force: f64,
        /// `[start deformation m, stiffness N/m]` segments.
        stiffness: Vec<[f64; 2]>,
    },
    Container {
        radius: f64,
        friction_mu: f64,
        /// `[time s, mass kg]` knots.
        mass_schedule: Vec<[f64; 2]>,
        #[serde(skip_serializing_if = "Option::is_none")]
        release_time: Option<f64>,
    },
    Bottle {
        radius: f64,
        mass: f64,
        friction_mu: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        release_time: Option<f64>,
    },
    Block {
        radius: f64,
        stiffness: f64,
    },
}

impl ObjectConfig {
    pub fn model(&self) -> Result<ObjectModel, crate::plant::PlantError> {
        let pairs = |v: &[[f64; 2]]| v.iter().map(|p| (p[0], p[1])).collect::<Vec<_>>();
        let (kind, release) = match self {
            ObjectConfig::Balloon { rest_radius, burst_force, stiffness } => (
                ObjectKind::Balloon {
                    curve: StiffnessCurve::new(pairs(stiffness))?,
                    burst_force: *burst_force,
                    rest_radius: *rest_radius,
                },
                None,
            ),
            ObjectConfig::Container { radius, friction_mu, mass_schedule, release_time } => (
                ObjectKind::BeadContainer {
                    radius: *radius,
                    mass_schedule: MassSchedule::new(pairs(mass_schedule))?,
                    friction_mu: *friction_mu,
                },
                *release_time,
            ),
            ObjectConfig::Bottle { radius, mass, friction_mu, release_time } => {
                (ObjectKind::Bottle { radius: *radius, mass: *mass, friction_mu: *friction_mu }, *release_time)
            }
            ObjectConfig::Block { radius, stiffness } => {
                (ObjectKind::RigidBlock { radius: *radius, stiffness: *stiffness }, None)
            }
        };
        let model = ObjectModel { kind, release_time: release.unwrap_or(f64::INFINITY) };
        model.validate()?;
        Ok(model)
    }

    pub fn release_time(&self) -> Option<f64> {
        match self {
            ObjectConfig::Container { release_time, .. } | ObjectConfig::Bottle { release_time, .. } => *release_time,
            ObjectConfig::Balloon { .. } | ObjectConfig::Block { .. } => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GaugeConfig {
    #[default]
    North,
    South,
}

impl GaugeConfig {
    pub fn gauge(&self) -> ForwardGauge {
        ForwardGauge {
            polarity: match self {
                GaugeConfig::North => Polarity::North,
                GaugeConfig::South => Polarity::South,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    /// World-frame geomagnetic field, µT.
    pub earth_field: Xyz,
    /// Roll, pitch, yaw of the reference sensor relative to the body, rad.
    pub reference_mount_rpy: Xyz,
    pub period_ms: f64,
    pub staleness_ms: f64,
    /// Quiet period used for offset initialization, s.
    pub baseline_s: f64,
    pub gauge: GaugeConfig,
    pub coefficients: CompensationCoefficients,
    /// Calibration bundle to use instead of the nominal sensors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub calibration_file: Option<String>,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            earth_field: Xyz::new(30.0, 0.0, -40.0),
            reference_mount_rpy: Xyz::new(std::f64::consts::PI, 0.0, 0.3),
            period_ms: 20.0,
            staleness_ms: 60.0,
            baseline_s: 0.5,
            gauge: GaugeConfig::North,
            coefficients: CompensationCoefficients::default(),
            calibration_file: None,
        }
    }
}

impl SensorConfig {
    pub fn reference_mount(&self) -> Rotation {
        let r = self.reference_mount_rpy;
        Rotation::from_euler(r.x, r.y, r.z)
    }

    pub fn period_us(&self) -> u64 {
        (self.period_ms * 1e3).round() as u64
    }

    pub fn schedule(&self) -> BusSchedule {
        BusSchedule::staggered(7, self.period_us()).expect("validated period")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Setpoint {
    pub t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub f_d: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Xyz>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub limit_deg: f64,
    pub step_deg: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { limit_deg: 30.0, step_deg: 5.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    /// Loading pairs per sensor.
    pub samples: usize,
    /// Held-out pairs per sensor used to report the error.
    pub holdout: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self { samples: 200, holdout: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub scenario: ScenarioId,
    /// Simulated time, s.
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dt")]
    pub dt: f64,
    #[serde(default = "default_hover")]
    pub hover: Xyz,
    #[serde(default)]
    pub flags: Flags,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub plant: PlantConfig,
    #[serde(default)]
    pub control: ControlConfig,
    #[serde(default)]
    pub grasp: GraspConfig,
    #[serde(default)]
    pub sensors: SensorConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub calibration: CalibrationConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub object: Option<ObjectConfig>,
    #[serde(default)]
    pub setpoints: Vec<Setpoint>,
}

fn default_dt() -> f64 {
    0.001
}

fn default_hover() -> Xyz {
    Xyz::new(0.0, 0.0, 1.0)
}

/// A rejected key or value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub path: String,
    pub message: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError {
    pub errors: Vec<FieldError>,
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, e) in self.errors.iter().enumerate() {
            if i > 0 {
                writeln!(f)?;
            }
            write!(f, "{e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigError {}

impl ConfigError {
    fn single(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self { errors: vec![FieldError { path: path.into(), message: message.into() }] }
    }
}

impl ScenarioConfig {
    /// Parses and validates a config text.
    /// Parses and validates a config text. Keys given in the text override
    /// the defaults one leaf at a time, so `control.K.z = 10.0` leaves
    /// `control.K.x` at its default.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let user: toml::Table = toml::from_str(text).map_err(|e| ConfigError::single("<document>", e.to_string()))?;
        let mut merged = defaults_table();
        merge(&mut merged, user);
        let cfg: Self = serde_path_to_error::deserialize(toml::Value::Table(merged)).map_err(|e| {
            let path = e.path().to_string();
            let message = e.into_inner().message().to_string();
            ConfigError::single(if path == "." { "<document>".into() } else { path }, message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::single(path.display().to_string(), e.to_string()))?;
        Self::parse(&text)
    }

    /// Canonical text: one `dotted.key = value` line per leaf, keys sorted.
    pub fn to_canonical_string(&self) -> String {
        let value = toml::Value::try_from(self).expect("config serializes");
        let mut lines = Vec::new();
        flatten("", &value, &mut lines);
        lines.sort();
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();
        let mut check = |ok: bool, path: &str, message: &str| {
            if !ok {
                errors.push(FieldError { path: path.into(), message: message.into() });
            }
        };
        let pos = |v: f64| v > 0.0 && v.is_finite();
        let pos3 = |v: &Xyz| pos(v.x) && pos(v.y) && pos(v.z);
        check(pos(self.duration), "duration", "must be positive");
        check(i64::try_from(self.seed).is_ok(), "seed", "must not exceed 2^63 - 1");
        check(pos(self.dt) && self.dt <= 0.01, "dt", "must lie in (0, 0.01]");
        let period_us = self.sensors.period_us();
        let dt_us = (self.dt * 1e6).round() as u64;
        check(
            pos(self.sensors.period_ms) && dt_us > 0 && period_us.is_multiple_of(dt_us) && ((self.dt * 1e6) - dt_us as f64).abs() < 1e-6,
            "dt",
            "must be a whole number of microseconds dividing the sensor period",
        );
        check(pos(self.sensors.staleness_ms), "sensors.staleness_ms", "must be positive");
        check(self.sensors.baseline_s >= 0.5, "sensors.baseline_s", "must be at least 0.5 s");
        check(self.noise.flux_sigma_ut >= 0.0, "noise.flux_sigma_ut", "must be nonnegative");
        check(self.noise.position_sigma_m >= 0.0, "noise.position_sigma_m", "must be nonnegative");
        if let Err(e) = self.sensors.coefficients.validate() {
            check(false, "sensors.coefficients", &e.to_string());
        }

        let c = &self.control;
        for (v, name) in [(&c.m, "control.M"), (&c.k, "control.K"), (&c.kp, "control.kp"), (&c.kv, "control.kv")] {
            check(pos3(v), name, "entries must be positive");
        }
        if let Some(d) = &c.d {
            check(pos3(d), "control.D", "entries must be positive");
        }
        for (v, name) in [(&c.k_r, "control.k_r"), (&c.kp_omega, "control.kp_omega"), (&c.ki_omega, "control.ki_omega"), (&c.kd_omega, "control.kd_omega")] {
            check(pos3(v), name, "entries must be positive");
        }
        check(pos(c.integral_clamp), "control.integral_clamp", "must be positive");
        check(pos(c.derivative_cutoff_hz), "control.derivative_cutoff_hz", "must be positive");
        check(pos(c.payload_cutoff_hz), "control.payload_cutoff_hz", "must be positive");

        let g = &self.grasp;
        check(pos(g.m), "grasp.M", "must be positive");
        check(pos(g.b), "grasp.B", "must be positive");
        check(pos(g.k), "grasp.K", "must be positive");
        check(pos(g.open_loop_rate), "grasp.open_loop_rate", "must be positive");
        let s = &self.plant.servo;
        check(s.theta_min <= g.theta_r && g.theta_r <= s.theta_max, "grasp.theta_r", "must lie within the servo limits");

        if let Err(e) = self.plant.params().validate() {
            check(false, "plant", &e.to_string());
        }
        if let Some(obj) = &self.object {
            if let Err(e) = obj.model() {
                check(false, "object", &e.to_string());
            }
        }
        check(
            self.setpoints.windows(2).all(|w| w[0].t < w[1].t),
            "setpoints",
            "times must be strictly increasing",
        );
        for (i, sp) in self.setpoints.iter().enumerate() {
            check(sp.t >= 0.0 && sp.t < self.duration, &format!("setpoints[{i}].t"), "must lie within [0, duration)");
            if let Some(f) = sp.f_d {
                check(f >= 0.0 && f.is_finite(), &format!("setpoints[{i}].f_d"), "must be nonnegative");
            }
        }
        check(pos(self.sweep.limit_deg) && pos(self.sweep.step_deg), "sweep", "limit_deg and step_deg must be positive");
        check(self.calibration.samples >= 4, "calibration.samples", "must be at least 4");
        if matches!(self.scenario, ScenarioId::Balloon | ScenarioId::DynamicLoad | ScenarioId::Bottle) {
            check(self.object.is_some(), "object", "required for this scenario");
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError { errors })
        }
    }

    pub fn gains(&self) -> ControllerGains {
        let c = &self.control;
        let admittance = match c.d {
            Some(d) => PositionAdmittanceParams { m: c.m.vec(), d: d.vec(), k: c.k.vec() },
            None => PositionAdmittanceParams::critically_damped(c.m.vec(), c.k.vec()),
        };
        ControllerGains {
            admittance,
            tracking: TrackingGains {
                kp: c.kp.vec(),
                kv: c.kv.vec(),
                k_r: c.k_r.vec(),
                kp_omega: c.kp_omega.vec(),
                ki_omega: c.ki_omega.vec(),
                kd_omega: c.kd_omega.vec(),
                integral_clamp: c.integral_clamp,
                derivative_cutoff_hz: c.derivative_cutoff_hz,
            },
            grasp: GraspAdmittanceParams { m: self.grasp.m, b: self.grasp.b, k: self.grasp.k, theta_r: self.grasp.theta_r },
            payload_cutoff_hz: c.payload_cutoff_hz,
        }
    }

    pub fn open_loop(&self) -> OpenLoopGrasp {
        OpenLoopGrasp { theta: self.grasp.open_loop_theta, rate: self.grasp.open_loop_rate }
    }

    /// Active setpoint at `t`: desired grasp force (if engaged) and position.
    pub fn setpoint_at(&self, t: f64) -> (Option<f64>, Vec3) {
        let mut f_d = None;
        let mut p = self.hover.vec();
        for sp in self.setpoints.iter().take_while(|sp| sp.t <= t) {
            if sp.f_d.is_some() {
                f_d = sp.f_d;
            }
            if let Some(q) = sp.p {
                p = q.vec();
            }
        }
        (f_d, p)
    }
}

/// Every defaulted key, as a table.
fn defaults_table() -> toml::Table {
    let cfg: ScenarioConfig = toml::from_str("scenario = \"custom\"\nduration = 1.0").expect("defaults parse");
    let mut table = toml::Table::try_from(&cfg).expect("config serializes");
    table.remove("scenario");
    table.remove("duration");
    table
}

/// Overlays `user` onto `base`; tables merge key by key, anything else replaces.
fn merge(base: &mut toml::Table, user: toml::Table) {
    for (k, v) in user {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => merge(b, u),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<String>) {
    match value {
        toml::Value::Table(t) if !t.is_empty() => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        other => out.push(format!("{prefix} = {}", inline(other))),
    }
}

fn inline(value: &toml::Value) -> String {
    match value {
        toml::Value::Array(items) => format!("[{}]", items.iter().map(inline).collect::<Vec<_>>().join(", ")),
        toml::Value::Table(t) => format!(
            "{{ {} }}",
            t.iter().map(|(k, v)| format!("{k} = {}", inline(v))).collect::<Vec<_>>().join(", ")
        ),
        toml::Value::Float(f) => format_float(*f),
        other => other.to_string(),
    }
}

/// Shortest round-trip representation, always with a decimal point.
fn format_float(f: f64) -> String {
    if f.is_nan() {
        "nan".into()
    } else if f.is_infinite() {
        if f > 0.0 { "inf".into() } else { "-inf".into() }
    } else {
        let s = format!("{f:?}");
        if s.contains(['.', 'e', 'E']) {
            s
        } else {
            format!("{s}.0")
        }
    }
}
