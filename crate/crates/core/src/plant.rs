//! Rigid-body quadrotor with a servo-driven aperture, contact objects and
//! per-sensor contact force generation.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

use crate::geometry::{Rotation, Vec3};

pub const GRAVITY: f64 = 9.81;
/// Time an object may go without sufficient support before it is lost.
pub const SLIP_TIMEOUT_S: f64 = 0.5;
const POSITION_BOUND_M: f64 = 100.0;
const RATE_BOUND_RAD_S: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlantError {
    #[error("numerical divergence at t = {t:.3} s: {what}")]
    NumericalDivergence { t: f64, what: String },
    #[error("invalid plant parameter: {0}")]
    InvalidParameter(String),
}

fn invalid(msg: impl Into<String>) -> PlantError {
    PlantError::InvalidParameter(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadrotorState {
    /// World position, m.
    pub p: Vec3,
    pub v: Vec3,
    /// Body → world.
    pub r: Rotation,
    /// Body rates, rad/s.
    pub omega: Vec3,
    /// Servo angle, rad.
    pub theta: f64,
    pub mass_base: f64,
}

impl QuadrotorState {
    pub fn at_rest(p: Vec3, mass_base: f64, theta: f64) -> Self {
        Self { p, v: Vec3::zeros(), r: Rotation::identity(), omega: Vec3::zeros(), theta, mass_base }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ServoParams {
    pub theta_min: f64,
    pub theta_max: f64,
    pub rate_max: f64,
    pub tau: f64,
}

impl Default for ServoParams {
    fn default() -> Self {
        Self { theta_min: 0.0, theta_max: 2.0, rate_max: 2.0, tau: 0.05 }
    }
}

/// Affine map from servo angle to the inner-wall radius.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApertureGeometry {
    /// Radius at `theta_min`, m.
    pub r_max: f64,
    /// Radius at `theta_max`, m.
    pub r_min: f64,
    /// Distance from the wall to the sensor pad surface, m.
    pub standoff: f64,
}

impl Default for ApertureGeometry {
    fn default() -> Self {
        Self { r_max: 0.12, r_min: 0.04, standoff: 0.016 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantParams {
    pub mass_base: f64,
    /// Diagonal inertia, kg·m².
    pub inertia: Vec3,
    pub max_thrust: f64,
    pub motor_tau: f64,
    pub servo: ServoParams,
    pub aperture: ApertureGeometry,
    /// Normal stiffness of one sensor pad, N/m.
    pub pad_stiffness: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            mass_base: 0.556,
            inertia: Vec3::new(4e-3, 4e-3, 7e-3),
            max_thrust: 12.0,
            motor_tau: 0.03,
            servo: ServoParams::default(),
            aperture: ApertureGeometry::default(),
            pad_stiffness: 1000.0,
        }
    }
}

impl PlantParams {
    pub fn validate(&self) -> Result<(), PlantError> {
        let s = &self.servo;
        let a = &self.aperture;
        if !(self.mass_base > 0.0) {
            return Err(invalid("mass_base must be positive"));
        }
        if self.inertia.iter().any(|j| !(*j > 0.0)) {
            return Err(invalid("inertia entries must be positive"));
        }
        if !(self.max_thrust > 0.0) || !(self.motor_tau > 0.0) {
            return Err(invalid("max_thrust and motor_tau must be positive"));
        }
        if !(s.theta_max > s.theta_min) || !(s.rate_max > 0.0) || !(s.tau > 0.0) {
            return Err(invalid("servo limits must satisfy theta_min < theta_max, rate_max > 0, tau > 0"));
        }
        if !(a.r_max > a.r_min) || !(a.r_min > 0.0) || !(a.standoff >= 0.0) || a.standoff >= a.r_min {
            return Err(invalid("aperture must satisfy r_max > r_min > standoff >= 0"));
        }
        if !(self.pad_stiffness > 0.0) {
            return Err(invalid("pad_stiffness must be positive"));
        }
        Ok(())
    }
}

/// Inner-wall radius for a servo angle, clamped to the servo limits.
/// Returns the radius and whether the angle was clamped.
pub fn aperture_radius(theta: f64, servo: &ServoParams, geom: &ApertureGeometry) -> (f64, bool) {
    let clamped = theta.clamp(servo.theta_min, servo.theta_max);
    let frac = (clamped - servo.theta_min) / (servo.theta_max - servo.theta_min);
    (geom.r_max - (geom.r_max - geom.r_min) * frac, clamped != theta)
}

/// Servo angle at which the pads touch an object of radius `radius`.
pub fn contact_angle(radius: f64, servo: &ServoParams, geom: &ApertureGeometry) -> f64 {
    let frac = (geom.r_max - geom.standoff - radius) / (geom.r_max - geom.r_min);
    servo.theta_min + frac * (servo.theta_max - servo.theta_min)
}

/// Rate-limited first-order servo tracking.
pub fn step_servo(theta: f64, theta_cmd: f64, servo: &ServoParams, dt: f64) -> f64 {
    let cmd = theta_cmd.clamp(servo.theta_min, servo.theta_max);
    let step = (cmd - theta) * -(-dt / servo.tau).exp_m1();
    let limit = servo.rate_max * dt;
    (theta + step.clamp(-limit, limit)).clamp(servo.theta_min, servo.theta_max)
}

/// Tactile pads around the aperture.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorLayout {
    /// Sensor → body, indexed by node id − 1.
    pub mounts: Vec<Rotation>,
}

impl SensorLayout {
    /// `n` pads evenly spaced in azimuth with sensor z pointing radially
    /// outward and sensor x along body z.
    pub fn ring(n: usize) -> Self {
        let mounts = (0..n)
            .map(|i| {
                let az = 2.0 * PI * i as f64 / n as f64;
                Rotation::rz(az).compose(&Rotation::ry(FRAC_PI_2)).compose(&Rotation::rz(PI))
            })
            .collect();
        Self { mounts }
    }

    pub fn hexagon() -> Self {
        Self::ring(6)
    }

    pub fn len(&self) -> usize {
        self.mounts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mounts.is_empty()
    }

    /// Outward radial unit vector of pad `i` in the body frame.
    pub fn radial(&self, i: usize) -> Vec3 {
        self.mounts[i].rotate(&Vec3::z())
    }
}

/// Piecewise-linear force/deformation law given as stiffness segments.
#[derive(Debug, Clone, PartialEq)]
pub struct StiffnessCurve {
    /// `(start deformation m, stiffness N/m)`; the first start is 0.
    segments: Vec<(f64, f64)>,
}

impl StiffnessCurve {
    pub fn new(segments: Vec<(f64, f64)>) -> Result<Self, PlantError> {
        if segments.is_empty() || segments[0].0 != 0.0 {
            return Err(invalid("stiffness curve must start at zero deformation"));
        }
        if segments.windows(2).any(|w| !(w[1].0 > w[0].0)) {
            return Err(invalid("stiffness curve breakpoints must increase"));
        }
        if segments.iter().any(|(_, k)| !(*k > 0.0)) {
            return Err(invalid("stiffness values must be positive"));
        }
        Ok(Self { segments })
    }

    pub fn linear(k: f64) -> Result<Self, PlantError> {
        Self::new(vec![(0.0, k)])
    }

    pub fn segments(&self) -> &[(f64, f64)] {
        &self.segments
    }

    pub fn force(&self, deformation: f64) -> f64 {
        if deformation <= 0.0 {
            return 0.0;
        }
        let mut f = 0.0;
        for (i, &(start, k)) in self.segments.iter().enumerate() {
            let end = self.segments.get(i + 1).map_or(f64::INFINITY, |s| s.0);
            if deformation <= end {
                return f + k * (deformation - start);
            }
            f += k * (end - start);
        }
        f
    }

    pub fn deformation(&self, force: f64) -> f64 {
        if force <= 0.0 {
            return 0.0;
        }
        let mut f = 0.0;
        for (i, &(start, k)) in self.segments.iter().enumerate() {
            let end = self.segments.get(i + 1).map_or(f64::INFINITY, |s| s.0);
            let f_end = f + k * (end - start);
            if force <= f_end {
                return start + (force - f) / k;
            }
            f = f_end;
        }
        unreachable!("last segment is unbounded")
    }
}

/// Piecewise-linear, nondecreasing mass over time.
#[derive(Debug, Clone, PartialEq)]
pub struct MassSchedule {
    knots: Vec<(f64, f64)>,
}

impl MassSchedule {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, PlantError> {
        if knots.is_empty() {
            return Err(invalid("mass schedule needs at least one knot"));
        }
        if knots.iter().any(|(t, m)| !t.is_finite() || !(*m >= 0.0)) {
            return Err(invalid("mass schedule masses must be nonnegative"));
        }
        if knots.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(invalid("mass schedule times must increase"));
        }
        if knots.windows(2).any(|w| w[1].1 < w[0].1) {
            return Err(invalid("mass schedule must be nondecreasing"));
        }
        Ok(Self { knots })
    }

    pub fn constant(mass: f64) -> Result<Self, PlantError> {
        Self::new(vec![(0.0, mass)])
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn mass_at(&self, t: f64) -> f64 {
        let k = &self.knots;
        if t <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            if t <= w[1].0 {
                let s = (t - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + s * (w[1].1 - w[0].1);
            }
        }
        k[k.len() - 1].1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ObjectKind {
    Balloon { curve: StiffnessCurve, burst_force: f64, rest_radius: f64 },
    BeadContainer { radius: f64, mass_schedule: MassSchedule, friction_mu: f64 },
    Bottle { radius: f64, mass: f64, friction_mu: f64 },
    RigidBlock { radius: f64, stiffness: f64 },
}

/// An object centered in the aperture, held in place by an external
/// support until `release_time`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectModel {
    pub kind: ObjectKind,
    pub release_time: f64,
}

impl ObjectModel {
    pub fn validate(&self) -> Result<(), PlantError> {
        let positive = |v: f64, name: &str| if v > 0.0 { Ok(()) } else { Err(invalid(format!("{name} must be positive"))) };
        match &self.kind {
            ObjectKind::Balloon { burst_force, rest_radius, .. } => {
                positive(*burst_force, "burst_force")?;
                positive(*rest_radius, "rest_radius")
            }
            ObjectKind::BeadContainer { radius, friction_mu, .. } => {
                positive(*radius, "radius")?;
                positive(*friction_mu, "friction_mu")
            }
            ObjectKind::Bottle { radius, mass, friction_mu } => {
                positive(*radius, "radius")?;
                positive(*friction_mu, "friction_mu")?;
                if *mass >= 0.0 {
                    Ok(())
                } else {
                    Err(invalid("mass must be nonnegative"))
                }
            }
            ObjectKind::RigidBlock { radius, stiffness } => {
                positive(*radius, "radius")?;
                positive(*stiffness, "stiffness")
            }
        }
    }

    pub fn radius(&self) -> f64 {
        match &self.kind {
            ObjectKind::Balloon { rest_radius, .. } => *rest_radius,
            ObjectKind::BeadContainer { radius, .. }
            | ObjectKind::Bottle { radius, .. }
            | ObjectKind::RigidBlock { radius, .. } => *radius,
        }
    }

    pub fn mass_at(&self, t: f64) -> f64 {
        match &self.kind {
            ObjectKind::BeadContainer { mass_schedule, .. } => mass_schedule.mass_at(t),
            ObjectKind::Bottle { mass, .. } => *mass,
            ObjectKind::Balloon { .. } | ObjectKind::RigidBlock { .. } => 0.0,
        }
    }

    pub fn friction_mu(&self) -> f64 {
        match &self.kind {
            ObjectKind::BeadContainer { friction_mu, .. } | ObjectKind::Bottle { friction_mu, .. } => *friction_mu,
            ObjectKind::Balloon { .. } | ObjectKind::RigidBlock { .. } => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BalloonState {
    pub deformation: f64,
    pub burst: bool,
}

/// Deformation under a total squeeze force, latching the burst flag.
pub fn balloon_state(curve: &StiffnessCurve, burst_force: f64, total_normal: f64, burst_before: bool) -> BalloonState {
    let burst = burst_before || total_normal > burst_force;
    let deformation = if burst { 0.0 } else { curve.deformation(total_normal) };
    BalloonState { deformation, burst }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Support {
    /// Held by the external fixture.
    External,
    /// Rigidly carried by the gripper.
    Gripped,
    /// Released but friction cannot carry the weight.
    Slipping,
    /// Fallen out of the gripper.
    Dropped,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectState {
    pub support: Support,
    pub burst: bool,
    /// Object center relative to the aperture axis, body frame.
    pub offset: Vec3,
    /// Time at which slipping began.
    pub slip_since: Option<f64>,
}

impl Default for ObjectState {
    fn default() -> Self {
        Self { support: Support::External, burst: false, offset: Vec3::zeros(), slip_since: None }
    }
}

impl ObjectState {
    pub fn present(&self) -> bool {
        self.support != Support::Dropped && !self.burst
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContactReport {
    /// Force on each pad, sensor frame.
    pub forces: Vec<Vec3>,
    pub in_contact: Vec<bool>,
    /// Sum of the normal components, N.
    pub total_normal: f64,
    /// Vertical load carried by friction, N.
    pub supported_load: f64,
}

impl ContactReport {
    pub fn empty(n: usize) -> Self {
        Self { forces: vec![Vec3::zeros(); n], in_contact: vec![false; n], total_normal: 0.0, supported_load: 0.0 }
    }

    /// Net force the pads exert on the vehicle, world frame.
    pub fn net_world(&self, layout: &SensorLayout, r: &Rotation) -> Vec3 {
        let body: Vec3 = self.forces.iter().zip(&layout.mounts).map(|(f, m)| m.rotate(f)).sum();
        r.rotate(&body)
    }
}

/// Per-pad normal forces for the current aperture, body frame magnitudes.
fn normal_forces(
    state: &QuadrotorState,
    object: &ObjectModel,
    obj: &ObjectState,
    layout: &SensorLayout,
    params: &PlantParams,
) -> Vec<f64> {
    let (r_wall, _) = aperture_radius(state.theta, &params.servo, &params.aperture);
    let r_face = r_wall - params.aperture.standoff;
    let n = layout.len() as f64;
    (0..layout.len())
        .map(|i| {
            let delta = object.radius() - r_face + obj.offset.dot(&layout.radial(i));
            if delta <= 0.0 {
                return 0.0;
            }
            match &object.kind {
                ObjectKind::Balloon { curve, .. } => curve.force(delta) / n,
                ObjectKind::BeadContainer { .. } | ObjectKind::Bottle { .. } => params.pad_stiffness * delta,
                ObjectKind::RigidBlock { stiffness, .. } => {
                    params.pad_stiffness * stiffness / (params.pad_stiffness + stiffness) * delta
                }
            }
        })
        .collect()
}

/// Forces the object exerts on each pad.
///
/// Normal forces follow the object's stiffness and each pad's penetration.
/// A load `load` (N, vertical) carried by friction is shared in proportion
/// to the normal forces along world-down projected onto each face, capped at
/// `μ·N` per pad.
pub fn contact_forces(
    state: &QuadrotorState,
    object: &ObjectModel,
    obj: &ObjectState,
    layout: &SensorLayout,
    params: &PlantParams,
    load: f64,
) -> ContactReport {
    if !obj.present() {
        return ContactReport::empty(layout.len());
    }
    let normals = normal_forces(state, object, obj, layout, params);
    let total_normal: f64 = normals.iter().sum();
    let mu = object.friction_mu();
    let down_body = state.r.inverse().rotate(&Vec3::new(0.0, 0.0, -1.0));
    let mut supported = 0.0;
    let mut forces = Vec::with_capacity(layout.len());
    for (i, &n_i) in normals.iter().enumerate() {
        let radial = layout.radial(i);
        let mut f_body = radial * n_i;
        if n_i > 0.0 && load > 0.0 {
            let share = (load * n_i / total_normal).min(mu * n_i);
            let tangent = down_body - radial * down_body.dot(&radial);
            if tangent.norm() > 1e-12 {
                f_body += tangent.normalize() * share;
                supported += share;
            }
        }
        forces.push(layout.mounts[i].inverse().rotate(&f_body));
    }
    ContactReport {
        in_contact: normals.iter().map(|n| *n > 0.0).collect(),
        forces,
        total_normal,
        supported_load: supported,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlantEvent {
    Burst,
    Gripped,
    SlipStarted,
    ObjectLost,
    Ground,
}

/// Result of advancing the object by one step.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectUpdate {
    pub contact: ContactReport,
    /// Mass rigidly added to the vehicle, kg.
    pub attached_mass: f64,
    /// Contact force on the vehicle not accounted for by attached mass, world.
    pub reaction: Vec3,
    pub events: Vec<PlantEvent>,
}

/// Advances support state and returns contact forces for time `t`.
pub fn update_object(
    state: &QuadrotorState,
    object: &ObjectModel,
    obj: &mut ObjectState,
    layout: &SensorLayout,
    params: &PlantParams,
    t: f64,
) -> ObjectUpdate {
    let mut events = Vec::new();
    if !obj.present() {
        return ObjectUpdate {
            contact: ContactReport::empty(layout.len()),
            attached_mass: 0.0,
            reaction: Vec3::zeros(),
            events,
        };
    }
    let normals = normal_forces(state, object, obj, layout, params);
    let total_normal: f64 = normals.iter().sum();
    if let ObjectKind::Balloon { curve, burst_force, .. } = &object.kind {
        if balloon_state(curve, *burst_force, total_normal, obj.burst).burst {
            obj.burst = true;
            events.push(PlantEvent::Burst);
            log::info!("balloon burst at t = {t:.3} s under {total_normal:.3} N");
            return ObjectUpdate {
                contact: ContactReport::empty(layout.len()),
                attached_mass: 0.0,
                reaction: Vec3::zeros(),
                events,
            };
        }
    }
    let weight = object.mass_at(t) * GRAVITY;
    if t >= object.release_time && weight > 0.0 {
        let capacity = object.friction_mu() * total_normal;
        if capacity >= weight {
            if obj.support != Support::Gripped {
                events.push(PlantEvent::Gripped);
            }
            obj.support = Support::Gripped;
            obj.slip_since = None;
        } else {
            let since = *obj.slip_since.get_or_insert(t);
            if obj.support != Support::Slipping {
                events.push(PlantEvent::SlipStarted);
            }
            obj.support = Support::Slipping;
            if t - since > SLIP_TIMEOUT_S {
                obj.support = Support::Dropped;
                events.push(PlantEvent::ObjectLost);
                log::info!("object lost at t = {t:.3} s");
                return ObjectUpdate {
                    contact: ContactReport::empty(layout.len()),
                    attached_mass: 0.0,
                    reaction: Vec3::zeros(),
                    events,
                };
            }
        }
    }
    let load = match obj.support {
        Support::Gripped | Support::Slipping => weight,
        Support::External | Support::Dropped => 0.0,
    };
    let contact = contact_forces(state, object, obj, layout, params, load);
    let (attached_mass, reaction) = if obj.support == Support::Gripped {
        (object.mass_at(t), Vec3::zeros())
    } else {
        (0.0, contact.net_world(layout, &state.r))
    };
    ObjectUpdate { contact, attached_mass, reaction, events }
}

/// Thrust and torque after the first-order motor lag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Actuators {
    pub thrust: f64,
    pub torque: Vec3,
}

impl Actuators {
    pub fn hover(mass: f64) -> Self {
        Self { thrust: mass * GRAVITY, torque: Vec3::zeros() }
    }

    pub fn step(&mut self, thrust_cmd: f64, torque_cmd: &Vec3, params: &PlantParams, dt: f64) {
        let alpha = -(-dt / params.motor_tau).exp_m1();
        let thrust_cmd = thrust_cmd.clamp(0.0, params.max_thrust);
        self.thrust += alpha * (thrust_cmd - self.thrust);
        self.torque += (torque_cmd - self.torque) * alpha;
    }
}

/// Semi-implicit Euler step of the rigid body.
///
/// `extra_mass` is rigidly attached payload; `reaction` is any other
/// external force in the world frame. The ground plane `z = 0` stops the
/// vehicle; the returned flag reports contact with it.
pub fn step_dynamics(
    state: &QuadrotorState,
    act: &Actuators,
    reaction: &Vec3,
    extra_mass: f64,
    params: &PlantParams,
    t: f64,
    dt: f64,
) -> Result<(QuadrotorState, bool), PlantError> {
    if !(dt > 0.0 && dt <= 0.01) {
        return Err(invalid(format!("dt {dt} outside (0, 0.01]")));
    }
    let m = state.mass_base + extra_mass;
    let force = state.r.rotate(&Vec3::new(0.0, 0.0, act.thrust)) + reaction + Vec3::new(0.0, 0.0, -m * GRAVITY);
    let mut next = *state;
    next.v += force / m * dt;
    next.p += next.v * dt;

    let j = params.inertia;
    let jw = j.component_mul(&state.omega);
    let omega_dot = (act.torque - state.omega.cross(&jw)).component_div(&j);
    next.omega += omega_dot * dt;
    next.r = state.r.compose(&Rotation::exp(&(next.omega * dt))).renormalized();

    let mut grounded = false;
    if next.p.z < 0.0 {
        next.p.z = 0.0;
        next.v = Vec3::zeros();
        grounded = true;
    }
    let bad = |what: &str| Err(PlantError::NumericalDivergence { t, what: what.into() });
    if !next.p.iter().chain(next.v.iter()).chain(next.omega.iter()).all(|v| v.is_finite()) {
        return bad("non-finite state");
    }
    if next.p.norm() > POSITION_BOUND_M {
        return bad("position beyond 100 m");
    }
    if next.omega.norm() > RATE_BOUND_RAD_S {
        return bad("body rate beyond 100 rad/s");
    }
    Ok((next, grounded))
}
