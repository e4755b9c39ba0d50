//! Force-aware control stack: position admittance, position PD, thrust
//! mapping with payload feedforward, cascaded attitude/rate control and the
//! grasp admittance loop.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Matrix5};
use thiserror::Error;

use crate::geometry::{attitude_error, Rotation, Vec3};
use crate::plant::{QuadrotorState, ServoParams, GRAVITY};
use crate::tactile::SensorCalibration;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("invalid gain: {0}")]
    InvalidGain(String),
    #[error("estimate from node {node} is {age:.3} s old")]
    StaleData { node: u8, age: f64 },
}

fn all_positive(v: &Vec3) -> bool {
    v.iter().all(|x| *x > 0.0 && x.is_finite())
}

/// Virtual inertia, damping and stiffness of the position admittance
/// (diagonals).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionAdmittanceParams {
    pub m: Vec3,
    pub d: Vec3,
    pub k: Vec3,
}

impl PositionAdmittanceParams {
    /// `D = 2√(MK)` per axis.
    pub fn critically_damped(m: Vec3, k: Vec3) -> Self {
        let d = m.component_mul(&k).map(|x| 2.0 * x.sqrt());
        Self { m, d, k }
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        if all_positive(&self.m) && all_positive(&self.d) && all_positive(&self.k) {
            Ok(())
        } else {
            Err(ControlError::InvalidGain("admittance M, D, K entries must be positive".into()))
        }
    }
}

impl Default for PositionAdmittanceParams {
    fn default() -> Self {
        Self::critically_damped(Vec3::new(1.0, 1.0, 2.0), Vec3::new(40.0, 40.0, 100.0))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackingGains {
    pub kp: Vec3,
    pub kv: Vec3,
    pub k_r: Vec3,
    pub kp_omega: Vec3,
    pub ki_omega: Vec3,
    pub kd_omega: Vec3,
    /// Bound on the norm of the rate-error integral.
    pub integral_clamp: f64,
    /// Cutoff of the first-order filter on the rate-error derivative, Hz.
    pub derivative_cutoff_hz: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        Self {
            kp: Vec3::new(3.0, 3.0, 3.0),
            kv: Vec3::new(3.0, 3.0, 5.0),
            k_r: Vec3::new(6.0, 6.0, 3.0),
            kp_omega: Vec3::new(0.06, 0.06, 0.06),
            ki_omega: Vec3::new(0.01, 0.01, 0.01),
            kd_omega: Vec3::new(0.001, 0.001, 0.001),
            integral_clamp: 0.5,
            derivative_cutoff_hz: 20.0,
        }
    }
}

impl TrackingGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        let ok = [&self.kp, &self.kv, &self.k_r, &self.kp_omega, &self.ki_omega, &self.kd_omega]
            .iter()
            .all(|g| all_positive(g))
            && self.integral_clamp > 0.0
            && self.derivative_cutoff_hz > 0.0;
        if ok {
            Ok(())
        } else {
            Err(ControlError::InvalidGain("tracking gains, integral clamp and cutoff must be positive".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraspAdmittanceParams {
    pub m: f64,
    pub b: f64,
    pub k: f64,
    /// Servo angle before contact, rad.
    pub theta_r: f64,
}

impl GraspAdmittanceParams {
    pub fn validate(&self) -> Result<(), ControlError> {
        if [self.m, self.b, self.k].iter().all(|v| *v > 0.0 && v.is_finite()) && self.theta_r.is_finite() {
            Ok(())
        } else {
            Err(ControlError::InvalidGain("grasp M, B, K must be positive".into()))
        }
    }
}

impl Default for GraspAdmittanceParams {
    fn default() -> Self {
        Self { m: 1.5, b: 60.0, k: 0.2, theta_r: 0.0 }
    }
}

/// All controller parameters in one validated bundle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ControllerGains {
    pub admittance: PositionAdmittanceParams,
    pub tracking: TrackingGains,
    pub grasp: GraspAdmittanceParams,
    /// Cutoff of the payload feedforward filter, Hz.
    pub payload_cutoff_hz: f64,
}

impl ControllerGains {
    pub fn new(
        admittance: PositionAdmittanceParams,
        tracking: TrackingGains,
        grasp: GraspAdmittanceParams,
        payload_cutoff_hz: f64,
    ) -> Result<Self, ControlError> {
        let g = Self { admittance, tracking, grasp, payload_cutoff_hz };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        self.admittance.validate()?;
        self.tracking.validate()?;
        self.grasp.validate()?;
        if !(self.payload_cutoff_hz > 0.0) {
            return Err(ControlError::InvalidGain("payload cutoff must be positive".into()));
        }
        Ok(())
    }
}

/// `R_wb · Σ R_bsᵢ · fᵢ`.
pub fn aggregate_external_force(forces: &[Vec3], calibrations: &[SensorCalibration], r: &Rotation) -> Vec3 {
    let body: Vec3 = forces.iter().zip(calibrations).map(|(f, c)| c.mount_rotation.rotate(f)).sum();
    r.rotate(&body)
}

/// [`aggregate_external_force`], refusing estimates older than three
/// sensor periods.
pub fn aggregate_external_force_checked(
    forces: &[Vec3],
    ages: &[f64],
    calibrations: &[SensorCalibration],
    r: &Rotation,
    sensor_period: f64,
) -> Result<Vec3, ControlError> {
    for (age, c) in ages.iter().zip(calibrations) {
        if *age > 3.0 * sensor_period {
            return Err(ControlError::StaleData { node: c.node_id, age: *age });
        }
    }
    Ok(aggregate_external_force(forces, calibrations, r))
}

/// `Σ |fᵢ·n̂ᵢ|`.
pub fn grasp_force(forces: &[Vec3], normals: &[Vec3]) -> f64 {
    forces.iter().zip(normals).map(|(f, n)| f.dot(n).abs()).sum()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdmittanceState {
    pub p_d: Vec3,
    pub v_d: Vec3,
    pub a_d: Vec3,
}

impl AdmittanceState {
    pub fn at(p: Vec3) -> Self {
        Self { p_d: p, v_d: Vec3::zeros(), a_d: Vec3::zeros() }
    }
}

/// Reference trajectory sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Reference {
    pub p: Vec3,
    pub v: Vec3,
    pub a: Vec3,
}

impl Reference {
    pub fn hold(p: Vec3) -> Self {
        Self { p, v: Vec3::zeros(), a: Vec3::zeros() }
    }
}

/// `M(p̈_d − p̈_r) + D(ṗ_d − ṗ_r) + K(p_d − p_r) = f_ext`, semi-implicit.
pub fn admittance_step(
    params: &PositionAdmittanceParams,
    reference: &Reference,
    f_ext: &Vec3,
    state: &AdmittanceState,
    dt: f64,
) -> AdmittanceState {
    let spring = params.k.component_mul(&(state.p_d - reference.p));
    let damper = params.d.component_mul(&(state.v_d - reference.v));
    let a_d = reference.a + (f_ext - damper - spring).component_div(&params.m);
    let v_d = state.v_d + a_d * dt;
    AdmittanceState { p_d: state.p_d + v_d * dt, v_d, a_d }
}

/// `p̈_d + K_v(ṗ_d − ṗ) + K_p(p_d − p)`.
pub fn position_pd(desired: &AdmittanceState, p: &Vec3, v: &Vec3, gains: &TrackingGains) -> Vec3 {
    desired.a_d + gains.kv.component_mul(&(desired.v_d - v)) + gains.kp.component_mul(&(desired.p_d - p))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThrustCommand {
    /// Desired thrust in the world frame, N.
    pub world: Vec3,
    /// `T_d` in the body frame.
    pub body: Vec3,
    /// Collective thrust, the body-z component of `T_d` after clamping.
    pub scalar: f64,
    pub saturated: bool,
}

/// `T_d = Rᵀ(m·a_cmd − payload_ff − m·g)` with `g = (0, 0, −9.81)`.
///
/// `payload_ff` is the measured supported load in the world frame (zero
/// when feedforward is off).
pub fn thrust_command(a_cmd: &Vec3, r: &Rotation, mass: f64, payload_ff: &Vec3, max_thrust: f64) -> ThrustCommand {
    let g = Vec3::new(0.0, 0.0, -GRAVITY);
    let world = a_cmd * mass - payload_ff - g * mass;
    let body = r.inverse().rotate(&world);
    let saturated = world.norm() > max_thrust || body.z < 0.0;
    ThrustCommand { world, body, scalar: body.z.clamp(0.0, max_thrust), saturated }
}

/// Attitude whose body z is along `thrust_world`, with heading `yaw`.
pub fn desired_attitude(thrust_world: &Vec3, yaw: f64) -> Rotation {
    let b3 = if thrust_world.norm() > 1e-9 { thrust_world.normalize() } else { Vec3::z() };
    let heading = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let b2 = b3.cross(&heading);
    let b2 = if b2.norm() > 1e-9 { b2.normalize() } else { Vec3::y() };
    let b1 = b2.cross(&b3);
    Rotation::from_matrix(Matrix3::from_columns(&[b1, b2, b3])).expect("orthonormal by construction")
}

/// First-order low-pass filter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowPass {
    pub cutoff_hz: f64,
    pub value: f64,
}

impl LowPass {
    pub fn new(cutoff_hz: f64, initial: f64) -> Self {
        Self { cutoff_hz, value: initial }
    }

    pub fn update(&mut self, x: f64, dt: f64) -> f64 {
        let alpha = -(-2.0 * PI * self.cutoff_hz * dt).exp_m1();
        self.value += alpha * (x - self.value);
        self.value
    }
}

/// Rate-error integral and filtered derivative of the attitude loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AttitudeController {
    pub integral: Vec3,
    pub prev_error: Option<Vec3>,
    pub derivative: Vec3,
}

impl AttitudeController {
    /// `ω_d = K_R·R_e`, `ω_e = ω_d − ω`, `τ = K_P·ω_e + K_I·∫ω_e + K_D·ω̇_e`.
    pub fn step(&mut self, r_ref: &Rotation, r: &Rotation, omega: &Vec3, gains: &TrackingGains, dt: f64) -> Vec3 {
        let omega_d = gains.k_r.component_mul(&attitude_error(r_ref, r));
        let err = omega_d - omega;
        self.integral += err * dt;
        let n = self.integral.norm();
        if n > gains.integral_clamp {
            self.integral *= gains.integral_clamp / n;
        }
        let raw = self.prev_error.map_or(Vec3::zeros(), |prev| (err - prev) / dt);
        let alpha = -(-2.0 * PI * gains.derivative_cutoff_hz * dt).exp_m1();
        self.derivative += (raw - self.derivative) * alpha;
        self.prev_error = Some(err);
        gains.kp_omega.component_mul(&err)
            + gains.ki_omega.component_mul(&self.integral)
            + gains.kd_omega.component_mul(&self.derivative)
    }
}

/// Continuous-time linearization of one attitude axis about hover.
///
/// States: angle, rate, rate-error integral, filtered rate-error derivative,
/// delivered torque.
pub fn attitude_linearization(gains: &TrackingGains, axis: usize, inertia: f64, motor_tau: f64) -> Matrix5<f64> {
    let (kr, kp, ki, kd) = (gains.k_r[axis], gains.kp_omega[axis], gains.ki_omega[axis], gains.kd_omega[axis]);
    let wc = 2.0 * PI * gains.derivative_cutoff_hz;
    // ω_e = −kr·φ − ω;  ω̇_e = −kr·ω − τ/J
    let e = [-kr, -1.0, 0.0, 0.0, 0.0];
    let e_dot = [0.0, -kr, 0.0, 0.0, -1.0 / inertia];
    let mut a = Matrix5::zeros();
    a[(0, 1)] = 1.0;
    a[(1, 4)] = 1.0 / inertia;
    for j in 0..5 {
        a[(2, j)] = e[j];
        a[(3, j)] = wc * e_dot[j];
        let cmd = kp * e[j] + if j == 2 { ki } else { 0.0 } + if j == 3 { kd } else { 0.0 };
        a[(4, j)] = cmd / motor_tau;
    }
    a[(3, 3)] -= wc;
    a[(4, 4)] -= 1.0 / motor_tau;
    a
}

/// Grasp admittance state `(Δθ, Δθ̇)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GraspAdmittance {
    pub dtheta: f64,
    pub dtheta_dot: f64,
}

impl GraspAdmittance {
    /// Integrates `M·Δθ̈ + B·Δθ̇ + K·Δθ = f_d − f_g` and returns
    /// `(θ_r + Δθ, clamped)`. At a servo limit Δθ is held on the limit and
    /// outward velocity is discarded.
    pub fn step(&mut self, p: &GraspAdmittanceParams, f_d: f64, f_g: f64, servo: &ServoParams, dt: f64) -> (f64, bool) {
        let acc = (f_d - f_g - p.b * self.dtheta_dot - p.k * self.dtheta) / p.m;
        self.dtheta_dot += acc * dt;
        self.dtheta += self.dtheta_dot * dt;
        let lo = servo.theta_min - p.theta_r;
        let hi = servo.theta_max - p.theta_r;
        let clamped = self.dtheta < lo || self.dtheta > hi;
        if self.dtheta > hi {
            self.dtheta = hi;
            self.dtheta_dot = self.dtheta_dot.min(0.0);
        } else if self.dtheta < lo {
            self.dtheta = lo;
            self.dtheta_dot = self.dtheta_dot.max(0.0);
        }
        (p.theta_r + self.dtheta, clamped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ControlFlags {
    pub force_feedback: bool,
    pub payload_ff: bool,
}

impl Default for ControlFlags {
    fn default() -> Self {
        Self { force_feedback: true, payload_ff: true }
    }
}

/// Servo command used when force feedback is disabled: a monotone ramp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OpenLoopGrasp {
    pub theta: f64,
    pub rate: f64,
}

/// Outputs of the 1 kHz loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FastOutput {
    pub thrust: ThrustCommand,
    pub torque: Vec3,
}

/// The full controller, advanced by the simulation loop.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlStack {
    pub gains: ControllerGains,
    pub flags: ControlFlags,
    pub open_loop: OpenLoopGrasp,
    pub servo: ServoParams,
    /// Mass assumed by the thrust mapping, kg.
    pub mass: f64,
    pub max_thrust: f64,
    pub yaw_ref: f64,
    pub reference: Reference,
    pub admittance: AdmittanceState,
    pub grasp: GraspAdmittance,
    pub attitude: AttitudeController,
    pub payload: LowPass,
    pub f_ext: Vec3,
    pub theta_cmd: f64,
    pub grasp_clamped: bool,
}

impl ControlStack {
    pub fn new(
        gains: ControllerGains,
        flags: ControlFlags,
        open_loop: OpenLoopGrasp,
        servo: ServoParams,
        mass: f64,
        max_thrust: f64,
        start: Vec3,
    ) -> Self {
        Self {
            gains,
            flags,
            open_loop,
            servo,
            mass,
            max_thrust,
            yaw_ref: 0.0,
            reference: Reference::hold(start),
            admittance: AdmittanceState::at(start),
            grasp: GraspAdmittance::default(),
            attitude: AttitudeController::default(),
            payload: LowPass::new(gains.payload_cutoff_hz, 0.0),
            f_ext: Vec3::zeros(),
            theta_cmd: gains.grasp.theta_r,
            grasp_clamped: false,
        }
    }

    /// Whether measured load is fed forward into thrust. Requires the
    /// tactile feedback that measures it.
    pub fn payload_ff_active(&self) -> bool {
        self.flags.payload_ff && self.flags.force_feedback
    }

    /// Sensor-rate update of the admittance, feedforward and grasp loops.
    /// `f_d` is `None` until the grasp is engaged.
    pub fn slow_update(&mut self, f_ext_measured: &Vec3, f_g: f64, f_d: Option<f64>, reference: Reference, dt: f64) {
        self.reference = reference;
        self.f_ext = if self.flags.force_feedback { *f_ext_measured } else { Vec3::zeros() };
        self.admittance = admittance_step(&self.gains.admittance, &self.reference, &self.f_ext, &self.admittance, dt);
        self.payload.update(self.f_ext.z, dt);
        let Some(f_d) = f_d else {
            self.theta_cmd = self.gains.grasp.theta_r;
            return;
        };
        if self.flags.force_feedback {
            let (theta, clamped) = self.grasp.step(&self.gains.grasp, f_d, f_g, &self.servo, dt);
            self.theta_cmd = theta;
            self.grasp_clamped = clamped;
        } else {
            let step = self.open_loop.rate * dt;
            let target = self.open_loop.theta.clamp(self.servo.theta_min, self.servo.theta_max);
            self.theta_cmd = if self.theta_cmd < target {
                (self.theta_cmd + step).min(target)
            } else {
                (self.theta_cmd - step).max(target)
            };
        }
    }

    pub fn payload_feedforward(&self) -> Vec3 {
        if self.payload_ff_active() {
            Vec3::new(0.0, 0.0, self.payload.value)
        } else {
            Vec3::zeros()
        }
    }

    /// Position PD, thrust mapping and attitude control.
    pub fn fast_update(&mut self, state: &QuadrotorState, dt: f64) -> FastOutput {
        let a_cmd = position_pd(&self.admittance, &state.p, &state.v, &self.gains.tracking);
        let thrust = thrust_command(&a_cmd, &state.r, self.mass, &self.payload_feedforward(), self.max_thrust);
        let r_ref = desired_attitude(&thrust.world, self.yaw_ref);
        let torque = self.attitude.step(&r_ref, &state.r, &state.omega, &self.gains.tracking, dt);
        FastOutput { thrust, torque }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plant::{step_dynamics, Actuators, PlantParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cal(node: u8, mount: Rotation) -> SensorCalibration {
        SensorCalibration::nominal(node, mount, &Default::default()).unwrap()
    }

    #[test]
    fn aggregate_examples() {
        let cals: Vec<_> = (1..=2).map(|i| cal(i, Rotation::identity())).collect();
        assert_eq!(aggregate_external_force(&[Vec3::zeros(); 2], &cals, &Rotation::identity()), Vec3::zeros());
        let one = [cal(1, Rotation::identity())];
        assert_eq!(aggregate_external_force(&[Vec3::new(0.0, 0.0, -1.0)], &one, &Rotation::identity()), Vec3::new(0.0, 0.0, -1.0));

        // opposing pads, equal normal loads
        let layout = crate::plant::SensorLayout::hexagon();
        let pair = [cal(1, layout.mounts[0]), cal(4, layout.mounts[3])];
        let f = aggregate_external_force(&[Vec3::new(0.0, 0.0, 0.8); 2], &pair, &Rotation::from_euler(0.1, -0.2, 0.3));
        assert!(f.norm() < 1e-15, "{f:?}");
    }

    #[test]
    fn stale_estimates_rejected() {
        let cals = [cal(3, Rotation::identity())];
        let err = aggregate_external_force_checked(&[Vec3::zeros()], &[0.061], &cals, &Rotation::identity(), 0.02);
        assert!(matches!(err, Err(ControlError::StaleData { node: 3, .. })));
        assert!(aggregate_external_force_checked(&[Vec3::zeros()], &[0.059], &cals, &Rotation::identity(), 0.02).is_ok());
    }

    #[test]
    fn admittance_fixed_point_and_statics() {
        let p = PositionAdmittanceParams::default();
        let r = Reference::hold(Vec3::new(1.0, 2.0, 3.0));
        let s = AdmittanceState::at(r.p);
        assert_eq!(admittance_step(&p, &r, &Vec3::zeros(), &s, 0.02), s);

        let p = PositionAdmittanceParams::critically_damped(Vec3::repeat(1.0), Vec3::repeat(10.0));
        let r = Reference::hold(Vec3::zeros());
        let mut s = AdmittanceState::at(r.p);
        let f = Vec3::new(0.0, 0.0, -1.0);
        // time constant √(M/K)
        let dt = 1e-3;
        let steps = (10.0 * (0.1f64).sqrt() / dt).ceil() as usize;
        for _ in 0..steps {
            s = admittance_step(&p, &r, &f, &s, dt);
        }
        assert!(((s.p_d.z + 0.1) / 0.1).abs() < 1e-3, "{}", s.p_d.z);
        assert_eq!(s.p_d.xy(), nalgebra::Vector2::zeros());
    }

    #[test]
    fn critically_damped_step_does_not_overshoot() {
        let p = PositionAdmittanceParams { m: Vec3::repeat(1.0), d: Vec3::repeat(4.0), k: Vec3::repeat(4.0) };
        let r = Reference::hold(Vec3::zeros());
        let mut s = AdmittanceState::at(r.p);
        let f = Vec3::new(4.0, 0.0, 0.0);
        let mut prev = 0.0;
        for _ in 0..20_000 {
            s = admittance_step(&p, &r, &f, &s, 1e-3);
            assert!(s.p_d.x <= 1.0 + 1e-6);
            assert!(s.p_d.x >= prev - 1e-15);
            prev = s.p_d.x;
        }
    }

    #[test]
    fn position_pd_examples() {
        let g = TrackingGains { kp: Vec3::repeat(4.0), kv: Vec3::repeat(2.0), ..Default::default() };
        let d = AdmittanceState { p_d: Vec3::new(1.0, 1.0, 1.0), v_d: Vec3::new(0.5, 0.0, 0.0), a_d: Vec3::new(0.0, 0.2, 0.0) };
        assert_eq!(position_pd(&d, &d.p_d, &d.v_d, &g), d.a_d);
        let zero = AdmittanceState::at(Vec3::new(0.1, 0.0, 0.0));
        assert_relative_eq!(position_pd(&zero, &Vec3::zeros(), &Vec3::zeros(), &g), Vec3::new(0.4, 0.0, 0.0), epsilon = 1e-15);
        let combined = AdmittanceState { p_d: Vec3::new(0.1, 0.0, 0.0), v_d: Vec3::new(0.0, -0.3, 0.0), a_d: Vec3::zeros() };
        let pos_only = position_pd(&zero, &Vec3::zeros(), &Vec3::zeros(), &g);
        let vel_only = position_pd(
            &AdmittanceState { p_d: Vec3::zeros(), v_d: combined.v_d, a_d: Vec3::zeros() },
            &Vec3::zeros(),
            &Vec3::zeros(),
            &g,
        );
        assert_eq!(position_pd(&combined, &Vec3::zeros(), &Vec3::zeros(), &g), pos_only + vel_only);
    }

    #[test]
    fn thrust_examples() {
        let t = thrust_command(&Vec3::zeros(), &Rotation::identity(), 0.556, &Vec3::zeros(), 12.0);
        assert_relative_eq!(t.body, Vec3::new(0.0, 0.0, 5.45436), epsilon = 1e-12);
        assert!(!t.saturated);
        let t = thrust_command(&Vec3::new(0.0, 0.0, 1.0), &Rotation::identity(), 1.0, &Vec3::zeros(), 12.0);
        assert_relative_eq!(t.scalar, 10.81, epsilon = 1e-12);
        let base = thrust_command(&Vec3::zeros(), &Rotation::identity(), 0.556, &Vec3::zeros(), 12.0);
        let ff = thrust_command(&Vec3::zeros(), &Rotation::identity(), 0.556, &Vec3::new(0.0, 0.0, -0.23 * 9.81), 12.0);
        assert_relative_eq!(ff.scalar - base.scalar, 2.2563, epsilon = 1e-12);
        let sat = thrust_command(&Vec3::new(0.0, 0.0, 20.0), &Rotation::identity(), 0.556, &Vec3::zeros(), 12.0);
        assert!(sat.saturated);
        assert_eq!(sat.scalar, 12.0);
    }

    #[test]
    fn desired_attitude_aligns_body_z() {
        let f = Vec3::new(1.0, -0.5, 6.0);
        let r = desired_attitude(&f, 0.0);
        assert_relative_eq!(r.axis(2), f.normalize(), epsilon = 1e-12);
        assert!(r.axis(1).x.abs() < 1e-12);
        assert_eq!(desired_attitude(&Vec3::new(0.0, 0.0, 5.0), 0.0), Rotation::identity());
    }

    #[test]
    fn attitude_examples() {
        let g = TrackingGains::default();
        let mut c = AttitudeController::default();
        assert_eq!(c.step(&Rotation::identity(), &Rotation::identity(), &Vec3::zeros(), &g, 1e-3), Vec3::zeros());

        let only_p = TrackingGains { ki_omega: Vec3::repeat(1e-300), kd_omega: Vec3::repeat(1e-300), ..g };
        let eps = 0.01;
        let mut c = AttitudeController::default();
        let tau = c.step(&Rotation::identity(), &Rotation::rz(eps), &Vec3::zeros(), &only_p, 1e-3);
        assert_relative_eq!(tau.z, -only_p.kp_omega.z * only_p.k_r.z * eps, max_relative = 1e-4);

        // constant rate error: integral ramps then clamps
        let mut c = AttitudeController::default();
        let omega = Vec3::new(-1.0, 0.0, 0.0);
        let mut last = 0.0;
        for k in 1..=600 {
            c.step(&Rotation::identity(), &Rotation::identity(), &omega, &g, 1e-3);
            let expect = (k as f64 * 1e-3).min(g.integral_clamp);
            assert_relative_eq!(c.integral.x, expect, epsilon = 1e-12);
            assert!(c.integral.x >= last);
            last = c.integral.x;
        }
        assert!(c.integral.norm() <= g.integral_clamp + 1e-15);
    }

    #[test]
    fn attitude_linearization_is_stable() {
        let g = TrackingGains::default();
        let p = PlantParams::default();
        for axis in 0..3 {
            let a = attitude_linearization(&g, axis, p.inertia[axis], p.motor_tau);
            let eig = a.complex_eigenvalues();
            assert!(eig.iter().all(|l| l.re < 0.0), "axis {axis}: {eig:?}");
        }
    }

    #[test]
    fn attitude_perturbation_decays() {
        let p = PlantParams::default();
        let g = TrackingGains::default();
        let mut s = QuadrotorState::at_rest(Vec3::new(0.0, 0.0, 10.0), p.mass_base, 0.0);
        s.r = Rotation::from_euler(0.1, -0.08, 0.05);
        s.omega = Vec3::new(0.3, 0.2, -0.1);
        let mut act = Actuators::hover(p.mass_base);
        let mut c = AttitudeController::default();
        for k in 0..3000 {
            let tau = c.step(&Rotation::identity(), &s.r, &s.omega, &g, 1e-3);
            act.step(p.mass_base * GRAVITY, &tau, &p, 1e-3);
            s = step_dynamics(&s, &act, &Vec3::zeros(), 0.0, &p, k as f64 * 1e-3, 1e-3).unwrap().0;
        }
        assert!(s.r.angle_to(&Rotation::identity()) < 1e-3);
        assert!(s.omega.norm() < 1e-3);
    }

    #[test]
    fn grasp_force_examples() {
        let n = [Vec3::z(), Vec3::z()];
        assert_eq!(grasp_force(&[Vec3::zeros(); 2], &n), 0.0);
        assert_eq!(grasp_force(&[Vec3::new(0.1, 0.0, 0.5), Vec3::new(0.0, 0.0, -0.5)], &n), 1.0);
        assert_eq!(grasp_force(&[Vec3::new(0.3, 0.2, 0.0), Vec3::new(-1.0, 0.0, 0.0)], &n), 0.0);
    }

    #[test]
    fn grasp_admittance_examples() {
        let servo = ServoParams { theta_min: -100.0, theta_max: 100.0, ..Default::default() };
        let p = GraspAdmittanceParams { m: 1.0, b: 4.0, k: 4.0, theta_r: 0.3 };
        let mut g = GraspAdmittance { dtheta: 0.2, dtheta_dot: 0.0 };
        let mut th = 0.0;
        for _ in 0..20_000 {
            th = g.step(&p, 0.5, 0.5, &servo, 1e-3).0;
        }
        assert_relative_eq!(th, 0.3, epsilon = 1e-9);

        let mut g = GraspAdmittance::default();
        for _ in 0..20_000 {
            g.step(&p, 0.5, 0.3, &servo, 1e-3);
        }
        assert_relative_eq!(g.dtheta, 0.2 / 4.0, epsilon = 1e-9);

        let mut g = GraspAdmittance::default();
        let mut prev = 0.0;
        for _ in 0..20_000 {
            g.step(&p, 1.0, 0.0, &servo, 1e-3);
            assert!(g.dtheta >= prev && g.dtheta <= 0.25 + 1e-6);
            prev = g.dtheta;
        }
    }

    #[test]
    fn grasp_clamps_with_anti_windup() {
        let servo = ServoParams::default();
        let p = GraspAdmittanceParams { m: 0.03, b: 1.0, k: 0.02, theta_r: 1.9 };
        let mut g = GraspAdmittance::default();
        let mut clamped = false;
        for _ in 0..500 {
            let (th, c) = g.step(&p, 5.0, 0.0, &servo, 0.02);
            assert!(th <= servo.theta_max);
            clamped |= c;
        }
        assert!(clamped);
        // the command leaves the limit as soon as the force error reverses
        let (th, _) = g.step(&p, 0.0, 50.0, &servo, 0.02);
        assert!(th < servo.theta_max);
    }

    #[test]
    fn open_loop_grasp_ramps_monotonically() {
        let flags = ControlFlags { force_feedback: false, payload_ff: true };
        let gains = ControllerGains { payload_cutoff_hz: 2.0, ..Default::default() };
        let mut c = ControlStack::new(
            gains,
            flags,
            OpenLoopGrasp { theta: 1.0, rate: 0.5 },
            ServoParams::default(),
            0.556,
            12.0,
            Vec3::zeros(),
        );
        assert!(!c.payload_ff_active());
        let mut prev = c.theta_cmd;
        for _ in 0..200 {
            c.slow_update(&Vec3::new(0.0, 0.0, -3.0), 10.0, Some(0.5), Reference::hold(Vec3::zeros()), 0.02);
            assert!(c.theta_cmd >= prev);
            prev = c.theta_cmd;
        }
        assert_eq!(c.theta_cmd, 1.0);
        assert_eq!(c.f_ext, Vec3::zeros());
        assert_eq!(c.payload_feedforward(), Vec3::zeros());
    }

    #[test]
    fn gains_validation() {
        assert!(ControllerGains::new(Default::default(), Default::default(), Default::default(), 2.0).is_ok());
        let bad = PositionAdmittanceParams { k: Vec3::new(1.0, 0.0, 1.0), ..Default::default() };
        assert!(ControllerGains::new(bad, Default::default(), Default::default(), 2.0).is_err());
        assert!(ControllerGains::new(Default::default(), Default::default(), Default::default(), 0.0).is_err());
    }

    proptest! {
        #[test]
        fn admittance_converges_to_statics(
            m in proptest::array::uniform3(0.5..3.0f64),
            k in proptest::array::uniform3(5.0..80.0f64),
            f in proptest::array::uniform3(-3.0..3.0f64),
        ) {
            let p = PositionAdmittanceParams::critically_damped(Vec3::from(m), Vec3::from(k));
            let r = Reference::hold(Vec3::new(0.5, -0.5, 1.0));
            let f = Vec3::from(f);
            let mut s = AdmittanceState::at(r.p);
            let tc = (0..3).map(|i| (m[i] / k[i]).sqrt()).fold(0.0, f64::max);
            let dt = 1e-3;
            for _ in 0..(12.0 * tc / dt).ceil() as usize {
                s = admittance_step(&p, &r, &f, &s, dt);
            }
            let expect = f.component_div(&Vec3::from(k));
            for i in 0..3 {
                prop_assert!((s.p_d[i] - r.p[i] - expect[i]).abs() <= 1e-3 * expect[i].abs().max(1e-3));
            }
        }

        #[test]
        fn aggregation_is_rotation_equivariant(
            q in proptest::array::uniform3(-3.0..3.0f64),
            r0 in proptest::array::uniform3(-1.0..1.0f64),
            forces in proptest::collection::vec(proptest::array::uniform3(-2.0..2.0f64), 6),
        ) {
            let layout = crate::plant::SensorLayout::hexagon();
            let cals: Vec<_> = (0..6).map(|i| cal(i as u8 + 1, layout.mounts[i])).collect();
            let forces: Vec<Vec3> = forces.into_iter().map(Vec3::from).collect();
            let r = Rotation::from_euler(r0[0], r0[1], r0[2]);
            let world = aggregate_external_force(&forces, &cals, &r);
            // rotate the body by Q and express the same world loads in the new sensor frames
            let qr = Rotation::from_euler(q[0], q[1], q[2]);
            let r2 = r.compose(&qr);
            let moved: Vec<Vec3> = forces
                .iter()
                .zip(&cals)
                .map(|(f, c)| c.mount_rotation.inverse().rotate(&qr.inverse().rotate(&c.mount_rotation.rotate(f))))
                .collect();
            let world2 = aggregate_external_force(&moved, &cals, &r2);
            prop_assert!((world - world2).norm() < 1e-9);
        }

        #[test]
        fn grasp_regulation_error_matches_series_statics(
            k in 0.05..2.0f64,
            k_obj in 0.5..20.0f64,
            f_d in 0.1..5.0f64,
        ) {
            let servo = ServoParams { theta_min: -100.0, theta_max: 100.0, ..Default::default() };
            let p = GraspAdmittanceParams { m: 0.05, b: 2.0 * (0.05 * (k + k_obj)).sqrt() * 1.5, k, theta_r: 0.0 };
            let mut g = GraspAdmittance::default();
            let mut f_g = 0.0;
            for _ in 0..200_000 {
                g.step(&p, f_d, f_g, &servo, 1e-3);
                f_g = k_obj * g.dtheta;
            }
            let expect = k / (k + k_obj) * f_d;
            prop_assert!(((f_d - f_g) - expect).abs() < 1e-6 * f_d.max(1.0));
        }
    }
}
