//! Magnetic soft tactile sensor: decoupling of Hall-sensor flux into a
//! three-axis force, its numerical inverse (the synthetic sensor), and the
//! gain/offset calibration routines.
//!
//! Flux values are in µT. Before entering the decoupling expressions they
//! are divided by [`CompensationCoefficients::flux_scale`]; calibration
//! gains absorb whatever units the normalized flux carries.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Rotation, Vec3};

/// Saturation bound of the modeled Hall device.
pub const FLUX_SATURATION_UT: f64 = 5000.0;
/// Magnitude below which a denominator in the decoupling model is degenerate.
pub const DEGENERACY_GUARD: f64 = 1e-12;
/// Newton iteration cap for the forward model.
pub const NEWTON_MAX_ITERS: usize = 100;
/// Residual tolerance on `S(B)` for the forward model.
pub const NEWTON_TOLERANCE: f64 = 1e-12;
/// Unloaded flux of the default film, µT.
pub const NOMINAL_REST_FLUX_UT: [f64; 3] = [0.0, 0.0, 600.0];
/// Default per-axis gain, N per unit of `S`.
pub const NOMINAL_GAIN: [f64; 3] = [8.0, 8.0, 2.5];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TactileError {
    #[error("flux {b:?} is outside the decoupling model's valid branch ({reason})")]
    DegenerateFlux { b: [f64; 3], reason: &'static str },
    #[error("forward model did not converge for force {f:?} (residual {residual:.3e})")]
    NoSolution { f: [f64; 3], residual: f64 },
    #[error("flux magnitude {magnitude:.1} µT exceeds saturation or is not finite")]
    Saturated { magnitude: f64 },
    #[error("calibration axis {axis} has fewer than two distinct decoupled values")]
    RankDeficient { axis: usize },
    #[error("need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("calibration file: {0}")]
    Format(String),
}

/// One three-axis flux reading.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxSample {
    pub b: Vec3,
    pub node_id: u8,
    pub timestamp: f64,
}

impl FluxSample {
    pub fn new(b: Vec3, node_id: u8, timestamp: f64) -> Result<Self, TactileError> {
        let magnitude = b.norm();
        if !magnitude.is_finite() || magnitude >= FLUX_SATURATION_UT {
            return Err(TactileError::Saturated { magnitude });
        }
        Ok(Self { b, node_id, timestamp })
    }
}

/// Affine corrections applied to `B_z` before decoupling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompensationCoefficients {
    pub k1: f64,
    pub c1: f64,
    pub k2: f64,
    pub c2: f64,
    /// Divisor applied to µT flux before it enters the model.
    #[serde(default = "unit_scale")]
    pub flux_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

impl Default for CompensationCoefficients {
    /// Coefficients fitted over the ±3 mm / −10±2 mm working volume.
    fn default() -> Self {
        Self { k1: 2.27851, c1: 0.0010535, k2: 0.878725, c2: -0.0000785667, flux_scale: 1.0 }
    }
}

impl CompensationCoefficients {
    pub fn new(k1: f64, c1: f64, k2: f64, c2: f64) -> Result<Self, TactileError> {
        let c = Self { k1, c1, k2, c2, flux_scale: 1.0 };
        c.validate()?;
        Ok(c)
    }

    pub fn with_flux_scale(mut self, flux_scale: f64) -> Result<Self, TactileError> {
        self.flux_scale = flux_scale;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), TactileError> {
        let all = [self.k1, self.c1, self.k2, self.c2, self.flux_scale];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(TactileError::InvalidParameter("non-finite compensation coefficient".into()));
        }
        if self.k1 <= 0.0 || self.k2 <= 0.0 {
            return Err(TactileError::InvalidParameter("k1 and k2 must be positive".into()));
        }
        if self.flux_scale <= 0.0 {
            return Err(TactileError::InvalidParameter("flux_scale must be positive".into()));
        }
        Ok(())
    }

    /// `(k1·B_z + c1, k2·B_z + c2)` for an already normalized `B_z`.
    pub fn apply(&self, bz: f64) -> (f64, f64) {
        (self.k1 * bz + self.c1, self.k2 * bz + self.c2)
    }
}

/// Displacement region in which the decoupling model is trusted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkingEnvelope {
    pub xy_limit_mm: f64,
    pub z_center_mm: f64,
    pub z_halfwidth_mm: f64,
    /// Pad stiffness used to map a force to its implied displacement.
    pub shear_stiffness_n_per_mm: f64,
    pub normal_stiffness_n_per_mm: f64,
}

impl Default for WorkingEnvelope {
    fn default() -> Self {
        Self {
            xy_limit_mm: 3.0,
            z_center_mm: -10.0,
            z_halfwidth_mm: 2.0,
            shear_stiffness_n_per_mm: 0.5,
            normal_stiffness_n_per_mm: 1.0,
        }
    }
}

impl WorkingEnvelope {
    /// Film displacement implied by a sensor-frame force, in mm.
    /// Compression moves the film from `z_center` toward the Hall sensor.
    pub fn implied_displacement(&self, f: &Vec3) -> Vec3 {
        Vec3::new(
            f.x / self.shear_stiffness_n_per_mm,
            f.y / self.shear_stiffness_n_per_mm,
            self.z_center_mm + f.z / self.normal_stiffness_n_per_mm,
        )
    }

    pub fn contains_force(&self, f: &Vec3) -> bool {
        let d = self.implied_displacement(f);
        d.iter().all(|v| v.is_finite())
            && d.x.abs() <= self.xy_limit_mm
            && d.y.abs() <= self.xy_limit_mm
            && (d.z - self.z_center_mm).abs() <= self.z_halfwidth_mm
    }
}

/// Per-sensor parameters turning flux into force.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorCalibration {
    pub node_id: u8,
    /// Gain, N per unit of `S`.
    pub a: Vec3,
    /// Offset, N.
    pub b_off: Vec3,
    /// Sensor frame → body frame.
    pub mount_rotation: Rotation,
    /// Unit contact normal in the sensor frame.
    pub contact_normal: Vec3,
    pub envelope: WorkingEnvelope,
}

impl SensorCalibration {
    pub fn new(
        node_id: u8,
        a: Vec3,
        b_off: Vec3,
        mount_rotation: Rotation,
        contact_normal: Vec3,
        envelope: WorkingEnvelope,
    ) -> Result<Self, TactileError> {
        let cal = Self { node_id, a, b_off, mount_rotation, contact_normal, envelope };
        cal.validate()?;
        Ok(cal)
    }

    pub fn validate(&self) -> Result<(), TactileError> {
        if (self.contact_normal.norm() - 1.0).abs() > 1e-9 {
            return Err(TactileError::InvalidParameter(format!(
                "node {}: contact normal must be unit length",
                self.node_id
            )));
        }
        if self.a.iter().any(|g| *g == 0.0 || !g.is_finite()) {
            return Err(TactileError::InvalidParameter(format!("node {}: gains must be nonzero", self.node_id)));
        }
        if self.b_off.iter().any(|v| !v.is_finite()) {
            return Err(TactileError::InvalidParameter(format!("node {}: offsets must be finite", self.node_id)));
        }
        Ok(())
    }

    /// Default film: rest flux [`NOMINAL_REST_FLUX_UT`], gains [`NOMINAL_GAIN`],
    /// offsets zeroing the rest reading.
    pub fn nominal(node_id: u8, mount_rotation: Rotation, c: &CompensationCoefficients) -> Result<Self, TactileError> {
        let a = Vec3::from(NOMINAL_GAIN);
        let rest = FluxSample::new(Vec3::from(NOMINAL_REST_FLUX_UT), node_id, 0.0)?;
        let s_rest = decouple_s(&rest, c)?;
        Self::new(node_id, a, -a.component_mul(&s_rest), mount_rotation, Vec3::z(), WorkingEnvelope::default())
    }

    /// `a ⊙ s + b_off`.
    pub fn apply(&self, s: &Vec3) -> Vec3 {
        self.a.component_mul(s) + self.b_off
    }

    /// Inverse of [`SensorCalibration::apply`].
    pub fn target_s(&self, f: &Vec3) -> Vec3 {
        (f - self.b_off).component_div(&self.a)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForceEstimate {
    /// Sensor-frame force, N.
    pub f: Vec3,
    /// Whether the implied displacement lies inside the working envelope.
    pub valid: bool,
}

pub fn compensate_bz(b: &FluxSample, c: &CompensationCoefficients) -> (f64, f64) {
    c.apply(b.b.z / c.flux_scale)
}

/// Decoupled signal `S(B)` for a flux sample.
pub fn decouple_s(b: &FluxSample, c: &CompensationCoefficients) -> Result<Vec3, TactileError> {
    decouple_normalized(&(b.b / c.flux_scale), c)
}

/// `S(B)` with `B` already divided by the flux scale.
fn decouple_normalized(b: &Vec3, c: &CompensationCoefficients) -> Result<Vec3, TactileError> {
    let degenerate = |reason| TactileError::DegenerateFlux { b: [b.x, b.y, b.z], reason };
    let (bx, by) = (b.x, b.y);
    let (bz1, bz2) = c.apply(b.z);
    if bz1.abs() < DEGENERACY_GUARD || bz2.abs() < DEGENERACY_GUARD || !bz1.is_finite() || !bz2.is_finite() {
        return Err(degenerate("compensated B_z vanishes"));
    }
    let d = by * by - bx * bx;

    let den_x = bz1 - (bz1 * bz1 - d) / (2.0 * bz1);
    let den_y = bz1 - (bz1 * bz1 + d) / (2.0 * bz1);
    if den_x.abs() < DEGENERACY_GUARD || den_y.abs() < DEGENERACY_GUARD {
        return Err(degenerate("lateral denominator vanishes"));
    }
    let inner = bz2 - (bz2 + d) / (2.0 * bz2);
    let radius = (inner * inner + by * by).sqrt();
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(degenerate("logarithm argument is not positive"));
    }

    let s = Vec3::new((bx / den_x).atan(), (by / den_y).atan(), radius.ln());
    if s.iter().any(|v| !v.is_finite()) {
        return Err(degenerate("non-finite decoupled value"));
    }
    Ok(s)
}

pub fn flux_to_force(
    b: &FluxSample,
    cal: &SensorCalibration,
    c: &CompensationCoefficients,
) -> Result<ForceEstimate, TactileError> {
    let s = decouple_s(b, c)?;
    let f = cal.apply(&s);
    let valid = f.iter().all(|v| v.is_finite()) && cal.envelope.contains_force(&f);
    Ok(ForceEstimate { f, valid })
}

/// Magnet polarity branch selected by the forward model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    /// Positive `B_z` at rest.
    #[default]
    North,
    South,
}

/// Smooth map from a target `S` to a Newton starting flux.
///
/// `S` has several flux preimages; the gauge picks the branch. Distinct
/// gauges can return distinct flux for the same force, and every preimage
/// decouples to the same `S`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ForwardGauge {
    pub polarity: Polarity,
}

impl ForwardGauge {
    pub fn north() -> Self {
        Self { polarity: Polarity::North }
    }

    pub fn south() -> Self {
        Self { polarity: Polarity::South }
    }

    /// Normalized starting flux: invert each component of `S` assuming
    /// `B_y² − B_x²` is negligible against `B_z'²`.
    fn initial_guess(&self, s: &Vec3, c: &CompensationCoefficients) -> Vec3 {
        let spread = s.z.exp();
        let bz2 = match self.polarity {
            Polarity::North => 0.5 + spread,
            Polarity::South => 0.5 - spread,
        };
        let bz = (bz2 - c.c2) / c.k2;
        let (bz1, _) = c.apply(bz);
        let half = 0.5 * bz1;
        Vec3::new(s.x.tan() * half, s.y.tan() * half, bz)
    }
}

/// Synthetic sensor: the flux whose decoupled force equals `f`.
///
/// Solves `a ⊙ S(B) + b_off = f` with damped Newton iterations on the
/// 3×3 system, starting from the gauge's guess. The returned sample carries
/// `cal.node_id` and a zero timestamp.
pub fn force_to_flux(
    f: &Vec3,
    cal: &SensorCalibration,
    c: &CompensationCoefficients,
    gauge: ForwardGauge,
) -> Result<FluxSample, TactileError> {
    let target = cal.target_s(f);
    let b = solve_flux_for_s(&target, c, gauge).map_err(|residual| TactileError::NoSolution {
        f: [f.x, f.y, f.z],
        residual,
    })?;
    FluxSample::new(b * c.flux_scale, cal.node_id, 0.0)
}

/// Damped Newton solve of `S(B) = target` in normalized flux units.
/// On failure returns the best residual reached.
pub fn solve_flux_for_s(target: &Vec3, c: &CompensationCoefficients, gauge: ForwardGauge) -> Result<Vec3, f64> {
    if target.iter().any(|v| !v.is_finite()) {
        return Err(f64::INFINITY);
    }
    let residual = |b: &Vec3| decouple_normalized(b, c).map(|s| s - target);

    let mut b = gauge.initial_guess(target, c);
    let mut r = match residual(&b) {
        Ok(r) => r,
        Err(_) => return Err(f64::INFINITY),
    };
    for _ in 0..NEWTON_MAX_ITERS {
        let err = r.amax();
        if err <= NEWTON_TOLERANCE {
            return Ok(b);
        }
        let jac = match jacobian(&b, c) {
            Some(j) => j,
            None => return Err(err),
        };
        let step = match jac.lu().solve(&(-r)) {
            Some(step) => step,
            None => return Err(err),
        };
        let mut lambda = 1.0;
        let mut accepted = false;
        for _ in 0..40 {
            let trial = b + step * lambda;
            if let Ok(rt) = residual(&trial) {
                if rt.amax() < err {
                    b = trial;
                    r = rt;
                    accepted = true;
                    break;
                }
            }
            lambda *= 0.5;
        }
        if !accepted {
            return if err <= 10.0 * NEWTON_TOLERANCE { Ok(b) } else { Err(err) };
        }
    }
    let err = r.amax();
    if err <= NEWTON_TOLERANCE {
        Ok(b)
    } else {
        Err(err)
    }
}

/// Central-difference Jacobian of `S` at normalized flux `b`.
fn jacobian(b: &Vec3, c: &CompensationCoefficients) -> Option<Matrix3<f64>> {
    let mut jac = Matrix3::zeros();
    for j in 0..3 {
        let h = 1e-7 * b[j].abs().max(1.0);
        let mut hi = *b;
        let mut lo = *b;
        hi[j] += h;
        lo[j] -= h;
        let s_hi = decouple_normalized(&hi, c).ok()?;
        let s_lo = decouple_normalized(&lo, c).ok()?;
        jac.set_column(j, &((s_hi - s_lo) / (2.0 * h)));
    }
    Some(jac)
}

/// Result of a per-axis least-squares calibration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationFit {
    pub a: Vec3,
    pub b_off: Vec3,
    /// RMS of `a·S + b − f` per axis over the fitting pairs, N.
    pub residual_rms: Vec3,
}

impl CalibrationFit {
    /// Copies the fitted gains and offsets into `cal`.
    pub fn apply_to(&self, cal: &SensorCalibration) -> SensorCalibration {
        SensorCalibration { a: self.a, b_off: self.b_off, ..*cal }
    }
}

/// Fits `f_axis = a_axis·S_axis + b_axis` independently for each axis.
pub fn calibrate(pairs: &[(FluxSample, Vec3)], c: &CompensationCoefficients) -> Result<CalibrationFit, TactileError> {
    if pairs.len() < 4 {
        return Err(TactileError::InsufficientData { needed: 4, got: pairs.len() });
    }
    let s_values = pairs
        .iter()
        .map(|(b, _)| decouple_s(b, c))
        .collect::<Result<Vec<_>, _>>()?;

    let mut a = Vec3::zeros();
    let mut b_off = Vec3::zeros();
    let mut residual_rms = Vec3::zeros();
    let n = pairs.len() as f64;
    for axis in 0..3 {
        let xs: Vec<f64> = s_values.iter().map(|s| s[axis]).collect();
        let ys: Vec<f64> = pairs.iter().map(|(_, f)| f[axis]).collect();
        let first = xs[0];
        if xs.iter().all(|x| *x == first) {
            return Err(TactileError::RankDeficient { axis });
        }
        let mean_x = xs.iter().sum::<f64>() / n;
        let mean_y = ys.iter().sum::<f64>() / n;
        let sxx: f64 = xs.iter().map(|x| (x - mean_x).powi(2)).sum();
        let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mean_x) * (y - mean_y)).sum();
        if sxx <= f64::EPSILON * mean_x.abs().max(1.0) * n {
            return Err(TactileError::RankDeficient { axis });
        }
        let slope = sxy / sxx;
        let intercept = mean_y - slope * mean_x;
        if slope == 0.0 {
            return Err(TactileError::RankDeficient { axis });
        }
        let sse: f64 = xs.iter().zip(&ys).map(|(x, y)| (slope * x + intercept - y).powi(2)).sum();
        a[axis] = slope;
        b_off[axis] = intercept;
        residual_rms[axis] = (sse / n).sqrt();
    }
    Ok(CalibrationFit { a, b_off, residual_rms })
}

/// Offset making the mean no-load force estimate exactly zero.
pub fn zero_offset(
    samples: &[FluxSample],
    cal: &SensorCalibration,
    c: &CompensationCoefficients,
) -> Result<Vec3, TactileError> {
    if samples.len() < 10 {
        return Err(TactileError::InsufficientData { needed: 10, got: samples.len() });
    }
    let mut sum = Vec3::zeros();
    for s in samples {
        sum += decouple_s(s, c)?;
    }
    let mean = sum / samples.len() as f64;
    Ok(-cal.a.component_mul(&mean))
}

/// A full set of per-sensor calibrations plus the shared coefficients.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationBundle {
    pub coefficients: CompensationCoefficients,
    pub sensors: Vec<SensorCalibration>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BundleFile {
    coefficients: CompensationCoefficients,
    sensor: Vec<SensorEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SensorEntry {
    node_id: u8,
    a: [f64; 3],
    b: [f64; 3],
    mount_rotation: [f64; 9],
    contact_normal: [f64; 3],
    envelope: WorkingEnvelope,
}

impl CalibrationBundle {
    pub fn to_toml_string(&self) -> String {
        let file = BundleFile {
            coefficients: self.coefficients,
            sensor: self
                .sensors
                .iter()
                .map(|s| SensorEntry {
                    node_id: s.node_id,
                    a: s.a.into(),
                    b: s.b_off.into(),
                    mount_rotation: s.mount_rotation.to_row_array(),
                    contact_normal: s.contact_normal.into(),
                    envelope: s.envelope,
                })
                .collect(),
        };
        toml::to_string(&file).expect("calibration bundle serializes")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, TactileError> {
        let file: BundleFile = toml::from_str(text).map_err(|e| TactileError::Format(e.to_string()))?;
        file.coefficients.validate()?;
        let sensors = file
            .sensor
            .into_iter()
            .map(|e| {
                SensorCalibration::new(
                    e.node_id,
                    Vector3::from(e.a),
                    Vector3::from(e.b),
                    Rotation::from_row_slice(&e.mount_rotation)?,
                    Vector3::from(e.contact_normal),
                    e.envelope,
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { coefficients: file.coefficients, sensors })
    }
}
