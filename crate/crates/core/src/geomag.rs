//! Geomagnetic interference removal using a contact-free reference Hall
//! sensor rigidly mounted on the body.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;

use thiserror::Error;

use crate::geometry::{Rotation, Vec3};
use crate::tactile::{
    flux_to_force, force_to_flux, zero_offset, CompensationCoefficients, FluxSample, ForceEstimate, ForwardGauge,
    SensorCalibration, TactileError,
};

/// Maximum reference/tactile timestamp gap before a pairing is reported stale.
pub const PAIRING_STALENESS_S: f64 = 0.040;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeomagError {
    #[error("node {0} has no entry in the mounting graph")]
    UnknownNode(u8),
    #[error("node {0} appears more than once in the mounting graph")]
    DuplicateNode(u8),
    #[error("attitude grid is empty")]
    EmptyGrid,
    #[error(transparent)]
    Tactile(#[from] TactileError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceFieldSample {
    /// µT, reference-sensor frame.
    pub b_ref: Vec3,
    pub timestamp: f64,
}

/// Rotations from the reference-sensor frame into each tactile sensor frame.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MountingGraph {
    rotations: BTreeMap<u8, Rotation>,
}

impl MountingGraph {
    pub fn new(entries: impl IntoIterator<Item = (u8, Rotation)>) -> Result<Self, GeomagError> {
        let mut rotations = BTreeMap::new();
        for (node, r) in entries {
            if rotations.insert(node, r).is_some() {
                return Err(GeomagError::DuplicateNode(node));
            }
        }
        Ok(Self { rotations })
    }

    /// Builds the graph from body-frame mounts: `R_{Si←ref} = R_{B←Si}ᵀ R_{B←ref}`.
    pub fn from_body_mounts(
        sensor_mounts: impl IntoIterator<Item = (u8, Rotation)>,
        reference_mount: &Rotation,
    ) -> Result<Self, GeomagError> {
        Self::new(
            sensor_mounts
                .into_iter()
                .map(|(node, r_bs)| (node, r_bs.transpose().compose(reference_mount))),
        )
    }

    pub fn get(&self, node: u8) -> Option<&Rotation> {
        self.rotations.get(&node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = u8> + '_ {
        self.rotations.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.rotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rotations.is_empty()
    }
}

/// `B̂ᵢ = Bᵢ − R_{Si←ref} B_ref`, keeping the tactile timestamp.
pub fn compensate_flux(
    b_i: &FluxSample,
    b_ref: &ReferenceFieldSample,
    g: &MountingGraph,
) -> Result<FluxSample, GeomagError> {
    let r = g.get(b_i.node_id).ok_or(GeomagError::UnknownNode(b_i.node_id))?;
    Ok(FluxSample { b: b_i.b - r.rotate(&b_ref.b_ref), ..*b_i })
}

pub fn compensated_force(
    b_i: &FluxSample,
    b_ref: &ReferenceFieldSample,
    g: &MountingGraph,
    cal: &SensorCalibration,
    c: &CompensationCoefficients,
) -> Result<ForceEstimate, GeomagError> {
    let b_hat = compensate_flux(b_i, b_ref, g)?;
    Ok(flux_to_force(&b_hat, cal, c)?)
}

/// Short history of reference samples for nearest-timestamp pairing.
#[derive(Debug, Clone, Default)]
pub struct ReferenceBuffer {
    samples: VecDeque<ReferenceFieldSample>,
    capacity: usize,
}

impl ReferenceBuffer {
    pub fn new(capacity: usize) -> Self {
        Self { samples: VecDeque::with_capacity(capacity), capacity: capacity.max(1) }
    }

    pub fn push(&mut self, sample: ReferenceFieldSample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    /// Nearest sample to `t` and its absolute time offset.
    pub fn nearest(&self, t: f64) -> Option<(ReferenceFieldSample, f64)> {
        self.samples
            .iter()
            .map(|s| (*s, (s.timestamp - t).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Everything needed to synthesize no-load readings of a sensor ring.
#[derive(Debug, Clone)]
pub struct SweepRig {
    /// Ground-truth calibrations (their offsets define zero force).
    pub sensors: Vec<SensorCalibration>,
    pub coefficients: CompensationCoefficients,
    /// Reference sensor frame → body frame.
    pub reference_mount: Rotation,
    pub gauge: ForwardGauge,
}

impl SweepRig {
    pub fn mounting_graph(&self) -> Result<MountingGraph, GeomagError> {
        MountingGraph::from_body_mounts(self.sensors.iter().map(|s| (s.node_id, s.mount_rotation)), &self.reference_mount)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepRow {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub b_raw: Vec3,
    pub b_comp: Vec3,
    /// Norm of the no-load force estimate without compensation, N.
    pub f_err_raw: f64,
    /// Same with compensation, N.
    pub f_err_comp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub node_id: u8,
    pub rows: Vec<SweepRow>,
    pub max_dev_raw: f64,
    pub max_dev_comp: f64,
}

impl SweepReport {
    pub const CSV_HEADER: &'static str =
        "roll_deg,pitch_deg,bx_raw,by_raw,bz_raw,bx_comp,by_comp,bz_comp,f_err_raw_N,f_err_comp_N";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                r.roll_deg,
                r.pitch_deg,
                r.b_raw.x,
                r.b_raw.y,
                r.b_raw.z,
                r.b_comp.x,
                r.b_comp.y,
                r.b_comp.z,
                r.f_err_raw,
                r.f_err_comp
            );
        }
        out
    }
}

/// No-load readings of one sensor across a roll/pitch grid (degrees).
///
/// Both estimators are zeroed at level attitude, the raw one with the
/// Earth field folded into its offset. Each row reports the force the
/// estimators read at that attitude; the true force is zero throughout.
pub fn attitude_sweep_report(
    roll_pitch_grid: &[(f64, f64)],
    earth_field: &Vec3,
    rig: &SweepRig,
    node_id: u8,
) -> Result<SweepReport, GeomagError> {
    if roll_pitch_grid.is_empty() {
        return Err(GeomagError::EmptyGrid);
    }
    let graph = rig.mounting_graph()?;
    let truth = rig
        .sensors
        .iter()
        .find(|s| s.node_id == node_id)
        .ok_or(GeomagError::UnknownNode(node_id))?;
    let c = &rig.coefficients;
    let contact = force_to_flux(&Vec3::zeros(), truth, c, rig.gauge)?.b;

    let readings = |r_wb: &Rotation| -> Result<(FluxSample, ReferenceFieldSample), GeomagError> {
        let r_sw = r_wb.compose(&truth.mount_rotation).transpose();
        let r_refw = r_wb.compose(&rig.reference_mount).transpose();
        let b = FluxSample::new(contact + r_sw.rotate(earth_field), node_id, 0.0)?;
        let b_ref = ReferenceFieldSample { b_ref: r_refw.rotate(earth_field), timestamp: 0.0 };
        Ok((b, b_ref))
    };

    let (level_raw, level_ref) = readings(&Rotation::identity())?;
    let level_comp = compensate_flux(&level_raw, &level_ref, &graph)?;
    let raw_cal = SensorCalibration { b_off: zero_offset(&[level_raw; 10], truth, c)?, ..*truth };
    let comp_cal = SensorCalibration { b_off: zero_offset(&[level_comp; 10], truth, c)?, ..*truth };

    let mut rows = Vec::with_capacity(roll_pitch_grid.len());
    for &(roll_deg, pitch_deg) in roll_pitch_grid {
        let r_wb = Rotation::from_euler(roll_deg.to_radians(), pitch_deg.to_radians(), 0.0);
        let (raw, b_ref) = readings(&r_wb)?;
        let comp = compensate_flux(&raw, &b_ref, &graph)?;
        let f_raw = flux_to_force(&raw, &raw_cal, c)?.f;
        let f_comp = flux_to_force(&comp, &comp_cal, c)?.f;
        rows.push(SweepRow {
            roll_deg,
            pitch_deg,
            b_raw: raw.b,
            b_comp: comp.b,
            f_err_raw: f_raw.norm(),
            f_err_comp: f_comp.norm(),
        });
    }
    let max_dev_raw = rows.iter().map(|r| r.f_err_raw).fold(0.0, f64::max);
    let max_dev_comp = rows.iter().map(|r| r.f_err_comp).fold(0.0, f64::max);
    Ok(SweepReport { node_id, rows, max_dev_raw, max_dev_comp })
}

/// Regular roll × pitch grid from `-limit` to `limit` inclusive, degrees.
pub fn roll_pitch_grid(limit_deg: f64, step_deg: f64) -> Vec<(f64, f64)> {
    let n = (2.0 * limit_deg / step_deg).round() as i64;
    let values: Vec<f64> = (0..=n).map(|i| -limit_deg + i as f64 * step_deg).collect();
    values.iter().flat_map(|&r| values.iter().map(move |&p| (r, p))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tactile::{decouple_s, WorkingEnvelope};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_3};

    fn ring_rig() -> SweepRig {
        let c = CompensationCoefficients::default();
        let rest = FluxSample::new(Vec3::new(0.0, 0.0, 600.0), 0, 0.0).unwrap();
        let s_rest = decouple_s(&rest, &c).unwrap();
        let a = Vec3::new(8.0, 8.0, 2.5);
        let sensors = (1..=6u8)
            .map(|i| {
                let az = (i - 1) as f64 * FRAC_PI_3;
                // sensor z radial outward, sensor x along body z
                let mount = Rotation::rz(az).compose(&Rotation::ry(FRAC_PI_2)).compose(&Rotation::rz(std::f64::consts::PI));
                SensorCalibration::new(i, a, -a.component_mul(&s_rest), mount, Vec3::z(), WorkingEnvelope::default()).unwrap()
            })
            .collect();
        SweepRig {
            sensors,
            coefficients: c,
            reference_mount: Rotation::from_euler(std::f64::consts::PI, 0.0, 0.3),
            gauge: ForwardGauge::north(),
        }
    }

    fn earth() -> Vec3 {
        Vec3::new(30.0, 0.0, -40.0)
    }

    #[test]
    fn colocated_sensors_cancel() {
        let g = MountingGraph::new([(1, Rotation::identity())]).unwrap();
        let b = FluxSample::new(Vec3::new(3.0, -4.0, 50.0), 1, 0.25).unwrap();
        let r = ReferenceFieldSample { b_ref: b.b, timestamp: 0.25 };
        let out = compensate_flux(&b, &r, &g).unwrap();
        assert_eq!(out.b, Vec3::zeros());
        assert_eq!(out.timestamp, 0.25);
    }

    #[test]
    fn rotated_reference_cancels() {
        let g = MountingGraph::new([(2, Rotation::rz(FRAC_PI_2))]).unwrap();
        let b = FluxSample::new(Vec3::new(0.0, 10.0, 0.0), 2, 0.0).unwrap();
        let r = ReferenceFieldSample { b_ref: Vec3::new(10.0, 0.0, 0.0), timestamp: 0.0 };
        assert!(compensate_flux(&b, &r, &g).unwrap().b.norm() < 1e-14);
    }

    #[test]
    fn unknown_node_and_duplicates() {
        let g = MountingGraph::new([(1, Rotation::identity())]).unwrap();
        let b = FluxSample::new(Vec3::zeros(), 4, 0.0).unwrap();
        let r = ReferenceFieldSample { b_ref: Vec3::zeros(), timestamp: 0.0 };
        assert_eq!(compensate_flux(&b, &r, &g), Err(GeomagError::UnknownNode(4)));
        assert!(matches!(
            MountingGraph::new([(1, Rotation::identity()), (1, Rotation::identity())]),
            Err(GeomagError::DuplicateNode(1))
        ));
    }

    #[test]
    fn superposition_recovers_contact_flux() {
        let rig = ring_rig();
        let g = rig.mounting_graph().unwrap();
        let r_wb = Rotation::from_euler(0.2, -0.3, 1.0);
        for cal in &rig.sensors {
            let contact = Vec3::new(12.0, -5.0, 700.0);
            let r_sw = r_wb.compose(&cal.mount_rotation).transpose();
            let r_refw = r_wb.compose(&rig.reference_mount).transpose();
            let b = FluxSample::new(contact + r_sw.rotate(&earth()), cal.node_id, 0.0).unwrap();
            let r = ReferenceFieldSample { b_ref: r_refw.rotate(&earth()), timestamp: 0.0 };
            let out = compensate_flux(&b, &r, &g).unwrap();
            assert!((out.b - contact).amax() < 1e-12);
        }
    }

    #[test]
    fn compensated_force_examples() {
        let rig = ring_rig();
        let g = rig.mounting_graph().unwrap();
        let c = rig.coefficients;
        let cal = rig.sensors[2];
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let f_star = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(0.0..2.0));
            let r_wb = Rotation::from_euler(rng.random_range(-0.6..0.6), rng.random_range(-0.6..0.6), rng.random_range(-3.0..3.0));
            let contact = force_to_flux(&f_star, &cal, &c, ForwardGauge::north()).unwrap().b;
            let r_sw = r_wb.compose(&cal.mount_rotation).transpose();
            let r_refw = r_wb.compose(&rig.reference_mount).transpose();
            let b = FluxSample::new(contact + r_sw.rotate(&earth()), cal.node_id, 0.0).unwrap();
            let r = ReferenceFieldSample { b_ref: r_refw.rotate(&earth()), timestamp: 0.0 };
            let f = compensated_force(&b, &r, &g, &cal, &c).unwrap().f;
            assert!((f - f_star).amax() < 1e-6);
        }

        // zero Earth field: identical to the uncompensated path
        let b = force_to_flux(&Vec3::new(0.1, 0.2, 0.3), &cal, &c, ForwardGauge::north()).unwrap();
        let r = ReferenceFieldSample { b_ref: Vec3::zeros(), timestamp: 0.0 };
        assert_eq!(compensated_force(&b, &r, &g, &cal, &c).unwrap(), flux_to_force(&b, &cal, &c).unwrap());
    }

    #[test]
    fn sweep_identity_grid_and_zero_field() {
        let rig = ring_rig();
        let g = rig.mounting_graph().unwrap();
        let rep = attitude_sweep_report(&[(0.0, 0.0)], &earth(), &rig, 1).unwrap();
        let row = rep.rows[0];
        let offset = g.get(1).unwrap().rotate(&rig.reference_mount.transpose().rotate(&earth()));
        assert!((row.b_comp - (row.b_raw - offset)).amax() < 1e-12);

        let grid = roll_pitch_grid(30.0, 10.0);
        let rep = attitude_sweep_report(&grid, &Vec3::zeros(), &rig, 1).unwrap();
        for r in &rep.rows {
            assert_eq!(r.b_raw, r.b_comp);
            assert_eq!(r.f_err_raw, r.f_err_comp);
        }
        assert!(matches!(attitude_sweep_report(&[], &earth(), &rig, 1), Err(GeomagError::EmptyGrid)));
    }

    #[test]
    fn sweep_separates_compensated_from_raw() {
        let rig = ring_rig();
        let grid = roll_pitch_grid(30.0, 10.0);
        assert_eq!(grid.len(), 49);
        for node in 1..=6 {
            let rep = attitude_sweep_report(&grid, &earth(), &rig, node).unwrap();
            assert!(rep.max_dev_comp < 1e-9, "node {node}: {}", rep.max_dev_comp);
            assert!(rep.max_dev_raw > 10.0 * 0.02, "node {node}: {}", rep.max_dev_raw);
        }
        let csv = attitude_sweep_report(&grid, &earth(), &rig, 1).unwrap().to_csv();
        assert!(csv.starts_with(SweepReport::CSV_HEADER));
        assert_eq!(csv.lines().count(), 50);
    }

    #[test]
    fn reference_buffer_pairs_nearest() {
        let mut buf = ReferenceBuffer::new(3);
        for i in 0..5 {
            buf.push(ReferenceFieldSample { b_ref: Vec3::repeat(i as f64), timestamp: i as f64 * 0.02 });
        }
        let (s, gap) = buf.nearest(0.071).unwrap();
        assert_eq!(s.timestamp, 0.08);
        assert!((gap - 0.009).abs() < 1e-12);
        // oldest entries evicted
        let (s, _) = buf.nearest(0.0).unwrap();
        assert_eq!(s.timestamp, 0.04);
    }

    proptest! {
        #[test]
        fn compensation_is_linear(
            b in proptest::array::uniform3(-500.0..500.0f64),
            delta in proptest::array::uniform3(-100.0..100.0f64),
            r in proptest::array::uniform3(-60.0..60.0f64),
            yaw in -3.0..3.0f64,
        ) {
            let g = MountingGraph::new([(1, Rotation::from_euler(0.1, 0.2, yaw))]).unwrap();
            let reference = ReferenceFieldSample { b_ref: Vec3::from(r), timestamp: 0.0 };
            let base = FluxSample::new(Vec3::from(b), 1, 0.0).unwrap();
            let shifted = FluxSample::new(Vec3::from(b) + Vec3::from(delta), 1, 0.0).unwrap();
            let lhs = compensate_flux(&shifted, &reference, &g).unwrap().b;
            let rhs = compensate_flux(&base, &reference, &g).unwrap().b + Vec3::from(delta);
            prop_assert!((lhs - rhs).amax() < 1e-9);

            let zero = ReferenceFieldSample { b_ref: Vec3::zeros(), timestamp: 0.0 };
            prop_assert_eq!(compensate_flux(&base, &zero, &g).unwrap().b, base.b);
        }
    }
}
