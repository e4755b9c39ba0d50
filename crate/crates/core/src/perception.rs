//! Per-tick path from bus bytes to compensated force estimates, the
//! aggregated external force and the grasp force.

use std::fmt::Write as _;

use bitflags::bitflags;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bus::{BusSchedule, Decoded, FrameDecoder, TimestampRecovery};
use crate::control::{aggregate_external_force, grasp_force};
use crate::geomag::{compensate_flux, GeomagError, MountingGraph, ReferenceBuffer, ReferenceFieldSample, PAIRING_STALENESS_S};
use crate::geometry::{Rotation, Vec3};
use crate::tactile::{flux_to_force, zero_offset, CompensationCoefficients, FluxSample, ForceEstimate, SensorCalibration, TactileError};

pub const TACTILE_NODES: usize = 6;
pub const REFERENCE_NODE: u8 = 0;
/// Shortest quiet period accepted for offset initialization, s.
pub const MIN_BASELINE_S: f64 = 0.5;
/// Baseline variance may exceed the configured noise variance by this factor.
pub const BASELINE_VARIANCE_FACTOR: f64 = 5.0;
/// Noise floor used for the baseline test when no noise is configured, µT.
pub const BASELINE_NOISE_FLOOR_UT: f64 = 0.1;

bitflags! {
    /// Data-quality bits; any bit set marks the snapshot.
    #[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
    pub struct QualityFlags: u8 {
        const FRAMING = 1;
        const STALE = 1 << 1;
        const DEGENERATE = 1 << 2;
        const REF_STALE = 1 << 3;
        const OUT_OF_ENVELOPE = 1 << 4;
        const NO_REFERENCE = 1 << 5;
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("perception config: {0}")]
    Config(String),
    #[error("node {node}: baseline variance {variance:.4} µT² exceeds {threshold:.4} µT² (contact during initialization?)")]
    ContaminatedBaseline { node: u8, variance: f64, threshold: f64 },
    #[error("node {node}: need {needed} baseline samples, got {got}")]
    InsufficientBaseline { node: u8, needed: usize, got: usize },
    #[error(transparent)]
    Tactile(#[from] TactileError),
    #[error(transparent)]
    Geomag(#[from] GeomagError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionConfig {
    /// Tactile calibrations for nodes 1..=6.
    pub sensors: Vec<SensorCalibration>,
    pub coefficients: CompensationCoefficients,
    /// Reference sensor → body.
    pub reference_mount: Rotation,
    pub schedule: BusSchedule,
    /// Age beyond which a held estimate is flagged, s.
    pub staleness_s: f64,
    /// Standard deviation of flux noise added to every reading, µT.
    pub noise_sigma_ut: f64,
    pub seed: u64,
    pub geomag_comp: bool,
}

impl PerceptionConfig {
    pub fn validate(&self) -> Result<(), PerceptionError> {
        if self.sensors.len() != TACTILE_NODES {
            return Err(PerceptionError::Config(format!(
                "expected {TACTILE_NODES} tactile sensors, got {}",
                self.sensors.len()
            )));
        }
        for (i, s) in self.sensors.iter().enumerate() {
            if usize::from(s.node_id) != i + 1 {
                return Err(PerceptionError::Config(format!("sensor {i} must have node id {}", i + 1)));
            }
            s.validate()?;
        }
        if self.schedule.nodes() != TACTILE_NODES + 1 {
            return Err(PerceptionError::Config("bus schedule must cover the reference and six tactile nodes".into()));
        }
        if !(self.staleness_s > 0.0) {
            return Err(PerceptionError::Config("staleness bound must be positive".into()));
        }
        if !(self.noise_sigma_ut >= 0.0 && self.noise_sigma_ut.is_finite()) {
            return Err(PerceptionError::Config("noise sigma must be nonnegative".into()));
        }
        self.coefficients.validate()?;
        Ok(())
    }

    pub fn mounting_graph(&self) -> Result<MountingGraph, GeomagError> {
        MountingGraph::from_body_mounts(self.sensors.iter().map(|s| (s.node_id, s.mount_rotation)), &self.reference_mount)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForceSnapshot {
    pub timestamp: f64,
    /// Per tactile sensor, sensor frame.
    pub estimates: Vec<ForceEstimate>,
    /// World frame.
    pub f_ext: Vec3,
    pub f_g: f64,
    pub flags: QualityFlags,
    /// Rejected byte spans decoded during this tick.
    pub framing_errors: u32,
}

pub const SNAPSHOT_CSV_HEADER: &str = "t,node,fx,fy,fz,fext_x,fext_y,fext_z,f_g,flags";

impl ForceSnapshot {
    /// One CSV row per tactile node.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for (i, e) in self.estimates.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:.6},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
                self.timestamp,
                i + 1,
                e.f.x,
                e.f.y,
                e.f.z,
                self.f_ext.x,
                self.f_ext.y,
                self.f_ext.z,
                self.f_g,
                self.flags.bits()
            );
        }
        out
    }
}

#[derive(Debug, Clone, Copy)]
struct Held {
    estimate: ForceEstimate,
    t: f64,
}

/// Incremental perception processor.
#[derive(Debug, Clone)]
pub struct Perception {
    cfg: PerceptionConfig,
    graph: MountingGraph,
    decoder: FrameDecoder,
    recovery: TimestampRecovery,
    refs: ReferenceBuffer,
    held: Vec<Option<Held>>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    pending_flags: QualityFlags,
    pending_framing: u32,
    last_timestamp: f64,
    baseline: Option<Vec<Vec<FluxSample>>>,
}

impl Perception {
    pub fn new(cfg: PerceptionConfig) -> Result<Self, PerceptionError> {
        cfg.validate()?;
        let graph = cfg.mounting_graph()?;
        let noise = (cfg.noise_sigma_ut > 0.0).then(|| Normal::new(0.0, cfg.noise_sigma_ut).expect("finite sigma"));
        Ok(Self {
            graph,
            decoder: FrameDecoder::new(),
            recovery: TimestampRecovery::new(cfg.schedule.clone()),
            refs: ReferenceBuffer::new(16),
            held: vec![None; TACTILE_NODES],
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            noise,
            pending_flags: QualityFlags::empty(),
            pending_framing: 0,
            last_timestamp: f64::NEG_INFINITY,
            baseline: None,
            cfg,
        })
    }

    pub fn config(&self) -> &PerceptionConfig {
        &self.cfg
    }

    pub fn sensors(&self) -> &[SensorCalibration] {
        &self.cfg.sensors
    }

    /// Decodes bus bytes received by `now_us` and ingests their samples.
    pub fn ingest_bytes(&mut self, bytes: &[u8], now_us: u64) {
        for event in self.decoder.push(bytes) {
            match event {
                Decoded::Frame { frame, .. } => match self.recovery.recover(&frame, now_us) {
                    Some(t_us) => self.ingest_sample(frame.node_id, frame.flux(), t_us as f64 * 1e-6),
                    None => {
                        log::warn!("frame from unscheduled node {}", frame.node_id);
                        self.pending_flags |= QualityFlags::FRAMING;
                    }
                },
                Decoded::Error(e) => {
                    log::warn!("framing error {:?} at byte {} ({} bytes)", e.kind, e.offset, e.len);
                    self.pending_flags |= QualityFlags::FRAMING;
                    self.pending_framing += 1;
                }
            }
        }
    }

    /// Ingests one flux reading (µT, sensor frame) taken at `t` seconds.
    pub fn ingest_sample(&mut self, node_id: u8, flux: Vec3, t: f64) {
        let flux = match &self.noise {
            Some(n) => flux + Vec3::new(n.sample(&mut self.rng), n.sample(&mut self.rng), n.sample(&mut self.rng)),
            None => flux,
        };
        if node_id == REFERENCE_NODE {
            self.refs.push(ReferenceFieldSample { b_ref: flux, timestamp: t });
            return;
        }
        let idx = usize::from(node_id).wrapping_sub(1);
        if idx >= TACTILE_NODES {
            self.pending_flags |= QualityFlags::FRAMING;
            return;
        }
        let sample = match FluxSample::new(flux, node_id, t) {
            Ok(s) => s,
            Err(e) => {
                log::warn!("node {node_id}: {e}");
                self.pending_flags |= QualityFlags::DEGENERATE;
                return;
            }
        };
        let compensated = if self.cfg.geomag_comp {
            match self.refs.nearest(t) {
                Some((r, gap)) => {
                    if gap > PAIRING_STALENESS_S {
                        log::warn!("node {node_id}: reference sample {gap:.3} s away");
                        self.pending_flags |= QualityFlags::REF_STALE;
                    }
                    compensate_flux(&sample, &r, &self.graph).expect("graph covers all tactile nodes")
                }
                None => {
                    self.pending_flags |= QualityFlags::NO_REFERENCE;
                    sample
                }
            }
        } else {
            sample
        };
        if let Some(baseline) = &mut self.baseline {
            baseline[idx].push(compensated);
        }
        match flux_to_force(&compensated, &self.cfg.sensors[idx], &self.cfg.coefficients) {
            Ok(estimate) => {
                if !estimate.valid {
                    self.pending_flags |= QualityFlags::OUT_OF_ENVELOPE;
                }
                self.held[idx] = Some(Held { estimate, t });
            }
            Err(e) => {
                log::warn!("node {node_id}: {e}");
                self.pending_flags |= QualityFlags::DEGENERATE;
            }
        }
    }

    /// Assembles the snapshot for time `now` using body attitude `r`.
    pub fn snapshot(&mut self, r: &Rotation, now: f64) -> ForceSnapshot {
        let mut flags = std::mem::take(&mut self.pending_flags);
        let framing_errors = std::mem::take(&mut self.pending_framing);
        let zero = ForceEstimate { f: Vec3::zeros(), valid: true };
        let mut estimates = Vec::with_capacity(TACTILE_NODES);
        for held in &self.held {
            match held {
                Some(h) => {
                    if now - h.t > self.cfg.staleness_s {
                        flags |= QualityFlags::STALE;
                    }
                    estimates.push(h.estimate);
                }
                None => {
                    flags |= QualityFlags::STALE;
                    estimates.push(zero);
                }
            }
        }
        let forces: Vec<Vec3> = estimates.iter().map(|e| e.f).collect();
        let normals: Vec<Vec3> = self.cfg.sensors.iter().map(|s| s.contact_normal).collect();
        let timestamp = now.max(self.last_timestamp);
        self.last_timestamp = timestamp;
        ForceSnapshot {
            timestamp,
            f_ext: aggregate_external_force(&forces, &self.cfg.sensors, r),
            f_g: grasp_force(&forces, &normals),
            estimates,
            flags,
            framing_errors,
        }
    }

    pub fn tick(&mut self, bytes: &[u8], r: &Rotation, now_us: u64) -> ForceSnapshot {
        self.ingest_bytes(bytes, now_us);
        self.snapshot(r, now_us as f64 * 1e-6)
    }

    /// Starts collecting compensated no-load flux for offset initialization.
    pub fn begin_baseline(&mut self) {
        self.baseline = Some(vec![Vec::new(); TACTILE_NODES]);
    }

    /// Ends collection and applies new offsets; see [`initialize_offsets`].
    pub fn finish_baseline(&mut self) -> Result<Vec<Vec3>, PerceptionError> {
        let samples = self.baseline.take().unwrap_or_default();
        let offsets = initialize_offsets(&samples, &self.cfg)?;
        for (s, b) in self.cfg.sensors.iter_mut().zip(&offsets) {
            s.b_off = *b;
        }
        // estimates computed with the old offsets are no longer meaningful
        self.held = vec![None; TACTILE_NODES];
        Ok(offsets)
    }
}

/// New per-sensor offsets from compensated no-load samples.
///
/// Rejects a baseline shorter than [`MIN_BASELINE_S`] at the bus rate, and
/// one whose per-axis flux variance exceeds
/// `BASELINE_VARIANCE_FACTOR · max(σ, BASELINE_NOISE_FLOOR_UT)²`.
pub fn initialize_offsets(samples: &[Vec<FluxSample>], cfg: &PerceptionConfig) -> Result<Vec<Vec3>, PerceptionError> {
    let needed = (MIN_BASELINE_S / cfg.schedule.period_s()).round() as usize;
    let sigma = cfg.noise_sigma_ut.max(BASELINE_NOISE_FLOOR_UT);
    let threshold = BASELINE_VARIANCE_FACTOR * sigma * sigma;
    let mut offsets = Vec::with_capacity(cfg.sensors.len());
    for (i, cal) in cfg.sensors.iter().enumerate() {
        let node_samples = samples.get(i).map(Vec::as_slice).unwrap_or(&[]);
        if node_samples.len() < needed {
            return Err(PerceptionError::InsufficientBaseline { node: cal.node_id, needed, got: node_samples.len() });
        }
        let n = node_samples.len() as f64;
        let mean: Vec3 = node_samples.iter().map(|s| s.b).sum::<Vec3>() / n;
        let var: Vec3 = node_samples.iter().map(|s| (s.b - mean).map(|d| d * d)).sum::<Vec3>() / n;
        let worst = var.max();
        if worst > threshold {
            return Err(PerceptionError::ContaminatedBaseline { node: cal.node_id, variance: worst, threshold });
        }
        offsets.push(zero_offset(node_samples, cal, &cfg.coefficients)?);
    }
    Ok(offsets)
}
