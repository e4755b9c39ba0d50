//! Run metrics. Steady-state figures use the last 30% of each setpoint
//! segment; weight figures use fixed windows around the load change.

use std::fmt::Write as _;

use super::config::{ObjectConfig, ScenarioConfig};
use super::runner::{RunLog, TickRow};
use crate::plant::PlantEvent;

/// Fraction of a setpoint segment treated as settled.
pub const STEADY_FRACTION: f64 = 0.3;
/// Band within which the grasp force counts as settled, N.
pub const SETTLE_BAND_N: f64 = 0.05;
/// Window after release over which the altitude drop is measured, s.
pub const DROP_WINDOW_S: f64 = 5.0;
/// Averaging window for the final supported weight, s.
pub const FINAL_WEIGHT_WINDOW_S: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegmentMetrics {
    pub start: f64,
    pub end: f64,
    pub f_d: f64,
    /// `|mean(f̂_g) − f_d|` over the steady window.
    pub ss_error: f64,
    /// RMS of `f̂_g − f_d` over the steady window.
    pub rms: f64,
    /// Time from segment start until `f̂_g` stays within the settle band;
    /// `None` if it never does.
    pub settle_time: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunMetrics {
    pub segments: Vec<SegmentMetrics>,
    pub max_altitude_deviation: f64,
    /// Largest fall below the reference within [`DROP_WINDOW_S`] of release.
    pub max_drop_after_release: Option<f64>,
    pub burst: bool,
    pub burst_time: Option<f64>,
    pub dropped: bool,
    pub drop_time: Option<f64>,
    pub ground: bool,
    pub ground_time: Option<f64>,
    pub thrust_saturations: u64,
    pub grasp_clamps: u64,
    pub force_backoffs: u64,
    /// Mean sensed supported weight `−f̂_ext,z` after release, before loading.
    pub weight_initial: Option<f64>,
    /// Mean sensed supported weight over the final window.
    pub weight_final: Option<f64>,
    /// Per-axis RMS of `f̂_ext − f_ext` over calibrated ticks, N.
    pub force_est_rms: f64,
    /// RMS of `f̂_g − f_g` over calibrated ticks, N.
    pub grasp_est_rms: f64,
    pub max_true_grasp_force: f64,
    pub framing_errors: u64,
    pub flagged_ticks: u64,
    pub ticks: u64,
    pub completed: bool,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

fn window(ticks: &[TickRow], from: f64, to: f64) -> impl Iterator<Item = &TickRow> {
    ticks.iter().filter(move |r| r.t >= from && r.t < to)
}

/// Time the load starts growing: the first mass-schedule knot followed by
/// a heavier one.
fn load_start(cfg: &ScenarioConfig) -> Option<f64> {
    match &cfg.object {
        Some(ObjectConfig::Container { mass_schedule, .. }) => {
            mass_schedule.windows(2).find(|w| w[1][1] > w[0][1]).map(|w| w[0][0])
        }
        _ => None,
    }
}

pub fn compute_metrics(cfg: &ScenarioConfig, log: &RunLog) -> RunMetrics {
    let ticks = &log.ticks;
    let end = ticks.last().map_or(0.0, |r| r.t) + cfg.sensors.period_ms * 1e-3;
    let completed = end >= cfg.duration - 1e-9;

    let engaged: Vec<(f64, f64)> = cfg.setpoints.iter().filter_map(|s| s.f_d.map(|f| (s.t.max(cfg.sensors.baseline_s), f))).collect();
    let mut segments = Vec::new();
    for (i, &(start, f_d)) in engaged.iter().enumerate() {
        let seg_end = engaged.get(i + 1).map_or(cfg.duration, |n| n.0).min(end);
        if seg_end <= start {
            continue;
        }
        let steady_from = seg_end - STEADY_FRACTION * (seg_end - start);
        let errors: Vec<f64> = window(ticks, steady_from, seg_end).map(|r| r.f_g - f_d).collect();
        let n = errors.len().max(1) as f64;
        let ss_error = (errors.iter().sum::<f64>() / n).abs();
        let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
        let seg: Vec<&TickRow> = window(ticks, start, seg_end).collect();
        let last_out = seg.iter().rposition(|r| (r.f_g - f_d).abs() > SETTLE_BAND_N);
        let settle_time = match last_out {
            None => Some(0.0),
            Some(k) if k + 1 < seg.len() => Some(seg[k + 1].t - start),
            Some(_) => None,
        };
        segments.push(SegmentMetrics { start, end: seg_end, f_d, ss_error, rms, settle_time });
    }

    let max_altitude_deviation = ticks.iter().map(|r| (r.p.z - r.p_ref.z).abs()).fold(0.0, f64::max);
    let release = cfg.object.as_ref().and_then(ObjectConfig::release_time);
    let max_drop_after_release = release.map(|t0| {
        window(ticks, t0, t0 + DROP_WINDOW_S).map(|r| r.p_ref.z - r.p.z).fold(0.0, f64::max)
    });

    let supported = |r: &TickRow| -r.f_ext.z;
    let weight_initial = match (release, load_start(cfg)) {
        (Some(t0), Some(t1)) => mean(window(ticks, t0 + 1.0, t1).map(supported)),
        _ => None,
    };
    let weight_final = release.and_then(|_| mean(window(ticks, end - FINAL_WEIGHT_WINDOW_S, end).map(supported)));

    let calibrated: Vec<&TickRow> = ticks.iter().filter(|r| r.calibrated).collect();
    let n = calibrated.len().max(1) as f64;
    let force_est_rms = (calibrated.iter().map(|r| (r.f_ext - r.f_ext_true).norm_squared()).sum::<f64>() / (3.0 * n)).sqrt();
    let grasp_est_rms = (calibrated.iter().map(|r| (r.f_g - r.f_g_true).powi(2)).sum::<f64>() / n).sqrt();

    let burst_time = log.event_time(PlantEvent::Burst);
    let drop_time = log.event_time(PlantEvent::ObjectLost);
    let ground_time = log.event_time(PlantEvent::Ground);
    RunMetrics {
        segments,
        max_altitude_deviation,
        max_drop_after_release,
        burst: burst_time.is_some(),
        burst_time,
        dropped: drop_time.is_some(),
        drop_time,
        ground: ground_time.is_some(),
        ground_time,
        thrust_saturations: log.thrust_saturations,
        grasp_clamps: log.grasp_clamps,
        force_backoffs: log.force_backoffs,
        weight_initial,
        weight_final,
        force_est_rms,
        grasp_est_rms,
        max_true_grasp_force: ticks.iter().map(|r| r.f_g_true).fold(0.0, f64::max),
        framing_errors: log.snapshots.iter().map(|s| u64::from(s.framing_errors)).sum(),
        flagged_ticks: log.snapshots.iter().filter(|s| !s.flags.is_empty()).count() as u64,
        ticks: ticks.len() as u64,
        completed,
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "none".to_string(), |x| format!("{x:.6}"))
}

impl RunMetrics {
    pub fn max_ss_error(&self) -> f64 {
        self.segments.iter().map(|s| s.ss_error).fold(0.0, f64::max)
    }

    /// `key = value` lines in a fixed order.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        kv("completed", self.completed.to_string());
        kv("ticks", self.ticks.to_string());
        kv("segments", self.segments.len().to_string());
        for (i, s) in self.segments.iter().enumerate() {
            kv(&format!("segment.{i}.start"), format!("{:.6}", s.start));
            kv(&format!("segment.{i}.end"), format!("{:.6}", s.end));
            kv(&format!("segment.{i}.f_d"), format!("{:.6}", s.f_d));
            kv(&format!("segment.{i}.ss_error"), format!("{:.6}", s.ss_error));
            kv(&format!("segment.{i}.rms"), format!("{:.6}", s.rms));
            kv(&format!("segment.{i}.settle_time"), opt(s.settle_time));
        }
        kv("max_altitude_deviation", format!("{:.6}", self.max_altitude_deviation));
        kv("max_drop_after_release", opt(self.max_drop_after_release));
        kv("burst", self.burst.to_string());
        kv("burst_time", opt(self.burst_time));
        kv("dropped", self.dropped.to_string());
        kv("drop_time", opt(self.drop_time));
        kv("ground", self.ground.to_string());
        kv("ground_time", opt(self.ground_time));
        kv("weight_initial", opt(self.weight_initial));
        kv("weight_final", opt(self.weight_final));
        kv("force_est_rms", format!("{:.6}", self.force_est_rms));
        kv("grasp_est_rms", format!("{:.6}", self.grasp_est_rms));
        kv("max_true_grasp_force", format!("{:.6}", self.max_true_grasp_force));
        kv("thrust_saturations", self.thrust_saturations.to_string());
        kv("grasp_clamps", self.grasp_clamps.to_string());
        kv("force_backoffs", self.force_backoffs.to_string());
        kv("framing_errors", self.framing_errors.to_string());
        kv("flagged_ticks", self.flagged_ticks.to_string());
        out
    }
}
