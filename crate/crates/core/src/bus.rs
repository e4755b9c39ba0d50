//! Wire codec and emulator for the daisy-chained sensor telemetry chain.
//!
//! Frame layout (11 bytes):
//!
//! | offset | size | field                                        |
//! |--------|------|----------------------------------------------|
//! | 0      | 1    | sync `0xAA`                                  |
//! | 1      | 1    | node id (0 = reference, 1..=6 tactile)       |
//! | 2      | 1    | wrapping sequence counter                    |
//! | 3      | 6    | flux x, y, z as `i16` little-endian, 0.1 µT  |
//! | 9      | 2    | CRC-16/CCITT-FALSE of bytes 0..9, big-endian |

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::geometry::Vec3;

pub const SYNC: u8 = 0xAA;
pub const FRAME_LEN: usize = 11;
/// Flux resolution of the wire format, µT per LSB.
pub const FLUX_LSB_UT: f64 = 0.1;
pub const FLUX_LIMIT_UT: f64 = 3276.7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BusError {
    #[error("flux component {value} µT is outside ±{FLUX_LIMIT_UT} µT")]
    Range { value: f64 },
    #[error("schedule: {0}")]
    Schedule(String),
}

const CRC_TABLE: [u16; 256] = build_crc_table();

const fn build_crc_table() -> [u16; 256] {
    let mut table = [0u16; 256];
    let mut i = 0;
    while i < 256 {
        let mut crc = (i as u16) << 8;
        let mut bit = 0;
        while bit < 8 {
            crc = if crc & 0x8000 != 0 { (crc << 1) ^ 0x1021 } else { crc << 1 };
            bit += 1;
        }
        table[i] = crc;
        i += 1;
    }
    table
}

/// CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection, no xorout.
pub fn crc16_ccitt_false(bytes: &[u8]) -> u16 {
    bytes.iter().fold(0xFFFF, |crc, &b| (crc << 8) ^ CRC_TABLE[usize::from((crc >> 8) as u8 ^ b)])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WireFrame {
    pub node_id: u8,
    pub seq: u8,
    /// Flux in units of [`FLUX_LSB_UT`].
    pub flux_raw: [i16; 3],
}

impl WireFrame {
    pub fn flux(&self) -> Vec3 {
        Vec3::new(
            f64::from(self.flux_raw[0]) * FLUX_LSB_UT,
            f64::from(self.flux_raw[1]) * FLUX_LSB_UT,
            f64::from(self.flux_raw[2]) * FLUX_LSB_UT,
        )
    }

    pub fn to_bytes(&self) -> [u8; FRAME_LEN] {
        let mut out = [0u8; FRAME_LEN];
        out[0] = SYNC;
        out[1] = self.node_id;
        out[2] = self.seq;
        for (i, v) in self.flux_raw.iter().enumerate() {
            out[3 + 2 * i..5 + 2 * i].copy_from_slice(&v.to_le_bytes());
        }
        let crc = crc16_ccitt_false(&out[..9]);
        out[9..].copy_from_slice(&crc.to_be_bytes());
        out
    }

    /// Parses one frame, verifying sync and CRC.
    pub fn from_bytes(bytes: &[u8; FRAME_LEN]) -> Option<Self> {
        if bytes[0] != SYNC {
            return None;
        }
        let crc = u16::from_be_bytes([bytes[9], bytes[10]]);
        if crc16_ccitt_false(&bytes[..9]) != crc {
            return None;
        }
        let word = |i: usize| i16::from_le_bytes([bytes[3 + 2 * i], bytes[4 + 2 * i]]);
        Some(Self { node_id: bytes[1], seq: bytes[2], flux_raw: [word(0), word(1), word(2)] })
    }
}

/// Quantizes µT to wire units, rejecting out-of-range components.
pub fn quantize_flux(flux: &Vec3) -> Result<[i16; 3], BusError> {
    let mut out = [0i16; 3];
    for (o, &v) in out.iter_mut().zip(flux.iter()) {
        // the slack admits decoded extremes such as 32767 × 0.1 = 3276.7000000000003
        if !v.is_finite() || v.abs() > FLUX_LIMIT_UT + 1e-9 {
            return Err(BusError::Range { value: v });
        }
        *o = (v / FLUX_LSB_UT).round().clamp(-32767.0, 32767.0) as i16;
    }
    Ok(out)
}

pub fn encode_frame(node_id: u8, seq: u8, flux: &Vec3) -> Result<[u8; FRAME_LEN], BusError> {
    Ok(WireFrame { node_id, seq, flux_raw: quantize_flux(flux)? }.to_bytes())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FramingErrorKind {
    /// Span began with a sync byte whose frame failed the CRC.
    BadCrc,
    /// Span began with bytes that were not a sync byte.
    NoSync,
    /// Stream ended inside a frame.
    Truncated,
}

/// A rejected span of the input stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramingError {
    pub kind: FramingErrorKind,
    /// Byte offset from the start of the stream.
    pub offset: u64,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decoded {
    Frame { frame: WireFrame, offset: u64 },
    Error(FramingError),
}

impl Decoded {
    pub fn frame(&self) -> Option<&WireFrame> {
        match self {
            Decoded::Frame { frame, .. } => Some(frame),
            Decoded::Error(_) => None,
        }
    }
}

/// Incremental decoder. Resynchronizes on the sync byte after corruption;
/// consecutive rejected bytes are reported as a single span.
#[derive(Debug, Default, Clone)]
pub struct FrameDecoder {
    pending: Vec<u8>,
    /// Stream offset of `pending[0]`.
    base: u64,
    span: Option<FramingError>,
    crc_checks: u64,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of candidate windows that went through a CRC check.
    pub fn crc_checks(&self) -> u64 {
        self.crc_checks
    }

    pub fn push(&mut self, bytes: &[u8]) -> Vec<Decoded> {
        self.pending.extend_from_slice(bytes);
        let mut out = Vec::new();
        let mut pos = 0;
        while pos < self.pending.len() {
            if self.pending[pos] != SYNC {
                let skip = self.pending[pos..].iter().position(|&b| b == SYNC).unwrap_or(self.pending.len() - pos);
                self.reject(pos, skip, FramingErrorKind::NoSync);
                pos += skip;
                continue;
            }
            if self.pending.len() - pos < FRAME_LEN {
                break;
            }
            let window: &[u8; FRAME_LEN] = self.pending[pos..pos + FRAME_LEN].try_into().expect("frame window");
            self.crc_checks += 1;
            match WireFrame::from_bytes(window) {
                Some(frame) => {
                    if let Some(span) = self.span.take() {
                        out.push(Decoded::Error(span));
                    }
                    out.push(Decoded::Frame { frame, offset: self.base + pos as u64 });
                    pos += FRAME_LEN;
                }
                None => {
                    self.reject(pos, 1, FramingErrorKind::BadCrc);
                    pos += 1;
                }
            }
        }
        self.pending.drain(..pos);
        self.base += pos as u64;
        if let Some(span) = self.span {
            // keep spans open across pushes only while more bytes may extend them
            if span.offset + span.len as u64 != self.base {
                out.push(Decoded::Error(span));
                self.span = None;
            }
        }
        out
    }

    /// Flushes any open error span and reports an incomplete tail.
    pub fn finish(&mut self) -> Vec<Decoded> {
        let mut out = Vec::new();
        if let Some(span) = self.span.take() {
            out.push(Decoded::Error(span));
        }
        if !self.pending.is_empty() {
            out.push(Decoded::Error(FramingError {
                kind: FramingErrorKind::Truncated,
                offset: self.base,
                len: self.pending.len(),
            }));
            self.base += self.pending.len() as u64;
            self.pending.clear();
        }
        out
    }

    fn reject(&mut self, pos: usize, len: usize, kind: FramingErrorKind) {
        let offset = self.base + pos as u64;
        match &mut self.span {
            Some(span) if span.offset + span.len as u64 == offset => span.len += len,
            _ => {
                self.span = Some(FramingError { kind, offset, len });
            }
        }
    }
}

/// Decodes a complete byte stream.
pub fn decode_stream(bytes: &[u8]) -> Vec<Decoded> {
    let mut dec = FrameDecoder::new();
    let mut out = dec.push(bytes);
    out.extend(dec.finish());
    out
}

/// Publish timing of every node on the bus, indexed by node id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BusSchedule {
    pub period_us: u64,
    pub phase_us: Vec<u64>,
}

impl BusSchedule {
    pub fn new(period_us: u64, phase_us: Vec<u64>) -> Result<Self, BusError> {
        if period_us == 0 {
            return Err(BusError::Schedule("period must be positive".into()));
        }
        if let Some(p) = phase_us.iter().find(|p| **p >= period_us) {
            return Err(BusError::Schedule(format!("phase {p} µs is not below the period")));
        }
        if phase_us.is_empty() || phase_us.len() > 256 {
            return Err(BusError::Schedule("need between 1 and 256 nodes".into()));
        }
        Ok(Self { period_us, phase_us })
    }

    /// `nodes` nodes spread evenly over one period.
    pub fn staggered(nodes: usize, period_us: u64) -> Result<Self, BusError> {
        let n = nodes.max(1) as u64;
        Self::new(period_us, (0..n).map(|k| k * period_us / n).collect())
    }

    pub fn nodes(&self) -> usize {
        self.phase_us.len()
    }

    pub fn period_s(&self) -> f64 {
        self.period_us as f64 * 1e-6
    }
}

impl Default for BusSchedule {
    /// Seven nodes (reference + six tactile) at 50 Hz.
    fn default() -> Self {
        Self::staggered(7, 20_000).expect("default schedule")
    }
}

/// One published sample, as it went on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleLogEntry {
    pub t_us: u64,
    pub node_id: u8,
    pub seq: u8,
    pub flux_raw: [i16; 3],
}

/// Deterministic event loop producing the merged host-side stream.
#[derive(Debug, Clone)]
pub struct BusEmulator {
    schedule: BusSchedule,
    next_index: Vec<u64>,
    seq: Vec<u8>,
    log: Vec<SampleLogEntry>,
}

impl BusEmulator {
    pub fn new(schedule: BusSchedule) -> Self {
        let n = schedule.nodes();
        Self { schedule, next_index: vec![0; n], seq: vec![0; n], log: Vec::new() }
    }

    pub fn schedule(&self) -> &BusSchedule {
        &self.schedule
    }

    pub fn log(&self) -> &[SampleLogEntry] {
        &self.log
    }

    pub fn take_log(&mut self) -> Vec<SampleLogEntry> {
        std::mem::take(&mut self.log)
    }

    fn next_time(&self, node: usize) -> u64 {
        self.schedule.phase_us[node] + self.next_index[node] * self.schedule.period_us
    }

    fn next_due(&self, limit_us: u64, inclusive: bool) -> Option<(u64, usize)> {
        (0..self.schedule.nodes())
            .map(|n| (self.next_time(n), n))
            .filter(|(t, _)| if inclusive { *t <= limit_us } else { *t < limit_us })
            .min()
    }

    /// Publishes every frame scheduled at or before `t_us`, in time order
    /// (ties broken by node id). `source(node, t_us)` supplies the flux.
    /// Out-of-range flux is clamped to the representable range.
    pub fn poll(&mut self, t_us: u64, source: impl FnMut(u8, u64) -> Vec3) -> Vec<u8> {
        self.publish(t_us, true, source)
    }

    /// Like [`BusEmulator::poll`] but excludes frames due exactly at `t_us`.
    pub fn poll_before(&mut self, t_us: u64, source: impl FnMut(u8, u64) -> Vec3) -> Vec<u8> {
        self.publish(t_us, false, source)
    }

    fn publish(&mut self, limit_us: u64, inclusive: bool, mut source: impl FnMut(u8, u64) -> Vec3) -> Vec<u8> {
        let mut out = Vec::new();
        while let Some((t, n)) = self.next_due(limit_us, inclusive) {
            let node_id = n as u8;
            let flux = source(node_id, t);
            let clamped = flux.map(|v| if v.is_finite() { v.clamp(-FLUX_LIMIT_UT, FLUX_LIMIT_UT) } else { 0.0 });
            if clamped != flux {
                log::warn!("node {node_id}: flux {flux:?} clamped to wire range at t = {t} µs");
            }
            let flux_raw = quantize_flux(&clamped).expect("clamped flux is representable");
            let frame = WireFrame { node_id, seq: self.seq[n], flux_raw };
            out.extend_from_slice(&frame.to_bytes());
            self.log.push(SampleLogEntry { t_us: t, node_id, seq: frame.seq, flux_raw });
            self.seq[n] = self.seq[n].wrapping_add(1);
            self.next_index[n] += 1;
        }
        out
    }
}

/// Runs the bus over `[0, duration_s)` and returns the stream and the log.
pub fn run_emulated_bus(
    source: impl FnMut(u8, u64) -> Vec3,
    schedule: &BusSchedule,
    duration_s: f64,
) -> (Vec<u8>, Vec<SampleLogEntry>) {
    let mut emu = BusEmulator::new(schedule.clone());
    let end_us = (duration_s * 1e6).round().max(0.0) as u64;
    let bytes = emu.poll_before(end_us, source);
    (bytes, emu.take_log())
}

pub fn write_stream(path: impl AsRef<Path>, bytes: &[u8]) -> io::Result<()> {
    std::fs::write(path, bytes)
}

pub fn read_stream(path: impl AsRef<Path>) -> io::Result<Vec<u8>> {
    std::fs::read(path)
}

/// Recovers sample times from sequence numbers for a known schedule.
///
/// Frames carry no timestamp; the host reconstructs it from the node's
/// phase, the period and the wrapping counter.
#[derive(Debug, Clone)]
pub struct TimestampRecovery {
    schedule: BusSchedule,
    last: Vec<Option<(u8, u64)>>,
}

impl TimestampRecovery {
    pub fn new(schedule: BusSchedule) -> Self {
        let n = schedule.nodes();
        Self { schedule, last: vec![None; n] }
    }

    /// Sample time in µs of `frame`, received no later than `now_us`.
    /// Returns `None` for nodes outside the schedule.
    pub fn recover(&mut self, frame: &WireFrame, now_us: u64) -> Option<u64> {
        let n = usize::from(frame.node_id);
        let phase = *self.schedule.phase_us.get(n)?;
        let period = self.schedule.period_us;
        let t = match self.last[n] {
            Some((seq, t_last)) => {
                let mut steps = u64::from(frame.seq.wrapping_sub(seq));
                if steps == 0 {
                    steps = 256;
                }
                t_last + steps * period
            }
            None => {
                // latest time ≤ now congruent with the sequence number
                let cycle = 256 * period;
                let first = phase + u64::from(frame.seq) * period;
                if now_us < first {
                    first
                } else {
                    first + (now_us - first) / cycle * cycle
                }
            }
        };
        self.last[n] = Some((frame.seq, t));
        Some(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Bit-at-a-time reference CRC, independent of the table.
    fn crc_reference(bytes: &[u8]) -> u16 {
        let mut crc: u16 = 0xFFFF;
        for &b in bytes {
            for i in (0..8).rev() {
                let bit = ((b >> i) & 1) as u16;
                let top = (crc >> 15) & 1;
                crc <<= 1;
                if top ^ bit == 1 {
                    crc ^= 0x1021;
                }
            }
        }
        crc
    }

    #[test]
    fn crc_check_value() {
        assert_eq!(crc16_ccitt_false(b"123456789"), 0x29B1);
        assert_eq!(crc_reference(b"123456789"), 0x29B1);
    }

    #[test]
    fn crc_of_example_header_matches_reference() {
        let bytes = [0xAA, 0x01, 0x00, 0x0A, 0x00, 0xF6, 0xFF, 0xFA, 0x00];
        assert_eq!(crc16_ccitt_false(&bytes), crc_reference(&bytes));
        let frame = encode_frame(1, 0, &Vec3::new(1.0, -1.0, 25.0)).unwrap();
        assert_eq!(&frame[..9], &bytes);
        assert_eq!(u16::from_be_bytes([frame[9], frame[10]]), crc_reference(&bytes));
    }

    #[test]
    fn zero_payload_layout() {
        let f = encode_frame(1, 0, &Vec3::zeros()).unwrap();
        assert_eq!(&f[..9], &[0xAA, 0x01, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(f.len(), 11);
    }

    #[test]
    fn range_errors() {
        assert!(encode_frame(1, 0, &Vec3::new(3276.7, -3276.7, 0.0)).is_ok());
        assert!(matches!(encode_frame(1, 0, &Vec3::new(3276.8, 0.0, 0.0)), Err(BusError::Range { .. })));
        assert!(matches!(encode_frame(1, 0, &Vec3::new(0.0, -3276.71, 0.0)), Err(BusError::Range { .. })));
        assert!(matches!(encode_frame(1, 0, &Vec3::new(0.0, f64::NAN, 0.0)), Err(BusError::Range { .. })));
        let extreme = WireFrame { node_id: 1, seq: 0, flux_raw: [32767, -32767, 0] };
        assert_eq!(quantize_flux(&extreme.flux()).unwrap(), extreme.flux_raw);
    }

    #[test]
    fn clean_stream_decodes() {
        let a = encode_frame(1, 3, &Vec3::new(1.0, 2.0, 3.0)).unwrap();
        let b = encode_frame(2, 4, &Vec3::new(-1.0, 0.5, 600.0)).unwrap();
        let out = decode_stream(&[a, b].concat());
        assert_eq!(out.len(), 2);
        assert_eq!(out[0], Decoded::Frame { frame: WireFrame::from_bytes(&a).unwrap(), offset: 0 });
        assert_eq!(out[1], Decoded::Frame { frame: WireFrame::from_bytes(&b).unwrap(), offset: 11 });
    }

    #[test]
    fn flipped_payload_bit_is_one_error_then_next_frame() {
        let a = encode_frame(1, 0, &Vec3::new(17.0, -17.0, 1700.0)).unwrap();
        let b = encode_frame(2, 0, &Vec3::new(-1.0, 0.5, 600.0)).unwrap();
        let mut stream = [a, b].concat();
        stream[5] ^= 0x10;
        let out = decode_stream(&stream);
        assert_eq!(out.len(), 2, "{out:?}");
        match out[0] {
            Decoded::Error(e) => {
                assert_eq!(e.kind, FramingErrorKind::BadCrc);
                assert_eq!(e.offset, 0);
                assert_eq!(e.len, 11);
            }
            _ => panic!("expected error"),
        }
        assert_eq!(out[1].frame(), WireFrame::from_bytes(&b).as_ref());
    }

    #[test]
    fn garbage_prefix_then_frame() {
        let frame = encode_frame(5, 9, &Vec3::new(0.1, 0.2, 0.3)).unwrap();
        let mut stream = vec![0x01, 0xAA, 0x13, 0x37, 0xAA];
        stream.extend_from_slice(&frame);
        let out = decode_stream(&stream);
        assert_eq!(out.len(), 2, "{out:?}");
        assert_eq!(out[0], Decoded::Error(FramingError { kind: FramingErrorKind::NoSync, offset: 0, len: 5 }));
        assert_eq!(out[1], Decoded::Frame { frame: WireFrame::from_bytes(&frame).unwrap(), offset: 5 });
    }

    #[test]
    fn truncated_tail_and_incremental_push() {
        let a = encode_frame(1, 0, &Vec3::new(1.0, 1.0, 1.0)).unwrap();
        let b = encode_frame(1, 1, &Vec3::new(2.0, 2.0, 2.0)).unwrap();
        let stream = [a.as_slice(), b.as_slice(), &b[..4]].concat();
        let mut dec = FrameDecoder::new();
        let mut out = Vec::new();
        for chunk in stream.chunks(3) {
            out.extend(dec.push(chunk));
        }
        assert_eq!(out.iter().filter(|d| d.frame().is_some()).count(), 2);
        let tail = dec.finish();
        assert_eq!(tail, vec![Decoded::Error(FramingError { kind: FramingErrorKind::Truncated, offset: 22, len: 4 })]);
    }

    #[test]
    fn single_node_counting() {
        let sched = BusSchedule::new(20_000, vec![0]).unwrap();
        let (bytes, log) = run_emulated_bus(|_, _| Vec3::new(0.0, 0.0, 600.0), &sched, 0.1);
        assert_eq!(log.len(), 5);
        assert_eq!(bytes.len(), 5 * FRAME_LEN);
        assert_eq!(log.iter().map(|e| e.seq).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn seven_nodes_ordered_and_gapless() {
        let sched = BusSchedule::default();
        let (bytes, log) = run_emulated_bus(|n, t| Vec3::new(n as f64, (t % 1000) as f64 * 0.01, 600.0), &sched, 6.0);
        assert!(log.windows(2).all(|w| (w[0].t_us, w[0].node_id) < (w[1].t_us, w[1].node_id)));
        for node in 0..7u8 {
            let seqs: Vec<u8> = log.iter().filter(|e| e.node_id == node).map(|e| e.seq).collect();
            assert_eq!(seqs.len(), 300);
            assert!(seqs.windows(2).all(|w| w[1] == w[0].wrapping_add(1)));
        }
        let decoded: Vec<_> = decode_stream(&bytes).iter().filter_map(|d| d.frame().copied()).collect();
        assert_eq!(decoded.len(), log.len());
        for (frame, entry) in decoded.iter().zip(&log) {
            assert_eq!((frame.node_id, frame.seq, frame.flux_raw), (entry.node_id, entry.seq, entry.flux_raw));
        }
    }

    #[test]
    fn schedule_validation() {
        assert!(BusSchedule::new(0, vec![0]).is_err());
        assert!(BusSchedule::new(20_000, vec![0, 20_000]).is_err());
        assert!(BusSchedule::new(20_000, vec![]).is_err());
    }

    #[test]
    fn timestamp_recovery_across_wrap() {
        let sched = BusSchedule::default();
        let mut emu = BusEmulator::new(sched.clone());
        let mut rec = TimestampRecovery::new(sched);
        let mut now = 0u64;
        while now < 7_000_000 {
            now += 20_000;
            let bytes = emu.poll(now, |_, _| Vec3::zeros());
            let frames: Vec<_> = decode_stream(&bytes).iter().filter_map(|d| d.frame().copied()).collect();
            let times: Vec<_> = frames.iter().map(|f| rec.recover(f, now).unwrap()).collect();
            let log = emu.take_log();
            assert_eq!(times, log.iter().map(|e| e.t_us).collect::<Vec<_>>());
        }
        // late joiner: first frame seen after several wraps
        let mut rec = TimestampRecovery::new(BusSchedule::default());
        let t_true = 2_860_000 + 20_000 * 256 * 3;
        let frame = WireFrame { node_id: 0, seq: ((t_true / 20_000) % 256) as u8, flux_raw: [0; 3] };
        assert_eq!(rec.recover(&frame, t_true + 5_000), Some(t_true));
    }

    #[test]
    fn quantization_error_bounded() {
        let v = Vec3::new(12.34, -0.05, 3000.04);
        let q = WireFrame { node_id: 0, seq: 0, flux_raw: quantize_flux(&v).unwrap() }.flux();
        assert!((q - v).amax() <= 0.05 + 1e-9);
    }

    proptest! {
        #[test]
        fn encode_decode_identity(node in any::<u8>(), seq in any::<u8>(), raw in proptest::array::uniform3(-32767i16..=32767)) {
            let frame = WireFrame { node_id: node, seq, flux_raw: raw };
            let bytes = encode_frame(node, seq, &frame.flux()).unwrap();
            prop_assert_eq!(WireFrame::from_bytes(&bytes), Some(frame));
            prop_assert_eq!(crc16_ccitt_false(&bytes[..9]), crc_reference(&bytes[..9]));
        }

        #[test]
        fn quantization_within_half_lsb(v in proptest::array::uniform3(-3276.7..3276.7f64)) {
            let flux = Vec3::from(v);
            let q = WireFrame { node_id: 0, seq: 0, flux_raw: quantize_flux(&flux).unwrap() }.flux();
            prop_assert!((q - flux).amax() <= 0.05 + 1e-9);
        }
    }
}
