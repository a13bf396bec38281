//! Calibration and monitoring-mode preprocessing.
//!
//! Per antenna, the monitor turns the latest `N_mon` reads into a `K`-vector of absolute
//! RSS changes. Stages, in order: moving median then moving average over each
//! (channel, tag) series; discard samples whose phase stayed within `π/4` of the
//! calibrated phase; median per cell (calibrated value for empty cells); absolute
//! difference from calibration; median across the channels that kept samples.

use std::collections::VecDeque;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::channel_sim::TagRead;
use crate::geometry::{AntennaArray, TagGrid};
use crate::stats::{median, round6};
use crate::{Error, Result};

pub const SMOOTH_WINDOW: usize = 5;
/// Reads kept in the monitoring buffer.
pub const MONITOR_CAPACITY: usize = 2000;
/// Tick period of the monitoring clock, seconds of read time.
pub const TICK_PERIOD_S: f64 = 1.0;
/// Minimum phase change for a sample to count as obstructed.
pub const PHASE_THRESHOLD_RAD: f64 = PI / 4.0;
/// Default power-gate threshold on the squared L2 norm of `y_rss`.
pub const POWER_THRESHOLD: f64 = 10.0;

/// Half-width of the window centered at `i`, shrunk symmetrically near the edges.
fn half_width(i: usize, len: usize, window: usize) -> usize {
    (window / 2).min(i).min(len - 1 - i)
}

pub fn moving_median(series: &[f64], window: usize) -> Vec<f64> {
    let mut buf = Vec::with_capacity(window);
    (0..series.len())
        .map(|i| {
            let h = half_width(i, series.len(), window);
            buf.clear();
            buf.extend_from_slice(&series[i - h..=i + h]);
            buf.sort_by(f64::total_cmp);
            buf[buf.len() / 2]
        })
        .collect()
}

pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    (0..series.len())
        .map(|i| {
            let h = half_width(i, series.len(), window);
            let s = &series[i - h..=i + h];
            s.iter().sum::<f64>() / s.len() as f64
        })
        .collect()
}

/// Moving median followed by moving average, both of width 5. Output length equals
/// input length.
pub fn smooth(series: &[f64]) -> Vec<f64> {
    moving_average(&moving_median(series, SMOOTH_WINDOW), SMOOTH_WINDOW)
}

/// Background reference captured with nothing in front of the shelf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationProfile {
    pub num_antennas: usize,
    pub num_channels: usize,
    pub num_tags: usize,
    /// `[antenna][channel][tag]`, dBm.
    pub rss_cal: Vec<Vec<Vec<f64>>>,
    /// `[antenna][channel][tag]`, radians.
    pub phase_cal: Vec<Vec<Vec<f64>>>,
    /// Mean of no-obstruction RSS differences, `[antenna][tag]`.
    pub diff_mean: Vec<Vec<f64>>,
    /// Standard deviation of no-obstruction RSS differences, `[antenna][tag]`.
    pub diff_std: Vec<Vec<f64>>,
    /// Pooled variance of calibration RSS about the calibrated medians.
    pub sigma_y_cal: f64,
}

impl CalibrationProfile {
    pub fn validate(&self) -> Result<()> {
        let (a, f, k) = (self.num_antennas, self.num_channels, self.num_tags);
        let cube_ok = |m: &Vec<Vec<Vec<f64>>>| {
            m.len() == a && m.iter().all(|ch| ch.len() == f && ch.iter().all(|row| row.len() == k))
        };
        let plane_ok = |m: &Vec<Vec<f64>>| m.len() == a && m.iter().all(|row| row.len() == k);
        if !cube_ok(&self.rss_cal) || !cube_ok(&self.phase_cal) {
            return Err(Error::Config("calibration matrices do not match the declared shape".into()));
        }
        if !plane_ok(&self.diff_mean) || !plane_ok(&self.diff_std) {
            return Err(Error::Config("calibration statistics do not match the declared shape".into()));
        }
        if self.diff_std.iter().flatten().any(|&s| !(s >= 0.0)) {
            return Err(Error::Config("negative difference deviation".into()));
        }
        Ok(())
    }

    /// Checks the profile against a deployment: same tag, antenna and channel counts.
    pub fn check_compatible(&self, num_tags: usize, num_antennas: usize, num_channels: usize) -> Result<()> {
        let check = |what: &'static str, expected: usize, actual: usize| {
            if expected == actual {
                Ok(())
            } else {
                Err(Error::DimensionMismatch {
                    context: what,
                    expected,
                    actual,
                })
            }
        };
        check("calibration tag count (K)", num_tags, self.num_tags)?;
        check("calibration antenna count", num_antennas, self.num_antennas)?;
        check("calibration channel count (F)", num_channels, self.num_channels)
    }

    /// JSON with every real rounded to 6 decimal places.
    pub fn to_json_string(&self) -> String {
        let cube = |m: &Vec<Vec<Vec<f64>>>| -> Vec<Vec<Vec<f64>>> {
            m.iter()
                .map(|ch| ch.iter().map(|row| row.iter().map(|&x| round6(x)).collect()).collect())
                .collect()
        };
        let plane = |m: &Vec<Vec<f64>>| -> Vec<Vec<f64>> {
            m.iter().map(|row| row.iter().map(|&x| round6(x)).collect()).collect()
        };
        let rounded = CalibrationProfile {
            rss_cal: cube(&self.rss_cal),
            phase_cal: cube(&self.phase_cal),
            diff_mean: plane(&self.diff_mean),
            diff_std: plane(&self.diff_std),
            sigma_y_cal: round6(self.sigma_y_cal),
            ..self.clone()
        };
        serde_json::to_string(&rounded).expect("calibration serializes")
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let p: Self = serde_json::from_str(text)?;
        p.validate()?;
        Ok(p)
    }

    /// `2σ` replacement values for one antenna, used outside the moving window.
    pub fn two_sigma(&self, antenna: usize) -> &[f64] {
        &self.diff_std[antenna]
    }
}

/// Signed angular difference folded into `(-π, π]`.
pub fn phase_offset(phase: f64, reference: f64) -> f64 {
    let d = (phase - reference).rem_euclid(2.0 * PI);
    if d > PI {
        d - 2.0 * PI
    } else {
        d
    }
}

/// Circular median-of-smoothed phase: the series is smoothed as offsets from its first
/// sample so readings straddling 0 and 2π stay together.
fn calibrated_phase(series: &[f64]) -> f64 {
    let reference = series[0];
    let offsets: Vec<f64> = series.iter().map(|&p| phase_offset(p, reference)).collect();
    (reference + median(&smooth(&offsets)).expect("non-empty")).rem_euclid(2.0 * PI)
}

fn check_read(r: &TagRead, k: usize, a: usize, f: usize) -> Result<()> {
    if r.tag_id >= k {
        return Err(Error::IndexOutOfRange {
            what: "tag",
            index: r.tag_id,
            len: k,
        });
    }
    if r.antenna_id >= a {
        return Err(Error::IndexOutOfRange {
            what: "antenna",
            index: r.antenna_id,
            len: a,
        });
    }
    if r.channel_index >= f {
        return Err(Error::IndexOutOfRange {
            what: "channel",
            index: r.channel_index,
            len: f,
        });
    }
    Ok(())
}

/// Groups reads into per-(antenna, channel, tag) series, preserving read order.
fn group_series(reads: &[TagRead], a: usize, f: usize, k: usize) -> Vec<Vec<usize>> {
    let mut cells = vec![Vec::new(); a * f * k];
    for (i, r) in reads.iter().enumerate() {
        cells[(r.antenna_id * f + r.channel_index) * k + r.tag_id].push(i);
    }
    cells
}

/// Builds the calibration profile from an obstruction-free stream.
pub fn run_calibration(
    reads: &[TagRead],
    grid: &TagGrid,
    array: &AntennaArray,
    num_channels: usize,
) -> Result<CalibrationProfile> {
    let (a_n, f_n, k_n) = (array.len(), num_channels, grid.len());
    for r in reads {
        check_read(r, k_n, a_n, f_n)?;
    }
    let mut ordered = reads.to_vec();
    ordered.sort_by(|x, y| x.timestamp_s.total_cmp(&y.timestamp_s));
    let cells = group_series(&ordered, a_n, f_n, k_n);

    let mut missing = Vec::new();
    let mut rss_cal = vec![vec![vec![0.0; k_n]; f_n]; a_n];
    let mut phase_cal = vec![vec![vec![0.0; k_n]; f_n]; a_n];
    for a in 0..a_n {
        for f in 0..f_n {
            for k in 0..k_n {
                let idx = &cells[(a * f_n + f) * k_n + k];
                if idx.is_empty() {
                    missing.push((a, f, k));
                    continue;
                }
                let rss: Vec<f64> = idx.iter().map(|&i| ordered[i].rss_dbm).collect();
                let phase: Vec<f64> = idx.iter().map(|&i| ordered[i].phase_rad).collect();
                rss_cal[a][f][k] = median(&smooth(&rss)).expect("non-empty");
                phase_cal[a][f][k] = calibrated_phase(&phase);
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::CalibrationIncomplete { missing });
    }

    // no-obstruction spread of per-read differences from the calibrated medians
    let mut sums = vec![vec![(0usize, 0.0f64, 0.0f64); k_n]; a_n];
    for r in &ordered {
        let d = r.rss_dbm - rss_cal[r.antenna_id][r.channel_index][r.tag_id];
        let s = &mut sums[r.antenna_id][r.tag_id];
        s.0 += 1;
        s.1 += d;
        s.2 += d * d;
    }
    let mut diff_mean = vec![vec![0.0; k_n]; a_n];
    let mut diff_std = vec![vec![0.0; k_n]; a_n];
    let (mut pooled_n, mut pooled_sq) = (0usize, 0.0);
    for a in 0..a_n {
        for k in 0..k_n {
            let (n, s, sq) = sums[a][k];
            let mean = s / n as f64;
            diff_mean[a][k] = mean;
            diff_std[a][k] = if n > 1 {
                ((sq - n as f64 * mean * mean).max(0.0) / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            pooled_n += n;
            pooled_sq += sq;
        }
    }
    let sigma_y_cal = if pooled_n > 0 { pooled_sq / pooled_n as f64 } else { 0.0 };

    Ok(CalibrationProfile {
        num_antennas: a_n,
        num_channels: f_n,
        num_tags: k_n,
        rss_cal,
        phase_cal,
        diff_mean,
        diff_std,
        sigma_y_cal,
    })
}

/// Ring buffer of the latest monitoring reads, in timestamp order.
#[derive(Debug, Clone)]
pub struct MonitorBuffer {
    capacity: usize,
    reads: VecDeque<TagRead>,
}

impl MonitorBuffer {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity: capacity.max(1),
            reads: VecDeque::with_capacity(capacity),
        }
    }

    pub fn push(&mut self, read: TagRead) -> Result<()> {
        if let Some(last) = self.reads.back() {
            if read.timestamp_s < last.timestamp_s {
                return Err(Error::InvalidParameter(format!(
                    "read at {} s arrived after {} s",
                    read.timestamp_s, last.timestamp_s
                )));
            }
        }
        if self.reads.len() == self.capacity {
            self.reads.pop_front();
        }
        self.reads.push_back(read);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.reads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reads.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn iter(&self) -> impl Iterator<Item = &TagRead> {
        self.reads.iter()
    }
}

impl Default for MonitorBuffer {
    fn default() -> Self {
        Self::new(MONITOR_CAPACITY)
    }
}

/// Per-antenna `F x K` monitored RSS, with a flag marking the cells backed by at least
/// one phase-filtered sample (the rest hold the calibrated value).
#[derive(Debug, Clone, PartialEq)]
pub struct MonitoredMatrix {
    pub antenna_id: usize,
    /// `[channel][tag]`, dBm.
    pub rss: Vec<Vec<f64>>,
    pub observed: Vec<Vec<bool>>,
}

impl MonitoredMatrix {
    /// A matrix whose every cell counts as observed.
    pub fn fully_observed(antenna_id: usize, rss: Vec<Vec<f64>>) -> Self {
        let observed = rss.iter().map(|row| vec![true; row.len()]).collect();
        Self {
            antenna_id,
            rss,
            observed,
        }
    }
}

/// Monitored RSS matrix for one antenna from the current buffer contents.
pub fn tick(buffer: &MonitorBuffer, profile: &CalibrationProfile, antenna: usize) -> Result<MonitoredMatrix> {
    let (f_n, k_n) = (profile.num_channels, profile.num_tags);
    if antenna >= profile.num_antennas {
        return Err(Error::IndexOutOfRange {
            what: "antenna",
            index: antenna,
            len: profile.num_antennas,
        });
    }
    let reads: Vec<TagRead> = buffer.iter().filter(|r| r.antenna_id == antenna).copied().collect();
    for r in &reads {
        check_read(r, k_n, profile.num_antennas, f_n)?;
    }
    let cal_rss = &profile.rss_cal[antenna];
    let cal_phase = &profile.phase_cal[antenna];
    let mut rss = cal_rss.clone();
    let mut observed = vec![vec![false; k_n]; f_n];

    let mut cells = vec![Vec::new(); f_n * k_n];
    for (i, r) in reads.iter().enumerate() {
        cells[r.channel_index * k_n + r.tag_id].push(i);
    }
    for f in 0..f_n {
        for k in 0..k_n {
            let idx = &cells[f * k_n + k];
            if idx.is_empty() {
                continue;
            }
            let series_rss: Vec<f64> = idx.iter().map(|&i| reads[i].rss_dbm).collect();
            // offsets from the calibrated phase, folded once; no multi-turn unwrapping
            let series_phase: Vec<f64> = idx
                .iter()
                .map(|&i| phase_offset(reads[i].phase_rad, cal_phase[f][k]))
                .collect();
            let s_rss = smooth(&series_rss);
            let s_phase = smooth(&series_phase);
            let survivors: Vec<f64> = s_rss
                .iter()
                .zip(&s_phase)
                .filter(|(_, &p)| p.abs() >= PHASE_THRESHOLD_RAD)
                .map(|(&r, _)| r)
                .collect();
            if let Some(m) = median(&survivors) {
                rss[f][k] = m;
                observed[f][k] = true;
            }
        }
    }
    Ok(MonitoredMatrix {
        antenna_id: antenna,
        rss,
        observed,
    })
}

/// The filtered `K`-vector of absolute RSS changes for one antenna.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RssDifferenceVector {
    pub antenna_id: usize,
    pub values: Vec<f64>,
    pub timestamp_s: f64,
}

impl RssDifferenceVector {
    pub fn zeros(antenna_id: usize, k: usize, timestamp_s: f64) -> Self {
        Self {
            antenna_id,
            values: vec![0.0; k],
            timestamp_s,
        }
    }

    /// Squared L2 norm.
    pub fn power(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Per-tag median over channels of `|rss_cal - monitored|`, taken over the channels that
/// kept at least one sample; tags with none contribute 0.
pub fn freq_median(profile: &CalibrationProfile, monitored: &MonitoredMatrix) -> Result<RssDifferenceVector> {
    let cal = profile
        .rss_cal
        .get(monitored.antenna_id)
        .ok_or(Error::IndexOutOfRange {
            what: "antenna",
            index: monitored.antenna_id,
            len: profile.num_antennas,
        })?;
    if monitored.rss.len() != cal.len() {
        return Err(Error::DimensionMismatch {
            context: "monitored channel count",
            expected: cal.len(),
            actual: monitored.rss.len(),
        });
    }
    let k_n = profile.num_tags;
    if monitored.rss.iter().any(|row| row.len() != k_n) || monitored.observed.len() != cal.len() {
        return Err(Error::DimensionMismatch {
            context: "monitored tag count",
            expected: k_n,
            actual: monitored.rss.first().map_or(0, Vec::len),
        });
    }
    let mut diffs = Vec::with_capacity(cal.len());
    let values = (0..k_n)
        .map(|k| {
            diffs.clear();
            for f in 0..cal.len() {
                if monitored.observed[f][k] {
                    diffs.push((cal[f][k] - monitored.rss[f][k]).abs());
                }
            }
            median(&diffs).unwrap_or(0.0)
        })
        .collect();
    Ok(RssDifferenceVector {
        antenna_id: monitored.antenna_id,
        values,
        timestamp_s: 0.0,
    })
}

/// True when the vector carries enough power to be worth imaging.
pub fn power_gate(y: &RssDifferenceVector, threshold: f64) -> bool {
    y.power() >= threshold
}

/// Output of one monitoring tick: one difference vector per antenna.
#[derive(Debug, Clone, PartialEq)]
pub struct TickOutput {
    pub index: usize,
    pub timestamp_s: f64,
    pub vectors: Vec<RssDifferenceVector>,
}

/// Streaming monitor: buffers reads and emits a tick every `TICK_PERIOD_S` of read time.
#[derive(Debug, Clone)]
pub struct Monitor<'a> {
    profile: &'a CalibrationProfile,
    buffer: MonitorBuffer,
    period: f64,
    next_tick: usize,
    pending: bool,
}

impl<'a> Monitor<'a> {
    pub fn new(profile: &'a CalibrationProfile, capacity: usize) -> Self {
        Self {
            profile,
            buffer: MonitorBuffer::new(capacity),
            period: TICK_PERIOD_S,
            next_tick: 1,
            pending: false,
        }
    }

    fn boundary(&self) -> f64 {
        self.next_tick as f64 * self.period
    }

    fn emit(&mut self) -> Result<TickOutput> {
        let t = self.boundary();
        let vectors = (0..self.profile.num_antennas)
            .map(|a| {
                let m = tick(&self.buffer, self.profile, a)?;
                let mut y = freq_median(self.profile, &m)?;
                y.timestamp_s = t;
                Ok(y)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = TickOutput {
            index: self.next_tick,
            timestamp_s: t,
            vectors,
        };
        self.next_tick += 1;
        self.pending = false;
        Ok(out)
    }

    /// Adds a read; returns the ticks whose boundaries it crossed.
    pub fn push(&mut self, read: TagRead) -> Result<Vec<TickOutput>> {
        let mut out = Vec::new();
        while read.timestamp_s >= self.boundary() {
            out.push(self.emit()?);
        }
        self.buffer.push(read)?;
        self.pending = true;
        Ok(out)
    }

    /// Emits the final partial tick, if reads arrived since the last one.
    pub fn finish(&mut self) -> Result<Option<TickOutput>> {
        if self.pending {
            self.emit().map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn buffer(&self) -> &MonitorBuffer {
        &self.buffer
    }
}

/// Runs a whole read stream through the monitor.
pub fn monitor_stream(
    reads: impl IntoIterator<Item = TagRead>,
    profile: &CalibrationProfile,
    capacity: usize,
) -> Result<Vec<TickOutput>> {
    let mut monitor = Monitor::new(profile, capacity);
    let mut ticks = Vec::new();
    for r in reads {
        ticks.extend(monitor.push(r)?);
    }
    ticks.extend(monitor.finish()?);
    Ok(ticks)
}
