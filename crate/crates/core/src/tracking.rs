//! Blob detection on reconstructed frames, per-category popularity, and the
//! TPR/FPR/MR evaluation report.

use std::collections::VecDeque;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::analytic::ImageFrame;
use crate::geometry::CategoryLayout;
use crate::stats::{median, round6};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrackerConfig {
    /// Frames fused by the per-voxel median before thresholding.
    pub buffer_len: usize,
    pub threshold: f64,
    pub min_blob_area: usize,
    /// Blob-to-category proximity radius, voxels.
    pub eta2: f64,
    /// Initial frames averaged into the background model.
    pub background_frames: usize,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            buffer_len: 5,
            threshold: 0.1,
            min_blob_area: 20,
            eta2: 10.0,
            background_frames: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub pixel_count: usize,
    /// Inclusive `(u_min, v_min, u_max, v_max)`.
    pub bbox: (usize, usize, usize, usize),
    /// Mean voxel position `(u, v)`.
    pub centroid: (f64, f64),
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlobSet {
    pub blobs: Vec<Blob>,
}

impl BlobSet {
    pub fn len(&self) -> usize {
        self.blobs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blobs.is_empty()
    }
}

/// 8-connected components of the set voxels, each listed in scan order.
pub fn connected_components(mask: &[bool], width: usize, height: usize) -> Vec<Vec<usize>> {
    let mut seen = vec![false; mask.len()];
    let mut comps = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        queue.push_back(start);
        let mut comp = Vec::new();
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (u, v) = ((i % width) as isize, (i / width) as isize);
            for dv in -1..=1 {
                for du in -1..=1 {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < 0 || nv < 0 || nu >= width as isize || nv >= height as isize {
                        continue;
                    }
                    let j = nv as usize * width + nu as usize;
                    if mask[j] && !seen[j] {
                        seen[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        comp.sort_unstable();
        comps.push(comp);
    }
    comps
}

/// Blobs of the voxels at or above `threshold` in one image.
pub fn blobs_in_image(values: &[f64], width: usize, height: usize, threshold: f64, min_area: usize) -> BlobSet {
    let mask: Vec<bool> = values.iter().map(|&v| v >= threshold && v > 0.0).collect();
    let blobs = connected_components(&mask, width, height)
        .into_iter()
        .filter(|c| c.len() >= min_area.max(1))
        .map(|c| {
            let (mut su, mut sv) = (0.0, 0.0);
            let mut bbox = (usize::MAX, usize::MAX, 0, 0);
            for &i in &c {
                let (u, v) = (i % width, i / width);
                su += u as f64;
                sv += v as f64;
                bbox = (bbox.0.min(u), bbox.1.min(v), bbox.2.max(u), bbox.3.max(v));
            }
            let n = c.len() as f64;
            Blob {
                pixel_count: c.len(),
                bbox,
                centroid: (su / n, sv / n),
            }
        })
        .collect();
    BlobSet { blobs }
}

/// Per-voxel median of the buffered frames, thresholded and labeled. An underfull
/// buffer yields no blobs.
pub fn detect_blobs(frames: &[ImageFrame], cfg: &TrackerConfig) -> Result<BlobSet> {
    if frames.len() < cfg.buffer_len || frames.is_empty() {
        return Ok(BlobSet::default());
    }
    let recent = &frames[frames.len() - cfg.buffer_len..];
    let (w, h) = (recent[0].width_vox, recent[0].height_vox);
    if recent.iter().any(|f| f.width_vox != w || f.height_vox != h) {
        return Err(Error::InvalidParameter("buffered frames differ in size".into()));
    }
    let mut buf = vec![0.0; recent.len()];
    let fused: Vec<f64> = (0..w * h)
        .map(|i| {
            for (b, f) in buf.iter_mut().zip(recent) {
                *b = f.values[i];
            }
            median(&buf).expect("non-empty buffer")
        })
        .collect();
    Ok(blobs_in_image(&fused, w, h, cfg.threshold, cfg.min_blob_area))
}

/// Accumulated popularity count per category.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PopularityScores {
    pub counts: Vec<u64>,
}

impl PopularityScores {
    pub fn new(categories: usize) -> Self {
        Self {
            counts: vec![0; categories],
        }
    }
}

/// Categories with a blob centroid within `eta2` voxels of their centroid, each once.
pub fn categories_hit(blobs: &BlobSet, layout: &CategoryLayout, eta2: f64) -> Vec<usize> {
    (0..layout.len())
        .filter(|&j| {
            let (cu, cv) = layout.centroids[j];
            blobs
                .blobs
                .iter()
                .any(|b| (b.centroid.0 - cu).hypot(b.centroid.1 - cv) <= eta2)
        })
        .collect()
}

/// Increments every category near some blob; returns the categories credited.
pub fn update_popularity(
    blobs: &BlobSet,
    layout: &CategoryLayout,
    eta2: f64,
    scores: &mut PopularityScores,
) -> Vec<usize> {
    if scores.counts.len() < layout.len() {
        scores.counts.resize(layout.len(), 0);
    }
    let hit = categories_hit(blobs, layout, eta2);
    for &j in &hit {
        scores.counts[j] += 1;
    }
    hit
}

/// What the tracker saw on one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickScore {
    pub tick: usize,
    pub timestamp_s: f64,
    pub blobs: usize,
    pub categories: Vec<usize>,
    pub scores: Vec<u64>,
}

impl TickScore {
    pub fn to_json_line(&self) -> String {
        let rounded = TickScore {
            timestamp_s: round6(self.timestamp_s),
            ..self.clone()
        };
        serde_json::to_string(&rounded).expect("tick score serializes")
    }
}

/// Stateful per-shelf tracker: background model, frame buffer and popularity.
#[derive(Debug, Clone)]
pub struct Tracker {
    cfg: TrackerConfig,
    layout: CategoryLayout,
    background_sum: Vec<f64>,
    background_seen: usize,
    buffer: Vec<ImageFrame>,
    pub scores: PopularityScores,
    ticks: usize,
}

impl Tracker {
    pub fn new(cfg: TrackerConfig, layout: CategoryLayout) -> Self {
        let scores = PopularityScores::new(layout.len());
        Self {
            cfg,
            layout,
            background_sum: Vec::new(),
            background_seen: 0,
            buffer: Vec::new(),
            scores,
            ticks: 0,
        }
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.cfg
    }

    pub fn background_ready(&self) -> bool {
        self.background_seen >= self.cfg.background_frames
    }

    /// Feeds one frame. The first `background_frames` frames build the background and
    /// score nothing.
    pub fn push(&mut self, frame: ImageFrame) -> TickScore {
        self.ticks += 1;
        let mut score = TickScore {
            tick: self.ticks,
            timestamp_s: frame.timestamp_s,
            blobs: 0,
            categories: Vec::new(),
            scores: self.scores.counts.clone(),
        };
        if !self.background_ready() {
            if self.background_sum.is_empty() {
                self.background_sum = vec![0.0; frame.values.len()];
            }
            for (s, v) in self.background_sum.iter_mut().zip(&frame.values) {
                *s += v;
            }
            self.background_seen += 1;
            return score;
        }
        let n = self.background_seen.max(1) as f64;
        let values = frame
            .values
            .iter()
            .zip(&self.background_sum)
            .map(|(&v, &b)| (v - b / n).max(0.0))
            .collect();
        self.buffer.push(ImageFrame { values, ..frame });
        if self.buffer.len() > self.cfg.buffer_len {
            self.buffer.remove(0);
        }
        let blobs = detect_blobs(&self.buffer, &self.cfg).expect("buffer frames share one size");
        score.blobs = blobs.len();
        score.categories = update_popularity(&blobs, &self.layout, self.cfg.eta2, &mut self.scores);
        score.scores = self.scores.counts.clone();
        score
    }
}

/// One scenario's detection rates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub scenario: String,
    pub k_cw: usize,
    pub training_users: usize,
    pub tpr: f64,
    pub fpr: f64,
    pub mr: f64,
    pub windows: usize,
    /// Tested categories, zero-based.
    pub tested: Vec<usize>,
}

/// TPR: windows in which every tested category scored. FPR: windows in which some
/// untested category scored. MR = 1 - TPR.
pub fn evaluate(
    scenario: &str,
    k_cw: usize,
    training_users: usize,
    tested: &[usize],
    window_hits: &[Vec<usize>],
) -> Result<EvalRow> {
    if window_hits.is_empty() {
        return Err(Error::NoWindows);
    }
    let total = window_hits.len() as f64;
    let tp = window_hits
        .iter()
        .filter(|hits| tested.iter().all(|t| hits.contains(t)))
        .count() as f64;
    let fp = window_hits
        .iter()
        .filter(|hits| hits.iter().any(|h| !tested.contains(h)))
        .count() as f64;
    let tpr = tp / total;
    Ok(EvalRow {
        scenario: scenario.to_string(),
        k_cw,
        training_users,
        tpr,
        fpr: fp / total,
        mr: 1.0 - tpr,
        windows: window_hits.len(),
        tested: tested.to_vec(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

pub const REPORT_HEADER: &str = "scenario,k_cw,training_users,tpr,fpr,mr";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6}\n",
                r.scenario, r.k_cw, r.training_users, r.tpr, r.fpr, r.mr
            ));
        }
        out
    }

    pub fn mean_tpr(&self) -> f64 {
        self.rows.iter().map(|r| r.tpr).sum::<f64>() / self.rows.len().max(1) as f64
    }

    pub fn mean_fpr(&self) -> f64 {
        self.rows.iter().map(|r| r.fpr).sum::<f64>() / self.rows.len().max(1) as f64
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.scenario.len()).max().unwrap_or(0).max(8);
        writeln!(
            f,
            "{:<width$}  {:>4}  {:>5}  {:>7}  {:>6}  {:>6}  {:>6}",
            "scenario", "k_cw", "users", "windows", "TPR", "FPR", "MR"
        )?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:>4}  {:>5}  {:>7}  {:>6.3}  {:>6.3}  {:>6.3}",
                r.scenario, r.k_cw, r.training_users, r.windows, r.tpr, r.fpr, r.mr
            )?;
        }
        Ok(())
    }
}
