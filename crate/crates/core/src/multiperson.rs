//! Moving-window imaging for several people at once.
//!
//! Each per-antenna difference vector is split into `k_x - k_cw + 1` variants that keep
//! the tags of `k_cw` adjacent columns and replace every other tag with its
//! no-obstruction level. Every variant is imaged by the network; the window images are
//! merged, filtered, and averaged over antennas.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::analytic::ImageFrame;
use crate::dnn::{normalize_input, rasterize_label, MlpEnsemble, TrainingSet};
use crate::geometry::{Layout, TagGrid};
use crate::preprocess::{CalibrationProfile, RssDifferenceVector};
use crate::stats::median;
use crate::{Error, Result};

/// How the per-window images of one antenna are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMerge {
    /// Per-voxel median across windows.
    Median,
    /// Per-voxel mean across windows.
    Mean,
    /// Per-voxel maximum across windows.
    Max,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    /// Impact width: tag columns one person noticeably affects.
    pub k_cw: usize,
    pub median_kernel: usize,
    pub average_kernel: usize,
    pub merge: WindowMerge,
    /// Draw out-of-window values from the no-obstruction Gaussian instead of `2σ`.
    pub sample_outside: bool,
    /// When set, a window's output only counts within its own columns widened by this
    /// many voxels, and each voxel merges only the windows that reach it.
    pub reach_margin_vox: Option<f64>,
    pub seed: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            k_cw: 6,
            median_kernel: 3,
            average_kernel: 3,
            merge: WindowMerge::Mean,
            sample_outside: false,
            reach_margin_vox: Some(crate::dnn::DEFAULT_LABEL_SEMI_U),
            seed: 0,
        }
    }
}

impl WindowConfig {
    pub fn validate(&self, k_x: usize) -> Result<()> {
        if self.k_cw == 0 || self.k_cw > k_x {
            return Err(Error::InvalidParameter(format!("k_cw = {} outside 1..={k_x}", self.k_cw)));
        }
        if self.median_kernel.is_multiple_of(2) || self.average_kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter("filter kernels must be odd".into()));
        }
        Ok(())
    }

    pub fn window_count(&self, k_x: usize) -> usize {
        k_x + 1 - self.k_cw
    }
}

/// Out-of-window replacement levels for one antenna: `2σ_{k,a}` per tag.
fn outside_levels(profile: &CalibrationProfile, antenna: usize, k_n: usize) -> Result<Vec<f64>> {
    let sigma = profile
        .diff_std
        .get(antenna)
        .ok_or(Error::MissingDiffStats { tag: 0, antenna })?;
    if sigma.len() < k_n {
        return Err(Error::MissingDiffStats {
            tag: sigma.len(),
            antenna,
        });
    }
    Ok(sigma[..k_n].iter().map(|s| 2.0 * s).collect())
}

/// The `k_x - k_cw + 1` masked variants of `y`, window `i` keeping columns
/// `[i, i + k_cw)`.
pub fn window_vectors(
    y: &RssDifferenceVector,
    profile: &CalibrationProfile,
    grid: &TagGrid,
    cfg: &WindowConfig,
) -> Result<Vec<RssDifferenceVector>> {
    cfg.validate(grid.k_x)?;
    let k_n = grid.len();
    if y.values.len() != k_n {
        return Err(Error::DimensionMismatch {
            context: "difference vector length (K)",
            expected: k_n,
            actual: y.values.len(),
        });
    }
    let fill = outside_levels(profile, y.antenna_id, k_n)?;
    let mut rng = cfg.sample_outside.then(|| {
        let mut r = ChaCha8Rng::seed_from_u64(cfg.seed ^ y.timestamp_s.to_bits());
        r.set_stream(y.antenna_id as u64);
        r
    });
    let windows = (0..cfg.window_count(grid.k_x))
        .map(|i| {
            let values = (0..k_n)
                .map(|k| {
                    let c = grid.column_of(k);
                    if c >= i && c < i + cfg.k_cw {
                        y.values[k]
                    } else if let Some(rng) = rng.as_mut() {
                        let mu = profile.diff_mean[y.antenna_id][k];
                        let sd = profile.diff_std[y.antenna_id][k];
                        match Normal::new(mu, sd) {
                            Ok(n) => n.sample(rng).abs(),
                            Err(_) => fill[k],
                        }
                    } else {
                        fill[k]
                    }
                })
                .collect();
            RssDifferenceVector {
                antenna_id: y.antenna_id,
                values,
                timestamp_s: y.timestamp_s,
            }
        })
        .collect();
    Ok(windows)
}

/// Window filter over a `width x height` image with kernels clipped at the borders.
fn filter2d(values: &[f64], width: usize, height: usize, kernel: usize, reduce: impl Fn(&mut Vec<f64>) -> f64) -> Vec<f64> {
    let h = kernel / 2;
    let mut buf = Vec::with_capacity(kernel * kernel);
    let mut out = vec![0.0; values.len()];
    for v in 0..height {
        for u in 0..width {
            buf.clear();
            for vv in v.saturating_sub(h)..=(v + h).min(height - 1) {
                for uu in u.saturating_sub(h)..=(u + h).min(width - 1) {
                    buf.push(values[vv * width + uu]);
                }
            }
            out[v * width + u] = reduce(&mut buf);
        }
    }
    out
}

pub fn median_filter2d(values: &[f64], width: usize, height: usize, kernel: usize) -> Vec<f64> {
    filter2d(values, width, height, kernel, |b| median(b).unwrap_or(0.0))
}

pub fn mean_filter2d(values: &[f64], width: usize, height: usize, kernel: usize) -> Vec<f64> {
    filter2d(values, width, height, kernel, |b| b.iter().sum::<f64>() / b.len() as f64)
}

/// Voxel-column interval `[lo, hi]` a window may paint: the voxels of the columns whose
/// people it is trained to show, widened by `margin`.
fn window_reach(window: usize, k_cw: usize, p_x: usize, margin: f64) -> (f64, f64) {
    let p = p_x as f64;
    (
        (window as f64 - 0.5) * p - 0.5 - margin,
        ((window + k_cw) as f64 - 0.5) * p - 0.5 + margin,
    )
}

/// Per-voxel merge of the window images (columns of `images`). With reaches, a voxel
/// sees only the windows that reach it, and is 0 if none does.
fn merge_windows(images: &Mat<f64>, merge: WindowMerge, width: usize, reaches: Option<&[(f64, f64)]>) -> Vec<f64> {
    let (n, w) = (images.nrows(), images.ncols());
    let mut buf = Vec::with_capacity(w);
    (0..n)
        .map(|i| {
            let u = (i % width) as f64;
            buf.clear();
            for j in 0..w {
                if reaches.is_none_or(|r| r[j].0 <= u && u <= r[j].1) {
                    buf.push(images[(i, j)]);
                }
            }
            if buf.is_empty() {
                return 0.0;
            }
            match merge {
                WindowMerge::Median => median(&buf).unwrap_or(0.0),
                WindowMerge::Mean => buf.iter().sum::<f64>() / buf.len() as f64,
                WindowMerge::Max => buf.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
            }
        })
        .collect()
}

/// Multi-person frame from one difference vector per antenna.
pub fn image_multiperson(
    ys: &[RssDifferenceVector],
    ensemble: &MlpEnsemble,
    profile: &CalibrationProfile,
    layout: &Layout,
    cfg: &WindowConfig,
    max_rss: f64,
    timestamp_s: f64,
) -> Result<ImageFrame> {
    if ys.is_empty() {
        return Err(Error::InvalidParameter("at least one antenna is required".into()));
    }
    let (width, height) = (layout.image_width(), layout.image_height());
    let n = width * height;
    let mut acc = vec![0.0; n];
    for y in ys {
        let windows = window_vectors(y, profile, &layout.grid, cfg)?;
        let inputs = windows
            .iter()
            .map(|w| normalize_input(w, max_rss))
            .collect::<Result<Vec<_>>>()?;
        let x = Mat::from_fn(layout.num_tags(), inputs.len(), |i, j| inputs[j][i]);
        let preds = ensemble.predict_batch(&x)?;
        if preds.nrows() != n {
            return Err(Error::DimensionMismatch {
                context: "network output size (N)",
                expected: n,
                actual: preds.nrows(),
            });
        }
        let reaches: Option<Vec<(f64, f64)>> = cfg
            .reach_margin_vox
            .map(|m| (0..preds.ncols()).map(|j| window_reach(j, cfg.k_cw, layout.p_x, m)).collect());
        let merged = merge_windows(&preds, cfg.merge, width, reaches.as_deref());
        let filtered = mean_filter2d(
            &median_filter2d(&merged, width, height, cfg.median_kernel),
            width,
            height,
            cfg.average_kernel,
        );
        for (a, v) in acc.iter_mut().zip(filtered) {
            *a += v;
        }
    }
    let scale = 1.0 / ys.len() as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    ImageFrame::normalized(width, height, acc, timestamp_s)
}

/// Label geometry for training targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelShape {
    /// Ellipse semi-axis along the shelf, voxels.
    pub semi_u: f64,
    /// Ellipse semi-axis across the shelf, voxels; non-positive means half the grid.
    pub semi_v: f64,
}

impl Default for LabelShape {
    fn default() -> Self {
        Self {
            semi_u: crate::dnn::DEFAULT_LABEL_SEMI_U,
            semi_v: 0.0,
        }
    }
}

/// Label image with one ellipse per person, centered on the given tag columns.
pub fn person_label(layout: &Layout, columns: &[f64], shape: &LabelShape) -> Result<Vec<f64>> {
    let (width, height) = (layout.image_width(), layout.image_height());
    let semi_v = if shape.semi_v > 0.0 { shape.semi_v } else { height as f64 / 2.0 };
    let mut label = vec![0.0f64; width * height];
    let v = (height as f64 - 1.0) / 2.0;
    for &c in columns {
        let u = (c * layout.p_x as f64 - 0.5).clamp(0.0, width as f64 - 1.0);
        let one = rasterize_label((u, v), (shape.semi_u, semi_v), width, height)?;
        for (l, o) in label.iter_mut().zip(one) {
            *l = f64::max(*l, o);
        }
    }
    Ok(label)
}

/// Expands one observed vector into its window variants. A window's label shows the
/// people whose center column falls inside it; the others are left to their own
/// windows.
#[allow(clippy::too_many_arguments)]
pub fn expand_training_sample(
    set: &mut TrainingSet,
    y: &RssDifferenceVector,
    person_columns: &[f64],
    profile: &CalibrationProfile,
    layout: &Layout,
    cfg: &WindowConfig,
    shape: &LabelShape,
    max_rss: f64,
) -> Result<()> {
    let windows = window_vectors(y, profile, &layout.grid, cfg)?;
    for (i, w) in windows.iter().enumerate() {
        let lo = i as f64 - 0.5;
        let hi = (i + cfg.k_cw) as f64 - 0.5;
        let inside: Vec<f64> = person_columns.iter().copied().filter(|&c| c >= lo && c < hi).collect();
        set.push(normalize_input(w, max_rss)?, person_label(layout, &inside, shape)?);
    }
    Ok(())
}

/// No-obstruction sample for one antenna: every tag at its `2σ` level, zero label.
pub fn empty_training_sample(
    set: &mut TrainingSet,
    profile: &CalibrationProfile,
    layout: &Layout,
    antenna: usize,
    max_rss: f64,
) -> Result<()> {
    let k_n = layout.num_tags();
    let y = RssDifferenceVector {
        antenna_id: antenna,
        values: outside_levels(profile, antenna, k_n)?,
        timestamp_s: 0.0,
    };
    set.push(normalize_input(&y, max_rss)?, vec![0.0; layout.num_voxels()]);
    Ok(())
}
