//! Regularized least-squares imaging.
//!
//! Each link's RSS change is turned into a change of path-loss exponent, which weights
//! the voxels inside that link's ellipsoid. The image solves
//! `x = (WᵀW + σ_N·C_x⁻¹ + α(D_XᵀD_X + D_YᵀD_Y))⁻¹ Wᵀ y` per antenna and plane.

use std::io::Write as _;
use std::path::Path;

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::{Mat, Side};
use serde::{Deserialize, Serialize};

use crate::geometry::{fresnel_width, AntennaArray, ImagePlane, TagGrid};
use crate::preprocess::RssDifferenceVector;
use crate::stats::round6;
use crate::{Error, Result};

/// Diagonal loading applied to the correlation prior before inversion.
pub const CORR_CONDITIONING: f64 = 1e-8;

/// Change of path-loss exponent implied by an RSS change of `y_k` dB on a link of
/// length `d`.
pub fn delta_beta(y_k: f64, lambda_avg: f64, d: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::SingularGeometry { distance: d });
    }
    let log_term = 10.0 * (lambda_avg / (4.0 * std::f64::consts::PI * d)).log10();
    if log_term == 0.0 || !log_term.is_finite() {
        return Err(Error::SingularGeometry { distance: d });
    }
    Ok(y_k / log_term)
}

/// `K x N` link weights for one antenna and one plane.
#[derive(Debug, Clone)]
pub struct WeightMatrix {
    pub entries: Mat<f64>,
    pub theta0: f64,
    pub delta_beta: Vec<f64>,
}

impl WeightMatrix {
    pub fn nrows(&self) -> usize {
        self.entries.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.entries.ncols()
    }
}

/// Weights `1/d^(4-Δβ_k)` for the voxels inside link `k`'s ellipsoid, whose width is
/// evaluated at each voxel.
pub fn build_weights(
    grid: &TagGrid,
    array: &AntennaArray,
    plane: &ImagePlane,
    y: &RssDifferenceVector,
    lambda_avg: f64,
    theta0: f64,
) -> Result<WeightMatrix> {
    let k_n = grid.len();
    if y.values.len() != k_n {
        return Err(Error::DimensionMismatch {
            context: "difference vector length (K)",
            expected: k_n,
            actual: y.values.len(),
        });
    }
    let antenna = array.position(y.antenna_id)?;
    let mut entries = Mat::zeros(k_n, plane.len());
    let mut betas = Vec::with_capacity(k_n);
    for k in 0..k_n {
        let tag = grid.position(k)?;
        let d = tag.distance(&antenna);
        let db = delta_beta(y.values[k], lambda_avg, d)?;
        let w = d.powf(-(4.0 - db));
        for (j, voxel) in plane.voxel_centers.iter().enumerate() {
            let d1 = voxel.distance(&tag);
            let d2 = voxel.distance(&antenna);
            let theta = fresnel_width(theta0, lambda_avg, d1, d2)?;
            if d1 + d2 < d + theta {
                entries[(k, j)] = w;
            }
        }
        betas.push(db);
    }
    Ok(WeightMatrix {
        entries,
        theta0,
        delta_beta: betas,
    })
}

/// Tunables of the analytic imager.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ImagingConfig {
    pub alpha: f64,
    pub theta0: f64,
    pub c_n: f64,
    pub c_x: f64,
    /// Correlation length of the pixel prior, in voxel pitches.
    pub delta: f64,
}

impl Default for ImagingConfig {
    fn default() -> Self {
        Self {
            alpha: 15.0,
            theta0: 1.0,
            c_n: 1.0,
            c_x: 1.0,
            delta: 3.0,
        }
    }
}

impl ImagingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.theta0 > 0.0 && self.c_n >= 0.0 && self.c_x >= 0.0 && self.delta > 0.0) {
            return Err(Error::Config(format!("invalid imaging parameters {self:?}")));
        }
        Ok(())
    }
}

/// Euclidean distances between voxel index positions, row-major with `v` outer.
pub fn pixel_distances(width: usize, height: usize) -> Mat<f64> {
    let n = width * height;
    Mat::from_fn(n, n, |i, j| {
        let du = (i % width) as f64 - (j % width) as f64;
        let dv = (i / width) as f64 - (j / width) as f64;
        du.hypot(dv)
    })
}

/// Forward horizontal differences; rows on the right boundary are zero.
pub fn diff_x(width: usize, height: usize) -> Mat<f64> {
    let n = width * height;
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        if i % width + 1 < width {
            d[(i, i)] = -1.0;
            d[(i, i + 1)] = 1.0;
        }
    }
    d
}

/// Forward vertical differences; rows on the top boundary are zero.
pub fn diff_y(width: usize, height: usize) -> Mat<f64> {
    let n = width * height;
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        if i / width + 1 < height {
            d[(i, i)] = -1.0;
            d[(i, i + width)] = 1.0;
        }
    }
    d
}

/// `D_XᵀD_X + D_YᵀD_Y`, assembled directly from the grid neighbourhood.
pub fn smoothness_matrix(width: usize, height: usize) -> Mat<f64> {
    let n = width * height;
    let mut l = Mat::zeros(n, n);
    let mut edge = |a: usize, b: usize| {
        l[(a, a)] += 1.0;
        l[(b, b)] += 1.0;
        l[(a, b)] -= 1.0;
        l[(b, a)] -= 1.0;
    };
    for i in 0..n {
        if i % width + 1 < width {
            edge(i, i + 1);
        }
        if i / width + 1 < height {
            edge(i, i + width);
        }
    }
    l
}

/// `(σ_x/δ)·exp(-D_p/δ)`.
pub fn exponential_corr(width: usize, height: usize, sigma_x: f64, delta: f64) -> Mat<f64> {
    let d = pixel_distances(width, height);
    Mat::from_fn(d.nrows(), d.ncols(), |i, j| sigma_x / delta * (-d[(i, j)] / delta).exp())
}

fn llt_factor(m: &Mat<f64>) -> Result<faer::linalg::solvers::Llt<f64>> {
    m.llt(Side::Lower).map_err(|e| Error::Solver(format!("{e:?}")))
}

/// Rejects factorizations whose pivots span more than ten orders of magnitude in the
/// matrix scale; a rounding-level pivot means the matrix is singular in exact arithmetic.
fn well_conditioned(llt: &faer::linalg::solvers::Llt<f64>) -> bool {
    let l = llt.L();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for i in 0..l.nrows() {
        let p = l[(i, i)] * l[(i, i)];
        lo = lo.min(p);
        hi = hi.max(p);
    }
    lo > 1e-10 * hi
}

/// Spatial priors for one voxel grid. The prior part of the normal matrix is assembled
/// once and factored when it is positive definite.
pub struct PriorSet {
    pub alpha: f64,
    pub sigma_n: f64,
    pub sigma_x: f64,
    pub delta: f64,
    pub width: usize,
    pub height: usize,
    /// The conditioned correlation `C_x + 1e-8·I`.
    pub corr: Mat<f64>,
    /// `σ_N·C_x⁻¹ + α(D_XᵀD_X + D_YᵀD_Y)`.
    prior: Mat<f64>,
    prior_llt: Option<faer::linalg::solvers::Llt<f64>>,
}

impl std::fmt::Debug for PriorSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PriorSet")
            .field("alpha", &self.alpha)
            .field("sigma_n", &self.sigma_n)
            .field("sigma_x", &self.sigma_x)
            .field("delta", &self.delta)
            .field("width", &self.width)
            .field("height", &self.height)
            .finish_non_exhaustive()
    }
}

impl PriorSet {
    /// Priors from the configuration, with `σ_N = c_n·σ_y` and `σ_x = c_x·σ_y`.
    pub fn new(cfg: &ImagingConfig, width: usize, height: usize, sigma_y: f64) -> Result<Self> {
        cfg.validate()?;
        let sigma_x = cfg.c_x * sigma_y;
        let corr = exponential_corr(width, height, sigma_x, cfg.delta);
        Self::with_corr(cfg.alpha, cfg.c_n * sigma_y, sigma_x, cfg.delta, width, height, corr)
    }

    /// Priors around an arbitrary symmetric positive definite correlation matrix.
    pub fn with_corr(
        alpha: f64,
        sigma_n: f64,
        sigma_x: f64,
        delta: f64,
        width: usize,
        height: usize,
        mut corr: Mat<f64>,
    ) -> Result<Self> {
        let n = width * height;
        if corr.nrows() != n || corr.ncols() != n {
            return Err(Error::DimensionMismatch {
                context: "correlation prior size (N)",
                expected: n,
                actual: corr.nrows(),
            });
        }
        if !(alpha >= 0.0 && sigma_n >= 0.0) {
            return Err(Error::InvalidParameter("alpha and sigma_n must be non-negative".into()));
        }
        for i in 0..n {
            corr[(i, i)] += CORR_CONDITIONING;
        }
        let mut prior = smoothness_matrix(width, height);
        for j in 0..n {
            for i in 0..n {
                prior[(i, j)] *= alpha;
            }
        }
        if sigma_n > 0.0 {
            let inv = llt_factor(&corr)?.inverse();
            for j in 0..n {
                for i in 0..n {
                    prior[(i, j)] += sigma_n * 0.5 * (inv[(i, j)] + inv[(j, i)]);
                }
            }
        }
        let prior_llt = prior.llt(Side::Lower).ok().filter(well_conditioned);
        Ok(Self {
            alpha,
            sigma_n,
            sigma_x,
            delta,
            width,
            height,
            corr,
            prior,
            prior_llt,
        })
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The regularization part of the normal matrix.
    pub fn prior_matrix(&self) -> &Mat<f64> {
        &self.prior
    }
}

/// `WᵀW` plus the priors, symmetrized.
pub fn normal_matrix(w: &Mat<f64>, priors: &PriorSet) -> Mat<f64> {
    let wtw = w.transpose() * w;
    let n = wtw.nrows();
    Mat::from_fn(n, n, |i, j| 0.5 * (wtw[(i, j)] + wtw[(j, i)]) + priors.prior[(i, j)])
}

/// Regularized least-squares attenuation estimate.
///
/// With a positive definite prior the system is reduced to `M x M` through the
/// push-through identity `(P + WᵀW)⁻¹Wᵀ = P⁻¹Wᵀ(I + WP⁻¹Wᵀ)⁻¹`; otherwise the full
/// normal matrix is factored.
pub fn solve(y: &[f64], w: &Mat<f64>, priors: &PriorSet) -> Result<Vec<f64>> {
    let (m, n) = (w.nrows(), w.ncols());
    if y.len() != m {
        return Err(Error::DimensionMismatch {
            context: "measurement length",
            expected: m,
            actual: y.len(),
        });
    }
    if n != priors.len() {
        return Err(Error::DimensionMismatch {
            context: "voxel count (N)",
            expected: priors.len(),
            actual: n,
        });
    }
    if y.iter().all(|&v| v == 0.0) {
        return Ok(vec![0.0; n]);
    }
    let y_col = Mat::from_fn(m, 1, |i, _| y[i]);
    let x = match &priors.prior_llt {
        Some(llt) => {
            let g = llt.solve(w.transpose().to_owned());
            let wg = w * &g;
            let s = Mat::from_fn(m, m, |i, j| {
                0.5 * (wg[(i, j)] + wg[(j, i)]) + if i == j { 1.0 } else { 0.0 }
            });
            let z = llt_factor(&s)?.solve(&y_col);
            &g * &z
        }
        None => {
            let a = normal_matrix(w, priors);
            let rhs = w.transpose() * &y_col;
            llt_factor(&a)?.solve(&rhs)
        }
    };
    Ok((0..n).map(|i| x[(i, 0)]).collect())
}

/// A reconstructed image, values in `[0, 1]`, index `v·width + u` with `v = 0` at the
/// bottom of the shelf.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageFrame {
    pub width_vox: usize,
    pub height_vox: usize,
    pub values: Vec<f64>,
    pub timestamp_s: f64,
}

impl ImageFrame {
    pub fn zeros(width: usize, height: usize, timestamp_s: f64) -> Self {
        Self {
            width_vox: width,
            height_vox: height,
            values: vec![0.0; width * height],
            timestamp_s,
        }
    }

    /// Clamps negatives to zero and scales by the maximum.
    pub fn normalized(width: usize, height: usize, mut values: Vec<f64>, timestamp_s: f64) -> Result<Self> {
        if values.len() != width * height {
            return Err(Error::DimensionMismatch {
                context: "image size",
                expected: width * height,
                actual: values.len(),
            });
        }
        for v in &mut values {
            if !(*v > 0.0) {
                *v = 0.0;
            }
        }
        let max = values.iter().cloned().fold(0.0, f64::max);
        if max > 0.0 && max.is_finite() {
            for v in &mut values {
                *v /= max;
            }
        } else {
            values.iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(Self {
            width_vox: width,
            height_vox: height,
            values,
            timestamp_s,
        })
    }

    pub fn get(&self, u: usize, v: usize) -> f64 {
        self.values[v * self.width_vox + u]
    }

    /// `(u, v)` of the largest voxel; ties go to the lowest index.
    pub fn peak(&self) -> (usize, usize) {
        let mut best = 0;
        for (i, &v) in self.values.iter().enumerate() {
            if v > self.values[best] {
                best = i;
            }
        }
        (best % self.width_vox, best / self.width_vox)
    }

    /// Binary 8-bit PGM, first row is the top of the shelf.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width_vox, self.height_vox).into_bytes();
        for v in (0..self.height_vox).rev() {
            for u in 0..self.width_vox {
                out.push((255.0 * self.get(u, v).clamp(0.0, 1.0)).round() as u8);
            }
        }
        out
    }

    pub fn from_pgm(bytes: &[u8], timestamp_s: f64) -> Result<Self> {
        let bad = |m: &str| Error::InvalidParameter(format!("malformed PGM: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" || fields[3] != "255" {
            return Err(bad("expected P5 with maxval 255"));
        }
        let w: usize = fields[1].parse().map_err(|_| bad("width"))?;
        let h: usize = fields[2].parse().map_err(|_| bad("height"))?;
        let data = &bytes[pos + 1..];
        if data.len() != w * h {
            return Err(bad("pixel count"));
        }
        let mut values = vec![0.0; w * h];
        for (row, chunk) in data.chunks(w).enumerate() {
            let v = h - 1 - row;
            for (u, &b) in chunk.iter().enumerate() {
                values[v * w + u] = b as f64 / 255.0;
            }
        }
        Ok(Self {
            width_vox: w,
            height_vox: h,
            values,
            timestamp_s,
        })
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_pgm()).map_err(|e| Error::io(path, e))
    }

    /// JSON with values rounded to 6 decimals.
    pub fn to_json_string(&self) -> String {
        let rounded = Self {
            values: self.values.iter().map(|&v| round6(v)).collect(),
            timestamp_s: round6(self.timestamp_s),
            ..self.clone()
        };
        serde_json::to_string(&rounded).expect("frame serializes")
    }
}

/// Everything the analytic imager needs besides the measurements.
pub struct AnalyticImager<'a> {
    pub grid: &'a TagGrid,
    pub array: &'a AntennaArray,
    pub planes: &'a [ImagePlane],
    pub priors: &'a PriorSet,
    pub lambda_avg: f64,
    pub theta0: f64,
}

impl AnalyticImager<'_> {
    /// Solves every (antenna, plane) pair and fuses them by averaging.
    pub fn image(&self, ys: &[RssDifferenceVector], timestamp_s: f64) -> Result<ImageFrame> {
        image(self.grid, self.array, self.planes, ys, self.priors, self.lambda_avg, self.theta0, timestamp_s)
    }
}

/// Average over planes, then over antennas, clamped and normalized.
#[allow(clippy::too_many_arguments)]
pub fn image(
    grid: &TagGrid,
    array: &AntennaArray,
    planes: &[ImagePlane],
    ys: &[RssDifferenceVector],
    priors: &PriorSet,
    lambda_avg: f64,
    theta0: f64,
    timestamp_s: f64,
) -> Result<ImageFrame> {
    let first = planes
        .first()
        .ok_or_else(|| Error::InvalidParameter("at least one image plane is required".into()))?;
    if ys.is_empty() {
        return Err(Error::InvalidParameter("at least one antenna is required".into()));
    }
    let (width, height) = (first.width_vox, first.height_vox);
    let n = width * height;
    let mut acc = vec![0.0; n];
    for y in ys {
        for plane in planes {
            if plane.width_vox != width || plane.height_vox != height {
                return Err(Error::DimensionMismatch {
                    context: "image plane size",
                    expected: n,
                    actual: plane.len(),
                });
            }
            let w = build_weights(grid, array, plane, y, lambda_avg, theta0)?;
            let x = solve(&y.values, &w.entries, priors)?;
            for (a, v) in acc.iter_mut().zip(x) {
                *a += v;
            }
        }
    }
    let scale = 1.0 / (planes.len() * ys.len()) as f64;
    acc.iter_mut().for_each(|a| *a *= scale);
    ImageFrame::normalized(width, height, acc, timestamp_s)
}
