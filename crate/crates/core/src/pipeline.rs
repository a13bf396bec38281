//! End-to-end monitoring session: reads in, frames and popularity scores out.

use serde::{Deserialize, Serialize};

use crate::analytic::{AnalyticImager, ImageFrame, ImagingConfig, PriorSet};
use crate::channel_sim::TagRead;
use crate::dnn::{MlpEnsemble, DEFAULT_MAX_RSS_DB};
use crate::geometry::Layout;
use crate::multiperson::{image_multiperson, WindowConfig};
use crate::preprocess::{power_gate, CalibrationProfile, Monitor, TickOutput, MONITOR_CAPACITY, POWER_THRESHOLD};
use crate::tracking::{TickScore, Tracker, TrackerConfig};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImagingMode {
    Analytic,
    Dnn,
}

impl std::str::FromStr for ImagingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "analytic" => Ok(Self::Analytic),
            "dnn" => Ok(Self::Dnn),
            other => Err(Error::InvalidParameter(format!("unknown imaging mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub power_threshold: f64,
    pub monitor_capacity: usize,
    /// Channel-loss scale that maps difference vectors onto `[0, 1]` network inputs.
    pub max_rss_db: f64,
    pub imaging: ImagingConfig,
    pub window: WindowConfig,
    pub tracker: TrackerConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            power_threshold: POWER_THRESHOLD,
            monitor_capacity: MONITOR_CAPACITY,
            max_rss_db: DEFAULT_MAX_RSS_DB,
            imaging: ImagingConfig::default(),
            window: WindowConfig::default(),
            tracker: TrackerConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.imaging.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("pipeline config serializes")
    }
}

/// The reconstruction back end of a session.
pub enum Imager {
    Analytic(PriorSet),
    Dnn(MlpEnsemble),
}

impl Imager {
    pub fn analytic(layout: &Layout, profile: &CalibrationProfile, cfg: &ImagingConfig) -> Result<Self> {
        let priors = PriorSet::new(cfg, layout.image_width(), layout.image_height(), profile.sigma_y_cal)?;
        Ok(Self::Analytic(priors))
    }

    pub fn mode(&self) -> ImagingMode {
        match self {
            Self::Analytic(_) => ImagingMode::Analytic,
            Self::Dnn(_) => ImagingMode::Dnn,
        }
    }
}

/// One tick of a session. `frame` is present iff the tick passed the power gate.
#[derive(Debug, Clone)]
pub struct SessionTick {
    pub score: TickScore,
    pub frame: Option<ImageFrame>,
}

/// Stateful per-shelf session.
pub struct Session<'a> {
    layout: &'a Layout,
    profile: &'a CalibrationProfile,
    imager: &'a Imager,
    cfg: PipelineConfig,
    monitor: Monitor<'a>,
    tracker: Tracker,
    lambda_avg: f64,
}

impl<'a> Session<'a> {
    pub fn new(
        layout: &'a Layout,
        profile: &'a CalibrationProfile,
        imager: &'a Imager,
        num_channels: usize,
        lambda_avg: f64,
        cfg: PipelineConfig,
    ) -> Result<Self> {
        profile.check_compatible(layout.num_tags(), layout.num_antennas(), num_channels)?;
        cfg.window.validate(layout.grid.k_x)?;
        if let Imager::Dnn(ens) = imager {
            let dims = ens.spec.dims.clone();
            let (k, n) = (layout.num_tags(), layout.num_voxels());
            if dims.first() != Some(&k) || dims.last() != Some(&n) {
                return Err(Error::DimensionMismatch {
                    context: "network input/output vs layout",
                    expected: k * n,
                    actual: dims.first().copied().unwrap_or(0) * dims.last().copied().unwrap_or(0),
                });
            }
        }
        let monitor = Monitor::new(profile, cfg.monitor_capacity);
        let tracker = Tracker::new(cfg.tracker.clone(), layout.categories.clone());
        Ok(Self {
            layout,
            profile,
            imager,
            cfg,
            monitor,
            tracker,
            lambda_avg,
        })
    }

    pub fn tracker(&self) -> &Tracker {
        &self.tracker
    }

    fn process(&mut self, tick: TickOutput) -> Result<SessionTick> {
        let (w, h) = (self.layout.image_width(), self.layout.image_height());
        let passed = tick.vectors.iter().any(|y| power_gate(y, self.cfg.power_threshold));
        let frame = if passed {
            Some(match self.imager {
                Imager::Analytic(priors) => AnalyticImager {
                    grid: &self.layout.grid,
                    array: &self.layout.antennas,
                    planes: &self.layout.planes,
                    priors,
                    lambda_avg: self.lambda_avg,
                    theta0: self.cfg.imaging.theta0,
                }
                .image(&tick.vectors, tick.timestamp_s)?,
                Imager::Dnn(ens) => image_multiperson(
                    &tick.vectors,
                    ens,
                    self.profile,
                    self.layout,
                    &self.cfg.window,
                    self.cfg.max_rss_db,
                    tick.timestamp_s,
                )?,
            })
        } else {
            None
        };
        // a gated tick still advances the tracker, as an empty frame
        let tracked = frame.clone().unwrap_or_else(|| ImageFrame::zeros(w, h, tick.timestamp_s));
        let score = self.tracker.push(tracked);
        Ok(SessionTick { score, frame })
    }

    pub fn push(&mut self, read: TagRead) -> Result<Vec<SessionTick>> {
        let ticks = self.monitor.push(read)?;
        ticks.into_iter().map(|t| self.process(t)).collect()
    }

    pub fn finish(&mut self) -> Result<Vec<SessionTick>> {
        match self.monitor.finish()? {
            Some(t) => Ok(vec![self.process(t)?]),
            None => Ok(Vec::new()),
        }
    }
}

/// Runs a complete read stream through a fresh session.
pub fn run_session(
    reads: impl IntoIterator<Item = TagRead>,
    layout: &Layout,
    profile: &CalibrationProfile,
    imager: &Imager,
    num_channels: usize,
    lambda_avg: f64,
    cfg: &PipelineConfig,
) -> Result<Vec<SessionTick>> {
    let mut session = Session::new(layout, profile, imager, num_channels, lambda_avg, cfg.clone())?;
    let mut out = Vec::new();
    for r in reads {
        out.extend(session.push(r)?);
    }
    out.extend(session.finish()?);
    Ok(out)
}
