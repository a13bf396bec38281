//! Synthetic evaluation suite: body profiles standing in for shoppers, scene builders,
//! training-data synthesis, and the per-scenario TPR/FPR/MR runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel_sim::{generate_reads, ChannelModel, Obstacle, ObstructionScene, TagRead};
use crate::dnn::{train_member, MlpEnsemble, MlpSpec, TrainingSet};
use crate::geometry::Layout;
use crate::multiperson::{empty_training_sample, expand_training_sample, LabelShape};
use crate::pipeline::{run_session, Imager, PipelineConfig, SessionTick};
use crate::preprocess::{monitor_stream, run_calibration, CalibrationProfile};
use crate::tracking::{evaluate, EvalReport, EvalRow};
use crate::{Error, Result};

/// Nominal reading rate of the reader, reads per second.
pub const NOMINAL_READ_RATE: f64 = 475.0;

/// Body-size parameters of one synthetic shopper.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BodyProfile {
    pub name: String,
    /// Half-width along the shelf, meters.
    pub semi_x_m: f64,
    pub semi_y_m: f64,
    pub center_y_m: f64,
    pub max_loss_db: f64,
    pub jitter_sigma_m: f64,
}

impl BodyProfile {
    fn new(name: &str, semi_x_m: f64, max_loss_db: f64) -> Self {
        Self {
            name: name.to_string(),
            semi_x_m,
            semi_y_m: 0.9,
            center_y_m: 0.9,
            max_loss_db,
            jitter_sigma_m: 0.03,
        }
    }

    pub fn obstacle(&self, x: f64, present_from_s: f64) -> Obstacle {
        Obstacle {
            center_x: x,
            center_y: self.center_y_m,
            semi_axis_x: self.semi_x_m,
            semi_axis_y: self.semi_y_m,
            max_loss_db: self.max_loss_db,
            jitter_sigma_m: self.jitter_sigma_m,
            present_from_s,
            present_until_s: None,
        }
    }
}

/// The three bodies the network is trained on.
pub fn training_profiles() -> Vec<BodyProfile> {
    vec![
        BodyProfile::new("slim", 0.18, 14.0),
        BodyProfile::new("medium", 0.22, 15.0),
        BodyProfile::new("broad", 0.26, 16.0),
    ]
}

/// A body never seen in training, between the training sizes.
pub fn test_profile() -> BodyProfile {
    BodyProfile::new("unseen", 0.20, 15.5)
}

/// A set of simultaneously browsed categories, zero-based.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Scenario {
    pub categories: Vec<usize>,
}

impl Scenario {
    /// Parses one-based category numbers joined by `+`, e.g. `"1+4+6"`.
    pub fn parse(name: &str, num_categories: usize) -> Result<Self> {
        let unknown = || Error::UnknownScenario(name.to_string());
        let mut categories = Vec::new();
        for part in name.split('+') {
            let c: usize = part.trim().parse().map_err(|_| unknown())?;
            if c == 0 || c > num_categories || categories.contains(&(c - 1)) {
                return Err(unknown());
            }
            categories.push(c - 1);
        }
        Ok(Self { categories })
    }

    pub fn name(&self) -> String {
        self.categories
            .iter()
            .map(|c| (c + 1).to_string())
            .collect::<Vec<_>>()
            .join("+")
    }

    /// Scene with one `body` per category, all arriving at `arrive_s`.
    pub fn scene(&self, layout: &Layout, body: &BodyProfile, arrive_s: f64, duration_s: f64, seed: u64) -> ObstructionScene {
        let obstacles = self
            .categories
            .iter()
            .map(|&c| body.obstacle(layout.column_to_x(layout.categories.center_column(c)), arrive_s))
            .collect();
        ObstructionScene {
            obstacles,
            duration_s,
            seed,
            ..ObstructionScene::empty(duration_s, seed)
        }
    }
}

fn suite(names: &[&str]) -> Vec<Scenario> {
    names.iter().map(|n| Scenario::parse(n, 6).expect("built-in scenario")).collect()
}

pub fn single_person_suite() -> Vec<Scenario> {
    suite(&["1", "2", "3", "4", "5", "6"])
}

pub fn two_person_suite() -> Vec<Scenario> {
    suite(&["1+3", "1+4", "1+5", "1+6", "3+6", "4+6"])
}

pub fn three_person_suite() -> Vec<Scenario> {
    suite(&["1+4+6", "2+4+6"])
}

/// Resolves `single`, `two`, `three`, `multi` (two and three) or `all`, or a
/// comma-separated list of scenario names.
pub fn suite_by_name(name: &str, num_categories: usize) -> Result<Vec<Scenario>> {
    match name {
        "single" => Ok(single_person_suite()),
        "two" => Ok(two_person_suite()),
        "three" => Ok(three_person_suite()),
        "multi" => Ok([two_person_suite(), three_person_suite()].concat()),
        "all" => Ok([single_person_suite(), two_person_suite(), three_person_suite()].concat()),
        list => list.split(',').map(|n| Scenario::parse(n.trim(), num_categories)).collect(),
    }
}

/// Timing and training budget of the synthetic suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteConfig {
    pub rate: f64,
    pub calibration_s: f64,
    /// Empty lead-in before anyone arrives; feeds the tracker's background model.
    pub lead_in_s: f64,
    /// Ticks after arrival that are not scored while buffers catch up.
    pub settle_ticks: usize,
    pub windows: usize,
    /// Scored ticks per (training body, category) scene.
    pub training_ticks: usize,
    /// Fraction of zero-label windows kept; a person fills only about k_cw of the windows.
    pub negative_keep: f64,
    pub ensemble_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub label: LabelShape,
    pub seed: u64,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            rate: NOMINAL_READ_RATE,
            calibration_s: 480.0,
            lead_in_s: 12.0,
            settle_ticks: 8,
            windows: 60,
            training_ticks: 8,
            negative_keep: 0.35,
            ensemble_size: 3,
            epochs: 20,
            learning_rate: 3e-3,
            label: LabelShape::default(),
            seed: 7,
        }
    }
}

impl SuiteConfig {
    /// Scene length that yields `windows` scored ticks.
    pub fn scenario_duration_s(&self) -> f64 {
        self.lead_in_s + (self.settle_ticks + self.windows) as f64 + 1.0
    }
}

/// Mixes a base seed with a stream tag so every scene gets its own generator.
pub fn derive_seed(base: u64, tag: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(tag).rotate_left(17) ^ tag
}

pub fn simulate(layout: &Layout, model: &ChannelModel, scene: &ObstructionScene, rate: f64) -> Result<Vec<TagRead>> {
    Ok(generate_reads(&layout.grid, &layout.antennas, model, scene, rate)?.collect())
}

/// Calibration from an obstruction-free capture of `duration_s`.
pub fn calibrate(layout: &Layout, model: &ChannelModel, rate: f64, duration_s: f64, seed: u64) -> Result<CalibrationProfile> {
    let reads = simulate(layout, model, &ObstructionScene::empty(duration_s, seed), rate)?;
    run_calibration(&reads, &layout.grid, &layout.antennas, model.num_channels())
}

/// Window-expanded training set: every training body at every category, plus the
/// zero-label no-obstruction samples.
pub fn training_set(
    layout: &Layout,
    model: &ChannelModel,
    profile: &CalibrationProfile,
    pipeline: &PipelineConfig,
    suite: &SuiteConfig,
) -> Result<TrainingSet> {
    let mut set = TrainingSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(suite.seed);
    rng.set_stream(3);
    let skip = 2usize;
    let duration = (skip + suite.training_ticks) as f64 + 0.5;
    let k_cw = pipeline.window.k_cw;
    let n_windows = pipeline.window.window_count(layout.grid.k_x);
    for (b, body) in training_profiles().iter().enumerate() {
        for c in 0..layout.categories.len() {
            let scn = Scenario { categories: vec![c] };
            let seed = derive_seed(suite.seed, 1000 + (b * 100 + c) as u64);
            let scene = scn.scene(layout, body, 0.0, duration, seed);
            let reads = simulate(layout, model, &scene, suite.rate)?;
            let column = layout.categories.center_column(c);
            // people near the shelf ends sit inside fewer windows; repeat their positives
            let containing = (0..n_windows)
                .filter(|&i| column >= i as f64 - 0.5 && column < (i + k_cw) as f64 - 0.5)
                .count()
                .max(1);
            let repeat = k_cw.div_ceil(containing);
            let mut scene_set = TrainingSet::default();
            for tick in monitor_stream(reads, profile, pipeline.monitor_capacity)?.iter().skip(skip) {
                for y in &tick.vectors {
                    expand_training_sample(
                        &mut scene_set,
                        y,
                        &[column],
                        profile,
                        layout,
                        &pipeline.window,
                        &suite.label,
                        pipeline.max_rss_db,
                    )?;
                }
            }
            for (x, t) in scene_set.inputs.into_iter().zip(scene_set.labels) {
                if t.iter().any(|&v| v > 0.0) {
                    for _ in 1..repeat {
                        set.push(x.clone(), t.clone());
                    }
                    set.push(x, t);
                } else if rng.gen::<f64>() < suite.negative_keep {
                    set.push(x, t);
                }
            }
        }
    }
    for _ in 0..suite.training_ticks {
        for a in 0..layout.num_antennas() {
            empty_training_sample(&mut set, profile, layout, a, pipeline.max_rss_db)?;
        }
    }
    Ok(set)
}

/// Trains the suite's ensemble; also returns every member's per-epoch mean loss.
pub fn train_ensemble(layout: &Layout, set: &TrainingSet, suite: &SuiteConfig) -> Result<(MlpEnsemble, Vec<Vec<f64>>)> {
    if suite.ensemble_size == 0 {
        return Err(Error::EmptyEnsemble);
    }
    let mut spec = MlpSpec::standard(layout.num_tags(), layout.num_voxels());
    spec.epochs = suite.epochs;
    spec.seed = suite.seed;
    spec.learning_rate = suite.learning_rate;
    let mut members = Vec::with_capacity(suite.ensemble_size);
    let mut histories = Vec::with_capacity(suite.ensemble_size);
    for m in 0..suite.ensemble_size as u64 {
        let (net, history) = train_member(&spec, set, m)?;
        members.push(net);
        histories.push(history);
    }
    Ok((MlpEnsemble { spec, members }, histories))
}

/// Categories credited on each scored tick of a session.
pub fn scored_windows(ticks: &[SessionTick], suite: &SuiteConfig) -> Vec<Vec<usize>> {
    let start = suite.lead_in_s + suite.settle_ticks as f64;
    ticks
        .iter()
        .filter(|t| t.score.timestamp_s > start + 1e-9)
        .take(suite.windows)
        .map(|t| t.score.categories.clone())
        .collect()
}

/// Everything an evaluation run shares across scenarios.
pub struct EvalContext<'a> {
    pub layout: &'a Layout,
    pub model: &'a ChannelModel,
    pub profile: &'a CalibrationProfile,
    pub imager: &'a Imager,
    pub pipeline: &'a PipelineConfig,
    pub suite: &'a SuiteConfig,
    pub training_users: usize,
}

impl EvalContext<'_> {
    /// Simulates `scenario` with the unseen body at `rate` and scores it.
    pub fn run(&self, scenario: &Scenario, rate: f64) -> Result<(EvalRow, Vec<SessionTick>)> {
        let seed = derive_seed(self.suite.seed, 5000 + scenario.categories.iter().fold(0u64, |h, &c| h * 7 + c as u64 + 1));
        let scene = scenario.scene(
            self.layout,
            &test_profile(),
            self.suite.lead_in_s,
            self.suite.scenario_duration_s(),
            seed,
        );
        let reads = simulate(self.layout, self.model, &scene, rate)?;
        let ticks = run_session(
            reads,
            self.layout,
            self.profile,
            self.imager,
            self.model.num_channels(),
            self.model.average_wavelength(),
            self.pipeline,
        )?;
        let windows = scored_windows(&ticks, self.suite);
        let row = evaluate(
            &scenario.name(),
            self.pipeline.window.k_cw,
            self.training_users,
            &scenario.categories,
            &windows,
        )?;
        Ok((row, ticks))
    }

    pub fn run_suite(&self, scenarios: &[Scenario], rate: f64) -> Result<EvalReport> {
        let rows = scenarios
            .iter()
            .map(|s| self.run(s, rate).map(|(row, _)| row))
            .collect::<Result<Vec<_>>>()?;
        Ok(EvalReport { rows })
    }
}
