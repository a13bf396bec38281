use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::gaussian;
use crate::{Error, Result};

/// One body-sized obstacle standing in the obstacle plane.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    /// Plane coordinates of the ellipse center, meters.
    pub center_x: f64,
    pub center_y: f64,
    pub semi_axis_x: f64,
    pub semi_axis_y: f64,
    /// One-way loss of a fully blocked link.
    pub max_loss_db: f64,
    /// Standard deviation of the per-tick sway around the center.
    #[serde(default)]
    pub jitter_sigma_m: f64,
    /// The obstacle is present during `[present_from_s, present_until_s)`.
    #[serde(default)]
    pub present_from_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub present_until_s: Option<f64>,
}

impl Obstacle {
    pub fn present_at(&self, t: f64) -> bool {
        t >= self.present_from_s && self.present_until_s.is_none_or(|end| t < end)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstructionScene {
    pub obstacles: Vec<Obstacle>,
    pub duration_s: f64,
    pub seed: u64,
    /// Distance of the obstacle plane from the tag plane, meters.
    #[serde(default = "default_plane_z")]
    pub plane_z_m: f64,
}

fn default_plane_z() -> f64 {
    0.3
}

impl ObstructionScene {
    pub fn empty(duration_s: f64, seed: u64) -> Self {
        Self {
            obstacles: Vec::new(),
            duration_s,
            seed,
            plane_z_m: default_plane_z(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.duration_s >= 0.0) {
            return Err(Error::InvalidParameter("scene duration must be non-negative".into()));
        }
        for (i, o) in self.obstacles.iter().enumerate() {
            if !(o.semi_axis_x > 0.0 && o.semi_axis_y > 0.0) {
                return Err(Error::InvalidParameter(format!("obstacle {i}: semi-axes must be positive")));
            }
            if !(o.max_loss_db >= 0.0) {
                return Err(Error::InvalidParameter(format!("obstacle {i}: negative loss")));
            }
            if !(o.jitter_sigma_m >= 0.0) {
                return Err(Error::InvalidParameter(format!("obstacle {i}: negative jitter")));
            }
        }
        Ok(())
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let scene: Self = serde_json::from_str(text)?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("scene serializes")
    }
}

/// An obstacle at its jittered position for one tick.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacedObstacle {
    pub x: f64,
    pub y: f64,
    pub semi_x: f64,
    pub semi_y: f64,
    pub max_loss_db: f64,
}

impl PlacedObstacle {
    pub fn new(x: f64, y: f64, semi_x: f64, semi_y: f64, max_loss_db: f64) -> Self {
        Self {
            x,
            y,
            semi_x,
            semi_y,
            max_loss_db,
        }
    }

    pub fn contains(&self, px: f64, py: f64) -> bool {
        let u = (px - self.x) / self.semi_x;
        let v = (py - self.y) / self.semi_y;
        u * u + v * v <= 1.0
    }
}

/// Per-tick obstacle placements. Jitter is drawn from its own seeded stream, so the
/// placements depend only on the scene, never on the read rate.
#[derive(Debug, Clone)]
pub struct ScenePositions {
    ticks: Vec<Vec<PlacedObstacle>>,
}

impl ScenePositions {
    pub fn new(scene: &ObstructionScene) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(1);
        let n_ticks = scene.duration_s.max(0.0).ceil() as usize + 1;
        let ticks = (0..n_ticks)
            .map(|tick| {
                let t = tick as f64;
                scene
                    .obstacles
                    .iter()
                    .filter_map(|o| {
                        let dx = gaussian(&mut rng, o.jitter_sigma_m);
                        let dy = gaussian(&mut rng, o.jitter_sigma_m);
                        o.present_at(t).then(|| {
                            PlacedObstacle::new(
                                o.center_x + dx,
                                o.center_y + dy,
                                o.semi_axis_x,
                                o.semi_axis_y,
                                o.max_loss_db,
                            )
                        })
                    })
                    .collect()
            })
            .collect();
        Self { ticks }
    }

    /// Obstacles present during the tick containing time `t`.
    pub fn at_time(&self, t: f64) -> &[PlacedObstacle] {
        let tick = (t.max(0.0).floor() as usize).min(self.ticks.len() - 1);
        &self.ticks[tick]
    }

    pub fn at_tick(&self, tick: usize) -> &[PlacedObstacle] {
        &self.ticks[tick.min(self.ticks.len() - 1)]
    }
}
