//! Synthetic monostatic RFID channel.
//!
//! Free-space RSS follows the log-distance form `A_0 + 10 β log10(λ / 4πd)` with the
//! double-fading exponent `β = 4`; phase is `2κd + φ_m + φ_o + φ_b (mod 2π)`. Obstacles are
//! ellipses in a plane parallel to the shelf; a link loses `2 · max_loss · overlap` dB
//! where `overlap` is the covered fraction of its first-Fresnel-zone cross-section.

mod generator;
pub mod log;
mod scene;

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::geometry::{fresnel_width, Point3};
use crate::{Error, Result, SPEED_OF_LIGHT};

pub use generator::{generate_reads, ReadGenerator, TagRead};
pub use scene::{Obstacle, ObstructionScene, PlacedObstacle, ScenePositions};

const TWO_PI: f64 = 2.0 * PI;

/// Overlap fraction above which a link's phase is treated as obstructed.
pub const PHASE_OBSTRUCTION_OVERLAP: f64 = 0.0625;

/// Number of deterministic sample points used to integrate Fresnel-disk coverage.
pub const DISK_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ChannelModel {
    pub tx_power_dbm: f64,
    pub antenna_gain_db: f64,
    pub tag_gain_db: f64,
    pub backscatter_loss_db: f64,
    pub env_constant_db: f64,
    pub baseline_exponent: f64,
    pub noise_sigma_db: f64,
    pub cable_phase_offset_rad: f64,
    pub tag_backscatter_phase_rad: f64,
    pub multipath_phase_sigma_rad: f64,
    /// Subcarrier center frequencies, Hz.
    pub subcarriers: Vec<f64>,
    /// Length of one interrogation cycle; antenna and channel are fixed within a cycle.
    pub cycle_duration_s: f64,
}

impl Default for ChannelModel {
    fn default() -> Self {
        Self {
            tx_power_dbm: 30.0,
            antenna_gain_db: 6.0,
            tag_gain_db: 2.0,
            backscatter_loss_db: 10.0,
            env_constant_db: 0.0,
            baseline_exponent: 4.0,
            noise_sigma_db: 0.8,
            cable_phase_offset_rad: 1.2,
            tag_backscatter_phase_rad: 0.7,
            multipath_phase_sigma_rad: 0.1,
            subcarriers: default_subcarriers(),
            cycle_duration_s: 0.05,
        }
    }
}

/// 50 channels from 902.75 to 927.25 MHz, 500 kHz apart.
pub fn default_subcarriers() -> Vec<f64> {
    (0..50).map(|i| 902.75e6 + 0.5e6 * i as f64).collect()
}

impl ChannelModel {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let model: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        model.validate()?;
        Ok(model)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("channel model serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.subcarriers.is_empty() {
            return Err(Error::InvalidParameter("at least one subcarrier is required".into()));
        }
        if self.subcarriers.iter().any(|&f| !(f > 0.0)) {
            return Err(Error::InvalidParameter("subcarrier frequencies must be positive".into()));
        }
        if !(self.noise_sigma_db >= 0.0) || !(self.multipath_phase_sigma_rad >= 0.0) {
            return Err(Error::InvalidParameter("noise levels must be non-negative".into()));
        }
        if !(self.cycle_duration_s > 0.0) {
            return Err(Error::InvalidParameter("cycle duration must be positive".into()));
        }
        Ok(())
    }

    pub fn num_channels(&self) -> usize {
        self.subcarriers.len()
    }

    /// Environment constant `A_0`: transmit power plus the doubled antenna and tag gains,
    /// less the modulation loss, plus any residual environment term.
    pub fn a0_dbm(&self) -> f64 {
        self.tx_power_dbm + 2.0 * self.antenna_gain_db + 2.0 * self.tag_gain_db
            - self.backscatter_loss_db
            + self.env_constant_db
    }

    pub fn wavelength(&self, channel: usize) -> f64 {
        SPEED_OF_LIGHT / self.subcarriers[channel]
    }

    /// Wavelength at the mean subcarrier frequency.
    pub fn average_wavelength(&self) -> f64 {
        let mean = self.subcarriers.iter().sum::<f64>() / self.subcarriers.len() as f64;
        SPEED_OF_LIGHT / mean
    }

    fn phase_offsets(&self) -> f64 {
        self.cable_phase_offset_rad + self.tag_backscatter_phase_rad
    }
}

/// Log-distance received power in dBm.
pub fn free_space_rss(model: &ChannelModel, lambda: f64, d: f64, beta: f64) -> Result<f64> {
    free_space_rss_with_a0(model.a0_dbm(), lambda, d, beta)
}

pub fn free_space_rss_with_a0(a0_dbm: f64, lambda: f64, d: f64, beta: f64) -> Result<f64> {
    if !(d > 0.0) {
        return Err(Error::InvalidParameter(format!("link distance {d} must be positive")));
    }
    if !(lambda > 0.0) {
        return Err(Error::InvalidParameter(format!("wavelength {lambda} must be positive")));
    }
    Ok(a0_dbm + 10.0 * beta * (lambda / (4.0 * PI * d)).log10())
}

pub(crate) fn wrap_phase(phi: f64) -> f64 {
    let w = phi.rem_euclid(TWO_PI);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TWO_PI {
        0.0
    } else {
        w
    }
}

/// Phase with an explicit multipath term `phi_m`.
pub fn phase_with_multipath(model: &ChannelModel, f: f64, d: f64, phi_m: f64) -> f64 {
    let kappa = TWO_PI * f / SPEED_OF_LIGHT;
    wrap_phase(2.0 * kappa * d + phi_m + model.phase_offsets())
}

/// Reported phase for a link of length `d` at frequency `f`, with the multipath term drawn
/// from `N(0, multipath_phase_sigma²)`.
pub fn phase_at<R: Rng + ?Sized>(model: &ChannelModel, f: f64, d: f64, rng: &mut R) -> f64 {
    let phi_m = gaussian(rng, model.multipath_phase_sigma_rad);
    phase_with_multipath(model, f, d, phi_m)
}

pub(crate) fn gaussian<R: Rng + ?Sized>(rng: &mut R, sigma: f64) -> f64 {
    // always consume one draw so streams stay aligned whatever the sigma
    let z: f64 = Normal::new(0.0, 1.0).expect("unit normal").sample(rng);
    sigma * z
}

/// Unit-disk sample points on a sunflower spiral; equal-area, deterministic.
pub fn disk_samples(n: usize) -> Vec<(f64, f64)> {
    let golden = PI * (3.0 - 5f64.sqrt());
    (0..n)
        .map(|i| {
            let r = ((i as f64 + 0.5) / n as f64).sqrt();
            let theta = i as f64 * golden;
            (r * theta.cos(), r * theta.sin())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkObstruction {
    /// Fraction of the Fresnel cross-section covered by any obstacle.
    pub overlap: f64,
    /// Two-way loss in dB.
    pub loss_db: f64,
}

impl LinkObstruction {
    pub const CLEAR: LinkObstruction = LinkObstruction {
        overlap: 0.0,
        loss_db: 0.0,
    };
}

/// Two-way obstruction loss of one tag-antenna link.
///
/// The link's first Fresnel zone (`theta0 = 1`) is cut by the obstacle plane at
/// `plane_z`; each disk sample contributes the largest `max_loss_db` of the obstacles
/// covering it, and the mean is doubled for the forward and reverse trips.
pub fn obstruction_loss(
    obstacles: &[PlacedObstacle],
    tag: &Point3,
    antenna: &Point3,
    plane_z: f64,
    lambda: f64,
    samples: &[(f64, f64)],
) -> LinkObstruction {
    if obstacles.is_empty() || samples.is_empty() {
        return LinkObstruction::CLEAR;
    }
    let dz = antenna.z - tag.z;
    if dz.abs() < f64::EPSILON {
        return LinkObstruction::CLEAR;
    }
    let t = (plane_z - tag.z) / dz;
    if !(0.0..=1.0).contains(&t) {
        return LinkObstruction::CLEAR;
    }
    let crossing = tag.lerp(antenna, t);
    let d1 = crossing.distance(tag);
    let d2 = crossing.distance(antenna);
    let radius = match fresnel_width(1.0, lambda, d1, d2) {
        Ok(r) => r,
        Err(_) => return LinkObstruction::CLEAR,
    };

    // cheap reject: no obstacle's bounding box reaches the disk
    let near: Vec<&PlacedObstacle> = obstacles
        .iter()
        .filter(|o| {
            (crossing.x - o.x).abs() <= o.semi_x + radius && (crossing.y - o.y).abs() <= o.semi_y + radius
        })
        .collect();
    if near.is_empty() {
        return LinkObstruction::CLEAR;
    }

    let mut covered = 0usize;
    let mut loss = 0.0;
    for &(sx, sy) in samples {
        let px = crossing.x + radius * sx;
        let py = crossing.y + radius * sy;
        let mut best: Option<f64> = None;
        for o in &near {
            if o.contains(px, py) {
                best = Some(best.map_or(o.max_loss_db, |b: f64| b.max(o.max_loss_db)));
            }
        }
        if let Some(b) = best {
            covered += 1;
            loss += b;
        }
    }
    let n = samples.len() as f64;
    LinkObstruction {
        overlap: covered as f64 / n,
        loss_db: 2.0 * loss / n,
    }
}
