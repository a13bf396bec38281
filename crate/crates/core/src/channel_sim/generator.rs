use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    disk_samples, free_space_rss, gaussian, obstruction_loss, phase_with_multipath, ChannelModel,
    LinkObstruction, ObstructionScene, ScenePositions, DISK_SAMPLES, PHASE_OBSTRUCTION_OVERLAP,
};
use crate::geometry::{AntennaArray, Point3, TagGrid};
use crate::{Error, Result};

/// One interrogation record as reported by the reader.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TagRead {
    pub timestamp_s: f64,
    pub tag_id: usize,
    pub antenna_id: usize,
    pub channel_index: usize,
    pub rss_dbm: f64,
    pub phase_rad: f64,
}

/// Deterministic read stream for one scene.
///
/// Reads arrive at a fixed rate. Each interrogation cycle uses one antenna (round robin)
/// and one uniformly drawn channel; within a cycle every read picks a tag uniformly, which
/// stands in for slotted-ALOHA contention.
#[derive(Debug, Clone)]
pub struct ReadGenerator {
    tags: Vec<Point3>,
    antennas: Vec<Point3>,
    model: ChannelModel,
    positions: ScenePositions,
    plane_z: f64,
    lambda_avg: f64,
    samples: Vec<(f64, f64)>,
    rate: f64,
    total: usize,
    next: usize,
    rng: ChaCha8Rng,
    /// free-space RSS, indexed `[antenna][channel][tag]`
    free_space: Vec<Vec<Vec<f64>>>,
    /// link distances, indexed `[tag * A + antenna]`
    distances: Vec<f64>,
    cycle: Option<u64>,
    antenna: usize,
    channel: usize,
    cached_tick: Option<usize>,
    obstruction: Vec<LinkObstruction>,
}

/// Builds the read stream for `scene`: `floor(rate * duration)` reads.
pub fn generate_reads(
    grid: &TagGrid,
    array: &AntennaArray,
    model: &ChannelModel,
    scene: &ObstructionScene,
    rate_per_s: f64,
) -> Result<ReadGenerator> {
    ReadGenerator::new(grid, array, model, scene, rate_per_s)
}

impl ReadGenerator {
    pub fn new(
        grid: &TagGrid,
        array: &AntennaArray,
        model: &ChannelModel,
        scene: &ObstructionScene,
        rate_per_s: f64,
    ) -> Result<Self> {
        if !(rate_per_s > 0.0) {
            return Err(Error::InvalidParameter(format!("read rate {rate_per_s} must be positive")));
        }
        model.validate()?;
        scene.validate()?;
        let tags = grid.tag_positions.clone();
        let antennas = array.positions.clone();
        let a_count = antennas.len();
        let mut distances = Vec::with_capacity(tags.len() * a_count);
        for t in &tags {
            for a in &antennas {
                distances.push(t.distance(a));
            }
        }
        let free_space = (0..a_count)
            .map(|a| {
                (0..model.num_channels())
                    .map(|f| {
                        (0..tags.len())
                            .map(|k| {
                                free_space_rss(
                                    model,
                                    model.wavelength(f),
                                    distances[k * a_count + a],
                                    model.baseline_exponent,
                                )
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let total = (rate_per_s * scene.duration_s + 1e-9).floor().max(0.0) as usize;
        let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
        rng.set_stream(0);
        Ok(Self {
            tags,
            antennas,
            model: model.clone(),
            positions: ScenePositions::new(scene),
            plane_z: grid.origin.z + scene.plane_z_m,
            lambda_avg: model.average_wavelength(),
            samples: disk_samples(DISK_SAMPLES),
            rate: rate_per_s,
            total,
            next: 0,
            rng,
            free_space,
            distances,
            cycle: None,
            antenna: 0,
            channel: 0,
            cached_tick: None,
            obstruction: Vec::new(),
        })
    }

    /// Total number of reads the stream will yield.
    pub fn total_reads(&self) -> usize {
        self.total
    }

    /// Obstruction state of every link during `tick`, indexed `[tag * A + antenna]`.
    pub fn link_obstruction(&self, tick: usize) -> Vec<LinkObstruction> {
        let placed = self.positions.at_tick(tick);
        let mut out = Vec::with_capacity(self.distances.len());
        for tag in &self.tags {
            for ant in &self.antennas {
                out.push(obstruction_loss(
                    placed,
                    tag,
                    ant,
                    self.plane_z,
                    self.lambda_avg,
                    &self.samples,
                ));
            }
        }
        out
    }

    fn refresh_tick(&mut self, tick: usize) {
        if self.cached_tick != Some(tick) {
            self.obstruction = self.link_obstruction(tick);
            self.cached_tick = Some(tick);
        }
    }
}

impl Iterator for ReadGenerator {
    type Item = TagRead;

    fn next(&mut self) -> Option<TagRead> {
        if self.next >= self.total {
            return None;
        }
        let i = self.next;
        self.next += 1;
        let t = i as f64 / self.rate;
        let cycle = (t / self.model.cycle_duration_s).floor() as u64;
        if self.cycle != Some(cycle) {
            self.cycle = Some(cycle);
            self.antenna = (cycle % self.antennas.len() as u64) as usize;
            self.channel = self.rng.gen_range(0..self.model.num_channels());
        }
        self.refresh_tick(t.floor() as usize);

        let a_count = self.antennas.len();
        let tag = self.rng.gen_range(0..self.tags.len());
        let (a, f) = (self.antenna, self.channel);
        let link = self.obstruction[tag * a_count + a];
        let noise = gaussian(&mut self.rng, self.model.noise_sigma_db);
        let phi_m = gaussian(&mut self.rng, self.model.multipath_phase_sigma_rad);
        let shift: f64 = self.rng.gen_range(PI / 4.0..=PI);

        let rss = self.free_space[a][f][tag] - link.loss_db + noise;
        let extra = if link.overlap > PHASE_OBSTRUCTION_OVERLAP {
            shift
        } else {
            phi_m
        };
        let d = self.distances[tag * a_count + a];
        let phase = phase_with_multipath(&self.model, self.model.subcarriers[f], d, extra);
        Some(TagRead {
            timestamp_s: t,
            tag_id: tag,
            antenna_id: a,
            channel_index: f,
            rss_dbm: rss,
            phase_rad: phase,
        })
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = self.total - self.next;
        (left, Some(left))
    }
}

impl ExactSizeIterator for ReadGenerator {}
