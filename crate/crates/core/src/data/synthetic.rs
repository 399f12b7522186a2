//! Synthetic coordinated agents for desk-scale experiments.
//!
//! Agents travel along straight segments between waypoint cells, arriving at
//! waypoint `k` at a per-agent staggered time and at the last waypoint on
//! the final step. A smooth AR(1) perturbation whose envelope decays to zero
//! at the final step is added on top, so final positions stay exactly on
//! the constructed goals.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Extent, Point};
use crate::scene::{DatasetKind, Scene};

use super::sports::{PlayRecord, COURT_LENGTH, COURT_WIDTH, PLAY_STEPS, TEAM_SIZE};

const NOISE_MEMORY: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    pub seed: u64,
    pub n_scenes: usize,
    pub n_agents: usize,
    pub steps: usize,
    /// Probability that an agent follows the shared team waypoints.
    pub coordination: f64,
    /// Standard deviation of the per-step perturbation, in cells.
    pub noise: f64,
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Waypoints per trajectory.
    pub segments: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            n_scenes: 100,
            n_agents: 5,
            steps: 20,
            coordination: 1.0,
            noise: 0.02,
            grid_rows: 6,
            grid_cols: 8,
            segments: 2,
        }
    }
}

impl SyntheticConfig {
    /// The world is `[0, cols] × [0, rows]`, so every grid cell is one unit.
    pub fn extent(&self) -> Extent {
        Extent::new(0.0, 0.0, self.grid_cols as f64, self.grid_rows as f64).expect("grid extent")
    }

    fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.steps < 2 || self.segments == 0 {
            return Err(Error::Config(
                "synthetic data needs agents, at least 2 steps and a waypoint".into(),
            ));
        }
        if self.grid_rows == 0 || self.grid_cols == 0 {
            return Err(Error::Config("synthetic grid needs at least one cell".into()));
        }
        if !(0.0..=1.0).contains(&self.coordination) {
            return Err(Error::Config("coordination must lie in [0, 1]".into()));
        }
        if self.noise.is_nan() || self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

/// Arrival times `t_1 < … < t_S = T−1` with interior times jittered by up
/// to a quarter segment.
fn arrival_times<R: Rng + ?Sized>(steps: usize, segments: usize, rng: &mut R) -> Vec<usize> {
    let last = steps - 1;
    let seg = last as f64 / segments as f64;
    let jitter = (seg / 4.0).floor() as i64;
    let mut times = Vec::with_capacity(segments);
    let mut prev = 0usize;
    for k in 1..segments {
        let base = (k as f64 * seg).round() as i64;
        let shift = if jitter > 0 { rng.gen_range(-jitter..=jitter) } else { 0 };
        let remaining = (segments - k) as i64;
        let t = (base + shift)
            .max(prev as i64 + 1)
            .min(last as i64 - remaining)
            .max(prev as i64);
        times.push(t as usize);
        prev = t as usize;
    }
    times.push(last);
    times
}

/// Piecewise-linear path through `waypoints` plus the decaying perturbation.
fn trajectory<R: Rng + ?Sized>(
    start: Point,
    waypoints: &[Point],
    times: &[usize],
    steps: usize,
    noise: f64,
    rng: &mut R,
) -> Vec<Point> {
    let mut out = Vec::with_capacity(steps);
    let mut offset = [0.0, 0.0];
    let last = (steps - 1) as f64;
    for t in 0..steps {
        let k = times.iter().position(|&tk| t <= tk).unwrap_or(times.len() - 1);
        let (from, t0) = if k == 0 { (start, 0) } else { (waypoints[k - 1], times[k - 1]) };
        let (to, t1) = (waypoints[k], times[k]);
        let a = if t1 > t0 { (t - t0) as f64 / (t1 - t0) as f64 } else { 1.0 };
        let base = [from[0] + a * (to[0] - from[0]), from[1] + a * (to[1] - from[1])];
        if t > 0 {
            for o in &mut offset {
                let e: f64 = rng.sample(StandardNormal);
                *o = NOISE_MEMORY * *o + noise * e;
            }
        }
        let envelope = 1.0 - t as f64 / last;
        out.push([base[0] + envelope * offset[0], base[1] + envelope * offset[1]]);
    }
    out
}

fn random_cell<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> (usize, usize) {
    (rng.gen_range(0..rows), rng.gen_range(0..cols))
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Vec<Scene>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let extent = cfg.extent();
    let (rows, cols) = (cfg.grid_rows, cfg.grid_cols);
    let mut scenes = Vec::with_capacity(cfg.n_scenes);
    for _ in 0..cfg.n_scenes {
        let team: Vec<(usize, usize)> =
            (0..cfg.segments).map(|_| random_cell(rows, cols, &mut rng)).collect();
        let mut positions = Vec::with_capacity(cfg.n_agents);
        for _ in 0..cfg.n_agents {
            let shared = rng.gen::<f64>() < cfg.coordination;
            let cells: Vec<(usize, usize)> = if shared {
                team.clone()
            } else {
                (0..cfg.segments).map(|_| random_cell(rows, cols, &mut rng)).collect()
            };
            // distinct landing points inside each goal cell
            let waypoints: Vec<Point> = cells
                .iter()
                .map(|&(r, c)| {
                    [
                        c as f64 + 0.5 + rng.gen_range(-0.3..0.3),
                        r as f64 + 0.5 + rng.gen_range(-0.3..0.3),
                    ]
                })
                .collect();
            let start = [
                rng.gen_range(0.25..cols as f64 - 0.25),
                rng.gen_range(0.25..rows as f64 - 0.25),
            ];
            let times = arrival_times(cfg.steps, cfg.segments, &mut rng);
            positions.push(trajectory(start, &waypoints, &times, cfg.steps, cfg.noise, &mut rng));
        }
        scenes.push(Scene::fully_present(positions, DatasetKind::Synthetic, 5.0, extent)?);
    }
    Ok(scenes)
}

/// Synthetic basketball plays in raw court coordinates. Attackers start
/// near midcourt and cut through two waypoints in the attacking half;
/// defenders shadow them from the basket side. Half of the plays attack the
/// left basket.
pub fn generate_synthetic_plays(seed: u64, n_plays: usize, noise: f64) -> Vec<PlayRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let basket = [COURT_LENGTH / 2.0 - 5.25, 0.0];
    let half_w = COURT_WIDTH / 2.0 - 2.0;
    (0..n_plays)
        .map(|i| {
            let dir = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            let mut attack = Vec::with_capacity(TEAM_SIZE);
            for _ in 0..TEAM_SIZE {
                let start = [rng.gen_range(-5.0..5.0), rng.gen_range(-half_w..half_w)];
                let waypoints = [
                    [rng.gen_range(10.0..30.0), rng.gen_range(-half_w..half_w)],
                    [rng.gen_range(25.0..44.0), rng.gen_range(-half_w..half_w)],
                ];
                let times = arrival_times(PLAY_STEPS, 2, &mut rng);
                attack.push(trajectory(start, &waypoints, &times, PLAY_STEPS, noise, &mut rng));
            }
            let defense: Vec<Vec<Point>> = attack
                .iter()
                .map(|track| {
                    track
                        .iter()
                        .map(|p| [p[0] + 0.2 * (basket[0] - p[0]), p[1] + 0.2 * (basket[1] - p[1])])
                        .collect()
                })
                .collect();
            let to_raw = |p: Point| [COURT_LENGTH / 2.0 + dir * p[0], COURT_WIDTH / 2.0 + p[1]];
            let players: Vec<Vec<Point>> = attack
                .iter()
                .chain(&defense)
                .map(|t| t.iter().map(|&p| to_raw(p)).collect())
                .collect();
            let ball = players[0].iter().map(|p| [p[0], p[1], 5.0]).collect();
            PlayRecord {
                id: format!("synth-{seed}-{i}"),
                ball,
                players,
            }
        })
        .collect()
}
