use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{EgoState, Intent, WorldLayout};

pub const PATH_STEPS: usize = 10;
pub const MAX_STEER_DEG: f64 = 12.0;
const JITTER_SD_DEG: f64 = 0.3;

/// Heading change in degrees for each of the next ten one-meter steps.
/// Positive turns left (counterclockwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathVector {
    pub angles: [f64; PATH_STEPS],
}

impl PathVector {
    pub fn zeros() -> Self {
        Self {
            angles: [0.0; PATH_STEPS],
        }
    }

    /// Angles scaled into roughly `[-1, 1]`.
    pub fn normalized(&self) -> [f64; PATH_STEPS] {
        self.angles.map(|a| a / MAX_STEER_DEG)
    }

    pub fn from_normalized(v: &[f64]) -> Self {
        let mut angles = [0.0; PATH_STEPS];
        for (a, x) in angles.iter_mut().zip(v) {
            *a = x * MAX_STEER_DEG;
        }
        Self { angles }
    }
}

/// Path for a given intent with the arc starting at 1-based step `arc_start`
/// and turn radius `radius` meters. Straight intent ignores both.
pub fn turn_path<R: Rng>(
    intent: Intent,
    radius: f64,
    arc_start: usize,
    jitter_sd: f64,
    rng: &mut R,
) -> PathVector {
    let per_meter = intent.turn_sign() * (1.0 / radius).to_degrees();
    let noise = Normal::new(0.0, jitter_sd.max(0.0)).expect("finite sd");
    let mut angles = [0.0; PATH_STEPS];
    for (i, a) in angles.iter_mut().enumerate() {
        let step = i + 1;
        let base = if step >= arc_start { per_meter } else { 0.0 };
        let j = if jitter_sd > 0.0 {
            noise.sample(rng)
        } else {
            0.0
        };
        *a = (base + j).clamp(-MAX_STEER_DEG, MAX_STEER_DEG);
    }
    PathVector { angles }
}

/// Ground-truth future path: a circular arc of radius U[8, 12] m from the
/// arc entry onward for turns, zero otherwise, plus N(0, 0.3 deg) jitter.
pub fn ego_path_ground_truth<R: Rng>(
    ego: &EgoState,
    world: &WorldLayout,
    rng: &mut R,
) -> PathVector {
    let radius = rng.random_range(8.0..12.0);
    let to_entry = ego.distance_to_center() - world.arc_entry;
    let arc_start = to_entry.ceil().max(1.0) as usize;
    turn_path(ego.intent, radius, arc_start, JITTER_SD_DEG, rng)
}

/// Positions after each one-meter step, starting with the ego position.
pub fn unroll_path(start: &EgoState, path: &PathVector) -> [[f64; 2]; PATH_STEPS + 1] {
    let mut out = [[0.0; 2]; PATH_STEPS + 1];
    out[0] = start.position;
    let mut heading = start.heading;
    for (i, a) in path.angles.iter().enumerate() {
        heading += a.to_radians();
        out[i + 1] = [out[i][0] + heading.cos(), out[i][1] + heading.sin()];
    }
    out
}
