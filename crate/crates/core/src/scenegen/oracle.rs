//! Rule-based importance labels.
//!
//! A user is important when, moving at constant velocity, it comes within
//! `r_safe` of the ego vehicle at one of the ego's future waypoints (matched
//! in time at the ego's speed), or when it stands still inside the ego's
//! path corridor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::path::unroll_path;
use super::{stream_rng, EgoState, PathVector, RoadUser, Scene};

const STATIONARY_SPEED: f64 = 0.2;
const ALT_STREAM_KEY: u64 = 0xA17A_D0C5_5EED_0002;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub r_safe: f64,
    pub corridor_halfwidth: f64,
    pub horizon_steps: usize,
    pub boundary_band: f64,
    pub flip_prob: f64,
    /// Thresholds of the second annotator.
    pub alt_r_safe: f64,
    pub alt_corridor_halfwidth: f64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            r_safe: 4.0,
            corridor_halfwidth: 1.5,
            horizon_steps: 10,
            boundary_band: 1.0,
            flip_prob: 0.05,
            alt_r_safe: 3.0,
            alt_corridor_halfwidth: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UserAssessment {
    /// Smallest center distance over the time-matched waypoints.
    pub min_distance: f64,
    /// Distance from the user's center to the ego path polyline.
    pub corridor_distance: f64,
    pub stationary: bool,
}

impl UserAssessment {
    pub fn important(&self, r_safe: f64, corridor: f64) -> bool {
        self.min_distance <= r_safe || (self.stationary && self.corridor_distance <= corridor)
    }
}

fn point_segment_distance(p: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - qx).powi(2) + (p[1] - qy).powi(2)).sqrt()
}

pub fn assess_user(
    ego: &EgoState,
    path: &PathVector,
    user: &RoadUser,
    horizon_steps: usize,
) -> UserAssessment {
    let waypoints = unroll_path(ego, path);
    let steps = horizon_steps.min(waypoints.len() - 1);
    let v = user.velocity();
    let mut min_distance = f64::INFINITY;
    for (k, w) in waypoints.iter().take(steps + 1).enumerate() {
        let t = k as f64 / ego.speed;
        let ux = user.position[0] + v[0] * t;
        let uy = user.position[1] + v[1] * t;
        min_distance = min_distance.min(((ux - w[0]).powi(2) + (uy - w[1]).powi(2)).sqrt());
    }
    let corridor_distance = waypoints[..=steps]
        .windows(2)
        .map(|s| point_segment_distance(user.position, s[0], s[1]))
        .fold(f64::INFINITY, f64::min);
    UserAssessment {
        min_distance,
        corridor_distance,
        stationary: user.speed < STATIONARY_SPEED,
    }
}

/// Primary annotator labels, one per user in scene order.
pub fn importance_oracle(scene: &Scene, cfg: &OracleConfig) -> Vec<bool> {
    scene
        .users
        .iter()
        .map(|u| {
            assess_user(&scene.ego, &scene.gt_path, u, cfg.horizon_steps)
                .important(cfg.r_safe, cfg.corridor_halfwidth)
        })
        .collect()
}

/// Second-annotator labels: stricter thresholds, then a seeded label flip
/// with probability `flip_prob` for users whose closest approach lies within
/// `boundary_band` of the stricter radius.
pub fn perturb_annotations(scene: &Scene, cfg: &OracleConfig, seed: u64) -> Vec<bool> {
    let mut rng = stream_rng(seed ^ ALT_STREAM_KEY, scene.id);
    scene
        .users
        .iter()
        .map(|u| {
            let a = assess_user(&scene.ego, &scene.gt_path, u, cfg.horizon_steps);
            let label = a.important(cfg.alt_r_safe, cfg.alt_corridor_halfwidth);
            let draw: f64 = rng.random();
            let near_boundary = (a.min_distance - cfg.alt_r_safe).abs() <= cfg.boundary_band;
            if near_boundary && draw < cfg.flip_prob {
                !label
            } else {
                label
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::scenegen::path::turn_path;
    use crate::scenegen::{Intent, Kind, Template, WorldLayout};

    fn ego(intent: Intent, y: f64, speed: f64) -> EgoState {
        EgoState {
            position: [1.75, y],
            heading: FRAC_PI_2,
            speed,
            intent,
        }
    }

    fn user(kind: Kind, position: [f64; 2], heading: f64, speed: f64) -> RoadUser {
        RoadUser {
            id: 0,
            kind,
            template: Template::LeadingCar,
            position,
            heading,
            speed,
            important: false,
            important_alt: false,
        }
    }

    fn scene(ego: EgoState, path: PathVector, users: Vec<RoadUser>) -> Scene {
        Scene {
            id: 0,
            ego,
            users,
            gt_path: path,
            world: WorldLayout::default(),
        }
    }

    #[test]
    fn stationary_pedestrian_ahead_is_important() {
        let e = ego(Intent::Straight, -20.0, 5.0);
        let s = scene(
            e,
            PathVector::zeros(),
            vec![user(Kind::Pedestrian, [1.75, -15.0], 0.0, 0.0)],
        );
        assert_eq!(importance_oracle(&s, &OracleConfig::default()), vec![true]);
    }

    #[test]
    fn car_behind_moving_away_is_not_important() {
        let e = ego(Intent::Straight, -20.0, 5.0);
        // 20 m behind, heading south at 8 m/s: gap grows from 20 m
        let s = scene(
            e,
            PathVector::zeros(),
            vec![user(Kind::Car, [1.75, -40.0], -FRAC_PI_2, 8.0)],
        );
        let a = assess_user(&s.ego, &s.gt_path, &s.users[0], 10);
        assert!((a.min_distance - 20.0).abs() < 1e-12);
        assert_eq!(importance_oracle(&s, &OracleConfig::default()), vec![false]);
    }

    #[test]
    fn oncoming_car_depends_on_intent() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let left = turn_path(Intent::Left, 8.0, 1, 0.0, &mut rng);
        // Oncoming car on the far side of its lane, 10 m/s south; ego at 5 m/s.
        let car = user(Kind::Car, [-2.6, 11.0], -FRAC_PI_2, 10.0);
        let e = ego(Intent::Left, -14.0, 5.0);
        let s_left = scene(e.clone(), left, vec![car.clone()]);
        let s_straight = scene(
            EgoState {
                intent: Intent::Straight,
                ..e
            },
            PathVector::zeros(),
            vec![car],
        );
        let cfg = OracleConfig::default();
        let a_left = assess_user(&s_left.ego, &s_left.gt_path, &s_left.users[0], 10);
        let a_straight = assess_user(
            &s_straight.ego,
            &s_straight.gt_path,
            &s_straight.users[0],
            10,
        );
        // straight: closest matched sample is k = 8, ego (1.75, -6), car (-2.6, -5)
        assert!((a_straight.min_distance - (4.35f64.powi(2) + 1.0).sqrt()).abs() < 1e-9);
        assert!(a_left.min_distance < 1.0, "{}", a_left.min_distance);
        assert_eq!(importance_oracle(&s_left, &cfg), vec![true]);
        assert_eq!(importance_oracle(&s_straight, &cfg), vec![false]);
    }

    #[test]
    fn alt_annotator_thresholds() {
        // closest approach 3.5 m: inside 4.0, outside 3.0
        let e = ego(Intent::Straight, -20.0, 5.0);
        let far = user(Kind::Pedestrian, [11.75, -15.0], PI, 0.0);
        let mid = user(Kind::Pedestrian, [5.25, -15.0], 0.0, 0.0);
        let s = scene(e, PathVector::zeros(), vec![far, mid]);
        let cfg = OracleConfig {
            flip_prob: 0.0,
            ..OracleConfig::default()
        };
        assert_eq!(importance_oracle(&s, &cfg), vec![false, true]);
        assert_eq!(perturb_annotations(&s, &cfg, 1), vec![false, false]);
        // flipping only ever touches the boundary band
        let always = OracleConfig {
            flip_prob: 0.999_999,
            ..OracleConfig::default()
        };
        assert_eq!(perturb_annotations(&s, &always, 1), vec![false, true]);
    }

    #[test]
    fn larger_radius_never_removes_labels() {
        let cfg = crate::scenegen::SceneConfig::default();
        for id in 0..200 {
            let s = crate::scenegen::generate_scene(5, id, &cfg);
            let small = importance_oracle(
                &s,
                &OracleConfig {
                    r_safe: 3.0,
                    ..OracleConfig::default()
                },
            );
            let large = importance_oracle(
                &s,
                &OracleConfig {
                    r_safe: 5.0,
                    ..OracleConfig::default()
                },
            );
            for (a, b) in small.iter().zip(&large) {
                assert!(!a || *b);
            }
        }
    }
}
