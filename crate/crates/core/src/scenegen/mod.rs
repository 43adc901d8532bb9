//! Deterministic synthetic intersection scenes.
//!
//! World frame: intersection center at the origin, `x` east, `y` north,
//! headings in radians counterclockwise from east. Two perpendicular
//! two-lane roads (right-hand traffic) cross at the origin with crosswalks
//! on every arm. The ego vehicle approaches from the south heading north.

mod dataset;
mod oracle;
mod path;
mod raster;

use std::f64::consts::{FRAC_PI_2, PI};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

pub use dataset::{
    generate_dataset, generate_scenes, load_dataset, split_of, Dataset, DatasetStats, Manifest,
    Split, MANIFEST_FILE, SCENES_FILE,
};
pub use oracle::{
    assess_user, importance_oracle, perturb_annotations, OracleConfig, UserAssessment,
};
pub use path::{ego_path_ground_truth, turn_path, unroll_path, PathVector, PATH_STEPS};
pub use raster::{rasterize, Raster, RASTER_CELL, RASTER_CHANNELS, RASTER_SIZE};

/// Per-(seed, stream) generator. ChaCha is counter based, so every scene's
/// stream is independent of generation order.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Left,
    Straight,
    Right,
}

impl Intent {
    pub const ALL: [Intent; 3] = [Intent::Left, Intent::Straight, Intent::Right];

    /// +1 for left (counterclockwise), -1 for right, 0 for straight.
    pub fn turn_sign(self) -> f64 {
        match self {
            Intent::Left => 1.0,
            Intent::Straight => 0.0,
            Intent::Right => -1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Car,
    Pedestrian,
    Cyclist,
}

impl Kind {
    /// (length along heading, width) in meters.
    pub fn footprint(self) -> (f64, f64) {
        match self {
            Kind::Car => (4.5, 1.8),
            Kind::Cyclist => (1.8, 0.6),
            Kind::Pedestrian => (0.6, 0.6),
        }
    }

    pub fn max_speed(self) -> f64 {
        match self {
            Kind::Car => 12.0,
            Kind::Cyclist => 6.0,
            Kind::Pedestrian => 1.8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Template {
    LeadingCar,
    OncomingCar,
    CrossingCar,
    ParkedCar,
    CrosswalkPedestrian,
    SidewalkPedestrian,
    CurbsideCyclist,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoState {
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub intent: Intent,
}

impl EgoState {
    /// Distance still to travel along the approach to the intersection center.
    pub fn distance_to_center(&self) -> f64 {
        -self.position[1]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoadUser {
    pub id: u32,
    pub kind: Kind,
    pub template: Template,
    pub position: [f64; 2],
    pub heading: f64,
    pub speed: f64,
    pub important: bool,
    pub important_alt: bool,
}

impl RoadUser {
    pub fn velocity(&self) -> [f64; 2] {
        [
            self.speed * self.heading.cos(),
            self.speed * self.heading.sin(),
        ]
    }

    /// Extents (width along x, height along y) of the axis-aligned hull of
    /// the rotated footprint.
    pub fn aabb_extent(&self) -> (f64, f64) {
        let (l, w) = self.kind.footprint();
        let (c, s) = (self.heading.cos().abs(), self.heading.sin().abs());
        // snap near-axis headings so floating noise cannot grow a cell
        let (c, s) = (snap(c), snap(s));
        (l * c + w * s, l * s + w * c)
    }
}

fn snap(v: f64) -> f64 {
    if v < 1e-9 {
        0.0
    } else if v > 1.0 - 1e-9 {
        1.0
    } else {
        v
    }
}

/// Fixed intersection layout and raster window geometry, in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldLayout {
    pub lane_width: f64,
    pub crosswalk_width: f64,
    pub window: f64,
    pub cell: f64,
    /// Distance from the center at which turning ego paths begin their arc.
    pub arc_entry: f64,
    /// Ego position above the raster's bottom edge.
    pub ego_margin: f64,
}

impl Default for WorldLayout {
    fn default() -> Self {
        Self {
            lane_width: 3.5,
            crosswalk_width: 3.0,
            window: 48.0,
            cell: 0.5,
            arc_entry: 13.0,
            ego_margin: 1.0,
        }
    }
}

impl WorldLayout {
    pub fn road_half_width(&self) -> f64 {
        self.lane_width
    }

    /// Window `[x0, x1] x [y0, y1]` in world meters for a given ego.
    pub fn window_bounds(&self, ego: &EgoState) -> [f64; 4] {
        let x0 = ego.position[0] - self.window / 2.0;
        let y0 = ego.position[1] - self.ego_margin;
        [x0, x0 + self.window, y0, y0 + self.window]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: u64,
    pub ego: EgoState,
    pub users: Vec<RoadUser>,
    pub gt_path: PathVector,
    pub world: WorldLayout,
}

impl Scene {
    pub fn important_count(&self) -> usize {
        self.users.iter().filter(|u| u.important).count()
    }

    pub fn is_annotated(&self) -> bool {
        self.users.iter().any(|u| u.important)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub min_users: usize,
    pub max_users: usize,
    pub oracle: OracleConfig,
    /// Relative template frequencies, in [`Template`] declaration order.
    pub template_weights: [f64; 7],
    /// Spread in meters of timed users around their conflict point.
    pub miss_sd: f64,
    /// Probability that a timed user keeps its conflict position but moves
    /// the wrong way: reversed for pedestrians and cyclists, stopped for cars.
    pub decoy_prob: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_users: 0,
            max_users: 8,
            oracle: OracleConfig::default(),
            template_weights: [1.0, 1.8, 0.3, 0.5, 0.8, 0.5, 1.6],
            miss_sd: 2.5,
            decoy_prob: 0.5,
        }
    }
}

const TEMPLATES: [Template; 7] = [
    Template::LeadingCar,
    Template::OncomingCar,
    Template::CrossingCar,
    Template::ParkedCar,
    Template::CrosswalkPedestrian,
    Template::SidewalkPedestrian,
    Template::CurbsideCyclist,
];

fn sample_ego<R: Rng>(rng: &mut R, world: &WorldLayout) -> EgoState {
    let intent = Intent::ALL[rng.random_range(0..3)];
    // lateral lane offset ahead of a turn
    let lane_offset = -0.8 * intent.turn_sign();
    let jitter = Normal::new(0.0f64, 0.1)
        .expect("valid sd")
        .sample(rng)
        .clamp(-0.25, 0.25);
    let d = rng.random_range(14.0..24.0);
    // slower closer to the intersection
    let speed_noise = Normal::new(0.0f64, 1.0).expect("valid sd").sample(rng);
    let speed = (2.0 + 0.8 * (d - 14.0) + speed_noise).clamp(2.0, 10.0);
    EgoState {
        position: [world.lane_width / 2.0 + lane_offset + jitter, -d],
        heading: FRAC_PI_2,
        speed,
        intent,
    }
}

/// Where a user travelling `dir * speed` along one axis must start to be at
/// `target` after `t` seconds, give or take `miss`.
fn timed_start(target: f64, dir: f64, speed: f64, t: f64, miss: f64) -> f64 {
    target - dir * speed * t + miss
}

struct Placement {
    kind: Kind,
    position: [f64; 2],
    heading: f64,
    speed: f64,
    /// Positioned to meet the ego path at a waypoint's timestamp.
    timed: bool,
}

impl Placement {
    fn new(kind: Kind, position: [f64; 2], heading: f64, speed: f64, timed: bool) -> Self {
        Self {
            kind,
            position,
            heading,
            speed,
            timed,
        }
    }

    /// Same position, velocity that no longer meets the ego: walkers and
    /// cyclists turn around, leading cars pull away, other cars crawl.
    fn make_decoy<R: Rng>(&mut self, template: Template, rng: &mut R) {
        match self.kind {
            Kind::Car if template == Template::LeadingCar => {
                self.speed = (self.speed * rng.random_range(2.0..3.0)).min(self.kind.max_speed());
            }
            Kind::Car => self.speed *= rng.random_range(0.1..0.3),
            Kind::Pedestrian | Kind::Cyclist => {
                self.heading = (self.heading + PI).rem_euclid(2.0 * PI);
                if self.heading > PI {
                    self.heading -= 2.0 * PI;
                }
            }
        }
    }
}

fn place_user<R: Rng>(
    rng: &mut R,
    template: Template,
    ego: &EgoState,
    waypoints: &[[f64; 2]; PATH_STEPS + 1],
    world: &WorldLayout,
    miss_sd: f64,
) -> Placement {
    let lane = world.lane_width / 2.0;
    let half = world.road_half_width();
    let ey = ego.position[1];
    let sign = |r: &mut R| if r.random_bool(0.5) { 1.0 } else { -1.0 };
    // most moving users are timed against a waypoint of the ego path
    let k = rng.random_range(1..=PATH_STEPS);
    let t = k as f64 / ego.speed;
    let w = waypoints[k];
    let miss = Normal::new(0.0, miss_sd).expect("valid sd").sample(rng);
    match template {
        Template::LeadingCar => {
            let speed = if rng.random_bool(0.1) {
                0.0
            } else {
                rng.random_range(2.0..12.0)
            };
            let y = if speed > 0.0 {
                timed_start(w[1], 1.0, speed, t, 1.0 + miss.abs()).max(ey + 5.5)
            } else {
                ey + rng.random_range(6.0..28.0)
            };
            Placement::new(
                Kind::Car,
                [lane + rng.random_range(-0.2..0.2), y],
                FRAC_PI_2,
                speed,
                speed > 0.0,
            )
        }
        Template::OncomingCar => {
            let x = -lane + rng.random_range(-0.4..0.3);
            let speed = rng.random_range(3.0..12.0);
            Placement::new(
                Kind::Car,
                [x, timed_start(w[1], -1.0, speed, t, miss)],
                -FRAC_PI_2,
                speed,
                true,
            )
        }
        Template::CrossingCar => {
            // eastbound on the south half or westbound on the north half
            let eastbound = rng.random_bool(0.5);
            let dir = if eastbound { 1.0 } else { -1.0 };
            let speed = rng.random_range(3.0..12.0);
            let timed = rng.random_bool(0.75);
            let x = if timed {
                timed_start(w[0], dir, speed, t, miss)
            } else {
                dir * rng.random_range(half + 3.0..24.0)
            };
            let (y, heading) = if eastbound { (-lane, 0.0) } else { (lane, PI) };
            Placement::new(Kind::Car, [x, y], heading, speed, timed)
        }
        Template::ParkedCar => {
            let side = sign(rng);
            if rng.random_bool(0.6) {
                let y = ey + rng.random_range(-1.0..40.0);
                Placement::new(
                    Kind::Car,
                    [side * (half + 2.4), y],
                    FRAC_PI_2 * side,
                    0.0,
                    false,
                )
            } else {
                let x = side * rng.random_range(half + 6.0..22.0);
                Placement::new(
                    Kind::Car,
                    [x, side * (half + 2.2)],
                    if side > 0.0 { PI } else { 0.0 },
                    0.0,
                    false,
                )
            }
        }
        Template::CrosswalkPedestrian => {
            // on the south crosswalk, starting clear of the ego's crossing
            // point and paced to reach it as the ego does; when no pace fits,
            // on the far half of an east or west crosswalk heading north
            let along = half + world.crosswalk_width * rng.random_range(0.2..0.8);
            let offset = rng.random_range(4.2..6.5);
            let dir = sign(rng);
            let crossing = (1..=PATH_STEPS)
                .find(|&k| (waypoints[k][1] + along).abs() < 0.5)
                .map(|k| (k, offset * ego.speed / k as f64))
                .filter(|&(_, v)| (0.8..=Kind::Pedestrian.max_speed()).contains(&v));
            match crossing {
                Some((kc, speed)) => {
                    let tc = kc as f64 / ego.speed;
                    let x = timed_start(waypoints[kc][0], dir, speed, tc, miss / 8.0);
                    Placement::new(
                        Kind::Pedestrian,
                        [x, -along],
                        if dir > 0.0 { 0.0 } else { PI },
                        speed,
                        true,
                    )
                }
                None => {
                    let across = rng.random_range(0.5..half + 1.0);
                    let speed = rng.random_range(0.8..1.8);
                    Placement::new(
                        Kind::Pedestrian,
                        [dir * along, across],
                        FRAC_PI_2,
                        speed,
                        false,
                    )
                }
            }
        }
        Template::SidewalkPedestrian => {
            // beside the north-south road, walking along the sidewalk
            let side = sign(rng);
            let x = side * rng.random_range(half + 3.2..half + 6.0);
            let y = ey + rng.random_range(0.0..44.0);
            let speed = rng.random_range(0.8..1.8);
            Placement::new(
                Kind::Pedestrian,
                [x, y],
                sign(rng) * FRAC_PI_2,
                speed,
                false,
            )
        }
        Template::CurbsideCyclist => {
            let speed = rng.random_range(2.0..6.0);
            if rng.random_bool(0.5) {
                let y = timed_start(w[1], 1.0, speed, t, miss).max(ey + 3.0);
                Placement::new(Kind::Cyclist, [half - 0.5, y], FRAC_PI_2, speed, true)
            } else {
                let eastbound = rng.random_bool(0.5);
                let dir = if eastbound { 1.0 } else { -1.0 };
                let x = timed_start(w[0], dir, speed, t, miss);
                let (y, heading) = if eastbound {
                    (-half + 0.5, 0.0)
                } else {
                    (half - 0.5, PI)
                };
                Placement::new(Kind::Cyclist, [x, y], heading, speed, true)
            }
        }
    }
}

/// Generates scene `scene_id` of the stream keyed by `seed`.
pub fn generate_scene(seed: u64, scene_id: u64, cfg: &SceneConfig) -> Scene {
    let world = WorldLayout::default();
    let mut rng = stream_rng(seed, scene_id);
    let ego = sample_ego(&mut rng, &world);
    let gt_path = ego_path_ground_truth(&ego, &world, &mut rng);
    let waypoints = unroll_path(&ego, &gt_path);
    let bounds = world.window_bounds(&ego);
    let target = rng.random_range(cfg.min_users..=cfg.max_users);
    let total: f64 = cfg.template_weights.iter().sum();

    let mut users: Vec<RoadUser> = Vec::with_capacity(target);
    let mut boxes = Vec::with_capacity(target);
    let mut attempts = 0;
    while users.len() < target && attempts < 40 * target.max(1) {
        attempts += 1;
        let mut pick = rng.random_range(0.0..total);
        let mut template = TEMPLATES[TEMPLATES.len() - 1];
        for (t, w) in TEMPLATES.iter().zip(cfg.template_weights) {
            if pick < w {
                template = *t;
                break;
            }
            pick -= w;
        }
        let mut p = place_user(&mut rng, template, &ego, &waypoints, &world, cfg.miss_sd);
        if p.timed && rng.random_bool(cfg.decoy_prob) {
            p.make_decoy(template, &mut rng);
        }
        let Placement {
            kind,
            position,
            heading,
            speed,
            ..
        } = p;
        let user = RoadUser {
            id: users.len() as u32,
            kind,
            template,
            position,
            heading,
            speed: speed.min(kind.max_speed()),
            important: false,
            important_alt: false,
        };
        let (ew, eh) = user.aabb_extent();
        let inside = position[0] - ew / 2.0 >= bounds[0]
            && position[0] + ew / 2.0 <= bounds[1]
            && position[1] - eh / 2.0 >= bounds[2]
            && position[1] + eh / 2.0 <= bounds[3];
        if !inside {
            continue;
        }
        let Some(b) = raster::user_box(&user, &ego, &world) else {
            continue;
        };
        // keep a one-cell gap so boxes never touch the ego or each other
        let grown = b.translate(-1.0, -1.0);
        let grown = crate::geometry::BBox::new(
            grown.x_min,
            grown.y_min,
            grown.x_max + 2.0,
            grown.y_max + 2.0,
        );
        if boxes
            .iter()
            .any(|o| crate::geometry::intersection_area(&grown, o) > 0.0)
        {
            continue;
        }
        let ego_gap = ((position[0] - ego.position[0]).powi(2)
            + (position[1] - ego.position[1]).powi(2))
        .sqrt();
        if ego_gap < 3.0 {
            continue;
        }
        boxes.push(b);
        users.push(user);
    }

    let mut scene = Scene {
        id: scene_id,
        ego,
        users,
        gt_path,
        world,
    };
    let labels = importance_oracle(&scene, &cfg.oracle);
    for (u, l) in scene.users.iter_mut().zip(labels) {
        u.important = l;
    }
    let alt = perturb_annotations(&scene, &cfg.oracle, seed);
    for (u, l) in scene.users.iter_mut().zip(alt) {
        u.important_alt = l;
    }
    scene
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        for id in 0..20 {
            let a = serde_json::to_string(&generate_scene(3, id, &cfg)).unwrap();
            let b = serde_json::to_string(&generate_scene(3, id, &cfg)).unwrap();
            assert_eq!(a, b);
        }
        assert_ne!(generate_scene(3, 0, &cfg), generate_scene(4, 0, &cfg));
    }

    #[test]
    fn zero_user_config() {
        let cfg = SceneConfig {
            max_users: 0,
            ..SceneConfig::default()
        };
        let s = generate_scene(1, 5, &cfg);
        assert!(s.users.is_empty());
        assert_eq!(s.gt_path.angles.len(), PATH_STEPS);
    }

    #[test]
    fn scene_invariants_hold() {
        let cfg = SceneConfig::default();
        for id in 0..300 {
            let s = generate_scene(11, id, &cfg);
            assert!(s.users.len() <= 8);
            assert!((2.0..=10.0).contains(&s.ego.speed));
            let d = s.ego.distance_to_center();
            assert!((14.0..=24.0).contains(&d));
            let b = s.world.window_bounds(&s.ego);
            for u in &s.users {
                assert!(u.speed <= u.kind.max_speed());
                assert!(u.position[0] >= b[0] && u.position[0] <= b[1]);
                assert!(u.position[1] >= b[2] && u.position[1] <= b[3]);
            }
            assert!(s.gt_path.angles.iter().all(|a| a.abs() <= 12.0));
            if s.ego.intent == Intent::Straight {
                assert!(s.gt_path.angles.iter().all(|a| a.abs() < 2.0));
            }
        }
    }

    #[test]
    fn crosswalk_importance_follows_walking_direction() {
        let cfg = SceneConfig::default();
        let (mut toward, mut away) = ((0, 0), (0, 0));
        for id in 0..3000 {
            let s = generate_scene(5, id, &cfg);
            for u in s
                .users
                .iter()
                .filter(|u| u.template == Template::CrosswalkPedestrian)
            {
                if u.heading.cos().abs() < 0.5 {
                    // north half of an east or west crosswalk, out of reach
                    assert!(u.position[1] > 0.0 && !u.important);
                    continue;
                }
                let closing = u.heading.cos() * (s.ego.position[0] - u.position[0]) > 0.0;
                let slot = if closing { &mut toward } else { &mut away };
                slot.0 += usize::from(u.important);
                slot.1 += 1;
            }
        }
        assert!(toward.1 > 30 && away.1 > 30, "{toward:?} {away:?}");
        assert!(toward.0 as f64 >= 0.8 * toward.1 as f64, "{toward:?}");
        assert!(away.0 as f64 <= 0.2 * away.1 as f64, "{away:?}");
    }

    #[test]
    fn fast_leading_cars_are_rarely_important() {
        let cfg = SceneConfig::default();
        let (mut slow, mut fast) = ((0, 0), (0, 0));
        for id in 0..2000 {
            let s = generate_scene(6, id, &cfg);
            for u in s
                .users
                .iter()
                .filter(|u| u.template == Template::LeadingCar && u.speed > 0.2)
            {
                let slot = if u.speed > s.ego.speed {
                    &mut fast
                } else {
                    &mut slow
                };
                slot.0 += usize::from(u.important);
                slot.1 += 1;
            }
        }
        let rate = |c: (usize, usize)| c.0 as f64 / c.1 as f64;
        assert!(rate(slow) > 2.0 * rate(fast), "{slow:?} {fast:?}");
    }

    #[test]
    fn positive_rate_in_band() {
        let cfg = SceneConfig::default();
        let (mut pos, mut all) = (0usize, 0usize);
        for id in 0..1000 {
            let s = generate_scene(7, id, &cfg);
            pos += s.important_count();
            all += s.users.len();
        }
        let rate = pos as f64 / all as f64;
        assert!((0.2..=0.5).contains(&rate), "positive rate {rate}");
    }
}
