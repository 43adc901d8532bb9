//! Top-down ego-centric rasterization.
//!
//! Cell `(row, col)` covers world point `x = x0 + (col + 0.5) * cell`,
//! `y = y1 - (row + 0.5) * cell`, so row 0 is the far edge and the ego sits
//! at the bottom-center.

use std::path::Path;

use super::{EgoState, Kind, RoadUser, Scene, WorldLayout};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::numcore::{Checkpoint, Payload, Tensor, RASTER_MAGIC};

pub const RASTER_SIZE: usize = 96;
pub const RASTER_CHANNELS: usize = 7;
pub const RASTER_CELL: f64 = 0.5;

pub const CH_ROAD: usize = 0;
pub const CH_CROSSWALK: usize = 1;
pub const CH_VEL_SIN: usize = 5;
pub const CH_VEL_COS: usize = 6;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    /// `[7, 96, 96]`.
    pub channels: Tensor,
    /// One box per scene user, in user order.
    pub user_boxes: Vec<BBox>,
}

fn kind_channel(kind: Kind) -> usize {
    match kind {
        Kind::Car => 2,
        Kind::Pedestrian => 3,
        Kind::Cyclist => 4,
    }
}

/// Raster footprint of `user`, or `None` when it falls entirely outside
/// the window. Cell counts use the ceil rule on the axis-aligned hull.
pub(super) fn user_box(user: &RoadUser, ego: &EgoState, world: &WorldLayout) -> Option<BBox> {
    let [x0, _, _, y1] = world.window_bounds(ego);
    let (ew, eh) = user.aabb_extent();
    let nw = (ew / world.cell - 1e-9).ceil().max(1.0);
    let nh = (eh / world.cell - 1e-9).ceil().max(1.0);
    let cx = (user.position[0] - x0) / world.cell;
    let cy = (y1 - user.position[1]) / world.cell;
    let c0 = (cx - nw / 2.0).round();
    let r0 = (cy - nh / 2.0).round();
    let n = (world.window / world.cell).round();
    let b = BBox::new(c0, r0, c0 + nw, r0 + nh).clip(n, n);
    (b.width() > 0.0 && b.height() > 0.0).then_some(b)
}

fn layout_masks(x: f64, y: f64, world: &WorldLayout) -> (bool, bool) {
    let half = world.road_half_width();
    let road = x.abs() <= half || y.abs() <= half;
    let band = |along: f64| along.abs() > half && along.abs() <= half + world.crosswalk_width;
    let crosswalk = (x.abs() <= half && band(y)) || (y.abs() <= half && band(x));
    (road, crosswalk)
}

pub fn rasterize(scene: &Scene) -> Raster {
    let world = &scene.world;
    let n = RASTER_SIZE;
    let plane = n * n;
    let mut data = vec![0.0; RASTER_CHANNELS * plane];
    let [x0, _, _, y1] = world.window_bounds(&scene.ego);
    for row in 0..n {
        let y = y1 - (row as f64 + 0.5) * world.cell;
        for col in 0..n {
            let x = x0 + (col as f64 + 0.5) * world.cell;
            let (road, crosswalk) = layout_masks(x, y, world);
            let i = row * n + col;
            data[CH_ROAD * plane + i] = f64::from(u8::from(road));
            data[CH_CROSSWALK * plane + i] = f64::from(u8::from(crosswalk));
        }
    }

    let mut user_boxes = Vec::with_capacity(scene.users.len());
    for user in &scene.users {
        let Some(b) = user_box(user, &scene.ego, world) else {
            continue;
        };
        let ch = kind_channel(user.kind);
        let (vs, vc) = (
            user.speed * user.heading.sin(),
            user.speed * user.heading.cos(),
        );
        for row in b.y_min as usize..b.y_max as usize {
            for col in b.x_min as usize..b.x_max as usize {
                let i = row * n + col;
                data[ch * plane + i] = 1.0;
                data[CH_VEL_SIN * plane + i] = vs;
                data[CH_VEL_COS * plane + i] = vc;
            }
        }
        user_boxes.push(b);
    }
    Raster {
        channels: Tensor::new(vec![RASTER_CHANNELS, n, n], data).expect("raster shape"),
        user_boxes,
    }
}

impl Raster {
    /// Stores the raster in the tensor record format with the raster magic.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ck = Checkpoint::new(RASTER_MAGIC);
        ck.push("channels", Payload::F32(self.channels.clone()));
        // box corners are whole cells
        let flat = self
            .user_boxes
            .iter()
            .flat_map(|b| [b.x_min, b.y_min, b.x_max, b.y_max].map(|v| v as u64))
            .collect();
        ck.push("user_boxes", Payload::U64(flat));
        ck.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        let channels = ck.tensor("channels")?.clone();
        let Some(Payload::U64(flat)) = ck.get("user_boxes") else {
            return Err(Error::Format {
                kind: "raster",
                reason: "missing user_boxes record".into(),
            });
        };
        let user_boxes = flat
            .chunks(4)
            .map(|c| BBox::new(c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64))
            .collect();
        Ok(Self {
            channels,
            user_boxes,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, Intent, PathVector, SceneConfig, Template};
    use std::f64::consts::FRAC_PI_2;

    fn ego() -> EgoState {
        EgoState {
            position: [1.75, -20.0],
            heading: FRAC_PI_2,
            speed: 5.0,
            intent: Intent::Straight,
        }
    }

    fn scene(users: Vec<RoadUser>) -> Scene {
        Scene {
            id: 0,
            ego: ego(),
            users,
            gt_path: PathVector::zeros(),
            world: WorldLayout::default(),
        }
    }

    fn ped(x: f64, y: f64, speed: f64) -> RoadUser {
        RoadUser {
            id: 0,
            kind: Kind::Pedestrian,
            template: Template::SidewalkPedestrian,
            position: [x, y],
            heading: FRAC_PI_2,
            speed,
            important: false,
            important_alt: false,
        }
    }

    fn channel(r: &Raster, c: usize) -> &[f64] {
        &r.channels.data()[c * RASTER_SIZE * RASTER_SIZE..(c + 1) * RASTER_SIZE * RASTER_SIZE]
    }

    #[test]
    fn empty_scene_has_masks_only() {
        let r = rasterize(&scene(vec![]));
        assert_eq!(r.channels.shape(), &[7, 96, 96]);
        for c in 2..7 {
            assert!(channel(&r, c).iter().all(|&v| v == 0.0));
        }
        assert!(channel(&r, CH_ROAD).iter().any(|&v| v == 1.0));
        assert!(channel(&r, CH_CROSSWALK).iter().any(|&v| v == 1.0));
        assert!(r.user_boxes.is_empty());
    }

    #[test]
    fn pedestrian_box_is_two_by_two() {
        let r = rasterize(&scene(vec![ped(6.0, -5.0, 1.2)]));
        let b = r.user_boxes[0];
        assert_eq!((b.width(), b.height()), (2.0, 2.0));
        let occupied = channel(&r, 3).iter().filter(|&&v| v == 1.0).count();
        assert_eq!(occupied, 4);
        // heading north: sin = 1, cos = 0
        let i = b.y_min as usize * 96 + b.x_min as usize;
        assert!((channel(&r, CH_VEL_SIN)[i] - 1.2).abs() < 1e-12);
        assert!(channel(&r, CH_VEL_COS)[i].abs() < 1e-12);
    }

    #[test]
    fn world_to_cell_mapping() {
        // window x0 = 1.75 - 24 = -22.25, y1 = -20 - 1 + 48 = 27
        let p = ped(-22.25 + 10.25, 27.0 - 20.25, 0.0);
        let r = rasterize(&scene(vec![p]));
        let b = r.user_boxes[0];
        // center at col 20.5, row 40.5; 2x2 box starts at round(19.5) = 20, round(39.5) = 40
        assert_eq!((b.x_min, b.y_min), (20.0, 40.0));
    }

    #[test]
    fn stationary_user_has_zero_velocity() {
        let r = rasterize(&scene(vec![ped(6.0, -5.0, 0.0)]));
        assert!(channel(&r, CH_VEL_SIN).iter().all(|&v| v == 0.0));
        assert!(channel(&r, CH_VEL_COS).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn car_box_follows_heading() {
        let mut car = ped(-6.0, 0.0, 5.0);
        car.kind = Kind::Car;
        car.heading = 0.0;
        let r = rasterize(&scene(vec![car]));
        let b = r.user_boxes[0];
        assert_eq!((b.width(), b.height()), (9.0, 4.0));
    }

    #[test]
    fn user_outside_window_is_dropped() {
        let r = rasterize(&scene(vec![ped(60.0, 0.0, 1.0)]));
        assert!(r.user_boxes.is_empty());
        assert!(channel(&r, 3).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn generated_boxes_are_valid_and_inside() {
        let cfg = SceneConfig::default();
        for id in 0..200 {
            let s = generate_scene(5, id, &cfg);
            let r = rasterize(&s);
            assert_eq!(r.user_boxes.len(), s.users.len());
            for b in &r.user_boxes {
                assert!(b.is_valid());
                assert!(b.x_min >= 0.0 && b.y_min >= 0.0 && b.x_max <= 96.0 && b.y_max <= 96.0);
            }
            assert!(r.channels.is_finite());
            for c in 0..5 {
                assert!(channel(&r, c).iter().all(|&v| v == 0.0 || v == 1.0));
            }
        }
    }

    #[test]
    fn raster_file_round_trip() {
        let s = generate_scene(5, 3, &SceneConfig::default());
        let r = rasterize(&s);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.icrt");
        r.save(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        assert_eq!(back.user_boxes, r.user_boxes);
        // velocity values pass through f32
        for (a, b) in back.channels.data().iter().zip(r.channels.data()) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0));
        }
    }
}
