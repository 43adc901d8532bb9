//! Anchor grid, anchor-to-ground-truth assignment and the box delta codec.

use crate::geometry::{iou, BBox};

pub const FEATURE_STRIDE: usize = 4;
pub const ANCHOR_SCALES: [f64; 3] = [4.0, 8.0, 16.0];
/// Height over width.
pub const ANCHOR_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const ANCHORS_PER_CELL: usize = ANCHOR_SCALES.len() * ANCHOR_RATIOS.len();
pub const POS_IOU: f64 = 0.5;
pub const NEG_IOU: f64 = 0.3;
/// Upper bound on the log-size deltas before exponentiation.
const DELTA_CLIP: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

/// Anchors of a `grid_h x grid_w` feature map, clipped to the
/// `(grid_w * stride) x (grid_h * stride)` raster.
///
/// Index `a * grid_h * grid_w + row * grid_w + col` matches the channel-major
/// layout of the objectness head, with `a = scale_index * 3 + ratio_index`.
pub fn generate_anchors(grid_h: usize, grid_w: usize) -> Vec<BBox> {
    let (rw, rh) = (
        (grid_w * FEATURE_STRIDE) as f64,
        (grid_h * FEATURE_STRIDE) as f64,
    );
    let mut out = Vec::with_capacity(ANCHORS_PER_CELL * grid_h * grid_w);
    for s in ANCHOR_SCALES {
        for r in ANCHOR_RATIOS {
            let (w, h) = (s / r.sqrt(), s * r.sqrt());
            for row in 0..grid_h {
                for col in 0..grid_w {
                    let cx = (col as f64 + 0.5) * FEATURE_STRIDE as f64;
                    let cy = (row as f64 + 0.5) * FEATURE_STRIDE as f64;
                    out.push(BBox::from_center(cx, cy, w, h).clip(rw, rh));
                }
            }
        }
    }
    out
}

/// `(tx, ty, tw, th)` of `gt` relative to `anchor`.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Inverse of [`encode`], without clipping.
pub fn decode(anchor: &BBox, d: &[f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let w = aw * d[2].min(DELTA_CLIP).exp();
    let h = ah * d[3].min(DELTA_CLIP).exp();
    BBox::from_center(ax + d[0] * aw, ay + d[1] * ah, w, h)
}

/// Decodes every anchor and clips to the `width x height` raster.
pub fn decode_boxes(anchors: &[BBox], deltas: &[[f64; 4]], width: f64, height: f64) -> Vec<BBox> {
    anchors
        .iter()
        .zip(deltas)
        .map(|(a, d)| decode(a, d).clip(width, height))
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AnchorLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorAssignment {
    pub labels: Vec<AnchorLabel>,
    /// Regression targets against each anchor's best-overlap ground truth;
    /// zeros where no ground truth overlaps.
    pub targets: Vec<[f64; 4]>,
}

impl AnchorAssignment {
    pub fn positives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Positive)
    }

    pub fn negatives(&self) -> Vec<usize> {
        self.indices(AnchorLabel::Negative)
    }

    fn indices(&self, l: AnchorLabel) -> Vec<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &x)| x == l)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Positive at IoU >= 0.5 or when the anchor attains a ground truth's best
/// IoU (ties included); negative below 0.3; ignored otherwise.
pub fn assign_anchors(anchors: &[BBox], gts: &[BBox]) -> AnchorAssignment {
    let mut labels = vec![AnchorLabel::Negative; anchors.len()];
    let mut targets = vec![[0.0; 4]; anchors.len()];
    if gts.is_empty() {
        return AnchorAssignment { labels, targets };
    }
    let mut gt_best = vec![0.0f64; gts.len()];
    let overlaps: Vec<Vec<f64>> = anchors
        .iter()
        .map(|a| {
            let row: Vec<f64> = gts.iter().map(|g| iou(a, g)).collect();
            for (b, &v) in gt_best.iter_mut().zip(&row) {
                *b = b.max(v);
            }
            row
        })
        .collect();
    for (i, row) in overlaps.iter().enumerate() {
        let (best_gt, best) =
            row.iter()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (j, &v)| if v > acc.1 { (j, v) } else { acc },
                );
        let argmax_hit = row.iter().zip(&gt_best).any(|(&v, &b)| b > 0.0 && v == b);
        labels[i] = if best >= POS_IOU || argmax_hit {
            AnchorLabel::Positive
        } else if best < NEG_IOU {
            AnchorLabel::Negative
        } else {
            AnchorLabel::Ignore
        };
        if best > 0.0 {
            targets[i] = encode(&gts[best_gt], &anchors[i]);
        }
    }
    AnchorAssignment { labels, targets }
}
