//! Axis-aligned box algebra: IoU, greedy NMS, RoI max pooling and the
//! bottom-center location feature.
//!
//! Boxes live in raster pixel coordinates with `y` growing downward, so the
//! bottom edge `y_max` is the one nearest the ego vehicle.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        debug_assert!(x_max >= x_min && y_max >= y_min, "inverted box");
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn from_center(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            (self.x_min + self.x_max) / 2.0,
            (self.y_min + self.y_max) / 2.0,
        )
    }

    pub fn is_valid(&self) -> bool {
        self.x_max >= self.x_min
            && self.y_max >= self.y_min
            && [self.x_min, self.y_min, self.x_max, self.y_max]
                .iter()
                .all(|v| v.is_finite())
    }

    /// Clips to `[0, w] x [0, h]`.
    pub fn clip(&self, w: f64, h: f64) -> Self {
        let x_min = self.x_min.clamp(0.0, w);
        let y_min = self.y_min.clamp(0.0, h);
        Self {
            x_min,
            y_min,
            x_max: self.x_max.clamp(x_min, w),
            y_max: self.y_max.clamp(y_min, h),
        }
    }

    pub fn translate(&self, dx: f64, dy: f64) -> Self {
        Self::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn scale(&self, f: f64) -> Self {
        Self::new(
            self.x_min * f,
            self.y_min * f,
            self.x_max * f,
            self.y_max * f,
        )
    }
}

pub fn intersection_area(a: &BBox, b: &BBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    w * h
}

/// Intersection over union; 0 when the union is empty.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection_area(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Greedy non-maximum suppression. Returns kept indices in score order; a box
/// is dropped iff its IoU with an already kept box exceeds `iou_threshold`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_threshold: f64) -> Vec<usize> {
    nms_limited(boxes, scores, iou_threshold, usize::MAX)
}

/// [`nms`] that stops once `limit` boxes are kept. The kept prefix is
/// identical to the unlimited result.
pub fn nms_limited(boxes: &[BBox], scores: &[f64], iou_threshold: f64, limit: usize) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len());
    let mut kept: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if kept.len() >= limit {
            break;
        }
        if kept
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_threshold)
        {
            kept.push(i);
        }
    }
    kept
}

/// Row or column span `[start, end)` of RoI bin `i` of `bins` over an extent
/// `[lo, lo + len)` of a map with `limit` cells.
fn bin_span(lo: f64, len: f64, i: usize, bins: usize, limit: usize) -> (usize, usize) {
    let a = (lo + i as f64 * len / bins as f64).floor();
    let b = (lo + (i + 1) as f64 * len / bins as f64).ceil();
    let mut start = a.clamp(0.0, limit as f64) as usize;
    let end = b.clamp(0.0, limit as f64) as usize;
    if start >= limit {
        start = limit - 1;
    }
    (start, end.max(start + 1))
}

/// Max-pools `roi` (in feature-map cells) of a `[channels, height, width]` map
/// into `[channels, bins, bins]`.
///
/// Returns the pooled values and, per output, the flat index of the winning
/// input cell for the backward pass. Ties go to the first cell in row-major order.
pub fn roi_pool(
    map: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    roi: &BBox,
    bins: usize,
) -> (Vec<f64>, Vec<usize>) {
    assert_eq!(map.len(), channels * height * width);
    let roi = roi.clip(width as f64, height as f64);
    let rows: Vec<_> = (0..bins)
        .map(|i| bin_span(roi.y_min, roi.height(), i, bins, height))
        .collect();
    let cols: Vec<_> = (0..bins)
        .map(|j| bin_span(roi.x_min, roi.width(), j, bins, width))
        .collect();
    let mut out = Vec::with_capacity(channels * bins * bins);
    let mut arg = Vec::with_capacity(channels * bins * bins);
    for c in 0..channels {
        let plane = c * height * width;
        for &(r0, r1) in &rows {
            for &(c0, c1) in &cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = plane + r0 * width + c0;
                for r in r0..r1 {
                    for q in c0..c1 {
                        let idx = plane + r * width + q;
                        if map[idx] > best {
                            best = map[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

/// Routes pooled-output gradients back to their argmax cells.
pub fn roi_pool_backward(grad_out: &[f64], argmax: &[usize], map_len: usize) -> Vec<f64> {
    let mut g = vec![0.0; map_len];
    for (d, &i) in grad_out.iter().zip(argmax) {
        g[i] += d;
    }
    g
}

/// `[(x_min + x_max) / 2, y_max, h, w]`: bottom-center point, height, width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocationFeature {
    pub cx_bottom: f64,
    pub y_bottom: f64,
    pub h: f64,
    pub w: f64,
}

impl LocationFeature {
    pub fn to_array(&self) -> [f64; 4] {
        [self.cx_bottom, self.y_bottom, self.h, self.w]
    }

    /// Horizontal terms divided by `raster_w`, vertical ones by `raster_h`.
    pub fn normalized(&self, raster_w: f64, raster_h: f64) -> Self {
        Self {
            cx_bottom: self.cx_bottom / raster_w,
            y_bottom: self.y_bottom / raster_h,
            h: self.h / raster_h,
            w: self.w / raster_w,
        }
    }
}

pub fn location_feature(b: &BBox) -> LocationFeature {
    LocationFeature {
        cx_bottom: (b.x_max + b.x_min) / 2.0,
        y_bottom: b.y_max,
        h: b.y_max - b.y_min,
        w: b.x_max - b.x_min,
    }
}
