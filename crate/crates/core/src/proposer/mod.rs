//! Stage one: anchor-based proposals of important road users.

mod anchors;
mod net;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use anchors::{
    assign_anchors, decode, decode_boxes, encode, generate_anchors, AnchorAssignment, AnchorLabel,
    ANCHORS_PER_CELL, ANCHOR_RATIOS, ANCHOR_SCALES, FEATURE_STRIDE,
};
pub use net::{ProposerNet, ProposerOutput, ProposerVars, FEATURE_CHANNELS};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::{iou, nms_limited, roi_pool, BBox};
use crate::numcore::{adam_step, AdamConfig, AdamState, Graph, Tensor};
use crate::scenegen::{rasterize, Raster, Scene, RASTER_SIZE};

pub const ROI_BINS: usize = 4;
pub const APPEARANCE_DIM: usize = FEATURE_CHANNELS * ROI_BINS * ROI_BINS;
const INFER_BATCH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    pub objectness: f64,
    /// RoI-pooled backbone activations, `32 * 4 * 4` values.
    pub appearance: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProposalSource {
    Proposer,
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposeConfig {
    pub nms_iou: f64,
    pub conf_threshold: f64,
    pub max_out: usize,
}

impl Default for ProposeConfig {
    fn default() -> Self {
        Self {
            nms_iou: 0.7,
            conf_threshold: 0.5,
            max_out: 20,
        }
    }
}

/// Max-pools `bbox` (raster pixels) out of a `[32, fh, fw]` feature map.
pub fn appearance(feature: &Tensor, bbox: &BBox) -> Vec<f64> {
    let s = feature.shape();
    let roi = bbox.scale(1.0 / FEATURE_STRIDE as f64);
    roi_pool(feature.data(), s[0], s[1], s[2], &roi, ROI_BINS).0
}

/// Decode, clip, suppress and threshold one raster's anchors.
pub fn propose_from_output(out: &ProposerOutput, cfg: &ProposeConfig) -> Vec<Proposal> {
    let s = out.feature.shape();
    let (fh, fw) = (s[1], s[2]);
    let (w, h) = ((fw * FEATURE_STRIDE) as f64, (fh * FEATURE_STRIDE) as f64);
    let anchors = generate_anchors(fh, fw);
    // thresholding before suppression keeps the same survivors: a discarded
    // box scores below every kept one and so never suppresses it
    let keep: Vec<usize> = (0..anchors.len())
        .filter(|&i| out.objectness[i] >= cfg.conf_threshold)
        .collect();
    let mut boxes = Vec::with_capacity(keep.len());
    let mut scores = Vec::with_capacity(keep.len());
    let mut idx = Vec::with_capacity(keep.len());
    for &i in &keep {
        let b = decode(&anchors[i], &out.deltas[i]).clip(w, h);
        if b.width() > 0.0 && b.height() > 0.0 {
            boxes.push(b);
            scores.push(out.objectness[i]);
            idx.push(i);
        }
    }
    nms_limited(&boxes, &scores, cfg.nms_iou, cfg.max_out)
        .into_iter()
        .map(|k| Proposal {
            bbox: boxes[k],
            objectness: scores[k],
            appearance: appearance(&out.feature, &boxes[k]),
        })
        .collect()
}

pub fn propose(net: &ProposerNet, raster: &Raster, cfg: &ProposeConfig) -> Result<Vec<Proposal>> {
    let out = net.infer(&[&raster.channels], Exec::Sequential)?;
    Ok(propose_from_output(&out[0], cfg))
}

/// One proposal per rasterized user, in user order, with objectness 1.
pub fn oracle_from_output(out: &ProposerOutput, raster: &Raster) -> Vec<Proposal> {
    raster
        .user_boxes
        .iter()
        .map(|b| Proposal {
            bbox: *b,
            objectness: 1.0,
            appearance: appearance(&out.feature, b),
        })
        .collect()
}

pub fn oracle_proposals(net: &ProposerNet, raster: &Raster) -> Result<Vec<Proposal>> {
    let out = net.infer(&[&raster.channels], Exec::Sequential)?;
    Ok(oracle_from_output(&out[0], raster))
}

/// Proposals for many scenes, in scene order.
pub fn proposals_for_scenes(
    net: &ProposerNet,
    scenes: &[&Scene],
    source: ProposalSource,
    cfg: &ProposeConfig,
    exec: Exec,
) -> Result<Vec<Vec<Proposal>>> {
    let mut all = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(INFER_BATCH) {
        let rasters = exec.map(chunk, |s| rasterize(s));
        let inputs: Vec<&Tensor> = rasters.iter().map(|r| &r.channels).collect();
        let outs = net.infer(&inputs, exec)?;
        for (out, r) in outs.iter().zip(&rasters) {
            all.push(match source {
                ProposalSource::Proposer => propose_from_output(out, cfg),
                ProposalSource::Oracle => oracle_from_output(out, r),
            });
        }
    }
    Ok(all)
}

/// Raster boxes of the important users of `scene`.
pub fn important_boxes(scene: &Scene, raster: &Raster) -> Vec<BBox> {
    scene
        .users
        .iter()
        .zip(&raster.user_boxes)
        .filter(|(u, _)| u.important)
        .map(|(_, b)| *b)
        .collect()
}

/// Fraction of important ground-truth boxes covered at `iou_threshold` by
/// one of the top `top_k` proposals at confidence 0.
pub fn proposal_recall(
    net: &ProposerNet,
    scenes: &[&Scene],
    top_k: usize,
    iou_threshold: f64,
    exec: Exec,
) -> Result<f64> {
    let cfg = ProposeConfig {
        conf_threshold: 0.0,
        max_out: top_k,
        ..ProposeConfig::default()
    };
    let (mut hit, mut total) = (0usize, 0usize);
    for chunk in scenes.chunks(INFER_BATCH) {
        let rasters = exec.map(chunk, |s| rasterize(s));
        let inputs: Vec<&Tensor> = rasters.iter().map(|r| &r.channels).collect();
        let outs = net.infer(&inputs, exec)?;
        for ((s, r), out) in chunk.iter().zip(&rasters).zip(&outs) {
            let props = propose_from_output(out, &cfg);
            for gt in important_boxes(s, r) {
                total += 1;
                hit += usize::from(props.iter().any(|p| iou(&p.bbox, &gt) >= iou_threshold));
            }
        }
    }
    Ok(if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposerTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Anchors sampled per image, half positive at most.
    pub anchors_per_image: usize,
    /// Validation scenes scored after every epoch.
    pub val_scenes: usize,
}

impl Default for ProposerTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            adam: AdamConfig::default(),
            anchors_per_image: 64,
            val_scenes: 200,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ProposerTrace {
    pub step_loss: Vec<f64>,
    pub val_recall: Vec<f64>,
    pub best_epoch: usize,
}

/// Per-image anchor sample: `(anchor index, is_positive)`.
fn sample_anchors(
    asg: &AnchorAssignment,
    budget: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(usize, bool)> {
    let mut pos = asg.positives();
    let mut neg = asg.negatives();
    pos.shuffle(rng);
    neg.shuffle(rng);
    let n_pos = pos.len().min(budget / 2);
    let n_neg = neg.len().min(n_pos.max(1));
    pos.truncate(n_pos);
    neg.truncate(n_neg);
    pos.into_iter()
        .map(|i| (i, true))
        .chain(neg.into_iter().map(|i| (i, false)))
        .collect()
}

/// Trains on annotated scenes; keeps the weights of the epoch with the best
/// validation recall (top 20, IoU 0.5).
pub fn train_proposer(
    train: &[&Scene],
    val: &[&Scene],
    cfg: &ProposerTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(ProposerNet, ProposerTrace)> {
    if train.is_empty() {
        return Err(Error::usage("proposer training set is empty"));
    }
    if cfg.batch_size == 0 || cfg.anchors_per_image < 2 {
        return Err(Error::config(
            "proposer batch size and anchor budget must be positive",
        ));
    }
    cfg.adam.validate()?;
    let mut net = ProposerNet::new(seed);
    let mut adam = AdamState::new(&net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f50);
    let grid = RASTER_SIZE / FEATURE_STRIDE;
    let plane = grid * grid;
    let n_anchor = ANCHORS_PER_CELL * plane;
    let anchors = generate_anchors(grid, grid);
    let val = &val[..val.len().min(cfg.val_scenes)];

    let mut trace = ProposerTrace::default();
    let mut best: Option<(f64, ProposerNet)> = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scenes: Vec<&Scene> = batch.iter().map(|&i| train[i]).collect();
            let rasters = exec.map(&scenes, |s| rasterize(s));
            let assigned = exec.map_range(scenes.len(), |k| {
                assign_anchors(&anchors, &important_boxes(scenes[k], &rasters[k]))
            });
            let b = scenes.len();
            let mut cls_t = vec![0.0; b * n_anchor];
            let mut cls_w = vec![0.0; b * n_anchor];
            let mut reg_t = vec![0.0; b * 4 * n_anchor];
            let mut reg_w = vec![0.0; b * 4 * n_anchor];
            let mut picked = Vec::with_capacity(b);
            for asg in &assigned {
                picked.push(sample_anchors(asg, cfg.anchors_per_image, &mut rng));
            }
            let total: usize = picked.iter().map(Vec::len).sum();
            let norm = 1.0 / total.max(1) as f64;
            for (n, (asg, pick)) in assigned.iter().zip(&picked).enumerate() {
                for &(i, positive) in pick {
                    cls_t[n * n_anchor + i] = f64::from(u8::from(positive));
                    cls_w[n * n_anchor + i] = norm;
                    if positive {
                        let (a, cell) = (i / plane, i % plane);
                        for j in 0..4 {
                            let k = n * 4 * n_anchor + (4 * a + j) * plane + cell;
                            reg_t[k] = asg.targets[i][j];
                            reg_w[k] = norm;
                        }
                    }
                }
            }

            let mut data = Vec::with_capacity(b * rasters[0].channels.len());
            for r in &rasters {
                data.extend_from_slice(r.channels.data());
            }
            let mut shape = vec![b];
            shape.extend_from_slice(rasters[0].channels.shape());
            let mut g = Graph::with_exec(exec);
            let x = g.input(Tensor::new(shape, data)?);
            let vars = net.forward(&mut g, x)?;
            let l_cls = g.bce_logits(vars.logits, &cls_t, &cls_w)?;
            let l_reg = g.smooth_l1(vars.deltas, &reg_t, &reg_w, 1.0)?;
            let loss = g.add(l_cls, l_reg)?;
            g.backward(loss)?;
            trace.step_loss.push(g.value(loss).item());
            net.store.zero_grad();
            net.store.accumulate_grads(&g);
            adam_step(&cfg.adam, &mut adam, &mut net.store)?;
        }
        let recall = if val.is_empty() {
            0.0
        } else {
            proposal_recall(&net, val, 20, 0.5, exec)?
        };
        trace.val_recall.push(recall);
        if best.as_ref().is_none_or(|(r, _)| recall > *r) {
            trace.best_epoch = epoch;
            best = Some((recall, net.clone()));
        }
    }
    let net = best.map(|(_, n)| n).unwrap_or(net);
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenegen::{generate_scene, SceneConfig};

    fn scene_with_users(min: usize) -> Scene {
        let cfg = SceneConfig::default();
        (0..)
            .map(|id| generate_scene(9, id, &cfg))
            .find(|s| s.users.len() >= min)
            .unwrap()
    }

    #[test]
    fn oracle_proposals_pass_boxes_through() {
        let net = ProposerNet::new(1);
        let s = scene_with_users(3);
        let r = rasterize(&s);
        let props = oracle_proposals(&net, &r).unwrap();
        assert_eq!(props.len(), s.users.len());
        for (p, b) in props.iter().zip(&r.user_boxes) {
            assert_eq!(p.bbox, *b);
            assert_eq!(p.objectness, 1.0);
            assert_eq!(p.appearance.len(), APPEARANCE_DIM);
        }
        let empty = Scene { users: vec![], ..s };
        assert!(oracle_proposals(&net, &rasterize(&empty))
            .unwrap()
            .is_empty());
    }

    #[test]
    fn zero_threshold_returns_min_of_cap_and_nms_count() {
        let net = ProposerNet::new(2);
        let r = rasterize(&scene_with_users(1));
        let out = &net.infer(&[&r.channels], Exec::Sequential).unwrap()[0];
        let uncapped = propose_from_output(
            out,
            &ProposeConfig {
                conf_threshold: 0.0,
                max_out: usize::MAX,
                ..ProposeConfig::default()
            },
        );
        let capped = propose_from_output(
            out,
            &ProposeConfig {
                conf_threshold: 0.0,
                ..ProposeConfig::default()
            },
        );
        assert_eq!(capped.len(), uncapped.len().min(20));
        assert_eq!(capped[..], uncapped[..capped.len()]);
        for p in &capped {
            assert!(
                p.bbox.is_valid()
                    && p.bbox.x_min >= 0.0
                    && p.bbox.x_max <= 96.0
                    && p.bbox.y_max <= 96.0
            );
            assert_eq!(p.appearance.len(), 512);
            assert!((0.0..=1.0).contains(&p.objectness));
        }
        for (i, a) in capped.iter().enumerate() {
            for b in &capped[i + 1..] {
                assert!(iou(&a.bbox, &b.bbox) <= 0.7);
            }
        }
    }

    #[test]
    fn parallel_and_sequential_inference_agree() {
        let net = ProposerNet::new(3);
        let rs: Vec<Raster> = (0..3)
            .map(|i| rasterize(&generate_scene(4, i, &SceneConfig::default())))
            .collect();
        let inputs: Vec<&Tensor> = rs.iter().map(|r| &r.channels).collect();
        let a = net.infer(&inputs, Exec::Sequential).unwrap();
        let b = net.infer(&inputs, Exec::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = ProposerNet::new(4);
        let bytes = net.checkpoint(None).encode();
        let back =
            ProposerNet::from_checkpoint(&crate::numcore::Checkpoint::decode(&bytes).unwrap())
                .unwrap();
        assert_eq!(back.store.iter().count(), net.store.iter().count());
        for ((_, a), (_, b)) in back.store.iter().zip(net.store.iter()) {
            assert_eq!(a.value, b.value);
        }
    }

    #[test]
    fn empty_training_set_is_a_usage_error() {
        let err = train_proposer(
            &[],
            &[],
            &ProposerTrainConfig::default(),
            0,
            Exec::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn short_training_is_deterministic_and_finite() {
        let cfg = SceneConfig::default();
        let scenes: Vec<Scene> = (0..40)
            .map(|i| generate_scene(2, i, &cfg))
            .filter(|s| s.is_annotated())
            .take(8)
            .collect();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let tc = ProposerTrainConfig {
            epochs: 1,
            batch_size: 4,
            val_scenes: 4,
            ..ProposerTrainConfig::default()
        };
        let (a, ta) = train_proposer(&refs, &refs, &tc, 5, Exec::Parallel).unwrap();
        let (b, tb) = train_proposer(&refs, &refs, &tc, 5, Exec::Sequential).unwrap();
        assert_eq!(ta, tb);
        assert!(ta.step_loss.iter().all(|l| l.is_finite()));
        assert_eq!(a.checkpoint(None).encode(), b.checkpoint(None).encode());
    }
}
