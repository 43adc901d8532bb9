//! Stage two: per-proposal importance from concatenated local and global
//! features.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::{f1_scores, pr_curve, ScoredPrediction};
use crate::exec::Exec;
use crate::geometry::{iou, location_feature, BBox};
use crate::numcore::{
    adam_step, AdamConfig, AdamState, BatchNorm, Checkpoint, Dense, DropoutConfig, Graph,
    LossConfig, ParamStore, Payload, Phase, Tensor, Var,
};
use crate::proposer::{Proposal, APPEARANCE_DIM};
use crate::scenegen::{rasterize, Scene, PATH_STEPS, RASTER_SIZE};

pub const LOCATION_DIM: usize = 4;
pub const MATCH_IOU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationMode {
    /// Appearance only.
    A,
    /// Appearance, location and the ground-truth path as input.
    B,
    /// Appearance, location and path-network context.
    C,
    /// Location and the ground-truth path, no appearance.
    D,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::A,
        AblationMode::B,
        AblationMode::C,
        AblationMode::D,
    ];

    pub fn uses_appearance(self) -> bool {
        self != AblationMode::D
    }

    pub fn uses_location(self) -> bool {
        self != AblationMode::A
    }

    pub fn uses_context(self) -> bool {
        self == AblationMode::C
    }

    pub fn uses_path(self) -> bool {
        matches!(self, AblationMode::B | AblationMode::D)
    }

    pub fn input_dim(self, context_dim: usize) -> usize {
        let mut d = 0;
        if self.uses_appearance() {
            d += APPEARANCE_DIM;
        }
        if self.uses_location() {
            d += LOCATION_DIM;
        }
        if self.uses_context() {
            d += context_dim;
        }
        if self.uses_path() {
            d += PATH_STEPS;
        }
        d
    }

    pub fn tag(self) -> &'static str {
        match self {
            AblationMode::A => "A",
            AblationMode::B => "B",
            AblationMode::C => "C",
            AblationMode::D => "D",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(AblationMode::A),
            "B" | "b" => Ok(AblationMode::B),
            "C" | "c" => Ok(AblationMode::C),
            "D" | "d" => Ok(AblationMode::D),
            other => Err(Error::usage(format!("unknown ablation mode {other:?}"))),
        }
    }
}

/// Features of one proposal. Only the fields its mode needs are present.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    pub scene_id: u64,
    pub bbox: BBox,
    pub appearance: Option<Vec<f64>>,
    /// Normalized bottom-center location, height and width.
    pub location: Option<[f64; LOCATION_DIM]>,
    /// Shared by every bundle of a scene.
    pub context: Option<Arc<Vec<f64>>>,
    pub gt_path_input: Option<[f64; PATH_STEPS]>,
    pub label: bool,
    pub label_alt: bool,
}

fn missing(field: &str, mode: AblationMode) -> Error {
    Error::usage(format!(
        "feature bundle lacks {field}, required by mode {}",
        mode.tag()
    ))
}

/// `[appearance | location | context-or-path]` for `mode`.
pub fn build_feature_vector(mode: AblationMode, b: &FeatureBundle) -> Result<Vec<f64>> {
    let mut v = Vec::new();
    if mode.uses_appearance() {
        v.extend_from_slice(
            b.appearance
                .as_deref()
                .ok_or_else(|| missing("appearance", mode))?,
        );
    }
    if mode.uses_location() {
        v.extend_from_slice(
            b.location
                .as_ref()
                .ok_or_else(|| missing("location", mode))?,
        );
    }
    if mode.uses_context() {
        v.extend_from_slice(
            b.context
                .as_deref()
                .ok_or_else(|| missing("context", mode))?,
        );
    }
    if mode.uses_path() {
        v.extend_from_slice(
            b.gt_path_input
                .as_ref()
                .ok_or_else(|| missing("gt_path_input", mode))?,
        );
    }
    Ok(v)
}

fn boxes_where(
    scene: &Scene,
    boxes: &[BBox],
    pick: impl Fn(&crate::scenegen::RoadUser) -> bool,
) -> Vec<BBox> {
    scene
        .users
        .iter()
        .zip(boxes)
        .filter(|(u, _)| pick(u))
        .map(|(_, b)| *b)
        .collect()
}

/// One bundle per proposal. A proposal is positive iff it overlaps an
/// important ground-truth box at IoU >= 0.5, separately per annotator.
/// `contexts` is required for mode C and indexed like `scenes`.
pub fn make_samples(
    scenes: &[&Scene],
    proposals: &[Vec<Proposal>],
    contexts: Option<&[Vec<f64>]>,
    mode: AblationMode,
) -> Result<Vec<FeatureBundle>> {
    if mode.uses_context() && contexts.is_none() {
        return Err(Error::Missing("pathnet context for mode C".into()));
    }
    let n = RASTER_SIZE as f64;
    let mut out = Vec::new();
    for (k, (scene, props)) in scenes.iter().zip(proposals).enumerate() {
        let raster = rasterize(scene);
        let gt = boxes_where(scene, &raster.user_boxes, |u| u.important);
        let gt_alt = boxes_where(scene, &raster.user_boxes, |u| u.important_alt);
        let context = if mode.uses_context() {
            contexts.map(|c| Arc::new(c[k].clone()))
        } else {
            None
        };
        let path = mode.uses_path().then(|| scene.gt_path.normalized());
        for p in props {
            let hit = |boxes: &[BBox]| boxes.iter().any(|g| iou(&p.bbox, g) >= MATCH_IOU);
            out.push(FeatureBundle {
                scene_id: scene.id,
                bbox: p.bbox,
                appearance: mode.uses_appearance().then(|| p.appearance.clone()),
                location: mode
                    .uses_location()
                    .then(|| location_feature(&p.bbox).normalized(n, n).to_array()),
                context: context.clone(),
                gt_path_input: path,
                label: hit(&gt),
                label_alt: hit(&gt_alt),
            });
        }
    }
    Ok(out)
}

/// Four dense layers, 128-128-64-1, with batch norm after the first three
/// and dropout after the first two.
#[derive(Clone, Debug)]
pub struct FusionNet {
    pub store: ParamStore,
    pub mode: AblationMode,
    pub input_dim: usize,
    fcs: Vec<Dense>,
    bns: Vec<BatchNorm>,
    dropout: DropoutConfig,
}

impl FusionNet {
    pub const ARCH: &'static str =
        "fusion/v1 fc128 bn relu drop fc128 bn relu drop fc64 bn relu fc1 sigmoid";

    pub fn new(mode: AblationMode, context_dim: usize, seed: u64) -> Self {
        let input_dim = mode.input_dim(context_dim);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let widths = [input_dim, 128, 128, 64, 1];
        let mut fcs = Vec::new();
        let mut bns = Vec::new();
        for i in 0..4 {
            fcs.push(Dense::new(
                &mut store,
                &format!("fc{}", i + 1),
                widths[i],
                widths[i + 1],
                &mut rng,
            ));
            if i < 3 {
                bns.push(BatchNorm::new(
                    &mut store,
                    &format!("fc{}.bn", i + 1),
                    widths[i + 1],
                ));
            }
        }
        Self {
            store,
            mode,
            input_dim,
            fcs,
            bns,
            dropout: DropoutConfig::default(),
        }
    }

    pub fn layer_widths(&self) -> Vec<usize> {
        self.fcs.iter().map(|d| d.out_dim).collect()
    }

    /// Probabilities `[batch, 1]` on `g`, reading weights from `store`.
    pub fn forward_with<R: Rng>(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        phase: Phase,
        rng: &mut R,
    ) -> Result<Var> {
        let mut h = x;
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(g, store, h)?;
            if let Some(bn) = self.bns.get(i) {
                h = bn.forward(g, store, h, phase)?;
                h = g.relu(h)?;
                if i < 2 {
                    h = self.dropout.forward(g, h, phase, rng)?;
                }
            }
        }
        g.sigmoid(h)
    }

    /// Inference on rows of length `input_dim`.
    pub fn score_batch(&self, rows: &[Vec<f64>], exec: Exec) -> Result<Vec<f64>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let mut data = Vec::with_capacity(rows.len() * self.input_dim);
        for r in rows {
            if r.len() != self.input_dim {
                return Err(Error::usage(format!(
                    "fusion mode {} expects {} features, got {}",
                    self.mode.tag(),
                    self.input_dim,
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        let mut g = Graph::with_exec(exec);
        let x = g.input(Tensor::new(vec![rows.len(), self.input_dim], data)?);
        let mut store = self.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = self.forward_with(&mut g, &mut store, x, Phase::Eval, &mut rng)?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn score_importance(&self, vector: &[f64]) -> Result<f64> {
        Ok(self.score_batch(&[vector.to_vec()], Exec::Sequential)?[0])
    }

    pub fn score_bundles(&self, bundles: &[FeatureBundle], exec: Exec) -> Result<Vec<f64>> {
        let rows = bundles
            .iter()
            .map(|b| build_feature_vector(self.mode, b))
            .collect::<Result<Vec<_>>>()?;
        let mut out = Vec::with_capacity(rows.len());
        for chunk in rows.chunks(1024) {
            out.extend(self.score_batch(chunk, exec)?);
        }
        Ok(out)
    }

    pub fn checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store, Self::ARCH, adam);
        ck.push_text("mode", self.mode.tag());
        ck.push("input_dim", Payload::U64(vec![self.input_dim as u64]));
        ck
    }

    /// Restores a net; `context_dim` must match the one it was trained with.
    pub fn from_checkpoint(ck: &Checkpoint, context_dim: usize) -> Result<Self> {
        let arch = ck.text("arch")?;
        if arch != Self::ARCH {
            return Err(Error::usage(format!(
                "checkpoint holds {arch:?}, expected a fusion net"
            )));
        }
        let mode = AblationMode::parse(ck.text("mode")?)?;
        let Some(Payload::U64(dim)) = ck.get("input_dim") else {
            return Err(Error::usage("fusion checkpoint lacks input_dim"));
        };
        if dim[0] as usize != mode.input_dim(context_dim) {
            return Err(Error::usage(format!(
                "fusion checkpoint input_dim {} does not match mode {} with context_dim {context_dim}",
                dim[0],
                mode.tag()
            )));
        }
        let mut net = Self::new(mode, context_dim, 0);
        ck.restore_store(&mut net.store)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub loss: LossConfig,
}

impl Default for FusionTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 32,
            adam: AdamConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FusionTrace {
    pub train_loss: Vec<f64>,
    pub val_f1: Vec<f64>,
    pub best_epoch: usize,
}

/// Best F1 over thresholds of `scores` against bundle labels.
pub fn sample_f1(scores: &[f64], bundles: &[FeatureBundle]) -> f64 {
    let preds: Vec<ScoredPrediction> = scores
        .iter()
        .zip(bundles)
        .map(|(&score, b)| ScoredPrediction { score, tp: b.label })
        .collect();
    let positives = bundles.iter().filter(|b| b.label).count();
    match pr_curve(&preds, positives) {
        Ok(points) => f1_scores(&points).0,
        Err(_) => 0.0,
    }
}

/// Weighted-BCE training; keeps the epoch with the best validation F1.
pub fn train_fusion(
    train: &[FeatureBundle],
    val: &[FeatureBundle],
    mode: AblationMode,
    context_dim: usize,
    cfg: &FusionTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(FusionNet, FusionTrace)> {
    let positives = train.iter().filter(|b| b.label).count();
    if positives == 0 || positives == train.len() {
        return Err(Error::usage(
            "fusion training needs both important and not-important samples",
        ));
    }
    if cfg.batch_size < 2 {
        return Err(Error::config(
            "fusion batch size must be at least 2 for batch norm",
        ));
    }
    cfg.adam.validate()?;
    let rows = train
        .iter()
        .map(|b| build_feature_vector(mode, b))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<f64> = train.iter().map(|b| f64::from(u8::from(b.label))).collect();
    let mut net = FusionNet::new(mode, context_dim, seed);
    if let Some(r) = rows.iter().find(|r| r.len() != net.input_dim) {
        return Err(Error::usage(format!(
            "fusion mode {} expects {} features, got {}",
            mode.tag(),
            net.input_dim,
            r.len()
        )));
    }
    let mut adam = AdamState::new(&net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x4655_5345);
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut trace = FusionTrace::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let arch = net.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            if batch.len() < 2 {
                continue;
            }
            let mut data = Vec::with_capacity(batch.len() * net.input_dim);
            for &i in batch {
                data.extend_from_slice(&rows[i]);
            }
            let y: Vec<f64> = batch.iter().map(|&i| labels[i]).collect();
            let mut g = Graph::with_exec(exec);
            let x = g.input(Tensor::new(vec![batch.len(), net.input_dim], data)?);
            let p = arch.forward_with(&mut g, &mut net.store, x, Phase::Train, &mut rng)?;
            let loss = g.weighted_bce(p, &y, cfg.loss)?;
            g.backward(loss)?;
            sum += g.value(loss).item() * batch.len() as f64;
            count += batch.len();
            net.store.zero_grad();
            net.store.accumulate_grads(&g);
            adam_step(&cfg.adam, &mut adam, &mut net.store)?;
        }
        trace.train_loss.push(sum / count.max(1) as f64);
        let eval_set = if val.is_empty() { train } else { val };
        let f1 = sample_f1(&net.score_bundles(eval_set, exec)?, eval_set);
        trace.val_f1.push(f1);
        if best.as_ref().is_none_or(|(b, _)| f1 > *b) {
            trace.best_epoch = epoch;
            best = Some((f1, net.store.clone()));
        }
    }
    if let Some((_, store)) = best {
        net.store = store;
    }
    Ok((net, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{grad_check, GradCheckOptions};
    use crate::proposer::{oracle_proposals, ProposerNet};
    use crate::scenegen::{generate_scene, SceneConfig};

    fn bundle(mode: AblationMode) -> FeatureBundle {
        FeatureBundle {
            scene_id: 0,
            bbox: BBox::new(0.0, 0.0, 2.0, 2.0),
            appearance: mode.uses_appearance().then(|| vec![0.5; 512]),
            location: mode.uses_location().then_some([0.1, 0.2, 0.3, 0.4]),
            context: mode.uses_context().then(|| Arc::new(vec![1.0; 288])),
            gt_path_input: mode.uses_path().then_some([0.0; 10]),
            label: true,
            label_alt: false,
        }
    }

    #[test]
    fn feature_lengths() {
        let lens: Vec<usize> = AblationMode::ALL
            .iter()
            .map(|&m| build_feature_vector(m, &bundle(m)).unwrap().len())
            .collect();
        assert_eq!(lens, vec![512, 526, 804, 14]);
        for m in AblationMode::ALL {
            assert_eq!(
                m.input_dim(288),
                build_feature_vector(m, &bundle(m)).unwrap().len()
            );
        }
        let v = build_feature_vector(AblationMode::C, &bundle(AblationMode::C)).unwrap();
        assert_eq!(&v[512..516], &[0.1, 0.2, 0.3, 0.4]);
    }

    #[test]
    fn missing_field_names_it() {
        let err = build_feature_vector(AblationMode::C, &bundle(AblationMode::A)).unwrap_err();
        assert!(err.to_string().contains("location"), "{err}");
        let mut b = bundle(AblationMode::C);
        b.context = None;
        assert!(build_feature_vector(AblationMode::C, &b)
            .unwrap_err()
            .to_string()
            .contains("context"));
    }

    #[test]
    fn scores_are_probabilities_and_deterministic() {
        let net = FusionNet::new(AblationMode::C, 288, 3);
        assert_eq!(net.layer_widths(), vec![128, 128, 64, 1]);
        let v = build_feature_vector(AblationMode::C, &bundle(AblationMode::C)).unwrap();
        let a = net.score_importance(&v).unwrap();
        assert!(a > 0.0 && a < 1.0);
        assert_eq!(a, net.score_importance(&v).unwrap());
        assert!(matches!(
            net.score_importance(&v[..10]),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn samples_follow_oracle_labels() {
        let cfg = SceneConfig::default();
        let s = (0..)
            .map(|i| generate_scene(21, i, &cfg))
            .find(|s| {
                s.users.len() >= 4
                    && s.important_count() >= 1
                    && s.important_count() < s.users.len()
            })
            .unwrap();
        let net = ProposerNet::new(0);
        let props = vec![oracle_proposals(&net, &rasterize(&s)).unwrap()];
        let ctx = vec![vec![0.25; 288]];
        let samples = make_samples(&[&s], &props, Some(&ctx), AblationMode::C).unwrap();
        assert_eq!(samples.len(), s.users.len());
        assert_eq!(
            samples.iter().filter(|b| b.label).count(),
            s.important_count()
        );
        let alt = s.users.iter().filter(|u| u.important_alt).count();
        assert_eq!(samples.iter().filter(|b| b.label_alt).count(), alt);
        let first = samples[0].context.as_ref().unwrap();
        assert!(samples
            .iter()
            .all(|b| Arc::ptr_eq(b.context.as_ref().unwrap(), first)));
        assert!(samples.iter().all(|b| b.gt_path_input.is_none()));
        for b in &samples {
            assert!(b.location.unwrap().iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let d = make_samples(&[&s], &props, None, AblationMode::D).unwrap();
        assert!(d
            .iter()
            .all(|b| b.context.is_none() && b.appearance.is_none() && b.gt_path_input.is_some()));
        assert!(matches!(
            make_samples(&[&s], &props, None, AblationMode::C),
            Err(Error::Missing(_))
        ));
    }

    #[test]
    fn checkpoint_rejects_other_context_dim() {
        let net = FusionNet::new(AblationMode::C, 288, 1);
        let ck = Checkpoint::decode(&net.checkpoint(None).encode()).unwrap();
        assert!(FusionNet::from_checkpoint(&ck, 288).is_ok());
        assert!(matches!(
            FusionNet::from_checkpoint(&ck, 300),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn gradient_check_in_inference_mode() {
        let mut net = FusionNet::new(AblationMode::D, 288, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for p in net.store.iter_mut().filter(|p| !p.trainable) {
            for v in p.value.data_mut() {
                *v = if p.name.ends_with("running_var") {
                    rng.random_range(0.5..2.0)
                } else {
                    rng.random_range(-0.3..0.3)
                };
            }
        }
        let x = Tensor::new(
            vec![6, 14],
            (0..84).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let y = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        let arch = net.clone();
        let opts = GradCheckOptions {
            max_entries_per_param: Some(40),
            ..GradCheckOptions::default()
        };
        let report = grad_check(&mut net.store, &opts, |g, store| {
            let xv = g.input(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let p = arch.forward_with(g, store, xv, Phase::Eval, &mut r)?;
            g.weighted_bce(p, &y, LossConfig::default())
        })
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    fn toy_samples(n: usize, seed: u64) -> Vec<FeatureBundle> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let x: f64 = rng.random_range(0.0..1.0);
                let mut b = bundle(AblationMode::D);
                b.scene_id = i as u64;
                b.location = Some([x, rng.random_range(0.0..1.0), 0.1, 0.1]);
                b.label = x > 0.6;
                b
            })
            .collect()
    }

    #[test]
    fn single_class_is_a_usage_error() {
        let mut s = toy_samples(10, 0);
        s.iter_mut().for_each(|b| b.label = false);
        let err = train_fusion(
            &s,
            &[],
            AblationMode::D,
            288,
            &FusionTrainConfig::default(),
            0,
            Exec::Sequential,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Usage(_)));
    }

    #[test]
    fn learns_a_separable_toy_problem_deterministically() {
        let train = toy_samples(400, 1);
        let val = toy_samples(200, 2);
        let cfg = FusionTrainConfig {
            epochs: 8,
            ..FusionTrainConfig::default()
        };
        let (a, ta) =
            train_fusion(&train, &val, AblationMode::D, 288, &cfg, 4, Exec::Parallel).unwrap();
        let (b, tb) = train_fusion(
            &train,
            &val,
            AblationMode::D,
            288,
            &cfg,
            4,
            Exec::Sequential,
        )
        .unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.checkpoint(None).encode(), b.checkpoint(None).encode());
        assert!(ta.val_f1[ta.best_epoch] > 0.9, "{ta:?}");
    }
}
