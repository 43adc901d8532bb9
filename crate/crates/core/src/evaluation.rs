//! Matching, precision-recall curves, F1 operating points and the ablation
//! harness.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::fusion::{
    make_samples, train_fusion, AblationMode, FeatureBundle, FusionNet, FusionTrace,
    FusionTrainConfig, MATCH_IOU,
};
use crate::geometry::{iou, BBox};
use crate::proposer::Proposal;
use crate::scenegen::{rasterize, Scene, PATH_STEPS};

/// A scored prediction already matched against ground truth.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredPrediction {
    pub score: f64,
    pub tp: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchResult {
    /// Per prediction, in input order.
    pub tp: Vec<bool>,
    pub false_negatives: usize,
}

fn box_key(b: &BBox) -> [f64; 4] {
    [b.x_min, b.y_min, b.x_max, b.y_max]
}

fn cmp_boxes(a: &BBox, b: &BBox) -> Ordering {
    box_key(a)
        .iter()
        .zip(box_key(b))
        .map(|(x, y)| x.total_cmp(&y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Greedy one-to-one matching by descending score. Each prediction takes the
/// unmatched ground truth of highest IoU if that IoU reaches `iou_match`.
/// Equal scores are ordered by box coordinates, so the outcome does not
/// depend on input order.
pub fn match_predictions(preds: &[(BBox, f64)], gts: &[BBox], iou_match: f64) -> MatchResult {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[b]
            .1
            .total_cmp(&preds[a].1)
            .then_with(|| cmp_boxes(&preds[a].0, &preds[b].0))
            .then(a.cmp(&b))
    });
    let mut taken = vec![false; gts.len()];
    let mut tp = vec![false; preds.len()];
    for i in order {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&preds[i].0, g);
            if v >= iou_match && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            tp[i] = true;
        }
    }
    MatchResult {
        tp,
        false_negatives: taken.iter().filter(|t| !**t).count(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// One point per distinct score, sorted by ascending threshold. A prediction
/// counts at threshold `t` when its score is at least `t`. With no
/// predictions the curve is the single point `(1, 1, 0)`.
pub fn pr_curve(preds: &[ScoredPrediction], total_gt: usize) -> Result<Vec<PrPoint>> {
    if total_gt == 0 {
        return Err(Error::usage(
            "no important ground-truth users in the evaluation set",
        ));
    }
    if preds.is_empty() {
        return Ok(vec![PrPoint {
            threshold: 1.0,
            precision: 1.0,
            recall: 0.0,
        }]);
    }
    let mut sorted = preds.to_vec();
    sorted.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut points = Vec::new();
    let (mut tp, mut fp) = (0usize, 0usize);
    for (i, p) in sorted.iter().enumerate() {
        if p.tp {
            tp += 1;
        } else {
            fp += 1;
        }
        if sorted.get(i + 1).is_none_or(|n| n.score != p.score) {
            points.push(PrPoint {
                threshold: p.score,
                precision: tp as f64 / (tp + fp) as f64,
                recall: tp as f64 / total_gt as f64,
            });
        }
    }
    points.reverse();
    Ok(points)
}

pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// `(f1_max, f1_at_half)`. The threshold-0.5 operating point is the curve
/// point with the smallest threshold at or above 0.5; none means nothing is
/// predicted there and F1 is 0.
pub fn f1_scores(points: &[PrPoint]) -> (f64, f64) {
    let best = points
        .iter()
        .map(|p| f1(p.precision, p.recall))
        .fold(0.0, f64::max);
    let half = points
        .iter()
        .find(|p| p.threshold >= 0.5)
        .map_or(0.0, |p| f1(p.precision, p.recall));
    (best, half)
}

/// Non-interpolated area under the step curve, walking thresholds downward.
pub fn average_precision(points: &[PrPoint]) -> f64 {
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    for p in points.iter().rev() {
        ap += (p.recall - prev_recall) * p.precision;
        prev_recall = p.recall;
    }
    ap
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Annotator {
    Main,
    Alt,
}

impl Annotator {
    pub fn tag(self) -> &'static str {
        match self {
            Annotator::Main => "main",
            Annotator::Alt => "alt",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "main" => Ok(Annotator::Main),
            "alt" => Ok(Annotator::Alt),
            other => Err(Error::usage(format!(
                "unknown annotator {other:?}, expected main or alt"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subset {
    /// Every test frame, including those without important users.
    AllFrames,
    /// Frames with at least one important user under the chosen annotator.
    Annotated,
}

impl Subset {
    pub fn tag(self) -> &'static str {
        match self {
            Subset::AllFrames => "all_frames",
            Subset::Annotated => "annotated",
        }
    }
}

/// Scored boxes and both annotators' important boxes for one scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneEval {
    pub scene_id: u64,
    pub predictions: Vec<(BBox, f64)>,
    pub gt_main: Vec<BBox>,
    pub gt_alt: Vec<BBox>,
}

impl SceneEval {
    pub fn gt(&self, annotator: Annotator) -> &[BBox] {
        match annotator {
            Annotator::Main => &self.gt_main,
            Annotator::Alt => &self.gt_alt,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub annotator: Annotator,
    pub subset: Subset,
    pub mode: Option<AblationMode>,
    pub seed: Option<u64>,
    pub scenes: usize,
    pub pr_points: Vec<PrPoint>,
    pub f1_max: f64,
    pub f1_at_half: f64,
    pub average_precision: f64,
    /// Important ground-truth users.
    pub positives: usize,
    /// Predictions matching no important user.
    pub negatives: usize,
    pub path_errors: Option<[f64; PATH_STEPS]>,
}

/// Matches every scene (sorted by id) and builds the curve for one
/// annotator and subset.
pub fn evaluate(scenes: &[SceneEval], annotator: Annotator, subset: Subset) -> Result<EvalReport> {
    let mut order: Vec<&SceneEval> = scenes
        .iter()
        .filter(|s| subset == Subset::AllFrames || !s.gt(annotator).is_empty())
        .collect();
    order.sort_by_key(|s| s.scene_id);
    let mut preds = Vec::new();
    let mut positives = 0;
    for s in &order {
        let gt = s.gt(annotator);
        positives += gt.len();
        let m = match_predictions(&s.predictions, gt, MATCH_IOU);
        preds.extend(
            s.predictions
                .iter()
                .zip(&m.tp)
                .map(|(&(_, score), &tp)| ScoredPrediction { score, tp }),
        );
    }
    let pr_points = pr_curve(&preds, positives)?;
    let (f1_max, f1_at_half) = f1_scores(&pr_points);
    Ok(EvalReport {
        annotator,
        subset,
        mode: None,
        seed: None,
        scenes: order.len(),
        average_precision: average_precision(&pr_points),
        pr_points,
        f1_max,
        f1_at_half,
        positives,
        negatives: preds.iter().filter(|p| !p.tp).count(),
        path_errors: None,
    })
}

/// Proposals and frozen global context for one split, computed once and
/// shared by every ablation arm.
#[derive(Clone, Debug)]
pub struct SplitFeatures<'a> {
    pub scenes: Vec<&'a Scene>,
    pub proposals: Vec<Vec<Proposal>>,
    /// Indexed like `scenes`; empty when no pathnet was supplied.
    pub contexts: Vec<Vec<f64>>,
}

impl<'a> SplitFeatures<'a> {
    pub fn bundles(&self, mode: AblationMode) -> Result<Vec<FeatureBundle>> {
        let ctx = (!self.contexts.is_empty()).then_some(self.contexts.as_slice());
        make_samples(&self.scenes, &self.proposals, ctx, mode)
    }

    /// Scores every proposal with `net` and pairs them with both
    /// annotators' important boxes.
    pub fn score(&self, net: &FusionNet, exec: Exec) -> Result<Vec<SceneEval>> {
        let bundles = self.bundles(net.mode)?;
        let scores = net.score_bundles(&bundles, exec)?;
        let mut out = Vec::with_capacity(self.scenes.len());
        let mut at = 0;
        for (scene, props) in self.scenes.iter().zip(&self.proposals) {
            let raster = rasterize(scene);
            let pick = |alt: bool| -> Vec<BBox> {
                scene
                    .users
                    .iter()
                    .zip(&raster.user_boxes)
                    .filter(|(u, _)| if alt { u.important_alt } else { u.important })
                    .map(|(_, b)| *b)
                    .collect()
            };
            let predictions = props
                .iter()
                .zip(&scores[at..at + props.len()])
                .map(|(p, &s)| (p.bbox, s))
                .collect();
            at += props.len();
            out.push(SceneEval {
                scene_id: scene.id,
                predictions,
                gt_main: pick(false),
                gt_alt: pick(true),
            });
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationConfig {
    pub modes: Vec<AblationMode>,
    pub seeds: Vec<u64>,
    pub fusion: FusionTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationArm {
    pub mode: AblationMode,
    pub seed: u64,
    pub trace: FusionTrace,
    /// Main and alt annotator, each on all frames and on annotated frames.
    pub reports: Vec<EvalReport>,
}

impl AblationArm {
    pub fn report(&self, annotator: Annotator, subset: Subset) -> &EvalReport {
        self.reports
            .iter()
            .find(|r| r.annotator == annotator && r.subset == subset)
            .expect("every arm carries all four reports")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mode: AblationMode,
    pub annotator: Annotator,
    pub subset: Subset,
    pub runs: usize,
    pub f1_max_mean: f64,
    pub f1_max_std: f64,
    pub f1_at_half_mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub arms: Vec<AblationArm>,
    pub summary: Vec<ModeSummary>,
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() == 1 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    pub fn from_arms(arms: Vec<AblationArm>) -> Self {
        let mut modes: Vec<AblationMode> = arms.iter().map(|a| a.mode).collect();
        modes.sort();
        modes.dedup();
        let mut summary = Vec::new();
        for mode in modes {
            for annotator in [Annotator::Main, Annotator::Alt] {
                for subset in [Subset::AllFrames, Subset::Annotated] {
                    let rs: Vec<&EvalReport> = arms
                        .iter()
                        .filter(|a| a.mode == mode)
                        .map(|a| a.report(annotator, subset))
                        .collect();
                    let (m, s) = mean_std(&rs.iter().map(|r| r.f1_max).collect::<Vec<_>>());
                    let (h, _) = mean_std(&rs.iter().map(|r| r.f1_at_half).collect::<Vec<_>>());
                    summary.push(ModeSummary {
                        mode,
                        annotator,
                        subset,
                        runs: rs.len(),
                        f1_max_mean: m,
                        f1_max_std: s,
                        f1_at_half_mean: h,
                    });
                }
            }
        }
        Self { arms, summary }
    }

    pub fn summary_for(
        &self,
        mode: AblationMode,
        annotator: Annotator,
        subset: Subset,
    ) -> Option<&ModeSummary> {
        self.summary
            .iter()
            .find(|s| s.mode == mode && s.annotator == annotator && s.subset == subset)
    }

    /// Mean F1_max of `mode` on all frames under `annotator`.
    pub fn mean_f1(&self, mode: AblationMode, annotator: Annotator) -> Option<f64> {
        self.summary_for(mode, annotator, Subset::AllFrames)
            .map(|s| s.f1_max_mean)
    }
}

/// Evaluates a trained net on `test` under both annotators and subsets.
pub fn evaluate_net(
    net: &FusionNet,
    test: &SplitFeatures<'_>,
    seed: Option<u64>,
    exec: Exec,
) -> Result<Vec<EvalReport>> {
    let scored = test.score(net, exec)?;
    let mut reports = Vec::with_capacity(4);
    for annotator in [Annotator::Main, Annotator::Alt] {
        for subset in [Subset::AllFrames, Subset::Annotated] {
            let mut r = evaluate(&scored, annotator, subset)?;
            r.mode = Some(net.mode);
            r.seed = seed;
            reports.push(r);
        }
    }
    Ok(reports)
}

/// Trains and evaluates one fusion head per (mode, seed), in that order.
/// `on_arm` sees each trained net, e.g. to persist it.
pub fn run_ablation<F>(
    train: &SplitFeatures<'_>,
    val: &SplitFeatures<'_>,
    test: &SplitFeatures<'_>,
    context_dim: usize,
    cfg: &AblationConfig,
    exec: Exec,
    mut on_arm: F,
) -> Result<AblationTable>
where
    F: FnMut(&FusionNet, &AblationArm) -> Result<()>,
{
    let mut arms = Vec::new();
    for &mode in &cfg.modes {
        let tr = train.bundles(mode)?;
        let va = val.bundles(mode)?;
        for &seed in &cfg.seeds {
            let (net, trace) = train_fusion(&tr, &va, mode, context_dim, &cfg.fusion, seed, exec)?;
            let arm = AblationArm {
                mode,
                seed,
                trace,
                reports: evaluate_net(&net, test, Some(seed), exec)?,
            };
            on_arm(&net, &arm)?;
            arms.push(arm);
        }
    }
    Ok(AblationTable::from_arms(arms))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAnnotatorRow {
    pub mode: AblationMode,
    pub runs: usize,
    pub same_f1: f64,
    pub cross_f1: f64,
}

/// Heads trained on the main labels, tested on the second annotator's.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossAnnotatorReport {
    pub annotator: String,
    pub rows: Vec<CrossAnnotatorRow>,
}

/// Same- versus cross-annotator mean F1_max on all frames for modes A and
/// C of an ablation table.
pub fn cross_annotator_eval(table: &AblationTable) -> Result<CrossAnnotatorReport> {
    let mut rows = Vec::new();
    for mode in [AblationMode::A, AblationMode::C] {
        let (Some(same), Some(cross)) = (
            table.summary_for(mode, Annotator::Main, Subset::AllFrames),
            table.summary_for(mode, Annotator::Alt, Subset::AllFrames),
        ) else {
            return Err(Error::Missing(format!(
                "ablation runs for mode {}",
                mode.tag()
            )));
        };
        rows.push(CrossAnnotatorRow {
            mode,
            runs: same.runs,
            same_f1: same.f1_max_mean,
            cross_f1: cross.f1_max_mean,
        });
    }
    Ok(CrossAnnotatorReport {
        annotator: Annotator::Alt.tag().to_string(),
        rows,
    })
}

/// Flat `mode,seed,annotator,subset,threshold,precision,recall` rows.
pub fn pr_points_csv(reports: &[EvalReport]) -> String {
    let mut s = String::from("mode,seed,annotator,subset,threshold,precision,recall\n");
    for r in reports {
        let mode = r.mode.map_or("-", |m| m.tag());
        let seed = r.seed.map_or_else(|| "-".to_string(), |v| v.to_string());
        for p in &r.pr_points {
            s.push_str(&format!(
                "{mode},{seed},{},{},{},{},{}\n",
                r.annotator.tag(),
                r.subset.tag(),
                p.threshold,
                p.precision,
                p.recall
            ));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn sp(score: f64, tp: bool) -> ScoredPrediction {
        ScoredPrediction { score, tp }
    }

    /// Recomputes confusion counts from scratch at every candidate threshold.
    fn brute_curve(preds: &[ScoredPrediction], total_gt: usize) -> Vec<PrPoint> {
        let mut ts: Vec<f64> = preds.iter().map(|p| p.score).collect();
        ts.sort_by(f64::total_cmp);
        ts.dedup();
        ts.iter()
            .map(|&t| {
                let tp = preds.iter().filter(|p| p.score >= t && p.tp).count();
                let fp = preds.iter().filter(|p| p.score >= t && !p.tp).count();
                PrPoint {
                    threshold: t,
                    precision: if tp + fp == 0 {
                        1.0
                    } else {
                        tp as f64 / (tp + fp) as f64
                    },
                    recall: tp as f64 / total_gt as f64,
                }
            })
            .collect()
    }

    fn brute_f1(preds: &[ScoredPrediction], total_gt: usize) -> (f64, f64) {
        let at = |t: f64| {
            let tp = preds.iter().filter(|p| p.score >= t && p.tp).count() as f64;
            let fp = preds.iter().filter(|p| p.score >= t && !p.tp).count() as f64;
            let p = if tp + fp == 0.0 { 1.0 } else { tp / (tp + fp) };
            let r = tp / total_gt as f64;
            if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            }
        };
        let best = preds.iter().map(|p| at(p.score)).fold(0.0, f64::max);
        (best, at(0.5))
    }

    #[test]
    fn hand_curve() {
        let preds = [sp(0.9, true), sp(0.8, false), sp(0.7, true), sp(0.6, false)];
        let c = pr_curve(&preds, 2).unwrap();
        let find = |t: f64| *c.iter().find(|p| p.threshold == t).unwrap();
        assert_eq!((find(0.9).precision, find(0.9).recall), (1.0, 0.5));
        assert_eq!((find(0.7).precision, find(0.7).recall), (2.0 / 3.0, 1.0));
        assert_eq!((find(0.6).precision, find(0.6).recall), (0.5, 1.0));
        assert!(c.windows(2).all(|w| w[0].threshold < w[1].threshold));
    }

    #[test]
    fn perfect_scorer_single_point() {
        let c = pr_curve(&[sp(0.8, true), sp(0.8, true)], 2).unwrap();
        assert_eq!(c.len(), 1);
        assert_eq!((c[0].precision, c[0].recall), (1.0, 1.0));
        assert_eq!(f1_scores(&c), (1.0, 1.0));
    }

    #[test]
    fn zero_ground_truth_is_usage_error() {
        assert!(matches!(
            pr_curve(&[sp(0.5, false)], 0),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn f1_values() {
        assert_eq!(f1(1.0, 1.0), 1.0);
        assert_eq!(f1(1.0, 0.0), 0.0);
        assert!((f1(2.0 / 3.0, 1.0) - 0.8).abs() < 1e-15);
        assert_eq!(f1(0.0, 0.0), 0.0);
    }

    #[test]
    fn matching_rules() {
        let g = [
            BBox::new(0.0, 0.0, 4.0, 4.0),
            BBox::new(10.0, 10.0, 14.0, 14.0),
            BBox::new(30.0, 30.0, 32.0, 32.0),
        ];
        let m = match_predictions(&g.iter().map(|b| (*b, 0.7)).collect::<Vec<_>>(), &g, 0.5);
        assert_eq!(m.tp, vec![true; 3]);
        assert_eq!(m.false_negatives, 0);
        assert_eq!(match_predictions(&[], &g, 0.5).false_negatives, 3);
        let m = match_predictions(&[(g[0], 0.8), (g[0], 0.9)], &g[..1], 0.5);
        assert_eq!(m.tp, vec![false, true]);
    }

    #[test]
    fn random_scorer_ap_near_positive_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<ScoredPrediction> = (0..20_000)
            .map(|_| sp(rng.random(), rng.random_bool(0.3)))
            .collect();
        let total = preds.iter().filter(|p| p.tp).count();
        let ap = average_precision(&pr_curve(&preds, total).unwrap());
        assert!((ap - 0.3).abs() < 0.05, "{ap}");
    }

    #[test]
    fn annotated_subset_drops_empty_frames() {
        let b = BBox::new(0.0, 0.0, 4.0, 4.0);
        let far = BBox::new(50.0, 50.0, 54.0, 54.0);
        let scenes = vec![
            SceneEval {
                scene_id: 1,
                predictions: vec![(b, 0.9), (far, 0.2)],
                gt_main: vec![b],
                gt_alt: vec![],
            },
            SceneEval {
                scene_id: 0,
                predictions: vec![(far, 0.95)],
                gt_main: vec![],
                gt_alt: vec![far],
            },
        ];
        let all = evaluate(&scenes, Annotator::Main, Subset::AllFrames).unwrap();
        let ann = evaluate(&scenes, Annotator::Main, Subset::Annotated).unwrap();
        assert_eq!((all.scenes, ann.scenes), (2, 1));
        assert_eq!(ann.f1_max, 1.0);
        assert!(all.f1_max < 1.0);
        assert_eq!(all.negatives, 2);
        let alt = evaluate(&scenes, Annotator::Alt, Subset::AllFrames).unwrap();
        assert_eq!(alt.annotator.tag(), "alt");
        assert_eq!(alt.positives, 1);
    }

    #[test]
    fn mean_std_sample() {
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
        assert_eq!(mean_std(&[4.0]), (4.0, 0.0));
    }

    fn arb_preds() -> impl Strategy<Value = (Vec<ScoredPrediction>, usize)> {
        prop::collection::vec((0u8..12, any::<bool>()), 0..50).prop_flat_map(|v| {
            let preds: Vec<ScoredPrediction> = v
                .iter()
                .map(|&(s, tp)| sp(f64::from(s) / 11.0, tp))
                .collect();
            let tps = preds.iter().filter(|p| p.tp).count();
            (Just(preds), tps.max(1)..tps + 5)
        })
    }

    fn arb_boxes(n: usize) -> impl Strategy<Value = Vec<BBox>> {
        prop::collection::vec((0u8..8, 0u8..8, 1u8..4, 1u8..4), 0..n).prop_map(|v| {
            v.into_iter()
                .map(|(x, y, w, h)| {
                    BBox::new(
                        f64::from(x),
                        f64::from(y),
                        f64::from(x + w),
                        f64::from(y + h),
                    )
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn curve_matches_brute_force((preds, total) in arb_preds()) {
            let c = pr_curve(&preds, total).unwrap();
            if preds.is_empty() {
                prop_assert_eq!(c.len(), 1);
            } else {
                prop_assert_eq!(&c, &brute_curve(&preds, total));
            }
            prop_assert_eq!(f1_scores(&c), brute_f1(&preds, total));
            prop_assert!(c.windows(2).all(|w| w[0].recall >= w[1].recall));
            for p in &c {
                let tp = preds.iter().filter(|q| q.score >= p.threshold && q.tp).count();
                prop_assert_eq!(p.recall, tp as f64 / total as f64);
            }
        }

        #[test]
        fn matching_is_order_invariant(
            boxes in arb_boxes(12),
            gts in arb_boxes(6),
            scores in prop::collection::vec(0u8..4, 12),
            rot in 0usize..12,
        ) {
            let preds: Vec<(BBox, f64)> = boxes.iter().zip(&scores).map(|(b, &s)| (*b, f64::from(s))).collect();
            let m = match_predictions(&preds, &gts, 0.5);
            let mut perm: Vec<usize> = (0..preds.len()).collect();
            perm.reverse();
            if !perm.is_empty() {
                let k = rot % perm.len();
                perm.rotate_left(k);
            }
            let shuffled: Vec<(BBox, f64)> = perm.iter().map(|&i| preds[i]).collect();
            let m2 = match_predictions(&shuffled, &gts, 0.5);
            prop_assert_eq!(m.false_negatives, m2.false_negatives);
            let mut a: Vec<(u64, u64, bool)> = preds.iter().zip(&m.tp).map(|(p, &t)| (p.0.x_min.to_bits() ^ p.0.y_min.to_bits().rotate_left(7), p.1.to_bits(), t)).collect();
            let mut b: Vec<(u64, u64, bool)> = shuffled.iter().zip(&m2.tp).map(|(p, &t)| (p.0.x_min.to_bits() ^ p.0.y_min.to_bits().rotate_left(7), p.1.to_bits(), t)).collect();
            a.sort();
            b.sort();
            prop_assert_eq!(a, b);
            let matched = m.tp.iter().filter(|t| **t).count();
            prop_assert_eq!(matched + m.false_negatives, gts.len());
        }
    }
}
