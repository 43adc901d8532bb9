//! Acceptance criteria 1 to 12. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any failed.
//!
//! Criteria 7 to 12 train on the 4000-scene reference corpus twice and take
//! a while; `ICARE_ACCEPTANCE_QUICK=1` skips them (reported as SKIP).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use icare::app::{self, ReferenceReport, RunConfig};
use icare::evaluation::{f1, f1_scores, pr_curve, Annotator, PrPoint, ScoredPrediction, Subset};
use icare::fusion::{AblationMode, FusionNet};
use icare::geometry::{iou, location_feature, nms, roi_pool, BBox};
use icare::numcore::{
    adam_step, grad_check, AdamConfig, AdamState, BatchNorm, Conv2d, Dense, DropoutConfig,
    GradCheckOptions, Graph, LossConfig, ParamStore, Phase, Tensor,
};
use icare::pathnet::PathNet;
use icare::proposer::ProposerNet;
use icare::Exec;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    id: u32,
    pass: Option<bool>,
    detail: String,
    /// None when the criterion is measured inside the shared reference run.
    elapsed: Option<Duration>,
}

fn timed(id: u32, f: impl FnOnce() -> (bool, String)) -> Outcome {
    let t = Instant::now();
    let (pass, detail) = f();
    Outcome {
        id,
        pass: Some(pass),
        detail,
        elapsed: Some(t.elapsed()),
    }
}

fn within(elapsed: Duration, limit_s: u64) -> bool {
    elapsed <= Duration::from_secs(limit_s)
}

fn random_box<R: Rng>(rng: &mut R, extent: f64) -> BBox {
    let (x0, y0) = (rng.random_range(0.0..extent), rng.random_range(0.0..extent));
    BBox::new(
        x0,
        y0,
        x0 + rng.random_range(0.0..extent / 2.0),
        y0 + rng.random_range(0.0..extent / 2.0),
    )
}

fn criterion_1() -> Outcome {
    timed(1, || {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut worst: f64 = 0.0;
        for _ in 0..1000 {
            let (x_min, y_min) = (
                rng.random_range(-50.0..200.0),
                rng.random_range(-50.0..200.0),
            );
            let (x_max, y_max) = (
                x_min + rng.random_range(0.0..80.0),
                y_min + rng.random_range(0.0..80.0),
            );
            let f = location_feature(&BBox::new(x_min, y_min, x_max, y_max)).to_array();
            let hand = [(x_max + x_min) / 2.0, y_max, y_max - y_min, x_max - x_min];
            for (a, b) in f.iter().zip(hand) {
                worst = worst.max((a - b).abs());
            }
        }
        (
            worst <= 1e-12,
            format!("max abs deviation {worst:.1e} over 1000 boxes"),
        )
    })
}

fn randomize_buffers(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    for p in store.iter_mut().filter(|p| !p.trainable) {
        for v in p.value.data_mut() {
            *v = if p.name.ends_with("running_var") {
                rng.random_range(0.5..2.0)
            } else {
                rng.random_range(-0.3..0.3)
            };
        }
    }
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn criterion_2() -> Outcome {
    timed(2, || {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let full = GradCheckOptions::default();
        let sampled = GradCheckOptions {
            max_entries_per_param: Some(24),
            ..GradCheckOptions::default()
        };
        let mut results: Vec<(String, f64)> = Vec::new();

        // dense -> BN (inference) -> relu -> dropout (fixed mask) -> dense, and the dropout-off path
        let mut store = ParamStore::new();
        let d1 = Dense::new(&mut store, "d1", 6, 8, &mut rng);
        let bn = BatchNorm::new(&mut store, "bn", 8);
        let d2 = Dense::new(&mut store, "d2", 8, 3, &mut rng);
        randomize_buffers(&mut store, &mut rng);
        let x = random_tensor(&[5, 6], &mut rng);
        let target = random_tensor(&[5, 3], &mut rng);
        for (name, phase) in [
            ("dense+bn+dropout(train mask)", Phase::Train),
            ("dense+bn(inference), dropout off", Phase::Eval),
        ] {
            let r = grad_check(&mut store.clone(), &full, |g, s| {
                let xv = g.input(x.clone());
                let h = d1.forward(g, s, xv)?;
                let h = bn.forward(g, s, h, Phase::Eval)?;
                let h = g.relu(h)?;
                let mut mask_rng = ChaCha8Rng::seed_from_u64(7);
                let h = DropoutConfig { keep_prob: 0.6 }.forward(g, h, phase, &mut mask_rng)?;
                let y = d2.forward(g, s, h)?;
                g.mse(y, &target)
            })
            .unwrap();
            results.push((name.to_string(), r.max_rel_error));
        }

        // conv -> relu -> conv with stride and padding
        let mut store = ParamStore::new();
        let c1 = Conv2d::new(&mut store, "c1", 3, 4, 3, 2, 1, &mut rng);
        let c2 = Conv2d::new(&mut store, "c2", 4, 2, 3, 1, 1, &mut rng);
        let x = random_tensor(&[2, 3, 9, 9], &mut rng);
        let target = random_tensor(&[2, 2, 5, 5], &mut rng);
        let r = grad_check(&mut store, &full, |g, s| {
            let xv = g.input(x.clone());
            let h = c1.forward(g, s, xv)?;
            let h = g.relu(h)?;
            let y = c2.forward(g, s, h)?;
            g.mse(y, &target)
        })
        .unwrap();
        results.push(("conv".into(), r.max_rel_error));

        // pathnet end to end, inference-mode BN
        let mut net = PathNet::with_input_size(16, 4).unwrap();
        randomize_buffers(&mut net.store, &mut rng);
        let x = random_tensor(&[2, 7, 16, 16], &mut rng);
        let target = random_tensor(&[2, 10], &mut rng);
        let arch = net.clone();
        let r = grad_check(&mut net.store, &sampled, |g, s| {
            let xv = g.input(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let vars = arch.forward_with(g, s, xv, Phase::Eval, &mut r)?;
            g.mse(vars.output, &target)
        })
        .unwrap();
        results.push(("pathnet".into(), r.max_rel_error));

        // proposer backbone plus both heads under the detection losses
        let mut net = ProposerNet::new(3);
        let x = random_tensor(&[1, 7, 16, 16], &mut rng);
        let cells = 9 * 4 * 4;
        let cls_t: Vec<f64> = (0..cells)
            .map(|i| f64::from(u8::from(i % 5 == 0)))
            .collect();
        // sampled anchors, normalized by their count as in training
        let sampled_cells = (0..cells).filter(|i| i % 3 != 0).count() as f64;
        let cls_w: Vec<f64> = (0..cells)
            .map(|i| if i % 3 == 0 { 0.0 } else { 1.0 / sampled_cells })
            .collect();
        let reg_t: Vec<f64> = (0..4 * cells)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let reg_w: Vec<f64> = (0..4 * cells)
            .map(|i| if i % 7 == 0 { 1.0 / sampled_cells } else { 0.0 })
            .collect();
        let arch = ProposerNet::new(3);
        let r = grad_check(&mut net.store, &sampled, |g, s| {
            let xv = g.input(x.clone());
            let v = arch.forward_with(g, s, xv)?;
            let a = g.bce_logits(v.logits, &cls_t, &cls_w)?;
            let b = g.smooth_l1(v.deltas, &reg_t, &reg_w, 1.0)?;
            g.add(a, b)
        })
        .unwrap();
        results.push((
            format!("proposer heads (worst {})", r.worst_param),
            r.max_rel_error,
        ));

        // fusion nets, every ablation input width
        for mode in AblationMode::ALL {
            let mut net = FusionNet::new(mode, 288, 5);
            randomize_buffers(&mut net.store, &mut rng);
            let x = random_tensor(&[6, net.input_dim], &mut rng);
            let y = vec![1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
            let arch = net.clone();
            let r = grad_check(&mut net.store, &sampled, |g, s| {
                let xv = g.input(x.clone());
                let mut r = ChaCha8Rng::seed_from_u64(0);
                let p = arch.forward_with(g, s, xv, Phase::Eval, &mut r)?;
                g.weighted_bce(p, &y, LossConfig::default())
            })
            .unwrap();
            results.push((format!("fusion {}", mode.tag()), r.max_rel_error));
        }

        let worst = results.iter().map(|r| r.1).fold(0.0, f64::max);
        let detail = results
            .iter()
            .map(|(n, e)| format!("{n} {e:.1e}"))
            .collect::<Vec<_>>()
            .join(", ");
        (
            worst <= 1e-4,
            format!("max rel error {worst:.1e} [{detail}]"),
        )
    })
}

fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    let union = (a.x_max - a.x_min) * (a.y_max - a.y_min)
        + (b.x_max - b.x_min) * (b.y_max - b.y_min)
        - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Keeps a box iff no higher-priority kept box overlaps it beyond the
/// threshold, resolved by scanning priorities from scratch each round.
fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let n = boxes.len();
    let beats = |a: usize, b: usize| scores[a] > scores[b] || (scores[a] == scores[b] && a < b);
    let mut decided: Vec<Option<bool>> = vec![None; n];
    while decided.iter().any(Option::is_none) {
        for i in 0..n {
            if decided[i].is_some() {
                continue;
            }
            let higher: Vec<usize> = (0..n).filter(|&j| j != i && beats(j, i)).collect();
            if higher.iter().all(|&j| decided[j].is_some()) {
                let suppressed = higher
                    .iter()
                    .any(|&j| decided[j] == Some(true) && iou_oracle(&boxes[j], &boxes[i]) > thr);
                decided[i] = Some(!suppressed);
            }
        }
    }
    (0..n).filter(|&i| decided[i] == Some(true)).collect()
}

fn roi_pool_oracle(map: &[f64], c: usize, h: usize, w: usize, roi: &BBox, bins: usize) -> Vec<f64> {
    let x0 = roi.x_min.clamp(0.0, w as f64);
    let x1 = roi.x_max.clamp(0.0, w as f64);
    let y0 = roi.y_min.clamp(0.0, h as f64);
    let y1 = roi.y_max.clamp(0.0, h as f64);
    let span = |lo: f64, len: f64, i: usize, limit: usize| {
        let s = ((lo + i as f64 * len / bins as f64).floor().max(0.0) as usize).min(limit - 1);
        let e = ((lo + (i + 1) as f64 * len / bins as f64).ceil().max(0.0) as usize).min(limit);
        (s, e.max(s + 1))
    };
    let mut out = Vec::new();
    for ch in 0..c {
        for i in 0..bins {
            let (r0, r1) = span(y0, y1 - y0, i, h);
            for j in 0..bins {
                let (c0, c1) = span(x0, x1 - x0, j, w);
                let mut best = f64::NEG_INFINITY;
                for r in 0..h {
                    for q in 0..w {
                        if (r0..r1).contains(&r) && (c0..c1).contains(&q) {
                            best = best.max(map[ch * h * w + r * w + q]);
                        }
                    }
                }
                out.push(best);
            }
        }
    }
    out
}

fn criterion_3() -> Outcome {
    timed(3, || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut iou_dev: f64 = 0.0;
        let mut nms_bad = 0;
        let mut roi_bad = 0;
        for k in 0..10_000 {
            let (a, b) = (random_box(&mut rng, 20.0), random_box(&mut rng, 20.0));
            iou_dev = iou_dev.max((iou(&a, &b) - iou_oracle(&a, &b)).abs());

            let n = rng.random_range(1..12);
            let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut rng, 16.0)).collect();
            // coarse scores so ties occur
            let scores: Vec<f64> = (0..n)
                .map(|_| f64::from(rng.random_range(0..6u8)) / 5.0)
                .collect();
            let thr = [0.0, 0.3, 0.5, 0.7, 1.0][k % 5];
            let mut got = nms(&boxes, &scores, thr);
            got.sort_unstable();
            if got != nms_oracle(&boxes, &scores, thr) {
                nms_bad += 1;
            }

            let (c, h, w) = (
                rng.random_range(1..3),
                rng.random_range(1..9),
                rng.random_range(1..9),
            );
            let map: Vec<f64> = (0..c * h * w)
                .map(|_| f64::from(rng.random_range(-50..50i8)))
                .collect();
            let x0 = rng.random_range(-2.0..w as f64 + 1.0);
            let y0 = rng.random_range(-2.0..h as f64 + 1.0);
            let roi = BBox::new(
                x0,
                y0,
                x0 + rng.random_range(0.0..w as f64),
                y0 + rng.random_range(0.0..h as f64),
            );
            let bins = rng.random_range(1..5);
            if roi_pool(&map, c, h, w, &roi, bins).0 != roi_pool_oracle(&map, c, h, w, &roi, bins) {
                roi_bad += 1;
            }
        }
        (
            iou_dev <= 1e-12 && nms_bad == 0 && roi_bad == 0,
            format!("10^4 instances: iou max dev {iou_dev:.1e}, nms mismatches {nms_bad}, roi_pool mismatches {roi_bad}"),
        )
    })
}

fn pr_oracle(preds: &[ScoredPrediction], total_gt: usize) -> Vec<PrPoint> {
    let mut thresholds: Vec<f64> = preds.iter().map(|p| p.score).collect();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    thresholds
        .into_iter()
        .map(|t| {
            let kept: Vec<&ScoredPrediction> = preds.iter().filter(|p| p.score >= t).collect();
            let tp = kept.iter().filter(|p| p.tp).count();
            PrPoint {
                threshold: t,
                precision: tp as f64 / kept.len() as f64,
                recall: tp as f64 / total_gt as f64,
            }
        })
        .collect()
}

fn f1_oracle(points: &[PrPoint]) -> (f64, f64) {
    let f = |p: &PrPoint| {
        if p.precision + p.recall > 0.0 {
            2.0 * p.precision * p.recall / (p.precision + p.recall)
        } else {
            0.0
        }
    };
    let best = points.iter().map(f).fold(0.0, f64::max);
    let at_half = points
        .iter()
        .filter(|p| p.threshold >= 0.5)
        .min_by(|a, b| a.threshold.total_cmp(&b.threshold))
        .map_or(0.0, f);
    (best, at_half)
}

fn criterion_4() -> Outcome {
    timed(4, || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut bad = 0;
        for _ in 0..5000 {
            let n = rng.random_range(1..=50);
            let preds: Vec<ScoredPrediction> = (0..n)
                .map(|_| ScoredPrediction {
                    score: f64::from(rng.random_range(0..20u8)) / 19.0,
                    tp: rng.random_bool(0.4),
                })
                .collect();
            let total_gt = preds.iter().filter(|p| p.tp).count() + rng.random_range(0..5) + 1;
            let got = pr_curve(&preds, total_gt).unwrap();
            let want = pr_oracle(&preds, total_gt);
            if got != want || f1_scores(&got) != f1_oracle(&want) {
                bad += 1;
            }
        }
        let anchor = f1(2.0 / 3.0, 1.0);
        (
            bad == 0 && (anchor - 0.8).abs() <= 1e-15,
            format!("5000 random sets: {bad} mismatches; F1(2/3, 1) = {anchor}"),
        )
    })
}

fn criterion_5() -> Outcome {
    timed(5, || {
        let cfg = AdamConfig {
            lr: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut worst: f64 = 0.0;
        let mut eps_regime: f64 = 0.0;
        let step = |g: f64| {
            let mut store = ParamStore::new();
            let id = store.add("theta", Tensor::scalar(0.0));
            store.get_mut(id).grad = Some(Tensor::scalar(g));
            let mut state = AdamState::new(&store);
            adam_step(&cfg, &mut state, &mut store).unwrap();
            store.value(id).item()
        };
        for _ in 0..2000 {
            let g = 10f64.powf(rng.random_range(-2.0..8.0))
                * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let moved = step(g);
            worst = worst.max((moved / (-cfg.lr * g.signum()) - 1.0).abs());
        }
        for _ in 0..200 {
            let g = 10f64.powf(rng.random_range(-12.0..-2.0));
            let moved = step(g);
            let exact = -cfg.lr * g / (g + cfg.epsilon);
            eps_regime = eps_regime.max(((moved - exact) / exact).abs());
        }
        (
            worst <= 1e-6 && eps_regime <= 1e-9,
            format!("|g| in [1e-2, 1e8]: max |step/(-lr sign g) - 1| = {worst:.1e}; |g| < 1e-2 follows -lr g/(|g|+eps) to {eps_regime:.1e}"),
        )
    })
}

fn criterion_6() -> Outcome {
    timed(6, || {
        let cfg = LossConfig::default();
        let eval = |y: f64| {
            let mut g = Graph::new();
            let p = g.input(Tensor::vector(vec![0.5]));
            let l = g.weighted_bce(p, &[y], cfg).unwrap();
            g.value(l).item()
        };
        let (pos, neg) = (eval(1.0), eval(0.0));
        let ln2 = std::f64::consts::LN_2;
        (
            (pos - 2.0 * ln2).abs() <= 1e-12 && (neg - ln2).abs() <= 1e-12,
            format!(
                "y=1: {pos:.15} (2 ln 2 = {:.15}); y=0: {neg:.15}",
                2.0 * ln2
            ),
        )
    })
}

fn reference_config(root: &Path) -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.cfg");
    let mut cfg = RunConfig::load(&path).expect("committed reference config");
    cfg.data_dir = root.join("data");
    cfg.out_dir = root.join("run");
    cfg
}

fn without_config(d: BTreeMap<String, String>) -> BTreeMap<String, String> {
    d.into_iter()
        .filter(|(k, _)| k != app::CONFIG_FILE)
        .collect()
}

fn reference_criteria() -> Vec<Outcome> {
    let first_dir = tempfile::tempdir().unwrap();
    let second_dir = tempfile::tempdir().unwrap();
    let cfg = reference_config(first_dir.path());
    let t = Instant::now();
    let report: ReferenceReport = app::run_reference(&cfg, Exec::Parallel).expect("reference run");
    let elapsed = t.elapsed();
    println!(
        "reference run: {} scenes, positive rate {:.3}, test disagreement {:.3}, {:.0} s",
        report.stats.scenes,
        report.stats.positive_rate,
        report.stats.test_disagreement_rate,
        elapsed.as_secs_f64()
    );
    let mut out = Vec::new();

    let p = &report.path;
    out.push(Outcome {
        id: 7,
        pass: Some(p.mae_by_step[9] >= p.mae_by_step[0] && p.spearman > 0.0),
        detail: format!(
            "MAE step1 {:.2} deg, step10 {:.2} deg, spearman {:.3}; test MSE {:.2} vs mean-path baseline {:.2} deg^2",
            p.mae_by_step[0], p.mae_by_step[9], p.spearman, p.test_mse_deg2, p.baseline_mse_deg2
        ),
        elapsed: None,
    });

    let table = &report.ablation;
    let main = |m| table.mean_f1(m, Annotator::Main).unwrap_or(f64::NAN);
    let seeds = table
        .summary_for(AblationMode::A, Annotator::Main, Subset::AllFrames)
        .map_or(0, |s| s.runs);
    let (a, b, c, d) = (
        main(AblationMode::A),
        main(AblationMode::B),
        main(AblationMode::C),
        main(AblationMode::D),
    );
    out.push(Outcome {
        id: 8,
        pass: Some(seeds == 3 && c >= a + 0.03 && a >= d),
        detail: format!("mean F1_max over {seeds} seeds: A {a:.4}, B {b:.4} (reported), C {c:.4}, D {d:.4}; need C >= A + 0.03 and A >= D"),
        elapsed: None,
    });

    let mut uplift = Vec::new();
    let mut ok9 = true;
    for m in AblationMode::ALL {
        let all = table
            .summary_for(m, Annotator::Main, Subset::AllFrames)
            .map_or(f64::NAN, |s| s.f1_max_mean);
        let ann = table
            .summary_for(m, Annotator::Main, Subset::Annotated)
            .map_or(f64::NAN, |s| s.f1_max_mean);
        ok9 &= ann >= all;
        uplift.push(format!("{} {all:.4}->{ann:.4}", m.tag()));
    }
    out.push(Outcome {
        id: 9,
        pass: Some(ok9),
        detail: format!("all frames -> annotated only: {}", uplift.join(", ")),
        elapsed: None,
    });

    let alt = |m| table.mean_f1(m, Annotator::Alt).unwrap_or(f64::NAN);
    let mut ok10 = alt(AblationMode::C) > alt(AblationMode::A);
    let mut rows = Vec::new();
    for m in AblationMode::ALL {
        ok10 &= alt(m) <= main(m);
        rows.push(format!("{} {:.4}/{:.4}", m.tag(), main(m), alt(m)));
    }
    out.push(Outcome {
        id: 10,
        pass: Some(ok10 && seeds == 3),
        detail: format!(
            "same/alt annotator F1_max: {}; need alt C > alt A",
            rows.join(", ")
        ),
        elapsed: None,
    });

    let pr = &report.proposer;
    out.push(Outcome {
        id: 11,
        pass: Some(pr.recall >= 0.8),
        detail: format!(
            "recall {:.4} of important boxes on {} test scenes (IoU {}, top-{})",
            pr.recall, pr.test_scenes, pr.iou, pr.top_k
        ),
        elapsed: None,
    });

    let t = Instant::now();
    let cfg2 = reference_config(second_dir.path());
    let again = app::run_reference(&cfg2, Exec::Sequential).expect("reference rerun");
    let first = without_config(app::digests(&cfg.out_dir).unwrap());
    let second = without_config(app::digests(&cfg2.out_dir).unwrap());
    let differing: Vec<&String> = first
        .keys()
        .filter(|k| second.get(*k) != first.get(*k))
        .collect();
    let same_report = serde_json::to_vec(&again).unwrap() == serde_json::to_vec(&report).unwrap();
    out.push(Outcome {
        id: 12,
        pass: Some(differing.is_empty() && first.len() == second.len() && same_report),
        detail: format!(
            "rerun (sequential) vs first run (parallel): {} files compared, {} differ {:?}",
            first.len(),
            differing.len(),
            differing
        ),
        elapsed: Some(t.elapsed()),
    });

    // the reference run itself must fit the combined per-criterion budgets
    let budget = 15 * 60 + 45 * 60 + 10 * 60 + 15 * 60;
    if !within(elapsed, budget) {
        for o in out.iter_mut().filter(|o| o.id != 12) {
            o.pass = Some(false);
            o.detail.push_str(&format!(
                " (reference run took {:.0} s, budget {budget} s)",
                elapsed.as_secs_f64()
            ));
        }
    }
    out
}

fn main() -> ExitCode {
    let limits: [(u32, u64); 6] = [(1, 1), (2, 120), (3, 30), (4, 10), (5, 10), (6, 10)];
    let mut outcomes = vec![
        criterion_1(),
        criterion_2(),
        criterion_3(),
        criterion_4(),
        criterion_5(),
        criterion_6(),
    ];
    for o in &mut outcomes {
        let limit = limits
            .iter()
            .find(|l| l.0 == o.id)
            .map_or(u64::MAX, |l| l.1);
        let took = o.elapsed.unwrap_or_default();
        if !within(took, limit) {
            o.pass = Some(false);
            o.detail.push_str(&format!(
                " (took {:.2} s, limit {limit} s)",
                took.as_secs_f64()
            ));
        }
    }
    if std::env::var_os("ICARE_ACCEPTANCE_QUICK").is_some() {
        for id in 7..=12 {
            outcomes.push(Outcome {
                id,
                pass: None,
                detail: "reference corpus criteria skipped (ICARE_ACCEPTANCE_QUICK)".into(),
                elapsed: None,
            });
        }
    } else {
        outcomes.extend(reference_criteria());
    }
    let mut failed = 0;
    for o in &outcomes {
        let tag = match o.pass {
            Some(true) => "PASS",
            Some(false) => {
                failed += 1;
                "FAIL"
            }
            None => "SKIP",
        };
        let took = o.elapsed.map_or_else(
            || "in reference run".to_string(),
            |d| format!("{:.2} s", d.as_secs_f64()),
        );
        println!("criterion {:>2}: {tag} ({took}) {}", o.id, o.detail);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
