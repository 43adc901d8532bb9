//! Command implementations behind the `icare` binary: dataset generation,
//! the three training stages, evaluation, ablation, plots and digest
//! verification. Every command writes its resolved configuration next to
//! its outputs.

pub mod config;
pub mod svg;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::RunConfig;

use crate::error::{Error, Result};
use crate::evaluation::{
    cross_annotator_eval, evaluate, pr_points_csv, run_ablation, AblationTable, Annotator,
    CrossAnnotatorReport, EvalReport, SplitFeatures, Subset,
};
use crate::exec::Exec;
use crate::fusion::{train_fusion, AblationMode, FusionNet, FusionTrace};
use crate::numcore::Checkpoint;
use crate::pathnet::{
    mean_path_baseline_mse, path_error_by_step, path_mse_degrees, spearman, train_pathnet, PathNet,
    PathTrace,
};
use crate::proposer::{
    proposal_recall, proposals_for_scenes, train_proposer, ProposerNet, ProposerTrace,
};
use crate::scenegen::{
    generate_dataset, load_dataset, Dataset, DatasetStats, Intent, Scene, Split, MANIFEST_FILE,
    PATH_STEPS,
};

pub const CONFIG_FILE: &str = "config.cfg";
pub const DIGESTS_FILE: &str = "digests.json";
pub const PATHNET_FILE: &str = "pathnet.ck";
pub const PROPOSER_FILE: &str = "proposer.ck";
pub const ABLATION_FILE: &str = "ablation.json";
pub const ABLATION_CSV: &str = "ablation_pr.csv";
pub const CROSS_FILE: &str = "cross_annotator.json";
pub const PATH_REPORT_FILE: &str = "path_report.json";
pub const PROPOSER_REPORT_FILE: &str = "proposer_report.json";
pub const REFERENCE_FILE: &str = "reference_report.json";

pub fn fusion_file(mode: AblationMode, seed: u64) -> String {
    format!("fusion_{}_s{seed}.ck", mode.tag())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write(path, serde_json::to_string_pretty(value)? + "\n")
}

/// Loads a checkpoint that an earlier stage should have produced.
pub fn load_prerequisite(path: &Path, what: &str) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::Missing(format!(
            "{what} checkpoint {}",
            path.display()
        )));
    }
    Checkpoint::load(path)
}

pub fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    if !cfg.data_dir.join(MANIFEST_FILE).exists() {
        return Err(Error::Missing(format!(
            "dataset at {} (run gen first)",
            cfg.data_dir.display()
        )));
    }
    load_dataset(&cfg.data_dir)
}

/// Generates the corpus into `cfg.data_dir`.
pub fn cmd_gen(cfg: &RunConfig, write_rasters: bool, exec: Exec) -> Result<DatasetStats> {
    cfg.validate()?;
    let ds = generate_dataset(
        cfg.scenes,
        cfg.seed,
        &cfg.scene,
        &cfg.data_dir,
        write_rasters,
        exec,
    )?;
    cfg.save(&cfg.data_dir.join(CONFIG_FILE))?;
    Ok(ds.manifest.stats)
}

fn csv_rows<I: IntoIterator<Item = String>>(header: &str, rows: I) -> String {
    let mut s = format!("{header}\n");
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    s
}

pub fn path_trace_csv(t: &PathTrace) -> String {
    csv_rows(
        "epoch,train_mse,val_mse,best_so_far",
        t.train_mse
            .iter()
            .zip(&t.val_mse)
            .zip(t.best_so_far())
            .enumerate()
            .map(|(i, ((a, b), c))| format!("{},{a},{b},{c}", i + 1)),
    )
}

fn proposer_trace_csv(t: &ProposerTrace) -> String {
    csv_rows(
        "epoch,val_recall",
        t.val_recall
            .iter()
            .enumerate()
            .map(|(i, r)| format!("{},{r}", i + 1)),
    )
}

fn fusion_trace_csv(t: &FusionTrace) -> String {
    csv_rows(
        "epoch,train_loss,val_f1",
        t.train_loss
            .iter()
            .zip(&t.val_f1)
            .enumerate()
            .map(|(i, (l, f))| format!("{},{l},{f}", i + 1)),
    )
}

/// Trains the path network; writes `pathnet.ck` and `path_trace.csv`.
pub fn cmd_train_path(cfg: &RunConfig, exec: Exec) -> Result<(PathNet, PathTrace)> {
    let ds = load_data(cfg)?;
    let (net, trace) = train_pathnet(
        &ds.split(Split::Train),
        &ds.split(Split::Val),
        &cfg.path,
        cfg.path_seed,
        exec,
    )?;
    net.checkpoint(None).save(&cfg.out_dir.join(PATHNET_FILE))?;
    write(&cfg.out_dir.join("path_trace.csv"), path_trace_csv(&trace))?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    Ok((net, trace))
}

/// Trains the proposal network; writes `proposer.ck` and `proposer_trace.csv`.
pub fn cmd_train_proposer(cfg: &RunConfig, exec: Exec) -> Result<(ProposerNet, ProposerTrace)> {
    let ds = load_data(cfg)?;
    let (net, trace) = train_proposer(
        &ds.split(Split::Train),
        &ds.split(Split::Val),
        &cfg.proposer,
        cfg.proposer_seed,
        exec,
    )?;
    net.checkpoint(None)
        .save(&cfg.out_dir.join(PROPOSER_FILE))?;
    write(
        &cfg.out_dir.join("proposer_trace.csv"),
        proposer_trace_csv(&trace),
    )?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    Ok((net, trace))
}

/// Stage outputs shared by every fusion arm.
pub struct FusionInputs<'a> {
    pub train: SplitFeatures<'a>,
    pub val: SplitFeatures<'a>,
    pub test: SplitFeatures<'a>,
    pub context_dim: usize,
}

/// Proposals for each split, plus contexts when `pathnet` is given.
pub fn fusion_inputs<'a>(
    ds: &'a Dataset,
    cfg: &RunConfig,
    proposer: &ProposerNet,
    pathnet: Option<&PathNet>,
    exec: Exec,
) -> Result<FusionInputs<'a>> {
    let features = |split: Split| -> Result<SplitFeatures<'a>> {
        let scenes: Vec<&'a Scene> = ds.split(split);
        let proposals = proposals_for_scenes(proposer, &scenes, cfg.proposals, &cfg.propose, exec)?;
        let contexts = match pathnet {
            Some(p) => p.run_scenes(&scenes, exec)?.1,
            None => Vec::new(),
        };
        Ok(SplitFeatures {
            scenes,
            proposals,
            contexts,
        })
    };
    Ok(FusionInputs {
        train: features(Split::Train)?,
        val: features(Split::Val)?,
        test: features(Split::Test)?,
        context_dim: pathnet.map_or(crate::pathnet::CONTEXT_DIM, PathNet::context_dim),
    })
}

fn load_nets(
    proposer: &Path,
    pathnet: Option<&Path>,
    needs_context: bool,
) -> Result<(ProposerNet, Option<PathNet>)> {
    let prop = ProposerNet::from_checkpoint(&load_prerequisite(proposer, "proposer")?)?;
    let path = match pathnet {
        Some(p) => Some(PathNet::from_checkpoint(&load_prerequisite(p, "pathnet")?)?),
        None if needs_context => {
            return Err(Error::Missing(
                "pathnet checkpoint (mode C needs --pathnet)".into(),
            ))
        }
        None => None,
    };
    Ok((prop, path))
}

/// Trains one fusion head; writes its checkpoint and trace.
pub fn cmd_train_fusion(
    cfg: &RunConfig,
    mode: AblationMode,
    seed: u64,
    proposer: &Path,
    pathnet: Option<&Path>,
    exec: Exec,
) -> Result<(FusionNet, FusionTrace)> {
    let (prop, path) = load_nets(proposer, pathnet, mode.uses_context())?;
    let ds = load_data(cfg)?;
    let inputs = fusion_inputs(
        &ds,
        cfg,
        &prop,
        path.as_ref().filter(|_| mode.uses_context()),
        exec,
    )?;
    let (net, trace) = train_fusion(
        &inputs.train.bundles(mode)?,
        &inputs.val.bundles(mode)?,
        mode,
        inputs.context_dim,
        &cfg.fusion,
        seed,
        exec,
    )?;
    let name = fusion_file(mode, seed);
    net.checkpoint(None).save(&cfg.out_dir.join(&name))?;
    write(
        &cfg.out_dir.join(name.replace(".ck", "_trace.csv")),
        fusion_trace_csv(&trace),
    )?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    Ok((net, trace))
}

/// Evaluates a fusion checkpoint on the test split against one annotator.
/// Writes `eval_<mode>_<annotator>.json` and a PR-point CSV.
pub fn cmd_eval(
    cfg: &RunConfig,
    fusion: &Path,
    proposer: &Path,
    pathnet: Option<&Path>,
    annotator: Annotator,
    exec: Exec,
) -> Result<Vec<EvalReport>> {
    let ck = load_prerequisite(fusion, "fusion")?;
    let mode = AblationMode::parse(ck.text("mode")?)?;
    let (prop, path) = load_nets(proposer, pathnet, mode.uses_context())?;
    let context_dim = path
        .as_ref()
        .map_or(crate::pathnet::CONTEXT_DIM, PathNet::context_dim);
    let net = FusionNet::from_checkpoint(&ck, context_dim)?;
    let ds = load_data(cfg)?;
    let test_scenes = ds.split(Split::Test);
    let proposals = proposals_for_scenes(&prop, &test_scenes, cfg.proposals, &cfg.propose, exec)?;
    let contexts = match (&path, mode.uses_context()) {
        (Some(p), true) => p.run_scenes(&test_scenes, exec)?.1,
        _ => Vec::new(),
    };
    let path_errors = match &path {
        Some(p) => Some(path_error_by_step(p, &test_scenes, exec)?),
        None => None,
    };
    let test = SplitFeatures {
        scenes: test_scenes,
        proposals,
        contexts,
    };
    let scored = test.score(&net, exec)?;
    let mut reports = Vec::new();
    for subset in [Subset::AllFrames, Subset::Annotated] {
        let mut r = evaluate(&scored, annotator, subset)?;
        r.mode = Some(mode);
        r.path_errors = path_errors;
        reports.push(r);
    }
    let stem = format!("eval_{}_{}", mode.tag(), annotator.tag());
    write_json(&cfg.out_dir.join(format!("{stem}.json")), &reports)?;
    write(
        &cfg.out_dir.join(format!("{stem}.csv")),
        pr_points_csv(&reports),
    )?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    Ok(reports)
}

/// Ablation arms from already loaded stage-one and path networks.
pub fn ablate_with(
    cfg: &RunConfig,
    ds: &Dataset,
    proposer: &ProposerNet,
    pathnet: Option<&PathNet>,
    exec: Exec,
) -> Result<(AblationTable, CrossAnnotatorReport)> {
    if cfg.modes.contains(&AblationMode::C) && pathnet.is_none() {
        return Err(Error::Missing(
            "pathnet checkpoint (mode C needs --pathnet)".into(),
        ));
    }
    let inputs = fusion_inputs(ds, cfg, proposer, pathnet, exec)?;
    let fusion_dir = cfg.out_dir.join("fusion");
    let table = run_ablation(
        &inputs.train,
        &inputs.val,
        &inputs.test,
        inputs.context_dim,
        &cfg.ablation(),
        exec,
        |net, arm| {
            net.checkpoint(None)
                .save(&fusion_dir.join(fusion_file(arm.mode, arm.seed)))
        },
    )?;
    write_json(&cfg.out_dir.join(ABLATION_FILE), &table)?;
    let reports: Vec<EvalReport> = table
        .arms
        .iter()
        .flat_map(|a| a.reports.iter().cloned())
        .collect();
    write(&cfg.out_dir.join(ABLATION_CSV), pr_points_csv(&reports))?;
    let cross = if cfg.modes.contains(&AblationMode::A) && cfg.modes.contains(&AblationMode::C) {
        let c = cross_annotator_eval(&table)?;
        write_json(&cfg.out_dir.join(CROSS_FILE), &c)?;
        c
    } else {
        CrossAnnotatorReport {
            annotator: Annotator::Alt.tag().to_string(),
            rows: Vec::new(),
        }
    };
    Ok((table, cross))
}

pub fn cmd_ablate(
    cfg: &RunConfig,
    proposer: &Path,
    pathnet: Option<&Path>,
    exec: Exec,
) -> Result<(AblationTable, CrossAnnotatorReport)> {
    let (prop, path) = load_nets(proposer, pathnet, cfg.modes.contains(&AblationMode::C))?;
    let ds = load_data(cfg)?;
    let out = ablate_with(cfg, &ds, &prop, path.as_ref(), exec)?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathReport {
    pub test_scenes: usize,
    /// Mean absolute error in degrees at each of the 10 steps.
    pub mae_by_step: [f64; PATH_STEPS],
    /// Rank correlation of step index with error.
    pub spearman: f64,
    pub test_mse_deg2: f64,
    /// Constant mean-path predictor fitted on the training split.
    pub baseline_mse_deg2: f64,
    pub mean_abs_angle_straight: f64,
    pub mean_abs_angle_turn: f64,
}

pub fn path_report(net: &PathNet, ds: &Dataset, exec: Exec) -> Result<PathReport> {
    let test = ds.split(Split::Test);
    let mae = path_error_by_step(net, &test, exec)?;
    let steps: Vec<f64> = (1..=PATH_STEPS).map(|i| i as f64).collect();
    let (paths, _) = net.run_scenes(&test, exec)?;
    let mean_abs = |straight: bool| {
        let v: Vec<f64> = paths
            .iter()
            .zip(&test)
            .filter(|(_, s)| (s.ego.intent == Intent::Straight) == straight)
            .map(|(p, _)| p.angles.iter().map(|a| a.abs()).sum::<f64>() / PATH_STEPS as f64)
            .collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    Ok(PathReport {
        test_scenes: test.len(),
        spearman: spearman(&steps, &mae),
        mae_by_step: mae,
        test_mse_deg2: path_mse_degrees(net, &test, exec)?,
        baseline_mse_deg2: mean_path_baseline_mse(&ds.split(Split::Train), &test),
        mean_abs_angle_straight: mean_abs(true),
        mean_abs_angle_turn: mean_abs(false),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProposerReport {
    pub test_scenes: usize,
    pub top_k: usize,
    pub iou: f64,
    pub recall: f64,
    pub trace: ProposerTrace,
}

/// Every headline measurement of a full run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceReport {
    pub stats: DatasetStats,
    pub path: PathReport,
    pub path_trace: PathTrace,
    pub proposer: ProposerReport,
    pub ablation: AblationTable,
    pub cross_annotator: CrossAnnotatorReport,
}

/// Generates the corpus, trains both stage-one networks, runs the ablation
/// and writes every report under `cfg.out_dir`.
pub fn run_reference(cfg: &RunConfig, exec: Exec) -> Result<ReferenceReport> {
    let stats = cmd_gen(cfg, false, exec)?;
    let ds = load_data(cfg)?;
    let (train, val) = (ds.split(Split::Train), ds.split(Split::Val));
    let (pathnet, path_trace) = train_pathnet(&train, &val, &cfg.path, cfg.path_seed, exec)?;
    pathnet
        .checkpoint(None)
        .save(&cfg.out_dir.join(PATHNET_FILE))?;
    write(
        &cfg.out_dir.join("path_trace.csv"),
        path_trace_csv(&path_trace),
    )?;
    let path = path_report(&pathnet, &ds, exec)?;
    write_json(&cfg.out_dir.join(PATH_REPORT_FILE), &path)?;

    let (proposer, prop_trace) =
        train_proposer(&train, &val, &cfg.proposer, cfg.proposer_seed, exec)?;
    proposer
        .checkpoint(None)
        .save(&cfg.out_dir.join(PROPOSER_FILE))?;
    let test = ds.split(Split::Test);
    let proposer_report = ProposerReport {
        test_scenes: test.len(),
        top_k: cfg.recall_top_k,
        iou: 0.5,
        recall: proposal_recall(&proposer, &test, cfg.recall_top_k, 0.5, exec)?,
        trace: prop_trace,
    };
    write_json(&cfg.out_dir.join(PROPOSER_REPORT_FILE), &proposer_report)?;

    let (ablation, cross_annotator) = ablate_with(cfg, &ds, &proposer, Some(&pathnet), exec)?;
    let report = ReferenceReport {
        stats,
        path,
        path_trace,
        proposer: proposer_report,
        ablation,
        cross_annotator,
    };
    write_json(&cfg.out_dir.join(REFERENCE_FILE), &report)?;
    cfg.save(&cfg.out_dir.join(CONFIG_FILE))?;
    record_digests(&cfg.out_dir)?;
    Ok(report)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect_files(root, &p, out)?;
        } else if p.file_name().is_some_and(|n| n != DIGESTS_FILE) {
            out.push(p.strip_prefix(root).expect("under root").to_path_buf());
        }
    }
    Ok(())
}

/// SHA-256 of every file under `dir` except the digest file itself, keyed
/// by relative path.
pub fn digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    let mut files = Vec::new();
    collect_files(dir, dir, &mut files)?;
    let mut map = BTreeMap::new();
    for f in files {
        let path = dir.join(&f);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        map.insert(f.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
    }
    Ok(map)
}

pub fn record_digests(dir: &Path) -> Result<BTreeMap<String, String>> {
    let d = digests(dir)?;
    write_json(&dir.join(DIGESTS_FILE), &d)?;
    Ok(d)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: usize,
    /// Files whose bytes no longer match the recorded digest.
    pub changed: Vec<String>,
    pub missing: Vec<String>,
    /// Files whose re-derived bytes differ from the recorded run.
    pub not_reproduced: Vec<String>,
}

impl VerifyReport {
    pub fn ok(&self) -> bool {
        self.changed.is_empty() && self.missing.is_empty() && self.not_reproduced.is_empty()
    }
}

/// Checks `dir` against its recorded digests. With `rederive`, reruns the
/// whole pipeline from the stored configuration into `scratch` and compares
/// the regenerated files as well.
pub fn verify(dir: &Path, rederive: Option<&Path>, exec: Exec) -> Result<VerifyReport> {
    let recorded_path = dir.join(DIGESTS_FILE);
    if !recorded_path.exists() {
        return Err(Error::Missing(format!(
            "digest record {}",
            recorded_path.display()
        )));
    }
    let text = fs::read_to_string(&recorded_path).map_err(|e| Error::io(&recorded_path, e))?;
    let recorded: BTreeMap<String, String> = serde_json::from_str(&text)?;
    let current = digests(dir)?;
    let mut report = VerifyReport {
        checked: recorded.len(),
        ..VerifyReport::default()
    };
    for (name, hash) in &recorded {
        match current.get(name) {
            None => report.missing.push(name.clone()),
            Some(h) if h != hash => report.changed.push(name.clone()),
            Some(_) => {}
        }
    }
    if let Some(scratch) = rederive {
        let mut cfg = RunConfig::load(&dir.join(CONFIG_FILE))?;
        cfg.data_dir = scratch.join("data");
        cfg.out_dir = scratch.join("run");
        run_reference(&cfg, exec)?;
        let again = digests(&cfg.out_dir)?;
        for (name, hash) in &recorded {
            // the stored config names its own directories
            if name == CONFIG_FILE {
                continue;
            }
            if again.get(name) != Some(hash) {
                report.not_reproduced.push(name.clone());
            }
        }
    }
    Ok(report)
}

/// Renders one SVG per mode plus an overlay from an ablation PR-point CSV.
pub fn cmd_report(in_dir: &Path, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let csv_path = in_dir.join(ABLATION_CSV);
    if !csv_path.exists() {
        return Err(Error::Missing(format!(
            "ablation curves {}",
            csv_path.display()
        )));
    }
    let text = fs::read_to_string(&csv_path).map_err(|e| Error::io(&csv_path, e))?;
    let curves = svg::parse_pr_csv(&text)?;
    let mut written = Vec::new();
    let mut modes: Vec<&str> = curves.iter().map(|c| c.mode.as_str()).collect();
    modes.dedup();
    let mut overlay = Vec::new();
    for mode in modes {
        let series: Vec<svg::Series> = curves
            .iter()
            .filter(|c| {
                c.mode == mode && c.annotator == "main" && c.subset == Subset::AllFrames.tag()
            })
            .map(|c| svg::Series {
                label: format!("seed {}", c.seed),
                points: c.points.clone(),
            })
            .collect();
        if let Some(first) = series.first() {
            overlay.push(svg::Series {
                label: format!("mode {mode}"),
                points: first.points.clone(),
            });
        }
        let path = out_dir.join(format!("pr_{mode}.svg"));
        write(&path, svg::render_pr(&format!("Mode {mode}"), &series))?;
        written.push(path);
    }
    let path = out_dir.join("pr_overlay.svg");
    write(&path, svg::render_pr("All modes", &overlay))?;
    written.push(path);
    Ok(written)
}

/// Exit status of the command-line contract.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Usage(_) | Error::Config(_) | Error::Dimension { .. } => 2,
        Error::Io { .. } | Error::Format { .. } | Error::Json(_) => 3,
        Error::Missing(_) => 4,
        Error::NonFinite { .. } => 1,
    }
}
