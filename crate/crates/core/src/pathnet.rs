//! Ego future-path regression from a raster. The flattened activation of the
//! last convolution doubles as the global context feature for fusion.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numcore::{
    adam_step, AdamConfig, AdamState, BatchNorm, Checkpoint, Conv2d, Dense, DropoutConfig, Graph,
    ParamStore, Payload, Phase, Tensor, Var,
};
use crate::scenegen::{rasterize, PathVector, Scene, PATH_STEPS, RASTER_CHANNELS, RASTER_SIZE};

/// Context length at the reference raster size: 8 channels of 6 x 6.
pub const CONTEXT_DIM: usize = 288;
const INFER_BATCH: usize = 32;

#[derive(Clone, Debug)]
struct Layers {
    convs: Vec<Conv2d>,
    conv_bns: Vec<BatchNorm>,
    fcs: Vec<Dense>,
    fc_bns: Vec<BatchNorm>,
    dropout: DropoutConfig,
}

/// Five convolutions and four dense layers.
#[derive(Clone, Debug)]
pub struct PathNet {
    pub store: ParamStore,
    layers: Layers,
    context_dim: usize,
}

pub struct PathVars {
    /// `[batch, context_dim]`.
    pub context: Var,
    /// `[batch, 10]` normalized angles.
    pub output: Var,
}

impl Layers {
    fn forward<R: Rng>(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        phase: Phase,
        rng: &mut R,
    ) -> Result<PathVars> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            if let Some(bn) = self.conv_bns.get(i) {
                h = bn.forward(g, store, h, phase)?;
            }
            h = g.relu(h)?;
        }
        let context = g.flatten(h)?;
        let mut h = context;
        for (i, fc) in self.fcs.iter().enumerate() {
            h = fc.forward(g, store, h)?;
            if i + 1 == self.fcs.len() {
                break;
            }
            if let Some(bn) = self.fc_bns.get(i) {
                h = bn.forward(g, store, h, phase)?;
            }
            h = g.relu(h)?;
            if i < self.fc_bns.len() {
                h = self.dropout.forward(g, h, phase, rng)?;
            }
        }
        Ok(PathVars { context, output: h })
    }
}

fn batch_input(g: &mut Graph, rasters: &[Tensor]) -> Result<Var> {
    let mut data = Vec::with_capacity(rasters.iter().map(Tensor::len).sum());
    for r in rasters {
        data.extend_from_slice(r.data());
    }
    let mut shape = vec![rasters.len()];
    shape.extend_from_slice(rasters[0].shape());
    Ok(g.input(Tensor::new(shape, data)?))
}

impl PathNet {
    pub const ARCH: &'static str =
        "pathnet/v1 conv7-12k5s2 conv12-16k5s2 conv16-24k3s2 conv24-32k3s2 conv32-8k3s1 fc128 fc64 fc32 fc10";

    /// Network for `[7, size, size]` rasters; `size` must be a multiple of 16.
    pub fn with_input_size(size: usize, seed: u64) -> Result<Self> {
        if size == 0 || size % 16 != 0 {
            return Err(Error::config(format!(
                "pathnet input size {size} is not a positive multiple of 16"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let spec = [
            (RASTER_CHANNELS, 12, 5, 2, 2),
            (12, 16, 5, 2, 2),
            (16, 24, 3, 2, 1),
            (24, 32, 3, 2, 1),
            (32, 8, 3, 1, 1),
        ];
        let mut convs = Vec::new();
        let mut conv_bns = Vec::new();
        for (i, &(cin, cout, k, s, p)) in spec.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut store,
                &format!("conv{}", i + 1),
                cin,
                cout,
                k,
                s,
                p,
                &mut rng,
            ));
            if i + 1 < spec.len() {
                conv_bns.push(BatchNorm::new(
                    &mut store,
                    &format!("conv{}.bn", i + 1),
                    cout,
                ));
            }
        }
        let side = size / 16;
        let context_dim = 8 * side * side;
        let widths = [context_dim, 128, 64, 32, PATH_STEPS];
        let mut fcs = Vec::new();
        let mut fc_bns = Vec::new();
        for i in 0..4 {
            fcs.push(Dense::new(
                &mut store,
                &format!("fc{}", i + 1),
                widths[i],
                widths[i + 1],
                &mut rng,
            ));
            if i < 2 {
                fc_bns.push(BatchNorm::new(
                    &mut store,
                    &format!("fc{}.bn", i + 1),
                    widths[i + 1],
                ));
            }
        }
        Ok(Self {
            store,
            layers: Layers {
                convs,
                conv_bns,
                fcs,
                fc_bns,
                dropout: DropoutConfig::default(),
            },
            context_dim,
        })
    }

    pub fn new(seed: u64) -> Self {
        Self::with_input_size(RASTER_SIZE, seed).expect("reference size is valid")
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// Builds the network on `g` against `store`.
    pub fn forward_with<R: Rng>(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        phase: Phase,
        rng: &mut R,
    ) -> Result<PathVars> {
        self.layers.forward(g, store, x, phase, rng)
    }

    /// Inference: normalized outputs and contexts from one shared forward pass.
    pub fn infer(
        &self,
        rasters: &[Tensor],
        exec: Exec,
    ) -> Result<(Vec<[f64; PATH_STEPS]>, Vec<Vec<f64>>)> {
        if rasters.is_empty() {
            return Ok((Vec::new(), Vec::new()));
        }
        let mut g = Graph::with_exec(exec);
        let x = batch_input(&mut g, rasters)?;
        // inference never writes running statistics or draws dropout masks
        let mut store = self.store.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let vars = self.forward_with(&mut g, &mut store, x, Phase::Eval, &mut rng)?;
        let out = g.value(vars.output).data();
        let ctx = g.value(vars.context).data();
        let paths = out
            .chunks(PATH_STEPS)
            .map(|c| std::array::from_fn(|i| c[i]))
            .collect();
        let contexts = ctx.chunks(self.context_dim).map(<[f64]>::to_vec).collect();
        Ok((paths, contexts))
    }

    pub fn predict_path(&self, raster: &Tensor) -> Result<PathVector> {
        let (p, _) = self.infer(std::slice::from_ref(raster), Exec::Sequential)?;
        Ok(PathVector::from_normalized(&p[0]))
    }

    pub fn extract_context(&self, raster: &Tensor) -> Result<Vec<f64>> {
        let (_, c) = self.infer(std::slice::from_ref(raster), Exec::Sequential)?;
        Ok(c.into_iter().next().expect("one raster"))
    }

    /// Predicted paths (degrees) and contexts for many scenes, in order.
    pub fn run_scenes(
        &self,
        scenes: &[&Scene],
        exec: Exec,
    ) -> Result<(Vec<PathVector>, Vec<Vec<f64>>)> {
        let mut paths = Vec::with_capacity(scenes.len());
        let mut contexts = Vec::with_capacity(scenes.len());
        for chunk in scenes.chunks(INFER_BATCH) {
            let rasters: Vec<Tensor> = exec.map(chunk, |s| rasterize(s).channels);
            let (p, c) = self.infer(&rasters, exec)?;
            paths.extend(p.iter().map(|v| PathVector::from_normalized(v)));
            contexts.extend(c);
        }
        Ok((paths, contexts))
    }

    pub fn checkpoint(&self, adam: Option<&AdamState>) -> Checkpoint {
        let mut ck = Checkpoint::from_store(&self.store, Self::ARCH, adam);
        ck.push("context_dim", Payload::U64(vec![self.context_dim as u64]));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck.text("arch")?;
        if arch != Self::ARCH {
            return Err(Error::usage(format!(
                "checkpoint holds {arch:?}, expected a pathnet"
            )));
        }
        let Some(Payload::U64(dim)) = ck.get("context_dim") else {
            return Err(Error::usage("pathnet checkpoint lacks context_dim"));
        };
        let side = ((dim[0] / 8) as f64).sqrt().round() as usize;
        let mut net = Self::with_input_size(side * 16, 0)?;
        if net.context_dim as u64 != dim[0] {
            return Err(Error::usage(format!(
                "pathnet context_dim {} is not 8 * s^2",
                dim[0]
            )));
        }
        ck.restore_store(&mut net.store)?;
        Ok(net)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
}

impl Default for PathTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_size: 32,
            adam: AdamConfig::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathTrace {
    /// Mean training loss (MSE on normalized angles) per epoch.
    pub train_mse: Vec<f64>,
    /// Validation MSE on normalized angles per epoch.
    pub val_mse: Vec<f64>,
    pub best_epoch: usize,
}

impl PathTrace {
    /// Best validation MSE seen up to and including each epoch.
    pub fn best_so_far(&self) -> Vec<f64> {
        self.val_mse
            .iter()
            .scan(f64::INFINITY, |b, &v| {
                *b = b.min(v);
                Some(*b)
            })
            .collect()
    }
}

/// Mean squared error in normalized units between predictions and the
/// ground truth of `scenes`.
pub fn path_mse(net: &PathNet, scenes: &[&Scene], exec: Exec) -> Result<f64> {
    if scenes.is_empty() {
        return Ok(0.0);
    }
    let (paths, _) = net.run_scenes(scenes, exec)?;
    let mut acc = 0.0;
    for (p, s) in paths.iter().zip(scenes) {
        acc += p
            .normalized()
            .iter()
            .zip(s.gt_path.normalized())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc / (scenes.len() * PATH_STEPS) as f64)
}

/// Minimizes MSE on normalized angles; keeps the epoch with the lowest
/// validation MSE.
pub fn train_pathnet(
    train: &[&Scene],
    val: &[&Scene],
    cfg: &PathTrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(PathNet, PathTrace)> {
    if train.is_empty() {
        return Err(Error::usage("pathnet training set is empty"));
    }
    if cfg.batch_size < 2 {
        return Err(Error::config(
            "pathnet batch size must be at least 2 for batch norm",
        ));
    }
    cfg.adam.validate()?;
    let mut net = PathNet::new(seed);
    let mut adam = AdamState::new(&net.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5041_5448);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut trace = PathTrace::default();
    let mut best: Option<(f64, ParamStore)> = None;
    let layers = net.layers.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            // a single leftover sample cannot be batch-normalized
            if batch.len() < 2 {
                continue;
            }
            let scenes: Vec<&Scene> = batch.iter().map(|&i| train[i]).collect();
            let rasters: Vec<Tensor> = exec.map(&scenes, |s| rasterize(s).channels);
            let target: Vec<f64> = scenes.iter().flat_map(|s| s.gt_path.normalized()).collect();
            let target = Tensor::new(vec![scenes.len(), PATH_STEPS], target)?;
            let mut g = Graph::with_exec(exec);
            let x = batch_input(&mut g, &rasters)?;
            let vars = layers.forward(&mut g, &mut net.store, x, Phase::Train, &mut rng)?;
            let loss = g.mse(vars.output, &target)?;
            g.backward(loss)?;
            sum += g.value(loss).item() * scenes.len() as f64;
            count += scenes.len();
            net.store.zero_grad();
            net.store.accumulate_grads(&g);
            adam_step(&cfg.adam, &mut adam, &mut net.store)?;
        }
        trace.train_mse.push(sum / count.max(1) as f64);
        let v = path_mse(&net, if val.is_empty() { train } else { val }, exec)?;
        trace.val_mse.push(v);
        if best.as_ref().is_none_or(|(b, _)| v < *b) {
            trace.best_epoch = epoch;
            best = Some((v, net.store.clone()));
        }
    }
    if let Some((_, store)) = best {
        net.store = store;
    }
    Ok((net, trace))
}

/// Per-step mean absolute error in degrees over `scenes`.
pub fn path_error_by_step(
    net: &PathNet,
    scenes: &[&Scene],
    exec: Exec,
) -> Result<[f64; PATH_STEPS]> {
    let (paths, _) = net.run_scenes(scenes, exec)?;
    let mut err = [0.0; PATH_STEPS];
    for (p, s) in paths.iter().zip(scenes) {
        for (e, (a, b)) in err.iter_mut().zip(p.angles.iter().zip(&s.gt_path.angles)) {
            *e += (a - b).abs();
        }
    }
    let n = scenes.len().max(1) as f64;
    err.iter_mut().for_each(|e| *e /= n);
    Ok(err)
}

/// Test MSE in degrees squared of the per-step mean path of `train`.
pub fn mean_path_baseline_mse(train: &[&Scene], test: &[&Scene]) -> f64 {
    let mut mean = [0.0; PATH_STEPS];
    for s in train {
        for (m, a) in mean.iter_mut().zip(&s.gt_path.angles) {
            *m += a / train.len() as f64;
        }
    }
    let mut acc = 0.0;
    for s in test {
        acc += mean
            .iter()
            .zip(&s.gt_path.angles)
            .map(|(m, a)| (m - a) * (m - a))
            .sum::<f64>();
    }
    acc / (test.len() * PATH_STEPS).max(1) as f64
}

/// Test MSE in degrees squared of the trained net.
pub fn path_mse_degrees(net: &PathNet, test: &[&Scene], exec: Exec) -> Result<f64> {
    let (paths, _) = net.run_scenes(test, exec)?;
    let mut acc = 0.0;
    for (p, s) in paths.iter().zip(test) {
        acc += p
            .angles
            .iter()
            .zip(&s.gt_path.angles)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(acc / (test.len() * PATH_STEPS).max(1) as f64)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        // ties share their average rank
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation; 0 when either side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = rx.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}
