use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::anchors::ANCHORS_PER_CELL;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::numcore::{Checkpoint, Conv2d, Graph, ParamStore, Tensor, Var};

pub const FEATURE_CHANNELS: usize = 32;

/// Three-conv backbone with 1x1 objectness and box-delta heads.
#[derive(Clone, Debug)]
pub struct ProposerNet {
    pub store: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    cls: Conv2d,
    reg: Conv2d,
}

pub struct ProposerVars {
    /// `[batch, 32, H/4, W/4]` after the last ReLU.
    pub feature: Var,
    /// `[batch, 9, H/4, W/4]` objectness logits.
    pub logits: Var,
    /// `[batch, 36, H/4, W/4]`; channels `4a..4a+4` are anchor `a`'s deltas.
    pub deltas: Var,
}

/// Per-raster inference result.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposerOutput {
    /// `[32, fh, fw]`.
    pub feature: Tensor,
    /// Per anchor, in anchor-grid order.
    pub objectness: Vec<f64>,
    pub deltas: Vec<[f64; 4]>,
}

impl ProposerNet {
    pub const ARCH: &'static str =
        "proposer/v1 conv7-16s2 conv16-32s2 conv32-32s1 heads1x1 anchors9 stride4";

    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let conv1 = Conv2d::new(&mut store, "conv1", 7, 16, 3, 2, 1, &mut rng);
        let conv2 = Conv2d::new(&mut store, "conv2", 16, 32, 3, 2, 1, &mut rng);
        let conv3 = Conv2d::new(&mut store, "conv3", 32, FEATURE_CHANNELS, 3, 1, 1, &mut rng);
        let cls = Conv2d::new(
            &mut store,
            "cls",
            FEATURE_CHANNELS,
            ANCHORS_PER_CELL,
            1,
            1,
            0,
            &mut rng,
        );
        let reg = Conv2d::new(
            &mut store,
            "reg",
            FEATURE_CHANNELS,
            4 * ANCHORS_PER_CELL,
            1,
            1,
            0,
            &mut rng,
        );
        Self {
            store,
            conv1,
            conv2,
            conv3,
            cls,
            reg,
        }
    }

    pub fn backbone(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = g.relu(h)?;
        let h = self.conv2.forward(g, store, h)?;
        let h = g.relu(h)?;
        let h = self.conv3.forward(g, store, h)?;
        g.relu(h)
    }

    /// Builds the network on `g` reading weights from `store`, which may be
    /// a perturbed copy of `self.store`.
    pub fn forward_with(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<ProposerVars> {
        let feature = self.backbone(g, store, x)?;
        let logits = self.cls.forward(g, store, feature)?;
        let deltas = self.reg.forward(g, store, feature)?;
        Ok(ProposerVars {
            feature,
            logits,
            deltas,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<ProposerVars> {
        self.forward_with(g, &self.store, x)
    }

    /// Inference over a batch of `[7, H, W]` rasters.
    pub fn infer(&self, rasters: &[&Tensor], exec: Exec) -> Result<Vec<ProposerOutput>> {
        let Some(first) = rasters.first() else {
            return Ok(Vec::new());
        };
        let shape = first.shape().to_vec();
        let mut data = Vec::with_capacity(rasters.len() * first.len());
        for r in rasters {
            if r.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "proposer input",
                    left: shape,
                    right: r.shape().to_vec(),
                });
            }
            data.extend_from_slice(r.data());
        }
        let mut batch_shape = vec![rasters.len()];
        batch_shape.extend_from_slice(&shape);
        let mut g = Graph::with_exec(exec);
        let x = g.input(Tensor::new(batch_shape, data)?);
        let vars = self.forward(&mut g, x)?;
        let fs = g.value(vars.feature).shape().to_vec();
        let (fh, fw) = (fs[2], fs[3]);
        let plane = fh * fw;
        let feat = g.value(vars.feature).data();
        let logits = g.value(vars.logits).data();
        let deltas = g.value(vars.deltas).data();
        let n_anchor = ANCHORS_PER_CELL * plane;
        let mut out = Vec::with_capacity(rasters.len());
        for n in 0..rasters.len() {
            let f = &feat[n * FEATURE_CHANNELS * plane..(n + 1) * FEATURE_CHANNELS * plane];
            let l = &logits[n * n_anchor..(n + 1) * n_anchor];
            let d = &deltas[n * 4 * n_anchor..(n + 1) * 4 * n_anchor];
            let objectness = l.iter().map(|&z| crate::numcore::sigmoid(z)).collect();
            let deltas = (0..n_anchor)
                .map(|i| {
                    let (a, cell) = (i / plane, i % plane);
                    std::array::from_fn(|j| d[(4 * a + j) * plane + cell])
                })
                .collect();
            out.push(ProposerOutput {
                feature: Tensor::new(vec![FEATURE_CHANNELS, fh, fw], f.to_vec())?,
                objectness,
                deltas,
            });
        }
        Ok(out)
    }

    pub fn checkpoint(&self, adam: Option<&crate::numcore::AdamState>) -> Checkpoint {
        Checkpoint::from_store(&self.store, Self::ARCH, adam)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let arch = ck.text("arch")?;
        if arch != Self::ARCH {
            return Err(Error::usage(format!(
                "checkpoint holds {arch:?}, expected a proposer"
            )));
        }
        let mut net = Self::new(0);
        ck.restore_store(&mut net.store)?;
        Ok(net)
    }
}
