//! Parameterized layer handles. Each layer registers its tensors in a
//! [`ParamStore`] under a name prefix and replays itself onto a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{BnStats, Graph, Var};
use super::params::{glorot_uniform, ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const BN_MOMENTUM: f64 = 0.9;
pub const BN_EPSILON: f64 = 1e-5;
pub const DEFAULT_KEEP_PROB: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Train,
    Eval,
}

impl Phase {
    pub fn is_training(self) -> bool {
        self == Phase::Train
    }
}

#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Dense {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let w = glorot_uniform(&[out_dim, in_dim], in_dim, out_dim, rng);
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        g.dense(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let area = kernel * kernel;
        let k = glorot_uniform(
            &[out_ch, in_ch, kernel, kernel],
            in_ch * area,
            out_ch * area,
            rng,
        );
        Self {
            kernel: store.add(format!("{name}.kernel"), k),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch])),
            stride,
            padding,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.kernel);
        let b = g.param(store, self.bias);
        g.conv2d(x, k, b, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(&[channels], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: store
                .add_buffer(format!("{name}.running_mean"), Tensor::zeros(&[channels])),
            running_var: store.add_buffer(
                format!("{name}.running_var"),
                Tensor::filled(&[channels], 1.0),
            ),
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        x: Var,
        phase: Phase,
    ) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mut mean = store.value(self.running_mean).clone();
        let mut var = store.value(self.running_var).clone();
        let y = g.batch_norm(
            x,
            gamma,
            beta,
            BnStats {
                mean: &mut mean,
                var: &mut var,
                momentum: self.momentum,
                epsilon: self.epsilon,
            },
            phase.is_training(),
        )?;
        if phase.is_training() {
            *store.value_mut(self.running_mean) = mean;
            *store.value_mut(self.running_var) = var;
        }
        Ok(y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DropoutConfig {
    pub keep_prob: f64,
}

impl Default for DropoutConfig {
    fn default() -> Self {
        Self {
            keep_prob: DEFAULT_KEEP_PROB,
        }
    }
}

impl DropoutConfig {
    /// Identity at inference, inverted dropout while training.
    pub fn forward<R: Rng>(&self, g: &mut Graph, x: Var, phase: Phase, rng: &mut R) -> Result<Var> {
        if phase.is_training() {
            g.dropout(x, self.keep_prob, rng)
        } else {
            Ok(x)
        }
    }
}
