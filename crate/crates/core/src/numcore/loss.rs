use serde::{Deserialize, Serialize};

/// Probability clamp applied before taking logarithms.
pub const BCE_CLAMP: f64 = 1e-7;

/// Per-class weights of the binary cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub weight_not_important: f64,
    pub weight_important: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weight_not_important: 1.0,
            weight_important: 2.0,
        }
    }
}

impl LossConfig {
    pub fn unweighted() -> Self {
        Self {
            weight_not_important: 1.0,
            weight_important: 1.0,
        }
    }
}

pub fn mse(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len());
    pred.iter()
        .zip(target)
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / pred.len() as f64
}

/// `-w_imp * y * ln p - w_not * (1 - y) * ln(1 - p)` with `p` clamped to `[1e-7, 1 - 1e-7]`.
pub fn weighted_bce(cfg: &LossConfig, p: f64, y: f64) -> f64 {
    let p = p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
    -cfg.weight_important * y * p.ln() - cfg.weight_not_important * (1.0 - y) * (1.0 - p).ln()
}

pub fn weighted_bce_mean(cfg: &LossConfig, p: &[f64], y: &[f64]) -> f64 {
    p.iter()
        .zip(y)
        .map(|(&p, &y)| weighted_bce(cfg, p, y))
        .sum::<f64>()
        / p.len() as f64
}

/// Derivative of [`weighted_bce`] in `p`; zero inside the clamped region.
pub fn weighted_bce_dp(cfg: &LossConfig, p: f64, y: f64) -> f64 {
    if !(BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&p) {
        return 0.0;
    }
    -cfg.weight_important * y / p + cfg.weight_not_important * (1.0 - y) / (1.0 - p)
}
