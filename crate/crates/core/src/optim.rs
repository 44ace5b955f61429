//! Local update rules: DSGD with (Nesterov) momentum, quasi-global momentum,
//! damped gossip averaging and the step-decay learning-rate schedule.
//!
//! Gossip terms are passed as `(weight, params)` pairs with the agent itself
//! first and neighbors after it in ascending index order; every caller uses
//! that order so sums are reproducible bit for bit.

use serde::{Deserialize, Serialize};

use crate::linalg::axpy;
use crate::model::ParamVector;
use crate::{Error, Result};

/// Piecewise-constant decay: the rate is multiplied by `factor` once the
/// round reaches `fraction * total` for each milestone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LrSchedule(pub Vec<(f64, f64)>);

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule(vec![(0.5, 0.1), (0.75, 0.1)])
    }
}

impl LrSchedule {
    pub fn lr_at(&self, round: usize, total: usize, lr0: f64) -> f64 {
        debug_assert!(round < total.max(1));
        let k = round as f64;
        let total = total as f64;
        self.0
            .iter()
            .filter(|(frac, _)| k >= frac * total)
            .fold(lr0, |lr, (_, factor)| lr * factor)
    }
}

pub fn lr_at(schedule: &LrSchedule, round: usize, total: usize, lr0: f64) -> f64 {
    schedule.lr_at(round, total, lr0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta: f64,
    pub gamma: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub schedule: LrSchedule,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            lr: 0.1,
            beta: 0.9,
            gamma: 1.0,
            weight_decay: 1e-4,
            nesterov: true,
            schedule: LrSchedule::default(),
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::config("beta", "must lie in [0, 1)"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1]"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config(
                "weight_decay",
                "must be finite and non-negative",
            ));
        }
        for &(frac, factor) in &self.schedule.0 {
            if !(0.0..=1.0).contains(&frac) || !(factor > 0.0 && factor.is_finite()) {
                return Err(Error::config(
                    "lr_schedule",
                    "milestones need a fraction in [0, 1] and a positive factor",
                ));
            }
        }
        Ok(())
    }
}

/// Per-agent momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    /// Local momentum (DSGDm) or the current QGM momentum `m_i^k`.
    pub m: ParamVector,
    /// Quasi-global momentum `m_hat_i`.
    pub m_hat: ParamVector,
}

impl OptState {
    pub fn new(len: usize) -> Self {
        OptState {
            m: ParamVector::zeros(len),
            m_hat: ParamVector::zeros(len),
        }
    }
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::shape(format!(
            "{what} has length {got}, expected {expected}"
        )));
    }
    Ok(())
}

/// `g + wd * x` (the gradient itself when `wd == 0`).
fn decayed_grad(grad: &[f64], x: &[f64], wd: f64) -> Vec<f64> {
    let mut g = grad.to_vec();
    if wd != 0.0 {
        axpy(wd, x, &mut g);
    }
    g
}

/// Weighted sum of `(weight, params)` terms, accumulated in the given order.
pub fn gossip_mix(terms: &[(f64, &[f64])]) -> Result<Vec<f64>> {
    let len = terms.first().map_or(0, |t| t.1.len());
    let mut out = vec![0.0; len];
    for &(w, x) in terms {
        check_len(len, x.len(), "gossip operand")?;
        axpy(w, x, &mut out);
    }
    Ok(out)
}

/// Local half step of DSGDm: `m <- beta m + g`, then `x - lr m` (or the
/// Nesterov look-ahead `x - lr (g + beta m)`).
pub fn dsgdm_half_step(
    x: &[f64],
    grad: &[f64],
    state: &mut OptState,
    cfg: &OptimizerConfig,
    lr: f64,
) -> Result<Vec<f64>> {
    check_len(x.len(), grad.len(), "gradient")?;
    check_len(x.len(), state.m.len(), "momentum")?;
    let g = decayed_grad(grad, x, cfg.weight_decay);
    for (m, gi) in state.m.iter_mut().zip(&g) {
        *m = cfg.beta * *m + gi;
    }
    let mut half = x.to_vec();
    if cfg.nesterov {
        for ((h, gi), m) in half.iter_mut().zip(&g).zip(state.m.iter()) {
            *h -= lr * (gi + cfg.beta * m);
        }
    } else {
        axpy(-lr, &state.m, &mut half);
    }
    Ok(half)
}

/// Full DSGDm round for one agent given its neighbors' half-step parameters:
/// local momentum step followed by gossip averaging of the half steps.
pub fn dsgdm_step(
    x: &[f64],
    grad: &[f64],
    state: &mut OptState,
    cfg: &OptimizerConfig,
    lr: f64,
    self_weight: f64,
    neighbor_half: &[(f64, &[f64])],
) -> Result<Vec<f64>> {
    let half = dsgdm_half_step(x, grad, state, cfg, lr)?;
    let mut terms: Vec<(f64, &[f64])> = Vec::with_capacity(neighbor_half.len() + 1);
    terms.push((self_weight, &half));
    terms.extend_from_slice(neighbor_half);
    gossip_mix(&terms)
}

/// Quasi-global momentum round for one agent. Mixing uses the parameters
/// exchanged at the start of the round:
///
/// ```text
/// m      = beta m_hat + g
/// x_next = sum_j w_ij x_j - lr m            (Nesterov: - lr (g + beta m))
/// m_hat  = beta m_hat + (1 - beta) (x - x_next) / lr
/// ```
///
/// At `lr == 0` the displacement term is dropped from the `m_hat` update.
pub fn qgm_step(
    x: &[f64],
    grad: &[f64],
    state: &mut OptState,
    cfg: &OptimizerConfig,
    lr: f64,
    self_weight: f64,
    neighbors: &[(f64, &[f64])],
) -> Result<Vec<f64>> {
    check_len(x.len(), grad.len(), "gradient")?;
    check_len(x.len(), state.m_hat.len(), "momentum")?;
    let g = decayed_grad(grad, x, cfg.weight_decay);
    for ((m, mh), gi) in state.m.iter_mut().zip(state.m_hat.iter()).zip(&g) {
        *m = cfg.beta * mh + gi;
    }
    let mut terms: Vec<(f64, &[f64])> = Vec::with_capacity(neighbors.len() + 1);
    terms.push((self_weight, x));
    terms.extend_from_slice(neighbors);
    let mut next = gossip_mix(&terms)?;
    if cfg.nesterov {
        for ((n, gi), m) in next.iter_mut().zip(&g).zip(state.m.iter()) {
            *n -= lr * (gi + cfg.beta * m);
        }
    } else {
        axpy(-lr, &state.m, &mut next);
    }
    for ((mh, xi), ni) in state.m_hat.iter_mut().zip(x).zip(&next) {
        let disp = if lr != 0.0 { (xi - ni) / lr } else { 0.0 };
        *mh = cfg.beta * *mh + (1.0 - cfg.beta) * disp;
    }
    Ok(next)
}
