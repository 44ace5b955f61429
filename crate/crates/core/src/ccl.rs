//! Cross-feature contrastive terms.
//!
//! For agent `i` with mini-batch `d_i`:
//!
//! - model-variant cross-features `z_ji = phi(x_j; d_i)` come from running
//!   each neighbor's received parameters on the local batch;
//! - data-variant cross-features `z_ij = phi(x_i; d_j)` are computed by the
//!   neighbors on their own batches and arrive as class-wise sums with
//!   counts ([`CrossFeatureSummary`]), which is all the data-variant loss
//!   needs.
//!
//! Both losses pull the local features `z_ii` toward their targets. Targets
//! are constants in the gradient; only the local parameters are trained.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, norm2, Matrix};
use crate::model::{FeatureBatch, Mlp, ParamVector};
use crate::partition::Dataset;
use crate::{Error, Result};

/// Denominator guard of the cosine distance.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(
    Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Default, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SimilarityKind {
    L1,
    #[default]
    Mse,
    Cosine,
}

impl fmt::Display for SimilarityKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SimilarityKind::L1 => "l1",
            SimilarityKind::Mse => "mse",
            SimilarityKind::Cosine => "cosine",
        })
    }
}

impl FromStr for SimilarityKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l1" => Ok(SimilarityKind::L1),
            "mse" | "l2" => Ok(SimilarityKind::Mse),
            "cosine" | "cos" => Ok(SimilarityKind::Cosine),
            other => Err(Error::config(
                "similarity",
                format!("unknown similarity `{other}`"),
            )),
        }
    }
}

impl SimilarityKind {
    /// Distance between `a` and the constant target `b`; adds
    /// `scale * d dist / d a` into `grad`.
    pub fn distance_with_grad(self, a: &[f64], b: &[f64], scale: f64, grad: &mut [f64]) -> f64 {
        match self {
            SimilarityKind::Mse => {
                let mut s = 0.0;
                for ((g, &x), &y) in grad.iter_mut().zip(a).zip(b) {
                    let d = x - y;
                    s += d * d;
                    *g += scale * 2.0 * d;
                }
                s
            }
            SimilarityKind::L1 => {
                let mut s = 0.0;
                for ((g, &x), &y) in grad.iter_mut().zip(a).zip(b) {
                    let d = x - y;
                    s += d.abs();
                    if d != 0.0 {
                        *g += scale * d.signum();
                    }
                }
                s
            }
            SimilarityKind::Cosine => {
                let na = norm2(a);
                let nb = norm2(b);
                let ab = dot(a, b);
                let denom = na * nb + COSINE_EPS;
                // d/da [ab / (|a||b| + eps)] = b/D - ab |b| a / (|a| D^2)
                let radial = if na > 0.0 {
                    ab * nb / (na * denom * denom)
                } else {
                    0.0
                };
                for ((g, &x), &y) in grad.iter_mut().zip(a).zip(b) {
                    *g -= scale * (y / denom - radial * x);
                }
                1.0 - ab / denom
            }
        }
    }

    pub fn distance(self, a: &[f64], b: &[f64]) -> f64 {
        let mut scratch = vec![0.0; a.len()];
        self.distance_with_grad(a, b, 0.0, &mut scratch)
    }
}

/// Class-wise sum of cross-features and per-class sample counts.
#[derive(Clone, Debug, PartialEq)]
pub struct CrossFeatureSummary {
    pub class_sums: Matrix,
    pub class_counts: Vec<u64>,
}

impl CrossFeatureSummary {
    pub fn num_classes(&self) -> usize {
        self.class_counts.len()
    }

    pub fn feature_dim(&self) -> usize {
        self.class_sums.cols()
    }

    /// Encoded size: one 8-byte real per sum entry and one 8-byte count per class.
    pub fn wire_bytes(num_classes: usize, feature_dim: usize) -> u64 {
        8 * (num_classes * feature_dim + num_classes) as u64
    }
}

/// Class-wise mean of the neighborhood's data-variant cross-features.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborhoodRepresentation {
    pub z_bar: Matrix,
    pub valid: Vec<bool>,
}

pub fn summarize(features: &FeatureBatch, num_classes: usize) -> Result<CrossFeatureSummary> {
    let r = features.z.cols();
    if features.z.rows() != features.labels.len() {
        return Err(Error::shape("feature rows and labels differ in length"));
    }
    let mut sums = Matrix::zeros(num_classes, r);
    let mut counts = vec![0u64; num_classes];
    for (row, &label) in features.z.iter_rows().zip(&features.labels) {
        if label >= num_classes {
            return Err(Error::shape(format!(
                "label {label} >= {num_classes} classes"
            )));
        }
        crate::linalg::axpy(1.0, row, sums.row_mut(label));
        counts[label] += 1;
    }
    Ok(CrossFeatureSummary {
        class_sums: sums,
        class_counts: counts,
    })
}

pub fn aggregate<'a, I>(summaries: I) -> Result<NeighborhoodRepresentation>
where
    I: IntoIterator<Item = &'a CrossFeatureSummary>,
{
    let mut it = summaries.into_iter();
    let first = it
        .next()
        .ok_or_else(|| Error::shape("aggregate needs at least one summary"))?;
    let mut sums = first.class_sums.clone();
    let mut counts = first.class_counts.clone();
    for s in it {
        if s.class_sums.shape() != sums.shape() {
            return Err(Error::shape(
                "summaries disagree on classes or feature width",
            ));
        }
        sums.add_scaled(1.0, &s.class_sums);
        for (c, &k) in counts.iter_mut().zip(&s.class_counts) {
            *c += k;
        }
    }
    let valid: Vec<bool> = counts.iter().map(|&k| k > 0).collect();
    for (c, &k) in counts.iter().enumerate() {
        if k > 0 {
            let inv = 1.0 / k as f64;
            sums.row_mut(c).iter_mut().for_each(|v| *v *= inv);
        }
    }
    Ok(NeighborhoodRepresentation { z_bar: sums, valid })
}

/// Model-variant loss `sum_j (1/|d_i|) sum_q dist(z_ii^q, z_ji^q)` and its
/// gradient with respect to `z_local`.
pub fn loss_mv(
    z_local: &Matrix,
    z_cross: &[Matrix],
    kind: SimilarityKind,
) -> Result<(f64, Matrix)> {
    let b = z_local.rows();
    let mut grad = Matrix::zeros(b, z_local.cols());
    if b == 0 {
        return Ok((0.0, grad));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for zc in z_cross {
        if zc.shape() != z_local.shape() {
            return Err(Error::shape(format!(
                "cross-features {:?} vs local {:?}",
                zc.shape(),
                z_local.shape()
            )));
        }
        for q in 0..b {
            loss +=
                inv_b * kind.distance_with_grad(z_local.row(q), zc.row(q), inv_b, grad.row_mut(q));
        }
    }
    Ok((loss, grad))
}

/// Data-variant loss `(1/|d_i|) sum_q dist(z_ii^q, z_bar[label_q])`; samples
/// whose class has no neighborhood representation contribute nothing.
pub fn loss_dv(
    z_local: &FeatureBatch,
    rep: &NeighborhoodRepresentation,
    kind: SimilarityKind,
) -> Result<(f64, Matrix)> {
    let b = z_local.len();
    let (c, r) = rep.z_bar.shape();
    if z_local.z.rows() != b || (b > 0 && z_local.z.cols() != r) || rep.valid.len() != c {
        return Err(Error::shape(
            "local features and neighborhood representation disagree",
        ));
    }
    let mut grad = Matrix::zeros(b, z_local.z.cols());
    if b == 0 {
        return Ok((0.0, grad));
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    for (q, &label) in z_local.labels.iter().enumerate() {
        if label >= c {
            return Err(Error::shape(format!("label {label} >= {c} classes")));
        }
        if !rep.valid[label] {
            continue;
        }
        loss += inv_b
            * kind.distance_with_grad(
                z_local.z.row(q),
                rep.z_bar.row(label),
                inv_b,
                grad.row_mut(q),
            );
    }
    Ok((loss, grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CclConfig {
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub kind: SimilarityKind,
    /// Whether the agent's own feature summary joins the neighborhood mean.
    pub include_self_summary: bool,
}

impl Default for CclConfig {
    fn default() -> Self {
        CclConfig {
            lambda_m: 0.01,
            lambda_d: 0.01,
            kind: SimilarityKind::Mse,
            include_self_summary: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub ce: f64,
    pub mv: f64,
    pub dv: f64,
}

#[derive(Clone, Debug)]
pub struct CclOutput {
    pub parts: LossParts,
    pub grad: ParamVector,
    pub correct: usize,
    pub features: FeatureBatch,
}

impl CclOutput {
    pub fn total_loss(&self, cfg: &CclConfig) -> f64 {
        self.parts.ce + cfg.lambda_m * self.parts.mv + cfg.lambda_d * self.parts.dv
    }
}

/// `phi(x_j; batch)` for every neighbor parameter vector.
pub fn cross_features(
    model: &Mlp,
    neighbor_params: &[&[f64]],
    batch: &Dataset,
) -> Result<Vec<Matrix>> {
    neighbor_params
        .iter()
        .map(|p| model.features(p, batch.features()))
        .collect()
}

/// Gradient of `L_ce + lambda_m L_mv + lambda_d L_dv` at `x_local`, with the
/// model-variant cross-features already evaluated.
///
/// `received` are the summaries neighbors computed with this agent's model on
/// their own batches. With both weights zero the gradient is exactly the
/// cross-entropy gradient; the contrastive parts are still reported.
pub fn ccl_grad_with_cross(
    model: &Mlp,
    x_local: &[f64],
    batch: &Dataset,
    cross: &[Matrix],
    received: &[CrossFeatureSummary],
    cfg: &CclConfig,
) -> Result<CclOutput> {
    if !(cfg.lambda_m >= 0.0 && cfg.lambda_d >= 0.0) {
        return Err(Error::config(
            "lambda",
            "contrastive weights must be non-negative",
        ));
    }
    let mut pass = model.ce_pass(x_local, batch)?;
    let (mv, g_mv) = loss_mv(&pass.features.z, cross, cfg.kind)?;

    let own;
    let mut pool: Vec<&CrossFeatureSummary> = received.iter().collect();
    if cfg.include_self_summary {
        own = summarize(&pass.features, model.num_classes())?;
        pool.push(&own);
    }
    let (dv, g_dv) = if pool.is_empty() {
        (
            0.0,
            Matrix::zeros(pass.features.z.rows(), pass.features.z.cols()),
        )
    } else {
        let rep = aggregate(pool)?;
        loss_dv(&pass.features, &rep, cfg.kind)?
    };

    if cfg.lambda_m != 0.0 || cfg.lambda_d != 0.0 {
        pass.d_features.add_scaled(cfg.lambda_m, &g_mv);
        pass.d_features.add_scaled(cfg.lambda_d, &g_dv);
    }
    model.backprop_features(x_local, &pass.tape, &pass.d_features, &mut pass.grad)?;
    Ok(CclOutput {
        parts: LossParts {
            ce: pass.loss,
            mv,
            dv,
        },
        grad: pass.grad,
        correct: pass.correct,
        features: pass.features,
    })
}

/// As [`ccl_grad_with_cross`], evaluating the neighbors' models locally.
pub fn ccl_grad(
    model: &Mlp,
    x_local: &[f64],
    batch: &Dataset,
    neighbor_params: &[&[f64]],
    received: &[CrossFeatureSummary],
    cfg: &CclConfig,
) -> Result<CclOutput> {
    let cross = cross_features(model, neighbor_params, batch)?;
    ccl_grad_with_cross(model, x_local, batch, &cross, received, cfg)
}
