//! Straight-line reference implementations shared by the integration tests.
#![allow(dead_code)]

use ccl_core::linalg::Matrix;
use ccl_core::{Activation, Dataset, ModelSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    Matrix::from_vec(rows, cols, uniform_vec(rng, rows * cols, scale))
}

pub fn random_dataset(rng: &mut ChaCha8Rng, n: usize, dim: usize, classes: usize) -> Dataset {
    let x = random_matrix(rng, n, dim, 1.5);
    let labels = (0..n).map(|_| rng.random_range(0..classes)).collect();
    Dataset::new(x, labels, classes).unwrap()
}

fn act(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Tanh => v.tanh(),
        Activation::Relu => v.max(0.0),
    }
}

/// `(rows, cols)` slices of each layer inside a flat parameter vector:
/// weights out x in row-major, then bias.
fn layers(spec: &ModelSpec) -> Vec<(usize, usize, usize)> {
    let mut dims = vec![spec.input_dim];
    dims.extend(&spec.hidden_dims);
    dims.push(spec.num_classes);
    let mut off = 0;
    let mut out = Vec::new();
    for w in dims.windows(2) {
        out.push((w[0], w[1], off));
        off += w[0] * w[1] + w[1];
    }
    out
}

fn dense(x: &[f64], fan_in: usize, fan_out: usize, off: usize, input: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; fan_out];
    for o in 0..fan_out {
        let mut s = x[off + fan_in * fan_out + o];
        for i in 0..fan_in {
            s += x[off + o * fan_in + i] * input[i];
        }
        out[o] = s;
    }
    out
}

pub fn oracle_features(spec: &ModelSpec, x: &[f64], inputs: &Matrix) -> Matrix {
    let ls = layers(spec);
    let hidden = &ls[..ls.len() - 1];
    let mut rows = Vec::new();
    for r in 0..inputs.rows() {
        let mut h = inputs.row(r).to_vec();
        for &(fi, fo, off) in hidden {
            h = dense(x, fi, fo, off, &h)
                .into_iter()
                .map(|v| act(spec.activation, v))
                .collect();
        }
        rows.push(h);
    }
    Matrix::from_rows(&rows)
}

pub fn oracle_logits(spec: &ModelSpec, x: &[f64], features: &Matrix) -> Matrix {
    let &(fi, fo, off) = layers(spec).last().unwrap();
    let rows: Vec<Vec<f64>> = (0..features.rows())
        .map(|r| dense(x, fi, fo, off, features.row(r)))
        .collect();
    Matrix::from_rows(&rows)
}

pub fn oracle_ce(spec: &ModelSpec, x: &[f64], data: &Dataset) -> f64 {
    let z = oracle_features(spec, x, data.features());
    let logits = oracle_logits(spec, x, &z);
    let mut total = 0.0;
    for (r, &y) in data.labels().iter().enumerate() {
        let row = logits.row(r);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        total += lse - row[y];
    }
    total / data.len() as f64
}

#[derive(Clone, Copy, Debug)]
pub enum Dist {
    L1,
    Mse,
    Cosine,
}

pub fn oracle_dist(kind: Dist, a: &[f64], b: &[f64]) -> f64 {
    match kind {
        Dist::Mse => a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum(),
        Dist::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
        Dist::Cosine => {
            let ab: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            1.0 - ab / (na * nb + 1e-12)
        }
    }
}

pub fn oracle_mv(kind: Dist, z: &Matrix, cross: &[Matrix]) -> f64 {
    let b = z.rows() as f64;
    let mut s = 0.0;
    for c in cross {
        for q in 0..z.rows() {
            s += oracle_dist(kind, z.row(q), c.row(q));
        }
    }
    s / b
}

/// Per-class means of the stacked `(features, labels)` pools; `None` for
/// classes nobody holds.
pub fn oracle_class_means(pools: &[(Matrix, Vec<usize>)], classes: usize) -> Vec<Option<Vec<f64>>> {
    (0..classes)
        .map(|c| {
            let rows: Vec<&[f64]> = pools
                .iter()
                .flat_map(|(m, l)| {
                    l.iter()
                        .enumerate()
                        .filter(|(_, &y)| y == c)
                        .map(move |(q, _)| m.row(q))
                })
                .collect();
            if rows.is_empty() {
                return None;
            }
            let mut mean = vec![0.0; rows[0].len()];
            for r in &rows {
                for (m, v) in mean.iter_mut().zip(*r) {
                    *m += v;
                }
            }
            Some(mean.into_iter().map(|m| m / rows.len() as f64).collect())
        })
        .collect()
}

pub fn oracle_dv(kind: Dist, z: &Matrix, labels: &[usize], means: &[Option<Vec<f64>>]) -> f64 {
    let mut s = 0.0;
    for (q, &y) in labels.iter().enumerate() {
        if let Some(m) = &means[y] {
            s += oracle_dist(kind, z.row(q), m);
        }
    }
    s / labels.len() as f64
}

pub fn central_diff(x: &[f64], eps: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let up = f(&probe);
            probe[i] = orig - eps;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` in the Euclidean norm.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn dist_of(kind: ccl_core::SimilarityKind) -> Dist {
    match kind {
        ccl_core::SimilarityKind::L1 => Dist::L1,
        ccl_core::SimilarityKind::Mse => Dist::Mse,
        ccl_core::SimilarityKind::Cosine => Dist::Cosine,
    }
}

/// One random composed-loss instance: an agent with `peers` neighbors, each
/// holding its own parameters and batch. Returns the relative error between
/// the analytic gradient and central differences of the reference loss.
pub fn composed_grad_check(
    seed: u64,
    kind: ccl_core::SimilarityKind,
    include_self: bool,
    lambda: (f64, f64),
) -> f64 {
    use ccl_core::ccl::{ccl_grad, summarize, CclConfig};
    use ccl_core::{FeatureBatch, Mlp};

    let mut r = rng(seed);
    let classes = 3;
    let spec = ModelSpec::new(4, vec![5, 3], classes, Activation::Tanh).unwrap();
    let model = Mlp::new(spec.clone()).unwrap();
    let n = spec.param_count();
    let x = uniform_vec(&mut r, n, 0.8);
    let batch = random_dataset(&mut r, 6, 4, classes);
    let peers = 1 + (seed as usize % 3);
    let neighbor_params: Vec<Vec<f64>> = (0..peers).map(|_| uniform_vec(&mut r, n, 0.8)).collect();
    let neighbor_batches: Vec<Dataset> = (0..peers)
        .map(|_| random_dataset(&mut r, 5, 4, classes))
        .collect();

    // neighbors evaluate the local model on their own data and summarize it
    let received: Vec<_> = neighbor_batches
        .iter()
        .map(|d| {
            let z = model.features(&x, d.features()).unwrap();
            summarize(
                &FeatureBatch {
                    z,
                    labels: d.labels().to_vec(),
                },
                classes,
            )
            .unwrap()
        })
        .collect();
    let cfg = CclConfig {
        lambda_m: lambda.0,
        lambda_d: lambda.1,
        kind,
        include_self_summary: include_self,
    };
    let refs: Vec<&[f64]> = neighbor_params.iter().map(|p| p.as_slice()).collect();
    let out = ccl_grad(&model, &x, &batch, &refs, &received, &cfg).unwrap();

    // the neighborhood means are frozen at the current point
    let mut pools: Vec<(Matrix, Vec<usize>)> = neighbor_batches
        .iter()
        .map(|d| {
            (
                oracle_features(&spec, &x, d.features()),
                d.labels().to_vec(),
            )
        })
        .collect();
    if include_self {
        pools.push((
            oracle_features(&spec, &x, batch.features()),
            batch.labels().to_vec(),
        ));
    }
    let means = oracle_class_means(&pools, classes);
    let cross: Vec<Matrix> = neighbor_params
        .iter()
        .map(|p| oracle_features(&spec, p, batch.features()))
        .collect();
    let d = dist_of(kind);
    let total = |p: &[f64]| {
        let z = oracle_features(&spec, p, batch.features());
        oracle_ce(&spec, p, &batch)
            + lambda.0 * oracle_mv(d, &z, &cross)
            + lambda.1 * oracle_dv(d, &z, batch.labels(), &means)
    };
    let base = total(&x);
    assert!(
        (base - out.total_loss(&cfg)).abs() < 1e-10,
        "loss {base} vs {}",
        out.total_loss(&cfg)
    );
    let fd = central_diff(&x, 1e-5, total);
    rel_err(&out.grad, &fd)
}
