//! Labeled datasets, synthetic Gaussian blobs and Dirichlet label-skew
//! partitioning across agents.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::rng::{derive_seed, SimRng, Stream};
use crate::{Error, Result};

/// Feature rows with integer class labels in `0..num_classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Matrix,
    labels: Vec<usize>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.rows() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(Error::InvalidDataset("dataset has no samples".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        if !features.is_finite() {
            return Err(Error::InvalidDataset("non-finite feature value".into()));
        }
        Ok(Dataset {
            features,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn features(&self) -> &Matrix {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Rows `idx` in the given order. Panics on an empty index list.
    pub fn subset(&self, idx: &[usize]) -> Dataset {
        assert!(!idx.is_empty(), "empty subset");
        Dataset {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Reads rows of `f_1, ..., f_d, label` without a header. When
    /// `num_classes` is `None` it is `max(label) + 1`.
    pub fn from_csv(path: impl AsRef<Path>, num_classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(false)
            .trim(csv::Trim::All)
            .from_path(path.as_ref())?;
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut width = None;
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            if rec.len() < 2 {
                return Err(Error::InvalidDataset(format!(
                    "line {}: need at least one feature and a label",
                    line + 1
                )));
            }
            let d = rec.len() - 1;
            if *width.get_or_insert(d) != d {
                return Err(Error::InvalidDataset(format!(
                    "line {}: ragged row",
                    line + 1
                )));
            }
            for field in rec.iter().take(d) {
                let v: f64 = field.parse().map_err(|_| {
                    Error::InvalidDataset(format!("line {}: bad number `{field}`", line + 1))
                })?;
                data.push(v);
            }
            let label_field = &rec[d];
            let label: usize = label_field.parse().map_err(|_| {
                Error::InvalidDataset(format!("line {}: bad label `{label_field}`", line + 1))
            })?;
            labels.push(label);
        }
        let d = width.unwrap_or(0);
        let c = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(Matrix::from_vec(labels.len(), d, data), labels, c)
    }
}

/// Gaussian class clusters with means on the unit sphere.
#[derive(Clone, Debug, PartialEq)]
pub struct Blobs {
    means: Matrix,
    spread: f64,
}

impl Blobs {
    pub fn new(num_classes: usize, input_dim: usize, spread: f64, rng: &mut SimRng) -> Self {
        let mut means = Matrix::zeros(num_classes, input_dim);
        for c in 0..num_classes {
            let row = means.row_mut(c);
            loop {
                for v in row.iter_mut() {
                    *v = rng.sample(StandardNormal);
                }
                let n = crate::linalg::norm2(row);
                if n > 1e-12 {
                    row.iter_mut().for_each(|v| *v /= n);
                    break;
                }
            }
        }
        Blobs { means, spread }
    }

    pub fn means(&self) -> &Matrix {
        &self.means
    }

    /// Class-major balanced sample: `per_class` rows of class 0, then class 1, ...
    pub fn sample(&self, per_class: usize, rng: &mut SimRng) -> Dataset {
        let (c, d) = self.means.shape();
        let mut features = Matrix::zeros(c * per_class, d);
        let mut labels = Vec::with_capacity(c * per_class);
        for class in 0..c {
            for k in 0..per_class {
                let row = features.row_mut(class * per_class + k);
                for (v, m) in row.iter_mut().zip(self.means.row(class)) {
                    let noise: f64 = rng.sample(StandardNormal);
                    *v = m + self.spread * noise;
                }
                labels.push(class);
            }
        }
        Dataset {
            features,
            labels,
            num_classes: c,
        }
    }
}

/// Balanced blob dataset, deterministic in `seed`. Panics on
/// `num_classes < 2` or `per_class == 0`.
pub fn make_blobs(
    num_classes: usize,
    per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> Dataset {
    make_blobs_with_test(num_classes, per_class, 0, input_dim, spread, seed).0
}

/// Train and held-out sets drawn around the same class means. The train set
/// is identical to [`make_blobs`] with the same arguments.
pub fn make_blobs_with_test(
    num_classes: usize,
    per_class: usize,
    test_per_class: usize,
    input_dim: usize,
    spread: f64,
    seed: u64,
) -> (Dataset, Option<Dataset>) {
    assert!(num_classes >= 2, "need at least two classes");
    assert!(per_class >= 1, "need at least one sample per class");
    let mut rng = SimRng::seed_from_u64(seed);
    let blobs = Blobs::new(num_classes, input_dim, spread, &mut rng);
    let train = blobs.sample(per_class, &mut rng);
    let test = (test_per_class > 0).then(|| {
        let mut test_rng = SimRng::seed_from_u64(derive_seed(seed, Stream::Blobs, 1));
        blobs.sample(test_per_class, &mut test_rng)
    });
    (train, test)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub alpha: f64,
    pub n_agents: usize,
    pub seed: u64,
}

const MAX_REDRAWS: usize = 100;

/// Sample from a symmetric Dirichlet in log space. For shape below one,
/// `G(a) = G(a + 1) * U^(1/a)` keeps tiny concentrations from underflowing
/// to an all-zero draw.
pub(crate) fn sample_dirichlet(alpha: f64, k: usize, rng: &mut SimRng) -> Vec<f64> {
    let boosted = alpha < 1.0;
    let gamma = Gamma::new(if boosted { alpha + 1.0 } else { alpha }, 1.0)
        .expect("alpha validated positive");
    let logs: Vec<f64> = (0..k)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let mut lg = g.max(f64::MIN_POSITIVE).ln();
            if boosted {
                let u: f64 = 1.0 - rng.random::<f64>();
                lg += u.ln() / alpha;
            }
            lg
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Integer counts summing to `total` that stay within one of `p * total`.
/// Ties in the fractional part go to the lower index.
pub(crate) fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let exact: Vec<f64> = p.iter().map(|&q| q * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| e.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = exact[a] - exact[a].floor();
        let fb = exact[b] - exact[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

/// Disjoint label-skewed shards. For each class the agents' shares are drawn
/// from `Dirichlet(alpha)`; if an agent ends up empty the whole draw is
/// repeated (up to 100 times) and then single samples are moved from the
/// largest shard into the empty ones. Shard rows keep dataset order.
pub fn dirichlet_partition(d: &Dataset, spec: &PartitionSpec) -> Result<Vec<Dataset>> {
    Ok(dirichlet_partition_indices(d, spec)?
        .iter()
        .map(|idx| d.subset(idx))
        .collect())
}

pub fn dirichlet_partition_indices(d: &Dataset, spec: &PartitionSpec) -> Result<Vec<Vec<usize>>> {
    if !(spec.alpha > 0.0) || !spec.alpha.is_finite() {
        return Err(Error::config("alpha", "must be a positive finite number"));
    }
    let n = spec.n_agents;
    if n == 0 {
        return Err(Error::config("n_agents", "must be positive"));
    }
    if d.len() < n {
        return Err(Error::EmptyShardUnfixable {
            agents: n,
            samples: d.len(),
        });
    }
    let mut rng = SimRng::seed_from_u64(spec.seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); d.num_classes()];
    for (i, &l) in d.labels().iter().enumerate() {
        by_class[l].push(i);
    }

    let mut counts: Vec<Vec<usize>> = Vec::new();
    for _ in 0..MAX_REDRAWS {
        counts = by_class
            .iter()
            .map(|members| {
                let p = sample_dirichlet(spec.alpha, n, &mut rng);
                largest_remainder(&p, members.len())
            })
            .collect();
        let all_filled = (0..n).all(|a| counts.iter().any(|c| c[a] > 0));
        if all_filled {
            break;
        }
    }

    let mut shards: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (members, class_counts) in by_class.iter_mut().zip(&counts) {
        members.shuffle(&mut rng);
        let mut start = 0;
        for (agent, &k) in class_counts.iter().enumerate() {
            shards[agent].extend_from_slice(&members[start..start + k]);
            start += k;
        }
    }
    for s in &mut shards {
        s.sort_unstable();
    }

    for empty in 0..n {
        if !shards[empty].is_empty() {
            continue;
        }
        let donor = (0..n)
            .max_by(|&a, &b| shards[a].len().cmp(&shards[b].len()).then(b.cmp(&a)))
            .expect("n > 0");
        if shards[donor].len() < 2 {
            return Err(Error::EmptyShardUnfixable {
                agents: n,
                samples: d.len(),
            });
        }
        let moved = shards[donor].pop().expect("donor non-empty");
        shards[empty].push(moved);
    }
    Ok(shards)
}

/// Mean total-variation distance between each shard's label distribution
/// and the pooled label distribution.
pub fn skew_metric(shards: &[Dataset]) -> f64 {
    assert!(shards.len() >= 2, "skew needs at least two shards");
    let c = shards[0].num_classes();
    let mut global = vec![0usize; c];
    let mut total = 0usize;
    let hists: Vec<Vec<usize>> = shards.iter().map(Dataset::class_histogram).collect();
    for h in &hists {
        for (g, v) in global.iter_mut().zip(h) {
            *g += v;
        }
        total += h.iter().sum::<usize>();
    }
    let tv_sum: f64 = hists
        .iter()
        .map(|h| {
            let n: usize = h.iter().sum();
            0.5 * h
                .iter()
                .zip(&global)
                .map(|(&a, &g)| (a as f64 / n as f64 - g as f64 / total as f64).abs())
                .sum::<f64>()
        })
        .sum();
    tv_sum / shards.len() as f64
}

/// Epoch-wise shuffled mini-batches over one shard. The final batch of an
/// epoch may be short.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    order: Vec<usize>,
    cursor: usize,
    rng: SimRng,
}

impl BatchSampler {
    pub fn new(shard_len: usize, rng: SimRng) -> Self {
        assert!(shard_len > 0, "empty shard");
        let mut s = BatchSampler {
            order: (0..shard_len).collect(),
            cursor: 0,
            rng,
        };
        s.order.shuffle(&mut s.rng);
        s
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.cursor >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let end = (self.cursor + batch_size).min(self.order.len());
        let b = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        b
    }
}
