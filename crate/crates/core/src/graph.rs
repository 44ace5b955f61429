//! Communication topologies and their gossip mixing matrices.

use std::collections::BTreeSet;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::linalg::{dot, Matrix};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TopologyKind {
    Ring,
    Chain,
    Dyck,
    Torus,
    FullyConnected,
}

impl TopologyKind {
    pub fn name(self) -> &'static str {
        match self {
            TopologyKind::Ring => "ring",
            TopologyKind::Chain => "chain",
            TopologyKind::Dyck => "dyck",
            TopologyKind::Torus => "torus",
            TopologyKind::FullyConnected => "fully-connected",
        }
    }
}

impl fmt::Display for TopologyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TopologyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ring" => Ok(TopologyKind::Ring),
            "chain" => Ok(TopologyKind::Chain),
            "dyck" => Ok(TopologyKind::Dyck),
            "torus" => Ok(TopologyKind::Torus),
            "fully-connected" | "full" | "complete" => Ok(TopologyKind::FullyConnected),
            other => Err(Error::config(
                "topology.kind",
                format!("unknown topology `{other}`"),
            )),
        }
    }
}

/// Undirected connected graph over agents `0..n`. Self-loops are implicit
/// and never stored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Topology {
    kind: TopologyKind,
    n_agents: usize,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
}

/// LCF notation of the Dyck graph: `[5, -5, 13, -13]^8` around a 32-cycle.
const DYCK_LCF: [i64; 4] = [5, -5, 13, -13];
pub const DYCK_SIZE: usize = 32;

impl Topology {
    /// Builds the named topology. Torus sizes are factored as `r x c` with
    /// `r` the largest divisor of `n` not above `sqrt(n)` (so 32 = 4 x 8).
    pub fn build(kind: TopologyKind, n_agents: usize) -> Result<Self> {
        let unsupported = |reason: String| Error::UnsupportedSize {
            kind: kind.name(),
            reason,
        };
        match kind {
            TopologyKind::FullyConnected => {
                if n_agents == 0 {
                    return Err(unsupported("need at least one agent".into()));
                }
                let mut edges = Vec::new();
                for i in 0..n_agents {
                    for j in i + 1..n_agents {
                        edges.push((i, j));
                    }
                }
                Ok(Self::from_edges(kind, n_agents, edges))
            }
            TopologyKind::Ring => {
                if n_agents < 3 {
                    return Err(unsupported(format!(
                        "a ring with two distinct neighbors per agent needs n >= 3, got {n_agents}"
                    )));
                }
                let edges = (0..n_agents).map(|i| (i, (i + 1) % n_agents));
                Ok(Self::from_edges(kind, n_agents, edges))
            }
            TopologyKind::Chain => {
                if n_agents < 2 {
                    return Err(unsupported(format!("chain needs n >= 2, got {n_agents}")));
                }
                let edges = (0..n_agents - 1).map(|i| (i, i + 1));
                Ok(Self::from_edges(kind, n_agents, edges))
            }
            TopologyKind::Dyck => {
                if n_agents != DYCK_SIZE {
                    return Err(unsupported(format!(
                        "the Dyck graph has exactly {DYCK_SIZE} vertices, got {n_agents}"
                    )));
                }
                let n = DYCK_SIZE as i64;
                let mut edges = Vec::new();
                for i in 0..n {
                    edges.push((i as usize, ((i + 1) % n) as usize));
                    let j = (i + DYCK_LCF[(i % 4) as usize]).rem_euclid(n);
                    edges.push((i as usize, j as usize));
                }
                Ok(Self::from_edges(kind, n_agents, edges))
            }
            TopologyKind::Torus => {
                let rows = (3..=n_agents)
                    .take_while(|r| r * r <= n_agents)
                    .filter(|r| n_agents % r == 0)
                    .last()
                    .ok_or_else(|| {
                        unsupported(format!(
                            "{n_agents} has no factorization r x c with r, c >= 3"
                        ))
                    })?;
                Self::torus(rows, n_agents / rows)
            }
        }
    }

    /// 2-D torus with wraparound. Needs both sides >= 3 so the four
    /// neighbors of every cell are distinct.
    pub fn torus(rows: usize, cols: usize) -> Result<Self> {
        if rows < 3 || cols < 3 {
            return Err(Error::UnsupportedSize {
                kind: "torus",
                reason: format!("torus needs rows, cols >= 3, got {rows} x {cols}"),
            });
        }
        let id = |r: usize, c: usize| r * cols + c;
        let mut edges = Vec::new();
        for r in 0..rows {
            for c in 0..cols {
                edges.push((id(r, c), id(r, (c + 1) % cols)));
                edges.push((id(r, c), id((r + 1) % rows, c)));
            }
        }
        Ok(Self::from_edges(TopologyKind::Torus, rows * cols, edges))
    }

    fn from_edges(
        kind: TopologyKind,
        n_agents: usize,
        edges: impl IntoIterator<Item = (usize, usize)>,
    ) -> Self {
        let edges: BTreeSet<(usize, usize)> = edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        let mut neighbors = vec![Vec::new(); n_agents];
        for &(a, b) in &edges {
            neighbors[a].push(b);
            neighbors[b].push(a);
        }
        for nb in &mut neighbors {
            nb.sort_unstable();
        }
        Topology {
            kind,
            n_agents,
            edges,
            neighbors,
        }
    }

    pub fn kind(&self) -> TopologyKind {
        self.kind
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Distinct neighbors of `i`, excluding `i` itself, ascending.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.neighbors[i].len()
    }

    pub fn is_regular(&self) -> bool {
        self.neighbors.windows(2).all(|w| w[0].len() == w[1].len())
    }

    pub fn is_connected(&self) -> bool {
        if self.n_agents == 0 {
            return false;
        }
        let mut seen = vec![false; self.n_agents];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &u in &self.neighbors[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `1/(deg+1)` on every edge and self-loop for regular graphs,
    /// Metropolis-Hastings weights otherwise.
    pub fn uniform_mixing(&self) -> MixingMatrix {
        let n = self.n_agents;
        let mut w = Matrix::zeros(n, n);
        if self.is_regular() {
            let d = self.neighbors.first().map_or(0, Vec::len);
            let v = 1.0 / (d as f64 + 1.0);
            for i in 0..n {
                w.set(i, i, v);
                for &j in &self.neighbors[i] {
                    w.set(i, j, v);
                }
            }
        } else {
            for &(a, b) in &self.edges {
                let v = 1.0 / (1.0 + self.degree(a).max(self.degree(b)) as f64);
                w.set(a, b, v);
                w.set(b, a, v);
            }
            for i in 0..n {
                let off: f64 = self.neighbors[i].iter().map(|&j| w.get(i, j)).sum();
                w.set(i, i, 1.0 - off);
            }
        }
        MixingMatrix { w }
    }
}

/// Symmetric doubly-stochastic gossip weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixingMatrix {
    w: Matrix,
}

/// Row/column sum tolerance for doubly-stochastic checks.
pub const STOCHASTIC_TOL: f64 = 1e-12;

impl MixingMatrix {
    pub fn from_matrix(w: Matrix) -> Result<Self> {
        let m = MixingMatrix { w };
        m.check_invariants()?;
        Ok(m)
    }

    pub fn n(&self) -> usize {
        self.w.rows()
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.w.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.w.row(i)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.w
    }

    /// Symmetry is checked exactly, sums to [`STOCHASTIC_TOL`].
    pub fn check_invariants(&self) -> Result<()> {
        let (r, c) = self.w.shape();
        if r != c || r == 0 {
            return Err(Error::shape(format!(
                "mixing matrix must be square, got {r}x{c}"
            )));
        }
        for i in 0..r {
            let mut row = 0.0;
            let mut col = 0.0;
            for j in 0..r {
                let v = self.w.get(i, j);
                if !(v >= 0.0) {
                    return Err(Error::shape(format!("negative or NaN weight at ({i},{j})")));
                }
                if v != self.w.get(j, i) {
                    return Err(Error::shape(format!("asymmetric at ({i},{j})")));
                }
                row += v;
                col += self.w.get(j, i);
            }
            if (row - 1.0).abs() > STOCHASTIC_TOL || (col - 1.0).abs() > STOCHASTIC_TOL {
                return Err(Error::shape(format!("row/column {i} does not sum to 1")));
            }
        }
        Ok(())
    }

    /// `(1 - gamma) I + gamma W`
    pub fn damped(&self, gamma: f64) -> MixingMatrix {
        let n = self.n();
        let mut w = self.w.clone();
        w.scale(gamma);
        for i in 0..n {
            w.set(i, i, w.get(i, i) + (1.0 - gamma));
        }
        MixingMatrix { w }
    }

    /// One gossip step over agent vectors: `x_i <- sum_j w_ij x_j`.
    pub fn mix(&self, xs: &[Vec<f64>]) -> Vec<Vec<f64>> {
        assert_eq!(xs.len(), self.n());
        (0..self.n())
            .map(|i| {
                let mut out = vec![0.0; xs[i].len()];
                for (j, x) in xs.iter().enumerate() {
                    let w = self.w.get(i, j);
                    if w != 0.0 {
                        crate::linalg::axpy(w, x, &mut out);
                    }
                }
                out
            })
            .collect()
    }

    fn apply_deflated(&self, v: &[f64], out: &mut [f64]) {
        let n = self.n();
        for i in 0..n {
            out[i] = dot(self.w.row(i), v);
        }
        let mean = out.iter().sum::<f64>() / n as f64;
        out.iter_mut().for_each(|x| *x -= mean);
    }

    /// Magnitude of the second-largest eigenvalue and a unit eigenvector
    /// for it, by power iteration on `(W - J)^2` with `J = 11^T / n`.
    /// Squaring folds `+lambda` and `-lambda` into the same eigenvalue, which
    /// keeps the iteration convergent on bipartite graphs.
    pub fn second_eigen(&self) -> Result<(f64, Vec<f64>)> {
        const MAX_ITER: usize = 1_000_000;
        const TOL: f64 = 1e-13;
        let n = self.n();
        if n == 1 {
            return Ok((0.0, vec![0.0]));
        }
        // fixed start vector with no symmetry, projected off the mean
        let mut v: Vec<f64> = (0..n)
            .map(|i| ((i as f64 + 1.0) * 0.618_033_988_749_895).fract() - 0.5)
            .collect();
        let mean = v.iter().sum::<f64>() / n as f64;
        v.iter_mut().for_each(|x| *x -= mean);
        let norm = crate::linalg::norm2(&v);
        v.iter_mut().for_each(|x| *x /= norm);

        let mut tmp = vec![0.0; n];
        let mut next = vec![0.0; n];
        let mut prev = f64::NAN;
        for _ in 0..MAX_ITER {
            self.apply_deflated(&v, &mut tmp);
            self.apply_deflated(&tmp, &mut next);
            let rayleigh = dot(&v, &next);
            let norm = crate::linalg::norm2(&next);
            if norm < 1e-300 {
                return Ok((0.0, v));
            }
            next.iter_mut().for_each(|x| *x /= norm);
            std::mem::swap(&mut v, &mut next);
            if (rayleigh - prev).abs() <= TOL * rayleigh.abs() {
                return Ok((rayleigh.max(0.0).sqrt(), v));
            }
            prev = rayleigh;
        }
        Err(Error::NonConvergence {
            iterations: MAX_ITER,
        })
    }

    /// `1 - |lambda_2|`.
    pub fn spectral_gap(&self) -> Result<f64> {
        Ok(1.0 - self.second_eigen()?.0)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut wtr = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(out);
        for row in self.w.iter_rows() {
            wtr.write_record(row.iter().map(|v| format!("{v:.17e}")))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

pub fn build_topology(kind: TopologyKind, n_agents: usize) -> Result<Topology> {
    Topology::build(kind, n_agents)
}

pub fn uniform_mixing(t: &Topology) -> MixingMatrix {
    t.uniform_mixing()
}

pub fn spectral_gap(w: &MixingMatrix) -> Result<f64> {
    w.spectral_gap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn ring_neighbors() {
        let t = Topology::build(TopologyKind::Ring, 16).unwrap();
        for i in 0..16 {
            let mut expect = vec![(i + 15) % 16, (i + 1) % 16];
            expect.sort();
            assert_eq!(t.neighbors(i), expect.as_slice());
        }
        assert!(t.is_connected());
    }

    #[test]
    fn smallest_chain() {
        let t = Topology::build(TopologyKind::Chain, 2).unwrap();
        assert_eq!(t.edges().iter().copied().collect::<Vec<_>>(), vec![(0, 1)]);
    }

    #[test]
    fn torus_3x3() {
        let t = Topology::build(TopologyKind::Torus, 9).unwrap();
        assert_eq!(t.edges().len(), 18);
        assert!((0..9).all(|i| t.degree(i) == 4));
    }

    #[test]
    fn torus_32_is_4x8() {
        let t = Topology::build(TopologyKind::Torus, 32).unwrap();
        assert_eq!(t.edges().len(), 64);
        assert!((0..32).all(|i| t.degree(i) == 4));
        assert!(t.is_connected());
    }

    #[test]
    fn size_constraints() {
        assert!(matches!(
            Topology::build(TopologyKind::Dyck, 16),
            Err(Error::UnsupportedSize { .. })
        ));
        assert!(Topology::build(TopologyKind::Torus, 8).is_err());
        assert!(Topology::build(TopologyKind::Torus, 14).is_err());
        assert!(Topology::torus(2, 5).is_err());
        assert!(Topology::build(TopologyKind::Ring, 2).is_err());
        assert!(Topology::build(TopologyKind::Chain, 1).is_err());
        assert!(Topology::build(TopologyKind::FullyConnected, 1).is_ok());
    }

    #[test]
    fn uniform_weights() {
        let ring = Topology::build(TopologyKind::Ring, 16)
            .unwrap()
            .uniform_mixing();
        for i in 0..16 {
            assert_eq!(ring.weight(i, i), 1.0 / 3.0);
            assert_eq!(ring.weight(i, (i + 1) % 16), 1.0 / 3.0);
        }
        let torus = Topology::build(TopologyKind::Torus, 32)
            .unwrap()
            .uniform_mixing();
        for i in 0..32 {
            assert_eq!(torus.row(i).iter().filter(|&&v| v == 0.2).count(), 5);
        }
        let dyck = Topology::build(TopologyKind::Dyck, 32)
            .unwrap()
            .uniform_mixing();
        assert!((0..32).all(|i| dyck.row(i).iter().filter(|&&v| v == 0.25).count() == 4));
    }

    #[test]
    fn fully_connected_reaches_consensus_in_one_step() {
        let w = Topology::build(TopologyKind::FullyConnected, 4)
            .unwrap()
            .uniform_mixing();
        assert!(w.matrix().as_slice().iter().all(|&v| v == 0.25));
        let xs = vec![vec![1.0], vec![2.0], vec![3.0], vec![6.0]];
        for x in w.mix(&xs) {
            assert_eq!(x, vec![3.0]);
        }
        assert_eq!(w.spectral_gap().unwrap(), 1.0);
    }

    #[test]
    fn chain_metropolis_hastings() {
        let w = Topology::build(TopologyKind::Chain, 5)
            .unwrap()
            .uniform_mixing();
        w.check_invariants().unwrap();
        assert_eq!(w.weight(0, 1), 1.0 / 3.0);
        assert_eq!(w.weight(0, 0), 1.0 - 1.0 / 3.0);
        assert_eq!(w.weight(1, 2), 1.0 / 3.0);
        assert_eq!(w.weight(0, 2), 0.0);
    }

    #[test]
    fn ring_spectral_gap_closed_form() {
        let w = Topology::build(TopologyKind::Ring, 4)
            .unwrap()
            .uniform_mixing();
        assert!((w.spectral_gap().unwrap() - 2.0 / 3.0).abs() < 1e-9);
        let w = Topology::build(TopologyKind::Ring, 16)
            .unwrap()
            .uniform_mixing();
        let lam2 = (1.0 + 2.0 * (2.0 * PI / 16.0).cos()) / 3.0;
        let gap = w.spectral_gap().unwrap();
        assert!(((gap - (1.0 - lam2)) / (1.0 - lam2)).abs() < 1e-9);
    }

    #[test]
    fn damped_keeps_invariants() {
        let w = Topology::build(TopologyKind::Torus, 9)
            .unwrap()
            .uniform_mixing();
        let d = w.damped(0.9);
        d.check_invariants().unwrap();
        assert_eq!(w.damped(1.0), w);
    }

    #[test]
    fn csv_dump() {
        let w = Topology::build(TopologyKind::Ring, 3)
            .unwrap()
            .uniform_mixing();
        let mut buf = Vec::new();
        w.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 3);
        let first: Vec<f64> = text
            .lines()
            .next()
            .unwrap()
            .split(',')
            .map(|v| v.parse().unwrap())
            .collect();
        assert_eq!(first, vec![1.0 / 3.0; 3]);
    }
}
