//! Experiment configuration (TOML), `key=value` overrides and grid expansion.

use std::cmp::Ordering;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::ccl::{CclConfig, SimilarityKind};
use crate::graph::{Topology, TopologyKind};
use crate::model::{Activation, ModelSpec};
use crate::optim::{LrSchedule, OptimizerConfig};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "dsgdm-n")]
    DsgdmN,
    #[serde(rename = "qg-dsgdm-n")]
    QgDsgdmN,
    #[serde(rename = "ccl")]
    Ccl,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::DsgdmN => "dsgdm-n",
            Method::QgDsgdmN => "qg-dsgdm-n",
            Method::Ccl => "ccl",
        }
    }

    /// Whether the parameter update uses quasi-global momentum.
    pub fn uses_qgm(self) -> bool {
        matches!(self, Method::QgDsgdmN | Method::Ccl)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dsgdm-n" | "dsgdm" => Ok(Method::DsgdmN),
            "qg-dsgdm-n" | "qgm" => Ok(Method::QgDsgdmN),
            "ccl" => Ok(Method::Ccl),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TopologyConfig {
    pub kind: TopologyKind,
    pub n_agents: usize,
    /// Explicit torus shape; both or neither.
    pub rows: Option<usize>,
    pub cols: Option<usize>,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            kind: TopologyKind::Ring,
            n_agents: 16,
            rows: None,
            cols: None,
        }
    }
}

impl TopologyConfig {
    pub fn build(&self) -> Result<Topology> {
        match (self.kind, self.rows, self.cols) {
            (TopologyKind::Torus, Some(r), Some(c)) => {
                if r * c != self.n_agents {
                    return Err(Error::config(
                        "topology.rows",
                        format!("{r} x {c} does not match n_agents = {}", self.n_agents),
                    ));
                }
                Topology::torus(r, c)
            }
            (_, None, None) => Topology::build(self.kind, self.n_agents),
            _ => Err(Error::config(
                "topology.rows",
                "rows/cols are only valid together and only for a torus",
            )),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dims: Vec<usize>,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            hidden_dims: vec![64, 32],
            activation: Activation::Tanh,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    #[default]
    Blobs,
    Csv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub input_dim: usize,
    pub spread: f64,
    /// CSV rows `f_1, ..., f_d, label`.
    pub path: Option<PathBuf>,
    /// Held-out CSV; without it the consensus model is scored on the train set.
    pub test_path: Option<PathBuf>,
    /// Class count of a CSV source; inferred from labels when absent.
    pub num_classes: Option<usize>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            source: DataSource::Blobs,
            classes: 10,
            per_class: 100,
            test_per_class: 100,
            input_dim: 16,
            spread: 0.45,
            path: None,
            test_path: None,
            num_classes: None,
        }
    }
}

/// Lists to sweep; an absent list keeps the base config's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub method: Vec<Method>,
    pub alpha: Vec<f64>,
    pub lambda_m: Vec<f64>,
    pub lambda_d: Vec<f64>,
    pub similarity: Vec<SimilarityKind>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub seeds: Vec<u64>,
    pub alpha: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    pub beta: f64,
    pub gamma: f64,
    pub nesterov: bool,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub similarity: SimilarityKind,
    pub include_self_summary: bool,
    /// Compute L_mv / L_dv for the baselines too (outside byte and MAC accounting).
    pub log_contrastive: bool,
    /// Consensus evaluation every this many rounds; 0 evaluates only at the end.
    pub eval_interval: usize,
    pub workers: usize,
    pub output_dir: PathBuf,
    pub topology: TopologyConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub grid: Option<GridSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::QgDsgdmN,
            seeds: vec![0],
            alpha: 0.1,
            batch_size: 32,
            epochs: 30,
            lr: 0.1,
            beta: 0.9,
            gamma: 1.0,
            nesterov: true,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::default(),
            lambda_m: 0.01,
            lambda_d: 0.01,
            similarity: SimilarityKind::Mse,
            include_self_summary: true,
            log_contrastive: true,
            eval_interval: 0,
            workers: 1,
            output_dir: PathBuf::from("runs"),
            topology: TopologyConfig::default(),
            model: ModelConfig::default(),
            data: DataConfig::default(),
            grid: None,
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::config(key, "empty override key"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(key, format!("`{p}` is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Value side of an override: any TOML literal, else a bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Trims serde's message down to the offending field when it names one.
fn field_from_toml_error(msg: &str) -> String {
    for marker in ["unknown field `", "missing field `"] {
        if let Some(pos) = msg.find(marker) {
            let rest = &msg[pos + marker.len()..];
            if let Some(end) = rest.find('`') {
                return rest[..end].to_string();
            }
        }
    }
    "config".to_string()
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| Error::config("config", e.to_string()))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::config(ov.as_str(), "override must look like key=value"))?;
            set_dotted(&mut table, k.trim(), parse_override_value(v))?;
        }
        let canonical =
            toml::to_string(&table).map_err(|e| Error::config("config", e.to_string()))?;
        let cfg: ExperimentConfig = toml::from_str(&canonical).map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            Error::config(field_from_toml_error(&msg), msg)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path.as_ref())?;
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        // relative data paths are resolved against the config file
        if let Some(dir) = path.as_ref().parent() {
            for p in [&mut cfg.data.path, &mut cfg.data.test_path]
                .into_iter()
                .flatten()
            {
                if p.is_relative() {
                    *p = dir.join(&*p);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config(
                "alpha",
                format!("must be positive and finite, got {}", self.alpha),
            ));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "need at least one seed"));
        }
        if self.workers == 0 {
            return Err(Error::config("workers", "must be at least 1"));
        }
        if !(self.lambda_m >= 0.0 && self.lambda_m.is_finite()) {
            return Err(Error::config("lambda_m", "must be finite and non-negative"));
        }
        if !(self.lambda_d >= 0.0 && self.lambda_d.is_finite()) {
            return Err(Error::config("lambda_d", "must be finite and non-negative"));
        }
        self.optimizer().validate()?;
        self.topology.build()?;
        match self.data.source {
            DataSource::Blobs => {
                if self.data.classes < 2 {
                    return Err(Error::config("data.classes", "need at least 2 classes"));
                }
                if self.data.per_class == 0 {
                    return Err(Error::config("data.per_class", "must be at least 1"));
                }
                if self.data.input_dim == 0 {
                    return Err(Error::config("data.input_dim", "must be at least 1"));
                }
                if !(self.data.spread >= 0.0 && self.data.spread.is_finite()) {
                    return Err(Error::config(
                        "data.spread",
                        "must be finite and non-negative",
                    ));
                }
                if self.data.classes * self.data.per_class < self.topology.n_agents {
                    return Err(Error::config("data.per_class", "fewer samples than agents"));
                }
                ModelSpec::new(
                    self.data.input_dim,
                    self.model.hidden_dims.clone(),
                    self.data.classes,
                    self.model.activation,
                )?;
            }
            DataSource::Csv => {
                if self.data.path.is_none() {
                    return Err(Error::config("data.path", "csv source needs a path"));
                }
                if self.model.hidden_dims.is_empty() || self.model.hidden_dims.contains(&0) {
                    return Err(Error::config(
                        "model.hidden_dims",
                        "need at least one non-empty layer",
                    ));
                }
            }
        }
        if let Some(g) = &self.grid {
            if g.alpha.iter().any(|&a| !(a > 0.0 && a.is_finite())) {
                return Err(Error::config("grid.alpha", "every alpha must be positive"));
            }
            if g.lambda_m
                .iter()
                .chain(&g.lambda_d)
                .any(|&l| !(l >= 0.0 && l.is_finite()))
            {
                return Err(Error::config("grid.lambda", "weights must be non-negative"));
            }
        }
        Ok(())
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr: self.lr,
            beta: self.beta,
            gamma: self.gamma,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
            schedule: self.lr_schedule.clone(),
        }
    }

    pub fn ccl(&self) -> CclConfig {
        CclConfig {
            lambda_m: self.lambda_m,
            lambda_d: self.lambda_d,
            kind: self.similarity,
            include_self_summary: self.include_self_summary,
        }
    }

    /// The grid's cells in (method, alpha, lambda_m, lambda_d, similarity)
    /// order. Without a grid the config itself is the single cell.
    pub fn grid_cells(&self) -> Vec<GridCell> {
        let g = self.grid.clone().unwrap_or_default();
        let or = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
        let methods = if g.method.is_empty() {
            vec![self.method]
        } else {
            g.method.clone()
        };
        let sims = if g.similarity.is_empty() {
            vec![self.similarity]
        } else {
            g.similarity.clone()
        };
        let mut cells = Vec::new();
        for &method in &methods {
            for &alpha in &or(&g.alpha, self.alpha) {
                for &lambda_m in &or(&g.lambda_m, self.lambda_m) {
                    for &lambda_d in &or(&g.lambda_d, self.lambda_d) {
                        for &similarity in &sims {
                            cells.push(GridCell {
                                method,
                                alpha,
                                lambda_m,
                                lambda_d,
                                similarity,
                            });
                        }
                    }
                }
            }
        }
        cells.sort_by(GridCell::cmp_key);
        cells.dedup();
        cells
    }

    /// Copy of `self` with the cell's values applied and the grid removed.
    pub fn for_cell(&self, cell: &GridCell) -> ExperimentConfig {
        let mut c = self.clone();
        c.method = cell.method;
        c.alpha = cell.alpha;
        c.lambda_m = cell.lambda_m;
        c.lambda_d = cell.lambda_d;
        c.similarity = cell.similarity;
        c.grid = None;
        c
    }
}

/// One hyper-parameter combination of a grid.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub method: Method,
    pub alpha: f64,
    pub lambda_m: f64,
    pub lambda_d: f64,
    pub similarity: SimilarityKind,
}

impl GridCell {
    pub fn cmp_key(&self, other: &Self) -> Ordering {
        self.method
            .cmp(&other.method)
            .then(self.alpha.total_cmp(&other.alpha))
            .then(self.lambda_m.total_cmp(&other.lambda_m))
            .then(self.lambda_d.total_cmp(&other.lambda_d))
            .then(self.similarity.cmp(&other.similarity))
    }

    /// Stable directory-friendly name.
    pub fn slug(&self) -> String {
        format!(
            "{}_a{:?}_lm{:?}_ld{:?}_{}",
            self.method, self.alpha, self.lambda_m, self.lambda_d, self.similarity
        )
    }
}

pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    ExperimentConfig::from_file(path, overrides)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = ExperimentConfig::from_toml_str("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.method, Method::QgDsgdmN);
        assert_eq!(c.topology.kind, TopologyKind::Ring);
        assert_eq!(c.topology.n_agents, 16);
        assert_eq!(c.alpha, 0.1);
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.beta, 0.9);
        assert_eq!(c.gamma, 1.0);
    }

    #[test]
    fn negative_alpha_names_field() {
        match ExperimentConfig::from_toml_str("alpha = -1.0", &[]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "alpha"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_rejected() {
        match ExperimentConfig::from_toml_str("alhpa = 0.5", &[]) {
            Err(Error::Config { field, .. }) => assert_eq!(field, "alhpa"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(ExperimentConfig::from_toml_str("[model]\nwidth = 3", &[]).is_err());
    }

    #[test]
    fn overrides_apply_with_dotted_keys() {
        let c = ExperimentConfig::from_toml_str(
            "method = \"ccl\"",
            &[
                "alpha=0.01".into(),
                "topology.kind=torus".into(),
                "topology.n_agents=9".into(),
                "model.hidden_dims=[8, 4]".into(),
                "similarity=cosine".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.method, Method::Ccl);
        assert_eq!(c.alpha, 0.01);
        assert_eq!(c.topology.kind, TopologyKind::Torus);
        assert_eq!(c.model.hidden_dims, vec![8, 4]);
        assert_eq!(c.similarity, SimilarityKind::Cosine);
        assert!(ExperimentConfig::from_toml_str("", &["noequals".into()]).is_err());
    }

    #[test]
    fn topology_size_checked_at_parse_time() {
        let e = ExperimentConfig::from_toml_str("[topology]\nkind = \"dyck\"\nn_agents = 16", &[]);
        assert!(matches!(e, Err(Error::UnsupportedSize { .. })));
    }

    #[test]
    fn lambda_grid_enumerates_four_runs() {
        let c = ExperimentConfig::from_toml_str(
            "method = \"ccl\"\n[grid]\nlambda_m = [1.0, 0.1, 0.01, 0.001]",
            &[],
        )
        .unwrap();
        let cells = c.grid_cells();
        assert_eq!(cells.len(), 4);
        assert_eq!(
            cells.iter().map(|c| c.lambda_m).collect::<Vec<_>>(),
            vec![0.001, 0.01, 0.1, 1.0]
        );
        assert!(cells
            .iter()
            .all(|c| c.method == Method::Ccl && c.lambda_d == 0.01));
    }

    #[test]
    fn grid_cells_sorted_by_method_then_alpha() {
        let c = ExperimentConfig::from_toml_str(
            "[grid]\nmethod = [\"qg-dsgdm-n\", \"dsgdm-n\"]\nalpha = [0.1, 0.01]",
            &[],
        )
        .unwrap();
        let keys: Vec<(Method, f64)> = c.grid_cells().iter().map(|c| (c.method, c.alpha)).collect();
        assert_eq!(
            keys,
            vec![
                (Method::DsgdmN, 0.01),
                (Method::DsgdmN, 0.1),
                (Method::QgDsgdmN, 0.01),
                (Method::QgDsgdmN, 0.1)
            ]
        );
        let cell = c.grid_cells()[0];
        let cfg = c.for_cell(&cell);
        assert_eq!(cfg.method, Method::DsgdmN);
        assert!(cfg.grid.is_none());
    }
}
