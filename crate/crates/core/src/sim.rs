//! Round-synchronous multi-agent engine.
//!
//! Every round runs as a sequence of phases separated by barriers. Inside a
//! phase agents work in parallel on state they own exclusively; everything
//! that crosses agents travels as a [`WireMessage`] posted to an
//! [`OpenRound`] and can only be read from the [`SealedRound`] produced once
//! every agent has posted. Per-agent work is sequential, so results do not
//! depend on the worker count.
//!
//! Round order (quasi-global momentum and CCL):
//!
//! 1. send `x_i^k` to every neighbor;
//! 2. sample the mini-batch, evaluate each received model on it
//!    (model-variant cross-features) and summarize those features per class;
//! 3. CCL only: send each summary back to the neighbor whose model produced
//!    it (data-variant cross-features);
//! 4. gradient of the local loss;
//! 5. quasi-global momentum step with gossip over the round-start parameters.
//!
//! DSGDm instead takes the local momentum step first and gossips the half
//! step parameters at the end of the round.

use std::io::Write;
use std::path::Path;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ccl::{self, CclConfig, CrossFeatureSummary, LossParts};
use crate::config::{DataSource, ExperimentConfig, Method};
use crate::graph::{MixingMatrix, Topology};
use crate::linalg::Matrix;
use crate::model::{FeatureBatch, Mlp, ModelSpec, ParamVector};
use crate::optim::{self, OptState, OptimizerConfig};
use crate::partition::{self, BatchSampler, Dataset, PartitionSpec};
use crate::rng::{derive_seed, stream_rng, Stream};
use crate::{Error, Result};

/// Payload exchanged between neighbors. Reals and counts are 8 bytes each.
#[derive(Clone, Debug, PartialEq)]
pub enum WireMessage {
    Param(Arc<ParamVector>),
    Summary(CrossFeatureSummary),
}

impl WireMessage {
    pub fn wire_bytes(&self) -> u64 {
        match self {
            WireMessage::Param(p) => 8 * p.len() as u64,
            WireMessage::Summary(s) => {
                CrossFeatureSummary::wire_bytes(s.num_classes(), s.feature_dim())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Envelope {
    pub round: usize,
    pub from: usize,
    pub to: usize,
    pub msg: WireMessage,
}

/// Collects one communication phase. Each agent posts its full outbox
/// exactly once; nothing can be read before [`OpenRound::seal`].
#[derive(Debug)]
pub struct OpenRound {
    round: usize,
    outboxes: Vec<Mutex<Option<Vec<Envelope>>>>,
}

impl OpenRound {
    pub fn new(round: usize, n_agents: usize) -> Self {
        OpenRound {
            round,
            outboxes: (0..n_agents).map(|_| Mutex::new(None)).collect(),
        }
    }

    /// Records `from`'s outgoing messages and returns the bytes they occupy.
    pub fn post(&self, from: usize, msgs: Vec<(usize, WireMessage)>) -> Result<u64> {
        let n = self.outboxes.len();
        let mut bytes = 0;
        let mut env = Vec::with_capacity(msgs.len());
        for (to, msg) in msgs {
            if to >= n || to == from {
                return Err(Error::shape(format!("agent {from} cannot send to {to}")));
            }
            bytes += msg.wire_bytes();
            env.push(Envelope {
                round: self.round,
                from,
                to,
                msg,
            });
        }
        let mut slot = self.outboxes[from].lock().expect("poisoned outbox");
        if slot.is_some() {
            return Err(Error::shape(format!(
                "agent {from} posted twice in round {}",
                self.round
            )));
        }
        *slot = Some(env);
        Ok(bytes)
    }

    /// Barrier: fails if some agent has not posted.
    pub fn seal(self) -> Result<SealedRound> {
        let n = self.outboxes.len();
        let mut inboxes: Vec<Vec<Envelope>> = vec![Vec::new(); n];
        for (agent, slot) in self.outboxes.into_iter().enumerate() {
            let env = slot.into_inner().expect("poisoned outbox").ok_or_else(|| {
                Error::shape(format!(
                    "agent {agent} did not post in round {}",
                    self.round
                ))
            })?;
            for e in env {
                inboxes[e.to].push(e);
            }
        }
        for inbox in &mut inboxes {
            inbox.sort_by_key(|e| e.from);
        }
        Ok(SealedRound {
            round: self.round,
            inboxes,
        })
    }
}

#[derive(Debug)]
pub struct SealedRound {
    round: usize,
    inboxes: Vec<Vec<Envelope>>,
}

impl SealedRound {
    pub fn round(&self) -> usize {
        self.round
    }

    /// Messages addressed to `agent`, ordered by sender.
    pub fn inbox(&self, agent: usize) -> &[Envelope] {
        &self.inboxes[agent]
    }
}

/// One agent's record for one round.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    pub agent: usize,
    pub lce: f64,
    pub lmv: f64,
    pub ldv: f64,
    /// Mini-batch accuracy before the update.
    pub acc: f64,
    pub bytes_sent: u64,
    /// Every forward pass, cross-feature passes included.
    pub fwd_macs: u64,
    pub bwd_macs: u64,
    /// The share of `fwd_macs` spent on cross-features.
    pub cross_fwd_macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub round: usize,
    pub test_loss: f64,
    pub test_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub rounds_per_epoch: usize,
    pub rows: Vec<RoundMetrics>,
    pub evals: Vec<EvalPoint>,
    pub consensus: ParamVector,
    /// Agent parameters after the last round.
    pub final_params: Vec<ParamVector>,
    /// Parameter snapshots after every round, when requested.
    pub trajectory: Option<Vec<Vec<ParamVector>>>,
}

pub const CSV_HEADER: [&str; 9] = [
    "k", "agent", "lce", "lmv", "ldv", "acc", "bytes", "fwd_mac", "bwd_mac",
];

impl MetricsLog {
    pub fn total_bytes(&self) -> u64 {
        self.rows.iter().map(|r| r.bytes_sent).sum()
    }

    pub fn final_eval(&self) -> &EvalPoint {
        self.evals
            .last()
            .expect("the final round is always evaluated")
    }

    /// Mean of `f` over all agents and the last `fraction` of rounds.
    pub fn tail_mean(&self, fraction: f64, f: impl Fn(&RoundMetrics) -> f64) -> f64 {
        let start =
            self.rounds - ((self.rounds as f64 * fraction).ceil() as usize).clamp(1, self.rounds);
        let tail: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.round >= start)
            .map(f)
            .collect();
        tail.iter().sum::<f64>() / tail.len() as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(CSV_HEADER)?;
        for r in &self.rows {
            w.write_record([
                r.round.to_string(),
                r.agent.to_string(),
                format!("{:?}", r.lce),
                format!("{:?}", r.lmv),
                format!("{:?}", r.ldv),
                format!("{:?}", r.acc),
                r.bytes_sent.to_string(),
                r.fwd_macs.to_string(),
                r.bwd_macs.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn summary(&self, config: &ExperimentConfig) -> RunSummary {
        let fin = self.final_eval();
        RunSummary {
            method: self.method,
            seed: self.seed,
            rounds: self.rounds,
            rounds_per_epoch: self.rounds_per_epoch,
            final_test_accuracy: fin.test_accuracy,
            final_test_loss: fin.test_loss,
            total_bytes: self.total_bytes(),
            compute_overhead: compute_overhead(self),
            evals: self.evals.clone(),
            config: config.clone(),
        }
    }

    /// Writes `metrics.csv`, `summary.json` and `consensus_params.bin` into `dir`.
    pub fn write_outputs(&self, dir: &Path, config: &ExperimentConfig) -> Result<RunSummary> {
        std::fs::create_dir_all(dir)?;
        self.write_csv(std::fs::File::create(dir.join("metrics.csv"))?)?;
        let summary = self.summary(config);
        let json = serde_json::to_string_pretty(&summary)?;
        std::fs::write(dir.join("summary.json"), json + "\n")?;
        self.consensus
            .write_binary(std::io::BufWriter::new(std::fs::File::create(
                dir.join("consensus_params.bin"),
            )?))?;
        Ok(summary)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub method: Method,
    pub seed: u64,
    pub rounds: usize,
    pub rounds_per_epoch: usize,
    pub final_test_accuracy: f64,
    pub final_test_loss: f64,
    pub total_bytes: u64,
    pub compute_overhead: f64,
    pub evals: Vec<EvalPoint>,
    pub config: ExperimentConfig,
}

/// Arithmetic mean of the agents' parameters, summed in agent order.
pub fn consensus_model(params: &[ParamVector]) -> ParamVector {
    assert!(!params.is_empty(), "consensus of zero agents");
    let mut sum = vec![0.0; params[0].len()];
    for p in params {
        crate::linalg::axpy(1.0, p, &mut sum);
    }
    let inv = 1.0 / params.len() as f64;
    sum.iter_mut().for_each(|v| *v *= inv);
    ParamVector(sum)
}

/// Bytes one agent with `peers` neighbors sends per round.
pub fn comm_cost(method: Method, spec: &ModelSpec, peers: usize) -> u64 {
    let params = 8 * spec.param_count() as u64;
    let per_peer = match method {
        Method::DsgdmN | Method::QgDsgdmN => params,
        Method::Ccl => {
            params + CrossFeatureSummary::wire_bytes(spec.num_classes, spec.feature_dim())
        }
    };
    peers as u64 * per_peer
}

/// Cross-feature forward MACs over all MACs of the run.
pub fn compute_overhead(log: &MetricsLog) -> f64 {
    let cross: u64 = log.rows.iter().map(|r| r.cross_fwd_macs).sum();
    let total: u64 = log.rows.iter().map(|r| r.fwd_macs + r.bwd_macs).sum();
    if total == 0 {
        0.0
    } else {
        cross as f64 / total as f64
    }
}

/// Everything a run needs besides the mutable per-agent state.
#[derive(Clone, Debug)]
pub struct Setup {
    pub model: Mlp,
    pub topology: Topology,
    pub mixing: MixingMatrix,
    pub shards: Vec<Dataset>,
    pub test: Dataset,
    pub init: ParamVector,
    pub rounds_per_epoch: usize,
}

impl Setup {
    pub fn prepare(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (train, test) = match config.data.source {
            DataSource::Blobs => {
                let d = &config.data;
                let (train, test) = partition::make_blobs_with_test(
                    d.classes,
                    d.per_class,
                    d.test_per_class,
                    d.input_dim,
                    d.spread,
                    derive_seed(seed, Stream::Blobs, 0),
                );
                let test = test.unwrap_or_else(|| train.clone());
                (train, test)
            }
            DataSource::Csv => {
                let path = config.data.path.as_ref().expect("validated");
                let train = Dataset::from_csv(path, config.data.num_classes)?;
                let test = match &config.data.test_path {
                    Some(p) => Dataset::from_csv(p, Some(train.num_classes()))?,
                    None => train.clone(),
                };
                if test.input_dim() != train.input_dim() {
                    return Err(Error::config(
                        "data.test_path",
                        "test features differ in width",
                    ));
                }
                (train, test)
            }
        };
        let spec = ModelSpec::new(
            train.input_dim(),
            config.model.hidden_dims.clone(),
            train.num_classes(),
            config.model.activation,
        )?;
        let model = Mlp::new(spec)?;
        let topology = config.topology.build()?;
        let mixing = topology.uniform_mixing();
        let shards = partition::dirichlet_partition(
            &train,
            &PartitionSpec {
                alpha: config.alpha,
                n_agents: topology.n_agents(),
                seed: derive_seed(seed, Stream::Partition, 0),
            },
        )?;
        let largest = shards
            .iter()
            .map(Dataset::len)
            .max()
            .expect("at least one shard");
        let rounds_per_epoch = largest.div_ceil(config.batch_size);
        let init = model.init_params(derive_seed(seed, Stream::Init, 0));
        Ok(Setup {
            model,
            topology,
            mixing,
            shards,
            test,
            init,
            rounds_per_epoch,
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    /// Keep every agent's parameters after every round.
    pub record_trajectory: bool,
    /// Overrides `config.workers`.
    pub workers: Option<usize>,
    /// Per-agent starting parameters instead of the shared seeded init.
    pub initial_params: Option<Vec<ParamVector>>,
}

struct AgentRuntime {
    opt: OptState,
    sampler: BatchSampler,
}

struct LocalWork {
    batch: Dataset,
    /// `(neighbor, its parameters)` in neighbor order.
    neighbor_params: Vec<(usize, Arc<ParamVector>)>,
    cross: Vec<Matrix>,
    /// Summaries of `cross`, addressed to the neighbor whose model produced them.
    outgoing: Vec<(usize, CrossFeatureSummary)>,
}

pub fn run_experiment(config: &ExperimentConfig, seed: u64) -> Result<MetricsLog> {
    run_experiment_with(config, seed, &RunOptions::default())
}

pub fn run_experiment_with(
    config: &ExperimentConfig,
    seed: u64,
    opts: &RunOptions,
) -> Result<MetricsLog> {
    let setup = Setup::prepare(config, seed)?;
    let workers = opts.workers.unwrap_or(config.workers).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::config("workers", e.to_string()))?;
    pool.install(|| Engine::new(config, seed, &setup, opts).run())
}

struct Engine<'a> {
    config: &'a ExperimentConfig,
    seed: u64,
    setup: &'a Setup,
    opts: &'a RunOptions,
    opt_cfg: OptimizerConfig,
    ccl_cfg: CclConfig,
    damped: MixingMatrix,
}

impl<'a> Engine<'a> {
    fn new(
        config: &'a ExperimentConfig,
        seed: u64,
        setup: &'a Setup,
        opts: &'a RunOptions,
    ) -> Self {
        let mut ccl_cfg = config.ccl();
        if config.method != Method::Ccl {
            ccl_cfg.lambda_m = 0.0;
            ccl_cfg.lambda_d = 0.0;
        }
        Engine {
            config,
            seed,
            setup,
            opts,
            opt_cfg: config.optimizer(),
            ccl_cfg,
            damped: setup.mixing.damped(config.gamma),
        }
    }

    fn n(&self) -> usize {
        self.setup.topology.n_agents()
    }

    fn neighbors(&self, i: usize) -> &[usize] {
        self.setup.topology.neighbors(i)
    }

    fn is_ccl(&self) -> bool {
        self.config.method == Method::Ccl
    }

    fn wants_cross(&self) -> bool {
        self.is_ccl() || self.config.log_contrastive
    }

    fn run(&self) -> Result<MetricsLog> {
        let n = self.n();
        let model = &self.setup.model;
        let total_rounds = self.config.epochs * self.setup.rounds_per_epoch;
        let mut params: Vec<Arc<ParamVector>> = match &self.opts.initial_params {
            Some(start) => {
                if start.len() != n || start.iter().any(|p| p.len() != model.param_count()) {
                    return Err(Error::shape(
                        "initial parameters do not match agents and model",
                    ));
                }
                start.iter().cloned().map(Arc::new).collect()
            }
            None => (0..n).map(|_| Arc::new(self.setup.init.clone())).collect(),
        };
        let mut agents: Vec<AgentRuntime> = (0..n)
            .map(|i| AgentRuntime {
                opt: OptState::new(model.param_count()),
                sampler: BatchSampler::new(
                    self.setup.shards[i].len(),
                    stream_rng(self.seed, Stream::Batch, i as u64),
                ),
            })
            .collect();
        let mut rows = Vec::with_capacity(total_rounds * n);
        let mut evals = Vec::new();
        let mut trajectory = self.opts.record_trajectory.then(Vec::new);

        for k in 0..total_rounds {
            let lr = self
                .opt_cfg
                .schedule
                .lr_at(k, total_rounds, self.opt_cfg.lr);
            let (next, round_rows) = if self.config.method.uses_qgm() {
                self.qgm_round(k, lr, &params, &mut agents)?
            } else {
                self.dsgdm_round(k, lr, &params, &mut agents)?
            };
            if let Some(bad) = next.iter().position(|p| !p.is_finite()) {
                return Err(Error::Numeric {
                    round: k,
                    message: format!("agent {bad} has non-finite parameters"),
                });
            }
            params = next.into_iter().map(Arc::new).collect();
            rows.extend(round_rows);
            if let Some(t) = trajectory.as_mut() {
                t.push(params.iter().map(|p| (**p).clone()).collect());
            }
            let interval = self.config.eval_interval;
            if k + 1 == total_rounds || (interval > 0 && (k + 1) % interval == 0) {
                evals.push(self.evaluate(k + 1, &params)?);
            }
        }

        let final_params: Vec<ParamVector> = params.iter().map(|p| (**p).clone()).collect();
        Ok(MetricsLog {
            method: self.config.method,
            seed: self.seed,
            rounds: total_rounds,
            rounds_per_epoch: self.setup.rounds_per_epoch,
            rows,
            evals,
            consensus: consensus_model(&final_params),
            final_params,
            trajectory,
        })
    }

    fn evaluate(&self, round: usize, params: &[Arc<ParamVector>]) -> Result<EvalPoint> {
        let owned: Vec<ParamVector> = params.iter().map(|p| (**p).clone()).collect();
        let avg = consensus_model(&owned);
        let (test_loss, test_accuracy) = self.setup.model.evaluate(&avg, &self.setup.test)?;
        Ok(EvalPoint {
            round,
            test_loss,
            test_accuracy,
        })
    }

    /// Mini-batch sampling and model-variant cross-features for agent `i`.
    fn local_work(
        &self,
        i: usize,
        agent: &mut AgentRuntime,
        neighbor_params: Vec<(usize, Arc<ParamVector>)>,
    ) -> Result<LocalWork> {
        let model = &self.setup.model;
        let idx = agent.sampler.next_batch(self.config.batch_size);
        let batch = self.setup.shards[i].subset(&idx);
        let mut cross = Vec::new();
        let mut outgoing = Vec::new();
        if self.wants_cross() {
            for (j, p) in &neighbor_params {
                let z = model.features(p, batch.features())?;
                let summary = ccl::summarize(
                    &FeatureBatch {
                        z: z.clone(),
                        labels: batch.labels().to_vec(),
                    },
                    model.num_classes(),
                )?;
                outgoing.push((*j, summary));
                cross.push(z);
            }
        }
        Ok(LocalWork {
            batch,
            neighbor_params,
            cross,
            outgoing,
        })
    }

    /// Routes summaries to the agent whose model produced them. CCL sends
    /// them over the wire; baselines only use them for logging.
    fn exchange_summaries(
        &self,
        k: usize,
        work: &mut [LocalWork],
        bytes: &mut [u64],
    ) -> Result<Vec<Vec<CrossFeatureSummary>>> {
        let n = self.n();
        let outgoing: Vec<Vec<(usize, CrossFeatureSummary)>> = work
            .iter_mut()
            .map(|w| std::mem::take(&mut w.outgoing))
            .collect();
        if self.is_ccl() {
            let open = OpenRound::new(k, n);
            let posted: Vec<u64> = outgoing
                .into_par_iter()
                .enumerate()
                .map(|(i, out)| {
                    open.post(
                        i,
                        out.into_iter()
                            .map(|(to, s)| (to, WireMessage::Summary(s)))
                            .collect(),
                    )
                })
                .collect::<Result<_>>()?;
            for (b, p) in bytes.iter_mut().zip(posted) {
                *b += p;
            }
            let sealed = open.seal()?;
            Ok((0..n)
                .map(|i| {
                    sealed
                        .inbox(i)
                        .iter()
                        .map(|e| match &e.msg {
                            WireMessage::Summary(s) => s.clone(),
                            WireMessage::Param(_) => {
                                unreachable!("summary phase carries summaries")
                            }
                        })
                        .collect()
                })
                .collect())
        } else {
            let mut routed: Vec<Vec<(usize, CrossFeatureSummary)>> = vec![Vec::new(); n];
            for (from, out) in outgoing.into_iter().enumerate() {
                for (to, s) in out {
                    routed[to].push((from, s));
                }
            }
            Ok(routed
                .into_iter()
                .map(|mut v| {
                    v.sort_by_key(|(from, _)| *from);
                    v.into_iter().map(|(_, s)| s).collect()
                })
                .collect())
        }
    }

    fn gradient(
        &self,
        x: &[f64],
        work: &LocalWork,
        received: &[CrossFeatureSummary],
    ) -> Result<(LossParts, ParamVector, usize)> {
        let model = &self.setup.model;
        if self.wants_cross() {
            let out = ccl::ccl_grad_with_cross(
                model,
                x,
                &work.batch,
                &work.cross,
                received,
                &self.ccl_cfg,
            )?;
            Ok((out.parts, out.grad, out.correct))
        } else {
            let mut pass = model.ce_pass(x, &work.batch)?;
            model.backprop_features(x, &pass.tape, &pass.d_features, &mut pass.grad)?;
            Ok((
                LossParts {
                    ce: pass.loss,
                    ..LossParts::default()
                },
                pass.grad,
                pass.correct,
            ))
        }
    }

    fn metrics(
        &self,
        k: usize,
        i: usize,
        parts: LossParts,
        correct: usize,
        batch_len: usize,
        bytes: u64,
    ) -> RoundMetrics {
        let model = &self.setup.model;
        let cross_fwd = if self.is_ccl() {
            self.neighbors(i).len() as u64 * model.feature_forward_macs(batch_len)
        } else {
            0
        };
        RoundMetrics {
            round: k,
            agent: i,
            lce: parts.ce,
            lmv: parts.mv,
            ldv: parts.dv,
            acc: correct as f64 / batch_len as f64,
            bytes_sent: bytes,
            fwd_macs: model.full_forward_macs(batch_len) + cross_fwd,
            bwd_macs: model.backward_macs(batch_len),
            cross_fwd_macs: cross_fwd,
        }
    }

    fn params_from(sealed: &SealedRound, i: usize) -> Vec<(usize, Arc<ParamVector>)> {
        sealed
            .inbox(i)
            .iter()
            .map(|e| match &e.msg {
                WireMessage::Param(p) => (e.from, Arc::clone(p)),
                WireMessage::Summary(_) => unreachable!("parameter phase carries parameters"),
            })
            .collect()
    }

    fn broadcast(&self, k: usize, payload: &[Arc<ParamVector>]) -> Result<(SealedRound, Vec<u64>)> {
        let open = OpenRound::new(k, self.n());
        let bytes: Vec<u64> = (0..self.n())
            .into_par_iter()
            .map(|i| {
                let msgs = self
                    .neighbors(i)
                    .iter()
                    .map(|&j| (j, WireMessage::Param(Arc::clone(&payload[i]))))
                    .collect();
                open.post(i, msgs)
            })
            .collect::<Result<_>>()?;
        Ok((open.seal()?, bytes))
    }

    fn gossip_terms<'p>(
        &self,
        i: usize,
        own: &'p [f64],
        nb: &'p [(usize, Arc<ParamVector>)],
    ) -> Vec<(f64, &'p [f64])> {
        let mut terms = Vec::with_capacity(nb.len() + 1);
        terms.push((self.damped.weight(i, i), own));
        for (j, p) in nb {
            terms.push((self.damped.weight(i, *j), &p[..]));
        }
        terms
    }

    fn qgm_round(
        &self,
        k: usize,
        lr: f64,
        params: &[Arc<ParamVector>],
        agents: &mut [AgentRuntime],
    ) -> Result<(Vec<ParamVector>, Vec<RoundMetrics>)> {
        let (sealed, mut bytes) = self.broadcast(k, params)?;
        let mut work: Vec<LocalWork> = agents
            .par_iter_mut()
            .enumerate()
            .map(|(i, a)| self.local_work(i, a, Self::params_from(&sealed, i)))
            .collect::<Result<_>>()?;
        let received = self.exchange_summaries(k, &mut work, &mut bytes)?;

        let results: Vec<(ParamVector, RoundMetrics)> = agents
            .par_iter_mut()
            .zip(work.par_iter())
            .zip(received.par_iter())
            .enumerate()
            .map(|(i, ((a, w), recv))| {
                let x: &[f64] = &params[i];
                let (parts, grad, correct) = self.gradient(x, w, recv)?;
                let terms = self.gossip_terms(i, x, &w.neighbor_params);
                let next = optim::qgm_step(
                    x,
                    &grad,
                    &mut a.opt,
                    &self.opt_cfg,
                    lr,
                    terms[0].0,
                    &terms[1..],
                )?;
                Ok((
                    ParamVector(next),
                    self.metrics(k, i, parts, correct, w.batch.len(), bytes[i]),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(results.into_iter().unzip())
    }

    fn dsgdm_round(
        &self,
        k: usize,
        lr: f64,
        params: &[Arc<ParamVector>],
        agents: &mut [AgentRuntime],
    ) -> Result<(Vec<ParamVector>, Vec<RoundMetrics>)> {
        // neighbors' round-start models are only read for loss logging here
        let mut work: Vec<LocalWork> = agents
            .par_iter_mut()
            .enumerate()
            .map(|(i, a)| {
                let nb = if self.wants_cross() {
                    self.neighbors(i)
                        .iter()
                        .map(|&j| (j, Arc::clone(&params[j])))
                        .collect()
                } else {
                    Vec::new()
                };
                self.local_work(i, a, nb)
            })
            .collect::<Result<_>>()?;
        let mut no_bytes = vec![0u64; self.n()];
        let received = self.exchange_summaries(k, &mut work, &mut no_bytes)?;

        let half: Vec<(ParamVector, LossParts, usize)> = agents
            .par_iter_mut()
            .zip(work.par_iter())
            .zip(received.par_iter())
            .enumerate()
            .map(|(i, ((a, w), recv))| {
                let x: &[f64] = &params[i];
                let (parts, grad, correct) = self.gradient(x, w, recv)?;
                let h = optim::dsgdm_half_step(x, &grad, &mut a.opt, &self.opt_cfg, lr)?;
                Ok((ParamVector(h), parts, correct))
            })
            .collect::<Result<_>>()?;
        let halves: Vec<Arc<ParamVector>> =
            half.iter().map(|(h, _, _)| Arc::new(h.clone())).collect();
        let (sealed, bytes) = self.broadcast(k, &halves)?;

        let results: Vec<(ParamVector, RoundMetrics)> = (0..self.n())
            .into_par_iter()
            .map(|i| {
                let nb = Self::params_from(&sealed, i);
                let terms = self.gossip_terms(i, &halves[i], &nb);
                let next = optim::gossip_mix(&terms)?;
                let (_, parts, correct) = &half[i];
                Ok((
                    ParamVector(next),
                    self.metrics(k, i, *parts, *correct, work[i].batch.len(), bytes[i]),
                ))
            })
            .collect::<Result<_>>()?;
        Ok(results.into_iter().unzip())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::TopologyKind;

    fn small_config(method: Method) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.method = method;
        c.topology.kind = TopologyKind::Ring;
        c.topology.n_agents = 4;
        c.data.classes = 3;
        c.data.per_class = 20;
        c.data.test_per_class = 10;
        c.data.input_dim = 4;
        c.model.hidden_dims = vec![6, 5];
        c.batch_size = 8;
        c.epochs = 3;
        c.alpha = 0.5;
        c
    }

    #[test]
    fn consensus_examples() {
        let v = ParamVector(vec![1.0, -2.0, 3.5]);
        assert_eq!(consensus_model(&[v.clone(), v.clone(), v.clone()]), v);
        let neg = ParamVector(v.iter().map(|x| -x).collect());
        assert_eq!(consensus_model(&[v, neg]), ParamVector(vec![0.0; 3]));
    }

    #[test]
    fn post_rules() {
        let open = OpenRound::new(0, 3);
        let msg = WireMessage::Param(Arc::new(ParamVector(vec![0.0; 4])));
        assert_eq!(open.post(0, vec![(1, msg.clone())]).unwrap(), 32);
        assert!(open.post(0, vec![]).is_err());
        assert!(open.post(1, vec![(1, msg.clone())]).is_err());
        assert!(open.post(1, vec![(7, msg.clone())]).is_err());
        open.post(1, vec![]).unwrap();
        // agent 2 never posted
        assert!(open.seal().is_err());
    }

    #[test]
    fn summary_message_size() {
        let s = CrossFeatureSummary {
            class_sums: Matrix::zeros(10, 64),
            class_counts: vec![0; 10],
        };
        assert_eq!(WireMessage::Summary(s).wire_bytes(), 8 * 10 * 65);
    }

    #[test]
    fn bytes_match_comm_cost_per_round() {
        for method in [Method::DsgdmN, Method::QgDsgdmN, Method::Ccl] {
            let cfg = small_config(method);
            let log = run_experiment(&cfg, 1).unwrap();
            let setup = Setup::prepare(&cfg, 1).unwrap();
            for r in &log.rows {
                let p = setup.topology.degree(r.agent);
                assert_eq!(
                    r.bytes_sent,
                    comm_cost(method, setup.model.spec(), p),
                    "{method}"
                );
            }
        }
    }

    #[test]
    fn dsgdm_has_no_compute_overhead() {
        let log = run_experiment(&small_config(Method::DsgdmN), 0).unwrap();
        assert_eq!(compute_overhead(&log), 0.0);
        let log = run_experiment(&small_config(Method::Ccl), 0).unwrap();
        assert!(compute_overhead(&log) > 0.0);
    }

    #[test]
    fn comm_cost_is_linear_in_peers() {
        let spec = ModelSpec::new(4, vec![8], 3, crate::model::Activation::Tanh).unwrap();
        for m in [Method::DsgdmN, Method::QgDsgdmN, Method::Ccl] {
            assert_eq!(comm_cost(m, &spec, 4), 2 * comm_cost(m, &spec, 2));
        }
        assert_eq!(
            comm_cost(Method::Ccl, &spec, 1) - comm_cost(Method::QgDsgdmN, &spec, 1),
            8 * 3 * 9
        );
    }

    #[test]
    fn csv_has_expected_header_and_rows() {
        let cfg = small_config(Method::Ccl);
        let log = run_experiment(&cfg, 3).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "k,agent,lce,lmv,ldv,acc,bytes,fwd_mac,bwd_mac"
        );
        assert_eq!(lines.count(), log.rounds * 4);
    }

    #[test]
    fn eval_interval_and_final_eval() {
        let mut cfg = small_config(Method::QgDsgdmN);
        cfg.eval_interval = 2;
        let log = run_experiment(&cfg, 0).unwrap();
        assert_eq!(log.evals.last().unwrap().round, log.rounds);
        assert!(log.evals.len() >= log.rounds / 2);
    }
}
