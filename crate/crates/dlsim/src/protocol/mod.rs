//! The round engine: barrier-synchronous decentralized SGD with gossip
//! averaging, cross-silo federated averaging, a simulated secure
//! aggregation layer, broadcast scheduling, and pluggable per-node
//! behaviors so adversaries slot in at the broadcast point.

pub mod secure;

use crate::data::{Dataset, Partition};
use crate::defenses;
use crate::models::{self, Batch, ModelError, ModelSpec};
use crate::numkit::{Matrix, NumError, ParamVec, StreamRng};
use crate::topology::Topology;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub use secure::{sa_round, secure_aggregate, SAGroup, SaRound};

/// Stream ids for the named randomness lanes. Everything a run draws
/// flows from the single run seed through one of these, so enabling an
/// attack or a defense never perturbs honest nodes' draws.
pub mod streams {
    pub const DATA: u64 = 1;
    pub const INIT: u64 = 2;
    pub const TOPOLOGY: u64 = 3;
    pub const MASKS: u64 = 4;
    pub const ATTACK: u64 = 5;
    pub const NOISE_BASE: u64 = 1 << 16;
    pub const BATCH_BASE: u64 = 1 << 32;
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Num(#[from] NumError),
    #[error("{0}")]
    Mismatch(String),
    #[error("unsupported configuration: {0}")]
    UnsupportedConfig(String),
    #[error("behavior on node {node} must send exactly one message per neighbor; offending receiver {receiver}")]
    BehaviorCoverage { node: usize, receiver: usize },
    #[error("behavior failed: {0}")]
    Behavior(String),
    #[error("secure aggregation group below threshold: {surviving} survivors < {threshold}")]
    SaThreshold { surviving: usize, threshold: usize },
    #[error("secure aggregation input missing for participant {participant}")]
    SaMissingInput { participant: usize },
    #[error("need at least 2 users, got {0}")]
    TooFewUsers(usize),
}

/// When adversaries send relative to honest users within a round.
/// Rushing adversaries emit their messages only after receiving every
/// honest message of the round.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ScheduleMode {
    Synchronous,
    Rushing(Vec<usize>),
}

impl ScheduleMode {
    fn is_rushing(&self, node: usize) -> bool {
        matches!(self, ScheduleMode::Rushing(ids) if ids.contains(&node))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DefenseSettings {
    /// Self-centered clipping radius at the aggregation point.
    pub clipping_tau: Option<f64>,
    /// Gaussian noise on each outgoing update at the broadcast point.
    pub noise_sigma: f64,
}

impl Default for DefenseSettings {
    fn default() -> Self {
        Self {
            clipping_tau: None,
            noise_sigma: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaSettings {
    /// Minimum number of surviving participants per aggregation group.
    pub threshold: usize,
}

/// A node the engine pretends dropped out of one owner's aggregation
/// group (fault-resilient secure aggregation lets a colluder fake this).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaDrop {
    pub group_owner: usize,
    pub dropped: usize,
}

#[derive(Clone, Debug)]
pub struct EngineConfig {
    pub spec: ModelSpec,
    pub lr: f64,
    /// `(from_round, lr)` overrides, ascending in round.
    pub lr_schedule: Vec<(usize, f64)>,
    /// 0 means full shard.
    pub batch_size: usize,
    /// Optimization steps per round, each on a freshly sampled batch;
    /// 0 disables local training (pure gossip averaging).
    pub local_steps: usize,
    pub momentum: f64,
    pub schedule: ScheduleMode,
    pub defense: DefenseSettings,
    pub secure_aggregation: Option<SaSettings>,
    pub sa_drops: Vec<SaDrop>,
    /// Worker threads for node-local compute; 0 or 1 runs sequentially.
    /// Results are bit-identical either way.
    pub threads: usize,
}

impl EngineConfig {
    pub fn new(spec: ModelSpec, lr: f64) -> Self {
        Self {
            spec,
            lr,
            lr_schedule: Vec::new(),
            batch_size: 0,
            local_steps: 1,
            momentum: 0.0,
            schedule: ScheduleMode::Synchronous,
            defense: DefenseSettings::default(),
            secure_aggregation: None,
            sa_drops: Vec::new(),
            threads: 0,
        }
    }

    fn lr_at(&self, round: usize) -> f64 {
        let mut lr = self.lr;
        for &(from_round, value) in &self.lr_schedule {
            if round >= from_round {
                lr = value;
            }
        }
        lr
    }
}

/// One user's local state: parameters, dataset shard, and the node-owned
/// randomness that makes parallel execution order irrelevant.
#[derive(Clone, Debug)]
pub struct NodeState {
    pub user_id: usize,
    pub params: ParamVec,
    pub shard: Vec<usize>,
    pub velocity: ParamVec,
    batch_rng: StreamRng,
    noise_rng: StreamRng,
}

/// A model update in flight. `seq` is the within-round delivery order;
/// honest messages are logged first, adversarial ones after.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RoundMessage {
    pub sender: usize,
    pub receiver: usize,
    pub seq: usize,
    pub update: ParamVec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct NodeRoundStats {
    pub train_loss: f64,
    pub params_hash: String,
}

/// Everything recorded about one round. The persisted subset is defined
/// by the harness; in memory the engine keeps the full record.
#[derive(Clone, Debug)]
pub struct RoundLog {
    pub round: usize,
    pub consensus_distance: f64,
    pub per_node: Vec<NodeRoundStats>,
    pub messages: Vec<RoundMessage>,
    /// Broadcast update per node; None for behavior-driven nodes, whose
    /// per-receiver messages live in `messages`.
    pub updates: Vec<Option<ParamVec>>,
    /// Sum of the gradients applied during local optimization this round.
    pub gradients: Vec<Option<ParamVec>>,
    pub params_post: Vec<ParamVec>,
    /// Per-node secure aggregation sums when the SA layer is active.
    pub sa_sums: Option<Vec<ParamVec>>,
}

/// Context handed to a behavior at its broadcast point. Deliveries arrive
/// through [`Behavior::observe`]; this carries only round bookkeeping.
pub struct ForgeCtx<'a> {
    pub round: usize,
    pub attacker: usize,
    /// nn(attacker), sorted, self included.
    pub neighbors: &'a [usize],
    pub param_len: usize,
}

/// An adversarial node plugged into the engine. A behavior sees exactly
/// the messages addressed to it, nothing else.
pub trait Behavior: Send {
    fn observe(&mut self, round: usize, sender: usize, update: &ParamVec);
    /// Outgoing update for every neighbor. Under a rushing schedule this
    /// runs after the round's honest deliveries; under a synchronous
    /// schedule before them.
    fn forge(&mut self, ctx: &ForgeCtx<'_>) -> Result<BTreeMap<usize, ParamVec>, ProtocolError>;
}

pub struct World {
    pub cfg: EngineConfig,
    pub topology: Topology,
    pub dataset: Dataset,
    pub partition: Partition,
    pub nodes: Vec<NodeState>,
    behaviors: BTreeMap<usize, Box<dyn Behavior>>,
    mask_rng: StreamRng,
    pool: Option<rayon::ThreadPool>,
    pub round: usize,
}

impl World {
    pub fn new(
        seed: u64,
        cfg: EngineConfig,
        topology: Topology,
        dataset: Dataset,
        partition: Partition,
        theta0: ParamVec,
    ) -> Result<Self, ProtocolError> {
        cfg.spec.validate()?;
        let n = topology.n();
        if partition.n_users() != n {
            return Err(ProtocolError::Mismatch(format!(
                "partition has {} shards but topology has {} nodes",
                partition.n_users(),
                n
            )));
        }
        if theta0.len() != cfg.spec.param_count() {
            return Err(ProtocolError::Mismatch(format!(
                "theta0 has {} parameters, model needs {}",
                theta0.len(),
                cfg.spec.param_count()
            )));
        }
        if !(0.0..1.0).contains(&cfg.momentum) {
            return Err(ProtocolError::Mismatch(format!(
                "momentum must be in [0, 1), got {}",
                cfg.momentum
            )));
        }
        if cfg.lr < 0.0 {
            return Err(ProtocolError::Mismatch(format!("lr must be >= 0, got {}", cfg.lr)));
        }
        let param_len = theta0.len();
        let nodes = (0..n)
            .map(|user_id| NodeState {
                user_id,
                params: theta0.clone(),
                shard: partition.shards[user_id].clone(),
                velocity: ParamVec::zeros(param_len),
                batch_rng: StreamRng::new(seed, streams::BATCH_BASE + user_id as u64),
                noise_rng: StreamRng::new(seed, streams::NOISE_BASE + user_id as u64),
            })
            .collect();
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| ProtocolError::Mismatch(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            cfg,
            topology,
            dataset,
            partition,
            nodes,
            behaviors: BTreeMap::new(),
            mask_rng: StreamRng::new(seed, streams::MASKS),
            pool,
            round: 0,
        })
    }

    pub fn n(&self) -> usize {
        self.nodes.len()
    }

    pub fn attach_behavior(&mut self, node: usize, behavior: Box<dyn Behavior>) -> Result<(), ProtocolError> {
        if node >= self.n() {
            return Err(ProtocolError::Mismatch(format!(
                "behavior node {node} out of range for {} users",
                self.n()
            )));
        }
        if self.cfg.secure_aggregation.is_some() {
            return Err(ProtocolError::UnsupportedConfig(
                "active behaviors cannot run under the secure aggregation layer".into(),
            ));
        }
        self.behaviors.insert(node, behavior);
        Ok(())
    }

    pub fn behavior_nodes(&self) -> Vec<usize> {
        self.behaviors.keys().copied().collect()
    }

    pub fn node_params(&self, node: usize) -> &ParamVec {
        &self.nodes[node].params
    }

    pub fn set_node_params(&mut self, node: usize, params: ParamVec) -> Result<(), ProtocolError> {
        if params.len() != self.cfg.spec.param_count() {
            return Err(ProtocolError::Mismatch("parameter length changed".into()));
        }
        self.nodes[node].params = params;
        Ok(())
    }

    /// Add a constant to every coordinate of one node's parameters
    /// (initial-perturbation experiments).
    pub fn perturb_node(&mut self, node: usize, magnitude: f64) -> Result<(), ProtocolError> {
        let delta = ParamVec::from_values(vec![magnitude; self.nodes[node].params.len()])?;
        self.nodes[node].params = self.nodes[node].params.add(&delta)?;
        Ok(())
    }

    fn full_shard_loss(&self, node: usize, params: &ParamVec) -> Result<f64, ProtocolError> {
        let batch = gather_batch(&self.dataset, &self.nodes[node].shard)?;
        Ok(models::loss(&self.cfg.spec, params, &batch)?)
    }

    /// Round-0 record of the freshly initialized world.
    pub fn initial_log(&self) -> Result<RoundLog, ProtocolError> {
        let n = self.n();
        let consensus = engine_consensus(&self.nodes)?;
        let mut per_node = Vec::with_capacity(n);
        for v in 0..n {
            per_node.push(NodeRoundStats {
                train_loss: self.full_shard_loss(v, &self.nodes[v].params)?,
                params_hash: self.nodes[v].params.fnv1a_hex(),
            });
        }
        Ok(RoundLog {
            round: 0,
            consensus_distance: consensus,
            per_node,
            messages: Vec::new(),
            updates: vec![None; n],
            gradients: vec![None; n],
            params_post: self.nodes.iter().map(|s| s.params.clone()).collect(),
            sa_sums: None,
        })
    }
}

/// Draw one mini-batch without replacement within the batch.
fn sample_batch_rows(rng: &mut StreamRng, shard: &[usize], batch_size: usize) -> Vec<usize> {
    if batch_size == 0 || batch_size >= shard.len() {
        return shard.to_vec();
    }
    rng.sample_indices(shard.len(), batch_size)
        .into_iter()
        .map(|i| shard[i])
        .collect()
}

/// Materialize dataset rows as a training batch.
pub fn gather_batch(dataset: &Dataset, rows: &[usize]) -> Result<Batch, ProtocolError> {
    if rows.is_empty() {
        return Err(ProtocolError::Mismatch("cannot gather an empty batch".into()));
    }
    let dim = dataset.input_dim();
    let mut data = Vec::with_capacity(rows.len() * dim);
    let mut labels = Vec::with_capacity(rows.len());
    for &r in rows {
        if r >= dataset.len() {
            return Err(ProtocolError::Mismatch(format!(
                "row {r} out of range for dataset of {} rows",
                dataset.len()
            )));
        }
        data.extend_from_slice(dataset.inputs.row(r));
        labels.push(dataset.labels[r]);
    }
    Ok(Batch::new(Matrix::from_data(rows.len(), dim, data)?, labels)?)
}

struct NodeWork {
    update: ParamVec,
    payload: ParamVec,
    grad_sum: Option<ParamVec>,
}

fn local_training(
    node: &mut NodeState,
    spec: &ModelSpec,
    dataset: &Dataset,
    lr: f64,
    local_steps: usize,
    batch_size: usize,
    momentum: f64,
    noise_sigma: f64,
) -> Result<NodeWork, ProtocolError> {
    let mut current = node.params.clone();
    let mut grad_sum = None;
    if local_steps > 0 && lr > 0.0 {
        let mut acc = ParamVec::zeros(current.len());
        for _ in 0..local_steps {
            let rows = sample_batch_rows(&mut node.batch_rng, &node.shard, batch_size);
            let batch = gather_batch(dataset, &rows)?;
            let g = models::gradient(spec, &current, &batch)?;
            acc = acc.add(&g)?;
            if momentum > 0.0 {
                let v = ParamVec::axpy(momentum, &node.velocity, &g)?;
                current = ParamVec::axpy(-lr, &v, &current)?;
                node.velocity = v;
            } else {
                current = ParamVec::axpy(-lr, &g, &current)?;
            }
        }
        grad_sum = Some(acc);
    }
    let payload = if noise_sigma > 0.0 {
        defenses::noisy_update(&current, &mut node.noise_rng, noise_sigma)
    } else {
        current.clone()
    };
    Ok(NodeWork {
        update: current,
        payload,
        grad_sum,
    })
}

/// One D-PSGD round: local optimization, neighbor exchange along the
/// topology (with behaviors substituting their forged messages at the
/// broadcast point), and mean aggregation over nn(v).
pub fn dpsgd_round(world: &mut World) -> Result<RoundLog, ProtocolError> {
    let round = world.round + 1;
    let n = world.n();
    let lr = world.cfg.lr_at(round);
    let param_len = world.cfg.spec.param_count();

    // Local optimization on every honest node; behaviors do not train.
    let behavior_ids: Vec<usize> = world.behaviors.keys().copied().collect();
    let work = {
        let cfg = &world.cfg;
        let dataset = &world.dataset;
        let behavior_ids = &behavior_ids;
        let run = |node: &mut NodeState| -> Result<Option<NodeWork>, ProtocolError> {
            if behavior_ids.contains(&node.user_id) {
                return Ok(None);
            }
            local_training(
                node,
                &cfg.spec,
                dataset,
                lr,
                cfg.local_steps,
                cfg.batch_size,
                cfg.momentum,
                cfg.defense.noise_sigma,
            )
            .map(Some)
        };
        match &world.pool {
            Some(pool) => pool.install(|| {
                world
                    .nodes
                    .par_iter_mut()
                    .map(run)
                    .collect::<Result<Vec<_>, _>>()
            })?,
            None => world
                .nodes
                .iter_mut()
                .map(run)
                .collect::<Result<Vec<_>, _>>()?,
        }
    };

    let mut messages = Vec::new();
    let mut seq = 0usize;
    let mut inbox: Vec<BTreeMap<usize, ParamVec>> = vec![BTreeMap::new(); n];

    // Synchronous behaviors forge before any of this round's messages land.
    let mut forged: BTreeMap<usize, BTreeMap<usize, ParamVec>> = BTreeMap::new();
    for &a in &behavior_ids {
        if !world.cfg.schedule.is_rushing(a) {
            let ctx = ForgeCtx {
                round,
                attacker: a,
                neighbors: world.topology.neighbors(a),
                param_len,
            };
            let out = world.behaviors.get_mut(&a).unwrap().forge(&ctx)?;
            forged.insert(a, out);
        }
    }

    // Honest broadcast phase, sender-id order.
    for sender in 0..n {
        let Some(w) = &work[sender] else { continue };
        for &receiver in world.topology.neighbors(sender) {
            if receiver == sender {
                continue;
            }
            messages.push(RoundMessage {
                sender,
                receiver,
                seq,
                update: w.payload.clone(),
            });
            seq += 1;
            if let Some(b) = world.behaviors.get_mut(&receiver) {
                b.observe(round, sender, &w.payload);
            }
            inbox[receiver].insert(sender, w.payload.clone());
        }
    }

    // Rushing behaviors forge after receiving every honest message.
    for &a in &behavior_ids {
        if world.cfg.schedule.is_rushing(a) {
            let ctx = ForgeCtx {
                round,
                attacker: a,
                neighbors: world.topology.neighbors(a),
                param_len,
            };
            let out = world.behaviors.get_mut(&a).unwrap().forge(&ctx)?;
            forged.insert(a, out);
        }
    }

    // Adversarial broadcast phase, logged after all honest messages.
    for (&a, payloads) in &forged {
        for &receiver in world.topology.neighbors(a) {
            if receiver == a {
                continue;
            }
            let update = payloads
                .get(&receiver)
                .ok_or(ProtocolError::BehaviorCoverage { node: a, receiver })?;
            if update.len() != param_len {
                return Err(ProtocolError::Behavior(format!(
                    "node {a} forged a message of wrong length for {receiver}"
                )));
            }
            messages.push(RoundMessage {
                sender: a,
                receiver,
                seq,
                update: update.clone(),
            });
            seq += 1;
            if let Some(b) = world.behaviors.get_mut(&receiver) {
                b.observe(round, a, update);
            }
            inbox[receiver].insert(a, update.clone());
        }
        for (&receiver, _) in payloads {
            if receiver == a || !world.topology.contains_edge(a, receiver) {
                return Err(ProtocolError::BehaviorCoverage { node: a, receiver });
            }
        }
    }

    // Aggregation. Plain mean over nn(v), or the configured variant.
    let mut sa_sums: Option<Vec<ParamVec>> = None;
    if let Some(sa) = world.cfg.secure_aggregation {
        let mut sums = Vec::with_capacity(n);
        let mut new_params = Vec::with_capacity(n);
        for v in 0..n {
            let mut group = SAGroup::new(world.topology.neighbors(v).to_vec(), sa.threshold);
            for drop in &world.cfg.sa_drops {
                if drop.group_owner == v {
                    group.dropout.insert(drop.dropped);
                }
            }
            let mut sa_inputs = inbox[v].clone();
            if let Some(w) = &work[v] {
                sa_inputs.insert(v, w.update.clone());
            }
            let sum = secure_aggregate(&group, &sa_inputs, &mut world.mask_rng)?;
            let aggregated = sum.scale(1.0 / group.survivors().len() as f64)?;
            sums.push(sum);
            new_params.push(aggregated);
        }
        for (v, params) in new_params.into_iter().enumerate() {
            world.nodes[v].params = params;
        }
        sa_sums = Some(sums);
    } else {
        let mut new_params = Vec::with_capacity(n);
        for v in 0..n {
            let aggregated = match &work[v] {
                Some(w) => {
                    if let Some(tau) = world.cfg.defense.clipping_tau {
                        let received: Vec<&ParamVec> = inbox[v].values().collect();
                        defenses::self_centered_aggregate(&w.update, &received, tau)?
                    } else {
                        let mut all: BTreeMap<usize, &ParamVec> =
                            inbox[v].iter().map(|(&s, u)| (s, u)).collect();
                        all.insert(v, &w.update);
                        ParamVec::mean(all.values().copied())?
                    }
                }
                // Behavior nodes fold in what they received; they have no
                // own training step.
                None => ParamVec::mean(inbox[v].values())?,
            };
            new_params.push(aggregated);
        }
        for (v, params) in new_params.into_iter().enumerate() {
            world.nodes[v].params = params;
        }
    }

    world.round = round;
    finish_round_log(world, round, messages, work, sa_sums)
}

/// One cross-silo FedAVG round: every user takes its local step from the
/// shared global parameters, the server averages all updates, everyone
/// adopts the result.
pub fn fedavg_round(world: &mut World) -> Result<RoundLog, ProtocolError> {
    if !world.behaviors.is_empty() {
        return Err(ProtocolError::UnsupportedConfig(
            "behaviors are a decentralized-engine feature".into(),
        ));
    }
    let round = world.round + 1;
    let lr = world.cfg.lr_at(round);
    let work = {
        let cfg = &world.cfg;
        let dataset = &world.dataset;
        let run = |node: &mut NodeState| -> Result<Option<NodeWork>, ProtocolError> {
            local_training(
                node,
                &cfg.spec,
                dataset,
                lr,
                cfg.local_steps,
                cfg.batch_size,
                cfg.momentum,
                0.0,
            )
            .map(Some)
        };
        match &world.pool {
            Some(pool) => pool.install(|| {
                world
                    .nodes
                    .par_iter_mut()
                    .map(run)
                    .collect::<Result<Vec<_>, _>>()
            })?,
            None => world
                .nodes
                .iter_mut()
                .map(run)
                .collect::<Result<Vec<_>, _>>()?,
        }
    };
    let global = ParamVec::mean(work.iter().map(|w| &w.as_ref().unwrap().update))?;
    for node in world.nodes.iter_mut() {
        node.params = global.clone();
    }
    world.round = round;
    finish_round_log(world, round, Vec::new(), work, None)
}

fn finish_round_log(
    world: &World,
    round: usize,
    messages: Vec<RoundMessage>,
    work: Vec<Option<NodeWork>>,
    sa_sums: Option<Vec<ParamVec>>,
) -> Result<RoundLog, ProtocolError> {
    let n = world.n();
    let consensus = engine_consensus(&world.nodes)?;
    let mut per_node = Vec::with_capacity(n);
    for v in 0..n {
        per_node.push(NodeRoundStats {
            train_loss: world.full_shard_loss(v, &world.nodes[v].params)?,
            params_hash: world.nodes[v].params.fnv1a_hex(),
        });
    }
    let mut updates = Vec::with_capacity(n);
    let mut gradients = Vec::with_capacity(n);
    for w in work {
        match w {
            Some(w) => {
                updates.push(Some(w.update));
                gradients.push(w.grad_sum);
            }
            None => {
                updates.push(None);
                gradients.push(None);
            }
        }
    }
    Ok(RoundLog {
        round,
        consensus_distance: consensus,
        per_node,
        messages,
        updates,
        gradients,
        params_post: world.nodes.iter().map(|s| s.params.clone()).collect(),
        sa_sums,
    })
}

/// Consensus of the live world; the degenerate single-user world has no
/// pairs and reports zero.
fn engine_consensus(nodes: &[NodeState]) -> Result<f64, ProtocolError> {
    if nodes.len() < 2 {
        return Ok(0.0);
    }
    let params: Vec<&ParamVec> = nodes.iter().map(|s| &s.params).collect();
    consensus_distance(&params)
}

/// Mean pairwise squared parameter distance:
/// `sum_v sum_{u != v} ||theta_v - theta_u||^2 / (|V|^2 - |V|)`.
pub fn consensus_distance(states: &[&ParamVec]) -> Result<f64, ProtocolError> {
    let n = states.len();
    if n < 2 {
        return Err(ProtocolError::TooFewUsers(n));
    }
    let mut total = 0.0;
    for v in 0..n {
        for u in 0..n {
            if u == v {
                continue;
            }
            let d = states[v].sub(states[u])?;
            let norm = d.l2_norm();
            total += norm * norm;
        }
    }
    Ok(total / (n * n - n) as f64)
}

/// `W^t` for the gossip matrix `W[v][u] = 1/|nn(v)|` on edges, the exact
/// linear coefficient of u's round-0 parameters in v's round-t parameters
/// when no gradients are applied.
pub fn influence_matrix(topology: &Topology, t: usize) -> Result<Matrix, ProtocolError> {
    if t == 0 {
        return Err(ProtocolError::Mismatch("influence horizon must be >= 1".into()));
    }
    let n = topology.n();
    let mut w = Matrix::zeros(n, n);
    for v in 0..n {
        let share = 1.0 / topology.degree(v) as f64;
        for &u in topology.neighbors(v) {
            w.set(v, u, share);
        }
    }
    let mut acc = w.clone();
    for _ in 1..t {
        acc = acc.matmul(&w)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EngineKind {
    Dpsgd,
    Fedavg,
}

#[derive(Debug)]
pub struct RunOutput {
    pub engine: EngineKind,
    pub initial: RoundLog,
    pub rounds: Vec<RoundLog>,
    /// Round at which early stopping fired, if it did.
    pub stopped_early: Option<usize>,
}

impl RunOutput {
    /// Initial record followed by every executed round.
    pub fn all_logs(&self) -> impl Iterator<Item = &RoundLog> {
        std::iter::once(&self.initial).chain(self.rounds.iter())
    }
}

/// Mean of the users' local models (the consensus candidate).
pub fn mean_model(world: &World) -> Result<ParamVec, ProtocolError> {
    Ok(ParamVec::mean(world.nodes.iter().map(|s| &s.params))?)
}

/// Loss of the given parameters on the holdout pool.
pub fn holdout_loss(world: &World, params: &ParamVec) -> Result<f64, ProtocolError> {
    if world.partition.holdout.is_empty() {
        return Err(ProtocolError::Mismatch(
            "holdout pool is empty; cannot evaluate validation loss".into(),
        ));
    }
    let batch = gather_batch(&world.dataset, &world.partition.holdout)?;
    Ok(models::loss(&world.cfg.spec, params, &batch)?)
}

/// Execute up to `rounds_cap` rounds of the chosen engine. With a patience
/// value, stop when the holdout loss of the mean of local models stops
/// improving for that many consecutive rounds.
pub fn run_experiment(
    world: &mut World,
    engine: EngineKind,
    rounds_cap: usize,
    early_stop_patience: Option<usize>,
) -> Result<RunOutput, ProtocolError> {
    let initial = world.initial_log()?;
    let mut rounds = Vec::with_capacity(rounds_cap);
    let mut best = f64::INFINITY;
    let mut since_best = 0usize;
    let mut stopped_early = None;
    for _ in 0..rounds_cap {
        let log = match engine {
            EngineKind::Dpsgd => dpsgd_round(world)?,
            EngineKind::Fedavg => fedavg_round(world)?,
        };
        let round = log.round;
        rounds.push(log);
        if let Some(patience) = early_stop_patience {
            let val = holdout_loss(world, &mean_model(world)?)?;
            if val < best {
                best = val;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= patience {
                    stopped_early = Some(round);
                    break;
                }
            }
        }
    }
    Ok(RunOutput {
        engine,
        initial,
        rounds,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{make_blobs, partition_uniform};
    use crate::topology;

    fn pv(values: &[f64]) -> ParamVec {
        ParamVec::from_values(values.to_vec()).unwrap()
    }

    /// Tiny gossip-only world: 2-class 1-feature linear model (4 params),
    /// no local training, so rounds are pure neighborhood averaging.
    fn gossip_world(topo: Topology, seed: u64) -> World {
        let n = topo.n();
        let spec = ModelSpec::linear_softmax(1, 2);
        let dataset = make_blobs(&mut StreamRng::new(seed, streams::DATA), 8 * n, 1, 2, 1.0).unwrap();
        let partition =
            partition_uniform(&mut StreamRng::new(seed, streams::DATA + 100), &dataset, n, 0.2).unwrap();
        let mut cfg = EngineConfig::new(spec, 0.1);
        cfg.local_steps = 0;
        World::new(seed, cfg, topo, dataset, partition, ParamVec::zeros(4)).unwrap()
    }

    fn training_world(topo: Topology, seed: u64, lr: f64) -> World {
        let n = topo.n();
        let spec = ModelSpec::linear_softmax(2, 2);
        let dataset = make_blobs(&mut StreamRng::new(seed, streams::DATA), 8 * n, 2, 2, 0.6).unwrap();
        let partition =
            partition_uniform(&mut StreamRng::new(seed, streams::DATA + 100), &dataset, n, 0.2).unwrap();
        let theta0 = models::init_params(&spec, &mut StreamRng::new(seed, streams::INIT)).unwrap();
        let mut cfg = EngineConfig::new(spec, lr);
        cfg.batch_size = 4;
        World::new(seed, cfg, topo, dataset, partition, theta0).unwrap()
    }

    #[test]
    fn constant_params_are_a_fixed_point() {
        let mut world = gossip_world(topology::complete(3).unwrap(), 1);
        for _ in 0..3 {
            let log = dpsgd_round(&mut world).unwrap();
            for p in &log.params_post {
                assert_eq!(*p, ParamVec::zeros(4));
            }
            assert_eq!(log.consensus_distance, 0.0);
        }
    }

    #[test]
    fn two_node_chain_averages_pairwise() {
        let mut world = gossip_world(topology::chain(2).unwrap(), 1);
        world.set_node_params(0, pv(&[0.0, 0.0, 0.0, 0.0])).unwrap();
        world.set_node_params(1, pv(&[2.0, 2.0, 2.0, 2.0])).unwrap();
        let log = dpsgd_round(&mut world).unwrap();
        assert_eq!(log.params_post[0], pv(&[1.0, 1.0, 1.0, 1.0]));
        assert_eq!(log.params_post[1], pv(&[1.0, 1.0, 1.0, 1.0]));
    }

    #[test]
    fn chain_attenuation_reaches_one_over_54() {
        // unit perturbation on the far end of a 5-chain, zero gradients:
        // after 4 rounds the near end holds exactly 1/54 of it
        let mut world = gossip_world(topology::chain(5).unwrap(), 1);
        world.perturb_node(4, 1.0).unwrap();
        let mut last = None;
        for _ in 0..4 {
            last = Some(dpsgd_round(&mut world).unwrap());
        }
        let coeff = last.unwrap().params_post[0][0];
        assert!((coeff - 1.0 / 54.0).abs() < 1e-12, "coefficient {coeff}");

        // the influence matrix is the independent algebraic route
        let w4 = influence_matrix(&world.topology, 4).unwrap();
        assert!((w4.get(0, 4) - coeff).abs() < 1e-12);
    }

    #[test]
    fn regular_topologies_preserve_the_parameter_mean() {
        for topo in [topology::torus(3, 3).unwrap(), topology::complete(5).unwrap()] {
            let n = topo.n();
            let mut world = gossip_world(topo, 3);
            let mut rng = StreamRng::new(77, 1);
            for v in 0..n {
                let params = pv(&[
                    rng.range_f64(-1.0, 1.0),
                    rng.range_f64(-1.0, 1.0),
                    rng.range_f64(-1.0, 1.0),
                    rng.range_f64(-1.0, 1.0),
                ]);
                world.set_node_params(v, params).unwrap();
            }
            let before = ParamVec::mean(world.nodes.iter().map(|s| &s.params)).unwrap();
            for _ in 0..5 {
                dpsgd_round(&mut world).unwrap();
            }
            let after = ParamVec::mean(world.nodes.iter().map(|s| &s.params)).unwrap();
            for i in 0..before.len() {
                assert!((before[i] - after[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn consensus_distance_hand_cases() {
        let a = pv(&[0.0]);
        let b = pv(&[2.0]);
        assert_eq!(consensus_distance(&[&a, &b]).unwrap(), 4.0);
        assert_eq!(consensus_distance(&[&a, &a, &a]).unwrap(), 0.0);
        assert!(consensus_distance(&[&a]).is_err());
    }

    #[test]
    fn consensus_distance_is_permutation_invariant() {
        let states = [pv(&[0.1]), pv(&[-2.0]), pv(&[1.4]), pv(&[0.9])];
        let refs: Vec<&ParamVec> = states.iter().collect();
        let base = consensus_distance(&refs).unwrap();
        let perm: Vec<&ParamVec> = [3usize, 1, 0, 2].iter().map(|&i| &states[i]).collect();
        let permuted = consensus_distance(&perm).unwrap();
        assert!((base - permuted).abs() < 1e-12 * base.max(1.0));
    }

    #[test]
    fn influence_matrix_rows_are_stochastic() {
        for t in 1..6 {
            let w = influence_matrix(&topology::torus(3, 3).unwrap(), t).unwrap();
            for v in 0..w.rows() {
                let sum: f64 = (0..w.cols()).map(|u| w.get(v, u)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
        }
        let w = influence_matrix(&topology::complete(4).unwrap(), 1).unwrap();
        for v in 0..4 {
            for u in 0..4 {
                assert!((w.get(v, u) - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn fedavg_single_user_is_plain_sgd() {
        let spec = ModelSpec::linear_softmax(2, 2);
        let dataset = make_blobs(&mut StreamRng::new(2, streams::DATA), 12, 2, 2, 0.5).unwrap();
        let partition = Partition {
            shards: vec![(0..12).collect()],
            holdout: vec![],
        };
        let topo = topology::complete(1).unwrap();
        let theta0 = models::init_params(&spec, &mut StreamRng::new(2, streams::INIT)).unwrap();
        let mut cfg = EngineConfig::new(spec, 0.2);
        cfg.batch_size = 0;
        let mut world = World::new(2, cfg, topo, dataset.clone(), partition, theta0.clone()).unwrap();
        let log = fedavg_round(&mut world).unwrap();

        let batch = gather_batch(&dataset, &(0..12).collect::<Vec<_>>()).unwrap();
        let manual = models::sgd_step(&spec, &theta0, &batch, 0.2, 1).unwrap();
        assert_eq!(log.params_post[0], manual);
    }

    #[test]
    fn fedavg_identical_shards_equal_single_step() {
        let spec = ModelSpec::linear_softmax(2, 2);
        let dataset = make_blobs(&mut StreamRng::new(4, streams::DATA), 10, 2, 2, 0.5).unwrap();
        let rows: Vec<usize> = (0..10).collect();
        let partition = Partition {
            shards: vec![rows.clone(), rows.clone(), rows.clone()],
            holdout: vec![],
        };
        let theta0 = models::init_params(&spec, &mut StreamRng::new(4, streams::INIT)).unwrap();
        let mut cfg = EngineConfig::new(spec, 0.1);
        cfg.batch_size = 0; // full shard, so every user sees the same batch
        let mut world = World::new(4, cfg, topology::complete(3).unwrap(), dataset.clone(), partition, theta0.clone()).unwrap();
        let log = fedavg_round(&mut world).unwrap();
        let batch = gather_batch(&dataset, &rows).unwrap();
        let manual = models::sgd_step(&spec, &theta0, &batch, 0.1, 1).unwrap();
        for p in &log.params_post {
            for i in 0..p.len() {
                assert!((p[i] - manual[i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fedavg_matches_dpsgd_on_complete_topology() {
        let seed = 11;
        let mut dl = training_world(topology::complete(6).unwrap(), seed, 0.05);
        let mut fl = training_world(topology::complete(6).unwrap(), seed, 0.05);
        for _ in 0..30 {
            let a = dpsgd_round(&mut dl).unwrap();
            let b = fedavg_round(&mut fl).unwrap();
            for v in 0..6 {
                let pa = &a.params_post[v];
                let pb = &b.params_post[v];
                for i in 0..pa.len() {
                    assert!((pa[i] - pb[i]).abs() < 1e-9);
                }
            }
            assert_eq!(a.consensus_distance, 0.0);
        }
    }

    #[test]
    fn secure_aggregation_layer_tracks_plain_mean() {
        let seed = 21;
        let mut plain = training_world(topology::complete(4).unwrap(), seed, 0.05);
        let mut masked = training_world(topology::complete(4).unwrap(), seed, 0.05);
        masked.cfg.secure_aggregation = Some(SaSettings { threshold: 2 });
        for _ in 0..10 {
            let a = dpsgd_round(&mut plain).unwrap();
            let b = dpsgd_round(&mut masked).unwrap();
            assert!(b.sa_sums.is_some());
            for v in 0..4 {
                for i in 0..a.params_post[v].len() {
                    assert!((a.params_post[v][i] - b.params_post[v][i]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn run_experiment_zero_rounds_logs_initial_state_only() {
        let mut world = training_world(topology::complete(3).unwrap(), 5, 0.05);
        let out = run_experiment(&mut world, EngineKind::Dpsgd, 0, None).unwrap();
        assert_eq!(out.rounds.len(), 0);
        assert_eq!(out.initial.round, 0);
    }

    #[test]
    fn run_experiment_is_deterministic() {
        let collect = |seed: u64| {
            let mut world = training_world(topology::torus(3, 3).unwrap(), seed, 0.05);
            let out = run_experiment(&mut world, EngineKind::Dpsgd, 12, None).unwrap();
            out.rounds
                .iter()
                .flat_map(|r| r.per_node.iter().map(|s| s.params_hash.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(collect(9), collect(9));
        assert_ne!(collect(9), collect(10));
    }

    #[test]
    fn parallel_execution_is_bit_identical_to_sequential() {
        let run = |threads: usize| {
            let mut world = training_world(topology::torus(3, 3).unwrap(), 13, 0.05);
            world.cfg.threads = threads;
            if threads > 1 {
                world.pool = Some(
                    rayon::ThreadPoolBuilder::new()
                        .num_threads(threads)
                        .build()
                        .unwrap(),
                );
            }
            let out = run_experiment(&mut world, EngineKind::Dpsgd, 15, None).unwrap();
            out.rounds
                .iter()
                .flat_map(|r| r.per_node.iter().map(|s| s.params_hash.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(run(1), run(4));
    }

    #[test]
    fn early_stopping_respects_patience() {
        // gossip-only run: the mean model never changes, so round 1 sets
        // the best and the next `patience` rounds trigger the stop
        let mut world = gossip_world(topology::complete(4).unwrap(), 6);
        let out = run_experiment(&mut world, EngineKind::Dpsgd, 50, Some(3)).unwrap();
        assert_eq!(out.stopped_early, Some(4));
        assert_eq!(out.rounds.len(), 4);
    }

    struct ConstantBehavior {
        value: f64,
        observed: Vec<(usize, usize)>,
    }

    impl Behavior for ConstantBehavior {
        fn observe(&mut self, round: usize, sender: usize, _update: &ParamVec) {
            self.observed.push((round, sender));
        }
        fn forge(&mut self, ctx: &ForgeCtx<'_>) -> Result<BTreeMap<usize, ParamVec>, ProtocolError> {
            Ok(ctx
                .neighbors
                .iter()
                .filter(|&&u| u != ctx.attacker)
                .map(|&u| {
                    (
                        u,
                        ParamVec::from_values(vec![self.value; ctx.param_len]).unwrap(),
                    )
                })
                .collect())
        }
    }

    #[test]
    fn rushing_messages_are_sequenced_after_honest_ones() {
        let mut world = gossip_world(topology::complete(4).unwrap(), 8);
        world.cfg.schedule = ScheduleMode::Rushing(vec![2]);
        world
            .attach_behavior(
                2,
                Box::new(ConstantBehavior {
                    value: 5.0,
                    observed: Vec::new(),
                }),
            )
            .unwrap();
        let log = dpsgd_round(&mut world).unwrap();
        let honest_max = log
            .messages
            .iter()
            .filter(|m| m.sender != 2)
            .map(|m| m.seq)
            .max()
            .unwrap();
        let adv_min = log
            .messages
            .iter()
            .filter(|m| m.sender == 2)
            .map(|m| m.seq)
            .min()
            .unwrap();
        assert!(adv_min > honest_max);
        // exactly one message per directed edge
        assert_eq!(log.messages.len(), 4 * 3);
    }

    #[test]
    fn behaviors_are_rejected_under_secure_aggregation() {
        let mut world = gossip_world(topology::complete(4).unwrap(), 8);
        world.cfg.secure_aggregation = Some(SaSettings { threshold: 2 });
        let err = world
            .attach_behavior(
                1,
                Box::new(ConstantBehavior {
                    value: 0.0,
                    observed: Vec::new(),
                }),
            )
            .unwrap_err();
        assert!(matches!(err, ProtocolError::UnsupportedConfig(_)));
    }

    #[test]
    fn consensus_contracts_at_the_spectral_rate_on_the_torus() {
        // measured decay vs measured second eigenvalue; nothing pinned
        let topo = topology::torus(6, 6).unwrap();
        let n = topo.n();
        let mut world = gossip_world(topo.clone(), 15);
        let mut rng = StreamRng::new(99, 1);
        for v in 0..n {
            let params = pv(&[
                rng.range_f64(-1.0, 1.0),
                rng.range_f64(-1.0, 1.0),
                rng.range_f64(-1.0, 1.0),
                rng.range_f64(-1.0, 1.0),
            ]);
            world.set_node_params(v, params).unwrap();
        }
        let mut traces = Vec::new();
        for _ in 0..60 {
            traces.push(dpsgd_round(&mut world).unwrap().consensus_distance);
        }
        let tail: Vec<f64> = traces[50..].to_vec();
        let mut ratios = Vec::new();
        for w in tail.windows(2) {
            ratios.push((w[1] / w[0]).sqrt());
        }
        let measured = ratios.iter().sum::<f64>() / ratios.len() as f64;

        // power iteration on the deviation subspace of W
        let w = influence_matrix(&topo, 1).unwrap();
        let mut y: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 17) as f64 - 8.0).collect();
        let mean = y.iter().sum::<f64>() / n as f64;
        for v in y.iter_mut() {
            *v -= mean;
        }
        let mut lambda = 0.0;
        for _ in 0..500 {
            let mut next = vec![0.0; n];
            for v in 0..n {
                for u in 0..n {
                    next[v] += w.get(v, u) * y[u];
                }
            }
            let mean = next.iter().sum::<f64>() / n as f64;
            for v in next.iter_mut() {
                *v -= mean;
            }
            let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
            lambda = norm / y.iter().map(|x| x * x).sum::<f64>().sqrt();
            for (dst, src) in y.iter_mut().zip(&next) {
                *dst = *src;
            }
        }
        assert!(
            (measured - lambda).abs() < 0.02,
            "measured decay {measured} vs |lambda2| {lambda}"
        );
    }
}
