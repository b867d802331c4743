//! Federated averaging over the router tree.
//!
//! Routers are the clients. In each round every router trains from the
//! current global model on the windows that arrived since the previous
//! round, then weight sums flow up the tree: a router adds its own weights
//! to the sums reported by its child routers and forwards sum and count to
//! its parent. The coordinator divides by the total count and the new global
//! model travels back down the same tree.

use std::collections::BTreeMap;
use std::io;
use std::iter::Sum;
use std::path::Path;
use std::time::Duration;

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autoencoder::{ModelError, ModelWeights, TrainConfig, TrainReport, Trainer};
use crate::netmodel::{NodeId, Topology};
use crate::util::{derive_seed, secs};

#[derive(Debug, Error)]
pub enum FedError {
    #[error("no clients to aggregate")]
    EmptyRoster,
    #[error("{0} did not report an update")]
    MissingUpdate(NodeId),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid aggregation tree: {0}")]
    InvalidTree(String),
    #[error("invalid federated config: {0}")]
    Config(String),
    #[error("client {client}: {source}")]
    Client { client: NodeId, source: ModelError },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Accumulator width used while summing client weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    /// `f32` sums in a fixed order (roster order for flat sums, child order
    /// in the tree).
    Single,
    /// `f64` sums, rounded to `f32` once after the division.
    #[default]
    Double,
}

/// Sum of the weights of a subtree and the number of clients in it.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightUpdate<T> {
    pub sum_weights: ModelWeights<T>,
    pub count: usize,
    pub origin: NodeId,
    pub round: usize,
}

fn check_shapes(updates: &[&ModelWeights<f32>]) -> Result<(), FedError> {
    let first = updates.first().ok_or(FedError::EmptyRoster)?;
    for u in updates {
        if !first.same_shape(u) {
            return Err(FedError::ShapeMismatch(format!("{} vs {}", first.tag(), u.tag())));
        }
    }
    Ok(())
}

fn add_into<T: Float + Sum>(acc: &mut ModelWeights<T>, w: &ModelWeights<f32>) {
    for (a, x) in acc.params_mut().zip(w.params()) {
        *a = *a + T::from(*x).expect("float cast");
    }
}

fn add_sums<T: Float + Sum>(acc: &mut ModelWeights<T>, other: &ModelWeights<T>) {
    for (a, x) in acc.params_mut().zip(other.params()) {
        *a = *a + *x;
    }
}

fn divide<T: Float + Sum>(sum: &ModelWeights<T>, count: usize) -> ModelWeights<f32> {
    let k = T::from(count).expect("float cast");
    let mut out = ModelWeights::<f32>::zeros(&sum.arch());
    for (o, s) in out.params_mut().zip(sum.params()) {
        *o = (*s / k).to_f32().expect("float cast");
    }
    out
}

/// Element-wise mean `(1/K) Σ W_k`, summed in the given order.
pub fn fedavg_with(updates: &[ModelWeights<f32>], precision: Precision) -> Result<ModelWeights<f32>, FedError> {
    let refs: Vec<&ModelWeights<f32>> = updates.iter().collect();
    check_shapes(&refs)?;
    let arch = updates[0].arch();
    Ok(match precision {
        Precision::Single => {
            let mut acc = ModelWeights::<f32>::zeros(&arch);
            updates.iter().for_each(|u| add_into(&mut acc, u));
            divide(&acc, updates.len())
        }
        Precision::Double => {
            let mut acc = ModelWeights::<f64>::zeros(&arch);
            updates.iter().for_each(|u| add_into(&mut acc, u));
            divide(&acc, updates.len())
        }
    })
}

pub fn fedavg(updates: &[ModelWeights<f32>]) -> Result<ModelWeights<f32>, FedError> {
    fedavg_with(updates, Precision::Double)
}

/// Client to parent map; every chain of parents ends at the coordinator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AggregationTree {
    parents: BTreeMap<NodeId, NodeId>,
}

impl AggregationTree {
    pub fn new(parents: BTreeMap<NodeId, NodeId>) -> Result<AggregationTree, FedError> {
        if parents.is_empty() {
            return Err(FedError::EmptyRoster);
        }
        if parents.contains_key(&NodeId::COORDINATOR) {
            return Err(FedError::InvalidTree("the coordinator cannot be a client".into()));
        }
        for start in parents.keys() {
            let mut node = *start;
            for _ in 0..=parents.len() {
                match parents.get(&node) {
                    Some(p) if *p == NodeId::COORDINATOR => break,
                    Some(p) => node = *p,
                    None => return Err(FedError::InvalidTree(format!("{node} has no path to C"))),
                }
            }
            if node != NodeId::COORDINATOR && parents.get(&node) != Some(&NodeId::COORDINATOR) {
                return Err(FedError::InvalidTree(format!("cycle through {start}")));
            }
        }
        Ok(AggregationTree { parents })
    }

    /// Routers of `topology`, each attached to its baseline destination
    /// when that is a router and to the coordinator otherwise.
    pub fn from_topology(topology: &Topology) -> Result<AggregationTree, FedError> {
        let parents = topology
            .routers()
            .map(|r| {
                let p = topology.normal_dest(r).filter(|d| d.is_router()).unwrap_or(NodeId::COORDINATOR);
                (r, p)
            })
            .collect();
        AggregationTree::new(parents)
    }

    /// Clients in canonical (sorted) order.
    pub fn roster(&self) -> Vec<NodeId> {
        self.parents.keys().copied().collect()
    }

    pub fn parent(&self, client: NodeId) -> Option<NodeId> {
        self.parents.get(&client).copied()
    }

    pub fn children(&self, node: NodeId) -> Vec<NodeId> {
        self.parents.iter().filter(|(_, p)| **p == node).map(|(c, _)| *c).collect()
    }

    /// `client`, its parent, ... , `C`.
    pub fn path_to_root(&self, client: NodeId) -> Vec<NodeId> {
        let mut path = vec![client];
        while let Some(p) = self.parent(*path.last().expect("nonempty")) {
            path.push(p);
        }
        path
    }
}

/// One weight message. Bytes count once per client and direction, on the
/// client's leg to or from the coordinator, however many routers relay it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CommsRecord {
    pub round: usize,
    pub sender: NodeId,
    pub receiver: NodeId,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundOutcome {
    pub global: ModelWeights<f32>,
    pub messages: Vec<CommsRecord>,
}

/// Aggregates one round of client weights bottom-up through `tree` and
/// records the uplink and downlink message of every client.
pub fn hierarchical_round(
    tree: &AggregationTree,
    locals: &BTreeMap<NodeId, ModelWeights<f32>>,
    round: usize,
    precision: Precision,
) -> Result<RoundOutcome, FedError> {
    let roster = tree.roster();
    for c in &roster {
        if !locals.contains_key(c) {
            return Err(FedError::MissingUpdate(*c));
        }
    }
    let refs: Vec<&ModelWeights<f32>> = roster.iter().map(|c| &locals[c]).collect();
    check_shapes(&refs)?;
    let global = match precision {
        Precision::Single => {
            let u = subtree::<f32>(tree, locals, NodeId::COORDINATOR, round);
            divide(&u.sum_weights, u.count)
        }
        Precision::Double => {
            let u = subtree::<f64>(tree, locals, NodeId::COORDINATOR, round);
            divide(&u.sum_weights, u.count)
        }
    };
    let bytes = global.to_bytes().len();
    let mut messages = Vec::with_capacity(2 * roster.len());
    for c in &roster {
        messages.push(CommsRecord { round, sender: *c, receiver: NodeId::COORDINATOR, bytes });
    }
    for c in &roster {
        messages.push(CommsRecord { round, sender: NodeId::COORDINATOR, receiver: *c, bytes });
    }
    Ok(RoundOutcome { global, messages })
}

fn subtree<T: Float + Sum>(
    tree: &AggregationTree,
    locals: &BTreeMap<NodeId, ModelWeights<f32>>,
    node: NodeId,
    round: usize,
) -> WeightUpdate<T> {
    let arch = locals.values().next().expect("validated nonempty").arch();
    let mut sum = ModelWeights::<T>::zeros(&arch);
    let mut count = 0;
    if let Some(own) = locals.get(&node).filter(|_| node != NodeId::COORDINATOR) {
        add_into(&mut sum, own);
        count += 1;
    }
    for child in tree.children(node) {
        let u = subtree::<T>(tree, locals, child, round);
        add_sums(&mut sum, &u.sum_weights);
        count += u.count;
    }
    WeightUpdate { sum_weights: sum, count, origin: node, round }
}

/// Copy of the pretrained model used as every client's starting point.
pub fn transfer_init(pretrained: &ModelWeights<f32>) -> ModelWeights<f32> {
    pretrained.clone()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FLConfig {
    #[serde(with = "secs")]
    pub round_interval: Duration,
    pub rounds: usize,
    pub local_train: TrainConfig,
    pub precision: Precision,
    /// Give every client the same shuffling seed in a round.
    pub shared_client_seed: bool,
}

impl Default for FLConfig {
    fn default() -> Self {
        FLConfig {
            round_interval: Duration::from_secs(3600),
            rounds: 5,
            local_train: TrainConfig::default(),
            precision: Precision::Double,
            shared_client_seed: false,
        }
    }
}

impl FLConfig {
    pub fn validate(&self) -> Result<(), FedError> {
        if self.rounds == 0 {
            return Err(FedError::Config("rounds must be at least 1".into()));
        }
        if self.round_interval.is_zero() {
            return Err(FedError::Config("round_interval must be positive".into()));
        }
        self.local_train.validate()?;
        Ok(())
    }

    fn client_seed(&self, round: usize, client: NodeId) -> u64 {
        let label = if self.shared_client_seed { format!("round{round}") } else { format!("round{round}/{client}") };
        derive_seed(self.local_train.seed, &label)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederatedRun {
    pub global: ModelWeights<f32>,
    /// Global model after each round.
    pub round_globals: Vec<ModelWeights<f32>>,
    pub ledger: Vec<CommsRecord>,
    /// Local training reports, `[round][client]` in roster order.
    pub reports: Vec<BTreeMap<NodeId, TrainReport>>,
}

impl FederatedRun {
    pub fn total_bytes(&self) -> usize {
        self.ledger.iter().map(|m| m.bytes).sum()
    }
}

/// Runs `cfg.rounds` rounds. `data[client][round]` holds the normalized
/// windows a client trains on in that round. A client with no new data
/// reports its current weights unchanged.
pub fn run_federated_training(
    cfg: &FLConfig,
    tree: &AggregationTree,
    pretrained: &ModelWeights<f32>,
    data: &BTreeMap<NodeId, Vec<Vec<Vec<f32>>>>,
) -> Result<FederatedRun, FedError> {
    cfg.validate()?;
    let roster = tree.roster();
    for c in &roster {
        match data.get(c) {
            None => return Err(FedError::MissingUpdate(*c)),
            Some(rounds) if rounds.len() < cfg.rounds => {
                return Err(FedError::Config(format!("{c} has data for {} of {} rounds", rounds.len(), cfg.rounds)))
            }
            Some(_) => {}
        }
    }
    let mut trainers: BTreeMap<NodeId, Trainer> = roster
        .iter()
        .map(|c| Ok((*c, Trainer::new(transfer_init(pretrained), cfg.local_train.clone())?)))
        .collect::<Result<_, ModelError>>()?;
    let mut global = transfer_init(pretrained);
    let mut round_globals = Vec::with_capacity(cfg.rounds);
    let mut ledger = Vec::new();
    let mut reports = Vec::with_capacity(cfg.rounds);

    #[allow(clippy::needless_range_loop)]
    for round in 0..cfg.rounds {
        let results: Vec<(NodeId, Result<Option<TrainReport>, ModelError>)> = trainers
            .par_iter_mut()
            .map(|(c, t)| {
                let res = t.load_weights(global.clone()).and_then(|_| {
                    let windows = &data[c][round];
                    if windows.is_empty() {
                        Ok(None)
                    } else {
                        t.fit(windows, cfg.client_seed(round, *c)).map(Some)
                    }
                });
                (*c, res)
            })
            .collect();
        let mut round_reports = BTreeMap::new();
        for (client, res) in results {
            if let Some(r) = res.map_err(|source| FedError::Client { client, source })? {
                round_reports.insert(client, r);
            }
        }
        let locals: BTreeMap<NodeId, ModelWeights<f32>> =
            trainers.iter().map(|(c, t)| (*c, t.weights.clone())).collect();
        let outcome = hierarchical_round(tree, &locals, round + 1, cfg.precision)?;
        global = outcome.global;
        round_globals.push(global.clone());
        ledger.extend(outcome.messages);
        reports.push(round_reports);
    }
    Ok(FederatedRun { global, round_globals, ledger, reports })
}

/// Writes the ledger as `round,sender,receiver,bytes`.
pub fn write_comms_csv(path: &Path, ledger: &[CommsRecord]) -> Result<(), FedError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io::Error::other(e.to_string()))?;
    for m in ledger {
        w.serialize(m).map_err(|e| io::Error::other(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `global_r<N>.wts` for every round into `dir`.
pub fn write_round_globals(dir: &Path, run: &FederatedRun) -> Result<(), FedError> {
    std::fs::create_dir_all(dir)?;
    for (i, g) in run.round_globals.iter().enumerate() {
        g.save(&dir.join(format!("global_r{}.wts", i + 1)))?;
    }
    Ok(())
}
