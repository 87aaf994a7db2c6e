//! Per-cluster training: local SGD on selected clients and server-side
//! aggregation.

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterAssignment;
use crate::drift::DriftOutcome;
use crate::error::{Error, Result};
use crate::models::{ModelParams, ModelVersion, Sample, TaskModel};
use crate::representations::ClientId;
use crate::rng::stream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Aggregation {
    FedAvg,
    /// Mean aggregation with a proximal term `mu_prox * (x - start)` added to
    /// every local gradient.
    FedProx { mu_prox: f64 },
    FedYogi {
        beta1: f64,
        beta2: f64,
        eta_server: f64,
        tau_adapt: f64,
    },
    QFedAvg { q: f64 },
}

impl Aggregation {
    pub fn name(&self) -> &'static str {
        match self {
            Aggregation::FedAvg => "fedavg",
            Aggregation::FedProx { .. } => "fedprox",
            Aggregation::FedYogi { .. } => "fedyogi",
            Aggregation::QFedAvg { .. } => "qfedavg",
        }
    }

    pub fn yogi_default() -> Self {
        Aggregation::FedYogi {
            beta1: 0.9,
            beta2: 0.99,
            eta_server: 0.01,
            tau_adapt: 1e-3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub eta: f64,
    pub local_steps: usize,
    pub participants_per_round: usize,
    pub rounds_per_event: usize,
    pub total_events: usize,
    pub batch_size: usize,
    pub aggregation: Aggregation,
    /// Proximal coefficient for aggregations other than FedProx (which
    /// carries its own).
    pub prox_mu: f64,
    pub sampling_with_replacement: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            eta: 0.05,
            local_steps: 20,
            participants_per_round: 20,
            rounds_per_event: 10,
            total_events: 20,
            batch_size: 20,
            aggregation: Aggregation::FedProx { mu_prox: 0.01 },
            prox_mu: 0.0,
            sampling_with_replacement: false,
        }
    }
}

impl TrainingConfig {
    pub fn effective_prox_mu(&self) -> f64 {
        match self.aggregation {
            Aggregation::FedProx { mu_prox } => mu_prox,
            _ => self.prox_mu,
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            errors.push("training.eta must be > 0".into());
        }
        if self.local_steps == 0 {
            errors.push("training.local_steps must be >= 1".into());
        }
        if self.participants_per_round == 0 {
            errors.push("training.participants_per_round must be >= 1".into());
        }
        if self.batch_size == 0 {
            errors.push("training.batch_size must be >= 1".into());
        }
        if !(self.prox_mu >= 0.0) {
            errors.push("training.prox_mu must be >= 0".into());
        }
        match self.aggregation {
            Aggregation::FedProx { mu_prox } if !(mu_prox >= 0.0) => {
                errors.push("training.aggregation.mu_prox must be >= 0".into())
            }
            Aggregation::FedYogi {
                beta1,
                beta2,
                eta_server,
                tau_adapt,
            } => {
                if !((0.0..1.0).contains(&beta1) && (0.0..1.0).contains(&beta2)) {
                    errors.push("training.aggregation.beta1/beta2 must be in [0, 1)".into());
                }
                if !(eta_server >= 0.0) {
                    errors.push("training.aggregation.eta_server must be >= 0".into());
                }
                if !(tau_adapt > 0.0) {
                    errors.push("training.aggregation.tau_adapt must be > 0".into());
                }
            }
            Aggregation::QFedAvg { q } if !(q >= 0.0) => {
                errors.push("training.aggregation.q must be >= 0".into())
            }
            _ => {}
        }
    }

    pub fn local(&self) -> LocalConfig {
        LocalConfig {
            eta: self.eta,
            local_steps: self.local_steps,
            batch_size: self.batch_size,
            prox_mu: self.effective_prox_mu(),
        }
    }
}

/// The part of the training configuration a client needs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LocalConfig {
    pub eta: f64,
    pub local_steps: usize,
    pub batch_size: usize,
    pub prox_mu: f64,
}

/// Adaptive-optimizer moments for one cluster (unused by mean
/// aggregation).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterState {
    pub assignment: ClusterAssignment,
    pub models: Vec<ModelParams>,
    /// Centers that center shifts are measured against: the centers of the
    /// last global clustering, carried through incremental moves.
    pub reference_centers: Vec<Vec<f64>>,
    pub server: Vec<ServerState>,
    pub round: u64,
    pub sim_time: f64,
}

impl ClusterState {
    pub fn new(assignment: ClusterAssignment, models: Vec<ModelParams>) -> Self {
        let k = assignment.k();
        Self {
            reference_centers: assignment.centers.clone(),
            assignment,
            models,
            server: vec![ServerState::default(); k],
            round: 0,
            sim_time: 0.0,
        }
    }

    pub fn k(&self) -> usize {
        self.assignment.k()
    }

    /// Install the result of a drift event. Optimizer moments survive only
    /// for clusters that were kept as they were.
    pub fn apply(&mut self, outcome: DriftOutcome) {
        let k = outcome.new_assignment.k();
        self.server = if outcome.global_recluster_triggered {
            vec![ServerState::default(); k]
        } else {
            outcome
                .kept_clusters
                .iter()
                .map(|&old| self.server.get(old).cloned().unwrap_or_default())
                .collect()
        };
        self.assignment = outcome.new_assignment;
        self.models = outcome.new_models;
        self.reference_centers = outcome.reference_centers;
    }
}

/// A client's trained parameters plus the losses the server may use.
#[derive(Clone, Debug, PartialEq)]
pub struct ClientUpdate {
    pub client: ClientId,
    pub params: Vec<f64>,
    /// Mean loss over the local steps.
    pub mean_loss: f64,
    /// Loss at the starting model on the client's whole training set.
    pub start_loss: f64,
}

/// `local_steps` mini-batch SGD steps from `start`. Batches are drawn
/// without replacement inside a step; a batch at least as large as the
/// data uses all of it.
pub fn local_update<R: Rng + ?Sized>(
    model: &TaskModel,
    start: &[f64],
    data: &[&Sample],
    cfg: &LocalConfig,
    rng: &mut R,
) -> Result<(Vec<f64>, f64)> {
    if data.is_empty() {
        return Err(Error::InvalidInput("local update needs at least one sample".into()));
    }
    let mut x = start.to_vec();
    let mut loss_sum = 0.0;
    let mut batch: Vec<&Sample> = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.local_steps {
        batch.clear();
        if cfg.batch_size >= data.len() {
            batch.extend_from_slice(data);
        } else {
            batch.extend(sample_indices(rng, data.len(), cfg.batch_size).into_iter().map(|i| data[i]));
        }
        let (loss, grad) = model.loss_and_grad(&x, &batch)?;
        loss_sum += loss;
        for ((xi, g), s) in x.iter_mut().zip(&grad).zip(start) {
            *xi -= cfg.eta * (g + cfg.prox_mu * (*xi - s));
        }
        if let Some(index) = x.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { index });
        }
    }
    Ok((x, loss_sum / cfg.local_steps.max(1) as f64))
}

/// Server update of one cluster model from its clients' results.
pub fn aggregate(
    cluster_model: &[f64],
    updates: &[ClientUpdate],
    method: &Aggregation,
    server: &mut ServerState,
    eta_local: f64,
) -> Result<Vec<f64>> {
    if updates.is_empty() {
        return Err(Error::InvalidInput("aggregation needs at least one client model".into()));
    }
    let dim = cluster_model.len();
    for u in updates {
        if u.params.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: u.params.len(),
            });
        }
    }
    let n = updates.len() as f64;
    let mean = |f: &dyn Fn(&ClientUpdate, usize) -> f64| -> Vec<f64> {
        (0..dim).map(|j| updates.iter().map(|u| f(u, j)).sum::<f64>() / n).collect()
    };
    let out = match *method {
        Aggregation::FedAvg | Aggregation::FedProx { .. } => mean(&|u, j| u.params[j]),
        Aggregation::FedYogi {
            beta1,
            beta2,
            eta_server,
            tau_adapt,
        } => {
            if server.m.len() != dim {
                server.m = vec![0.0; dim];
                server.v = vec![tau_adapt * tau_adapt; dim];
            }
            let delta = mean(&|u, j| u.params[j] - cluster_model[j]);
            let mut w = cluster_model.to_vec();
            for j in 0..dim {
                let d = delta[j];
                let d2 = d * d;
                server.m[j] = beta1 * server.m[j] + (1.0 - beta1) * d;
                server.v[j] -= (1.0 - beta2) * d2 * (server.v[j] - d2).signum();
                w[j] += eta_server * server.m[j] / (server.v[j].sqrt() + tau_adapt);
            }
            w
        }
        Aggregation::QFedAvg { q } => {
            let lipschitz = 1.0 / eta_local;
            let mut num = vec![0.0; dim];
            let mut den = 0.0;
            for u in updates {
                let f = u.start_loss.max(0.0);
                let fq = if q == 0.0 { 1.0 } else { f.powf(q) };
                let mut sq = 0.0;
                for j in 0..dim {
                    let dw = lipschitz * (cluster_model[j] - u.params[j]);
                    num[j] += fq * dw;
                    sq += dw * dw;
                }
                let slope = if q == 0.0 { 0.0 } else { q * f.powf(q - 1.0) * sq };
                den += slope + lipschitz * fq;
            }
            if !(den > 0.0) {
                cluster_model.to_vec()
            } else {
                cluster_model.iter().zip(&num).map(|(w, d)| w - d / den).collect()
            }
        }
    };
    if let Some(index) = out.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(out)
}

/// Per-cluster sampling budget: `max(1, M / K)` each, with the remainder
/// going one apiece to the largest clusters (ties to the lower index).
/// Without replacement a budget never exceeds the cluster size.
pub fn cluster_budgets(sizes: &[usize], m: usize, with_replacement: bool) -> Vec<usize> {
    let k = sizes.len();
    if k == 0 {
        return Vec::new();
    }
    let base = m / k;
    let mut budgets = vec![base.max(1); k];
    if base >= 1 {
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
        for &c in order.iter().take(m - base * k) {
            budgets[c] += 1;
        }
    }
    if !with_replacement {
        for (b, &s) in budgets.iter_mut().zip(sizes) {
            *b = (*b).min(s);
        }
    }
    budgets
}

/// Outcome of one cluster round.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClusterRoundReport {
    /// Clients whose update was aggregated, with their mean local loss.
    pub losses: Vec<(ClientId, f64)>,
    pub diverged: Vec<ClientId>,
}

/// Trains cluster `k` for one round on the given participants (already
/// selected and filtered for stragglers; duplicates allowed) and replaces
/// its model with the aggregate. Clients whose loss becomes non-finite are
/// dropped. Each participant's randomness is keyed by (round, client,
/// occurrence), so the result does not depend on scheduling.
#[allow(clippy::too_many_arguments)]
pub fn run_cluster_round<'a, F>(
    k: usize,
    state: &mut ClusterState,
    cfg: &TrainingConfig,
    model: &TaskModel,
    participants: &[ClientId],
    data_of: F,
    round: u64,
    seed: u64,
) -> Result<ClusterRoundReport>
where
    F: Fn(ClientId) -> Vec<&'a Sample> + Sync,
{
    let mut report = ClusterRoundReport::default();
    if participants.is_empty() {
        return Ok(report);
    }
    let start = state.models[k].values.clone();
    let local = cfg.local();
    let needs_start_loss = matches!(cfg.aggregation, Aggregation::QFedAvg { .. });
    let mut occurrence = Vec::with_capacity(participants.len());
    for (i, c) in participants.iter().enumerate() {
        occurrence.push(participants[..i].iter().filter(|p| *p == c).count() as u64);
    }
    let results: Vec<(ClientId, Result<ClientUpdate>)> = participants
        .par_iter()
        .zip(occurrence.par_iter())
        .map(|(&c, &occ)| {
            let data = data_of(c);
            let mut rng = stream(seed, "local-sgd", &[round, c as u64, occ]);
            let res = (|| {
                let start_loss = if needs_start_loss { model.loss(&start, &data)? } else { 0.0 };
                let (params, mean_loss) = local_update(model, &start, &data, &local, &mut rng)?;
                Ok(ClientUpdate {
                    client: c,
                    params,
                    mean_loss,
                    start_loss,
                })
            })();
            (c, res)
        })
        .collect();
    let mut updates = Vec::with_capacity(results.len());
    for (c, r) in results {
        match r {
            Ok(u) => updates.push(u),
            Err(Error::NonFinite { .. }) => report.diverged.push(c),
            Err(e) => return Err(e),
        }
    }
    if updates.is_empty() {
        return Ok(report);
    }
    let new = aggregate(&start, &updates, &cfg.aggregation, &mut state.server[k], cfg.eta)?;
    state.models[k] = ModelParams {
        values: new,
        version: ModelVersion {
            round,
            cluster: k as u32,
        },
    };
    report.losses = updates.iter().map(|u| (u.client, u.mean_loss)).collect();
    Ok(report)
}
