//! Drift handling between training blocks: move drifted clients to their
//! nearest frozen center, then decide whether to re-cluster everyone.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::clustering::{choose_k, default_k_range, nearest_center, ClusterAssignment};
use crate::error::{Error, Result};
use crate::models::ModelParams;
use crate::representations::{distance, ClientId, Metric, Representation};
use crate::training::ClusterState;

/// Latest representation vector the coordinator holds for each client.
pub type CoordinatorView = BTreeMap<ClientId, Vec<f64>>;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolicyMode {
    Hybrid,
    MoveIndividualsOnly,
    GlobalEveryEvent,
    RecusterSelectedOnly,
    Static,
}

impl PolicyMode {
    pub const ALL: [PolicyMode; 5] = [
        PolicyMode::Hybrid,
        PolicyMode::MoveIndividualsOnly,
        PolicyMode::GlobalEveryEvent,
        PolicyMode::RecusterSelectedOnly,
        PolicyMode::Static,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PolicyMode::Hybrid => "hybrid",
            PolicyMode::MoveIndividualsOnly => "move_individuals_only",
            PolicyMode::GlobalEveryEvent => "global_every_event",
            PolicyMode::RecusterSelectedOnly => "recuster_selected_only",
            PolicyMode::Static => "static",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DriftPolicy {
    pub mode: PolicyMode,
    pub tau_fraction: f64,
    /// Use the intra-cluster pairwise-distance trigger instead of the
    /// center-shift trigger.
    pub pairwise_variant: bool,
    pub pairwise_delta: f64,
    pub pairwise_c: f64,
    /// A client counts as drifted when its representation moves by more
    /// than this.
    pub epsilon: f64,
    /// Silhouette search range override; defaults depend on N.
    pub k_min: Option<usize>,
    pub k_max: Option<usize>,
}

impl Default for DriftPolicy {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Hybrid,
            tau_fraction: 1.0 / 3.0,
            pairwise_variant: false,
            pairwise_delta: 0.1,
            pairwise_c: 0.1,
            epsilon: DEFAULT_EPSILON,
            k_min: None,
            k_max: None,
        }
    }
}

impl DriftPolicy {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.tau_fraction >= 0.0 && self.tau_fraction.is_finite()) {
            errors.push("policy.tau_fraction must be a finite non-negative number".into());
        }
        if !(self.pairwise_delta >= 0.0) {
            errors.push("policy.pairwise_delta must be >= 0".into());
        }
        if !(self.pairwise_c > 0.0) {
            errors.push("policy.pairwise_c must be > 0".into());
        }
        if !(self.epsilon >= 0.0) {
            errors.push("policy.epsilon must be >= 0".into());
        }
        if let Some(k) = self.k_min {
            if k < 2 {
                errors.push("policy.k_min must be >= 2".into());
            }
        }
        if let (Some(a), Some(b)) = (self.k_min, self.k_max) {
            if a > b {
                errors.push("policy.k_min must not exceed policy.k_max".into());
            }
        }
    }

    /// Silhouette search range for `n` clients, or `None` when the clients
    /// are too few to split.
    pub fn k_range(&self, n: usize) -> Option<(usize, usize)> {
        let (dmin, dmax) = default_k_range(n)?;
        let k_min = self.k_min.unwrap_or(dmin).min(n - 1);
        let k_max = self.k_max.unwrap_or(dmax).min(n - 1).max(k_min);
        Some((k_min.max(2), k_max.max(2)))
    }
}

/// Mutable trigger state carried across events (adaptive pairwise
/// threshold and the outcomes of the last two events).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerState {
    pub delta: f64,
    pub last_two: [bool; 2],
}

impl TriggerState {
    pub fn new(policy: &DriftPolicy) -> Self {
        Self {
            delta: policy.pairwise_delta,
            last_two: [false, false],
        }
    }

    fn record(&mut self, triggered: bool, c: f64) {
        self.last_two = [self.last_two[1], triggered];
        self.delta = update_adaptive_delta(self.delta, c, self.last_two[0] && self.last_two[1]);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub client: ClientId,
    /// `None` for a client seen for the first time.
    pub from: Option<usize>,
    pub to: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftOutcome {
    pub moved_clients: Vec<Move>,
    pub global_recluster_triggered: bool,
    pub max_center_shift: f64,
    /// Mean pairwise distance between post-move centers (NaN when K < 2).
    pub theta: f64,
    pub new_assignment: ClusterAssignment,
    pub new_models: Vec<ModelParams>,
    /// Centers that later shifts are measured against.
    pub reference_centers: Vec<Vec<f64>>,
    /// Old indices of the clusters that survived, in new order; empty after
    /// a global re-clustering.
    pub kept_clusters: Vec<usize>,
}

impl DriftOutcome {
    pub fn new_k(&self) -> usize {
        self.new_assignment.k()
    }
}

pub fn detect_drift(old: &Representation, new: &Representation, metric: Metric, epsilon: f64) -> Result<bool> {
    Ok(distance(old, new, metric)? > epsilon)
}

/// Moves every drifted client to the nearest of the frozen centers in
/// `assignment`, then recomputes the centers of affected clusters and drops
/// empty ones. `view` must already hold the drifted clients' new vectors.
/// Returns the intermediate assignment, the moves, and the surviving old
/// cluster indices in new order.
pub fn reassign_drifted(
    drifted: &[ClientId],
    assignment: &ClusterAssignment,
    view: &CoordinatorView,
    metric: Metric,
) -> Result<(ClusterAssignment, Vec<Move>, Vec<usize>)> {
    if assignment.k() == 0 {
        return Err(Error::Clustering("cannot reassign without clusters".into()));
    }
    let frozen = &assignment.centers;
    let mut target: BTreeMap<ClientId, usize> = BTreeMap::new();
    for &c in drifted {
        let v = view
            .get(&c)
            .ok_or_else(|| Error::InvalidInput(format!("no representation for client {c}")))?;
        if v.len() != frozen[0].len() {
            return Err(Error::DimensionMismatch {
                expected: frozen[0].len(),
                got: v.len(),
            });
        }
        target.insert(c, nearest_center(v, frozen, metric).0);
    }

    let mut clients: Vec<ClientId> = assignment.clients.clone();
    let mut labels: Vec<usize> = assignment.labels.clone();
    let mut moves = Vec::new();
    let mut affected = vec![false; assignment.k()];
    for (&c, &to) in &target {
        affected[to] = true;
        match clients.binary_search(&c) {
            Ok(i) => {
                if labels[i] != to {
                    affected[labels[i]] = true;
                    moves.push(Move {
                        client: c,
                        from: Some(labels[i]),
                        to,
                    });
                    labels[i] = to;
                }
            }
            Err(i) => {
                clients.insert(i, c);
                labels.insert(i, to);
                moves.push(Move { client: c, from: None, to });
            }
        }
    }

    let dim = frozen[0].len();
    let mut sums = vec![vec![0.0; dim]; assignment.k()];
    let mut sizes = vec![0usize; assignment.k()];
    for (c, &l) in clients.iter().zip(&labels) {
        sizes[l] += 1;
        if affected[l] {
            let v = view
                .get(c)
                .ok_or_else(|| Error::InvalidInput(format!("no representation for client {c}")))?;
            for (s, x) in sums[l].iter_mut().zip(v) {
                *s += x;
            }
        }
    }
    let survivors: Vec<usize> = (0..assignment.k()).filter(|&k| sizes[k] > 0).collect();
    let mut remap = vec![usize::MAX; assignment.k()];
    for (new, &old) in survivors.iter().enumerate() {
        remap[old] = new;
    }
    let centers = survivors
        .iter()
        .map(|&k| {
            if affected[k] {
                sums[k].iter().map(|s| s / sizes[k] as f64).collect()
            } else {
                frozen[k].clone()
            }
        })
        .collect();
    labels.iter_mut().for_each(|l| *l = remap[*l]);
    for m in moves.iter_mut() {
        m.to = remap[m.to];
    }
    Ok((
        ClusterAssignment {
            clients,
            labels,
            centers,
        },
        moves,
        survivors,
    ))
}

/// Mean pairwise distance between the new centers and the largest distance
/// any center moved. With fewer than two centers θ is undefined and the
/// check always triggers.
pub fn center_shift_check(
    old_centers: &[Vec<f64>],
    new_centers: &[Vec<f64>],
    metric: Metric,
    tau_fraction: f64,
) -> Result<(bool, f64, f64)> {
    if old_centers.len() != new_centers.len() {
        return Err(Error::DimensionMismatch {
            expected: old_centers.len(),
            got: new_centers.len(),
        });
    }
    let mut max_shift: f64 = 0.0;
    for (o, n) in old_centers.iter().zip(new_centers) {
        max_shift = max_shift.max(metric.eval(o, n)?);
    }
    let k = new_centers.len();
    if k < 2 {
        return Ok((true, f64::NAN, max_shift));
    }
    let mut sum = 0.0;
    for i in 0..k {
        for j in (i + 1)..k {
            sum += metric.eval(&new_centers[i], &new_centers[j])?;
        }
    }
    let theta = sum / (k * (k - 1) / 2) as f64;
    Ok((max_shift >= tau_fraction * theta, theta, max_shift))
}

/// True iff two clients of the same cluster are more than `delta` apart.
pub fn pairwise_trigger_check(assignment: &ClusterAssignment, view: &CoordinatorView, metric: Metric, delta: f64) -> Result<bool> {
    for k in 0..assignment.k() {
        let members: Vec<&Vec<f64>> = assignment
            .members(k)
            .iter()
            .map(|c| {
                view.get(c)
                    .ok_or_else(|| Error::InvalidInput(format!("no representation for client {c}")))
            })
            .collect::<Result<_>>()?;
        for i in 0..members.len() {
            for j in (i + 1)..members.len() {
                if metric.eval(members[i], members[j])? > delta {
                    return Ok(true);
                }
            }
        }
    }
    Ok(false)
}

/// Adaptive pairwise threshold: double after two consecutive triggers,
/// otherwise `min(c, delta - c)` floored at zero.
pub fn update_adaptive_delta(delta: f64, c: f64, last_two_triggered: bool) -> f64 {
    if last_two_triggered {
        2.0 * delta
    } else {
        c.min(delta - c).max(0.0)
    }
}

/// Silhouette-selected clustering of every client in `view`; a single
/// cluster when there are too few clients to split.
pub fn global_recluster(view: &CoordinatorView, policy: &DriftPolicy, metric: Metric, seed: u64) -> Result<ClusterAssignment> {
    let ids: Vec<ClientId> = view.keys().copied().collect();
    let points: Vec<&[f64]> = view.values().map(|v| v.as_slice()).collect();
    if ids.is_empty() {
        return Err(Error::Clustering("no clients to cluster".into()));
    }
    match policy.k_range(ids.len()) {
        Some((lo, hi)) => choose_k(&ids, &points, metric, lo, hi, seed),
        None => ClusterAssignment::single(&ids, &points),
    }
}

/// One drift event. `view` holds the representations the coordinator had
/// before the event and `updates` the newly reported ones. Under
/// `RecusterSelectedOnly` only updates from `recently_selected` clients
/// reach the coordinator; the rest stay pending. `Static` only places
/// clients that have never been clustered.
#[allow(clippy::too_many_arguments)]
pub fn handle_drift_event(
    updates: &[(ClientId, Vec<f64>)],
    state: &ClusterState,
    view: &mut CoordinatorView,
    policy: &DriftPolicy,
    trigger: &mut TriggerState,
    metric: Metric,
    recently_selected: &BTreeSet<ClientId>,
    seed: u64,
) -> Result<DriftOutcome> {
    let mut accepted: Vec<ClientId> = Vec::new();
    for (c, v) in updates {
        let known = state.assignment.index_of(*c).is_some();
        let take = match policy.mode {
            PolicyMode::Static => !known,
            PolicyMode::RecusterSelectedOnly => !known || recently_selected.contains(c),
            _ => true,
        };
        if take {
            view.insert(*c, v.clone());
            accepted.push(*c);
        }
    }
    accepted.sort_unstable();
    accepted.dedup();

    let (assignment, moves, survivors) = reassign_drifted(&accepted, &state.assignment, view, metric)?;
    let models: Vec<ModelParams> = survivors.iter().map(|&k| state.models[k].clone()).collect();
    let reference: Vec<Vec<f64>> = survivors.iter().map(|&k| state.reference_centers[k].clone()).collect();

    let (shift_triggered, theta, max_shift) = center_shift_check(&reference, &assignment.centers, metric, policy.tau_fraction)?;
    let triggered = match policy.mode {
        PolicyMode::Static | PolicyMode::MoveIndividualsOnly => false,
        PolicyMode::GlobalEveryEvent => true,
        PolicyMode::Hybrid | PolicyMode::RecusterSelectedOnly => {
            if accepted.is_empty() {
                false
            } else if assignment.k() < 2 {
                true
            } else if policy.pairwise_variant {
                let t = pairwise_trigger_check(&assignment, view, metric, trigger.delta)?;
                trigger.record(t, policy.pairwise_c);
                t
            } else {
                shift_triggered
            }
        }
    };

    if !triggered {
        return Ok(DriftOutcome {
            moved_clients: moves,
            global_recluster_triggered: false,
            max_center_shift: max_shift,
            theta,
            new_assignment: assignment,
            new_models: models,
            reference_centers: reference,
            kept_clusters: survivors,
        });
    }

    let fresh = global_recluster(view, policy, metric, seed)?;
    let new_models = rebuild_models(&fresh, &assignment, &models)?;
    let reference_centers = fresh.centers.clone();
    Ok(DriftOutcome {
        moved_clients: moves,
        global_recluster_triggered: true,
        max_center_shift: max_shift,
        theta,
        new_assignment: fresh,
        new_models,
        reference_centers,
        kept_clusters: Vec::new(),
    })
}

/// Each new cluster's model is the unweighted mean of its members'
/// current cluster models under `previous`.
pub fn rebuild_models(fresh: &ClusterAssignment, previous: &ClusterAssignment, models: &[ModelParams]) -> Result<Vec<ModelParams>> {
    (0..fresh.k())
        .map(|k| {
            let members = fresh.members(k);
            let own: Vec<&ModelParams> = members
                .iter()
                .map(|c| {
                    previous
                        .cluster_of(*c)
                        .map(|old| &models[old])
                        .ok_or_else(|| Error::InvalidInput(format!("client {c} has no previous cluster")))
                })
                .collect::<Result<_>>()?;
            ModelParams::mean_of(own)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ModelParams;
    use crate::representations::{LabelHistogram, RepresentationData};
    use crate::rng::stream;
    use rand::seq::SliceRandom;
    use rand::Rng;

    fn hist(id: ClientId, probs: Vec<f64>) -> Representation {
        Representation::new(id, 0, RepresentationData::LabelHistogram(LabelHistogram { probs, count: 10 }))
    }

    fn state_from(view: &CoordinatorView, labels: &[usize], k: usize) -> ClusterState {
        let ids: Vec<ClientId> = view.keys().copied().collect();
        let mut a = ClusterAssignment {
            clients: ids,
            labels: labels.to_vec(),
            centers: vec![vec![0.0; view.values().next().unwrap().len()]; k],
        };
        let pts: Vec<&[f64]> = view.values().map(|v| v.as_slice()).collect();
        a.finalize(&pts);
        let models = (0..a.k()).map(|i| ModelParams::new(vec![i as f64, 10.0 * i as f64])).collect();
        ClusterState::new(a, models)
    }

    #[test]
    fn detect_drift_examples() {
        let a = hist(0, vec![1.0, 0.0]);
        let b = hist(0, vec![0.0, 1.0]);
        assert!(!detect_drift(&a, &a, Metric::L1, DEFAULT_EPSILON).unwrap());
        assert!(detect_drift(&a, &b, Metric::L1, DEFAULT_EPSILON).unwrap());
        let c = hist(0, vec![0.5, 0.5]);
        let d = hist(0, vec![0.525, 0.475]);
        assert!(!detect_drift(&c, &d, Metric::L1, 0.1).unwrap());
    }

    #[test]
    fn equidistant_client_goes_to_lowest_index() {
        let mut view = CoordinatorView::new();
        view.insert(0, vec![0.0]);
        view.insert(1, vec![1.0]);
        view.insert(2, vec![2.0]);
        let st = state_from(&view, &[0, 1, 2], 3);
        view.insert(1, vec![1.0]);
        view.insert(3, vec![1.0]);
        let (a, moves, _) = reassign_drifted(&[3], &st.assignment, &view, Metric::L1).unwrap();
        assert_eq!(a.cluster_of(3), Some(1));
        assert_eq!(moves.len(), 1);

        view.insert(3, vec![1.5]);
        let (a, _, _) = reassign_drifted(&[3], &st.assignment, &view, Metric::L1).unwrap();
        assert_eq!(a.cluster_of(3), Some(1));
        view.insert(3, vec![0.5]);
        let (a, _, _) = reassign_drifted(&[3], &st.assignment, &view, Metric::L1).unwrap();
        assert_eq!(a.cluster_of(3), Some(0));
    }

    #[test]
    fn staying_client_records_no_move() {
        let mut view = CoordinatorView::new();
        view.insert(0, vec![0.0]);
        view.insert(1, vec![10.0]);
        let st = state_from(&view, &[0, 1], 2);
        view.insert(0, vec![0.5]);
        let (a, moves, _) = reassign_drifted(&[0], &st.assignment, &view, Metric::L1).unwrap();
        assert!(moves.is_empty());
        assert_eq!(a.centers[0], vec![0.5]);
    }

    #[test]
    fn reassignment_is_order_independent() {
        let mut rng = stream(17, "drift-order", &[]);
        let mut view = CoordinatorView::new();
        for c in 0..30u32 {
            view.insert(c, vec![rng.gen::<f64>(), rng.gen::<f64>()]);
        }
        let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let st = state_from(&view, &labels, 3);
        let mut drifted: Vec<ClientId> = (0..10).map(|i| i * 3).collect();
        for &c in &drifted {
            view.insert(c, vec![rng.gen::<f64>() * 2.0, rng.gen::<f64>()]);
        }
        let (a, m, _) = reassign_drifted(&drifted, &st.assignment, &view, Metric::L1).unwrap();
        drifted.shuffle(&mut rng);
        let (b, n, _) = reassign_drifted(&drifted, &st.assignment, &view, Metric::L1).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, n);
    }

    #[test]
    fn center_shift_examples() {
        let c = vec![vec![0.0, 0.0], vec![1.2, 0.0]];
        let (t, theta, shift) = center_shift_check(&c, &c, Metric::L1, 1.0 / 3.0).unwrap();
        assert!(!t);
        assert!((theta - 1.2).abs() < 1e-15);
        assert_eq!(shift, 0.0);

        let old = vec![vec![0.0], vec![1.2]];
        let new = vec![vec![0.0], vec![1.2 + 0.5]];
        let (t, _, shift) = center_shift_check(&old, &new, Metric::L1, 1.0 / 3.0).unwrap();
        // θ measured on new centers is 1.7, so 0.5 < 1.7/3 does not trigger;
        // on the example's own θ = 1.2 it does.
        assert_eq!(shift, 0.5);
        assert!(!t);
        let moved = vec![vec![0.25], vec![1.45]];
        let (t, theta, shift) = center_shift_check(&[vec![-0.25], vec![1.45]], &moved, Metric::L1, 1.0 / 3.0).unwrap();
        assert!((theta - 1.2).abs() < 1e-12);
        assert_eq!(shift, 0.5);
        assert!(t);

        let (t, theta, _) = center_shift_check(&[vec![0.0]], &[vec![0.0]], Metric::L1, 0.3).unwrap();
        assert!(t && theta.is_nan());
        assert!(center_shift_check(&c, &c[..1], Metric::L1, 0.3).is_err());
    }

    #[test]
    fn center_shift_matches_brute_force() {
        let mut rng = stream(3, "shift", &[]);
        let old: Vec<Vec<f64>> = (0..4).map(|_| (0..5).map(|_| rng.gen::<f64>()).collect()).collect();
        let new: Vec<Vec<f64>> = old
            .iter()
            .map(|c| c.iter().map(|v| v + 0.2 * (rng.gen::<f64>() - 0.5)).collect())
            .collect();
        let (t, theta, shift) = center_shift_check(&old, &new, Metric::L1, 1.0 / 3.0).unwrap();
        let l1 = |a: &[f64], b: &[f64]| -> f64 { a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum() };
        let mut pairs = Vec::new();
        for i in 0..4 {
            for j in 0..4 {
                if i < j {
                    pairs.push(l1(&new[i], &new[j]));
                }
            }
        }
        let expected_theta = pairs.iter().sum::<f64>() / pairs.len() as f64;
        let expected_shift = (0..4).map(|i| l1(&old[i], &new[i])).fold(0.0, f64::max);
        assert!((theta - expected_theta).abs() < 1e-12);
        assert!((shift - expected_shift).abs() < 1e-12);
        assert_eq!(t, expected_shift >= expected_theta / 3.0);
    }

    #[test]
    fn pairwise_trigger_examples() {
        let mut view = CoordinatorView::new();
        for c in 0..4 {
            view.insert(c, vec![0.5, 0.5]);
        }
        let st = state_from(&view, &[0, 0, 1, 1], 2);
        assert!(!pairwise_trigger_check(&st.assignment, &view, Metric::L1, 1e-9).unwrap());
        view.insert(1, vec![0.65, 0.35]);
        assert!(pairwise_trigger_check(&st.assignment, &view, Metric::L1, 0.25).unwrap());
        assert!(!pairwise_trigger_check(&st.assignment, &view, Metric::L1, 0.35).unwrap());
    }

    #[test]
    fn pairwise_trigger_matches_brute_force() {
        let mut rng = stream(5, "pairwise", &[]);
        let mut view = CoordinatorView::new();
        for c in 0..50u32 {
            let a: f64 = rng.gen();
            view.insert(c, vec![a, 1.0 - a]);
        }
        let labels: Vec<usize> = (0..50).map(|i| if view[&(i as u32)][0] < 0.5 { 0 } else { 1 }).collect();
        let st = state_from(&view, &labels, 2);
        let mut expected = false;
        for i in 0..50u32 {
            for j in 0..50u32 {
                if i != j
                    && st.assignment.cluster_of(i) == st.assignment.cluster_of(j)
                    && 2.0 * (view[&i][0] - view[&j][0]).abs() > 0.4
                {
                    expected = true;
                }
            }
        }
        assert_eq!(pairwise_trigger_check(&st.assignment, &view, Metric::L1, 0.4).unwrap(), expected);
        assert_eq!(pairwise_trigger_check(&st.assignment, &view, Metric::L1, 1.5).unwrap(), false);
    }

    #[test]
    fn adaptive_delta_schedule() {
        assert!((update_adaptive_delta(0.1, 0.1, true) - 0.2).abs() < 1e-15);
        assert!((update_adaptive_delta(0.2, 0.1, false) - 0.1).abs() < 1e-15);
        assert_eq!(update_adaptive_delta(0.05, 0.1, false), 0.0);
    }

    fn two_group_view() -> CoordinatorView {
        let mut view = CoordinatorView::new();
        for c in 0..20u32 {
            let v = if c < 10 { vec![0.9, 0.1] } else { vec![0.1, 0.9] };
            view.insert(c, v);
        }
        view
    }

    #[test]
    fn no_updates_leaves_state_unchanged() {
        let mut view = two_group_view();
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let st = state_from(&view, &labels, 2);
        let policy = DriftPolicy::default();
        let mut trig = TriggerState::new(&policy);
        let out = handle_drift_event(&[], &st, &mut view, &policy, &mut trig, Metric::L1, &BTreeSet::new(), 1).unwrap();
        assert!(out.moved_clients.is_empty());
        assert!(!out.global_recluster_triggered);
        assert_eq!(out.new_assignment, st.assignment);
        assert_eq!(out.new_models, st.models);
    }

    #[test]
    fn mass_drift_triggers_and_averages_models() {
        let mut view = two_group_view();
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let st = state_from(&view, &labels, 2);
        let before = view.clone();
        // Every client moves to one of two new distributions.
        let updates: Vec<(ClientId, Vec<f64>)> = (0..20u32)
            .map(|c| (c, if c % 2 == 0 { vec![0.55, 0.45] } else { vec![0.45, 0.55] }))
            .collect();
        let policy = DriftPolicy::default();
        let mut trig = TriggerState::new(&policy);
        let out = handle_drift_event(&updates, &st, &mut view, &policy, &mut trig, Metric::L1, &BTreeSet::new(), 4).unwrap();
        assert!(out.global_recluster_triggered);
        assert!(out.new_k() >= 1);
        assert_ne!(view, before);

        // Oracle: recompute each cluster model from the post-move membership.
        let (mid, _, survivors) = reassign_drifted(&(0..20).collect::<Vec<_>>(), &st.assignment, &view, Metric::L1).unwrap();
        for k in 0..out.new_k() {
            let members = out.new_assignment.members(k);
            let mut expect = vec![0.0; 2];
            for c in &members {
                let m = &st.models[survivors[mid.cluster_of(*c).unwrap()]];
                expect[0] += m.values[0];
                expect[1] += m.values[1];
            }
            for (e, got) in expect.iter().zip(&out.new_models[k].values) {
                assert!((e / members.len() as f64 - got).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn global_every_event_always_triggers() {
        let mut view = two_group_view();
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let st = state_from(&view, &labels, 2);
        let policy = DriftPolicy {
            mode: PolicyMode::GlobalEveryEvent,
            ..DriftPolicy::default()
        };
        let mut trig = TriggerState::new(&policy);
        let out = handle_drift_event(&[(0, vec![0.899, 0.101])], &st, &mut view, &policy, &mut trig, Metric::L1, &BTreeSet::new(), 1)
            .unwrap();
        assert!(out.global_recluster_triggered);
    }

    #[test]
    fn selected_only_defers_unselected_updates() {
        let mut view = two_group_view();
        let labels: Vec<usize> = (0..20).map(|i| i / 10).collect();
        let st = state_from(&view, &labels, 2);
        let policy = DriftPolicy {
            mode: PolicyMode::RecusterSelectedOnly,
            ..DriftPolicy::default()
        };
        let mut trig = TriggerState::new(&policy);
        let selected: BTreeSet<ClientId> = [0].into_iter().collect();
        let updates = vec![(0, vec![0.1, 0.9]), (1, vec![0.1, 0.9])];
        let out = handle_drift_event(&updates, &st, &mut view, &policy, &mut trig, Metric::L1, &selected, 1).unwrap();
        assert_eq!(view[&1], vec![0.9, 0.1]);
        assert_eq!(out.moved_clients.len(), 1);
        assert_eq!(out.moved_clients[0].client, 0);
    }

    #[test]
    fn empty_cluster_is_deleted() {
        let mut view = CoordinatorView::new();
        view.insert(0, vec![0.0]);
        view.insert(1, vec![5.0]);
        view.insert(2, vec![10.0]);
        let st = state_from(&view, &[0, 1, 2], 3);
        view.insert(1, vec![9.0]);
        let (a, _, survivors) = reassign_drifted(&[1], &st.assignment, &view, Metric::L1).unwrap();
        assert_eq!(a.k(), 2);
        assert_eq!(survivors, vec![0, 2]);
        assert_eq!(a.centers[1], vec![9.5]);
    }

    #[test]
    fn raising_tau_never_creates_a_trigger() {
        let mut rng = stream(8, "tau-monotone", &[]);
        for _ in 0..200 {
            let old: Vec<Vec<f64>> = (0..3).map(|_| vec![rng.gen::<f64>(), rng.gen::<f64>()]).collect();
            let new: Vec<Vec<f64>> = old.iter().map(|c| c.iter().map(|v| v + 0.3 * rng.gen::<f64>()).collect()).collect();
            let lo: f64 = rng.gen();
            let hi = lo + rng.gen::<f64>();
            let (t_hi, _, _) = center_shift_check(&old, &new, Metric::L1, hi).unwrap();
            let (t_lo, _, _) = center_shift_check(&old, &new, Metric::L1, lo).unwrap();
            assert!(!t_hi || t_lo);
        }
    }
}
