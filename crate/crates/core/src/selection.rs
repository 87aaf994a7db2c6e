//! Client selection inside a cluster.

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::representations::{ClientId, Metric};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientProfile {
    pub client_id: ClientId,
    pub data_size: usize,
    /// Most recent mean training loss (statistical utility).
    pub last_loss: f64,
    /// Samples per second.
    pub device_speed: f64,
    /// Bytes per second, upload and download.
    pub bandwidth_up: f64,
    pub bandwidth_down: f64,
    pub last_selected_round: Option<u64>,
    /// Simulated duration of one round on this client.
    pub expected_round_time: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Selector {
    Random,
    /// Simplified utility-driven selection: statistical utility times a
    /// system penalty, plus an exploration share. Not a full
    /// reimplementation of Oort's scoring.
    Utility {
        #[serde(default = "default_explore")]
        explore_fraction: f64,
        /// Seconds; defaults to the 80th percentile of members' expected
        /// round times.
        #[serde(default)]
        deadline: Option<f64>,
    },
    Distance,
}

fn default_explore() -> f64 {
    0.1
}

impl Default for Selector {
    fn default() -> Self {
        Selector::Random
    }
}

impl Selector {
    pub fn name(&self) -> &'static str {
        match self {
            Selector::Random => "random",
            Selector::Utility { .. } => "utility",
            Selector::Distance => "distance",
        }
    }

    pub fn validate(&self, errors: &mut Vec<String>) {
        if let Selector::Utility {
            explore_fraction,
            deadline,
        } = self
        {
            if !(0.0..=1.0).contains(explore_fraction) {
                errors.push("selector.explore_fraction must be in [0, 1]".into());
            }
            if let Some(d) = deadline {
                if !(*d > 0.0) {
                    errors.push("selector.deadline must be > 0".into());
                }
            }
        }
    }
}

/// Uniform sample of `n` members. Without replacement, `n` larger than the
/// member count returns everyone.
pub fn select_random<R: Rng + ?Sized>(members: &[ClientId], n: usize, with_replacement: bool, rng: &mut R) -> Vec<ClientId> {
    if members.is_empty() || n == 0 {
        return Vec::new();
    }
    if with_replacement {
        return (0..n).map(|_| members[rng.gen_range(0..members.len())]).collect();
    }
    if n >= members.len() {
        return members.to_vec();
    }
    sample_indices(rng, members.len(), n).into_iter().map(|i| members[i]).collect()
}

/// Value at quantile `q` (nearest rank) of a non-empty list.
pub(crate) fn percentile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q * v.len() as f64).ceil() as usize).clamp(1, v.len());
    v[rank - 1]
}

/// Utility score: `sqrt(data_size) * last_loss`, multiplied by
/// `(deadline / t)^2` when the expected round time `t` exceeds the
/// deadline.
pub fn utility_score(p: &ClientProfile, deadline: f64) -> f64 {
    let stat = (p.data_size as f64).sqrt() * p.last_loss;
    if p.expected_round_time > deadline {
        stat * (deadline / p.expected_round_time).powi(2)
    } else {
        stat
    }
}

/// Top-scoring members fill `n - round(explore_fraction * n)` slots; the
/// rest go to never-selected or least recently selected members. Random
/// tie-breaking comes from an initial shuffle.
pub fn select_utility<R: Rng + ?Sized>(
    members: &[ClientProfile],
    n: usize,
    explore_fraction: f64,
    deadline: Option<f64>,
    rng: &mut R,
) -> Vec<ClientId> {
    let n = n.min(members.len());
    if n == 0 {
        return Vec::new();
    }
    let deadline = deadline.unwrap_or_else(|| {
        let times: Vec<f64> = members.iter().map(|p| p.expected_round_time).collect();
        percentile(&times, 0.8)
    });
    let n_explore = ((explore_fraction * n as f64).round() as usize).min(n);
    let n_exploit = n - n_explore;

    let mut order: Vec<&ClientProfile> = members.iter().collect();
    order.shuffle(rng);
    let mut by_score = order.clone();
    by_score.sort_by(|a, b| utility_score(b, deadline).total_cmp(&utility_score(a, deadline)));
    let mut chosen: Vec<ClientId> = by_score.iter().take(n_exploit).map(|p| p.client_id).collect();

    let mut rest: Vec<&ClientProfile> = order.into_iter().filter(|p| !chosen.contains(&p.client_id)).collect();
    // `None` (never selected) sorts before any round.
    rest.sort_by_key(|p| p.last_selected_round);
    chosen.extend(rest.iter().take(n_explore).map(|p| p.client_id));
    chosen
}

/// The `n` members closest to `center`; ties go to the lower client id.
pub fn select_distance(members: &[(ClientId, &[f64])], center: &[f64], metric: Metric, n: usize) -> Vec<ClientId> {
    let mut scored: Vec<(f64, ClientId)> = members
        .iter()
        .map(|(c, r)| (metric.eval_unchecked(r, center), *c))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    scored.into_iter().take(n).map(|(_, c)| c).collect()
}
