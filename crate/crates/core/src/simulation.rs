//! Synthetic clusterable task, client population, streaming drift traces
//! and the simulated device clock.
//!
//! Concepts differ in their label prior (label shift). Every concept shares
//! the same class-conditional input Gaussians, so a client's label
//! histogram determines how well any model fits it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Sample;
use crate::representations::ClientId;
use crate::rng::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub num_labels: usize,
    pub input_dim: usize,
    /// Number of ground-truth concepts (K_true).
    pub num_concepts: usize,
    /// Labels that carry most of a concept's mass.
    pub labels_per_concept: usize,
    /// Probability mass on a concept's home labels.
    pub concept_mass: f64,
    /// Scale of the class means.
    pub class_separation: f64,
    pub noise_std: f64,
    /// Probability that a generated label is replaced by a uniform one.
    pub label_noise: f64,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            num_labels: 10,
            input_dim: 32,
            num_concepts: 4,
            labels_per_concept: 2,
            concept_mass: 0.8,
            class_separation: 0.3,
            noise_std: 1.0,
            label_noise: 0.0,
        }
    }
}

impl TaskConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.num_labels == 0 {
            errors.push("task.num_labels must be >= 1".into());
        }
        if self.input_dim == 0 {
            errors.push("task.input_dim must be >= 1".into());
        }
        if self.num_concepts == 0 {
            errors.push("task.num_concepts must be >= 1".into());
        }
        if self.labels_per_concept == 0 || self.labels_per_concept > self.num_labels {
            errors.push("task.labels_per_concept must be in [1, num_labels]".into());
        }
        if !(0.0..=1.0).contains(&self.concept_mass) {
            errors.push("task.concept_mass must be in [0, 1]".into());
        }
        if !(self.noise_std >= 0.0) {
            errors.push("task.noise_std must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            errors.push("task.label_noise must be in [0, 1]".into());
        }
    }
}

/// A generating distribution: a label prior over shared class Gaussians.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub home_labels: Vec<u32>,
    pub prior: Vec<f64>,
}

fn concept_with_home(home: Vec<u32>, num_labels: usize, mass: f64) -> Concept {
    let mut prior = vec![0.0; num_labels];
    let others = num_labels - home.len();
    let home_mass = if others == 0 { 1.0 } else { mass };
    for &l in &home {
        prior[l as usize] += home_mass / home.len() as f64;
    }
    if others > 0 {
        for (l, p) in prior.iter_mut().enumerate() {
            if !home.contains(&(l as u32)) {
                *p += (1.0 - home_mass) / others as f64;
            }
        }
    }
    Concept { home_labels: home, prior }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticTask {
    pub config: TaskConfig,
    pub class_means: Vec<Vec<f64>>,
    /// The first `num_concepts` entries are the base concepts; the rest are
    /// the targets of a mass drift.
    pub concepts: Vec<Concept>,
}

impl SyntheticTask {
    pub fn new(config: TaskConfig, seed: u64) -> Result<Self> {
        let mut errors = Vec::new();
        config.validate(&mut errors);
        if !errors.is_empty() {
            return Err(Error::Config(errors));
        }
        let l = config.num_labels;
        let h = config.labels_per_concept;
        let mut rng = stream(seed, "task-means", &[]);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let class_means = (0..l)
            .map(|_| (0..config.input_dim).map(|_| config.class_separation * normal.sample(&mut rng)).collect())
            .collect();

        // Base concept j owns labels j*h .. j*h + h - 1 (mod L).
        let base: Vec<Concept> = (0..config.num_concepts)
            .map(|j| {
                let home = (0..h).map(|i| ((j * h + i) % l) as u32).collect();
                concept_with_home(home, l, config.concept_mass)
            })
            .collect();
        // Drift concept t takes one home label from every base concept,
        // chosen by a bit pattern, so it is equally far from all of them.
        let patterns = |t: usize, j: usize| -> usize {
            match t {
                0 => 0,
                1 => h - 1,
                2 => (j % 2) * (h - 1),
                3 => ((j + 1) % 2) * (h - 1),
                _ => (t * 7 + j * 3) % h,
            }
        };
        let mut drift = Vec::new();
        for t in 0..config.num_concepts {
            let mut home: Vec<u32> = (0..config.num_concepts)
                .map(|j| ((j * h + patterns(t, j)) % l) as u32)
                .collect();
            home.sort_unstable();
            home.dedup();
            drift.push(concept_with_home(home, l, config.concept_mass));
        }
        let mut concepts = base;
        concepts.extend(drift);
        Ok(Self {
            config,
            class_means,
            concepts,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.config.num_labels
    }

    pub fn num_base_concepts(&self) -> usize {
        self.config.num_concepts
    }

    /// One sample of class `label` (the returned label may differ under
    /// label noise).
    pub fn sample<R: Rng + ?Sized>(&self, label: u32, rng: &mut R) -> Sample {
        let normal = Normal::new(0.0, self.config.noise_std.max(0.0)).expect("valid std");
        let features = self.class_means[label as usize]
            .iter()
            .map(|m| m + if self.config.noise_std > 0.0 { normal.sample(rng) } else { 0.0 })
            .collect();
        let label = if self.config.label_noise > 0.0 && rng.gen::<f64>() < self.config.label_noise {
            rng.gen_range(0..self.config.num_labels) as u32
        } else {
            label
        };
        Sample::new(features, label)
    }
}

pub(crate) fn draw_categorical<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let mut r = rng.gen::<f64>() * probs.iter().sum::<f64>();
    for (i, p) in probs.iter().enumerate() {
        if r < *p {
            return i;
        }
        r -= p;
    }
    probs.iter().rposition(|p| *p > 0.0).unwrap_or(0)
}

/// Dirichlet draw with parameters `scale * base`, via normalized Gammas.
/// `None` (infinite concentration) returns `base` itself.
pub fn dirichlet<R: Rng + ?Sized>(base: &[f64], scale: Option<f64>, rng: &mut R) -> Vec<f64> {
    let Some(scale) = scale else {
        return base.to_vec();
    };
    let draws: Vec<f64> = base
        .iter()
        .map(|&b| {
            let shape = scale * b;
            if shape <= 0.0 {
                0.0
            } else {
                Gamma::new(shape, 1.0).expect("positive shape").sample(rng)
            }
        })
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter().map(|d| d / total).collect()
    } else {
        base.to_vec()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassDrift {
    /// Interval from which the chosen clients follow a drift concept.
    pub interval: usize,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PopulationConfig {
    pub num_clients: usize,
    /// Concentration of a client's label prior around its concept's prior,
    /// scaled by the number of labels; `None` means infinite.
    pub dirichlet_alpha: Option<f64>,
    /// Chance per interval that a client switches to another base concept.
    pub switch_probability: f64,
    pub mass_drift: Option<MassDrift>,
}

impl Default for PopulationConfig {
    fn default() -> Self {
        Self {
            num_clients: 200,
            dirichlet_alpha: Some(0.5),
            switch_probability: 0.05,
            mass_drift: None,
        }
    }
}

impl PopulationConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.num_clients == 0 {
            errors.push("population.num_clients must be >= 1".into());
        }
        if let Some(a) = self.dirichlet_alpha {
            if !(a > 0.0) {
                errors.push("population.dirichlet_alpha must be > 0".into());
            }
        }
        if !(0.0..=1.0).contains(&self.switch_probability) {
            errors.push("population.switch_probability must be in [0, 1]".into());
        }
        if let Some(m) = &self.mass_drift {
            if !(0.0..=1.0).contains(&m.fraction) {
                errors.push("population.mass_drift.fraction must be in [0, 1]".into());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimClient {
    pub id: ClientId,
    /// Concept index (into `SyntheticTask::concepts`) for every interval.
    pub schedule: Vec<usize>,
    /// The client's own label prior for every concept it visits.
    pub priors: BTreeMap<usize, Vec<f64>>,
}

impl SimClient {
    pub fn prior_at(&self, interval: usize) -> &[f64] {
        &self.priors[&self.schedule[interval.min(self.schedule.len() - 1)]]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub clients: Vec<SimClient>,
    /// Initial concept of every client (ground truth for scoring).
    pub ground_truth: Vec<usize>,
}

/// Draws `cfg.num_clients` clients with concept schedules over
/// `num_intervals` intervals.
pub fn generate_population(task: &SyntheticTask, cfg: &PopulationConfig, num_intervals: usize, seed: u64) -> Result<Population> {
    let k = task.num_base_concepts();
    if cfg.num_clients < k {
        return Err(Error::InvalidInput(format!(
            "{} clients cannot cover {} concepts",
            cfg.num_clients, k
        )));
    }
    let intervals = num_intervals.max(1);
    let scale = cfg.dirichlet_alpha.map(|a| a * task.num_labels() as f64);
    let mut drifters = vec![false; cfg.num_clients];
    if let Some(m) = &cfg.mass_drift {
        let count = (m.fraction * cfg.num_clients as f64).round() as usize;
        let mut rng = stream(seed, "mass-drift", &[]);
        for i in sample_indices(&mut rng, cfg.num_clients, count.min(cfg.num_clients)) {
            drifters[i] = true;
        }
    }
    let mut clients = Vec::with_capacity(cfg.num_clients);
    let mut truth = Vec::with_capacity(cfg.num_clients);
    for i in 0..cfg.num_clients {
        let mut rng = stream(seed, "population", &[i as u64]);
        let first = rng.gen_range(0..k);
        let mut schedule = vec![first];
        for b in 1..intervals {
            let prev = schedule[b - 1];
            let next = match &cfg.mass_drift {
                Some(m) if drifters[i] && b == m.interval => k + rng.gen_range(0..k),
                _ if prev >= k => prev,
                _ if k > 1 && rng.gen::<f64>() < cfg.switch_probability => {
                    let other = rng.gen_range(0..k - 1);
                    if other >= prev {
                        other + 1
                    } else {
                        other
                    }
                }
                _ => prev,
            };
            schedule.push(next);
        }
        let mut priors = BTreeMap::new();
        for &c in &schedule {
            priors.entry(c).or_insert_with(|| {
                let mut prng = stream(seed, "client-prior", &[i as u64, c as u64]);
                dirichlet(&task.concepts[c].prior, scale, &mut prng)
            });
        }
        truth.push(first);
        clients.push(SimClient {
            id: i as ClientId,
            schedule,
            priors,
        });
    }
    Ok(Population {
        clients,
        ground_truth: truth,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    /// Ordered data split into intervals that arrive one at a time.
    Interval,
    /// Each client's labels split into buckets; a bucket brings all samples
    /// of its labels.
    LabelBucket,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharedLevel {
    /// One sample for each label in the less represented half.
    Half,
    One,
    Two,
}

impl SharedLevel {
    pub fn name(self) -> &'static str {
        match self {
            SharedLevel::Half => "half",
            SharedLevel::One => "one",
            SharedLevel::Two => "two",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [SharedLevel::Half, SharedLevel::One, SharedLevel::Two]
            .into_iter()
            .find(|l| l.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptDriftConfig {
    pub fraction: f64,
    /// Trace rounds at which swaps happen.
    pub at_rounds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TraceConfig {
    pub kind: TraceKind,
    pub num_intervals: usize,
    pub rounds_between: u64,
    pub samples_per_interval: usize,
    pub retention_rounds: u64,
    pub warmup_rounds_of_data: u64,
    pub concept_drift: Option<ConceptDriftConfig>,
    pub malicious_fraction: f64,
    pub shared_level: Option<SharedLevel>,
    /// Each client's arrivals are delayed by its own offset drawn from
    /// `0..=arrival_jitter` rounds; 0 keeps arrivals synchronized.
    pub arrival_jitter: u64,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            kind: TraceKind::Interval,
            num_intervals: 15,
            rounds_between: 20,
            samples_per_interval: 25,
            retention_rounds: 100,
            warmup_rounds_of_data: 100,
            concept_drift: None,
            malicious_fraction: 0.0,
            shared_level: None,
            arrival_jitter: 0,
        }
    }
}

impl TraceConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if self.num_intervals == 0 {
            errors.push("trace.num_intervals must be >= 1".into());
        }
        if self.samples_per_interval == 0 {
            errors.push("trace.samples_per_interval must be >= 1".into());
        }
        if self.num_intervals > 1 && self.rounds_between == 0 {
            errors.push("trace.rounds_between must be >= 1 with several intervals".into());
        }
        if self.retention_rounds == 0 {
            errors.push("trace.retention_rounds must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.malicious_fraction) {
            errors.push("trace.malicious_fraction must be in [0, 1]".into());
        }
        if let Some(c) = &self.concept_drift {
            if !(0.0..=1.0).contains(&c.fraction) {
                errors.push("trace.concept_drift.fraction must be in [0, 1]".into());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub arrival_round: u64,
    pub samples: Vec<Sample>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelSwap {
    pub round: u64,
    pub a: u32,
    pub b: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClientStream {
    pub id: ClientId,
    pub buckets: Vec<Bucket>,
    pub swaps: Vec<LabelSwap>,
    /// Set for malicious clients: reported histogram coordinate `i` is the
    /// true coordinate `permutation[i]`.
    pub report_permutation: Option<Vec<usize>>,
}

/// One line of the serialized trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEventRecord {
    pub round: u64,
    pub client_id: ClientId,
    pub kind: String,
    pub payload: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftTrace {
    pub clients: Vec<ClientStream>,
    /// Samples every client holds permanently.
    pub shared: Vec<Sample>,
    pub retention_rounds: u64,
    pub warmup_rounds_of_data: u64,
}

/// Every fifth sample of a bucket is held out for testing.
pub fn is_test_index(i: usize) -> bool {
    i % 5 == 4
}

impl DriftTrace {
    /// First trace round of a run.
    pub fn start_round(&self) -> u64 {
        self.warmup_rounds_of_data
    }

    /// Buckets held at `round`: arrived, and younger than the retention
    /// window. The most recent arrival is always kept so a client never
    /// runs dry between arrivals.
    pub fn held_buckets(&self, client: ClientId, round: u64) -> Vec<usize> {
        let s = &self.clients[client as usize];
        let latest = s.buckets.iter().rposition(|b| b.arrival_round <= round);
        s.buckets
            .iter()
            .enumerate()
            .filter(|(i, b)| b.arrival_round <= round && (round < b.arrival_round + self.retention_rounds || Some(*i) == latest))
            .map(|(i, _)| i)
            .collect()
    }

    /// Label relabeling in force at `round` (composition of all swaps so
    /// far).
    pub fn label_map(&self, client: ClientId, round: u64, num_labels: usize) -> Vec<u32> {
        let mut map: Vec<u32> = (0..num_labels as u32).collect();
        for s in &self.clients[client as usize].swaps {
            if s.round <= round {
                for v in map.iter_mut() {
                    if *v == s.a {
                        *v = s.b;
                    } else if *v == s.b {
                        *v = s.a;
                    }
                }
            }
        }
        map
    }

    /// Key that changes exactly when a client's visible data changes.
    pub fn data_key(&self, client: ClientId, round: u64) -> (Vec<usize>, usize) {
        let swaps = self.clients[client as usize].swaps.iter().filter(|s| s.round <= round).count();
        (self.held_buckets(client, round), swaps)
    }

    /// Training and test data visible at `round`, with relabeling applied.
    /// Shared samples join the training side.
    pub fn client_data(&self, client: ClientId, round: u64, num_labels: usize) -> (Vec<Sample>, Vec<Sample>) {
        let map = self.label_map(client, round, num_labels);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for b in self.held_buckets(client, round) {
            for (i, s) in self.clients[client as usize].buckets[b].samples.iter().enumerate() {
                let relabeled = Sample::new(s.features.clone(), map[s.label as usize]);
                if is_test_index(i) {
                    test.push(relabeled);
                } else {
                    train.push(relabeled);
                }
            }
        }
        train.extend(self.shared.iter().cloned());
        (train, test)
    }

    /// Rounds (at or after `from`) where any client's visible data changes.
    pub fn change_rounds(&self) -> Vec<u64> {
        let mut rounds: Vec<u64> = Vec::new();
        for c in &self.clients {
            for b in &c.buckets {
                rounds.push(b.arrival_round);
                rounds.push(b.arrival_round + self.retention_rounds);
            }
            rounds.extend(c.swaps.iter().map(|s| s.round));
        }
        rounds.sort_unstable();
        rounds.dedup();
        rounds
    }

    /// Event list in trace order (round, then client).
    pub fn events(&self) -> Vec<TraceEventRecord> {
        let mut out = Vec::new();
        for c in &self.clients {
            if let Some(p) = &c.report_permutation {
                out.push(TraceEventRecord {
                    round: 0,
                    client_id: c.id,
                    kind: "permute_reported_histogram".into(),
                    payload: serde_json::json!({ "permutation": p }),
                });
            }
            let last = c.buckets.len();
            for (i, b) in c.buckets.iter().enumerate() {
                out.push(TraceEventRecord {
                    round: b.arrival_round,
                    client_id: c.id,
                    kind: "arrive_bucket".into(),
                    payload: serde_json::json!({ "bucket": i, "samples": b.samples.len() }),
                });
                if i + 1 < last {
                    out.push(TraceEventRecord {
                        round: (b.arrival_round + self.retention_rounds).max(c.buckets[i + 1].arrival_round),
                        client_id: c.id,
                        kind: "retire".into(),
                        payload: serde_json::json!({ "bucket": i, "samples": b.samples.len() }),
                    });
                }
            }
            for s in &c.swaps {
                out.push(TraceEventRecord {
                    round: s.round,
                    client_id: c.id,
                    kind: "swap_labels".into(),
                    payload: serde_json::json!({ "a": s.a, "b": s.b }),
                });
            }
        }
        out.sort_by(|a, b| a.round.cmp(&b.round).then(a.client_id.cmp(&b.client_id)));
        out
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for e in self.events() {
            serde_json::to_writer(&mut f, &e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }
}

fn client_samples(task: &SyntheticTask, client: &SimClient, interval: usize, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = stream(seed, "samples", &[client.id as u64, interval as u64]);
    let prior = client.prior_at(interval);
    (0..count)
        .map(|_| {
            let label = draw_categorical(prior, &mut rng) as u32;
            task.sample(label, &mut rng)
        })
        .collect()
}

/// Ordered per-client data in `num_intervals` buckets; bucket `b` arrives
/// at round `b * rounds_between`.
pub fn build_interval_trace(
    task: &SyntheticTask,
    population: &Population,
    num_intervals: usize,
    rounds_between: u64,
    samples_per_interval: usize,
    seed: u64,
) -> Vec<ClientStream> {
    population
        .clients
        .iter()
        .map(|c| ClientStream {
            id: c.id,
            buckets: (0..num_intervals.max(1))
                .map(|b| Bucket {
                    arrival_round: b as u64 * rounds_between,
                    samples: client_samples(task, c, b, samples_per_interval, seed),
                })
                .collect(),
            swaps: Vec::new(),
            report_permutation: None,
        })
        .collect()
}

/// Each client's data (all intervals pooled) is re-split by label: labels
/// are randomly partitioned into `num_buckets` groups and bucket `b`
/// brings every sample whose label is in group `b`.
pub fn build_label_bucket_trace(
    task: &SyntheticTask,
    population: &Population,
    num_buckets: usize,
    rounds_between: u64,
    samples_per_client: usize,
    seed: u64,
) -> Vec<ClientStream> {
    let nb = num_buckets.max(1);
    let l = task.num_labels();
    population
        .clients
        .iter()
        .map(|c| {
            let samples = client_samples(task, c, 0, samples_per_client, seed);
            let mut labels: Vec<u32> = (0..l as u32).collect();
            labels.shuffle(&mut stream(seed, "label-buckets", &[c.id as u64]));
            let mut group = vec![0usize; l];
            for (i, lab) in labels.iter().enumerate() {
                group[*lab as usize] = i * nb / l;
            }
            let buckets = (0..nb)
                .map(|b| Bucket {
                    arrival_round: b as u64 * rounds_between,
                    samples: samples.iter().filter(|s| group[s.label as usize] == b).cloned().collect(),
                })
                .collect();
            ClientStream {
                id: c.id,
                buckets,
                swaps: Vec::new(),
                report_permutation: None,
            }
        })
        .collect()
}

/// A random `fraction` of clients each swap two distinct labels at every
/// round in `at_rounds`.
pub fn build_concept_drift_events(streams: &mut [ClientStream], num_labels: usize, fraction: f64, at_rounds: &[u64], seed: u64) {
    if num_labels < 2 || fraction <= 0.0 {
        return;
    }
    let n = streams.len();
    let count = ((fraction * n as f64).round() as usize).min(n);
    for (e, &round) in at_rounds.iter().enumerate() {
        let mut rng = stream(seed, "concept-drift", &[e as u64]);
        for i in sample_indices(&mut rng, n, count) {
            let a = rng.gen_range(0..num_labels) as u32;
            let mut b = rng.gen_range(0..num_labels - 1) as u32;
            if b >= a {
                b += 1;
            }
            streams[i].swaps.push(LabelSwap { round, a, b });
        }
    }
    for s in streams.iter_mut() {
        s.swaps.sort_by_key(|x| x.round);
    }
}

/// A random `fraction` of clients report their histogram through a fixed
/// non-identity permutation.
pub fn apply_malicious(streams: &mut [ClientStream], num_labels: usize, fraction: f64, seed: u64) {
    if num_labels < 2 || fraction <= 0.0 {
        return;
    }
    let n = streams.len();
    let count = ((fraction * n as f64).round() as usize).min(n);
    let mut rng = stream(seed, "malicious", &[]);
    for i in sample_indices(&mut rng, n, count) {
        let mut perm: Vec<usize> = (0..num_labels).collect();
        while perm.iter().enumerate().all(|(j, p)| j == *p) {
            perm.shuffle(&mut rng);
        }
        streams[i].report_permutation = Some(perm);
    }
}

/// Apply a reporting permutation to a histogram.
pub fn permute_report(probs: &[f64], permutation: &[usize]) -> Vec<f64> {
    permutation.iter().map(|&j| probs[j]).collect()
}

/// Shared samples given to every client: one per label in the less
/// represented half of `label_counts` (Half), one per label (One) or two
/// per label (Two).
pub fn inject_shared_dataset(task: &SyntheticTask, label_counts: &[u64], level: SharedLevel, seed: u64) -> Result<Vec<Sample>> {
    let l = task.num_labels();
    if l == 0 || label_counts.len() != l {
        return Err(Error::InvalidInput("shared dataset needs a non-empty label space".into()));
    }
    let (labels, per_label): (Vec<u32>, usize) = match level {
        SharedLevel::Half => {
            let mut order: Vec<u32> = (0..l as u32).collect();
            order.sort_by_key(|&c| (label_counts[c as usize], c));
            order.truncate(l.div_ceil(2));
            order.sort_unstable();
            (order, 1)
        }
        SharedLevel::One => ((0..l as u32).collect(), 1),
        SharedLevel::Two => ((0..l as u32).collect(), 2),
    };
    let mut rng = stream(seed, "shared-dataset", &[]);
    let mut out = Vec::new();
    for lab in labels {
        for _ in 0..per_label {
            let mut s = task.sample(lab, &mut rng);
            s.label = lab;
            out.push(s);
        }
    }
    Ok(out)
}

/// Assemble the full trace for a run.
/// Shifts every bucket of a client by one per-client offset.
pub fn apply_arrival_jitter(streams: &mut [ClientStream], max_jitter: u64, seed: u64) {
    if max_jitter == 0 {
        return;
    }
    for s in streams.iter_mut() {
        let offset = stream(seed, "arrival-jitter", &[s.id as u64]).gen_range(0..=max_jitter);
        for b in s.buckets.iter_mut() {
            b.arrival_round += offset;
        }
    }
}

pub fn build_trace(task: &SyntheticTask, population: &Population, cfg: &TraceConfig, seed: u64) -> Result<DriftTrace> {
    let mut streams = match cfg.kind {
        TraceKind::Interval => build_interval_trace(task, population, cfg.num_intervals, cfg.rounds_between, cfg.samples_per_interval, seed),
        TraceKind::LabelBucket => build_label_bucket_trace(
            task,
            population,
            cfg.num_intervals,
            cfg.rounds_between,
            cfg.samples_per_interval * cfg.num_intervals,
            seed,
        ),
    };
    if let Some(cd) = &cfg.concept_drift {
        build_concept_drift_events(&mut streams, task.num_labels(), cd.fraction, &cd.at_rounds, seed);
    }
    apply_malicious(&mut streams, task.num_labels(), cfg.malicious_fraction, seed);
    apply_arrival_jitter(&mut streams, cfg.arrival_jitter, seed);
    let mut trace = DriftTrace {
        clients: streams,
        shared: Vec::new(),
        retention_rounds: cfg.retention_rounds,
        warmup_rounds_of_data: cfg.warmup_rounds_of_data,
    };
    if let Some(level) = cfg.shared_level {
        let mut counts = vec![0u64; task.num_labels()];
        let start = trace.start_round();
        for c in 0..trace.clients.len() {
            for s in trace.client_data(c as ClientId, start, task.num_labels()).0 {
                counts[s.label as usize] += 1;
            }
        }
        trace.shared = inject_shared_dataset(task, &counts, level, seed)?;
    }
    Ok(trace)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceProfile {
    pub client_id: ClientId,
    /// Samples per second.
    pub speed: f64,
    /// Bytes per second.
    pub bw_up: f64,
    pub bw_down: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DeviceConfig {
    /// Log-normal parameters of device speed (samples per second).
    pub speed_log_mean: f64,
    pub speed_log_std: f64,
    /// Bandwidth choices in bytes per second (used for both directions).
    pub bandwidths: Vec<f64>,
    /// Defaults to 8 bytes per model parameter.
    pub model_bytes: Option<f64>,
    /// Seconds; stragglers past it are dropped.
    pub round_deadline: Option<f64>,
    /// CSV with columns client_id, speed, bw_up, bw_down.
    pub profile_file: Option<std::path::PathBuf>,
}

impl Default for DeviceConfig {
    fn default() -> Self {
        Self {
            speed_log_mean: 100f64.ln(),
            speed_log_std: 0.5,
            bandwidths: vec![1.0e5, 5.0e5, 2.0e6],
            model_bytes: None,
            round_deadline: None,
            profile_file: None,
        }
    }
}

impl DeviceConfig {
    pub fn validate(&self, errors: &mut Vec<String>) {
        if !(self.speed_log_std >= 0.0) {
            errors.push("devices.speed_log_std must be >= 0".into());
        }
        if self.bandwidths.is_empty() || self.bandwidths.iter().any(|b| !(*b > 0.0)) {
            errors.push("devices.bandwidths must be a non-empty list of positive rates".into());
        }
        if let Some(b) = self.model_bytes {
            if !(b > 0.0) {
                errors.push("devices.model_bytes must be > 0".into());
            }
        }
        if let Some(d) = self.round_deadline {
            if !(d > 0.0) {
                errors.push("devices.round_deadline must be > 0".into());
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviceTimeModel {
    pub profiles: Vec<DeviceProfile>,
    pub model_bytes: f64,
    pub round_deadline: Option<f64>,
}

impl DeviceTimeModel {
    pub fn generate(cfg: &DeviceConfig, num_clients: usize, model_dim: usize, seed: u64) -> Result<Self> {
        let profiles = match &cfg.profile_file {
            Some(path) => {
                let mut p = load_device_profiles(path)?;
                p.sort_by_key(|d| d.client_id);
                if p.len() < num_clients || p.iter().enumerate().any(|(i, d)| d.client_id as usize != i) {
                    return Err(Error::InvalidInput(format!(
                        "device profile file must list clients 0..{num_clients} exactly once"
                    )));
                }
                p.truncate(num_clients);
                p
            }
            None => {
                let speed = LogNormal::new(cfg.speed_log_mean, cfg.speed_log_std)
                    .map_err(|e| Error::InvalidInput(format!("device speed distribution: {e}")))?;
                (0..num_clients)
                    .map(|i| {
                        let mut rng = stream(seed, "device", &[i as u64]);
                        let bw = *cfg.bandwidths.choose(&mut rng).expect("non-empty bandwidths");
                        DeviceProfile {
                            client_id: i as ClientId,
                            speed: speed.sample(&mut rng),
                            bw_up: bw,
                            bw_down: bw,
                        }
                    })
                    .collect()
            }
        };
        if profiles.iter().any(|p| !(p.speed > 0.0 && p.bw_up > 0.0 && p.bw_down > 0.0)) {
            return Err(Error::InvalidInput("device rates must be positive".into()));
        }
        Ok(Self {
            profiles,
            model_bytes: cfg.model_bytes.unwrap_or(8.0 * model_dim as f64),
            round_deadline: cfg.round_deadline,
        })
    }

    /// Download, `local_steps * batch_size` samples of compute, upload.
    pub fn client_time(&self, client: ClientId, local_steps: usize, batch_size: usize) -> f64 {
        let p = &self.profiles[client as usize];
        self.model_bytes / p.bw_down + (local_steps * batch_size) as f64 / p.speed + self.model_bytes / p.bw_up
    }
}

pub fn load_device_profiles(path: &Path) -> Result<Vec<DeviceProfile>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn write_device_profiles(path: &Path, profiles: &[DeviceProfile]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in profiles {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundTiming {
    pub seconds: f64,
    pub kept: Vec<ClientId>,
    pub dropped: Vec<ClientId>,
}

/// Round time is the slowest selected client, capped at the deadline;
/// clients past the deadline are dropped.
pub fn simulate_round_time(times: &[(ClientId, f64)], deadline: Option<f64>) -> RoundTiming {
    let limit = deadline.unwrap_or(f64::INFINITY);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut slowest: f64 = 0.0;
    for &(c, t) in times {
        if t > limit {
            dropped.push(c);
        } else {
            kept.push(c);
        }
        slowest = slowest.max(t);
    }
    RoundTiming {
        seconds: slowest.min(limit),
        kept,
        dropped,
    }
}

/// Earliest time after which accuracy never falls below `target`.
pub fn time_to_accuracy(series: &[(f64, f64)], target: f64) -> Option<f64> {
    let mut first = None;
    for (i, &(_, acc)) in series.iter().enumerate().rev() {
        if acc >= target {
            first = Some(i);
        } else {
            break;
        }
    }
    first.map(|i| series[i].0)
}
