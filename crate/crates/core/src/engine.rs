//! Single-process experiment engine: drift events, per-cluster training
//! rounds, evaluation, logging and checkpoints.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{mean_client_distance, ClusterAssignment};
use crate::config::ExperimentConfig;
use crate::drift::{global_recluster, handle_drift_event, CoordinatorView, TriggerState};
use crate::error::{Error, Result};
use crate::models::{ModelParams, ModelVersion, Sample, TaskModel};
use crate::representations::{
    compute_embedding, compute_gradient_sketch, compute_label_histogram, ClientId, FrozenExtractor, GradientSketcher,
    RepresentationKind,
};
use crate::rng::{derive_seed, stream};
use crate::selection::{select_distance, select_random, select_utility, ClientProfile, Selector};
use crate::simulation::{
    build_trace, generate_population, permute_report, simulate_round_time, time_to_accuracy, DeviceTimeModel, DriftTrace,
    SyntheticTask,
};
use crate::training::{cluster_budgets, run_cluster_round, ClusterState, ServerState};

pub const ROUNDS_FILE: &str = "rounds.csv";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const OVERHEAD_FILE: &str = "overhead.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: u64,
    pub event_index: u64,
    pub sim_time_s: f64,
    pub mean_accuracy: f64,
    pub per_cluster_accuracy: Vec<f64>,
    pub mean_client_distance: f64,
    /// Mean client distance with every client in one cluster.
    pub baseline_distance: f64,
    pub k: usize,
    pub recluster_triggered: bool,
    pub moved_count: usize,
    pub dropped_stragglers: usize,
}

const ROUND_HEADER: [&str; 12] = [
    "config_hash",
    "round",
    "event_index",
    "sim_time_s",
    "mean_accuracy",
    "per_cluster_accuracy",
    "mean_client_distance",
    "baseline_distance",
    "k",
    "recluster_triggered",
    "moved_count",
    "dropped_stragglers",
];

impl RoundRecord {
    fn csv_row(&self, hash: &str) -> Vec<String> {
        vec![
            hash.to_string(),
            self.round.to_string(),
            self.event_index.to_string(),
            self.sim_time_s.to_string(),
            self.mean_accuracy.to_string(),
            self.per_cluster_accuracy.iter().map(f64::to_string).collect::<Vec<_>>().join(";"),
            self.mean_client_distance.to_string(),
            self.baseline_distance.to_string(),
            self.k.to_string(),
            self.recluster_triggered.to_string(),
            self.moved_count.to_string(),
            self.dropped_stragglers.to_string(),
        ]
    }
}

/// Reads a rounds file back into records.
pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let field = |i: usize| row.get(i).unwrap_or("");
        let num = |i: usize| -> Result<f64> {
            field(i).parse().map_err(|_| Error::InvalidInput(format!("bad number in {ROUNDS_FILE}: {}", field(i))))
        };
        let int = |i: usize| -> Result<u64> {
            field(i).parse().map_err(|_| Error::InvalidInput(format!("bad integer in {ROUNDS_FILE}: {}", field(i))))
        };
        let per_cluster = if field(5).is_empty() {
            Vec::new()
        } else {
            field(5)
                .split(';')
                .map(|s| s.parse().map_err(|_| Error::InvalidInput(format!("bad accuracy list: {s}"))))
                .collect::<Result<_>>()?
        };
        out.push(RoundRecord {
            round: int(1)?,
            event_index: int(2)?,
            sim_time_s: num(3)?,
            mean_accuracy: num(4)?,
            per_cluster_accuracy: per_cluster,
            mean_client_distance: num(6)?,
            baseline_distance: num(7)?,
            k: int(8)? as usize,
            recluster_triggered: field(9) == "true",
            moved_count: int(10)? as usize,
            dropped_stragglers: int(11)? as usize,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub config_hash: String,
    pub event_index: u64,
    pub round: u64,
    pub trace_round: u64,
    /// "initial" for the first clustering, "drift" afterwards.
    pub kind: String,
    pub drifted_count: usize,
    pub moved_count: usize,
    pub recluster_triggered: bool,
    pub k_before: usize,
    pub k_after: usize,
    /// Mean pairwise center distance; null when fewer than two centers.
    pub theta: Option<f64>,
    pub max_center_shift: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TtaEntry {
    pub target: f64,
    pub seconds: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub config_hash: String,
    pub name: String,
    pub rounds: u64,
    pub events: u64,
    pub final_mean_accuracy: f64,
    pub final_per_cluster_accuracy: Vec<f64>,
    pub final_k: usize,
    pub final_mean_client_distance: f64,
    pub final_baseline_distance: f64,
    pub tta: Vec<TtaEntry>,
    pub total_sim_time_s: f64,
    pub global_reclusters: usize,
    pub total_moves: usize,
    pub dropped_stragglers: usize,
}

impl Summary {
    pub fn from_records(cfg: &ExperimentConfig, hash: &str, records: &[RoundRecord]) -> Self {
        let last = records.last();
        let series: Vec<(f64, f64)> = records.iter().map(|r| (r.sim_time_s, r.mean_accuracy)).collect();
        Self {
            config_hash: hash.to_string(),
            name: cfg.name.clone(),
            rounds: records.len() as u64,
            events: last.map_or(0, |r| r.event_index + 1),
            final_mean_accuracy: last.map_or(0.0, |r| r.mean_accuracy),
            final_per_cluster_accuracy: last.map_or_else(Vec::new, |r| r.per_cluster_accuracy.clone()),
            final_k: last.map_or(0, |r| r.k),
            final_mean_client_distance: last.map_or(0.0, |r| r.mean_client_distance),
            final_baseline_distance: last.map_or(0.0, |r| r.baseline_distance),
            tta: cfg
                .output
                .tta_targets
                .iter()
                .map(|&target| TtaEntry {
                    target,
                    seconds: time_to_accuracy(&series, target),
                })
                .collect(),
            total_sim_time_s: last.map_or(0.0, |r| r.sim_time_s),
            global_reclusters: records.iter().filter(|r| r.recluster_triggered).count(),
            total_moves: records.iter().map(|r| r.moved_count).sum(),
            dropped_stragglers: records.iter().map(|r| r.dropped_stragglers).sum(),
        }
    }
}

/// Wall-clock cost of coordinator work at one event.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OverheadEntry {
    pub event_index: u64,
    pub representation_seconds: f64,
    /// Drift handling including any global re-clustering.
    pub clustering_seconds: f64,
    pub global_recluster: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientDynamics {
    pub last_loss: Option<f64>,
    pub last_selected_round: Option<u64>,
}

/// Everything that changes while a run progresses.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunState {
    pub config_hash: String,
    /// Next run round to execute.
    pub round: u64,
    pub clusters: Option<ClusterState>,
    pub view: CoordinatorView,
    pub trigger: TriggerState,
    pub clients: Vec<ClientDynamics>,
    pub recently_selected: BTreeSet<ClientId>,
    /// Unmodified representation of every client at the last event, for
    /// heterogeneity.
    pub truth: Vec<Vec<f64>>,
    pub records: Vec<RoundRecord>,
    pub events: Vec<EventRecord>,
}

#[derive(Clone, Debug, Default)]
struct ClientCache {
    key: Option<(Vec<usize>, usize)>,
    train: Vec<Sample>,
    test: Vec<Sample>,
}

struct Outputs {
    dir: PathBuf,
    rounds: csv::Writer<File>,
    events: File,
}

impl Outputs {
    /// Fresh files, or files rewritten from `state` when resuming.
    fn open(dir: &Path, state: &RunState) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let mut rounds = csv::Writer::from_writer(File::create(dir.join(ROUNDS_FILE))?);
        rounds.write_record(ROUND_HEADER)?;
        for r in &state.records {
            rounds.write_record(r.csv_row(&state.config_hash))?;
        }
        rounds.flush()?;
        let mut events = File::create(dir.join(EVENTS_FILE))?;
        for e in &state.events {
            serde_json::to_writer(&mut events, e)?;
            events.write_all(b"\n")?;
        }
        events.flush()?;
        Ok(Self {
            dir: dir.to_path_buf(),
            rounds,
            events,
        })
    }
}

pub struct Engine {
    cfg: ExperimentConfig,
    model: TaskModel,
    trace: DriftTrace,
    devices: DeviceTimeModel,
    extractor: Option<FrozenExtractor>,
    sketcher: Option<GradientSketcher>,
    num_labels: usize,
    cache: Vec<ClientCache>,
    state: RunState,
    overhead: Vec<OverheadEntry>,
    out: Option<Outputs>,
}

impl Engine {
    /// An engine that keeps everything in memory.
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.seed;
        let task = SyntheticTask::new(cfg.task.clone(), derive_seed(seed, "task", &[]))?;
        let population = generate_population(&task, &cfg.population, cfg.trace.num_intervals, derive_seed(seed, "population", &[]))?;
        let trace = build_trace(&task, &population, &cfg.trace, derive_seed(seed, "trace", &[]))?;
        let model = cfg.task_model();
        let devices = DeviceTimeModel::generate(&cfg.devices, cfg.population.num_clients, model.dim(), derive_seed(seed, "devices", &[]))?;
        let extractor = (cfg.representation.kind == RepresentationKind::Embedding).then(|| {
            FrozenExtractor::new(
                cfg.task.input_dim,
                cfg.representation.embedding_hidden,
                cfg.representation.embedding_dim,
                derive_seed(seed, "extractor", &[]),
            )
        });
        let sketcher = (cfg.representation.kind == RepresentationKind::Gradient)
            .then(|| GradientSketcher::new(model.dim(), cfg.representation.sketch_dim, derive_seed(seed, "sketch", &[])));
        let n = cfg.population.num_clients;
        let state = RunState {
            config_hash: cfg.hash(),
            round: 0,
            clusters: None,
            view: CoordinatorView::new(),
            trigger: TriggerState::new(&cfg.policy),
            clients: vec![ClientDynamics::default(); n],
            recently_selected: BTreeSet::new(),
            truth: vec![Vec::new(); n],
            records: Vec::new(),
            events: Vec::new(),
        };
        Ok(Self {
            num_labels: cfg.task.num_labels,
            model,
            trace,
            devices,
            extractor,
            sketcher,
            cache: vec![ClientCache::default(); n],
            state,
            overhead: Vec::new(),
            out: None,
            cfg,
        })
    }

    /// An engine that writes its outputs to `dir` (created if missing).
    pub fn with_output(cfg: ExperimentConfig, dir: &Path) -> Result<Self> {
        let mut engine = Self::new(cfg)?;
        fs::create_dir_all(dir)?;
        fs::write(dir.join(CONFIG_FILE), engine.cfg.to_toml_string()?)?;
        let _ = fs::remove_dir_all(dir.join(CHECKPOINT_DIR));
        let _ = fs::remove_file(dir.join(SUMMARY_FILE));
        engine.out = Some(Outputs::open(dir, &engine.state)?);
        Ok(engine)
    }

    /// Continue a run from its latest checkpoint. Refuses when the stored
    /// config no longer hashes to the checkpoint's hash.
    pub fn resume(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join(CONFIG_FILE))?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        let ckpt = latest_checkpoint(dir)?.ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", dir.display())))?;
        let state = read_checkpoint(&ckpt)?;
        if state.config_hash != cfg.hash() {
            return Err(Error::Checkpoint(format!(
                "config hash {} does not match checkpoint hash {}",
                cfg.hash(),
                state.config_hash
            )));
        }
        let mut engine = Self::new(cfg)?;
        engine.state = state;
        engine.out = Some(Outputs::open(dir, &engine.state)?);
        Ok(engine)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn config_hash(&self) -> &str {
        &self.state.config_hash
    }

    pub fn trace(&self) -> &DriftTrace {
        &self.trace
    }

    pub fn state(&self) -> &RunState {
        &self.state
    }

    pub fn records(&self) -> &[RoundRecord] {
        &self.state.records
    }

    pub fn overhead(&self) -> &[OverheadEntry] {
        &self.overhead
    }

    pub fn total_rounds(&self) -> u64 {
        (self.cfg.training.total_events * self.cfg.training.rounds_per_event) as u64
    }

    pub fn is_finished(&self) -> bool {
        self.state.round >= self.total_rounds()
    }

    pub fn num_clusters(&self) -> usize {
        self.state.clusters.as_ref().map_or(0, ClusterState::k)
    }

    pub fn cluster_of(&self, client: ClientId) -> Option<usize> {
        self.state.clusters.as_ref()?.assignment.cluster_of(client)
    }

    pub fn assignment(&self) -> Option<&ClusterAssignment> {
        self.state.clusters.as_ref().map(|c| &c.assignment)
    }

    pub fn cluster_model(&self, k: usize) -> Option<&ModelParams> {
        self.state.clusters.as_ref()?.models.get(k)
    }

    pub fn summary(&self) -> Summary {
        Summary::from_records(&self.cfg, &self.state.config_hash, &self.state.records)
    }

    fn refresh_data(&mut self, trace_round: u64) {
        let trace = &self.trace;
        let labels = self.num_labels;
        self.cache.par_iter_mut().enumerate().for_each(|(c, entry)| {
            let key = trace.data_key(c as ClientId, trace_round);
            if entry.key.as_ref() != Some(&key) {
                let (train, test) = trace.client_data(c as ClientId, trace_round, labels);
                entry.train = train;
                entry.test = test;
                entry.key = Some(key);
            }
        });
    }

    /// Mean of the current cluster models, or the initial model before the
    /// first clustering.
    fn snapshot(&self) -> Result<Option<ModelParams>> {
        if self.cfg.representation.kind != RepresentationKind::Gradient {
            return Ok(None);
        }
        Ok(Some(match &self.state.clusters {
            Some(cs) => ModelParams::mean_of(&cs.models)?,
            None => self.initial_model(),
        }))
    }

    fn initial_model(&self) -> ModelParams {
        ModelParams::new(self.model.init_params(&mut stream(self.cfg.seed, "model-init", &[])))
    }

    /// Every client's representation; `reported` applies malicious
    /// permutations to histograms.
    fn representations(&self, snapshot: Option<&ModelParams>, reported: bool) -> Result<Vec<Vec<f64>>> {
        (0..self.cache.len())
            .into_par_iter()
            .map(|c| {
                let train: Vec<&Sample> = self.cache[c].train.iter().collect();
                let v = match self.cfg.representation.kind {
                    RepresentationKind::LabelHistogram => {
                        let h = compute_label_histogram(train.iter().copied(), self.num_labels)?.probs;
                        match (&self.trace.clients[c].report_permutation, reported) {
                            (Some(p), true) => permute_report(&h, p),
                            _ => h,
                        }
                    }
                    RepresentationKind::Embedding => {
                        compute_embedding(&train, self.extractor.as_ref().expect("extractor for embeddings"))?.values
                    }
                    RepresentationKind::Gradient => {
                        compute_gradient_sketch(
                            &train,
                            snapshot.expect("snapshot for gradients"),
                            &self.model,
                            self.sketcher.as_ref().expect("sketcher for gradients"),
                        )?
                        .values
                    }
                };
                Ok(v)
            })
            .collect()
    }

    fn drift_event(&mut self, event: u64, round: u64, trace_round: u64) -> Result<(bool, usize)> {
        let t0 = Instant::now();
        let snapshot = self.snapshot()?;
        let reported = self.representations(snapshot.as_ref(), true)?;
        self.state.truth = self.representations(snapshot.as_ref(), false)?;
        let rep_seconds = t0.elapsed().as_secs_f64();
        let t1 = Instant::now();
        let metric = self.cfg.representation.metric;
        let cluster_seed = derive_seed(self.cfg.seed, "clustering", &[event]);

        let record = match self.state.clusters.take() {
            None => {
                for (c, v) in reported.into_iter().enumerate() {
                    self.state.view.insert(c as ClientId, v);
                }
                let assignment = if self.cfg.single_cluster {
                    let ids: Vec<ClientId> = self.state.view.keys().copied().collect();
                    let pts: Vec<&[f64]> = self.state.view.values().map(|v| v.as_slice()).collect();
                    ClusterAssignment::single(&ids, &pts)?
                } else {
                    global_recluster(&self.state.view, &self.cfg.policy, metric, cluster_seed)?
                };
                let init = self.initial_model();
                let k = assignment.k();
                let models = (0..k)
                    .map(|i| ModelParams {
                        values: init.values.clone(),
                        version: ModelVersion { round, cluster: i as u32 },
                    })
                    .collect();
                self.state.clusters = Some(ClusterState::new(assignment, models));
                EventRecord {
                    config_hash: self.state.config_hash.clone(),
                    event_index: event,
                    round,
                    trace_round,
                    kind: "initial".into(),
                    drifted_count: self.cache.len(),
                    moved_count: 0,
                    recluster_triggered: false,
                    k_before: 0,
                    k_after: k,
                    theta: None,
                    max_center_shift: 0.0,
                }
            }
            Some(mut cs) => {
                let eps = self.cfg.policy.epsilon;
                let updates: Vec<(ClientId, Vec<f64>)> = reported
                    .into_iter()
                    .enumerate()
                    .filter(|(c, v)| match self.state.view.get(&(*c as ClientId)) {
                        Some(old) => metric.eval_unchecked(old, v) > eps,
                        None => true,
                    })
                    .map(|(c, v)| (c as ClientId, v))
                    .collect();
                let k_before = cs.k();
                let record = if self.cfg.single_cluster {
                    for (c, v) in &updates {
                        self.state.view.insert(*c, v.clone());
                    }
                    EventRecord {
                        config_hash: self.state.config_hash.clone(),
                        event_index: event,
                        round,
                        trace_round,
                        kind: "drift".into(),
                        drifted_count: updates.len(),
                        moved_count: 0,
                        recluster_triggered: false,
                        k_before,
                        k_after: k_before,
                        theta: None,
                        max_center_shift: 0.0,
                    }
                } else {
                    let outcome = handle_drift_event(
                        &updates,
                        &cs,
                        &mut self.state.view,
                        &self.cfg.policy,
                        &mut self.state.trigger,
                        metric,
                        &self.state.recently_selected,
                        cluster_seed,
                    )?;
                    let rec = EventRecord {
                        config_hash: self.state.config_hash.clone(),
                        event_index: event,
                        round,
                        trace_round,
                        kind: "drift".into(),
                        drifted_count: updates.len(),
                        moved_count: outcome.moved_clients.len(),
                        recluster_triggered: outcome.global_recluster_triggered,
                        k_before,
                        k_after: outcome.new_k(),
                        theta: outcome.theta.is_finite().then_some(outcome.theta),
                        max_center_shift: outcome.max_center_shift,
                    };
                    cs.apply(outcome);
                    rec
                };
                self.state.clusters = Some(cs);
                record
            }
        };
        self.state.recently_selected.clear();
        self.overhead.push(OverheadEntry {
            event_index: event,
            representation_seconds: rep_seconds,
            clustering_seconds: t1.elapsed().as_secs_f64(),
            global_recluster: record.recluster_triggered,
        });
        let out = (record.recluster_triggered, record.moved_count);
        if let Some(o) = self.out.as_mut() {
            serde_json::to_writer(&mut o.events, &record)?;
            o.events.write_all(b"\n")?;
            o.events.flush()?;
        }
        self.state.events.push(record);
        Ok(out)
    }

    fn profile(&self, c: ClientId) -> ClientProfile {
        let d = &self.state.clients[c as usize];
        let p = &self.devices.profiles[c as usize];
        ClientProfile {
            client_id: c,
            data_size: self.cache[c as usize].train.len(),
            last_loss: d.last_loss.unwrap_or((self.num_labels as f64).ln()),
            device_speed: p.speed,
            bandwidth_up: p.bw_up,
            bandwidth_down: p.bw_down,
            last_selected_round: d.last_selected_round,
            expected_round_time: self.devices.client_time(c, self.cfg.training.local_steps, self.cfg.training.batch_size),
        }
    }

    fn select(&self, k: usize, members: &[ClientId], budget: usize, round: u64) -> Vec<ClientId> {
        let mut rng = stream(self.cfg.seed, "selection", &[round, k as u64]);
        match &self.cfg.selector {
            Selector::Random => select_random(members, budget, self.cfg.training.sampling_with_replacement, &mut rng),
            Selector::Utility {
                explore_fraction,
                deadline,
            } => {
                let profiles: Vec<ClientProfile> = members.iter().map(|&c| self.profile(c)).collect();
                select_utility(&profiles, budget, *explore_fraction, *deadline, &mut rng)
            }
            Selector::Distance => {
                let cs = self.state.clusters.as_ref().expect("clusters exist while training");
                let reps: Vec<(ClientId, &[f64])> = members
                    .iter()
                    .filter_map(|c| self.state.view.get(c).map(|v| (*c, v.as_slice())))
                    .collect();
                select_distance(&reps, &cs.assignment.centers[k], self.cfg.representation.metric, budget)
            }
        }
    }

    /// Runs one round (with the drift event that opens it, if any).
    /// Returns `None` once the run is complete.
    pub fn step_round(&mut self) -> Result<Option<RoundRecord>> {
        if self.is_finished() {
            return Ok(None);
        }
        let r = self.state.round;
        let per_event = self.cfg.training.rounds_per_event as u64;
        let event = r / per_event;
        let trace_round = self.trace.start_round() + r;
        self.refresh_data(trace_round);
        let (triggered, moved) = if r % per_event == 0 {
            self.drift_event(event, r, trace_round)?
        } else {
            (false, 0)
        };

        let cs = self.state.clusters.as_ref().expect("clustered before training");
        // Clients without training data sit out.
        let members: Vec<Vec<ClientId>> = (0..cs.k())
            .map(|k| cs.assignment.members(k).into_iter().filter(|c| !self.cache[*c as usize].train.is_empty()).collect())
            .collect();
        let sizes: Vec<usize> = members.iter().map(Vec::len).collect();
        let budgets = cluster_budgets(&sizes, self.cfg.training.participants_per_round, self.cfg.training.sampling_with_replacement);
        let mut round_seconds: f64 = 0.0;
        let mut dropped = 0;
        let mut kept: Vec<Vec<ClientId>> = Vec::with_capacity(members.len());
        for (k, m) in members.iter().enumerate() {
            if m.is_empty() {
                kept.push(Vec::new());
                continue;
            }
            let selected = self.select(k, m, budgets[k], r);
            let times: Vec<(ClientId, f64)> = selected
                .iter()
                .map(|&c| (c, self.devices.client_time(c, self.cfg.training.local_steps, self.cfg.training.batch_size)))
                .collect();
            let timing = simulate_round_time(&times, self.devices.round_deadline);
            round_seconds = round_seconds.max(timing.seconds);
            dropped += timing.dropped.len();
            kept.push(timing.kept);
        }

        let mut cs = self.state.clusters.take().expect("clustered before training");
        // Only the latest round's participants count as recently selected.
        self.state.recently_selected.clear();
        for (k, participants) in kept.iter().enumerate() {
            let cache = &self.cache;
            let report = run_cluster_round(
                k,
                &mut cs,
                &self.cfg.training,
                &self.model,
                participants,
                |c| cache[c as usize].train.iter().collect(),
                r,
                self.cfg.seed,
            )?;
            for (c, loss) in report.losses {
                self.state.clients[c as usize].last_loss = Some(loss);
            }
            for &c in participants {
                self.state.clients[c as usize].last_selected_round = Some(r);
                self.state.recently_selected.insert(c);
            }
        }
        cs.sim_time += round_seconds;
        cs.round = r + 1;

        let record = self.evaluate(&cs, r, event, triggered, moved, dropped)?;
        self.state.clusters = Some(cs);
        self.state.round = r + 1;
        if let Some(o) = self.out.as_mut() {
            o.rounds.write_record(record.csv_row(&self.state.config_hash))?;
            o.rounds.flush()?;
        }
        self.state.records.push(record.clone());
        let every = self.cfg.output.checkpoint_every;
        if every > 0 && self.state.round % every == 0 {
            if let Some(o) = &self.out {
                let dir = o.dir.join(CHECKPOINT_DIR).join(format!("round_{:06}", self.state.round));
                write_checkpoint(&dir, &self.state)?;
            }
        }
        Ok(Some(record))
    }

    fn evaluate(&self, cs: &ClusterState, round: u64, event: u64, triggered: bool, moved: usize, dropped: usize) -> Result<RoundRecord> {
        let a = &cs.assignment;
        let accs: Vec<Option<f64>> = a
            .clients
            .par_iter()
            .zip(a.labels.par_iter())
            .map(|(&c, &k)| {
                let test = &self.cache[c as usize].test;
                if test.is_empty() {
                    Ok(None)
                } else {
                    self.model.evaluate(&cs.models[k].values, test).map(Some)
                }
            })
            .collect::<Result<_>>()?;
        let mut sums = vec![0.0; a.k()];
        let mut counts = vec![0usize; a.k()];
        for (acc, &k) in accs.iter().zip(&a.labels) {
            if let Some(v) = acc {
                sums[k] += v;
                counts[k] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        let mean = if total == 0 { 0.0 } else { sums.iter().sum::<f64>() / total as f64 };
        let per_cluster = sums
            .iter()
            .zip(&counts)
            .map(|(s, &n)| if n == 0 { 0.0 } else { s / n as f64 })
            .collect();
        let points: Vec<&[f64]> = a.clients.iter().map(|&c| self.state.truth[c as usize].as_slice()).collect();
        let het = mean_client_distance(a, &points, self.cfg.representation.metric);
        Ok(RoundRecord {
            round,
            event_index: event,
            sim_time_s: cs.sim_time,
            mean_accuracy: mean,
            per_cluster_accuracy: per_cluster,
            mean_client_distance: het.mean_client_distance,
            baseline_distance: het.global_mean,
            k: a.k(),
            recluster_triggered: triggered,
            moved_count: moved,
            dropped_stragglers: dropped,
        })
    }

    /// Runs to completion and writes the summary (last, so partial runs
    /// are recognizable) and the overhead timings.
    pub fn run(&mut self) -> Result<Summary> {
        while self.step_round()?.is_some() {}
        let summary = self.summary();
        if let Some(o) = &self.out {
            fs::write(o.dir.join(OVERHEAD_FILE), serde_json::to_string_pretty(&self.overhead)?)?;
            fs::write(o.dir.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)?)?;
        }
        Ok(summary)
    }

    /// Pointer-free access for the C ABI: whether this engine writes files.
    pub fn output_dir(&self) -> Option<&Path> {
        self.out.as_ref().map(|o| o.dir.as_path())
    }
}

/// Runs a config into its run directory.
pub fn run_experiment(cfg: ExperimentConfig) -> Result<(PathBuf, Summary)> {
    let dir = cfg.run_dir();
    let mut engine = Engine::with_output(cfg, &dir)?;
    let summary = engine.run()?;
    Ok((dir, summary))
}

/// Model file: little-endian u32 header length, JSON header, then the
/// parameters as little-endian f64.
pub fn write_model_file(path: &Path, model: &ModelParams) -> Result<()> {
    let header = serde_json::to_vec(&serde_json::json!({
        "dim": model.values.len(),
        "round": model.version.round,
        "cluster": model.version.cluster,
    }))?;
    let mut buf = Vec::with_capacity(4 + header.len() + 8 * model.values.len());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in &model.values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_model_file(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    let bad = || Error::Checkpoint(format!("malformed model file {}", path.display()));
    if bytes.len() < 4 {
        return Err(bad());
    }
    let hlen = u32::from_le_bytes(bytes[..4].try_into().expect("4 bytes")) as usize;
    let header: serde_json::Value = serde_json::from_slice(bytes.get(4..4 + hlen).ok_or_else(bad)?)?;
    let dim = header["dim"].as_u64().ok_or_else(bad)? as usize;
    let body = &bytes[4 + hlen..];
    if body.len() != 8 * dim {
        return Err(bad());
    }
    let values = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok(ModelParams {
        values,
        version: ModelVersion {
            round: header["round"].as_u64().ok_or_else(bad)?,
            cluster: header["cluster"].as_u64().ok_or_else(bad)? as u32,
        },
    })
}

/// Writes `state.json` (without model parameters) and one binary file per
/// cluster model.
pub fn write_checkpoint(dir: &Path, state: &RunState) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut light = state.clone();
    if let Some(cs) = light.clusters.as_mut() {
        for (k, m) in cs.models.iter().enumerate() {
            write_model_file(&dir.join(format!("model_{k:03}.bin")), m)?;
        }
        cs.models.iter_mut().for_each(|m| m.values.clear());
    }
    let tmp = dir.join("state.json.tmp");
    fs::write(&tmp, serde_json::to_vec(&light)?)?;
    fs::rename(tmp, dir.join("state.json"))?;
    Ok(())
}

pub fn read_checkpoint(dir: &Path) -> Result<RunState> {
    let mut state: RunState = serde_json::from_slice(&fs::read(dir.join("state.json"))?)?;
    if let Some(cs) = state.clusters.as_mut() {
        for k in 0..cs.models.len() {
            cs.models[k] = read_model_file(&dir.join(format!("model_{k:03}.bin")))?;
        }
        if cs.server.len() != cs.models.len() {
            cs.server.resize(cs.models.len(), ServerState::default());
        }
    }
    Ok(state)
}

/// Checkpoint directory with the highest round, if any.
pub fn latest_checkpoint(run_dir: &Path) -> Result<Option<PathBuf>> {
    let root = run_dir.join(CHECKPOINT_DIR);
    if !root.exists() {
        return Ok(None);
    }
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in fs::read_dir(root)? {
        let path = entry?.path();
        let round = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("round_"))
            .and_then(|n| n.parse::<u64>().ok());
        if let Some(r) = round {
            if path.join("state.json").exists() && best.as_ref().map_or(true, |(b, _)| r > *b) {
                best = Some((r, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

