//! Monte-Carlo and closed-form checks of the convergence analysis on
//! quadratic clients.
//!
//! Every client objective is `f_i(x) = 1/2 (x - a_i)' H (x - a_i) + b_i`
//! with one shared diagonal `H`, so the minimizer of any client average is
//! the mean of the `a_i`. A client's representation is its objective
//! restricted to the box `[-B, B]^d`, and the representation distance is
//! `sup_box |f_i - f_j| / theta_lip`, which makes the Lipschitz-ratio
//! assumption hold with equality.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

/// One-sided slack on Monte-Carlo bound checks.
pub const MC_TOLERANCE: f64 = 0.05;
pub const GRAD_DIFF_TOLERANCE: f64 = 1e-12;
pub const RECLUSTER_TOLERANCE: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryParams {
    pub l_smooth: f64,
    pub mu_pl: f64,
    pub sigma_sq: f64,
    pub theta_lip: f64,
    /// Intra-cluster representation diameter.
    pub cluster_diameter: f64,
    /// Per-event representation drift bound.
    pub drift_bound: f64,
}

impl TheoryParams {
    pub fn validate(&self) -> Result<()> {
        let vals = [self.l_smooth, self.mu_pl, self.sigma_sq, self.theta_lip, self.cluster_diameter, self.drift_bound];
        if vals.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::TheorySetup("parameters must be finite and non-negative".into()));
        }
        if !(self.mu_pl > 0.0 && self.l_smooth >= self.mu_pl) {
            return Err(Error::TheorySetup("need l_smooth >= mu_pl > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticClient {
    pub a: Vec<f64>,
    pub b: f64,
}

/// Shared diagonal Hessian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadraticFamily {
    pub h: Vec<f64>,
}

impl QuadraticFamily {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() || h.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(Error::TheorySetup("Hessian diagonal must be positive and finite".into()));
        }
        Ok(Self { h })
    }

    /// Eigenvalues evenly spaced from `mu` to `l`.
    pub fn linspace(dim: usize, mu: f64, l: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::TheorySetup("dimension must be >= 1".into()));
        }
        let h = if dim == 1 {
            vec![l]
        } else {
            (0..dim).map(|k| mu + (l - mu) * k as f64 / (dim - 1) as f64).collect()
        };
        Self::new(h)
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn l_smooth(&self) -> f64 {
        self.h.iter().cloned().fold(f64::MIN, f64::max)
    }

    pub fn mu_pl(&self) -> f64 {
        self.h.iter().cloned().fold(f64::MAX, f64::min)
    }

    pub fn value(&self, c: &QuadraticClient, x: &[f64]) -> f64 {
        0.5 * self.h.iter().zip(x).zip(&c.a).map(|((h, x), a)| h * (x - a) * (x - a)).sum::<f64>() + c.b
    }

    pub fn grad(&self, c: &QuadraticClient, x: &[f64]) -> Vec<f64> {
        self.h.iter().zip(x).zip(&c.a).map(|((h, x), a)| h * (x - a)).collect()
    }

    /// `sup` over the box of radius `radius` of `|f_i - f_j|`. The
    /// difference is affine, `g'x + c`, so the supremum is `|c| + B |g|_1`.
    pub fn sup_diff(&self, ci: &QuadraticClient, cj: &QuadraticClient, radius: f64) -> f64 {
        let mut c = ci.b - cj.b;
        let mut g1 = 0.0;
        for k in 0..self.dim() {
            let (ai, aj, h) = (ci.a[k], cj.a[k], self.h[k]);
            c += 0.5 * h * (ai * ai - aj * aj);
            g1 += (h * (aj - ai)).abs();
        }
        c.abs() + radius * g1
    }

    fn check_client(&self, c: &QuadraticClient) -> Result<()> {
        if c.a.len() != self.dim() || c.a.iter().any(|v| !v.is_finite()) || !c.b.is_finite() {
            return Err(Error::TheorySetup("client does not match the Hessian dimension".into()));
        }
        Ok(())
    }
}

/// Mean of the `a_i`: the exact minimizer of any average of clients.
pub fn cluster_minimizer(clients: &[&QuadraticClient]) -> Vec<f64> {
    let d = clients[0].a.len();
    let mut m = vec![0.0; d];
    for c in clients {
        for (mk, ak) in m.iter_mut().zip(&c.a) {
            *mk += ak;
        }
    }
    m.iter_mut().for_each(|v| *v /= clients.len() as f64);
    m
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub index: i64,
    pub empirical: f64,
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Bound at the decisive point (the tightest one for curves).
    pub bound: f64,
    pub empirical: f64,
    pub trials: usize,
    pub tolerance: f64,
    pub curve: Vec<CurvePoint>,
    pub params: Option<TheoryParams>,
}

fn gaussian_noise<R: Rng + ?Sized>(dim: usize, sigma_sq: f64, rng: &mut R) -> Vec<f64> {
    if sigma_sq <= 0.0 {
        return vec![0.0; dim];
    }
    // Total variance sigma_sq spread evenly over coordinates.
    let normal = Normal::new(0.0, (sigma_sq / dim as f64).sqrt()).expect("valid std");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

/// SGD with additive Gaussian gradient noise on one client; compares the
/// mean final gap with `(1 - eta mu)^T gap_0 + L eta sigma^2 / (2 mu)`.
#[allow(clippy::too_many_arguments)]
pub fn check_sgd_bound(
    family: &QuadraticFamily,
    client: &QuadraticClient,
    x0: &[f64],
    eta: f64,
    steps: usize,
    sigma_sq: f64,
    trials: usize,
    seed: u64,
) -> Result<CheckResult> {
    family.check_client(client)?;
    if x0.len() != family.dim() || trials == 0 || !(sigma_sq >= 0.0) {
        return Err(Error::TheorySetup("bad SGD check inputs".into()));
    }
    let (l, mu) = (family.l_smooth(), family.mu_pl());
    if !(eta > 0.0 && eta <= 1.0 / l) {
        return Err(Error::Precondition(format!("eta {eta} must be in (0, 1/L = {}]", 1.0 / l)));
    }
    let gap0 = family.value(client, x0) - client.b;
    let bound = (1.0 - eta * mu).powi(steps as i32) * gap0 + l * eta * sigma_sq / (2.0 * mu);
    let gaps: Vec<f64> = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream(seed, "theory-sgd", &[t as u64]);
            let mut x = x0.to_vec();
            for _ in 0..steps {
                let g = family.grad(client, &x);
                let noise = gaussian_noise(x.len(), sigma_sq, &mut rng);
                for k in 0..x.len() {
                    x[k] -= eta * (g[k] + noise[k]);
                }
            }
            family.value(client, &x) - client.b
        })
        .collect();
    let empirical = gaps.iter().sum::<f64>() / trials as f64;
    Ok(CheckResult {
        name: "sgd_bound".into(),
        passed: empirical <= bound * (1.0 + MC_TOLERANCE),
        bound,
        empirical,
        trials,
        tolerance: MC_TOLERANCE,
        curve: Vec::new(),
        params: Some(TheoryParams {
            l_smooth: l,
            mu_pl: mu,
            sigma_sq,
            theta_lip: 0.0,
            cluster_diameter: 0.0,
            drift_bound: 0.0,
        }),
    })
}

fn box_points(dim: usize, radius: f64, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream(seed, "theory-grid", &[]);
    (0..count).map(|_| (0..dim).map(|_| rng.gen_range(-radius..=radius)).collect()).collect()
}

/// Max over sample points of `|grad f_i - grad f_j|` against
/// `sqrt(8 L theta Delta)` for two clients whose objectives differ by at
/// most `theta Delta` on the box.
pub fn check_grad_diff_bound(
    family: &QuadraticFamily,
    ci: &QuadraticClient,
    cj: &QuadraticClient,
    params: &TheoryParams,
    radius: f64,
    grid_points: usize,
    seed: u64,
) -> Result<CheckResult> {
    params.validate()?;
    family.check_client(ci)?;
    family.check_client(cj)?;
    let budget = params.theta_lip * params.cluster_diameter;
    if family.sup_diff(ci, cj, radius) > budget * (1.0 + 1e-12) + 1e-15 {
        return Err(Error::TheorySetup(format!(
            "pair differs by {} on the box, more than theta * Delta = {budget}",
            family.sup_diff(ci, cj, radius)
        )));
    }
    let points = box_points(family.dim(), radius, grid_points.max(1), seed);
    let mut worst: f64 = 0.0;
    for x in &points {
        let premise = (family.value(ci, x) - family.value(cj, x)).abs();
        if premise > budget * (1.0 + 1e-12) + 1e-15 {
            return Err(Error::TheorySetup("premise fails at a sample point".into()));
        }
        let gi = family.grad(ci, x);
        let gj = family.grad(cj, x);
        let norm = gi.iter().zip(&gj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        worst = worst.max(norm);
    }
    let bound = (8.0 * params.l_smooth * budget).sqrt();
    Ok(CheckResult {
        name: "grad_diff_bound".into(),
        passed: worst <= bound + GRAD_DIFF_TOLERANCE,
        bound,
        empirical: worst,
        trials: points.len(),
        tolerance: GRAD_DIFF_TOLERANCE,
        curve: Vec::new(),
        params: Some(params.clone()),
    })
}

/// Largest intra-cluster representation distance.
pub fn measure_diameter(family: &QuadraticFamily, clients: &[QuadraticClient], labels: &[usize], radius: f64, theta: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..clients.len() {
        for j in i + 1..clients.len() {
            if labels[i] == labels[j] {
                worst = worst.max(family.sup_diff(&clients[i], &clients[j], radius) / theta);
            }
        }
    }
    worst
}

/// Largest per-client representation change between two snapshots.
pub fn measure_drift(family: &QuadraticFamily, before: &[QuadraticClient], after: &[QuadraticClient], radius: f64, theta: f64) -> f64 {
    before
        .iter()
        .zip(after)
        .map(|(b, a)| family.sup_diff(b, a, radius) / theta)
        .fold(0.0, f64::max)
}

/// Farthest-first k-center on representation distance. Starts from client
/// 0; ties go to the lower index.
pub fn k_center(family: &QuadraticFamily, clients: &[QuadraticClient], k: usize, radius: f64) -> Vec<usize> {
    let n = clients.len();
    let k = k.clamp(1, n.max(1));
    let mut centers = vec![0usize];
    let mut nearest: Vec<f64> = (0..n).map(|i| family.sup_diff(&clients[i], &clients[0], radius)).collect();
    while centers.len() < k {
        let mut best = 0;
        for i in 1..n {
            if nearest[i] > nearest[best] {
                best = i;
            }
        }
        centers.push(best);
        for i in 0..n {
            nearest[i] = nearest[i].min(family.sup_diff(&clients[i], &clients[best], radius));
        }
    }
    (0..n)
        .map(|i| {
            let mut best = 0;
            let mut bd = f64::INFINITY;
            for (ci, &c) in centers.iter().enumerate() {
                let d = family.sup_diff(&clients[i], &clients[c], radius);
                if d < bd {
                    bd = d;
                    best = ci;
                }
            }
            best
        })
        .collect()
}

fn groups(labels: &[usize]) -> Vec<Vec<usize>> {
    let k = labels.iter().max().map_or(0, |m| m + 1);
    let mut g = vec![Vec::new(); k];
    for (i, &l) in labels.iter().enumerate() {
        g[l].push(i);
    }
    g
}

/// Clustered suboptimality `1/N sum_k sum_{i in C_k} f_i(c_k) - f_i(c_k*)`.
pub fn clustered_gap(family: &QuadraticFamily, clients: &[QuadraticClient], labels: &[usize], models: &[Vec<f64>]) -> f64 {
    let mut total = 0.0;
    for (k, members) in groups(labels).iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        let refs: Vec<&QuadraticClient> = members.iter().map(|&i| &clients[i]).collect();
        let opt = cluster_minimizer(&refs);
        for c in refs {
            total += family.value(c, &models[k]) - family.value(c, &opt);
        }
    }
    total / clients.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReclusterInstance {
    pub before: Vec<QuadraticClient>,
    pub after: Vec<QuadraticClient>,
    pub labels_before: Vec<usize>,
    pub labels_after: Vec<usize>,
    /// Cluster models at the end of the previous event.
    pub models_before: Vec<Vec<f64>>,
}

/// Both sides of the re-clustering lemma. New cluster models are the
/// average of members' previous models.
pub fn check_recluster_bound(family: &QuadraticFamily, inst: &ReclusterInstance, params: &TheoryParams, radius: f64) -> Result<CheckResult> {
    params.validate()?;
    let n = inst.before.len();
    if n == 0 || inst.after.len() != n || inst.labels_before.len() != n || inst.labels_after.len() != n {
        return Err(Error::TheorySetup("recluster instance sizes disagree".into()));
    }
    for c in inst.before.iter().chain(&inst.after) {
        family.check_client(c)?;
    }
    let kb = groups(&inst.labels_before).len();
    if inst.models_before.len() < kb || inst.models_before.iter().any(|m| m.len() != family.dim()) {
        return Err(Error::TheorySetup("one model per previous cluster is required".into()));
    }
    let theta = params.theta_lip;
    if theta <= 0.0 {
        return Err(Error::TheorySetup("theta_lip must be > 0".into()));
    }
    let diam = measure_diameter(family, &inst.before, &inst.labels_before, radius, theta)
        .max(measure_diameter(family, &inst.after, &inst.labels_after, radius, theta));
    let drift = measure_drift(family, &inst.before, &inst.after, radius, theta);
    let slack = 1e-12;
    if diam > params.cluster_diameter * (1.0 + slack) + slack || drift > params.drift_bound * (1.0 + slack) + slack {
        return Err(Error::TheorySetup(format!(
            "instance has diameter {diam} and drift {drift}, beyond the stated {} and {}",
            params.cluster_diameter, params.drift_bound
        )));
    }
    let new_groups = groups(&inst.labels_after);
    let new_models: Vec<Vec<f64>> = new_groups
        .iter()
        .map(|members| {
            let mut m = vec![0.0; family.dim()];
            for &j in members {
                for (mk, v) in m.iter_mut().zip(&inst.models_before[inst.labels_before[j]]) {
                    *mk += v;
                }
            }
            let len = members.len().max(1) as f64;
            m.iter_mut().for_each(|v| *v /= len);
            m
        })
        .collect();
    let lhs = clustered_gap(family, &inst.after, &inst.labels_after, &new_models);
    let rhs = clustered_gap(family, &inst.before, &inst.labels_before, &inst.models_before) + 3.0 * theta * (params.cluster_diameter + params.drift_bound);
    Ok(CheckResult {
        name: "recluster_bound".into(),
        passed: lhs <= rhs + RECLUSTER_TOLERANCE,
        bound: rhs,
        empirical: lhs,
        trials: 1,
        tolerance: RECLUSTER_TOLERANCE,
        curve: Vec::new(),
        params: Some(params.clone()),
    })
}

/// Evenly spread concept centers of norm `spread`.
fn concept_centers(dim: usize, k: usize, spread: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|j| {
            let mut c = vec![0.0; dim];
            if dim == 1 {
                c[0] = if k == 1 { 0.0 } else { -spread + 2.0 * spread * j as f64 / (k - 1) as f64 };
            } else {
                let angle = 2.0 * std::f64::consts::PI * j as f64 / k as f64;
                c[0] = spread * angle.cos();
                c[1] = spread * angle.sin();
            }
            c
        })
        .collect()
}

fn project_ball(v: &mut [f64], r: f64) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > r && n > 0.0 {
        v.iter_mut().for_each(|x| *x *= r / n);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TheoryConfig {
    pub seed: u64,
    pub dim: usize,
    pub l_smooth: f64,
    pub mu_pl: f64,
    pub sigma_sq: f64,
    pub theta_lip: f64,
    /// Half-width of the box the representations are defined on.
    pub domain_radius: f64,
    /// Norm of the concept centers.
    pub concept_spread: f64,
    /// Radius of a client's minimizer around its concept center.
    pub offset_radius: f64,
    /// Per-coordinate bound on a minimizer's move at each event.
    pub drift_step: f64,
    pub sgd_eta: f64,
    pub sgd_steps: usize,
    pub sgd_trials: usize,
    pub grid_points: usize,
    pub num_clients: usize,
    pub num_clusters: usize,
    pub participants: usize,
    pub eta: f64,
    pub rounds_per_event: usize,
    pub events: usize,
    pub trajectory_trials: usize,
}

impl Default for TheoryConfig {
    fn default() -> Self {
        Self {
            seed: 4,
            dim: 2,
            l_smooth: 4.0,
            mu_pl: 1.0,
            sigma_sq: 0.1,
            theta_lip: 1.0,
            domain_radius: 4.0,
            concept_spread: 2.0,
            offset_radius: 0.2,
            drift_step: 0.05,
            sgd_eta: 0.25,
            sgd_steps: 200,
            sgd_trials: 2000,
            grid_points: 1000,
            num_clients: 30,
            num_clusters: 3,
            participants: 9,
            eta: 0.05,
            rounds_per_event: 10,
            events: 10,
            trajectory_trials: 500,
        }
    }
}

impl TheoryConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errors = Vec::new();
        if self.dim == 0 {
            errors.push("dim must be >= 1".to_string());
        }
        if !(self.mu_pl > 0.0 && self.l_smooth >= self.mu_pl && self.l_smooth.is_finite()) {
            errors.push("need l_smooth >= mu_pl > 0".into());
        }
        if !(self.sigma_sq >= 0.0) {
            errors.push("sigma_sq must be >= 0".into());
        }
        if !(self.theta_lip > 0.0) {
            errors.push("theta_lip must be > 0".into());
        }
        if !(self.domain_radius > 0.0) {
            errors.push("domain_radius must be > 0".into());
        }
        if !(self.offset_radius >= 0.0 && self.drift_step >= 0.0 && self.concept_spread >= 0.0) {
            errors.push("concept_spread, offset_radius and drift_step must be >= 0".into());
        }
        if self.sgd_trials == 0 || self.trajectory_trials == 0 {
            errors.push("trial counts must be >= 1".into());
        }
        if self.num_clusters == 0 || self.num_clusters > self.num_clients {
            errors.push("num_clusters must be in [1, num_clients]".into());
        }
        if self.participants < self.num_clusters {
            errors.push("participants must be >= num_clusters".into());
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn family(&self) -> Result<QuadraticFamily> {
        QuadraticFamily::linspace(self.dim, self.mu_pl, self.l_smooth)
    }
}

/// Client objectives for every event of a scripted drift: minimizers start
/// near evenly spread concept centers and take bounded random steps.
pub fn scripted_population(cfg: &TheoryConfig, snapshots: usize, seed: u64) -> Vec<Vec<QuadraticClient>> {
    let centers = concept_centers(cfg.dim, cfg.num_clusters, cfg.concept_spread);
    let mut rng = stream(seed, "theory-population", &[]);
    let mut offsets: Vec<Vec<f64>> = (0..cfg.num_clients)
        .map(|_| {
            let mut o: Vec<f64> = (0..cfg.dim).map(|_| rng.gen_range(-1.0..=1.0) * cfg.offset_radius).collect();
            project_ball(&mut o, cfg.offset_radius);
            o
        })
        .collect();
    let bs: Vec<f64> = (0..cfg.num_clients).map(|_| rng.gen_range(0.0..0.1)).collect();
    let mut out = Vec::with_capacity(snapshots);
    for s in 0..snapshots.max(1) {
        if s > 0 {
            for o in offsets.iter_mut() {
                for v in o.iter_mut() {
                    *v += rng.gen_range(-1.0..=1.0) * cfg.drift_step;
                }
                project_ball(o, cfg.offset_radius);
            }
        }
        out.push(
            (0..cfg.num_clients)
                .map(|i| QuadraticClient {
                    a: centers[i % cfg.num_clusters].iter().zip(&offsets[i]).map(|(c, o)| c + o).collect(),
                    b: bs[i],
                })
                .collect(),
        );
    }
    out
}

/// A two-snapshot instance with partially trained cluster models.
pub fn scripted_recluster_instance(cfg: &TheoryConfig, seed: u64) -> Result<(ReclusterInstance, TheoryParams)> {
    let family = cfg.family()?;
    let snaps = scripted_population(cfg, 2, seed);
    let labels_before = k_center(&family, &snaps[0], cfg.num_clusters, cfg.domain_radius);
    let labels_after = k_center(&family, &snaps[1], cfg.num_clusters, cfg.domain_radius);
    let mut rng = stream(seed, "theory-models", &[]);
    let models_before = groups(&labels_before)
        .iter()
        .map(|members| {
            let refs: Vec<&QuadraticClient> = members.iter().map(|&i| &snaps[0][i]).collect();
            cluster_minimizer(&refs).into_iter().map(|v| v + rng.gen_range(-0.5..=0.5)).collect()
        })
        .collect();
    let theta = cfg.theta_lip;
    let params = TheoryParams {
        l_smooth: family.l_smooth(),
        mu_pl: family.mu_pl(),
        sigma_sq: cfg.sigma_sq,
        theta_lip: theta,
        cluster_diameter: measure_diameter(&family, &snaps[0], &labels_before, cfg.domain_radius, theta)
            .max(measure_diameter(&family, &snaps[1], &labels_after, cfg.domain_radius, theta)),
        drift_bound: measure_drift(&family, &snaps[0], &snaps[1], cfg.domain_radius, theta),
    };
    let mut it = snaps.into_iter();
    Ok((
        ReclusterInstance {
            before: it.next().expect("two snapshots"),
            after: it.next().expect("two snapshots"),
            labels_before,
            labels_after,
            models_before,
        },
        params,
    ))
}

/// Checked bound at event `t` (0-based, after its R rounds):
/// `q^{(t+1)R} G0 + 3 theta (Delta + delta) sum_{s=1..t} q^{(t+1-s)R}
///  + (L eta / 2 mu) (sigma^2 + 8 L theta Delta) / (M/K)`, with
/// `q = 1 - eta mu` and `G0` the clustered gap before training.
pub fn theorem_bound(params: &TheoryParams, eta: f64, rounds: usize, event: usize, gap0: f64, m_over_k: f64) -> f64 {
    let q = 1.0 - eta * params.mu_pl;
    let qr = q.powi(rounds as i32);
    let mut drift_term = 0.0;
    for s in 1..=event {
        drift_term += qr.powi((event + 1 - s) as i32);
    }
    let noise = params.l_smooth * eta / (2.0 * params.mu_pl)
        * (params.sigma_sq + 8.0 * params.l_smooth * params.theta_lip * params.cluster_diameter)
        / m_over_k;
    qr.powi(event as i32 + 1) * gap0 + 3.0 * params.theta_lip * (params.cluster_diameter + params.drift_bound) * drift_term + noise
}

/// Per-cluster participant counts: `floor(M/K)` each, leftovers to the
/// largest clusters.
fn participant_budgets(sizes: &[usize], m: usize) -> Vec<usize> {
    let k = sizes.len();
    let mut budgets = vec![(m / k).max(1); k];
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(a.cmp(&b)));
    for &c in order.iter().take(m.saturating_sub((m / k) * k)) {
        budgets[c] += 1;
    }
    budgets
}

/// Full clustered run on quadratic clients: drift, k-center re-clustering,
/// model averaging, then R rounds of one-step SGD per cluster with
/// with-replacement sampling. Reports the clustered gap per event against
/// the accumulated bound.
pub fn check_theorem_trajectory(cfg: &TheoryConfig) -> Result<CheckResult> {
    cfg.validate()?;
    let family = cfg.family()?;
    let (l, mu) = (family.l_smooth(), family.mu_pl());
    if !(cfg.eta > 0.0 && cfg.eta <= 1.0 / l) {
        return Err(Error::Precondition(format!("eta {} must be in (0, 1/L = {}]", cfg.eta, 1.0 / l)));
    }
    let snaps = scripted_population(cfg, cfg.events.max(1), cfg.seed);
    let labels: Vec<Vec<usize>> = snaps.iter().map(|s| k_center(&family, s, cfg.num_clusters, cfg.domain_radius)).collect();
    let theta = cfg.theta_lip;
    let mut diameter: f64 = 0.0;
    let mut drift: f64 = 0.0;
    for (t, s) in snaps.iter().enumerate() {
        diameter = diameter.max(measure_diameter(&family, s, &labels[t], cfg.domain_radius, theta));
        if t > 0 {
            drift = drift.max(measure_drift(&family, &snaps[t - 1], s, cfg.domain_radius, theta));
        }
    }
    verify_representation_ratio(&family, &snaps[0], cfg.domain_radius, theta, cfg.seed)?;
    let params = TheoryParams {
        l_smooth: l,
        mu_pl: mu,
        sigma_sq: cfg.sigma_sq,
        theta_lip: theta,
        cluster_diameter: diameter,
        drift_bound: drift,
    };
    let x0 = vec![0.0; cfg.dim];
    let k0 = groups(&labels[0]).len();
    let gap0 = clustered_gap(&family, &snaps[0], &labels[0], &vec![x0.clone(); k0]);
    let m_over_k = cfg.participants as f64 / cfg.num_clusters as f64;

    let per_trial: Vec<Vec<f64>> = (0..cfg.trajectory_trials)
        .into_par_iter()
        .map(|trial| {
            let mut rng = stream(cfg.seed, "theory-trajectory", &[trial as u64]);
            let mut models: Vec<Vec<f64>> = vec![x0.clone(); k0];
            let mut curve = Vec::with_capacity(cfg.events);
            for t in 0..cfg.events {
                if t > 0 {
                    // Each new cluster starts from the mean of its members'
                    // previous cluster models.
                    let new_groups = groups(&labels[t]);
                    models = new_groups
                        .iter()
                        .map(|members| {
                            let mut m = vec![0.0; cfg.dim];
                            for &j in members {
                                for (mk, v) in m.iter_mut().zip(&models[labels[t - 1][j]]) {
                                    *mk += v;
                                }
                            }
                            m.iter_mut().for_each(|v| *v /= members.len() as f64);
                            m
                        })
                        .collect();
                }
                let gs = groups(&labels[t]);
                let sizes: Vec<usize> = gs.iter().map(Vec::len).collect();
                let budgets = participant_budgets(&sizes, cfg.participants);
                for _ in 0..cfg.rounds_per_event {
                    for (k, members) in gs.iter().enumerate() {
                        let x = &mut models[k];
                        let mut g = vec![0.0; cfg.dim];
                        for _ in 0..budgets[k] {
                            let c = &snaps[t][members[rng.gen_range(0..members.len())]];
                            let noise = gaussian_noise(cfg.dim, cfg.sigma_sq, &mut rng);
                            for (d, gd) in g.iter_mut().enumerate() {
                                *gd += family.h[d] * (x[d] - c.a[d]) + noise[d];
                            }
                        }
                        for (xd, gd) in x.iter_mut().zip(&g) {
                            *xd -= cfg.eta * gd / budgets[k] as f64;
                        }
                    }
                }
                curve.push(clustered_gap(&family, &snaps[t], &labels[t], &models));
            }
            curve
        })
        .collect();

    let mut curve = vec![CurvePoint {
        index: -1,
        empirical: gap0,
        bound: gap0,
    }];
    let mut passed = true;
    let mut worst_ratio = f64::NEG_INFINITY;
    let mut decisive = (gap0, gap0);
    for t in 0..cfg.events {
        let mean = per_trial.iter().map(|c| c[t]).sum::<f64>() / cfg.trajectory_trials as f64;
        let bound = theorem_bound(&params, cfg.eta, cfg.rounds_per_event, t, gap0, m_over_k);
        passed &= mean <= bound * (1.0 + MC_TOLERANCE);
        let ratio = if bound > 0.0 { mean / bound } else { f64::INFINITY };
        if ratio > worst_ratio {
            worst_ratio = ratio;
            decisive = (mean, bound);
        }
        curve.push(CurvePoint {
            index: t as i64,
            empirical: mean,
            bound,
        });
    }
    Ok(CheckResult {
        name: "theorem_trajectory".into(),
        passed,
        bound: decisive.1,
        empirical: decisive.0,
        trials: cfg.trajectory_trials,
        tolerance: MC_TOLERANCE,
        curve,
        params: Some(params),
    })
}

/// Sampled check that `|f_i - f_j| <= theta * rho(i, j)` on the box.
pub fn verify_representation_ratio(family: &QuadraticFamily, clients: &[QuadraticClient], radius: f64, theta: f64, seed: u64) -> Result<()> {
    let points = box_points(family.dim(), radius, 64, seed);
    for i in 0..clients.len() {
        for j in i + 1..clients.len().min(i + 8) {
            let bound = family.sup_diff(&clients[i], &clients[j], radius);
            for x in &points {
                let diff = (family.value(&clients[i], x) - family.value(&clients[j], x)).abs();
                if diff > bound * (1.0 + 1e-12) + 1e-12 {
                    return Err(Error::TheorySetup(format!(
                        "representation ratio fails for clients {i} and {j} (theta = {theta})"
                    )));
                }
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
    pub elapsed_seconds: f64,
}

/// Runs all four checks on the instance described by `cfg`.
pub fn verify_theory(cfg: &TheoryConfig) -> Result<TheoryReport> {
    cfg.validate()?;
    let start = Instant::now();
    let family = cfg.family()?;

    let client = QuadraticClient {
        a: vec![0.0; cfg.dim],
        b: 0.0,
    };
    let x0 = vec![1.0; cfg.dim];
    let sgd = check_sgd_bound(&family, &client, &x0, cfg.sgd_eta, cfg.sgd_steps, cfg.sigma_sq, cfg.sgd_trials, cfg.seed)?;

    let (inst, params) = scripted_recluster_instance(cfg, cfg.seed)?;
    // Two distinct members of one cluster for the gradient check.
    let pair = (0..inst.before.len())
        .flat_map(|i| (i + 1..inst.before.len()).map(move |j| (i, j)))
        .find(|&(i, j)| inst.labels_before[i] == inst.labels_before[j])
        .ok_or_else(|| Error::TheorySetup("no cluster has two members".into()))?;
    let grad = check_grad_diff_bound(
        &family,
        &inst.before[pair.0],
        &inst.before[pair.1],
        &params,
        cfg.domain_radius,
        cfg.grid_points,
        cfg.seed,
    )?;
    let recluster = check_recluster_bound(&family, &inst, &params, cfg.domain_radius)?;
    let trajectory = check_theorem_trajectory(cfg)?;

    let checks = vec![sgd, grad, recluster, trajectory];
    Ok(TheoryReport {
        passed: checks.iter().all(|c| c.passed),
        checks,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
