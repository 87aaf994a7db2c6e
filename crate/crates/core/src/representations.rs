//! Client representations and the distances between them.
//!
//! A representation is the compact per-client feature the coordinator
//! clusters on: a label histogram, a mean embedding from a frozen random
//! extractor, or a gradient sketch against a shared model snapshot.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ModelParams, Sample, TaskModel};
use crate::rng::stream;

pub type ClientId = u32;

/// Gradients up to this many parameters are reported in full.
pub const FULL_GRADIENT_MAX_DIM: usize = 4096;
/// Target dimension of the random projection used above that size.
pub const DEFAULT_SKETCH_DIM: usize = 512;

const PROB_SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelHistogram {
    pub probs: Vec<f64>,
    pub count: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_model_id: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSketch {
    pub values: Vec<f64>,
    pub model_round: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RepresentationKind {
    LabelHistogram,
    Embedding,
    Gradient,
}

impl RepresentationKind {
    pub fn name(self) -> &'static str {
        match self {
            RepresentationKind::LabelHistogram => "label_histogram",
            RepresentationKind::Embedding => "embedding",
            RepresentationKind::Gradient => "gradient",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RepresentationData {
    LabelHistogram(LabelHistogram),
    Embedding(EmbeddingVector),
    Gradient(GradientSketch),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Representation {
    pub client_id: ClientId,
    pub round_collected: u64,
    pub data: RepresentationData,
}

impl Representation {
    pub fn new(client_id: ClientId, round_collected: u64, data: RepresentationData) -> Self {
        Self {
            client_id,
            round_collected,
            data,
        }
    }

    pub fn kind(&self) -> RepresentationKind {
        match self.data {
            RepresentationData::LabelHistogram(_) => RepresentationKind::LabelHistogram,
            RepresentationData::Embedding(_) => RepresentationKind::Embedding,
            RepresentationData::Gradient(_) => RepresentationKind::Gradient,
        }
    }

    pub fn vector(&self) -> &[f64] {
        match &self.data {
            RepresentationData::LabelHistogram(h) => &h.probs,
            RepresentationData::Embedding(e) => &e.values,
            RepresentationData::Gradient(g) => &g.values,
        }
    }

    /// Histograms with no samples cannot take part in JS comparisons.
    fn is_empty_histogram(&self) -> bool {
        matches!(&self.data, RepresentationData::LabelHistogram(h) if h.count == 0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    L1,
    JensenShannon,
    SquaredEuclidean,
}

impl Metric {
    pub fn name(self) -> &'static str {
        match self {
            Metric::L1 => "l1",
            Metric::JensenShannon => "jensen_shannon",
            Metric::SquaredEuclidean => "squared_euclidean",
        }
    }

    /// Checked distance between two raw vectors.
    pub fn eval(self, a: &[f64], b: &[f64]) -> Result<f64> {
        if a.len() != b.len() {
            return Err(Error::DimensionMismatch {
                expected: a.len(),
                got: b.len(),
            });
        }
        if self == Metric::JensenShannon {
            check_probability_vector(a)?;
            check_probability_vector(b)?;
        }
        Ok(self.eval_unchecked(a, b))
    }

    /// Distance without validation; callers guarantee equal lengths (and
    /// probability vectors for JS).
    #[inline]
    pub fn eval_unchecked(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Metric::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Metric::SquaredEuclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| {
                    let d = x - y;
                    d * d
                })
                .sum(),
            Metric::JensenShannon => {
                let mut div = 0.0;
                for (&p, &q) in a.iter().zip(b) {
                    let m = 0.5 * (p + q);
                    div += 0.5 * (kl_term(p, m) + kl_term(q, m));
                }
                div.max(0.0).sqrt()
            }
        }
    }
}

// p * log2(p / m) with 0 * log 0 = 0.
#[inline]
fn kl_term(p: f64, m: f64) -> f64 {
    if p <= 0.0 {
        0.0
    } else {
        p * (p / m).log2()
    }
}

fn check_probability_vector(v: &[f64]) -> Result<()> {
    if v.iter().any(|x| !(x.is_finite() && *x >= -1e-12)) {
        return Err(Error::InvalidInput(
            "Jensen-Shannon distance needs non-negative finite entries".into(),
        ));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
        return Err(Error::InvalidInput(format!(
            "Jensen-Shannon distance needs probability vectors (sum = {sum})"
        )));
    }
    Ok(())
}

/// Distance between two representations of the same kind and dimension.
pub fn distance(a: &Representation, b: &Representation, metric: Metric) -> Result<f64> {
    if a.kind() != b.kind() {
        return Err(Error::KindMismatch(a.kind().name(), b.kind().name()));
    }
    if metric == Metric::JensenShannon {
        if a.kind() != RepresentationKind::LabelHistogram {
            return Err(Error::InvalidInput(
                "Jensen-Shannon distance applies to label histograms only".into(),
            ));
        }
        if a.is_empty_histogram() || b.is_empty_histogram() {
            return Err(Error::InvalidInput(
                "Jensen-Shannon distance on an empty histogram".into(),
            ));
        }
    }
    metric.eval(a.vector(), b.vector())
}

pub fn compute_label_histogram<'a>(
    samples: impl IntoIterator<Item = &'a Sample>,
    num_labels: usize,
) -> Result<LabelHistogram> {
    if num_labels == 0 {
        return Err(Error::InvalidInput("num_labels must be at least 1".into()));
    }
    let mut counts = vec![0u64; num_labels];
    for s in samples {
        let l = s.label as usize;
        if l >= num_labels {
            return Err(Error::InvalidInput(format!(
                "label {l} out of range for {num_labels} labels"
            )));
        }
        counts[l] += 1;
    }
    Ok(histogram_from_counts(&counts))
}

pub(crate) fn histogram_from_counts(counts: &[u64]) -> LabelHistogram {
    let total: u64 = counts.iter().sum();
    let probs = if total == 0 {
        vec![0.0; counts.len()]
    } else {
        counts.iter().map(|&c| c as f64 / total as f64).collect()
    };
    LabelHistogram {
        probs,
        count: total,
    }
}

/// Frozen random two-layer feature extractor: `tanh(W2 tanh(W1 x + b1))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrozenExtractor {
    pub id: u64,
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
}

impl FrozenExtractor {
    pub fn new(input_dim: usize, hidden: usize, output_dim: usize, seed: u64) -> Self {
        let mut rng = stream(seed, "embedding-extractor", &[]);
        let n1 = Normal::new(0.0, 1.0 / (input_dim.max(1) as f64).sqrt()).expect("valid std");
        let n2 = Normal::new(0.0, 1.0 / (hidden.max(1) as f64).sqrt()).expect("valid std");
        let w1 = (0..hidden * input_dim).map(|_| n1.sample(&mut rng)).collect();
        let b1 = (0..hidden).map(|_| n1.sample(&mut rng) * 0.1).collect();
        let w2 = (0..output_dim * hidden).map(|_| n2.sample(&mut rng)).collect();
        Self {
            id: seed,
            input_dim,
            hidden,
            output_dim,
            w1,
            b1,
            w2,
        }
    }

    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = (0..self.hidden)
            .map(|j| {
                let row = &self.w1[j * self.input_dim..(j + 1) * self.input_dim];
                (row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + self.b1[j]).tanh()
            })
            .collect();
        (0..self.output_dim)
            .map(|o| {
                let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
                row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>().tanh()
            })
            .collect()
    }
}

/// Mean of the extractor's per-sample features.
pub fn compute_embedding(samples: &[&Sample], extractor: &FrozenExtractor) -> Result<EmbeddingVector> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("embedding of an empty sample set".into()));
    }
    let mut acc = vec![0.0; extractor.output_dim];
    for s in samples {
        if s.features.len() != extractor.input_dim {
            return Err(Error::DimensionMismatch {
                expected: extractor.input_dim,
                got: s.features.len(),
            });
        }
        for (a, f) in acc.iter_mut().zip(extractor.features(&s.features)) {
            *a += f;
        }
    }
    let n = samples.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(EmbeddingVector {
        values: acc,
        source_model_id: extractor.id,
    })
}

/// Optional seeded Johnson-Lindenstrauss projection applied to gradients.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSketcher {
    pub model_dim: usize,
    pub sketch_dim: usize,
    projection: Option<Vec<f64>>,
}

impl GradientSketcher {
    /// `sketch_dim = None` applies the default rule: full gradient up to
    /// [`FULL_GRADIENT_MAX_DIM`] parameters, else a projection to
    /// [`DEFAULT_SKETCH_DIM`]. `Some(0)` disables projection.
    pub fn new(model_dim: usize, sketch_dim: Option<usize>, seed: u64) -> Self {
        let target = match sketch_dim {
            None if model_dim <= FULL_GRADIENT_MAX_DIM => 0,
            None => DEFAULT_SKETCH_DIM,
            Some(d) => d,
        };
        if target == 0 || target >= model_dim {
            return Self {
                model_dim,
                sketch_dim: model_dim,
                projection: None,
            };
        }
        let mut rng = stream(seed, "gradient-projection", &[]);
        let normal = Normal::new(0.0, 1.0 / (target as f64).sqrt()).expect("valid std");
        let projection = (0..target * model_dim).map(|_| normal.sample(&mut rng)).collect();
        Self {
            model_dim,
            sketch_dim: target,
            projection: Some(projection),
        }
    }

    pub fn project(&self, grad: &[f64]) -> Vec<f64> {
        match &self.projection {
            None => grad.to_vec(),
            Some(p) => (0..self.sketch_dim)
                .map(|r| {
                    let row = &p[r * self.model_dim..(r + 1) * self.model_dim];
                    row.iter().zip(grad).map(|(a, g)| a * g).sum()
                })
                .collect(),
        }
    }
}

/// Full-batch gradient of the task loss at the shared snapshot, projected
/// by `sketcher`.
pub fn compute_gradient_sketch(
    samples: &[&Sample],
    shared_model: &ModelParams,
    model: &TaskModel,
    sketcher: &GradientSketcher,
) -> Result<GradientSketch> {
    if samples.is_empty() {
        return Err(Error::InvalidInput("gradient of an empty sample set".into()));
    }
    if shared_model.dim() != model.dim() || sketcher.model_dim != model.dim() {
        return Err(Error::DimensionMismatch {
            expected: model.dim(),
            got: shared_model.dim(),
        });
    }
    let (_, grad) = model.loss_and_grad(&shared_model.values, samples)?;
    let values = sketcher.project(&grad);
    if let Some(index) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(GradientSketch {
        values,
        model_round: shared_model.version.round,
    })
}
