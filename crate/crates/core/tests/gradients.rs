use driftcfl::models::{Sample, TaskModel};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const REL_TOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

fn random_batch(rng: &mut ChaCha8Rng, input_dim: usize, num_labels: usize, n: usize) -> Vec<Sample> {
    (0..n)
        .map(|_| {
            let x = (0..input_dim).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Sample::new(x, rng.gen_range(0..num_labels.max(1)) as u32)
        })
        .collect()
}

/// Central differences over every coordinate.
fn numeric_grad(model: &TaskModel, params: &[f64], batch: &[&Sample]) -> Vec<f64> {
    let mut p = params.to_vec();
    (0..params.len())
        .map(|i| {
            p[i] = params[i] + STEP;
            let up = model.loss(&p, batch).unwrap();
            p[i] = params[i] - STEP;
            let down = model.loss(&p, batch).unwrap();
            p[i] = params[i];
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-8)
}

fn check(model: TaskModel, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (input_dim, labels) = match model {
        TaskModel::Softmax { input_dim, num_labels } | TaskModel::Mlp { input_dim, num_labels, .. } => (input_dim, num_labels),
        TaskModel::Quadratic { dim } => (dim, 1),
    };
    let mut params = model.init_params(&mut rng);
    for p in params.iter_mut() {
        *p += rng.gen_range(-0.5..0.5);
    }
    let n = rng.gen_range(1..6);
    let data = random_batch(&mut rng, input_dim, labels, n);
    let batch: Vec<&Sample> = data.iter().collect();
    let (_, grad) = model.loss_and_grad(&params, &batch).unwrap();
    relative_error(&grad, &numeric_grad(&model, &params, &batch))
}

#[test]
fn hundred_cases_per_model_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut worst: f64 = 0.0;
    for case in 0..100u64 {
        let input_dim = rng.gen_range(1..6);
        let num_labels = rng.gen_range(2..6);
        let hidden = rng.gen_range(1..5);
        for model in [
            TaskModel::Softmax { input_dim, num_labels },
            TaskModel::Mlp { input_dim, hidden, num_labels },
            TaskModel::Quadratic { dim: input_dim },
        ] {
            let err = check(model, 1000 + case);
            assert!(err < REL_TOL, "{model:?} case {case}: relative error {err}");
            worst = worst.max(err);
        }
    }
    println!("worst relative error {worst:.3e}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_gradient_rows_sum_to_zero(seed in any::<u64>(), d in 1usize..5, l in 2usize..6) {
        // Shifting every logit equally leaves the loss unchanged, so the
        // gradient summed over classes vanishes coordinate-wise.
        let model = TaskModel::Softmax { input_dim: d, num_labels: l };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params: Vec<f64> = (0..model.dim()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let data = random_batch(&mut rng, d, l, 3);
        let batch: Vec<&Sample> = data.iter().collect();
        let (_, g) = model.loss_and_grad(&params, &batch).unwrap();
        for j in 0..d {
            let s: f64 = (0..l).map(|c| g[c * d + j]).sum();
            prop_assert!(s.abs() < 1e-12, "weight column {j} sums to {s}");
        }
        let bias: f64 = g[l * d..].iter().sum();
        prop_assert!(bias.abs() < 1e-12, "bias gradient sums to {bias}");
    }
}
