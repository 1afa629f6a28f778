//! Random (model, batch, objective) instances for gradient checks, shared with
//! the acceptance suite of the runner crate.

use satlab_core::losses::{Objective, SceWeights, Weighting};
use satlab_core::nn::Mlp;
use satlab_core::rng::{self, Rng};
use satlab_core::Tensor;

pub const KINK_MARGIN: f64 = 1e-3;
pub const EPS: f64 = 1e-5;
/// Step for the all-loss sweep: some abstention gradients are ~1e-7, where a
/// 1e-5 step is dominated by roundoff in the loss value.
pub const SWEEP_EPS: f64 = 1e-4;

fn simplex_rows(m: usize, c: usize, rng: &mut Rng) -> Tensor {
    let mut data = Vec::with_capacity(m * c);
    for _ in 0..m {
        let row: Vec<f64> = (0..c)
            .map(|_| -rng::uniform(rng).max(1e-300).ln())
            .collect();
        let s: f64 = row.iter().sum();
        data.extend(row.iter().map(|v| v / s));
    }
    Tensor::matrix(m, c, data).unwrap()
}

/// Smallest |pre-activation| over every hidden unit of every row.
fn kink_distance(model: &Mlp, x: &Tensor) -> f64 {
    let layers = model.layers();
    let mut h = x.clone();
    let mut worst = f64::INFINITY;
    for (k, l) in layers.iter().enumerate() {
        let mut z = h.matmul(&l.weight).unwrap();
        let c = z.cols();
        for row in z.data_mut().chunks_exact_mut(c) {
            row.iter_mut().zip(l.bias.data()).for_each(|(v, b)| *v += b);
        }
        if k + 1 < layers.len() {
            worst = z.data().iter().fold(worst, |w, v| w.min(v.abs()));
            z.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        h = z;
    }
    worst
}

/// Loss `which`: 0 SAT, 1 SAT with SCE, 2 abstention, 3 normalised MSE.
/// Inputs are redrawn until every hidden pre-activation clears [`KINK_MARGIN`].
pub fn random_instance(seed: u64, which: usize) -> (Mlp, Tensor, Objective) {
    let mut rng = rng::seeded(seed, 99);
    let depth = 1 + (seed as usize % 3);
    let m = 3 + (seed as usize % 4);
    let classes = 3 + (seed as usize % 3);
    let out = if which == 2 { classes + 1 } else { classes };
    let mut widths = vec![2 + seed as usize % 5];
    widths.extend((1..depth).map(|k| 4 + (seed as usize + k) % 5));
    widths.push(out);
    let mut model = Mlp::seeded(&widths, seed).unwrap();
    // Random biases: with zero output bias the normalised loss is exactly flat
    // along some weights, whose tape gradients are then pure roundoff.
    for (k, p) in model.params_mut().enumerate() {
        if k % 2 == 1 {
            p.data_mut()
                .iter_mut()
                .for_each(|b| *b = 0.1 * rng::normal(&mut rng));
        }
    }
    let x = loop {
        let data = (0..m * widths[0]).map(|_| rng::normal(&mut rng)).collect();
        let x = Tensor::matrix(m, widths[0], data).unwrap();
        // The normalised loss is singular at a zero output row.
        let min_norm = model
            .forward(&x)
            .unwrap()
            .row_iter()
            .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(f64::INFINITY, f64::min);
        if kink_distance(&model, &x) >= KINK_MARGIN && (which != 3 || min_norm >= 0.1) {
            break x;
        }
    };
    let objective = match which {
        0 => Objective::SoftCrossEntropy {
            targets: simplex_rows(m, out, &mut rng),
            weighting: Weighting::MaxTarget,
            sce: None,
        },
        1 => Objective::SoftCrossEntropy {
            targets: simplex_rows(m, out, &mut rng),
            weighting: Weighting::Uniform,
            sce: Some(SceWeights::default()),
        },
        2 => Objective::Abstain {
            t_true: (0..m).map(|_| rng::uniform(&mut rng)).collect(),
            labels: (0..m)
                .map(|_| (rng::uniform(&mut rng) * classes as f64) as usize)
                .collect(),
        },
        _ => {
            let data = (0..m * out).map(|_| rng::normal(&mut rng)).collect();
            Objective::NormalizedMse {
                targets: Tensor::matrix(m, out, data).unwrap(),
            }
        }
    };
    (model, x, objective)
}
