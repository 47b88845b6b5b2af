//! Shared helpers for the integration suites: finite-difference gradient
//! checking over full parameter lists, and small data builders.

use cqgen_core::coordinator::{aggregate, CoordinatorParams, DecodeTrace, StepRecord};
use cqgen_core::generator::argmax_token;
use cqgen_core::nn::{softmax_in_place, Param};
use cqgen_core::rng::{normal, substream};

/// Per-tensor relative error between analytic gradients (already stored in
/// `Param::g`) and central finite differences of `loss`.
///
/// `params_of` must return the same ordered parameter list on every call;
/// `loss` re-evaluates the objective for the current weights.
pub fn fd_relative_errors<M>(
    model: &mut M,
    params_of: impl Fn(&mut M) -> Vec<&mut Param<f64>>,
    mut loss: impl FnMut(&mut M) -> f64,
    step: f64,
) -> Vec<f64> {
    let analytic: Vec<Vec<f64>> = params_of(model).iter().map(|p| p.g.clone()).collect();
    let shapes: Vec<usize> = analytic.iter().map(|g| g.len()).collect();

    let mut errors = Vec::with_capacity(shapes.len());
    for (ti, &len) in shapes.iter().enumerate() {
        let mut fd = vec![0.0; len];
        for j in 0..len {
            let orig = params_of(model)[ti].w[j];
            params_of(model)[ti].w[j] = orig + step;
            let up = loss(model);
            params_of(model)[ti].w[j] = orig - step;
            let down = loss(model);
            params_of(model)[ti].w[j] = orig;
            fd[j] = (up - down) / (2.0 * step);
        }
        let diff: f64 = fd
            .iter()
            .zip(&analytic[ti])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let norm_fd: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        let norm_an: f64 = analytic[ti].iter().map(|x| x * x).sum::<f64>().sqrt();
        errors.push(diff / norm_fd.max(norm_an).max(1e-10));
    }
    errors
}

pub fn random_dist(rng: &mut rand_chacha::ChaCha8Rng, v: usize) -> Vec<f64> {
    let mut logits: Vec<f64> = (0..v).map(|_| normal(rng, 1.0)).collect();
    softmax_in_place(&mut logits);
    logits
}

/// Builds a synthetic trace by running the coordinator forward on random
/// hidden states and distributions, choosing the greedy token each step.
pub fn synthetic_trace(
    coord: &CoordinatorParams<f64>,
    v: usize,
    p: usize,
    n: usize,
    t: usize,
    seed: u64,
) -> DecodeTrace<f64> {
    let mut rng = substream(seed, "grad-trace");
    let h = coord.hidden_dim;
    let mut steps = Vec::with_capacity(t);
    let mut tokens = Vec::with_capacity(t);
    for _ in 0..t {
        let pos_hidden: Vec<Vec<f64>> = (0..p)
            .map(|_| (0..h).map(|_| normal(&mut rng, 1.0)).collect())
            .collect();
        let neg_hidden: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h).map(|_| normal(&mut rng, 1.0)).collect())
            .collect();
        let pos_dists: Vec<Vec<f64>> = (0..p).map(|_| random_dist(&mut rng, v)).collect();
        let neg_dists: Vec<Vec<f64>> = (0..n).map(|_| random_dist(&mut rng, v)).collect();

        let (out, _) = coord.forward(&pos_hidden, &neg_hidden).unwrap();
        let agg = aggregate(&out, &pos_dists, &neg_dists).unwrap();
        let chosen = argmax_token(&agg.probs);
        let log_prob = agg.probs[chosen as usize].ln();
        tokens.push(chosen);
        steps.push(StepRecord {
            pos_hidden,
            neg_hidden,
            pos_dists,
            neg_dists,
            coord: out,
            agg,
            chosen,
            log_prob,
        });
    }
    DecodeTrace {
        steps,
        question: tokens.clone(),
        tokens,
    }
}
