//! Direct formula scripts over plain vectors, independent of the tape.

use flare::nn::ParamSet;
use statrs::distribution::{ChiSquared, ContinuousCDF};

pub fn dense(x: &[f64], p: &ParamSet<f64>, name: &str) -> Vec<f64> {
    let w = p.get(&format!("{name}.w")).unwrap().data();
    let b = p.get(&format!("{name}.b")).unwrap().data();
    let out = b.len();
    (0..out)
        .map(|j| {
            b[j] + x
                .iter()
                .enumerate()
                .map(|(i, xi)| xi * w[i * out + j])
                .sum::<f64>()
        })
        .collect()
}

/// ReLU network with `layers` linear stages named `{name}.l{k}`.
pub fn relu_mlp(x: &[f64], p: &ParamSet<f64>, name: &str, layers: usize) -> Vec<f64> {
    let mut h = x.to_vec();
    for k in 0..layers {
        h = dense(&h, p, &format!("{name}.l{k}"));
        if k + 1 < layers {
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
    }
    h
}

/// Squashed Gaussian action and log-density for one row.
pub fn squashed_policy(
    out: &[f64],
    eps: &[f64],
    log_std_min: f64,
    log_std_max: f64,
) -> (Vec<f64>, f64) {
    let d = eps.len();
    let mut logp = 0.0;
    let mut action = Vec::with_capacity(d);
    for k in 0..d {
        let log_std = log_std_min + 0.5 * (log_std_max - log_std_min) * (out[d + k].tanh() + 1.0);
        let a = (out[k] + log_std.exp() * eps[k]).tanh();
        logp += -0.5 * eps[k] * eps[k]
            - log_std
            - 0.5 * (2.0 * std::f64::consts::PI).ln()
            - (1.0 - a * a).ln();
        action.push(a);
    }
    (action, logp)
}

pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

pub fn chi_square_critical(cells: usize, alpha: f64) -> f64 {
    ChiSquared::new((cells - 1) as f64)
        .unwrap()
        .inverse_cdf(1.0 - alpha)
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn flat(p: &ParamSet<f64>) -> Vec<f64> {
    p.iter().flat_map(|(_, t)| t.data().to_vec()).collect()
}
