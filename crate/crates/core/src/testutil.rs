//! Statistical helpers shared by unit tests.

use statrs::distribution::{ChiSquared, ContinuousCDF};

/// Pearson statistic of `counts` against a uniform expectation.
pub fn chi_square_uniform(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    let expected = total as f64 / counts.len() as f64;
    counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum()
}

/// Whether `counts` is consistent with uniformity at significance `alpha`.
pub fn passes_uniformity(counts: &[usize], alpha: f64) -> bool {
    let dof = (counts.len() - 1) as f64;
    let critical = ChiSquared::new(dof).unwrap().inverse_cdf(1.0 - alpha);
    chi_square_uniform(counts) < critical
}
