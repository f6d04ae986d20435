//! Weighted summaries of parameter clouds.

use crate::error::{FilterError, Result};

/// Mean, standard deviation and central 95% interval of one component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComponentSummary {
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
}

fn check(xs: &[f64], w: &[f64]) -> Result<()> {
    if xs.is_empty() || xs.len() != w.len() {
        return Err(FilterError::DimensionMismatch {
            what: "weighted sample",
            expected: xs.len(),
            got: w.len(),
        });
    }
    Ok(())
}

pub fn weighted_mean(xs: &[f64], w: &[f64]) -> Result<f64> {
    check(xs, w)?;
    let total: f64 = w.iter().sum();
    Ok(xs.iter().zip(w).map(|(x, w)| x * w).sum::<f64>() / total)
}

/// Weighted standard deviation (weights treated as probabilities).
pub fn weighted_sd(xs: &[f64], w: &[f64]) -> Result<f64> {
    let m = weighted_mean(xs, w)?;
    let total: f64 = w.iter().sum();
    let var = xs.iter().zip(w).map(|(x, w)| w * (x - m).powi(2)).sum::<f64>() / total;
    Ok(var.max(0.0).sqrt())
}

/// Smallest sample value whose weighted CDF reaches `q`.
pub fn weighted_quantile(xs: &[f64], w: &[f64], q: f64) -> Result<f64> {
    check(xs, w)?;
    if !(0.0..=1.0).contains(&q) {
        return Err(FilterError::InvalidArgument(format!("quantile level {q} outside [0, 1]")));
    }
    let total: f64 = w.iter().sum();
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut acc = 0.0;
    for &i in &order {
        acc += w[i] / total;
        if acc >= q - 1e-12 {
            return Ok(xs[i]);
        }
    }
    Ok(xs[*order.last().expect("nonempty")])
}

/// Summaries of each component of a weighted cloud of vectors.
pub fn summarise(points: &[Vec<f64>], w: &[f64]) -> Result<Vec<ComponentSummary>> {
    let dim = points.first().map_or(0, |p| p.len());
    (0..dim)
        .map(|c| {
            let xs: Vec<f64> = points.iter().map(|p| p[c]).collect();
            Ok(ComponentSummary {
                mean: weighted_mean(&xs, w)?,
                sd: weighted_sd(&xs, w)?,
                q025: weighted_quantile(&xs, w, 0.025)?,
                q975: weighted_quantile(&xs, w, 0.975)?,
            })
        })
        .collect()
}

/// Component-wise weighted mean of a cloud of vectors.
pub fn weighted_mean_vector(points: &[Vec<f64>], w: &[f64]) -> Vec<f64> {
    let dim = points.first().map_or(0, |p| p.len());
    let total: f64 = w.iter().sum();
    (0..dim)
        .map(|c| points.iter().zip(w).map(|(p, w)| p[c] * w).sum::<f64>() / total)
        .collect()
}

/// Batch-means Monte Carlo standard error of the mean of a chain.
pub fn batch_means_se(chain: &[f64], batches: usize) -> f64 {
    let n = chain.len();
    let b = batches.max(2).min(n.max(2));
    let size = n / b;
    if size == 0 {
        return f64::NAN;
    }
    let means: Vec<f64> = (0..b)
        .map(|k| chain[k * size..(k + 1) * size].iter().sum::<f64>() / size as f64)
        .collect();
    let mbar = means.iter().sum::<f64>() / b as f64;
    let var = means.iter().map(|m| (m - mbar).powi(2)).sum::<f64>() / (b - 1) as f64;
    (var / b as f64).sqrt()
}
