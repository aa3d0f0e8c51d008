//! Sample statistics, seeded bootstrap and least-squares lines.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::disorder::{Purpose, SeedSpec};

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance; 0 for fewer than two samples.
pub fn variance(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() - 1) as f64
}

pub fn stderr_of_mean(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    (variance(x) / x.len() as f64).sqrt()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BootstrapSpec {
    pub resamples: usize,
    pub seed: u64,
}

impl Default for BootstrapSpec {
    fn default() -> Self {
        BootstrapSpec { resamples: 1000, seed: 0 }
    }
}

/// Point estimate with bootstrap standard error and 95% percentile interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub estimate: f64,
    pub stderr: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl Estimate {
    pub fn exact(v: f64) -> Self {
        Estimate {
            estimate: v,
            stderr: 0.0,
            ci_low: v,
            ci_high: v,
        }
    }
}

/// Resample `n` units with replacement; `stat` receives the drawn indices.
/// The stream is keyed by `label` so different statistics of one run use
/// different resamples.
pub fn bootstrap<F>(n: usize, spec: &BootstrapSpec, label: u64, stat: F) -> Estimate
where
    F: Fn(&[usize]) -> f64,
{
    let identity: Vec<usize> = (0..n).collect();
    let estimate = stat(&identity);
    if n == 0 || spec.resamples == 0 {
        return Estimate::exact(estimate);
    }
    let mut rng = SeedSpec::new(spec.seed, label, Purpose::Bootstrap).rng();
    let mut idx = vec![0usize; n];
    let mut reps: Vec<f64> = Vec::with_capacity(spec.resamples);
    for _ in 0..spec.resamples {
        for v in idx.iter_mut() {
            *v = rng.random_range(0..n);
        }
        reps.push(stat(&idx));
    }
    let stderr = variance(&reps).sqrt();
    let finite: Vec<f64> = {
        let mut r: Vec<f64> = reps.into_iter().filter(|v| v.is_finite()).collect();
        r.sort_by(f64::total_cmp);
        r
    };
    let q = |p: f64| -> f64 {
        if finite.is_empty() {
            return f64::NAN;
        }
        let pos = p * (finite.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        finite[lo] + (finite[hi] - finite[lo]) * (pos - lo as f64)
    };
    Estimate {
        estimate,
        stderr,
        ci_low: q(0.025),
        ci_high: q(0.975),
    }
}

/// Gather `x[i]` for the given indices.
pub fn pick(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

/// Least-squares line through (x, y): returns (slope, intercept).
pub fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64) {
    let mx = mean(x);
    let my = mean(y);
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variance_of_small_samples() {
        assert_eq!(variance(&[1.0]), 0.0);
        assert_eq!(variance(&[1.0, 3.0]), 2.0);
        assert_eq!(variance(&[0.0; 10]), 0.0);
    }

    #[test]
    fn bootstrap_is_deterministic_and_sane() {
        let x: Vec<f64> = (0..200).map(|i| (i as f64 * 0.37).sin()).collect();
        let spec = BootstrapSpec::default();
        let a = bootstrap(x.len(), &spec, 3, |i| mean(&pick(&x, i)));
        let b = bootstrap(x.len(), &spec, 3, |i| mean(&pick(&x, i)));
        assert_eq!(a, b);
        let se = stderr_of_mean(&x);
        assert!((a.stderr / se - 1.0).abs() < 0.15, "{} vs {se}", a.stderr);
        assert!(a.ci_low < a.estimate && a.estimate < a.ci_high);
    }

    #[test]
    fn line_fit_recovers_slope() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let y: Vec<f64> = x.iter().map(|v| 2.5 * v - 1.0).collect();
        let (s, c) = fit_line(&x, &y);
        assert!((s - 2.5).abs() < 1e-12 && (c + 1.0).abs() < 1e-12);
    }
}
