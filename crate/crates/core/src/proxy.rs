//! Empirical estimator-variance proxies.
//!
//! The variance of a group-mean estimate is measured on prior data across a
//! grid of sampling rates and fitted with `a/x`. With `C = a·N` this gives
//! `Var = C/n`, and the confidence requirement `Var ≤ α·γ²` becomes the
//! linear bound `n ≥ C/(α·γ²)` on expected successful samples.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::par::{self, Execution};
use crate::population::PopulationFrame;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariancePoint {
    /// Sampling rate `x = n/N` in (0, 1].
    pub rate: f64,
    /// Variance of the sample mean across trials.
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyCurve {
    pub group: String,
    /// Coefficient `a` of `Var(x) = a/x`.
    pub a: f64,
    /// Residual sum of squares of the fit.
    pub rss: f64,
    pub n_points: usize,
}

impl ProxyCurve {
    pub fn predict(&self, rate: f64) -> f64 {
        self.a / rate
    }

    /// Coefficient of determination of the fit over `points`.
    pub fn r_squared(&self, points: &[VariancePoint]) -> f64 {
        let mean = points.iter().map(|p| p.variance).sum::<f64>() / points.len() as f64;
        let tss: f64 = points.iter().map(|p| (p.variance - mean).powi(2)).sum();
        let rss: f64 = points.iter().map(|p| (p.variance - self.predict(p.rate)).powi(2)).sum();
        if tss == 0.0 {
            if rss == 0.0 {
                1.0
            } else {
                0.0
            }
        } else {
            1.0 - rss / tss
        }
    }
}

/// Defaults: 20 evenly spaced rates up to 10% of the group, 200 trials each.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RateGrid {
    pub points: usize,
    pub max_rate: f64,
    pub trials: usize,
}

impl Default for RateGrid {
    fn default() -> Self {
        Self { points: 20, max_rate: 0.1, trials: 200 }
    }
}

impl RateGrid {
    pub fn rates(&self) -> Vec<f64> {
        (1..=self.points).map(|k| self.max_rate * k as f64 / self.points as f64).collect()
    }
}

/// Measure the variance of the group mean at each rate, sampling without
/// replacement from the group's individuals. Rates are relative to the
/// group's true size.
pub fn measure_variance(
    prior: &PopulationFrame,
    group: usize,
    rates: &[f64],
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<VariancePoint>> {
    if group >= prior.num_groups() {
        return Err(invalid(format!("group index {group} out of range")));
    }
    let values = prior.group_values(group);
    if values.is_empty() {
        return Err(Error::EmptyGroup(prior.group_labels()[group].clone()));
    }
    let base = values.len() as f64;
    measure_variance_values(&values, base, rates, trials, seed, exec)
}

/// As [`measure_variance`], on raw values with rates relative to `base`
/// individuals. Sample sizes are capped at the number of values available.
pub fn measure_variance_values(
    values: &[f64],
    base: f64,
    rates: &[f64],
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<Vec<VariancePoint>> {
    if values.is_empty() {
        return Err(Error::EmptyInput);
    }
    if trials < 2 {
        return Err(invalid("variance measurement needs at least 2 trials"));
    }
    let sizes = rates
        .iter()
        .map(|&x| {
            if !(x > 0.0 && x <= 1.0) {
                return Err(invalid(format!("rate {x} outside (0, 1]")));
            }
            let n = ((x * base).round_ties_even() as usize).min(values.len());
            if n < 2 {
                return Err(invalid(format!("rate {x} yields a sample of {n} (< 2)")));
            }
            Ok(n)
        })
        .collect::<Result<Vec<_>>>()?;

    let tag = rng::label_tag("proxy");
    let mut points = Vec::with_capacity(rates.len());
    for (j, (&rate, &n)) in rates.iter().zip(&sizes).enumerate() {
        let means = par::map_indexed(exec, trials, |t| {
            let mut rng = rng::stream(seed, &[tag, j as u64, t as u64]);
            let mut idx = rng::permutation_prefix(&mut rng, values.len(), n);
            // Fixed summation order: a census gives bit-identical means.
            idx.sort_unstable();
            idx.iter().map(|&k| values[k]).sum::<f64>() / n as f64
        });
        // Deviations from the first mean keep identical means at exactly 0.
        let shifted: Vec<f64> = means.iter().map(|v| v - means[0]).collect();
        let m = shifted.iter().sum::<f64>() / trials as f64;
        let var = shifted.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (trials - 1) as f64;
        points.push(VariancePoint { rate, variance: var });
    }
    Ok(points)
}

/// Least-squares fit of `v = a/x`:
/// `a = Σ(v/x) / Σ(1/x²)`, clamped at zero.
pub fn fit_inverse_curve(group: &str, points: &[VariancePoint]) -> Result<ProxyCurve> {
    if points.is_empty() {
        return Err(Error::EmptyInput);
    }
    if let Some(p) = points.iter().find(|p| !(p.rate > 0.0 && p.rate.is_finite())) {
        return Err(invalid(format!("rate {} must be positive", p.rate)));
    }
    let num: f64 = points.iter().map(|p| p.variance / p.rate).sum();
    let den: f64 = points.iter().map(|p| 1.0 / (p.rate * p.rate)).sum();
    let a = (num / den).max(0.0);
    let rss = points.iter().map(|p| (p.variance - a / p.rate).powi(2)).sum();
    Ok(ProxyCurve { group: group.to_string(), a, rss, n_points: points.len() })
}

/// Minimum expected successes `C/(α·γ²)` with `C = a·N`.
pub fn required_samples(curve: &ProxyCurve, group_size: f64, alpha: f64, gamma: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("alpha {alpha} outside (0, 1)")));
    }
    if !(gamma > 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be positive, got {gamma}")));
    }
    if !(group_size >= 0.0 && group_size.is_finite()) {
        return Err(invalid(format!("invalid group size {group_size}")));
    }
    Ok(curve.a * group_size / (alpha * gamma * gamma))
}

pub fn write_curves<W: Write>(curves: &[ProxyCurve], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["group_id", "a", "rss", "n_points"])?;
    for c in curves {
        w.write_record([c.group.clone(), c.a.to_string(), c.rss.to_string(), c.n_points.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_curves<R: Read>(source: R) -> Result<Vec<ProxyCurve>> {
    #[derive(Deserialize)]
    struct Row {
        group_id: String,
        a: f64,
        rss: f64,
        n_points: usize,
    }
    let mut reader = csv::Reader::from_reader(source);
    let curves = reader
        .deserialize::<Row>()
        .map(|r| {
            let r = r?;
            Ok(ProxyCurve { group: r.group_id, a: r.a, rss: r.rss, n_points: r.n_points })
        })
        .collect::<Result<Vec<_>>>()?;
    if curves.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(curves)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::{generate_synthetic, GroupSpec, SyntheticSpec};
    use rand_distr::{Distribution, Normal};

    fn curve(a: f64) -> ProxyCurve {
        ProxyCurve { group: "g".into(), a, rss: 0.0, n_points: 1 }
    }

    fn lognormal_values(n: u64, mean: f64, sd: f64, seed: u64) -> Vec<f64> {
        let spec = SyntheticSpec {
            groups: vec![GroupSpec { label: "g".into(), size: n, mean, sd }],
            regions: 1,
            mixing: 0.0,
            seed,
        };
        generate_synthetic(&spec).unwrap().group_values(0)
    }

    #[test]
    fn constant_group_has_zero_variance() {
        let v = vec![3.25; 500];
        let pts = measure_variance_values(&v, 500.0, &[0.01, 0.1, 0.5], 50, 1, Execution::default()).unwrap();
        assert!(pts.iter().all(|p| p.variance == 0.0));
    }

    #[test]
    fn census_has_zero_variance() {
        let v = lognormal_values(400, 100.0, 50.0, 2);
        let pts = measure_variance_values(&v, 400.0, &[1.0], 30, 1, Execution::default()).unwrap();
        assert_eq!(pts[0].variance, 0.0);
    }

    #[test]
    fn tiny_samples_rejected() {
        let v = vec![1.0; 100];
        assert!(measure_variance_values(&v, 100.0, &[0.01], 10, 1, Execution::default()).is_err());
        assert!(measure_variance_values(&v, 100.0, &[0.0], 10, 1, Execution::default()).is_err());
    }

    #[test]
    fn matches_finite_population_formula() {
        // Var(mean) = S²/n · (1 - n/N) for sampling without replacement.
        let v = lognormal_values(20_000, 50_000.0, 40_000.0, 5);
        let n_pop = v.len() as f64;
        let m = v.iter().sum::<f64>() / n_pop;
        let s2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n_pop - 1.0);
        let trials = 2000;
        for &x in &[0.01, 0.05] {
            let pts = measure_variance_values(&v, n_pop, &[x], trials, 9, Execution::default()).unwrap();
            let n = (x * n_pop).round();
            let expected = s2 / n * (1.0 - n / n_pop);
            // Relative sd of a variance estimate over 2000 trials is ~3%.
            let rel = (pts[0].variance - expected).abs() / expected;
            assert!(rel < 0.15, "x={x}: {} vs {expected}", pts[0].variance);
        }
    }

    #[test]
    fn measurement_is_independent_of_execution() {
        let v = lognormal_values(3000, 10.0, 5.0, 1);
        let rates = [0.02, 0.05];
        let a = measure_variance_values(&v, 3000.0, &rates, 64, 4, Execution::Sequential).unwrap();
        let b = measure_variance_values(&v, 3000.0, &rates, 64, 4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn variance_decreases_with_rate() {
        let v = lognormal_values(20_000, 10.0, 8.0, 3);
        let pts = measure_variance_values(&v, 20_000.0, &RateGrid::default().rates(), 400, 4, Execution::default())
            .unwrap();
        // Expected ratios between rates j and 2j are ~2; allow MC noise.
        for j in 0..10 {
            assert!(pts[j].variance > pts[2 * j + 1].variance, "{:?} vs {:?}", pts[j], pts[2 * j + 1]);
        }
    }

    #[test]
    fn fit_examples() {
        let pts = [VariancePoint { rate: 0.5, variance: 4.0 }, VariancePoint { rate: 1.0, variance: 2.0 }];
        let c = fit_inverse_curve("g", &pts).unwrap();
        assert_eq!(c.a, 2.0);
        assert_eq!(c.rss, 0.0);
        assert_eq!(c.r_squared(&pts), 1.0);
        let c = fit_inverse_curve("g", &[VariancePoint { rate: 0.1, variance: 30.0 }]).unwrap();
        assert!((c.a - 3.0).abs() < 1e-12);
        assert!(fit_inverse_curve("g", &[]).is_err());
        let c = fit_inverse_curve("g", &[VariancePoint { rate: 0.5, variance: -1.0 }]).unwrap();
        assert_eq!(c.a, 0.0);
    }

    #[test]
    fn fit_recovers_noisy_coefficient() {
        let rates = RateGrid::default().rates();
        let noise = Normal::new(0.0, 1.0).unwrap();
        let mut rng = rng::stream(17, &[]);
        for _ in 0..100 {
            let pts: Vec<_> = rates
                .iter()
                .map(|&x| VariancePoint { rate: x, variance: 5.0 / x + noise.sample(&mut rng) })
                .collect();
            let a = fit_inverse_curve("g", &pts).unwrap().a;
            assert!((a - 5.0).abs() / 5.0 < 0.05, "a = {a}");
        }
    }

    #[test]
    fn required_samples_arithmetic() {
        assert_eq!(required_samples(&curve(0.5), 1000.0, 0.1, 10.0).unwrap(), 50.0);
        assert_eq!(required_samples(&curve(0.0), 1000.0, 0.1, 10.0).unwrap(), 0.0);
        let base = required_samples(&curve(0.7), 900.0, 0.2, 3.0).unwrap();
        let doubled = required_samples(&curve(0.7), 900.0, 0.2, 6.0).unwrap();
        assert!((doubled - base / 4.0).abs() < 1e-9);
        assert!(required_samples(&curve(0.5), 1000.0, 0.1, 0.0).is_err());
        assert!(required_samples(&curve(0.5), 1000.0, 1.0, 1.0).is_err());
        assert!(required_samples(&curve(0.5), 1000.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn curves_csv_round_trip() {
        let curves = vec![
            ProxyCurve { group: "a".into(), a: 0.125, rss: 1.5, n_points: 20 },
            ProxyCurve { group: "b".into(), a: 3.0e-7, rss: 0.0, n_points: 1 },
        ];
        let mut buf = Vec::new();
        write_curves(&curves, &mut buf).unwrap();
        assert_eq!(read_curves(buf.as_slice()).unwrap(), curves);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn exact_points_fit_exactly(a in 0.0f64..1e4, rates in prop::collection::vec(0.001f64..1.0, 1..30)) {
                let pts: Vec<_> = rates.iter().map(|&x| VariancePoint { rate: x, variance: a / x }).collect();
                let c = fit_inverse_curve("g", &pts).unwrap();
                prop_assert!((c.a - a).abs() <= 1e-9 * a.max(1.0));
                prop_assert!(c.rss <= 1e-12 * pts.iter().map(|p| p.variance * p.variance).sum::<f64>().max(1.0));
            }

            #[test]
            fn requirement_monotone(a in 0.0f64..10.0, n in 1.0f64..1e6, alpha in 0.01f64..0.5, gamma in 0.1f64..100.0, k in 1.0f64..3.0) {
                let base = required_samples(&curve(a), n, alpha, gamma).unwrap();
                prop_assert!(required_samples(&curve(a), n, (alpha * k).min(0.99), gamma).unwrap() <= base);
                prop_assert!(required_samples(&curve(a), n, alpha, gamma * k).unwrap() <= base);
                prop_assert!(required_samples(&curve(a * k), n, alpha, gamma).unwrap() >= base);
                prop_assert!(required_samples(&curve(a), n * k, alpha, gamma).unwrap() >= base);
            }
        }
    }
}
