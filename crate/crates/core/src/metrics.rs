//! Evaluation metrics: estimator variance, variance fairness, confidence
//! compliance, relative standard error, coefficient of variation and
//! Simpson's diversity index.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::simulator::TrialReport;

/// Largest pairwise absolute difference of group variances.
pub fn fairness_xi(variances: &[f64]) -> Result<f64> {
    if variances.len() < 2 {
        return Err(invalid("variance fairness needs at least two groups"));
    }
    let max = variances.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = variances.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(max - min)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Compliance {
    /// Fraction of trials whose error exceeded `γ_i`.
    pub rate: f64,
    pub pass: bool,
}

/// Empirical `Pr(err > γ_i)` per group. Undefined estimates (`None`) count
/// as violations.
pub fn confidence_compliance(errors: &[Vec<Option<f64>>], gamma: &[f64], alpha: f64) -> Result<Vec<Compliance>> {
    if errors.len() != gamma.len() {
        return Err(invalid("one γ per group is required"));
    }
    errors
        .iter()
        .zip(gamma)
        .map(|(errs, &g)| {
            if errs.is_empty() {
                return Err(invalid("compliance needs at least one trial"));
            }
            let bad = errs.iter().filter(|e| e.is_none_or(|e| e > g)).count();
            let rate = bad as f64 / errs.len() as f64;
            Ok(Compliance { rate, pass: rate <= alpha })
        })
        .collect()
}

/// Relative standard error `(σ/√n)/μ`.
pub fn rse(sigma: f64, mu: f64, n: u64) -> Result<f64> {
    if mu == 0.0 {
        return Err(invalid("relative standard error is undefined for a zero mean"));
    }
    if n == 0 {
        return Err(invalid("relative standard error needs a positive sample size"));
    }
    Ok(sigma / (n as f64).sqrt() / mu)
}

/// `σ_i/μ_i` for each `(μ_i, σ_i)`.
pub fn coefficient_of_variation(stats: &[(f64, f64)]) -> Result<Vec<f64>> {
    stats
        .iter()
        .map(|&(mu, sigma)| {
            if mu > 0.0 {
                Ok(sigma / mu)
            } else {
                Err(invalid(format!("coefficient of variation needs a positive mean, got {mu}")))
            }
        })
        .collect()
}

/// Simpson's index of diversity `1 - Σ (N_i/N)²`.
pub fn diversity_index(counts: &[f64]) -> Result<f64> {
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(invalid("group counts must be finite and non-negative"));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(invalid("diversity needs a positive total"));
    }
    Ok(1.0 - counts.iter().map(|c| (c / total).powi(2)).sum::<f64>())
}

/// Population variance of the defined estimates; `None` if there are none.
pub fn estimator_variance(estimates: &[Option<f64>]) -> Option<f64> {
    let defined: Vec<f64> = estimates.iter().flatten().copied().collect();
    if defined.is_empty() {
        return None;
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    Some(defined.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Which variances the headline fairness score compares.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceScale {
    /// `Var(θ̂_i)/θ_i²`, comparable across groups with different means.
    #[default]
    Relative,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    pub group: String,
    pub true_mean: f64,
    pub gamma: f64,
    /// `None` when no trial produced an estimate.
    pub variance: Option<f64>,
    pub relative_variance: Option<f64>,
    pub violation_rate: f64,
    pub pass: bool,
    pub mean_successes: f64,
    pub undefined: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub alpha: f64,
    pub scale: VarianceScale,
    pub groups: Vec<GroupMetrics>,
    /// Fairness score on the chosen scale.
    pub xi_var: Option<f64>,
    pub xi_var_raw: Option<f64>,
    pub xi_var_relative: Option<f64>,
    /// Planned cost of the allocation.
    pub cost: f64,
    /// Cost as a percentage of the baseline allocation's cost.
    pub relative_cost: Option<f64>,
    pub mean_realized_cost: f64,
    pub trials: usize,
}

impl FairnessReport {
    /// Summarizes a trial report. Groups without any estimate make the
    /// fairness scores undefined.
    pub fn from_trials(
        report: &TrialReport,
        gamma: &[f64],
        alpha: f64,
        scale: VarianceScale,
        cost: f64,
        baseline_cost: Option<f64>,
    ) -> Result<Self> {
        let ng = report.groups.len();
        if gamma.len() != ng {
            return Err(invalid("one γ per group is required"));
        }
        let errors: Vec<_> = (0..ng).map(|i| report.errors(i)).collect();
        let compliance = confidence_compliance(&errors, gamma, alpha)?;
        let groups: Vec<GroupMetrics> = (0..ng)
            .map(|i| {
                let est = report.estimates(i);
                let variance = estimator_variance(&est);
                let truth = report.true_means[i];
                GroupMetrics {
                    group: report.groups[i].clone(),
                    true_mean: truth,
                    gamma: gamma[i],
                    variance,
                    relative_variance: variance.map(|v| v / (truth * truth)),
                    violation_rate: compliance[i].rate,
                    pass: compliance[i].pass,
                    mean_successes: report.successes(i).iter().sum::<u64>() as f64 / report.trials() as f64,
                    undefined: est.iter().filter(|e| e.is_none()).count() as u64,
                }
            })
            .collect();
        let xi = |f: fn(&GroupMetrics) -> Option<f64>| -> Option<f64> {
            let v: Option<Vec<f64>> = groups.iter().map(f).collect();
            v.and_then(|v| fairness_xi(&v).ok())
        };
        let xi_var_raw = xi(|g| g.variance);
        let xi_var_relative = xi(|g| g.relative_variance);
        Ok(FairnessReport {
            alpha,
            scale,
            xi_var: match scale {
                VarianceScale::Relative => xi_var_relative,
                VarianceScale::Raw => xi_var_raw,
            },
            xi_var_raw,
            xi_var_relative,
            cost,
            relative_cost: baseline_cost.filter(|&b| b > 0.0).map(|b| 100.0 * cost / b),
            mean_realized_cost: report.mean_cost(),
            trials: report.trials(),
            groups,
        })
    }

    pub fn all_pass(&self) -> bool {
        self.groups.iter().all(|g| g.pass)
    }

    pub fn write_json<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, self)?;
        Ok(())
    }

    /// One row per group, then an aggregate row with `group_id` `all`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record([
            "group_id",
            "true_mean",
            "gamma",
            "variance",
            "relative_variance",
            "violation_rate",
            "pass",
            "mean_successes",
            "undefined",
            "xi_var",
            "xi_var_raw",
            "xi_var_relative",
            "cost",
            "relative_cost",
        ])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for g in &self.groups {
            w.write_record([
                g.group.clone(),
                g.true_mean.to_string(),
                g.gamma.to_string(),
                opt(g.variance),
                opt(g.relative_variance),
                g.violation_rate.to_string(),
                g.pass.to_string(),
                g.mean_successes.to_string(),
                g.undefined.to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
            ])?;
        }
        let mut all = vec![String::from("all")];
        all.extend(std::iter::repeat_n(String::new(), 5));
        all.push(self.all_pass().to_string());
        all.extend(std::iter::repeat_n(String::new(), 2));
        all.extend([
            opt(self.xi_var),
            opt(self.xi_var_raw),
            opt(self.xi_var_relative),
            self.cost.to_string(),
            opt(self.relative_cost),
        ]);
        w.write_record(&all)?;
        w.flush()?;
        Ok(())
    }
}
