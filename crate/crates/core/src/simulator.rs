//! Monte Carlo execution of an allocation against a ground-truth population.
//!
//! Phase-2 regions are surveyed first: `round(g_r·N^r)` residents are drawn
//! without replacement from each selected region and respond with
//! probability `1 - F2` of their group. Phase 1 then draws
//! `round(p_i·Ñ_i)` members of each group (capped at the true size), where
//! `Ñ_i` is the size the designer planned with; anyone already visited in
//! phase 2 is skipped, so each individual contributes at most once and the
//! phase-2 record is kept. Remaining contacts respond with probability
//! `1 - F1`.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::allocator::{Allocation, DesignInstance, DesignParams};
use crate::error::{invalid, Result};
use crate::par::{map_indexed, Execution};
use crate::population::{group_stats, PopulationFrame};
use crate::rng::{self, label_tag, stream, StreamRng};

/// Failure rates, regional sampling rates and unit costs used in the field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldModel {
    pub f1: Vec<f64>,
    pub f2: Vec<f64>,
    pub g: Vec<f64>,
    pub c1: f64,
    pub c2: f64,
}

impl FieldModel {
    pub fn from_instance(inst: &DesignInstance) -> Self {
        FieldModel {
            f1: inst.f1().to_vec(),
            f2: inst.f2().to_vec(),
            g: inst.sampling_rates().to_vec(),
            c1: inst.c1(),
            c2: inst.c2(),
        }
    }

    pub fn uniform(params: &DesignParams, groups: usize, regions: usize) -> Self {
        FieldModel {
            f1: vec![params.f1; groups],
            f2: vec![params.f2; groups],
            g: vec![params.g; regions],
            c1: params.c1,
            c2: params.c2,
        }
    }
}

/// A population indexed for repeated sampling.
#[derive(Debug, Clone)]
pub struct SurveyFrame {
    group_labels: Vec<String>,
    region_labels: Vec<String>,
    /// Values of every individual, per group.
    values: Vec<Vec<f64>>,
    /// `(group, index into values[group])` of every resident, per region.
    residents: Vec<Vec<(u32, u32)>>,
    true_means: Vec<f64>,
}

impl SurveyFrame {
    /// Errors if any group is empty, since its true mean is undefined.
    pub fn new(frame: &PopulationFrame) -> Result<Self> {
        let stats = group_stats(frame)?;
        let mut values = vec![Vec::new(); frame.num_groups()];
        let mut residents = vec![Vec::new(); frame.num_regions()];
        for rec in frame.records() {
            for _ in 0..rec.weight {
                let idx = values[rec.group].len() as u32;
                values[rec.group].push(rec.value);
                residents[rec.region].push((rec.group as u32, idx));
            }
        }
        Ok(SurveyFrame {
            group_labels: frame.group_labels().to_vec(),
            region_labels: frame.region_labels().to_vec(),
            values,
            residents,
            true_means: stats.iter().map(|s| s.mean).collect(),
        })
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    pub fn true_means(&self) -> &[f64] {
        &self.true_means
    }

    pub fn group_sizes(&self) -> Vec<u64> {
        self.values.iter().map(|v| v.len() as u64).collect()
    }

    pub fn region_sizes(&self) -> Vec<u64> {
        self.residents.iter().map(|v| v.len() as u64).collect()
    }

    fn check(&self, alloc: &Allocation, field: &FieldModel) -> Result<()> {
        if alloc.groups != self.group_labels || alloc.regions != self.region_labels {
            return Err(invalid("allocation labels do not match the population's groups and regions"));
        }
        let (ng, nr) = (self.group_labels.len(), self.region_labels.len());
        if alloc.p.len() != ng
            || alloc.planned_sizes.len() != ng
            || alloc.z.len() != nr
            || field.f1.len() != ng
            || field.f2.len() != ng
            || field.g.len() != nr
        {
            return Err(invalid("allocation or field model dimensions do not match the population"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurveyOutcome {
    pub successes: Vec<u64>,
    /// Mean of respondents' values; `None` when a group had no respondents.
    pub estimates: Vec<Option<f64>>,
    /// Individuals contacted per group across both phases.
    pub contacted: Vec<u64>,
    pub cost: f64,
}

/// Phase-1 contacts executed for group `i`.
pub fn phase1_contacts(alloc: &Allocation, group: usize, true_size: u64) -> u64 {
    let planned = (alloc.p[group] * alloc.planned_sizes[group]).round_ties_even();
    (planned.max(0.0) as u64).min(true_size)
}

/// Residents drawn from region `r` when it is selected.
pub fn phase2_draws(g: f64, region_size: u64) -> u64 {
    ((g * region_size as f64).round_ties_even() as u64).min(region_size)
}

pub fn run_survey<R: Rng + ?Sized>(
    frame: &SurveyFrame,
    alloc: &Allocation,
    field: &FieldModel,
    rng: &mut R,
) -> Result<SurveyOutcome> {
    frame.check(alloc, field)?;
    Ok(survey(frame, alloc, field, rng))
}

const PHASE1: u64 = 1;
const PHASE2: u64 = 2;
const SELECT: u64 = 0;
const RESPOND: u64 = 1;

fn survey<R: Rng + ?Sized>(frame: &SurveyFrame, alloc: &Allocation, field: &FieldModel, rng: &mut R) -> SurveyOutcome {
    // Each region visit and each group's phase-1 sample draws from its own
    // sub-stream: selection as a permutation prefix, responses in draw
    // order. A trial seed therefore surveys nested sets of people when a
    // plan changes slightly, which keeps comparisons across plans sharp.
    let base: u64 = rng.random();
    let ng = frame.group_labels.len();
    let mut successes = vec![0u64; ng];
    let mut sums = vec![0.0f64; ng];
    let mut contacted = vec![0u64; ng];
    let mut visited: Vec<Vec<u32>> = vec![Vec::new(); ng];
    let mut regions = 0usize;

    for (r, people) in frame.residents.iter().enumerate() {
        if !alloc.z[r] {
            continue;
        }
        regions += 1;
        let k = phase2_draws(field.g[r], people.len() as u64) as usize;
        let picks = rng::permutation_prefix(&mut rng::stream(base, &[PHASE2, SELECT, r as u64]), people.len(), k);
        let mut replies = rng::stream(base, &[PHASE2, RESPOND, r as u64]);
        for j in picks {
            let (gi, idx) = people[j];
            let gi = gi as usize;
            visited[gi].push(idx);
            contacted[gi] += 1;
            if replies.random::<f64>() >= field.f2[gi] {
                successes[gi] += 1;
                sums[gi] += frame.values[gi][idx as usize];
            }
        }
    }
    visited.iter_mut().for_each(|v| v.sort_unstable());

    let mut phase1_total = 0u64;
    for i in 0..ng {
        let values = &frame.values[i];
        let k = phase1_contacts(alloc, i, values.len() as u64) as usize;
        if k == 0 {
            continue;
        }
        let picks = rng::permutation_prefix(&mut rng::stream(base, &[PHASE1, SELECT, i as u64]), values.len(), k);
        let mut replies = rng::stream(base, &[PHASE1, RESPOND, i as u64]);
        for j in picks {
            // Drawn before the skip so later positions keep their draws.
            let u = replies.random::<f64>();
            if visited[i].binary_search(&(j as u32)).is_ok() {
                continue;
            }
            phase1_total += 1;
            contacted[i] += 1;
            if u >= field.f1[i] {
                successes[i] += 1;
                sums[i] += values[j];
            }
        }
    }

    let estimates = successes
        .iter()
        .zip(&sums)
        .map(|(&n, &s)| (n > 0).then(|| s / n as f64))
        .collect();
    SurveyOutcome {
        successes,
        estimates,
        contacted,
        cost: field.c1 * phase1_total as f64 + field.c2 * regions as f64,
    }
}

/// Per-trial survey outcomes for one allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub groups: Vec<String>,
    pub true_means: Vec<f64>,
    pub seed: u64,
    pub outcomes: Vec<SurveyOutcome>,
}

/// Per-group aggregate over all trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAggregate {
    pub group: String,
    pub true_mean: f64,
    pub mean_successes: f64,
    pub mean_estimate: Option<f64>,
    pub mean_relative_error: Option<f64>,
    pub undefined: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportAggregate {
    pub trials: usize,
    pub seed: u64,
    pub mean_cost: f64,
    pub groups: Vec<GroupAggregate>,
}

impl TrialReport {
    pub fn trials(&self) -> usize {
        self.outcomes.len()
    }

    pub fn estimates(&self, group: usize) -> Vec<Option<f64>> {
        self.outcomes.iter().map(|o| o.estimates[group]).collect()
    }

    pub fn successes(&self, group: usize) -> Vec<u64> {
        self.outcomes.iter().map(|o| o.successes[group]).collect()
    }

    /// Absolute errors `|θ̂_i - θ_i|` per trial; `None` where undefined.
    pub fn errors(&self, group: usize) -> Vec<Option<f64>> {
        let truth = self.true_means[group];
        self.outcomes.iter().map(|o| o.estimates[group].map(|e| (e - truth).abs())).collect()
    }

    pub fn relative_errors(&self, group: usize) -> Vec<Option<f64>> {
        let truth = self.true_means[group];
        self.errors(group).into_iter().map(|e| e.map(|e| e / truth.abs())).collect()
    }

    pub fn mean_cost(&self) -> f64 {
        self.outcomes.iter().map(|o| o.cost).sum::<f64>() / self.trials() as f64
    }

    pub fn aggregate(&self) -> ReportAggregate {
        let t = self.trials() as f64;
        let groups = self
            .groups
            .iter()
            .enumerate()
            .map(|(i, g)| {
                let est: Vec<f64> = self.estimates(i).into_iter().flatten().collect();
                let rel: Vec<f64> = self.relative_errors(i).into_iter().flatten().collect();
                let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
                GroupAggregate {
                    group: g.clone(),
                    true_mean: self.true_means[i],
                    mean_successes: self.successes(i).iter().sum::<u64>() as f64 / t,
                    mean_estimate: mean(&est),
                    mean_relative_error: mean(&rel),
                    undefined: (self.trials() - est.len()) as u64,
                }
            })
            .collect();
        ReportAggregate { trials: self.trials(), seed: self.seed, mean_cost: self.mean_cost(), groups }
    }

    /// One row per (trial, group); undefined estimates leave the value
    /// columns empty.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["trial", "group_id", "successes", "estimate", "error", "relative_error"])?;
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for (t, o) in self.outcomes.iter().enumerate() {
            for (i, g) in self.groups.iter().enumerate() {
                let est = o.estimates[i];
                let err = est.map(|e| (e - self.true_means[i]).abs());
                let rel = err.map(|e| e / self.true_means[i].abs());
                w.write_record([t.to_string(), g.clone(), o.successes[i].to_string(), opt(est), opt(err), opt(rel)])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_aggregate_json<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, &self.aggregate())?;
        Ok(())
    }
}

/// Runs `trials` independent surveys. Trial `t` draws from its own stream
/// derived from `(seed, t)`, so the report is the same under any execution.
pub fn replicate(
    frame: &SurveyFrame,
    alloc: &Allocation,
    field: &FieldModel,
    trials: usize,
    seed: u64,
    exec: Execution,
) -> Result<TrialReport> {
    if trials == 0 {
        return Err(invalid("at least one trial is required"));
    }
    frame.check(alloc, field)?;
    let tag = label_tag("survey");
    let outcomes = map_indexed(exec, trials, |t| {
        let mut rng: StreamRng = stream(seed, &[tag, t as u64]);
        survey(frame, alloc, field, &mut rng)
    });
    Ok(TrialReport { groups: frame.group_labels.clone(), true_means: frame.true_means.clone(), seed, outcomes })
}
