//! Config-driven experiments.
//!
//! A run crosses privacy levels with allocation methods. Each cell
//! privatizes the prior-year counts, fits variance proxies with rates taken
//! relative to the privatized group sizes, turns confidence targets into
//! sample requirements, allocates, and replicates the survey on the
//! ground-truth population.
//!
//! Randomness is split so that cells are comparable: the noise of a cell
//! depends only on ε, proxy trials only on the group, and survey trials
//! only on the method and trial index. Adding an ε or a method therefore
//! never shifts another cell's draws, and the same method sees the same
//! survey draws at every ε.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::allocator::{
    heuristic_allocation, optimize_phase1, optimize_two_phase, standard_allocation, Allocation, DesignInstance,
    DesignParams, Method,
};
use crate::error::{invalid, Error, Result};
use crate::metrics::{FairnessReport, VarianceScale};
use crate::par::Execution;
use crate::population::{
    count_matrix, generate_synthetic, group_stats, load_microdata, union_labels, CountMatrix, PopulationFrame,
    SyntheticSpec,
};
use crate::privacy::{aggregate_bias, privatize_counts, Epsilon, PrivacyParams};
use crate::proxy::{fit_inverse_curve, measure_variance, required_samples, ProxyCurve, RateGrid};
use crate::rng::{derive_seed, label_tag};
use crate::simulator::{replicate, FieldModel, SurveyFrame, TrialReport};

/// Contact rate of the standard and heuristic baselines.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum BaselineRate {
    Fixed(f64),
    /// Match the total contacts of the phase-1 optimum at the same ε.
    Matched(MatchedBudget),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchedBudget {
    Phase1Budget,
}

impl Default for BaselineRate {
    fn default() -> Self {
        BaselineRate::Fixed(0.01)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationFiles {
    pub prior: PathBuf,
    pub truth: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    pub epsilons: Vec<Epsilon>,
    pub baseline_rate: BaselineRate,
    pub variance_scale: VarianceScale,
    /// Repartition both frames into regions of this many individuals.
    pub region_size: Option<u64>,
    pub design: DesignParams,
    pub proxy: RateGrid,
    pub population: Option<PopulationFiles>,
    pub synthetic: Option<SyntheticSpec>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            trials: 1000,
            output_dir: PathBuf::from("out"),
            methods: vec![Method::Standard, Method::Heuristic, Method::Phase1, Method::TwoPhase],
            epsilons: vec![Epsilon::NoPrivacy],
            baseline_rate: BaselineRate::default(),
            variance_scale: VarianceScale::default(),
            region_size: None,
            design: DesignParams::default(),
            proxy: RateGrid::default(),
            population: None,
            synthetic: None,
        }
    }
}

impl ExperimentConfig {
    /// Checks the settings and that exactly one population source is named.
    pub fn validate(&self) -> Result<()> {
        self.validate_parameters()?;
        match (&self.population, &self.synthetic) {
            (Some(_), None) => Ok(()),
            (None, Some(spec)) => spec.validate(),
            _ => Err(invalid("exactly one of `population` and `synthetic` must be given")),
        }
    }

    /// Checks everything except the population source, for commands that
    /// take their inputs from elsewhere.
    pub fn validate_parameters(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(invalid("at least one method is required"));
        }
        if self.epsilons.is_empty() {
            return Err(invalid("at least one privacy level is required"));
        }
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if self.region_size == Some(0) {
            return Err(invalid("region size must be at least 1"));
        }
        if let BaselineRate::Fixed(r) = self.baseline_rate {
            if !(r > 0.0 && r <= 1.0) {
                return Err(invalid(format!("baseline rate {r} outside (0, 1]")));
            }
        }
        let d = &self.design;
        if !(d.alpha > 0.0 && d.alpha < 1.0) || !(d.gamma_fraction > 0.0) {
            return Err(invalid("alpha must be in (0, 1) and the gamma fraction positive"));
        }
        if !(self.proxy.points >= 1 && self.proxy.max_rate > 0.0 && self.proxy.max_rate <= 1.0 && self.proxy.trials >= 2)
        {
            return Err(invalid("proxy grid needs ≥ 1 point, a max rate in (0, 1] and ≥ 2 trials"));
        }
        Ok(())
    }

    /// Parses a TOML config without validating it.
    pub fn parse_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config = Self::parse_toml(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Schema(e.to_string()))
    }
}

/// Prior-year and ground-truth frames over the same labels, in sorted order.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub prior: PopulationFrame,
    pub truth: PopulationFrame,
}

impl Inputs {
    pub fn new(prior: PopulationFrame, truth: PopulationFrame) -> Result<Self> {
        let groups = union_labels(prior.group_labels(), truth.group_labels());
        let regions = union_labels(prior.region_labels(), truth.region_labels());
        Ok(Inputs { prior: prior.relabeled(&groups, &regions)?, truth: truth.relabeled(&groups, &regions)? })
    }

    /// Both frames cut into regions of `size` individuals.
    pub fn repartition(&self, size: u64) -> Result<Self> {
        Inputs::new(self.prior.repartition(size)?, self.truth.repartition(size)?)
    }
}

/// Two independent draws from `spec`: the prior year and the truth.
pub fn generate_inputs(spec: &SyntheticSpec) -> Result<Inputs> {
    let draw = |label: &str| {
        let seed = derive_seed(spec.seed, &[label_tag(label)]);
        generate_synthetic(&SyntheticSpec { seed, ..spec.clone() })
    };
    Inputs::new(draw("prior")?, draw("truth")?)
}

/// Loads or generates the inputs named by `config`. Relative paths resolve
/// against `base_dir`.
pub fn load_inputs(config: &ExperimentConfig, base_dir: &Path) -> Result<Inputs> {
    let inputs = match (&config.population, &config.synthetic) {
        (Some(files), _) => {
            let open = |p: &Path| -> Result<PopulationFrame> {
                load_microdata(std::io::BufReader::new(std::fs::File::open(base_dir.join(p))?))
            };
            Inputs::new(open(&files.prior)?, open(&files.truth)?)?
        }
        (None, Some(spec)) => generate_inputs(spec)?,
        (None, None) => return Err(invalid("no population configured")),
    };
    match config.region_size {
        Some(size) => inputs.repartition(size),
        None => Ok(inputs),
    }
}

/// Confidence widths `γ_i = fraction·μ_i` from the prior-year means.
pub fn gammas(prior: &PopulationFrame, fraction: f64) -> Result<Vec<f64>> {
    Ok(group_stats(prior)?.iter().map(|s| fraction * s.mean).collect())
}

/// Fits one proxy curve per group of the prior-year frame. Sampling rates
/// are relative to the frame's own group sizes, so `a_i·N_i` with those
/// sizes is the group's variance constant and does not move with the
/// privatized counts.
pub fn fit_proxies(prior: &PopulationFrame, grid: &RateGrid, seed: u64, exec: Execution) -> Result<Vec<ProxyCurve>> {
    let rates = grid.rates();
    (0..prior.num_groups())
        .map(|i| {
            let stream = derive_seed(seed, &[label_tag("proxy"), i as u64]);
            let points = measure_variance(prior, i, &rates, grid.trials, stream, exec)?;
            fit_inverse_curve(&prior.group_labels()[i], &points)
        })
        .collect()
}

/// Per-group minimum expected successes. `sizes` are the group sizes the
/// curves were fitted against.
pub fn requirements(curves: &[ProxyCurve], sizes: &[f64], alpha: f64, gammas: &[f64]) -> Result<Vec<f64>> {
    if curves.len() != sizes.len() || gammas.len() != sizes.len() {
        return Err(invalid("curves, sizes and gammas must have one entry per group"));
    }
    curves.iter().zip(sizes).zip(gammas).map(|((c, &n), &g)| required_samples(c, n, alpha, g)).collect()
}

/// Baseline rate in effect for `inst`.
pub fn baseline_rate(inst: &DesignInstance, rate: BaselineRate) -> Result<f64> {
    match rate {
        BaselineRate::Fixed(r) => Ok(r),
        BaselineRate::Matched(MatchedBudget::Phase1Budget) => {
            let total: f64 = inst.group_sizes().iter().sum();
            let contacts = optimize_phase1(inst)?.total_contacts();
            if total <= 0.0 || contacts <= 0.0 {
                return Err(invalid("cannot match a zero phase-1 budget"));
            }
            Ok((contacts / total).min(1.0))
        }
    }
}

pub fn allocate(method: Method, inst: &DesignInstance, rate: BaselineRate) -> Result<Allocation> {
    match method {
        Method::Standard => standard_allocation(inst, baseline_rate(inst, rate)?),
        Method::Heuristic => heuristic_allocation(inst, baseline_rate(inst, rate)?),
        Method::Phase1 => optimize_phase1(inst),
        Method::TwoPhase => optimize_two_phase(inst),
        Method::BruteForce => crate::allocator::brute_force_two_phase(inst),
    }
}

/// Seed of the survey trials of `method`; independent of ε.
pub fn trial_seed(seed: u64, method: Method) -> u64 {
    derive_seed(seed, &[label_tag("trials"), label_tag(method.name())])
}

pub fn privacy_seed(seed: u64) -> u64 {
    derive_seed(seed, &[label_tag("privacy")])
}

/// Designer's view at one privacy level.
#[derive(Debug, Clone)]
pub struct Design {
    pub epsilon: Epsilon,
    pub counts: CountMatrix,
    pub curves: Vec<ProxyCurve>,
    pub gammas: Vec<f64>,
    pub instance: DesignInstance,
}

/// Privatizes the prior counts at `epsilon` and builds the design instance.
/// The requirements come from the prior frame alone; the noisy counts only
/// set the contact fractions and the phase-2 coverage.
pub fn design(config: &ExperimentConfig, prior: &PopulationFrame, curves: &[ProxyCurve], epsilon: Epsilon) -> Result<Design> {
    let exact = count_matrix(prior);
    let params = PrivacyParams::counts(epsilon, derive_seed(privacy_seed(config.seed), &[epsilon.tag()]))?;
    let counts = privatize_counts(&exact, &params)?;
    let sizes = exact.group_totals();
    let gammas = gammas(prior, config.design.gamma_fraction)?;
    let req = requirements(curves, &sizes, config.design.alpha, &gammas)?;
    let instance = DesignInstance::uniform(counts.clone(), &config.design, req)?;
    Ok(Design { epsilon, counts, curves: curves.to_vec(), gammas, instance })
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub allocation: Allocation,
    pub trials: TrialReport,
    pub report: FairnessReport,
}

#[derive(Debug)]
pub struct Cell {
    pub epsilon: Epsilon,
    pub method: Method,
    pub outcome: Result<CellResult>,
}

#[derive(Debug)]
pub struct RunResult {
    pub designs: Vec<Result<Design>>,
    pub cells: Vec<Cell>,
}

impl RunResult {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.outcome.is_err()).count()
    }

    pub fn cell(&self, epsilon: Epsilon, method: Method) -> Option<&Cell> {
        self.cells.iter().find(|c| c.epsilon == epsilon && c.method == method)
    }

    pub fn failure_list(&self) -> Vec<Failure> {
        self.cells
            .iter()
            .filter_map(|c| {
                c.outcome.as_ref().err().map(|e| Failure { epsilon: c.epsilon, method: c.method, error: e.to_string() })
            })
            .collect()
    }
}

/// A cell that produced no result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub epsilon: Epsilon,
    pub method: Method,
    pub error: String,
}

/// `epsilon,method,error`; a header only when nothing failed.
pub fn write_failures_csv<W: Write>(failures: &[Failure], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["epsilon", "method", "error"])?;
    for f in failures {
        w.write_record([f.epsilon.to_string(), f.method.to_string(), f.error.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every (ε, method) cell. A failing cell records its error and the
/// others proceed.
pub fn run(config: &ExperimentConfig, inputs: &Inputs, exec: Execution) -> Result<RunResult> {
    config.validate()?;
    let frame = SurveyFrame::new(&inputs.truth)?;
    let curves = fit_proxies(&inputs.prior, &config.proxy, config.seed, exec)?;
    let mut designs = Vec::new();
    let mut cells = Vec::new();
    for &epsilon in &config.epsilons {
        let d = design(config, &inputs.prior, &curves, epsilon);
        match &d {
            Ok(d) => {
                let baseline = baseline_rate(&d.instance, config.baseline_rate)
                    .ok()
                    .and_then(|r| standard_allocation(&d.instance, r).ok())
                    .map(|a| a.cost);
                for &method in &config.methods {
                    let outcome = run_cell(config, &frame, d, method, baseline, exec);
                    cells.push(Cell { epsilon, method, outcome });
                }
            }
            Err(e) => {
                for &method in &config.methods {
                    cells.push(Cell { epsilon, method, outcome: Err(invalid(format!("design failed: {e}"))) });
                }
            }
        }
        designs.push(d);
    }
    Ok(RunResult { designs, cells })
}

fn run_cell(
    config: &ExperimentConfig,
    frame: &SurveyFrame,
    design: &Design,
    method: Method,
    baseline_cost: Option<f64>,
    exec: Execution,
) -> Result<CellResult> {
    let allocation = allocate(method, &design.instance, config.baseline_rate)?;
    let field = FieldModel::from_instance(&design.instance);
    let trials = replicate(frame, &allocation, &field, config.trials, trial_seed(config.seed, method), exec)?;
    let report = FairnessReport::from_trials(
        &trials,
        &design.gammas,
        config.design.alpha,
        config.variance_scale,
        allocation.cost,
        baseline_cost,
    )?;
    Ok(CellResult { allocation, trials, report })
}

/// One row of the long-format plot table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotRow {
    pub epsilon: Epsilon,
    pub method: Method,
    pub group: String,
    pub metric: String,
    pub value: f64,
}

/// Long-format metrics of every successful cell. Per-group metrics use the
/// group label; cell-wide metrics use `all`.
pub fn plot_rows(result: &RunResult) -> Vec<PlotRow> {
    let mut rows = Vec::new();
    for cell in &result.cells {
        let Ok(c) = &cell.outcome else { continue };
        let mut push = |group: &str, metric: &str, value: Option<f64>| {
            if let Some(value) = value {
                rows.push(PlotRow {
                    epsilon: cell.epsilon,
                    method: cell.method,
                    group: group.to_string(),
                    metric: metric.to_string(),
                    value,
                });
            }
        };
        let contacts = c.allocation.contacts();
        let agg = c.trials.aggregate();
        for (i, g) in c.report.groups.iter().enumerate() {
            push(&g.group, "contacts", Some(contacts[i]));
            push(&g.group, "expected_successes", Some(c.allocation.expected[i]));
            push(&g.group, "mean_successes", Some(g.mean_successes));
            push(&g.group, "variance", g.variance);
            push(&g.group, "relative_variance", g.relative_variance);
            push(&g.group, "mean_relative_error", agg.groups[i].mean_relative_error);
            push(&g.group, "violation_rate", Some(g.violation_rate));
            push(&g.group, "gamma_relative", Some(g.gamma / g.true_mean));
        }
        push("all", "xi_var", c.report.xi_var);
        push("all", "cost", Some(c.report.cost));
        push("all", "relative_cost", c.report.relative_cost);
        push("all", "regions", Some(c.allocation.selected_regions() as f64));
    }
    rows
}

pub fn write_plot_csv<W: Write>(rows: &[PlotRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["epsilon", "method", "group", "metric", "value"])?;
    for r in rows {
        w.write_record([r.epsilon.to_string(), r.method.to_string(), r.group.clone(), r.metric.clone(), r.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Design parameter varied by an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationParam {
    F1,
    F2,
    C2,
    Alpha,
    Gamma,
}

impl AblationParam {
    pub fn name(self) -> &'static str {
        match self {
            AblationParam::F1 => "f1",
            AblationParam::F2 => "f2",
            AblationParam::C2 => "c2",
            AblationParam::Alpha => "alpha",
            AblationParam::Gamma => "gamma",
        }
    }

    fn apply(self, base: &DesignParams, value: f64) -> DesignParams {
        let mut d = *base;
        match self {
            AblationParam::F1 => d.f1 = value,
            AblationParam::F2 => d.f2 = value,
            AblationParam::C2 => d.c2 = value,
            AblationParam::Alpha => d.alpha = value,
            AblationParam::Gamma => d.gamma_fraction = value,
        }
        d
    }
}

impl std::str::FromStr for AblationParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "f1" => Ok(AblationParam::F1),
            "f2" => Ok(AblationParam::F2),
            "c2" => Ok(AblationParam::C2),
            "alpha" => Ok(AblationParam::Alpha),
            "gamma" => Ok(AblationParam::Gamma),
            _ => Err(invalid(format!("unknown ablation parameter `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationPoint {
    pub value: f64,
    pub cost: Option<f64>,
    pub regions: Option<usize>,
    pub proven: Option<bool>,
    pub error: Option<String>,
}

/// Optimal two-phase cost at each grid value of `param`, other parameters
/// held at the config's design values. Uses exact prior counts. Infeasible
/// or invalid grid points are reported, not fatal.
pub fn ablate(
    config: &ExperimentConfig,
    prior: &PopulationFrame,
    param: AblationParam,
    grid: &[f64],
    exec: Execution,
) -> Result<Vec<AblationPoint>> {
    if grid.is_empty() {
        return Err(invalid("ablation grid is empty"));
    }
    let counts = count_matrix(prior);
    let sizes = counts.group_totals();
    let curves = fit_proxies(prior, &config.proxy, config.seed, exec)?;
    let stats = group_stats(prior)?;
    Ok(grid
        .iter()
        .map(|&value| {
            let point = || -> Result<Allocation> {
                let d = param.apply(&config.design, value);
                let gammas: Vec<f64> = stats.iter().map(|s| d.gamma_fraction * s.mean).collect();
                let req = requirements(&curves, &sizes, d.alpha, &gammas)?;
                optimize_two_phase(&DesignInstance::uniform(counts.clone(), &d, req)?)
            };
            match point() {
                Ok(a) => AblationPoint {
                    value,
                    cost: Some(a.cost),
                    regions: Some(a.selected_regions()),
                    proven: Some(a.optimality == crate::allocator::Optimality::Proven),
                    error: None,
                },
                Err(e) => AblationPoint { value, cost: None, regions: None, proven: None, error: Some(e.to_string()) },
            }
        })
        .collect())
}

pub fn write_ablation_csv<W: Write>(param: AblationParam, points: &[AblationPoint], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["parameter", "value", "cost", "regions", "proven", "error"])?;
    let opt = |v: Option<String>| v.unwrap_or_default();
    for p in points {
        w.write_record([
            param.name().to_string(),
            p.value.to_string(),
            opt(p.cost.map(|c| c.to_string())),
            opt(p.regions.map(|r| r.to_string())),
            opt(p.proven.map(|b| b.to_string())),
            opt(p.error.clone()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparsityRow {
    pub region_size: u64,
    pub regions: usize,
    pub epsilon: Epsilon,
    pub method: Method,
    pub group: String,
    pub variance: Option<f64>,
    pub relative_variance: Option<f64>,
    /// Expected clamping bias of the group's total, summed over regions.
    pub aggregate_bias: f64,
    pub error: Option<String>,
}

/// Repeats the run with the population cut into regions of each size.
/// Returns one row per (size, ε, method, group) plus the number of failed
/// cells.
pub fn sparsity(
    config: &ExperimentConfig,
    inputs: &Inputs,
    region_sizes: &[u64],
    exec: Execution,
) -> Result<(Vec<SparsityRow>, usize)> {
    if region_sizes.is_empty() || region_sizes.contains(&0) {
        return Err(invalid("region sizes must be a nonempty list of positive integers"));
    }
    let mut rows = Vec::new();
    let mut failures = 0;
    for &size in region_sizes {
        let parts = inputs.repartition(size)?;
        let exact = count_matrix(&parts.prior);
        let result = run(config, &parts, exec)?;
        failures += result.failures();
        let mut bias: BTreeMap<(u64, usize), f64> = BTreeMap::new();
        for &eps in &config.epsilons {
            let params = PrivacyParams::counts(eps, 0)?;
            for i in 0..exact.num_groups() {
                bias.insert((eps.tag(), i), aggregate_bias(exact.row(i), &params)?);
            }
        }
        for cell in &result.cells {
            for (i, group) in exact.group_labels().iter().enumerate() {
                let (variance, relative_variance, error) = match &cell.outcome {
                    Ok(c) => (c.report.groups[i].variance, c.report.groups[i].relative_variance, None),
                    Err(e) => (None, None, Some(e.to_string())),
                };
                rows.push(SparsityRow {
                    region_size: size,
                    regions: exact.num_regions(),
                    epsilon: cell.epsilon,
                    method: cell.method,
                    group: group.clone(),
                    variance,
                    relative_variance,
                    aggregate_bias: bias[&(cell.epsilon.tag(), i)],
                    error,
                });
            }
        }
    }
    Ok((rows, failures))
}

pub fn write_sparsity_csv<W: Write>(rows: &[SparsityRow], sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record([
        "region_size",
        "regions",
        "epsilon",
        "method",
        "group_id",
        "variance",
        "relative_variance",
        "aggregate_bias",
        "error",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.region_size.to_string(),
            r.regions.to_string(),
            r.epsilon.to_string(),
            r.method.to_string(),
            r.group.clone(),
            opt(r.variance),
            opt(r.relative_variance),
            r.aggregate_bias.to_string(),
            r.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::population::GroupSpec;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            groups: vec![
                GroupSpec { label: "major".into(), size: 16_000, mean: 50_000.0, sd: 30_000.0 },
                GroupSpec { label: "mid".into(), size: 3_000, mean: 40_000.0, sd: 30_000.0 },
                GroupSpec { label: "minor".into(), size: 1_000, mean: 30_000.0, sd: 18_000.0 },
            ],
            regions: 10,
            mixing: 0.2,
            seed: 17,
        }
    }

    fn config() -> ExperimentConfig {
        ExperimentConfig {
            trials: 50,
            epsilons: vec![Epsilon::NoPrivacy, Epsilon::Finite(0.1)],
            proxy: RateGrid { points: 5, max_rate: 0.1, trials: 50 },
            synthetic: Some(spec()),
            ..ExperimentConfig::default()
        }
    }

    #[test]
    fn config_parses_from_toml() {
        let text = r#"
            seed = 7
            trials = 20
            methods = ["standard", "two_phase"]
            epsilons = ["inf", 0.1]
            baseline_rate = "phase1_budget"

            [design]
            c2 = 250.0

            [synthetic]
            regions = 4
            mixing = 0.5
            seed = 1
            groups = [{ label = "a", size = 100, mean = 10.0, sd = 1.0 }]
        "#;
        let c = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(c.methods, vec![Method::Standard, Method::TwoPhase]);
        assert_eq!(c.epsilons, vec![Epsilon::NoPrivacy, Epsilon::Finite(0.1)]);
        assert_eq!(c.baseline_rate, BaselineRate::Matched(MatchedBudget::Phase1Budget));
        assert_eq!(c.design.c2, 250.0);
        assert_eq!(c.design.f1, 0.6);
        assert!(ExperimentConfig::from_toml("trials = 0\n[synthetic]\nregions=1\nmixing=0\nseed=0\ngroups=[]").is_err());
        assert!(matches!(ExperimentConfig::from_toml("bogus = 1"), Err(Error::Schema(_))));
        assert!(ExperimentConfig::from_toml("seed = 1").is_err());
    }

    #[test]
    fn generated_inputs_share_sizes_but_not_records() {
        let inputs = generate_inputs(&spec()).unwrap();
        assert_eq!(inputs.prior.group_sizes(), inputs.truth.group_sizes());
        assert_ne!(inputs.prior.records(), inputs.truth.records());
        let again = generate_inputs(&spec()).unwrap();
        assert_eq!(inputs.prior, again.prior);
    }

    #[test]
    fn run_is_deterministic_and_complete() {
        let c = config();
        let inputs = generate_inputs(&spec()).unwrap();
        let a = run(&c, &inputs, Execution::default()).unwrap();
        let b = run(&c, &inputs, Execution::Sequential).unwrap();
        assert_eq!(a.cells.len(), 8);
        assert_eq!(a.failures(), 0);
        assert_eq!(plot_rows(&a), plot_rows(&b));
        let std = a.cell(Epsilon::NoPrivacy, Method::Standard).unwrap().outcome.as_ref().unwrap();
        assert_eq!(std.report.relative_cost, Some(100.0));
    }

    #[test]
    fn survey_draws_do_not_depend_on_epsilon_or_method_set() {
        let inputs = generate_inputs(&spec()).unwrap();
        let full = run(&config(), &inputs, Execution::default()).unwrap();
        let only = ExperimentConfig { methods: vec![Method::Phase1], epsilons: vec![Epsilon::Finite(0.1)], ..config() };
        let part = run(&only, &inputs, Execution::default()).unwrap();
        let a = &full.cell(Epsilon::Finite(0.1), Method::Phase1).unwrap().outcome.as_ref().unwrap().trials;
        let b = &part.cells[0].outcome.as_ref().unwrap().trials;
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_cells_do_not_abort_the_run() {
        // A tiny confidence width makes every requirement exceed what the
        // population can supply.
        let c = ExperimentConfig {
            design: DesignParams { gamma_fraction: 0.001, ..DesignParams::default() },
            ..config()
        };
        let inputs = generate_inputs(&spec()).unwrap();
        let r = run(&c, &inputs, Execution::default()).unwrap();
        assert!(r.failures() > 0);
        let ok = r.cell(Epsilon::NoPrivacy, Method::Standard).unwrap();
        assert!(ok.outcome.is_ok());
        let bad = r.cell(Epsilon::NoPrivacy, Method::TwoPhase).unwrap();
        assert!(matches!(bad.outcome, Err(Error::Infeasible(_))));
    }

    #[test]
    fn ablation_in_alpha_is_nonincreasing() {
        let inputs = generate_inputs(&spec()).unwrap();
        let pts = ablate(&config(), &inputs.prior, AblationParam::Alpha, &[0.1, 0.2, 0.3, 0.5], Execution::default())
            .unwrap();
        let costs: Vec<f64> = pts.iter().map(|p| p.cost.unwrap()).collect();
        assert!(costs.windows(2).all(|w| w[1] <= w[0]), "{costs:?}");
        let bad = ablate(&config(), &inputs.prior, AblationParam::Alpha, &[1.5], Execution::default()).unwrap();
        assert!(bad[0].error.is_some());
    }

    #[test]
    fn sparsity_bias_grows_as_regions_shrink() {
        let c = ExperimentConfig { methods: vec![Method::Standard], epsilons: vec![Epsilon::Finite(0.1)], ..config() };
        let inputs = generate_inputs(&spec()).unwrap();
        let (rows, failures) = sparsity(&c, &inputs, &[20_000, 2_000, 200], Execution::default()).unwrap();
        assert_eq!(failures, 0);
        let minor: Vec<&SparsityRow> = rows.iter().filter(|r| r.group == "minor").collect();
        assert_eq!(minor.len(), 3);
        assert_eq!(minor[0].regions, 1);
        assert!(minor[0].aggregate_bias < minor[1].aggregate_bias);
        assert!(minor[1].aggregate_bias < minor[2].aggregate_bias);
    }
}
