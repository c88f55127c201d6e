//! One function per subcommand.
//!
//! The single-step commands (`privatize`, `fit-proxy`, `optimize`,
//! `simulate`) derive their seeds exactly as `run` does, so chaining them
//! reproduces a `run` cell.

use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use fairsurvey::allocator::{Allocation, DesignInstance};
use fairsurvey::experiment::{
    self, allocate, fit_proxies, gammas, load_inputs, privacy_seed, requirements, trial_seed, write_ablation_csv,
    write_failures_csv, write_plot_csv, write_sparsity_csv, AblationParam, Failure,
};
use fairsurvey::metrics::FairnessReport;
use fairsurvey::population::{count_matrix, load_microdata, write_microdata, CountMatrix, PopulationFrame};
use fairsurvey::privacy::{privatize_counts, PrivacyParams};
use fairsurvey::proxy::{read_curves, write_curves, ProxyCurve};
use fairsurvey::rng::derive_seed;
use fairsurvey::simulator::{replicate, FieldModel, SurveyFrame};

use crate::output::Written;
use crate::{Settings, Status};

pub fn generate(s: &Settings) -> Result<Status> {
    let Some(spec) = &s.config.synthetic else {
        bail!("`generate` needs a [synthetic] section in the config");
    };
    spec.validate()?;
    let mut inputs = experiment::generate_inputs(spec)?;
    if let Some(size) = s.config.region_size {
        inputs = inputs.repartition(size)?;
    }
    let out = &s.config.output_dir;
    let mut written = Written::default();
    written.file(out.join("prior.csv"), |w| write_microdata(&inputs.prior, w))?;
    written.file(out.join("truth.csv"), |w| write_microdata(&inputs.truth, w))?;
    finish(&written, Status::Complete)
}

pub fn privatize(s: &Settings, input: &Path, out: Option<PathBuf>) -> Result<Status> {
    let [epsilon] = s.config.epsilons[..] else {
        bail!("`privatize` takes exactly one --epsilon, got {}", s.config.epsilons.len());
    };
    let frame = read_frame(s, input)?;
    let params = PrivacyParams::counts(epsilon, derive_seed(privacy_seed(s.config.seed), &[epsilon.tag()]))?;
    let counts = privatize_counts(&count_matrix(&frame), &params)?;
    let mut written = Written::default();
    written.file(out.unwrap_or_else(|| s.config.output_dir.join("counts.csv")), |w| counts.write_csv(w))?;
    finish(&written, Status::Complete)
}

pub fn fit_proxy(s: &Settings, prior: &Path, out: Option<PathBuf>) -> Result<Status> {
    let prior = read_frame(s, prior)?;
    let curves = fit_proxies(&prior, &s.config.proxy, s.config.seed, s.exec)?;
    let mut written = Written::default();
    written.file(out.unwrap_or_else(|| s.config.output_dir.join("curves.csv")), |w| write_curves(&curves, w))?;
    finish(&written, Status::Complete)
}

pub fn optimize(s: &Settings, counts: &Path, curves: &Path, prior: &Path) -> Result<Status> {
    let counts = read_counts(counts)?;
    let labels = counts.group_labels().to_vec();
    let curves = read_curves(open(curves)?).with_context(|| format!("reading curves {}", curves.display()))?;
    let curves = labels
        .iter()
        .map(|label| {
            curves.iter().find(|c| &c.group == label).cloned().with_context(|| format!("no proxy curve for group `{label}`"))
        })
        .collect::<Result<Vec<ProxyCurve>>>()?;
    let prior = read_frame(s, prior)?;
    let gammas = align(&prior, &labels, gammas(&prior, s.config.design.gamma_fraction)?)?;
    let sizes = align(&prior, &labels, prior.group_sizes().iter().map(|&n| n as f64).collect())?;
    let req = requirements(&curves, &sizes, s.config.design.alpha, &gammas)?;
    let epsilon = counts.epsilon();
    let inst = DesignInstance::uniform(counts, &s.config.design, req)?;

    let out = &s.config.output_dir;
    let mut written = Written::default();
    let mut failures = Vec::new();
    for &method in &s.config.methods {
        match allocate(method, &inst, s.config.baseline_rate) {
            Ok(a) => write_allocation(&mut written, &out.join(method.name()), &a)?,
            Err(e) => {
                eprintln!("{method}: {e}");
                failures.push(Failure { epsilon, method, error: e.to_string() });
            }
        }
    }
    finish_with_failures(&mut written, out, &failures)
}

pub fn simulate(s: &Settings, truth: &Path, allocation: &Path, prior: Option<&Path>) -> Result<Status> {
    let alloc =
        Allocation::read_json(open(allocation)?).with_context(|| format!("reading allocation {}", allocation.display()))?;
    let truth = read_frame(s, truth)?
        .relabeled(&alloc.groups, &alloc.regions)
        .context("the truth does not match the allocation's groups and regions")?;
    let gamma_source = match prior {
        Some(p) => read_frame(s, p)?,
        None => truth.clone(),
    };
    let gammas = align(&gamma_source, &alloc.groups, gammas(&gamma_source, s.config.design.gamma_fraction)?)?;
    let frame = SurveyFrame::new(&truth)?;
    let field = FieldModel::uniform(&s.config.design, alloc.groups.len(), alloc.regions.len());
    let trials = replicate(&frame, &alloc, &field, s.config.trials, trial_seed(s.config.seed, alloc.method), s.exec)?;
    let report = FairnessReport::from_trials(
        &trials,
        &gammas,
        s.config.design.alpha,
        s.config.variance_scale,
        alloc.cost,
        None,
    )?;
    let out = &s.config.output_dir;
    let mut written = Written::default();
    written.file(out.join("trials.csv"), |w| trials.write_csv(w))?;
    written.file(out.join("aggregate.json"), |w| trials.write_aggregate_json(w))?;
    written.file(out.join("report.json"), |w| report.write_json(w))?;
    written.file(out.join("report.csv"), |w| report.write_csv(w))?;
    finish(&written, Status::Complete)
}

pub fn run(s: &Settings) -> Result<Status> {
    s.config.validate()?;
    let inputs = load_inputs(&s.config, &s.base_dir)?;
    let result = experiment::run(&s.config, &inputs, s.exec)?;

    let out = &s.config.output_dir;
    let mut written = Written::default();
    let toml = s.config.to_toml()?;
    written.file(out.join("config.toml"), |w| Ok(w.write_all(toml.as_bytes())?))?;
    for (epsilon, design) in s.config.epsilons.iter().zip(&result.designs) {
        if let Ok(d) = design {
            let dir = out.join("designs").join(format!("eps-{epsilon}"));
            written.file(dir.join("counts.csv"), |w| d.counts.write_csv(w))?;
            written.file(dir.join("curves.csv"), |w| write_curves(&d.curves, w))?;
        }
    }
    for cell in &result.cells {
        let Ok(c) = &cell.outcome else { continue };
        let dir = out.join("cells").join(format!("eps-{}", cell.epsilon)).join(cell.method.name());
        write_allocation(&mut written, &dir, &c.allocation)?;
        written.file(dir.join("trials.csv"), |w| c.trials.write_csv(w))?;
        written.file(dir.join("aggregate.json"), |w| c.trials.write_aggregate_json(w))?;
        written.file(dir.join("report.json"), |w| c.report.write_json(w))?;
        written.file(dir.join("report.csv"), |w| c.report.write_csv(w))?;
    }
    let rows = experiment::plot_rows(&result);
    written.file(out.join("plot.csv"), |w| write_plot_csv(&rows, w))?;
    let failures = result.failure_list();
    for f in &failures {
        eprintln!("eps {} / {}: {}", f.epsilon, f.method, f.error);
    }
    finish_with_failures(&mut written, out, &failures)
}

pub fn ablate(s: &Settings, param: AblationParam, grid: &[f64]) -> Result<Status> {
    s.config.validate()?;
    let inputs = load_inputs(&s.config, &s.base_dir)?;
    let points = experiment::ablate(&s.config, &inputs.prior, param, grid, s.exec)?;
    let mut written = Written::default();
    let path = s.config.output_dir.join(format!("ablation_{}.csv", param.name()));
    written.file(path, |w| write_ablation_csv(param, &points, w))?;
    let failed = points.iter().filter(|p| p.error.is_some()).count();
    for p in points.iter().filter(|p| p.error.is_some()) {
        eprintln!("{} = {}: {}", param.name(), p.value, p.error.as_deref().unwrap_or_default());
    }
    finish(&written, if failed == 0 { Status::Complete } else { Status::Partial(failed) })
}

pub fn sparsity(s: &Settings, sizes: &[u64]) -> Result<Status> {
    s.config.validate()?;
    let inputs = load_inputs(&s.config, &s.base_dir)?;
    let (rows, failed) = experiment::sparsity(&s.config, &inputs, sizes, s.exec)?;
    let mut written = Written::default();
    written.file(s.config.output_dir.join("sparsity.csv"), |w| write_sparsity_csv(&rows, w))?;
    finish(&written, if failed == 0 { Status::Complete } else { Status::Partial(failed) })
}

fn write_allocation(written: &mut Written, dir: &Path, a: &Allocation) -> Result<()> {
    written.file(dir.join("allocation.json"), |w| a.write_json(w))?;
    written.file(dir.join("groups.csv"), |w| a.write_groups_csv(w))?;
    written.file(dir.join("regions.csv"), |w| a.write_regions_csv(w))?;
    Ok(())
}

/// Always writes `failures.csv`, so a stale one from an earlier run never
/// survives a clean rerun.
fn finish_with_failures(written: &mut Written, out: &Path, failures: &[Failure]) -> Result<Status> {
    written.file(out.join("failures.csv"), |w| write_failures_csv(failures, w))?;
    let status = if failures.is_empty() { Status::Complete } else { Status::Partial(failures.len()) };
    finish(written, status)
}

fn finish(written: &Written, status: Status) -> Result<Status> {
    for p in written.paths() {
        println!("{}", p.display());
    }
    Ok(status)
}

/// Reorders per-group `values` of `frame` to follow `labels`.
fn align(frame: &PopulationFrame, labels: &[String], values: Vec<f64>) -> Result<Vec<f64>> {
    labels
        .iter()
        .map(|label| {
            frame.group_index(label).map(|i| values[i]).with_context(|| format!("group `{label}` has no prior-year data"))
        })
        .collect()
}

/// Microdata from `path` with sorted labels, as `run` sees it, repartitioned
/// if the settings ask for it.
fn read_frame(s: &Settings, path: &Path) -> Result<PopulationFrame> {
    let frame =
        load_microdata(open(path)?).and_then(|f| f.sorted()).with_context(|| format!("reading microdata {}", path.display()))?;
    Ok(match s.config.region_size {
        Some(size) => frame.repartition(size)?,
        None => frame,
    })
}

fn read_counts(path: &Path) -> Result<CountMatrix> {
    CountMatrix::read_csv(open(path)?).with_context(|| format!("reading counts {}", path.display()))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?))
}
