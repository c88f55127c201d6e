//! Survey allocations.
//!
//! An allocation contacts a fraction `p_i` of each group remotely (phase 1)
//! and deploys field workers to a subset of regions (phase 2), each sampling
//! a fraction `g_r` of the region. Expected successful responses are
//!
//! ```text
//! n_i = p_i·N_i·(1 - F1_i) + Σ_r z_r·g_r·N_i^r·(1 - F2_i)
//! ```
//!
//! and cost is `c1·Σ p_i·N_i + c2·Σ z_r`, where all counts are the ones the
//! designer can see (possibly privatized).

mod search;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result, Shortfall};
use crate::population::CountMatrix;

pub use search::{brute_force_two_phase, optimize_two_phase, optimize_two_phase_with, MAX_BRUTE_FORCE_REGIONS};

pub const DEFAULT_NODE_BUDGET: u64 = 1_000_000;

/// Design defaults: α = 0.1, γ_i = 10% of the prior group mean,
/// F1 = 0.6, F2 = 0.2, c1 = 1, c2 = 500, g_r = 0.1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DesignParams {
    pub alpha: f64,
    pub gamma_fraction: f64,
    pub f1: f64,
    pub f2: f64,
    pub c1: f64,
    pub c2: f64,
    pub g: f64,
}

impl Default for DesignParams {
    fn default() -> Self {
        Self { alpha: 0.1, gamma_fraction: 0.1, f1: 0.6, f2: 0.2, c1: 1.0, c2: 500.0, g: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DesignInstance {
    counts: CountMatrix,
    sizes: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    c1: f64,
    c2: f64,
    g: Vec<f64>,
    requirements: Vec<f64>,
}

impl DesignInstance {
    pub fn new(
        counts: CountMatrix,
        f1: Vec<f64>,
        f2: Vec<f64>,
        c1: f64,
        c2: f64,
        g: Vec<f64>,
        requirements: Vec<f64>,
    ) -> Result<Self> {
        let (ng, nr) = (counts.num_groups(), counts.num_regions());
        if f1.len() != ng || f2.len() != ng || requirements.len() != ng {
            return Err(invalid("per-group vectors must have one entry per group"));
        }
        if g.len() != nr {
            return Err(invalid("sampling rates must have one entry per region"));
        }
        if let Some(f) = f1.iter().chain(&f2).find(|f| !(**f >= 0.0 && **f < 1.0)) {
            return Err(invalid(format!("failure rate {f} outside [0, 1)")));
        }
        if let Some(x) = g.iter().find(|x| !(**x > 0.0 && **x <= 1.0)) {
            return Err(invalid(format!("regional sampling rate {x} outside (0, 1]")));
        }
        if let Some(r) = requirements.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
            return Err(invalid(format!("requirement {r} must be finite and non-negative")));
        }
        if !(c1 > 0.0 && c1.is_finite() && c2 > 0.0 && c2.is_finite()) {
            return Err(invalid("costs must be positive and finite"));
        }
        let sizes = counts.group_totals();
        Ok(Self { counts, sizes, f1, f2, c1, c2, g, requirements })
    }

    /// Uniform rates and costs from `params`.
    pub fn uniform(counts: CountMatrix, params: &DesignParams, requirements: Vec<f64>) -> Result<Self> {
        let (ng, nr) = (counts.num_groups(), counts.num_regions());
        Self::new(
            counts,
            vec![params.f1; ng],
            vec![params.f2; ng],
            params.c1,
            params.c2,
            vec![params.g; nr],
            requirements,
        )
    }

    pub fn counts(&self) -> &CountMatrix {
        &self.counts
    }

    /// Designer-visible group sizes `Ñ_i`.
    pub fn group_sizes(&self) -> &[f64] {
        &self.sizes
    }

    pub fn f1(&self) -> &[f64] {
        &self.f1
    }

    pub fn f2(&self) -> &[f64] {
        &self.f2
    }

    pub fn c1(&self) -> f64 {
        self.c1
    }

    pub fn c2(&self) -> f64 {
        self.c2
    }

    pub fn sampling_rates(&self) -> &[f64] {
        &self.g
    }

    pub fn requirements(&self) -> &[f64] {
        &self.requirements
    }

    pub fn num_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn num_regions(&self) -> usize {
        self.g.len()
    }

    pub fn with_requirements(&self, requirements: Vec<f64>) -> Result<Self> {
        Self::new(self.counts.clone(), self.f1.clone(), self.f2.clone(), self.c1, self.c2, self.g.clone(), requirements)
    }

    pub fn with_failure_rates(&self, f1: Vec<f64>, f2: Vec<f64>) -> Result<Self> {
        Self::new(self.counts.clone(), f1, f2, self.c1, self.c2, self.g.clone(), self.requirements.clone())
    }

    pub fn with_costs(&self, c1: f64, c2: f64) -> Result<Self> {
        Self::new(self.counts.clone(), self.f1.clone(), self.f2.clone(), c1, c2, self.g.clone(), self.requirements.clone())
    }

    /// Expected phase-2 successes of group `i` if region `r` is selected.
    pub fn region_yield(&self, group: usize, region: usize) -> f64 {
        self.g[region] * self.counts.get(group, region) * (1.0 - self.f2[group])
    }

    /// Largest expected phase-1 successes for group `i` (everyone contacted).
    pub fn phase1_capacity(&self, group: usize) -> f64 {
        self.sizes[group] * (1.0 - self.f1[group])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Standard,
    Heuristic,
    Phase1,
    TwoPhase,
    BruteForce,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Standard => "standard",
            Method::Heuristic => "heuristic",
            Method::Phase1 => "phase1",
            Method::TwoPhase => "two_phase",
            Method::BruteForce => "brute_force",
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Method::Standard),
            "heuristic" => Ok(Method::Heuristic),
            "phase1" => Ok(Method::Phase1),
            "two_phase" => Ok(Method::TwoPhase),
            "brute_force" => Ok(Method::BruteForce),
            _ => Err(invalid(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimality {
    /// Not the output of an optimizer.
    NotApplicable,
    Proven,
    /// Search stopped at its node budget; the incumbent is returned.
    NotProven,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub method: Method,
    pub groups: Vec<String>,
    pub regions: Vec<String>,
    /// Phase-1 contact fraction per group.
    pub p: Vec<f64>,
    /// Phase-2 region selection.
    pub z: Vec<bool>,
    /// Group sizes the plan was made with; phase-1 contacts are `p_i` times these.
    pub planned_sizes: Vec<f64>,
    /// Expected successful responses per group.
    pub expected: Vec<f64>,
    pub cost: f64,
    pub optimality: Optimality,
}

impl Allocation {
    pub(crate) fn build(
        method: Method,
        inst: &DesignInstance,
        p: Vec<f64>,
        z: Vec<bool>,
        optimality: Optimality,
    ) -> Self {
        let mut a = Allocation {
            method,
            groups: inst.counts.group_labels().to_vec(),
            regions: inst.counts.region_labels().to_vec(),
            p,
            z,
            planned_sizes: inst.sizes.clone(),
            expected: Vec::new(),
            cost: 0.0,
            optimality,
        };
        a.expected = successes_unchecked(&a, inst);
        a.cost = cost_unchecked(&a, inst);
        a
    }

    /// Planned phase-1 contacts per group.
    pub fn contacts(&self) -> Vec<f64> {
        self.p.iter().zip(&self.planned_sizes).map(|(p, n)| p * n).collect()
    }

    pub fn total_contacts(&self) -> f64 {
        self.contacts().iter().sum()
    }

    pub fn selected_regions(&self) -> usize {
        self.z.iter().filter(|&&z| z).count()
    }

    pub fn write_groups_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["group_id", "p"])?;
        for (g, p) in self.groups.iter().zip(&self.p) {
            w.write_record([g.as_str(), &p.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_regions_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["region_id", "z"])?;
        for (r, z) in self.regions.iter().zip(&self.z) {
            w.write_record([r.as_str(), if *z { "1" } else { "0" }])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Full allocation as JSON, which `simulate` reads back.
    pub fn write_json<W: Write>(&self, sink: W) -> Result<()> {
        serde_json::to_writer_pretty(sink, self)?;
        Ok(())
    }

    pub fn read_json<R: std::io::Read>(source: R) -> Result<Self> {
        Ok(serde_json::from_reader(source)?)
    }
}

fn check_dims(alloc: &Allocation, inst: &DesignInstance) -> Result<()> {
    if alloc.p.len() != inst.num_groups() || alloc.z.len() != inst.num_regions() {
        return Err(invalid(format!(
            "allocation is {}x{}, instance is {}x{}",
            alloc.p.len(),
            alloc.z.len(),
            inst.num_groups(),
            inst.num_regions()
        )));
    }
    Ok(())
}

fn successes_unchecked(alloc: &Allocation, inst: &DesignInstance) -> Vec<f64> {
    (0..inst.num_groups())
        .map(|i| {
            let phase2: f64 = (0..inst.num_regions())
                .filter(|&r| alloc.z[r])
                .map(|r| inst.region_yield(i, r))
                .sum();
            alloc.p[i] * inst.phase1_capacity(i) + phase2
        })
        .collect()
}

fn cost_unchecked(alloc: &Allocation, inst: &DesignInstance) -> f64 {
    let phase1: f64 = alloc.p.iter().zip(&inst.sizes).map(|(p, n)| p * n).sum();
    inst.c1 * phase1 + inst.c2 * alloc.selected_regions() as f64
}

/// Expected successful responses per group under `alloc`.
pub fn expected_successes(alloc: &Allocation, inst: &DesignInstance) -> Result<Vec<f64>> {
    check_dims(alloc, inst)?;
    Ok(successes_unchecked(alloc, inst))
}

pub fn evaluate_cost(alloc: &Allocation, inst: &DesignInstance) -> Result<f64> {
    check_dims(alloc, inst)?;
    Ok(cost_unchecked(alloc, inst))
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate <= 1.0 {
        Ok(())
    } else {
        Err(invalid(format!("sampling rate {rate} outside (0, 1]")))
    }
}

/// Proportional allocation: every group is contacted at rate `ρ`, so each
/// receives contacts in proportion to its visible size.
pub fn standard_allocation(inst: &DesignInstance, rate: f64) -> Result<Allocation> {
    check_rate(rate)?;
    let p = vec![rate; inst.num_groups()];
    Ok(Allocation::build(Method::Standard, inst, p, vec![false; inst.num_regions()], Optimality::NotApplicable))
}

/// Equal allocation: the same `ρ·Ñ/G` contacts for every group, capped at
/// the group's visible size.
pub fn heuristic_allocation(inst: &DesignInstance, rate: f64) -> Result<Allocation> {
    check_rate(rate)?;
    let total: f64 = inst.sizes.iter().sum();
    let share = rate * total / inst.num_groups() as f64;
    let p = inst.sizes.iter().map(|&n| if n > 0.0 { (share / n).min(1.0) } else { 0.0 }).collect();
    Ok(Allocation::build(Method::Heuristic, inst, p, vec![false; inst.num_regions()], Optimality::NotApplicable))
}

pub(crate) const FEAS_TOL: f64 = 1e-9;

pub(crate) fn within(deficit: f64, capacity: f64) -> bool {
    deficit <= capacity + FEAS_TOL * (1.0 + capacity)
}

/// Cheapest phase-1-only allocation: `p_i = req_i / (Ñ_i·(1 - F1_i))`.
pub fn optimize_phase1(inst: &DesignInstance) -> Result<Allocation> {
    let mut short = Vec::new();
    let mut p = Vec::with_capacity(inst.num_groups());
    for i in 0..inst.num_groups() {
        let (req, cap) = (inst.requirements[i], inst.phase1_capacity(i));
        if !within(req, cap) {
            short.push(Shortfall {
                group: inst.counts.group_labels()[i].clone(),
                required: req,
                max_achievable: cap,
            });
            continue;
        }
        p.push(if req <= 0.0 { 0.0 } else { (req / cap).min(1.0) });
    }
    if !short.is_empty() {
        return Err(Error::Infeasible(short));
    }
    Ok(Allocation::build(Method::Phase1, inst, p, vec![false; inst.num_regions()], Optimality::Proven))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::privacy::Epsilon;

    pub(crate) fn matrix(rows: &[&[f64]]) -> CountMatrix {
        let groups = (0..rows.len()).map(|i| format!("g{i}")).collect();
        let regions = (0..rows[0].len()).map(|r| format!("r{r}")).collect();
        let counts = rows.iter().flat_map(|r| r.iter().copied()).collect();
        CountMatrix::new(groups, regions, counts, false, Epsilon::NoPrivacy).unwrap()
    }

    fn single(n: f64, req: f64, c1: f64) -> DesignInstance {
        DesignInstance::new(matrix(&[&[n]]), vec![0.6], vec![0.2], c1, 500.0, vec![0.1], vec![req]).unwrap()
    }

    #[test]
    fn expected_successes_by_hand() {
        // 1000 people, 200 of them in the selected region.
        let inst =
            DesignInstance::new(matrix(&[&[200.0, 800.0]]), vec![0.6], vec![0.2], 1.0, 500.0, vec![0.1, 0.1], vec![0.0])
                .unwrap();
        let a = Allocation::build(Method::Standard, &inst, vec![0.5], vec![true, false], Optimality::NotApplicable);
        let n = expected_successes(&a, &inst).unwrap();
        assert!((n[0] - 216.0).abs() < 1e-9);
        let zero = Allocation::build(Method::Standard, &inst, vec![0.0], vec![false, false], Optimality::NotApplicable);
        assert_eq!(expected_successes(&zero, &inst).unwrap(), vec![0.0]);
    }

    #[test]
    fn total_failure_kills_phase1() {
        let inst = DesignInstance::new(matrix(&[&[1000.0]]), vec![0.999_999_999], vec![0.2], 1.0, 1.0, vec![0.1], vec![0.0])
            .unwrap();
        let a = Allocation::build(Method::Standard, &inst, vec![1.0], vec![false], Optimality::NotApplicable);
        assert!(expected_successes(&a, &inst).unwrap()[0] < 1e-5);
        assert!(DesignInstance::new(matrix(&[&[1.0]]), vec![1.0], vec![0.2], 1.0, 1.0, vec![0.1], vec![0.0]).is_err());
    }

    #[test]
    fn cost_examples() {
        let inst = single(1000.0, 0.0, 1.0);
        let a = Allocation::build(Method::Standard, &inst, vec![0.25], vec![false], Optimality::NotApplicable);
        assert_eq!(evaluate_cost(&a, &inst).unwrap(), 250.0);

        let inst = DesignInstance::new(
            matrix(&[&[1.0, 1.0, 1.0]]),
            vec![0.6],
            vec![0.2],
            1.0,
            500.0,
            vec![0.1; 3],
            vec![0.0],
        )
        .unwrap();
        let a = Allocation::build(Method::TwoPhase, &inst, vec![0.0], vec![true; 3], Optimality::NotApplicable);
        assert_eq!(evaluate_cost(&a, &inst).unwrap(), 1500.0);

        let scaled = inst.with_costs(3.0, 1500.0).unwrap();
        let b = Allocation::build(Method::TwoPhase, &scaled, vec![0.0], vec![true; 3], Optimality::NotApplicable);
        assert_eq!(evaluate_cost(&b, &scaled).unwrap(), 3.0 * 1500.0);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let inst = single(1000.0, 0.0, 1.0);
        let other = DesignInstance::new(matrix(&[&[1.0], &[1.0]]), vec![0.6; 2], vec![0.2; 2], 1.0, 1.0, vec![0.1], vec![0.0; 2])
            .unwrap();
        let a = standard_allocation(&other, 0.5).unwrap();
        assert!(expected_successes(&a, &inst).is_err());
        assert!(evaluate_cost(&a, &inst).is_err());
    }

    #[test]
    fn standard_is_proportional() {
        let inst = DesignInstance::uniform(matrix(&[&[9900.0], &[100.0]]), &DesignParams::default(), vec![0.0; 2]).unwrap();
        let a = standard_allocation(&inst, 0.01).unwrap();
        let c = a.contacts();
        assert!((c[0] - 99.0).abs() < 1e-9 && (c[1] - 1.0).abs() < 1e-12);
        assert_eq!(standard_allocation(&inst, 1.0).unwrap().contacts(), vec![9900.0, 100.0]);
        assert!(standard_allocation(&inst, 0.0).is_err());
    }

    #[test]
    fn heuristic_equalizes_contacts() {
        let sizes = [1_000_000.0, 600_000.0, 500_000.0, 400_000.0, 300_000.0, 200_000.0];
        let rows: Vec<&[f64]> = sizes.iter().map(std::slice::from_ref).collect();
        let inst = DesignInstance::uniform(matrix(&rows), &DesignParams::default(), vec![0.0; 6]).unwrap();
        let a = heuristic_allocation(&inst, 0.01).unwrap();
        for c in a.contacts() {
            assert!((c - 5000.0).abs() < 1e-6);
        }

        let inst = DesignInstance::uniform(matrix(&[&[900.0], &[100.0]]), &DesignParams::default(), vec![0.0; 2]).unwrap();
        let a = heuristic_allocation(&inst, 0.2).unwrap();
        assert!((a.p[0] - 100.0 / 900.0).abs() < 1e-15);
        assert_eq!(a.p[1], 1.0);
        let a = heuristic_allocation(&inst, 0.5).unwrap();
        assert_eq!(a.p[1], 1.0);
        assert_eq!(a.contacts()[1], 100.0);
    }

    #[test]
    fn standard_and_heuristic_contact_the_same_total() {
        let inst = DesignInstance::uniform(matrix(&[&[5000.0], &[3000.0], &[2000.0]]), &DesignParams::default(), vec![0.0; 3])
            .unwrap();
        let s = standard_allocation(&inst, 0.05).unwrap().total_contacts();
        let h = heuristic_allocation(&inst, 0.05).unwrap().total_contacts();
        assert!((s - h).abs() < 1e-9);
        assert_eq!(
            standard_allocation(&inst, 0.05).unwrap().cost,
            heuristic_allocation(&inst, 0.05).unwrap().cost
        );
    }

    #[test]
    fn phase1_closed_form() {
        let a = optimize_phase1(&single(1000.0, 100.0, 1.0)).unwrap();
        assert!((a.p[0] - 0.25).abs() < 1e-15);
        assert!((a.cost - 250.0).abs() < 1e-9);
        assert!((a.expected[0] - 100.0).abs() < 1e-9);

        let a = optimize_phase1(&single(1000.0, 0.0, 1.0)).unwrap();
        assert_eq!((a.p[0], a.cost), (0.0, 0.0));

        assert!(optimize_phase1(&single(1000.0, 400.0, 1.0)).is_ok());
        match optimize_phase1(&single(1000.0, 401.0, 1.0)) {
            Err(Error::Infeasible(s)) => {
                assert_eq!(s.len(), 1);
                assert_eq!(s[0].group, "g0");
                assert!((s[0].max_achievable - 400.0).abs() < 1e-9);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn allocation_files() {
        let inst = single(1000.0, 100.0, 1.0);
        let a = optimize_phase1(&inst).unwrap();
        let mut groups = Vec::new();
        a.write_groups_csv(&mut groups).unwrap();
        assert_eq!(String::from_utf8(groups).unwrap(), "group_id,p\ng0,0.25\n");
        let mut regions = Vec::new();
        a.write_regions_csv(&mut regions).unwrap();
        assert_eq!(String::from_utf8(regions).unwrap(), "region_id,z\nr0,0\n");
        let mut json = Vec::new();
        a.write_json(&mut json).unwrap();
        assert_eq!(Allocation::read_json(json.as_slice()).unwrap(), a);
    }
}
