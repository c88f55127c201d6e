//! Exact two-phase allocation.
//!
//! For a fixed region selection `z` the cheapest phase-1 rates are closed
//! form: each group tops up its remaining deficit by remote contact, so the
//! problem reduces to choosing `z`. Costs are
//!
//! ```text
//! cost(z) = c2·|z| + Σ_i w_i · max(0, req_i - s_i(z)),   w_i = c1 / (1 - F1_i)
//! ```
//!
//! where `s_i(z)` are the expected phase-2 successes. `z` is feasible when
//! every deficit fits within the phase-1 capacity `Ñ_i·(1 - F1_i)`.
//!
//! The search is a depth-first branch and bound over regions. The lower
//! bound at a node is a fractional knapsack: selecting region `r` can save
//! at most `v_r = Σ_i w_i·min(a_ir, d_i⁺)` for the current deficits `d`,
//! and total savings cannot exceed `Σ_i w_i·d_i⁺`. Nodes that survive it
//! face a Lagrangian bound on the linear relaxation with the number of
//! selected regions held fixed: the search runs one pass per selection size,
//! most promising first, and drops sizes whose bound cannot beat the
//! incumbent. Multipliers of that bound also fix regions in or out of a
//! subtree when forcing the opposite choice alone would reach the
//! incumbent.

use std::cmp::Ordering;

use super::{within, Allocation, DesignInstance, Method, Optimality, DEFAULT_NODE_BUDGET};
use crate::error::{Error, Result, Shortfall};

pub const MAX_BRUTE_FORCE_REGIONS: usize = 20;

/// The instance in the reduced form used by both exact solvers.
struct Reduced {
    /// Cost per unit of phase-1 success, per group.
    w: Vec<f64>,
    /// Phase-1 capacity per group.
    cap: Vec<f64>,
    req: Vec<f64>,
    /// `cover[r][i]`: expected phase-2 successes of group `i` from region `r`.
    cover: Vec<Vec<f64>>,
    c2: f64,
}

impl Reduced {
    fn new(inst: &DesignInstance) -> Self {
        let ng = inst.num_groups();
        Reduced {
            w: (0..ng).map(|i| inst.c1() / (1.0 - inst.f1()[i])).collect(),
            cap: (0..ng).map(|i| inst.phase1_capacity(i)).collect(),
            req: inst.requirements().to_vec(),
            cover: (0..inst.num_regions())
                .map(|r| (0..ng).map(|i| inst.region_yield(i, r)).collect())
                .collect(),
            c2: inst.c2(),
        }
    }

    fn groups(&self) -> usize {
        self.req.len()
    }

    fn phase1_cost(&self, phase2: &[f64]) -> Option<f64> {
        let mut cost = 0.0;
        for i in 0..self.groups() {
            let d = self.req[i] - phase2[i];
            if !within(d, self.cap[i]) {
                return None;
            }
            if d > 0.0 {
                cost += self.w[i] * d;
            }
        }
        Some(cost)
    }

    /// Errors with per-group shortfalls unless selecting every region works.
    fn check_feasible(&self, inst: &DesignInstance) -> Result<()> {
        let mut short = Vec::new();
        for i in 0..self.groups() {
            let best = self.cap[i] + self.cover.iter().map(|c| c[i]).sum::<f64>();
            if !within(self.req[i], best) {
                short.push(Shortfall {
                    group: inst.counts().group_labels()[i].clone(),
                    required: self.req[i],
                    max_achievable: best,
                });
            }
        }
        if short.is_empty() {
            Ok(())
        } else {
            Err(Error::Infeasible(short))
        }
    }

    fn allocation(&self, inst: &DesignInstance, method: Method, z: Vec<bool>, optimality: Optimality) -> Allocation {
        let mut phase2 = vec![0.0; self.groups()];
        for (r, _) in z.iter().enumerate().filter(|(_, &z)| z) {
            for (s, a) in phase2.iter_mut().zip(&self.cover[r]) {
                *s += a;
            }
        }
        let p = (0..self.groups())
            .map(|i| {
                let d = self.req[i] - phase2[i];
                if d <= 0.0 || self.cap[i] <= 0.0 {
                    0.0
                } else {
                    (d / self.cap[i]).min(1.0)
                }
            })
            .collect();
        Allocation::build(method, inst, p, z, optimality)
    }
}

fn better(a: f64, b: f64) -> bool {
    if b.is_infinite() {
        return a < b;
    }
    a < b - 1e-12 * b.abs().max(1.0)
}

/// Exact two-phase allocation with the default node budget.
pub fn optimize_two_phase(inst: &DesignInstance) -> Result<Allocation> {
    optimize_two_phase_with(inst, DEFAULT_NODE_BUDGET)
}

/// Exact two-phase allocation. If the search visits more than `node_budget`
/// nodes it stops and returns the best allocation found so far, marked
/// [`Optimality::NotProven`].
pub fn optimize_two_phase_with(inst: &DesignInstance, node_budget: u64) -> Result<Allocation> {
    let red = Reduced::new(inst);
    red.check_feasible(inst)?;
    let mut search = Search::new(&red, node_budget);
    search.greedy();
    search.run();
    let z = search.best.clone().expect("a feasible selection exists");
    let optimality = if search.exhausted { Optimality::NotProven } else { Optimality::Proven };
    Ok(red.allocation(inst, Method::TwoPhase, z, optimality))
}

struct Search<'a> {
    red: &'a Reduced,
    /// Regions in branching order.
    order: Vec<usize>,
    /// `suffix[k][i]`: phase-2 successes of group `i` from `order[k..]`.
    suffix: Vec<Vec<f64>>,
    best_cost: f64,
    best: Option<Vec<bool>>,
    nodes: u64,
    budget: u64,
    exhausted: bool,
    values: Vec<f64>,
    /// Number of regions selected by every solution of the current pass.
    target: usize,
    /// Subtree decisions from reduced-cost fixing, per region.
    status: Vec<Status>,
    dual: Dual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Status {
    Free,
    Forced,
    Banned,
}

impl<'a> Search<'a> {
    fn new(red: &'a Reduced, budget: u64) -> Self {
        let ng = red.groups();
        let score = |r: usize| -> f64 {
            (0..ng).map(|i| red.w[i] * red.cover[r][i].min(red.req[i].max(0.0))).sum::<f64>() / red.c2
        };
        let scores: Vec<f64> = (0..red.cover.len()).map(score).collect();
        let mut order: Vec<usize> = (0..red.cover.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));

        let mut suffix = vec![vec![0.0; ng]; order.len() + 1];
        for k in (0..order.len()).rev() {
            for i in 0..ng {
                suffix[k][i] = suffix[k + 1][i] + red.cover[order[k]][i];
            }
        }
        Search {
            red,
            order,
            suffix,
            best_cost: f64::INFINITY,
            best: None,
            nodes: 0,
            budget,
            exhausted: false,
            values: Vec::new(),
            target: 0,
            status: vec![Status::Free; red.cover.len()],
            dual: Dual::new(red.w.clone()),
        }
    }

    fn offer(&mut self, cost: f64, chosen: &[bool]) {
        if better(cost, self.best_cost) {
            self.best_cost = cost;
            self.best = Some(chosen.to_vec());
        }
    }

    /// Seeds the incumbent: regions are added by largest reduction of the
    /// capacity excess until the selection is feasible, then one at a time
    /// while the total cost drops.
    fn greedy(&mut self) {
        let red = self.red;
        let ng = red.groups();
        let mut chosen = vec![false; red.cover.len()];
        let mut phase2 = vec![0.0; ng];
        let mut count = 0usize;
        let mut current = red.phase1_cost(&phase2);
        while current.is_none() {
            let excess: Vec<f64> = (0..ng).map(|i| (red.req[i] - phase2[i] - red.cap[i]).max(0.0)).collect();
            let gain = |r: usize| -> f64 { (0..ng).map(|i| red.cover[r][i].min(excess[i])).sum() };
            let Some(r) = (0..red.cover.len())
                .filter(|&r| !chosen[r])
                .map(|r| (r, gain(r)))
                .filter(|&(_, g)| g > 0.0)
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .map(|(r, _)| r)
            else {
                return;
            };
            chosen[r] = true;
            count += 1;
            for (s, a) in phase2.iter_mut().zip(&red.cover[r]) {
                *s += a;
            }
            current = red.phase1_cost(&phase2);
        }
        let mut current = current.map(|c| c + red.c2 * count as f64);
        if let Some(c) = current {
            self.offer(c, &chosen);
        }
        loop {
            let mut pick: Option<(usize, f64)> = None;
            for r in 0..red.cover.len() {
                if chosen[r] {
                    continue;
                }
                let trial: Vec<f64> = phase2.iter().zip(&red.cover[r]).map(|(s, a)| s + a).collect();
                if let Some(c) = red.phase1_cost(&trial) {
                    let c = c + red.c2 * (count + 1) as f64;
                    if pick.is_none_or(|(_, pc)| better(c, pc)) {
                        pick = Some((r, c));
                    }
                }
            }
            match (pick, current) {
                (Some((r, c)), Some(cur)) if better(c, cur) => {
                    chosen[r] = true;
                    count += 1;
                    for (s, a) in phase2.iter_mut().zip(&red.cover[r]) {
                        *s += a;
                    }
                    current = Some(c);
                    self.offer(c, &chosen);
                }
                _ => break,
            }
        }
    }

    /// One depth-first pass per selection size, most promising size first.
    /// Fixing the size turns the linear relaxation's fractional region
    /// count into an integer one, which is what closes most of the gap.
    fn run(&mut self) {
        let red = self.red;
        let deficit = red.req.clone();
        let order = self.order.clone();
        let mut sizes: Vec<(f64, usize)> = (0..=order.len())
            .map(|m| {
                let target = self.best_cost - red.c2 * m as f64;
                (red.c2 * m as f64 + self.dual.bound(red, &order, &deficit, m, target), m)
            })
            .collect();
        sizes.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut phase2 = vec![0.0; red.groups()];
        let mut chosen = vec![false; order.len()];
        for (bound, m) in sizes {
            if self.exhausted || !better(bound, self.best_cost) {
                break;
            }
            self.target = m;
            self.dfs(0, &mut phase2, &mut chosen, 0);
        }
    }

    fn lower_bound(&mut self, k: usize, phase2: &[f64], count: usize) -> f64 {
        let red = self.red;
        let ng = red.groups();
        let mut total = 0.0;
        for i in 0..ng {
            total += red.w[i] * (red.req[i] - phase2[i]).max(0.0);
        }
        self.values.clear();
        for &r in &self.order[k..] {
            let v: f64 = (0..ng)
                .map(|i| red.w[i] * red.cover[r][i].min((red.req[i] - phase2[i]).max(0.0)))
                .sum();
            if v > red.c2 {
                self.values.push(v);
            }
        }
        self.values.sort_by(|a, b| b.total_cmp(a));
        let mut bound = total;
        let mut remaining = total;
        for &v in &self.values {
            if remaining <= 0.0 {
                break;
            }
            let t = (remaining / v).min(1.0);
            bound -= t * (v - red.c2);
            remaining -= t * v;
        }
        red.c2 * count as f64 + bound
    }

    fn dfs(&mut self, k: usize, phase2: &mut Vec<f64>, chosen: &mut Vec<bool>, count: usize) {
        if self.exhausted {
            return;
        }
        self.nodes += 1;
        if self.nodes > self.budget {
            self.exhausted = true;
            return;
        }
        let red = self.red;
        let ng = red.groups();
        if !self.coverable(k, phase2) {
            return;
        }
        if let Some(c) = red.phase1_cost(phase2) {
            self.offer(c + red.c2 * count as f64, chosen);
        }
        if k == self.order.len() || count == self.target {
            return;
        }
        if !better(self.lower_bound(k, phase2, count), self.best_cost) {
            return;
        }

        // Forced regions count as selected inside the bound.
        let mut free = Vec::with_capacity(self.order.len() - k);
        let mut deficit: Vec<f64> = (0..ng).map(|i| red.req[i] - phase2[i]).collect();
        let mut forced = 0;
        for &r in &self.order[k..] {
            match self.status[r] {
                Status::Free => free.push(r),
                Status::Forced => {
                    forced += 1;
                    for (d, a) in deficit.iter_mut().zip(&red.cover[r]) {
                        *d -= a;
                    }
                }
                Status::Banned => {}
            }
        }
        let Some(need) = self.target.checked_sub(count + forced).filter(|&n| n <= free.len()) else {
            return;
        };
        let fixed = red.c2 * self.target as f64;
        let bound = fixed + self.dual.bound(red, &free, &deficit, need, self.best_cost - fixed);
        if !better(bound, self.best_cost) {
            return;
        }

        // Reduced-cost fixing: a region whose inclusion (or exclusion)
        // alone lifts the bound to the incumbent is decided for the subtree.
        let mut fixed_here = Vec::new();
        for (r, lift_in, lift_out) in self.dual.lifts(red, &free, need) {
            if !better(bound + lift_in, self.best_cost) {
                self.status[r] = Status::Banned;
                fixed_here.push(r);
            } else if !better(bound + lift_out, self.best_cost) {
                self.status[r] = Status::Forced;
                fixed_here.push(r);
            }
        }
        if fixed_here.is_empty() || self.coverable(k, phase2) {
            self.branch(k, phase2, chosen, count);
        }
        for r in fixed_here {
            self.status[r] = Status::Free;
        }
    }

    fn branch(&mut self, k: usize, phase2: &mut Vec<f64>, chosen: &mut Vec<bool>, count: usize) {
        let red = self.red;
        let r = self.order[k];
        // A region that no longer helps any group only adds cost; the
        // smaller selection without it is covered by another pass.
        let include = match self.status[r] {
            Status::Banned => false,
            Status::Forced => true,
            Status::Free => (0..red.groups()).any(|i| red.req[i] - phase2[i] > 0.0 && red.cover[r][i] > 0.0),
        };
        if include {
            let saved: Vec<f64> = phase2.clone();
            for (s, a) in phase2.iter_mut().zip(&red.cover[r]) {
                *s += a;
            }
            chosen[r] = true;
            self.dfs(k + 1, phase2, chosen, count + 1);
            chosen[r] = false;
            phase2.copy_from_slice(&saved);
        }
        if self.status[r] != Status::Forced {
            self.dfs(k + 1, phase2, chosen, count);
        }
    }

    /// Whether every group's remaining deficit fits within its phase-1
    /// capacity plus the regions not yet decided and not banned.
    fn coverable(&self, k: usize, phase2: &[f64]) -> bool {
        let red = self.red;
        (0..red.groups()).all(|i| {
            let banned: f64 = self.order[k..]
                .iter()
                .filter(|&&r| self.status[r] == Status::Banned)
                .map(|&r| red.cover[r][i])
                .sum();
            within(red.req[i] - phase2[i] - (self.suffix[k][i] - banned), red.cap[i])
        })
    }
}

const COORDINATE_ROUNDS: usize = 4;
const BISECTION_STEPS: usize = 30;
const SUBGRADIENT_STEPS: usize = 40;
const STALL_LIMIT: usize = 3;

/// Lagrangian relaxation of covering deficits `d` with exactly `need` of a
/// set of regions. Dualizing each group's deficit constraint with `ν_i ≥ 0`
/// gives the lower bound on the remaining phase-1 cost
///
/// ```text
/// L(ν) = Σ_i [ν_i·d_i - (ν_i - w_i)⁺·cap_i] - (sum of the `need` largest ℓ_r),
/// ℓ_r = Σ_i ν_i·a_ir.
/// ```
///
/// `L` is concave and piecewise linear. It is raised by exact coordinate
/// ascent, then by subgradient steps aimed at the incumbent. The
/// multipliers are kept between calls as a warm start.
struct Dual {
    nu: Vec<f64>,
    load: Vec<f64>,
    scratch: Vec<(f64, f64)>,
}

impl Dual {
    fn new(nu: Vec<f64>) -> Self {
        Dual { nu, load: Vec::new(), scratch: Vec::new() }
    }

    /// Best `L(ν)` found, stopping early once it reaches `target`;
    /// infinite when no `need` regions can cover some group.
    fn bound(&mut self, red: &Reduced, regions: &[usize], deficit: &[f64], need: usize, target: f64) -> f64 {
        let ng = red.groups();
        if need > regions.len() {
            return f64::INFINITY;
        }
        self.fill(red, regions);
        let mut current = self.value(red, deficit, need);

        for _ in 0..COORDINATE_ROUNDS {
            for i in 0..ng {
                for (l, &r) in self.load.iter_mut().zip(regions) {
                    *l -= self.nu[i] * red.cover[r][i];
                }
                let Some(t) = self.best_coordinate(red, regions, i, deficit[i], need) else {
                    return f64::INFINITY;
                };
                self.nu[i] = t;
                for (l, &r) in self.load.iter_mut().zip(regions) {
                    *l += t * red.cover[r][i];
                }
            }
            let next = self.value(red, deficit, need);
            let gained = next - current;
            current = next;
            if current >= target || gained <= 1e-9 * current.abs().max(1.0) {
                break;
            }
        }
        if current >= target || !target.is_finite() {
            return current;
        }

        // Subgradient steps past the kink, sized by the gap to the target.
        let mut best = current;
        let mut best_nu = self.nu.clone();
        let mut grad = vec![0.0; ng];
        let mut theta = 1.0;
        let mut stale = 0;
        for _ in 0..SUBGRADIENT_STEPS {
            for i in 0..ng {
                grad[i] = deficit[i] - if self.nu[i] > red.w[i] { red.cap[i] } else { 0.0 };
            }
            for r in self.top(regions, need) {
                for i in 0..ng {
                    grad[i] -= red.cover[r][i];
                }
            }
            let norm: f64 = grad.iter().map(|g| g * g).sum();
            if norm <= 0.0 {
                break;
            }
            let step = theta * (target - current) / norm;
            for i in 0..ng {
                self.nu[i] = (self.nu[i] + step * grad[i]).max(0.0);
            }
            self.fill(red, regions);
            current = self.value(red, deficit, need);
            if current > best {
                best = current;
                best_nu.copy_from_slice(&self.nu);
                stale = 0;
                if best >= target {
                    break;
                }
            } else {
                stale += 1;
                if stale == STALL_LIMIT {
                    theta *= 0.5;
                    stale = 0;
                }
            }
        }
        self.nu.copy_from_slice(&best_nu);
        best
    }

    /// For each region, how much forcing it in and forcing it out would
    /// raise the last bound, at the multipliers that achieved it.
    fn lifts(&mut self, red: &Reduced, regions: &[usize], need: usize) -> Vec<(usize, f64, f64)> {
        self.fill(red, regions);
        let mut ranked: Vec<usize> = (0..regions.len()).collect();
        ranked.sort_by(|&a, &b| self.load[b].total_cmp(&self.load[a]).then(a.cmp(&b)));
        let last_in = need.checked_sub(1).map(|p| self.load[ranked[p]]);
        let first_out = ranked.get(need).map(|&p| self.load[p]);
        ranked
            .iter()
            .enumerate()
            .map(|(pos, &j)| {
                let l = self.load[j];
                if pos < need {
                    (regions[j], 0.0, first_out.map_or(f64::INFINITY, |o| l - o))
                } else {
                    (regions[j], last_in.map_or(f64::INFINITY, |i| i - l), 0.0)
                }
            })
            .collect()
    }

    fn fill(&mut self, red: &Reduced, regions: &[usize]) {
        let nu = &self.nu;
        self.load.clear();
        self.load
            .extend(regions.iter().map(|&r| nu.iter().zip(&red.cover[r]).map(|(n, a)| n * a).sum::<f64>()));
    }

    fn value(&mut self, red: &Reduced, deficit: &[f64], need: usize) -> f64 {
        let groups: f64 = (0..red.groups())
            .map(|i| self.nu[i] * deficit[i] - (self.nu[i] - red.w[i]).max(0.0) * red.cap[i])
            .sum();
        self.scratch.clear();
        self.scratch.extend(self.load.iter().map(|&l| (l, 0.0)));
        groups - top_sum(&mut self.scratch, need).0
    }

    /// Regions achieving the sum of the `need` largest loads.
    fn top(&mut self, regions: &[usize], need: usize) -> Vec<usize> {
        let mut ranked: Vec<usize> = (0..regions.len()).collect();
        if need < ranked.len() {
            ranked.select_nth_unstable_by(need, |&a, &b| self.load[b].total_cmp(&self.load[a]));
        }
        ranked[..need].iter().map(|&j| regions[j]).collect()
    }

    /// Maximizer of `L` along `ν_i` with the other multipliers fixed (their
    /// loads are in `self.load`), or `None` if `L` grows without bound,
    /// i.e. no `need` regions can cover group `i`.
    fn best_coordinate(&mut self, red: &Reduced, regions: &[usize], i: usize, deficit: f64, need: usize) -> Option<f64> {
        let w = red.w[i];
        let cap = red.cap[i];
        // Right derivative of L in ν_i at t.
        let slope = |t: f64, scratch: &mut Vec<(f64, f64)>| -> f64 {
            scratch.clear();
            scratch.extend(self.load.iter().zip(regions).map(|(&l, &r)| (l + t * red.cover[r][i], red.cover[r][i])));
            deficit - if t >= w { cap } else { 0.0 } - top_sum(scratch, need).1
        };
        let mut scratch = std::mem::take(&mut self.scratch);
        let result = (|| {
            if slope(0.0, &mut scratch) <= 0.0 {
                return Some(0.0);
            }
            let mut lo = 0.0;
            let mut hi = w.max(f64::MIN_POSITIVE);
            let mut doublings = 0;
            while slope(hi, &mut scratch) > 0.0 {
                lo = hi;
                hi *= 2.0;
                doublings += 1;
                if doublings > 200 {
                    return None;
                }
            }
            for _ in 0..BISECTION_STEPS {
                let mid = 0.5 * (lo + hi);
                if slope(mid, &mut scratch) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            Some(hi)
        })();
        self.scratch = scratch;
        result
    }
}

/// Sums over the `k` entries with the largest first component (ties to the
/// larger second component): `(Σ first, Σ second)`. Reorders `items`.
fn top_sum(items: &mut [(f64, f64)], k: usize) -> (f64, f64) {
    if k == 0 {
        return (0.0, 0.0);
    }
    if k < items.len() {
        items.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0).then(b.1.total_cmp(&a.1)));
    }
    items[..k].iter().fold((0.0, 0.0), |acc, &(v, a)| (acc.0 + v, acc.1 + a))
}

/// Exhaustive two-phase allocation over all `2^R` selections, for
/// `R ≤ 20`. Among equal-cost selections it prefers fewer regions, then the
/// lexicographically smallest `z`.
pub fn brute_force_two_phase(inst: &DesignInstance) -> Result<Allocation> {
    let nr = inst.num_regions();
    if nr > MAX_BRUTE_FORCE_REGIONS {
        return Err(Error::TooManyRegions { regions: nr, limit: MAX_BRUTE_FORCE_REGIONS });
    }
    let red = Reduced::new(inst);
    red.check_feasible(inst)?;
    let ng = red.groups();
    let mut best: Option<(f64, Vec<bool>)> = None;
    let mut phase2 = vec![0.0; ng];
    for mask in 0u32..(1u32 << nr) {
        phase2.iter_mut().for_each(|s| *s = 0.0);
        for r in (0..nr).filter(|r| mask >> r & 1 == 1) {
            for (s, a) in phase2.iter_mut().zip(&red.cover[r]) {
                *s += a;
            }
        }
        let Some(c) = red.phase1_cost(&phase2) else { continue };
        let cost = c + red.c2 * mask.count_ones() as f64;
        let z: Vec<bool> = (0..nr).map(|r| mask >> r & 1 == 1).collect();
        let replace = match &best {
            None => true,
            Some((bc, bz)) => match tie_cmp(cost, *bc) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => {
                    let (n, bn) = (mask.count_ones() as usize, bz.iter().filter(|&&b| b).count());
                    n < bn || (n == bn && z < *bz)
                }
            },
        };
        if replace {
            best = Some((cost, z));
        }
    }
    let (_, z) = best.expect("a feasible selection exists");
    Ok(red.allocation(inst, Method::BruteForce, z, Optimality::Proven))
}

fn tie_cmp(a: f64, b: f64) -> Ordering {
    if (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0) {
        Ordering::Equal
    } else {
        a.total_cmp(&b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::allocator::tests::matrix;
    use crate::allocator::{optimize_phase1, DesignParams};
    use proptest::prelude::*;

    fn instance(rows: &[&[f64]], req: Vec<f64>, c2: f64) -> DesignInstance {
        let params = DesignParams { c2, ..DesignParams::default() };
        DesignInstance::uniform(matrix(rows), &params, req).unwrap()
    }

    #[test]
    fn field_work_only_when_cheaper() {
        // The minority lives in one region; one field visit yields
        // 0.1·1000·0.8 = 80 successes for 500, versus 80/0.4 = 200 contacts
        // remotely. Remote contact is cheaper, so no region is chosen.
        let inst = instance(&[&[5000.0, 5000.0], &[1000.0, 0.0]], vec![100.0, 80.0], 500.0);
        let a = optimize_two_phase(&inst).unwrap();
        assert_eq!(a.z, vec![false, false]);
        assert!((a.cost - optimize_phase1(&inst).unwrap().cost).abs() < 1e-9);

        // Cheaper field work flips the decision.
        let inst = inst.with_costs(1.0, 100.0).unwrap();
        let a = optimize_two_phase(&inst).unwrap();
        assert_eq!(a.z, vec![true, false]);
        assert!(a.cost < optimize_phase1(&inst).unwrap().cost);
        assert_eq!(a.optimality, Optimality::Proven);
    }

    #[test]
    fn field_work_rescues_infeasible_phase1() {
        // Capacity 400, requirement 450; the region yields 0.1·1000·0.8 = 80.
        let inst = instance(&[&[1000.0]], vec![450.0], 500.0);
        assert!(matches!(optimize_phase1(&inst), Err(Error::Infeasible(_))));
        let a = optimize_two_phase(&inst).unwrap();
        assert_eq!(a.z, vec![true]);
        assert!(a.expected[0] >= 450.0 - 1e-6);
        assert!((a.p[0] - 370.0 / 400.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_everywhere_reports_every_short_group() {
        let inst = instance(&[&[100.0, 100.0], &[100.0, 100.0]], vec![1000.0, 1.0], 500.0);
        for result in [optimize_two_phase(&inst), brute_force_two_phase(&inst)] {
            match result {
                Err(Error::Infeasible(s)) => {
                    assert_eq!(s.len(), 1);
                    assert_eq!(s[0].group, "g0");
                    assert!((s[0].max_achievable - (80.0 + 16.0)).abs() < 1e-9);
                }
                other => panic!("{other:?}"),
            }
        }
    }

    #[test]
    fn brute_force_limit() {
        let row = vec![10.0; 21];
        let inst = instance(&[&row], vec![1.0], 500.0);
        assert!(matches!(
            brute_force_two_phase(&inst),
            Err(Error::TooManyRegions { regions: 21, limit: 20 })
        ));
    }

    #[test]
    fn brute_force_tie_break() {
        // Nothing is required: the empty selection wins.
        let inst = instance(&[&[10.0, 10.0]], vec![0.0], 500.0);
        assert_eq!(brute_force_two_phase(&inst).unwrap().z, vec![false, false]);
        // Two identical regions, either one covers the requirement: the
        // lexicographically smallest selection is [false, true].
        let inst = instance(&[&[1000.0, 1000.0]], vec![80.0], 1.0);
        let a = brute_force_two_phase(&inst).unwrap();
        assert_eq!(a.z, vec![false, true]);
        assert!((a.cost - 1.0).abs() < 1e-9);
        assert!((optimize_two_phase(&inst).unwrap().cost - 1.0).abs() < 1e-9);
    }

    #[test]
    fn budget_exhaustion_returns_incumbent() {
        // Phase 1 alone falls short, so the search has to find a cheap cover.
        let row: Vec<f64> = (0..30).map(|r| 200.0 + ((r * 11) % 29) as f64 * 50.0).collect();
        let total: f64 = row.iter().sum();
        let inst = instance(&[&row], vec![0.44 * total], 500.0);
        let a = optimize_two_phase_with(&inst, 1).unwrap();
        assert_eq!(a.optimality, Optimality::NotProven);
        assert!(a.expected[0] >= inst.requirements()[0] - 1e-6);
        let full = optimize_two_phase(&inst).unwrap();
        assert_eq!(full.optimality, Optimality::Proven);
        assert!(full.cost <= a.cost + 1e-9);
    }

    #[test]
    fn near_identical_regions_are_proven() {
        // Forty almost interchangeable regions, about ten of which are
        // needed: many selections cost nearly the same.
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|i| (0..40).map(|r| [2700.0, 300.0, 90.0][i] + ((r * 7 + i * 3) % 13) as f64 * 4.0).collect())
            .collect();
        let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
        let sizes: Vec<f64> = rows.iter().map(|r| r.iter().sum()).collect();
        let req = sizes.iter().map(|s| 0.42 * s).collect();
        let inst = instance(&refs, req, 500.0);
        let a = optimize_two_phase(&inst).unwrap();
        assert_eq!(a.optimality, Optimality::Proven);
        assert!(a.selected_regions() >= 10, "{}", a.selected_regions());
        assert!(a.cost <= optimize_phase1(&inst).map_or(f64::INFINITY, |p| p.cost));
    }

    fn arb_instance() -> impl Strategy<Value = DesignInstance> {
        (1usize..6, 1usize..15).prop_flat_map(|(ng, nr)| {
            (
                prop::collection::vec(0u32..2000, ng * nr),
                prop::collection::vec(0.0f64..1.5, ng),
                prop::collection::vec(0.0f64..0.9, ng),
                prop::collection::vec(0.0f64..0.9, ng),
                1.0f64..2000.0,
                prop::collection::vec(0.01f64..0.5, nr),
            )
                .prop_map(move |(counts, frac, f1, f2, c2, g)| {
                    let rows: Vec<Vec<f64>> =
                        counts.chunks(nr).map(|c| c.iter().map(|&x| x as f64).collect()).collect();
                    let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                    let m = matrix(&refs);
                    let sizes = m.group_totals();
                    // Requirements up to 1.5x the phase-1 capacity, so some
                    // instances need field work and some are infeasible.
                    let req = (0..ng).map(|i| frac[i] * sizes[i] * (1.0 - f1[i])).collect();
                    DesignInstance::new(m, f1, f2, 1.0, c2, g, req).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(300))]

        #[test]
        fn search_matches_brute_force(inst in arb_instance()) {
            match (optimize_two_phase(&inst), brute_force_two_phase(&inst)) {
                (Ok(a), Ok(b)) => {
                    prop_assert!((a.cost - b.cost).abs() <= 1e-6 * b.cost.max(1.0),
                        "search {} vs brute force {}", a.cost, b.cost);
                    for (n, r) in a.expected.iter().zip(inst.requirements()) {
                        prop_assert!(*n >= r - 1e-6 * r.max(1.0));
                    }
                    prop_assert!(a.p.iter().all(|p| (0.0..=1.0).contains(p)));
                }
                (Err(Error::Infeasible(_)), Err(Error::Infeasible(_))) => {}
                (a, b) => prop_assert!(false, "{a:?} vs {b:?}"),
            }
        }

        #[test]
        fn two_phase_never_costs_more_than_phase1(inst in arb_instance()) {
            if let Ok(p1) = optimize_phase1(&inst) {
                let tp = optimize_two_phase(&inst).unwrap();
                prop_assert!(tp.cost <= p1.cost + 1e-6 * p1.cost.max(1.0));
            }
        }
    }
}
