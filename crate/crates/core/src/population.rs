//! Populations segmented by group and region.
//!
//! A [`PopulationFrame`] holds weighted microdata; a record of weight `w`
//! stands for `w` identical individuals. Frames are immutable once built.

use std::collections::HashMap;
use std::io::{Read, Write};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::privacy::Epsilon;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Record {
    pub region: usize,
    pub group: usize,
    pub value: f64,
    pub weight: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationFrame {
    group_labels: Vec<String>,
    region_labels: Vec<String>,
    records: Vec<Record>,
}

impl PopulationFrame {
    pub fn new(
        group_labels: Vec<String>,
        region_labels: Vec<String>,
        records: Vec<Record>,
    ) -> Result<Self> {
        if group_labels.is_empty() || region_labels.is_empty() {
            return Err(invalid("a frame needs at least one group and one region"));
        }
        check_unique(&group_labels, "group")?;
        check_unique(&region_labels, "region")?;
        if records.is_empty() {
            return Err(Error::EmptyInput);
        }
        for (k, r) in records.iter().enumerate() {
            if r.group >= group_labels.len() || r.region >= region_labels.len() {
                return Err(invalid(format!("record {k} references an unknown label")));
            }
            if r.weight == 0 {
                return Err(invalid(format!("record {k} has weight 0")));
            }
            if !r.value.is_finite() {
                return Err(invalid(format!("record {k} has a non-finite value")));
            }
        }
        Ok(Self { group_labels, region_labels, records })
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn num_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn num_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn group_index(&self, label: &str) -> Option<usize> {
        self.group_labels.iter().position(|g| g == label)
    }

    /// Total population `N`.
    pub fn total(&self) -> u64 {
        self.records.iter().map(|r| r.weight).sum()
    }

    /// Weighted group sizes `N_i`.
    pub fn group_sizes(&self) -> Vec<u64> {
        let mut sizes = vec![0; self.num_groups()];
        for r in &self.records {
            sizes[r.group] += r.weight;
        }
        sizes
    }

    /// The group's values with every record repeated by its weight.
    pub fn group_values(&self, group: usize) -> Vec<f64> {
        let mut out = Vec::new();
        for r in self.records.iter().filter(|r| r.group == group) {
            out.extend(std::iter::repeat_n(r.value, r.weight as usize));
        }
        out
    }

    /// Re-express the frame over the given label lists, which must contain
    /// every label this frame uses. Used to line up prior and truth frames.
    pub fn relabeled(&self, group_labels: &[String], region_labels: &[String]) -> Result<Self> {
        let gmap = index_map(&self.group_labels, group_labels, "group")?;
        let rmap = index_map(&self.region_labels, region_labels, "region")?;
        let records = self
            .records
            .iter()
            .map(|r| Record { group: gmap[r.group], region: rmap[r.region], ..*r })
            .collect();
        Self::new(group_labels.to_vec(), region_labels.to_vec(), records)
    }

    /// The same frame with group and region labels in sorted order, so that
    /// everything indexed by label position is independent of the row order
    /// of the file the frame came from.
    pub fn sorted(&self) -> Result<Self> {
        let mut groups = self.group_labels.clone();
        let mut regions = self.region_labels.clone();
        groups.sort();
        regions.sort();
        self.relabeled(&groups, &regions)
    }

    /// Cut the frame into consecutive regions of `region_size` individuals.
    ///
    /// Individuals keep their relative order (by original region, then record
    /// order), so a size that divides another yields a refinement of it.
    /// Records straddling a boundary are split. The last region holds the
    /// remainder.
    pub fn repartition(&self, region_size: u64) -> Result<Self> {
        if region_size == 0 {
            return Err(invalid("region size must be at least 1"));
        }
        let mut order: Vec<&Record> = self.records.iter().collect();
        order.sort_by_key(|r| r.region);
        let mut records = Vec::with_capacity(self.records.len());
        let (mut region, mut fill) = (0usize, 0u64);
        for r in order {
            let mut left = r.weight;
            while left > 0 {
                if fill == region_size {
                    region += 1;
                    fill = 0;
                }
                let take = left.min(region_size - fill);
                records.push(Record { region, weight: take, ..*r });
                fill += take;
                left -= take;
            }
        }
        let width = digits(region + 1);
        let labels = (0..=region).map(|k| format!("r{k:0width$}")).collect();
        Self::new(self.group_labels.clone(), labels, records)
    }
}

fn digits(n: usize) -> usize {
    n.saturating_sub(1).to_string().len()
}

fn check_unique(labels: &[String], what: &str) -> Result<()> {
    let mut seen = HashMap::new();
    for l in labels {
        if seen.insert(l.as_str(), ()).is_some() {
            return Err(invalid(format!("duplicate {what} label `{l}`")));
        }
    }
    Ok(())
}

fn index_map(from: &[String], to: &[String], what: &str) -> Result<Vec<usize>> {
    from.iter()
        .map(|l| {
            to.iter()
                .position(|t| t == l)
                .ok_or_else(|| invalid(format!("{what} `{l}` missing from target labels")))
        })
        .collect()
}

/// Sorted union of two label lists.
pub fn union_labels(a: &[String], b: &[String]) -> Vec<String> {
    let set: std::collections::BTreeSet<&String> = a.iter().chain(b).collect();
    set.into_iter().cloned().collect()
}

const COLUMNS: [&str; 4] = ["region_id", "group_id", "value", "weight"];

/// Read weighted microdata in the `region_id,group_id,value,weight` CSV
/// format. Columns may appear in any order; labels are indexed in order of
/// first appearance.
pub fn load_microdata<R: Read>(source: R) -> Result<PopulationFrame> {
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = match reader.headers() {
        Ok(h) => h.clone(),
        Err(e) if matches!(e.kind(), csv::ErrorKind::Io(_)) => return Err(e.into()),
        Err(e) => return Err(parse_error(e)),
    };
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyInput);
    }
    let mut pos = [usize::MAX; 4];
    for (k, h) in headers.iter().enumerate() {
        match COLUMNS.iter().position(|c| *c == h) {
            Some(c) if pos[c] == usize::MAX => pos[c] = k,
            Some(_) => return Err(Error::Schema(format!("duplicate column `{h}`"))),
            None => return Err(Error::Schema(format!("unknown column `{h}`"))),
        }
    }
    if let Some(c) = pos.iter().position(|&p| p == usize::MAX) {
        return Err(Error::Schema(format!("missing column `{}`", COLUMNS[c])));
    }

    let mut groups: Vec<String> = Vec::new();
    let mut regions: Vec<String> = Vec::new();
    let mut gidx: HashMap<String, usize> = HashMap::new();
    let mut ridx: HashMap<String, usize> = HashMap::new();
    let mut records = Vec::new();
    for row in reader.records() {
        let row = row.map_err(parse_error)?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |c: usize| row.get(pos[c]).unwrap_or("");
        let (region_id, group_id) = (field(0), field(1));
        if region_id.is_empty() || group_id.is_empty() {
            return Err(Error::Parse { line, message: "empty region_id or group_id".into() });
        }
        let value: f64 = field(2).parse().map_err(|_| Error::Parse {
            line,
            message: format!("invalid value `{}`", field(2)),
        })?;
        if !value.is_finite() {
            return Err(Error::Parse { line, message: "value must be finite".into() });
        }
        let weight: u64 = match field(3).parse() {
            Ok(w) if w >= 1 => w,
            _ => {
                return Err(Error::Parse {
                    line,
                    message: format!("weight `{}` is not a positive integer", field(3)),
                })
            }
        };
        let region = *ridx.entry(region_id.to_string()).or_insert_with(|| {
            regions.push(region_id.to_string());
            regions.len() - 1
        });
        let group = *gidx.entry(group_id.to_string()).or_insert_with(|| {
            groups.push(group_id.to_string());
            groups.len() - 1
        });
        records.push(Record { region, group, value, weight });
    }
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    PopulationFrame::new(groups, regions, records)
}

fn parse_error(e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line());
    Error::Parse { line, message: e.to_string() }
}

pub fn write_microdata<W: Write>(frame: &PopulationFrame, sink: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(COLUMNS)?;
    for r in frame.records() {
        w.write_record([
            frame.region_labels[r.region].as_str(),
            frame.group_labels[r.group].as_str(),
            &r.value.to_string(),
            &r.weight.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub size: u64,
    /// Mean of the value distribution, in value units.
    pub mean: f64,
    /// Standard deviation of the value distribution, in value units.
    pub sd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub groups: Vec<GroupSpec>,
    pub regions: usize,
    /// 0 keeps each group inside its home regions; 1 spreads every group
    /// uniformly over all regions.
    pub mixing: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.groups.is_empty() {
            return Err(invalid("synthetic spec needs at least one group"));
        }
        if self.regions == 0 {
            return Err(invalid("synthetic spec needs at least one region"));
        }
        if !(0.0..=1.0).contains(&self.mixing) {
            return Err(invalid(format!("mixing {} outside [0, 1]", self.mixing)));
        }
        for g in &self.groups {
            if g.size == 0 {
                return Err(invalid(format!("group `{}` has size 0", g.label)));
            }
            if !(g.sd >= 0.0 && g.sd.is_finite()) {
                return Err(invalid(format!("group `{}` has invalid sd {}", g.label, g.sd)));
            }
            if !(g.mean > 0.0 && g.mean.is_finite()) {
                return Err(invalid(format!(
                    "group `{}` needs a positive mean for log-normal values",
                    g.label
                )));
            }
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.groups.iter().map(|g| g.size).sum()
    }

    /// Number of regions giving roughly `region_size` people per region.
    pub fn regions_for_size(total: u64, region_size: u64) -> usize {
        total.div_ceil(region_size.max(1)).max(1) as usize
    }
}

/// Home regions per group: contiguous blocks apportioned by group size, at
/// least one each. With fewer regions than groups, homes wrap around.
fn home_regions(sizes: &[u64], regions: usize) -> Vec<std::ops::Range<usize>> {
    let g = sizes.len();
    if regions < g {
        return (0..g).map(|i| (i % regions)..(i % regions + 1)).collect();
    }
    let total: u64 = sizes.iter().sum();
    let quota: Vec<f64> = sizes.iter().map(|&s| regions as f64 * s as f64 / total as f64).collect();
    let mut alloc: Vec<usize> = quota.iter().map(|q| (q.floor() as usize).max(1)).collect();
    // Largest remainder up, smallest remainder down, never below one.
    while alloc.iter().sum::<usize>() < regions {
        let i = (0..g)
            .max_by(|&a, &b| {
                (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a))
            })
            .unwrap();
        alloc[i] += 1;
    }
    while alloc.iter().sum::<usize>() > regions {
        let i = (0..g)
            .filter(|&i| alloc[i] > 1)
            .min_by(|&a, &b| {
                (quota[a] - alloc[a] as f64).total_cmp(&(quota[b] - alloc[b] as f64)).then(b.cmp(&a))
            })
            .unwrap();
        alloc[i] -= 1;
    }
    let mut start = 0;
    alloc
        .iter()
        .map(|&n| {
            let r = start..start + n;
            start += n;
            r
        })
        .collect()
}

/// Draw a synthetic population with log-normal values.
///
/// Group sizes are exact. Each individual lands in a uniformly chosen region
/// with probability `mixing`, otherwise in one of its group's home regions.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PopulationFrame> {
    spec.validate()?;
    let sizes: Vec<u64> = spec.groups.iter().map(|g| g.size).collect();
    let homes = home_regions(&sizes, spec.regions);
    let mut records = Vec::with_capacity(spec.total() as usize);
    for (i, g) in spec.groups.iter().enumerate() {
        let mut rng = rng::stream(spec.seed, &[rng::label_tag("synthetic"), i as u64]);
        // Log-space parameters reproducing the requested mean and sd.
        let s2 = (1.0 + (g.sd / g.mean).powi(2)).ln();
        let (mu, s) = (g.mean.ln() - s2 / 2.0, s2.sqrt());
        let home = &homes[i];
        for _ in 0..g.size {
            let region = if spec.mixing > 0.0 && rng.random::<f64>() < spec.mixing {
                rng.random_range(0..spec.regions)
            } else if home.len() == 1 {
                home.start
            } else {
                rng.random_range(home.clone())
            };
            let value = if g.sd == 0.0 {
                g.mean
            } else {
                let z: f64 = StandardNormal.sample(&mut rng);
                (mu + s * z).exp()
            };
            records.push(Record { region, group: i, value, weight: 1 });
        }
    }
    let width = digits(spec.regions);
    let regions = (0..spec.regions).map(|k| format!("r{k:0width$}")).collect();
    let groups = spec.groups.iter().map(|g| g.label.clone()).collect();
    PopulationFrame::new(groups, regions, records)
}

/// Group-by-region counts `N_i^r`, exact or privatized.
#[derive(Debug, Clone, PartialEq)]
pub struct CountMatrix {
    group_labels: Vec<String>,
    region_labels: Vec<String>,
    /// Row-major, one row per group.
    counts: Vec<f64>,
    noised: bool,
    epsilon: Epsilon,
}

impl CountMatrix {
    pub fn new(
        group_labels: Vec<String>,
        region_labels: Vec<String>,
        counts: Vec<f64>,
        noised: bool,
        epsilon: Epsilon,
    ) -> Result<Self> {
        if counts.len() != group_labels.len() * region_labels.len() {
            return Err(invalid(format!(
                "count grid has {} entries, expected {}x{}",
                counts.len(),
                group_labels.len(),
                region_labels.len()
            )));
        }
        if counts.iter().any(|&c| !(c >= 0.0 && c.is_finite())) {
            return Err(invalid("counts must be finite and non-negative"));
        }
        if !noised && counts.iter().any(|c| c.fract() != 0.0) {
            return Err(invalid("exact counts must be integers"));
        }
        Ok(Self { group_labels, region_labels, counts, noised, epsilon })
    }

    pub fn group_labels(&self) -> &[String] {
        &self.group_labels
    }

    pub fn region_labels(&self) -> &[String] {
        &self.region_labels
    }

    pub fn num_groups(&self) -> usize {
        self.group_labels.len()
    }

    pub fn num_regions(&self) -> usize {
        self.region_labels.len()
    }

    pub fn noised(&self) -> bool {
        self.noised
    }

    pub fn epsilon(&self) -> Epsilon {
        self.epsilon
    }

    pub fn get(&self, group: usize, region: usize) -> f64 {
        self.counts[group * self.num_regions() + region]
    }

    pub fn row(&self, group: usize) -> &[f64] {
        let r = self.num_regions();
        &self.counts[group * r..(group + 1) * r]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.counts
    }

    /// Designer-visible group sizes `Ñ_i` (row sums).
    pub fn group_totals(&self) -> Vec<f64> {
        (0..self.num_groups()).map(|i| self.row(i).iter().sum()).collect()
    }

    /// Region sizes `N^r` (column sums).
    pub fn region_totals(&self) -> Vec<f64> {
        (0..self.num_regions())
            .map(|r| (0..self.num_groups()).map(|i| self.get(i, r)).sum())
            .collect()
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub(crate) fn with_counts(&self, counts: Vec<f64>, epsilon: Epsilon) -> Self {
        Self { counts, noised: true, epsilon, ..self.clone() }
    }

    /// Long format: `group_id,region_id,count,noised,epsilon`.
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["group_id", "region_id", "count", "noised", "epsilon"])?;
        let eps = self.epsilon.to_string();
        for (i, g) in self.group_labels.iter().enumerate() {
            for (r, reg) in self.region_labels.iter().enumerate() {
                w.write_record([
                    g.as_str(),
                    reg.as_str(),
                    &self.get(i, r).to_string(),
                    if self.noised { "true" } else { "false" },
                    &eps,
                ])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            group_id: String,
            region_id: String,
            count: f64,
            noised: bool,
            epsilon: Epsilon,
        }
        let mut reader = csv::Reader::from_reader(source);
        let mut groups: Vec<String> = Vec::new();
        let mut regions: Vec<String> = Vec::new();
        let mut cells: HashMap<(usize, usize), f64> = HashMap::new();
        let mut meta: Option<(bool, Epsilon)> = None;
        for row in reader.deserialize::<Row>() {
            let row = row.map_err(parse_error)?;
            let gi = position_or_push(&mut groups, row.group_id);
            let ri = position_or_push(&mut regions, row.region_id);
            if cells.insert((gi, ri), row.count).is_some() {
                return Err(invalid("duplicate count cell"));
            }
            match meta {
                None => meta = Some((row.noised, row.epsilon)),
                Some(m) if m != (row.noised, row.epsilon) => {
                    return Err(invalid("inconsistent noised/epsilon columns"))
                }
                _ => {}
            }
        }
        let (noised, epsilon) = meta.ok_or(Error::EmptyInput)?;
        let mut counts = vec![0.0; groups.len() * regions.len()];
        for ((g, r), c) in cells {
            counts[g * regions.len() + r] = c;
        }
        Self::new(groups, regions, counts, noised, epsilon)
    }
}

fn position_or_push(labels: &mut Vec<String>, label: String) -> usize {
    match labels.iter().position(|l| *l == label) {
        Some(k) => k,
        None => {
            labels.push(label);
            labels.len() - 1
        }
    }
}

/// Exact weighted counts of every group in every region.
pub fn count_matrix(frame: &PopulationFrame) -> CountMatrix {
    let r = frame.num_regions();
    let mut counts = vec![0.0; frame.num_groups() * r];
    for rec in frame.records() {
        counts[rec.group * r + rec.region] += rec.weight as f64;
    }
    CountMatrix {
        group_labels: frame.group_labels.clone(),
        region_labels: frame.region_labels.clone(),
        counts,
        noised: false,
        epsilon: Epsilon::NoPrivacy,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    pub mean: f64,
    /// Population variance (divides by `N_i`).
    pub variance: f64,
    pub count: u64,
}

impl GroupStats {
    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }
}

/// Weighted mean and population variance of each group's values.
pub fn group_stats(frame: &PopulationFrame) -> Result<Vec<GroupStats>> {
    let g = frame.num_groups();
    let mut count = vec![0u64; g];
    let mut sum = vec![0.0; g];
    for r in frame.records() {
        count[r.group] += r.weight;
        sum[r.group] += r.weight as f64 * r.value;
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::EmptyGroup(frame.group_labels[i].clone()));
    }
    let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| s / c as f64).collect();
    let mut ss = vec![0.0; g];
    for r in frame.records() {
        ss[r.group] += r.weight as f64 * (r.value - mean[r.group]).powi(2);
    }
    Ok((0..g)
        .map(|i| GroupStats { mean: mean[i], variance: ss[i] / count[i] as f64, count: count[i] })
        .collect())
}
