//! Scenario files: TOML schema, validation, and the validated problem
//! description consumed by the solvers.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::control::{junction_signals, DurationBox, Signal, SwitchSchedule};
use crate::error::{Error, Result};
use crate::fields::{discretize_density, Block, DensityField, Grid, GridSpec, Profile};
use crate::forward::{Limiter, SolverConfig};
use crate::network::{build_network, EdgeSpec, Network, VertexKind};

const ROW_SUM_TOL: f64 = 1e-12;

fn default_one() -> f64 {
    1.0
}

fn default_cfl() -> f64 {
    0.99
}

fn default_stride() -> usize {
    1
}

fn default_breakpoints() -> Vec<f64> {
    vec![0.0]
}

fn is_false(b: &bool) -> bool {
    !*b
}

// ---------------------------------------------------------------------------
// File schema
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub network: NetworkSection,
    pub grid: GridSection,
    #[serde(default)]
    pub velocity: VelocitySection,
    #[serde(default)]
    pub kernel: KernelSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lights: Option<LightsSection>,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default, rename = "matrixP")]
    pub matrix_p: MatrixSection,
    #[serde(default)]
    pub inflow: InflowSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fleet: Option<FleetSection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSection {
    pub edges: Vec<EdgeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeEntry {
    pub id: u32,
    pub tail: String,
    pub head: String,
    pub length: f64,
    #[serde(default, skip_serializing_if = "is_false")]
    pub terminal: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dx: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells_per_edge: Option<usize>,
    pub horizon: f64,
    #[serde(default = "default_cfl")]
    pub cfl: f64,
    #[serde(default)]
    pub limiter: Limiter,
    #[serde(default = "default_stride")]
    pub record_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VelocitySection {
    #[serde(default = "default_one")]
    pub free_flow: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub edges: Vec<EdgeSpeedEntry>,
}

impl Default for VelocitySection {
    fn default() -> Self {
        VelocitySection {
            free_flow: 1.0,
            edges: Vec::new(),
        }
    }
}

/// Per-edge free-flow speed: a constant, or a piecewise-linear profile
/// through `(x[i], v[i])`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeSpeedEntry {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub free_flow: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelModel {
    #[default]
    Local,
    Nonlocal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelSection {
    #[serde(default)]
    pub model: KernelModel,
    #[serde(default = "default_one")]
    pub mu1: f64,
    #[serde(default)]
    pub mu2: f64,
    #[serde(default = "default_one")]
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub table: Option<KernelTable>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius_cells: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<WeightEntry>,
}

impl Default for KernelSection {
    fn default() -> Self {
        KernelSection {
            model: KernelModel::Local,
            mu1: 1.0,
            mu2: 0.0,
            beta: 1.0,
            table: None,
            radius: None,
            radius_cells: None,
            alpha: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KernelTable {
    pub r: Vec<f64>,
    pub k: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightEntry {
    pub from: u32,
    pub to: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightsSection {
    pub radius: f64,
    pub groups: Vec<LightGroupEntry>,
}

/// Lights on the approaches `edges` of `vertex`. The first approach follows
/// the schedule, a second approach gets the complementary signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LightGroupEntry {
    pub vertex: String,
    pub edges: Vec<u32>,
    pub u0: u8,
    pub durations: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_green: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_red: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profiles: Vec<ProfileEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockEntry {
    pub edge: u32,
    pub from: f64,
    pub to: f64,
    #[serde(default = "default_one")]
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileEntry {
    pub edge: u32,
    pub values: Vec<f64>,
}

/// Piecewise-constant split matrix. `breakpoints` are interval start times
/// (the first is 0); `rows[].p[i]` is the row on interval `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixSection {
    #[serde(default = "default_breakpoints")]
    pub breakpoints: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rows: Vec<RowEntry>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        MatrixSection {
            breakpoints: default_breakpoints(),
            rows: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowEntry {
    pub from: u32,
    pub to: Vec<u32>,
    pub p: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InflowSection {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub sources: Vec<SourceEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceEntry {
    pub vertex: String,
    #[serde(default = "default_breakpoints")]
    pub breakpoints: Vec<f64>,
    pub rates: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetSection {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub blocks: Vec<BlockEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub profiles: Vec<ProfileEntry>,
    #[serde(default, rename = "matrixQ", skip_serializing_if = "Option::is_none")]
    pub matrix_q: Option<MatrixSection>,
    #[serde(default)]
    pub control: FleetControlEntry,
    pub lipschitz: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<KernelSection>,
}

/// `constant` applies wherever no table covers the edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetControlEntry {
    #[serde(default = "default_one")]
    pub constant: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tables: Vec<ControlTableEntry>,
}

impl Default for FleetControlEntry {
    fn default() -> Self {
        FleetControlEntry {
            constant: 1.0,
            tables: Vec::new(),
        }
    }
}

/// Nodal values `u[i][j]` at `(t[i], x[j])` on one edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControlTableEntry {
    pub edge: u32,
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub u: Vec<Vec<f64>>,
}

// ---------------------------------------------------------------------------
// Validated types
// ---------------------------------------------------------------------------

/// Linear interpolation through sorted nodes, constant beyond the ends.
fn interp(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    let last = xs.len() - 1;
    if x >= xs[last] {
        return ys[last];
    }
    let i = xs.partition_point(|&s| s <= x) - 1;
    let w = (x - xs[i]) / (xs[i + 1] - xs[i]);
    ys[i] + w * (ys[i + 1] - ys[i])
}

fn check_nodes(path: &str, xs: &[f64], ys: &[f64]) -> Result<()> {
    if xs.is_empty() || xs.len() != ys.len() {
        return Err(Error::validation(path, "need matching, nonempty node and value lists"));
    }
    if xs.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::validation(path, "nodes must increase strictly"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum FreeFlow {
    Constant(f64),
    Linear { x: Vec<f64>, v: Vec<f64> },
}

impl FreeFlow {
    pub fn at(&self, x: f64) -> f64 {
        match self {
            FreeFlow::Constant(v) => *v,
            FreeFlow::Linear { x: xs, v } => interp(xs, v, x),
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            FreeFlow::Constant(v) => *v,
            FreeFlow::Linear { v, .. } => v.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum KernelShape {
    /// `k(r) = mu2 / (mu1 + r)^beta`.
    Power { mu1: f64, mu2: f64, beta: f64 },
    Table { r: Vec<f64>, k: Vec<f64> },
}

impl KernelShape {
    pub fn eval(&self, r: f64) -> f64 {
        match self {
            KernelShape::Power { mu1, mu2, beta } => mu2 / (mu1 + r).powf(*beta),
            KernelShape::Table { r: rs, k } => interp(rs, k, r),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelParams {
    pub shape: KernelShape,
    pub radius: f64,
    /// `alpha[k]` lists `(j, alpha_kj)` over the outgoing edges at the head
    /// of edge `k`.
    pub alpha: Vec<Vec<(usize, f64)>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LightGroup {
    pub vertex: usize,
    pub edges: Vec<usize>,
    pub schedule: SwitchSchedule,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lights {
    pub radius: f64,
    pub groups: Vec<LightGroup>,
}

/// Row-stochastic split matrices, constant on `[breakpoints[i], breakpoints[i+1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionSchedule {
    breakpoints: Vec<f64>,
    /// `rows[i][k]` lists `(j, p_kj)` over the outgoing edges at the head of `k`.
    rows: Vec<Vec<Vec<(usize, f64)>>>,
    horizon: f64,
}

impl DistributionSchedule {
    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    fn interval(&self, t: f64) -> usize {
        self.breakpoints.partition_point(|&b| b <= t).saturating_sub(1)
    }

    /// Active row at time `t`, right-continuous at breakpoints.
    pub fn row(&self, edge: usize, t: f64) -> Result<&[(usize, f64)]> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(Error::Range {
                what: "t",
                value: t,
                lo: 0.0,
                hi: self.horizon,
            });
        }
        Ok(&self.rows[self.interval(t)][edge])
    }

    /// Exact time average of the row over `[a, b]`.
    pub fn average_row(&self, edge: usize, a: f64, b: f64) -> Vec<(usize, f64)> {
        let first = self.interval(a);
        let mut out: Vec<(usize, f64)> = self.rows[first][edge].iter().map(|&(j, _)| (j, 0.0)).collect();
        if b <= a {
            return self.rows[first][edge].clone();
        }
        for i in first..self.breakpoints.len() {
            let lo = self.breakpoints[i].max(a);
            let hi = self.breakpoints.get(i + 1).copied().unwrap_or(f64::INFINITY).min(b);
            if hi <= lo {
                if self.breakpoints[i] >= b {
                    break;
                }
                continue;
            }
            let w = (hi - lo) / (b - a);
            for (slot, &(_, p)) in out.iter_mut().zip(&self.rows[i][edge]) {
                slot.1 += w * p;
            }
        }
        out
    }

    fn build(net: &Network, sec: &MatrixSection, horizon: f64, label: &str) -> Result<Self> {
        let bp = &sec.breakpoints;
        if bp.is_empty() || bp[0] != 0.0 {
            return Err(Error::validation(format!("{label}.breakpoints"), "must start at 0"));
        }
        if bp.windows(2).any(|w| w[1] <= w[0]) || *bp.last().unwrap() >= horizon {
            return Err(Error::validation(
                format!("{label}.breakpoints"),
                "must increase strictly and stay below the horizon",
            ));
        }
        let n_int = bp.len();
        let mut given: Vec<Option<usize>> = vec![None; net.num_edges()];
        for (r_idx, row) in sec.rows.iter().enumerate() {
            let path = format!("{label}.rows[{r_idx}]");
            let k = net
                .edge_index(row.from)
                .ok_or_else(|| Error::validation(&path, format!("unknown edge {}", row.from)))?;
            if given[k].replace(r_idx).is_some() {
                return Err(Error::validation(&path, format!("duplicate row for edge {}", row.from)));
            }
            let head = net.edge(k).head;
            for to in &row.to {
                let j = net
                    .edge_index(*to)
                    .ok_or_else(|| Error::validation(&path, format!("unknown edge {to}")))?;
                if !net.outgoing(head).contains(&j) {
                    return Err(Error::validation(
                        &path,
                        format!("edge {to} does not leave the head of edge {}", row.from),
                    ));
                }
            }
            if row.p.len() != n_int {
                return Err(Error::validation(
                    &path,
                    format!("{} intervals given, {} breakpoints declared", row.p.len(), n_int),
                ));
            }
        }
        let mut rows = vec![vec![Vec::new(); net.num_edges()]; n_int];
        for k in 0..net.num_edges() {
            let outs = net.outgoing(net.edge(k).head);
            match given[k] {
                None if outs.len() <= 1 => {
                    for r in rows.iter_mut() {
                        r[k] = outs.iter().map(|&j| (j, 1.0)).collect();
                    }
                }
                None => {
                    return Err(Error::validation(
                        format!("{label}.rows"),
                        format!("edge {} feeds {} edges and needs a row", net.edge(k).id, outs.len()),
                    ));
                }
                Some(r_idx) => {
                    let entry = &sec.rows[r_idx];
                    for (i, p) in entry.p.iter().enumerate() {
                        let path = format!("{label}.rows[{r_idx}].p[{i}]");
                        if p.len() != entry.to.len() {
                            return Err(Error::validation(path, "one probability per target edge"));
                        }
                        if let Some(x) = p.iter().find(|x| !(0.0..=1.0).contains(*x)) {
                            return Err(Error::validation(path, format!("entry {x} outside [0, 1]")));
                        }
                        let sum: f64 = p.iter().sum();
                        if outs.is_empty() || (sum - 1.0).abs() > ROW_SUM_TOL {
                            return Err(Error::validation(
                                path,
                                format!("row sums to {sum}, expected 1 within {ROW_SUM_TOL:e}"),
                            ));
                        }
                        rows[i][k] = outs
                            .iter()
                            .map(|&j| {
                                let w = entry
                                    .to
                                    .iter()
                                    .position(|to| net.edge_index(*to) == Some(j))
                                    .map_or(0.0, |pos| p[pos]);
                                (j, w)
                            })
                            .collect();
                    }
                }
            }
        }
        Ok(DistributionSchedule {
            breakpoints: bp.clone(),
            rows,
            horizon,
        })
    }
}

/// Looks up the active row of `sched` for `edge` at time `t`.
pub fn distribution_row(sched: &DistributionSchedule, edge: usize, t: f64) -> Result<Vec<(usize, f64)>> {
    sched.row(edge, t).map(<[_]>::to_vec)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SourceInflow {
    pub vertex: usize,
    pub breakpoints: Vec<f64>,
    pub rates: Vec<f64>,
}

/// Piecewise-constant mass rates entering at source vertices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct InflowSchedule {
    pub sources: Vec<SourceInflow>,
}

impl InflowSchedule {
    /// Mean rate at `vertex` over `[a, b]`.
    pub fn average_rate(&self, vertex: usize, a: f64, b: f64) -> f64 {
        let mut total = 0.0;
        for s in self.sources.iter().filter(|s| s.vertex == vertex) {
            for (i, &r) in s.rates.iter().enumerate() {
                let lo = s.breakpoints[i].max(a);
                let hi = s.breakpoints.get(i + 1).copied().unwrap_or(f64::INFINITY).min(b);
                if hi > lo {
                    total += r * (hi - lo);
                }
            }
        }
        if b > a {
            total / (b - a)
        } else {
            0.0
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sources.iter().all(|s| s.rates.iter().all(|&r| r == 0.0))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlTable {
    pub x: Vec<f64>,
    pub t: Vec<f64>,
    pub u: Vec<Vec<f64>>,
}

impl ControlTable {
    /// Bilinear interpolation, constant beyond the table.
    pub fn eval(&self, x: f64, t: f64) -> f64 {
        let row = |i: usize| interp(&self.x, &self.u[i], x);
        if t <= self.t[0] {
            return row(0);
        }
        let last = self.t.len() - 1;
        if t >= self.t[last] {
            return row(last);
        }
        let i = self.t.partition_point(|&s| s <= t) - 1;
        let w = (t - self.t[i]) / (self.t[i + 1] - self.t[i]);
        row(i) + w * (row(i + 1) - row(i))
    }
}

/// Fleet speed fraction `u(x, t)` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetControl {
    pub constant: f64,
    /// Per edge, an optional table overriding `constant`.
    pub tables: Vec<Option<ControlTable>>,
}

impl FleetControl {
    pub fn eval(&self, edge: usize, x: f64, t: f64) -> f64 {
        match &self.tables[edge] {
            Some(tab) => tab.eval(x, t),
            None => self.constant,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FleetSpec {
    pub initial: DensityField,
    pub distribution: DistributionSchedule,
    pub control: FleetControl,
    pub lipschitz: f64,
    pub kernel: KernelParams,
}

/// A fully validated problem description.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub network: Network,
    pub grid: Grid,
    pub horizon: f64,
    pub solver: SolverConfig,
    pub free_flow: Vec<FreeFlow>,
    pub kernel: Option<KernelParams>,
    pub lights: Option<Lights>,
    pub initial: DensityField,
    pub distribution: DistributionSchedule,
    pub inflow: InflowSchedule,
    pub fleet: Option<FleetSpec>,
    file: ScenarioFile,
}

impl PartialEq for Scenario {
    fn eq(&self, other: &Self) -> bool {
        self.file == other.file
    }
}

// ---------------------------------------------------------------------------
// Parsing
// ---------------------------------------------------------------------------

const BUNDLED: &[(&str, &str)] = &[
    ("red_light_local", include_str!("../examples/scenarios/red_light_local.toml")),
    ("red_light_nonlocal", include_str!("../examples/scenarios/red_light_nonlocal.toml")),
    ("merge_separated", include_str!("../examples/scenarios/merge_separated.toml")),
    ("merge_overlapping", include_str!("../examples/scenarios/merge_overlapping.toml")),
    ("merge_five_switches", include_str!("../examples/scenarios/merge_five_switches.toml")),
    ("fleet_demo", include_str!("../examples/scenarios/fleet_demo.toml")),
];

/// Names of the scenarios compiled into the library.
pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

pub fn bundled_source(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, s)| *s)
}

pub fn bundled(name: &str) -> Result<Scenario> {
    let text = bundled_source(name).ok_or_else(|| Error::validation("scenario", format!("no bundled scenario named {name}")))?;
    parse_scenario_str(text, name)
}

/// Reads and validates a scenario file.
pub fn parse_scenario(path: &Path) -> Result<Scenario> {
    let text = std::fs::read_to_string(path)?;
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("scenario");
    parse_scenario_str(&text, stem)
}

/// Accepts a file path, or the name of a bundled scenario when no such file
/// exists.
pub fn resolve_scenario(arg: &str) -> Result<Scenario> {
    let path = Path::new(arg);
    if path.exists() {
        parse_scenario(path)
    } else if bundled_source(arg).is_some() {
        bundled(arg)
    } else {
        Err(Error::Io(std::io::Error::new(
            std::io::ErrorKind::NotFound,
            format!("{arg}: no such file and no bundled scenario of that name"),
        )))
    }
}

pub fn parse_scenario_str(text: &str, default_name: &str) -> Result<Scenario> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    Scenario::from_file(file, default_name)
}

fn edge_of(net: &Network, id: u32, path: &str) -> Result<usize> {
    net.edge_index(id)
        .ok_or_else(|| Error::validation(path, format!("unknown edge {id}")))
}

fn blocks_of(net: &Network, entries: &[BlockEntry], label: &str) -> Result<Vec<Block>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, b)| {
            Ok(Block {
                edge: edge_of(net, b.edge, &format!("{label}.blocks[{i}]"))?,
                from: b.from,
                to: b.to,
                value: b.value,
            })
        })
        .collect()
}

fn profiles_of(net: &Network, entries: &[ProfileEntry], label: &str) -> Result<Vec<Profile>> {
    entries
        .iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(Profile {
                edge: edge_of(net, p.edge, &format!("{label}.profiles[{i}]"))?,
                values: p.values.clone(),
            })
        })
        .collect()
}

fn build_kernel(
    net: &Network,
    grid: &Grid,
    sec: &KernelSection,
    distribution: &DistributionSchedule,
    label: &str,
) -> Result<Option<KernelParams>> {
    if sec.model == KernelModel::Local {
        return Ok(None);
    }
    let shape = match &sec.table {
        Some(t) => {
            check_nodes(&format!("{label}.table"), &t.r, &t.k)?;
            if t.k.iter().any(|k| !(*k >= 0.0)) {
                return Err(Error::validation(format!("{label}.table"), "kernel values must be nonnegative"));
            }
            KernelShape::Table {
                r: t.r.clone(),
                k: t.k.clone(),
            }
        }
        None => {
            if !(sec.mu1 > 0.0 && sec.mu2 >= 0.0 && sec.beta >= 0.0) {
                return Err(Error::validation(
                    label,
                    format!("need mu1 > 0, mu2 >= 0, beta >= 0 (got {}, {}, {})", sec.mu1, sec.mu2, sec.beta),
                ));
            }
            KernelShape::Power {
                mu1: sec.mu1,
                mu2: sec.mu2,
                beta: sec.beta,
            }
        }
    };
    let radius = match (sec.radius, sec.radius_cells) {
        (Some(r), None) => r,
        (None, Some(c)) => c * grid.min_dx(),
        _ => {
            return Err(Error::validation(
                label,
                "give exactly one of radius or radius_cells for a nonlocal kernel",
            ))
        }
    };
    if !(radius > 0.0) {
        return Err(Error::validation(format!("{label}.radius"), "must be positive"));
    }
    if radius >= net.min_edge_length() {
        return Err(Error::validation(
            format!("{label}.radius"),
            format!(
                "interaction radius {radius} must be below the minimal edge length {}",
                net.min_edge_length()
            ),
        ));
    }
    let mut alpha: Vec<Vec<(usize, f64)>> = (0..net.num_edges())
        .map(|k| distribution.rows[0][k].clone())
        .collect();
    let mut touched = vec![false; net.num_edges()];
    for (i, w) in sec.alpha.iter().enumerate() {
        let path = format!("{label}.alpha[{i}]");
        let k = edge_of(net, w.from, &path)?;
        let j = edge_of(net, w.to, &path)?;
        if !(0.0..=1.0).contains(&w.weight) {
            return Err(Error::validation(path, format!("weight {} outside [0, 1]", w.weight)));
        }
        let Some(slot) = alpha[k].iter_mut().find(|(jj, _)| *jj == j) else {
            return Err(Error::validation(
                path,
                format!("edge {} does not leave the head of edge {}", w.to, w.from),
            ));
        };
        if !touched[k] {
            touched[k] = true;
            let fresh: Vec<(usize, f64)> = net.outgoing(net.edge(k).head).iter().map(|&j| (j, 0.0)).collect();
            alpha[k] = fresh;
            let slot = alpha[k].iter_mut().find(|(jj, _)| *jj == j).unwrap();
            slot.1 = w.weight;
        } else {
            slot.1 = w.weight;
        }
    }
    for (k, row) in alpha.iter().enumerate() {
        if touched[k] {
            let sum: f64 = row.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::validation(
                    format!("{label}.alpha"),
                    format!("weights leaving edge {} sum to {sum}", net.edge(k).id),
                ));
            }
        }
    }
    Ok(Some(KernelParams { shape, radius, alpha }))
}

fn check_lipschitz(tab: &ControlTableEntry, lipschitz: f64, path: &str) -> Result<()> {
    let bound = 1.1 * lipschitz;
    for (i, row) in tab.u.iter().enumerate() {
        for j in 0..row.len() {
            if j + 1 < row.len() {
                let du = (row[j + 1] - row[j]).abs();
                if du > bound * (tab.x[j + 1] - tab.x[j]) + 1e-15 {
                    return Err(Error::validation(
                        path,
                        format!("|du| = {du} between x = {} and {} exceeds L dx", tab.x[j], tab.x[j + 1]),
                    ));
                }
            }
            if i + 1 < tab.u.len() {
                let du = (tab.u[i + 1][j] - row[j]).abs();
                if du > bound * (tab.t[i + 1] - tab.t[i]) + 1e-15 {
                    return Err(Error::validation(
                        path,
                        format!("|du| = {du} between t = {} and {} exceeds L dt", tab.t[i], tab.t[i + 1]),
                    ));
                }
            }
        }
    }
    Ok(())
}

impl Scenario {
    pub fn from_file(file: ScenarioFile, default_name: &str) -> Result<Self> {
        let specs: Vec<EdgeSpec> = file
            .network
            .edges
            .iter()
            .map(|e| EdgeSpec {
                id: e.id,
                tail: e.tail.clone(),
                head: e.head.clone(),
                length: e.length,
                terminal: e.terminal,
            })
            .collect();
        let network = build_network(&specs)?;

        let g = &file.grid;
        if !(g.horizon > 0.0 && g.horizon.is_finite()) {
            return Err(Error::validation("grid.horizon", format!("must be positive, got {}", g.horizon)));
        }
        let grid_spec = match (g.dx, g.cells_per_edge) {
            (Some(dx), None) => GridSpec::Dx(dx),
            (None, Some(n)) => GridSpec::CellsPerEdge(n),
            _ => return Err(Error::validation("grid", "give exactly one of dx or cells_per_edge")),
        };
        let grid = Grid::build(&network, grid_spec)?;
        let solver = SolverConfig {
            cfl: g.cfl,
            limiter: g.limiter,
            record_stride: g.record_stride,
        };
        solver.validate()?;
        let horizon = g.horizon;

        let v = &file.velocity;
        if !(v.free_flow >= 0.0) {
            return Err(Error::validation("velocity.free_flow", "free-flow speed must be nonnegative"));
        }
        let mut free_flow = vec![FreeFlow::Constant(v.free_flow); network.num_edges()];
        for (i, e) in v.edges.iter().enumerate() {
            let path = format!("velocity.edges[{i}]");
            let k = edge_of(&network, e.id, &path)?;
            free_flow[k] = match (&e.free_flow, &e.x, &e.v) {
                (Some(c), None, None) => FreeFlow::Constant(*c),
                (None, Some(xs), Some(vs)) => {
                    check_nodes(&path, xs, vs)?;
                    FreeFlow::Linear { x: xs.clone(), v: vs.clone() }
                }
                _ => return Err(Error::validation(path, "give free_flow, or both x and v")),
            };
            let bad = match &free_flow[k] {
                FreeFlow::Constant(c) => !(*c >= 0.0),
                FreeFlow::Linear { v, .. } => v.iter().any(|c| !(*c >= 0.0)),
            };
            if bad {
                return Err(Error::validation(path, "free-flow speed must be nonnegative"));
            }
        }

        let distribution = DistributionSchedule::build(&network, &file.matrix_p, horizon, "matrixP")?;
        let kernel = build_kernel(&network, &grid, &file.kernel, &distribution, "kernel")?;

        let lights = match &file.lights {
            None => None,
            Some(sec) => {
                if !(sec.radius > 0.0 && sec.radius <= network.min_edge_length()) {
                    return Err(Error::validation(
                        "lights.radius",
                        format!(
                            "light radius {} must lie in (0, {}]",
                            sec.radius,
                            network.min_edge_length()
                        ),
                    ));
                }
                let mut groups = Vec::new();
                let mut lit = vec![false; network.num_edges()];
                for (gi, entry) in sec.groups.iter().enumerate() {
                    let path = format!("lights.groups[{gi}]");
                    let vertex = network
                        .vertex_index(&entry.vertex)
                        .ok_or_else(|| Error::validation(&path, format!("unknown vertex {}", entry.vertex)))?;
                    if entry.edges.is_empty() {
                        return Err(Error::validation(&path, "a light group needs at least one edge"));
                    }
                    let mut edges = Vec::new();
                    for id in &entry.edges {
                        let k = edge_of(&network, *id, &path)?;
                        if network.edge(k).head != vertex {
                            return Err(Error::validation(
                                &path,
                                format!("edge {id} does not end at vertex {}", entry.vertex),
                            ));
                        }
                        if std::mem::replace(&mut lit[k], true) {
                            return Err(Error::validation(&path, format!("edge {id} carries two lights")));
                        }
                        edges.push(k);
                    }
                    let mut schedule = SwitchSchedule::new(entry.u0, entry.durations.clone());
                    match (entry.t_green, entry.t_red) {
                        (Some(tg), Some(tr)) => schedule = schedule.with_bounds(DurationBox::new(tg, tr)?),
                        (None, None) => {}
                        _ => return Err(Error::validation(&path, "give both t_green and t_red, or neither")),
                    }
                    junction_signals(&schedule, edges.len(), horizon).map_err(|e| match e {
                        Error::Validation { path: p, message } => Error::validation(format!("{path}.{p}"), message),
                        Error::Unsupported(m) => Error::validation(&path, m),
                        other => other,
                    })?;
                    groups.push(LightGroup { vertex, edges, schedule });
                }
                Some(Lights {
                    radius: sec.radius,
                    groups,
                })
            }
        };

        let blocks = blocks_of(&network, &file.initial.blocks, "initial")?;
        let profiles = profiles_of(&network, &file.initial.profiles, "initial")?;
        let initial = discretize_density(&blocks, &profiles, &grid)?;

        let mut inflow = InflowSchedule::default();
        for (i, s) in file.inflow.sources.iter().enumerate() {
            let path = format!("inflow.sources[{i}]");
            let vertex = network
                .vertex_index(&s.vertex)
                .ok_or_else(|| Error::validation(&path, format!("unknown vertex {}", s.vertex)))?;
            if network.kind(vertex) != VertexKind::Source {
                return Err(Error::validation(&path, format!("vertex {} is not a source", s.vertex)));
            }
            if s.breakpoints.len() != s.rates.len() || s.breakpoints.first() != Some(&0.0) {
                return Err(Error::validation(&path, "one rate per breakpoint; the first breakpoint is 0"));
            }
            if s.breakpoints.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::validation(&path, "breakpoints must be sorted"));
            }
            if let Some(r) = s.rates.iter().find(|r| !(**r >= 0.0 && r.is_finite())) {
                return Err(Error::validation(&path, format!("rates must be nonnegative, got {r}")));
            }
            inflow.sources.push(SourceInflow {
                vertex,
                breakpoints: s.breakpoints.clone(),
                rates: s.rates.clone(),
            });
        }

        let fleet = match &file.fleet {
            None => None,
            Some(sec) => {
                let blocks = blocks_of(&network, &sec.blocks, "fleet")?;
                let profiles = profiles_of(&network, &sec.profiles, "fleet")?;
                let initial = discretize_density(&blocks, &profiles, &grid).map_err(|e| match e {
                    Error::Validation { path, message } => Error::validation(format!("fleet.{path}"), message),
                    other => other,
                })?;
                let distribution = match &sec.matrix_q {
                    Some(q) => DistributionSchedule::build(&network, q, horizon, "fleet.matrixQ")?,
                    None => distribution.clone(),
                };
                if !(sec.lipschitz >= 0.0) {
                    return Err(Error::validation("fleet.lipschitz", "must be nonnegative"));
                }
                if !(0.0..=1.0).contains(&sec.control.constant) {
                    return Err(Error::validation("fleet.control.constant", "must lie in [0, 1]"));
                }
                let mut tables = vec![None; network.num_edges()];
                for (i, t) in sec.control.tables.iter().enumerate() {
                    let path = format!("fleet.control.tables[{i}]");
                    let k = edge_of(&network, t.edge, &path)?;
                    if t.x.is_empty()
                        || t.t.is_empty()
                        || t.u.len() != t.t.len()
                        || t.u.iter().any(|r| r.len() != t.x.len())
                    {
                        return Err(Error::validation(&path, "u must have one row per t and one column per x"));
                    }
                    if t.x.windows(2).any(|w| w[1] <= w[0]) || t.t.windows(2).any(|w| w[1] <= w[0]) {
                        return Err(Error::validation(&path, "x and t nodes must increase strictly"));
                    }
                    if t.u.iter().flatten().any(|u| !(0.0..=1.0).contains(u)) {
                        return Err(Error::validation(&path, "control values must lie in [0, 1]"));
                    }
                    check_lipschitz(t, sec.lipschitz, &path)?;
                    tables[k] = Some(ControlTable {
                        x: t.x.clone(),
                        t: t.t.clone(),
                        u: t.u.clone(),
                    });
                }
                let kernel_sec = match &sec.kernel {
                    Some(k) => k.clone(),
                    None => file.kernel.clone(),
                };
                let kernel = build_kernel(&network, &grid, &kernel_sec, &distribution, "fleet.kernel")?
                    .ok_or_else(|| {
                        Error::validation("fleet.kernel", "the fleet interaction needs a nonlocal kernel")
                    })?;
                Some(FleetSpec {
                    initial,
                    distribution,
                    control: FleetControl {
                        constant: sec.control.constant,
                        tables,
                    },
                    lipschitz: sec.lipschitz,
                    kernel,
                })
            }
        };

        Ok(Scenario {
            name: file.name.clone().unwrap_or_else(|| default_name.to_string()),
            network,
            grid,
            horizon,
            solver,
            free_flow,
            kernel,
            lights,
            initial,
            distribution,
            inflow,
            fleet,
            file,
        })
    }

    pub fn file(&self) -> &ScenarioFile {
        &self.file
    }

    /// Serializes the scenario back to TOML; reparsing gives the same content.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(&self.file).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn max_free_flow(&self) -> f64 {
        self.free_flow.iter().map(FreeFlow::max).fold(0.0, f64::max)
    }

    pub fn initial_mass(&self) -> f64 {
        self.initial.mass(&self.grid)
    }

    /// `(edge, signal)` for every lighted edge.
    pub fn light_signals(&self) -> Result<Vec<(usize, Signal)>> {
        let mut out = Vec::new();
        if let Some(l) = &self.lights {
            for g in &l.groups {
                let sigs = junction_signals(&g.schedule, g.edges.len(), self.horizon)?;
                out.extend(g.edges.iter().copied().zip(sigs));
            }
        }
        Ok(out)
    }

    /// The single light group driven by the optimizer.
    pub fn controlled_group(&self) -> Result<&LightGroup> {
        match &self.lights {
            Some(l) if l.groups.len() == 1 => Ok(&l.groups[0]),
            Some(l) => Err(Error::Unsupported(format!(
                "schedule optimization needs exactly one light group, found {}",
                l.groups.len()
            ))),
            None => Err(Error::Unsupported("scenario has no traffic light".into())),
        }
    }

    /// Copy with the schedule of light group `group` replaced.
    pub fn with_schedule(&self, group: usize, sched: &SwitchSchedule) -> Result<Scenario> {
        let mut file = self.file.clone();
        let entry = file
            .lights
            .as_mut()
            .and_then(|l| l.groups.get_mut(group))
            .ok_or_else(|| Error::validation("lights.groups", format!("no light group {group}")))?;
        entry.u0 = sched.u0;
        entry.durations = sched.durations.clone();
        if let Some(b) = sched.bounds {
            entry.t_green = Some(b.green_min);
            entry.t_red = Some(b.red_max);
        }
        let mut out = self.clone();
        let lights = out.lights.as_mut().expect("group exists in the file");
        junction_signals(sched, lights.groups[group].edges.len(), self.horizon)?;
        let mut s = sched.clone();
        if s.bounds.is_none() {
            s.bounds = lights.groups[group].schedule.bounds;
        }
        lights.groups[group].schedule = s;
        out.file = file;
        Ok(out)
    }

    /// Copy without the fleet block.
    pub fn without_fleet(&self) -> Scenario {
        let mut out = self.clone();
        out.fleet = None;
        out.file.fleet = None;
        out
    }
}
