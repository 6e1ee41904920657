//! Per-edge uniform grids, cell-averaged densities and quadrature.

use crate::error::{Error, Result};
use crate::network::Network;

/// Uniform partition of one edge into `n_cells` cells of width `dx`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeGrid {
    pub edge: usize,
    pub id: u32,
    pub n_cells: usize,
    pub dx: f64,
    pub length: f64,
}

impl EdgeGrid {
    pub fn new(edge: usize, id: u32, length: f64, n_cells: usize) -> Result<Self> {
        if n_cells < 2 {
            return Err(Error::validation(
                format!("grid.edge[{id}]"),
                format!("at least 2 cells per edge are required, got {n_cells}"),
            ));
        }
        Ok(EdgeGrid {
            edge,
            id,
            n_cells,
            dx: length / n_cells as f64,
            length,
        })
    }

    /// Cell count `round(length / dx)`.
    pub fn with_target_dx(edge: usize, id: u32, length: f64, dx: f64) -> Result<Self> {
        if !(dx > 0.0 && dx.is_finite()) {
            return Err(Error::validation("grid.dx", format!("must be positive, got {dx}")));
        }
        let n = (length / dx).round().max(1.0) as usize;
        Self::new(edge, id, length, n)
    }

    pub fn center(&self, i: usize) -> f64 {
        (i as f64 + 0.5) * self.dx
    }

    /// Right face of cell `i`.
    pub fn face(&self, i: usize) -> f64 {
        (i + 1) as f64 * self.dx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum GridSpec {
    Dx(f64),
    CellsPerEdge(usize),
}

/// One [`EdgeGrid`] per network edge, indexed like the network's edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    edges: Vec<EdgeGrid>,
}

impl Grid {
    pub fn build(net: &Network, spec: GridSpec) -> Result<Self> {
        let edges = net
            .edges()
            .iter()
            .enumerate()
            .map(|(k, e)| match spec {
                GridSpec::Dx(dx) => EdgeGrid::with_target_dx(k, e.id, e.length, dx),
                GridSpec::CellsPerEdge(n) => EdgeGrid::new(k, e.id, e.length, n),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Grid { edges })
    }

    pub fn from_edges(edges: Vec<EdgeGrid>) -> Self {
        Grid { edges }
    }

    pub fn edges(&self) -> &[EdgeGrid] {
        &self.edges
    }

    pub fn edge(&self, k: usize) -> &EdgeGrid {
        &self.edges[k]
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn min_dx(&self) -> f64 {
        self.edges.iter().map(|g| g.dx).fold(f64::INFINITY, f64::min)
    }

    pub fn total_cells(&self) -> usize {
        self.edges.iter().map(|g| g.n_cells).sum()
    }
}

/// Cell-averaged density, one vector per edge.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityField {
    pub values: Vec<Vec<f64>>,
}

impl DensityField {
    pub fn zeros(grid: &Grid) -> Self {
        DensityField {
            values: grid.edges().iter().map(|g| vec![0.0; g.n_cells]).collect(),
        }
    }

    pub fn edge(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn edge_mass(&self, grid: &Grid, k: usize) -> f64 {
        self.values[k].iter().sum::<f64>() * grid.edge(k).dx
    }

    pub fn mass(&self, grid: &Grid) -> f64 {
        (0..self.values.len()).map(|k| self.edge_mass(grid, k)).sum()
    }

    pub fn max(&self) -> f64 {
        self.values.iter().flatten().copied().fold(0.0, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().flatten().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn check_shape(&self, grid: &Grid) -> Result<()> {
        if self.values.len() != grid.num_edges()
            || self.values.iter().zip(grid.edges()).any(|(v, g)| v.len() != g.n_cells)
        {
            return Err(Error::Shape("density field does not match the grid".into()));
        }
        Ok(())
    }
}

/// Indicator block `value * chi_[from, to]` on one edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Block {
    pub edge: usize,
    pub from: f64,
    pub to: f64,
    pub value: f64,
}

/// Cell-averaged values given directly on one edge's grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    pub edge: usize,
    pub values: Vec<f64>,
}

/// Exact cell averages of a sum of indicator blocks and tabulated profiles.
pub fn discretize_density(blocks: &[Block], profiles: &[Profile], grid: &Grid) -> Result<DensityField> {
    let mut field = DensityField::zeros(grid);
    for (b_idx, b) in blocks.iter().enumerate() {
        let path = format!("initial.blocks[{b_idx}]");
        if b.edge >= grid.num_edges() {
            return Err(Error::validation(path, "unknown edge"));
        }
        let g = grid.edge(b.edge);
        if !(b.from >= 0.0 && b.from < b.to && b.to <= g.length) {
            return Err(Error::validation(
                path,
                format!("block [{}, {}] must lie inside [0, {}]", b.from, b.to, g.length),
            ));
        }
        if !(b.value >= 0.0 && b.value.is_finite()) {
            return Err(Error::validation(path, format!("density must be nonnegative, got {}", b.value)));
        }
        let first = ((b.from / g.dx).floor() as usize).min(g.n_cells - 1);
        let cells = &mut field.values[b.edge];
        for (i, cell) in cells.iter_mut().enumerate().skip(first) {
            let lo = i as f64 * g.dx;
            let hi = g.face(i);
            if lo >= b.to {
                break;
            }
            let overlap = hi.min(b.to) - lo.max(b.from);
            if overlap > 0.0 {
                *cell += b.value * overlap / g.dx;
            }
        }
    }
    for (p_idx, p) in profiles.iter().enumerate() {
        let path = format!("initial.profiles[{p_idx}]");
        if p.edge >= grid.num_edges() {
            return Err(Error::validation(path, "unknown edge"));
        }
        let n = grid.edge(p.edge).n_cells;
        if p.values.len() != n {
            return Err(Error::validation(
                path,
                format!("profile has {} values but the edge has {n} cells", p.values.len()),
            ));
        }
        if let Some(v) = p.values.iter().find(|v| !(**v >= 0.0 && v.is_finite())) {
            return Err(Error::validation(path, format!("density must be nonnegative, got {v}")));
        }
        for (c, v) in field.values[p.edge].iter_mut().zip(&p.values) {
            *c += v;
        }
    }
    Ok(field)
}

/// Boundary data recorded at one junction vertex for one time node.
#[derive(Debug, Clone, PartialEq)]
pub struct JunctionTrace {
    pub vertex: usize,
    /// `(edge, m in the last cell)` for every incoming edge.
    pub incoming: Vec<(usize, f64)>,
    /// `(edge, flux through the inflow face)` for every outgoing edge.
    pub outgoing_flux: Vec<(usize, f64)>,
}

/// Densities at every node of `0 = t_0 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceTimeField {
    pub times: Vec<f64>,
    pub snapshots: Vec<DensityField>,
    /// `traces[n]` holds one entry per junction at time node `n`.
    pub traces: Vec<Vec<JunctionTrace>>,
}

impl SpaceTimeField {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn horizon(&self) -> f64 {
        self.times.last().copied().unwrap_or(0.0)
    }

    pub fn last(&self) -> &DensityField {
        self.snapshots.last().expect("trajectory has at least one snapshot")
    }

    pub fn check(&self) -> Result<()> {
        if self.times.len() != self.snapshots.len() {
            return Err(Error::Shape("one snapshot per time node is required".into()));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("times", "time grid must increase strictly"));
        }
        Ok(())
    }
}

/// Left-endpoint rule `sum_n sum_cells f * dx * (t_{n+1} - t_n)`.
///
/// `integrand[n]` is laid out like a [`DensityField`]; either one entry per
/// time node or one per interval is accepted.
pub fn integrate_space_time(grid: &Grid, times: &[f64], integrand: &[Vec<Vec<f64>>]) -> Result<f64> {
    if times.len() < 2 {
        return Ok(0.0);
    }
    let intervals = times.len() - 1;
    if integrand.len() != times.len() && integrand.len() != intervals {
        return Err(Error::Shape(format!(
            "integrand has {} time levels for {} time nodes",
            integrand.len(),
            times.len()
        )));
    }
    let mut total = 0.0;
    for n in 0..intervals {
        let f = &integrand[n];
        if f.len() != grid.num_edges() {
            return Err(Error::Shape(format!("integrand at level {n} has {} edges", f.len())));
        }
        let dt = times[n + 1] - times[n];
        let mut level = 0.0;
        for (vals, g) in f.iter().zip(grid.edges()) {
            if vals.len() != g.n_cells {
                return Err(Error::Shape(format!(
                    "integrand at level {n} has {} cells on edge {}, grid has {}",
                    vals.len(),
                    g.id,
                    g.n_cells
                )));
            }
            level += vals.iter().sum::<f64>() * g.dx;
        }
        total += level * dt;
    }
    Ok(total)
}

fn cdf_l1(a: &[f64], b: &[f64], dx: f64) -> f64 {
    let (mut ca, mut cb, mut acc) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ca += x * dx;
        cb += y * dx;
        acc += (ca - cb).abs() * dx;
    }
    acc
}

/// L1 distance between cumulative mass profiles on one edge (the 1-D
/// transport distance for equal masses).
pub fn edge_cdf_distance(a: &[f64], b: &[f64], dx: f64) -> Result<f64> {
    edge_cdf_distance_with_outflow(a, 0.0, b, 0.0, dx)
}

/// As [`edge_cdf_distance`], with the mass that left through the downstream
/// end parked in a virtual cell past the edge.
pub fn edge_cdf_distance_with_outflow(a: &[f64], out_a: f64, b: &[f64], out_b: f64, dx: f64) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("fields have {} and {} cells", a.len(), b.len())));
    }
    let ma = a.iter().sum::<f64>() * dx + out_a;
    let mb = b.iter().sum::<f64>() * dx + out_b;
    if (ma - mb).abs() > 1e-9 {
        return Err(Error::Constraint(format!(
            "masses differ ({ma} vs {mb}); pass the outflow masses to compare"
        )));
    }
    Ok(cdf_l1(a, b, dx))
}

/// Joins the cells of consecutive edges into one array. All edges must share
/// the same `dx`.
pub fn concat_edges(field: &DensityField, grid: &Grid, path: &[usize]) -> Result<Vec<f64>> {
    let Some(&first) = path.first() else {
        return Ok(Vec::new());
    };
    let dx = grid.edge(first).dx;
    let mut out = Vec::new();
    for &k in path {
        if (grid.edge(k).dx - dx).abs() > 1e-12 {
            return Err(Error::Shape("edges on a concatenated path must share dx".into()));
        }
        out.extend_from_slice(field.edge(k));
    }
    Ok(out)
}
