//! Effective speed `v = max(v_f - v_i[m] - v_e, 0)`.
//!
//! Speeds live on *speed points*: the `n` cell centers of an edge followed by
//! its head vertex (`x = L`). The head value drives the outflow face, so a
//! red light stops the flow exactly at the vertex.

use crate::error::{Error, Result};
use crate::fields::{DensityField, Grid};
use crate::network::{EdgePoint, Network};
use crate::scenario::{FreeFlow, KernelParams, Lights};

/// Offsets of the speed points of an edge: cell centers, then `L`.
pub fn speed_point_offsets(grid: &Grid, k: usize) -> Vec<f64> {
    let g = grid.edge(k);
    (0..g.n_cells).map(|i| g.center(i)).chain([g.length]).collect()
}

/// Free-flow speed at every speed point.
pub fn free_flow_points(grid: &Grid, free_flow: &[FreeFlow]) -> Vec<Vec<f64>> {
    (0..grid.num_edges())
        .map(|k| speed_point_offsets(grid, k).into_iter().map(|x| free_flow[k].at(x)).collect())
        .collect()
}

/// One kernel contribution: `coeff * m[edge][cell]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StencilEntry {
    pub edge: usize,
    pub cell: usize,
    pub coeff: f64,
}

/// Rectangular-rule discretization of `sum_j alpha_kj int k(d(x, y)) dm(y)`
/// over the visual field, precomputed for every speed point.
#[derive(Debug, Clone)]
pub struct KernelStencil {
    entries: Vec<Vec<Vec<StencilEntry>>>,
}

impl KernelStencil {
    pub fn build(net: &Network, grid: &Grid, kernel: &KernelParams) -> Result<Self> {
        let r = kernel.radius;
        let mut entries = Vec::with_capacity(net.num_edges());
        for k in 0..net.num_edges() {
            let offsets = speed_point_offsets(grid, k);
            let len = grid.edge(k).length;
            let mut per_point = Vec::with_capacity(offsets.len());
            for &x in &offsets {
                let mut list = Vec::new();
                for seg in net.visual_field(EdgePoint::new(k, x), r)? {
                    let g = grid.edge(seg.edge);
                    let tol = 1e-9 * g.dx;
                    let (weight, base) = if seg.edge == k && seg.start == x {
                        (1.0, -x)
                    } else {
                        let w = kernel.alpha[k]
                            .iter()
                            .find(|(j, _)| *j == seg.edge)
                            .map_or(0.0, |(_, a)| *a);
                        (w, len - x)
                    };
                    if weight == 0.0 {
                        continue;
                    }
                    let first = ((seg.start / g.dx - 0.5 - 1e-9).ceil().max(0.0)) as usize;
                    for q in first..g.n_cells {
                        let y = g.center(q);
                        if y < seg.start - tol {
                            continue;
                        }
                        if y > seg.end + tol {
                            break;
                        }
                        let d = (base + y).max(0.0);
                        list.push(StencilEntry {
                            edge: seg.edge,
                            cell: q,
                            coeff: weight * kernel.shape.eval(d) * g.dx,
                        });
                    }
                }
                per_point.push(list);
            }
            entries.push(per_point);
        }
        Ok(KernelStencil { entries })
    }

    /// Contributions to speed point `p` of edge `k`.
    pub fn point(&self, k: usize, p: usize) -> &[StencilEntry] {
        &self.entries[k][p]
    }

    /// `sum_q coeff_pq m_q` at every speed point.
    pub fn apply(&self, m: &DensityField) -> Vec<Vec<f64>> {
        self.entries
            .iter()
            .map(|pts| {
                pts.iter()
                    .map(|list| list.iter().map(|e| e.coeff * m.values[e.edge][e.cell]).sum())
                    .collect()
            })
            .collect()
    }

    /// Transposed action: `out_q = sum_p g_p coeff_pq`, laid out per cell.
    pub fn apply_transpose(&self, g: &[Vec<f64>], grid: &Grid) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = grid.edges().iter().map(|e| vec![0.0; e.n_cells]).collect();
        for (k, pts) in self.entries.iter().enumerate() {
            for (p, list) in pts.iter().enumerate() {
                let gp = g[k][p];
                if gp == 0.0 {
                    continue;
                }
                for e in list {
                    out[e.edge][e.cell] += gp * e.coeff;
                }
            }
        }
        out
    }
}

/// Nonlocal driver interaction `v_i[m]` at every speed point.
pub fn interaction_velocity(stencil: &KernelStencil, m: &DensityField) -> Vec<Vec<f64>> {
    stencil.apply(m)
}

/// Traffic-light ramps `H(x, V) = v_f(x) max(1 - d/R, 0)` on lighted edges,
/// `d` being the distance to the head vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct LightGeometry {
    ramps: Vec<Option<Vec<f64>>>,
}

impl LightGeometry {
    pub fn none(net: &Network) -> Self {
        LightGeometry {
            ramps: vec![None; net.num_edges()],
        }
    }

    pub fn build(net: &Network, grid: &Grid, free_flow: &[FreeFlow], lights: &Lights) -> Result<Self> {
        if !(lights.radius > 0.0 && lights.radius <= net.min_edge_length()) {
            return Err(Error::Constraint(format!(
                "light radius {} must lie in (0, {}]",
                lights.radius,
                net.min_edge_length()
            )));
        }
        let mut ramps = vec![None; net.num_edges()];
        for g in &lights.groups {
            for &k in &g.edges {
                if net.edge(k).head != g.vertex {
                    return Err(Error::validation(
                        "lights",
                        format!(
                            "edge {} does not end at vertex {}",
                            net.edge(k).id,
                            net.vertex_name(g.vertex)
                        ),
                    ));
                }
                let len = grid.edge(k).length;
                ramps[k] = Some(
                    speed_point_offsets(grid, k)
                        .into_iter()
                        .map(|x| free_flow[k].at(x) * (1.0 - (len - x) / lights.radius).max(0.0))
                        .collect(),
                );
            }
        }
        Ok(LightGeometry { ramps })
    }

    pub fn ramp(&self, k: usize) -> Option<&[f64]> {
        self.ramps[k].as_deref()
    }

    pub fn is_lighted(&self, k: usize) -> bool {
        self.ramps[k].is_some()
    }
}

/// `u_k H` per speed point; `signal[k]` is ignored on unlighted edges.
pub fn light_interaction_velocity(geom: &LightGeometry, grid: &Grid, signal: &[f64]) -> Vec<Vec<f64>> {
    (0..grid.num_edges())
        .map(|k| match geom.ramp(k) {
            Some(h) => h.iter().map(|h| signal[k] * h).collect(),
            None => vec![0.0; grid.edge(k).n_cells + 1],
        })
        .collect()
}

/// Speeds at the speed points and on the cell faces of every edge.
#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    /// `n + 1` values per edge: cells, then the head vertex.
    pub points: Vec<Vec<f64>>,
    /// Unclamped `v_f - v_i - v_e`.
    pub raw: Vec<Vec<f64>>,
    /// `n` values per edge: face `i` is the right face of cell `i`; the last
    /// one is the outflow face at the head vertex.
    pub faces: Vec<Vec<f64>>,
    /// Number of speed points where the clamp at zero was active.
    pub clamped: usize,
}

impl VelocityField {
    pub fn cells(&self, k: usize) -> &[f64] {
        let p = &self.points[k];
        &p[..p.len() - 1]
    }

    pub fn head(&self, k: usize) -> f64 {
        *self.points[k].last().expect("edges have speed points")
    }

    pub fn clamp_active(&self) -> bool {
        self.clamped > 0
    }

    pub fn max(&self) -> f64 {
        self.points.iter().flatten().copied().fold(0.0, f64::max)
    }
}

/// Clamps `v_f - v_i - v_e` at zero and averages onto faces.
pub fn effective_velocity(vf: &[Vec<f64>], vi: &[Vec<f64>], ve: &[Vec<f64>]) -> Result<VelocityField> {
    if vf.len() != vi.len() || vf.len() != ve.len() {
        return Err(Error::Shape("velocity terms cover different edge sets".into()));
    }
    let mut points = Vec::with_capacity(vf.len());
    let mut raw_all = Vec::with_capacity(vf.len());
    let mut faces = Vec::with_capacity(vf.len());
    let mut clamped = 0;
    for (k, ((f, i), e)) in vf.iter().zip(vi).zip(ve).enumerate() {
        if f.len() != i.len() || f.len() != e.len() || f.len() < 3 {
            return Err(Error::Shape(format!("velocity terms on edge {k} have mismatched lengths")));
        }
        if let Some(bad) = f.iter().find(|v| !(**v >= 0.0)) {
            return Err(Error::validation("velocity.free_flow", format!("negative free-flow speed {bad}")));
        }
        let raw: Vec<f64> = f.iter().zip(i).zip(e).map(|((f, i), e)| f - i - e).collect();
        let v: Vec<f64> = raw
            .iter()
            .map(|&r| {
                if r < 0.0 {
                    clamped += 1;
                    0.0
                } else {
                    r
                }
            })
            .collect();
        let n = v.len() - 1;
        let mut fc: Vec<f64> = (0..n - 1).map(|q| 0.5 * (v[q] + v[q + 1])).collect();
        fc.push(v[n]);
        points.push(v);
        raw_all.push(raw);
        faces.push(fc);
    }
    Ok(VelocityField {
        points,
        raw: raw_all,
        faces,
        clamped,
    })
}
