//! Conservative finite-volume transport on the network: limited fluxes,
//! junction flux splitting, source inflow and sink outflow.

use log::debug;
use serde::{Deserialize, Serialize};

use crate::control::Signal;
use crate::error::{Error, Result};
use crate::fields::{DensityField, Grid, JunctionTrace, SpaceTimeField};
use crate::network::{Network, VertexKind};
use crate::scenario::Scenario;
use crate::velocity::{
    effective_velocity, free_flow_points, interaction_velocity, light_interaction_velocity, KernelStencil,
    LightGeometry, VelocityField,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Limiter {
    #[default]
    Superbee,
    Minmod,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub cfl: f64,
    pub limiter: Limiter,
    /// Output thinning; the stored trajectory always keeps every step.
    pub record_stride: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            cfl: 0.99,
            limiter: Limiter::Superbee,
            record_stride: 1,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.cfl > 0.0 && self.cfl <= 1.0) {
            return Err(Error::validation("grid.cfl", format!("must lie in (0, 1], got {}", self.cfl)));
        }
        if self.record_stride == 0 {
            return Err(Error::validation("grid.record_stride", "must be at least 1"));
        }
        Ok(())
    }
}

/// Limited slope `psi = phi(a/b) b` and its partial derivatives in `a` and `b`.
pub fn limited_slope(a: f64, b: f64, limiter: Limiter) -> (f64, f64, f64) {
    if a * b <= 0.0 || limiter == Limiter::None {
        return (0.0, 0.0, 0.0);
    }
    let s = b.signum();
    let (aa, bb) = (a.abs(), b.abs());
    match limiter {
        Limiter::Superbee => {
            let (first, d_first) = if 2.0 * aa < bb { (2.0 * aa, (2.0, 0.0)) } else { (bb, (0.0, 1.0)) };
            let (second, d_second) = if aa < 2.0 * bb { (aa, (1.0, 0.0)) } else { (2.0 * bb, (0.0, 2.0)) };
            if first >= second {
                (s * first, d_first.0, d_first.1)
            } else {
                (s * second, d_second.0, d_second.1)
            }
        }
        Limiter::Minmod => {
            if aa < bb {
                (s * aa, 1.0, 0.0)
            } else {
                (s * bb, 0.0, 1.0)
            }
        }
        Limiter::None => unreachable!(),
    }
}

/// Cell values around one face; `up` is the upwind cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluxStencil {
    pub upup: Option<f64>,
    pub up: f64,
    pub down: Option<f64>,
}

/// Partial derivatives of a face flux.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FluxPartials {
    pub upup: f64,
    pub up: f64,
    pub down: f64,
    pub speed: f64,
}

/// `F = v (m_up + 0.5 psi (1 - courant))`, first-order upwind when the
/// stencil is cut by a boundary.
pub fn limited_flux(s: FluxStencil, v_face: f64, courant: f64, limiter: Limiter) -> f64 {
    flux_with_partials(s, v_face, courant, limiter).0
}

/// Flux and its derivatives in the stencil values and in `v_face`, with
/// `courant = v_face dt / dx`.
pub fn flux_with_partials(s: FluxStencil, v_face: f64, courant: f64, limiter: Limiter) -> (f64, FluxPartials) {
    let (Some(upup), Some(down)) = (s.upup, s.down) else {
        return (
            v_face * s.up,
            FluxPartials {
                up: v_face,
                speed: s.up,
                ..Default::default()
            },
        );
    };
    let (psi, da, db) = limited_slope(s.up - upup, down - s.up, limiter);
    let half = 0.5 * (1.0 - courant);
    let flux = v_face * (s.up + half * psi);
    (
        flux,
        FluxPartials {
            upup: -v_face * half * da,
            up: v_face * (1.0 + half * (da - db)),
            down: v_face * half * db,
            speed: s.up + 0.5 * psi * (1.0 - 2.0 * courant),
        },
    )
}

/// Result of one explicit step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub next: DensityField,
    /// Right-face fluxes per edge (the last entry is the outflow face).
    pub fluxes: Vec<Vec<f64>>,
    /// Flux through the inflow face of every edge.
    pub influx: Vec<f64>,
    pub inflow_mass: f64,
    pub outflow_mass: f64,
    pub clipped_mass: f64,
}

fn edge_stencil(m: &[f64], i: usize) -> FluxStencil {
    let n = m.len();
    FluxStencil {
        upup: if i >= 1 { Some(m[i - 1]) } else { None },
        up: m[i],
        down: if i + 1 < n { Some(m[i + 1]) } else { None },
    }
}

/// Advances `m` by `dt` with speeds `v`.
///
/// `rows[k]` is the (time-averaged) split row of edge `k`; `source_rates[v]`
/// the mean inflow rate at vertex `v`, divided evenly over its outgoing edges.
#[allow(clippy::too_many_arguments)]
pub fn advance_step(
    net: &Network,
    grid: &Grid,
    m: &DensityField,
    v: &VelocityField,
    rows: &[Vec<(usize, f64)>],
    source_rates: &[f64],
    dt: f64,
    t: f64,
    cfg: &SolverConfig,
) -> Result<StepOutput> {
    let ne = net.num_edges();
    let limit = cfg.cfl * (1.0 + 1e-12);
    let mut fluxes = Vec::with_capacity(ne);
    for k in 0..ne {
        let g = grid.edge(k);
        let mk = &m.values[k];
        let faces = &v.faces[k];
        let mut fk = Vec::with_capacity(g.n_cells);
        for (i, &w) in faces.iter().enumerate() {
            let courant = w * dt / g.dx;
            if courant > limit {
                return Err(Error::Cfl {
                    edge: k,
                    courant,
                    limit: cfg.cfl,
                });
            }
            fk.push(limited_flux(edge_stencil(mk, i), w, courant, cfg.limiter));
        }
        fluxes.push(fk);
    }

    let mut influx = vec![0.0; ne];
    let mut inflow_mass = 0.0;
    let mut outflow_mass = 0.0;
    for k in 0..ne {
        let e = net.edge(k);
        let out_flux = *fluxes[k].last().expect("edges have at least two cells");
        match net.kind(e.head) {
            VertexKind::Sink => outflow_mass += out_flux * dt,
            _ => {
                for &(j, p) in &rows[k] {
                    influx[j] += p * out_flux;
                }
            }
        }
    }
    for vtx in net.sources() {
        let rate = source_rates.get(vtx).copied().unwrap_or(0.0);
        if rate != 0.0 {
            let outs = net.outgoing(vtx);
            let share = rate / outs.len() as f64;
            for &j in outs {
                influx[j] += share;
            }
            inflow_mass += rate * dt;
        }
    }

    let mut next = m.clone();
    let mut clipped_mass = 0.0;
    for k in 0..ne {
        let g = grid.edge(k);
        let ratio = dt / g.dx;
        let cells = &mut next.values[k];
        let fk = &fluxes[k];
        for i in 0..g.n_cells {
            let left = if i == 0 { influx[k] } else { fk[i - 1] };
            let value = cells[i] - ratio * (fk[i] - left);
            if !value.is_finite() {
                return Err(Error::NonFinite { time: t, edge: k, cell: i });
            }
            cells[i] = if value < 0.0 {
                clipped_mass -= value * g.dx;
                0.0
            } else {
                value
            };
        }
    }
    Ok(StepOutput {
        next,
        fluxes,
        influx,
        inflow_mass,
        outflow_mass,
        clipped_mass,
    })
}

/// Scenario operators that do not change during a run.
#[derive(Debug, Clone)]
pub struct Model<'a> {
    pub scenario: &'a Scenario,
    pub free_flow: Vec<Vec<f64>>,
    pub stencil: Option<KernelStencil>,
    pub lights: LightGeometry,
    /// Light signal per edge (`None` on unlighted edges).
    pub signals: Vec<Option<Signal>>,
    pub n_steps: usize,
    pub dt: f64,
}

/// Uniform step count `N = ceil(T V_max / (cfl dx_min))`, `dt = T / N`.
pub fn time_grid(scn: &Scenario, v_max: f64) -> (usize, f64) {
    let n = if v_max > 0.0 {
        ((scn.horizon * v_max / (scn.solver.cfl * scn.grid.min_dx())) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    } else {
        1
    };
    (n, scn.horizon / n as f64)
}

impl<'a> Model<'a> {
    pub fn new(scn: &'a Scenario) -> Result<Self> {
        let free_flow = free_flow_points(&scn.grid, &scn.free_flow);
        let stencil = match &scn.kernel {
            Some(k) => Some(KernelStencil::build(&scn.network, &scn.grid, k)?),
            None => None,
        };
        let lights = match &scn.lights {
            Some(l) => LightGeometry::build(&scn.network, &scn.grid, &scn.free_flow, l)?,
            None => LightGeometry::none(&scn.network),
        };
        let mut signals = vec![None; scn.network.num_edges()];
        for (k, s) in scn.light_signals()? {
            signals[k] = Some(s);
        }
        let v_max = free_flow.iter().flatten().copied().fold(0.0, f64::max);
        let (n_steps, dt) = time_grid(scn, v_max);
        Ok(Model {
            scenario: scn,
            free_flow,
            stencil,
            lights,
            signals,
            n_steps,
            dt,
        })
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_steps {
            self.scenario.horizon
        } else {
            n as f64 * self.dt
        }
    }

    /// Mean light signal per edge over step `n`.
    pub fn light_average(&self, n: usize) -> Vec<f64> {
        let (a, b) = (self.time(n), self.time(n + 1));
        self.signals
            .iter()
            .map(|s| s.as_ref().map_or(0.0, |s| s.average(a, b)))
            .collect()
    }

    /// Light signal per edge at time node `n`.
    pub fn light_value(&self, n: usize) -> Vec<f64> {
        let t = self.time(n);
        self.signals
            .iter()
            .map(|s| s.as_ref().map_or(0.0, |s| s.value(t)))
            .collect()
    }

    /// Mean split rows over step `n`.
    pub fn rows(&self, sched: &crate::scenario::DistributionSchedule, n: usize) -> Vec<Vec<(usize, f64)>> {
        let (a, b) = (self.time(n), self.time(n + 1));
        (0..self.scenario.network.num_edges())
            .map(|k| sched.average_row(k, a, b))
            .collect()
    }

    pub fn source_rates(&self, n: usize) -> Vec<f64> {
        let (a, b) = (self.time(n), self.time(n + 1));
        (0..self.scenario.network.num_vertices())
            .map(|v| self.scenario.inflow.average_rate(v, a, b))
            .collect()
    }

    /// Speeds for density `m`, light levels `signal` and an optional extra
    /// slowdown (fleet or obstacle interaction) per speed point.
    pub fn velocity(&self, m: &DensityField, signal: &[f64], extra: Option<&[Vec<f64>]>) -> Result<VelocityField> {
        let grid = &self.scenario.grid;
        let vi = match &self.stencil {
            Some(st) => interaction_velocity(st, m),
            None => grid.edges().iter().map(|g| vec![0.0; g.n_cells + 1]).collect(),
        };
        let mut ve = light_interaction_velocity(&self.lights, grid, signal);
        if let Some(extra) = extra {
            for (a, b) in ve.iter_mut().zip(extra) {
                for (x, y) in a.iter_mut().zip(b) {
                    *x += y;
                }
            }
        }
        effective_velocity(&self.free_flow, &vi, &ve)
    }

    /// Speed points clamped at zero outside every light ramp.
    pub fn clamps_away_from_light(&self, v: &VelocityField) -> usize {
        let mut count = 0;
        for (k, raw) in v.raw.iter().enumerate() {
            let ramp = self.lights.ramp(k);
            for (p, &r) in raw.iter().enumerate() {
                if r < 0.0 && ramp.is_none_or(|h| h[p] == 0.0) {
                    count += 1;
                }
            }
        }
        count
    }

    pub(crate) fn traces(&self, m: &DensityField, step: Option<&StepOutput>) -> Vec<JunctionTrace> {
        let net = &self.scenario.network;
        net.junctions()
            .into_iter()
            .map(|vtx| JunctionTrace {
                vertex: vtx,
                incoming: net
                    .incoming(vtx)
                    .iter()
                    .map(|&k| (k, *m.values[k].last().expect("nonempty edge")))
                    .collect(),
                outgoing_flux: net
                    .outgoing(vtx)
                    .iter()
                    .map(|&j| (j, step.map_or(0.0, |s| s.influx[j])))
                    .collect(),
            })
            .collect()
    }
}

/// Mass accounting over a run.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MassLedger {
    pub initial: f64,
    pub inflow: f64,
    pub outflow: f64,
    pub clipped: f64,
    pub final_mass: f64,
}

impl MassLedger {
    /// `|final - (initial + inflow - outflow + clipped)|` relative to the
    /// largest mass involved.
    pub fn relative_imbalance(&self) -> f64 {
        let expected = self.initial + self.inflow - self.outflow + self.clipped;
        let scale = self.initial.max(self.initial + self.inflow).max(f64::MIN_POSITIVE);
        (self.final_mass - expected).abs() / scale
    }
}

/// Full forward history: every snapshot, the speeds and light levels used in
/// every step, and the mass ledger.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub field: SpaceTimeField,
    /// `velocities[n]` is the field used for step `n`; the extra last entry is
    /// evaluated at the final time with the final signal value.
    pub velocities: Vec<VelocityField>,
    /// Mean light level per edge for every step.
    pub light_levels: Vec<Vec<f64>>,
    /// Mean split rows for every step.
    pub rows: Vec<Vec<Vec<(usize, f64)>>>,
    /// Per-step outflow fluxes at each edge head.
    pub outflux: Vec<Vec<f64>>,
    pub dt: f64,
    pub ledger: MassLedger,
    /// Speed points clamped at zero away from any light, summed over steps.
    pub clamp_warnings: usize,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.field.times.len() - 1
    }
}

/// Optional static density that slows drivers through the interaction kernel.
#[derive(Debug, Clone, Copy)]
pub struct Obstacle<'s> {
    pub stencil: &'s KernelStencil,
    pub density: &'s DensityField,
}

/// Runs the scenario with its own light schedules.
pub fn simulate_forward(scn: &Scenario) -> Result<Trajectory> {
    let model = Model::new(scn)?;
    run_forward(&model, None)
}

/// Runs `model`, optionally with a static obstacle density.
pub fn run_forward(model: &Model<'_>, obstacle: Option<Obstacle<'_>>) -> Result<Trajectory> {
    let scn = model.scenario;
    let grid = &scn.grid;
    let net = &scn.network;
    scn.initial.check_shape(grid)?;
    let extra = obstacle.map(|o| o.stencil.apply(o.density));
    let n_steps = model.n_steps;
    let mut times = Vec::with_capacity(n_steps + 1);
    let mut snapshots = Vec::with_capacity(n_steps + 1);
    let mut traces = Vec::with_capacity(n_steps + 1);
    let mut velocities = Vec::with_capacity(n_steps + 1);
    let mut light_levels = Vec::with_capacity(n_steps);
    let mut rows_all = Vec::with_capacity(n_steps);
    let mut outflux = Vec::with_capacity(n_steps);
    let mut ledger = MassLedger {
        initial: scn.initial.mass(grid),
        ..Default::default()
    };
    let mut clamp_warnings = 0;
    let mut m = scn.initial.clone();
    for n in 0..n_steps {
        let t = model.time(n);
        let level = model.light_average(n);
        let v = model.velocity(&m, &level, extra.as_deref())?;
        clamp_warnings += model.clamps_away_from_light(&v);
        let rows = model.rows(&scn.distribution, n);
        let rates = model.source_rates(n);
        let dt = model.time(n + 1) - t;
        let step = advance_step(net, grid, &m, &v, &rows, &rates, dt, t, &scn.solver)?;
        ledger.inflow += step.inflow_mass;
        ledger.outflow += step.outflow_mass;
        ledger.clipped += step.clipped_mass;
        times.push(t);
        traces.push(model.traces(&m, Some(&step)));
        outflux.push(step.fluxes.iter().map(|f| *f.last().expect("nonempty edge")).collect());
        snapshots.push(std::mem::replace(&mut m, step.next));
        velocities.push(v);
        light_levels.push(level);
        rows_all.push(rows);
    }
    let final_level = model.light_value(n_steps);
    velocities.push(model.velocity(&m, &final_level, extra.as_deref())?);
    times.push(scn.horizon);
    traces.push(model.traces(&m, None));
    ledger.final_mass = m.mass(grid);
    snapshots.push(m);
    if clamp_warnings > 0 {
        debug!("speed clamp active away from the lights at {clamp_warnings} point-steps");
    }
    Ok(Trajectory {
        field: SpaceTimeField {
            times,
            snapshots,
            traces,
        },
        velocities,
        light_levels,
        rows: rows_all,
        outflux,
        dt: model.dt,
        ledger,
        clamp_warnings,
    })
}
