//! Cost functional, backward adjoint solve and the gradient of the cost with
//! respect to switching durations.
//!
//! The adjoint is the exact transpose of the forward scheme. With
//! `lambda = -dJ/d(mass)` it discretizes
//! `-lambda_t - v lambda_x + nu*(m lambda_x) ... = v` backward in time, with
//! `lambda(T) = 0` and `lambda = 0` at sinks.

use log::warn;

use crate::control::SwitchSchedule;
use crate::error::{Error, Result};
use crate::fields::Grid;
use crate::forward::{flux_with_partials, FluxStencil, Model, Trajectory};
use crate::network::{Segment, VertexKind};

/// Feedback integrand `f = chi_B` for a closed region `B`, as per-cell
/// overlap fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeedback {
    pub weights: Vec<Vec<f64>>,
}

impl RegionFeedback {
    pub fn new(grid: &Grid, region: &[Segment]) -> Result<Self> {
        let mut weights: Vec<Vec<f64>> = grid.edges().iter().map(|g| vec![0.0; g.n_cells]).collect();
        for (s_idx, s) in region.iter().enumerate() {
            if s.edge >= grid.num_edges() {
                return Err(Error::validation(format!("region[{s_idx}]"), "unknown edge"));
            }
            let g = grid.edge(s.edge);
            if !(0.0 <= s.start && s.start <= s.end && s.end <= g.length) {
                return Err(Error::validation(format!("region[{s_idx}]"), "segment outside its edge"));
            }
            for (i, w) in weights[s.edge].iter_mut().enumerate() {
                let lo = i as f64 * g.dx;
                let overlap = g.face(i).min(s.end) - lo.max(s.start);
                if overlap > 0.0 {
                    *w = (*w + overlap / g.dx).min(1.0);
                }
            }
        }
        Ok(RegionFeedback { weights })
    }
}

/// Terms of `J = -int int v m + int int f m`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostBreakdown {
    pub total: f64,
    pub velocity_term: f64,
    pub feedback_term: f64,
    /// `M = int int m dx dt`.
    pub mass_integral: f64,
}

impl CostBreakdown {
    /// Normalized mean velocity `-J / M`.
    pub fn mean_velocity(&self) -> Result<f64> {
        if self.mass_integral <= 0.0 {
            return Err(Error::DivisionGuard(
                "mean velocity undefined: the network carries no mass".into(),
            ));
        }
        Ok(-self.total / self.mass_integral)
    }
}

/// Left-endpoint quadrature of the cost over the stored trajectory.
pub fn evaluate_cost(grid: &Grid, traj: &Trajectory, feedback: Option<&RegionFeedback>) -> Result<CostBreakdown> {
    let n_steps = traj.n_steps();
    if traj.velocities.len() < n_steps || traj.field.snapshots.len() != n_steps + 1 {
        return Err(Error::Shape("velocity history does not match the trajectory".into()));
    }
    let (mut vel, mut fb, mut mass) = (0.0, 0.0, 0.0);
    for n in 0..n_steps {
        let dt = traj.field.times[n + 1] - traj.field.times[n];
        let m = &traj.field.snapshots[n];
        let v = &traj.velocities[n];
        let (mut lv, mut lf, mut lm) = (0.0, 0.0, 0.0);
        for (k, g) in grid.edges().iter().enumerate() {
            let mk = &m.values[k];
            if mk.len() != g.n_cells || v.points[k].len() != g.n_cells + 1 {
                return Err(Error::Shape(format!("edge {} does not match the grid", g.id)));
            }
            lv += mk.iter().zip(v.cells(k)).map(|(m, v)| m * v).sum::<f64>() * g.dx;
            lm += mk.iter().sum::<f64>() * g.dx;
            if let Some(f) = feedback {
                lf += mk.iter().zip(&f.weights[k]).map(|(m, w)| m * w).sum::<f64>() * g.dx;
            }
        }
        vel -= lv * dt;
        fb += lf * dt;
        mass += lm * dt;
    }
    Ok(CostBreakdown {
        total: vel + fb,
        velocity_term: vel,
        feedback_term: fb,
        mass_integral: mass,
    })
}

/// How the adjoint crosses a junction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransmissionRule {
    /// `lambda^k(V) = sum_j p_kj lambda^j(V)`: the transpose of flux splitting.
    #[default]
    FluxConsistent,
    /// `lambda^k v^k = lambda^j v^j` at merges where `v^k > eps`, interior
    /// extrapolation elsewhere.
    SpeedRatio,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdjointConfig {
    pub rule: TransmissionRule,
    /// Speed below which the speed-ratio condition is not imposed.
    pub eps_v: f64,
}

impl Default for AdjointConfig {
    fn default() -> Self {
        AdjointConfig {
            rule: TransmissionRule::FluxConsistent,
            eps_v: 1e-9,
        }
    }
}

/// Backward solution on the forward time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjointField {
    pub times: Vec<f64>,
    /// `values[n][k][i]`: lambda in cell `i` of edge `k` at node `n`.
    pub values: Vec<Vec<Vec<f64>>>,
    /// `boundary[n][k]`: lambda at the head vertex of edge `k` seen from that
    /// edge during step `n`.
    pub boundary: Vec<Vec<f64>>,
    /// `speed_sensitivity[n][k][p]`: derivative of the cost with respect to
    /// the unclamped speed at point `p` of edge `k` during step `n`.
    pub speed_sensitivity: Vec<Vec<Vec<f64>>>,
    /// `speed_adjoint[n][k][p]`: derivative of the cost with respect to the
    /// clamped speed at point `p` of edge `k` during step `n`.
    pub speed_adjoint: Vec<Vec<Vec<f64>>>,
}

fn check_history(model: &Model<'_>, traj: &Trajectory) -> Result<()> {
    let n = model.n_steps;
    if traj.field.snapshots.len() != n + 1 || traj.velocities.len() < n || traj.rows.len() != n {
        return Err(Error::MissingHistory(format!(
            "{} snapshots and {} speed fields stored for {n} steps",
            traj.field.snapshots.len(),
            traj.velocities.len()
        )));
    }
    Ok(())
}

/// Integrates the adjoint backward from `lambda(T) = 0`.
pub fn solve_adjoint(
    model: &Model<'_>,
    traj: &Trajectory,
    feedback: Option<&RegionFeedback>,
    cfg: &AdjointConfig,
) -> Result<AdjointField> {
    check_history(model, traj)?;
    let scn = model.scenario;
    let grid = &scn.grid;
    let net = &scn.network;
    let limiter = scn.solver.limiter;
    let ne = net.num_edges();
    let n_steps = model.n_steps;

    let zero: Vec<Vec<f64>> = grid.edges().iter().map(|g| vec![0.0; g.n_cells]).collect();
    let mut values = vec![zero.clone(); n_steps + 1];
    let mut boundary = vec![vec![0.0; ne]; n_steps];
    let mut sens = Vec::with_capacity(n_steps);
    let mut speed_adjoint = Vec::with_capacity(n_steps);

    for n in (0..n_steps).rev() {
        let dt = traj.field.times[n + 1] - traj.field.times[n];
        let m = &traj.field.snapshots[n];
        let v = &traj.velocities[n];
        let rows = &traj.rows[n];
        let lam = &values[n + 1];

        // lambda just past the head of every edge
        let mut ghost = vec![0.0; ne];
        for k in 0..ne {
            let e = net.edge(k);
            let last = *lam[k].last().expect("nonempty edge");
            ghost[k] = match net.kind(e.head) {
                VertexKind::Sink => 0.0,
                _ => {
                    let consistent: f64 = rows[k].iter().map(|&(j, p)| p * lam[j][0]).sum();
                    match (cfg.rule, net.outgoing(e.head)) {
                        (TransmissionRule::SpeedRatio, [j]) => {
                            let vk = v.head(k);
                            if vk > cfg.eps_v {
                                lam[*j][0] * v.points[*j][0] / vk
                            } else {
                                last
                            }
                        }
                        _ => consistent,
                    }
                }
            };
        }
        boundary[n].clone_from(&ghost);

        let mut next = lam.clone();
        let mut g_all: Vec<Vec<f64>> = Vec::with_capacity(ne);
        for k in 0..ne {
            let gk = grid.edge(k);
            let nc = gk.n_cells;
            let mk = &m.values[k];
            let lk = &lam[k];
            let out = &mut next[k];
            let mut g = vec![0.0; nc + 1];
            for i in 0..nc {
                out[i] += dt * v.points[k][i];
                if let Some(f) = feedback {
                    out[i] -= dt * f.weights[k][i];
                }
                g[i] -= dt * gk.dx * mk[i];
            }
            for i in 0..nc {
                let w = v.faces[k][i];
                let courant = w * dt / gk.dx;
                let stencil = FluxStencil {
                    upup: if i >= 1 { Some(mk[i - 1]) } else { None },
                    up: mk[i],
                    down: if i + 1 < nc { Some(mk[i + 1]) } else { None },
                };
                let (_, d) = flux_with_partials(stencil, w, courant, limiter);
                let jump = if i + 1 < nc { lk[i] - lk[i + 1] } else { lk[i] - ghost[k] };
                let scale = dt / gk.dx * jump;
                out[i] -= d.up * scale;
                if i >= 1 {
                    out[i - 1] -= d.upup * scale;
                }
                if i + 1 < nc {
                    out[i + 1] -= d.down * scale;
                    let dg = d.speed * dt * jump * 0.5;
                    g[i] += dg;
                    g[i + 1] += dg;
                } else {
                    g[nc] += d.speed * dt * jump;
                }
            }
            g_all.push(g);
        }
        // the clamp passes perturbations only where the raw speed is positive
        let weighted: Vec<Vec<f64>> = g_all
            .iter()
            .zip(&v.raw)
            .map(|(g, raw)| g.iter().zip(raw).map(|(g, r)| if *r > 0.0 { *g } else { 0.0 }).collect())
            .collect();
        if let Some(st) = &model.stencil {
            let back = st.apply_transpose(&weighted, grid);
            for (k, b) in back.iter().enumerate() {
                let dx = grid.edge(k).dx;
                for (o, x) in next[k].iter_mut().zip(b) {
                    *o += x / dx;
                }
            }
        }
        values[n] = next;
        sens.push(weighted);
        speed_adjoint.push(g_all);
    }
    sens.reverse();
    speed_adjoint.reverse();
    Ok(AdjointField {
        times: traj.field.times.clone(),
        values,
        boundary,
        speed_sensitivity: sens,
        speed_adjoint,
    })
}

/// Per-edge cell values.
pub type EdgeValues = Vec<Vec<f64>>;

/// Rectangular-rule values of `nu*m` and `nu*(m dlambda/dx)` at every cell
/// for time node `n`, with `(nu*phi)(x) = int K(y, x) phi(y) dy` integrating
/// over the drivers `y` that see `x`.
pub fn nonlocal_adjoint_terms(
    model: &Model<'_>,
    traj: &Trajectory,
    lambda: &AdjointField,
    n: usize,
) -> Result<(EdgeValues, EdgeValues)> {
    let grid = &model.scenario.grid;
    let m = traj
        .field
        .snapshots
        .get(n)
        .ok_or_else(|| Error::MissingHistory(format!("no snapshot at node {n}")))?;
    let lam = lambda
        .values
        .get(n)
        .ok_or_else(|| Error::MissingHistory(format!("no adjoint values at node {n}")))?;
    let zeros: Vec<Vec<f64>> = grid.edges().iter().map(|g| vec![0.0; g.n_cells]).collect();
    let Some(st) = &model.stencil else {
        return Ok((zeros.clone(), zeros));
    };
    let mut phi_m = Vec::with_capacity(grid.num_edges());
    let mut phi_ml = Vec::with_capacity(grid.num_edges());
    for (k, g) in grid.edges().iter().enumerate() {
        let l = &lam[k];
        let nc = g.n_cells;
        let mut a = vec![0.0; nc + 1];
        let mut b = vec![0.0; nc + 1];
        for i in 0..nc {
            let dl = if i + 1 < nc { l[i + 1] - l[i] } else { l[i] - l[i - 1] } / g.dx;
            a[i] = m.values[k][i] * g.dx;
            b[i] = m.values[k][i] * dl * g.dx;
        }
        phi_m.push(a);
        phi_ml.push(b);
    }
    let scale = |mut x: Vec<Vec<f64>>| {
        for (k, row) in x.iter_mut().enumerate() {
            let dx = grid.edge(k).dx;
            row.iter_mut().for_each(|v| *v /= dx);
        }
        x
    };
    Ok((
        scale(st.apply_transpose(&phi_m, grid)),
        scale(st.apply_transpose(&phi_ml, grid)),
    ))
}

/// Gradient of the cost for one switching schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct DurationGradient {
    /// `dJ/dtau_i` for the `S - 1` switching instants.
    pub d_tau: Vec<f64>,
    /// `dJ/ds_k` for the `S` durations.
    pub d_s: Vec<f64>,
    /// `(B_1, B_2)`: sensitivity of the cost to the light level on the first
    /// and second approach around each switch, per unit time.
    pub brackets: Vec<(f64, f64)>,
}

/// How the light-level sensitivity of one step is formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradientRule {
    /// Speed change between a full red and a full green step, paired with the
    /// speed adjoint and interpolated linearly between step midpoints. Tracks
    /// the cost across whole steps, where the clamp makes it ripple inside one.
    #[default]
    Secant,
    /// Exact derivative of the discrete cost in the step containing the switch.
    Tangent,
}

/// Chain rule from light levels to switching durations for the controlled
/// light group.
pub fn duration_gradient(
    model: &Model<'_>,
    traj: &Trajectory,
    lambda: &AdjointField,
    sched: &SwitchSchedule,
) -> Result<DurationGradient> {
    duration_gradient_with(model, traj, lambda, sched, GradientRule::default())
}

pub fn duration_gradient_with(
    model: &Model<'_>,
    traj: &Trajectory,
    lambda: &AdjointField,
    sched: &SwitchSchedule,
    rule: GradientRule,
) -> Result<DurationGradient> {
    let scn = model.scenario;
    let group = scn.controlled_group()?;
    let net = &scn.network;
    if net.outgoing(group.vertex).len() > 1 {
        return Err(Error::Unsupported(
            "duration gradients are available for merge junctions and road ends only".into(),
        ));
    }
    sched.validate()?;
    check_history(model, traj)?;
    let n_steps = model.n_steps;
    if lambda.speed_sensitivity.len() != n_steps || lambda.speed_adjoint.len() != n_steps {
        return Err(Error::MissingHistory("adjoint speed sensitivities are incomplete".into()));
    }
    let horizon = scn.horizon;
    let taus = sched.switching_times();
    let s = sched.durations.len();
    let mut d_tau = vec![0.0; s.saturating_sub(1)];
    let mut brackets = vec![(0.0, 0.0); s.saturating_sub(1)];

    // cost change per unit time of red light on edge k during step n
    let bracket = |k: usize, n: usize| -> f64 {
        let ramp = model.lights.ramp(k).expect("controlled edges carry a light");
        let dt = model.time(n + 1) - model.time(n);
        match rule {
            GradientRule::Tangent => {
                -lambda.speed_sensitivity[n][k].iter().zip(ramp).map(|(g, h)| g * h).sum::<f64>() / dt
            }
            GradientRule::Secant => {
                let u = traj.light_levels[n][k];
                let raw = &traj.velocities[n].raw[k];
                lambda.speed_adjoint[n][k]
                    .iter()
                    .zip(ramp)
                    .zip(raw)
                    .map(|((g, h), r)| g * ((r - (1.0 - u) * h).max(0.0) - (r + u * h).max(0.0)))
                    .sum::<f64>()
                    / dt
            }
        }
    };
    let pair = |n: usize| {
        let b1 = bracket(group.edges[0], n);
        let b2 = group.edges.get(1).map_or(0.0, |&k| bracket(k, n));
        (b1, b2)
    };
    // brackets interpolated linearly between step midpoints
    let secant_at = |tau: f64| {
        let x = tau / model.dt - 0.5;
        let lo = (x.floor().max(0.0) as usize).min(n_steps - 1);
        let hi = (lo + 1).min(n_steps - 1);
        let th = (x - lo as f64).clamp(0.0, 1.0);
        let (a1, a2) = pair(lo);
        let (c1, c2) = pair(hi);
        ((1.0 - th) * a1 + th * c1, (1.0 - th) * a2 + th * c2)
    };
    for i in 1..s {
        let tau = taus[i - 1];
        if !(tau > 0.0 && tau < horizon) {
            warn!("switch {i} at t = {tau} lies outside (0, {horizon}) and is inert");
            continue;
        }
        let (b1, b2) = match rule {
            GradientRule::Tangent => pair(((tau / model.dt).floor() as usize).min(n_steps - 1)),
            GradientRule::Secant => secant_at(tau),
        };
        let jump = f64::from(sched.state(i - 1)) - f64::from(sched.state(i));
        brackets[i - 1] = (b1, b2);
        d_tau[i - 1] = jump * (b1 - b2);
    }
    let mut d_s = vec![0.0; s];
    let mut acc = 0.0;
    for k in (0..s).rev() {
        if k < d_tau.len() {
            acc += d_tau[k];
        }
        d_s[k] = acc;
    }
    Ok(DurationGradient { d_tau, d_s, brackets })
}
