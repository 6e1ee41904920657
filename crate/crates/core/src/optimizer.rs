//! Projected gradient descent over the switching durations of the controlled
//! light group, multi-start driver and exhaustive single-switch sweep.

use log::{debug, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::adjoint::{duration_gradient, evaluate_cost, solve_adjoint, AdjointConfig, CostBreakdown, DurationGradient};
use crate::control::{project_durations, DurationBox, SwitchSchedule};
use crate::forward::{run_forward, Model};
use crate::scenario::Scenario;
use crate::{Error, Result};

/// Cost, and optionally gradient, of one schedule.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cost: CostBreakdown,
    pub gradient: Option<DurationGradient>,
    /// Point-steps where the speed clamp acted away from the lights.
    pub clamp_warnings: usize,
}

/// Forward solve (and adjoint solve when `with_gradient`) for `sched` applied
/// to the controlled light group of `scn`.
pub fn evaluate_schedule(scn: &Scenario, sched: &SwitchSchedule, with_gradient: bool) -> Result<Evaluation> {
    scn.controlled_group()?;
    let scn = scn.with_schedule(0, sched)?;
    let model = Model::new(&scn)?;
    let traj = run_forward(&model, None)?;
    let cost = evaluate_cost(&scn.grid, &traj, None)?;
    let gradient = if with_gradient {
        let lambda = solve_adjoint(&model, &traj, None, &AdjointConfig::default())?;
        Some(duration_gradient(&model, &traj, &lambda, sched)?)
    } else {
        None
    };
    Ok(Evaluation {
        cost,
        gradient,
        clamp_warnings: traj.clamp_warnings,
    })
}

/// Descent parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescentConfig {
    /// Stop once an accepted step changes the cost by less than this.
    pub eps: f64,
    /// Trial step of the first line search; later searches start from twice
    /// the previously accepted step.
    pub beta0: f64,
    pub max_iter: usize,
    /// Step halvings before the line search gives up.
    pub max_halvings: usize,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    /// Stop when the projected gradient norm falls below this.
    pub grad_floor: f64,
}

impl Default for DescentConfig {
    fn default() -> Self {
        DescentConfig {
            eps: 1e-6,
            beta0: 1.0,
            max_iter: 200,
            max_halvings: 20,
            armijo: 1e-4,
            grad_floor: 1e-10,
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, x: f64| {
            if x.is_finite() && x > 0.0 {
                Ok(())
            } else {
                Err(Error::validation(name, format!("must be positive, got {x}")))
            }
        };
        positive("eps", self.eps)?;
        positive("beta0", self.beta0)?;
        if !(self.armijo > 0.0 && self.armijo < 1.0) {
            return Err(Error::validation("armijo", format!("must lie in (0, 1), got {}", self.armijo)));
        }
        if self.max_iter == 0 {
            return Err(Error::validation("max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Tolerance,
    MaxIter,
    LineSearchFailure,
}

impl std::fmt::Display for Termination {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Termination::Tolerance => "tolerance",
            Termination::MaxIter => "max-iter",
            Termination::LineSearchFailure => "line-search-failure",
        })
    }
}

/// One accepted point of the descent; the first one is the projected start.
#[derive(Debug, Clone, PartialEq)]
pub struct Iterate {
    pub durations: Vec<f64>,
    pub cost: f64,
    /// Step that produced this iterate; 0 for the start.
    pub beta: f64,
    /// Projected gradient norm at this iterate.
    pub grad_norm: f64,
}

/// Outcome of one descent run. Accepted costs never increase.
#[derive(Debug, Clone, PartialEq)]
pub struct DescentReport {
    pub iterates: Vec<Iterate>,
    pub reason: Termination,
    pub best: SwitchSchedule,
    pub best_cost: f64,
    /// Clamp activations away from the lights, summed over accepted iterates.
    pub clamp_warnings: usize,
    /// Forward solves performed.
    pub evaluations: usize,
}

fn duration_box(scn: &Scenario, sched: &SwitchSchedule) -> Result<DurationBox> {
    match sched.bounds.or(scn.controlled_group()?.schedule.bounds) {
        Some(b) => Ok(b),
        None => Err(Error::validation(
            "lights.groups[0]",
            "descent needs duration bounds t_green and t_red",
        )),
    }
}

/// Projected gradient `P(s - g) - s` scaled back to a descent direction norm.
fn projected_gradient_norm(s: &[f64], g: &[f64], b: &DurationBox) -> f64 {
    s.iter()
        .zip(g)
        .map(|(&x, &d)| {
            let p = (x - d).clamp(b.green_min, b.red_max) - x;
            p * p
        })
        .sum::<f64>()
        .sqrt()
}

/// Projected gradient descent with backtracking line search from `s0`.
pub fn descend(scn: &Scenario, s0: &SwitchSchedule, cfg: &DescentConfig) -> Result<DescentReport> {
    cfg.validate()?;
    let bounds = duration_box(scn, s0)?;
    let mut s = SwitchSchedule::new(s0.u0, project_durations(&s0.durations, bounds.green_min, bounds.red_max)?)
        .with_bounds(bounds);
    let mut eval = evaluate_schedule(scn, &s, true)?;
    let mut evaluations = 1;
    let mut clamp_warnings = eval.clamp_warnings;
    let mut iterates: Vec<Iterate> = vec![];
    let mut beta_used = 0.0;
    let mut reason = None;
    for k in 0..=cfg.max_iter {
        let g = eval.gradient.as_ref().expect("gradient requested").d_s.clone();
        let j = eval.cost.total;
        let grad_norm = projected_gradient_norm(&s.durations, &g, &bounds);
        let prev = iterates.last().map(|it| it.cost);
        iterates.push(Iterate {
            durations: s.durations.clone(),
            cost: j,
            beta: beta_used,
            grad_norm,
        });
        if prev.is_some_and(|p| (p - j).abs() < cfg.eps) || grad_norm < cfg.grad_floor {
            reason = Some(Termination::Tolerance);
            break;
        }
        if k == cfg.max_iter {
            break;
        }
        let mut beta = if beta_used > 0.0 { 2.0 * beta_used } else { cfg.beta0 };
        let mut accepted = None;
        for _ in 0..=cfg.max_halvings {
            let trial: Vec<f64> = s.durations.iter().zip(&g).map(|(x, d)| x - beta * d).collect();
            let trial = project_durations(&trial, bounds.green_min, bounds.red_max)?;
            let decrease: f64 = s.durations.iter().zip(&trial).zip(&g).map(|((x, y), d)| d * (x - y)).sum();
            let cand = SwitchSchedule::new(s.u0, trial).with_bounds(bounds);
            let e = evaluate_schedule(scn, &cand, true)?;
            evaluations += 1;
            if e.cost.total < j && e.cost.total <= j - cfg.armijo * decrease {
                accepted = Some((cand, e));
                break;
            }
            beta *= 0.5;
        }
        let Some((cand, e)) = accepted else {
            reason = Some(Termination::LineSearchFailure);
            break;
        };
        debug!("iteration {k}: J {j:.9} -> {:.9} with beta {beta}", e.cost.total);
        s = cand;
        eval = e;
        beta_used = beta;
        clamp_warnings += eval.clamp_warnings;
    }
    if clamp_warnings > 0 {
        warn!("speed clamp active away from the lights at {clamp_warnings} point-steps over the descent");
    }
    Ok(DescentReport {
        iterates,
        reason: reason.unwrap_or(Termination::MaxIter),
        best_cost: eval.cost.total,
        best: s,
        clamp_warnings,
        evaluations,
    })
}

/// All runs of a multi-start descent; `best` indexes the lowest final cost,
/// ties going to the lowest start index.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiStartReport {
    pub starts: Vec<Vec<f64>>,
    pub reports: Vec<DescentReport>,
    pub best: usize,
}

impl MultiStartReport {
    pub fn best_report(&self) -> &DescentReport {
        &self.reports[self.best]
    }
}

/// Starting durations drawn uniformly from `[T_G, T_R]` by a ChaCha8 stream
/// seeded with `seed`.
pub fn draw_starts(scn: &Scenario, n_starts: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let group = scn.controlled_group()?;
    let bounds = duration_box(scn, &group.schedule)?;
    let s = group.schedule.durations.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n_starts)
        .map(|_| (0..s).map(|_| rng.random_range(bounds.green_min..=bounds.red_max)).collect())
        .collect())
}

/// Runs `descend` from `n_starts` seeded random schedules in parallel.
pub fn multi_start(scn: &Scenario, n_starts: usize, seed: u64, cfg: &DescentConfig) -> Result<MultiStartReport> {
    if n_starts == 0 {
        return Err(Error::validation("starts", "at least one start is required"));
    }
    let u0 = scn.controlled_group()?.schedule.u0;
    let starts = draw_starts(scn, n_starts, seed)?;
    let reports = starts
        .par_iter()
        .map(|d| descend(scn, &SwitchSchedule::new(u0, d.clone()), cfg))
        .collect::<Result<Vec<_>>>()?;
    let best = reports
        .iter()
        .enumerate()
        .fold(0, |b, (i, r)| if r.best_cost < reports[b].best_cost { i } else { b });
    Ok(MultiStartReport { starts, reports, best })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepSample {
    pub tau: f64,
    pub cost: f64,
    pub mean_velocity: f64,
}

/// Cost curve over single-switch schedules `s = (tau, T - tau)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub samples: Vec<SweepSample>,
    /// Indices attaining the largest mean velocity.
    pub argmax: Vec<usize>,
}

impl Sweep {
    /// Indices whose mean velocity lies within `rel` of the maximum.
    pub fn near_max(&self, rel: f64) -> Vec<usize> {
        let max = self.samples.iter().map(|s| s.mean_velocity).fold(f64::NEG_INFINITY, f64::max);
        let band = rel * max.abs();
        (0..self.samples.len())
            .filter(|&i| self.samples[i].mean_velocity >= max - band)
            .collect()
    }
}

/// Evaluates the cost at `tau_k = T k / (n + 1)`, `k = 1..=n`.
pub fn sweep_single_switch(scn: &Scenario, n_samples: usize) -> Result<Sweep> {
    if n_samples < 3 {
        return Err(Error::validation("samples", format!("need at least 3 samples, got {n_samples}")));
    }
    let u0 = scn.controlled_group()?.schedule.u0;
    let horizon = scn.horizon;
    let samples = (1..=n_samples)
        .into_par_iter()
        .map(|k| {
            let tau = horizon * k as f64 / (n_samples + 1) as f64;
            let sched = SwitchSchedule::new(u0, vec![tau, horizon - tau]);
            let cost = evaluate_schedule(scn, &sched, false)?.cost;
            Ok(SweepSample {
                tau,
                cost: cost.total,
                mean_velocity: cost.mean_velocity()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut sweep = Sweep { samples, argmax: vec![] };
    sweep.argmax = sweep.near_max(1e-12);
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::bundled;

    fn coarse_five_switches() -> Scenario {
        let mut file = bundled("merge_five_switches").unwrap().file().clone();
        file.grid.dx = Some(0.02);
        Scenario::from_file(file, "coarse").unwrap()
    }

    #[test]
    fn empty_network_stops_at_once() {
        let mut scn = coarse_five_switches();
        scn.initial.values.iter_mut().flatten().for_each(|m| *m = 0.0);
        let s0 = scn.controlled_group().unwrap().schedule.clone();
        let r = descend(&scn, &s0, &DescentConfig::default()).unwrap();
        assert_eq!(r.reason, Termination::Tolerance);
        assert_eq!(r.iterates.len(), 1);
        assert_eq!(r.best_cost, 0.0);
    }

    #[test]
    fn descent_is_monotone_and_feasible() {
        let scn = coarse_five_switches();
        let s0 = SwitchSchedule::new(0, vec![0.2, 0.2, 0.2, 0.2, 0.2]);
        let cfg = DescentConfig { max_iter: 8, ..Default::default() };
        let r = descend(&scn, &s0, &cfg).unwrap();
        assert!(r.iterates.len() > 1);
        for w in r.iterates.windows(2) {
            assert!(w[1].cost <= w[0].cost);
        }
        for it in &r.iterates {
            assert!(it.durations.iter().all(|&s| (0.15..=0.3).contains(&s)));
        }
        assert_eq!(r.best.durations, r.iterates.last().unwrap().durations);
    }

    #[test]
    fn infeasible_start_is_projected() {
        let scn = coarse_five_switches();
        let s0 = SwitchSchedule::new(0, vec![0.05, 0.5, 0.2, 0.2, 0.2]);
        let cfg = DescentConfig { max_iter: 1, ..Default::default() };
        let r = descend(&scn, &s0, &cfg).unwrap();
        assert_eq!(r.iterates[0].durations, vec![0.15, 0.3, 0.2, 0.2, 0.2]);
    }

    #[test]
    fn multi_start_is_deterministic() {
        let scn = coarse_five_switches();
        let cfg = DescentConfig { max_iter: 3, ..Default::default() };
        let a = multi_start(&scn, 3, 11, &cfg).unwrap();
        let b = multi_start(&scn, 3, 11, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.starts, draw_starts(&scn, 3, 11).unwrap());
        let best = a.best_report().best_cost;
        assert!(a.reports.iter().all(|r| r.best_cost >= best));
        assert!(a.starts.iter().flatten().all(|&s| (0.15..=0.3).contains(&s)));

        let one = multi_start(&scn, 1, 11, &cfg).unwrap();
        let direct = descend(&scn, &SwitchSchedule::new(0, one.starts[0].clone()), &cfg).unwrap();
        assert_eq!(one.reports[0], direct);
        assert!(multi_start(&scn, 0, 11, &cfg).is_err());
    }

    #[test]
    fn flat_region_start_terminates_by_tolerance() {
        let scn = bundled("merge_separated").unwrap();
        // switching before any car reaches the light changes nothing
        let r = descend(&scn, &SwitchSchedule::new(1, vec![0.1, 1.15]), &DescentConfig::default()).unwrap();
        assert_eq!(r.reason, Termination::Tolerance);
        assert!(r.iterates.len() <= 2);
    }

    #[test]
    fn sweep_is_flat_when_the_light_sees_no_traffic() {
        let mut file = bundled("merge_separated").unwrap().file().clone();
        file.grid.dx = Some(0.02);
        file.initial.blocks.iter_mut().for_each(|b| b.edge = 3);
        let scn = Scenario::from_file(file, "downstream").unwrap();
        let sw = sweep_single_switch(&scn, 5).unwrap();
        let v0 = sw.samples[0].mean_velocity;
        assert!(sw.samples.iter().all(|s| s.mean_velocity == v0));
        assert_eq!(sw.argmax, vec![0, 1, 2, 3, 4]);
        let taus: Vec<f64> = sw.samples.iter().map(|s| s.tau).collect();
        let expect: Vec<f64> = (1..=5).map(|k| 1.25 * k as f64 / 6.0).collect();
        assert_eq!(taus, expect);
        assert!(sweep_single_switch(&scn, 2).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(DescentConfig { eps: 0.0, ..Default::default() }.validate().is_err());
        assert!(DescentConfig { beta0: -1.0, ..Default::default() }.validate().is_err());
        assert!(DescentConfig { armijo: 1.0, ..Default::default() }.validate().is_err());
        assert!(DescentConfig { max_iter: 0, ..Default::default() }.validate().is_err());
        assert!(DescentConfig::default().validate().is_ok());
    }
}
