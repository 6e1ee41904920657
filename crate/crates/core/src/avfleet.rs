//! Co-simulation of the drivers and a controlled fleet sharing one speed
//! field. The fleet moves at `u(x, t) v[m, mu]` with `0 <= u <= 1`, splits at
//! junctions by its own matrix `Q`, receives no source inflow, and slows the
//! drivers through its own interaction kernel.

use log::debug;

use crate::fields::{DensityField, SpaceTimeField};
use crate::forward::{advance_step, MassLedger, Model, Trajectory};
use crate::scenario::{FleetSpec, Scenario};
use crate::velocity::{speed_point_offsets, KernelStencil, VelocityField};
use crate::{Error, Result};

/// Driver and fleet histories on the same time grid.
#[derive(Debug, Clone)]
pub struct CoupledTrajectory {
    pub drivers: Trajectory,
    /// `velocities` holds the fleet speeds `u v`; `rows` the `Q` rows.
    pub fleet: Trajectory,
}

/// Control values at every speed point of every edge at time `t`.
pub fn control_points(scn: &Scenario, fleet: &FleetSpec, t: f64) -> Vec<Vec<f64>> {
    (0..scn.grid.num_edges())
        .map(|k| {
            speed_point_offsets(&scn.grid, k)
                .into_iter()
                .map(|x| fleet.control.eval(k, x, t))
                .collect()
        })
        .collect()
}

/// Fleet speeds `u v` at the speed points, with faces built as for drivers.
pub fn fleet_velocity(v: &VelocityField, u: &[Vec<f64>]) -> Result<VelocityField> {
    if u.len() != v.points.len() {
        return Err(Error::Shape("control covers a different edge set".into()));
    }
    let mut points = Vec::with_capacity(u.len());
    let mut raw = Vec::with_capacity(u.len());
    let mut faces = Vec::with_capacity(u.len());
    for (k, (vk, uk)) in v.points.iter().zip(u).enumerate() {
        if vk.len() != uk.len() {
            return Err(Error::Shape(format!("control on edge {k} has {} points, expected {}", uk.len(), vk.len())));
        }
        if let Some(bad) = uk.iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::Range {
                what: "fleet control",
                value: *bad,
                lo: 0.0,
                hi: 1.0,
            });
        }
        let p: Vec<f64> = vk.iter().zip(uk).map(|(v, u)| u * v).collect();
        let n = p.len() - 1;
        let mut fc: Vec<f64> = (0..n - 1).map(|q| 0.5 * (p[q] + p[q + 1])).collect();
        fc.push(p[n]);
        raw.push(v.raw[k].iter().zip(uk).map(|(r, u)| u * r).collect());
        points.push(p);
        faces.push(fc);
    }
    Ok(VelocityField {
        points,
        raw,
        faces,
        clamped: 0,
    })
}

/// Advances drivers and fleet together from time-`n` data in every step.
pub fn simulate_coupled(scn: &Scenario) -> Result<CoupledTrajectory> {
    let fleet = scn
        .fleet
        .as_ref()
        .ok_or_else(|| Error::validation("fleet", "scenario has no fleet block"))?;
    let model = Model::new(scn)?;
    let grid = &scn.grid;
    let net = &scn.network;
    scn.initial.check_shape(grid)?;
    fleet.initial.check_shape(grid)?;
    let stencil = KernelStencil::build(net, grid, &fleet.kernel)?;
    let n_steps = model.n_steps;
    let no_sources = vec![0.0; net.num_vertices()];

    let mut m = scn.initial.clone();
    let mut mu = fleet.initial.clone();
    let mut d = History::new(n_steps, m.mass(grid));
    let mut f = History::new(n_steps, mu.mass(grid));
    for n in 0..n_steps {
        let t = model.time(n);
        let dt = model.time(n + 1) - t;
        let level = model.light_average(n);
        let extra = stencil.apply(&mu);
        let v = model.velocity(&m, &level, Some(&extra))?;
        d.clamp_warnings += model.clamps_away_from_light(&v);
        let w = fleet_velocity(&v, &control_points(scn, fleet, t))?;

        let rows = model.rows(&scn.distribution, n);
        let rates = model.source_rates(n);
        let step = advance_step(net, grid, &m, &v, &rows, &rates, dt, t, &scn.solver)?;
        d.record(&model, t, &m, &step);
        let fleet_rows = model.rows(&fleet.distribution, n);
        let fstep = advance_step(net, grid, &mu, &w, &fleet_rows, &no_sources, dt, t, &scn.solver)?;
        f.record(&model, t, &mu, &fstep);

        m = step.next;
        mu = fstep.next;
        d.velocities.push(v);
        f.velocities.push(w);
        d.light_levels.push(level.clone());
        f.light_levels.push(level);
        d.rows.push(rows);
        f.rows.push(fleet_rows);
    }
    let t = scn.horizon;
    let extra = stencil.apply(&mu);
    let v = model.velocity(&m, &model.light_value(n_steps), Some(&extra))?;
    let w = fleet_velocity(&v, &control_points(scn, fleet, t))?;
    d.velocities.push(v);
    f.velocities.push(w);
    if d.clamp_warnings > 0 {
        debug!("speed clamp active away from the lights at {} point-steps", d.clamp_warnings);
    }
    Ok(CoupledTrajectory {
        drivers: d.finish(&model, m),
        fleet: f.finish(&model, mu),
    })
}

struct History {
    times: Vec<f64>,
    snapshots: Vec<DensityField>,
    traces: Vec<Vec<crate::fields::JunctionTrace>>,
    velocities: Vec<VelocityField>,
    light_levels: Vec<Vec<f64>>,
    rows: Vec<Vec<Vec<(usize, f64)>>>,
    outflux: Vec<Vec<f64>>,
    ledger: MassLedger,
    clamp_warnings: usize,
}

impl History {
    fn new(n_steps: usize, initial: f64) -> Self {
        History {
            times: Vec::with_capacity(n_steps + 1),
            snapshots: Vec::with_capacity(n_steps + 1),
            traces: Vec::with_capacity(n_steps + 1),
            velocities: Vec::with_capacity(n_steps + 1),
            light_levels: Vec::with_capacity(n_steps),
            rows: Vec::with_capacity(n_steps),
            outflux: Vec::with_capacity(n_steps),
            ledger: MassLedger {
                initial,
                ..Default::default()
            },
            clamp_warnings: 0,
        }
    }

    fn record(&mut self, model: &Model<'_>, t: f64, m: &DensityField, step: &crate::forward::StepOutput) {
        self.ledger.inflow += step.inflow_mass;
        self.ledger.outflow += step.outflow_mass;
        self.ledger.clipped += step.clipped_mass;
        self.times.push(t);
        self.traces.push(model.traces(m, Some(step)));
        self.outflux
            .push(step.fluxes.iter().map(|f| *f.last().expect("nonempty edge")).collect());
        self.snapshots.push(m.clone());
    }

    fn finish(mut self, model: &Model<'_>, m: DensityField) -> Trajectory {
        let grid = &model.scenario.grid;
        self.times.push(model.scenario.horizon);
        self.traces.push(model.traces(&m, None));
        self.ledger.final_mass = m.mass(grid);
        self.snapshots.push(m);
        Trajectory {
            field: SpaceTimeField {
                times: self.times,
                snapshots: self.snapshots,
                traces: self.traces,
            },
            velocities: self.velocities,
            light_levels: self.light_levels,
            rows: self.rows,
            outflux: self.outflux,
            dt: model.dt,
            ledger: self.ledger,
            clamp_warnings: self.clamp_warnings,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{run_forward, Obstacle};
    use crate::scenario::bundled;

    fn demo() -> Scenario {
        bundled("fleet_demo").unwrap()
    }

    fn uniform_control(scn: &mut Scenario, u: f64) {
        let fleet = scn.fleet.as_mut().unwrap();
        fleet.control.constant = u;
        fleet.control.tables.iter_mut().for_each(|t| *t = None);
    }

    #[test]
    fn empty_fleet_leaves_drivers_untouched() {
        let mut scn = demo();
        let fleet = scn.fleet.as_mut().unwrap();
        fleet.initial.values.iter_mut().flatten().for_each(|x| *x = 0.0);
        let coupled = simulate_coupled(&scn).unwrap();
        let plain = run_forward(&Model::new(&scn).unwrap(), None).unwrap();
        assert_eq!(coupled.drivers.field.snapshots, plain.field.snapshots);
        assert_eq!(coupled.drivers.velocities, plain.velocities);
        assert!(coupled.fleet.field.snapshots.iter().all(|s| s.values.iter().flatten().all(|&x| x == 0.0)));
    }

    #[test]
    fn parked_fleet_is_a_static_obstacle() {
        let mut scn = demo();
        uniform_control(&mut scn, 0.0);
        let coupled = simulate_coupled(&scn).unwrap();
        let fleet = scn.fleet.as_ref().unwrap();
        for s in &coupled.fleet.field.snapshots {
            assert_eq!(s, &fleet.initial);
        }
        let stencil = KernelStencil::build(&scn.network, &scn.grid, &fleet.kernel).unwrap();
        let obstacle = Obstacle {
            stencil: &stencil,
            density: &fleet.initial,
        };
        let fixed = run_forward(&Model::new(&scn).unwrap(), Some(obstacle)).unwrap();
        assert_eq!(coupled.drivers.field.snapshots, fixed.field.snapshots);
    }

    #[test]
    fn fleet_following_the_crowd_stays_proportional() {
        let mut scn = demo();
        uniform_control(&mut scn, 1.0);
        let initial = scn.initial.clone();
        let fleet = scn.fleet.as_mut().unwrap();
        fleet.initial = DensityField {
            values: initial.values.iter().map(|r| r.iter().map(|x| 0.25 * x).collect()).collect(),
        };
        fleet.distribution = scn.distribution.clone();
        let coupled = simulate_coupled(&scn).unwrap();
        let scale = coupled.drivers.field.snapshots[0].max();
        for (m, mu) in coupled.drivers.field.snapshots.iter().zip(&coupled.fleet.field.snapshots) {
            for (a, b) in m.values.iter().flatten().zip(mu.values.iter().flatten()) {
                assert!((0.25 * a - b).abs() <= 1e-12 * scale, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn fleet_mass_and_speed_bounds() {
        let scn = demo();
        let coupled = simulate_coupled(&scn).unwrap();
        let ledger = coupled.fleet.ledger;
        assert_eq!(ledger.inflow, 0.0);
        assert!(ledger.relative_imbalance() < 1e-12);
        for (v, w) in coupled.drivers.velocities.iter().zip(&coupled.fleet.velocities) {
            for (a, b) in v.points.iter().flatten().zip(w.points.iter().flatten()) {
                assert!(*b >= 0.0 && b <= a);
            }
        }
        // the platoon slows the drivers behind it
        let plain = run_forward(&Model::new(&scn.without_fleet()).unwrap(), None).unwrap();
        let g = &scn.grid;
        // mass-weighted distance travelled from the tail of road 1
        let ahead = |t: &Trajectory| {
            let m = t.field.snapshots.last().unwrap();
            (0..2)
                .flat_map(|k| (0..g.edge(k).n_cells).map(move |i| (k, i)))
                .map(|(k, i)| m.values[k][i] * g.edge(k).dx * (k as f64 + g.edge(k).center(i)))
                .sum::<f64>()
        };
        assert!(ahead(&coupled.drivers) < ahead(&plain));
    }

    #[test]
    fn control_outside_unit_interval_is_rejected() {
        let mut scn = demo();
        uniform_control(&mut scn, 1.5);
        assert!(matches!(simulate_coupled(&scn), Err(Error::Range { .. })));
        assert!(simulate_coupled(&scn.without_fleet()).is_err());
    }
}
