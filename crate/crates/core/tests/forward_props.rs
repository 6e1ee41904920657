mod common;

use common::{chain_and_concatenated, random_scenario, single_road, RandomSpec};
use proptest::prelude::*;
use roadflow::fields::{concat_edges, edge_cdf_distance_with_outflow, DensityField};
use roadflow::forward::simulate_forward;
use roadflow::scenario::parse_scenario_str;

fn total_variation(m: &DensityField) -> f64 {
    let c = &m.values[0];
    c[0].abs() + c.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mass_balance_and_positivity_on_random_networks(seed in any::<u64>()) {
        let scn = random_scenario(seed, RandomSpec::default());
        let traj = simulate_forward(&scn).unwrap();
        let ledger = traj.ledger;
        prop_assert!(ledger.relative_imbalance() <= 1e-12, "imbalance {}", ledger.relative_imbalance());
        prop_assert!(ledger.clipped.abs() < 1e-10 * (ledger.initial + ledger.inflow));
        for s in &traj.field.snapshots {
            prop_assert!(s.min() >= 0.0);
        }
        // per-step mass change equals the boundary fluxes
        let grid = &scn.grid;
        let masses: Vec<f64> = traj.field.snapshots.iter().map(|s| s.mass(grid)).collect();
        let total = ledger.initial + ledger.inflow;
        let mut outflow = 0.0;
        for n in 0..traj.n_steps() {
            let dt = traj.field.times[n + 1] - traj.field.times[n];
            let sinks: f64 = (0..grid.num_edges())
                .filter(|&k| scn.network.outgoing(scn.network.edge(k).head).is_empty())
                .map(|k| traj.outflux[n][k] * dt)
                .sum();
            outflow += sinks;
            let (a, b) = (traj.field.times[n], traj.field.times[n + 1]);
            let inflow: f64 = (0..scn.network.num_vertices()).map(|v| scn.inflow.average_rate(v, a, b) * dt).sum();
            prop_assert!((masses[n + 1] - masses[n] - inflow + sinks).abs() <= 1e-12 * total.max(1.0));
        }
        prop_assert!((outflow - ledger.outflow).abs() <= 1e-12 * total.max(1.0));
    }

    #[test]
    fn total_variation_never_increases_on_a_free_road(
        blocks in prop::collection::vec((0.0f64..0.8, 0.01f64..0.2), 1..4),
        limiter in prop::sample::select(vec!["superbee", "minmod", "none"]),
    ) {
        let blocks: Vec<(f64, f64)> = blocks.iter().map(|&(a, l)| (a, a + l)).collect();
        let scn = single_road(0.01, 0.6, limiter, &blocks);
        let traj = simulate_forward(&scn).unwrap();
        let tv: Vec<f64> = traj.field.snapshots.iter().map(total_variation).collect();
        for w in tv.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12) + 1e-12, "{} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn junction_with_unit_split_matches_one_long_road(a in 0.0f64..0.8, len in 0.05f64..0.2, horizon in 0.3f64..1.2) {
        let dx = 0.01;
        let (chain, single) = chain_and_concatenated(dx, horizon, (a, a + len));
        let (tc, ts) = (simulate_forward(&chain).unwrap(), simulate_forward(&single).unwrap());
        let joined = concat_edges(tc.field.last(), &chain.grid, &[0, 1]).unwrap();
        let d = edge_cdf_distance_with_outflow(
            &joined,
            tc.ledger.outflow,
            &ts.field.last().values[0],
            ts.ledger.outflow,
            dx,
        )
        .unwrap();
        prop_assert!(d <= dx * chain.initial_mass(), "distance {d}");
    }
}

fn smooth_bump(dx: f64, limiter: &str) -> roadflow::scenario::Scenario {
    let n = (1.0 / dx).round() as usize;
    let values: Vec<String> = (0..n)
        .map(|i| {
            let x = (i as f64 + 0.5) * dx;
            let y = if (0.1..0.4).contains(&x) { (std::f64::consts::PI * (x - 0.1) / 0.3).sin().powi(2) } else { 0.0 };
            format!("{y:?}")
        })
        .collect();
    let text = format!(
        "[network]\nedges = [{{ id = 1, tail = \"A\", head = \"B\", length = 1.0, terminal = true }}]\n\
         [grid]\ndx = {dx:?}\nhorizon = 0.3\nlimiter = \"{limiter}\"\n\
         [initial]\nprofiles = [{{ edge = 1, values = [{}] }}]\n",
        values.join(", ")
    );
    parse_scenario_str(&text, "bump").unwrap()
}

#[test]
fn limited_and_upwind_solutions_converge_together() {
    let gaps: Vec<f64> = [0.02, 0.01, 0.005]
        .iter()
        .map(|&dx| {
            let a = simulate_forward(&smooth_bump(dx, "superbee")).unwrap();
            let b = simulate_forward(&smooth_bump(dx, "none")).unwrap();
            a.field.last().values[0]
                .iter()
                .zip(&b.field.last().values[0])
                .map(|(x, y)| (x - y).abs() * dx)
                .sum()
        })
        .collect();
    assert!(gaps[1] < gaps[0] && gaps[2] < gaps[1], "{gaps:?}");
}
