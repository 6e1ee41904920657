mod common;

use common::{random_scenario, RandomSpec};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadflow::fields::DensityField;
use roadflow::forward::Model;
use roadflow::scenario::Scenario;
use roadflow::velocity::{interaction_velocity, KernelStencil};

fn random_density(scn: &Scenario, rng: &mut ChaCha8Rng) -> DensityField {
    let mut m = DensityField::zeros(&scn.grid);
    for v in m.values.iter_mut().flatten() {
        *v = if rng.random_bool(0.3) { rng.random_range(0.0..2.0) } else { 0.0 };
    }
    m
}

fn nonlocal(seed: u64) -> Option<(Scenario, KernelStencil)> {
    let scn = random_scenario(seed, RandomSpec::default());
    let stencil = KernelStencil::build(&scn.network, &scn.grid, scn.kernel.as_ref()?).unwrap();
    Some((scn, stencil))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn speed_stays_between_zero_and_free_flow(seed in any::<u64>(), level in 0.0f64..=1.0) {
        let scn = random_scenario(seed, RandomSpec::default());
        let model = Model::new(&scn).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = random_density(&scn, &mut rng);
        let signal = vec![level; scn.grid.num_edges()];
        let v = model.velocity(&m, &signal, None).unwrap();
        let vf = scn.max_free_flow();
        for p in v.points.iter().flatten().chain(v.faces.iter().flatten()) {
            prop_assert!((0.0..=vf).contains(p));
        }
    }

    #[test]
    fn interaction_is_additive_and_monotone(seed in any::<u64>()) {
        let Some((scn, stencil)) = nonlocal(seed) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b) = (random_density(&scn, &mut rng), random_density(&scn, &mut rng));
        let mut sum = a.clone();
        for (s, x) in sum.values.iter_mut().flatten().zip(b.values.iter().flatten()) {
            *s += x;
        }
        let (va, vb, vs) = (
            interaction_velocity(&stencil, &a),
            interaction_velocity(&stencil, &b),
            interaction_velocity(&stencil, &sum),
        );
        for ((x, y), z) in va.iter().flatten().zip(vb.iter().flatten()).zip(vs.iter().flatten()) {
            prop_assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()));
        }
        let model = Model::new(&scn).unwrap();
        let signal = model.light_value(0);
        let (slow, fast) = (model.velocity(&sum, &signal, None).unwrap(), model.velocity(&a, &signal, None).unwrap());
        for (s, f) in slow.points.iter().flatten().zip(fast.points.iter().flatten()) {
            prop_assert!(s <= f);
        }
    }

    #[test]
    fn interaction_is_lipschitz_in_one_cell(seed in any::<u64>(), delta in 0.0f64..5.0) {
        let Some((scn, stencil)) = nonlocal(seed) else { return Ok(()) };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_density(&scn, &mut rng);
        let k = rng.random_range(0..scn.grid.num_edges());
        let i = rng.random_range(0..scn.grid.edge(k).n_cells);
        let mut b = a.clone();
        b.values[k][i] += delta;
        let mass_diff = delta * scn.grid.edge(k).dx;
        let k0 = scn.kernel.as_ref().unwrap().shape.eval(0.0);
        let (va, vb) = (interaction_velocity(&stencil, &a), interaction_velocity(&stencil, &b));
        for (x, y) in va.iter().flatten().zip(vb.iter().flatten()) {
            prop_assert!((x - y).abs() <= k0 * mass_diff * (1.0 + 1e-12));
        }
    }
}
