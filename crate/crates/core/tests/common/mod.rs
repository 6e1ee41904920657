//! Seeded random scenarios for property and acceptance tests.
#![allow(dead_code)]

use std::fmt::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadflow::scenario::{parse_scenario_str, Scenario};

/// Knobs for [`random_scenario`].
#[derive(Debug, Clone, Copy)]
pub struct RandomSpec {
    pub max_edges: usize,
    pub dx: f64,
    pub inflow: bool,
}

impl Default for RandomSpec {
    fn default() -> Self {
        RandomSpec {
            max_edges: 6,
            dx: 0.05,
            inflow: true,
        }
    }
}

/// Scenario text for a random acyclic network of at most `max_edges` edges,
/// random block data, random piecewise-constant splits and source rates.
pub fn random_scenario_text(seed: u64, spec: RandomSpec) -> String {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nv = rng.random_range(2..=spec.max_edges.max(1) + 1);
    let target = rng.random_range(1..=spec.max_edges);
    let mut pairs: Vec<(usize, usize)> = Vec::new();
    for _ in 0..8 * target {
        if pairs.len() == target {
            break;
        }
        let a = rng.random_range(0..nv - 1);
        let b = rng.random_range(a + 1..nv);
        if !pairs.contains(&(a, b)) {
            pairs.push((a, b));
        }
    }
    let lengths: Vec<f64> = pairs.iter().map(|_| round(rng.random_range(0.5..1.5))).collect();
    let horizon = round(rng.random_range(0.5..1.5));
    let half = round(horizon / 2.0);

    let mut s = String::new();
    writeln!(s, "name = \"random_{seed}\"\n\n[network]\nedges = [").unwrap();
    for (e, ((a, b), l)) in pairs.iter().zip(&lengths).enumerate() {
        writeln!(s, "  {{ id = {}, tail = \"V{a}\", head = \"V{b}\", length = {l:?} }},", e + 1).unwrap();
    }
    writeln!(s, "]\n\n[grid]\ndx = {:?}\nhorizon = {horizon:?}", spec.dx).unwrap();
    let limiter = ["superbee", "minmod", "none"][rng.random_range(0..3)];
    writeln!(s, "limiter = \"{limiter}\"").unwrap();
    writeln!(s, "\n[velocity]\nfree_flow = {:?}", round(rng.random_range(0.5..1.5))).unwrap();
    if rng.random_bool(0.7) {
        writeln!(s, "\n[kernel]\nmodel = \"nonlocal\"\nmu1 = 1.0\nmu2 = 25.0\nradius_cells = 3").unwrap();
    } else {
        writeln!(s, "\n[kernel]\nmodel = \"local\"").unwrap();
    }

    writeln!(s, "\n[initial]\nblocks = [").unwrap();
    for _ in 0..rng.random_range(1..=3) {
        let e = rng.random_range(0..pairs.len());
        let from = round(rng.random_range(0.0..lengths[e] - 0.2));
        let to = round(from + rng.random_range(0.05..0.2));
        let value = round(rng.random_range(0.2..1.0));
        writeln!(s, "  {{ edge = {}, from = {from:?}, to = {to:?}, value = {value:?} }},", e + 1).unwrap();
    }
    writeln!(s, "]").unwrap();

    let mut rows = String::new();
    for (k, &(_, head)) in pairs.iter().enumerate() {
        let outs: Vec<usize> = (0..pairs.len()).filter(|&j| pairs[j].0 == head).collect();
        if outs.len() < 2 {
            continue;
        }
        let ids: Vec<String> = outs.iter().map(|j| (j + 1).to_string()).collect();
        let intervals: Vec<String> = (0..2).map(|_| format!("{:?}", random_row(&mut rng, outs.len()))).collect();
        writeln!(rows, "  {{ from = {}, to = [{}], p = [{}] }},", k + 1, ids.join(", "), intervals.join(", ")).unwrap();
    }
    if !rows.is_empty() {
        writeln!(s, "\n[matrixP]\nbreakpoints = [0.0, {half:?}]\nrows = [\n{rows}]").unwrap();
    }

    if spec.inflow {
        let sources: Vec<usize> = (0..nv)
            .filter(|&v| pairs.iter().any(|p| p.0 == v) && !pairs.iter().any(|p| p.1 == v))
            .collect();
        let mut entries = String::new();
        for v in sources {
            if rng.random_bool(0.5) {
                let r = [round(rng.random_range(0.0..0.5)), round(rng.random_range(0.0..0.5))];
                writeln!(entries, "  {{ vertex = \"V{v}\", breakpoints = [0.0, {half:?}], rates = {r:?} }},").unwrap();
            }
        }
        if !entries.is_empty() {
            writeln!(s, "\n[inflow]\nsources = [\n{entries}]").unwrap();
        }
    }
    s
}

pub fn random_scenario(seed: u64, spec: RandomSpec) -> Scenario {
    let text = random_scenario_text(seed, spec);
    parse_scenario_str(&text, "random").unwrap_or_else(|e| panic!("seed {seed}: {e}\n{text}"))
}

fn random_row(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| round(rng.random_range(0.05..1.0))).collect();
    let total: f64 = w.iter().sum();
    let mut row: Vec<f64> = w[..n - 1].iter().map(|x| round(x / total)).collect();
    let rest = 1.0 - row.iter().sum::<f64>();
    row.push(rest);
    row
}

fn round(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

/// Single road of unit length with free-flow speed 1 and no interaction.
pub fn single_road(dx: f64, horizon: f64, limiter: &str, blocks: &[(f64, f64)]) -> Scenario {
    let blocks: Vec<String> = blocks
        .iter()
        .map(|(a, b)| format!("{{ edge = 1, from = {a:?}, to = {b:?} }}"))
        .collect();
    let text = format!(
        "[network]\nedges = [{{ id = 1, tail = \"A\", head = \"B\", length = 1.0, terminal = true }}]\n\
         [grid]\ndx = {dx:?}\nhorizon = {horizon:?}\nlimiter = \"{limiter}\"\n\
         [initial]\nblocks = [{}]\n",
        blocks.join(", ")
    );
    parse_scenario_str(&text, "single_road").unwrap()
}

/// Two unit roads in series against one road of length 2, same data.
pub fn chain_and_concatenated(dx: f64, horizon: f64, block: (f64, f64)) -> (Scenario, Scenario) {
    let (a, b) = block;
    let chain = format!(
        "[network]\nedges = [{{ id = 1, tail = \"A\", head = \"B\", length = 1.0 }}, \
         {{ id = 2, tail = \"B\", head = \"C\", length = 1.0, terminal = true }}]\n\
         [grid]\ndx = {dx:?}\nhorizon = {horizon:?}\n\
         [initial]\nblocks = [{{ edge = 1, from = {a:?}, to = {b:?} }}]\n"
    );
    let single = format!(
        "[network]\nedges = [{{ id = 1, tail = \"A\", head = \"C\", length = 2.0, terminal = true }}]\n\
         [grid]\ndx = {dx:?}\nhorizon = {horizon:?}\n\
         [initial]\nblocks = [{{ edge = 1, from = {a:?}, to = {b:?} }}]\n"
    );
    (parse_scenario_str(&chain, "chain").unwrap(), parse_scenario_str(&single, "single").unwrap())
}
