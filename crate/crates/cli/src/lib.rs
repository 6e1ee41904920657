//! Command-line front end: loads a scenario, runs one pipeline and writes a
//! JSON manifest plus CSV outputs.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::{json, Value};

use roadflow::adjoint::{evaluate_cost, solve_adjoint, AdjointConfig};
use roadflow::avfleet::simulate_coupled;
use roadflow::control::SwitchSchedule;
use roadflow::forward::{run_forward, Model, Trajectory};
use roadflow::optimizer::{
    descend, evaluate_schedule, multi_start, sweep_single_switch, DescentConfig, DescentReport,
};
use roadflow::scenario::{bundled_source, resolve_scenario, Scenario};

mod output;

pub use output::{format_number, CsvFile};

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "ROADFLOW_OUT_DIR";

const EXIT_HELP: &str = "\
Exit codes:
  0  success
  2  invalid command line
  3  scenario could not be read or failed validation
  4  solver failure (CFL, non-finite values, missing history, empty network)
  5  problem outside the optimizer's scope
  6  outputs could not be written
On failure a JSON error record is printed to stderr and, when possible,
written to error.json in the output directory.";

#[derive(Debug, Parser)]
#[command(name = "roadflow", version, about = "Traffic flow on road networks with light and fleet control")]
#[command(after_help = EXIT_HELP)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct Common {
    /// Scenario file, or the name of a bundled scenario.
    #[arg(long)]
    pub scenario: String,
    /// Directory for the manifest and CSV outputs.
    #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Clone, Default)]
pub struct ScheduleArgs {
    /// Initial light state of the controlled group (1 = red on its first edge).
    #[arg(long)]
    pub u0: Option<u8>,
    /// Comma-separated phase durations of the controlled group.
    #[arg(long, value_delimiter = ',')]
    pub durations: Option<Vec<f64>>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Forward simulation of the drivers.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: ScheduleArgs,
        /// Comma-separated times at which to write snapshot CSVs.
        #[arg(long, value_delimiter = ',')]
        snap: Vec<f64>,
        /// Add the adjoint of the mean-speed cost as a `lambda` column.
        #[arg(long)]
        adjoint: bool,
    },
    /// Co-simulation of drivers and the autonomous fleet.
    Avsim {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        snap: Vec<f64>,
    },
    /// Exhaustive search over a single switching time.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 50)]
        samples: usize,
    },
    /// Projected gradient descent over the phase durations.
    Optimize {
        #[command(flatten)]
        common: Common,
        /// Explicit start; overrides the random starts.
        #[command(flatten)]
        schedule: ScheduleArgs,
        #[arg(long, default_value_t = 8)]
        starts: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = DescentConfig::default().eps)]
        eps: f64,
        #[arg(long, default_value_t = DescentConfig::default().beta0)]
        beta0: f64,
        #[arg(long, default_value_t = DescentConfig::default().max_iter)]
        max_iter: usize,
    },
    /// Adjoint gradient against central differences with step 2 dt.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        schedule: ScheduleArgs,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Simulate { .. } => "simulate",
            Command::Avsim { .. } => "avsim",
            Command::Sweep { .. } => "sweep",
            Command::Optimize { .. } => "optimize",
            Command::Gradcheck { .. } => "gradcheck",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Simulate { common, .. }
            | Command::Avsim { common, .. }
            | Command::Sweep { common, .. }
            | Command::Optimize { common, .. }
            | Command::Gradcheck { common, .. } => common,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("scenario: {0}")]
    Scenario(roadflow::Error),
    #[error("{0}")]
    Solver(roadflow::Error),
    #[error("{0}")]
    Unsupported(roadflow::Error),
    #[error("writing {path}: {source}")]
    Output {
        path: PathBuf,
        source: std::io::Error,
        written: Vec<PathBuf>,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Scenario(_) => 3,
            CliError::Solver(_) => 4,
            CliError::Unsupported(_) => 5,
            CliError::Output { .. } => 6,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "usage",
            CliError::Scenario(_) => "scenario",
            CliError::Solver(_) => "solver",
            CliError::Unsupported(_) => "unsupported",
            CliError::Output { .. } => "output",
        }
    }

    /// Machine-readable record of the failure.
    pub fn record(&self) -> Value {
        let mut rec = json!({
            "error": self.kind(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        });
        if let CliError::Output { written, .. } = self {
            rec["partial_outputs"] = json!(written);
        }
        rec
    }
}

impl From<roadflow::Error> for CliError {
    fn from(e: roadflow::Error) -> Self {
        use roadflow::Error as E;
        match e {
            E::Unsupported(_) => CliError::Unsupported(e),
            E::Cfl { .. } | E::NonFinite { .. } | E::MissingHistory(_) | E::DivisionGuard(_) => CliError::Solver(e),
            _ => CliError::Scenario(e),
        }
    }
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("{}", CliError::Usage(e.kind().to_string()).record());
            }
            return code;
        }
    };
    let out_dir = cli.command.common().out_dir.clone();
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(err) => {
            let rec = err.record();
            eprintln!("{rec}");
            if std::fs::create_dir_all(&out_dir).is_ok() {
                let _ = std::fs::write(out_dir.join("error.json"), format!("{rec:#}\n"));
            }
            err.exit_code()
        }
    }
}

fn load(common: &Common) -> Result<(Scenario, String), CliError> {
    let scn = resolve_scenario(&common.scenario).map_err(CliError::Scenario)?;
    let source = if Path::new(&common.scenario).exists() {
        std::fs::canonicalize(&common.scenario)
            .map(|p| p.display().to_string())
            .unwrap_or_else(|_| common.scenario.clone())
    } else if bundled_source(&common.scenario).is_some() {
        format!("bundled:{}", common.scenario)
    } else {
        common.scenario.clone()
    };
    Ok((scn, source))
}

/// Schedule of the controlled group with command-line overrides applied.
fn schedule_for(scn: &Scenario, args: &ScheduleArgs) -> Result<SwitchSchedule, CliError> {
    let base = &scn.controlled_group()?.schedule;
    let mut s = base.clone();
    if let Some(u0) = args.u0 {
        s.u0 = u0;
    }
    if let Some(d) = &args.durations {
        s.durations.clone_from(d);
    }
    s.validate().map_err(CliError::Scenario)?;
    Ok(s)
}

fn apply_schedule(scn: Scenario, args: &ScheduleArgs) -> Result<Scenario, CliError> {
    if args.u0.is_none() && args.durations.is_none() {
        return Ok(scn);
    }
    let s = schedule_for(&scn, args)?;
    Ok(scn.with_schedule(0, &s)?)
}

fn execute(cmd: &Command) -> Result<(), CliError> {
    let common = cmd.common();
    let (scn, source) = load(common)?;
    let mut out = output::OutputSet::new(&common.out_dir, cmd.name(), &source)?;
    match cmd {
        Command::Simulate {
            schedule,
            snap,
            adjoint,
            ..
        } => {
            let scn = apply_schedule(scn, schedule)?;
            out.config(&scn, json!({ "snap": snap, "adjoint": adjoint }))?;
            let snaps = out.plan_snapshots("snap", snap.len());
            out.plan("field.csv");
            out.write_manifest(None)?;
            let model = Model::new(&scn)?;
            let traj = run_forward(&model, None)?;
            let lambda = if *adjoint {
                Some(solve_adjoint(&model, &traj, None, &AdjointConfig::default())?)
            } else {
                None
            };
            let stride = scn.solver.record_stride;
            out.write_field("field.csv", &scn, &traj, lambda.as_ref(), "m", "v", stride)?;
            for (name, &t) in snaps.iter().zip(snap) {
                let n = nearest_node(&traj, t);
                out.write_snapshot(name, &scn, &traj, n, "m", "v")?;
            }
            let cost = evaluate_cost(&scn.grid, &traj, None)?;
            out.write_manifest(Some(json!({
                "steps": traj.n_steps(),
                "dt": traj.dt,
                "cost": cost.total,
                "mean_velocity": cost.mean_velocity().ok(),
                "mass": ledger_json(&traj),
                "clamp_warnings": traj.clamp_warnings,
            })))?;
        }
        Command::Avsim { snap, .. } => {
            out.config(&scn, json!({ "snap": snap }))?;
            let d_snaps = out.plan_snapshots("drivers_snap", snap.len());
            let f_snaps = out.plan_snapshots("fleet_snap", snap.len());
            out.plan("drivers.csv");
            out.plan("fleet.csv");
            out.write_manifest(None)?;
            let co = simulate_coupled(&scn)?;
            let stride = scn.solver.record_stride;
            out.write_field("drivers.csv", &scn, &co.drivers, None, "m", "v", stride)?;
            out.write_field("fleet.csv", &scn, &co.fleet, None, "mu", "w", stride)?;
            for ((dn, fname), &t) in d_snaps.iter().zip(&f_snaps).zip(snap) {
                let n = nearest_node(&co.drivers, t);
                out.write_snapshot(dn, &scn, &co.drivers, n, "m", "v")?;
                out.write_snapshot(fname, &scn, &co.fleet, n, "mu", "w")?;
            }
            out.write_manifest(Some(json!({
                "steps": co.drivers.n_steps(),
                "drivers_mass": ledger_json(&co.drivers),
                "fleet_mass": ledger_json(&co.fleet),
            })))?;
        }
        Command::Sweep { samples, .. } => {
            out.config(&scn, json!({ "samples": samples }))?;
            out.plan("sweep.csv");
            out.write_manifest(None)?;
            let sweep = sweep_single_switch(&scn, *samples)?;
            let mut csv = out.csv("sweep.csv", &["tau", "J", "vbar"])?;
            for s in &sweep.samples {
                csv.row_f64(&[s.tau, s.cost, s.mean_velocity])?;
            }
            out.finish_csv(csv)?;
            let argmax: Vec<f64> = sweep.argmax.iter().map(|&i| sweep.samples[i].tau).collect();
            let band: Vec<f64> = sweep.near_max(0.005).iter().map(|&i| sweep.samples[i].tau).collect();
            out.write_manifest(Some(json!({
                "argmax_tau": argmax,
                "within_half_percent_tau": band,
                "max_vbar": sweep.argmax.first().map(|&i| sweep.samples[i].mean_velocity),
            })))?;
        }
        Command::Optimize {
            schedule,
            starts,
            seed,
            eps,
            beta0,
            max_iter,
            ..
        } => {
            let cfg = DescentConfig {
                eps: *eps,
                beta0: *beta0,
                max_iter: *max_iter,
                ..Default::default()
            };
            cfg.validate().map_err(CliError::Scenario)?;
            let explicit = schedule.u0.is_some() || schedule.durations.is_some();
            out.config(
                &scn,
                json!({
                    "starts": if explicit { 1 } else { *starts },
                    "seed": seed,
                    "eps": cfg.eps,
                    "beta0": cfg.beta0,
                    "max_iter": cfg.max_iter,
                    "max_halvings": cfg.max_halvings,
                    "armijo": cfg.armijo,
                    "grad_floor": cfg.grad_floor,
                    "start": schedule.durations,
                }),
            )?;
            out.seed(*seed);
            out.plan("descent.csv");
            out.write_manifest(None)?;
            let reports: Vec<DescentReport>;
            let best;
            if explicit {
                let s0 = schedule_for(&scn, schedule)?;
                reports = vec![descend(&scn, &s0, &cfg)?];
                best = 0;
            } else {
                let ms = multi_start(&scn, *starts, *seed, &cfg)?;
                best = ms.best;
                reports = ms.reports;
            }
            let s = reports[best].best.durations.len();
            let mut header = vec!["start".to_string(), "iter".into(), "J".into()];
            header.extend((1..=s).map(|i| format!("s_{i}")));
            header.push("beta".into());
            let mut csv = out.csv("descent.csv", &header.iter().map(String::as_str).collect::<Vec<_>>())?;
            for (i, r) in reports.iter().enumerate() {
                for (k, it) in r.iterates.iter().enumerate() {
                    let mut row = vec![i.to_string(), k.to_string(), format_number(it.cost)];
                    row.extend(it.durations.iter().map(|&x| format_number(x)));
                    row.push(format_number(it.beta));
                    csv.row(&row)?;
                }
            }
            out.finish_csv(csv)?;
            let r = &reports[best];
            out.write_manifest(Some(json!({
                "best_start": best,
                "best_durations": r.best.durations,
                "u0": r.best.u0,
                "best_cost": r.best_cost,
                "reasons": reports.iter().map(|r| r.reason.to_string()).collect::<Vec<_>>(),
                "clamp_warnings": reports.iter().map(|r| r.clamp_warnings).sum::<usize>(),
            })))?;
        }
        Command::Gradcheck { schedule, .. } => {
            let sched = schedule_for(&scn, schedule)?;
            out.config(&scn, json!({ "u0": sched.u0, "durations": sched.durations }))?;
            out.plan("gradcheck.csv");
            out.write_manifest(None)?;
            let eval = evaluate_schedule(&scn, &sched, true)?;
            let g = eval.gradient.expect("gradient requested");
            if eval.clamp_warnings > 0 {
                log::warn!(
                    "gradient evaluated with the speed clamp active away from the lights at {} point-steps",
                    eval.clamp_warnings
                );
            }
            let dt = Model::new(&scn)?.dt;
            let delta = 2.0 * dt;
            let mut csv = out.csv("gradcheck.csv", &["component", "analytic", "finite_diff", "rel_err"])?;
            for (k, &a) in g.d_s.iter().enumerate() {
                let shifted = |h: f64| -> Result<f64, CliError> {
                    let mut d = sched.durations.clone();
                    d[k] += h;
                    let s = SwitchSchedule { durations: d, ..sched.clone() };
                    Ok(evaluate_schedule(&scn, &s, false)?.cost.total)
                };
                let fd = (shifted(delta)? - shifted(-delta)?) / (2.0 * delta);
                let rel = (a - fd).abs() / fd.abs().max(f64::MIN_POSITIVE);
                csv.row(&[(k + 1).to_string(), format_number(a), format_number(fd), format_number(rel)])?;
            }
            out.finish_csv(csv)?;
            out.write_manifest(Some(json!({ "cost": eval.cost.total, "delta": delta })))?;
        }
    }
    Ok(())
}

fn nearest_node(traj: &Trajectory, t: f64) -> usize {
    let times = &traj.field.times;
    (0..times.len())
        .min_by(|&a, &b| (times[a] - t).abs().total_cmp(&(times[b] - t).abs()))
        .unwrap_or(0)
}

#[derive(Serialize)]
struct LedgerOut {
    initial: f64,
    inflow: f64,
    outflow: f64,
    clipped: f64,
    final_mass: f64,
    relative_imbalance: f64,
}

fn ledger_json(traj: &Trajectory) -> Value {
    let l = traj.ledger;
    json!(LedgerOut {
        initial: l.initial,
        inflow: l.inflow,
        outflow: l.outflow,
        clipped: l.clipped,
        final_mass: l.final_mass,
        relative_imbalance: l.relative_imbalance(),
    })
}
