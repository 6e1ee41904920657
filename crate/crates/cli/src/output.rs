//! Manifest and CSV writers.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use roadflow::adjoint::AdjointField;
use roadflow::forward::Trajectory;
use roadflow::scenario::Scenario;

use crate::CliError;

/// `x` with 12 significant digits, fixed notation for moderate exponents and
/// scientific otherwise, trailing zeros removed.
pub fn format_number(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.11e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format has an exponent");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..12).contains(&exp) {
        let decimals = (11 - exp).max(0) as usize;
        let s = format!("{x:.decimals$}");
        trim_zeros(&s).to_string()
    } else {
        format!("{}e{exp}", trim_zeros(mant))
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// CSV file whose first line declares the column schema.
pub struct CsvFile {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvFile {
    pub fn create(path: &Path, header: &[&str]) -> std::io::Result<Self> {
        let mut file = BufWriter::new(File::create(path)?);
        writeln!(file, "# columns: {}", header.join(","))?;
        let mut writer = csv::Writer::from_writer(file);
        writer.write_record(header).map_err(std::io::Error::other)?;
        Ok(CsvFile {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<S: AsRef<str>>(&mut self, fields: &[S]) -> Result<(), CliError> {
        let path = self.path.clone();
        self.writer
            .write_record(fields.iter().map(|s| s.as_ref()))
            .map_err(|e| output_error(path, std::io::Error::other(e), &[]))
    }

    pub fn row_f64(&mut self, values: &[f64]) -> Result<(), CliError> {
        let fields: Vec<String> = values.iter().map(|&x| format_number(x)).collect();
        self.row(&fields)
    }

    pub fn finish(mut self) -> std::io::Result<PathBuf> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

fn output_error(path: PathBuf, source: std::io::Error, written: &[PathBuf]) -> CliError {
    CliError::Output {
        path,
        source,
        written: written.to_vec(),
    }
}

/// Outputs of one command: the manifest is written before any data file and
/// rewritten with a summary at the end.
pub struct OutputSet {
    dir: PathBuf,
    command: String,
    scenario: String,
    config: Value,
    seed: Option<u64>,
    timestamp: String,
    planned: Vec<String>,
    written: Vec<PathBuf>,
}

impl OutputSet {
    pub fn new(dir: &Path, command: &str, scenario: &str) -> Result<Self, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| output_error(dir.to_path_buf(), e, &[]))?;
        Ok(OutputSet {
            dir: dir.to_path_buf(),
            command: command.into(),
            scenario: scenario.into(),
            config: Value::Null,
            seed: None,
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            planned: vec![],
            written: vec![],
        })
    }

    pub fn config(&mut self, scn: &Scenario, params: Value) -> Result<(), CliError> {
        self.config = json!({
            "scenario": scn.file(),
            "parameters": params,
        });
        Ok(())
    }

    pub fn seed(&mut self, seed: u64) {
        self.seed = Some(seed);
    }

    pub fn plan(&mut self, name: &str) {
        self.planned.push(name.into());
    }

    pub fn plan_snapshots(&mut self, prefix: &str, n: usize) -> Vec<String> {
        let names: Vec<String> = (0..n).map(|i| format!("{prefix}_{i:03}.csv")).collect();
        self.planned.extend(names.iter().cloned());
        names
    }

    pub fn write_manifest(&mut self, summary: Option<Value>) -> Result<(), CliError> {
        let done = summary.is_some();
        let manifest = json!({
            "command": self.command,
            "scenario": self.scenario,
            "config": self.config,
            "seed": self.seed,
            "version": env!("CARGO_PKG_VERSION"),
            "timestamp": self.timestamp,
            "status": if done { "complete" } else { "running" },
            "outputs": self.planned,
            "summary": summary.unwrap_or(Value::Null),
        });
        let path = self.dir.join("manifest.json");
        std::fs::write(&path, format!("{manifest:#}\n")).map_err(|e| output_error(path, e, &self.written))
    }

    pub fn csv(&self, name: &str, header: &[&str]) -> Result<CsvFile, CliError> {
        let path = self.dir.join(name);
        CsvFile::create(&path, header).map_err(|e| output_error(path, e, &self.written))
    }

    pub fn finish_csv(&mut self, csv: CsvFile) -> Result<(), CliError> {
        let path = csv.path.clone();
        let done = csv.finish().map_err(|e| output_error(path, e, &self.written))?;
        self.written.push(done);
        Ok(())
    }

    /// One row per cell per recorded node: `edge_id,t,x,<m>,<v>[,lambda]`.
    #[allow(clippy::too_many_arguments)]
    pub fn write_field(
        &mut self,
        name: &str,
        scn: &Scenario,
        traj: &Trajectory,
        lambda: Option<&AdjointField>,
        mcol: &str,
        vcol: &str,
        stride: usize,
    ) -> Result<(), CliError> {
        let mut header = vec!["edge_id", "t", "x", mcol, vcol];
        if lambda.is_some() {
            header.push("lambda");
        }
        let mut csv = self.csv(name, &header)?;
        let last = traj.field.times.len().saturating_sub(1);
        for n in (0..=last).filter(|&n| n % stride.max(1) == 0 || n == last) {
            write_node(&mut csv, scn, traj, lambda, n)?;
        }
        self.finish_csv(csv)
    }

    pub fn write_snapshot(
        &mut self,
        name: &str,
        scn: &Scenario,
        traj: &Trajectory,
        n: usize,
        mcol: &str,
        vcol: &str,
    ) -> Result<(), CliError> {
        let mut csv = self.csv(name, &["edge_id", "t", "x", mcol, vcol])?;
        if n < traj.field.times.len() {
            write_node(&mut csv, scn, traj, None, n)?;
        }
        self.finish_csv(csv)
    }
}

fn write_node(
    csv: &mut CsvFile,
    scn: &Scenario,
    traj: &Trajectory,
    lambda: Option<&AdjointField>,
    n: usize,
) -> Result<(), CliError> {
    let t = traj.field.times[n];
    let m = &traj.field.snapshots[n];
    let v = &traj.velocities[n];
    for (k, g) in scn.grid.edges().iter().enumerate() {
        let id = scn.network.edge(k).id.to_string();
        for i in 0..g.n_cells {
            let mut row = vec![
                id.clone(),
                format_number(t),
                format_number(g.center(i)),
                format_number(m.values[k][i]),
                format_number(v.points[k][i]),
            ];
            if let Some(l) = lambda {
                row.push(format_number(l.values[n][k][i]));
            }
            csv.row(&row)?;
        }
    }
    Ok(())
}
