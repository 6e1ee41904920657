//! Traffic-light schedules: switching-duration vectors, the binary signals
//! they encode, box projection and junction feasibility.

use crate::error::{Error, Result};

/// A right-continuous piecewise-constant function on `[0, horizon]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    starts: Vec<f64>,
    values: Vec<f64>,
    horizon: f64,
}

impl Signal {
    pub fn constant(value: f64, horizon: f64) -> Self {
        Signal {
            starts: vec![0.0],
            values: vec![value],
            horizon,
        }
    }

    /// Pieces `[starts[i], starts[i+1])`; `starts[0]` must be 0 and the
    /// sequence strictly increasing below `horizon`.
    pub fn from_pieces(starts: Vec<f64>, values: Vec<f64>, horizon: f64) -> Result<Self> {
        if starts.is_empty() || starts.len() != values.len() {
            return Err(Error::Shape("signal needs one value per piece".into()));
        }
        if starts[0] != 0.0 {
            return Err(Error::validation("signal.starts[0]", "first piece must start at 0"));
        }
        if starts.windows(2).any(|w| w[1] <= w[0]) || *starts.last().unwrap() >= horizon {
            return Err(Error::validation(
                "signal.starts",
                "piece starts must increase strictly and stay below the horizon",
            ));
        }
        Ok(Signal {
            starts,
            values,
            horizon,
        })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn starts(&self) -> &[f64] {
        &self.starts
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Interior discontinuity times.
    pub fn switch_times(&self) -> &[f64] {
        &self.starts[1..]
    }

    fn piece_end(&self, i: usize) -> f64 {
        self.starts.get(i + 1).copied().unwrap_or(self.horizon)
    }

    /// Value at `t`, taking the right piece at a breakpoint.
    pub fn value(&self, t: f64) -> f64 {
        let i = self.starts.partition_point(|&s| s <= t).saturating_sub(1);
        self.values[i]
    }

    /// Exact mean of the signal over `[a, b]`.
    pub fn average(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return self.value(a);
        }
        let mut acc = 0.0;
        for (i, &v) in self.values.iter().enumerate() {
            let lo = self.starts[i].max(a);
            let hi = self.piece_end(i).min(b);
            if hi > lo {
                acc += v * (hi - lo);
            }
        }
        acc / (b - a)
    }

    /// `1 - u`.
    pub fn complement(&self) -> Signal {
        Signal {
            starts: self.starts.clone(),
            values: self.values.iter().map(|v| 1.0 - v).collect(),
            horizon: self.horizon,
        }
    }

    /// Lengths of the constant pieces.
    pub fn durations(&self) -> Vec<f64> {
        (0..self.values.len())
            .map(|i| self.piece_end(i) - self.starts[i])
            .collect()
    }
}

/// Box constraints on switching durations: `green_min <= s_i <= red_max`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DurationBox {
    pub green_min: f64,
    pub red_max: f64,
}

impl DurationBox {
    pub fn new(green_min: f64, red_max: f64) -> Result<Self> {
        if !(green_min > 0.0 && green_min < red_max) {
            return Err(Error::validation(
                "schedule.bounds",
                format!("need 0 < T_G < T_R, got T_G = {green_min}, T_R = {red_max}"),
            ));
        }
        Ok(DurationBox { green_min, red_max })
    }

    pub fn contains(&self, s: f64) -> bool {
        s >= self.green_min && s <= self.red_max
    }
}

/// Initial light state (1 = red, 0 = green) plus the durations between
/// successive switches.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchSchedule {
    pub u0: u8,
    pub durations: Vec<f64>,
    pub bounds: Option<DurationBox>,
}

impl SwitchSchedule {
    pub fn new(u0: u8, durations: Vec<f64>) -> Self {
        SwitchSchedule {
            u0,
            durations,
            bounds: None,
        }
    }

    pub fn with_bounds(mut self, bounds: DurationBox) -> Self {
        self.bounds = Some(bounds);
        self
    }

    /// Cumulative sums `tau_i = s_1 + ... + s_i`.
    pub fn switching_times(&self) -> Vec<f64> {
        self.durations
            .iter()
            .scan(0.0, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect()
    }

    /// State on the i-th piece, `u_i = 1 - u_{i-1}`.
    pub fn state(&self, i: usize) -> u8 {
        if i.is_multiple_of(2) {
            self.u0
        } else {
            1 - self.u0
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.u0 > 1 {
            return Err(Error::validation("schedule.u0", "initial state must be 0 or 1"));
        }
        if self.durations.is_empty() {
            return Err(Error::validation("schedule.durations", "at least one duration is required"));
        }
        for (i, &s) in self.durations.iter().enumerate() {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::validation(
                    format!("schedule.durations[{i}]"),
                    format!("durations must be positive, got {s}"),
                ));
            }
        }
        Ok(())
    }

    /// Checks the asymmetric phase rule: red phases shorter than `T_R`, green
    /// phases longer than `T_G`. Only pieces that end before `horizon` are
    /// checked.
    pub fn check_phase_limits(&self, horizon: f64) -> Result<()> {
        let Some(b) = self.bounds else {
            return Ok(());
        };
        let taus = self.switching_times();
        for (i, &s) in self.durations.iter().enumerate() {
            if taus[i] >= horizon {
                break;
            }
            let red = self.state(i) == 1;
            if (red && s >= b.red_max) || (!red && s <= b.green_min) {
                let start = taus[i] - s;
                return Err(Error::SignalConflict {
                    start,
                    end: taus[i],
                    message: format!(
                        "{} phase of length {s} violates {}",
                        if red { "red" } else { "green" },
                        if red { "s < T_R" } else { "s > T_G" }
                    ),
                });
            }
        }
        Ok(())
    }
}

/// Rebuilds `u^s(t) = sum_i u_i chi_[tau_i, tau_{i+1})(t)` on `[0, horizon]`.
///
/// The schedule has `S` pieces and `S - 1` switches; the final piece is
/// extended to the horizon and switches at or beyond the horizon are dropped.
pub fn reconstruct_control(sched: &SwitchSchedule, horizon: f64) -> Result<Signal> {
    sched.validate()?;
    if !(horizon > 0.0) {
        return Err(Error::validation("horizon", "must be positive"));
    }
    let taus = sched.switching_times();
    let mut starts = vec![0.0];
    let mut values = vec![f64::from(sched.u0)];
    for (i, &tau) in taus.iter().enumerate().take(taus.len() - 1) {
        if tau >= horizon {
            break;
        }
        starts.push(tau);
        values.push(f64::from(sched.state(i + 1)));
    }
    Signal::from_pieces(starts, values, horizon)
}

/// Component-wise clamp onto `[T_G, T_R]`.
pub fn project_durations(s: &[f64], green_min: f64, red_max: f64) -> Result<Vec<f64>> {
    if !(green_min < red_max) {
        return Err(Error::validation(
            "bounds",
            format!("T_G = {green_min} must be below T_R = {red_max}"),
        ));
    }
    Ok(s.iter().map(|&x| x.min(red_max).max(green_min)).collect())
}

/// Verifies that exactly one of the `N` incoming lights is green at every
/// time (`sum_j u_j + 1 = N`).
pub fn junction_signal_complement(signals: &[Signal]) -> Result<()> {
    let n = signals.len();
    if n < 2 {
        return Ok(());
    }
    let horizon = signals[0].horizon();
    if signals.iter().any(|s| s.horizon() != horizon) {
        return Err(Error::Shape("junction signals must share one horizon".into()));
    }
    let mut cuts: Vec<f64> = signals.iter().flat_map(|s| s.starts().iter().copied()).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup();
    cuts.push(horizon);
    for w in cuts.windows(2) {
        let (start, end) = (w[0], w[1]);
        let reds: f64 = signals.iter().map(|s| s.value(start)).sum();
        if (reds + 1.0 - n as f64).abs() > 1e-12 {
            return Err(Error::SignalConflict {
                start,
                end,
                message: format!("{} of {n} approaches are green", n as f64 - reds),
            });
        }
    }
    Ok(())
}

/// Signals for the lighted approaches of one junction driven by one
/// schedule: a single approach follows `u^s`, two approaches alternate.
pub fn junction_signals(sched: &SwitchSchedule, approaches: usize, horizon: f64) -> Result<Vec<Signal>> {
    let u = reconstruct_control(sched, horizon)?;
    match approaches {
        1 => Ok(vec![u]),
        2 => {
            let other = u.complement();
            let signals = vec![u, other];
            junction_signal_complement(&signals)?;
            Ok(signals)
        }
        n => Err(Error::Unsupported(format!(
            "a single switching schedule drives one or two approaches, not {n}; give per-approach schedules"
        ))),
    }
}
