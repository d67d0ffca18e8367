//! Closed-loop rollouts, result tables and trace export.
//!
//! A rollout over a sequence of `T` frames runs `teacher + closed - 1` steps.
//! Step `k` consumes one frame and predicts frame `k + 1`. The input is the
//! true frame `k` while `k < teacher`; afterwards it is the predictor's own
//! previous output. Predictions of frames `teacher..teacher + closed` form the
//! closed-loop window that the test error averages over.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{baseline_predict, BaselineKind};
use crate::error::{Error, Result};
use crate::field::Field;
use crate::mesh::MeshTopology;
use crate::model::{Distana, Lattice, LatticeState};
use crate::tensor::Tensor;
use crate::training::grid_topology_for;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProtocol {
    pub teacher_steps: usize,
    pub closed_steps: usize,
}

impl Default for EvalProtocol {
    fn default() -> Self {
        Self {
            teacher_steps: 15,
            closed_steps: 65,
        }
    }
}

impl EvalProtocol {
    /// Number of prediction steps.
    pub fn steps(&self) -> usize {
        self.teacher_steps + self.closed_steps - 1
    }

    pub fn check(&self, seq_len: usize) -> Result<()> {
        if self.teacher_steps == 0 {
            return Err(Error::Config("at least one teacher-forced step is required".into()));
        }
        if self.teacher_steps + self.closed_steps < 2 {
            return Err(Error::Config("protocol makes no predictions".into()));
        }
        if self.teacher_steps + self.closed_steps > seq_len {
            return Err(Error::Config(format!(
                "teacher {} + closed {} exceeds sequence length {seq_len}",
                self.teacher_steps, self.closed_steps
            )));
        }
        Ok(())
    }
}

/// Anything that maps the current frame to a prediction of the next one.
pub trait Predictor {
    /// Clears recurrent state before a new sequence.
    fn reset(&mut self);
    fn predict(&mut self, frame: &[f64]) -> Result<Vec<f64>>;
}

impl Predictor for BaselineKind {
    fn reset(&mut self) {}

    fn predict(&mut self, frame: &[f64]) -> Result<Vec<f64>> {
        Ok(baseline_predict(*self, frame))
    }
}

/// A DISTANA lattice driven one frame at a time.
pub struct DistanaPredictor<'m> {
    model: &'m Distana,
    lattice: Lattice,
    state: LatticeState,
}

impl<'m> DistanaPredictor<'m> {
    pub fn new(model: &'m Distana, topology: Arc<MeshTopology>) -> Result<Self> {
        let lattice = Lattice::new(model.config(), topology)?;
        Ok(Self::with_lattice(model, lattice))
    }

    pub fn with_lattice(model: &'m Distana, lattice: Lattice) -> Self {
        let state = lattice.zero_state();
        Self { model, lattice, state }
    }
}

impl Predictor for DistanaPredictor<'_> {
    fn reset(&mut self) {
        self.state.reset();
    }

    fn predict(&mut self, frame: &[f64]) -> Result<Vec<f64>> {
        let input = Tensor::new(vec![frame.len(), 1], frame.to_vec())?;
        let (out, next) = self.model.step(&self.lattice, &input, &self.state)?;
        self.state = next;
        Ok(out.into_data())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Rollout {
    /// Frame `k` holds the prediction of sequence frame `k + 1`.
    pub predictions: Field,
    /// MSE of each prediction against the true next frame.
    pub step_mse: Vec<f64>,
    pub protocol: EvalProtocol,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl Rollout {
    /// Mean one-step error over the teacher-forced phase, if it made any predictions.
    pub fn teacher_mse(&self) -> Option<f64> {
        let n = self.protocol.teacher_steps - 1;
        (n > 0).then(|| mean(&self.step_mse[..n]))
    }

    pub fn closed_mse(&self) -> Option<f64> {
        (self.protocol.closed_steps > 0).then(|| mean(&self.step_mse[self.protocol.teacher_steps - 1..]))
    }

    /// The closed-loop error, or the teacher-forced error when there is no closed loop.
    pub fn test_error(&self) -> f64 {
        self.closed_mse().unwrap_or_else(|| mean(&self.step_mse))
    }
}

fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn run(predictor: &mut dyn Predictor, seq: &Field, protocol: EvalProtocol, feed_back: bool) -> Result<Rollout> {
    protocol.check(seq.steps())?;
    predictor.reset();
    let n = protocol.steps();
    let mut frames = Vec::with_capacity(n);
    let mut step_mse = Vec::with_capacity(n);
    let mut prev: Option<Vec<f64>> = None;
    for k in 0..n {
        let pred = match prev.as_deref() {
            Some(p) if feed_back && k >= protocol.teacher_steps => predictor.predict(p)?,
            _ => predictor.predict(seq.frame(k))?,
        };
        if pred.len() != seq.cells() {
            return Err(Error::shape(
                "rollout",
                format!("predictor returned {} values for {} cells", pred.len(), seq.cells()),
            ));
        }
        step_mse.push(mse(&pred, seq.frame(k + 1)));
        frames.push(pred.clone());
        prev = Some(pred);
    }
    Ok(Rollout {
        predictions: Field::from_frames(seq.height(), seq.width(), &frames)?,
        step_mse,
        protocol,
    })
}

/// Teacher forcing followed by closed-loop feedback of the predictor's own output.
pub fn rollout(predictor: &mut dyn Predictor, seq: &Field, protocol: EvalProtocol) -> Result<Rollout> {
    run(predictor, seq, protocol, true)
}

/// Every step consumes the true frame; errors are scored over the same
/// windows as [`rollout`]. This is how the reference baselines are scored.
pub fn reference_rollout(predictor: &mut dyn Predictor, seq: &Field, protocol: EvalProtocol) -> Result<Rollout> {
    run(predictor, seq, protocol, false)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub model: String,
    pub params: Option<usize>,
    pub train_error: Option<f64>,
    pub test_error: f64,
    /// Median wall-clock seconds for one closed-loop rollout.
    pub inference_seconds: Option<f64>,
}

pub enum SuiteEntry {
    Baseline(BaselineKind),
    Model {
        name: String,
        model: Distana,
        train_error: Option<f64>,
    },
}

/// Mean test error per entry over all test sequences. Baselines are scored
/// with [`reference_rollout`], models with [`rollout`]. When `timing_runs > 0`
/// each model's rollout of the first test sequence is timed that many times
/// and the median is reported.
pub fn evaluate_suite(
    entries: &[SuiteEntry],
    test: &[Field],
    protocol: EvalProtocol,
    timing_runs: usize,
) -> Result<Vec<ResultRow>> {
    if test.is_empty() {
        return Err(Error::Config("test set is empty".into()));
    }
    for seq in test {
        protocol.check(seq.steps())?;
    }
    let topology = grid_topology_for(&test[0])?;
    if test.iter().any(|s| s.cells() != topology.cells() || (s.height(), s.width()) != (test[0].height(), test[0].width())) {
        return Err(Error::Config("test sequences differ in spatial shape".into()));
    }
    let mut rows = Vec::with_capacity(entries.len());
    for entry in entries {
        let row = match entry {
            SuiteEntry::Baseline(kind) => {
                let errors = test
                    .par_iter()
                    .map(|seq| reference_rollout(&mut kind.clone(), seq, protocol).map(|r| r.test_error()))
                    .collect::<Result<Vec<_>>>()?;
                ResultRow {
                    model: kind.label().to_string(),
                    params: None,
                    train_error: None,
                    test_error: mean(&errors),
                    inference_seconds: None,
                }
            }
            SuiteEntry::Model {
                name,
                model,
                train_error,
            } => {
                let lattice = Lattice::new(model.config(), topology.clone())?;
                let errors = test
                    .par_iter()
                    .map(|seq| {
                        let mut p = DistanaPredictor::with_lattice(model, lattice.clone());
                        rollout(&mut p, seq, protocol).map(|r| r.test_error())
                    })
                    .collect::<Result<Vec<_>>>()?;
                let inference_seconds = if timing_runs > 0 {
                    let mut p = DistanaPredictor::with_lattice(model, lattice.clone());
                    let mut times = Vec::with_capacity(timing_runs);
                    for _ in 0..timing_runs {
                        let start = Instant::now();
                        rollout(&mut p, &test[0], protocol)?;
                        times.push(start.elapsed().as_secs_f64());
                    }
                    times.sort_by(f64::total_cmp);
                    Some(times[times.len() / 2])
                } else {
                    None
                };
                ResultRow {
                    model: name.clone(),
                    params: Some(model.param_count()),
                    train_error: *train_error,
                    test_error: mean(&errors),
                    inference_seconds,
                }
            }
        };
        rows.push(row);
    }
    Ok(rows)
}

pub const TABLE_COLUMNS: [&str; 5] = ["model", "params", "train_error", "test_error", "inference_seconds"];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(|| "-".to_string(), |x| x.to_string())
}

/// CSV with the five [`TABLE_COLUMNS`]; missing values are written as `-`.
/// Floats use the shortest representation that round-trips.
pub fn table_csv(rows: &[ResultRow]) -> String {
    let mut out = TABLE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:e},{}",
            r.model.replace(',', ";"),
            opt(r.params),
            r.train_error.map_or("-".into(), |v| format!("{v:e}")),
            r.test_error,
            r.inference_seconds.map_or("-".into(), |v| format!("{v:e}")),
        );
    }
    out
}

/// Aligned plain-text rendering of the table.
pub fn table_text(rows: &[ResultRow]) -> String {
    let sci = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.3e}"));
    let cells: Vec<[String; 5]> = rows
        .iter()
        .map(|r| {
            [
                r.model.clone(),
                opt(r.params),
                sci(r.train_error),
                sci(Some(r.test_error)),
                r.inference_seconds.map_or("-".into(), |s| format!("{s:.4}s")),
            ]
        })
        .collect();
    let mut widths = TABLE_COLUMNS.map(str::len);
    for row in &cells {
        for (w, c) in widths.iter_mut().zip(row) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cols: &[&str]| {
        let parts: Vec<String> = cols
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| if i == 0 { format!("{c:<w$}") } else { format!("{c:>w$}") })
            .collect();
        out.push_str(parts.join("  ").trim_end());
        out.push('\n');
    };
    line(&TABLE_COLUMNS);
    for row in &cells {
        line(&row.iter().map(String::as_str).collect::<Vec<_>>());
    }
    out
}

/// Trace of one cell through a rollout: `step,target,prediction,regime`.
/// `step` is the index of the predicted frame.
pub fn export_traces(rollout: &Rollout, targets: &Field, cell: (usize, usize)) -> Result<String> {
    let (row, col) = cell;
    if row >= targets.height() || col >= targets.width() {
        return Err(Error::Config(format!(
            "cell ({row}, {col}) outside {}x{} field",
            targets.height(),
            targets.width()
        )));
    }
    let mut out = String::from("step,target,prediction,regime\n");
    for k in 0..rollout.predictions.steps() {
        let step = k + 1;
        let regime = if step < rollout.protocol.teacher_steps { "teacher" } else { "closed" };
        let _ = writeln!(
            out,
            "{step},{:e},{:e},{regime}",
            targets.value(step, row, col),
            rollout.predictions.value(k, row, col)
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Returns the true next frame of a known sequence.
    struct Oracle<'a> {
        seq: &'a Field,
        k: usize,
    }

    impl Predictor for Oracle<'_> {
        fn reset(&mut self) {
            self.k = 0;
        }
        fn predict(&mut self, _frame: &[f64]) -> Result<Vec<f64>> {
            self.k += 1;
            Ok(self.seq.frame(self.k).to_vec())
        }
    }

    fn ramp(steps: usize) -> Field {
        let frames: Vec<Vec<f64>> = (0..steps).map(|t| vec![t as f64, -(t as f64), 0.5, 1.0]).collect();
        Field::from_frames(2, 2, &frames).unwrap()
    }

    #[test]
    fn oracle_scores_zero() {
        let seq = ramp(20);
        let r = rollout(&mut Oracle { seq: &seq, k: 0 }, &seq, EvalProtocol { teacher_steps: 5, closed_steps: 15 }).unwrap();
        assert_eq!(r.test_error(), 0.0);
        assert_eq!(r.step_mse.len(), 19);
    }

    #[test]
    fn last_frame_holds_in_closed_loop() {
        let seq = ramp(20);
        let p = EvalProtocol { teacher_steps: 5, closed_steps: 15 };
        let r = rollout(&mut BaselineKind::LastFrame, &seq, p).unwrap();
        for k in 4..r.predictions.steps() {
            assert_eq!(r.predictions.frame(k), seq.frame(4));
        }
        let reference = reference_rollout(&mut BaselineKind::LastFrame, &seq, p).unwrap();
        // the ramp moves by one per frame in two of four cells
        assert!(reference.step_mse.iter().all(|&e| e == 0.5));
    }

    #[test]
    fn closed_window_and_boundaries() {
        let seq = ramp(20);
        let r = reference_rollout(&mut BaselineKind::Zero, &seq, EvalProtocol { teacher_steps: 5, closed_steps: 15 }).unwrap();
        let expected: f64 = (5..20).map(|t| (2.0 * (t * t) as f64 + 1.25) / 4.0).sum::<f64>() / 15.0;
        assert!((r.closed_mse().unwrap() - expected).abs() < 1e-12);
        let tf = reference_rollout(&mut BaselineKind::Zero, &seq, EvalProtocol { teacher_steps: 20, closed_steps: 0 }).unwrap();
        assert_eq!(tf.closed_mse(), None);
        assert_eq!(tf.test_error(), mean(&tf.step_mse));
        assert!(EvalProtocol { teacher_steps: 10, closed_steps: 11 }.check(20).is_err());
        assert!(EvalProtocol { teacher_steps: 0, closed_steps: 5 }.check(20).is_err());
    }

    #[test]
    fn traces() {
        let seq = ramp(80);
        let r = rollout(&mut BaselineKind::Zero, &seq, EvalProtocol::default()).unwrap();
        let csv = export_traces(&r, &seq, (0, 1)).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 80);
        assert_eq!(lines[14], "14,-1.4e1,0e0,teacher");
        assert_eq!(lines[15], "15,-1.5e1,0e0,closed");
        assert!(export_traces(&r, &seq, (2, 0)).is_err());
    }

    #[test]
    fn tables() {
        let rows = vec![
            ResultRow {
                model: "DISTANA4".into(),
                params: Some(107),
                train_error: Some(1.5e-5),
                test_error: 9.5e-6,
                inference_seconds: Some(0.0123),
            },
            ResultRow {
                model: "Baseline zero".into(),
                params: None,
                train_error: None,
                test_error: 8.88e-5,
                inference_seconds: None,
            },
        ];
        let csv = table_csv(&rows);
        assert_eq!(
            csv,
            "model,params,train_error,test_error,inference_seconds\nDISTANA4,107,1.5e-5,9.5e-6,1.23e-2\nBaseline zero,-,-,8.88e-5,-\n"
        );
        let text = table_text(&rows);
        assert_eq!(text.lines().count(), 3);
        assert!(text.contains("8.880e-5"));
    }
}
