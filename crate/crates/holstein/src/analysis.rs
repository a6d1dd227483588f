//! Verification and climate analysis: staggered order parameters, pooled
//! autocorrelation functions, steppers that advance states on the
//! prediction grid (learned or exact), climate comparison reports, and
//! lossless trace export.
//!
//! Long-horizon surrogate rollouts are not judged pointwise — trajectories
//! decorrelate — but by their *climate*: do the order-parameter fluctuation
//! statistics of model rollouts match those of the reference dynamics?  The
//! comparison statistic is the pooled autocorrelation function of the
//! staggered order parameters over an ensemble of held-out trajectories.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;
use crate::dynamics::{DynamicsError, LatticeState, PhysicsParams, Rk4};
use crate::model::{Model, ModelError};
use crate::tensor::{Scalar, TensorError};

/// Errors from analysis routines.
#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("series has zero pooled variance; autocorrelation is undefined")]
    DegenerateSeries,
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("stepper produced a non-finite state")]
    Divergent,
    #[error("every trajectory diverged before the rollout horizon")]
    AllTrajectoriesDivergent,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("malformed trace file: {0}")]
    Parse(String),
}

/// Staggered charge order parameter: `(1/L) sum_i Re(rho_ii) (-1)^i`.
///
/// Linear in the state, so any uniform background cancels and a perfect
/// alternating pattern `rho_ii = n0 + c (-1)^i` returns exactly `c`.
pub fn order_param_rho(state: &LatticeState) -> f64 {
    let l = state.l();
    let mut acc = 0.0;
    for i in 0..l {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc += state.rho[[i, i]].re * sign;
    }
    acc / l as f64
}

/// Staggered lattice order parameter: `(1/L) sum_i Q_i (-1)^i`.
pub fn order_param_q(state: &LatticeState) -> f64 {
    let l = state.l();
    let mut acc = 0.0;
    for i in 0..l {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        acc += state.q[i] * sign;
    }
    acc / l as f64
}

/// Pooled biased autocorrelation of an ensemble of series.
///
/// All samples share one pooled mean `mu`; lag `tau` pools the products
/// `(x_k(t) - mu)(x_k(t + tau) - mu)` over every trajectory `k`, normalized
/// by the pooled variance sum, so `A(0) = 1` exactly and the estimate is
/// invariant under a common affine map of the data.  This is the biased
/// estimator: no per-lag count correction, which trades a `~tau/T` shrinkage
/// for monotonically decreasing variance — the standard choice for climate
/// statistics.
///
/// Every series must be longer than `max_lag` so all trajectories
/// contribute at every lag.
pub fn autocorrelation(series: &[Vec<f64>], max_lag: usize) -> Result<Vec<f64>, AnalysisError> {
    if series.is_empty() {
        return Err(AnalysisError::InvalidArgument(
            "autocorrelation of an empty ensemble".into(),
        ));
    }
    let mut count = 0usize;
    for s in series {
        if s.len() <= max_lag {
            return Err(AnalysisError::InvalidArgument(format!(
                "series of length {} cannot support lag {max_lag}",
                s.len()
            )));
        }
        count += s.len();
    }
    let mean: f64 = series.iter().flatten().sum::<f64>() / count as f64;
    let denom: f64 = series
        .iter()
        .flatten()
        .map(|&x| (x - mean) * (x - mean))
        .sum();
    if denom == 0.0 || !denom.is_finite() {
        return Err(AnalysisError::DegenerateSeries);
    }
    let mut acf = Vec::with_capacity(max_lag + 1);
    for tau in 0..=max_lag {
        if tau == 0 {
            // Numerator and denominator are the same sum; pin the exact 1.
            acf.push(1.0);
            continue;
        }
        let mut num = 0.0;
        for s in series {
            for t in 0..s.len() - tau {
                num += (s[t] - mean) * (s[t + tau] - mean);
            }
        }
        acf.push(num / denom);
    }
    Ok(acf)
}

/// Anything that advances a state by one prediction interval.
///
/// The two implementations are the learned surrogate and the exact
/// integrator run at the same stride; the latter turns every analysis
/// routine into its own oracle.
pub trait Stepper {
    /// Human-readable label for reports.
    fn label(&self) -> String;
    /// Advance by one prediction interval.  [`AnalysisError::Divergent`]
    /// marks a non-finite prediction, which ensemble analyses treat as an
    /// exclusion rather than a failure.
    fn step(&mut self, state: &LatticeState) -> Result<LatticeState, AnalysisError>;
}

/// Exact reference dynamics on the prediction grid: `stride` RK4 steps of
/// size `dt` per call.
///
/// Snapshot times are rederived from the integer step index (`round(t/dt)`
/// plus the stride), matching how datasets stamp their states, so stepping
/// from a stored snapshot reproduces the next stored snapshot bitwise.
pub struct ExactStepper {
    rk4: Rk4,
    dt: f64,
    stride: usize,
    n_electrons: usize,
}

impl ExactStepper {
    pub fn new(
        params: PhysicsParams,
        dt: f64,
        stride: usize,
        n_electrons: usize,
    ) -> Result<Self, AnalysisError> {
        if !(dt.is_finite() && dt > 0.0) || stride == 0 {
            return Err(AnalysisError::InvalidArgument(format!(
                "dt = {dt}, stride = {stride}"
            )));
        }
        Ok(Self {
            rk4: Rk4::new(params, dt),
            dt,
            stride,
            n_electrons,
        })
    }

    /// The reference stepper matching a dataset's generation protocol.
    pub fn from_dataset(dataset: &Dataset) -> Result<Self, AnalysisError> {
        let params = dataset.physics_params()?;
        Self::new(
            params,
            dataset.protocol.dt_integration,
            dataset.protocol.prediction_stride,
            dataset.l / 2,
        )
    }
}

impl Stepper for ExactStepper {
    fn label(&self) -> String {
        format!("exact-rk4(dt={}, stride={})", self.dt, self.stride)
    }

    fn step(&mut self, state: &LatticeState) -> Result<LatticeState, AnalysisError> {
        let base_step = (state.time / self.dt).round() as u64;
        let mut next = state.clone();
        for _ in 0..self.stride {
            self.rk4.step(&mut next);
        }
        next.time = (base_step + self.stride as u64) as f64 * self.dt;
        crate::dynamics::check_integrity(&next, self.n_electrons as f64, base_step as usize)?;
        Ok(next)
    }
}

/// A trained surrogate on the prediction grid.
pub struct ModelStepper<'a, S: Scalar> {
    model: &'a Model<S>,
    dt_prediction: f64,
}

impl<'a, S: Scalar> ModelStepper<'a, S> {
    pub fn new(model: &'a Model<S>, dt_prediction: f64) -> Self {
        Self {
            model,
            dt_prediction,
        }
    }
}

impl<S: Scalar> Stepper for ModelStepper<'_, S> {
    fn label(&self) -> String {
        format!("{}-surrogate", self.model.config().variant)
    }

    fn step(&mut self, state: &LatticeState) -> Result<LatticeState, AnalysisError> {
        match self.model.predict_step(state, self.dt_prediction) {
            Ok(next) => Ok(next),
            Err(ModelError::Tensor(TensorError::NonFinite { .. }))
            | Err(ModelError::Divergence { .. }) => Err(AnalysisError::Divergent),
            Err(e) => Err(e.into()),
        }
    }
}

/// Climate comparison between a stepper's rollouts and reference
/// trajectories: pooled autocorrelation functions of both staggered order
/// parameters, and their maximum absolute deviation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClimateReport {
    /// The stepper that produced the rollouts.
    pub label: String,
    /// Trajectories entering the pooled statistics.
    pub n_trajectories: usize,
    /// Trajectories excluded because the rollout diverged.
    pub n_divergent: usize,
    /// Rollout steps per trajectory.
    pub horizon: usize,
    pub max_lag: usize,
    pub acf_rho_truth: Vec<f64>,
    pub acf_rho_model: Vec<f64>,
    pub acf_q_truth: Vec<f64>,
    pub acf_q_model: Vec<f64>,
    /// `max_tau |acf_rho_truth - acf_rho_model|`.
    pub max_dev_rho: f64,
    /// `max_tau |acf_q_truth - acf_q_model|`.
    pub max_dev_q: f64,
}

impl ClimateReport {
    /// The worse of the two observables' deviations.
    pub fn max_dev(&self) -> f64 {
        self.max_dev_rho.max(self.max_dev_q)
    }
}

/// Roll the stepper from the start of every reference trajectory and compare
/// pooled order-parameter autocorrelations over `horizon` steps.
///
/// A trajectory whose rollout reports [`AnalysisError::Divergent`] is
/// excluded from both ensembles (keeping the comparison apples-to-apples)
/// and counted in `n_divergent`; any other stepper error aborts.  Every
/// reference trajectory must hold at least `horizon + 1` snapshots.
pub fn climate_report(
    stepper: &mut dyn Stepper,
    truth: &[&[LatticeState]],
    horizon: usize,
    max_lag: usize,
) -> Result<ClimateReport, AnalysisError> {
    if horizon == 0 || max_lag > horizon {
        return Err(AnalysisError::InvalidArgument(format!(
            "horizon = {horizon}, max_lag = {max_lag}"
        )));
    }
    if truth.is_empty() {
        return Err(AnalysisError::InvalidArgument(
            "climate comparison without reference trajectories".into(),
        ));
    }
    for t in truth {
        if t.len() < horizon + 1 {
            return Err(AnalysisError::InvalidArgument(format!(
                "reference trajectory has {} snapshots, horizon {horizon} needs {}",
                t.len(),
                horizon + 1
            )));
        }
    }

    let mut rollouts = Vec::with_capacity(truth.len());
    for t in truth {
        rollouts.push(order_param_rollout(stepper, t, horizon)?);
    }
    assemble_report(stepper.label(), truth, rollouts, horizon, max_lag)
}

/// [`climate_report`] with trajectory-level parallelism: `make_stepper`
/// builds one independent stepper per trajectory, so rollouts run
/// concurrently on the current rayon pool.  Trajectory results are pooled
/// in input order, making the report bitwise identical to the sequential
/// version at any thread count.
pub fn climate_report_par<St, F>(
    make_stepper: F,
    truth: &[&[LatticeState]],
    horizon: usize,
    max_lag: usize,
) -> Result<ClimateReport, AnalysisError>
where
    St: Stepper,
    F: Fn() -> Result<St, AnalysisError> + Sync,
{
    use rayon::prelude::*;
    if horizon == 0 || max_lag > horizon {
        return Err(AnalysisError::InvalidArgument(format!(
            "horizon = {horizon}, max_lag = {max_lag}"
        )));
    }
    if truth.is_empty() {
        return Err(AnalysisError::InvalidArgument(
            "climate comparison without reference trajectories".into(),
        ));
    }
    for t in truth {
        if t.len() < horizon + 1 {
            return Err(AnalysisError::InvalidArgument(format!(
                "reference trajectory has {} snapshots, horizon {horizon} needs {}",
                t.len(),
                horizon + 1
            )));
        }
    }
    let label = make_stepper()?.label();
    let rollouts: Vec<_> = truth
        .par_iter()
        .map(|t| order_param_rollout(&mut make_stepper()?, t, horizon))
        .collect::<Result<_, _>>()?;
    assemble_report(label, truth, rollouts, horizon, max_lag)
}

/// Order-parameter series of one stepper rollout; `None` marks divergence.
fn order_param_rollout(
    stepper: &mut dyn Stepper,
    trajectory: &[LatticeState],
    horizon: usize,
) -> Result<Option<(Vec<f64>, Vec<f64>)>, AnalysisError> {
    let mut state = trajectory[0].clone();
    let mut series_rho = Vec::with_capacity(horizon + 1);
    let mut series_q = Vec::with_capacity(horizon + 1);
    series_rho.push(order_param_rho(&state));
    series_q.push(order_param_q(&state));
    for _ in 0..horizon {
        state = match stepper.step(&state) {
            Ok(next) => next,
            Err(AnalysisError::Divergent) => return Ok(None),
            Err(e) => return Err(e),
        };
        series_rho.push(order_param_rho(&state));
        series_q.push(order_param_q(&state));
    }
    Ok(Some((series_rho, series_q)))
}

fn assemble_report(
    label: String,
    truth: &[&[LatticeState]],
    rollouts: Vec<Option<(Vec<f64>, Vec<f64>)>>,
    horizon: usize,
    max_lag: usize,
) -> Result<ClimateReport, AnalysisError> {
    let mut rho_truth = Vec::new();
    let mut rho_model = Vec::new();
    let mut q_truth = Vec::new();
    let mut q_model = Vec::new();
    let mut n_divergent = 0usize;
    for (t, rollout) in truth.iter().zip(rollouts) {
        match rollout {
            Some((series_rho, series_q)) => {
                rho_model.push(series_rho);
                q_model.push(series_q);
                rho_truth.push(t[..=horizon].iter().map(order_param_rho).collect());
                q_truth.push(t[..=horizon].iter().map(order_param_q).collect());
            }
            None => n_divergent += 1,
        }
    }
    if rho_model.is_empty() {
        return Err(AnalysisError::AllTrajectoriesDivergent);
    }

    let acf_rho_truth = autocorrelation(&rho_truth, max_lag)?;
    let acf_rho_model = autocorrelation(&rho_model, max_lag)?;
    let acf_q_truth = autocorrelation(&q_truth, max_lag)?;
    let acf_q_model = autocorrelation(&q_model, max_lag)?;
    let max_abs_dev = |a: &[f64], b: &[f64]| {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    };
    Ok(ClimateReport {
        label,
        n_trajectories: rho_model.len(),
        n_divergent,
        horizon,
        max_lag,
        max_dev_rho: max_abs_dev(&acf_rho_truth, &acf_rho_model),
        max_dev_q: max_abs_dev(&acf_q_truth, &acf_q_model),
        acf_rho_truth,
        acf_rho_model,
        acf_q_truth,
        acf_q_model,
    })
}

/// One named time series for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trace {
    pub name: String,
    pub values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TraceFile {
    times: Vec<f64>,
    traces: Vec<Trace>,
}

fn validate_traces(times: &[f64], traces: &[Trace]) -> Result<(), AnalysisError> {
    for trace in traces {
        if trace.values.len() != times.len() {
            return Err(AnalysisError::InvalidArgument(format!(
                "trace '{}' has {} values for {} times",
                trace.name,
                trace.values.len(),
                times.len()
            )));
        }
        if trace.name.is_empty() || trace.name.contains([',', '\n', '\r', '"']) {
            return Err(AnalysisError::InvalidArgument(format!(
                "trace name {:?} is not a plain column name",
                trace.name
            )));
        }
        if trace.values.iter().any(|v| !v.is_finite()) {
            return Err(AnalysisError::InvalidArgument(format!(
                "trace '{}' holds non-finite values",
                trace.name
            )));
        }
    }
    if times.iter().any(|v| !v.is_finite()) {
        return Err(AnalysisError::InvalidArgument(
            "non-finite timestamps".into(),
        ));
    }
    let mut names: Vec<&str> = traces.iter().map(|t| t.name.as_str()).collect();
    names.sort_unstable();
    names.dedup();
    if names.len() != traces.len() {
        return Err(AnalysisError::InvalidArgument(
            "duplicate trace names".into(),
        ));
    }
    Ok(())
}

/// Write traces as CSV: header `time,<name>,...`, one row per sample.
/// Values print in shortest-round-trip form, so [`import_traces_csv`]
/// recovers them bit for bit.
pub fn export_traces_csv(
    path: &Path,
    times: &[f64],
    traces: &[Trace],
) -> Result<(), AnalysisError> {
    validate_traces(times, traces)?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(out, "time")?;
    for trace in traces {
        write!(out, ",{}", trace.name)?;
    }
    writeln!(out)?;
    for (i, t) in times.iter().enumerate() {
        write!(out, "{t}")?;
        for trace in traces {
            write!(out, ",{}", trace.values[i])?;
        }
        writeln!(out)?;
    }
    out.flush()?;
    Ok(())
}

/// Read back a CSV written by [`export_traces_csv`].
pub fn import_traces_csv(path: &Path) -> Result<(Vec<f64>, Vec<Trace>), AnalysisError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| AnalysisError::Parse("empty file".into()))??;
    let mut columns = header.split(',');
    if columns.next() != Some("time") {
        return Err(AnalysisError::Parse(format!(
            "header must start with 'time': {header:?}"
        )));
    }
    let mut times = Vec::new();
    let mut traces: Vec<Trace> = columns
        .map(|name| Trace {
            name: name.to_string(),
            values: Vec::new(),
        })
        .collect();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        let mut fields = line.split(',');
        let parse = |field: Option<&str>| -> Result<f64, AnalysisError> {
            field
                .ok_or_else(|| AnalysisError::Parse(format!("row {} is short", lineno + 2)))?
                .parse::<f64>()
                .map_err(|e| AnalysisError::Parse(format!("row {}: {e}", lineno + 2)))
        };
        times.push(parse(fields.next())?);
        for trace in &mut traces {
            trace.values.push(parse(fields.next())?);
        }
        if fields.next().is_some() {
            return Err(AnalysisError::Parse(format!("row {} is long", lineno + 2)));
        }
    }
    Ok((times, traces))
}

/// Write traces as JSON (`{"times": [...], "traces": [{"name", "values"}]}`).
/// Finite `f64` values survive the JSON round trip exactly.
pub fn export_traces_json(
    path: &Path,
    times: &[f64],
    traces: &[Trace],
) -> Result<(), AnalysisError> {
    validate_traces(times, traces)?;
    let file = TraceFile {
        times: times.to_vec(),
        traces: traces.to_vec(),
    };
    let out = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(out, &file)?;
    Ok(())
}

/// Read back a JSON file written by [`export_traces_json`].
pub fn import_traces_json(path: &Path) -> Result<(Vec<f64>, Vec<Trace>), AnalysisError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let parsed: TraceFile = serde_json::from_reader(file)?;
    Ok((parsed.times, parsed.traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_shallow_dataset, QuenchProtocol};
    use ndarray::{Array1, Array2};
    use num_complex::Complex64;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    fn synthetic_state(l: usize, n0: f64, c: f64, a: f64, b: f64) -> LatticeState {
        let mut rho = Array2::<Complex64>::zeros((l, l));
        let mut q = Array1::<f64>::zeros(l);
        for i in 0..l {
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            rho[[i, i]] = Complex64::new(n0 + c * sign, 0.0);
            q[i] = b + a * sign;
        }
        LatticeState {
            q,
            p: Array1::zeros(l),
            rho,
            time: 0.0,
        }
    }

    #[test]
    fn order_parameters_extract_staggered_amplitudes() {
        let state = synthetic_state(8, 0.5, 0.125, 0.75, -2.0);
        // Uniform parts cancel exactly for even L.
        assert!((order_param_rho(&state) - 0.125).abs() < 1e-15);
        assert!((order_param_q(&state) - 0.75).abs() < 1e-15);

        let uniform = synthetic_state(8, 0.5, 0.0, 0.0, 3.0);
        assert_eq!(order_param_rho(&uniform), 0.0);
        assert_eq!(order_param_q(&uniform), 0.0);
    }

    #[test]
    fn autocorrelation_is_one_at_lag_zero() {
        let series = vec![vec![0.3, -1.2, 2.5, 0.0, 0.7], vec![1.0, -0.5, 0.25]];
        let acf = autocorrelation(&series, 2).unwrap();
        assert_eq!(acf[0], 1.0);
        assert_eq!(acf.len(), 3);
    }

    #[test]
    fn autocorrelation_of_iid_noise_is_small() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let series: Vec<Vec<f64>> = (0..8)
            .map(|_| (0..512).map(|_| normal.sample(&mut rng)).collect())
            .collect();
        let acf = autocorrelation(&series, 32).unwrap();
        for (tau, &a) in acf.iter().enumerate().skip(1) {
            assert!(a.abs() < 0.05, "A({tau}) = {a}");
        }
    }

    #[test]
    fn autocorrelation_recovers_cosine() {
        let omega = 0.3;
        let t_len = 4096;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let series: Vec<Vec<f64>> = (0..8)
            .map(|_| {
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                (0..t_len).map(|t| (omega * t as f64 + phase).cos()).collect()
            })
            .collect();
        let acf = autocorrelation(&series, 50).unwrap();
        for (tau, &a) in acf.iter().enumerate() {
            let expect = (omega * tau as f64).cos();
            assert!(
                (a - expect).abs() < 0.02,
                "A({tau}) = {a}, cos = {expect}"
            );
        }
    }

    #[test]
    fn autocorrelation_is_affine_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let series: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..200).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let mapped: Vec<Vec<f64>> = series
            .iter()
            .map(|s| s.iter().map(|&x| 3.0 * x - 7.0).collect())
            .collect();
        let a = autocorrelation(&series, 20).unwrap();
        let b = autocorrelation(&mapped, 20).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12, "{x} vs {y}");
        }
    }

    #[test]
    fn autocorrelation_rejects_degenerate_input() {
        let constant = vec![vec![2.5; 50]];
        assert!(matches!(
            autocorrelation(&constant, 5),
            Err(AnalysisError::DegenerateSeries)
        ));
        assert!(matches!(
            autocorrelation(&[], 5),
            Err(AnalysisError::InvalidArgument(_))
        ));
        // Series shorter than the lag are refused.
        assert!(matches!(
            autocorrelation(&[vec![1.0, 2.0]], 5),
            Err(AnalysisError::InvalidArgument(_))
        ));
    }

    fn tiny_dataset() -> Dataset {
        let protocol = QuenchProtocol {
            g_initial: 0.5,
            g_final: 0.8,
            dt_integration: 0.01,
            prediction_stride: 8,
            n_prediction_steps: 12,
            n_trajectories: 3,
            transient_skip: 0.0,
            q_noise_sigma: 0.0,
            record_midpoints: false,
            seed: 42,
        };
        generate_shallow_dataset(8, &protocol).unwrap()
    }

    fn assert_states_bitwise(a: &LatticeState, b: &LatticeState) {
        assert_eq!(a.time.to_bits(), b.time.to_bits(), "time");
        for i in 0..a.l() {
            assert_eq!(a.q[i].to_bits(), b.q[i].to_bits(), "q[{i}]");
            assert_eq!(a.p[i].to_bits(), b.p[i].to_bits(), "p[{i}]");
            for j in 0..a.l() {
                let (x, y) = (a.rho[[i, j]], b.rho[[i, j]]);
                assert_eq!(x.re.to_bits(), y.re.to_bits(), "rho[{i},{j}].re");
                assert_eq!(x.im.to_bits(), y.im.to_bits(), "rho[{i},{j}].im");
            }
        }
    }

    #[test]
    fn exact_stepper_reproduces_stored_snapshots_bitwise() {
        let dataset = tiny_dataset();
        let mut stepper = ExactStepper::from_dataset(&dataset).unwrap();
        // Trajectory 1 starts at a nonzero offset, exercising the
        // integer-step time reconstruction.
        let snaps = &dataset.trajectories[1].snapshots;
        let mut state = snaps[0].clone();
        for expected in &snaps[1..5] {
            state = stepper.step(&state).unwrap();
            assert_states_bitwise(&state, expected);
        }
    }

    #[test]
    fn model_stepper_reports_divergence() {
        let dataset = tiny_dataset();
        let scaling = crate::datagen::compute_scaling_coefficients(&dataset).unwrap();
        let mut config = crate::model::ModelConfig::standard(dataset.l);
        config.hidden_channels = 6;
        config.n_blocks = 1;
        let mut model: Model<f32> = Model::new(config, scaling, 1).unwrap();

        let dt = dataset.protocol.dt_prediction();
        let initial = &dataset.trajectories[0].snapshots[0];
        {
            let mut stepper = ModelStepper::new(&model, dt);
            let direct = model.predict_step(initial, dt).unwrap();
            let via_trait = stepper.step(initial).unwrap();
            assert_states_bitwise(&direct, &via_trait);
        }

        // Poison a weight: the step must surface as Divergent, not panic.
        let slot = model.params().slot_of("head.bias").unwrap();
        model.params_mut().entry_mut(slot).value.data_mut()[0] = f32::INFINITY;
        let mut stepper = ModelStepper::new(&model, dt);
        assert!(matches!(stepper.step(initial), Err(AnalysisError::Divergent)));
    }

    #[test]
    fn exact_stepper_climate_deviation_is_zero() {
        let dataset = tiny_dataset();
        let truth: Vec<&[LatticeState]> = dataset
            .trajectories
            .iter()
            .map(|t| t.snapshots.as_slice())
            .collect();
        let mut stepper = ExactStepper::from_dataset(&dataset).unwrap();
        let report = climate_report(&mut stepper, &truth, 10, 5).unwrap();
        assert_eq!(report.n_trajectories, 3);
        assert_eq!(report.n_divergent, 0);
        assert_eq!(report.max_dev_rho, 0.0);
        assert_eq!(report.max_dev_q, 0.0);
        assert_eq!(report.acf_rho_truth[0], 1.0);
        assert_eq!(report.acf_rho_truth, report.acf_rho_model);
        assert_eq!(report.acf_q_truth, report.acf_q_model);
    }

    /// Delegates to the exact dynamics but pretends one trajectory diverges.
    struct FlakyStepper {
        inner: ExactStepper,
        poison_time: f64,
    }

    impl Stepper for FlakyStepper {
        fn label(&self) -> String {
            "flaky".into()
        }
        fn step(&mut self, state: &LatticeState) -> Result<LatticeState, AnalysisError> {
            if state.time == self.poison_time {
                return Err(AnalysisError::Divergent);
            }
            self.inner.step(state)
        }
    }

    #[test]
    fn climate_report_excludes_divergent_trajectories() {
        let dataset = tiny_dataset();
        let truth: Vec<&[LatticeState]> = dataset
            .trajectories
            .iter()
            .map(|t| t.snapshots.as_slice())
            .collect();
        let mut stepper = FlakyStepper {
            inner: ExactStepper::from_dataset(&dataset).unwrap(),
            poison_time: truth[2][3].time,
        };
        let report = climate_report(&mut stepper, &truth, 10, 5).unwrap();
        assert_eq!(report.n_divergent, 1);
        assert_eq!(report.n_trajectories, 2);
        // Survivors are exact, so the climates still agree exactly.
        assert_eq!(report.max_dev(), 0.0);

        struct AlwaysDiverges;
        impl Stepper for AlwaysDiverges {
            fn label(&self) -> String {
                "broken".into()
            }
            fn step(&mut self, _: &LatticeState) -> Result<LatticeState, AnalysisError> {
                Err(AnalysisError::Divergent)
            }
        }
        assert!(matches!(
            climate_report(&mut AlwaysDiverges, &truth, 10, 5),
            Err(AnalysisError::AllTrajectoriesDivergent)
        ));
    }

    #[test]
    fn parallel_climate_matches_sequential_bitwise() {
        let dataset = tiny_dataset();
        let truth: Vec<&[LatticeState]> = dataset
            .trajectories
            .iter()
            .map(|t| t.snapshots.as_slice())
            .collect();
        let mut sequential = ExactStepper::from_dataset(&dataset).unwrap();
        let a = climate_report(&mut sequential, &truth, 8, 4).unwrap();
        let b = climate_report_par(|| ExactStepper::from_dataset(&dataset), &truth, 8, 4).unwrap();
        assert_eq!(a.n_trajectories, b.n_trajectories);
        for (x, y) in a.acf_rho_model.iter().zip(&b.acf_rho_model) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in a.acf_q_model.iter().zip(&b.acf_q_model) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(a.label, b.label);
    }

    #[test]
    fn trace_exports_round_trip_bitwise() {
        let times = vec![0.0, 0.1, 0.2, 0.30000000000000004];
        let traces = vec![
            Trace {
                name: "delta_rho".into(),
                values: vec![1e-17, -3.25, 1.5 + 1e-13, 0.1 + 0.2],
            },
            Trace {
                name: "delta_q".into(),
                values: vec![0.0, -0.0, 2.5e-300, 7.0],
            },
        ];
        let dir = tempfile::tempdir().unwrap();

        let csv = dir.path().join("traces.csv");
        export_traces_csv(&csv, &times, &traces).unwrap();
        let (t2, tr2) = import_traces_csv(&csv).unwrap();
        for (a, b) in times.iter().zip(&t2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(tr2.len(), 2);
        for (ta, tb) in traces.iter().zip(&tr2) {
            assert_eq!(ta.name, tb.name);
            for (a, b) in ta.values.iter().zip(&tb.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        let json = dir.path().join("traces.json");
        export_traces_json(&json, &times, &traces).unwrap();
        let (t3, tr3) = import_traces_json(&json).unwrap();
        for (a, b) in times.iter().zip(&t3) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        for (ta, tb) in traces.iter().zip(&tr3) {
            assert_eq!(ta.name, tb.name);
            for (a, b) in ta.values.iter().zip(&tb.values) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn trace_exports_validate_their_input() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.csv");
        let times = vec![0.0, 1.0];
        let short = vec![Trace {
            name: "x".into(),
            values: vec![1.0],
        }];
        assert!(export_traces_csv(&path, &times, &short).is_err());
        let nan = vec![Trace {
            name: "x".into(),
            values: vec![1.0, f64::NAN],
        }];
        assert!(export_traces_json(&path, &times, &nan).is_err());
        let comma = vec![Trace {
            name: "a,b".into(),
            values: vec![1.0, 2.0],
        }];
        assert!(export_traces_csv(&path, &times, &comma).is_err());
        let dup = vec![
            Trace {
                name: "x".into(),
                values: vec![1.0, 2.0],
            },
            Trace {
                name: "x".into(),
                values: vec![3.0, 4.0],
            },
        ];
        assert!(export_traces_csv(&path, &times, &dup).is_err());
    }
}
