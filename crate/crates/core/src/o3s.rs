//! Optimal step sampling search: coordinate-wise ternary search over the
//! interior points of a fixed-NFE schedule, maximizing a quality metric.

use std::collections::HashMap;
use std::io::Write;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::swd;
use crate::distill::sample_student;
use crate::error::{Error, Result};
use crate::field::AverageVelocityField;
use crate::flow::{standard_normal, SampleBatch, StepSchedule};
use crate::nn::Condition;
use crate::rng::rng_from_seed;

/// Schedule quality, higher is better. Must be deterministic.
pub trait MetricFn {
    fn evaluate(&self, schedule: &StepSchedule) -> Result<f64>;
}

impl<F> MetricFn for F
where
    F: Fn(&StepSchedule) -> Result<f64>,
{
    fn evaluate(&self, schedule: &StepSchedule) -> Result<f64> {
        self(schedule)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TernaryOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for TernaryOptions {
    fn default() -> Self {
        Self {
            tol: 1e-3,
            max_iter: 30,
        }
    }
}

/// Maximizes a unimodal `f` on `(lo, hi)`. Every probe lies strictly inside
/// the interval; returns the best probed point and its value.
pub fn ternary_search<F>(mut f: F, lo: f64, hi: f64, opts: TernaryOptions) -> Result<(f64, f64)>
where
    F: FnMut(f64) -> Result<f64>,
{
    if !(lo < hi) {
        return Err(Error::Argument(format!(
            "ternary search needs lo < hi, got [{lo}, {hi}]"
        )));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut consider = |x: f64, v: f64| {
        if best.map_or(true, |(_, bv)| v > bv) {
            best = Some((x, v));
        }
    };
    let (mut a, mut b) = (lo, hi);
    for _ in 0..opts.max_iter {
        if b - a <= opts.tol {
            break;
        }
        let m1 = a + (b - a) / 3.0;
        let m2 = b - (b - a) / 3.0;
        let f1 = f(m1)?;
        let f2 = f(m2)?;
        consider(m1, f1);
        consider(m2, f2);
        if f1 < f2 {
            a = m1;
        } else {
            b = m2;
        }
    }
    let mid = 0.5 * (a + b);
    let fm = f(mid)?;
    consider(mid, fm);
    Ok(best.expect("at least one probe"))
}

/// Range each interior point may move within during its ternary search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchBounds {
    /// `(t_{i-1}, t_{i+1})`: the point can move in both directions.
    Neighbors,
    /// `(t_{i-1}, t_i)`: the point can only move towards its left neighbour.
    AsPrinted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct O3sConfig {
    pub ternary: TernaryOptions,
    pub bounds: SearchBounds,
    /// Cache key resolution per schedule coordinate.
    pub quantum: f64,
}

impl Default for O3sConfig {
    fn default() -> Self {
        Self {
            ternary: TernaryOptions::default(),
            bounds: SearchBounds::Neighbors,
            quantum: 1e-6,
        }
    }
}

/// One metric evaluation as recorded by the search.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditEntry {
    pub eval_index: usize,
    pub schedule: StepSchedule,
    pub metric: f64,
    /// The schedule became the incumbent.
    pub accepted: bool,
    /// Incumbent metric when this evaluation was made; raised to `metric` if
    /// the row was accepted before any later evaluation.
    pub m_best: f64,
}

/// Incumbent, patience counter and evaluation cache.
#[derive(Debug, Clone)]
pub struct SearchState {
    pub best: StepSchedule,
    pub m_best: f64,
    pub patience: usize,
    cache: HashMap<Vec<i64>, (f64, usize)>,
    evaluations: usize,
    log: Vec<AuditEntry>,
    quantum: f64,
}

impl SearchState {
    fn new(initial: StepSchedule, quantum: f64) -> Self {
        Self {
            best: initial,
            m_best: f64::NEG_INFINITY,
            patience: 0,
            cache: HashMap::new(),
            evaluations: 0,
            log: Vec::new(),
            quantum,
        }
    }

    fn key(&self, s: &StepSchedule) -> Vec<i64> {
        s.times()
            .iter()
            .map(|t| (t / self.quantum).round() as i64)
            .collect()
    }

    /// Metric of `schedule`, calling `metric` only on a cache miss.
    /// Returns the value and the audit row index it was logged under.
    pub fn evaluate<M: MetricFn + ?Sized>(
        &mut self,
        metric: &M,
        schedule: &StepSchedule,
    ) -> Result<(f64, usize)> {
        let key = self.key(schedule);
        if let Some(&hit) = self.cache.get(&key) {
            return Ok(hit);
        }
        let value = metric.evaluate(schedule)?;
        if !value.is_finite() {
            return Err(Error::Metric(format!(
                "metric returned {value} for {}",
                schedule.to_json()
            )));
        }
        let idx = self.evaluations;
        self.evaluations += 1;
        self.log.push(AuditEntry {
            eval_index: idx,
            schedule: schedule.clone(),
            metric: value,
            accepted: false,
            m_best: self.m_best,
        });
        self.cache.insert(key, (value, idx));
        Ok((value, idx))
    }

    fn accept(&mut self, schedule: StepSchedule, value: f64, idx: usize) {
        self.best = schedule;
        self.m_best = value;
        self.patience = 0;
        let last = self.log.len() - 1;
        let row = &mut self.log[idx];
        row.accepted = true;
        // later rows already carry the old incumbent; only the newest may be raised
        if idx == last {
            row.m_best = value;
        }
    }

    pub fn evaluations(&self) -> usize {
        self.evaluations
    }

    pub fn log(&self) -> &[AuditEntry] {
        &self.log
    }
}

#[derive(Debug, Clone)]
pub struct O3sResult {
    pub schedule: StepSchedule,
    pub metric: f64,
    pub log: Vec<AuditEntry>,
}

/// A metric failure during search, with everything evaluated before it.
#[derive(Debug)]
pub struct SearchAborted {
    pub error: Error,
    pub log: Vec<AuditEntry>,
}

impl std::fmt::Display for SearchAborted {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "search aborted after {} evaluations: {}",
            self.log.len(),
            self.error
        )
    }
}

impl std::error::Error for SearchAborted {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

impl From<SearchAborted> for Error {
    fn from(e: SearchAborted) -> Self {
        e.error
    }
}

fn with_point(s: &StepSchedule, i: usize, x: f64) -> Result<StepSchedule> {
    let mut times = s.times().to_vec();
    times[i] = x;
    StepSchedule::new(times)
}

/// Searches the interior points of an `n`-step schedule, starting from the
/// uniform grid. Sweeps `i = n-1 .. 1`; a move is kept only on strict
/// improvement. Stops when patience reaches `n` or a full sweep is idle.
pub fn o3s_search<M: MetricFn + ?Sized>(
    metric: &M,
    n: usize,
    config: &O3sConfig,
) -> std::result::Result<O3sResult, SearchAborted> {
    let uniform = StepSchedule::uniform(n).map_err(|error| SearchAborted { error, log: vec![] })?;
    let mut state = SearchState::new(uniform.clone(), config.quantum);
    match run_search(metric, n, config, &mut state, uniform) {
        Ok(()) => Ok(O3sResult {
            schedule: state.best,
            metric: state.m_best,
            log: state.log,
        }),
        Err(error) => Err(SearchAborted {
            error,
            log: state.log,
        }),
    }
}

fn run_search<M: MetricFn + ?Sized>(
    metric: &M,
    n: usize,
    config: &O3sConfig,
    state: &mut SearchState,
    uniform: StepSchedule,
) -> Result<()> {
    let (m0, idx0) = state.evaluate(metric, &uniform)?;
    state.accept(uniform, m0, idx0);
    if n < 2 {
        return Ok(());
    }
    loop {
        let mut improved = false;
        for i in (1..n).rev() {
            let times = state.best.times().to_vec();
            let lo = times[i - 1];
            let hi = match config.bounds {
                SearchBounds::Neighbors => times[i + 1],
                SearchBounds::AsPrinted => times[i],
            };
            let mut found: Option<(f64, f64, usize)> = None;
            if lo < hi {
                let base = state.best.clone();
                let (x, m) = ternary_search(
                    |x| Ok(state.evaluate(metric, &with_point(&base, i, x)?)?.0),
                    lo,
                    hi,
                    config.ternary,
                )?;
                // cache hit: recovers the audit row of the winning probe
                let (_, idx) = state.evaluate(metric, &with_point(&base, i, x)?)?;
                found = Some((x, m, idx));
            }
            match found {
                Some((x, m, idx)) if m > state.m_best => {
                    let cand = with_point(&state.best, i, x)?;
                    state.accept(cand, m, idx);
                    improved = true;
                }
                _ => {
                    state.patience += 1;
                    if state.patience >= n {
                        return Ok(());
                    }
                }
            }
        }
        if !improved {
            return Ok(());
        }
    }
}

/// Writes `eval_index,schedule_json,metric,accepted,m_best`.
pub fn write_audit_csv<W: Write>(log: &[AuditEntry], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record([
        "eval_index",
        "schedule_json",
        "metric",
        "accepted",
        "m_best",
    ])?;
    for e in log {
        w.write_record([
            e.eval_index.to_string(),
            e.schedule.to_json(),
            e.metric.to_string(),
            e.accepted.to_string(),
            e.m_best.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `-SWD(sample_student(z0, schedule), reference)` with noise and projections
/// frozen at construction.
pub struct SwdMetric<'a, S: ?Sized> {
    student: &'a S,
    z0: Array2<f64>,
    cond: Vec<Condition>,
    reference: SampleBatch,
    n_projections: usize,
    projection_seed: u64,
}

impl<'a, S: AverageVelocityField + ?Sized> SwdMetric<'a, S> {
    /// `eval_batch` noise rows drawn from `noise_seed`; conditions follow the
    /// reference labels (cycled if the reference is smaller).
    pub fn new(
        student: &'a S,
        reference: SampleBatch,
        eval_batch: usize,
        noise_seed: u64,
        n_projections: usize,
        projection_seed: u64,
    ) -> Result<Self> {
        if reference.is_empty() || eval_batch == 0 {
            return Err(Error::Argument(
                "metric needs a non-empty reference and eval batch".into(),
            ));
        }
        let z0 = standard_normal(&mut rng_from_seed(noise_seed), eval_batch, student.dim());
        let ref_cond = reference.conditions();
        let cond = (0..eval_batch)
            .map(|i| ref_cond[i % ref_cond.len()])
            .collect();
        Ok(Self {
            student,
            z0,
            cond,
            reference,
            n_projections,
            projection_seed,
        })
    }

    /// Fixed starting noise (useful for identity-sampler checks).
    pub fn with_noise(
        student: &'a S,
        reference: SampleBatch,
        z0: Array2<f64>,
        cond: Vec<Condition>,
        n_projections: usize,
        projection_seed: u64,
    ) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Argument("metric needs a non-empty reference".into()));
        }
        if cond.len() != z0.nrows() {
            return Err(Error::Shape("one condition per noise row".into()));
        }
        Ok(Self {
            student,
            z0,
            cond,
            reference,
            n_projections,
            projection_seed,
        })
    }

    pub fn samples(&self, schedule: &StepSchedule) -> Result<Array2<f64>> {
        sample_student(self.student, self.z0.view(), schedule, &self.cond)
    }
}

impl<S: AverageVelocityField + ?Sized> MetricFn for SwdMetric<'_, S> {
    fn evaluate(&self, schedule: &StepSchedule) -> Result<f64> {
        let out = self.samples(schedule)?;
        Ok(-swd(
            out.view(),
            self.reference.points(),
            self.n_projections,
            self.projection_seed,
        )?)
    }
}
