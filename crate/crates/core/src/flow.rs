//! Conditional flow-matching teacher: linear probability path, CFM loss,
//! classifier-free guidance and the Euler sampler over arbitrary schedules.

use std::io::{Read, Write};

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::VelocityField;
use crate::nn::{
    optimizer_step, row_mse, AdamConfig, Condition, GradTape, OptimizerState, VelocityNet,
};

/// Points in `R^d`, optionally labelled with a class index per row.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    points: Array2<f64>,
    labels: Option<Vec<usize>>,
}

impl SampleBatch {
    pub fn new(points: Array2<f64>, labels: Option<Vec<usize>>) -> Result<Self> {
        if points.nrows() == 0 {
            return Err(Error::Argument(
                "sample batch must hold at least one point".into(),
            ));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical("sample batch", "non-finite coordinate"));
        }
        if let Some(l) = &labels {
            if l.len() != points.nrows() {
                return Err(Error::Shape(format!(
                    "{} labels for {} points",
                    l.len(),
                    points.nrows()
                )));
            }
        }
        Ok(Self { points, labels })
    }

    pub fn points(&self) -> ArrayView2<'_, f64> {
        self.points.view()
    }

    pub fn into_points(self) -> Array2<f64> {
        self.points
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn conditions(&self) -> Vec<Condition> {
        match &self.labels {
            Some(l) => l.iter().map(|&k| Condition::Label(k)).collect(),
            None => vec![Condition::Null; self.len()],
        }
    }

    pub fn select(&self, rows: &[usize]) -> SampleBatch {
        SampleBatch {
            points: self.points.select(Axis(0), rows),
            labels: self
                .labels
                .as_ref()
                .map(|l| rows.iter().map(|&i| l[i]).collect()),
        }
    }

    /// First `n` rows (or all of them).
    pub fn truncate(&self, n: usize) -> SampleBatch {
        let rows: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&rows)
    }

    /// CSV with header `x0,...,x{d-1},label`; the label column is empty when unlabelled.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (i, row) in self.points.outer_iter().enumerate() {
            let mut rec: Vec<String> = row.iter().map(|x| x.to_string()).collect();
            rec.push(
                self.labels
                    .as_ref()
                    .map_or(String::new(), |l| l[i].to_string()),
            );
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let headers = r.headers()?.clone();
        let d = headers.len().saturating_sub(1);
        if d == 0 || headers.get(d) != Some("label") {
            return Err(Error::Validation("expected header x0,...,label".into()));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut any_label = false;
        let mut rows = 0;
        for rec in r.records() {
            let rec = rec?;
            for j in 0..d {
                let v: f64 = rec[j]
                    .parse()
                    .map_err(|e| Error::Validation(format!("row {rows}: {e}")))?;
                data.push(v);
            }
            let l = rec[d].trim();
            if l.is_empty() {
                labels.push(None);
            } else {
                any_label = true;
                labels.push(Some(
                    l.parse::<usize>()
                        .map_err(|e| Error::Validation(format!("row {rows}: {e}")))?,
                ));
            }
            rows += 1;
        }
        let labels = if any_label {
            Some(
                labels
                    .into_iter()
                    .map(|l| {
                        l.ok_or_else(|| Error::Validation("mixed labelled/unlabelled rows".into()))
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let points =
            Array2::from_shape_vec((rows, d), data).map_err(|e| Error::Shape(e.to_string()))?;
        SampleBatch::new(points, labels)
    }
}

/// Strictly increasing time grid from 0 to 1; `nfe()` steps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct StepSchedule {
    times: Vec<f64>,
}

impl StepSchedule {
    pub fn new(times: Vec<f64>) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::Validation(
                "schedule needs at least the endpoints 0 and 1".into(),
            ));
        }
        if times[0] != 0.0 || *times.last().unwrap() != 1.0 {
            return Err(Error::Validation(format!(
                "schedule must start at 0 and end at 1, got {:?}",
                times
            )));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::Validation(format!(
                "schedule must be strictly increasing: {times:?}"
            )));
        }
        Ok(Self { times })
    }

    /// `t_i = i / n`.
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::Validation("schedule needs at least one step".into()));
        }
        Self::new((0..=n).map(|i| i as f64 / n as f64).collect())
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn nfe(&self) -> usize {
        self.times.len() - 1
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.times).expect("floats serialize")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let times: Vec<f64> = serde_json::from_str(s)?;
        Self::new(times)
    }
}

impl TryFrom<Vec<f64>> for StepSchedule {
    type Error = Error;

    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<StepSchedule> for Vec<f64> {
    fn from(s: StepSchedule) -> Self {
        s.times
    }
}

/// Classifier-free guidance: `v_c + w (v_c - v_null)` when enabled.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CfgConfig {
    pub weight: f64,
    pub enabled: bool,
}

impl CfgConfig {
    pub fn new(weight: f64) -> Self {
        Self {
            weight,
            enabled: true,
        }
    }

    pub fn disabled() -> Self {
        Self {
            weight: 0.0,
            enabled: false,
        }
    }
}

pub fn interpolate(
    z0: ArrayView1<f64>,
    z1: ArrayView1<f64>,
    t: f64,
) -> Result<ndarray::Array1<f64>> {
    if z0.len() != z1.len() {
        return Err(Error::Shape(format!("{} vs {}", z0.len(), z1.len())));
    }
    Ok(&z0 * (1.0 - t) + &z1 * t)
}

/// Row-wise `(1 - t_i) z0_i + t_i z1_i`.
pub fn interpolate_batch(
    z0: ArrayView2<f64>,
    z1: ArrayView2<f64>,
    t: &[f64],
) -> Result<Array2<f64>> {
    if z0.dim() != z1.dim() || t.len() != z0.nrows() {
        return Err(Error::Shape(format!(
            "interpolating {:?} and {:?} with {} times",
            z0.dim(),
            z1.dim(),
            t.len()
        )));
    }
    let mut out = Array2::zeros(z0.raw_dim());
    for (i, mut row) in out.outer_iter_mut().enumerate() {
        let ti = t[i];
        row.assign(&(&z0.row(i) * (1.0 - ti) + &z1.row(i) * ti));
    }
    Ok(out)
}

pub fn velocity_cfg<F: VelocityField + ?Sized>(
    field: &F,
    z: ArrayView2<f64>,
    t: &[f64],
    cond: &[Condition],
    cfg: CfgConfig,
) -> Result<Array2<f64>> {
    if !cfg.enabled {
        return field.velocity(z, t, cond);
    }
    if !cfg.weight.is_finite() {
        return Err(Error::Config(format!(
            "guidance weight {} is not finite",
            cfg.weight
        )));
    }
    if cond.iter().any(|c| c.is_null()) {
        return Err(Error::Argument(
            "guidance needs a real condition on every row".into(),
        ));
    }
    let v_c = field.velocity(z, t, cond)?;
    if cfg.weight == 0.0 {
        return Ok(v_c);
    }
    let null = vec![Condition::Null; cond.len()];
    let v_null = field.velocity(z, t, &null)?;
    Ok(&v_c + &((&v_c - &v_null) * cfg.weight))
}

pub fn euler_step(
    z: ArrayView2<f64>,
    t_from: f64,
    t_to: f64,
    v: ArrayView2<f64>,
) -> Result<Array2<f64>> {
    if !(t_to > t_from) {
        return Err(Error::Ordering(format!(
            "euler step from {t_from} to {t_to}"
        )));
    }
    if z.dim() != v.dim() {
        return Err(Error::Shape(format!(
            "state {:?} vs velocity {:?}",
            z.dim(),
            v.dim()
        )));
    }
    Ok(&z + &(&v * (t_to - t_from)))
}

/// States at every grid time, `states[k]` at `schedule.times()[k]`.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<Array2<f64>>,
}

impl Trajectory {
    pub fn last(&self) -> &Array2<f64> {
        self.states
            .last()
            .expect("trajectory holds the initial state")
    }

    pub fn into_last(mut self) -> Array2<f64> {
        self.states
            .pop()
            .expect("trajectory holds the initial state")
    }
}

/// Euler integration of the (optionally guided) field over `schedule`.
pub fn sample<F: VelocityField + ?Sized>(
    field: &F,
    z0: ArrayView2<f64>,
    schedule: &StepSchedule,
    cond: &[Condition],
    cfg: CfgConfig,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(schedule.nfe() + 1);
    states.push(z0.to_owned());
    for w in schedule.times().windows(2) {
        let z = states.last().unwrap();
        let t = vec![w[0]; z.nrows()];
        let v = velocity_cfg(field, z.view(), &t, cond, cfg)?;
        let next = euler_step(z.view(), w[0], w[1], v.view())?;
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(
                "euler sampler",
                format!("non-finite state at t = {}", w[1]),
            ));
        }
        states.push(next);
    }
    Ok(Trajectory { states })
}

/// `mean_i || v(z_t, t_i, c_i) - (z1_i - z0_i) ||^2`.
pub fn cfm_loss(
    net: &VelocityNet,
    z0: ArrayView2<f64>,
    z1: ArrayView2<f64>,
    cond: &[Condition],
    t: &[f64],
) -> Result<f64> {
    if z0.nrows() == 0 {
        return Err(Error::Argument("empty batch".into()));
    }
    let zt = interpolate_batch(z0, z1, t)?;
    let pred = net.forward(zt.view(), t, cond)?;
    let target = &z1 - &z0;
    Ok(row_mse(pred.view(), target.view())?.0)
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, rows: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, d), || StandardNormal.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TeacherTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    /// Learning rate at the last step as a fraction of `lr` (cosine decay).
    pub final_lr_fraction: f64,
    pub cond_dropout: f64,
}

impl Default for TeacherTrainConfig {
    fn default() -> Self {
        Self {
            steps: 8000,
            batch: 256,
            lr: 2e-3,
            final_lr_fraction: 0.05,
            cond_dropout: 0.2,
        }
    }
}

/// Cosine decay from `lr` to `lr * final_fraction` over `steps`.
pub fn cosine_lr(lr: f64, final_fraction: f64, step: usize, steps: usize) -> f64 {
    if steps <= 1 {
        return lr;
    }
    let progress = step as f64 / (steps - 1) as f64;
    let floor = lr * final_fraction;
    floor + 0.5 * (lr - floor) * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<N> {
    pub net: N,
    pub losses: Vec<f64>,
}

/// Minibatch CFM training with condition dropout.
pub fn train_teacher<R: Rng + ?Sized>(
    mut net: VelocityNet,
    dataset: &SampleBatch,
    config: &TeacherTrainConfig,
    rng: &mut R,
) -> Result<TrainOutcome<VelocityNet>> {
    if dataset.dim() != net.arch().d {
        return Err(Error::Shape(format!(
            "dataset dimension {} vs network dimension {}",
            dataset.dim(),
            net.arch().d
        )));
    }
    if config.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if !(0.0..=1.0).contains(&config.cond_dropout) {
        return Err(Error::Config(format!(
            "condition dropout {} outside [0, 1]",
            config.cond_dropout
        )));
    }
    let mut opt = OptimizerState::new(net.params(), AdamConfig::with_lr(config.lr));
    let mut losses = Vec::with_capacity(config.steps);
    let mut tape = GradTape::new();
    let d = dataset.dim();
    for step in 0..config.steps {
        let rows: Vec<usize> = (0..config.batch)
            .map(|_| rng.gen_range(0..dataset.len()))
            .collect();
        let z1 = dataset.points().select(Axis(0), &rows);
        let z0 = standard_normal(rng, config.batch, d);
        let t: Vec<f64> = (0..config.batch).map(|_| rng.gen::<f64>()).collect();
        let cond: Vec<Condition> = rows
            .iter()
            .map(|&i| {
                let drop = rng.gen::<f64>() < config.cond_dropout;
                match dataset.labels() {
                    Some(l) if !drop => Condition::Label(l[i]),
                    _ => Condition::Null,
                }
            })
            .collect();

        let zt = interpolate_batch(z0.view(), z1.view(), &t)?;
        let target = &z1 - &z0;
        let pred = net.forward_recorded(&mut tape, zt.view(), &t, &cond)?;
        let (loss, dpred) = row_mse(pred.view(), target.view())?;
        if !loss.is_finite() {
            return Err(Error::numerical(
                "teacher training",
                format!("loss is {loss} at step {step}"),
            ));
        }
        losses.push(loss);
        let grads = net.backward(&tape, dpred.view())?;
        opt.set_lr(cosine_lr(
            config.lr,
            config.final_lr_fraction,
            step,
            config.steps,
        ));
        optimizer_step(net.params_mut(), &grads, &mut opt)?;
    }
    Ok(TrainOutcome { net, losses })
}

/// CSV `step,loss`.
pub fn write_loss_csv<W: Write>(losses: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean of the first and last `fraction` of a curve.
pub fn window_means(curve: &[f64], fraction: f64) -> (f64, f64) {
    let k = ((curve.len() as f64 * fraction).ceil() as usize).clamp(1, curve.len().max(1));
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    (mean(&curve[..k]), mean(&curve[curve.len() - k..]))
}
