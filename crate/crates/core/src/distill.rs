//! Integral velocity distillation.
//!
//! The teacher integrates its own ODE over `[t, r]` with `n` Euler sub-steps;
//! the displacement divided by `r - t` is the regression target for the
//! student's average velocity `u(z_t, t, r)`. No Jacobian-vector products
//! and no self-bootstrapping are involved: the target is a constant array.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{AverageVelocityField, VelocityField};
use crate::flow::{
    cosine_lr, interpolate_batch, standard_normal, velocity_cfg, CfgConfig, SampleBatch,
    StepSchedule, TrainOutcome,
};
use crate::nn::{
    optimizer_step, row_mse, AdamConfig, Condition, DualTimeVelocityNet, GradTape, OptimizerState,
    VelocityNet,
};
use crate::timing::Stopwatch;

pub const DEFAULT_EPS_MIN: f64 = 1e-3;

/// Distillation interval `0 <= t < r <= 1` with `r - t >= eps_min`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeInterval {
    t: f64,
    r: f64,
}

impl TimeInterval {
    pub fn new(t: f64, r: f64, eps_min: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&t) || !(0.0..=1.0).contains(&r) || !(r > t) || r - t < eps_min {
            return Err(Error::Interval { t, r });
        }
        Ok(Self { t, r })
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn r(&self) -> f64 {
        self.r
    }

    pub fn len(&self) -> f64 {
        self.r - self.t
    }
}

/// `t ~ U[0, 1 - eps]`, `r ~ U[t + eps, 1]`.
pub fn sample_interval<R: Rng + ?Sized>(rng: &mut R, eps_min: f64) -> TimeInterval {
    let t = rng.gen::<f64>() * (1.0 - eps_min);
    let lo = t + eps_min;
    let r = (lo + rng.gen::<f64>() * (1.0 - lo)).min(1.0);
    TimeInterval { t, r: r.max(lo) }
}

/// Euler integration with `n` uniform sub-steps per row from `start[i]` to `end[i]`.
/// Returns the final states.
pub fn integrate_rows<F: VelocityField + ?Sized>(
    field: &F,
    z: ArrayView2<f64>,
    start: &[f64],
    end: &[f64],
    n: usize,
    cond: &[Condition],
    cfg: CfgConfig,
) -> Result<Array2<f64>> {
    Ok(euler_rows(field, z, start, end, n, cond, cfg)?.0)
}

/// Final states and the summed increments `sum_k h v_k`, kept separately so
/// the displacement does not pick up cancellation error from `end - start`.
fn euler_rows<F: VelocityField + ?Sized>(
    field: &F,
    z: ArrayView2<f64>,
    start: &[f64],
    end: &[f64],
    n: usize,
    cond: &[Condition],
    cfg: CfgConfig,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if n < 1 {
        return Err(Error::Argument(
            "at least one teacher sub-step is required".into(),
        ));
    }
    if start.len() != z.nrows() || end.len() != z.nrows() {
        return Err(Error::Shape(
            "one start and end time per row is required".into(),
        ));
    }
    let h: Vec<f64> = start
        .iter()
        .zip(end)
        .map(|(a, b)| (b - a) / n as f64)
        .collect();
    let mut state = z.to_owned();
    let mut disp = Array2::zeros(z.raw_dim());
    let mut times = start.to_vec();
    for k in 0..n {
        if k > 0 {
            for (ti, (s, e)) in times.iter_mut().zip(start.iter().zip(end)) {
                *ti = s + (e - s) * k as f64 / n as f64;
            }
        }
        let v = velocity_cfg(field, state.view(), &times, cond, cfg)?;
        for (((mut row, mut acc), vrow), &hi) in state
            .outer_iter_mut()
            .zip(disp.outer_iter_mut())
            .zip(v.outer_iter())
            .zip(&h)
        {
            row.scaled_add(hi, &vrow);
            acc.scaled_add(hi, &vrow);
        }
    }
    if state.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical("teacher integration", "non-finite state"));
    }
    Ok((state, disp))
}

/// Row-wise teacher displacement `sum_k (t_{k+1} - t_k) v(z_{t_k}, t_k)` over `[t_i, r_i]`.
pub fn teacher_displacement_batch<F: VelocityField + ?Sized>(
    teacher: &F,
    zt: ArrayView2<f64>,
    t: &[f64],
    r: &[f64],
    n: usize,
    cond: &[Condition],
    cfg: CfgConfig,
) -> Result<Array2<f64>> {
    Ok(euler_rows(teacher, zt, t, r, n, cond, cfg)?.1)
}

pub fn teacher_displacement<F: VelocityField + ?Sized>(
    teacher: &F,
    zt: &[f64],
    interval: TimeInterval,
    n: usize,
    cond: Condition,
    cfg: CfgConfig,
) -> Result<Vec<f64>> {
    let z = ArrayView2::from_shape((1, zt.len()), zt).map_err(|e| Error::Shape(e.to_string()))?;
    if zt.iter().any(|x| !x.is_finite()) {
        return Err(Error::numerical(
            "teacher displacement",
            "non-finite input state",
        ));
    }
    let d = teacher_displacement_batch(teacher, z, &[interval.t], &[interval.r], n, &[cond], cfg)?;
    Ok(d.into_raw_vec_and_offset().0)
}

/// Average velocity over an interval.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgVelocity {
    pub value: Vec<f64>,
    pub interval: TimeInterval,
}

pub fn avg_velocity_target(displacement: &[f64], interval: TimeInterval) -> Result<AvgVelocity> {
    let len = interval.len();
    if !(len > 0.0) {
        return Err(Error::Interval {
            t: interval.t,
            r: interval.r,
        });
    }
    Ok(AvgVelocity {
        value: displacement.iter().map(|x| x / len).collect(),
        interval,
    })
}

/// Row-wise `displacement_i / (r_i - t_i)`.
pub fn avg_velocity_target_batch(
    displacement: ArrayView2<f64>,
    t: &[f64],
    r: &[f64],
) -> Result<Array2<f64>> {
    let mut out = displacement.to_owned();
    for ((mut row, &ti), &ri) in out.outer_iter_mut().zip(t).zip(r) {
        if !(ri > ti) {
            return Err(Error::Interval { t: ti, r: ri });
        }
        row /= ri - ti;
    }
    Ok(out)
}

/// Teacher average-velocity targets for a batch; no gradient ever reaches the teacher.
pub fn teacher_targets<F: VelocityField + ?Sized>(
    teacher: &F,
    zt: ArrayView2<f64>,
    t: &[f64],
    r: &[f64],
    n: usize,
    cond: &[Condition],
    cfg: CfgConfig,
) -> Result<Array2<f64>> {
    let disp = teacher_displacement_batch(teacher, zt, t, r, n, cond, cfg)?;
    avg_velocity_target_batch(disp.view(), t, r)
}

/// `mean_i || u(z_t, t, r) - v_teacher(z_t, t, r) ||^2`.
#[allow(clippy::too_many_arguments)]
pub fn distill_loss<S, T>(
    student: &S,
    teacher: &T,
    zt: ArrayView2<f64>,
    t: &[f64],
    r: &[f64],
    cond: &[Condition],
    teacher_nfe: usize,
    cfg: CfgConfig,
) -> Result<f64>
where
    S: AverageVelocityField + ?Sized,
    T: VelocityField + ?Sized,
{
    let target = teacher_targets(teacher, zt, t, r, teacher_nfe, cond, cfg)?;
    let pred = student.average_velocity(zt, t, r, cond)?;
    Ok(row_mse(pred.view(), target.view())?.0)
}

/// Student whose forward pass reproduces the teacher: all trunk parameters
/// copied, `W = [I 0]` so the `r` pathway starts switched off.
pub fn adapt_init(teacher: &VelocityNet) -> Result<DualTimeVelocityNet> {
    let m = teacher.arch().m;
    let mut w = Array2::zeros((m, 2 * m));
    for i in 0..m {
        w[[i, i]] = 1.0;
    }
    DualTimeVelocityNet::with_projection(teacher.arch().clone(), teacher.params().clone(), w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Adapt,
    Fresh,
}

/// Where distillation states `z_t` come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StateSource {
    /// `(1 - t) z0 + t z1` for fresh noise/data pairs.
    Interpolate,
    /// Teacher Euler trajectory from `z0` to `t`.
    TeacherTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistillConfig {
    pub teacher_nfe: usize,
    pub cfg_weight: f64,
    pub eps_min: f64,
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub final_lr_fraction: f64,
    pub init: StudentInit,
    pub states: StateSource,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            teacher_nfe: 16,
            cfg_weight: 3.0,
            eps_min: DEFAULT_EPS_MIN,
            steps: 2000,
            batch: 128,
            lr: 1e-3,
            final_lr_fraction: 0.05,
            init: StudentInit::Adapt,
            states: StateSource::Interpolate,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        if self.teacher_nfe < 1 {
            return Err(Error::Config("teacher NFE must be at least 1".into()));
        }
        if !(self.eps_min > 0.0 && self.eps_min < 1.0) {
            return Err(Error::Config(format!(
                "eps_min {} outside (0, 1)",
                self.eps_min
            )));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.cfg_weight.is_finite() || self.cfg_weight < 0.0 {
            return Err(Error::Config(format!(
                "guidance weight {} must be finite and >= 0",
                self.cfg_weight
            )));
        }
        Ok(())
    }

    /// Guidance applied to the teacher target; off for unconditional data.
    pub fn teacher_cfg(&self, conditional: bool) -> CfgConfig {
        if conditional {
            CfgConfig::new(self.cfg_weight)
        } else {
            CfgConfig::disabled()
        }
    }
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub outcome: TrainOutcome<DualTimeVelocityNet>,
    /// Wall-clock seconds of each optimizer step, target computation included.
    pub step_seconds: Vec<f64>,
}

/// Distills `student` (normally `adapt_init(teacher)`) from the frozen teacher.
pub fn train_student<R: Rng + ?Sized>(
    teacher: &VelocityNet,
    mut student: DualTimeVelocityNet,
    dataset: &SampleBatch,
    config: &DistillConfig,
    rng: &mut R,
) -> Result<StudentRun> {
    config.validate()?;
    let d = teacher.arch().d;
    if student.arch().d != d || dataset.dim() != d {
        return Err(Error::Shape(
            "teacher, student and dataset dimensions differ".into(),
        ));
    }
    let conditional = dataset.labels().is_some();
    let cfg = config.teacher_cfg(conditional);
    let mut opt = OptimizerState::new(student.params(), AdamConfig::with_lr(config.lr));
    let mut tape = GradTape::new();
    let mut losses = Vec::with_capacity(config.steps);
    let mut step_seconds = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let watch = Stopwatch::start();
        let rows: Vec<usize> = (0..config.batch)
            .map(|_| rng.gen_range(0..dataset.len()))
            .collect();
        let z1 = dataset.points().select(Axis(0), &rows);
        let z0 = standard_normal(rng, config.batch, d);
        let cond: Vec<Condition> = match dataset.labels() {
            Some(l) => rows.iter().map(|&i| Condition::Label(l[i])).collect(),
            None => vec![Condition::Null; config.batch],
        };
        let (t, r): (Vec<f64>, Vec<f64>) = (0..config.batch)
            .map(|_| {
                let iv = sample_interval(rng, config.eps_min);
                (iv.t, iv.r)
            })
            .unzip();
        let zt = match config.states {
            StateSource::Interpolate => interpolate_batch(z0.view(), z1.view(), &t)?,
            StateSource::TeacherTrajectory => {
                let zeros = vec![0.0; config.batch];
                integrate_rows(
                    teacher,
                    z0.view(),
                    &zeros,
                    &t,
                    config.teacher_nfe,
                    &cond,
                    cfg,
                )?
            }
        };

        let target = teacher_targets(teacher, zt.view(), &t, &r, config.teacher_nfe, &cond, cfg)?;
        let pred = student.forward_recorded(&mut tape, zt.view(), &t, &r, &cond)?;
        let (loss, dpred) = row_mse(pred.view(), target.view())?;
        if !loss.is_finite() {
            return Err(Error::numerical(
                "distillation",
                format!("loss is {loss} at step {step}"),
            ));
        }
        let grads = student.backward(&tape, dpred.view())?;
        opt.set_lr(cosine_lr(
            config.lr,
            config.final_lr_fraction,
            step,
            config.steps,
        ));
        optimizer_step(student.params_mut(), &grads, &mut opt)?;
        losses.push(loss);
        step_seconds.push(watch.elapsed_secs());
    }
    Ok(StudentRun {
        outcome: TrainOutcome {
            net: student,
            losses,
        },
        step_seconds,
    })
}

/// `z_{k+1} = z_k + (t_{k+1} - t_k) u(z_k, t_k, t_{k+1})`; never guided.
pub fn sample_student<S: AverageVelocityField + ?Sized>(
    student: &S,
    z0: ArrayView2<f64>,
    schedule: &StepSchedule,
    cond: &[Condition],
) -> Result<Array2<f64>> {
    let mut z = z0.to_owned();
    let b = z.nrows();
    for w in schedule.times().windows(2) {
        let u = student.average_velocity(z.view(), &vec![w[0]; b], &vec![w[1]; b], cond)?;
        z.scaled_add(w[1] - w[0], &u);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::numerical(
                "student sampler",
                format!("non-finite state at t = {}", w[1]),
            ));
        }
    }
    Ok(z)
}

/// Median of per-step timings after dropping the first `warmup` entries.
pub fn median_step_seconds(step_seconds: &[f64], warmup: usize) -> Option<f64> {
    let mut s: Vec<f64> = step_seconds.iter().skip(warmup).copied().collect();
    if s.is_empty() {
        return None;
    }
    s.sort_by(f64::total_cmp);
    let mid = s.len() / 2;
    Some(if s.len() % 2 == 0 {
        0.5 * (s[mid - 1] + s[mid])
    } else {
        s[mid]
    })
}

/// CSV `step,seconds,teacher_nfe`.
pub fn write_timing_csv<W: std::io::Write>(
    step_seconds: &[f64],
    teacher_nfe: usize,
    writer: W,
) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["step", "seconds", "teacher_nfe"])?;
    for (i, s) in step_seconds.iter().enumerate() {
        w.write_record([i.to_string(), s.to_string(), teacher_nfe.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
