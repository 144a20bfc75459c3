//! Run configuration and the end-to-end protocol shared by the command-line
//! tool and the acceptance suite: train teacher, distill, search schedules,
//! evaluate and sweep.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{mmd_rbf, noise_floor, sample_data, swd, DatasetName, DatasetSpec, MmdEstimate};
use crate::distill::{
    adapt_init, median_step_seconds, sample_student, train_student, DistillConfig, StudentInit,
    StudentRun,
};
use crate::error::{Error, Result};
use crate::flow::{
    sample, standard_normal, train_teacher, CfgConfig, SampleBatch, StepSchedule,
    TeacherTrainConfig, TrainOutcome,
};
use crate::nn::{Arch, Condition, DualTimeVelocityNet, VelocityNet};
use crate::o3s::{
    o3s_search, O3sConfig, O3sResult, SearchAborted, SearchBounds, SwdMetric, TernaryOptions,
};
use crate::rng::{SeedStreams, PROJECTION_SEED};
use crate::timing::Stopwatch;

pub const CONFIG_VERSION: u32 = 1;
/// Environment variable that overrides the configured output directory.
pub const OUT_ROOT_ENV: &str = "IMF_OUT_ROOT";

/// A `dataset` section given without a `name` is rejected by validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub name: Option<String>,
    /// Per-point noise; `None` uses the dataset's default.
    #[serde(default)]
    pub noise: Option<f64>,
    #[serde(default = "default_train_count")]
    pub train_count: usize,
}

fn default_train_count() -> usize {
    20_000
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            name: Some("gauss8".into()),
            noise: None,
            train_count: default_train_count(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchConfig {
    pub hidden: Vec<usize>,
    pub m: usize,
    pub cond_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128, 128],
            m: 32,
            cond_dim: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct O3sRunConfig {
    pub nfe: usize,
    pub tol: f64,
    pub max_iter: usize,
    pub metric_batch: usize,
    pub bounds: SearchBounds,
}

impl Default for O3sRunConfig {
    fn default() -> Self {
        Self {
            nfe: 3,
            tol: 1e-3,
            max_iter: 30,
            metric_batch: 4096,
            bounds: SearchBounds::Neighbors,
        }
    }
}

impl O3sRunConfig {
    pub fn search_config(&self) -> O3sConfig {
        O3sConfig {
            ternary: TernaryOptions {
                tol: self.tol,
                max_iter: self.max_iter,
            },
            bounds: self.bounds,
            ..O3sConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub count: usize,
    pub projections: usize,
    pub floor_trials: usize,
    pub teacher_nfe: usize,
    pub mmd_bandwidth: f64,
    pub mmd_points: usize,
    pub teacher_nfe_grid: Vec<usize>,
    pub student_nfe_grid: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            count: 4096,
            projections: 256,
            floor_trials: 5,
            teacher_nfe: 32,
            mmd_bandwidth: 0.5,
            mmd_points: 1024,
            teacher_nfe_grid: vec![1, 2, 3, 4, 8, 16, 32],
            student_nfe_grid: vec![1, 2, 3, 4],
        }
    }
}

/// Every knob of one experiment. Serialized next to each artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub config_version: u32,
    pub dataset: DatasetConfig,
    pub arch: ArchConfig,
    pub teacher: TeacherTrainConfig,
    pub distill: DistillConfig,
    pub o3s: O3sRunConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            config_version: CONFIG_VERSION,
            dataset: DatasetConfig::default(),
            arch: ArchConfig::default(),
            teacher: TeacherTrainConfig::default(),
            distill: DistillConfig::default(),
            o3s: O3sRunConfig::default(),
            eval: EvalConfig::default(),
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn dataset_spec(&self) -> Result<DatasetSpec> {
        let name = self
            .dataset
            .name
            .as_deref()
            .ok_or_else(|| Error::Config("dataset name is required".into()))?;
        let mut spec = DatasetSpec::new(name.parse::<DatasetName>()?);
        if let Some(noise) = self.dataset.noise {
            spec.noise = noise;
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<DatasetSpec> {
        let spec = self.dataset_spec()?;
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {}",
                self.config_version
            )));
        }
        if self.dataset.train_count == 0 || self.eval.count < 2 {
            return Err(Error::Config(
                "dataset and evaluation sizes must be positive".into(),
            ));
        }
        if self.teacher.batch == 0 || !(self.teacher.lr > 0.0) {
            return Err(Error::Config(
                "teacher batch and learning rate must be positive".into(),
            ));
        }
        self.distill.validate()?;
        if self.o3s.nfe == 0 || self.eval.teacher_nfe == 0 {
            return Err(Error::Config("NFE values must be at least 1".into()));
        }
        self.arch(&spec).validate()?;
        Ok(spec)
    }

    pub fn arch(&self, spec: &DatasetSpec) -> Arch {
        Arch::new(
            spec.dim(),
            self.arch.hidden.clone(),
            self.arch.m,
            spec.num_classes(),
            self.arch.cond_dim,
        )
    }

    pub fn seeds(&self) -> SeedStreams {
        SeedStreams::new(self.seed)
    }

    /// Guidance used for teacher inference and for the distillation target.
    pub fn teacher_cfg(&self, spec: &DatasetSpec) -> CfgConfig {
        self.distill.teacher_cfg(spec.num_classes() > 0)
    }
}

/// Named data splits, each from its own seed stream.
pub struct Splits {
    pub spec: DatasetSpec,
    pub train: SampleBatch,
    /// Held-out reference for evaluation.
    pub reference: SampleBatch,
    /// Development set scored by the schedule search.
    pub dev: SampleBatch,
}

pub fn splits(cfg: &RunConfig) -> Result<Splits> {
    let spec = cfg.validate()?;
    let s = cfg.seeds();
    Ok(Splits {
        spec,
        train: sample_data(&spec, cfg.dataset.train_count, s.seed("data"))?,
        reference: sample_data(&spec, cfg.eval.count, s.seed("reference"))?,
        dev: sample_data(&spec, cfg.o3s.metric_batch.max(2), s.seed("dev"))?,
    })
}

pub fn run_teacher(cfg: &RunConfig, train: &SampleBatch) -> Result<TrainOutcome<VelocityNet>> {
    let spec = cfg.validate()?;
    let s = cfg.seeds();
    let net = VelocityNet::init(cfg.arch(&spec), &mut s.rng("init"))?;
    train_teacher(net, train, &cfg.teacher, &mut s.rng("training"))
}

pub fn run_distill(
    cfg: &RunConfig,
    teacher: &VelocityNet,
    train: &SampleBatch,
) -> Result<StudentRun> {
    cfg.validate()?;
    let s = cfg.seeds();
    let student = match cfg.distill.init {
        StudentInit::Adapt => adapt_init(teacher)?,
        StudentInit::Fresh => {
            DualTimeVelocityNet::init(teacher.arch().clone(), &mut s.rng("student-init"))?
        }
    };
    train_student(teacher, student, train, &cfg.distill, &mut s.rng("distill"))
}

pub fn schedule_metric<'a>(
    cfg: &RunConfig,
    student: &'a DualTimeVelocityNet,
    dev: &SampleBatch,
) -> Result<SwdMetric<'a, DualTimeVelocityNet>> {
    SwdMetric::new(
        student,
        dev.clone(),
        cfg.o3s.metric_batch,
        cfg.seeds().seed("o3s"),
        cfg.eval.projections,
        PROJECTION_SEED,
    )
}

pub fn run_o3s(
    cfg: &RunConfig,
    student: &DualTimeVelocityNet,
    dev: &SampleBatch,
    nfe: usize,
) -> std::result::Result<O3sResult, SearchAborted> {
    let metric =
        schedule_metric(cfg, student, dev).map_err(|error| SearchAborted { error, log: vec![] })?;
    o3s_search(&metric, nfe, &cfg.o3s.search_config())
}

/// Generated samples compared against the held-out reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub nfe: usize,
    pub schedule: StepSchedule,
    pub swd: f64,
    pub mmd: f64,
    pub mmd_raw: f64,
    pub noise_floor: f64,
    pub seconds: f64,
}

/// Fixed evaluation noise and labels. Labels come from an independent data
/// draw, so a perfect model scores at the noise floor.
pub struct EvalInputs {
    pub z0: ndarray::Array2<f64>,
    pub cond: Vec<Condition>,
    pub floor: f64,
}

pub fn eval_inputs(cfg: &RunConfig, spec: &DatasetSpec) -> Result<EvalInputs> {
    let s = cfg.seeds();
    let z0 = standard_normal(&mut s.rng("eval"), cfg.eval.count, spec.dim());
    let cond = sample_data(spec, cfg.eval.count, s.seed("eval-labels"))?.conditions();
    let floor = noise_floor(
        spec,
        cfg.eval.count,
        cfg.eval.floor_trials,
        s.seed("floor"),
        cfg.eval.projections,
    )?;
    Ok(EvalInputs { z0, cond, floor })
}

fn score(
    cfg: &RunConfig,
    samples: &ndarray::Array2<f64>,
    reference: &SampleBatch,
) -> Result<(f64, MmdEstimate)> {
    let d = swd(
        samples.view(),
        reference.points(),
        cfg.eval.projections,
        PROJECTION_SEED,
    )?;
    let k = cfg
        .eval
        .mmd_points
        .min(samples.nrows())
        .min(reference.len())
        .max(2);
    let mmd = mmd_rbf(
        samples.slice(ndarray::s![..k, ..]),
        reference.points().slice(ndarray::s![..k, ..]),
        cfg.eval.mmd_bandwidth,
    )?;
    Ok((d, mmd))
}

pub fn evaluate_teacher(
    cfg: &RunConfig,
    teacher: &VelocityNet,
    schedule: &StepSchedule,
    reference: &SampleBatch,
    inputs: &EvalInputs,
) -> Result<EvalReport> {
    let spec = cfg.validate()?;
    let watch = Stopwatch::start();
    let traj = sample(
        teacher,
        inputs.z0.view(),
        schedule,
        &inputs.cond,
        cfg.teacher_cfg(&spec),
    )?;
    let seconds = watch.elapsed_secs();
    let (d, mmd) = score(cfg, traj.last(), reference)?;
    Ok(EvalReport {
        model: "teacher".into(),
        nfe: schedule.nfe(),
        schedule: schedule.clone(),
        swd: d,
        mmd: mmd.value,
        mmd_raw: mmd.raw,
        noise_floor: inputs.floor,
        seconds,
    })
}

pub fn evaluate_student(
    cfg: &RunConfig,
    student: &DualTimeVelocityNet,
    schedule: &StepSchedule,
    reference: &SampleBatch,
    inputs: &EvalInputs,
) -> Result<EvalReport> {
    let watch = Stopwatch::start();
    let out = sample_student(student, inputs.z0.view(), schedule, &inputs.cond)?;
    let seconds = watch.elapsed_secs();
    let (d, mmd) = score(cfg, &out, reference)?;
    Ok(EvalReport {
        model: "student".into(),
        nfe: schedule.nfe(),
        schedule: schedule.clone(),
        swd: d,
        mmd: mmd.value,
        mmd_raw: mmd.raw,
        noise_floor: inputs.floor,
        seconds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Uniform,
    O3s,
}

impl std::fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleKind::Uniform => "uniform",
            ScheduleKind::O3s => "o3s",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub model: String,
    pub nfe: usize,
    pub schedule_kind: ScheduleKind,
    pub swd: f64,
    pub mmd: f64,
}

/// NFE grid evaluation; searched schedules are added for the student where their NFE is on its grid.
pub fn sweep(
    cfg: &RunConfig,
    teacher: Option<&VelocityNet>,
    student: Option<&DualTimeVelocityNet>,
    searched: &[StepSchedule],
    reference: &SampleBatch,
    inputs: &EvalInputs,
) -> Result<Vec<SweepRow>> {
    if teacher.is_none() && student.is_none() {
        return Err(Error::Argument(
            "sweep needs at least one checkpoint".into(),
        ));
    }
    let mut rows = Vec::new();
    let mut push = |model: &str, kind, r: EvalReport| {
        rows.push(SweepRow {
            model: model.into(),
            nfe: r.nfe,
            schedule_kind: kind,
            swd: r.swd,
            mmd: r.mmd,
        })
    };
    if let Some(t) = teacher {
        for &n in &cfg.eval.teacher_nfe_grid {
            push(
                "teacher",
                ScheduleKind::Uniform,
                evaluate_teacher(cfg, t, &StepSchedule::uniform(n)?, reference, inputs)?,
            );
        }
    }
    if let Some(s) = student {
        for &n in &cfg.eval.student_nfe_grid {
            push(
                "student",
                ScheduleKind::Uniform,
                evaluate_student(cfg, s, &StepSchedule::uniform(n)?, reference, inputs)?,
            );
            for sched in searched.iter().filter(|x| x.nfe() == n) {
                push(
                    "student",
                    ScheduleKind::O3s,
                    evaluate_student(cfg, s, sched, reference, inputs)?,
                );
            }
        }
    }
    Ok(rows)
}

pub fn write_sweep_csv<W: std::io::Write>(rows: &[SweepRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["model", "nfe", "schedule_kind", "swd", "mmd"])?;
    for r in rows {
        w.write_record([
            r.model.clone(),
            r.nfe.to_string(),
            r.schedule_kind.to_string(),
            r.swd.to_string(),
            r.mmd.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Training metadata stored inside checkpoints; excludes wall-clock data so
/// reruns produce identical files.
pub fn train_meta(cfg: &RunConfig, losses: &[f64]) -> serde_json::Value {
    serde_json::json!({
        "config": cfg,
        "steps": losses.len(),
        "final_loss": losses.last().copied(),
    })
}

pub fn teacher_checkpoint(cfg: &RunConfig, out: &TrainOutcome<VelocityNet>) -> Checkpoint {
    Checkpoint::from_teacher(&out.net, cfg.seed, train_meta(cfg, &out.losses))
}

pub fn student_checkpoint(cfg: &RunConfig, run: &StudentRun) -> Checkpoint {
    let mut meta = train_meta(cfg, &run.outcome.losses);
    meta["teacher_nfe"] = cfg.distill.teacher_nfe.into();
    Checkpoint::from_student(&run.outcome.net, cfg.seed, meta)
}

/// Median wall-clock seconds per distillation step, first 10 steps excluded.
pub fn median_distill_step(run: &StudentRun) -> Option<f64> {
    median_step_seconds(&run.step_seconds, 10)
}
