//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Point sets cross the boundary as flat `[x, y, label, x, y, label, ...]`
//! arrays, with label `-1` for unlabelled points.

use imf_core::data::{sample_data, DatasetName, DatasetSpec};
use imf_core::distill::{
    adapt_init, sample_student, teacher_displacement, train_student, DistillConfig, TimeInterval,
};
use imf_core::experiment::RunConfig;
use imf_core::field::RotationField;
use imf_core::flow::{
    sample, standard_normal, train_teacher, CfgConfig, SampleBatch, StepSchedule,
    TeacherTrainConfig,
};
use imf_core::nn::{Arch, Condition, DualTimeVelocityNet, VelocityNet};
use imf_core::o3s::{o3s_search, O3sConfig, SwdMetric};
use imf_core::rng::{rng_from_seed, Rng, SeedStreams, PROJECTION_SEED};
use rand::Rng as _;
use wasm_bindgen::prelude::*;

fn js_err(e: imf_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn flatten(points: ndarray::ArrayView2<f64>, labels: Option<&[usize]>) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.nrows() * 3);
    for (i, row) in points.outer_iter().enumerate() {
        out.push(row[0]);
        out.push(row[1]);
        out.push(labels.map_or(-1.0, |l| l[i] as f64));
    }
    out
}

/// Draws `count` points from `gauss8`, `moons` or `checkerboard`.
#[wasm_bindgen(js_name = sampleDataset)]
pub fn sample_dataset(name: &str, count: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    let spec = DatasetSpec::new(name.parse::<DatasetName>().map_err(js_err)?);
    let batch = sample_data(&spec, count, seed as u64).map_err(js_err)?;
    Ok(flatten(batch.points(), batch.labels()))
}

/// Mean error of the n-step average velocity on the rotation field against
/// its closed form, for n = 1, 2, 4, ..., 2^(levels-1). Returns `[n, error]` pairs.
#[wasm_bindgen(js_name = rotationConvergence)]
pub fn rotation_convergence(levels: u32, intervals: usize, seed: u32) -> Result<Vec<f64>, JsError> {
    convergence_table(levels, intervals, seed as u64).map_err(js_err)
}

pub fn convergence_table(levels: u32, intervals: usize, seed: u64) -> imf_core::Result<Vec<f64>> {
    let mut rng = rng_from_seed(seed);
    let cases: Vec<([f64; 2], TimeInterval)> = (0..intervals)
        .map(|_| {
            let angle = std::f64::consts::TAU * rng.gen::<f64>();
            let t = 0.9 * rng.gen::<f64>();
            let r = t + 0.05 + (1.0 - t - 0.05) * rng.gen::<f64>();
            Ok(([angle.cos(), angle.sin()], TimeInterval::new(t, r, 1e-3)?))
        })
        .collect::<imf_core::Result<_>>()?;
    let mut out = Vec::new();
    for level in 0..levels {
        let n = 1usize << level;
        let mut total = 0.0;
        for (z, iv) in &cases {
            let dt = iv.r() - iv.t();
            let disp = teacher_displacement(
                &RotationField,
                z,
                *iv,
                n,
                Condition::Null,
                CfgConfig::disabled(),
            )?;
            let (s, c) = dt.sin_cos();
            let exact = [c * z[0] - s * z[1] - z[0], s * z[0] + c * z[1] - z[1]];
            total += ((disp[0] - exact[0]).powi(2) + (disp[1] - exact[1]).powi(2)).sqrt() / dt;
        }
        out.push(n as f64);
        out.push(total / cases.len() as f64);
    }
    Ok(out)
}

/// A small teacher and student on gauss8, trained a chunk at a time.
#[wasm_bindgen]
pub struct Playground {
    config: RunConfig,
    train: SampleBatch,
    dev: SampleBatch,
    teacher: VelocityNet,
    student: Option<DualTimeVelocityNet>,
    rng: Rng,
    teacher_steps: usize,
    student_steps: usize,
}

#[wasm_bindgen]
impl Playground {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Playground, JsError> {
        Self::create(seed as u64).map_err(js_err)
    }

    #[wasm_bindgen(js_name = trainTeacher)]
    pub fn train_teacher(&mut self, steps: usize) -> Result<f64, JsError> {
        self.train_teacher_steps(steps).map_err(js_err)
    }

    /// Distills the current teacher; the first call initializes the student from it.
    pub fn distill(&mut self, steps: usize) -> Result<f64, JsError> {
        self.distill_steps(steps).map_err(js_err)
    }

    /// Student samples at `nfe` steps, on the searched schedule when `searched` is set.
    #[wasm_bindgen(js_name = sampleStudent)]
    pub fn sample_student(&self, nfe: usize, searched: bool) -> Result<Vec<f64>, JsError> {
        self.student_points(nfe, searched).map_err(js_err)
    }

    #[wasm_bindgen(js_name = sampleTeacher)]
    pub fn sample_teacher(&self, nfe: usize) -> Result<Vec<f64>, JsError> {
        self.teacher_points(nfe).map_err(js_err)
    }

    #[wasm_bindgen(getter, js_name = teacherSteps)]
    pub fn teacher_steps(&self) -> usize {
        self.teacher_steps
    }

    #[wasm_bindgen(getter, js_name = studentSteps)]
    pub fn student_steps(&self) -> usize {
        self.student_steps
    }
}

impl Playground {
    pub fn create(seed: u64) -> imf_core::Result<Self> {
        let mut config = RunConfig::default();
        config.seed = seed;
        config.arch.hidden = vec![64, 64];
        config.arch.m = 16;
        config.arch.cond_dim = 8;
        config.dataset.train_count = 4000;
        config.eval.count = 1024;
        config.eval.projections = 64;
        config.eval.floor_trials = 3;
        config.o3s.metric_batch = 512;
        config.teacher.batch = 128;
        config.teacher.lr = 3e-3;
        config.teacher.final_lr_fraction = 1.0;
        config.distill.batch = 64;
        config.distill.teacher_nfe = 8;
        config.distill.final_lr_fraction = 1.0;
        let spec = config.validate()?;
        let streams = SeedStreams::new(seed);
        let train = sample_data(&spec, config.dataset.train_count, streams.seed("data"))?;
        let dev = sample_data(&spec, config.o3s.metric_batch, streams.seed("dev"))?;
        let teacher = VelocityNet::init(config.arch(&spec), &mut streams.rng("init"))?;
        Ok(Self {
            config,
            train,
            dev,
            teacher,
            student: None,
            rng: streams.rng("training"),
            teacher_steps: 0,
            student_steps: 0,
        })
    }

    /// Returns the mean loss of the chunk.
    pub fn train_teacher_steps(&mut self, steps: usize) -> imf_core::Result<f64> {
        let cfg = TeacherTrainConfig {
            steps,
            ..self.config.teacher.clone()
        };
        let out = train_teacher(self.teacher.clone(), &self.train, &cfg, &mut self.rng)?;
        self.teacher = out.net;
        self.teacher_steps += steps;
        Ok(mean(&out.losses))
    }

    pub fn distill_steps(&mut self, steps: usize) -> imf_core::Result<f64> {
        let student = match self.student.take() {
            Some(s) => s,
            None => adapt_init(&self.teacher)?,
        };
        let cfg = DistillConfig {
            steps,
            ..self.config.distill.clone()
        };
        let run = train_student(&self.teacher, student, &self.train, &cfg, &mut self.rng)?;
        self.student = Some(run.outcome.net);
        self.student_steps += steps;
        Ok(mean(&run.outcome.losses))
    }

    fn inputs(
        &self,
    ) -> imf_core::Result<(ndarray::Array2<f64>, Vec<Condition>, Option<Vec<usize>>)> {
        let spec = self.config.validate()?;
        let streams = self.config.seeds();
        let z0 = standard_normal(&mut streams.rng("eval"), self.config.eval.count, spec.dim());
        let labels = sample_data(&spec, self.config.eval.count, streams.seed("eval-labels"))?;
        Ok((
            z0,
            labels.conditions(),
            labels.labels().map(<[usize]>::to_vec),
        ))
    }

    pub fn teacher_points(&self, nfe: usize) -> imf_core::Result<Vec<f64>> {
        let spec = self.config.validate()?;
        let (z0, cond, labels) = self.inputs()?;
        let traj = sample(
            &self.teacher,
            z0.view(),
            &StepSchedule::uniform(nfe)?,
            &cond,
            self.config.teacher_cfg(&spec),
        )?;
        Ok(flatten(traj.last().view(), labels.as_deref()))
    }

    pub fn student_points(&self, nfe: usize, searched: bool) -> imf_core::Result<Vec<f64>> {
        let student = self
            .student
            .as_ref()
            .ok_or_else(|| imf_core::Error::State("no student yet; distill first".into()))?;
        let schedule = if searched && nfe >= 2 {
            let metric = SwdMetric::new(
                student,
                self.dev.clone(),
                self.config.o3s.metric_batch,
                self.config.seeds().seed("o3s"),
                self.config.eval.projections,
                PROJECTION_SEED,
            )?;
            o3s_search(&metric, nfe, &O3sConfig::default())
                .map_err(|a| a.error)?
                .schedule
        } else {
            StepSchedule::uniform(nfe)?
        };
        let (z0, cond, labels) = self.inputs()?;
        let out = sample_student(student, z0.view(), &schedule, &cond)?;
        Ok(flatten(out.view(), labels.as_deref()))
    }

    pub fn arch(&self) -> &Arch {
        self.teacher.arch()
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}
