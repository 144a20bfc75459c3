//! `imf`: train a flow-matching teacher on toy data, distill a few-step
//! student, search its sampling schedule, and evaluate.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use imf_core::checkpoint::{Checkpoint, Model};
use imf_core::distill::{sample_student, write_timing_csv};
use imf_core::experiment::{self as exp, EvalReport, RunConfig, OUT_ROOT_ENV};
use imf_core::flow::{sample, write_loss_csv, SampleBatch, StepSchedule};
use imf_core::o3s::{write_audit_csv, AuditEntry};

#[derive(Parser)]
#[command(
    name = "imf",
    version,
    about = "Few-step flow sampling by integral velocity distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Args, Clone, Default)]
struct Opts {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory. Relative paths resolve under $IMF_OUT_ROOT when set.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    teacher: Option<PathBuf>,
    #[arg(long, global = true, value_name = "PATH")]
    student: Option<PathBuf>,
    /// Schedule JSON (array of times). Repeatable for `sweep`.
    #[arg(long, global = true, value_name = "PATH")]
    schedule: Vec<PathBuf>,
    #[arg(long, global = true, value_name = "INT")]
    nfe: Option<usize>,
    #[arg(long = "teacher-nfe", global = true, value_name = "INT")]
    teacher_nfe: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Write the train, reference and dev splits as CSV.
    GenData,
    /// Train the conditional flow-matching teacher.
    TrainTeacher,
    /// Distill a dual-time student from a teacher checkpoint.
    Distill,
    /// Search the student's sampling schedule.
    O3s,
    /// Draw samples from a checkpoint.
    Sample,
    /// Score a checkpoint against held-out data.
    Eval,
    /// Evaluate checkpoints over their NFE grids.
    Sweep,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainTeacher => "train-teacher",
            Command::Distill => "distill",
            Command::O3s => "o3s",
            Command::Sample => "sample",
            Command::Eval => "eval",
            Command::Sweep => "sweep",
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command, &cli.opts) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let numerical = e
        .chain()
        .filter_map(|c| c.downcast_ref::<imf_core::Error>())
        .any(|c| c.is_numerical());
    if numerical {
        2
    } else {
        1
    }
}

fn load_config(opts: &Opts) -> anyhow::Result<RunConfig> {
    let mut cfg = match &opts.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = opts.seed {
        cfg.seed = s;
    }
    if let Some(o) = &opts.out {
        cfg.out_dir = o.clone();
    }
    if let Some(n) = opts.teacher_nfe {
        cfg.distill.teacher_nfe = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> PathBuf {
    match std::env::var_os(OUT_ROOT_ENV) {
        Some(root) if cfg.out_dir.is_relative() => PathBuf::from(root).join(&cfg.out_dir),
        _ => cfg.out_dir.clone(),
    }
}

fn create(path: &Path) -> anyhow::Result<BufWriter<File>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_checkpoint(path: Option<&PathBuf>, what: &str) -> anyhow::Result<Checkpoint> {
    let Some(p) = path else {
        bail!(imf_core::Error::Argument(format!(
            "--{what} PATH is required"
        )))
    };
    Checkpoint::load(p).with_context(|| format!("loading {what} checkpoint {}", p.display()))
}

fn load_schedule(path: &Path) -> anyhow::Result<StepSchedule> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading schedule {}", path.display()))?;
    Ok(StepSchedule::from_json(&text)?)
}

fn run(cmd: Command, opts: &Opts) -> anyhow::Result<()> {
    let mut cfg = load_config(opts)?;
    if let (Command::O3s, Some(n)) = (cmd, opts.nfe) {
        cfg.o3s.nfe = n;
    }
    let dir = out_dir(&cfg);
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating output directory {}", dir.display()))?;
    write_text(
        &dir.join(format!("config.{}.json", cmd.name())),
        &cfg.to_json_pretty(),
    )?;
    match cmd {
        Command::GenData => gen_data(&cfg, &dir),
        Command::TrainTeacher => train_teacher(&cfg, &dir),
        Command::Distill => distill(&cfg, opts, &dir),
        Command::O3s => o3s(&cfg, opts, &dir),
        Command::Sample => sample_cmd(&cfg, opts, &dir),
        Command::Eval => eval(&cfg, opts, &dir),
        Command::Sweep => sweep(&cfg, opts, &dir),
    }
}

fn gen_data(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let s = exp::splits(cfg)?;
    for (name, batch) in [
        ("train", &s.train),
        ("reference", &s.reference),
        ("dev", &s.dev),
    ] {
        let path = dir.join(format!("{name}.csv"));
        batch.write_csv(create(&path)?)?;
        println!("{name}: {} rows -> {}", batch.len(), path.display());
    }
    Ok(())
}

fn train_teacher(cfg: &RunConfig, dir: &Path) -> anyhow::Result<()> {
    let s = exp::splits(cfg)?;
    let out = exp::run_teacher(cfg, &s.train)?;
    let path = dir.join("teacher.json");
    exp::teacher_checkpoint(cfg, &out).save(&path)?;
    write_loss_csv(&out.losses, create(&dir.join("teacher_loss.csv"))?)?;
    let inputs = exp::eval_inputs(cfg, &s.spec)?;
    let schedule = StepSchedule::uniform(cfg.eval.teacher_nfe)?;
    let report = exp::evaluate_teacher(cfg, &out.net, &schedule, &s.reference, &inputs)?;
    write_report(&dir.join("teacher_eval.json"), &report)?;
    println!("teacher -> {}", path.display());
    println!(
        "final loss {:.5}; {}-NFE swd {:.4} (noise floor {:.4}, ratio {:.2})",
        out.losses.last().copied().unwrap_or(f64::NAN),
        report.nfe,
        report.swd,
        report.noise_floor,
        report.swd / report.noise_floor
    );
    Ok(())
}

fn distill(cfg: &RunConfig, opts: &Opts, dir: &Path) -> anyhow::Result<()> {
    let teacher = load_checkpoint(opts.teacher.as_ref(), "teacher")?.to_teacher()?;
    let s = exp::splits(cfg)?;
    let run = exp::run_distill(cfg, &teacher, &s.train)?;
    let path = dir.join("student.json");
    exp::student_checkpoint(cfg, &run).save(&path)?;
    write_loss_csv(&run.outcome.losses, create(&dir.join("student_loss.csv"))?)?;
    write_timing_csv(
        &run.step_seconds,
        cfg.distill.teacher_nfe,
        create(&dir.join("timing.csv"))?,
    )?;
    println!("student -> {}", path.display());
    match exp::median_distill_step(&run) {
        Some(m) => println!(
            "teacher NFE {}: median {:.4} s/step",
            cfg.distill.teacher_nfe, m
        ),
        None => println!(
            "teacher NFE {}: too few steps to time",
            cfg.distill.teacher_nfe
        ),
    }
    Ok(())
}

fn write_audit(path: &Path, log: &[AuditEntry]) -> anyhow::Result<()> {
    write_audit_csv(log, create(path)?)?;
    Ok(())
}

fn o3s(cfg: &RunConfig, opts: &Opts, dir: &Path) -> anyhow::Result<()> {
    let student = load_checkpoint(opts.student.as_ref(), "student")?.to_student()?;
    let s = exp::splits(cfg)?;
    let n = cfg.o3s.nfe;
    let audit = dir.join(format!("audit_n{n}.csv"));
    match exp::run_o3s(cfg, &student, &s.dev, n) {
        Ok(res) => {
            write_audit(&audit, &res.log)?;
            let path = dir.join(format!("schedule_n{n}.json"));
            write_text(&path, &res.schedule.to_json())?;
            let uniform = res.log.first().map(|e| e.metric).unwrap_or(f64::NAN);
            println!("schedule {} -> {}", res.schedule.to_json(), path.display());
            println!(
                "metric {:.5} (uniform {:.5}) after {} evaluations",
                res.metric,
                uniform,
                res.log.len()
            );
            Ok(())
        }
        Err(aborted) => {
            write_audit(&audit, &aborted.log)?;
            Err(anyhow::Error::new(aborted.error).context("schedule search aborted"))
        }
    }
}

/// Schedule from --schedule, else uniform with --nfe, else the model's default.
fn pick_schedule(opts: &Opts, default_nfe: usize) -> anyhow::Result<(StepSchedule, &'static str)> {
    match opts.schedule.as_slice() {
        [] => Ok((
            StepSchedule::uniform(opts.nfe.unwrap_or(default_nfe))?,
            "uniform",
        )),
        [one] => Ok((load_schedule(one)?, "schedule")),
        _ => bail!(imf_core::Error::Argument(
            "give at most one --schedule".into()
        )),
    }
}

fn model_arg(opts: &Opts) -> anyhow::Result<Model> {
    let ck = match (&opts.teacher, &opts.student) {
        (Some(_), Some(_)) => bail!(imf_core::Error::Argument(
            "give either --teacher or --student, not both".into()
        )),
        (Some(p), None) => {
            let ck = load_checkpoint(Some(p), "teacher")?;
            ck.to_teacher()?;
            ck
        }
        (None, Some(p)) => {
            let ck = load_checkpoint(Some(p), "student")?;
            ck.to_student()?;
            ck
        }
        (None, None) => bail!(imf_core::Error::Argument(
            "--teacher or --student PATH is required".into()
        )),
    };
    Ok(ck.to_model()?)
}

fn sample_cmd(cfg: &RunConfig, opts: &Opts, dir: &Path) -> anyhow::Result<()> {
    let model = model_arg(opts)?;
    let spec = cfg.validate()?;
    let inputs = exp::eval_inputs(cfg, &spec)?;
    let (points, schedule) = match &model {
        Model::Teacher(t) => {
            let (sch, _) = pick_schedule(opts, cfg.eval.teacher_nfe)?;
            (
                sample(
                    t,
                    inputs.z0.view(),
                    &sch,
                    &inputs.cond,
                    cfg.teacher_cfg(&spec),
                )?
                .into_last(),
                sch,
            )
        }
        Model::Student(s) => {
            let (sch, _) = pick_schedule(opts, cfg.o3s.nfe)?;
            (
                sample_student(s, inputs.z0.view(), &sch, &inputs.cond)?,
                sch,
            )
        }
    };
    let labels = inputs
        .cond
        .iter()
        .map(|c| c.label())
        .collect::<Option<Vec<_>>>();
    let batch = SampleBatch::new(points, labels)?;
    let path = dir.join("samples.csv");
    batch.write_csv(create(&path)?)?;
    println!(
        "{} samples with schedule {} -> {}",
        batch.len(),
        schedule.to_json(),
        path.display()
    );
    Ok(())
}

fn write_report(path: &Path, report: &EvalReport) -> anyhow::Result<()> {
    write_text(path, &serde_json::to_string_pretty(report)?)
}

fn eval(cfg: &RunConfig, opts: &Opts, dir: &Path) -> anyhow::Result<()> {
    let model = model_arg(opts)?;
    let s = exp::splits(cfg)?;
    let inputs = exp::eval_inputs(cfg, &s.spec)?;
    let (report, kind) = match &model {
        Model::Teacher(t) => {
            let (sch, kind) = pick_schedule(opts, cfg.eval.teacher_nfe)?;
            (
                exp::evaluate_teacher(cfg, t, &sch, &s.reference, &inputs)?,
                kind,
            )
        }
        Model::Student(st) => {
            let (sch, kind) = pick_schedule(opts, cfg.o3s.nfe)?;
            (
                exp::evaluate_student(cfg, st, &sch, &s.reference, &inputs)?,
                kind,
            )
        }
    };
    let path = dir.join(format!(
        "eval_{}_nfe{}_{}.json",
        report.model, report.nfe, kind
    ));
    write_report(&path, &report)?;
    println!(
        "{} nfe {}: swd {:.4} mmd {:.5} (noise floor {:.4}) -> {}",
        report.model,
        report.nfe,
        report.swd,
        report.mmd,
        report.noise_floor,
        path.display()
    );
    Ok(())
}

fn sweep(cfg: &RunConfig, opts: &Opts, dir: &Path) -> anyhow::Result<()> {
    let teacher = match &opts.teacher {
        Some(p) => Some(load_checkpoint(Some(p), "teacher")?.to_teacher()?),
        None => None,
    };
    let student = match &opts.student {
        Some(p) => Some(load_checkpoint(Some(p), "student")?.to_student()?),
        None => None,
    };
    let searched = opts
        .schedule
        .iter()
        .map(|p| load_schedule(p))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let s = exp::splits(cfg)?;
    let inputs = exp::eval_inputs(cfg, &s.spec)?;
    let rows = exp::sweep(
        cfg,
        teacher.as_ref(),
        student.as_ref(),
        &searched,
        &s.reference,
        &inputs,
    )?;
    let path = dir.join("sweep.csv");
    exp::write_sweep_csv(&rows, create(&path)?)?;
    for r in &rows {
        println!(
            "{:<8} {:<8} nfe {:>2}: swd {:.4} mmd {:.5}",
            r.model, r.schedule_kind, r.nfe, r.swd, r.mmd
        );
    }
    println!("{} rows -> {}", rows.len(), path.display());
    Ok(())
}
