use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lightkd::arch::NetworkSpec;
use lightkd::checkpoint::{write_atomic, Checkpoint, CheckpointMeta};
use lightkd::compress::{self, CompressConfig};
use lightkd::config::RunConfig;
use lightkd::dataset::{generate, Dataset, SyntheticSpec};
use lightkd::distill::{self, determine_halting_epoch, prepare_models, DistillPlan, HaltingConfig, Lambdas, Scheme};
use lightkd::dropout::{self, DropoutConfig};
use lightkd::engine::MaskedModel;
use lightkd::error::Error;
use lightkd::metrics::{evaluate, leave_one_out, MetricsReport};
use lightkd::par::{self, Execution};
use lightkd::pipeline::{self, pretrain_teacher, PretrainConfig, Selection};
use lightkd::resource::{estimate_network, DeviceProfile, DeviceProfileFile};
use lightkd::training::{fit, SgdConfig};

const EXIT_INFEASIBLE: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_DIVERGED: u8 = 3;

/// Resource-aware distillation of lightweight classifiers.
///
/// Every flag can also be set through an environment variable named
/// `LIGHTKD_<FLAG>` (upper case, dashes as underscores), e.g. `LIGHTKD_SEED`.
#[derive(Parser, Debug)]
#[command(name = "lightkd", version)]
struct Cli {
    /// Run the engine sequentially instead of on the thread pool.
    #[arg(long, global = true, env = "LIGHTKD_SEQUENTIAL")]
    sequential: bool,
    /// Worker threads for the parallel engine.
    #[arg(long, global = true, env = "LIGHTKD_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case", tag = "command")]
enum Command {
    /// Cost a network on a device; exits 1 when the budget is not met.
    Estimate(EstimateArgs),
    /// Run iterative magnitude dropout on a trained model.
    Dropout(DropoutArgs),
    /// Factorize layers and reduce gates until the device budget is met.
    Compress(CompressArgs),
    /// Pretrain a teacher, or distill a student under a scheme.
    Train(TrainArgs),
    /// Full search: dropout sweep, compression, distillation, selection.
    Pipeline(PipelineArgs),
    /// Evaluate a checkpoint, optionally with a leave-one-class-out run.
    Eval(EvalArgs),
    /// Write a synthetic sensor dataset as CSV.
    Gendata(GendataArgs),
}

#[derive(Args, Debug, Serialize)]
struct EstimateArgs {
    #[arg(long, env = "LIGHTKD_ARCH")]
    arch: PathBuf,
    #[arg(long, env = "LIGHTKD_DEVICE")]
    device: PathBuf,
    /// Reference network for ratio budgets (defaults to `--arch`).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5, env = "LIGHTKD_OMEGA")]
    omega: f64,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct SplitArgs {
    #[arg(long, default_value_t = 1, env = "LIGHTKD_SPLIT_SEED")]
    split_seed: u64,
    #[arg(long, default_value_t = 0.3)]
    validation_fraction: f64,
}

impl SplitArgs {
    fn split(&self, data: &Dataset) -> lightkd::error::Result<(Dataset, Dataset)> {
        if data.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        data.split(1.0 - self.validation_fraction, self.split_seed)
    }
}

#[derive(Args, Debug, Serialize)]
struct SgdArgs {
    #[arg(long, default_value_t = 0.05, env = "LIGHTKD_ETA")]
    eta: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

impl SgdArgs {
    fn config(&self) -> SgdConfig {
        SgdConfig { eta: self.eta, batch_size: self.batch_size }
    }
}

#[derive(Args, Debug, Serialize)]
struct DropoutArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, env = "LIGHTKD_DATA")]
    data: PathBuf,
    /// Number of layers after the shared prefix to prune.
    #[arg(long)]
    layers: usize,
    #[arg(long, default_value_t = 0.5)]
    rate: f64,
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 20)]
    max_iteration: usize,
    #[arg(long, default_value_t = 7, env = "LIGHTKD_SEED")]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    sgd: SgdArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct CompressArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, env = "LIGHTKD_DEVICE")]
    device: PathBuf,
    /// Uncompressed reference for ratio budgets (defaults to the model itself).
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5, env = "LIGHTKD_OMEGA")]
    omega: f64,
    #[arg(long, default_value_t = 0.05)]
    rank_tolerance: f64,
    /// Last eligible layer (exclusive); defaults to all layers after the prefix.
    #[arg(long)]
    until: Option<usize>,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    #[arg(long, env = "LIGHTKD_DATA")]
    data: PathBuf,
    /// Architecture to pretrain (teacher mode).
    #[arg(long, env = "LIGHTKD_ARCH")]
    arch: Option<PathBuf>,
    /// Distillation scheme S1..S6; requires `--teacher`.
    #[arg(long)]
    scheme: Option<Scheme>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// Compressed student checkpoint (S5/S6) or spec source for other schemes.
    #[arg(long)]
    student: Option<PathBuf>,
    /// Student architecture for schemes that start from random weights.
    #[arg(long)]
    student_arch: Option<PathBuf>,
    #[arg(long, default_value_t = 20, env = "LIGHTKD_EPOCHS")]
    epochs: usize,
    /// Halting epoch; computed from the teacher's history when omitted.
    #[arg(long)]
    halt: Option<usize>,
    #[arg(long)]
    h_max: Option<usize>,
    /// Loss weights `l1,l2,l3`.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    lambdas: Option<Vec<f64>>,
    #[arg(long, default_value_t = lightkd::distill::DEFAULT_GRAD_CLIP)]
    grad_clip: f64,
    #[arg(long, default_value_t = 7, env = "LIGHTKD_SEED")]
    seed: u64,
    #[command(flatten)]
    split: SplitArgs,
    #[command(flatten)]
    sgd: SgdArgs,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct PipelineArgs {
    /// Run configuration JSON.
    #[arg(long, env = "LIGHTKD_CONFIG")]
    config: Option<PathBuf>,
    #[arg(long, env = "LIGHTKD_ARCH")]
    arch: Option<PathBuf>,
    #[arg(long, env = "LIGHTKD_DEVICE")]
    device: Option<PathBuf>,
    #[arg(long, env = "LIGHTKD_DATA")]
    data: Option<PathBuf>,
    #[arg(long)]
    teacher: Option<PathBuf>,
    #[arg(long, env = "LIGHTKD_OUT_DIR")]
    out_dir: Option<PathBuf>,
    #[arg(long, env = "LIGHTKD_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "LIGHTKD_OMEGA")]
    omega: Option<f64>,
    #[arg(long, env = "LIGHTKD_EPOCHS")]
    epochs: Option<usize>,
    #[arg(long)]
    h_max: Option<usize>,
    #[arg(long)]
    scheme: Option<Scheme>,
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long, env = "LIGHTKD_DATA")]
    data: PathBuf,
    /// Evaluate on every row instead of the validation split.
    #[arg(long)]
    all: bool,
    #[command(flatten)]
    split: SplitArgs,
    /// 1-based class to hold out; retrains the model's architecture twice.
    #[arg(long)]
    leave_out: Option<usize>,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 7, env = "LIGHTKD_SEED")]
    seed: u64,
    #[command(flatten)]
    sgd: SgdArgs,
    #[arg(long, short)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct GendataArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 16)]
    sensors: usize,
    #[arg(long, default_value_t = 2000)]
    instances: usize,
    #[arg(long, default_value_t = 7, env = "LIGHTKD_SEED")]
    seed: u64,
    #[arg(long, default_value_t = 1.5)]
    separation: f64,
    #[arg(long, default_value_t = 2)]
    components: usize,
    #[arg(long, default_value_t = 1.0)]
    noise: f64,
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    #[serde(flatten)]
    command: &'a Command,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    write_atomic(path, text.as_bytes()).with_context(|| format!("writing {}", path.display()))
}

fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

fn record_run(primary: &Path, command: &Command) -> Result<()> {
    write_json(
        &sibling(primary, ".run.json"),
        &RunRecord { tool: pipeline::TOOL, version: pipeline::VERSION, command },
    )
}

fn load_spec(path: &Path) -> Result<NetworkSpec> {
    NetworkSpec::load(path).with_context(|| format!("reading architecture {}", path.display()))
}

fn load_device(path: &Path, reference: &NetworkSpec) -> Result<DeviceProfile> {
    let file = DeviceProfileFile::load(path).with_context(|| format!("reading device profile {}", path.display()))?;
    Ok(file.resolve(reference)?)
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("reading checkpoint {}", path.display()))
}

fn load_data(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    Dataset::load_csv(path, classes).with_context(|| format!("reading dataset {}", path.display()))
}

fn estimate(args: &EstimateArgs) -> Result<u8> {
    let spec = load_spec(&args.arch)?;
    spec.ensure_valid()?;
    let reference = match &args.reference {
        Some(p) => load_spec(p)?,
        None => spec.clone(),
    };
    let device = load_device(&args.device, &reference)?;
    let report = estimate_network(&spec, &device, args.omega)?;
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    eprintln!(
        "{}: params {} flops {} t_mem {:.4e} (alpha {:.4e}) t_exec {:.4e} (beta {:.4e}) -> {}",
        spec.name,
        report.total_params,
        report.total_flops,
        report.t_mem,
        report.alpha,
        report.t_exec,
        report.beta,
        if report.feasible { "feasible" } else { "infeasible" }
    );
    Ok(if report.feasible { 0 } else { EXIT_INFEASIBLE })
}

fn run_dropout(args: &DropoutArgs) -> Result<u8> {
    let ckpt = load_checkpoint(&args.model)?;
    let data = load_data(&args.data, Some(ckpt.model.spec.class_count))?;
    let (train_set, _) = args.split.split(&data)?;
    let reference = ckpt
        .meta
        .reference_loss
        .context("checkpoint has no reference loss; pretrain it with `lightkd train`")?;
    let cfg = DropoutConfig {
        initial_rate: args.rate,
        c: args.c,
        max_iteration: args.max_iteration,
        sgd: args.sgd.config(),
        seed: args.seed,
    };
    let outcome = dropout::run(&ckpt.model, &train_set, reference, args.layers, &cfg)?;
    let meta = CheckpointMeta { note: Some(format!("dropout on {} layers", args.layers)), ..ckpt.meta.clone() };
    Checkpoint::new(outcome.model.clone(), meta).save(&args.out)?;
    write_atomic(sibling(&args.out, ".dropout.json"), (outcome.log_json() + "\n").as_bytes())?;
    eprintln!(
        "{} rounds, kept round {}, connections {} -> {}",
        outcome.rounds.len(),
        outcome.kept_round,
        outcome.initial_connections,
        outcome.q_b
    );
    Ok(0)
}

fn run_compress(args: &CompressArgs) -> Result<u8> {
    let ckpt = load_checkpoint(&args.model)?;
    let reference = match &args.reference {
        Some(p) => load_spec(p)?,
        None => ckpt.model.spec.clone(),
    };
    let device = load_device(&args.device, &reference)?;
    let spec = &ckpt.model.spec;
    let eligible = spec.shared()..args.until.unwrap_or(spec.layers.len()).min(spec.layers.len());
    let cfg = CompressConfig { omega: args.omega, rank_tolerance: args.rank_tolerance };
    let outcome = compress::run(&ckpt.model, &device, eligible, &cfg)?;
    write_atomic(sibling(&args.out, ".compress.json"), (outcome.log_json() + "\n").as_bytes())?;
    let meta = CheckpointMeta { note: Some("compressed".into()), ..ckpt.meta.clone() };
    Checkpoint::new(outcome.model.clone(), meta).save(&args.out)?;
    eprintln!(
        "{} -> {}; {} rewrites; {}",
        spec.summary(),
        outcome.model.spec.summary(),
        outcome.rewrites.len(),
        if outcome.feasible { "feasible" } else { "infeasible" }
    );
    Ok(if outcome.feasible { 0 } else { EXIT_INFEASIBLE })
}

fn run_train(args: &TrainArgs) -> Result<u8> {
    let Some(scheme) = args.scheme else {
        let arch = args.arch.as_deref().context("teacher mode needs --arch")?;
        let spec = load_spec(arch)?;
        let data = load_data(&args.data, Some(spec.class_count))?;
        let cfg = PretrainConfig {
            epochs: args.epochs,
            sgd: args.sgd.config(),
            seed: args.seed,
            split_seed: args.split.split_seed,
            validation_fraction: args.split.validation_fraction,
        };
        let ckpt = pretrain_teacher(&spec, &data, &cfg)?;
        ckpt.save(&args.out)?;
        eprintln!(
            "pretrained {}: reference loss {:.6}, validation accuracy {:.4}",
            spec.name,
            ckpt.meta.reference_loss.unwrap_or(f64::NAN),
            ckpt.meta.validation_accuracy.last().copied().unwrap_or(0.0)
        );
        return Ok(0);
    };

    let teacher = load_checkpoint(args.teacher.as_deref().context("distillation needs --teacher")?)?;
    let data = load_data(&args.data, Some(teacher.model.spec.class_count))?;
    let (train_set, validation) = args.split.split(&data)?;
    let compressed = args.student.as_deref().map(load_checkpoint).transpose()?;
    let student_spec = match (&args.student_arch, &compressed) {
        (Some(p), _) => load_spec(p)?,
        (None, Some(c)) => c.model.spec.clone(),
        (None, None) => teacher.model.spec.clone(),
    };
    let lambdas = match &args.lambdas {
        Some(v) => Lambdas::new(v[0], v[1], v[2])?,
        None => Lambdas::uniform(),
    };
    let halting = HaltingConfig { h_max: args.h_max.unwrap_or(usize::MAX), ..Default::default() };
    let halt = args
        .halt
        .unwrap_or_else(|| determine_halting_epoch(&teacher.meta.validation_accuracy, &halting))
        .min(args.epochs.saturating_sub(1));
    let plan = DistillPlan {
        lambdas,
        halting_epoch: halt,
        total_epochs: args.epochs,
        scheme,
        shared_prefix: teacher.model.spec.shared(),
        eta: args.sgd.eta,
        batch_size: args.sgd.batch_size,
        seed: args.seed,
        grad_clip: args.grad_clip,
    };
    let models = prepare_models(
        scheme,
        &student_spec,
        compressed.as_ref().map(|c| &c.model),
        &teacher.model.spec,
        plan.shared_prefix,
        args.seed,
    )?;
    let outcome = distill::train(models, &teacher.model, &train_set, &validation, &plan)?;
    write_atomic(sibling(&args.out, ".history.jsonl"), outcome.history_jsonl().as_bytes())?;
    let accuracy: Vec<f64> = outcome.history.iter().map(|r| r.validation_accuracy).collect();
    let meta = CheckpointMeta {
        reference_loss: None,
        validation_accuracy: accuracy,
        epochs: outcome.history.len(),
        note: Some(format!("{scheme} student, h = {}", outcome.halting_epoch)),
    };
    Checkpoint::new(outcome.student.clone(), meta).save(&args.out)?;
    if let Some(tr) = &outcome.trainee {
        Checkpoint::new(tr.clone(), CheckpointMeta::default()).save(sibling(&args.out, ".trainee.json"))?;
    }
    if let Some(tr) = &outcome.trainee_at_halt {
        Checkpoint::new(tr.clone(), CheckpointMeta::default()).save(sibling(&args.out, ".trainee-halt.json"))?;
    }
    if let Some(msg) = &outcome.diverged {
        eprintln!("training diverged: {msg}");
        return Ok(EXIT_DIVERGED);
    }
    eprintln!(
        "{scheme}: validation accuracy {:.4}, training FLOPs {}",
        outcome.final_accuracy(),
        outcome.total_flops()
    );
    Ok(0)
}

#[derive(Serialize)]
struct PipelineManifest<'a> {
    tool: &'static str,
    version: &'static str,
    run_config: &'a RunConfig,
    pipeline: &'a pipeline::Manifest,
}

fn run_pipeline(args: &PipelineArgs) -> Result<u8> {
    let mut cfg = match &args.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
        if v.is_some() {
            slot.clone_from(v);
        }
    };
    set(&mut cfg.architecture, &args.arch);
    set(&mut cfg.device, &args.device);
    set(&mut cfg.dataset, &args.data);
    set(&mut cfg.teacher, &args.teacher);
    if let Some(d) = &args.out_dir {
        cfg.output_dir.clone_from(d);
    }
    if let Some(s) = args.seed {
        cfg.pipeline.seed = s;
    }
    if let Some(o) = args.omega {
        cfg.pipeline.omega = o;
    }
    if let Some(e) = args.epochs {
        cfg.pipeline.epochs = e;
    }
    if let Some(h) = args.h_max {
        cfg.pipeline.halting.h_max = h;
    }
    if let Some(s) = args.scheme {
        cfg.pipeline.scheme = s;
    }
    cfg.validate()?;

    let arch = load_spec(cfg.require("architecture", &cfg.architecture)?)?;
    let data = load_data(cfg.require("dataset", &cfg.dataset)?, Some(arch.class_count))?;
    let device = load_device(cfg.require("device", &cfg.device)?, &arch)?;
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating {}", cfg.output_dir.display()))?;
    let teacher = match &cfg.teacher {
        Some(p) => load_checkpoint(p)?,
        None => {
            let t = pretrain_teacher(&arch, &data, &cfg.pretrain)?;
            t.save(cfg.output_dir.join("teacher.json"))?;
            t
        }
    };
    if teacher.model.spec != arch {
        bail!(Error::InvalidArgument("teacher checkpoint does not match the architecture file".into()));
    }

    let mut outcome = pipeline::run(&teacher, &data, &device, &cfg.pipeline)?;
    let m = &mut outcome.manifest;
    for (i, record) in m.candidates.iter_mut().enumerate() {
        if let Some(student) = &outcome.students[i] {
            let name = format!("candidate-l{}.json", record.l);
            Checkpoint::new(student.clone(), CheckpointMeta::default()).save(cfg.output_dir.join(&name))?;
            record.checkpoint = Some(name);
        }
        if let Some(h) = &outcome.histories[i] {
            write_atomic(
                cfg.output_dir.join(format!("candidate-l{}.history.jsonl", record.l)),
                h.history_jsonl().as_bytes(),
            )?;
        }
    }
    write_json(
        &cfg.output_dir.join("manifest.json"),
        &PipelineManifest { tool: pipeline::TOOL, version: pipeline::VERSION, run_config: &cfg, pipeline: m },
    )?;
    match &m.selection {
        Selection::Best { index, l, final_combined_loss, .. } => {
            let best: &MaskedModel = outcome.students[*index].as_ref().expect("selected candidate was trained");
            Checkpoint::new(best.clone(), CheckpointMeta { note: Some(format!("selected candidate l = {l}")), ..Default::default() })
                .save(cfg.output_dir.join("student.json"))?;
            eprintln!(
                "selected l = {l} ({}) with combined loss {final_combined_loss:.6}",
                m.candidates[*index].student.summary()
            );
            Ok(0)
        }
        Selection::AllInfeasible => {
            let diverged = m
                .candidates
                .iter()
                .any(|c| matches!(c.status, pipeline::CandidateStatus::Diverged { .. }));
            eprintln!("no feasible candidate among {} (see manifest.json)", m.candidates.len());
            Ok(if diverged && m.candidates.iter().any(|c| c.resource.feasible) { EXIT_DIVERGED } else { EXIT_INFEASIBLE })
        }
    }
}

fn run_eval(args: &EvalArgs) -> Result<u8> {
    let ckpt = load_checkpoint(&args.model)?;
    let data = load_data(&args.data, Some(ckpt.model.spec.class_count))?;
    let (train_set, validation) = args.split.split(&data)?;
    let test = if args.all { &data } else { &validation };

    #[derive(Serialize)]
    struct Report {
        metrics: MetricsReport,
        #[serde(skip_serializing_if = "Option::is_none")]
        leave_one_out: Option<LeaveOneOut>,
    }
    #[derive(Serialize)]
    struct LeaveOneOut {
        class: usize,
        all_classes: MetricsReport,
        held_out: MetricsReport,
    }

    let metrics = evaluate(&ckpt.model, test)?;
    let loo = match args.leave_out {
        None => None,
        Some(class) => {
            let c = class.checked_sub(1).context("classes are 1-based")?;
            let spec = ckpt.model.spec.clone();
            let sgd = args.sgd.config();
            let harness = |d: &Dataset| -> lightkd::error::Result<MaskedModel> {
                let mut m = MaskedModel::new(spec.clone(), args.seed)?;
                fit(&mut m, d, &Dataset::from_flat(Vec::new(), Vec::new(), d.width(), d.class_count())?, args.epochs, &sgd, args.seed)?;
                Ok(m)
            };
            let all = evaluate(&harness(&train_set)?, test)?;
            let held = leave_one_out(&train_set, test, c, harness)?;
            Some(LeaveOneOut { class, all_classes: all, held_out: held })
        }
    };
    let report = Report { metrics, leave_one_out: loo };
    let text = serde_json::to_string_pretty(&report)? + "\n";
    match &args.out {
        Some(p) => write_atomic(p, text.as_bytes())?,
        None => print!("{text}"),
    }
    eprintln!(
        "accuracy {:.4} (micro {:.4}), F1 {:.4}, precision {:.4} on {} rows",
        report.metrics.accuracy,
        report.metrics.micro_accuracy,
        report.metrics.f1,
        report.metrics.precision,
        report.metrics.instances
    );
    Ok(0)
}

fn gendata(args: &GendataArgs) -> Result<u8> {
    let data = generate(&SyntheticSpec {
        classes: args.classes,
        sensors: args.sensors,
        instances: args.instances,
        seed: args.seed,
        separation: args.separation,
        components: args.components,
        noise: args.noise,
    })?;
    write_atomic(&args.out, data.to_csv_string().as_bytes())?;
    eprintln!("wrote {} rows of {} sensors to {}", data.len(), data.width(), args.out.display());
    Ok(0)
}

fn primary_output(command: &Command) -> Option<PathBuf> {
    match command {
        Command::Estimate(a) => a.out.clone(),
        Command::Dropout(a) => Some(a.out.clone()),
        Command::Compress(a) => Some(a.out.clone()),
        Command::Train(a) => Some(a.out.clone()),
        Command::Pipeline(_) => None,
        Command::Eval(a) => a.out.clone(),
        Command::Gendata(a) => Some(a.out.clone()),
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    if cli.sequential {
        par::set_execution(Execution::Sequential);
    }
    if let Some(w) = cli.workers {
        if w == 0 {
            bail!(Error::InvalidArgument("workers must be >= 1".into()));
        }
        par::configure_workers(w);
    }
    let code = match &cli.command {
        Command::Estimate(a) => estimate(a)?,
        Command::Dropout(a) => run_dropout(a)?,
        Command::Compress(a) => run_compress(a)?,
        Command::Train(a) => run_train(a)?,
        Command::Pipeline(a) => run_pipeline(a)?,
        Command::Eval(a) => run_eval(a)?,
        Command::Gendata(a) => gendata(a)?,
    };
    if let Some(out) = primary_output(&cli.command) {
        record_run(&out, &cli.command)?;
    }
    Ok(code)
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Infeasible(_) | Error::AllInfeasible(_)) => EXIT_INFEASIBLE,
        Some(Error::Diverged(_)) => EXIT_DIVERGED,
        _ => EXIT_INPUT,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
