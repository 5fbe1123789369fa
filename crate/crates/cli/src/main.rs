use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use posediff::datagen::{generate_dataset, make_object, read_dataset, write_dataset, GenConfig, TemplateDistribution};
use posediff::harness::{
    ablate, evaluate, infer, plot, train, write_report, AblationAxis, AblationConfig, Checkpoint,
    InferOptions, Predictor, TrainConfig,
};
use posediff::model::PoseNet;
use posediff::Error;
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "posediff", version, about = "Pose-map diffusion toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a toy dataset.
    GenData(GenArgs),
    /// Train a coarse or fine predictor.
    Train(TrainArgs),
    /// Estimate the pose of one dataset sample.
    Infer(InferArgs),
    /// Evaluate checkpoints on a dataset.
    Eval(EvalArgs),
    /// Run an ablation sweep.
    Ablate(AblateArgs),
    /// Plot a CSV file as SVG.
    Plot(PlotArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Dist {
    Fixed,
    Random,
    Local,
}

#[derive(Args, Debug)]
struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Generator config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    templates: Option<usize>,
    #[arg(long)]
    objects: Option<usize>,
    #[arg(long)]
    k_points: Option<usize>,
    /// Use objects disjoint from the default object set.
    #[arg(long)]
    unseen: bool,
    #[arg(long, value_enum)]
    distribution: Option<Dist>,
    #[arg(long, default_value_t = 30.0)]
    max_rot_deg: f64,
    #[arg(long, default_value_t = 0.05)]
    max_trans_m: f64,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum PredictorArg {
    Coarse,
    Fine,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Training config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_enum)]
    predictor: Option<PredictorArg>,
    #[arg(long)]
    absolute_pose: bool,
    #[arg(long)]
    single_view: bool,
    #[arg(long)]
    no_template_pose: bool,
}

#[derive(Args, Debug)]
struct StageArgs {
    /// Coarse-stage checkpoint.
    #[arg(long)]
    coarse: PathBuf,
    /// Optional fine-stage checkpoint.
    #[arg(long)]
    fine: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    /// Inference options (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    hypotheses: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct InferArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Write the result here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    stage: StageArgs,
    #[arg(long)]
    out: PathBuf,
    /// Evaluate only the first N samples.
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args, Debug)]
struct AblateArgs {
    #[arg(long, value_parser = parse_axis)]
    axis: AblationAxis,
    /// Ablation config (JSON); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated training seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    eval_samples: Option<usize>,
}

#[derive(Args, Debug)]
struct PlotArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
}

fn parse_axis(s: &str) -> Result<AblationAxis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn load_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> posediff::Result<T> {
    let Some(p) = path else {
        return Ok(T::default());
    };
    let text = fs::read_to_string(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: p.to_path_buf(),
        source: e,
    })
}

fn gen_data(a: GenArgs) -> posediff::Result<()> {
    let mut cfg: GenConfig = load_json(a.config.as_deref())?;
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.samples {
        cfg.samples = v;
    }
    if let Some(v) = a.templates {
        cfg.templates = v;
    }
    if let Some(v) = a.objects {
        cfg.objects = v;
    }
    if let Some(v) = a.k_points {
        cfg.k_points = v;
    }
    cfg.unseen_objects |= a.unseen;
    match a.distribution {
        Some(Dist::Fixed) => cfg.distribution = TemplateDistribution::Fixed,
        Some(Dist::Random) => cfg.distribution = TemplateDistribution::Random,
        Some(Dist::Local) => {
            cfg.distribution = TemplateDistribution::Local {
                max_rot_deg: a.max_rot_deg,
                max_trans_m: a.max_trans_m,
            }
        }
        None => {}
    }
    let samples = generate_dataset(&cfg)?;
    let m = write_dataset(&a.out, &cfg, &samples)?;
    println!("wrote {} samples to {}", m.sample_count, a.out.display());
    Ok(())
}

fn train_cmd(a: TrainArgs) -> posediff::Result<()> {
    let mut cfg: TrainConfig = load_json(a.config.as_deref())?;
    if let Some(v) = a.out {
        cfg.out_dir = v;
    }
    if a.dataset.is_some() {
        cfg.dataset = a.dataset;
    }
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr {
        cfg.lr = v;
    }
    match a.predictor {
        Some(PredictorArg::Coarse) => cfg.predictor = Predictor::Coarse,
        Some(PredictorArg::Fine) => cfg.predictor = Predictor::Fine,
        None => {}
    }
    cfg.model.absolute_pose |= a.absolute_pose;
    cfg.model.single_view |= a.single_view;
    if a.no_template_pose {
        cfg.model.condition_template_pose = false;
    }
    let out = train(&cfg)?;
    let last = out.log.last().map_or(f64::NAN, |r| r.loss_total);
    println!("final loss {last:.6}; checkpoint {}", out.checkpoint.display());
    Ok(())
}

struct Loaded {
    coarse: Checkpoint,
    fine: Option<Checkpoint>,
    opts: InferOptions,
}

fn load_stages(a: &StageArgs) -> posediff::Result<Loaded> {
    let mut opts: InferOptions = load_json(a.config.as_deref())?;
    if let Some(v) = a.hypotheses {
        opts.hypotheses = v;
    }
    if let Some(v) = a.seed {
        opts.seed = v;
    }
    let coarse = Checkpoint::load(&a.coarse)?;
    let fine = a.fine.as_deref().map(Checkpoint::load).transpose()?;
    if let Some(f) = &fine {
        opts.fine_rot_deg = f.config.fine_rot_deg;
        opts.fine_trans_m = f.config.fine_trans_m;
        opts.fine_templates = f.config.model.templates;
    }
    Ok(Loaded { coarse, fine, opts })
}

fn infer_cmd(a: InferArgs) -> posediff::Result<()> {
    let l = load_stages(&a.stage)?;
    let ds = read_dataset(&a.stage.dataset)?;
    let mut opts = l.opts.clone();
    opts.render = ds.manifest.generator.render;
    let s = ds
        .samples
        .get(a.index)
        .ok_or_else(|| Error::Config(format!("sample {} out of range ({} samples)", a.index, ds.samples.len())))?;
    let cs = l.coarse.config.schedule.build()?;
    let fine = match &l.fine {
        Some(f) => Some((&f.net, f.config.schedule.build()?)),
        None => None,
    };
    let obj = make_object(s.object_id, ds.manifest.k_points)?;
    let r = infer(
        (&l.coarse.net, &cs),
        fine.as_ref().map(|(n, s)| (*n, s)),
        &s.query,
        &s.templates,
        Some(&obj),
        &opts,
    )?;
    let text = serde_json::to_string_pretty(&json!({
        "index": a.index,
        "pose": r.pose,
        "ground_truth": s.query.pose,
        "hypotheses": r.hypotheses,
        "coarse": r.coarse.pose,
        "warning": r.warning,
    }))
    .expect("poses serialize");
    match a.out {
        Some(p) => fs::write(&p, text).map_err(|e| Error::Io { path: p, source: e })?,
        None => println!("{text}"),
    }
    Ok(())
}

fn eval_cmd(a: EvalArgs) -> posediff::Result<()> {
    let l = load_stages(&a.stage)?;
    let ds = read_dataset(&a.stage.dataset)?;
    let mut opts = l.opts.clone();
    opts.render = ds.manifest.generator.render;
    let n = a.limit.unwrap_or(ds.samples.len()).min(ds.samples.len());
    let cs = l.coarse.config.schedule.build()?;
    let fine = match &l.fine {
        Some(f) => Some((&f.net, f.config.schedule.build()?)),
        None => None,
    };
    let report = evaluate::<_, PoseNet<f32>>(
        (&l.coarse.net, &cs),
        fine.as_ref().map(|(n, s)| (*n, s)),
        &ds.samples[..n],
        Some(ds.manifest.k_points),
        &opts,
    )?;
    write_report(&report, &a.out)?;
    println!(
        "median rotation error {:.2} deg, median depth error {:.2}%, recall@5deg {:.3}",
        report.summary.median_rot_deg,
        100.0 * report.summary.median_depth_rel,
        report.summary.recall_5deg
    );
    Ok(())
}

fn ablate_cmd(a: AblateArgs) -> posediff::Result<()> {
    let mut cfg: AblationConfig = load_json(a.config.as_deref())?;
    if let Some(v) = a.out {
        cfg.out_dir = v;
    }
    if let Some(v) = a.seeds {
        cfg.seeds = v;
    }
    if let Some(v) = a.steps {
        cfg.train.steps = v;
    }
    if let Some(v) = a.eval_samples {
        cfg.eval.samples = v;
    }
    let rows = ablate(a.axis, &cfg)?;
    for r in &rows {
        println!("{} seed {}: median rotation error {:.2} deg", r.setting, r.seed, r.median_rot_deg);
    }
    Ok(())
}

/// 1: usage or configuration, 2: data or format, 3: numeric failure.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 1,
        Error::Numeric { .. } => 3,
        _ => 2,
    }
}

fn run(args: impl IntoIterator<Item = OsString>) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let res = match cli.cmd {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Ablate(a) => ablate_cmd(a),
        Command::Plot(a) => plot(&a.input, &a.output),
    };
    match res {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    ExitCode::from(run(std::env::args_os()))
}
