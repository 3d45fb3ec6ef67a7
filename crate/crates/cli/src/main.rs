use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use flattenet::complexity::{self, baselines, Backbone};
use flattenet::gradcheck::{self, GradCheckReport, DEFAULT_EPS, DEFAULT_TOL};
use flattenet::head::equivalence::check_config;
use flattenet::head::{shipped, FlattenConfig, TargetKind};
use flattenet::io::{self, AnyTensor};
use flattenet::shuffle::{self, Rearrangement};
use flattenet::toylab::{
    evaluate, narrow_backbone, protocol, toy_model, train_with, OptimConfig, OptimKind, Schedule, SyntheticTask, TaskKind,
    TrainOptions,
};
use flattenet::{Error, FlatteNet, Formulation, Scalar, Tensor};

#[derive(Parser)]
#[command(name = "flattenet", version, about = "Flattening Module toolkit: complexity, checks, toy training, tensor files")]
struct Cli {
    /// RNG seed (mandatory for `train`).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = DType::F64)]
    dtype: DType,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DType {
    F32,
    F64,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Cmd {
    /// Parameter and MAC counts of a head, optionally on a backbone.
    Describe(DescribeArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Shuffle round-trips, equivalence and density checks on every shipped config.
    Selftest(SelftestArgs),
    /// Train on a synthetic task; writes history.jsonl, run.json and checkpoint/.
    Train(TrainArgs),
    /// Evaluate a trained run directory.
    Eval(EvalArgs),
    /// Write a FLT1 tensor file.
    Dump(DumpArgs),
    /// Read a FLT1 tensor file.
    Load(LoadArgs),
}

#[derive(Args)]
struct DescribeArgs {
    /// Shipped config name or JSON path.
    #[arg(long, default_value = "table1")]
    config: String,
    /// resnet50, resnet101, toy or none.
    #[arg(long, default_value = "resnet50")]
    backbone: String,
    /// Input side in pixels (feature side with `--backbone none`). Default 256, or 8 without a backbone.
    #[arg(long)]
    input: Option<usize>,
    /// Describe an ablation baseline on a 2048-channel 8×8 input instead.
    #[arg(long, value_enum)]
    baseline: Option<Baseline>,
    /// Print every layer.
    #[arg(long)]
    layers: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Regular,
    Naive,
}

#[derive(Args)]
#[group(required = true, multiple = false, id = "which")]
struct GradcheckTarget {
    /// One op, see `--list`.
    #[arg(long)]
    op: Option<String>,
    #[arg(long)]
    all: bool,
    #[arg(long)]
    list: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[command(flatten)]
    target: GradcheckTarget,
    #[arg(long, default_value_t = DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = DEFAULT_TOL)]
    tol: f64,
}

#[derive(Args)]
struct SelftestArgs {
    /// Extra config files to check alongside the shipped ones.
    #[arg(long)]
    config: Vec<PathBuf>,
}

#[derive(Args)]
struct TaskArgs {
    #[arg(long, default_value = "keypoints")]
    task: String,
    #[arg(long, default_value_t = 64)]
    image_size: usize,
    /// Keypoints K or classes C (background included).
    #[arg(long)]
    count: Option<usize>,
    /// Heatmap σ in heatmap pixels.
    #[arg(long)]
    sigma: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "table1")]
    config: String,
    /// Use the reference head and image size for subsampling depth 5, 6 or 7.
    #[arg(long, conflicts_with_all = ["config", "image_size"])]
    depth: Option<usize>,
    #[command(flatten)]
    task: TaskArgs,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 20)]
    steps: usize,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long, value_enum, default_value_t = Optim::Adam)]
    optim: Optim,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Polynomial decay power; constant learning rate when absent.
    #[arg(long)]
    poly: Option<f64>,
    #[arg(long, value_enum, default_value_t = Form::Unfolded)]
    formulation: Form,
    /// Cycle over this many fixed batches instead of drawing fresh ones.
    #[arg(long)]
    dataset_batches: Option<u64>,
    #[arg(long, default_value_t = 16)]
    eval_size: usize,
    #[arg(long, default_value = "run")]
    out: PathBuf,
    #[arg(long)]
    quiet: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Optim {
    Adam,
    Sgd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Form {
    Unfolded,
    Folded,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory written by `train`.
    run: PathBuf,
    #[arg(long, default_value_t = 64)]
    eval_size: usize,
}

#[derive(Args)]
struct DumpArgs {
    out: PathBuf,
    /// `n,c,h,w` of a seeded uniform tensor.
    #[arg(long, default_value = "1,3,4,4")]
    dims: String,
    /// Extract a tensor from a checkpoint directory instead.
    #[arg(long, requires = "tensor")]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    tensor: Option<String>,
}

#[derive(Args)]
struct LoadArgs {
    input: PathBuf,
    /// Re-encode the decoded tensor to this path.
    #[arg(long)]
    out: Option<PathBuf>,
}

enum Fail {
    Usage(String),
    Check(String),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) => Fail::Check(e.to_string()),
            other => Fail::Usage(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Fail {
    fn from(e: std::io::Error) -> Self {
        Fail::Usage(e.to_string())
    }
}

type Res<T = ()> = Result<T, Fail>;

struct Ctx {
    seed: Option<u64>,
    dtype: DType,
    json: bool,
}

impl Ctx {
    fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    fn emit(&self, value: &Value, text: impl FnOnce() -> String) {
        if self.json {
            out(&serde_json::to_string_pretty(value).expect("json value"));
        } else {
            out(&text());
        }
    }
}

// a closed pipe (`| head`) ends the program quietly
fn out(s: &str) {
    use std::io::Write;
    if writeln!(std::io::stdout().lock(), "{s}").is_err() {
        std::process::exit(0);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = std::env::var("FLATTENET_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        // ignore failure: the pool may already exist in embedding contexts
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let ctx = Ctx {
        seed: cli.seed,
        dtype: cli.dtype,
        json: cli.format == Format::Json,
    };
    let result = match cli.cmd {
        Cmd::Describe(a) => describe(&ctx, a),
        Cmd::Gradcheck(a) => gradcheck_cmd(&ctx, a),
        Cmd::Selftest(a) => selftest(&ctx, a),
        Cmd::Train(a) => match ctx.dtype {
            DType::F32 => train::<f32>(&ctx, a),
            DType::F64 => train::<f64>(&ctx, a),
        },
        Cmd::Eval(a) => match ctx.dtype {
            DType::F32 => eval::<f32>(&ctx, a),
            DType::F64 => eval::<f64>(&ctx, a),
        },
        Cmd::Dump(a) => dump(&ctx, a),
        Cmd::Load(a) => load(&ctx, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Fail::Check(m)) => {
            eprintln!("check failed: {m}");
            ExitCode::from(1)
        }
        Err(Fail::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
    }
}

fn load_config(name_or_path: &str) -> Res<FlattenConfig> {
    if let Some(cfg) = shipped::load(name_or_path) {
        return Ok(cfg);
    }
    let path = Path::new(name_or_path);
    if !path.exists() {
        let names: Vec<&str> = shipped::ALL.iter().map(|(n, _)| *n).collect();
        return Err(Fail::Usage(format!(
            "{name_or_path}: neither a shipped config ({}) nor a file",
            names.join(", ")
        )));
    }
    Ok(FlattenConfig::load(path)?)
}

fn describe(ctx: &Ctx, a: DescribeArgs) -> Res {
    let report = if let Some(b) = a.baseline {
        let side = a.input.unwrap_or(8);
        let d = match b {
            Baseline::Regular => baselines::regular_pointwise(side),
            Baseline::Naive => baselines::naive_conv3x3(side),
        };
        complexity::analyze(&d)?
    } else {
        let cfg = load_config(&a.config)?;
        cfg.validate()?;
        let backbone = match a.backbone.as_str() {
            "none" => None,
            other => Some(other.parse::<Backbone>()?),
        };
        let side = a.input.unwrap_or(if backbone.is_some() { 256 } else { 8 });
        let backbone_desc = backbone.map(|b| b.descriptor(side)).transpose()?;
        let report = complexity::describe(&cfg, backbone, (side, side))?;
        if let Some(bd) = backbone_desc {
            let bb = complexity::analyze(&bd)?;
            let head_params = report.total_params - bb.total_params;
            let head_macs = report.total_macs - bb.total_macs;
            if !ctx.json && !a.layers {
                out(&format!(
                    "{}: backbone {} params / {} MACs, head {} params / {} MACs",
                    report.name, bb.total_params, bb.total_macs, head_params, head_macs
                ));
            }
        }
        report
    };
    let mut value = serde_json::to_value(&report).expect("report serializes");
    if !a.layers {
        value.as_object_mut().unwrap().remove("layers");
    }
    ctx.emit(&value, || {
        if a.layers {
            report.to_string()
        } else {
            format!(
                "total params {} ({:.2}M)\ntotal MACs   {} ({:.3}G)\nconvention: {}",
                report.total_params,
                report.params_m(),
                report.total_macs,
                report.gmacs(),
                report.convention
            )
        }
    });
    Ok(())
}

fn gradcheck_cmd(ctx: &Ctx, a: GradcheckArgs) -> Res {
    if a.target.list {
        ctx.emit(&json!(gradcheck::OPS), || gradcheck::OPS.join("\n"));
        return Ok(());
    }
    if ctx.dtype != DType::F64 {
        return Err(Fail::Usage("gradient checks run in f64 only; pass --dtype f64".into()));
    }
    let reports: Vec<GradCheckReport> = match &a.target.op {
        Some(op) => gradcheck::run_op(op, a.eps, a.tol)?,
        None => gradcheck::run_all(a.eps, a.tol)?,
    };
    ctx.emit(&serde_json::to_value(&reports).expect("reports serialize"), || {
        let mut s = format!("{:<24} {:>12} {:>6}\n", "case", "max rel-err", "");
        for r in &reports {
            s += &format!("{:<24} {:>12.3e} {:>6}\n", r.name, r.max_rel_err, if r.passed { "pass" } else { "FAIL" });
        }
        s.trim_end().to_string()
    });
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

struct Row {
    check: String,
    passed: bool,
    detail: String,
}

fn shuffle_rows() -> Vec<Row> {
    let mut rows = Vec::new();
    let mut ok = true;
    let mut n = 0;
    for r in 1..=4 {
        for c in 1..=4 {
            for side in 1..=3 {
                let x = Tensor::<f64>::uniform((2, c * r * r, side, side + 1), 1.0, n);
                let back = shuffle::pixel_unshuffle(&shuffle::pixel_shuffle(&x, r).unwrap(), r).unwrap();
                ok &= back == x;
                n += 1;
            }
        }
    }
    rows.push(Row {
        check: "pixel shuffle round-trip".into(),
        passed: ok,
        detail: format!("{n} shapes"),
    });
    let mut ok = true;
    let mut n = 0;
    for c in 1..=16 {
        for g in (1..=c).filter(|g| c % g == 0) {
            let x = Tensor::<f64>::uniform((1, c, 2, 2), 1.0, n);
            ok &= shuffle::channel_shuffle(&shuffle::channel_shuffle(&x, g).unwrap(), c / g).unwrap() == x;
            n += 1;
        }
    }
    rows.push(Row {
        check: "channel shuffle round-trip".into(),
        passed: ok,
        detail: format!("{n} (c, g) pairs"),
    });
    rows
}

fn config_rows(cfg: &FlattenConfig, seed: u64) -> Res<Vec<Row>> {
    let mut structural = cfg.clone();
    structural.require_dense = false;
    structural.validate()?;
    let mut rows = Vec::new();
    let r = Rearrangement::new(cfg.rearrange_spec(), cfg.rearrange, cfg.rearrange_seed)?;
    let x = Tensor::<f64>::uniform((1, cfg.stacked_channels(), 2, 2), 1.0, seed);
    let back = r.inverse(&r.apply(&x)?)?;
    rows.push(Row {
        check: format!("{}: R⁻¹∘R", cfg.name),
        passed: back == x,
        detail: format!("{} → {}", x.dims(), r.apply(&x)?.dims()),
    });
    for kind in [TargetKind::Continuous, TargetKind::Discrete] {
        let e = check_config(&structural, kind, seed)?;
        rows.push(Row {
            check: format!("{}: equivalence {kind:?}", cfg.name),
            passed: e.passed,
            detail: format!("|Δloss| {:.1e}, |Δgrad| {:.1e}", e.loss_diff, e.grad_diff),
        });
    }
    for (i, spec) in structural.layer_specs().iter().enumerate() {
        let m = shuffle::connectivity_matrix(spec.g1, spec.g2, spec.g3, spec.c_in)?;
        rows.push(Row {
            check: format!("{}: layer {i} density", cfg.name),
            passed: m.is_dense() || !cfg.require_dense,
            detail: format!("{}/{} ones", m.count_ones(), m.rows() * m.cols()),
        });
    }
    Ok(rows)
}

fn selftest(ctx: &Ctx, a: SelftestArgs) -> Res {
    let mut configs = shipped::all();
    for p in &a.config {
        configs.push(FlattenConfig::load(p)?);
    }
    let mut rows = shuffle_rows();
    for cfg in &configs {
        rows.extend(config_rows(cfg, ctx.seed())?);
    }
    let value = json!(rows
        .iter()
        .map(|r| json!({"check": r.check, "passed": r.passed, "detail": r.detail}))
        .collect::<Vec<_>>());
    ctx.emit(&value, || {
        let w = rows.iter().map(|r| r.check.chars().count()).max().unwrap_or(0);
        rows.iter()
            .map(|r| format!("{:<w$}  {:<4}  {}", r.check, if r.passed { "pass" } else { "FAIL" }, r.detail))
            .collect::<Vec<_>>()
            .join("\n")
    });
    let failed: Vec<&str> = rows.iter().filter(|r| !r.passed).map(|r| r.check.as_str()).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Fail::Check(failed.join("; ")))
    }
}

fn build_task(t: &TaskArgs, image_size: usize, seed: u64) -> Res<SyntheticTask> {
    let kind: TaskKind = t.task.parse()?;
    let mut task = match kind {
        TaskKind::Keypoints => SyntheticTask::keypoints(image_size, t.count.unwrap_or(protocol::REFERENCE_KEYPOINTS), seed),
        TaskKind::Segmentation => SyntheticTask::segmentation(image_size, t.count.unwrap_or(3), seed),
    };
    task.sigma = t.sigma;
    task.validate()?;
    Ok(task)
}

fn train<T: Scalar>(ctx: &Ctx, a: TrainArgs) -> Res {
    let seed = ctx.seed.ok_or_else(|| Fail::Usage("train needs --seed".into()))?;
    let (head, image_size) = match a.depth {
        Some(d) => {
            let run = protocol::depth_run(d)?;
            (load_config(run.head)?, run.image_size)
        }
        None => (load_config(&a.config)?, a.task.image_size),
    };
    let task = build_task(&a.task, image_size, seed)?;
    let kind = match a.optim {
        Optim::Adam => OptimKind::adam(a.lr),
        Optim::Sgd => OptimKind::sgd(a.lr, a.momentum, a.weight_decay),
    };
    let total = (a.epochs * a.steps) as u64;
    let opts = TrainOptions {
        epochs: a.epochs,
        steps_per_epoch: a.steps,
        batch_size: a.batch,
        optim: OptimConfig {
            kind,
            schedule: match a.poly {
                Some(power) => Schedule::Poly { power, total: total.max(1) },
                None => Schedule::Constant,
            },
        },
        formulation: match a.formulation {
            Form::Unfolded => Formulation::Unfolded,
            Form::Folded => Formulation::Folded,
        },
        dataset_batches: a.dataset_batches,
        eval_size: a.eval_size,
    };
    opts.optim.validate()?;
    let mut model = toy_model::<T>(&head, &task, &narrow_backbone(&head), seed)?;
    let quiet = a.quiet || ctx.json;
    let history = train_with(&mut model, &task, &opts, |r| {
        if !quiet {
            eprintln!("epoch {:>3}  step {:>5}  lr {:.2e}  loss {:.6}  metric {:.4}", r.epoch, r.step, r.lr, r.loss, r.metric);
        }
    })?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("history.jsonl"), history.to_jsonl())?;
    let run = json!({"seed": seed, "dtype": T::DTYPE.name(), "task": task, "options": opts, "initial_loss": history.initial_loss});
    fs::write(a.out.join("run.json"), serde_json::to_string_pretty(&run).expect("run serializes") + "\n")?;
    io::save_checkpoint(&model, a.out.join("checkpoint"), Some(&history))?;
    let last = history.records.last();
    let summary = json!({
        "out": a.out,
        "initial_loss": history.initial_loss,
        "final_loss": last.map(|r| r.loss),
        "final_metric": last.map(|r| r.metric),
    });
    ctx.emit(&summary, || match last {
        Some(r) => format!(
            "initial loss {:.6}, final loss {:.6} (ratio {:.3}), metric {:.4}; wrote {}",
            history.initial_loss,
            r.loss,
            r.loss / history.initial_loss,
            r.metric,
            a.out.display()
        ),
        None => format!("no epochs run; wrote {}", a.out.display()),
    });
    Ok(())
}

fn eval<T: Scalar>(ctx: &Ctx, a: EvalArgs) -> Res {
    let run: Value = serde_json::from_slice(&fs::read(a.run.join("run.json"))?).map_err(|e| Fail::Usage(e.to_string()))?;
    let task: SyntheticTask = serde_json::from_value(run["task"].clone()).map_err(|e| Fail::Usage(format!("run.json task: {e}")))?;
    let (mut model, _): (FlatteNet<T>, _) = io::load_checkpoint(a.run.join("checkpoint"))?;
    let r = evaluate(&mut model, &task, a.eval_size)?;
    let metric = match task.kind {
        TaskKind::Keypoints => "pckh@0.5",
        TaskKind::Segmentation => "miou",
    };
    ctx.emit(&json!({"loss": r.loss, metric: r.metric, "eval_size": a.eval_size}), || {
        format!("loss {:.6}  {metric} {:.4}  ({} images)", r.loss, r.metric, a.eval_size)
    });
    Ok(())
}

fn parse_dims(s: &str) -> Res<(usize, usize, usize, usize)> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<Result<_, _>>()
        .map_err(|e| Fail::Usage(format!("--dims {s:?}: {e}")))?;
    match v[..] {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Fail::Usage(format!("--dims needs four values, got {s:?}"))),
    }
}

fn summary(t: &AnyTensor) -> Value {
    let data = t.clone().into_f64();
    let v = data.data();
    let (lo, hi) = v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let mean = if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    json!({"dtype": t.dtype().name(), "dims": t.dims().as_array(), "min": lo, "max": hi, "mean": mean})
}

fn dump(ctx: &Ctx, a: DumpArgs) -> Res {
    let bytes = match (&a.checkpoint, &a.tensor) {
        (Some(dir), Some(name)) => {
            let m = io::read_manifest(dir)?;
            let entry = m
                .tensors
                .iter()
                .find(|e| &e.name == name)
                .ok_or_else(|| Fail::Usage(format!("no tensor {name:?} in {}", dir.display())))?;
            let blob = fs::read(dir.join(io::PARAMS_FILE))?;
            let (t, _) = io::read_record(blob.get(entry.offset..).unwrap_or_default())?;
            t.encode()?
        }
        _ => {
            let d = parse_dims(&a.dims)?;
            let t = Tensor::<f64>::uniform(d, 1.0, ctx.seed());
            match ctx.dtype {
                DType::F32 => io::encode(&t.cast::<f32>())?,
                DType::F64 => io::encode(&t)?,
            }
        }
    };
    fs::write(&a.out, &bytes)?;
    let t = io::decode_any(&bytes)?;
    let mut v = summary(&t);
    v["path"] = json!(a.out);
    v["bytes"] = json!(bytes.len());
    ctx.emit(&v, || format!("wrote {} ({} bytes, {} {})", a.out.display(), bytes.len(), t.dtype(), t.dims()));
    Ok(())
}

fn load(ctx: &Ctx, a: LoadArgs) -> Res {
    let t = io::load_any(&a.input)?;
    if let Some(out) = &a.out {
        fs::write(out, t.encode()?)?;
    }
    let v = summary(&t);
    ctx.emit(&v, || {
        format!(
            "{} {} min {} max {} mean {}",
            t.dtype(),
            t.dims(),
            v["min"],
            v["max"],
            v["mean"]
        )
    });
    Ok(())
}
