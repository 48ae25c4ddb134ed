use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use segdecoder::arch::{ArchConfig, ResolvedArch, TABLE1_CONFIGS};
use segdecoder::checkpoint::Checkpoint;
use segdecoder::dataset::{DataSource, DatasetSplit, SegSample};
use segdecoder::network::Network;
use segdecoder::profiler::{emit_report, profile, Format};
use segdecoder::suite::{network_suite, primitive_suite, NamedReport};
use segdecoder::training::{evaluate, render_partial_table, MeanRule, MetricsTable, TableRow, TrainConfig, Trainer};
use segdecoder::{Precision, Scalar, Shape};

const RESOLVED: &str = "resolved_config.json";

#[derive(Parser)]
#[command(
    name = "segdecoder",
    version,
    about = "Train, evaluate and profile lightweight segmentation decoders"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic road-scene split and write it to --out.
    GenData(GenDataArgs),
    /// Train one architecture and evaluate it on the validation part.
    Train(TrainArgs),
    /// Evaluate a checkpoint (or an untrained network) on one part of a split.
    Eval(EvalArgs),
    /// Parameter, MAC and receptive-field report.
    Profile(ProfileArgs),
    /// Finite-difference checks of every primitive and of a whole network.
    Gradcheck(GradcheckArgs),
    /// Train several decoders identically and tabulate them.
    Sweep(SweepArgs),
}

/// Output directory and an optional resolved config to replay.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct Common {
    /// Output directory (default: runs/<command>).
    #[arg(long)]
    #[serde(skip)]
    out: Option<PathBuf>,
    /// Replay the arguments stored in a resolved_config.json.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct GenDataArgs {
    /// gen:SEED:COUNT
    #[arg(long, default_value = "gen:0:400")]
    data: String,
    /// Image size as HxW.
    #[arg(long, default_value = "48x160")]
    size: String,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct TrainArgs {
    /// Preset name (optimal, d1..d8), decoder string such as (2N1)(1N2)()(), or a JSON file.
    #[arg(long, default_value = "optimal")]
    arch: String,
    /// gen:SEED:COUNT, a split directory, or a manifest.
    #[arg(long, default_value = "gen:0:400")]
    data: String,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    /// Defaults to the architecture's training batch.
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0.0005)]
    lr0: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value_t = 10)]
    log_every: usize,
    /// Mean shown in the last table column: iou3, iou4, acc4 or six.
    #[arg(long, default_value = "iou3")]
    mean: MeanRule,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long, default_value = "optimal")]
    arch: String,
    #[arg(long, default_value = "gen:0:400")]
    data: String,
    /// Checkpoint directory; without it the seeded untrained network is scored.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// train, val or test.
    #[arg(long, default_value = "val")]
    split: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value = "text")]
    format: Format,
    #[arg(long, default_value = "iou3")]
    mean: MeanRule,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct ProfileArgs {
    #[arg(long, default_value = "optimal")]
    arch: String,
    /// CxHxW or NxCxHxW; defaults to the encoder input at batch 1.
    #[arg(long)]
    input: Option<String>,
    #[arg(long, default_value = "text")]
    format: Format,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct GradcheckArgs {
    #[arg(long, default_value = "optimal")]
    arch: String,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Seeds per primitive.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Sampled network parameters.
    #[arg(long, default_value_t = 20)]
    coords: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "text")]
    format: Format,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Clone, Debug, Serialize, Deserialize)]
struct SweepArgs {
    /// Comma-separated architectures, repeatable; `table` expands to all 14 table rows.
    #[arg(long, value_delimiter = ',', default_value = "d1,optimal")]
    arch: Vec<String>,
    #[arg(long, default_value = "gen:0:400")]
    data: String,
    #[arg(long, default_value_t = 3000)]
    iters: usize,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long, default_value_t = 0.0005)]
    lr0: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "f32")]
    precision: Precision,
    #[arg(long, default_value = "iou3")]
    mean: MeanRule,
    /// Only resolve and assemble every member.
    #[arg(long)]
    dry_run: bool,
    #[command(flatten)]
    common: Common,
}

/// A user error that is not a library error (exit 1).
#[derive(Debug)]
struct Invalid(String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

fn invalid(msg: impl Into<String>) -> anyhow::Error {
    Invalid(msg.into()).into()
}

/// 1 for bad input, 2 for numeric or I/O failure at run time.
fn exit_code(e: &anyhow::Error) -> u8 {
    use segdecoder::Error as E;
    for cause in e.chain() {
        if cause.is::<Invalid>() {
            return 1;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Numeric(_) | E::Diverged { .. } | E::Io { .. } => 2,
                _ => 1,
            };
        }
    }
    2
}

#[derive(Serialize, Deserialize)]
struct Resolved<A> {
    command: String,
    args: A,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    arch: Option<ResolvedArch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    train: Option<TrainConfig>,
}

fn write_resolved<A: Serialize>(
    out: &Path,
    command: &str,
    args: &A,
    arch: Option<&ResolvedArch>,
    train: Option<&TrainConfig>,
) -> anyhow::Result<()> {
    let doc = Resolved {
        command: command.to_string(),
        args,
        arch: arch.cloned(),
        train: train.cloned(),
    };
    write(&out.join(RESOLVED), &(serde_json::to_string_pretty(&doc)? + "\n"))
}

/// Replaces `args` with the ones stored in `common.config`, keeping --out.
fn replay<A>(
    command: &str,
    args: A,
    common: impl Fn(&A) -> &Common,
    set_common: impl Fn(&mut A, Common),
) -> anyhow::Result<A>
where
    A: for<'de> Deserialize<'de>,
{
    let c = common(&args).clone();
    let Some(path) = &c.config else { return Ok(args) };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let doc: Resolved<serde_json::Value> =
        serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    if doc.command != command {
        bail!(invalid(format!(
            "{} was written by `{}`, not `{command}`",
            path.display(),
            doc.command
        )));
    }
    let mut stored: A = serde_json::from_value(doc.args).map_err(|e| invalid(format!("{}: {e}", path.display())))?;
    set_common(&mut stored, c);
    Ok(stored)
}

fn out_dir(common: &Common, command: &str) -> anyhow::Result<PathBuf> {
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("runs").join(command));
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(out)
}

fn write(path: &Path, text: &str) -> anyhow::Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Preset name, decoder string, or JSON file (resolved or not).
fn resolve_arch(arg: &str) -> anyhow::Result<ResolvedArch> {
    let path = Path::new(arg);
    if arg.ends_with(".json") || path.is_file() {
        Ok(ResolvedArch::load(path)?)
    } else {
        Ok(ArchConfig::from_text(arg).resolve()?)
    }
}

fn parse_size(text: &str) -> anyhow::Result<Vec<usize>> {
    text.split('x')
        .map(|p| p.trim().parse::<usize>().ok().filter(|&v| v > 0))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| invalid(format!("expected positive integers separated by `x`, got `{text}`")))
}

fn load_data(data: &str, arch: &ResolvedArch) -> anyhow::Result<DatasetSplit> {
    let [_, h, w] = arch.encoder.input_shape;
    let split = DataSource::parse(data)?.load(h, w, arch.decoder.num_classes)?;
    if (split.height, split.width) != (h, w) {
        bail!(invalid(format!(
            "data is {}x{} but the encoder expects {h}x{w}; pass an architecture file with a matching input",
            split.height, split.width
        )));
    }
    Ok(split)
}

fn part<'a>(split: &'a DatasetSplit, name: &str) -> anyhow::Result<&'a [SegSample]> {
    match name {
        "train" => Ok(&split.train),
        "val" => Ok(&split.val),
        "test" => Ok(&split.test),
        other => Err(invalid(format!("unknown split `{other}` (train, val, test)"))),
    }
}

fn gen_data(args: GenDataArgs) -> anyhow::Result<()> {
    let args = replay("gen-data", args, |a| &a.common, |a, c| a.common = c)?;
    let out = out_dir(&args.common, "gen-data")?;
    let size = parse_size(&args.size)?;
    let [h, w] = size[..] else {
        bail!(invalid("--size must be HxW"))
    };
    let source = DataSource::parse(&args.data)?;
    if !matches!(source, DataSource::Generated { .. }) {
        bail!(invalid("gen-data needs --data gen:SEED:COUNT"));
    }
    let split = source.load(h, w, segdecoder::dataset::NUM_CLASSES)?;
    split.write(&out)?;
    write_resolved(&out, "gen-data", &args, None, None)?;
    println!(
        "wrote {} train / {} val / {} test samples of {h}x{w} to {}",
        split.train.len(),
        split.val.len(),
        split.test.len(),
        out.display()
    );
    Ok(())
}

struct TrainOutcome {
    metrics: MetricsTable,
    final_loss: f64,
}

fn train_generic<T: Scalar>(
    arch: &ResolvedArch,
    cfg: &TrainConfig,
    split: &DatasetSplit,
    out: &Path,
) -> anyhow::Result<TrainOutcome> {
    let net = Network::<T>::new(arch.graph()?, cfg.seed);
    let mut trainer = Trainer::new(net, cfg.clone())?;
    let start = Instant::now();
    let chunk = (cfg.max_iters / 10).max(1);
    while !trainer.is_done() {
        let until = (trainer.iteration() + chunk).min(cfg.max_iters);
        let step = trainer.run_until(&split.train, until);
        if let Err(e) = step {
            // keep what was logged up to the failure
            write(&out.join("loss.csv"), &segdecoder::training::loss_csv(trainer.log()))?;
            return Err(e.into());
        }
        let loss = trainer.log().last().map_or(f64::NAN, |r| r.loss);
        eprintln!(
            "  iter {until:>6}/{}  loss {loss:.4}  ({:.0?})",
            cfg.max_iters,
            start.elapsed()
        );
    }
    trainer.save(out)?;
    let metrics = evaluate(&mut trainer.net, &split.val, arch.batch_size)?;
    Ok(TrainOutcome {
        final_loss: trainer.log().last().map_or(f64::NAN, |r| r.loss),
        metrics,
    })
}

fn train_one(
    arch: &ResolvedArch,
    cfg: &TrainConfig,
    precision: Precision,
    split: &DatasetSplit,
    out: &Path,
) -> anyhow::Result<TrainOutcome> {
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    write(&out.join("arch.json"), &(arch.to_json() + "\n"))?;
    let outcome = match precision {
        Precision::F32 => train_generic::<f32>(arch, cfg, split, out)?,
        Precision::F64 => train_generic::<f64>(arch, cfg, split, out)?,
    };
    write(
        &out.join("metrics.json"),
        &(serde_json::to_string_pretty(&outcome.metrics)? + "\n"),
    )?;
    Ok(outcome)
}

fn train_config(
    arch: &ResolvedArch,
    iters: usize,
    batch: Option<usize>,
    lr0: f64,
    seed: u64,
    log_every: usize,
) -> anyhow::Result<TrainConfig> {
    let cfg = TrainConfig {
        max_iters: iters,
        batch_size: batch.unwrap_or(arch.batch_size),
        lr0,
        seed,
        log_every,
        ..TrainConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let args = replay("train", args, |a| &a.common, |a, c| a.common = c)?;
    let out = out_dir(&args.common, "train")?;
    let mut arch = resolve_arch(&args.arch)?;
    let cfg = train_config(&arch, args.iters, args.batch, args.lr0, args.seed, args.log_every)?;
    arch.batch_size = cfg.batch_size;
    write_resolved(&out, "train", &args, Some(&arch), Some(&cfg))?;
    let split = load_data(&args.data, &arch)?;
    eprintln!(
        "training {} for {} iterations on {} samples",
        arch.name,
        cfg.max_iters,
        split.train.len()
    );
    let r = train_one(&arch, &cfg, args.precision, &split, &out)?;
    println!("final loss {:.4}", r.final_loss);
    print!(
        "{}",
        render_partial_table(&[(
            arch.name.clone(),
            Some(TableRow::from_metrics(&arch.name, &r.metrics, args.mean))
        )])
    );
    Ok(())
}

fn eval_generic<T: Scalar>(
    args: &EvalArgs,
    arch: &ResolvedArch,
    samples: &[SegSample],
) -> anyhow::Result<MetricsTable> {
    let graph = arch.graph()?;
    let mut net = match &args.checkpoint {
        Some(dir) => Network::<T>::from_checkpoint(graph, &Checkpoint::load(dir)?)?,
        None => Network::<T>::new(graph, args.seed),
    };
    Ok(evaluate(&mut net, samples, args.batch.unwrap_or(arch.batch_size))?)
}

fn eval(args: EvalArgs) -> anyhow::Result<()> {
    let args = replay("eval", args, |a| &a.common, |a, c| a.common = c)?;
    let out = out_dir(&args.common, "eval")?;
    let arch = resolve_arch(&args.arch)?;
    write_resolved(&out, "eval", &args, Some(&arch), None)?;
    let split = load_data(&args.data, &arch)?;
    let samples = part(&split, &args.split)?;
    let m = match args.precision {
        Precision::F32 => eval_generic::<f32>(&args, &arch, samples)?,
        Precision::F64 => eval_generic::<f64>(&args, &arch, samples)?,
    };
    let json = serde_json::to_string_pretty(&m)? + "\n";
    write(&out.join("metrics.json"), &json)?;
    match args.format {
        Format::Json => print!("{json}"),
        Format::Text => {
            print!(
                "{}",
                render_partial_table(&[(
                    arch.name.clone(),
                    Some(TableRow::from_metrics(&arch.name, &m, args.mean))
                )])
            );
            println!(
                "mean_iou_3 {:.4}  mean_iou_4 {:.4}  mean_acc_4 {:.4}  mean_six {:.4}",
                m.mean_iou_3, m.mean_iou_4, m.mean_acc_4, m.mean_six
            );
        }
    }
    Ok(())
}

fn profile_cmd(args: ProfileArgs) -> anyhow::Result<()> {
    let args = replay("profile", args, |a| &a.common, |a, c| a.common = c)?;
    let out = out_dir(&args.common, "profile")?;
    let mut arch = resolve_arch(&args.arch)?;
    let input = match &args.input {
        None => {
            let [c, h, w] = arch.encoder.input_shape;
            Shape::new(1, c, h, w)
        }
        Some(text) => match parse_size(text)?[..] {
            [c, h, w] => Shape::new(1, c, h, w),
            [n, c, h, w] => Shape::new(n, c, h, w),
            _ => bail!(invalid("--input must be CxHxW or NxCxHxW")),
        },
    };
    arch = arch.with_input(input.h, input.w);
    if arch.encoder.input_shape[0] != input.c {
        arch.encoder.input_shape[0] = input.c;
    }
    write_resolved(&out, "profile", &args, Some(&arch), None)?;
    let report = profile(&arch.graph()?, input, args.precision)?;
    let text = emit_report(&report, args.format);
    let file = match args.format {
        Format::Text => "profile.txt",
        Format::Json => "profile.json",
    };
    write(&out.join(file), &text)?;
    print!("{text}");
    Ok(())
}

fn gradcheck(args: GradcheckArgs) -> anyhow::Result<()> {
    let args = replay("gradcheck", args, |a| &a.common, |a, c| a.common = c)?;
    if args.tol.is_nan() || args.tol <= 0.0 {
        bail!(invalid("--tol must be positive"));
    }
    let out = out_dir(&args.common, "gradcheck")?;
    let arch = resolve_arch(&args.arch)?;
    write_resolved(&out, "gradcheck", &args, Some(&arch), None)?;
    let mut reports = primitive_suite(args.seeds, args.tol)?;
    reports.push(network_suite(&arch, args.coords, args.seed, args.tol)?);
    // worst seed per check
    let mut worst: Vec<&NamedReport> = Vec::new();
    for r in &reports {
        match worst.iter_mut().find(|w| w.name == r.name) {
            Some(w) if r.report.max_rel_error > w.report.max_rel_error => *w = r,
            Some(_) => {}
            None => worst.push(r),
        }
    }
    let failed: Vec<&&NamedReport> = worst.iter().filter(|r| !r.report.passed).collect();
    let json = serde_json::to_string_pretty(&reports)? + "\n";
    write(&out.join("gradcheck.json"), &json)?;
    match args.format {
        Format::Json => print!("{json}"),
        Format::Text => {
            let w = worst.iter().map(|r| r.name.len()).max().unwrap_or(0);
            for r in &worst {
                let status = if r.report.passed { "ok" } else { "FAILED" };
                let skipped = match r.report.skipped {
                    0 => String::new(),
                    n => format!(", {n} probes across a kink skipped"),
                };
                println!(
                    "{:<w$}  max rel err {:.3e} (seed {}{skipped})  {status}",
                    r.name, r.report.max_rel_error, r.seed
                );
            }
            println!(
                "{} checks, {} failed, tolerance {:e}",
                reports.len(),
                failed.len(),
                args.tol
            );
        }
    }
    if let Some(f) = failed.first() {
        return Err(segdecoder::Error::Numeric(format!(
            "{} exceeds tolerance {:e} with relative error {:.3e}",
            f.name, args.tol, f.report.max_rel_error
        ))
        .into());
    }
    Ok(())
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

#[derive(Serialize)]
struct SweepEntry {
    name: String,
    dir: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<MetricsTable>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn sweep(args: SweepArgs) -> anyhow::Result<()> {
    let args = replay("sweep", args, |a| &a.common, |a, c| a.common = c)?;
    let out = out_dir(&args.common, "sweep")?;
    let names: Vec<String> = args
        .arch
        .iter()
        .flat_map(|a| match a.as_str() {
            "table" => TABLE1_CONFIGS.iter().map(|s| s.to_string()).collect(),
            other => vec![other.to_string()],
        })
        .collect();
    if names.len() < 2 {
        bail!(invalid("a sweep needs at least two architectures"));
    }
    let archs = names
        .iter()
        .map(|n| resolve_arch(n))
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_resolved(&out, "sweep", &args, None, None)?;
    if args.dry_run {
        for a in &archs {
            let g = a.graph()?;
            let net = Network::<f32>::new(g, 0);
            println!("{:<40} {:>9} params  batch {}", a.name, net.param_count(), a.batch_size);
        }
        return Ok(());
    }
    let mut entries = Vec::new();
    let mut rows = Vec::new();
    for (i, arch) in archs.iter().enumerate() {
        let dir = format!("{i:02}_{}", sanitize(&arch.name));
        eprintln!("[{}/{}] {}", i + 1, archs.len(), arch.name);
        let result = load_data(&args.data, arch).and_then(|split| {
            let cfg = train_config(arch, args.iters, args.batch, args.lr0, args.seed, 10)?;
            train_one(arch, &cfg, args.precision, &split, &out.join(&dir))
        });
        match result {
            Ok(r) => {
                rows.push((
                    arch.name.clone(),
                    Some(TableRow::from_metrics(&arch.name, &r.metrics, args.mean)),
                ));
                entries.push(SweepEntry {
                    name: arch.name.clone(),
                    dir,
                    metrics: Some(r.metrics),
                    error: None,
                });
            }
            Err(e) => {
                eprintln!("  failed: {e:#}");
                rows.push((arch.name.clone(), None));
                entries.push(SweepEntry {
                    name: arch.name.clone(),
                    dir,
                    metrics: None,
                    error: Some(format!("{e:#}")),
                });
            }
        }
    }
    let table = render_partial_table(&rows);
    write(&out.join("table.txt"), &table)?;
    write(
        &out.join("sweep.json"),
        &(serde_json::to_string_pretty(&entries)? + "\n"),
    )?;
    print!("{table}");
    let failures = entries.iter().filter(|e| e.error.is_some()).count();
    if failures > 0 {
        return Err(segdecoder::Error::Numeric(format!("{failures} of {} sweep members failed", entries.len())).into());
    }
    Ok(())
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
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Sweep(a) => sweep(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
