//! Command-line front end: argument definitions, command dispatch and the
//! run manifest written next to every command's outputs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::arch::{build_layer_plan, count_params, Arch, Model, ModelConfig, Parameterization};
use crate::error::{Error, Result};
use crate::runtime::{bench, generate, write_bench_csv, Sampler};
use crate::scaling::{
    fit_power_law, flops_estimate, learning_rate, mup_plan, read_fit_csv, solve_aspect_ratio,
    solve_aspect_ratio_exact, tokens_for_depth, IsoArch, XKind, B0,
};
use crate::tensor::Float;
use crate::training::{
    evaluate_recall, load_checkpoint, save_checkpoint, train, write_trace_csv, TrainConfig, TraceRow,
    FIRST_CONTENT,
};

#[derive(Parser, Debug)]
#[command(name = "sambay", version, about = "Plan, train and run decoder-hybrid-decoder language models")]
pub struct Cli {
    /// Random seed (overrides the seed in the config file)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Floating-point precision for model computation
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Directory for machine-readable outputs and the run manifest
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// JSON config file (model config, or training config for train/eval)
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the layer plan, parameterization table and parameter counts
    Plan(PlanArgs),
    /// Solve the iso-parametric aspect ratio
    Solve(SolveArgs),
    /// Fit L = A·x^(-b) + C to a CSV of (x, loss) points
    Fit(FitArgs),
    /// Train on a synthetic task or a text corpus (needs --config)
    Train(TrainArgs),
    /// Exact-match recall of a checkpoint on the configured task
    Eval(EvalArgs),
    /// Generate tokens with prefill plus incremental decoding
    Generate(GenerateArgs),
    /// Measure per-step decode reads and wall time at given positions
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct PlanArgs {
    /// Architecture, e.g. SambaY, Transformer++, Samba+YOCO
    pub arch: Option<String>,
    /// Depth (number of layers)
    pub depth: Option<usize>,
    /// Parameterization: sp, mup or mupp
    #[arg(default_value = "mupp")]
    pub parameterization: String,
}

#[derive(Args, Debug)]
pub struct SolveArgs {
    /// Architecture name; all registered architectures when omitted
    pub arch: Option<String>,
}

#[derive(Args, Debug)]
pub struct FitArgs {
    /// CSV with header `x,loss`
    pub csv: PathBuf,
    /// What the x column measures
    #[arg(long, value_enum, default_value_t = XArg::Flops)]
    pub x: XArg,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum XArg {
    Flops,
    Tokens,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Override the number of optimizer steps
    #[arg(long)]
    pub steps: Option<usize>,
    /// Override the peak learning rate
    #[arg(long)]
    pub lr: Option<f64>,
    /// Override the batch size
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Episodes for the post-training recall evaluation (task mode)
    #[arg(long, default_value_t = 256)]
    pub eval_episodes: usize,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`
    #[arg(long, value_name = "DIR")]
    pub checkpoint: PathBuf,
    /// Number of evaluation episodes
    #[arg(long, default_value_t = 256)]
    pub episodes: usize,
}

#[derive(Args, Debug)]
pub struct ModelSource {
    /// Checkpoint directory; otherwise the model is freshly initialised
    #[arg(long, value_name = "DIR")]
    pub checkpoint: Option<PathBuf>,
    /// Architecture when neither --config nor --checkpoint is given
    #[arg(long, default_value = "SambaY")]
    pub arch: String,
    /// Depth when neither --config nor --checkpoint is given
    #[arg(long, default_value_t = 8)]
    pub depth: usize,
    /// Width when neither --config nor --checkpoint is given
    #[arg(long, default_value_t = 128)]
    pub width: usize,
    /// Sliding-window size when neither --config nor --checkpoint is given
    #[arg(long, default_value_t = 128)]
    pub window: usize,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Prompt text (byte-tokenized)
    #[arg(long, default_value = "")]
    pub prompt: String,
    /// Comma-separated prompt token ids; overrides --prompt
    #[arg(long, value_delimiter = ',')]
    pub prompt_tokens: Option<Vec<usize>>,
    /// Number of tokens to generate
    #[arg(long, default_value_t = 64)]
    pub tokens: usize,
    /// Sampling temperature (0 = greedy)
    #[arg(long, default_value_t = 0.6)]
    pub temperature: f64,
    /// Nucleus mass
    #[arg(long, default_value_t = 0.95)]
    pub top_p: f64,
    /// Greedy decoding
    #[arg(long)]
    pub greedy: bool,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    #[command(flatten)]
    pub model: ModelSource,
    /// Comma-separated context positions to measure
    #[arg(long, value_delimiter = ',', default_value = "256,1024,4096")]
    pub positions: Vec<usize>,
    /// Timed repetitions per position (median reported)
    #[arg(long, default_value_t = 3)]
    pub reps: usize,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Plan(_) => "plan",
            Command::Solve(_) => "solve",
            Command::Fit(_) => "fit",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Generate(_) => "generate",
            Command::Bench(_) => "bench",
        }
    }
}

/// Written as `run_manifest.json` in the `--out` directory of every command.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunManifest {
    pub command: String,
    /// Arguments after the program name; replaying them reproduces the run.
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub seed: u64,
    pub precision: Precision,
    pub version: String,
    /// FNV-1a digest over the output files, in `outputs` order.
    pub artifact_hash: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub outputs: Vec<String>,
}

pub const MANIFEST_FILE: &str = "run_manifest.json";

fn fnv1a(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(0x100_0000_01b3);
    }
}

fn digest(out: &Path, outputs: &[String]) -> Result<String> {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    let mut visit = |p: &Path| -> Result<()> {
        let bytes = std::fs::read(p).map_err(|e| Error::io(p, e))?;
        fnv1a(&mut h, &bytes);
        Ok(())
    };
    for name in outputs {
        let p = out.join(name);
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(&p)
                .map_err(|e| Error::io(&p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            entries.sort();
            for e in entries {
                visit(&e)?;
            }
        } else {
            visit(&p)?;
        }
    }
    Ok(format!("{h:016x}"))
}

fn now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

/// What a command produced: text for the terminal, files under `--out`.
#[derive(Default)]
pub struct Report {
    pub text: String,
    pub config: serde_json::Value,
    pub seed: u64,
    pub outputs: Vec<String>,
}

struct Ctx<'a> {
    cli: &'a Cli,
    out: Option<&'a Path>,
    report: Report,
}

impl Ctx<'_> {
    fn say(&mut self, line: impl AsRef<str>) {
        self.report.text += line.as_ref();
        self.report.text.push('\n');
    }

    fn write_json(&mut self, name: &str, value: &impl Serialize) -> Result<()> {
        if let Some(dir) = self.out {
            let p = dir.join(name);
            let text = serde_json::to_string_pretty(value).expect("serialisable") + "\n";
            std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
            self.report.outputs.push(name.into());
        }
        Ok(())
    }

    fn seed(&self, fallback: u64) -> u64 {
        self.cli.seed.unwrap_or(fallback)
    }
}

fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// A model config file, or the `model` section of a training config.
fn read_model_config(path: &Path) -> Result<ModelConfig> {
    let v: serde_json::Value = read_json(path)?;
    let cfg = if v.get("model").is_some() {
        serde_json::from_value::<TrainConfig>(v)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
            .model
    } else {
        ModelConfig::from_json(&v.to_string())?
    };
    cfg.validate()?;
    Ok(cfg)
}

/// Run a parsed command; `argv` is recorded in the manifest.
pub fn run(cli: &Cli, argv: &[String]) -> Result<Report> {
    let started = now();
    if let Some(dir) = &cli.out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut ctx = Ctx { cli, out: cli.out.as_deref(), report: Report::default() };
    match &cli.command {
        Command::Plan(a) => cmd_plan(&mut ctx, a)?,
        Command::Solve(a) => cmd_solve(&mut ctx, a)?,
        Command::Fit(a) => cmd_fit(&mut ctx, a)?,
        Command::Train(a) => match cli.precision {
            Precision::F32 => cmd_train::<f32>(&mut ctx, a)?,
            Precision::F64 => cmd_train::<f64>(&mut ctx, a)?,
        },
        Command::Eval(a) => match cli.precision {
            Precision::F32 => cmd_eval::<f32>(&mut ctx, a)?,
            Precision::F64 => cmd_eval::<f64>(&mut ctx, a)?,
        },
        Command::Generate(a) => match cli.precision {
            Precision::F32 => cmd_generate::<f32>(&mut ctx, a)?,
            Precision::F64 => cmd_generate::<f64>(&mut ctx, a)?,
        },
        Command::Bench(a) => match cli.precision {
            Precision::F32 => cmd_bench::<f32>(&mut ctx, a)?,
            Precision::F64 => cmd_bench::<f64>(&mut ctx, a)?,
        },
    }
    let report = ctx.report;
    if let Some(dir) = &cli.out {
        let manifest = RunManifest {
            command: cli.command.name().into(),
            argv: argv.to_vec(),
            config: report.config.clone(),
            seed: report.seed,
            precision: cli.precision,
            version: env!("CARGO_PKG_VERSION").into(),
            artifact_hash: digest(dir, &report.outputs)?,
            started_unix: started,
            finished_unix: now(),
            outputs: report.outputs.clone(),
        };
        let p = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("serialisable") + "\n";
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    Ok(report)
}

fn millions(n: u64) -> String {
    if n < 10_000_000 {
        format!("{:.3}M", n as f64 / 1e6)
    } else {
        format!("{:.1}M", n as f64 / 1e6)
    }
}

fn cmd_plan(ctx: &mut Ctx, a: &PlanArgs) -> Result<()> {
    let param: Parameterization = a.parameterization.parse()?;
    let (cfg, alpha) = match (&ctx.cli.config, &a.arch, a.depth) {
        (Some(p), _, _) => (read_model_config(p)?, None),
        (None, Some(arch), Some(d)) => {
            let arch: Arch = arch.parse()?;
            let mut cfg = ModelConfig::reference_scale(arch, d)?;
            cfg.parameterization = param;
            cfg.validate()?;
            let alpha = if arch.is_decoder_decoder() || arch == Arch::MambaY {
                solve_aspect_ratio(arch.iso_polynomial())?
            } else {
                cfg.width / d
            };
            (cfg, Some(alpha))
        }
        _ => return Err(Error::Config("plan needs ARCH DEPTH or --config".into())),
    };
    let plan = build_layer_plan(&cfg)?;
    let counts = count_params(&cfg)?;
    let mup = mup_plan(&cfg);
    let mut head = format!(
        "{} d={} w={} ({})",
        cfg.arch.name(),
        cfg.depth,
        cfg.width,
        cfg.parameterization
    );
    if let Some(alpha) = alpha {
        let _ = write!(head, ": α={alpha}");
    }
    ctx.say(head);
    ctx.say(format!("{plan}"));
    ctx.say(mup.table());
    ctx.say(format!(
        "{:<24} {:>12}\n{:<24} {:>12}\n{:<24} {:>12}\n{:<24} {:>12}\n{:<24} {:>12}\n{:<24} {:>12}",
        "attention", millions(counts.attn),
        "ssm", millions(counts.mamba),
        "gmu", millions(counts.gmu),
        "mlp", millions(counts.mlp),
        "non-embedding (closed)", millions(counts.closed_nonembed),
        "non-embedding (exact)", millions(counts.exact_nonembed),
    ));
    let mut summary = serde_json::json!({
        "config": cfg,
        "layers": plan.mixers.iter().map(|k| k.label()).collect::<Vec<_>>(),
        "counts": counts,
        "mup": mup.groups.iter().map(|g| serde_json::json!({
            "group": g.group.name(),
            "lr_multiplier": g.lr_multiplier,
            "weight_decay": g.weight_decay,
            "weight_multiplier": g.weight_multiplier,
        })).collect::<Vec<_>>(),
        "residual_multiplier": mup.residual_multiplier,
        "logit_multiplier": mup.logit_multiplier,
    });
    if alpha.is_some() {
        let lr = learning_rate(cfg.depth as f64, B0);
        let tokens = tokens_for_depth(cfg.arch, cfg.depth)?;
        let flops = flops_estimate(&cfg, tokens, 4096)?;
        ctx.say(format!(
            "{:<24} {:>12.3e}\n{:<24} {:>11.1}B\n{:<24} {:>12.3e}",
            "learning rate (B=2M)", lr, "tokens", tokens / 1e9, "training FLOPs", flops.with_attention
        ));
        summary["alpha"] = alpha.into();
        summary["learning_rate"] = lr.into();
        summary["tokens"] = tokens.into();
        summary["flops"] = serde_json::to_value(flops).expect("serialisable");
    }
    ctx.report.config = serde_json::to_value(&cfg).expect("serialisable");
    ctx.write_json("plan.json", &summary)
}

fn cmd_solve(ctx: &mut Ctx, a: &SolveArgs) -> Result<()> {
    let archs = match &a.arch {
        Some(s) => vec![IsoArch::parse(s)?],
        None => IsoArch::REGISTERED.to_vec(),
    };
    ctx.say(format!("{:<14} {:>6} {:>10}", "arch", "α", "root"));
    let mut rows = Vec::new();
    for iso in archs {
        let poly = iso.polynomial();
        let alpha = solve_aspect_ratio(poly)?;
        let root = solve_aspect_ratio_exact(poly)?;
        ctx.say(format!("{:<14} {:>6} {:>10.3}", iso.name(), alpha, root));
        rows.push(serde_json::json!({"arch": iso.name(), "alpha": alpha, "root": root, "c1": poly.0, "c2": poly.1}));
    }
    ctx.report.config = serde_json::json!({"arch": a.arch});
    ctx.write_json("solve.json", &rows)
}

fn cmd_fit(ctx: &mut Ctx, a: &FitArgs) -> Result<()> {
    let pts = read_fit_csv(&a.csv)?;
    let kind = match a.x {
        XArg::Flops => XKind::Flops,
        XArg::Tokens => XKind::Tokens,
    };
    let fit = fit_power_law(&pts, kind)?;
    if fit.a == 0.0 {
        ctx.say(format!("flat losses: C = {:.6} (no power-law term)", fit.c));
    } else {
        ctx.say(format!("A = {:.6e}\nb = {:.6}\nC = {:.6}\nR² = {:.6}", fit.a, fit.b, fit.c, fit.r_squared));
    }
    ctx.say(format!("{:>14} {:>12} {:>12}", "x", "loss", "residual"));
    for ((x, l), r) in pts.iter().zip(&fit.residuals) {
        ctx.say(format!("{x:>14.4e} {l:>12.6} {r:>12.3e}"));
    }
    ctx.report.config = serde_json::json!({"csv": a.csv, "x": format!("{:?}", a.x).to_lowercase()});
    ctx.write_json("fit.json", &fit)
}

fn resolve_train_config(ctx: &Ctx) -> Result<TrainConfig> {
    let path = ctx.cli.config.as_ref().ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let mut cfg = TrainConfig::load(path)?;
    cfg.seed = ctx.seed(cfg.seed);
    Ok(cfg)
}

fn cmd_train<T: Float>(ctx: &mut Ctx, a: &TrainArgs) -> Result<()> {
    let mut cfg = resolve_train_config(ctx)?;
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = Some(lr);
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    ctx.report.config = serde_json::to_value(&cfg).expect("serialisable");
    ctx.report.seed = cfg.seed;
    let every = (cfg.steps / 20).max(1);
    let mut rows: Vec<TraceRow> = Vec::new();
    let mut log = String::new();
    let result = train::<T>(&cfg, |r| {
        rows.push(r.clone());
        if r.step % every == 0 || r.step + 1 == cfg.steps {
            let _ = writeln!(log, "step {:>6}  loss {:>9.5}  lr {:.3e}  |g| {:.3e}", r.step, r.loss, r.lr, r.grad_norm);
        }
    });
    ctx.say(format!("peak lr {:.3e}, {} tokens/step", cfg.peak_lr(), cfg.batch_tokens()));
    ctx.report.text += &log;
    if let Some(dir) = ctx.out {
        write_trace_csv(&dir.join("trace.csv"), &rows)?;
        ctx.report.outputs.push("trace.csv".into());
    }
    let out = result?;
    if let Some(dir) = ctx.out {
        save_checkpoint(&dir.join("checkpoint"), &out.model, serde_json::json!({"steps": cfg.steps}))?;
        ctx.report.outputs.push("checkpoint".into());
    }
    if let Some(task) = &cfg.task {
        if a.eval_episodes > 0 {
            let ev = evaluate_recall(&out.model, &task.with_seed(cfg.seed ^ 0x5eed), a.eval_episodes)?;
            ctx.say(format!("recall {:.4} ± {:.4} ({} episodes)", ev.accuracy, ev.stderr, ev.episodes));
            ctx.write_json("eval.json", &ev)?;
        }
    }
    Ok(())
}

fn cmd_eval<T: Float>(ctx: &mut Ctx, a: &EvalArgs) -> Result<()> {
    let cfg = resolve_train_config(ctx)?;
    let task = cfg.task.as_ref().ok_or_else(|| Error::Config("eval needs a config with a `task`".into()))?;
    let model: Model<T> = load_checkpoint(&a.checkpoint)?;
    let ev = evaluate_recall(&model, &task.with_seed(cfg.seed), a.episodes)?;
    ctx.say(format!(
        "recall {:.4} ± {:.4} ({}/{} episodes)",
        ev.accuracy, ev.stderr, ev.correct, ev.episodes
    ));
    ctx.report.config = serde_json::json!({"task": task, "checkpoint": a.checkpoint, "episodes": a.episodes});
    ctx.report.seed = cfg.seed;
    ctx.write_json("eval.json", &ev)
}

fn load_model<T: Float>(ctx: &mut Ctx, src: &ModelSource) -> Result<Model<T>> {
    let seed = ctx.seed(0);
    ctx.report.seed = seed;
    let model = if let Some(dir) = &src.checkpoint {
        load_checkpoint(dir)?
    } else {
        let cfg = match &ctx.cli.config {
            Some(p) => read_model_config(p)?,
            None => {
                let mut cfg = ModelConfig::desk(src.arch.parse()?, src.depth, src.width)?;
                cfg.window = src.window;
                cfg.validate()?;
                cfg
            }
        };
        Model::new(cfg, seed)?
    };
    ctx.report.config = serde_json::to_value(&model.config).expect("serialisable");
    Ok(model)
}

fn detokenize(tokens: &[usize]) -> String {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (FIRST_CONTENT..FIRST_CONTENT + 256).contains(&t))
        .map(|&t| (t - FIRST_CONTENT) as u8)
        .collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

fn cmd_generate<T: Float>(ctx: &mut Ctx, a: &GenerateArgs) -> Result<()> {
    let model: Model<T> = load_model(ctx, &a.model)?;
    let prompt: Vec<usize> = match &a.prompt_tokens {
        Some(t) => t.clone(),
        None => a.prompt.bytes().map(|b| FIRST_CONTENT + b as usize).collect(),
    };
    if prompt.is_empty() {
        return Err(Error::Config("generate needs a non-empty --prompt or --prompt-tokens".into()));
    }
    if let Some(&t) = prompt.iter().find(|&&t| t >= model.config.vocab_size) {
        return Err(Error::Config(format!("prompt token {t} is outside the vocabulary")));
    }
    let sampler = if a.greedy {
        Sampler::Greedy
    } else {
        Sampler::TopP { temperature: a.temperature, top_p: a.top_p }
    };
    let seed = ctx.report.seed;
    let tokens = generate(&model, &prompt, a.tokens, sampler, seed)?;
    let text = detokenize(&tokens);
    ctx.say(format!("tokens: {tokens:?}"));
    ctx.say(format!("text: {text:?}"));
    ctx.write_json(
        "generate.json",
        &serde_json::json!({"prompt_tokens": prompt, "tokens": tokens, "text": text}),
    )
}

fn cmd_bench<T: Float>(ctx: &mut Ctx, a: &BenchArgs) -> Result<()> {
    let model: Model<T> = load_model(ctx, &a.model)?;
    let rows = bench(&model, &a.positions, a.reps.max(1), ctx.report.seed)?;
    ctx.say(format!(
        "{:>8} {:>10} {:>10} {:>10} {:>10} {:>8} {:>12}",
        "position", "ssm", "swa", "full", "cross", "gmu", "wall_ns"
    ));
    for r in &rows {
        ctx.say(format!(
            "{:>8} {:>10} {:>10} {:>10} {:>10} {:>8} {:>12}",
            r.position, r.ssm_read, r.swa_read, r.full_read, r.cross_read, r.gmu_read, r.wall_ns
        ));
    }
    if let Some(dir) = ctx.out {
        write_bench_csv(&dir.join("bench.csv"), &rows)?;
        ctx.report.outputs.push("bench.csv".into());
    }
    Ok(())
}
