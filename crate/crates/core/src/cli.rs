//! `run`, `bench`, `analyze` and `verify-sparsity`.
//!
//! Every command computes first and writes its files last, so a failure
//! leaves the output directory untouched. Wall-clock timings go to stdout
//! only; files depend on nothing but the configuration and inputs.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::analysis::{
    bias_report, compare_profiles, decay_csv, decay_fit, decay_samples, outliers_csv, patterns_csv, profile_csv,
    sparsity_csv, sparsity_sweep, SparsitySource,
};
use crate::config::{RunConfig, SparsityMode};
use crate::cost::{chunk_footprint, max_parallel_chunks};
use crate::error::{Error, Result};
use crate::eviction::EvictionMode;
use crate::model::Model;
use crate::pipeline::run_pipeline;

#[derive(Debug, Parser)]
#[command(name = "chunkcomp", version, about = "Chunked long-context inference with KV eviction on a toy decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the pipeline once and write result.txt and cost.txt.
    Run(Overrides),
    /// Compare kv budgets under the memory model and write bench.csv.
    Bench(Overrides),
    /// Run with attention capture and write the attention analysis CSVs.
    Analyze(Overrides),
    /// Measure effective-entry sparsity and distance decay.
    VerifySparsity(Overrides),
}

/// Flags override config file values; `--set key=value` reaches any key.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    #[arg(long, value_name = "PATH")]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub weights: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub context: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub query: Option<String>,
    #[arg(long)]
    pub chunk_width: Option<String>,
    #[arg(long)]
    pub kv_budget: Option<String>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub max_new: Option<String>,
    #[arg(long)]
    pub workers: Option<String>,
    #[arg(long)]
    pub widths: Option<String>,
    #[arg(long)]
    pub trials: Option<String>,
    #[arg(long)]
    pub sparsity_mode: Option<String>,
    #[arg(long)]
    pub budgets: Option<String>,
    #[arg(long)]
    pub memory_budget: Option<String>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Overrides {
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let flags = [
            ("seed", &self.seed),
            ("out", &self.out),
            ("weights", &self.weights),
            ("context", &self.context),
            ("query", &self.query),
            ("chunk_width", &self.chunk_width),
            ("kv_budget", &self.kv_budget),
            ("mode", &self.mode),
            ("max_new", &self.max_new),
            ("workers", &self.workers),
            ("widths", &self.widths),
            ("trials", &self.trials),
            ("sparsity_mode", &self.sparsity_mode),
            ("budgets", &self.budgets),
            ("memory_budget", &self.memory_budget),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
            }
        }
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::config(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Files to write plus text for stdout.
#[derive(Debug, Default)]
pub struct CommandOutput {
    pub files: Vec<(String, String)>,
    pub stdout: String,
}

impl CommandOutput {
    fn file(&mut self, name: &str, contents: String) {
        self.files.push((name.to_string(), contents));
    }

    pub fn write_all(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, contents) in &self.files {
            let p = dir.join(name);
            std::fs::write(&p, contents).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

fn load(cfg: &RunConfig) -> Result<(Model, Vec<u32>, Vec<u32>)> {
    let model = cfg.build_model()?;
    let (context, query) = cfg.load_inputs(model.config().vocab_size)?;
    Ok((model, context, query))
}

pub fn cmd_run(cfg: &RunConfig) -> Result<CommandOutput> {
    let (model, context, query) = load(cfg)?;
    let settings = cfg.pipeline_settings(model.config())?;
    let out = run_pipeline(&model, &context, &query, &settings)?;

    let mcfg = model.config();
    let kept = match cfg.mode {
        EvictionMode::Compression | EvictionMode::Both => settings.policy.kv_budget,
        _ => cfg.chunk_width,
    };
    let fp = chunk_footprint(mcfg, cfg.chunk_width, query.len(), kept);
    let mut cost = out.cost.deterministic_record();
    let _ = writeln!(cost, "memory_budget={}", cfg.memory_budget);
    let _ = writeln!(cost, "max_parallel_chunks={}", max_parallel_chunks(cfg.memory_budget, &fp)?);
    let _ = writeln!(cost, "max_position={}", out.max_position.map_or(-1, |p| p as i64));

    let mut res = CommandOutput::default();
    res.file("result.txt", format!("mode={}\n{}", cfg.mode, out.record()));
    res.file("cost.txt", cost);
    res.stdout = format!(
        "retained chunks {:?} of {}, perplexity {:.4}, generated {} tokens\nprefill {:.2} ms, {:.3} ms/token\n",
        out.retained_chunks,
        out.plan.chunk_count(),
        out.perplexity,
        out.generated.len(),
        out.cost.wall_prefill_ms,
        out.cost.wall_per_token_ms
    );
    Ok(res)
}

pub fn cmd_bench(cfg: &RunConfig) -> Result<CommandOutput> {
    let (model, context, query) = load(cfg)?;
    let mcfg = *model.config();
    let budgets = if cfg.budgets.is_empty() {
        vec![cfg.chunk_width, cfg.chunk_width.div_ceil(2)]
    } else {
        cfg.budgets.clone()
    };
    let mut csv = String::from(
        "kv_budget,kv_rows,kv_bytes,activation_bytes,chunk_bytes,kv_fraction,max_parallel_chunks,throughput_ratio,score_pairs_prefill,cache_rows_peak,simulated_memory_bytes_peak\n",
    );
    let mut stdout = String::from("kv_budget  max_parallel  prefill_ms  ms_per_token\n");
    let mut base = None;
    for &b in &budgets {
        let fp = chunk_footprint(&mcfg, cfg.chunk_width, query.len(), b);
        let par = max_parallel_chunks(cfg.memory_budget, &fp)?;
        let base = *base.get_or_insert(par);
        let ratio = if base == 0 { 0.0 } else { par as f64 / base as f64 };
        let mut run_cfg = cfg.clone();
        run_cfg.kv_budget = Some(b);
        run_cfg.mode = EvictionMode::Compression;
        let settings = run_cfg.pipeline_settings(&mcfg)?;
        model.counters().reset();
        let out = run_pipeline(&model, &context, &query, &settings)?;
        let _ = writeln!(
            csv,
            "{b},{},{},{},{},{},{par},{ratio},{},{},{}",
            fp.kv_rows,
            fp.kv_bytes,
            fp.activation_bytes,
            fp.total(),
            fp.kv_fraction(),
            out.cost.score_pairs_prefill,
            out.cost.cache_rows_peak,
            out.cost.simulated_memory_bytes_peak
        );
        let _ = writeln!(
            stdout,
            "{b:>9}  {par:>12}  {:>10.2}  {:>12.3}",
            out.cost.wall_prefill_ms, out.cost.wall_per_token_ms
        );
    }
    let mut res = CommandOutput::default();
    res.file("bench.csv", csv);
    res.stdout = stdout;
    Ok(res)
}

pub fn cmd_analyze(cfg: &RunConfig) -> Result<CommandOutput> {
    let (model, context, query) = load(cfg)?;
    let mut settings = cfg.pipeline_settings(model.config())?;
    settings.capture = true;
    let out = run_pipeline(&model, &context, &query, &settings)?;
    let report = bias_report(&out, cfg.head_frac, cfg.tail_frac, cfg.lambda_mult)?;

    let mut summary = format!("mode={}\nheads={}\n", cfg.mode, report.heads.len());
    for (label, n) in report.label_counts() {
        let _ = writeln!(summary, "{label}={n}");
    }
    let _ = writeln!(summary, "outliers={}", report.total_outliers());

    let mut res = CommandOutput::default();
    res.file("profile.csv", profile_csv(&report));
    res.file("patterns.csv", patterns_csv(&report));
    res.file("outliers.csv", outliers_csv(&report));
    if context.len() + query.len() <= model.config().max_train_positions {
        let mut csv = String::from("layer,head,tv_distance\n");
        for (l, h, tv) in compare_profiles(&model, &out)? {
            let _ = writeln!(csv, "{l},{h},{tv}");
        }
        res.file("comparison.csv", csv);
        summary.push_str("comparison=written\n");
    } else {
        summary.push_str("comparison=skipped (context + query exceeds max_train_positions)\n");
    }
    res.stdout = summary.clone();
    res.file("summary.txt", summary);
    Ok(res)
}

pub fn cmd_verify_sparsity(cfg: &RunConfig) -> Result<CommandOutput> {
    let model = match cfg.sparsity_mode {
        SparsityMode::ToyModel => Some(cfg.build_model()?),
        SparsityMode::SyntheticDecay => None,
    };
    let source = match &model {
        Some(m) => cfg.sparsity_source(m),
        None => SparsitySource::SyntheticDecay {
            alpha: cfg.decay_alpha,
            sigma: cfg.decay_sigma,
        },
    };
    let curve = sparsity_sweep(source, &cfg.widths, cfg.sparsity_epsilon, cfg.trials, cfg.seed)?;
    let trend = curve.trend();

    let mut res = CommandOutput::default();
    let mut stdout = String::new();
    if !curve.synthetic_fallback.is_empty() {
        let _ = writeln!(
            stdout,
            "note: widths {:?} exceed the position budget and use synthetic decay rows",
            curve.synthetic_fallback
        );
    }
    if trend.single_width {
        stdout.push_str("warning: a single width makes the trend check trivial\n");
    }
    let _ = writeln!(
        stdout,
        "trend {}: {}/{} trials with non-increasing effective fraction",
        if trend.pass() { "PASS" } else { "FAIL" },
        trend.passing,
        trend.trials
    );

    let w = *cfg.widths.last().expect("validated non-empty");
    let pairs = decay_samples(source, w, cfg.trials, cfg.seed)?;
    match decay_fit(&pairs) {
        Ok(fit) => {
            let _ = writeln!(stdout, "decay rate {:.4}, r^2 {:.4}", fit.rate, fit.r_squared);
        }
        Err(e) => {
            let _ = writeln!(stdout, "decay fit skipped: {e}");
        }
    }
    res.file("sparsity.csv", sparsity_csv(&curve.summary()));
    res.file("decay.csv", decay_csv(&pairs));
    res.stdout = stdout;
    Ok(res)
}

pub fn execute(command: &Command) -> Result<(CommandOutput, PathBuf)> {
    let (o, f): (&Overrides, fn(&RunConfig) -> Result<CommandOutput>) = match command {
        Command::Run(o) => (o, cmd_run),
        Command::Bench(o) => (o, cmd_bench),
        Command::Analyze(o) => (o, cmd_analyze),
        Command::VerifySparsity(o) => (o, cmd_verify_sparsity),
    };
    let cfg = o.resolve()?;
    Ok((f(&cfg)?, cfg.out))
}

/// Parses arguments, runs the command, writes its files and returns the
/// process exit code: 0 success, 1 validation error, 2 I/O error.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = execute(&cli.command).and_then(|(out, dir)| {
        out.write_all(&dir)?;
        Ok(out)
    });
    match result {
        Ok(out) => {
            print!("{}", out.stdout);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
