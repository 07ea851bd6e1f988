//! Command-line front end. Every command prints one JSON document on stdout
//! (`sample` prints one JSON line per batch); diagnostics go to stderr.
//! Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::align::{sample_batches, SamplerManifest};
use crate::engine::{self, RetentionBase, VerifyConfig};
use crate::error::{Error, Result};
use crate::fusion::{run_fuse_demo, FuseDemoConfig};
use crate::gradcheck::{run_gradcheck, LossKind};
use crate::numeric::{GradCheckReport, DEFAULT_FD_EPS};
use crate::order::{combined_scores, kendall_tau, order_loss, select_queries_weighted};
use crate::prompt::{TextEmbeddings, DEFAULT_DIM};

#[derive(Debug, Parser)]
#[command(name = "promptkit", version, about = "Prompt fusion, query ordering, set losses and annotation cross-verification")]
pub struct Cli {
    /// Seed for every stochastic routine.
    #[arg(long, global = true, env = "PROMPTKIT_SEED")]
    pub seed: Option<u64>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Cross-verify top-down and bottom-up annotation directories.
    Verify(VerifyArgs),
    /// Compare analytic loss gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Kendall tau and its tanh surrogate between two score files.
    Tau(TauArgs),
    /// Top-K query selection from text and visual scores.
    Select(SelectArgs),
    /// Background-token activation through random fusion layers.
    FuseDemo(FuseDemoArgs),
    /// Dataset-pure batches for one epoch, one JSON line per batch.
    Sample(SampleArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BaseArg {
    Mean,
    TopDown,
    BottomUp,
}

impl From<BaseArg> for RetentionBase {
    fn from(b: BaseArg) -> Self {
        match b {
            BaseArg::Mean => RetentionBase::Mean,
            BaseArg::TopDown => RetentionBase::TopDown,
            BaseArg::BottomUp => RetentionBase::BottomUp,
        }
    }
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Directory of top-down annotation files.
    #[arg(long)]
    pub a: PathBuf,
    /// Directory of bottom-up annotation files.
    #[arg(long)]
    pub b: PathBuf,
    /// Tag embedding table (JSON object tag -> vector).
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Hash unknown tags to deterministic pseudo-random vectors.
    #[arg(long)]
    pub hash_fallback: bool,
    /// Embedding width when no table is given.
    #[arg(long, default_value_t = DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = engine::DEFAULT_IOU_GATE)]
    pub iou_gate: f64,
    #[arg(long = "sim-thresh", default_value_t = engine::DEFAULT_SIM_THRESHOLD, allow_hyphen_values = true)]
    pub sim_thresh: f64,
    #[arg(long, value_enum, default_value = "mean")]
    pub retention_base: BaseArg,
    /// Directory for verified annotation files.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Also write the JSON report here.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, value_parser = parse_loss)]
    pub loss: LossKind,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Number of consecutive seeds to check, starting at --seed.
    #[arg(long, default_value_t = 1)]
    pub instances: u64,
    #[arg(long, default_value_t = DEFAULT_FD_EPS)]
    pub eps: f64,
}

fn parse_loss(s: &str) -> std::result::Result<LossKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Args)]
pub struct TauArgs {
    /// Text-prompt scores, one per line.
    #[arg(long)]
    pub a: PathBuf,
    /// Visual-prompt scores, one per line.
    #[arg(long)]
    pub b: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// JSON file {"text": [...], "visual": [...]}.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub k: usize,
    /// Weight of the text score; the visual score gets 1 - alpha.
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
}

#[derive(Debug, Args)]
pub struct FuseDemoArgs {
    /// JSON config; flags below override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dim: Option<usize>,
    #[arg(long)]
    pub features: Option<usize>,
    #[arg(long)]
    pub text: Option<usize>,
    #[arg(long)]
    pub visual: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub per_pathway_background: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Deserialize)]
struct ScoresFile {
    text: Vec<f64>,
    visual: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct GradcheckOutput {
    loss: LossKind,
    n: usize,
    seed: u64,
    instances: u64,
    tol: f64,
    eps: f64,
    passed: bool,
    report: GradCheckReport,
}

/// Outcome of a command: the stdout payload and whether its check passed.
struct Output {
    stdout: String,
    ok: bool,
}

impl Output {
    fn json(value: &impl Serialize, ok: bool) -> Self {
        Self {
            stdout: serde_json::to_string_pretty(value).expect("outputs always serialize") + "\n",
            ok,
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let rendered = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = stdout.write_all(rendered.as_bytes());
                    0
                }
                _ => {
                    let _ = stderr.write_all(rendered.as_bytes());
                    2
                }
            };
        }
    };
    match dispatch(&cli, stderr) {
        Ok(out) => {
            let _ = stdout.write_all(out.stdout.as_bytes());
            if out.ok {
                0
            } else {
                1
            }
        }
        Err(CliError::Usage(msg)) => {
            let _ = writeln!(stderr, "error: {msg}");
            2
        }
        Err(CliError::Runtime(e)) => {
            let _ = writeln!(stderr, "error: {e}");
            1
        }
    }
}

enum CliError {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

fn dispatch(cli: &Cli, stderr: &mut dyn Write) -> std::result::Result<Output, CliError> {
    match &cli.command {
        Command::Verify(args) => verify(args, stderr),
        Command::Gradcheck(args) => gradcheck(args, cli.seed.unwrap_or(0), stderr),
        Command::Tau(args) => tau(args),
        Command::Select(args) => select(args),
        Command::FuseDemo(args) => fuse_demo(args, cli.seed),
        Command::Sample(args) => sample(args, cli.seed),
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn verify(args: &VerifyArgs, stderr: &mut dyn Write) -> std::result::Result<Output, CliError> {
    let provider = match (&args.emb, args.hash_fallback) {
        (Some(path), fallback) => TextEmbeddings::from_path(path)?.with_hash_fallback(fallback),
        (None, true) => TextEmbeddings::hash_only(args.dim),
        (None, false) => {
            return Err(CliError::Usage(
                "verify needs --emb FILE or --hash-fallback".into(),
            ))
        }
    };
    if args.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let config = VerifyConfig {
        iou_gate: args.iou_gate,
        sim_threshold: args.sim_thresh,
        retention_base: args.retention_base.into(),
    };
    let outcome = engine::batch_verify(&args.a, &args.b, &provider, &config, args.jobs)?;
    if let Some(out) = &args.out {
        engine::write_verified(&outcome, out)?;
    }
    let reports: Vec<_> = outcome.images.iter().map(|i| i.report.clone()).collect();
    let summary = engine::retention_stats(&reports, config.retention_base);
    for f in &outcome.failures {
        let _ = writeln!(stderr, "failed: {}: {}", f.path, f.error);
    }
    let _ = writeln!(
        stderr,
        "verified {} images: retained {} of {} top-down / {} bottom-up instances",
        outcome.images.len(),
        summary.retained,
        summary.input_a,
        summary.input_b
    );
    let doc = json!({
        "config": config,
        "summary": summary,
        "images": outcome.images,
        "unpaired": outcome.unpaired,
        "failures": outcome.failures,
    });
    let out = Output::json(&doc, outcome.failures.is_empty());
    if let Some(path) = &args.report {
        std::fs::write(path, &out.stdout).map_err(|e| Error::io(path, e))?;
    }
    Ok(out)
}

fn gradcheck(args: &GradcheckArgs, seed: u64, stderr: &mut dyn Write) -> std::result::Result<Output, CliError> {
    if args.tol.is_nan() || args.tol <= 0.0 {
        return Err(CliError::Usage(format!("--tol must be > 0, got {}", args.tol)));
    }
    if args.instances == 0 {
        return Err(CliError::Usage("--instances must be at least 1".into()));
    }
    let mut report: Option<GradCheckReport> = None;
    for s in seed..seed.saturating_add(args.instances) {
        let r = run_gradcheck(args.loss, args.n, s, args.eps)?;
        report = Some(match report {
            Some(prev) if prev.max_rel_err >= r.max_rel_err => GradCheckReport {
                max_abs_err: prev.max_abs_err.max(r.max_abs_err),
                ..prev
            },
            Some(prev) => GradCheckReport {
                max_abs_err: prev.max_abs_err.max(r.max_abs_err),
                ..r
            },
            None => r,
        });
    }
    let report = report.expect("at least one instance");
    let passed = report.passes(args.tol);
    let _ = writeln!(
        stderr,
        "{} gradient check: max rel err {:.3e} ({})",
        args.loss,
        report.max_rel_err,
        if passed { "pass" } else { "FAIL" }
    );
    Ok(Output::json(
        &GradcheckOutput {
            loss: args.loss,
            n: args.n,
            seed,
            instances: args.instances,
            tol: args.tol,
            eps: args.eps,
            passed,
            report,
        },
        passed,
    ))
}

/// One finite score per non-empty line.
pub fn parse_score_lines(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: f64 = l
                .trim()
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: `{}` is not a number", i + 1, l.trim())))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Parse(format!("line {}: non-finite score", i + 1)))
            }
        })
        .collect()
}

fn tau(args: &TauArgs) -> std::result::Result<Output, CliError> {
    let a = parse_score_lines(&read(&args.a)?)?;
    let b = parse_score_lines(&read(&args.b)?)?;
    let t = kendall_tau(&a, &b)?;
    let soft = -order_loss(&a, &b)?.loss;
    Ok(Output::json(
        &json!({
            "tau": t.tau,
            "concordant": t.concordant,
            "discordant": t.discordant,
            "n": t.n,
            "soft_tau": soft,
        }),
        true,
    ))
}

fn select(args: &SelectArgs) -> std::result::Result<Output, CliError> {
    let scores: ScoresFile = parse_json(&args.scores)?;
    let indices = select_queries_weighted(&scores.text, &scores.visual, args.k, args.alpha)?;
    let combined = combined_scores(&scores.text, &scores.visual, args.alpha);
    let selected: Vec<f64> = indices.iter().map(|&i| combined[i]).collect();
    Ok(Output::json(
        &json!({
            "k": args.k,
            "alpha": args.alpha,
            "indices": indices,
            "combined": selected,
        }),
        true,
    ))
}

fn fuse_demo(args: &FuseDemoArgs, seed: Option<u64>) -> std::result::Result<Output, CliError> {
    let mut config = match &args.config {
        Some(path) => parse_json::<FuseDemoConfig>(path)?,
        None => FuseDemoConfig {
            dim: 32,
            n_features: 64,
            n_text: 4,
            n_visual: 4,
            seed: 0,
            layers: crate::fusion::DEFAULT_FUSION_LAYERS,
            per_pathway_background: false,
        },
    };
    if let Some(s) = seed {
        config.seed = s;
    }
    config.dim = args.dim.unwrap_or(config.dim);
    config.n_features = args.features.unwrap_or(config.n_features);
    config.n_text = args.text.unwrap_or(config.n_text);
    config.n_visual = args.visual.unwrap_or(config.n_visual);
    config.layers = args.layers.unwrap_or(config.layers);
    config.per_pathway_background |= args.per_pathway_background;
    Ok(Output::json(&run_fuse_demo(&config)?, true))
}

fn sample(args: &SampleArgs, seed: Option<u64>) -> std::result::Result<Output, CliError> {
    let mut manifest: SamplerManifest = parse_json(&args.manifest)?;
    if let Some(s) = seed {
        manifest.seed = s;
    }
    let mut stdout = String::new();
    for batch in sample_batches(&manifest)? {
        stdout.push_str(&serde_json::to_string(&batch).expect("batches always serialize"));
        stdout.push('\n');
    }
    Ok(Output { stdout, ok: true })
}
