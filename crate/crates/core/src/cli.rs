//! Command-line front end. Every subcommand builds a [`RunConfig`] from a
//! preset or file plus flag overrides, then runs one stage (or all).

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::{Error, Result};
use crate::eval::{evaluate_subject, EvalOptions, MetricBackend, MetricsReport, Protocol, RemoteMetricBackend, StubMetricBackend};
use crate::pipeline::{self, BackendChoice, Run, RunConfig, RunOptions, StageStatus};
use crate::util::atomic_write;

/// Exit code for usage, configuration and checkpoint-compatibility errors.
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "texhuman", version, about = "Textured 3D human reconstruction from a single image")]
struct Cli {
    /// Log only warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize the input image and estimate its normal map.
    Preprocess(StageArgs),
    /// Fit the coarse radiance field.
    Coarse(StageArgs),
    /// Synthesize the back view from the coarse field's depth.
    Backview(StageArgs),
    /// Refine the tetrahedral mesh against front/back normals.
    FineGeo(StageArgs),
    /// Optimize the texture field on the fixed mesh and render outputs.
    Texture(StageArgs),
    /// Re-render the turntable and evaluation views from saved outputs.
    Render(StageArgs),
    /// Score rendered views against ground truth or the input image.
    Evaluate(EvalArgs),
    /// Run every enabled stage in order.
    FullRun(StageArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Preset {
    /// Published hyperparameters (GPU scale).
    Paper,
    /// Small resolutions and step counts for CPU runs.
    Desk,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum BackendArg {
    Mock,
    Local,
    Remote,
}

#[derive(Debug, Args)]
struct StageArgs {
    /// TOML run configuration; overrides --preset.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "desk")]
    preset: Preset,
    #[arg(long)]
    workdir: Option<PathBuf>,
    /// Input photo (RGBA, or RGB on a white background).
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    prompt: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    backend: Option<BackendArg>,
    /// Base URL of the remote guidance service.
    #[arg(long)]
    endpoint: Option<String>,
    /// Working resolution for every stage.
    #[arg(long)]
    res: Option<usize>,
    #[arg(long)]
    coarse_steps: Option<usize>,
    #[arg(long)]
    geo_steps: Option<usize>,
    #[arg(long)]
    tex_steps: Option<usize>,
    /// Continue from the stage's saved state.
    #[arg(long)]
    resume: bool,
    /// Save state and stop after this many steps of the stage.
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum MetricBackendArg {
    None,
    Stub,
    Remote,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Run directory or a directory of view_XX.png renders.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth views (view_XX.png).
    #[arg(long)]
    gt: Option<PathBuf>,
    /// Defaults to thuman with --gt and sshq without.
    #[arg(long, value_enum)]
    protocol: Option<ProtocolArg>,
    /// Report directory; defaults to <pred>/eval.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    views: usize,
    /// Input image for the single-image protocol.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "none")]
    metric_backend: MetricBackendArg,
    #[arg(long)]
    metric_endpoint: Option<String>,
    #[arg(long, default_value_t = 0)]
    metric_seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProtocolArg {
    Thuman,
    Sshq,
}

impl StageArgs {
    fn config(&self) -> Result<RunConfig> {
        let mut cfg = match (&self.config, self.preset) {
            (Some(p), _) => RunConfig::load(p)?,
            (None, Preset::Paper) => RunConfig::paper_defaults(),
            (None, Preset::Desk) => RunConfig::desk(),
        };
        if let Some(w) = &self.workdir {
            cfg.workdir = w.clone();
        }
        if let Some(i) = &self.input {
            cfg.input_image = i.clone();
        }
        if let Some(p) = &self.prompt {
            cfg.prompt = p.clone();
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.backend {
            cfg.backend.kind = match b {
                BackendArg::Mock => BackendChoice::Mock,
                BackendArg::Local => BackendChoice::Local,
                BackendArg::Remote => BackendChoice::Remote,
            };
        }
        if let Some(e) = &self.endpoint {
            cfg.backend.endpoint = e.clone();
        }
        if let Some(r) = self.res {
            cfg.set_resolution(r);
        }
        if let Some(n) = self.coarse_steps {
            cfg.coarse.steps = n;
        }
        if let Some(n) = self.geo_steps {
            cfg.set_geometry_steps(n);
        }
        if let Some(n) = self.tex_steps {
            cfg.set_texture_steps(n);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn run(&self) -> Result<Run> {
        let cfg = self.config()?;
        std::fs::create_dir_all(&cfg.workdir)?;
        atomic_write(&cfg.workdir.join("run_config.toml"), cfg.to_toml().as_bytes())?;
        log::info!("workdir {} (config {})", cfg.workdir.display(), cfg.hash());
        Run::new(
            cfg,
            RunOptions {
                resume: self.resume,
                stop_after: self.stop_after,
            },
        )
    }
}

fn report_status(stage: &str, status: StageStatus) {
    match status {
        StageStatus::Complete => log::info!("{stage}: complete"),
        StageStatus::Stopped { step } => log::info!("{stage}: stopped after step {step}; rerun with --resume to continue"),
    }
}

fn evaluate(args: &EvalArgs) -> Result<()> {
    let protocol = match (args.protocol, &args.gt) {
        (Some(ProtocolArg::Thuman), _) | (None, Some(_)) => Protocol::Thuman,
        (Some(ProtocolArg::Sshq), _) | (None, None) => Protocol::Sshq,
    };
    let backend: Option<Box<dyn MetricBackend>> = match args.metric_backend {
        MetricBackendArg::None => None,
        MetricBackendArg::Stub => Some(Box::new(StubMetricBackend::new(args.metric_seed))),
        MetricBackendArg::Remote => {
            let ep = args
                .metric_endpoint
                .clone()
                .ok_or_else(|| Error::InvalidArgument("--metric-backend remote needs --metric-endpoint".into()))?;
            Some(Box::new(RemoteMetricBackend::new(ep, 120.0)))
        }
    };
    let subject = subject_name(&args.pred);
    let opts = EvalOptions {
        protocol,
        views: args.views,
        reference: args.reference.clone(),
    };
    let report = evaluate_subject(&subject, &args.pred, args.gt.as_deref(), &opts, backend.as_deref())?;
    let report = MetricsReport::new(protocol, backend.as_ref().map(|b| b.id()), vec![report]);
    let out = args.out.clone().unwrap_or_else(|| args.pred.join(pipeline::EVAL_DIR));
    let (json, _) = report.save(&out)?;
    if report.partial {
        log::warn!("report is partial: {} view(s) missing", report.subjects[0].missing_views.len());
    }
    println!("{}", json.display());
    Ok(())
}

fn subject_name(pred: &Path) -> String {
    std::fs::canonicalize(pred)
        .ok()
        .and_then(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
        .unwrap_or_else(|| "subject".into())
}

fn dispatch(cli: Cli) -> Result<()> {
    type Stage = fn(&Run) -> Result<StageStatus>;
    let stage: (&str, Stage, &StageArgs) = match &cli.command {
        Command::Evaluate(a) => return evaluate(a),
        Command::Render(a) => {
            let run = a.run()?;
            for p in pipeline::texture::render_outputs(&run)? {
                log::debug!("wrote {}", p.display());
            }
            return Ok(());
        }
        Command::Preprocess(a) => ("preprocess", pipeline::preprocess::run_preprocess, a),
        Command::Coarse(a) => ("coarse", pipeline::coarse::run_coarse, a),
        Command::Backview(a) => ("backview", pipeline::backview::run_backview, a),
        Command::FineGeo(a) => ("fine-geo", pipeline::geometry::run_fine_geometry, a),
        Command::Texture(a) => ("texture", pipeline::texture::run_texture, a),
        Command::FullRun(a) => ("full-run", pipeline::full_run, a),
    };
    let (name, f, args) = stage;
    let run = args.run()?;
    report_status(name, f(&run)?);
    Ok(())
}

/// Exit code for an error: 2 for usage and configuration problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::ConfigHashMismatch { .. } | Error::InvalidArgument(_) => EXIT_USAGE,
        _ => 1,
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["texhuman", "coarse", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["texhuman"]), EXIT_USAGE);
        assert_eq!(run(["texhuman", "--help"]), 0);
    }

    #[test]
    fn invalid_config_exits_2() {
        let tmp = tempfile::tempdir().unwrap();
        let bad = tmp.path().join("bad.toml");
        std::fs::write(&bad, "nonsense = 1\n").unwrap();
        assert_eq!(run(["texhuman", "preprocess", "--config", bad.to_str().unwrap()]), EXIT_USAGE);
        let w = tmp.path().to_str().unwrap();
        assert_eq!(run(["texhuman", "coarse", "--workdir", w, "--res", "2"]), EXIT_USAGE);
    }

    #[test]
    fn flags_override_the_preset() {
        let cli = Cli::try_parse_from([
            "texhuman", "full-run", "--res", "48", "--coarse-steps", "7", "--geo-steps", "30", "--tex-steps", "11", "--seed", "9",
        ])
        .unwrap();
        let Command::FullRun(a) = cli.command else { panic!() };
        let c = a.config().unwrap();
        assert_eq!((c.coarse.resolution, c.texture.resolution, c.coarse.steps, c.seed), (48, 48, 7, 9));
        assert_eq!(c.geometry.steps, 30);
        assert_eq!(c.texture.steps, 11);
        assert_eq!(c.weights.texture.late.as_ref().unwrap().from_step, 11);
    }
}
