//! `contest-ite` command line: pipeline stages, one-off simulations and the
//! what-if HTTP service.

pub mod server;

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use contest_ite::config::RunConfig;
use contest_ite::pipeline::{
    run_pipeline, run_stage, to_response_json, Artifacts, RequestError, RequestErrorKind, RunDir,
    RunOptions, SimulateRequest, Stage, StageOutcome,
};
use contest_ite::simulate::ROI_DEFINITION;

#[derive(Debug, Parser)]
#[command(name = "contest-ite", version, about = "Team contest ITE estimation, prediction and design simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Run config (TOML). Defaults to <out>/run_config.toml, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Run directory.
    #[arg(long, global = true, default_value = "runs/default")]
    pub out: PathBuf,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long, global = true)]
    pub force: bool,
    /// Skip stages already completed under the same config.
    #[arg(long, global = true)]
    pub resume: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic contest dataset.
    Generate,
    /// Difference-in-differences ITEs per contest.
    Estimate,
    /// Feature matrix and temporal split.
    Featurize,
    /// Grid search and refit of every model family.
    Train,
    /// Test-set comparison, error analysis, residual noise.
    Evaluate,
    /// Design enumeration for the configured contests, or one what-if
    /// request with --request.
    Simulate {
        /// JSON request with the same fields as POST /simulate.
        #[arg(long)]
        request: Option<PathBuf>,
    },
    /// Serve contests, the model card and simulations over HTTP.
    Serve {
        #[arg(long)]
        address: Option<String>,
    },
    /// Every stage in order.
    Pipeline,
    /// Print the effective config.
    Config,
}

fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let existing = cli.out.join("run_config.toml");
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("loading {}", path.display()))?,
        None if existing.exists() => RunConfig::load(&existing)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses and answers a simulate request body. Shared with the server so
/// both paths produce the same bytes.
pub fn simulate_body(art: &Artifacts, body: &[u8]) -> std::result::Result<String, RequestError> {
    let req: SimulateRequest = serde_json::from_slice(body).map_err(|e| RequestError {
        kind: RequestErrorKind::BadRequest,
        message: format!("malformed simulate request: {e}"),
    })?;
    let result = art.simulate(&req)?;
    to_response_json(&result).map_err(RequestError::from)
}

fn print_report(out: &mut impl Write, dir: &Path, stage: Stage) -> Result<()> {
    let path = dir.join(stage.dir()).join("stage.json");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&path)?)?;
    match stage {
        Stage::Generate => {
            writeln!(out, "{:>8} {:>9} {:>15} {:>15}", "cities", "contests", "unique drivers", "participations")?;
            writeln!(
                out,
                "{:>8} {:>9} {:>15} {:>15}",
                report["n_cities"], report["n_contests"], report["n_unique_drivers"], report["n_participations"]
            )?;
        }
        Stage::Evaluate => {
            writeln!(out, "primary model: {}", report["primary_model"].as_str().unwrap_or("?"))?;
            writeln!(out, "{:<10} {:>10} {:>12} {:>10} {:>10}", "model", "test RMSE", "vs uniform", "features", "p")?;
            for r in report["comparison"].as_array().into_iter().flatten() {
                let pct = r["reduction_pct"].as_f64().map_or("-".into(), |v| format!("{v:.2}%"));
                let p = r["p_value"].as_f64().map_or("-".into(), |v| format!("{v:.4}"));
                writeln!(
                    out,
                    "{:<10} {:>10.2} {:>12} {:>10} {:>10}",
                    r["name"].as_str().unwrap_or("?"),
                    r["rmse"].as_f64().unwrap_or(f64::NAN),
                    pct,
                    r["n_selected"],
                    p
                )?;
            }
        }
        Stage::Simulate => {
            writeln!(out, "{ROI_DEFINITION}")?;
            let summary = std::fs::read_to_string(dir.join("simulate").join("summary.csv"))?;
            out.write_all(summary.as_bytes())?;
        }
        _ => writeln!(out, "{}", serde_json::to_string_pretty(&report)?)?,
    }
    Ok(())
}

fn stage_of(cmd: &Command) -> Option<Stage> {
    Some(match cmd {
        Command::Generate => Stage::Generate,
        Command::Estimate => Stage::Estimate,
        Command::Featurize => Stage::Featurize,
        Command::Train => Stage::Train,
        Command::Evaluate => Stage::Evaluate,
        Command::Simulate { request: None } => Stage::Simulate,
        _ => return None,
    })
}

/// Runs every command except `serve`.
pub fn run(cli: &Cli, out: &mut impl Write) -> Result<()> {
    let opts = RunOptions {
        force: cli.force,
        resume: cli.resume,
    };
    if let Some(stage) = stage_of(&cli.command) {
        let cfg = resolve_config(cli)?;
        let dir = RunDir::prepare(&cli.out, &cfg, opts)?;
        match run_stage(&dir, &cfg, stage, opts)? {
            StageOutcome::Skipped => writeln!(out, "{}: already complete", stage.name())?,
            StageOutcome::Ran => print_report(out, &cli.out, stage)?,
        }
        return Ok(());
    }
    match &cli.command {
        Command::Simulate { request: Some(path) } => {
            let body = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let art = Artifacts::load(&cli.out)?;
            let text = simulate_body(&art, &body)?;
            out.write_all(text.as_bytes())?;
        }
        Command::Pipeline => {
            let cfg = resolve_config(cli)?;
            let summary = run_pipeline(&cli.out, &cfg, opts)?;
            for stage in &summary.completed_stages {
                writeln!(out, "== {}", stage.name())?;
                print_report(out, &cli.out, *stage)?;
            }
            writeln!(out, "summary: {}", cli.out.join("summary.json").display())?;
        }
        Command::Config => {
            let cfg = resolve_config(cli)?;
            out.write_all(cfg.to_toml()?.as_bytes())?;
        }
        Command::Serve { .. } => anyhow::bail!("serve is handled by the binary entry point"),
        _ => unreachable!("stage commands handled above"),
    }
    Ok(())
}

/// Address for `serve`: the flag, else the config.
pub fn serve_address(cli: &Cli, flag: Option<&str>) -> Result<String> {
    match flag {
        Some(a) => Ok(a.to_string()),
        None => Ok(resolve_config(cli)?.serve.address),
    }
}
