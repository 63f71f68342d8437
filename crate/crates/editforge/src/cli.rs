//! Operator surface: subcommand dispatch, endpoint wiring (HTTP or
//! deterministic mock), and exit-code policy.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 config/usage error.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, Subcommand};

use crate::bench::{self, Locale};
use crate::config::{ConfigError, RunConfig};
use crate::curation::{self, PipelineEndpoints, SourceImage};
use crate::gateway::mock::{mock_endpoint_config, MockTransport};
use crate::gateway::{Endpoint, HttpTransport};
use crate::model::{PreferencePair, Triplet, TripletStatus};
use crate::scoring;
use crate::store::ArtifactStore;
use crate::taxonomy::Taxonomy;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "editforge", version, about = "Curation, verification and benchmark runner for instruction-based image editing")]
pub struct Cli {
    /// Path to the TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Validate configuration and inputs, then exit without touching
    /// anything.
    #[arg(long, global = true)]
    pub dry_run: bool,
    /// Resume a previous run by id.
    #[arg(long, global = true, value_name = "RUN_ID")]
    pub resume: Option<String>,
    /// Bind every endpoint role to the deterministic in-process mock.
    #[arg(long, global = true)]
    pub mock: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the three-stage curation pipeline end to end.
    Curate {
        /// Run identifier (defaults to a timestamp; --resume overrides).
        #[arg(long)]
        run_id: Option<String>,
    },
    /// Verification-only pass over a manifest of edited triplets.
    Verify {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Run the benchmark over a case manifest.
    Bench {
        #[arg(long)]
        manifest: PathBuf,
        /// Label for the model under test.
        #[arg(long)]
        model: Option<String>,
        /// Enforce the canonical 22x50 manifest shape.
        #[arg(long)]
        canonical: bool,
        /// Restrict to one locale (defaults to the configured list).
        #[arg(long)]
        locale: Option<String>,
    },
    /// Offline audit of a preference-pair log: mean loss and
    /// gradient-check pass rate.
    AuditD2po {
        #[arg(long)]
        pairs: PathBuf,
    },
    /// Print the stage-volume table for a completed run.
    Stats {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Re-export CSV tables from a benchmark report JSON.
    Report {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error("{0}")]
    Config(#[from] ConfigError),
    #[error("--config is required for this command")]
    ConfigRequired,
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::ConfigRequired | CliError::Usage(_) => EXIT_CONFIG,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }
}

fn runtime(e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

/// Parse argv and run; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // help/version are successful exits; bad usage is code 2
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = cli
        .config
        .as_deref()
        .map(RunConfig::from_file)
        .transpose()?;
    match &cli.command {
        Command::Curate { run_id } => cmd_curate(cli, require(cfg)?, run_id.as_deref()),
        Command::Verify { input, output } => cmd_verify(cli, require(cfg)?, input, output),
        Command::Bench {
            manifest,
            model,
            canonical,
            locale,
        } => cmd_bench(
            cli,
            require(cfg)?,
            manifest,
            model.as_deref(),
            *canonical,
            locale.as_deref(),
        ),
        Command::AuditD2po { pairs } => cmd_audit_d2po(cli, pairs),
        Command::Stats { run_dir } => cmd_stats(run_dir),
        Command::Report { report, out_dir } => cmd_report(cli, report, out_dir),
    }
}

fn require(cfg: Option<RunConfig>) -> Result<RunConfig, CliError> {
    cfg.ok_or(CliError::ConfigRequired)
}

// ── endpoint wiring ──────────────────────────────────────────────────

fn mock_generator() -> Arc<MockTransport> {
    let mock = MockTransport::new();
    mock.set_chat_hook(|_| {
        Some(
            serde_json::json!({"instructions": [
                {"subtask": "subject_addition", "instruction": "add a small red bird to the scene"},
                {"subtask": "subject_removal", "instruction": "remove the leftmost object"},
                {"subtask": "color_alteration", "instruction": "shift the dominant color toward blue"},
                {"subtask": "style_transfer", "instruction": "re-render the scene as a watercolor painting"},
                {"subtask": "spatial_reasoning", "instruction": "move the main subject behind the nearest occluder"},
            ]})
            .to_string(),
        )
    });
    mock
}

fn mock_verifier() -> Arc<MockTransport> {
    let mock = MockTransport::new();
    mock.set_chat_hook(|view| {
        let refined = view
            .user_text
            .lines()
            .find_map(|l| l.strip_prefix("Editing instruction: "))
            .unwrap_or("the requested edit")
            .trim()
            .to_string();
        Some(
            serde_json::json!({"is_changed": true, "instruction": refined}).to_string(),
        )
    });
    mock
}

fn mock_judge() -> Arc<MockTransport> {
    let mock = MockTransport::new();
    mock.set_chat_hook(|_| Some(r#"{"score": 7, "reason": "deterministic mock verdict"}"#.to_string()));
    mock
}

fn build_endpoint(
    cfg: &RunConfig,
    role: &str,
    mock: Option<Arc<MockTransport>>,
) -> Result<Endpoint, CliError> {
    if let Some(mock) = mock {
        return Endpoint::new(mock_endpoint_config(8), mock).map_err(runtime);
    }
    let ep_cfg = cfg.require_role(role)?;
    let transport = Arc::new(HttpTransport::new(ep_cfg).map_err(runtime)?);
    Endpoint::new(ep_cfg.clone(), transport).map_err(runtime)
}

// ── subcommands ──────────────────────────────────────────────────────

fn cmd_curate(cli: &Cli, cfg: RunConfig, run_id: Option<&str>) -> Result<(), CliError> {
    let source_path = cfg
        .paths
        .source_manifest
        .as_deref()
        .ok_or_else(|| CliError::Usage("paths.source_manifest is required for curate".to_string()))?;
    let sources: Vec<SourceImage> = curation::read_jsonl(source_path).map_err(runtime)?;
    if !cli.mock {
        for role in ["generator", "editor", "verifier"] {
            cfg.require_role(role)?;
        }
    }
    if cli.dry_run {
        println!(
            "dry-run ok: {} source images, output dir {}",
            sources.len(),
            cfg.paths.output_dir.display()
        );
        return Ok(());
    }

    let endpoints = PipelineEndpoints {
        generator: build_endpoint(&cfg, "generator", cli.mock.then(mock_generator))?,
        editor: build_endpoint(&cfg, "editor", cli.mock.then(MockTransport::new))?,
        verifier: build_endpoint(&cfg, "verifier", cli.mock.then(mock_verifier))?,
        aesthetic: if !cli.mock && cfg.endpoints.contains_key("aesthetic") {
            Some(build_endpoint(&cfg, "aesthetic", None)?)
        } else {
            None
        },
    };
    let store = ArtifactStore::open(&cfg.paths.artifact_store).map_err(runtime)?;
    let run_id = cli
        .resume
        .clone()
        .or_else(|| run_id.map(str::to_string))
        .unwrap_or_else(|| {
            let now = std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0);
            format!("run-{now}")
        });
    let run_dir = cfg.paths.output_dir.join("runs").join(&run_id);
    let outcome = curation::run_pipeline(
        &run_dir,
        &run_id,
        &sources,
        &endpoints,
        &store,
        Taxonomy::default_taxonomy(),
        &cfg.pipeline,
    )
    .map_err(runtime)?;
    if outcome.interrupted {
        println!("run {run_id} checkpointed on the operation budget; resume with --resume {run_id}");
        return Ok(());
    }
    curation::check_conservation(&outcome.stats).map_err(runtime)?;
    print!("{}", curation::format_stage_table(&outcome.stats));
    println!("manifest: {}", outcome.manifest_path.display());
    Ok(())
}

fn cmd_verify(cli: &Cli, cfg: RunConfig, input: &Path, output: &Path) -> Result<(), CliError> {
    let triplets: Vec<Triplet> = curation::read_jsonl(input).map_err(runtime)?;
    if !cli.mock {
        cfg.require_role("verifier")?;
    }
    if cli.dry_run {
        println!("dry-run ok: {} triplets", triplets.len());
        return Ok(());
    }
    let verifier = build_endpoint(&cfg, "verifier", cli.mock.then(mock_verifier))?;
    let mut out = Vec::with_capacity(triplets.len());
    let mut verified = 0usize;
    for t in &triplets {
        if t.status != TripletStatus::Edited {
            out.push(t.clone());
            continue;
        }
        let (_, t) = curation::verify_triplet(t, &verifier, curation::DEFAULT_VERIFY_PROMPT);
        if t.status == TripletStatus::Verified {
            verified += 1;
        }
        out.push(t);
    }
    curation::append_jsonl(output, &out).map_err(runtime)?;
    println!("verified {verified} of {} triplets -> {}", triplets.len(), output.display());
    Ok(())
}

fn cmd_bench(
    cli: &Cli,
    cfg: RunConfig,
    manifest: &Path,
    model: Option<&str>,
    canonical: bool,
    locale: Option<&str>,
) -> Result<(), CliError> {
    let taxonomy = Taxonomy::default_taxonomy();
    let canonical = canonical || cfg.bench.canonical;
    let cases = bench::load_manifest(manifest, taxonomy, canonical)
        .map_err(|e| match e {
            bench::BenchError::ShapeViolation(_) | bench::BenchError::SchemaViolation { .. } => {
                CliError::Usage(e.to_string())
            }
            other => runtime(other),
        })?;
    let locales: Vec<Locale> = match locale {
        Some(l) => vec![l.parse().map_err(CliError::Usage)?],
        None => cfg.locales(),
    };
    if !cli.mock {
        for role in ["editor", "judge"] {
            cfg.require_role(role)?;
        }
    }
    if cli.dry_run {
        println!("dry-run ok: {} cases, locales {:?}", cases.len(), locales);
        return Ok(());
    }
    let editor = build_endpoint(&cfg, "editor", cli.mock.then(MockTransport::new))?;
    let judge = build_endpoint(&cfg, "judge", cli.mock.then(mock_judge))?;
    let store = ArtifactStore::open(&cfg.paths.artifact_store).map_err(runtime)?;
    let model = model.unwrap_or(&cfg.bench.model_label);
    let out_dir = cfg.paths.output_dir.join("bench");
    for locale in locales {
        let (scored, failures) = bench::run_bench(&cases, &editor, &judge, &store, locale, None);
        let report = bench::aggregate(
            model,
            locale,
            taxonomy,
            scored,
            failures,
            cfg.bench.mean_of_subtask_means,
        )
        .map_err(runtime)?;
        bench::write_report(&report, &out_dir).map_err(runtime)?;
        println!("{}", bench::format_overall_row(&report));
    }
    Ok(())
}

fn cmd_audit_d2po(cli: &Cli, pairs: &Path) -> Result<(), CliError> {
    let file = std::fs::read_to_string(pairs).map_err(runtime)?;
    if cli.dry_run {
        println!("dry-run ok: {} lines", file.lines().count());
        return Ok(());
    }
    let mut losses = Vec::new();
    let mut grad_pass = 0usize;
    let mut skipped = 0usize;
    for (i, line) in file.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let pair: PreferencePair = match serde_json::from_str(line) {
            Ok(p) => p,
            Err(e) => {
                eprintln!("line {}: skipped ({e})", i + 1);
                skipped += 1;
                continue;
            }
        };
        if let Err(e) = pair.validate() {
            eprintln!("line {}: skipped ({e})", i + 1);
            skipped += 1;
            continue;
        }
        losses.push(scoring::d2po_loss(&pair));
        if scoring::gradient_check(&pair, 1e-5, 1e-6) {
            grad_pass += 1;
        }
    }
    if losses.is_empty() {
        return Err(CliError::Runtime("no valid preference pairs".to_string()));
    }
    let mean_loss = losses.iter().sum::<f64>() / losses.len() as f64;
    println!(
        "pairs={} skipped={} mean_loss={:.6} grad_pass_rate={:.4}",
        losses.len(),
        skipped,
        mean_loss,
        grad_pass as f64 / losses.len() as f64
    );
    Ok(())
}

fn cmd_stats(run_dir: &Path) -> Result<(), CliError> {
    let stats: Vec<curation::StageStats> =
        serde_json::from_slice(&std::fs::read(run_dir.join("stage_stats.json")).map_err(runtime)?)
            .map_err(runtime)?;
    curation::check_conservation(&stats).map_err(runtime)?;
    print!("{}", curation::format_stage_table(&stats));
    Ok(())
}

fn cmd_report(cli: &Cli, report: &Path, out_dir: &Path) -> Result<(), CliError> {
    let report: bench::BenchReport =
        serde_json::from_slice(&std::fs::read(report).map_err(runtime)?).map_err(runtime)?;
    if cli.dry_run {
        println!("dry-run ok: report for {}", report.model);
        return Ok(());
    }
    bench::write_report(&report, out_dir).map_err(runtime)?;
    println!("{}", bench::format_overall_row(&report));
    Ok(())
}
