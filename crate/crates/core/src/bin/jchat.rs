//! `jchat`: run and inspect the corpus pipeline.
//!
//! Exit status: 0 on success, 1 on runtime failure, 2 on bad configuration.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jchat_core::manifest::{validate_manifest, CorpusManifest};
use jchat_core::pipeline::{funnel_report, Interrupt, Layout, Pipeline, PipelineConfig, RunOptions, StageOutcome};
use jchat_core::{Error, Result, Stage};

#[derive(Parser)]
#[command(name = "jchat", version, about = "Build a spoken-dialogue corpus from in-the-wild audio")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline configuration (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `paths.workdir`.
    #[arg(long, global = true)]
    workdir: Option<PathBuf>,
    /// Shards processed in parallel.
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Stop with an error after N units of STAGE have written output
    /// (`STAGE[:N]`, N defaults to 1).
    #[arg(long, global = true, hide = true)]
    interrupt_after: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the document inventory.
    Collect,
    /// Language identification and filtering.
    Lid,
    /// Speaker diarization.
    Diarize,
    /// Split into dialogues and apply the dialogue filters.
    Segment,
    /// Enhance every retained dialogue.
    Cleanse,
    /// Write the two-channel release tree and splits.
    Package,
    /// Corpus statistics.
    Stats,
    /// Sample frame features from the cleansed dialogues.
    Features {
        /// Output stem; `.f32` and `.json` are appended.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every stage in order, resuming completed work.
    Run,
    /// Per-stage yield funnel.
    Report {
        #[arg(long)]
        json: bool,
    },
    /// Check a manifest directory against the record invariants.
    Validate {
        /// Shard directory; defaults to the latest stage with output.
        dir: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(path)?;
    if let Some(w) = &g.workdir {
        cfg.paths.workdir = w.clone();
    }
    if let Some(s) = g.seed_override {
        cfg.override_seeds(s);
    }
    Ok(cfg)
}

fn parse_interrupt(s: &str) -> Result<Interrupt> {
    let (stage, n) = s.split_once(':').unwrap_or((s, "1"));
    Ok(Interrupt {
        stage: stage.parse()?,
        after_units: n
            .parse()
            .map_err(|_| Error::invalid(format!("bad unit count `{n}`")))?,
    })
}

fn options(g: &Global) -> Result<RunOptions> {
    let mut o = RunOptions::default();
    if let Some(j) = g.jobs {
        if j == 0 {
            return Err(Error::Config("--jobs must be > 0".into()));
        }
        o.jobs = j;
    }
    o.interrupt = g.interrupt_after.as_deref().map(parse_interrupt).transpose()?;
    Ok(o)
}

fn pipeline(g: &Global) -> Result<Pipeline> {
    Pipeline::new(load_config(g)?, options(g)?)
}

fn print_outcome(o: &StageOutcome) {
    let stage = o.stage.map_or("-", |s| s.as_str());
    println!("{stage}: ran {} skipped {} failed {}", o.ran, o.skipped, o.failures);
}

fn default_manifest_dir(layout: &Layout) -> Option<PathBuf> {
    Stage::ALL
        .iter()
        .rev()
        .filter(|s| **s <= Stage::Cleanse)
        .map(|s| layout.manifest_dir(*s))
        .find(|d| d.is_dir())
}

fn validate(g: &Global, dir: Option<PathBuf>, json: bool) -> Result<bool> {
    let dir = match dir {
        Some(d) => d,
        None => {
            let cfg = load_config(g)?;
            let layout = Layout::new(cfg.paths.workdir, cfg.paths.output_dir);
            default_manifest_dir(&layout).ok_or_else(|| Error::invalid("no manifest found"))?
        }
    };
    let report = validate_manifest(&CorpusManifest::from_dir(&dir)?)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        for v in &report.violations {
            println!("{}\t{}\t{}", v.record_id, v.field, v.rule);
        }
        println!("{} violation(s)", report.violations.len());
    }
    Ok(report.is_valid())
}

fn report(g: &Global, json: bool) -> Result<()> {
    let layout = match (&g.config, &g.workdir) {
        (Some(_), _) => {
            let cfg = load_config(g)?;
            Layout::new(cfg.paths.workdir, cfg.paths.output_dir)
        }
        (None, Some(w)) => Layout::new(w, w.join("release")),
        (None, None) => return Err(Error::Config("--config or --workdir is required".into())),
    };
    let r = funnel_report(&layout)?;
    if json {
        println!("{}", serde_json::to_string_pretty(&r)?);
    } else {
        print!("{}", r.to_table());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    let g = &cli.global;
    let stage = match &cli.command {
        Command::Collect => Some(Stage::Collect),
        Command::Lid => Some(Stage::Lid),
        Command::Diarize => Some(Stage::Diarize),
        Command::Segment => Some(Stage::Segment),
        Command::Cleanse => Some(Stage::Cleanse),
        Command::Package => Some(Stage::Package),
        Command::Stats => Some(Stage::Stats),
        _ => None,
    };
    if let Some(stage) = stage {
        let p = pipeline(g)?;
        print_outcome(&p.run_stage(stage)?);
        if stage == Stage::Stats {
            print!("{}", p.stats_report()?.to_table());
        }
        return Ok(true);
    }
    match cli.command {
        Command::Run => {
            let p = pipeline(g)?;
            for o in p.run_all()? {
                print_outcome(&o);
            }
            print!("{}", p.funnel()?.to_table());
            Ok(true)
        }
        Command::Features { out } => {
            let p = pipeline(g)?;
            let stem = out.unwrap_or_else(|| p.layout().reports_dir().join("features"));
            let m = p.features(&stem)?;
            println!("wrote {} x {} features to {}", m.rows, m.dim, Path::new(&stem).display());
            Ok(true)
        }
        Command::Report { json } => report(g, json).map(|_| true),
        Command::Validate { dir, json } => validate(g, dir, json),
        _ => unreachable!("stage commands handled above"),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
