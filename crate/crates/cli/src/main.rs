use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use dailystudy::clock::{Clock, SystemClock};
use dailystudy::config_file::{parse_workers, Settings};
use dailystudy::gateway::{FaultConfig, MockCrowd, MockPush};
use dailystudy::persistence::{Durability, EventStore};
use dailystudy::service::{ServiceError, Study};
use dailystudy::sim::{calibrate, Grid, Targets};
use dailystudy::stats::TVariant;
use dailystudy_cli::{compact_log, export_csv, init, paytable, read_settings, report, simulate, Report, StudyDir};

#[derive(Parser)]
#[command(name = "dailystudy", version, about = "Run and analyse longitudinal daily-task crowd studies")]
struct Cli {
    /// Study directory holding study.conf and events.ndjson.
    #[arg(long, global = true, env = "DAILYSTUDY_DIR", default_value = "study")]
    dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config file and install it as a new study.
    Init { config: PathBuf },
    /// Run the HTTP service and reminder scheduler against the mock platform.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        addr: String,
        /// Seconds between scheduler passes.
        #[arg(long, default_value_t = 30)]
        tick_secs: u64,
    },
    /// Simulate a whole study and write its log to the study directory.
    Simulate {
        /// Settings file; defaults to the study directory's, then built-ins.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Workers per scheme, e.g. HI:44,HC:54,LC:89.
        #[arg(long)]
        workers: Option<String>,
        /// Replace an existing log.
        #[arg(long)]
        force: bool,
    },
    /// Print a report computed from the log.
    Report {
        kind: ReportKind,
        #[arg(long, value_enum, default_value_t = Variant::Welch)]
        variant: Variant,
    },
    /// Write the CSV artifacts.
    Export {
        #[arg(long, value_enum, default_value_t = Format::Csv)]
        format: Format,
        /// Output directory; defaults to <dir>/export.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Variant::Welch)]
        variant: Variant,
    },
    /// Print cumulative and hourly pay for every scheme.
    Paytable {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a snapshot plus log tail.
    Compact {
        /// Events to keep after the snapshot.
        #[arg(long, default_value_t = 0)]
        keep: usize,
        /// Output directory; defaults to <dir>/compacted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Search behaviour parameters that reproduce the target retention.
    Calibrate {
        #[arg(long, value_delimiter = ',', default_values_t = [1u64, 2, 3])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 5)]
        top: usize,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportKind {
    Retention,
    Payments,
    Histogram,
    Tests,
    Heatmap,
}

#[derive(Clone, Copy, ValueEnum)]
enum Variant {
    Welch,
    Pooled,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Csv,
}

impl From<Variant> for TVariant {
    fn from(v: Variant) -> Self {
        match v {
            Variant::Welch => TVariant::Welch,
            Variant::Pooled => TVariant::Pooled,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let dir = StudyDir::new(&cli.dir);
    match cli.command {
        Command::Init { config } => {
            let s = init(&config, &dir)?;
            println!(
                "installed study {} ({} days, {} schemes) in {}",
                s.study.study_id,
                s.study.duration_days,
                s.study.schemes.len(),
                dir.root().display()
            );
        }
        Command::Serve { addr, tick_secs } => serve(&dir, &addr, Duration::from_secs(tick_secs.max(1)))?,
        Command::Simulate {
            config,
            seed,
            workers,
            force,
        } => {
            let mut settings = match config {
                Some(path) => read_settings(&path)?,
                None if dir.config_path().exists() => dir.settings()?,
                None => Settings::default(),
            };
            if let Some(seed) = seed {
                settings.sim.seed = seed;
            }
            if let Some(w) = workers {
                settings.sim.workers = parse_workers(&w).map_err(anyhow::Error::msg).context("--workers")?;
            }
            let started = Instant::now();
            let out = simulate(&settings, &dir, force)?;
            println!(
                "seed {}: {} events, {} enrolled, {} ledger entries, {:.2}s -> {}",
                settings.sim.seed,
                out.events.len(),
                out.state.workers.len(),
                out.ledger.len(),
                started.elapsed().as_secs_f64(),
                dir.log_path().display()
            );
        }
        Command::Report { kind, variant } => {
            let kind = match kind {
                ReportKind::Retention => Report::Retention,
                ReportKind::Payments => Report::Payments,
                ReportKind::Histogram => Report::Histogram,
                ReportKind::Tests => Report::Tests,
                ReportKind::Heatmap => Report::Heatmap,
            };
            print!("{}", report(&dir, kind, variant.into())?);
        }
        Command::Export { format: Format::Csv, out, variant } => {
            let out = out.unwrap_or_else(|| dir.root().join("export"));
            for path in export_csv(&dir, &out, variant.into())? {
                println!("{}", path.display());
            }
        }
        Command::Paytable { config } => {
            let settings = match config {
                Some(path) => read_settings(&path)?,
                None => Settings::default(),
            };
            print!("{}", paytable(&settings.study)?);
        }
        Command::Compact { keep, out } => {
            let out = out.unwrap_or_else(|| dir.root().join("compacted"));
            let snap = compact_log(&dir, &out, keep)?;
            println!("snapshot at seq {} written to {}", snap.seq, out.display());
        }
        Command::Calibrate { seeds, top } => {
            let settings = if dir.config_path().exists() {
                dir.settings()?
            } else {
                Settings::default()
            };
            let points = calibrate(&settings.sim, &settings.study, &Grid::default(), &seeds, &Targets::default())?;
            println!("{:>6} {:>6} {:>6} {:>6} {:>7} {:>7} {:>7} {:>8}", "base", "resp", "h1", "aband", "all%", ">75%", "term%", "loss");
            for p in points.iter().take(top) {
                println!(
                    "{:>6.2} {:>6.2} {:>6.2} {:>6.2} {:>7.1} {:>7.1} {:>7.1} {:>8.2}",
                    p.profile.base_daily_completion,
                    p.profile.notification_responsiveness,
                    p.profile.hazard.get(1).copied().unwrap_or(0.0),
                    p.profile.p_abandon_after_first,
                    p.pct_all_days,
                    p.pct_over_75,
                    p.pct_terminal_among_missers,
                    p.loss
                );
            }
        }
    }
    Ok(())
}

fn serve(dir: &StudyDir, addr: &str, tick_every: Duration) -> Result<()> {
    let settings = dir.settings()?;
    let clock: Arc<dyn Clock> = Arc::new(SystemClock);
    let crowd = Arc::new(MockCrowd::new(clock.clone(), FaultConfig::default(), settings.study.seed));
    let push = Arc::new(MockPush::new(clock.clone(), FaultConfig::default(), settings.study.seed ^ 1));
    let store = EventStore::open(&dir.log_path(), settings.study.clone(), Durability::Sync)
        .with_context(|| format!("opening {}", dir.log_path().display()))?;
    let mut study = Study::new(store, crowd.clone(), push, clock.clone());
    let hit = match study.publish_enrollment_hit() {
        Ok(hit) | Err(ServiceError::DuplicateHit(hit)) => hit,
        Err(e) => return Err(e).context("publishing the enrollment HIT"),
    };
    let app = dailystudy_server::AppState::new(study, clock, Some((crowd, hit.clone())));

    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .with_context(|| format!("binding {addr}"))?;
        println!("serving on {}, enrollment HIT {hit}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        dailystudy_server::serve(listener, app, tick_every, shutdown).await?;
        Ok(())
    })
}
