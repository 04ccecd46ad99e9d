//! Command-line front end for `fsa-core`: correctness verification, analytic
//! and measured cost sweeps, and wall-clock micro-benchmarks.
//!
//! Exit codes: 0 on success, 1 when a verification check fails, 2 on invalid
//! input (bad config, malformed selection fixture, unreadable file).

use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fsa_core::config::AttentionConfig;
use fsa_core::fsa::{FsaOptions, StatsMode};
use fsa_core::scenario::{Problem, Scenario, SelectionMode};
use fsa_core::selection::SelectionTensor;

pub mod sweep;
pub mod timing;
pub mod verify;

#[derive(Debug, Parser)]
#[command(name = "fsa-bench", version, about = "Verify, cost and time block-selected sparse attention engines")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check FSA and NSA against the dense oracle and every engine invariant.
    Verify(ScenarioArgs),
    /// Closed-form (and optionally measured) costs over a parameter grid.
    CostSweep(SweepArgs),
    /// Wall-clock timings of the engines on one scenario.
    Bench(ScenarioArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StatsArg {
    /// Exact per-query-head max and exp-sum.
    Exact,
    /// Group max shared across the query heads of a KV head.
    Shared,
    /// Pre-pass once per KV head; exp-sums come from the block pass.
    Speculative,
}

impl From<StatsArg> for StatsMode {
    fn from(s: StatsArg) -> Self {
        match s {
            StatsArg::Exact => StatsMode::PerQueryHead,
            StatsArg::Shared => StatsMode::SharedGroupMax,
            StatsArg::Speculative => StatsMode::SpeculativePerKvHead,
        }
    }
}

#[derive(Debug, Clone, Args)]
pub struct ScenarioArgs {
    /// TOML file with `N`, `d`, `h`, `h_K`, `B_K`, `T` and optional extras.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// random_uniform, from_scores, self_block_only or full.
    #[arg(long, value_parser = parse_selection_mode)]
    pub selection_mode: Option<SelectionMode>,
    /// Binary selection fixture replacing the generated selection.
    #[arg(long)]
    pub selection: Option<PathBuf>,
    #[arg(long)]
    pub repeat: Option<usize>,
    #[arg(long, value_enum, default_value_t = StatsArg::Exact)]
    pub stats_mode: StatsArg,
    /// Write the report as CSV to this path (`-` for stdout).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    /// GQA group sizes.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1, 2, 4, 8])]
    pub grid_g: Vec<usize>,
    /// `B_K:T` pairs.
    #[arg(long, value_delimiter = ',', value_parser = parse_bk_t, default_value = "64:16")]
    pub grid_bk_t: Vec<(usize, usize)>,
    /// Sequence lengths.
    #[arg(long, value_delimiter = ',', default_values_t = vec![65536])]
    pub grid_n: Vec<usize>,
    /// Head dims.
    #[arg(long, value_delimiter = ',', default_values_t = vec![128])]
    pub grid_d: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub h_kv: usize,
    #[arg(long, default_value_t = 8)]
    pub min_tile: usize,
    #[arg(long, default_value_t = 2)]
    pub bytes_per_elem: usize,
    /// Also run both engines and append measured rows (points with N ≤ 4096).
    #[arg(long)]
    pub measure: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = StatsArg::Speculative)]
    pub stats_mode: StatsArg,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

fn parse_selection_mode(s: &str) -> std::result::Result<SelectionMode, String> {
    s.parse().map_err(|e: fsa_core::Error| e.to_string())
}

fn parse_bk_t(s: &str) -> std::result::Result<(usize, usize), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected B_K:T, got {s:?}"))?;
    let parse = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

/// The default verification scenario: `N = 256`, `d = 16`, `h = 4`, `h_K = 2`,
/// `B_K = 16`, `T = 4`.
pub fn default_config() -> AttentionConfig {
    AttentionConfig::new(256, 16, 4, 2, 16, 4)
}

/// A scenario resolved from flags, config file and defaults, in that order.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub scenario: Scenario,
    pub problem: Problem,
    /// True when the selection came from a fixture file.
    pub fixture: bool,
    pub fsa_opts: FsaOptions,
}

pub fn resolve(args: &ScenarioArgs) -> Result<Resolved> {
    let (cfg, extras) = match &args.config {
        Some(path) => AttentionConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
        None => (default_config(), Default::default()),
    };
    let mode = match (args.selection_mode, extras.selection_mode.as_deref()) {
        (Some(m), _) => m,
        (None, Some(s)) => s.parse()?,
        (None, None) => SelectionMode::RandomUniform,
    };
    let mut scenario = Scenario::new(cfg, args.seed.or(extras.seed).unwrap_or(0), mode);
    scenario.repeat = args.repeat.or(extras.repeat).unwrap_or(1).max(1);
    let mut problem = scenario.materialize()?;
    let fixture = args.selection.is_some();
    if let Some(path) = &args.selection {
        let sel = SelectionTensor::load(path).with_context(|| format!("reading {}", path.display()))?;
        sel.validate(&problem.cfg)?;
        problem.selection = sel;
    }
    Ok(Resolved {
        scenario,
        problem,
        fixture,
        fsa_opts: FsaOptions {
            stats_mode: args.stats_mode.into(),
            ..Default::default()
        },
    })
}

/// Opens the CSV sink named by `--csv`, if any.
pub fn csv_sink(path: &Option<PathBuf>) -> Result<Option<Box<dyn Write>>> {
    Ok(match path {
        None => None,
        Some(p) if p.as_os_str() == "-" => Some(Box::new(io::stdout())),
        Some(p) => Some(Box::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
    })
}

/// A reader that closes the pipe early (`fsa-bench verify | head`) ends the
/// run quietly.
fn is_broken_pipe(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        let io = c
            .downcast_ref::<io::Error>()
            .or_else(|| c.downcast_ref::<csv::Error>().and_then(|ce| match ce.kind() {
                csv::ErrorKind::Io(io) => Some(io),
                _ => None,
            }));
        io.is_some_and(|io| io.kind() == io::ErrorKind::BrokenPipe)
    })
}

/// Runs a parsed command, writing the human-readable report to `out`.
/// Returns the process exit code.
pub fn run(cli: &Cli, out: &mut dyn Write) -> i32 {
    let result = match &cli.command {
        Command::Verify(args) => verify::cmd_verify(args, out),
        Command::CostSweep(args) => sweep::cmd_cost_sweep(args, out),
        Command::Bench(args) => timing::cmd_bench(args, out),
    };
    match result {
        Ok(true) => 0,
        Ok(false) => 1,
        Err(e) if is_broken_pipe(&e) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}
