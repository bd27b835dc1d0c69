//! `ami` command-line front end.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::bounds::sweep_grid;
use crate::config::{ReportFormat, RunConfig};
use crate::error::{AmiError, Result};
use crate::game::GameEngine;
use crate::ldp::{self_test, DpConfig, Mechanism, DEFAULT_THE_THETA};
use crate::report::{
    emit, render, sort_bounds, sort_rows, BoundsRow, CheckRow, ReportRow, BOUNDS_SCHEMA, DP_CHECK_SCHEMA, GAME_SCHEMA,
};
use crate::rng::{child_rng, Stream};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "AMI_THREADS";

pub const DEFAULT_CHECK_TRIALS: u64 = 100_000;

#[derive(Debug, Parser)]
#[command(name = "ami", version, about = "Active membership inference simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the membership game and report ACC / F1 / AUC / advantage.
    Game(CommonArgs),
    /// Evaluate the attention lower bound on a grid of data shapes.
    Bounds(CommonArgs),
    /// Statistical self-tests of the LDP mechanisms.
    DpCheck(CommonArgs),
    /// Games over mechanisms x epsilons x attacks.
    Sweep(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_parser = parse_format)]
    pub format: Option<ReportFormat>,
}

fn parse_format(s: &str) -> std::result::Result<ReportFormat, String> {
    s.parse().map_err(|e: AmiError| e.to_string())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

struct Loaded {
    cfg: RunConfig,
    run_id: String,
    out: Option<PathBuf>,
    format: ReportFormat,
}

fn load(cmd: &str, args: &CommonArgs) -> Result<Loaded> {
    let mut cfg = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let text = std::fs::read(&args.config)?;
    let run_id = format!("{:016x}", fnv1a(&[cmd.as_bytes(), &text, &cfg.seed.to_le_bytes()].concat()));
    Ok(Loaded {
        out: args.out.clone().or_else(|| cfg.report.path.as_ref().map(|p| cfg.base_dir.join(p))),
        format: args.format.unwrap_or(cfg.report.format),
        cfg,
        run_id,
    })
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| AmiError::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        b = b.num_threads(n);
    }
    b.build().map_err(|e| AmiError::Numeric(format!("thread pool: {e}")))
}

/// One report row for the `[data]`, `[dp]`, `[attack]` and `[game]` sections.
pub fn game_rows(cfg: &RunConfig, run_id: &str) -> Result<Vec<ReportRow>> {
    let (source, vocab) = cfg.data_source()?;
    let dp = cfg.dp_config(cfg.dp.mechanism, cfg.dp.epsilon, RunConfig::vocab_size(&source, vocab.as_deref()))?;
    let game = cfg.game_config_with(&source, vocab, cfg.primary_attack()?, dp.clone())?;
    let engine = GameEngine::new(game)?;
    let run = engine.run()?;
    Ok(vec![ReportRow::from_run(run_id, &engine, &dp, &run)])
}

/// Rows for every mechanism x epsilon x attack of `[sweep]`, sorted.
pub fn sweep_rows(cfg: &RunConfig, run_id: &str) -> Result<Vec<ReportRow>> {
    let sw = cfg.sweep.as_ref().ok_or_else(|| AmiError::Config("missing [sweep] section".into()))?;
    if sw.mechanisms.is_empty() || sw.attacks.is_empty() {
        return Err(AmiError::Config("sweep.mechanisms and sweep.attacks must be nonempty".into()));
    }
    let (source, vocab) = cfg.data_source()?;
    let k = RunConfig::vocab_size(&source, vocab.as_deref());
    let mut dps = Vec::new();
    for &m in &sw.mechanisms {
        if m == Mechanism::None {
            dps.push(DpConfig::none());
            continue;
        }
        if sw.epsilons.is_empty() {
            return Err(AmiError::Config("sweep.epsilons must be nonempty".into()));
        }
        for &eps in &sw.epsilons {
            dps.push(cfg.dp_config(m, Some(eps), k)?);
        }
    }
    let engines = sw
        .attacks
        .iter()
        .map(|&a| GameEngine::new(cfg.game_config_with(&source, vocab.clone(), a, DpConfig::none())?))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for engine in &engines {
        let runs = engine.run_multi(&dps)?;
        rows.extend(dps.iter().zip(&runs).map(|(dp, run)| ReportRow::from_run(run_id, engine, dp, run)));
    }
    sort_rows(&mut rows);
    Ok(rows)
}

pub fn bounds_rows(cfg: &RunConfig) -> Result<Vec<BoundsRow>> {
    let estimates = sweep_grid(&cfg.sweep_config()?)?;
    let mut rows: Vec<BoundsRow> = estimates.iter().map(BoundsRow::from).collect();
    sort_bounds(&mut rows);
    Ok(rows)
}

/// Self-test rows for `[dp_check]`, falling back to `[dp]` for unset lists.
pub fn check_rows(cfg: &RunConfig) -> Result<Vec<CheckRow>> {
    let sec = cfg.dp_check.clone().unwrap_or_default();
    let mechanisms = match sec.mechanisms {
        Some(m) if !m.is_empty() => m,
        Some(_) => return Err(AmiError::Config("dp_check.mechanisms must be nonempty".into())),
        None if cfg.dp.mechanism != Mechanism::None => vec![cfg.dp.mechanism],
        None => Mechanism::ALL.to_vec(),
    };
    let epsilons = sec
        .epsilons
        .or_else(|| cfg.dp.epsilon.map(|e| vec![e]))
        .filter(|v| !v.is_empty())
        .ok_or_else(|| AmiError::Config("dp_check.epsilons (or dp.epsilon) is required".into()))?;
    let ks = sec
        .k
        .or_else(|| cfg.dp.k.map(|k| vec![k]))
        .filter(|v| !v.is_empty())
        .ok_or_else(|| AmiError::Config("dp_check.k (or dp.k) is required".into()))?;
    let trials = sec.trials.unwrap_or(DEFAULT_CHECK_TRIALS);
    if trials == 0 {
        return Err(AmiError::Config("dp_check.trials must be >= 1".into()));
    }
    let mut cases = Vec::new();
    for &m in &mechanisms {
        for &eps in &epsilons {
            for &k in &ks {
                let mut c = DpConfig::new(m, eps, k);
                c.the_theta = cfg.dp.the_theta.unwrap_or(DEFAULT_THE_THETA);
                if let Some(dd) = cfg.dp.dbit_d {
                    c.dbit_d = dd.min(k);
                }
                c.validate()?;
                cases.push(c);
            }
        }
    }
    let (seed, offset) = (cfg.seed, sec.expected_offset);
    let results = cases
        .par_iter()
        .enumerate()
        .map(|(i, c)| self_test(c, trials, offset, &mut child_rng(seed, i as u64, Stream::Check)))
        .collect::<Result<Vec<_>>>()?;
    Ok(results.iter().flatten().map(CheckRow::from).collect())
}

pub fn cmd_game(args: &CommonArgs) -> Result<i32> {
    let l = load("game", args)?;
    let rows = thread_pool()?.install(|| game_rows(&l.cfg, &l.run_id))?;
    log::info!("acc {} auc {} advantage {}", rows[0].acc, rows[0].auc, rows[0].advantage);
    emit(&render(GAME_SCHEMA, &rows, l.format)?, l.out.as_deref())?;
    Ok(EXIT_OK)
}

pub fn cmd_sweep(args: &CommonArgs) -> Result<i32> {
    let l = load("sweep", args)?;
    let rows = thread_pool()?.install(|| sweep_rows(&l.cfg, &l.run_id))?;
    emit(&render(GAME_SCHEMA, &rows, l.format)?, l.out.as_deref())?;
    Ok(EXIT_OK)
}

pub fn cmd_bounds(args: &CommonArgs) -> Result<i32> {
    let l = load("bounds", args)?;
    let rows = thread_pool()?.install(|| bounds_rows(&l.cfg))?;
    emit(&render(BOUNDS_SCHEMA, &rows, l.format)?, l.out.as_deref())?;
    Ok(EXIT_OK)
}

pub fn cmd_dp_check(args: &CommonArgs) -> Result<i32> {
    let l = load("dp-check", args)?;
    let rows = thread_pool()?.install(|| check_rows(&l.cfg))?;
    for r in &rows {
        eprintln!(
            "{} {} {} eps={} k={} empirical={:.6} expected={:.6} sigma={:.2e}",
            if r.pass { "PASS" } else { "FAIL" },
            r.mechanism,
            r.statistic,
            r.epsilon,
            r.k,
            r.empirical,
            r.expected,
            r.sigma
        );
    }
    emit(&render(DP_CHECK_SCHEMA, &rows, l.format)?, l.out.as_deref())?;
    Ok(if rows.iter().all(|r| r.pass) { EXIT_OK } else { EXIT_RUNTIME })
}

pub fn exit_code(e: &AmiError) -> i32 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_RUNTIME
    }
}

/// Parses `args` (including the program name) and runs the command; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Game(a) => cmd_game(a),
        Command::Bounds(a) => cmd_bounds(a),
        Command::DpCheck(a) => cmd_dp_check(a),
        Command::Sweep(a) => cmd_sweep(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
