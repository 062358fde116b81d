use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use datamarket::environment::write_round_log;
use datamarket::harness::{self, CellIndex, CellResult, ExperimentConfig, GridResult};
use datamarket::theory::{self, DynamicsSummary, SoundnessSweep, Theorem3Bounds, TheoremOneVerdict};
use datamarket::{seed, Error, Result};

#[derive(Parser)]
#[command(name = "datamarket", version, about = "Competing ML predictors with data purchase")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a single grid cell and write its reports plus a round log.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override the base seed from the config.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        budget_index: usize,
        #[arg(long, default_value_t = 0)]
        alpha_index: usize,
        #[arg(long, default_value_t = 0)]
        repeat: usize,
    },
    /// Run the full (budget x alpha x repeat) grid.
    Grid {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Check the closed-form QoE results numerically and print a JSON report.
    VerifyTheory {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random distribution pairs per M in the soundness sweep.
        #[arg(long, default_value_t = 10_000)]
        pairs: u64,
        #[arg(long, value_delimiter = ',', default_values_t = vec![3, 4, 5, 10])]
        m: Vec<usize>,
        /// Lattice counts of Z1 (comma separated, M + 1 entries) for a
        /// single explicit check; requires --z2 and --alpha.
        #[arg(long, value_delimiter = ',')]
        z1: Option<Vec<u64>>,
        #[arg(long, value_delimiter = ',')]
        z2: Option<Vec<u64>>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Recompute aggregate.csv from a raw.csv.
    Report {
        /// raw.csv, or a directory containing it.
        #[arg(long)]
        raw: PathBuf,
        /// Output path; defaults to aggregate.csv next to the raw file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load(config: &Path, seed: Option<u64>) -> Result<ExperimentConfig> {
    let mut cfg = harness::parse_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: Option<PathBuf>, cfg: &ExperimentConfig) -> PathBuf {
    cli.or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"))
}

fn report_failures(g: &GridResult) -> bool {
    let mut ok = true;
    for (c, e) in g.failures() {
        eprintln!("cell n_b={} alpha={} repeat={} failed: {e}", c.n_b, c.alpha, c.index.repeat);
        ok = false;
    }
    ok
}

fn cmd_run(config: &Path, out: Option<PathBuf>, seed: Option<u64>, index: CellIndex) -> Result<bool> {
    let cfg = load(config, seed)?;
    if index.budget >= cfg.budget_grid.len() || index.alpha >= cfg.alpha_grid.len() || index.repeat >= cfg.repeats {
        return Err(Error::InvalidArgument(format!("cell {index:?} is outside the grid")));
    }
    let out = out_dir(out, &cfg);
    let data = harness::prepare_data(&cfg)?;
    let run = harness::run_cell(&cfg, &data, index);
    let (outcome, history) = match run {
        Ok(r) => (Ok(r.outcome), Some(r.history)),
        Err(e) => (Err(e.to_string()), None),
    };
    let g = GridResult {
        name: cfg.name.clone(),
        m: cfg.m(),
        cells: vec![CellResult {
            index,
            n_b: cfg.budget_grid[index.budget],
            alpha: cfg.alpha_grid[index.alpha],
            seed: harness::cell_seed(cfg.seed, index),
            outcome,
        }],
    };
    harness::emit_reports(&g, &out)?;
    if let Some(h) = history {
        let path = out.join("rounds.jsonl");
        let file = fs::File::create(&path).map_err(|e| Error::Io { path: path.clone(), source: e })?;
        write_round_log(&h, std::io::BufWriter::new(file))?;
    }
    eprintln!("wrote {}", out.display());
    Ok(report_failures(&g))
}

fn cmd_grid(config: &Path, out: Option<PathBuf>, workers: Option<usize>, seed: Option<u64>) -> Result<bool> {
    let mut cfg = load(config, seed)?;
    if let Some(w) = workers {
        cfg.workers = w;
    }
    let out = out_dir(out, &cfg);
    let g = harness::run_grid(&cfg)?;
    harness::emit_reports(&g, &out)?;
    eprintln!("wrote {} ({} cells)", out.display(), g.cells.len());
    Ok(report_failures(&g))
}

#[derive(Serialize)]
struct LemmaCheck {
    instances: usize,
    max_abs_error: f64,
}

#[derive(Serialize)]
struct BoundsCheck {
    instances: usize,
    violations: usize,
    example: Theorem3Bounds,
}

#[derive(Serialize)]
struct TheoryReport {
    lemma: LemmaCheck,
    bounds: BoundsCheck,
    soundness: Vec<SoundnessSweep>,
    #[serde(skip_serializing_if = "Option::is_none")]
    explicit: Option<ExplicitCheck>,
    ok: bool,
}

#[derive(Serialize)]
struct ExplicitCheck {
    #[serde(flatten)]
    verdict: TheoremOneVerdict,
    qoe1_brute_force: f64,
    qoe2_brute_force: f64,
}

fn cmd_verify_theory(
    seed_value: u64,
    pairs: u64,
    ms: &[usize],
    z1: Option<Vec<u64>>,
    z2: Option<Vec<u64>>,
    alpha: Option<f64>,
) -> Result<bool> {
    use rand::Rng;
    let mut rng = seed::rng(seed_value);

    let mut max_abs_error: f64 = 0.0;
    let lemma_n = 1000;
    for _ in 0..lemma_n {
        let m = rng.random_range(2..=6);
        let a = [0.0, 0.5, 1.0, 2.0, 4.0][rng.random_range(0..5)];
        let q: Vec<f64> = (0..m).map(|_| rng.random_range(0..2) as f64).collect();
        let n_cor = q.iter().sum::<f64>();
        let err = (theory::softmax_expectation(&q, a) - theory::k_closed_form(n_cor / m as f64, a)).abs();
        max_abs_error = max_abs_error.max(err);
    }

    let alphas = [0.0, 0.5, 1.0, 2.0, 4.0, 8.0];
    let mut violations = 0;
    let bounds_n = 500;
    let mut example = None;
    for _ in 0..bounds_n {
        let m = rng.random_range(2..=8);
        let n = rng.random_range(1..=20);
        let q: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(0.0..3.0)).collect())
            .collect();
        let mut prev = f64::NEG_INFINITY;
        for &a in &alphas {
            let b = theory::theorem3_bounds(&q, a)?;
            if b.lower > b.value + 1e-12 || b.value > b.upper + 1e-12 || b.value < prev - 1e-12 {
                violations += 1;
            }
            prev = b.value;
            example.get_or_insert(b);
        }
    }

    let soundness = ms
        .iter()
        .map(|&m| theory::soundness_sweep(m, pairs, seed_value, 1e-12))
        .collect::<Result<Vec<_>>>()?;

    let explicit = match (z1, z2, alpha) {
        (Some(a), Some(b), Some(alpha)) => {
            let m = a.len().saturating_sub(1);
            let s1 = DynamicsSummary::from_counts(m, alpha, a)?;
            let s2 = DynamicsSummary::from_counts(m, alpha, b)?;
            let (s1, s2) = if s1.mu() <= s2.mu() { (s1, s2) } else { (s2, s1) };
            Some(ExplicitCheck {
                verdict: theory::theorem1_condition(&s1, &s2)?,
                qoe1_brute_force: theory::qoe_brute_force(&s1),
                qoe2_brute_force: theory::qoe_brute_force(&s2),
            })
        }
        (None, None, _) => None,
        _ => return Err(Error::InvalidArgument("--z1, --z2 and --alpha go together".into())),
    };

    let ok = max_abs_error <= 1e-12 && violations == 0 && soundness.iter().all(|s| s.violations == 0);
    let report = TheoryReport {
        lemma: LemmaCheck {
            instances: lemma_n,
            max_abs_error,
        },
        bounds: BoundsCheck {
            instances: bounds_n,
            violations,
            example: example.expect("at least one instance"),
        },
        soundness,
        explicit,
        ok,
    };
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(ok)
}

fn cmd_report(raw: &Path, out: Option<PathBuf>) -> Result<bool> {
    let raw = if raw.is_dir() { raw.join("raw.csv") } else { raw.to_path_buf() };
    let out = out.unwrap_or_else(|| raw.with_file_name("aggregate.csv"));
    let rows = harness::reaggregate(&raw, &out)?;
    eprintln!("wrote {} ({} rows)", out.display(), rows.len());
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            out,
            seed,
            budget_index,
            alpha_index,
            repeat,
        } => cmd_run(
            &config,
            out,
            seed,
            CellIndex {
                budget: budget_index,
                alpha: alpha_index,
                repeat,
            },
        ),
        Command::Grid {
            config,
            out,
            workers,
            seed,
        } => cmd_grid(&config, out, workers, seed),
        Command::VerifyTheory {
            seed,
            pairs,
            m,
            z1,
            z2,
            alpha,
        } => cmd_verify_theory(seed, pairs, &m, z1, z2, alpha),
        Command::Report { raw, out } => cmd_report(&raw, out),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
