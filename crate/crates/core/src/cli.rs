//! Command-line front end. Exit codes: 0 success, 1 invalid input (nothing is
//! written), 2 runtime failure.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};

use crate::error::{Error, Result};
use crate::federation::Aggregation;
use crate::harness::{self, write_sync_csv, ExperimentPlan};
use crate::operators::{fixed_point, DomainFamily, OperatorKind};
use crate::uncertainty::{
    lp_max_inner_radius, support_bruteforce, support_with_radius, LpOrder, Metric, BRUTE_FORCE_MAX_STATES,
};

#[derive(Debug, Parser)]
#[command(name = "mdtl", version, about = "Robust multi-domain transfer learning on tabular MDPs")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run an experiment plan and write traces and tables.
    Train {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace the plan's seed list with this single seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Worker threads (speed only; results are identical).
        #[arg(long)]
        threads: Option<usize>,
    },
    /// Solve an operator's fixed point on a family file and print Q.
    FixedPoint {
        #[arg(long)]
        family: PathBuf,
        /// ao, mp, proximal, non_robust_dr, non_robust_max, target, robust_target or robust:<k>.
        #[arg(long)]
        operator: String,
        #[arg(long, default_value_t = 1e-10)]
        tol: f64,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Write the residual trace as CSV.
        #[arg(long)]
        residuals: Option<PathBuf>,
    },
    /// Compare analytic support functions with brute force on random inputs.
    OracleCheck {
        #[arg(long, value_enum, default_value_t = OracleMetric::All)]
        metric: OracleMetric,
        #[arg(long, default_value_t = 500)]
        trials: usize,
        #[arg(long, default_value_t = 3)]
        states: usize,
        #[arg(long, default_value_t = 1e-2)]
        resolution: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Exact-operator runs over several sync periods.
    SyncAblation {
        #[arg(long)]
        family: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "1,5,20")]
        periods: Vec<usize>,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        step_size: f64,
        #[arg(long)]
        max: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OracleMetric {
    Tv,
    L1,
    L2,
    Linf,
    Wasserstein,
    All,
}

impl OracleMetric {
    fn expand(self, states: usize) -> Vec<Metric> {
        let lp = |order| Metric::LpNorm { order };
        match self {
            OracleMetric::Tv => vec![Metric::TotalVariation],
            OracleMetric::L1 => vec![lp(LpOrder::One)],
            OracleMetric::L2 => vec![lp(LpOrder::Two)],
            OracleMetric::Linf => vec![lp(LpOrder::Infinity)],
            OracleMetric::Wasserstein => vec![Metric::wasserstein_line(states, 1.0)],
            OracleMetric::All => {
                [OracleMetric::Tv, OracleMetric::L1, OracleMetric::L2, OracleMetric::Linf, OracleMetric::Wasserstein]
                    .iter()
                    .flat_map(|m| m.expand(states))
                    .collect()
            }
        }
    }
}

/// Grids coarser than this are flagged in the report.
pub const COARSE_RESOLUTION: f64 = 0.05;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub metric: String,
    pub trials: usize,
    pub failures: usize,
    /// Largest `exact - brute` (brute force must never be lower).
    pub worst_undershoot: f64,
    /// Largest `(brute - exact) / allowed`.
    pub worst_ratio: f64,
    pub coarse: bool,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Random `(p, v, radius)` triples on `states` states; the first trial uses a
/// zero radius. The grid oracle may exceed the analytic value by at most
/// `resolution * |v|_inf * S`; the Wasserstein oracle is an LP, held to 1e-6.
pub fn oracle_check(metric: &Metric, trials: usize, states: usize, resolution: f64, seed: u64) -> Result<OracleReport> {
    if !(2..=BRUTE_FORCE_MAX_STATES).contains(&states) {
        return Err(Error::TooLarge(format!("oracle check needs 2..={BRUTE_FORCE_MAX_STATES} states, got {states}")));
    }
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::Config(format!("resolution {resolution} must lie in (0, 1]")));
    }
    metric.validate(states)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirichlet = Dirichlet::new(&vec![1.0; states]).map_err(|e| Error::Config(e.to_string()))?;
    let mut report = OracleReport {
        metric: metric.name(),
        trials,
        failures: 0,
        worst_undershoot: 0.0,
        worst_ratio: 0.0,
        coarse: resolution > COARSE_RESOLUTION,
    };
    for trial in 0..trials {
        let raw: Vec<f64> = dirichlet.sample(&mut rng);
        // keep rows away from the boundary so l_p balls have room
        let p: Vec<f64> = raw.iter().map(|x| 0.9 * x + 0.1 / states as f64).collect();
        let v: Vec<f64> = (0..states).map(|_| rng.gen::<f64>()).collect();
        let u: f64 = if trial == 0 { 0.0 } else { rng.gen() };
        let radius = match metric {
            Metric::TotalVariation => u,
            Metric::LpNorm { order } => u * lp_max_inner_radius(&p, *order),
            Metric::Wasserstein { .. } => u * (states - 1) as f64,
        };
        let exact = support_with_radius(&p, &v, metric, radius)?.value;
        let brute = support_bruteforce(&p, &v, metric, radius, resolution)?;
        let allowed = match metric {
            Metric::Wasserstein { .. } => 1e-6,
            _ => resolution * v.iter().copied().fold(0.0, f64::max) * states as f64 + 1e-9,
        };
        let undershoot = exact - brute;
        let ratio = (brute - exact) / allowed;
        report.worst_undershoot = report.worst_undershoot.max(undershoot);
        report.worst_ratio = report.worst_ratio.max(ratio);
        if undershoot > 1e-9 || ratio > 1.0 {
            report.failures += 1;
        }
    }
    Ok(report)
}

/// Why a command failed, which decides the exit code.
#[derive(Debug)]
pub enum Failure {
    Invalid(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

fn invalid<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Invalid)
}

fn runtime<T>(r: Result<T>) -> std::result::Result<T, Failure> {
    r.map_err(Failure::Runtime)
}

fn load_family(path: &Path) -> std::result::Result<DomainFamily, Failure> {
    let text = invalid(fs::read_to_string(path).map_err(Error::from))?;
    invalid(serde_json::from_str(&text).map_err(Error::from))
}

pub fn execute(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Train { plan, out, seed, threads } => {
            let mut plan = invalid(ExperimentPlan::load(&plan))?;
            if let Some(seed) = seed {
                plan.seeds = vec![seed];
            }
            if threads == Some(0) {
                return Err(Failure::Invalid(Error::Config("--threads must be at least 1".into())));
            }
            let (_, warnings) = invalid(plan.validate())?;
            for w in &warnings {
                eprintln!("warning: {w}");
            }
            let outcome = runtime(harness::run_plan(&plan, &out, threads))?;
            let mut failed = 0;
            for cell in &outcome.cells {
                if let Err(e) = &cell.result {
                    eprintln!("error: {} seed {}: {e}", cell.method, cell.seed);
                    failed += 1;
                }
            }
            println!("method\tmetric\tr_test\tn\tmean\tstd\tmean_start\tstd_start");
            for s in &outcome.metrics.summary {
                println!(
                    "{}\t{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
                    s.method,
                    s.metric.name(),
                    s.r_test,
                    s.n,
                    s.mean,
                    s.std,
                    s.mean_start,
                    s.std_start
                );
            }
            if failed > 0 {
                return Err(Failure::Runtime(Error::Config(format!("{failed} plan cell(s) failed"))));
            }
            Ok(())
        }
        Command::FixedPoint { family, operator, tol, max_iters, residuals } => {
            let kind: OperatorKind = invalid(operator.parse())?;
            if !(tol > 0.0) {
                return Err(Failure::Invalid(Error::Config(format!("--tol {tol} must be positive"))));
            }
            let family = load_family(&family)?;
            if !family.is_valid() {
                eprintln!("warning: the radius does not cover every source distance");
            }
            let solved = runtime(fixed_point(&kind, &family, tol, max_iters))?;
            if let Some(path) = residuals {
                runtime(solved.write_residuals_csv(path))?;
            }
            println!("# operator {kind}, iterations {}, residual {:e}", solved.iterations, solved.residual);
            for (s, row) in solved.q.to_rows().iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|x| x.to_string()).collect();
                println!("{s}\t{}", cells.join("\t"));
            }
            runtime(solved.require_converged()).map(|_| ())
        }
        Command::OracleCheck { metric, trials, states, resolution, seed } => {
            let mut all_passed = true;
            for m in metric.expand(states) {
                let report = invalid(oracle_check(&m, trials, states, resolution, seed))?;
                let verdict = if report.passed() { "PASS" } else { "FAIL" };
                println!(
                    "{verdict} {}: {} trials, {} failures, worst undershoot {:.3e}, worst excess/allowed {:.3}{}",
                    report.metric,
                    report.trials,
                    report.failures,
                    report.worst_undershoot,
                    report.worst_ratio,
                    if report.coarse { " (coarse grid: tolerance widened accordingly)" } else { "" }
                );
                all_passed &= report.passed();
            }
            if all_passed {
                Ok(())
            } else {
                Err(Failure::Runtime(Error::Config("analytic support functions disagree with brute force".into())))
            }
        }
        Command::SyncAblation { family, periods, steps, step_size, max, out } => {
            if periods.contains(&0) {
                return Err(Failure::Invalid(Error::Config("sync periods must be at least 1".into())));
            }
            let family = load_family(&family)?;
            let aggregation = if max { Aggregation::MaxDirect } else { Aggregation::Mean };
            let rows = runtime(harness::ablation_sync_period(&family, &periods, steps, step_size, aggregation))?;
            println!("sync_period\tfinal_error\tcomm_rounds");
            for r in &rows {
                println!("{}\t{:e}\t{}", r.sync_period, r.final_error, r.comm_rounds);
            }
            if let Some(path) = out {
                runtime(write_sync_csv(&rows, path))?;
            }
            Ok(())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    match execute(cli.command) {
        Ok(()) => 0,
        Err(failure) => {
            let (Failure::Invalid(e) | Failure::Runtime(e)) = &failure;
            eprintln!("error: {e}");
            failure.exit_code()
        }
    }
}
