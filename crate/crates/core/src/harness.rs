//! Experiment plans: build a family per seed, train every method, evaluate the
//! greedy policies on the target and write per-cell and aggregate CSVs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::envs::{
    build_gridworld, build_hpc, build_robot, hpc, perturb_tv, random_family, robot, uniform_pairs, GridWorldParams,
    HpcParams, RobotParams,
};
use crate::error::{Error, Result};
use crate::federation::{self, reference_for, Aggregation, Estimator, FederationConfig, RunTrace, StepSize};
use crate::mdp::{evaluate_policy_exact, greedy_policy, value_iteration, Policy, QTable, TabularMdp, ValueVector};
use crate::operators::{robust_policy_evaluation, DomainFamily, DEFAULT_TOL};
use crate::uncertainty::{Metric, UncertaintySpec};

/// Source parameters: drawn per seed from `U[low, high]`, or listed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SourceDraw {
    Uniform { count: usize, low: f64, high: f64 },
    Explicit(Vec<(f64, f64)>),
}

impl SourceDraw {
    fn pairs(&self, seed: u64) -> Result<Vec<(f64, f64)>> {
        let pairs = match self {
            SourceDraw::Uniform { count, low, high } => {
                if !(low <= high) {
                    return Err(Error::Config(format!("source range [{low}, {high}] is empty")));
                }
                uniform_pairs(*count, *low, *high, seed)
            }
            SourceDraw::Explicit(list) => list.clone(),
        };
        if pairs.is_empty() {
            return Err(Error::Config("at least one source is required".into()));
        }
        Ok(pairs)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Environment {
    /// Sources copy the target's reward constants with their own `(alpha, beta)`.
    Robot {
        target: RobotParams,
        sources: SourceDraw,
        spec: UncertaintySpec,
    },
    /// Sources copy the target's reward constants with their own `(p, q)`.
    Hpc {
        target: HpcParams,
        sources: SourceDraw,
        spec: UncertaintySpec,
    },
    /// One source per listed TV perturbation size of the grid.
    Gridworld {
        #[serde(default)]
        grid: GridWorldParams,
        perturbations: Vec<f64>,
        spec: UncertaintySpec,
    },
    Random {
        states: usize,
        actions: usize,
        sources: usize,
        discount: f64,
        max_tv: f64,
        #[serde(default = "default_metric")]
        metric: Metric,
    },
    Inline {
        family: Box<DomainFamily>,
    },
}

fn default_metric() -> Metric {
    Metric::TotalVariation
}

fn source_seed(seed: u64, k: usize) -> u64 {
    seed.wrapping_mul(1_000_003).wrapping_add(k as u64)
}

impl Environment {
    /// The family for one seed; sources (and random targets) depend on it.
    pub fn build(&self, seed: u64) -> Result<DomainFamily> {
        match self {
            Environment::Robot { target, sources, spec } => {
                let members = sources
                    .pairs(seed)?
                    .into_iter()
                    .map(|(alpha, beta)| build_robot(&RobotParams { alpha, beta, ..target.clone() }))
                    .collect::<Result<Vec<_>>>()?;
                DomainFamily::new(build_robot(target)?, members, spec.clone())
            }
            Environment::Hpc { target, sources, spec } => {
                let members = sources
                    .pairs(seed)?
                    .into_iter()
                    .map(|(p, q)| build_hpc(&HpcParams { p, q, ..target.clone() }))
                    .collect::<Result<Vec<_>>>()?;
                DomainFamily::new(build_hpc(target)?, members, spec.clone())
            }
            Environment::Gridworld { grid, perturbations, spec } => {
                let target = build_gridworld(grid)?;
                let members = perturbations
                    .iter()
                    .enumerate()
                    .map(|(k, &d)| Ok(perturb_tv(&target, d, source_seed(seed, k))?.mdp))
                    .collect::<Result<Vec<_>>>()?;
                DomainFamily::new(target, members, spec.clone())
            }
            Environment::Random { states, actions, sources, discount, max_tv, metric } => {
                random_family(*states, *actions, *sources, *discount, seed, *max_tv, metric.clone())
            }
            Environment::Inline { family } => Ok(family.as_ref().clone()),
        }
    }

    /// Start state used for the per-state value column.
    pub fn default_start(&self) -> usize {
        match self {
            Environment::Robot { .. } => robot::HIGH,
            Environment::Hpc { .. } => hpc::NORMAL,
            Environment::Gridworld { grid, .. } => grid.start_state(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    MdtlAvg,
    MdtlMax,
    NonRobustDr,
    NonRobustMax,
    /// Exact value iteration on the target kernel (a benchmark with target access).
    NominalOptimal,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::MdtlAvg => "mdtl_avg",
            Method::MdtlMax => "mdtl_max",
            Method::NonRobustDr => "non_robust_dr",
            Method::NonRobustMax => "non_robust_max",
            Method::NominalOptimal => "nominal_optimal",
        }
    }

    pub fn is_robust(self) -> bool {
        matches!(self, Method::MdtlAvg | Method::MdtlMax)
    }

    fn is_max(self) -> bool {
        matches!(self, Method::MdtlMax | Method::NonRobustMax)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaxRule {
    Direct,
    Mlmc {
        #[serde(default = "default_psi")]
        psi: f64,
        #[serde(default = "default_level_cap")]
        level_cap: u32,
    },
}

fn default_psi() -> f64 {
    0.5
}

fn default_level_cap() -> u32 {
    20
}

fn one() -> usize {
    1
}

fn default_estimator() -> Estimator {
    Estimator::Exact
}

fn default_max_rule() -> MaxRule {
    MaxRule::Direct
}

fn default_step_size() -> StepSize {
    StepSize::Theorem
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Training {
    pub total_steps: usize,
    #[serde(default = "default_step_size")]
    pub step_size: StepSize,
    #[serde(default = "one")]
    pub sync_period: usize,
    #[serde(default = "default_estimator")]
    pub estimator: Estimator,
    #[serde(default = "default_max_rule")]
    pub max_aggregation: MaxRule,
    #[serde(default = "one")]
    pub record_every: usize,
}

fn default_horizon() -> usize {
    200
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Evaluation {
    /// TV radii of the target-centred test sets.
    #[serde(default)]
    pub r_test: Vec<f64>,
    #[serde(default)]
    pub start_state: Option<usize>,
    /// Also estimate the start-state return from this many sampled episodes.
    #[serde(default)]
    pub episodes: Option<usize>,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
}

impl Default for Evaluation {
    fn default() -> Self {
        Evaluation { r_test: Vec::new(), start_state: None, episodes: None, horizon: default_horizon() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    #[serde(default)]
    pub name: Option<String>,
    pub environment: Environment,
    pub methods: Vec<Method>,
    pub training: Training,
    #[serde(default)]
    pub evaluation: Evaluation,
    pub seeds: Vec<u64>,
}

impl ExperimentPlan {
    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn config_for(&self, method: Method, seed: u64) -> FederationConfig {
        let aggregation = match (method.is_max(), self.training.max_aggregation) {
            (false, _) => Aggregation::Mean,
            (true, MaxRule::Direct) => Aggregation::MaxDirect,
            (true, MaxRule::Mlmc { psi, level_cap }) => Aggregation::MaxMlmc { psi, level_cap },
        };
        FederationConfig {
            num_agents: None,
            sync_period: self.training.sync_period,
            step_size: self.training.step_size,
            total_steps: self.training.total_steps,
            aggregation,
            estimator: self.training.estimator,
            master_seed: seed,
            robust: method.is_robust(),
            record_every: self.training.record_every,
        }
    }

    /// Checks the whole plan, building every seed's family; returns them in
    /// seed order plus advisory warnings.
    pub fn validate(&self) -> Result<(Vec<DomainFamily>, Vec<String>)> {
        if self.methods.is_empty() {
            return Err(Error::Config("plan lists no methods".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("plan lists no seeds".into()));
        }
        if let Some(r) = self.evaluation.r_test.iter().find(|r| !(**r >= 0.0)) {
            return Err(Error::Config(format!("r_test radius {r} must be non-negative")));
        }
        let mut families = Vec::with_capacity(self.seeds.len());
        let mut warnings = Vec::new();
        for &seed in &self.seeds {
            let family = self.environment.build(seed)?;
            let start = self.start_state();
            if start >= family.num_states() {
                return Err(Error::Config(format!("start state {start} is out of range")));
            }
            if !family.is_valid() {
                warnings.push(format!("seed {seed}: the radius does not cover every source distance"));
            }
            for &method in self.methods.iter().filter(|m| **m != Method::NominalOptimal) {
                for w in self.config_for(method, seed).validate(&family)? {
                    warnings.push(format!("{method}: {w}"));
                }
            }
            families.push(family);
        }
        let mut seen = std::collections::BTreeSet::new();
        warnings.retain(|w| seen.insert(w.clone()));
        Ok((families, warnings))
    }

    pub fn start_state(&self) -> usize {
        self.evaluation.start_state.unwrap_or_else(|| self.environment.default_start())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MetricKind {
    /// Exact value on the target kernel.
    Target,
    /// Worst case over the TV ball of radius `r_test` around the target.
    Robust,
    /// Mean discounted return of sampled episodes from the start state.
    Episodes,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Target => "target",
            MetricKind::Robust => "robust",
            MetricKind::Episodes => "episodes",
        }
    }
}

/// One evaluation of a trained policy. Values are in raw reward units when the
/// target records a reward rescaling.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub method: Method,
    pub seed: u64,
    pub metric: MetricKind,
    pub r_test: f64,
    /// Mean over states (NaN for episode estimates).
    pub value_mean: f64,
    pub value_start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub policy: Policy,
    pub q: QTable,
    pub trace: Option<RunTrace>,
    /// `(step, mean target value of the greedy policy)` per trace record.
    pub curve: Vec<(usize, f64)>,
    pub rows: Vec<MetricRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub method: Method,
    pub seed: u64,
    pub result: std::result::Result<CellResult, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub method: Method,
    pub metric: MetricKind,
    pub r_test: f64,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub mean_start: f64,
    pub std_start: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurvePoint {
    pub method: Method,
    pub step: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub rows: Vec<MetricRow>,
    pub summary: Vec<SummaryRow>,
    pub curves: Vec<CurvePoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutcome {
    /// Cells in (method, seed) plan order.
    pub cells: Vec<Cell>,
    pub metrics: MetricsTable,
    pub warnings: Vec<String>,
}

impl PlanOutcome {
    pub fn cell(&self, method: Method, seed: u64) -> Option<&Cell> {
        self.cells.iter().find(|c| c.method == method && c.seed == seed)
    }
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn raw(mdp: &TabularMdp, value: f64) -> f64 {
    mdp.reward_scale().map_or(value, |s| s.value_to_raw(value, mdp.discount()))
}

fn reported(mdp: &TabularMdp, v: &ValueVector, start: usize) -> (f64, f64) {
    (raw(mdp, v.mean()), raw(mdp, v.0[start]))
}

/// Mean discounted raw return of `episodes` rollouts of `policy` on `mdp`.
pub fn sampled_return(
    mdp: &TabularMdp,
    policy: &Policy,
    start: usize,
    episodes: usize,
    horizon: usize,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    policy.validate(ns, na)?;
    let scale = mdp.reward_scale();
    let to_raw = |r: f64| scale.map_or(r, |s| s.offset + s.scale * r);
    let mut total = 0.0;
    for _ in 0..episodes {
        let (mut s, mut discount, mut ret) = (start, 1.0, 0.0);
        for _ in 0..horizon {
            let a = match policy {
                Policy::Deterministic(actions) => actions[s],
                Policy::Stochastic(_) => {
                    let probs: Vec<f64> = (0..na).map(|a| policy.prob(s, a)).collect();
                    WeightedIndex::new(&probs).map_err(|e| Error::InvalidDistribution(e.to_string()))?.sample(rng)
                }
            };
            let next =
                WeightedIndex::new(mdp.row(s, a)).map_err(|e| Error::InvalidDistribution(e.to_string()))?.sample(rng);
            let r = mdp.outcome_rewards(s, a).map_or_else(|| mdp.expected_reward(s, a), |rs| rs[next]);
            ret += discount * to_raw(r);
            discount *= mdp.discount();
            s = next;
        }
        total += ret;
    }
    Ok(total / episodes.max(1) as f64)
}

fn evaluate(
    plan: &ExperimentPlan,
    method: Method,
    seed: u64,
    target: &TabularMdp,
    policy: &Policy,
) -> Result<Vec<MetricRow>> {
    let start = plan.start_state();
    let row =
        |metric, r_test, (value_mean, value_start)| MetricRow { method, seed, metric, r_test, value_mean, value_start };
    let mut rows = vec![row(MetricKind::Target, 0.0, reported(target, &evaluate_policy_exact(target, policy)?, start))];
    for &r in &plan.evaluation.r_test {
        let v = robust_policy_evaluation(policy, target, &UncertaintySpec::tv(r))?;
        rows.push(row(MetricKind::Robust, r, reported(target, &v, start)));
    }
    if let Some(episodes) = plan.evaluation.episodes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(method as u64 + 1);
        let ret = sampled_return(target, policy, start, episodes, plan.evaluation.horizon, &mut rng)?;
        rows.push(row(MetricKind::Episodes, 0.0, (f64::NAN, ret)));
    }
    Ok(rows)
}

fn run_cell(plan: &ExperimentPlan, family: &DomainFamily, method: Method, seed: u64) -> Result<CellResult> {
    let target = family.target();
    if method == Method::NominalOptimal {
        let q = value_iteration(target, DEFAULT_TOL, 1_000_000)?;
        let policy = greedy_policy(&q);
        let rows = evaluate(plan, method, seed, target, &policy)?;
        return Ok(CellResult { policy, q, trace: None, curve: Vec::new(), rows });
    }
    let config = plan.config_for(method, seed);
    let reference = reference_for(family, &config)?;
    let mut curve = Vec::new();
    let trace = federation::run_observed(family, &config, Some(&reference), |record, q| {
        let v = evaluate_policy_exact(target, &greedy_policy(q))?;
        curve.push((record.step, raw(target, v.mean())));
        Ok(())
    })?;
    let policy = trace.final_policy.clone();
    let rows = evaluate(plan, method, seed, target, &policy)?;
    Ok(CellResult { policy, q: trace.final_q.clone(), trace: Some(trace), curve, rows })
}

/// Trains and evaluates every (method, seed) cell on a pool of `threads`
/// workers (all available cores when `None`). Results do not depend on the
/// thread count. A failing cell is recorded and the others continue.
pub fn execute_plan(plan: &ExperimentPlan, threads: Option<usize>) -> Result<PlanOutcome> {
    let (families, warnings) = plan.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let jobs: Vec<(Method, usize)> =
        plan.methods.iter().flat_map(|&m| (0..plan.seeds.len()).map(move |i| (m, i))).collect();
    let cells: Vec<Cell> = pool.install(|| {
        jobs.par_iter()
            .map(|&(method, i)| {
                let seed = plan.seeds[i];
                info!("running {method} seed {seed}");
                let result = run_cell(plan, &families[i], method, seed).map_err(|e| e.to_string());
                Cell { method, seed, result }
            })
            .collect()
    });
    let metrics = summarise(&cells);
    Ok(PlanOutcome { cells, metrics, warnings })
}

/// Aggregates per-seed rows and curves across seeds.
pub fn summarise(cells: &[Cell]) -> MetricsTable {
    let rows: Vec<MetricRow> =
        cells.iter().filter_map(|c| c.result.as_ref().ok()).flat_map(|r| r.rows.iter().cloned()).collect();
    // keyed by r_test bits; values are (mean-over-states, start-state) samples
    type Groups = BTreeMap<(Method, MetricKind, u64), (Vec<f64>, Vec<f64>)>;
    let mut groups = Groups::new();
    for r in &rows {
        let entry = groups.entry((r.method, r.metric, r.r_test.to_bits())).or_default();
        entry.0.push(r.value_mean);
        entry.1.push(r.value_start);
    }
    let summary = groups
        .into_iter()
        .map(|((method, metric, bits), (means, starts))| {
            let (mean, std) = mean_std(&means);
            let (mean_start, std_start) = mean_std(&starts);
            SummaryRow {
                method,
                metric,
                r_test: f64::from_bits(bits),
                n: means.len(),
                mean,
                std,
                mean_start,
                std_start,
            }
        })
        .collect();
    let mut by_step: BTreeMap<(Method, usize), Vec<f64>> = BTreeMap::new();
    for c in cells {
        if let Ok(r) = &c.result {
            for &(step, v) in &r.curve {
                by_step.entry((c.method, step)).or_default().push(v);
            }
        }
    }
    let curves = by_step
        .into_iter()
        .map(|((method, step), vs)| {
            let (mean, std) = mean_std(&vs);
            CurvePoint { method, step, n: vs.len(), mean, std }
        })
        .collect();
    MetricsTable { rows, summary, curves }
}

fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}

impl MetricsTable {
    pub fn write_rows_csv(&self, cells: &[Cell], path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "seed", "metric", "r_test", "value_mean", "value_start", "status"])?;
        for c in cells {
            match &c.result {
                Ok(r) => {
                    for row in &r.rows {
                        w.write_record([
                            c.method.name().to_string(),
                            c.seed.to_string(),
                            row.metric.name().into(),
                            row.r_test.to_string(),
                            num(row.value_mean),
                            num(row.value_start),
                            "ok".into(),
                        ])?;
                    }
                }
                Err(e) => {
                    w.write_record([c.method.name(), &c.seed.to_string(), "", "", "", "", &format!("error: {e}")])?
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "metric", "r_test", "n", "mean", "std", "mean_start", "std_start"])?;
        for s in &self.summary {
            w.write_record([
                s.method.name().to_string(),
                s.metric.name().into(),
                s.r_test.to_string(),
                s.n.to_string(),
                num(s.mean),
                num(s.std),
                num(s.mean_start),
                num(s.std_start),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_curves_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["method", "step", "n", "mean", "std"])?;
        for p in &self.curves {
            w.write_record([
                p.method.name().to_string(),
                p.step.to_string(),
                p.n.to_string(),
                num(p.mean),
                num(p.std),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Directory holding one cell's files.
pub fn cell_dir(out: &Path, method: Method, seed: u64) -> PathBuf {
    out.join(method.name()).join(format!("seed_{seed}"))
}

fn write_cell(dir: &Path, result: &CellResult) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("policy.json"), serde_json::to_string_pretty(&result.policy)?)?;
    let mut w = csv::Writer::from_path(dir.join("eval.csv"))?;
    w.write_record(["metric", "r_test", "value_mean", "value_start"])?;
    for row in &result.rows {
        w.write_record([
            row.metric.name().to_string(),
            row.r_test.to_string(),
            num(row.value_mean),
            num(row.value_start),
        ])?;
    }
    w.flush()?;
    let Some(trace) = &result.trace else { return Ok(()) };
    let mut w = csv::Writer::from_path(dir.join("trace.csv"))?;
    w.write_record(["step", "comm_rounds", "global_error", "min_q", "max_q", "target_value"])?;
    for (record, &(_, value)) in trace.records.iter().zip(&result.curve) {
        w.write_record([
            record.step.to_string(),
            record.comm_rounds.to_string(),
            num(record.global_error),
            record.min_q.to_string(),
            record.max_q.to_string(),
            value.to_string(),
        ])?;
    }
    w.flush()?;
    for k in 0..trace.agent_tables.len() {
        let mut w = csv::Writer::from_path(dir.join(format!("agent_{k}.csv")))?;
        w.write_record(["step", "residual"])?;
        for record in &trace.records {
            w.write_record([record.step.to_string(), record.residuals[k].to_string()])?;
        }
        w.flush()?;
    }
    Ok(())
}

impl PlanOutcome {
    /// Writes per-cell directories plus `metrics.csv`, `summary.csv` and `curves.csv`.
    pub fn write(&self, out: &Path) -> Result<()> {
        fs::create_dir_all(out)?;
        for cell in &self.cells {
            if let Ok(result) = &cell.result {
                write_cell(&cell_dir(out, cell.method, cell.seed), result)?;
            }
        }
        self.metrics.write_rows_csv(&self.cells, out.join("metrics.csv"))?;
        self.metrics.write_summary_csv(out.join("summary.csv"))?;
        self.metrics.write_curves_csv(out.join("curves.csv"))?;
        Ok(())
    }
}

/// [`execute_plan`] followed by writing all outputs under `out`.
pub fn run_plan(plan: &ExperimentPlan, out: &Path, threads: Option<usize>) -> Result<PlanOutcome> {
    let outcome = execute_plan(plan, threads)?;
    outcome.write(out)?;
    Ok(outcome)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RtestReport {
    pub metrics: MetricsTable,
    /// Per method: robust value non-increasing in `r_test` for every seed.
    pub non_increasing: Vec<(Method, bool)>,
}

/// Robust value of each trained policy over the plan's `r_test` sweep.
pub fn ablation_rtest(plan: &ExperimentPlan, threads: Option<usize>) -> Result<RtestReport> {
    let outcome = execute_plan(plan, threads)?;
    let non_increasing = plan
        .methods
        .iter()
        .map(|&m| {
            let ok = plan.seeds.iter().all(|&seed| {
                let mut robust: Vec<&MetricRow> = outcome
                    .metrics
                    .rows
                    .iter()
                    .filter(|r| r.method == m && r.seed == seed && r.metric == MetricKind::Robust)
                    .collect();
                robust.sort_by(|a, b| a.r_test.total_cmp(&b.r_test));
                robust.windows(2).all(|w| w[1].value_mean <= w[0].value_mean + 1e-9)
            });
            (m, ok)
        })
        .collect();
    Ok(RtestReport { metrics: outcome.metrics, non_increasing })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyncRow {
    pub sync_period: usize,
    pub final_error: f64,
    pub comm_rounds: usize,
}

/// Exact-estimator runs at each sync period with everything else fixed; the
/// error is measured against the matching fixed point.
pub fn ablation_sync_period(
    family: &DomainFamily,
    periods: &[usize],
    total_steps: usize,
    step_size: f64,
    aggregation: Aggregation,
) -> Result<Vec<SyncRow>> {
    let mut config = FederationConfig::new(StepSize::Constant(step_size), total_steps, aggregation, Estimator::Exact);
    config.record_every = total_steps.max(1);
    let reference = reference_for(family, &config)?;
    periods
        .iter()
        .map(|&e| {
            config.sync_period = e;
            let trace = federation::run(family, &config, Some(&reference))?;
            Ok(SyncRow {
                sync_period: e,
                final_error: reference.sup_distance(&trace.final_q),
                comm_rounds: trace.comm_rounds,
            })
        })
        .collect()
}

/// Whether the error never drops by more than `slack` (relative) as E grows.
pub fn error_non_decreasing(rows: &[SyncRow], slack: f64) -> bool {
    rows.windows(2).all(|w| w[1].final_error >= w[0].final_error * (1.0 - slack))
}

pub fn write_sync_csv(rows: &[SyncRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sync_period", "final_error", "comm_rounds"])?;
    for r in rows {
        w.write_record([r.sync_period.to_string(), r.final_error.to_string(), r.comm_rounds.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
