//! Simulated multi-agent training: each agent holds a Q table for one source
//! domain, performs local (robust) updates and periodically synchronises
//! through an aggregation rule.

use std::fs;
use std::path::Path;

use log::info;
use ndarray::{Array2, Zip};
use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::Geometric;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{greedy_policy, Policy, QTable, Reward, TabularMdp};
use crate::operators::{backup_cell, fixed_point, Backup, Combine, DomainFamily, OperatorKind, DEFAULT_TOL};
use crate::uncertainty::{kappa, Metric, UncertaintySpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSize {
    Constant(f64),
    /// `min(1, 4 ln^2(TK) / (T (1 - gamma)))`.
    Theorem,
}

impl StepSize {
    pub fn resolve(self, total_steps: usize, num_agents: usize, discount: f64) -> f64 {
        match self {
            StepSize::Constant(l) => l,
            StepSize::Theorem => {
                let t = total_steps.max(1) as f64;
                let log = (t * num_agents as f64).ln();
                (4.0 * log * log / (t * (1.0 - discount))).min(1.0)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    Mean,
    MaxDirect,
    MaxMlmc {
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

impl Aggregation {
    pub fn is_max(&self) -> bool {
        !matches!(self, Aggregation::Mean)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    Exact,
    /// Backs up against the empirical row of `samples` draws (only
    /// approximately unbiased).
    SampledKernel {
        samples: usize,
    },
    /// One sampled next state per cell with the l_p penalty.
    ModelFree,
}

impl Estimator {
    pub fn label(&self) -> &'static str {
        match self {
            Estimator::Exact => "exact",
            Estimator::SampledKernel { .. } => "approx-unbiased",
            Estimator::ModelFree => "model-free",
        }
    }
}

fn default_sync_period() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_record_every() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederationConfig {
    /// Defaults to the number of sources; must match it when given.
    #[serde(default)]
    pub num_agents: Option<usize>,
    #[serde(default = "default_sync_period")]
    pub sync_period: usize,
    pub step_size: StepSize,
    pub total_steps: usize,
    pub aggregation: Aggregation,
    pub estimator: Estimator,
    #[serde(default)]
    pub master_seed: u64,
    /// `false` runs the non-robust baselines.
    #[serde(default = "default_true")]
    pub robust: bool,
    /// Trace one row every this many steps (the last step is always kept).
    #[serde(default = "default_record_every")]
    pub record_every: usize,
}

impl FederationConfig {
    pub fn new(step_size: StepSize, total_steps: usize, aggregation: Aggregation, estimator: Estimator) -> Self {
        FederationConfig {
            num_agents: None,
            sync_period: 1,
            step_size,
            total_steps,
            aggregation,
            estimator,
            master_seed: 0,
            robust: true,
            record_every: 1,
        }
    }

    /// Checks the configuration against `family`; returns advisory warnings.
    pub fn validate(&self, family: &DomainFamily) -> Result<Vec<String>> {
        let k = family.num_sources();
        if let Some(n) = self.num_agents {
            if n != k {
                return Err(Error::Config(format!("num_agents = {n} but the family has {k} sources")));
            }
        }
        if self.sync_period == 0 {
            return Err(Error::Config("sync_period must be at least 1".into()));
        }
        if self.record_every == 0 {
            return Err(Error::Config("record_every must be at least 1".into()));
        }
        let lambda = self.step_size.resolve(self.total_steps, k, family.discount());
        if !(lambda > 0.0 && lambda <= 1.0) {
            return Err(Error::Config(format!("step size {lambda} must lie in (0, 1]")));
        }
        if let Aggregation::MaxMlmc { psi, .. } = self.aggregation {
            if !(psi > 0.0 && psi < 1.0) {
                return Err(Error::Config(format!("MLMC parameter psi = {psi} must lie in (0, 1)")));
            }
        }
        match self.estimator {
            Estimator::SampledKernel { samples: 0 } => {
                return Err(Error::Config("sampled_kernel needs at least one sample".into()))
            }
            Estimator::ModelFree if self.robust && !matches!(family.spec().metric, Metric::LpNorm { .. }) => {
                return Err(Error::Unsupported("the model-free estimator needs an l_p uncertainty set".into()))
            }
            _ => {}
        }
        let mut warnings = Vec::new();
        let gamma = family.discount();
        let limit = (gamma / ((1.0 - gamma) * lambda)).min(1.0 / (k as f64 * lambda));
        if (self.sync_period - 1) as f64 > limit {
            warnings.push(format!(
                "sync period {} exceeds the recommended E - 1 <= {limit:.3} for step size {lambda:.4}",
                self.sync_period
            ));
        }
        Ok(warnings)
    }

    pub fn step_size_for(&self, family: &DomainFamily) -> f64 {
        self.step_size.resolve(self.total_steps, family.num_sources(), family.discount())
    }
}

/// Deterministic stream for agent `k` at step `t`; independent of scheduling.
pub fn agent_rng(master_seed: u64, agent: usize, step: usize) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&master_seed.to_le_bytes());
    seed[8..16].copy_from_slice(&(agent as u64).to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(step as u64);
    rng
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentState {
    pub q: QTable,
    /// Next-state samples drawn so far.
    pub samples: u64,
}

impl AgentState {
    pub fn new(num_states: usize, num_actions: usize) -> Self {
        AgentState { q: QTable::zeros(num_states, num_actions), samples: 0 }
    }
}

fn draw_next(row: &[f64], rng: &mut ChaCha8Rng) -> Result<usize> {
    let dist = WeightedIndex::new(row).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
    Ok(dist.sample(rng))
}

/// One estimate `T^_k(Q_k)` of the local backup.
fn estimate_backup(
    q: &QTable,
    source: &TabularMdp,
    spec: &UncertaintySpec,
    estimator: Estimator,
    robust: bool,
    rng: &mut ChaCha8Rng,
    samples: &mut u64,
) -> Result<QTable> {
    let (ns, na) = (source.num_states(), source.num_actions());
    let v = q.state_max();
    let v = v.as_slice();
    let gamma = source.discount();
    let mut out = Array2::zeros((ns, na));
    let mut empirical = vec![0.0; ns];
    for s in 0..ns {
        for a in 0..na {
            let radius = spec.radius.at(s, a);
            let row = source.row(s, a);
            out[[s, a]] = match estimator {
                Estimator::Exact => backup_cell(source, s, a, row, v, &spec.metric, radius, robust)?,
                Estimator::SampledKernel { samples: n } => {
                    empirical.iter_mut().for_each(|x| *x = 0.0);
                    let dist = WeightedIndex::new(row).map_err(|e| Error::InvalidDistribution(e.to_string()))?;
                    for _ in 0..n {
                        empirical[dist.sample(rng)] += 1.0;
                    }
                    empirical.iter_mut().for_each(|x| *x /= n as f64);
                    *samples += n as u64;
                    backup_cell(source, s, a, &empirical, v, &spec.metric, radius, robust)?
                }
                Estimator::ModelFree => {
                    let next = draw_next(row, rng)?;
                    *samples += 1;
                    let x: Vec<f64> = match source.reward() {
                        Reward::StateAction(r) => v.iter().map(|y| r[[s, a]] + gamma * y).collect(),
                        Reward::Transition(_) => {
                            let outcome = source.outcome_rewards(s, a).unwrap();
                            outcome.iter().zip(v).map(|(r, y)| r + gamma * y).collect()
                        }
                    };
                    let penalty = match (&spec.metric, robust) {
                        (Metric::LpNorm { order }, true) => radius * kappa(&x, *order),
                        _ => 0.0,
                    };
                    x[next] - penalty
                }
            };
        }
    }
    Ok(QTable(out))
}

/// `Q_k <- (1 - lambda) Q_k + lambda T^_k(Q_k)`. The model-free estimator
/// clamps the result to `[0, 1/(1 - gamma)]`.
pub fn local_update(
    agent: &mut AgentState,
    source: &TabularMdp,
    spec: &UncertaintySpec,
    lambda: f64,
    estimator: Estimator,
    robust: bool,
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    agent.q = updated_table(agent, source, spec, lambda, estimator, robust, rng)?;
    Ok(())
}

fn updated_table(
    agent: &mut AgentState,
    source: &TabularMdp,
    spec: &UncertaintySpec,
    lambda: f64,
    estimator: Estimator,
    robust: bool,
    rng: &mut ChaCha8Rng,
) -> Result<QTable> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(Error::Config(format!("step size {lambda} must lie in (0, 1]")));
    }
    if estimator == Estimator::ModelFree && robust && !matches!(spec.metric, Metric::LpNorm { .. }) {
        return Err(Error::Unsupported("the model-free estimator needs an l_p uncertainty set".into()));
    }
    let target = estimate_backup(&agent.q, source, spec, estimator, robust, rng, &mut agent.samples)?;
    let mut next = agent.q.0.clone();
    Zip::from(&mut next).and(&target.0).for_each(|x, t| *x = (1.0 - lambda) * *x + lambda * t);
    if estimator == Estimator::ModelFree {
        let top = 1.0 / (1.0 - source.discount());
        next.mapv_inplace(|x| x.clamp(0.0, top));
    }
    Ok(QTable(next))
}

/// Entrywise mean or max over agent tables, reducing in agent order.
pub fn aggregate(tables: &[QTable], rule: &Aggregation) -> Result<QTable> {
    let first = tables.first().ok_or_else(|| Error::Config("cannot aggregate zero tables".into()))?;
    let mut out = first.0.clone();
    match rule {
        Aggregation::Mean => {
            for t in &tables[1..] {
                out += &t.0;
            }
            out /= tables.len() as f64;
        }
        Aggregation::MaxDirect => {
            for t in &tables[1..] {
                out.zip_mut_with(&t.0, |a, b| *a = a.max(*b));
            }
        }
        Aggregation::MaxMlmc { .. } => {
            return Err(Error::Unsupported("MLMC aggregation needs fresh estimates; use mlmc_max_aggregate".into()))
        }
    }
    Ok(QTable(out))
}

/// Streaming pairwise sum. For a power-of-two count of identical tables the
/// result is exact, which keeps the MLMC correction exactly zero without noise.
#[derive(Default)]
struct PairwiseSum {
    stack: Vec<(u32, Array2<f64>)>,
}

impl PairwiseSum {
    fn push(&mut self, x: Array2<f64>) {
        let mut item = (0, x);
        while let Some((level, _)) = self.stack.last() {
            if *level != item.0 {
                break;
            }
            let (level, top) = self.stack.pop().unwrap();
            item = (level + 1, top + &item.1);
        }
        self.stack.push(item);
    }

    fn total(mut self) -> Array2<f64> {
        let mut acc = self.stack.pop().expect("non-empty").1;
        while let Some((_, x)) = self.stack.pop() {
            acc = x + &acc;
        }
        acc
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MlmcDraw {
    pub table: QTable,
    pub level: u32,
    /// Geometric draws rejected for exceeding the level cap.
    pub retries: u32,
}

fn entrywise_max(tables: &[Array2<f64>]) -> Array2<f64> {
    let mut out = tables[0].clone();
    for t in &tables[1..] {
        out.zip_mut_with(t, |a, b| *a = a.max(*b));
    }
    out
}

/// Unbiased estimate of `max_k E[T^_k]` from independent per-source estimates.
///
/// Draws `N ~ Geometric(psi)` (`p_N = psi (1 - psi)^N`), requests `2^(N+1)`
/// batches from `fresh` (each a vector of one table per source) and returns
/// `T^1 + (T^A - (T^O + T^E) / 2) / p_N`, where each term is the entrywise max
/// over sources of the per-source average over batch 1, all, odd and even
/// batches respectively.
pub fn mlmc_max_aggregate(
    mut fresh: impl FnMut(usize) -> Result<Vec<QTable>>,
    psi: f64,
    level_cap: u32,
    rng: &mut ChaCha8Rng,
) -> Result<MlmcDraw> {
    if !(psi > 0.0 && psi < 1.0) {
        return Err(Error::Config(format!("MLMC parameter psi = {psi} must lie in (0, 1)")));
    }
    let geometric = Geometric::new(psi).map_err(|e| Error::Config(e.to_string()))?;
    let mut retries = 0;
    let level = loop {
        let n = geometric.sample(rng);
        if n <= u64::from(level_cap) {
            break n as u32;
        }
        retries += 1;
    };
    let prob = psi * (1.0 - psi).powi(level as i32);
    let batches = 1usize << (level + 1);
    let mut first: Vec<Array2<f64>> = Vec::new();
    let mut odd: Vec<PairwiseSum> = Vec::new();
    let mut even: Vec<PairwiseSum> = Vec::new();
    for i in 1..=batches {
        let tables = fresh(i)?;
        if i == 1 {
            if tables.is_empty() {
                return Err(Error::Config("MLMC needs at least one source".into()));
            }
            first = tables.iter().map(|t| t.0.clone()).collect();
            odd = tables.iter().map(|_| PairwiseSum::default()).collect();
            even = tables.iter().map(|_| PairwiseSum::default()).collect();
        } else if tables.len() != first.len() {
            return Err(Error::Dimension("MLMC batches disagree on the number of sources".into()));
        }
        let group = if i % 2 == 1 { &mut odd } else { &mut even };
        for (acc, t) in group.iter_mut().zip(tables) {
            acc.push(t.0);
        }
    }
    let half = (batches / 2) as f64;
    let mut odd_means = Vec::with_capacity(first.len());
    let mut even_means = Vec::with_capacity(first.len());
    let mut all_means = Vec::with_capacity(first.len());
    for (o, e) in odd.into_iter().zip(even) {
        let (o, e) = (o.total(), e.total());
        all_means.push((&o + &e) / (2.0 * half));
        odd_means.push(o / half);
        even_means.push(e / half);
    }
    let base = entrywise_max(&first);
    let t_all = entrywise_max(&all_means);
    let t_odd = entrywise_max(&odd_means);
    let t_even = entrywise_max(&even_means);
    let mut table = base;
    Zip::from(&mut table).and(&t_all).and(&t_odd).and(&t_even).for_each(|b, a, o, e| {
        *b += (a - (o + e) / 2.0) / prob;
    });
    Ok(MlmcDraw { table: QTable(table), level, retries })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRecord {
    /// Number of local steps completed.
    pub step: usize,
    pub comm_rounds: usize,
    /// `||Q_ref - aggregate(Q_k)||_inf`, NaN without a reference.
    pub global_error: f64,
    pub min_q: f64,
    pub max_q: f64,
    /// Per-agent sup-norm size of this step's local update.
    pub residuals: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub final_q: QTable,
    pub final_policy: Policy,
    pub agent_tables: Vec<QTable>,
    pub comm_rounds: usize,
    pub step_size: f64,
    pub estimator: &'static str,
    pub mlmc_draws: usize,
    pub mlmc_cap_retries: u64,
    pub warnings: Vec<String>,
}

impl RunTrace {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let k = self.agent_tables.len();
        let mut w = csv::Writer::from_path(path)?;
        let mut header =
            vec!["step".to_string(), "comm_rounds".into(), "global_error".into(), "min_q".into(), "max_q".into()];
        header.extend((0..k).map(|i| format!("residual_{i}")));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.step.to_string(),
                r.comm_rounds.to_string(),
                if r.global_error.is_nan() { String::new() } else { r.global_error.to_string() },
                r.min_q.to_string(),
                r.max_q.to_string(),
            ];
            row.extend(r.residuals.iter().map(|x| x.to_string()));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_policy_json(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(&self.final_policy)?)?;
        Ok(())
    }

    pub fn final_error(&self) -> Option<f64> {
        self.records.last().map(|r| r.global_error).filter(|e| !e.is_nan())
    }
}

/// The fixed point a run should approach: `Q_AO` for mean aggregation,
/// `Q_MP` for max rules (non-robust counterparts when `robust` is off).
pub fn reference_for(family: &DomainFamily, config: &FederationConfig) -> Result<QTable> {
    let combine = if config.aggregation.is_max() { Combine::Max } else { Combine::Average };
    let kind = OperatorKind { combine, backup: Backup::Optimal, robust: config.robust };
    Ok(fixed_point(&kind, family, DEFAULT_TOL, None)?.require_converged()?.q)
}

/// Runs Algorithm-1-style training for `config.total_steps` steps. Agent `k`
/// trains on source `k`; after the local update at step `t` (0-based) the
/// agents synchronise whenever `t % sync_period == 0`.
pub fn run(family: &DomainFamily, config: &FederationConfig, reference: Option<&QTable>) -> Result<RunTrace> {
    run_observed(family, config, reference, |_, _| Ok(()))
}

/// As [`run`], additionally handing every recorded aggregate to `observer`.
pub fn run_observed(
    family: &DomainFamily,
    config: &FederationConfig,
    reference: Option<&QTable>,
    mut observer: impl FnMut(&TraceRecord, &QTable) -> Result<()>,
) -> Result<RunTrace> {
    let warnings = config.validate(family)?;
    for w in &warnings {
        info!("{w}");
    }
    let (ns, na) = (family.num_states(), family.num_actions());
    if let Some(r) = reference {
        if r.num_states() != ns || r.num_actions() != na {
            return Err(Error::Dimension("reference table does not match the family".into()));
        }
    }
    let k = family.num_sources();
    let lambda = config.step_size_for(family);
    let spec = family.spec();
    let report_rule = if config.aggregation.is_max() { Aggregation::MaxDirect } else { Aggregation::Mean };
    let mut agents: Vec<AgentState> = (0..k).map(|_| AgentState::new(ns, na)).collect();
    let mut records = Vec::new();
    let mut comm_rounds = 0;
    let mut mlmc_draws = 0;
    let mut mlmc_cap_retries = 0u64;

    for t in 0..config.total_steps {
        let sync = t % config.sync_period == 0;
        let before: Vec<QTable> = agents.iter().map(|a| a.q.clone()).collect();
        match (sync, config.aggregation) {
            (true, Aggregation::MaxMlmc { psi, level_cap }) => {
                let mut rngs: Vec<ChaCha8Rng> = (0..k).map(|i| agent_rng(config.master_seed, i, t)).collect();
                let mut server = agent_rng(config.master_seed, k, t);
                let snapshot = agents.clone();
                let mut counters = vec![0u64; k];
                let draw = mlmc_max_aggregate(
                    |_| {
                        rngs.par_iter_mut()
                            .zip(counters.par_iter_mut())
                            .enumerate()
                            .map(|(i, (rng, count))| {
                                let mut agent = snapshot[i].clone();
                                let out = updated_table(
                                    &mut agent,
                                    &family.sources()[i],
                                    spec,
                                    lambda,
                                    config.estimator,
                                    config.robust,
                                    rng,
                                );
                                *count += agent.samples - snapshot[i].samples;
                                out
                            })
                            .collect()
                    },
                    psi,
                    level_cap,
                    &mut server,
                )?;
                mlmc_draws += 1;
                mlmc_cap_retries += u64::from(draw.retries);
                for (agent, extra) in agents.iter_mut().zip(counters) {
                    agent.q = draw.table.clone();
                    agent.samples += extra;
                }
                comm_rounds += 1;
            }
            _ => {
                agents
                    .par_iter_mut()
                    .enumerate()
                    .map(|(i, agent)| {
                        let mut rng = agent_rng(config.master_seed, i, t);
                        local_update(
                            agent,
                            &family.sources()[i],
                            spec,
                            lambda,
                            config.estimator,
                            config.robust,
                            &mut rng,
                        )
                    })
                    .collect::<Result<Vec<()>>>()?;
                if sync {
                    let tables: Vec<QTable> = agents.iter().map(|a| a.q.clone()).collect();
                    let merged = aggregate(&tables, &config.aggregation)?;
                    for agent in agents.iter_mut() {
                        agent.q = merged.clone();
                    }
                    comm_rounds += 1;
                }
            }
        }
        if let Some(i) = agents.iter().position(|a| !a.q.is_finite()) {
            return Err(Error::NonFinite { step: t + 1, agent: i });
        }
        let last = t + 1 == config.total_steps;
        if (t + 1) % config.record_every == 0 || last {
            let tables: Vec<QTable> = agents.iter().map(|a| a.q.clone()).collect();
            let current = aggregate(&tables, &report_rule)?;
            let record = TraceRecord {
                step: t + 1,
                comm_rounds,
                global_error: reference.map_or(f64::NAN, |r| r.sup_distance(&current)),
                min_q: tables.iter().map(QTable::min_entry).fold(f64::INFINITY, f64::min),
                max_q: tables.iter().map(QTable::max_entry).fold(f64::NEG_INFINITY, f64::max),
                residuals: tables.iter().zip(&before).map(|(a, b)| a.sup_distance(b)).collect(),
            };
            observer(&record, &current)?;
            records.push(record);
        }
    }
    let agent_tables: Vec<QTable> = agents.into_iter().map(|a| a.q).collect();
    let final_q = aggregate(&agent_tables, &report_rule)?;
    Ok(RunTrace {
        final_policy: greedy_policy(&final_q),
        final_q,
        records,
        agent_tables,
        comm_rounds,
        step_size: lambda,
        estimator: config.estimator.label(),
        mlmc_draws,
        mlmc_cap_retries,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdp::test_support::random_mdp;
    use crate::operators::apply;
    use crate::uncertainty::LpOrder;
    use ndarray::Array3;
    use rand::Rng;

    fn family(seed: u64, k: usize, spec: UncertaintySpec) -> DomainFamily {
        let target = random_mdp(3, 2, 0.9, seed);
        let sources = (0..k)
            .map(|i| {
                target.with_transition(random_mdp(3, 2, 0.9, seed * 31 + i as u64 + 1).transition().clone()).unwrap()
            })
            .collect();
        DomainFamily::new(target, sources, spec).unwrap()
    }

    fn exact(aggregation: Aggregation) -> FederationConfig {
        FederationConfig::new(StepSize::Constant(0.5), 400, aggregation, Estimator::Exact)
    }

    #[test]
    fn unit_step_exact_update_is_a_sweep() {
        let fam = family(1, 2, UncertaintySpec::tv(0.2));
        let mut agent = AgentState::new(3, 2);
        agent.q = QTable(Array2::from_shape_fn((3, 2), |(s, a)| (s + a) as f64));
        let expected = apply(&OperatorKind::robust_optimal(1), &fam, &agent.q).unwrap();
        let mut rng = agent_rng(0, 0, 0);
        local_update(&mut agent, &fam.sources()[1], fam.spec(), 1.0, Estimator::Exact, true, &mut rng).unwrap();
        assert_eq!(agent.q, expected);
        assert!(local_update(&mut agent, &fam.sources()[1], fam.spec(), 0.0, Estimator::Exact, true, &mut rng).is_err());
    }

    #[test]
    fn model_free_needs_lp() {
        let fam = family(2, 2, UncertaintySpec::tv(0.2));
        let mut agent = AgentState::new(3, 2);
        let mut rng = agent_rng(0, 0, 0);
        let res = local_update(&mut agent, &fam.sources()[0], fam.spec(), 0.5, Estimator::ModelFree, true, &mut rng);
        assert!(matches!(res, Err(Error::Unsupported(_))));
        let cfg = FederationConfig::new(StepSize::Constant(0.5), 10, Aggregation::Mean, Estimator::ModelFree);
        assert!(run(&fam, &cfg, None).is_err());
    }

    #[test]
    fn model_free_on_point_masses_is_q_learning() {
        // deterministic kernel: s -> (s + a) mod 3
        let mut p = Array3::zeros((3, 2, 3));
        for s in 0..3 {
            for a in 0..2 {
                p[[s, a, (s + a) % 3]] = 1.0;
            }
        }
        let r = Array2::from_shape_fn((3, 2), |(s, a)| 0.1 * (s + 2 * a) as f64);
        let mdp = TabularMdp::new(p, Reward::StateAction(r), 0.9).unwrap();
        let spec = UncertaintySpec::lp(LpOrder::Infinity, 0.0);
        let mut agent = AgentState::new(3, 2);
        agent.q = QTable(Array2::from_shape_fn((3, 2), |(s, a)| (2 * s + a) as f64 * 0.5));
        let v = agent.q.state_max();
        let mut expected = agent.q.0.clone();
        for s in 0..3 {
            for a in 0..2 {
                let next = (s + a) % 3;
                expected[[s, a]] = 0.7 * agent.q.get(s, a) + 0.3 * (mdp.expected_reward(s, a) + 0.9 * v.0[next]);
            }
        }
        let mut rng = agent_rng(5, 0, 0);
        local_update(&mut agent, &mdp, &spec, 0.3, Estimator::ModelFree, true, &mut rng).unwrap();
        assert!(agent.q.sup_distance(&QTable(expected)) < 1e-14);
        assert_eq!(agent.samples, 6);
    }

    #[test]
    fn aggregation_rules() {
        let a = QTable(Array2::from_elem((2, 2), 1.0));
        let b = QTable(Array2::from_elem((2, 2), 3.0));
        assert_eq!(aggregate(&[a.clone(), b.clone()], &Aggregation::Mean).unwrap().get(0, 0), 2.0);
        assert_eq!(aggregate(&[a.clone(), b.clone()], &Aggregation::MaxDirect).unwrap().get(1, 1), 3.0);
        for rule in [Aggregation::Mean, Aggregation::MaxDirect] {
            assert_eq!(aggregate(&[b.clone(), b.clone(), b.clone()], &rule).unwrap(), b);
        }
        assert!(aggregate(&[], &Aggregation::Mean).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = QTable(Array2::from_shape_fn((2, 3), |_| rng.gen::<f64>()));
            let y = QTable(Array2::from_shape_fn((2, 3), |_| rng.gen::<f64>()));
            let mean = aggregate(&[x.clone(), y.clone()], &Aggregation::Mean).unwrap();
            let max = aggregate(&[x, y], &Aggregation::MaxDirect).unwrap();
            assert!(max.0.iter().zip(mean.0.iter()).all(|(m, a)| m >= a));
        }
    }

    #[test]
    fn mlmc_without_noise_is_exact_max() {
        let tables = vec![
            QTable(Array2::from_shape_fn((2, 2), |(s, a)| 0.1 + 0.3 * (s + a) as f64)),
            QTable(Array2::from_shape_fn((2, 2), |(s, a)| 0.7 - 0.2 * (s * a) as f64)),
        ];
        let expected = aggregate(&tables, &Aggregation::MaxDirect).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let draw = mlmc_max_aggregate(|_| Ok(tables.clone()), 0.5, 20, &mut rng).unwrap();
            assert_eq!(draw.table, expected);
        }
        let single = vec![tables[1].clone()];
        let draw = mlmc_max_aggregate(|_| Ok(single.clone()), 0.3, 20, &mut rng).unwrap();
        assert_eq!(draw.table, tables[1]);
    }

    #[test]
    fn mlmc_level_cap_retries() {
        let table = vec![QTable(Array2::zeros((1, 1)))];
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut retries = 0;
        for _ in 0..200 {
            let draw = mlmc_max_aggregate(|_| Ok(table.clone()), 0.5, 0, &mut rng).unwrap();
            assert_eq!(draw.level, 0);
            retries += draw.retries;
        }
        assert!(retries > 0);
    }

    #[test]
    fn mlmc_is_unbiased_for_bernoulli_sources() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut noise = ChaCha8Rng::seed_from_u64(12);
        let n = 20_000;
        let mut values = Vec::with_capacity(n);
        for _ in 0..n {
            let draw = mlmc_max_aggregate(
                |_| {
                    Ok([0.3, 0.7]
                        .iter()
                        .map(|m| QTable(Array2::from_elem((1, 1), f64::from(u8::from(noise.gen::<f64>() < *m)))))
                        .collect())
                },
                0.5,
                20,
                &mut rng,
            )
            .unwrap();
            values.push(draw.table.get(0, 0));
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 0.7).abs() <= 4.0 * se, "mean {mean} se {se}");
    }

    #[test]
    fn exact_runs_reach_the_fixed_points() {
        let fam = family(3, 3, UncertaintySpec::tv(0.2));
        for rule in [Aggregation::Mean, Aggregation::MaxDirect] {
            let cfg = exact(rule);
            let reference = reference_for(&fam, &cfg).unwrap();
            let trace = run(&fam, &cfg, Some(&reference)).unwrap();
            assert!(trace.final_error().unwrap() <= 1e-6, "{rule:?}");
            assert_eq!(trace.comm_rounds, 400);
            if rule == Aggregation::Mean {
                let rate = 1.0 - 0.1 * 0.5;
                for w in trace.records.windows(2) {
                    assert!(w[1].global_error <= rate * w[0].global_error + 1e-12);
                }
            }
        }
    }

    #[test]
    fn identical_sources_match_single_agent() {
        let target = random_mdp(3, 2, 0.9, 4);
        let spec = UncertaintySpec::tv(0.1);
        let one = DomainFamily::new(target.clone(), vec![target.clone()], spec.clone()).unwrap();
        let many = DomainFamily::new(target.clone(), vec![target.clone(); 4], spec).unwrap();
        let mut cfg = exact(Aggregation::Mean);
        cfg.sync_period = 3;
        cfg.total_steps = 50;
        let a = run(&one, &cfg, None).unwrap();
        let b = run(&many, &cfg, None).unwrap();
        for (x, y) in a.records.iter().zip(&b.records) {
            assert!((x.max_q - y.max_q).abs() <= 1e-12 && (x.min_q - y.min_q).abs() <= 1e-12);
        }
        assert!(a.final_q.sup_distance(&b.final_q) <= 1e-12);
    }

    #[test]
    fn runs_are_deterministic_and_bounded() {
        let fam = family(5, 3, UncertaintySpec::lp(LpOrder::Infinity, 0.05));
        for estimator in [Estimator::ModelFree, Estimator::SampledKernel { samples: 5 }, Estimator::Exact] {
            for aggregation in [Aggregation::Mean, Aggregation::MaxMlmc { psi: 0.5, level_cap: 20 }] {
                let mut cfg = FederationConfig::new(StepSize::Constant(0.1), 300, aggregation, estimator);
                cfg.sync_period = 2;
                cfg.master_seed = 77;
                let a = run(&fam, &cfg, None).unwrap();
                let b = rayon::ThreadPoolBuilder::new()
                    .num_threads(1)
                    .build()
                    .unwrap()
                    .install(|| run(&fam, &cfg, None).unwrap());
                // NaN errors (no reference) defeat PartialEq; compare the bit patterns via Debug
                assert_eq!(format!("{a:?}"), format!("{b:?}"));
                if !matches!(estimator, Estimator::SampledKernel { .. }) && aggregation == Aggregation::Mean {
                    for r in &a.records {
                        assert!(r.min_q >= 0.0 && r.max_q <= 10.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn comm_rounds_and_warnings() {
        let fam = family(6, 2, UncertaintySpec::tv(0.2));
        let mut cfg = exact(Aggregation::Mean);
        cfg.total_steps = 103;
        cfg.sync_period = 10;
        let trace = run(&fam, &cfg, None).unwrap();
        assert_eq!(trace.comm_rounds, 11);
        assert_eq!(trace.records.len(), 103);
        assert!(!trace.warnings.is_empty());
        cfg.sync_period = 1;
        assert!(cfg.validate(&fam).unwrap().is_empty());
        cfg.num_agents = Some(5);
        assert!(cfg.validate(&fam).is_err());
    }

    #[test]
    fn theorem_step_size() {
        let l = StepSize::Theorem.resolve(50_000, 3, 0.95);
        let expected = 4.0 * (150_000f64).ln().powi(2) / (50_000.0 * 0.05);
        assert!((l - expected).abs() < 1e-15);
        assert_eq!(StepSize::Theorem.resolve(100, 3, 0.9), 1.0);
    }

    #[test]
    fn trace_csv_layout() {
        let fam = family(7, 2, UncertaintySpec::tv(0.2));
        let mut cfg = exact(Aggregation::Mean);
        cfg.total_steps = 10;
        cfg.record_every = 4;
        let reference = reference_for(&fam, &cfg).unwrap();
        let trace = run(&fam, &cfg, Some(&reference)).unwrap();
        assert_eq!(trace.records.iter().map(|r| r.step).collect::<Vec<_>>(), vec![4, 8, 10]);
        let dir = tempfile::tempdir().unwrap();
        trace.write_csv(dir.path().join("t.csv")).unwrap();
        let text = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "step,comm_rounds,global_error,min_q,max_q,residual_0,residual_1");
        assert_eq!(lines.count(), 3);
        trace.write_policy_json(dir.path().join("p.json")).unwrap();
        let back: Policy = serde_json::from_str(&fs::read_to_string(dir.path().join("p.json")).unwrap()).unwrap();
        assert_eq!(back, trace.final_policy);
    }

    #[test]
    fn config_json() {
        let cfg: FederationConfig = serde_json::from_str(
            r#"{"sync_period":5,"step_size":"theorem","total_steps":100,
                "aggregation":{"max_mlmc":{"psi":0.4}},"estimator":{"sampled_kernel":{"samples":3}}}"#,
        )
        .unwrap();
        assert_eq!(cfg.aggregation, Aggregation::MaxMlmc { psi: 0.4, level_cap: 20 });
        assert!(cfg.robust);
        assert!(serde_json::from_str::<FederationConfig>(
            r#"{"step_size":{"constant":0.1},"total_steps":1,"aggregation":"mean","estimator":"exact","bogus":1}"#
        )
        .is_err());
    }
}
