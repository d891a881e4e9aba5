//! Robust Bellman operators over a family of source domains, their fixed
//! points, and the pessimistic proxies built from them.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{
    dot, evaluate_policy_exact, greedy_policy, v_from_q, Policy, QTable, Reward, TabularMdp, ValueVector,
};
use crate::uncertainty::{self, Metric, Radius, UncertaintySpec};

/// Slack allowed when checking `D(P_0, P_k) <= radius`.
pub const VALIDITY_TOL: f64 = 1e-12;
pub const DEFAULT_TOL: f64 = 1e-10;
/// Guard on the number of deterministic policies enumerated.
pub const MAX_ENUMERATED_POLICIES: u128 = 1 << 16;

/// Target domain, K source domains and the uncertainty sets centred at each
/// source kernel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FamilyFile", into = "FamilyFile")]
pub struct DomainFamily {
    target: TabularMdp,
    sources: Vec<TabularMdp>,
    spec: UncertaintySpec,
    mean_source: TabularMdp,
    distances: Vec<Array2<f64>>,
    valid: bool,
}

impl DomainFamily {
    pub fn new(target: TabularMdp, sources: Vec<TabularMdp>, spec: UncertaintySpec) -> Result<Self> {
        if sources.is_empty() {
            return Err(Error::Config("a family needs at least one source domain".into()));
        }
        let (ns, na) = (target.num_states(), target.num_actions());
        for (k, src) in sources.iter().enumerate() {
            if !src.same_shape(&target) {
                return Err(Error::Dimension(format!("source {k} has a different state/action space")));
            }
            if src.reward() != target.reward() || src.discount() != target.discount() {
                return Err(Error::Config(format!("source {k} must share the target's reward and discount")));
            }
        }
        spec.validate(ns, na)?;
        let mut mean = Array3::<f64>::zeros((ns, na, ns));
        for src in &sources {
            mean += src.transition();
        }
        mean /= sources.len() as f64;
        let mean_source = target.with_transition(mean)?;
        let mut distances = Vec::with_capacity(sources.len());
        let mut valid = true;
        for src in &sources {
            let mut d = Array2::zeros((ns, na));
            for s in 0..ns {
                for a in 0..na {
                    d[[s, a]] = uncertainty::distance(&spec.metric, target.row(s, a), src.row(s, a))?;
                    valid &= d[[s, a]] <= spec.radius.at(s, a) + VALIDITY_TOL;
                }
            }
            distances.push(d);
        }
        Ok(DomainFamily { target, sources, spec, mean_source, distances, valid })
    }

    /// A one-source family whose only set is centred at `nominal`.
    pub fn single(nominal: TabularMdp, spec: UncertaintySpec) -> Result<Self> {
        DomainFamily::new(nominal.clone(), vec![nominal], spec)
    }

    pub fn target(&self) -> &TabularMdp {
        &self.target
    }

    pub fn sources(&self) -> &[TabularMdp] {
        &self.sources
    }

    pub fn num_sources(&self) -> usize {
        self.sources.len()
    }

    pub fn spec(&self) -> &UncertaintySpec {
        &self.spec
    }

    /// The source domain with the averaged kernel `P_bar`.
    pub fn mean_source(&self) -> &TabularMdp {
        &self.mean_source
    }

    /// `D(P_0(s,a), P_k(s,a))` for source `k`.
    pub fn distances(&self, k: usize) -> &Array2<f64> {
        &self.distances[k]
    }

    /// Whether every source is within the radius of the target at every cell.
    pub fn is_valid(&self) -> bool {
        self.valid
    }

    pub fn with_spec(&self, spec: UncertaintySpec) -> Result<Self> {
        DomainFamily::new(self.target.clone(), self.sources.clone(), spec)
    }

    pub fn discount(&self) -> f64 {
        self.target.discount()
    }

    pub fn num_states(&self) -> usize {
        self.target.num_states()
    }

    pub fn num_actions(&self) -> usize {
        self.target.num_actions()
    }
}

/// Per-cell radius `max_k D(P_0(s,a), P_k(s,a))`: the smallest radius that
/// makes the family valid.
pub fn minimal_radius(target: &TabularMdp, sources: &[TabularMdp], metric: &Metric) -> Result<Radius> {
    let (ns, na) = (target.num_states(), target.num_actions());
    let mut m = vec![vec![0.0; na]; ns];
    for src in sources {
        for (s, row) in m.iter_mut().enumerate() {
            for (a, x) in row.iter_mut().enumerate() {
                *x = f64::max(*x, uncertainty::distance(metric, target.row(s, a), src.row(s, a))?);
            }
        }
    }
    Ok(Radius::PerStateAction(m))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyFile {
    pub target: TabularMdp,
    pub sources: Vec<TabularMdp>,
    pub spec: UncertaintySpec,
}

impl TryFrom<FamilyFile> for DomainFamily {
    type Error = Error;

    fn try_from(f: FamilyFile) -> Result<Self> {
        DomainFamily::new(f.target, f.sources, f.spec)
    }
}

impl From<DomainFamily> for FamilyFile {
    fn from(f: DomainFamily) -> Self {
        FamilyFile { target: f.target, sources: f.sources, spec: f.spec }
    }
}

/// Which kernel(s) a backup is taken against and how per-source backups are
/// combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Combine {
    Source(usize),
    /// Mean over sources (`T_AO`).
    Average,
    /// Max over sources (`T_MP`).
    Max,
    /// A single set centred at the averaged kernel.
    Proximal,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Backup {
    Optimal,
    Policy(Policy),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OperatorKind {
    pub combine: Combine,
    pub backup: Backup,
    pub robust: bool,
}

impl OperatorKind {
    pub fn robust_optimal(k: usize) -> Self {
        OperatorKind { combine: Combine::Source(k), backup: Backup::Optimal, robust: true }
    }

    pub fn robust_policy(policy: Policy, k: usize) -> Self {
        OperatorKind { combine: Combine::Source(k), backup: Backup::Policy(policy), robust: true }
    }

    pub fn averaged_optimal() -> Self {
        OperatorKind { combine: Combine::Average, backup: Backup::Optimal, robust: true }
    }

    pub fn averaged_policy(policy: Policy) -> Self {
        OperatorKind { combine: Combine::Average, backup: Backup::Policy(policy), robust: true }
    }

    pub fn min_pessimism_optimal() -> Self {
        OperatorKind { combine: Combine::Max, backup: Backup::Optimal, robust: true }
    }

    pub fn min_pessimism_policy(policy: Policy) -> Self {
        OperatorKind { combine: Combine::Max, backup: Backup::Policy(policy), robust: true }
    }

    pub fn proximal_robust_dr(backup: Backup) -> Self {
        OperatorKind { combine: Combine::Proximal, backup, robust: true }
    }

    pub fn non_robust(combine: Combine, backup: Backup) -> Self {
        OperatorKind { combine, backup, robust: false }
    }

    pub fn with_policy(&self, policy: Policy) -> Self {
        OperatorKind { backup: Backup::Policy(policy), ..self.clone() }
    }
}

/// Names accepted on the command line; all denote optimal operators.
impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let kind = match s {
            "ao" | "averaged" => OperatorKind::averaged_optimal(),
            "mp" | "min_pessimism" => OperatorKind::min_pessimism_optimal(),
            "proximal" | "proximal_robust_dr" => OperatorKind::proximal_robust_dr(Backup::Optimal),
            "non_robust_dr" => OperatorKind::non_robust(Combine::Average, Backup::Optimal),
            "non_robust_max" => OperatorKind::non_robust(Combine::Max, Backup::Optimal),
            "target" => OperatorKind::non_robust(Combine::Target, Backup::Optimal),
            "robust_target" => OperatorKind { combine: Combine::Target, backup: Backup::Optimal, robust: true },
            other => match other.strip_prefix("robust:").map(str::parse::<usize>) {
                Some(Ok(k)) => OperatorKind::robust_optimal(k),
                _ => {
                    return Err(Error::Unsupported(format!(
                        "operator {other:?}; expected ao, mp, proximal, non_robust_dr, non_robust_max, target, robust_target or robust:<k>"
                    )))
                }
            },
        };
        Ok(kind)
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = if self.robust { "" } else { "non_robust_" };
        let combine = match self.combine {
            Combine::Source(k) => format!("source{k}"),
            Combine::Average => "avg".into(),
            Combine::Max => "max".into(),
            Combine::Proximal => "proximal".into(),
            Combine::Target => "target".into(),
        };
        let backup = match self.backup {
            Backup::Optimal => "optimal",
            Backup::Policy(_) => "policy",
        };
        write!(f, "{prefix}{combine}_{backup}")
    }
}

/// One backup at `(s, a)` against the distribution `row`:
/// `r(s,a) + gamma sigma(v)` for state-action rewards and
/// `sigma(R(s,a,.) + gamma v)` for outcome rewards. With `robust = false`
/// (or a zero radius) `sigma` is the plain expectation under `row`.
#[allow(clippy::too_many_arguments)]
pub fn backup_cell(
    mdp: &TabularMdp,
    s: usize,
    a: usize,
    row: &[f64],
    v: &[f64],
    metric: &Metric,
    radius: f64,
    robust: bool,
) -> Result<f64> {
    let gamma = mdp.discount();
    let sigma = |x: &[f64]| -> Result<f64> {
        if robust && radius > 0.0 {
            Ok(uncertainty::support_with_radius(row, x, metric, radius)?.value)
        } else {
            Ok(dot(row, x))
        }
    };
    match mdp.reward() {
        Reward::StateAction(r) => Ok(r[[s, a]] + gamma * sigma(v)?),
        Reward::Transition(_) => {
            let outcome = mdp.outcome_rewards(s, a).expect("transition reward");
            let x: Vec<f64> = outcome.iter().zip(v).map(|(r, vy)| r + gamma * vy).collect();
            sigma(&x)
        }
    }
}

/// `V(s)` from a Q table: max over actions or the policy expectation.
pub fn state_values(backup: &Backup, q: &QTable) -> Result<ValueVector> {
    match backup {
        Backup::Optimal => Ok(q.state_max()),
        Backup::Policy(pi) => v_from_q(pi, q),
    }
}

/// One synchronous sweep of `kind` over every cell.
pub fn apply(kind: &OperatorKind, family: &DomainFamily, q: &QTable) -> Result<QTable> {
    let (ns, na) = (family.num_states(), family.num_actions());
    if q.num_states() != ns || q.num_actions() != na {
        return Err(Error::Dimension(format!(
            "Q table is {}x{}, family is {ns}x{na}",
            q.num_states(),
            q.num_actions()
        )));
    }
    if let Combine::Source(k) = kind.combine {
        if k >= family.num_sources() {
            return Err(Error::Config(format!("source {k} out of range ({} sources)", family.num_sources())));
        }
    }
    let v = state_values(&kind.backup, q)?;
    let v = v.as_slice();
    let metric = &family.spec().metric;
    let mut out = Array2::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            let radius = family.spec().radius.at(s, a);
            let cell = |mdp: &TabularMdp| backup_cell(mdp, s, a, mdp.row(s, a), v, metric, radius, kind.robust);
            out[[s, a]] = match kind.combine {
                Combine::Source(k) => cell(&family.sources()[k])?,
                Combine::Target => cell(family.target())?,
                Combine::Proximal => cell(family.mean_source())?,
                Combine::Average => {
                    let mut total = 0.0;
                    for src in family.sources() {
                        total += cell(src)?;
                    }
                    total / family.num_sources() as f64
                }
                Combine::Max => {
                    let mut best = f64::NEG_INFINITY;
                    for src in family.sources() {
                        best = best.max(cell(src)?);
                    }
                    best
                }
            };
        }
    }
    Ok(QTable(out))
}

pub fn default_max_iters(tol: f64, discount: f64) -> usize {
    100 * ((1.0 / tol).ln() / (1.0 - discount)).ceil().max(1.0) as usize
}

#[derive(Debug, Clone, PartialEq)]
pub struct FixedPoint {
    pub q: QTable,
    pub iterations: usize,
    /// Last sup-norm update `||T q - q||`.
    pub residual: f64,
    pub converged: bool,
    pub residuals: Vec<f64>,
}

impl FixedPoint {
    /// Errors unless the iteration met its tolerance.
    pub fn require_converged(self) -> Result<Self> {
        if self.converged {
            Ok(self)
        } else {
            Err(Error::NotConverged { iterations: self.iterations, residual: self.residual })
        }
    }

    pub fn write_residuals_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "residual"])?;
        for (i, r) in self.residuals.iter().enumerate() {
            w.write_record([(i + 1).to_string(), format!("{r:e}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Iterates `kind` from `q = 0` until `||T q - q|| <= tol (1 - gamma) / gamma`,
/// which bounds the distance to the fixed point by `tol`.
pub fn fixed_point(
    kind: &OperatorKind,
    family: &DomainFamily,
    tol: f64,
    max_iters: Option<usize>,
) -> Result<FixedPoint> {
    if !(tol > 0.0) {
        return Err(Error::Config(format!("tolerance {tol} must be positive")));
    }
    let gamma = family.discount();
    let threshold = if gamma > 0.0 { tol * (1.0 - gamma) / gamma } else { f64::INFINITY };
    let max_iters = max_iters.unwrap_or_else(|| default_max_iters(tol, gamma));
    let mut q = QTable::zeros(family.num_states(), family.num_actions());
    let mut residuals = Vec::new();
    let mut residual = f64::INFINITY;
    for _ in 0..max_iters {
        let next = apply(kind, family, &q)?;
        if !next.is_finite() {
            return Err(Error::NonFinite { step: residuals.len(), agent: 0 });
        }
        residual = next.sup_distance(&q);
        residuals.push(residual);
        q = next;
        if residual <= threshold {
            return Ok(FixedPoint { q, iterations: residuals.len(), residual, converged: true, residuals });
        }
    }
    Ok(FixedPoint { q, iterations: residuals.len(), residual, converged: false, residuals })
}

/// Pessimistic value proxies `f(pi)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proxy {
    AveragedOperator,
    MinPessimism,
    ProximalRobustDr,
    PerSourceRobust(usize),
    MaxPerSourceRobust,
    /// Mean of the per-source robust values.
    MeanPerSourceRobust,
    NonRobustDr,
    /// The true target value `V^pi_{P_0}`.
    Target,
}

impl Proxy {
    fn operator(self, backup: Backup) -> Option<OperatorKind> {
        Some(match self {
            Proxy::AveragedOperator => OperatorKind { combine: Combine::Average, backup, robust: true },
            Proxy::MinPessimism => OperatorKind { combine: Combine::Max, backup, robust: true },
            Proxy::ProximalRobustDr => OperatorKind::proximal_robust_dr(backup),
            Proxy::PerSourceRobust(k) => OperatorKind { combine: Combine::Source(k), backup, robust: true },
            Proxy::NonRobustDr => OperatorKind::non_robust(Combine::Average, backup),
            Proxy::MaxPerSourceRobust | Proxy::MeanPerSourceRobust | Proxy::Target => return None,
        })
    }
}

/// Value of `policy` under a proxy, from the policy-operator fixed point.
pub fn proxy_value(proxy: Proxy, family: &DomainFamily, policy: &Policy) -> Result<ValueVector> {
    policy.validate(family.num_states(), family.num_actions())?;
    let evaluate = |kind: OperatorKind| -> Result<ValueVector> {
        let fp = fixed_point(&kind, family, DEFAULT_TOL, None)?.require_converged()?;
        v_from_q(policy, &fp.q)
    };
    match proxy {
        Proxy::Target => evaluate_policy_exact(family.target(), policy),
        Proxy::MaxPerSourceRobust | Proxy::MeanPerSourceRobust => {
            let per_source: Vec<ValueVector> = (0..family.num_sources())
                .map(|k| evaluate(OperatorKind::robust_policy(policy.clone(), k)))
                .collect::<Result<_>>()?;
            let mut out = per_source[0].0.clone();
            for v in &per_source[1..] {
                if proxy == Proxy::MaxPerSourceRobust {
                    out.zip_mut_with(&v.0, |o, x| *o = o.max(*x));
                } else {
                    out += &v.0;
                }
            }
            if proxy == Proxy::MeanPerSourceRobust {
                out /= family.num_sources() as f64;
            }
            Ok(ValueVector(out))
        }
        _ => evaluate(proxy.operator(Backup::Policy(policy.clone())).expect("operator proxy")),
    }
}

/// Level of pessimism `zeta^pi = max_s (V^pi_{P_0}(s) - f(pi)(s))`.
pub fn pessimism_gap(family: &DomainFamily, policy: &Policy, proxy: Proxy) -> Result<f64> {
    let target = evaluate_policy_exact(family.target(), policy)?;
    let value = proxy_value(proxy, family, policy)?;
    Ok(target.max_excess_over(&value))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuboptimalityReport {
    /// `max_s (V*_{P_0}(s) - V^{pi_f}_{P_0}(s))`.
    pub gap: f64,
    /// `max_pi zeta^pi` over all deterministic policies.
    pub bound: f64,
    pub proxy_policy: Policy,
}

fn enumeration_guard(family: &DomainFamily) -> Result<()> {
    let (ns, na) = (family.num_states(), family.num_actions());
    let count = (na as u128).checked_pow(ns as u32).unwrap_or(u128::MAX);
    if ns > 20 || na > 4 || count > MAX_ENUMERATED_POLICIES {
        return Err(Error::TooLarge(format!(
            "{na}^{ns} deterministic policies exceeds the enumeration guard of {MAX_ENUMERATED_POLICIES}"
        )));
    }
    Ok(())
}

/// Compares the target suboptimality of the proxy-greedy policy with the
/// pessimism bound, enumerating every deterministic policy.
pub fn suboptimality_bound(family: &DomainFamily, proxy: Proxy) -> Result<SuboptimalityReport> {
    enumeration_guard(family)?;
    let kind = proxy
        .operator(Backup::Optimal)
        .ok_or_else(|| Error::Unsupported(format!("{proxy:?} has no optimal operator")))?;
    let fp = fixed_point(&kind, family, DEFAULT_TOL, None)?.require_converged()?;
    let proxy_policy = greedy_policy(&fp.q);
    let (ns, na) = (family.num_states(), family.num_actions());
    let mut v_star = ValueVector(ndarray::Array1::from_elem(ns, f64::NEG_INFINITY));
    let mut bound = f64::NEG_INFINITY;
    for policy in Policy::enumerate_deterministic(ns, na) {
        let v = evaluate_policy_exact(family.target(), &policy)?;
        let f = proxy_value(proxy, family, &policy)?;
        bound = bound.max(v.max_excess_over(&f));
        v_star.0.zip_mut_with(&v.0, |a, b| *a = a.max(*b));
    }
    let achieved = evaluate_policy_exact(family.target(), &proxy_policy)?;
    Ok(SuboptimalityReport { gap: v_star.max_excess_over(&achieved), bound, proxy_policy })
}

/// Worst-case value of `policy` over the ball of `spec` centred at `nominal`.
pub fn robust_policy_evaluation(policy: &Policy, nominal: &TabularMdp, spec: &UncertaintySpec) -> Result<ValueVector> {
    let family = DomainFamily::single(nominal.clone(), spec.clone())?;
    proxy_value(Proxy::PerSourceRobust(0), &family, policy)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IntersectionReport {
    pub target: ValueVector,
    /// `None` when some cell's intersection contains no grid point.
    pub intersection: Option<ValueVector>,
    pub min_pessimism: ValueVector,
    /// Slack for the grid oracle's overestimate of `sigma`.
    pub grid_error: f64,
    pub ordering_holds: Option<bool>,
}

/// `V^pi` under the intersection of the source balls, solved on a simplex
/// grid, checked against `V^pi_{P_0} >= V^pi_cap >= V^pi_MP`.
pub fn intersection_check(family: &DomainFamily, policy: &Policy, resolution: f64) -> Result<IntersectionReport> {
    let (ns, na) = (family.num_states(), family.num_actions());
    if ns > 3 {
        return Err(Error::TooLarge(format!("intersection grid oracle supports S <= 3, got {ns}")));
    }
    let target = proxy_value(Proxy::Target, family, policy)?;
    let min_pessimism = proxy_value(Proxy::MinPessimism, family, policy)?;
    let gamma = family.discount();
    let metric = &family.spec().metric;
    let scale = 1.0 / (1.0 - gamma);
    let grid_error = gamma * resolution * ns as f64 * scale / (1.0 - gamma) + 1e-8;

    let mdp = family.target();
    let mut q = QTable::zeros(ns, na);
    let threshold = 1e-9;
    for _ in 0..default_max_iters(1e-9, gamma) {
        let v = v_from_q(policy, &q)?;
        let mut next = Array2::zeros((ns, na));
        for s in 0..ns {
            for a in 0..na {
                let centers: Vec<&[f64]> = family.sources().iter().map(|m| m.row(s, a)).collect();
                let (offset, x): (f64, Vec<f64>) = match mdp.reward() {
                    Reward::StateAction(r) => (r[[s, a]], v.0.iter().map(|y| gamma * y).collect()),
                    Reward::Transition(_) => {
                        let out = mdp.outcome_rewards(s, a).unwrap();
                        (0.0, out.iter().zip(v.0.iter()).map(|(r, y)| r + gamma * y).collect())
                    }
                };
                let radius = family.spec().radius.at(s, a);
                match uncertainty::support_intersection_bruteforce(&centers, &x, metric, radius, resolution)? {
                    Some(sigma) => next[[s, a]] = offset + sigma,
                    None => {
                        return Ok(IntersectionReport {
                            target,
                            intersection: None,
                            min_pessimism,
                            grid_error,
                            ordering_holds: None,
                        })
                    }
                }
            }
        }
        let next = QTable(next);
        let residual = next.sup_distance(&q);
        q = next;
        if residual <= threshold {
            break;
        }
    }
    let cap = v_from_q(policy, &q)?;
    let holds = cap.max_excess_over(&target) <= grid_error && min_pessimism.max_excess_over(&cap) <= 1e-8;
    Ok(IntersectionReport { target, intersection: Some(cap), min_pessimism, grid_error, ordering_holds: Some(holds) })
}
