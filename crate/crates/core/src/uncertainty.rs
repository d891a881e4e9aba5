//! (s,a)-rectangular uncertainty sets and their support functions
//! `sigma_P(v) = min_{q in P} q . v`.

use std::fmt;
use std::str::FromStr;

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{check_distribution, dot};

/// Slack when testing ball membership of grid points.
const MEMBERSHIP_TOL: f64 = 1e-12;
/// Breakpoints closer than this are treated as one.
const BREAKPOINT_TOL: f64 = 1e-12;

/// Order of the norm inside the l_p penalty `kappa(v) = min_w ||w 1 - v||_order`.
///
/// The perturbation ball itself is measured in the dual norm: `Infinity` pairs
/// with an l1 ball, `Two` with an l2 ball and `One` with an l_inf ball. With
/// that pairing `sigma(v) = p . v - radius * kappa(v)` is exact whenever the
/// ball stays inside the simplex.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LpOrder {
    One,
    Two,
    Infinity,
}

impl LpOrder {
    /// `||x||` in the norm the perturbation ball is measured in.
    pub fn ball_norm(self, x: impl Iterator<Item = f64>) -> f64 {
        match self {
            LpOrder::Infinity => x.map(f64::abs).sum(),
            LpOrder::Two => x.map(|d| d * d).sum::<f64>().sqrt(),
            LpOrder::One => x.map(f64::abs).fold(0.0, f64::max),
        }
    }

    /// Largest single-coordinate decrease a zero-sum perturbation of unit
    /// ball norm can produce on `n` coordinates.
    fn max_coordinate_drop(self, n: usize) -> f64 {
        match self {
            LpOrder::Infinity => 0.5,
            LpOrder::Two => ((n as f64 - 1.0) / n as f64).sqrt(),
            LpOrder::One => 1.0,
        }
    }
}

impl FromStr for LpOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "1" | "one" => Ok(LpOrder::One),
            "2" | "two" => Ok(LpOrder::Two),
            "inf" | "infinity" => Ok(LpOrder::Infinity),
            other => Err(Error::Unsupported(format!("l_p order {other:?}; expected 1, 2 or inf"))),
        }
    }
}

impl fmt::Display for LpOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LpOrder::One => "1",
            LpOrder::Two => "2",
            LpOrder::Infinity => "inf",
        })
    }
}

/// JSON: `{"kind": "total_variation"}`, `{"kind": "lp_norm", "order": "infinity"}`
/// or `{"kind": "wasserstein", "order": 1, "ground": [[...]]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MetricFile", into = "MetricFile")]
pub enum Metric {
    TotalVariation,
    LpNorm {
        order: LpOrder,
    },
    /// Order-`order` Wasserstein distance with ground distance `ground[s][y]`.
    Wasserstein {
        order: f64,
        ground: Vec<Vec<f64>>,
    },
}

impl Metric {
    /// `d(i, j) = |i - j|` on a line of `n` states.
    pub fn wasserstein_line(n: usize, order: f64) -> Metric {
        let ground = (0..n).map(|i| (0..n).map(|j| (i as f64 - j as f64).abs()).collect()).collect();
        Metric::Wasserstein { order, ground }
    }

    pub fn name(&self) -> String {
        match self {
            Metric::TotalVariation => "tv".into(),
            Metric::LpNorm { order } => format!("l{order}"),
            Metric::Wasserstein { order, .. } => format!("wasserstein{order}"),
        }
    }

    pub fn validate(&self, num_states: usize) -> Result<()> {
        if let Metric::Wasserstein { order, ground } = self {
            if !(order.is_finite() && *order >= 1.0) {
                return Err(Error::Config(format!("Wasserstein order {order} must be >= 1")));
            }
            if ground.len() != num_states || ground.iter().any(|r| r.len() != num_states) {
                return Err(Error::Dimension(format!("ground distance must be {num_states}x{num_states}")));
            }
            for i in 0..num_states {
                if ground[i][i] != 0.0 {
                    return Err(Error::Config(format!("ground distance d({i},{i}) must be 0")));
                }
                for j in 0..num_states {
                    let d = ground[i][j];
                    if !(d.is_finite() && d >= 0.0) || d != ground[j][i] || (i != j && d == 0.0) {
                        return Err(Error::Config(format!(
                            "ground distance must be symmetric, finite and positive off the diagonal (d({i},{j}) = {d})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetricFile {
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    order: Option<OrderField>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ground: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum OrderField {
    Named(LpOrder),
    Real(f64),
}

impl TryFrom<MetricFile> for Metric {
    type Error = Error;

    fn try_from(f: MetricFile) -> Result<Self> {
        let unexpected = |field: &str| Error::Config(format!("metric {:?} takes no {field:?} field", f.kind));
        match f.kind.as_str() {
            "total_variation" | "tv" => {
                if f.order.is_some() {
                    return Err(unexpected("order"));
                }
                if f.ground.is_some() {
                    return Err(unexpected("ground"));
                }
                Ok(Metric::TotalVariation)
            }
            "lp_norm" | "lp" => {
                if f.ground.is_some() {
                    return Err(unexpected("ground"));
                }
                let order = match f.order {
                    Some(OrderField::Named(o)) => o,
                    Some(OrderField::Real(1.0)) => LpOrder::One,
                    Some(OrderField::Real(2.0)) => LpOrder::Two,
                    other => {
                        return Err(Error::Config(format!(
                            "l_p metric needs order one, two or infinity, got {other:?}"
                        )))
                    }
                };
                Ok(Metric::LpNorm { order })
            }
            "wasserstein" => {
                let order = match f.order {
                    Some(OrderField::Real(x)) => x,
                    None => 1.0,
                    Some(other) => {
                        return Err(Error::Config(format!("Wasserstein order must be a number, got {other:?}")))
                    }
                };
                let ground =
                    f.ground.ok_or_else(|| Error::Config("Wasserstein metric needs a ground matrix".into()))?;
                Ok(Metric::Wasserstein { order, ground })
            }
            other => Err(Error::Unsupported(format!("metric kind {other:?}"))),
        }
    }
}

impl From<Metric> for MetricFile {
    fn from(m: Metric) -> Self {
        match m {
            Metric::TotalVariation => MetricFile { kind: "total_variation".into(), order: None, ground: None },
            Metric::LpNorm { order } => {
                MetricFile { kind: "lp_norm".into(), order: Some(OrderField::Named(order)), ground: None }
            }
            Metric::Wasserstein { order, ground } => {
                MetricFile { kind: "wasserstein".into(), order: Some(OrderField::Real(order)), ground: Some(ground) }
            }
        }
    }
}

/// Either one radius for every (s,a) or a full `S x A` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Radius {
    Uniform(f64),
    PerStateAction(Vec<Vec<f64>>),
}

impl Radius {
    pub fn at(&self, s: usize, a: usize) -> f64 {
        match self {
            Radius::Uniform(r) => *r,
            Radius::PerStateAction(m) => m[s][a],
        }
    }

    pub fn max(&self) -> f64 {
        match self {
            Radius::Uniform(r) => *r,
            Radius::PerStateAction(m) => m.iter().flatten().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UncertaintySpec {
    pub metric: Metric,
    pub radius: Radius,
}

impl UncertaintySpec {
    pub fn new(metric: Metric, radius: Radius) -> Self {
        UncertaintySpec { metric, radius }
    }

    pub fn tv(radius: f64) -> Self {
        UncertaintySpec::new(Metric::TotalVariation, Radius::Uniform(radius))
    }

    pub fn lp(order: LpOrder, radius: f64) -> Self {
        UncertaintySpec::new(Metric::LpNorm { order }, Radius::Uniform(radius))
    }

    pub fn with_radius(&self, radius: Radius) -> Self {
        UncertaintySpec { metric: self.metric.clone(), radius }
    }

    pub fn validate(&self, num_states: usize, num_actions: usize) -> Result<()> {
        self.metric.validate(num_states)?;
        match &self.radius {
            Radius::Uniform(r) => check_radius(*r)?,
            Radius::PerStateAction(m) => {
                if m.len() != num_states || m.iter().any(|r| r.len() != num_actions) {
                    return Err(Error::Dimension(format!("radius matrix must be {num_states}x{num_actions}")));
                }
                m.iter().flatten().try_for_each(|r| check_radius(*r))?;
            }
        }
        Ok(())
    }
}

fn check_radius(r: f64) -> Result<()> {
    if r.is_finite() && r >= 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidRadius(format!("{r}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SupportResult {
    pub value: f64,
    pub minimizer: Option<Vec<f64>>,
}

fn check_inputs(p: &[f64], v: &[f64], radius: f64) -> Result<()> {
    if p.len() != v.len() || p.is_empty() {
        return Err(Error::Dimension(format!("distribution has {} entries, values {}", p.len(), v.len())));
    }
    check_distribution(p).map_err(Error::InvalidDistribution)?;
    check_radius(radius)
}

/// Index of the smallest entry (lowest index on ties).
fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[best] {
            best = i;
        }
    }
    best
}

/// `1/2 ||p - q||_1`.
pub fn tv_distance(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

/// Exact TV support function by greedy mass transport: up to `radius` mass is
/// taken from the highest-valued states and put on the lowest-valued one.
pub fn support_tv(p: &[f64], v: &[f64], radius: f64) -> Result<SupportResult> {
    check_inputs(p, v, radius)?;
    let mut q = p.to_vec();
    let sink = argmin(v);
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&i, &j| v[j].total_cmp(&v[i]).then(i.cmp(&j)));
    let mut budget = radius.min(1.0);
    for s in order {
        if budget <= 0.0 || v[s] <= v[sink] {
            break;
        }
        let moved = q[s].min(budget);
        q[s] -= moved;
        q[sink] += moved;
        budget -= moved;
    }
    Ok(SupportResult { value: dot(&q, v), minimizer: Some(q) })
}

/// `kappa(v) = min_w ||w 1 - v||_order` in closed form.
pub fn kappa(v: &[f64], order: LpOrder) -> f64 {
    match order {
        LpOrder::Infinity => {
            let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
            (hi - lo) / 2.0
        }
        LpOrder::Two => {
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - mean).powi(2)).sum::<f64>().sqrt()
        }
        LpOrder::One => {
            // Any median minimises the l1 deviation; the optimum is the sum of the
            // top half of the sorted entries minus the bottom half.
            let mut sorted = v.to_vec();
            sorted.sort_by(f64::total_cmp);
            let n = sorted.len();
            let half = n / 2;
            sorted[n - half..].iter().sum::<f64>() - sorted[..half].iter().sum::<f64>()
        }
    }
}

/// Closed-form l_p support `p . v - radius * kappa(v)`. Exact only while the
/// ball stays inside the simplex; see [`lp_ball_within_simplex`].
pub fn support_lp(p: &[f64], v: &[f64], radius: f64, order: LpOrder) -> Result<SupportResult> {
    check_inputs(p, v, radius)?;
    Ok(SupportResult { value: dot(p, v) - radius * kappa(v, order), minimizer: None })
}

/// Whether every zero-sum perturbation of `p` within the ball remains a
/// distribution.
pub fn lp_ball_within_simplex(p: &[f64], radius: f64, order: LpOrder) -> bool {
    let lowest = p.iter().copied().fold(f64::INFINITY, f64::min);
    lowest + MEMBERSHIP_TOL >= radius * order.max_coordinate_drop(p.len())
}

/// Largest radius for which [`lp_ball_within_simplex`] holds at `p`.
pub fn lp_max_inner_radius(p: &[f64], order: LpOrder) -> f64 {
    p.iter().copied().fold(f64::INFINITY, f64::min) / order.max_coordinate_drop(p.len())
}

/// Distance between `p` and `q` in the norm the l_p ball uses.
pub fn lp_ball_distance(p: &[f64], q: &[f64], order: LpOrder) -> f64 {
    order.ball_norm(p.iter().zip(q).map(|(a, b)| a - b))
}

fn powered_ground(ground: &[Vec<f64>], order: f64) -> Vec<Vec<f64>> {
    ground.iter().map(|r| r.iter().map(|d| d.powf(order)).collect()).collect()
}

/// Wasserstein support via its scalar dual
/// `sup_{l >= 0} -l r^k + sum_s p(s) min_y (v(y) + l d(s,y)^k)`.
/// The objective is concave and piecewise linear, so the supremum sits at
/// `l = 0` or at a point where some inner minimiser switches.
pub fn support_wasserstein(
    p: &[f64],
    v: &[f64],
    radius: f64,
    order: f64,
    ground: &[Vec<f64>],
) -> Result<SupportResult> {
    check_inputs(p, v, radius)?;
    if radius <= 0.0 {
        return Err(Error::InvalidRadius("Wasserstein support needs a positive radius".into()));
    }
    let n = v.len();
    if ground.len() != n {
        return Err(Error::Dimension("ground distance does not match the distribution".into()));
    }
    let cost = powered_ground(ground, order);
    let budget = radius.powf(order);
    let mut candidates = vec![0.0];
    for (s, row) in cost.iter().enumerate() {
        if p[s] == 0.0 {
            continue;
        }
        for y1 in 0..n {
            for y2 in 0..n {
                let dc = row[y2] - row[y1];
                let dv = v[y1] - v[y2];
                if dc > 0.0 && dv > 0.0 {
                    candidates.push(dv / dc);
                }
            }
        }
    }
    candidates.sort_by(f64::total_cmp);
    candidates.dedup_by(|a, b| (*a - *b).abs() <= BREAKPOINT_TOL);
    let dual = |lambda: f64| -> f64 {
        let inner: f64 = cost
            .iter()
            .enumerate()
            .filter(|(s, _)| p[*s] > 0.0)
            .map(|(s, row)| {
                let best = v.iter().zip(row).map(|(vy, c)| vy + lambda * c).fold(f64::INFINITY, f64::min);
                p[s] * best
            })
            .sum();
        inner - lambda * budget
    };
    let value = candidates.into_iter().map(dual).fold(f64::NEG_INFINITY, f64::max);
    Ok(SupportResult { value, minimizer: None })
}

/// Optimal-transport distance `W_k(p, q) = (min_coupling sum pi_ij d_ij^k)^(1/k)`.
pub fn wasserstein_distance(p: &[f64], q: &[f64], order: f64, ground: &[Vec<f64>]) -> Result<f64> {
    let n = p.len();
    let cost = powered_ground(ground, order);
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> =
        (0..n).map(|i| (0..n).map(|j| problem.add_var(cost[i][j], (0.0, f64::INFINITY))).collect()).collect();
    for i in 0..n {
        let row: Vec<_> = (0..n).map(|j| (vars[i][j], 1.0)).collect();
        problem.add_constraint(&row, ComparisonOp::Eq, p[i]);
    }
    // the last column constraint is implied by the others
    for j in 0..n.saturating_sub(1) {
        let col: Vec<_> = (0..n).map(|i| (vars[i][j], 1.0)).collect();
        problem.add_constraint(&col, ComparisonOp::Eq, q[j]);
    }
    let solution = problem.solve().map_err(|e| Error::Lp(e.to_string()))?;
    Ok(solution.objective().max(0.0).powf(1.0 / order))
}

/// `D(p, q)` under `metric`.
pub fn distance(metric: &Metric, p: &[f64], q: &[f64]) -> Result<f64> {
    Ok(match metric {
        Metric::TotalVariation => tv_distance(p, q),
        Metric::LpNorm { order } => lp_ball_distance(p, q, *order),
        Metric::Wasserstein { order, ground } => wasserstein_distance(p, q, *order, ground)?,
    })
}

/// Support function over the ball of `spec` at cell `(s, a)` centred at `p`.
pub fn support(p: &[f64], v: &[f64], spec: &UncertaintySpec, s: usize, a: usize) -> Result<SupportResult> {
    support_with_radius(p, v, &spec.metric, spec.radius.at(s, a))
}

pub fn support_with_radius(p: &[f64], v: &[f64], metric: &Metric, radius: f64) -> Result<SupportResult> {
    if radius == 0.0 {
        check_inputs(p, v, radius)?;
        return Ok(SupportResult { value: dot(p, v), minimizer: Some(p.to_vec()) });
    }
    match metric {
        Metric::TotalVariation => support_tv(p, v, radius),
        Metric::LpNorm { order } => support_lp(p, v, radius, *order),
        Metric::Wasserstein { order, ground } => support_wasserstein(p, v, radius, *order, ground),
    }
}

/// Largest simplex size the grid oracles accept.
pub const BRUTE_FORCE_MAX_STATES: usize = 4;

/// Calls `visit` with every point of the simplex grid `{k / n : sum k = n}`.
fn for_each_grid_point(dim: usize, n: usize, mut visit: impl FnMut(&[f64])) {
    let mut counts = vec![0usize; dim];
    let mut point = vec![0.0; dim];
    fn rec(i: usize, left: usize, n: usize, counts: &mut [usize], point: &mut [f64], visit: &mut dyn FnMut(&[f64])) {
        let dim = counts.len();
        if i == dim - 1 {
            counts[i] = left;
            for (x, c) in point.iter_mut().zip(counts.iter()) {
                *x = *c as f64 / n as f64;
            }
            visit(point);
            return;
        }
        for c in 0..=left {
            counts[i] = c;
            rec(i + 1, left - c, n, counts, point, visit);
        }
    }
    rec(0, n, n, &mut counts, &mut point, &mut visit);
}

fn grid_size(resolution: f64) -> Result<usize> {
    if !(resolution > 0.0 && resolution <= 1.0) {
        return Err(Error::Config(format!("grid resolution {resolution} must lie in (0, 1]")));
    }
    Ok((1.0 / resolution).round().max(1.0) as usize)
}

/// Grid oracle for `sigma`. Every candidate is feasible, so the result is an
/// upper bound on the true support value (within `resolution * |v|_inf * S`).
///
/// TV and l_p balls: all simplex grid points, plus, for grid points outside
/// the ball, their radial projection onto the ball boundary along the segment
/// from `p`. Wasserstein: the primal transport LP over couplings.
pub fn support_bruteforce(p: &[f64], v: &[f64], metric: &Metric, radius: f64, resolution: f64) -> Result<f64> {
    check_inputs(p, v, radius)?;
    let dim = p.len();
    if dim > BRUTE_FORCE_MAX_STATES {
        return Err(Error::TooLarge(format!(
            "grid oracle supports at most {BRUTE_FORCE_MAX_STATES} states, got {dim}"
        )));
    }
    if let Metric::Wasserstein { order, ground } = metric {
        return wasserstein_primal(p, v, radius, *order, ground);
    }
    let n = grid_size(resolution)?;
    let mut best = dot(p, v);
    let mut scaled = vec![0.0; dim];
    for_each_grid_point(dim, n, |q| {
        let d = distance(metric, p, q).expect("norm metrics are infallible");
        if d <= radius + MEMBERSHIP_TOL {
            best = best.min(dot(q, v));
        } else {
            let t = radius / d;
            for i in 0..dim {
                scaled[i] = p[i] + t * (q[i] - p[i]);
            }
            best = best.min(dot(&scaled, v));
        }
    });
    Ok(best)
}

/// `min sum_ij pi_ij v(j)` over couplings with first marginal `p` and
/// transport cost at most `radius^order`.
fn wasserstein_primal(p: &[f64], v: &[f64], radius: f64, order: f64, ground: &[Vec<f64>]) -> Result<f64> {
    let n = p.len();
    let cost = powered_ground(ground, order);
    let mut problem = Problem::new(OptimizationDirection::Minimize);
    let vars: Vec<Vec<_>> =
        (0..n).map(|_| (0..n).map(|j| problem.add_var(v[j], (0.0, f64::INFINITY))).collect()).collect();
    for i in 0..n {
        let row: Vec<_> = (0..n).map(|j| (vars[i][j], 1.0)).collect();
        problem.add_constraint(&row, ComparisonOp::Eq, p[i]);
    }
    let budget: Vec<_> =
        (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).map(|(i, j)| (vars[i][j], cost[i][j])).collect();
    problem.add_constraint(&budget, ComparisonOp::Le, radius.powf(order));
    let solution = problem.solve().map_err(|e| Error::Lp(e.to_string()))?;
    Ok(solution.objective())
}

/// Grid oracle for the support function of `intersection_k Ball(centers[k])`.
/// Candidates are the grid points and the centres; returns `None` when none
/// of them lies in every ball.
pub fn support_intersection_bruteforce(
    centers: &[&[f64]],
    v: &[f64],
    metric: &Metric,
    radius: f64,
    resolution: f64,
) -> Result<Option<f64>> {
    let dim = v.len();
    if dim > BRUTE_FORCE_MAX_STATES {
        return Err(Error::TooLarge(format!(
            "grid oracle supports at most {BRUTE_FORCE_MAX_STATES} states, got {dim}"
        )));
    }
    for c in centers {
        check_inputs(c, v, radius)?;
    }
    let n = grid_size(resolution)?;
    let inside = |q: &[f64]| -> Result<bool> {
        for c in centers {
            if distance(metric, c, q)? > radius + MEMBERSHIP_TOL {
                return Ok(false);
            }
        }
        Ok(true)
    };
    let mut best: Option<f64> = None;
    let consider = |q: &[f64], best: &mut Option<f64>| -> Result<()> {
        if inside(q)? {
            let value = dot(q, v);
            *best = Some(best.map_or(value, |b| b.min(value)));
        }
        Ok(())
    };
    // the centres themselves are candidates, so coincident balls are never empty
    for c in centers {
        consider(c, &mut best)?;
    }
    let mut failure = None;
    for_each_grid_point(dim, n, |q| {
        if failure.is_none() {
            if let Err(e) = consider(q, &mut best) {
                failure = Some(e);
            }
        }
    });
    match failure {
        Some(e) => Err(e),
        None => Ok(best),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    /// Golden-section minimisation of a convex scalar function on `[lo, hi]`.
    fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) <= f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        f((lo + hi) / 2.0)
    }

    fn kappa_variational(v: &[f64], order: LpOrder) -> f64 {
        let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let norm = |w: f64| match order {
            LpOrder::One => v.iter().map(|x| (w - x).abs()).sum::<f64>(),
            LpOrder::Two => v.iter().map(|x| (w - x).powi(2)).sum::<f64>().sqrt(),
            LpOrder::Infinity => v.iter().map(|x| (w - x).abs()).fold(0.0, f64::max),
        };
        golden_min(norm, lo, hi)
    }

    #[test]
    fn tv_examples() {
        let r = support_tv(&[0.5, 0.5], &[0.0, 1.0], 0.0).unwrap();
        assert_eq!(r.value, 0.5);
        assert_eq!(r.minimizer.unwrap(), vec![0.5, 0.5]);
        let r = support_tv(&[0.5, 0.5], &[0.0, 1.0], 0.2).unwrap();
        assert!(close(r.value, 0.3, 1e-15));
        let q = r.minimizer.unwrap();
        assert!(close(q[0], 0.7, 1e-15) && close(q[1], 0.3, 1e-15));
        let r = support_tv(&[0.2, 0.3, 0.5], &[0.4, 0.1, 0.9], 1.0).unwrap();
        assert!(close(r.value, 0.1, 1e-15));
        assert!(support_tv(&[0.5, 0.5], &[0.0, 1.0], -0.1).is_err());
        assert!(support_tv(&[0.5, 0.6], &[0.0, 1.0], 0.1).is_err());
    }

    #[test]
    fn tv_matches_fine_two_point_grid() {
        // direct sweep over q = (x, 1 - x) with step 1e-4
        let p = [0.5, 0.5];
        let v = [0.0, 1.0];
        let best = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .filter(|x| tv_distance(&p, &[*x, 1.0 - x]) <= 0.2 + 1e-12)
            .map(|x| x * v[0] + (1.0 - x) * v[1])
            .fold(f64::INFINITY, f64::min);
        assert!(close(best, 0.3, 1e-9));
        let oracle = support_bruteforce(&p, &v, &Metric::TotalVariation, 0.2, 1e-3).unwrap();
        assert!(close(oracle, 0.3, 1e-3 * 2.0));
    }

    #[test]
    fn tv_distance_examples() {
        assert_eq!(tv_distance(&[0.2, 0.8], &[0.2, 0.8]), 0.0);
        assert_eq!(tv_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0);
        let direct: f64 = 0.5 * ((0.7f64 - 0.5).abs() + (0.3f64 - 0.5).abs());
        assert!(close(tv_distance(&[0.7, 0.3], &[0.5, 0.5]), direct, 1e-16));
        assert!(close(direct, 0.2, 1e-15));
    }

    #[test]
    fn kappa_table_values() {
        assert_eq!(kappa(&[0.0, 1.0], LpOrder::Infinity), 0.5);
        assert_eq!(kappa(&[0.3, 0.3, 0.3], LpOrder::Two), 0.0);
        let r = support_lp(&[0.2, 0.8], &[0.7, 0.7], 0.1, LpOrder::Two).unwrap();
        assert!(close(r.value, 0.7, 1e-15));
        let r = support_lp(&[0.5, 0.5], &[0.0, 1.0], 0.1, LpOrder::Infinity).unwrap();
        assert!(close(r.value, 0.45, 1e-15));
        let oracle =
            support_bruteforce(&[0.5, 0.5], &[0.0, 1.0], &Metric::LpNorm { order: LpOrder::Infinity }, 0.1, 1e-3)
                .unwrap();
        assert!(oracle >= 0.45 - 1e-12 && oracle <= 0.45 + 2e-3);
        // even length: the median split keeps both halves
        assert!(close(kappa(&[0.0, 1.0], LpOrder::One), 1.0, 1e-15));
        assert!(close(kappa(&[3.0, 0.0, 1.0, 2.0], LpOrder::One), 4.0, 1e-15));
    }

    #[test]
    fn kappa_matches_variational_definition() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let n = rng.gen_range(1..7);
            let v: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
            for order in [LpOrder::One, LpOrder::Two, LpOrder::Infinity] {
                assert!(close(kappa(&v, order), kappa_variational(&v, order), 1e-8), "{order} {v:?}");
            }
        }
    }

    #[test]
    fn lp_feasibility_check() {
        assert!(lp_ball_within_simplex(&[0.5, 0.5], 0.1, LpOrder::Infinity));
        assert!(lp_ball_within_simplex(&[0.5, 0.5], 1.0, LpOrder::Infinity));
        assert!(!lp_ball_within_simplex(&[0.5, 0.5], 0.6, LpOrder::One));
        assert!(lp_ball_within_simplex(&[0.05, 0.95], 0.1, LpOrder::Infinity));
        assert!(!lp_ball_within_simplex(&[0.04, 0.96], 0.1, LpOrder::Infinity));
        assert!(!lp_ball_within_simplex(&[0.01, 0.99], 0.1, LpOrder::Two));
    }

    #[test]
    fn wasserstein_examples() {
        let metric = Metric::wasserstein_line(3, 1.0);
        let Metric::Wasserstein { ground, .. } = &metric else { unreachable!() };
        let r = support_wasserstein(&[0.2, 0.3, 0.5], &[0.4, 0.4, 0.4], 0.3, 1.0, ground).unwrap();
        assert!(close(r.value, 0.4, 1e-15));
        let p = [1.0, 0.0, 0.0];
        let v = [1.0, 0.5, 0.0];
        let dual = support_wasserstein(&p, &v, 0.5, 1.0, ground).unwrap().value;
        let primal = support_bruteforce(&p, &v, &metric, 0.5, 1e-3).unwrap();
        assert!(close(dual, primal, 1e-6), "{dual} vs {primal}");
        assert!(close(dual, 0.75, 1e-9));
        // prohibitively expensive transport
        let far: Vec<Vec<f64>> = (0..3).map(|i| (0..3).map(|j| if i == j { 0.0 } else { 1e9 }).collect()).collect();
        let r = support_wasserstein(&[0.2, 0.3, 0.5], &[0.9, 0.1, 0.5], 0.1, 1.0, &far).unwrap();
        assert!(close(r.value, 0.2 * 0.9 + 0.3 * 0.1 + 0.5 * 0.5, 1e-9));
        assert!(support_wasserstein(&p, &v, 0.0, 1.0, ground).is_err());
    }

    #[test]
    fn wasserstein_distance_on_a_line() {
        let Metric::Wasserstein { ground, .. } = Metric::wasserstein_line(3, 1.0) else { unreachable!() };
        let d = wasserstein_distance(&[1.0, 0.0, 0.0], &[0.0, 0.0, 1.0], 1.0, &ground).unwrap();
        assert!(close(d, 2.0, 1e-9));
        let d = wasserstein_distance(&[0.5, 0.5, 0.0], &[0.5, 0.0, 0.5], 2.0, &ground).unwrap();
        assert!(close(d, 0.5f64.sqrt(), 1e-9));
    }

    #[test]
    fn zero_radius_dispatch_is_nominal() {
        let p = [0.1, 0.6, 0.3];
        let v = [2.0, -1.0, 0.5];
        let expected = dot(&p, &v);
        for metric in [
            Metric::TotalVariation,
            Metric::LpNorm { order: LpOrder::One },
            Metric::LpNorm { order: LpOrder::Two },
            Metric::LpNorm { order: LpOrder::Infinity },
            Metric::wasserstein_line(3, 1.0),
        ] {
            let spec = UncertaintySpec::new(metric.clone(), Radius::Uniform(0.0));
            assert_eq!(support(&p, &v, &spec, 0, 0).unwrap().value, expected);
            let grid = support_bruteforce(&p, &v, &metric, 0.0, 1e-3).unwrap();
            assert!(close(grid, expected, 1e-3 * 2.0 * 3.0));
        }
    }

    #[test]
    fn bruteforce_guards() {
        let p = [0.2; 5];
        assert!(matches!(
            support_bruteforce(&p, &[0.0; 5], &Metric::TotalVariation, 0.1, 0.1),
            Err(Error::TooLarge(_))
        ));
        assert!(support_bruteforce(&[0.5, 0.5], &[0.0, 1.0], &Metric::TotalVariation, 0.1, 0.0).is_err());
    }

    #[test]
    fn intersection_oracle() {
        let a = [0.5, 0.5];
        let b = [0.7, 0.3];
        let v = [0.0, 1.0];
        // balls of radius 0.1 around a and b touch only at (0.6, 0.4)
        let r = support_intersection_bruteforce(&[&a, &b], &v, &Metric::TotalVariation, 0.1, 1e-3).unwrap();
        assert!(close(r.unwrap(), 0.4, 1e-9));
        let r = support_intersection_bruteforce(&[&a, &b], &v, &Metric::TotalVariation, 0.05, 1e-3).unwrap();
        assert!(r.is_none());
    }

    #[test]
    fn spec_json_layout() {
        let spec: UncertaintySpec =
            serde_json::from_str(r#"{"metric":{"kind":"lp_norm","order":"infinity"},"radius":0.1}"#).unwrap();
        assert_eq!(spec, UncertaintySpec::lp(LpOrder::Infinity, 0.1));
        let spec: UncertaintySpec =
            serde_json::from_str(r#"{"metric":{"kind":"total_variation"},"radius":[[0.1,0.2]]}"#).unwrap();
        assert_eq!(spec.radius.at(0, 1), 0.2);
        assert!(spec.validate(1, 2).is_ok());
        assert!(spec.validate(2, 2).is_err());
        assert!(serde_json::from_str::<UncertaintySpec>(r#"{"metric":{"kind":"total_variation","x":1},"radius":0.1}"#)
            .is_err());
        let bad = UncertaintySpec::new(
            Metric::Wasserstein { order: 1.0, ground: vec![vec![0.0, 1.0], vec![2.0, 0.0]] },
            Radius::Uniform(0.1),
        );
        assert!(bad.validate(2, 1).is_err());
        assert!(UncertaintySpec::tv(-0.1).validate(2, 1).is_err());
    }

    fn simplex_point(weights: &[f64]) -> Vec<f64> {
        let total: f64 = weights.iter().sum();
        let mut p: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let s: f64 = p[1..].iter().sum();
        p[0] = 1.0 - s;
        p
    }

    fn metrics() -> Vec<Metric> {
        vec![
            Metric::TotalVariation,
            Metric::LpNorm { order: LpOrder::One },
            Metric::LpNorm { order: LpOrder::Two },
            Metric::LpNorm { order: LpOrder::Infinity },
            Metric::wasserstein_line(3, 1.0),
            Metric::wasserstein_line(3, 2.0),
        ]
    }

    proptest! {
        #[test]
        fn support_is_monotone_and_pessimistic(
            w in proptest::collection::vec(0.05f64..1.0, 3),
            v in proptest::collection::vec(-2.0f64..2.0, 3),
            r1 in 0.0f64..0.5,
            r2 in 0.0f64..0.5,
            shift in -5.0f64..5.0,
        ) {
            let p = simplex_point(&w);
            let (lo, hi) = if r1 <= r2 { (r1, r2) } else { (r2, r1) };
            for metric in metrics() {
                let s_lo = support_with_radius(&p, &v, &metric, lo).unwrap().value;
                let s_hi = support_with_radius(&p, &v, &metric, hi).unwrap().value;
                prop_assert!(s_hi <= s_lo + 1e-12, "{} {} {}", metric.name(), s_lo, s_hi);
                prop_assert!(s_lo <= dot(&p, &v) + 1e-12);
                let moved: Vec<f64> = v.iter().map(|x| x + shift).collect();
                let s_moved = support_with_radius(&p, &moved, &metric, hi).unwrap().value;
                prop_assert!((s_moved - (s_hi + shift)).abs() <= 1e-9, "{}", metric.name());
            }
        }

        #[test]
        fn kappa_is_lipschitz(
            a in proptest::collection::vec(-2.0f64..2.0, 1..6),
            noise in proptest::collection::vec(-1.0f64..1.0, 6),
        ) {
            let b: Vec<f64> = a.iter().zip(&noise).map(|(x, e)| x + e).collect();
            let sup = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            for order in [LpOrder::One, LpOrder::Two, LpOrder::Infinity] {
                let gap = (kappa(&a, order) - kappa(&b, order)).abs();
                let constant = match order {
                    LpOrder::Infinity => 1.0,
                    // the centred norms scale with the dimension
                    LpOrder::Two => (a.len() as f64).sqrt().max(2.0),
                    LpOrder::One => (a.len() as f64).max(2.0),
                };
                prop_assert!(gap <= constant * sup + 1e-12);
                if a.len() <= 3 {
                    prop_assert!(gap <= 2.0 * sup + 1e-12);
                }
            }
        }

        #[test]
        fn analytic_matches_grid(
            w in proptest::collection::vec(0.05f64..1.0, 3),
            v in proptest::collection::vec(0.0f64..1.0, 3),
            frac in 0.0f64..1.0,
        ) {
            let p = simplex_point(&w);
            let lowest = p.iter().copied().fold(1.0, f64::min);
            for metric in [Metric::TotalVariation, Metric::LpNorm { order: LpOrder::Two }, Metric::wasserstein_line(3, 1.0)] {
                let radius = match &metric {
                    Metric::LpNorm { order } => frac * lowest / order.max_coordinate_drop(3),
                    _ => frac * 0.6,
                };
                let exact = support_with_radius(&p, &v, &metric, radius).unwrap().value;
                let grid = support_bruteforce(&p, &v, &metric, radius, 1e-2).unwrap();
                let bound = 1e-2 * 3.0 * v.iter().copied().fold(0.0, f64::max);
                prop_assert!(grid >= exact - 1e-9, "{} {} {}", metric.name(), grid, exact);
                prop_assert!(grid <= exact + bound + 1e-9, "{} {} {}", metric.name(), grid, exact);
            }
        }
    }
}
