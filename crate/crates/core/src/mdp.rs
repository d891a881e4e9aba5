//! Finite discounted MDPs, policies and exact (non-robust) evaluation.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use ndarray::{s, Array1, Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance used when checking that a row of the kernel is a distribution.
pub const PROB_TOL: f64 = 1e-12;

/// Reward specification shared by every domain of a family.
///
/// `StateAction` is the usual `r(s,a)`. `Transition` attaches the reward to the
/// realised outcome, `R(s,a,s')`, which is what the recycling robot and the
/// FrozenLake grid naturally use (a found can or a depletion penalty is a
/// property of the transition, not of the decision).
#[derive(Debug, Clone, PartialEq)]
pub enum Reward {
    StateAction(Array2<f64>),
    Transition(Array3<f64>),
}

impl Reward {
    fn entries(&self) -> &[f64] {
        match self {
            Reward::StateAction(r) => r.as_slice().expect("standard layout"),
            Reward::Transition(r) => r.as_slice().expect("standard layout"),
        }
    }
}

/// Affine map from the unit-interval rewards stored in an MDP back to the raw
/// reward units of the environment: `raw = offset + scale * r`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardScale {
    pub offset: f64,
    pub scale: f64,
}

impl RewardScale {
    /// Fits the map sending `min(raw)` to 0 and `max(raw)` to 1.
    pub fn fit(raw: &[f64]) -> Self {
        let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let scale = if hi > lo { hi - lo } else { 1.0 };
        RewardScale { offset: lo, scale }
    }

    pub fn to_unit(&self, raw: f64) -> f64 {
        (raw - self.offset) / self.scale
    }

    /// Converts a discounted value computed with unit rewards back to raw units.
    pub fn value_to_raw(&self, value: f64, discount: f64) -> f64 {
        self.offset / (1.0 - discount) + self.scale * value
    }
}

/// A finite MDP `(S, A, P, r, gamma)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MdpFile", into = "MdpFile")]
pub struct TabularMdp {
    transition: Array3<f64>,
    reward: Reward,
    discount: f64,
    reward_scale: Option<RewardScale>,
}

impl TabularMdp {
    pub fn new(transition: Array3<f64>, reward: Reward, discount: f64) -> Result<Self> {
        let (ns, na, ns2) = transition.dim();
        if ns == 0 || na == 0 {
            return Err(Error::Dimension("MDP needs at least one state and one action".into()));
        }
        if ns != ns2 {
            return Err(Error::Dimension(format!("transition has shape {ns}x{na}x{ns2}")));
        }
        if !(0.0..1.0).contains(&discount) {
            return Err(Error::InvalidDiscount(discount));
        }
        match &reward {
            Reward::StateAction(r) if r.dim() != (ns, na) => {
                return Err(Error::Dimension(format!("reward has shape {:?}, expected ({ns}, {na})", r.dim())))
            }
            Reward::Transition(r) if r.dim() != (ns, na, ns) => {
                return Err(Error::Dimension(format!("reward has shape {:?}, expected ({ns}, {na}, {ns})", r.dim())))
            }
            _ => {}
        }
        if let Some(bad) = reward.entries().iter().find(|x| !(0.0..=1.0).contains(*x)) {
            return Err(Error::InvalidReward(format!("entry {bad} outside [0, 1]")));
        }
        let transition = transition.as_standard_layout().into_owned();
        for s in 0..ns {
            for a in 0..na {
                check_distribution(transition.slice(s![s, a, ..]).as_slice().unwrap())
                    .map_err(|e| Error::InvalidDistribution(format!("P[{s}][{a}]: {e}")))?;
            }
        }
        let reward = match reward {
            Reward::StateAction(r) => Reward::StateAction(r.as_standard_layout().into_owned()),
            Reward::Transition(r) => Reward::Transition(r.as_standard_layout().into_owned()),
        };
        Ok(TabularMdp { transition, reward, discount, reward_scale: None })
    }

    pub fn with_reward_scale(mut self, scale: RewardScale) -> Self {
        self.reward_scale = Some(scale);
        self
    }

    /// A copy of this MDP with a different kernel (same reward and discount).
    pub fn with_transition(&self, transition: Array3<f64>) -> Result<Self> {
        let mdp = TabularMdp::new(transition, self.reward.clone(), self.discount)?;
        Ok(TabularMdp { reward_scale: self.reward_scale, ..mdp })
    }

    pub fn num_states(&self) -> usize {
        self.transition.dim().0
    }

    pub fn num_actions(&self) -> usize {
        self.transition.dim().1
    }

    pub fn discount(&self) -> f64 {
        self.discount
    }

    pub fn transition(&self) -> &Array3<f64> {
        &self.transition
    }

    pub fn reward(&self) -> &Reward {
        &self.reward
    }

    pub fn reward_scale(&self) -> Option<RewardScale> {
        self.reward_scale
    }

    /// The next-state distribution `P_s^a`.
    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let ns = self.num_states();
        let start = (s * self.num_actions() + a) * ns;
        &self.transition.as_slice().unwrap()[start..start + ns]
    }

    /// Outcome rewards `R(s,a,.)` when the reward is transition based.
    pub fn outcome_rewards(&self, s: usize, a: usize) -> Option<&[f64]> {
        match &self.reward {
            Reward::StateAction(_) => None,
            Reward::Transition(r) => {
                let ns = self.num_states();
                let start = (s * self.num_actions() + a) * ns;
                Some(&r.as_slice().unwrap()[start..start + ns])
            }
        }
    }

    /// Expected one-step reward under this MDP's own kernel.
    pub fn expected_reward(&self, s: usize, a: usize) -> f64 {
        match &self.reward {
            Reward::StateAction(r) => r[[s, a]],
            Reward::Transition(_) => dot(self.row(s, a), self.outcome_rewards(s, a).unwrap()),
        }
    }

    pub fn same_shape(&self, other: &TabularMdp) -> bool {
        self.num_states() == other.num_states() && self.num_actions() == other.num_actions()
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json_str(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_json_string()?)?;
        Ok(())
    }
}

pub(crate) fn check_distribution(p: &[f64]) -> std::result::Result<(), String> {
    if let Some(x) = p.iter().find(|x| !(x.is_finite() && **x >= 0.0)) {
        return Err(format!("entry {x} is negative or non-finite"));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(format!("sums to {total}"));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Stationary policy. Deterministic policies map a state to an action index;
/// stochastic ones are row-stochastic `S x A` matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Deterministic(Vec<usize>),
    Stochastic(Vec<Vec<f64>>),
}

impl Policy {
    pub fn uniform(num_states: usize, num_actions: usize) -> Self {
        Policy::Stochastic(vec![vec![1.0 / num_actions as f64; num_actions]; num_states])
    }

    pub fn num_states(&self) -> usize {
        match self {
            Policy::Deterministic(d) => d.len(),
            Policy::Stochastic(m) => m.len(),
        }
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        match self {
            Policy::Deterministic(d) => f64::from(u8::from(d[s] == a)),
            Policy::Stochastic(m) => m[s][a],
        }
    }

    pub fn validate(&self, num_states: usize, num_actions: usize) -> Result<()> {
        if self.num_states() != num_states {
            return Err(Error::Dimension(format!("policy covers {} states, MDP has {num_states}", self.num_states())));
        }
        match self {
            Policy::Deterministic(d) => {
                if let Some((s, a)) = d.iter().enumerate().find(|(_, a)| **a >= num_actions) {
                    return Err(Error::Dimension(format!("action {a} in state {s} out of range")));
                }
            }
            Policy::Stochastic(m) => {
                for (s, row) in m.iter().enumerate() {
                    if row.len() != num_actions {
                        return Err(Error::Dimension(format!("policy row {s} has {} actions", row.len())));
                    }
                    check_distribution(row).map_err(|e| Error::InvalidDistribution(format!("policy row {s}: {e}")))?;
                }
            }
        }
        Ok(())
    }

    /// Every deterministic policy, in mixed-radix order (state 0 varies fastest).
    pub fn enumerate_deterministic(num_states: usize, num_actions: usize) -> impl Iterator<Item = Policy> {
        let total = (num_actions as u128).pow(num_states as u32);
        (0..total).map(move |mut code| {
            let mut actions = Vec::with_capacity(num_states);
            for _ in 0..num_states {
                actions.push((code % num_actions as u128) as usize);
                code /= num_actions as u128;
            }
            Policy::Deterministic(actions)
        })
    }
}

/// `S x A` table of discounted returns.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable(pub Array2<f64>);

impl QTable {
    pub fn zeros(num_states: usize, num_actions: usize) -> Self {
        QTable(Array2::zeros((num_states, num_actions)))
    }

    pub fn num_states(&self) -> usize {
        self.0.nrows()
    }

    pub fn num_actions(&self) -> usize {
        self.0.ncols()
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.0[[s, a]]
    }

    /// `V(s) = max_a Q(s,a)`.
    pub fn state_max(&self) -> ValueVector {
        ValueVector(self.0.rows().into_iter().map(|r| r.fold(f64::NEG_INFINITY, |m, &x| m.max(x))).collect())
    }

    pub fn sup_distance(&self, other: &QTable) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn min_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max_entry(&self) -> f64 {
        self.0.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|x| x.is_finite())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.0.rows().into_iter().map(|r| r.to_vec()).collect()
    }
}

/// Length-`S` vector of state values.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueVector(pub Array1<f64>);

impl ValueVector {
    pub fn zeros(num_states: usize) -> Self {
        ValueVector(Array1::zeros(num_states))
    }

    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice().expect("standard layout")
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.0.mean().unwrap_or(0.0)
    }

    pub fn sup_distance(&self, other: &ValueVector) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// `max_s (self(s) - other(s))`.
    pub fn max_excess_over(&self, other: &ValueVector) -> f64 {
        self.0.iter().zip(other.0.iter()).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Solves `(I - gamma P^pi) V = r^pi` by dense LU with partial pivoting.
pub fn evaluate_policy_exact(mdp: &TabularMdp, policy: &Policy) -> Result<ValueVector> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    policy.validate(ns, na)?;
    let gamma = mdp.discount();
    let mut lhs = DMatrix::<f64>::identity(ns, ns);
    let mut rhs = DVector::<f64>::zeros(ns);
    for s in 0..ns {
        for a in 0..na {
            let pi = policy.prob(s, a);
            if pi == 0.0 {
                continue;
            }
            rhs[s] += pi * mdp.expected_reward(s, a);
            for (next, p) in mdp.row(s, a).iter().enumerate() {
                lhs[(s, next)] -= gamma * pi * p;
            }
        }
    }
    let solution = lhs.lu().solve(&rhs).ok_or_else(|| Error::Dimension("singular policy-evaluation system".into()))?;
    Ok(ValueVector(solution.iter().copied().collect()))
}

/// Greedy deterministic policy; ties go to the lowest action index.
pub fn greedy_policy(q: &QTable) -> Policy {
    let actions =
        q.0.rows()
            .into_iter()
            .map(|row| {
                let mut best = 0;
                for (a, &x) in row.iter().enumerate() {
                    if x > row[best] {
                        best = a;
                    }
                }
                best
            })
            .collect();
    Policy::Deterministic(actions)
}

/// `q(s,a) = r(s,a) + gamma P_s^a . v`.
pub fn q_from_v(mdp: &TabularMdp, v: &ValueVector) -> Result<QTable> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    if v.len() != ns {
        return Err(Error::Dimension(format!("value vector has {} entries, MDP has {ns} states", v.len())));
    }
    let gamma = mdp.discount();
    let q =
        Array2::from_shape_fn((ns, na), |(s, a)| mdp.expected_reward(s, a) + gamma * dot(mdp.row(s, a), v.as_slice()));
    Ok(QTable(q))
}

/// `v(s) = sum_a pi(a|s) q(s,a)`.
pub fn v_from_q(policy: &Policy, q: &QTable) -> Result<ValueVector> {
    policy.validate(q.num_states(), q.num_actions())?;
    Ok(ValueVector(
        (0..q.num_states()).map(|s| (0..q.num_actions()).map(|a| policy.prob(s, a) * q.get(s, a)).sum()).collect(),
    ))
}

/// Non-robust optimal Q by value iteration from zero; stops once the sup-norm
/// update falls below `tol (1 - gamma) / gamma`.
pub fn value_iteration(mdp: &TabularMdp, tol: f64, max_iters: usize) -> Result<QTable> {
    let gamma = mdp.discount();
    let threshold = if gamma > 0.0 { tol * (1.0 - gamma) / gamma } else { f64::INFINITY };
    let mut q = QTable::zeros(mdp.num_states(), mdp.num_actions());
    for iteration in 1..=max_iters {
        let next = q_from_v(mdp, &q.state_max())?;
        let residual = next.sup_distance(&q);
        q = next;
        if residual <= threshold {
            return Ok(q);
        }
        if iteration == max_iters {
            return Err(Error::NotConverged { iterations: iteration, residual });
        }
    }
    Err(Error::NotConverged { iterations: 0, residual: f64::INFINITY })
}

/// JSON layout of a [`TabularMdp`].
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub num_states: usize,
    pub num_actions: usize,
    pub transition: Vec<Vec<Vec<f64>>>,
    pub reward: RewardFile,
    pub discount: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward_scale: Option<RewardScale>,
}

/// `reward` is either an `S x A` matrix or an `S x A x S` tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RewardFile {
    Matrix(Vec<Vec<f64>>),
    Tensor(Vec<Vec<Vec<f64>>>),
}

fn tensor_from_nested(nested: &[Vec<Vec<f64>>], dims: (usize, usize, usize), what: &str) -> Result<Array3<f64>> {
    let mut flat = Vec::with_capacity(dims.0 * dims.1 * dims.2);
    if nested.len() != dims.0 {
        return Err(Error::Dimension(format!("{what}: expected {} outer entries, found {}", dims.0, nested.len())));
    }
    for (s, plane) in nested.iter().enumerate() {
        if plane.len() != dims.1 {
            return Err(Error::Dimension(format!("{what}[{s}]: expected {} entries", dims.1)));
        }
        for (a, row) in plane.iter().enumerate() {
            if row.len() != dims.2 {
                return Err(Error::Dimension(format!("{what}[{s}][{a}]: expected {} entries", dims.2)));
            }
            flat.extend_from_slice(row);
        }
    }
    Ok(Array3::from_shape_vec(dims, flat).expect("shape checked"))
}

impl TryFrom<MdpFile> for TabularMdp {
    type Error = Error;

    fn try_from(file: MdpFile) -> Result<Self> {
        let (ns, na) = (file.num_states, file.num_actions);
        let transition = tensor_from_nested(&file.transition, (ns, na, ns), "transition")?;
        let reward = match &file.reward {
            RewardFile::Matrix(m) => {
                if m.len() != ns || m.iter().any(|r| r.len() != na) {
                    return Err(Error::Dimension(format!("reward must be {ns}x{na}")));
                }
                Reward::StateAction(Array2::from_shape_vec((ns, na), m.concat()).expect("shape checked"))
            }
            RewardFile::Tensor(t) => Reward::Transition(tensor_from_nested(t, (ns, na, ns), "reward")?),
        };
        let mdp = TabularMdp::new(transition, reward, file.discount)?;
        Ok(match file.reward_scale {
            Some(scale) => mdp.with_reward_scale(scale),
            None => mdp,
        })
    }
}

impl From<TabularMdp> for MdpFile {
    fn from(mdp: TabularMdp) -> Self {
        let (ns, na) = (mdp.num_states(), mdp.num_actions());
        let nested3 = |t: &Array3<f64>| -> Vec<Vec<Vec<f64>>> {
            (0..ns).map(|s| (0..na).map(|a| t.slice(s![s, a, ..]).to_vec()).collect()).collect()
        };
        let reward = match &mdp.reward {
            Reward::StateAction(r) => RewardFile::Matrix(r.rows().into_iter().map(|x| x.to_vec()).collect()),
            Reward::Transition(r) => RewardFile::Tensor(nested3(r)),
        };
        MdpFile {
            num_states: ns,
            num_actions: na,
            transition: nested3(&mdp.transition),
            reward,
            discount: mdp.discount,
            reward_scale: mdp.reward_scale,
        }
    }
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub fn random_mdp(ns: usize, na: usize, gamma: f64, seed: u64) -> TabularMdp {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Array3::<f64>::zeros((ns, na, ns));
        for s in 0..ns {
            for a in 0..na {
                let w: Vec<f64> = (0..ns).map(|_| rng.gen::<f64>() + 1e-3).collect();
                let total: f64 = w.iter().sum();
                for (t, x) in w.iter().enumerate() {
                    p[[s, a, t]] = x / total;
                }
                let top = (0..ns).map(|t| p[[s, a, t]]).sum::<f64>();
                p[[s, a, 0]] += 1.0 - top;
            }
        }
        let r = Array2::from_shape_fn((ns, na), |_| rng.gen::<f64>());
        TabularMdp::new(p, Reward::StateAction(r), gamma).unwrap()
    }
}

#[cfg(test)]
mod tests {
    use super::test_support::random_mdp;
    use super::*;
    use proptest::prelude::*;

    fn constant_reward(mdp: &TabularMdp, c: f64) -> TabularMdp {
        let r = Array2::from_elem((mdp.num_states(), mdp.num_actions()), c);
        TabularMdp::new(mdp.transition().clone(), Reward::StateAction(r), mdp.discount()).unwrap()
    }

    fn iterate_policy(mdp: &TabularMdp, policy: &Policy, steps: usize) -> ValueVector {
        let mut v = ValueVector::zeros(mdp.num_states());
        for _ in 0..steps {
            let q = q_from_v(mdp, &v).unwrap();
            v = v_from_q(policy, &q).unwrap();
        }
        v
    }

    #[test]
    fn zero_reward_gives_zero_value() {
        let mdp = constant_reward(&random_mdp(4, 2, 0.9, 1), 0.0);
        let v = evaluate_policy_exact(&mdp, &Policy::uniform(4, 2)).unwrap();
        assert!(v.0.iter().all(|x| x.abs() < 1e-14));
    }

    #[test]
    fn unit_reward_gives_geometric_sum() {
        let mdp = constant_reward(&random_mdp(4, 3, 0.9, 2), 1.0);
        let v = evaluate_policy_exact(&mdp, &Policy::Deterministic(vec![2, 0, 1, 1])).unwrap();
        assert!(v.0.iter().all(|x| (x - 10.0).abs() < 1e-10));
    }

    #[test]
    fn exact_evaluation_matches_iteration() {
        let mdp = random_mdp(4, 2, 0.9, 3);
        let policy = Policy::Stochastic(vec![vec![0.3, 0.7], vec![1.0, 0.0], vec![0.5, 0.5], vec![0.1, 0.9]]);
        let exact = evaluate_policy_exact(&mdp, &policy).unwrap();
        let iterated = iterate_policy(&mdp, &policy, 2000);
        let bound = 0.9f64.powi(2000) / 0.1 + 1e-9;
        assert!(exact.sup_distance(&iterated) <= bound);
        let q = q_from_v(&mdp, &exact).unwrap();
        let back = v_from_q(&policy, &q).unwrap();
        assert!(back.sup_distance(&exact) <= 1e-12);
        assert!(exact.0.iter().all(|&x| (0.0..=10.0).contains(&x)));
    }

    #[test]
    fn greedy_ties_pick_lowest_index() {
        let q = QTable(Array2::from_shape_vec((3, 2), vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap());
        assert_eq!(greedy_policy(&q), Policy::Deterministic(vec![0, 0, 0]));
        let tied = QTable(Array2::from_elem((3, 2), 0.25));
        assert_eq!(greedy_policy(&tied), Policy::Deterministic(vec![0, 0, 0]));
    }

    #[test]
    fn q_from_zero_value_is_reward() {
        let mdp = random_mdp(3, 2, 0.8, 4);
        let q = q_from_v(&mdp, &ValueVector::zeros(3)).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                assert_eq!(q.get(s, a), mdp.expected_reward(s, a));
            }
        }
        let det = Policy::Deterministic(vec![1, 0, 1]);
        let v = v_from_q(&det, &q).unwrap();
        assert_eq!(v.0[0], q.get(0, 1));
        assert_eq!(v.0[1], q.get(1, 0));
    }

    #[test]
    fn deterministic_policies_reach_the_optimum() {
        for seed in 0..20 {
            let mdp = random_mdp(3, 2, 0.9, 100 + seed);
            let v_star = value_iteration(&mdp, 1e-12, 100_000).unwrap().state_max();
            let mut best = ValueVector(Array1::from_elem(3, f64::NEG_INFINITY));
            for policy in Policy::enumerate_deterministic(3, 2) {
                let v = evaluate_policy_exact(&mdp, &policy).unwrap();
                best = ValueVector(ndarray::Zip::from(&best.0).and(&v.0).map_collect(|a, b| a.max(*b)));
            }
            assert!(best.sup_distance(&v_star) < 1e-8, "seed {seed}");
        }
    }

    #[test]
    fn rejects_malformed_models() {
        let p = Array3::from_elem((2, 1, 2), 0.5);
        let r = Array2::from_elem((2, 1), 1.5);
        assert!(matches!(TabularMdp::new(p.clone(), Reward::StateAction(r), 0.9), Err(Error::InvalidReward(_))));
        let r = Array2::from_elem((2, 1), 0.5);
        assert!(matches!(
            TabularMdp::new(p.clone(), Reward::StateAction(r.clone()), 1.0),
            Err(Error::InvalidDiscount(_))
        ));
        let mut bad = p.clone();
        bad[[0, 0, 0]] = 0.6;
        assert!(matches!(
            TabularMdp::new(bad, Reward::StateAction(r.clone()), 0.9),
            Err(Error::InvalidDistribution(_))
        ));
        let mdp = TabularMdp::new(p, Reward::StateAction(r), 0.9).unwrap();
        assert!(evaluate_policy_exact(&mdp, &Policy::Deterministic(vec![0])).is_err());
        assert!(evaluate_policy_exact(&mdp, &Policy::Deterministic(vec![0, 1])).is_err());
        assert!(q_from_v(&mdp, &ValueVector::zeros(3)).is_err());
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(Policy::enumerate_deterministic(3, 2).count(), 8);
        assert_eq!(Policy::enumerate_deterministic(2, 3).count(), 9);
    }

    #[test]
    fn json_accepts_both_reward_layouts() {
        let text = r#"{"num_states":2,"num_actions":1,
            "transition":[[[0.1,0.9]],[[1.0,0.0]]],
            "reward":[[0.5],[0.25]],"discount":0.9}"#;
        let mdp = TabularMdp::from_json_str(text).unwrap();
        assert!(matches!(mdp.reward(), Reward::StateAction(_)));
        let text = r#"{"num_states":2,"num_actions":1,
            "transition":[[[0.1,0.9]],[[1.0,0.0]]],
            "reward":[[[1.0,0.0]],[[0.0,0.0]]],"discount":0.9}"#;
        let mdp = TabularMdp::from_json_str(text).unwrap();
        assert!((mdp.expected_reward(0, 0) - 0.1).abs() < 1e-15);
        let unknown = r#"{"num_states":1,"num_actions":1,"transition":[[[1.0]]],
            "reward":[[0.0]],"discount":0.5,"extra":1}"#;
        assert!(TabularMdp::from_json_str(unknown).is_err());
    }

    proptest! {
        #[test]
        fn json_round_trip_is_value_exact(seed in 0u64..1000, gamma in 0.0f64..0.999) {
            let base = random_mdp(3, 2, 0.5, seed);
            let mdp = TabularMdp::new(base.transition().clone(), base.reward().clone(), gamma).unwrap();
            let back = TabularMdp::from_json_str(&mdp.to_json_string().unwrap()).unwrap();
            prop_assert_eq!(back, mdp);
        }

        #[test]
        fn greedy_is_invariant_under_affine_maps(
            entries in proptest::collection::vec(-5.0f64..5.0, 12),
            shift in -3.0f64..3.0,
            scale in 0.01f64..10.0,
        ) {
            let q = QTable(Array2::from_shape_vec((4, 3), entries).unwrap());
            let moved = QTable(q.0.mapv(|x| x * scale + shift));
            // rounding can merge near-ties; only compare rows with a clear winner
            let base = greedy_policy(&q);
            let mapped = greedy_policy(&moved);
            if let (Policy::Deterministic(b), Policy::Deterministic(m)) = (base, mapped) {
                for s in 0..4 {
                    let row = q.0.row(s);
                    let mut sorted: Vec<f64> = row.to_vec();
                    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
                    if sorted[0] - sorted[1] > 1e-9 {
                        prop_assert_eq!(b[s], m[s]);
                    }
                }
            }
        }
    }
}
