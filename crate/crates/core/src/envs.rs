//! Environment builders: recycling robot, HPC cluster, FrozenLake-style grid,
//! TV perturbations and random families.

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Dirichlet, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::{Reward, RewardScale, TabularMdp};
use crate::operators::DomainFamily;
use crate::uncertainty::{tv_distance, Metric, Radius, UncertaintySpec};

fn check_probability(name: &str, x: f64) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {x} must lie in [0, 1]")))
    }
}

/// Maps raw outcome rewards into `[0, 1]`, recording the affine map.
fn rescaled(p: Array3<f64>, raw: Array3<f64>, discount: f64) -> Result<TabularMdp> {
    let scale = RewardScale::fit(raw.as_slice().unwrap());
    let unit = raw.mapv(|r| scale.to_unit(r).clamp(0.0, 1.0));
    Ok(TabularMdp::new(p, Reward::Transition(unit), discount)?.with_reward_scale(scale))
}

fn default_discount() -> f64 {
    0.95
}

pub mod robot {
    pub const LOW: usize = 0;
    pub const HIGH: usize = 1;
    pub const DEPLETED: usize = 2;
    pub const SEARCH: usize = 0;
    pub const WAIT: usize = 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RobotParams {
    /// Probability a search at low battery finds a can without depleting.
    pub alpha: f64,
    /// Same at high battery.
    pub beta: f64,
    #[serde(default = "RobotParams::default_found")]
    pub found_reward: f64,
    #[serde(default = "RobotParams::default_wait")]
    pub wait_reward: f64,
    #[serde(default = "RobotParams::default_penalty")]
    pub depletion_penalty: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

impl RobotParams {
    fn default_found() -> f64 {
        10.0
    }

    fn default_wait() -> f64 {
        1.0
    }

    fn default_penalty() -> f64 {
        -10.0
    }

    pub fn new(alpha: f64, beta: f64) -> Self {
        RobotParams {
            alpha,
            beta,
            found_reward: Self::default_found(),
            wait_reward: Self::default_wait(),
            depletion_penalty: Self::default_penalty(),
            discount: default_discount(),
        }
    }
}

/// Recycling robot with states (low, high, depleted) and actions (search,
/// wait). A search at a battery level succeeds with probability alpha (low) or
/// beta (high), keeping the level and earning the found reward; otherwise the
/// battery depletes with a penalty. Waiting keeps the level. Depleted is
/// absorbing with raw reward 0.
pub fn build_robot(params: &RobotParams) -> Result<TabularMdp> {
    use robot::*;
    check_probability("alpha", params.alpha)?;
    check_probability("beta", params.beta)?;
    let mut p = Array3::zeros((3, 2, 3));
    let mut raw = Array3::zeros((3, 2, 3));
    for (level, success) in [(LOW, params.alpha), (HIGH, params.beta)] {
        p[[level, SEARCH, level]] = success;
        p[[level, SEARCH, DEPLETED]] = 1.0 - success;
        for next in 0..3 {
            raw[[level, SEARCH, next]] = if next == DEPLETED { params.depletion_penalty } else { params.found_reward };
            raw[[level, WAIT, next]] = params.wait_reward;
        }
        p[[level, WAIT, level]] = 1.0;
    }
    p[[DEPLETED, SEARCH, DEPLETED]] = 1.0;
    p[[DEPLETED, WAIT, DEPLETED]] = 1.0;
    rescaled(p, raw, params.discount)
}

pub mod hpc {
    pub const NORMAL: usize = 0;
    pub const OVERLOADED: usize = 1;
    pub const FULL: usize = 2;
    pub const ALLOCATE: usize = 0;
    pub const ENQUEUE: usize = 1;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HpcParams {
    /// Probability that allocating in the normal state overloads the cluster.
    pub p: f64,
    /// Probability that allocating while overloaded fills the cluster.
    pub q: f64,
    #[serde(default = "HpcParams::default_normal")]
    pub allocate_normal_reward: f64,
    #[serde(default = "HpcParams::default_overloaded")]
    pub allocate_overloaded_reward: f64,
    #[serde(default = "HpcParams::default_penalty")]
    pub overflow_penalty: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

impl HpcParams {
    fn default_normal() -> f64 {
        5.0
    }

    fn default_overloaded() -> f64 {
        3.0
    }

    fn default_penalty() -> f64 {
        -10.0
    }

    pub fn new(p: f64, q: f64) -> Self {
        HpcParams {
            p,
            q,
            allocate_normal_reward: Self::default_normal(),
            allocate_overloaded_reward: Self::default_overloaded(),
            overflow_penalty: Self::default_penalty(),
            discount: default_discount(),
        }
    }
}

/// HPC cluster with states (normal, overloaded, full) and actions (allocate,
/// enqueue). Enqueueing holds the state with no reward; a full cluster is
/// absorbing and earns nothing.
pub fn build_hpc(params: &HpcParams) -> Result<TabularMdp> {
    use hpc::*;
    check_probability("p", params.p)?;
    check_probability("q", params.q)?;
    let mut p = Array3::zeros((3, 2, 3));
    let mut raw = Array3::zeros((3, 2, 3));
    p[[NORMAL, ALLOCATE, NORMAL]] = 1.0 - params.p;
    p[[NORMAL, ALLOCATE, OVERLOADED]] = params.p;
    p[[OVERLOADED, ALLOCATE, OVERLOADED]] = 1.0 - params.q;
    p[[OVERLOADED, ALLOCATE, FULL]] = params.q;
    for next in 0..3 {
        raw[[NORMAL, ALLOCATE, next]] = params.allocate_normal_reward;
        raw[[OVERLOADED, ALLOCATE, next]] =
            if next == FULL { params.overflow_penalty } else { params.allocate_overloaded_reward };
    }
    p[[NORMAL, ENQUEUE, NORMAL]] = 1.0;
    p[[OVERLOADED, ENQUEUE, OVERLOADED]] = 1.0;
    p[[FULL, ALLOCATE, FULL]] = 1.0;
    p[[FULL, ENQUEUE, FULL]] = 1.0;
    rescaled(p, raw, params.discount)
}

pub mod grid {
    pub const LEFT: usize = 0;
    pub const DOWN: usize = 1;
    pub const RIGHT: usize = 2;
    pub const UP: usize = 3;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridWorldParams {
    /// Rows of `S` (start), `F` (frozen), `H` (hole) and `G` (goal).
    #[serde(default = "GridWorldParams::default_layout")]
    pub layout: Vec<String>,
    /// Probability of slipping to each perpendicular direction.
    #[serde(default = "GridWorldParams::default_slip")]
    pub slip: f64,
    #[serde(default = "default_discount")]
    pub discount: f64,
}

impl Default for GridWorldParams {
    fn default() -> Self {
        GridWorldParams { layout: Self::default_layout(), slip: Self::default_slip(), discount: default_discount() }
    }
}

impl GridWorldParams {
    fn default_layout() -> Vec<String> {
        ["SFFF", "FHFH", "FFFH", "HFFG"].iter().map(|s| s.to_string()).collect()
    }

    fn default_slip() -> f64 {
        1.0 / 3.0
    }

    pub fn start_state(&self) -> usize {
        self.layout.concat().find('S').unwrap_or(0)
    }
}

/// FrozenLake-style grid. Moves go in the intended direction or slip to one of
/// the two perpendicular directions; bumping a wall stays put. Entering the goal
/// pays 1, everything else 0; holes and the goal are absorbing.
pub fn build_gridworld(params: &GridWorldParams) -> Result<TabularMdp> {
    use grid::*;
    let rows = params.layout.len();
    let cols = params.layout.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 || params.layout.iter().any(|r| r.len() != cols) {
        return Err(Error::Config("grid layout must be a non-empty rectangle".into()));
    }
    let cells: Vec<u8> = params.layout.concat().into_bytes();
    if let Some(c) = cells.iter().find(|c| !b"SFHG".contains(c)) {
        return Err(Error::Config(format!("unknown grid cell {:?}", *c as char)));
    }
    if params.slip < 0.0 || 2.0 * params.slip > 1.0 {
        return Err(Error::Config(format!("slip {} must lie in [0, 1/2]", params.slip)));
    }
    let n = rows * cols;
    let step = |s: usize, dir: usize| -> usize {
        let (r, c) = (s / cols, s % cols);
        match dir {
            LEFT if c > 0 => s - 1,
            DOWN if r + 1 < rows => s + cols,
            RIGHT if c + 1 < cols => s + 1,
            UP if r > 0 => s - cols,
            _ => s,
        }
    };
    let mut p = Array3::zeros((n, 4, n));
    let mut reward = Array3::zeros((n, 4, n));
    for s in 0..n {
        for a in 0..4 {
            if matches!(cells[s], b'H' | b'G') {
                p[[s, a, s]] = 1.0;
                continue;
            }
            let moves = [(a, 1.0 - 2.0 * params.slip), ((a + 1) % 4, params.slip), ((a + 3) % 4, params.slip)];
            for (dir, prob) in moves {
                p[[s, a, step(s, dir)]] += prob;
            }
            for next in 0..n {
                if cells[next] == b'G' {
                    reward[[s, a, next]] = 1.0;
                }
            }
        }
    }
    Ok(TabularMdp::new(p, Reward::Transition(reward), params.discount)?
        .with_reward_scale(RewardScale { offset: 0.0, scale: 1.0 }))
}

/// A perturbed kernel with the TV distance achieved at every `(s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perturbation {
    pub mdp: TabularMdp,
    pub achieved: Array2<f64>,
}

/// Moves `min(distance, p_max)` mass from the row's largest entry (lowest index
/// on ties) to a uniformly chosen different state.
fn perturb_row(row: &mut [f64], distance: f64, rng: &mut ChaCha8Rng) {
    let n = row.len();
    if n < 2 || distance <= 0.0 {
        return;
    }
    let mut from = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[from] {
            from = i;
        }
    }
    let mut to = rng.gen_range(0..n - 1);
    if to >= from {
        to += 1;
    }
    let moved = distance.min(row[from]);
    row[from] -= moved;
    row[to] += moved;
}

/// Perturbs every row of `mdp` by total variation `distance` (or the most the
/// row's largest entry allows).
pub fn perturb_tv(mdp: &TabularMdp, distance: f64, seed: u64) -> Result<Perturbation> {
    check_probability("perturbation distance", distance)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    perturb_rows(mdp, |_, _| distance, &mut rng)
}

fn perturb_rows(
    mdp: &TabularMdp,
    mut distance: impl FnMut(usize, usize) -> f64,
    rng: &mut ChaCha8Rng,
) -> Result<Perturbation> {
    let (ns, na) = (mdp.num_states(), mdp.num_actions());
    let mut p = mdp.transition().clone();
    let mut achieved = Array2::zeros((ns, na));
    for s in 0..ns {
        for a in 0..na {
            let mut row = mdp.row(s, a).to_vec();
            perturb_row(&mut row, distance(s, a), rng);
            achieved[[s, a]] = tv_distance(&row, mdp.row(s, a));
            for (t, x) in row.into_iter().enumerate() {
                p[[s, a, t]] = x;
            }
        }
    }
    Ok(Perturbation { mdp: mdp.with_transition(p)?, achieved })
}

/// Random target (Dirichlet(1) rows, uniform rewards) with `k` sources, each row
/// perturbed by a TV distance drawn from `U[0, max_tv]`. Under TV the radius is
/// `max_tv`; for other metrics it is the largest realised distance, so the
/// family is valid by construction either way.
pub fn random_family(
    num_states: usize,
    num_actions: usize,
    num_sources: usize,
    discount: f64,
    seed: u64,
    max_tv: f64,
    metric: Metric,
) -> Result<DomainFamily> {
    check_probability("max_tv", max_tv)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dirichlet = Dirichlet::new(&vec![1.0; num_states.max(2)]).map_err(|e| Error::Config(e.to_string()))?;
    let mut p = Array3::zeros((num_states, num_actions, num_states));
    for s in 0..num_states {
        for a in 0..num_actions {
            if num_states == 1 {
                p[[s, a, 0]] = 1.0;
                continue;
            }
            let mut row: Vec<f64> = dirichlet.sample(&mut rng);
            let rest: f64 = row[1..].iter().sum();
            row[0] = (1.0 - rest).max(0.0);
            for (t, x) in row.into_iter().enumerate() {
                p[[s, a, t]] = x;
            }
        }
    }
    let reward = Array2::from_shape_fn((num_states, num_actions), |_| rng.gen::<f64>());
    let target = TabularMdp::new(p, Reward::StateAction(reward), discount)?;
    let mut sources = Vec::with_capacity(num_sources);
    for _ in 0..num_sources {
        let draws = Array2::from_shape_fn((num_states, num_actions), |_| rng.gen::<f64>() * max_tv);
        let perturbed = perturb_rows(&target, |s, a| draws[[s, a]], &mut rng)?;
        sources.push(perturbed.mdp);
    }
    let spec = match metric {
        Metric::TotalVariation => UncertaintySpec::tv(max_tv),
        other => {
            let radius = crate::operators::minimal_radius(&target, &sources, &other)?.max();
            UncertaintySpec::new(other, Radius::Uniform(radius))
        }
    };
    DomainFamily::new(target, sources, spec)
}

/// Source parameters drawn uniformly from `[lo, hi]`, two per source.
pub fn uniform_pairs(count: usize, lo: f64, hi: f64, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| (rng.gen_range(lo..=hi), rng.gen_range(lo..=hi))).collect()
}
