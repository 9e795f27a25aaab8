//! Exact finite-horizon verification of successor features and the GPI
//! transfer bound.
//!
//! Timesteps are 0-based here: `t = 0` is the first decision and
//! `t = horizon - 1` the last, where `ψ = φ`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PadError, Result};
use crate::persrm::PreferenceWeights;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Transitions {
    /// `next[s * n_actions + a]`.
    Deterministic(Vec<usize>),
    /// `probs[(s * n_actions + a) * n_states + s']`.
    Stochastic(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMDP {
    n_states: usize,
    n_actions: usize,
    dims: usize,
    horizon: usize,
    transitions: Transitions,
    /// `phi[(s * n_actions + a) * dims + j]`.
    features: Vec<f64>,
}

impl TabularMDP {
    pub fn new(
        n_states: usize,
        n_actions: usize,
        dims: usize,
        horizon: usize,
        transitions: Transitions,
        features: Vec<f64>,
    ) -> Result<Self> {
        if n_states == 0 || n_actions == 0 || dims == 0 {
            return Err(PadError::BadSpec("states, actions and dims must be >= 1".into()));
        }
        if horizon == 0 {
            return Err(PadError::BadSpec("horizon must be >= 1".into()));
        }
        let sa = n_states * n_actions;
        match &transitions {
            Transitions::Deterministic(next) => {
                if next.len() != sa || next.iter().any(|&s| s >= n_states) {
                    return Err(PadError::BadSpec("deterministic transitions out of range".into()));
                }
            }
            Transitions::Stochastic(p) => {
                if p.len() != sa * n_states {
                    return Err(PadError::BadSpec("transition table has wrong size".into()));
                }
                for row in p.chunks(n_states) {
                    let total: f64 = row.iter().sum();
                    if row.iter().any(|&x| !(0.0..=1.0).contains(&x)) || (total - 1.0).abs() > 1e-9 {
                        return Err(PadError::BadSpec("transition rows must be distributions".into()));
                    }
                }
            }
        }
        if features.len() != sa * dims || features.iter().any(|x| !x.is_finite()) {
            return Err(PadError::BadSpec(
                "feature table has wrong size or non-finite entries".into(),
            ));
        }
        Ok(Self {
            n_states,
            n_actions,
            dims,
            horizon,
            transitions,
            features,
        })
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn transitions(&self) -> &Transitions {
        &self.transitions
    }

    pub fn phi(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.dims;
        &self.features[i..i + self.dims]
    }

    /// `(s', P(s'|s,a))` with nonzero probability.
    pub fn successors(&self, s: usize, a: usize) -> Vec<(usize, f64)> {
        match &self.transitions {
            Transitions::Deterministic(next) => vec![(next[s * self.n_actions + a], 1.0)],
            Transitions::Stochastic(p) => {
                let i = (s * self.n_actions + a) * self.n_states;
                p[i..i + self.n_states]
                    .iter()
                    .enumerate()
                    .filter(|(_, &q)| q > 0.0)
                    .map(|(s2, &q)| (s2, q))
                    .collect()
            }
        }
    }

    /// `φ_max = max ‖φ(s,a)‖₂`.
    pub fn phi_max(&self) -> f64 {
        self.features
            .chunks(self.dims)
            .map(|f| f.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    /// Same MDP with every feature multiplied by `c`.
    pub fn scale_features(&self, c: f64) -> Self {
        let mut m = self.clone();
        m.features.iter_mut().for_each(|x| *x *= c);
        m
    }

    fn reward(&self, w: &PreferenceWeights, s: usize, a: usize) -> f64 {
        w.dot(self.phi(s, a))
    }
}

/// Deterministic non-stationary policy, `actions[t][s]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyTable {
    pub actions: Vec<Vec<usize>>,
}

impl PolicyTable {
    pub fn constant(mdp: &TabularMDP, action: usize) -> Self {
        Self {
            actions: vec![vec![action; mdp.n_states]; mdp.horizon],
        }
    }

    pub fn action(&self, t: usize, s: usize) -> usize {
        self.actions[t][s]
    }

    fn validate(&self, mdp: &TabularMDP) -> Result<()> {
        if self.actions.len() != mdp.horizon
            || self
                .actions
                .iter()
                .any(|row| row.len() != mdp.n_states || row.iter().any(|&a| a >= mdp.n_actions))
        {
            return Err(PadError::ShapeMismatch("policy does not match the MDP".into()));
        }
        Ok(())
    }
}

/// `Q[t][s][a]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QTable {
    pub values: Vec<Vec<Vec<f64>>>,
}

impl QTable {
    pub fn get(&self, t: usize, s: usize, a: usize) -> f64 {
        self.values[t][s][a]
    }

    fn shape(&self) -> (usize, usize, usize) {
        let t = self.values.len();
        let s = self.values.first().map_or(0, Vec::len);
        let a = self.values.first().and_then(|r| r.first()).map_or(0, Vec::len);
        (t, s, a)
    }

    pub fn max_abs_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .flatten()
            .flatten()
            .zip(other.values.iter().flatten().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Greedy policy; ties → lowest action.
    pub fn greedy_policy(&self) -> PolicyTable {
        gpi_policy(std::slice::from_ref(self)).expect("single table is nonempty")
    }
}

/// `ψ[t][s][a]` as a flat `dims` vector per entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SFTable {
    dims: usize,
    pub values: Vec<Vec<Vec<Vec<f64>>>>,
}

impl SFTable {
    pub fn get(&self, t: usize, s: usize, a: usize) -> &[f64] {
        &self.values[t][s][a]
    }

    pub fn dims(&self) -> usize {
        self.dims
    }
}

fn expected_next<F: Fn(usize) -> f64>(mdp: &TabularMDP, s: usize, a: usize, value: F) -> f64 {
    mdp.successors(s, a).into_iter().map(|(s2, p)| p * value(s2)).sum()
}

/// Backward induction `ψ_t(s,a) = φ(s,a) + E_{s'} ψ_{t+1}(s', π(s', t+1))`.
pub fn successor_features(mdp: &TabularMDP, pi: &PolicyTable) -> Result<SFTable> {
    pi.validate(mdp)?;
    let (h, ns, na, d) = (mdp.horizon, mdp.n_states, mdp.n_actions, mdp.dims);
    let mut values = vec![vec![vec![vec![0.0; d]; na]; ns]; h];
    for t in (0..h).rev() {
        for s in 0..ns {
            for a in 0..na {
                let mut psi = mdp.phi(s, a).to_vec();
                if t + 1 < h {
                    for (s2, p) in mdp.successors(s, a) {
                        let next = &values[t + 1][s2][pi.action(t + 1, s2)];
                        for j in 0..d {
                            psi[j] += p * next[j];
                        }
                    }
                }
                values[t][s][a] = psi;
            }
        }
    }
    Ok(SFTable { dims: d, values })
}

/// Largest violation of the successor-feature Bellman equation.
pub fn sf_bellman_residual(mdp: &TabularMDP, pi: &PolicyTable, sf: &SFTable) -> f64 {
    let mut worst: f64 = 0.0;
    for t in 0..mdp.horizon {
        for s in 0..mdp.n_states {
            for a in 0..mdp.n_actions {
                for j in 0..mdp.dims {
                    let mut rhs = mdp.phi(s, a)[j];
                    if t + 1 < mdp.horizon {
                        rhs += expected_next(mdp, s, a, |s2| sf.get(t + 1, s2, pi.action(t + 1, s2))[j]);
                    }
                    worst = worst.max((sf.get(t, s, a)[j] - rhs).abs());
                }
            }
        }
    }
    worst
}

/// `Q = wᵀ ψ` pointwise.
pub fn q_from_sf(sf: &SFTable, w: &PreferenceWeights) -> Result<QTable> {
    if w.len() != sf.dims {
        return Err(PadError::DimMismatch {
            expected: sf.dims,
            got: w.len(),
        });
    }
    Ok(QTable {
        values: sf
            .values
            .iter()
            .map(|by_s| {
                by_s.iter()
                    .map(|by_a| by_a.iter().map(|psi| w.dot(psi)).collect())
                    .collect()
            })
            .collect(),
    })
}

/// Scalar policy evaluation under reward `wᵀφ`.
pub fn evaluate_policy(mdp: &TabularMDP, pi: &PolicyTable, w: &PreferenceWeights) -> Result<QTable> {
    pi.validate(mdp)?;
    check_dims(mdp, w)?;
    let (h, ns, na) = (mdp.horizon, mdp.n_states, mdp.n_actions);
    let mut q = vec![vec![vec![0.0; na]; ns]; h];
    for t in (0..h).rev() {
        for s in 0..ns {
            for a in 0..na {
                let future = if t + 1 < h {
                    expected_next(mdp, s, a, |s2| q[t + 1][s2][pi.action(t + 1, s2)])
                } else {
                    0.0
                };
                q[t][s][a] = mdp.reward(w, s, a) + future;
            }
        }
    }
    Ok(QTable { values: q })
}

fn check_dims(mdp: &TabularMDP, w: &PreferenceWeights) -> Result<()> {
    if w.len() != mdp.dims {
        return Err(PadError::DimMismatch {
            expected: mdp.dims,
            got: w.len(),
        });
    }
    Ok(())
}

/// Hard-max backward induction under reward `wᵀφ`.
pub fn optimal_q(mdp: &TabularMDP, w: &PreferenceWeights) -> Result<QTable> {
    check_dims(mdp, w)?;
    let (h, ns, na) = (mdp.horizon, mdp.n_states, mdp.n_actions);
    let mut q = vec![vec![vec![0.0; na]; ns]; h];
    for t in (0..h).rev() {
        for s in 0..ns {
            for a in 0..na {
                let future = if t + 1 < h {
                    expected_next(mdp, s, a, |s2| {
                        q[t + 1][s2].iter().copied().fold(f64::NEG_INFINITY, f64::max)
                    })
                } else {
                    0.0
                };
                q[t][s][a] = mdp.reward(w, s, a) + future;
            }
        }
    }
    Ok(QTable { values: q })
}

/// `π(s, t) ∈ argmax_a max_i Q_i(t, s, a)`; ties → lowest action.
pub fn gpi_policy(q_list: &[QTable]) -> Result<PolicyTable> {
    let first = q_list
        .first()
        .ok_or_else(|| PadError::ShapeMismatch("no Q tables given".into()))?;
    let shape = first.shape();
    if q_list.iter().any(|q| q.shape() != shape) {
        return Err(PadError::ShapeMismatch("Q tables differ in shape".into()));
    }
    let (h, ns, na) = shape;
    let actions = (0..h)
        .map(|t| {
            (0..ns)
                .map(|s| {
                    let mut best = (0, f64::NEG_INFINITY);
                    for a in 0..na {
                        let v = q_list.iter().map(|q| q.get(t, s, a)).fold(f64::NEG_INFINITY, f64::max);
                        if v > best.1 {
                            best = (a, v);
                        }
                    }
                    best.0
                })
                .collect()
        })
        .collect();
    Ok(PolicyTable { actions })
}

/// Outcome of comparing the GPI policy against the optimum for a new `w`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub seed: Option<u64>,
    /// `max_{s,a} Q*_{n+1}(s,a) − Q^{GPI}_{n+1}(s,a)` at the first step.
    pub max_gap: f64,
    pub phi_max: f64,
    pub min_distance: f64,
    /// `T · φ_max · min_j ‖w_{n+1} − w_j‖`.
    pub bound_factor1: f64,
    /// Twice the above: the classical GPI transfer bound.
    pub bound_factor2: f64,
    pub holds_factor1: bool,
    pub holds_factor2: bool,
}

/// Slack for floating-point comparisons against the bounds.
pub const BOUND_TOLERANCE: f64 = 1e-9;

fn distance(a: &PreferenceWeights, b: &PreferenceWeights) -> f64 {
    a.0.iter().zip(&b.0).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Solves every training preference, transfers each optimal policy to
/// `test_w` through its successor features, acts by GPI over the transferred
/// values and measures the gap to the optimum for `test_w`.
pub fn theorem1_check(
    mdp: &TabularMDP,
    train_ws: &[PreferenceWeights],
    test_w: &PreferenceWeights,
) -> Result<BoundReport> {
    if train_ws.is_empty() {
        return Err(PadError::BadSpec("at least one training preference is required".into()));
    }
    check_dims(mdp, test_w)?;
    let mut transferred = Vec::with_capacity(train_ws.len());
    for w in train_ws {
        let pi_j = optimal_q(mdp, w)?.greedy_policy();
        let sf = successor_features(mdp, &pi_j)?;
        transferred.push(q_from_sf(&sf, test_w)?);
    }
    let gpi = gpi_policy(&transferred)?;
    let q_gpi = evaluate_policy(mdp, &gpi, test_w)?;
    let q_star = optimal_q(mdp, test_w)?;
    let max_gap = (0..mdp.n_states)
        .flat_map(|s| (0..mdp.n_actions).map(move |a| (s, a)))
        .map(|(s, a)| q_star.get(0, s, a) - q_gpi.get(0, s, a))
        .fold(f64::NEG_INFINITY, f64::max);
    let phi_max = mdp.phi_max();
    let min_distance = train_ws
        .iter()
        .map(|w| distance(w, test_w))
        .fold(f64::INFINITY, f64::min);
    let bound_factor1 = mdp.horizon as f64 * phi_max * min_distance;
    let bound_factor2 = 2.0 * bound_factor1;
    Ok(BoundReport {
        seed: None,
        max_gap,
        phi_max,
        min_distance,
        bound_factor1,
        bound_factor2,
        holds_factor1: max_gap <= bound_factor1 + BOUND_TOLERANCE,
        holds_factor2: max_gap <= bound_factor2 + BOUND_TOLERANCE,
    })
}

/// A seeded random verification instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub seed: u64,
    pub mdp: TabularMDP,
    pub train_ws: Vec<PreferenceWeights>,
    pub test_w: PreferenceWeights,
}

/// Uniform `φ ∈ [−1, 1]`, uniform deterministic transitions, `T ∈ [2, 6]`,
/// `d ∈ [2, 4]`, 2–5 states, 2–4 actions, 1–3 training preferences.
pub fn random_instance(seed: u64) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = rng.gen_range(2..=5);
    let n_actions = rng.gen_range(2..=4);
    let dims = rng.gen_range(2..=4);
    let horizon = rng.gen_range(2..=6);
    let next = (0..n_states * n_actions).map(|_| rng.gen_range(0..n_states)).collect();
    let features = (0..n_states * n_actions * dims)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    let mdp = TabularMDP::new(
        n_states,
        n_actions,
        dims,
        horizon,
        Transitions::Deterministic(next),
        features,
    )
    .expect("generated instance is valid");
    let random_w = |rng: &mut ChaCha8Rng| PreferenceWeights((0..dims).map(|_| rng.gen_range(-1.0..=1.0)).collect());
    let n_train = rng.gen_range(1..=3);
    let train_ws = (0..n_train).map(|_| random_w(&mut rng)).collect();
    let test_w = random_w(&mut rng);
    Instance {
        seed,
        mdp,
        train_ws,
        test_w,
    }
}

/// Same shape as [`random_instance`] but with random stochastic transitions.
pub fn random_stochastic_mdp(seed: u64) -> TabularMDP {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_states = rng.gen_range(2..=4);
    let n_actions = rng.gen_range(2..=3);
    let dims = rng.gen_range(2..=4);
    let horizon = rng.gen_range(2..=6);
    let mut probs = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let raw: Vec<f64> = (0..n_states).map(|_| rng.gen_range(0.05..1.0)).collect();
        let z: f64 = raw.iter().sum();
        probs.extend(raw.iter().map(|x| x / z));
    }
    let features = (0..n_states * n_actions * dims)
        .map(|_| rng.gen_range(-1.0..=1.0))
        .collect();
    TabularMDP::new(
        n_states,
        n_actions,
        dims,
        horizon,
        Transitions::Stochastic(probs),
        features,
    )
    .expect("generated instance is valid")
}

pub fn random_policy(mdp: &TabularMDP, rng: &mut ChaCha8Rng) -> PolicyTable {
    PolicyTable {
        actions: (0..mdp.horizon)
            .map(|_| (0..mdp.n_states).map(|_| rng.gen_range(0..mdp.n_actions)).collect())
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain(horizon: usize, c: &[f64]) -> TabularMDP {
        // one state, one action, self loop
        TabularMDP::new(1, 1, c.len(), horizon, Transitions::Deterministic(vec![0]), c.to_vec()).unwrap()
    }

    #[test]
    fn boundary_and_constant_chain() {
        let m = chain(5, &[0.5, -2.0]);
        let pi = PolicyTable::constant(&m, 0);
        let sf = successor_features(&m, &pi).unwrap();
        assert_eq!(sf.get(4, 0, 0), m.phi(0, 0));
        for t in 0..5 {
            let steps = (5 - t) as f64;
            assert_eq!(sf.get(t, 0, 0), &[0.5 * steps, -2.0 * steps]);
        }
    }

    #[test]
    fn q_from_sf_linearity_and_zero() {
        let inst = random_instance(3);
        let pi = PolicyTable::constant(&inst.mdp, 0);
        let sf = successor_features(&inst.mdp, &pi).unwrap();
        let d = inst.mdp.dims();
        let zero = q_from_sf(&sf, &PreferenceWeights::zeros(d)).unwrap();
        assert!(zero.values.iter().flatten().flatten().all(|&x| x == 0.0));
        let w1 = PreferenceWeights(vec![0.25; d]);
        let w2 = PreferenceWeights(vec![0.5; d]);
        let sum = PreferenceWeights(vec![0.75; d]);
        let q1 = q_from_sf(&sf, &w1).unwrap();
        let q2 = q_from_sf(&sf, &w2).unwrap();
        let q12 = q_from_sf(&sf, &sum).unwrap();
        for t in 0..inst.mdp.horizon() {
            for s in 0..inst.mdp.n_states() {
                for a in 0..inst.mdp.n_actions() {
                    assert!((q12.get(t, s, a) - q1.get(t, s, a) - q2.get(t, s, a)).abs() < 1e-12);
                }
            }
        }
        assert!(q_from_sf(&sf, &PreferenceWeights::zeros(d + 1)).is_err());
    }

    #[test]
    fn horizon_one_optimal_is_immediate_reward() {
        let m = TabularMDP::new(
            2,
            2,
            2,
            1,
            Transitions::Deterministic(vec![0, 1, 1, 0]),
            vec![1.0, 0.0, 0.0, 1.0, -1.0, 0.5, 0.2, 0.2],
        )
        .unwrap();
        let w = PreferenceWeights(vec![2.0, -1.0]);
        let q = optimal_q(&m, &w).unwrap();
        for s in 0..2 {
            for a in 0..2 {
                assert_eq!(q.get(0, s, a), w.dot(m.phi(s, a)));
            }
        }
    }

    #[test]
    fn single_action_optimal_equals_evaluation() {
        let m = TabularMDP::new(
            3,
            1,
            2,
            4,
            Transitions::Deterministic(vec![1, 2, 0]),
            vec![0.1, 0.2, -0.3, 0.4, 0.5, -0.6],
        )
        .unwrap();
        let w = PreferenceWeights(vec![1.0, 0.5]);
        let q_star = optimal_q(&m, &w).unwrap();
        let q_pi = evaluate_policy(&m, &PolicyTable::constant(&m, 0), &w).unwrap();
        assert_eq!(q_star, q_pi);
    }

    #[test]
    fn gpi_properties() {
        let inst = random_instance(17);
        let q1 = optimal_q(&inst.mdp, &inst.train_ws[0]).unwrap();
        let q2 = optimal_q(&inst.mdp, &inst.test_w).unwrap();
        assert_eq!(gpi_policy(std::slice::from_ref(&q1)).unwrap(), q1.greedy_policy());
        assert_eq!(gpi_policy(&[q1.clone(), q1.clone()]).unwrap(), q1.greedy_policy());
        assert_eq!(
            gpi_policy(&[q1.clone(), q2.clone()]).unwrap(),
            gpi_policy(&[q2, q1]).unwrap()
        );
        assert!(gpi_policy(&[]).is_err());
    }

    #[test]
    fn gpi_shape_mismatch() {
        let a = optimal_q(&random_instance(1).mdp, &random_instance(1).test_w).unwrap();
        let b = QTable {
            values: vec![vec![vec![0.0; 7]; 9]; 2],
        };
        assert!(matches!(gpi_policy(&[a, b]), Err(PadError::ShapeMismatch(_))));
    }

    #[test]
    fn gpi_ties_to_lowest_action() {
        let q = QTable {
            values: vec![vec![vec![1.0, 1.0, 0.5]]],
        };
        assert_eq!(q.greedy_policy().actions, vec![vec![0]]);
    }

    #[test]
    fn matching_preference_has_zero_gap() {
        let inst = random_instance(5);
        let r = theorem1_check(&inst.mdp, std::slice::from_ref(&inst.test_w), &inst.test_w).unwrap();
        assert_eq!(r.min_distance, 0.0);
        assert!(r.max_gap.abs() < 1e-12);
        assert!(r.holds_factor1 && r.holds_factor2);
    }

    #[test]
    fn report_scales_with_features() {
        let inst = random_instance(8);
        let r1 = theorem1_check(&inst.mdp, &inst.train_ws, &inst.test_w).unwrap();
        let r2 = theorem1_check(&inst.mdp.scale_features(3.0), &inst.train_ws, &inst.test_w).unwrap();
        assert!((r2.max_gap - 3.0 * r1.max_gap).abs() < 1e-9);
        assert!((r2.phi_max - 3.0 * r1.phi_max).abs() < 1e-12);
        assert!((r2.bound_factor1 - 3.0 * r1.bound_factor1).abs() < 1e-9);
        assert!((r2.bound_factor2 - 3.0 * r1.bound_factor2).abs() < 1e-9);
        assert_eq!(r1.holds_factor1, r2.holds_factor1);
    }

    #[test]
    fn invalid_tables_rejected() {
        assert!(TabularMDP::new(2, 1, 1, 1, Transitions::Deterministic(vec![0, 2]), vec![0.0, 0.0]).is_err());
        assert!(TabularMDP::new(1, 1, 1, 0, Transitions::Deterministic(vec![0]), vec![0.0]).is_err());
        assert!(TabularMDP::new(1, 1, 1, 1, Transitions::Stochastic(vec![0.5]), vec![0.0]).is_err());
        assert!(TabularMDP::new(1, 1, 1, 1, Transitions::Deterministic(vec![0]), vec![f64::NAN]).is_err());
        let m = chain(2, &[1.0]);
        let bad = PolicyTable {
            actions: vec![vec![1], vec![0]],
        };
        assert!(successor_features(&m, &bad).is_err());
        assert!(theorem1_check(&m, &[], &PreferenceWeights::zeros(1)).is_err());
    }
}
