//! Finite MDPs with exact oracles: the optimal Bellman operator, value
//! iteration, stationary distributions of the chain induced by a fixed
//! learning policy, and total-variation mixing curves.
//!
//! All tables are stored flat and row-major: transitions in `(s, a, s')`
//! order, rewards and Q-values in `(s, a)` order.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::MdpError;

/// Row sums may be off by at most this much before renormalization refuses.
const ROW_SUM_TOL: f64 = 1e-9;
/// Power iteration stops when the L1 residual falls below this.
const POWER_TOL: f64 = 1e-12;
/// Iteration cap for value iteration and power iteration.
const ITER_CAP: usize = 1_000_000;
/// TV distances below this are treated as exactly mixed when fitting.
const TV_FLOOR: f64 = 1e-13;

/// On-disk MDP definition. `transition` is flattened in `(s, a, s')` order,
/// `reward` in `(s, a)` order. `features` (one vector per `(s, a)` pair,
/// same order) and `initial` are optional; absent features default to
/// one-hot over `(s, a)` and an absent initial distribution is uniform.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MdpFile {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub transition: Vec<f64>,
    pub reward: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub initial: Option<Vec<f64>>,
}

impl MdpFile {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, MdpError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| MdpError::Parse(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), MdpError> {
        let text = toml::to_string(self).map_err(|e| MdpError::Parse(e.to_string()))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// A validated finite MDP `(S, A, P, r, gamma)` together with the feature
/// map `phi : S x A -> R^d` used by the function approximator.
#[derive(Debug, Clone)]
pub struct MdpSpec {
    n_states: usize,
    n_actions: usize,
    /// P[s][a][s'], row-major.
    transition: Vec<f64>,
    /// r[s][a], row-major, each in [-1, 1].
    reward: Vec<f64>,
    gamma: f64,
    /// phi[s*n_actions + a], each with `||phi||_2 <= 1`.
    features: Vec<DVector<f64>>,
    feature_dim: usize,
    /// Set when user-supplied features had to be rescaled into the unit ball.
    features_rescaled: bool,
    /// Explicit initial state distribution (uniform unless the file set one).
    initial: Vec<f64>,
}

impl MdpSpec {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn n_pairs(&self) -> usize {
        self.n_states * self.n_actions
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn features_rescaled(&self) -> bool {
        self.features_rescaled
    }

    /// Flat `(s, a)` pair index.
    pub fn pair_index(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn transition_prob(&self, s: usize, a: usize, s_next: usize) -> f64 {
        self.transition[(s * self.n_actions + a) * self.n_states + s_next]
    }

    pub fn transition_row(&self, s: usize, a: usize) -> &[f64] {
        let base = (s * self.n_actions + a) * self.n_states;
        &self.transition[base..base + self.n_states]
    }

    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.reward[s * self.n_actions + a]
    }

    pub fn feature(&self, s: usize, a: usize) -> &DVector<f64> {
        &self.features[s * self.n_actions + a]
    }

    pub fn features(&self) -> &[DVector<f64>] {
        &self.features
    }

    pub fn initial_distribution(&self) -> &[f64] {
        &self.initial
    }

    /// Serializable form; features are emitted only when they differ from
    /// the one-hot default.
    pub fn to_file(&self) -> MdpFile {
        let one_hot = self.feature_dim == self.n_pairs()
            && self.features.iter().enumerate().all(|(i, phi)| {
                phi.iter()
                    .enumerate()
                    .all(|(j, &v)| if j == i { v == 1.0 } else { v == 0.0 })
            });
        MdpFile {
            n_states: self.n_states,
            n_actions: self.n_actions,
            gamma: self.gamma,
            transition: self.transition.clone(),
            reward: self.reward.clone(),
            features: if one_hot {
                None
            } else {
                Some(self.features.iter().map(|v| v.as_slice().to_vec()).collect())
            },
            initial: Some(self.initial.clone()),
        }
    }
}

/// Validates a raw MDP definition.
///
/// Transition rows off by at most `1e-9` are renormalized; anything worse is
/// rejected. Rewards outside `[-1, 1]` and discounts outside `(0, 1)` are
/// errors, not clipped. Out-of-ball feature vectors are rescaled (uniformly,
/// preserving geometry) and the rescaling is recorded on the spec.
pub fn build_mdp(raw: MdpFile) -> Result<MdpSpec, MdpError> {
    let (ns, na) = (raw.n_states, raw.n_actions);
    if ns == 0 || na == 0 {
        return Err(MdpError::ShapeMismatch("n_states and n_actions must be positive".into()));
    }
    if !(raw.gamma > 0.0 && raw.gamma < 1.0) {
        return Err(MdpError::BadDiscount(raw.gamma));
    }
    if raw.transition.len() != ns * na * ns {
        return Err(MdpError::ShapeMismatch(format!(
            "transition has {} entries, expected {}",
            raw.transition.len(),
            ns * na * ns
        )));
    }
    if raw.reward.len() != ns * na {
        return Err(MdpError::ShapeMismatch(format!(
            "reward has {} entries, expected {}",
            raw.reward.len(),
            ns * na
        )));
    }
    for s in 0..ns {
        for a in 0..na {
            let r = raw.reward[s * na + a];
            if !(-1.0..=1.0).contains(&r) || !r.is_finite() {
                return Err(MdpError::RewardOutOfRange { s, a, value: r });
            }
        }
    }

    let mut transition = raw.transition;
    for s in 0..ns {
        for a in 0..na {
            let base = (s * na + a) * ns;
            let row = &mut transition[base..base + ns];
            if let Some(&bad) = row.iter().find(|&&p| p < 0.0 || !p.is_finite()) {
                return Err(MdpError::NonStochasticRow {
                    s,
                    a,
                    detail: format!("entry {bad} is negative or non-finite"),
                });
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::NonStochasticRow {
                    s,
                    a,
                    detail: format!("row sums to {sum}"),
                });
            }
            if sum != 1.0 {
                for p in row.iter_mut() {
                    *p /= sum;
                }
            }
        }
    }

    let (features, feature_dim, features_rescaled) = match raw.features {
        None => {
            // One-hot over (s, a); already unit norm.
            let d = ns * na;
            let feats = (0..d)
                .map(|i| DVector::from_fn(d, |j, _| if j == i { 1.0 } else { 0.0 }))
                .collect();
            (feats, d, false)
        }
        Some(rows) => {
            if rows.len() != ns * na {
                return Err(MdpError::ShapeMismatch(format!(
                    "features has {} rows, expected {}",
                    rows.len(),
                    ns * na
                )));
            }
            let d = rows[0].len();
            if d == 0 || rows.iter().any(|r| r.len() != d) {
                return Err(MdpError::ShapeMismatch(
                    "feature rows must share a positive dimension".into(),
                ));
            }
            let mut feats: Vec<DVector<f64>> =
                rows.into_iter().map(DVector::from_vec).collect();
            let max_norm = feats.iter().map(|v| v.norm()).fold(0.0, f64::max);
            let rescaled = max_norm > 1.0 + 1e-12;
            if rescaled {
                for v in feats.iter_mut() {
                    *v /= max_norm;
                }
            }
            (feats, d, rescaled)
        }
    };

    let initial = match raw.initial {
        None => vec![1.0 / ns as f64; ns],
        Some(mut mu) => {
            if mu.len() != ns {
                return Err(MdpError::BadDistribution(format!(
                    "initial has {} entries, expected {ns}",
                    mu.len()
                )));
            }
            if mu.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                return Err(MdpError::BadDistribution("negative or non-finite mass".into()));
            }
            let sum: f64 = mu.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(MdpError::BadDistribution(format!("mass sums to {sum}")));
            }
            for p in mu.iter_mut() {
                *p /= sum;
            }
            mu
        }
    };

    Ok(MdpSpec {
        n_states: ns,
        n_actions: na,
        transition,
        reward: raw.reward,
        gamma: raw.gamma,
        features,
        feature_dim,
        features_rescaled,
        initial,
    })
}

/// Emits a seeded random MDP: exponential-weight transition rows mixed with
/// `smoothing` mass of the uniform distribution (strictly positive rows, so
/// any policy induces an irreducible aperiodic chain), rewards uniform in
/// `[-1, 1]`, one-hot default features.
pub fn gen_random_mdp(
    n_states: usize,
    n_actions: usize,
    gamma: f64,
    seed: u64,
    smoothing: f64,
) -> MdpFile {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut transition = Vec::with_capacity(n_states * n_actions * n_states);
    for _ in 0..n_states * n_actions {
        let mut row: Vec<f64> = (0..n_states)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        let sum: f64 = row.iter().sum();
        for p in row.iter_mut() {
            *p = (1.0 - smoothing) * (*p / sum) + smoothing / n_states as f64;
        }
        transition.extend_from_slice(&row);
    }
    let reward = (0..n_states * n_actions)
        .map(|_| 2.0 * rng.random::<f64>() - 1.0)
        .collect();
    MdpFile {
        n_states,
        n_actions,
        gamma,
        transition,
        reward,
        features: None,
        initial: None,
    }
}

/// Action-value table Q[s][a], row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct QTable {
    n_states: usize,
    n_actions: usize,
    values: Vec<f64>,
}

impl QTable {
    pub fn zeros(n_states: usize, n_actions: usize) -> Self {
        QTable { n_states, n_actions, values: vec![0.0; n_states * n_actions] }
    }

    pub fn from_values(n_states: usize, n_actions: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), n_states * n_actions, "Q table shape mismatch");
        QTable { n_states, n_actions, values }
    }

    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn get(&self, s: usize, a: usize) -> f64 {
        self.values[s * self.n_actions + a]
    }

    pub fn set(&mut self, s: usize, a: usize, v: f64) {
        self.values[s * self.n_actions + a] = v;
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// `max_a Q(s, a)`; ties go to the lowest action index everywhere in
    /// this crate.
    pub fn max_value(&self, s: usize) -> f64 {
        self.values[s * self.n_actions..(s + 1) * self.n_actions]
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Greedy action with lowest-index tie-breaking.
    pub fn greedy_action(&self, s: usize) -> usize {
        let row = &self.values[s * self.n_actions..(s + 1) * self.n_actions];
        let mut best = 0;
        for (a, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = a;
            }
        }
        best
    }

    pub fn sup_norm_diff(&self, other: &QTable) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Learning-policy description. Epsilon-greedy policies are evaluated
/// against a Q table frozen at construction so the induced chain stays
/// time-homogeneous.
#[derive(Debug, Clone)]
pub enum PolicySpec {
    Uniform,
    /// Explicit pi[s][a], row-major.
    Fixed(Vec<f64>),
    EpsilonGreedy { epsilon: f64, q: QTable },
}

/// A materialized policy: validated probability rows over actions.
#[derive(Debug, Clone)]
pub struct Policy {
    n_states: usize,
    n_actions: usize,
    /// pi[s][a], row-major.
    probs: Vec<f64>,
}

impl PolicySpec {
    pub fn materialize(&self, mdp: &MdpSpec) -> Result<Policy, MdpError> {
        let (ns, na) = (mdp.n_states(), mdp.n_actions());
        let probs = match self {
            PolicySpec::Uniform => vec![1.0 / na as f64; ns * na],
            PolicySpec::Fixed(rows) => {
                if rows.len() != ns * na {
                    return Err(MdpError::ShapeMismatch(format!(
                        "policy table has {} entries, expected {}",
                        rows.len(),
                        ns * na
                    )));
                }
                for s in 0..ns {
                    let row = &rows[s * na..(s + 1) * na];
                    if row.iter().any(|&p| p < 0.0 || !p.is_finite()) {
                        return Err(MdpError::BadPolicyRow {
                            s,
                            detail: "negative or non-finite mass".into(),
                        });
                    }
                    let sum: f64 = row.iter().sum();
                    if (sum - 1.0).abs() > ROW_SUM_TOL {
                        return Err(MdpError::BadPolicyRow { s, detail: format!("row sums to {sum}") });
                    }
                }
                let mut rows = rows.clone();
                for s in 0..ns {
                    let row = &mut rows[s * na..(s + 1) * na];
                    let sum: f64 = row.iter().sum();
                    if sum != 1.0 {
                        for p in row.iter_mut() {
                            *p /= sum;
                        }
                    }
                }
                rows
            }
            PolicySpec::EpsilonGreedy { epsilon, q } => {
                if !(0.0..=1.0).contains(epsilon) {
                    return Err(MdpError::BadPolicyRow {
                        s: 0,
                        detail: format!("epsilon {epsilon} outside [0, 1]"),
                    });
                }
                if q.n_states() != ns || q.n_actions() != na {
                    return Err(MdpError::ShapeMismatch(
                        "frozen Q table shape does not match the MDP".into(),
                    ));
                }
                let mut probs = vec![0.0; ns * na];
                for s in 0..ns {
                    let greedy = q.greedy_action(s);
                    for a in 0..na {
                        probs[s * na + a] = epsilon / na as f64
                            + if a == greedy { 1.0 - epsilon } else { 0.0 };
                    }
                }
                probs
            }
        };
        Ok(Policy { n_states: ns, n_actions: na, probs })
    }
}

impl Policy {
    pub fn n_states(&self) -> usize {
        self.n_states
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn prob(&self, s: usize, a: usize) -> f64 {
        self.probs[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.n_actions..(s + 1) * self.n_actions]
    }
}

/// One observed tuple `(s_t, a_t, r_t, s_{t+1})`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub r: f64,
    pub s_next: usize,
}

/// Inverse-CDF draw from a probability row. The caller owns the stream;
/// consuming exactly one uniform per draw keeps replays deterministic.
pub(crate) fn sample_index(probs: &[f64], rng: &mut impl Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off fallthrough: return the last index with positive mass.
    probs
        .iter()
        .rposition(|&p| p > 0.0)
        .expect("probability row has no mass")
}

/// Samples one step of the learning policy from state `s`:
/// `a ~ pi(.|s)`, `s' ~ P(.|s, a)`, `r = r(s, a)`.
pub fn sample_transition(
    mdp: &MdpSpec,
    policy: &Policy,
    s: usize,
    rng: &mut impl Rng,
) -> Result<Transition, MdpError> {
    if s >= mdp.n_states() {
        return Err(MdpError::InvalidState(s));
    }
    let a = sample_index(policy.row(s), rng);
    let s_next = sample_index(mdp.transition_row(s, a), rng);
    Ok(Transition { s, a, r: mdp.reward(s, a), s_next })
}

/// Draws a state from an explicit distribution over `S`.
pub fn sample_state(dist: &[f64], rng: &mut impl Rng) -> usize {
    sample_index(dist, rng)
}

/// The optimal Bellman operator
/// `(TQ)(s,a) = r(s,a) + gamma * sum_{s'} P(s'|s,a) max_b Q(s',b)`,
/// computed exactly over the finite sum.
pub fn bellman_optimality(mdp: &MdpSpec, q: &QTable) -> QTable {
    assert_eq!(q.n_states(), mdp.n_states(), "Q table shape mismatch");
    assert_eq!(q.n_actions(), mdp.n_actions(), "Q table shape mismatch");
    let max_next: Vec<f64> = (0..mdp.n_states()).map(|s| q.max_value(s)).collect();
    let mut out = QTable::zeros(mdp.n_states(), mdp.n_actions());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let cont: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&max_next)
                .map(|(p, m)| p * m)
                .sum();
            out.set(s, a, mdp.reward(s, a) + mdp.gamma() * cont);
        }
    }
    out
}

/// Result of running value iteration to a fixed-point residual.
#[derive(Debug, Clone)]
pub struct ValueIterationResult {
    pub q: QTable,
    pub iterations: usize,
    pub residual: f64,
}

/// Iterates `Q <- TQ` from zero until `||TQ - Q||_inf <= tol`. Because `T`
/// is a gamma-contraction the returned table itself satisfies the residual
/// bound.
pub fn value_iteration(mdp: &MdpSpec, tol: f64) -> Result<ValueIterationResult, MdpError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let mut q = QTable::zeros(mdp.n_states(), mdp.n_actions());
    for it in 1..=ITER_CAP {
        let next = bellman_optimality(mdp, &q);
        let residual = next.sup_norm_diff(&q);
        q = next;
        if residual <= tol {
            return Ok(ValueIterationResult { q, iterations: it, residual });
        }
    }
    let residual = bellman_optimality(mdp, &q).sup_norm_diff(&q);
    Err(MdpError::NonConvergence { cap: ITER_CAP, residual })
}

/// State chain induced by the policy: `P_pi(s'|s) = sum_a pi(a|s) P(s'|s,a)`.
pub fn induced_chain(mdp: &MdpSpec, policy: &Policy) -> DMatrix<f64> {
    let ns = mdp.n_states();
    DMatrix::from_fn(ns, ns, |s, s_next| {
        (0..mdp.n_actions())
            .map(|a| policy.prob(s, a) * mdp.transition_prob(s, a, s_next))
            .sum()
    })
}

/// Strong connectivity plus aperiodicity of the support digraph.
fn check_ergodic(p: &DMatrix<f64>) -> Result<(), MdpError> {
    let n = p.nrows();
    let reach = |rows_of: &dyn Fn(usize, usize) -> f64| -> usize {
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for v in 0..n {
                if !seen[v] && rows_of(u, v) > 0.0 {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count
    };
    let fwd = reach(&|u, v| p[(u, v)]);
    let bwd = reach(&|u, v| p[(v, u)]);
    if fwd != n || bwd != n {
        return Err(MdpError::Reducible);
    }
    // Period = gcd over edges of (depth[u] + 1 - depth[v]) on a BFS tree;
    // valid because the chain is irreducible.
    let mut depth = vec![usize::MAX; n];
    let mut queue = std::collections::VecDeque::from([0usize]);
    depth[0] = 0;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if p[(u, v)] > 0.0 && depth[v] == usize::MAX {
                depth[v] = depth[u] + 1;
                queue.push_back(v);
            }
        }
    }
    let mut g: i64 = 0;
    for u in 0..n {
        for v in 0..n {
            if p[(u, v)] > 0.0 {
                let diff = depth[u] as i64 + 1 - depth[v] as i64;
                g = gcd(g, diff.abs());
            }
        }
    }
    if g > 1 {
        return Err(MdpError::Periodic(g as usize));
    }
    Ok(())
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Stationary distribution of the induced chain by power iteration to an
/// L1 residual of 1e-12. Errors if the chain is reducible or periodic.
pub fn stationary_distribution(mdp: &MdpSpec, policy: &Policy) -> Result<Vec<f64>, MdpError> {
    let p = induced_chain(mdp, policy);
    check_ergodic(&p)?;
    let n = p.nrows();
    let mut mu = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..ITER_CAP {
        let next = p.transpose() * &mu;
        let next = &next / next.sum();
        let residual: f64 = (&next - &mu).abs().sum();
        mu = next;
        if residual <= POWER_TOL {
            return Ok(mu.as_slice().to_vec());
        }
    }
    let residual: f64 = (p.transpose() * &mu - &mu).abs().sum();
    Err(MdpError::NonConvergence { cap: ITER_CAP, residual })
}

/// Exact total-variation mixing curve with a fitted geometric envelope
/// `d_TV(t) <= lambda * rho^t` over the fit window.
#[derive(Debug, Clone)]
pub struct MixingCurve {
    /// `(t, sup_s d_TV(P^t(.|s), mu_pi))` for `t = 0..=horizon`.
    pub points: Vec<(usize, f64)>,
    pub lambda: f64,
    pub rho: f64,
    /// Inclusive `t` range the fit used (distances above 1e-13, from t = 1).
    pub fit_window: (usize, usize),
}

/// Exact `sup_s d_TV(P^t(.|s), mu_pi)` for `t = 0..=horizon` via matrix
/// powers, plus the stationary distribution used.
pub fn exact_tv_distances(
    mdp: &MdpSpec,
    policy: &Policy,
    horizon: usize,
) -> Result<(Vec<(usize, f64)>, Vec<f64>), MdpError> {
    let mu = stationary_distribution(mdp, policy)?;
    let p = induced_chain(mdp, policy);
    let n = p.nrows();
    let mut power = DMatrix::<f64>::identity(n, n);
    let mut points = Vec::with_capacity(horizon + 1);
    for t in 0..=horizon {
        let mut worst: f64 = 0.0;
        for s in 0..n {
            let tv: f64 = 0.5
                * (0..n)
                    .map(|s2| (power[(s, s2)] - mu[s2]).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
        }
        points.push((t, worst));
        if t < horizon {
            power *= &p;
        }
    }
    Ok((points, mu))
}

/// Computes the exact TV mixing curve and fits `(lambda, rho)`.
///
/// The decay rate `rho` is the least-squares slope of `log d_TV(t)` over the
/// window `t >= 1, d_TV(t) > 1e-13`; `lambda` is then lifted to the smallest
/// value whose envelope `lambda * rho^t` dominates every windowed point, so
/// the reported pair is a true upper envelope of the curve.
pub fn tv_mixing_curve(
    mdp: &MdpSpec,
    policy: &Policy,
    horizon: usize,
) -> Result<MixingCurve, MdpError> {
    assert!(horizon >= 2, "horizon must be at least 2");
    let (points, _mu) = exact_tv_distances(mdp, policy, horizon)?;
    let mut window = Vec::new();
    for &(t, d) in points.iter().skip(1) {
        if d > TV_FLOOR {
            window.push((t as f64, d.ln()));
        } else {
            break;
        }
    }
    if window.len() < 2 {
        return Err(MdpError::FitDegenerate(format!(
            "only {} distances above {TV_FLOOR:.0e} from t = 1; chain mixes too fast to fit",
            window.len()
        )));
    }
    let n = window.len() as f64;
    let mean_t = window.iter().map(|(t, _)| t).sum::<f64>() / n;
    let mean_y = window.iter().map(|(_, y)| y).sum::<f64>() / n;
    let sxx: f64 = window.iter().map(|(t, _)| (t - mean_t).powi(2)).sum();
    let sxy: f64 = window.iter().map(|(t, y)| (t - mean_t) * (y - mean_y)).sum();
    let slope = sxy / sxx;
    let rho = slope.exp();
    if !(0.0..1.0).contains(&rho) {
        return Err(MdpError::FitDegenerate(format!("fitted rho = {rho} outside (0, 1)")));
    }
    let t_lo = window[0].0 as usize;
    let t_hi = window[window.len() - 1].0 as usize;
    let lambda = points[t_lo..=t_hi]
        .iter()
        .map(|&(t, d)| d / rho.powi(t as i32))
        .fold(0.0, f64::max);
    Ok(MixingCurve { points, lambda, rho, fit_window: (t_lo, t_hi) })
}
