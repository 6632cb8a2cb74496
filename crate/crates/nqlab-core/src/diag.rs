//! Numerical probes for the quantities the convergence analysis rests on:
//! the second-moment matrices `Sigma_pi` and `Sigma_pi^*(theta)` and the
//! regularity margin between them, the mixing time `tau*`, linearization
//! and gradient-perturbation scaling in the width, the population
//! semi-gradient of the linearized TD map, the Markovian bias `zeta_t`, and
//! the estimation-gap inequality.
//!
//! Every expectation over `(s, a, s')` is an exact finite sum weighted by
//! `mu_pi(s) pi(a|s) P(s'|s,a)`; Monte Carlo estimates exist only as
//! cross-checks.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;

use crate::error::DiagError;
use crate::mdp::{sample_index, stationary_distribution, tv_mixing_curve, MdpSpec, Policy};
use crate::net::{gradient, init_gaussian, BallConstraint, LinearizedModel, NetShape, Theta};
use crate::rng::seeded_stream;
use crate::train::{step_size, train_with_observer, RunRecord};

/// Dense second-moment matrices get quadratically expensive; refuse beyond
/// this gradient dimension rather than thrash.
const SIGMA_DIM_CAP: usize = 4096;
/// Cap on `|A|^|S|` when enumerating greedy selections.
const SELECTION_CAP: u128 = 65_536;
/// `Sigma_pi` eigenvalues below this make the regularity check inconclusive.
const SIGMA_SINGULAR_TOL: f64 = 1e-12;

/// How the pair was estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleCount {
    Exact,
    MonteCarlo(usize),
}

/// `Sigma_pi = (1/m) E[grad f(theta0; s, a) grad f(theta0; s, a)^T]` and,
/// when a direction was supplied, the greedy-action analogue
/// `Sigma_pi^*(theta)`.
#[derive(Debug, Clone)]
pub struct SigmaPair {
    pub sigma_pi: DMatrix<f64>,
    pub sigma_star: Option<DMatrix<f64>>,
    pub samples: SampleCount,
}

/// Weighted sum of scaled outer products: `(1/m) sum_i w_i g_i g_i^T`.
pub fn sigma_from_flat_gradients(
    grads: &[DVector<f64>],
    weights: &[f64],
    m: usize,
) -> DMatrix<f64> {
    assert_eq!(grads.len(), weights.len(), "one weight per gradient");
    let dim = grads.first().map_or(0, |g| g.len());
    let mut sigma = DMatrix::zeros(dim, dim);
    for (g, &w) in grads.iter().zip(weights) {
        sigma.ger(w / m as f64, g, g, 1.0);
    }
    sigma
}

/// Greedy action for the direction: `argmax_b |<grad f(theta0; s, b), v>|`,
/// ties to the lowest index.
fn greedy_action_for_direction(
    model: &LinearizedModel,
    mdp: &MdpSpec,
    s: usize,
    direction_flat: &DVector<f64>,
) -> usize {
    let mut best = 0;
    let mut best_val = f64::NEG_INFINITY;
    for b in 0..mdp.n_actions() {
        let v = model
            .anchor(mdp.pair_index(s, b))
            .grad_flat
            .dot(direction_flat)
            .abs();
        if v > best_val {
            best_val = v;
            best = b;
        }
    }
    best
}

/// Exact `Sigma_pi` (and `Sigma_pi^*` when `direction` is given) as finite
/// sums over `mu_pi(s) pi(a|s)`.
pub fn estimate_sigma(
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
    direction: Option<&Theta>,
) -> Result<SigmaPair, DiagError> {
    let dim = model.flat_len();
    if dim > SIGMA_DIM_CAP {
        return Err(DiagError::DimensionTooLarge { dim, cap: SIGMA_DIM_CAP });
    }
    let mu = stationary_distribution(mdp, policy)?;
    let m = model.theta0().shape().m;

    let mut sigma_pi = DMatrix::zeros(dim, dim);
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let w = mu[s] * policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            let g = &model.anchor(mdp.pair_index(s, a)).grad_flat;
            sigma_pi.ger(w / m as f64, g, g, 1.0);
        }
    }

    let sigma_star = match direction {
        None => None,
        Some(theta) => {
            let v = theta.flat();
            let mut sigma = DMatrix::zeros(dim, dim);
            for s in 0..mdp.n_states() {
                let b = greedy_action_for_direction(model, mdp, s, &v);
                let g = &model.anchor(mdp.pair_index(s, b)).grad_flat;
                sigma.ger(mu[s] / m as f64, g, g, 1.0);
            }
            Some(sigma)
        }
    };

    Ok(SigmaPair { sigma_pi, sigma_star, samples: SampleCount::Exact })
}

/// Monte-Carlo cross-check of [`estimate_sigma`]: `n` draws of
/// `(s, a) ~ mu_pi x pi`.
pub fn estimate_sigma_mc(
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
    direction: Option<&Theta>,
    n: usize,
    rng: &mut impl Rng,
) -> Result<SigmaPair, DiagError> {
    let dim = model.flat_len();
    if dim > SIGMA_DIM_CAP {
        return Err(DiagError::DimensionTooLarge { dim, cap: SIGMA_DIM_CAP });
    }
    let mu = stationary_distribution(mdp, policy)?;
    let m = model.theta0().shape().m as f64;
    let direction_flat = direction.map(|t| t.flat());

    let mut sigma_pi = DMatrix::zeros(dim, dim);
    let mut sigma_star = direction.map(|_| DMatrix::zeros(dim, dim));
    for _ in 0..n {
        let s = sample_index(&mu, rng);
        let a = sample_index(policy.row(s), rng);
        let g = &model.anchor(mdp.pair_index(s, a)).grad_flat;
        sigma_pi.ger(1.0 / (m * n as f64), g, g, 1.0);
        if let (Some(sigma), Some(v)) = (sigma_star.as_mut(), direction_flat.as_ref()) {
            let b = greedy_action_for_direction(model, mdp, s, v);
            let gb = &model.anchor(mdp.pair_index(s, b)).grad_flat;
            sigma.ger(1.0 / (m * n as f64), gb, gb, 1.0);
        }
    }
    Ok(SigmaPair { sigma_pi, sigma_star, samples: SampleCount::MonteCarlo(n) })
}

fn symmetrized(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrized(a))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `A^{-1/2}` of a symmetric positive definite matrix.
fn inverse_sqrt(a: &DMatrix<f64>) -> Result<DMatrix<f64>, DiagError> {
    let eig = SymmetricEigen::new(symmetrized(a));
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < SIGMA_SINGULAR_TOL {
        return Err(DiagError::SigmaSingular { min_eig: min });
    }
    let u = &eig.eigenvectors;
    let inv_sqrt_diag = DMatrix::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    Ok(u * inv_sqrt_diag * u.transpose())
}

/// Largest admissible regularity constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SupAlpha {
    Bounded(f64),
    /// The greedy-direction matrix vanished; every `alpha` is admissible.
    Unbounded,
}

/// Outcome of the regularity check `Sigma_pi - alpha gamma^2 Sigma_pi^* > 0`.
#[derive(Debug, Clone)]
pub struct RegularityReport {
    pub sup_alpha: SupAlpha,
    /// `sup_alpha > 1`, the condition the analysis needs.
    pub pass: bool,
    pub safety_fraction: f64,
    /// `safety_fraction * sup_alpha` when that still exceeds 1.
    pub alpha_used: Option<f64>,
    /// `1 - alpha_used^{-1/2}`.
    pub beta: Option<f64>,
    pub min_eig_sigma_pi: f64,
}

pub const DEFAULT_SAFETY_FRACTION: f64 = 0.9;

/// `sup { alpha : Sigma_pi - alpha gamma^2 Sigma_pi^* > 0 }` via the
/// generalized eigenvalue reduction `1 / lambda_max(A^{-1/2} B A^{-1/2})`.
pub fn check_regularity(pair: &SigmaPair, gamma: f64) -> Result<RegularityReport, DiagError> {
    check_regularity_with(pair, gamma, DEFAULT_SAFETY_FRACTION)
}

pub fn check_regularity_with(
    pair: &SigmaPair,
    gamma: f64,
    safety_fraction: f64,
) -> Result<RegularityReport, DiagError> {
    let sigma_star = pair.sigma_star.as_ref().ok_or(DiagError::DirectionMissing)?;
    let min_eig = min_eigenvalue(&pair.sigma_pi);
    if min_eig < SIGMA_SINGULAR_TOL {
        return Err(DiagError::SigmaSingular { min_eig });
    }
    let inv_sqrt = inverse_sqrt(&pair.sigma_pi)?;
    let b = symmetrized(sigma_star) * gamma.powi(2);
    let middle = symmetrized(&(&inv_sqrt * b * &inv_sqrt));
    let lambda_max = SymmetricEigen::new(middle)
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let sup_alpha = if lambda_max <= 0.0 {
        SupAlpha::Unbounded
    } else {
        SupAlpha::Bounded(1.0 / lambda_max)
    };
    Ok(build_report(sup_alpha, safety_fraction, min_eig))
}

fn build_report(sup_alpha: SupAlpha, safety_fraction: f64, min_eig: f64) -> RegularityReport {
    let (pass, alpha_used) = match sup_alpha {
        SupAlpha::Unbounded => (true, None),
        SupAlpha::Bounded(sup) => {
            let used = safety_fraction * sup;
            (sup > 1.0, if used > 1.0 { Some(used) } else { None })
        }
    };
    let beta = alpha_used.map(|a| 1.0 - a.powf(-0.5));
    RegularityReport { sup_alpha, pass, safety_fraction, alpha_used, beta, min_eig_sigma_pi: min_eig }
}

/// Direction-free regularity check: `Sigma_pi^*(theta)` only depends on
/// `theta` through the greedy selection `s -> b_max`, so enumerating every
/// selection `sigma in A^S` bounds the assumption's "for all theta"
/// quantifier exactly. Returns the smallest per-selection sup (the uniform
/// `alpha` every direction admits) via a rank-`|S|` Gram reduction.
///
/// The comparison runs on the span of the anchor gradients. With finitely
/// many `(s, a)` pairs and an overparameterized network, `Sigma_pi` is
/// always singular on the full parameter space; both quadratic forms (and
/// both sides of the estimation-gap inequality) vanish identically on the
/// orthogonal complement, so an `alpha` certified on the span is valid for
/// every direction.
pub fn check_regularity_all_selections(
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
    gamma: f64,
    safety_fraction: f64,
) -> Result<RegularityReport, DiagError> {
    let n_sel = (mdp.n_actions() as u128).pow(mdp.n_states() as u32);
    if n_sel > SELECTION_CAP {
        return Err(DiagError::SelectionSpaceTooLarge { size: n_sel, cap: SELECTION_CAP });
    }
    let mu = stationary_distribution(mdp, policy)?;
    let m = model.theta0().shape().m as f64;
    let (ns, na) = (mdp.n_states(), mdp.n_actions());

    // Orthonormal basis of span{g0(s, a)} via pivoted QR; coordinates of
    // each gradient in that basis.
    let dim = model.flat_len();
    let mut g_mat = DMatrix::zeros(dim, ns * na);
    for idx in 0..ns * na {
        g_mat.set_column(idx, &model.anchor(idx).grad_flat);
    }
    let scale = g_mat.norm();
    let qr = g_mat.clone().col_piv_qr();
    // Pivoting sorts |r_ii| nonincreasing; their count above tolerance is
    // the numerical rank.
    let r_diag = qr.r();
    let rank = (0..r_diag.nrows().min(r_diag.ncols()))
        .take_while(|&i| r_diag[(i, i)].abs() > 1e-12 * scale.max(1.0))
        .count();
    if rank == 0 {
        return Err(DiagError::SigmaSingular { min_eig: 0.0 });
    }
    let q = qr.q();
    let basis = q.columns(0, rank).into_owned();
    let coords: Vec<DVector<f64>> = (0..ns * na)
        .map(|idx| basis.transpose() * &model.anchor(idx).grad_flat)
        .collect();

    let mut sigma_pi = DMatrix::zeros(rank, rank);
    for s in 0..ns {
        for a in 0..na {
            let w = mu[s] * policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            sigma_pi.ger(w / m, &coords[mdp.pair_index(s, a)], &coords[mdp.pair_index(s, a)], 1.0);
        }
    }
    let min_eig = min_eigenvalue(&sigma_pi);
    if min_eig < SIGMA_SINGULAR_TOL {
        return Err(DiagError::SigmaSingular { min_eig });
    }
    let inv_sqrt = inverse_sqrt(&sigma_pi)?;

    // w_{s,a} = gamma sqrt(mu(s)/m) A^{-1/2} c(s,a); for a selection sigma,
    // lambda_max(A^{-1/2} B_sigma A^{-1/2}) equals the top eigenvalue of the
    // |S| x |S| Gram matrix of the selected w vectors.
    let mut w = Vec::with_capacity(ns * na);
    for s in 0..ns {
        for a in 0..na {
            let c = &coords[mdp.pair_index(s, a)];
            w.push(&inv_sqrt * c * (gamma * (mu[s] / m).sqrt()));
        }
    }
    let dots = DMatrix::from_fn(ns * na, ns * na, |i, j| w[i].dot(&w[j]));

    let mut worst: Option<f64> = None; // largest lambda_max over selections
    let mut selection = vec![0usize; ns];
    loop {
        let gram = DMatrix::from_fn(ns, ns, |i, j| {
            dots[(i * na + selection[i], j * na + selection[j])]
        });
        let lambda_max = SymmetricEigen::new(symmetrized(&gram))
            .eigenvalues
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if lambda_max > 0.0 {
            worst = Some(worst.map_or(lambda_max, |w: f64| w.max(lambda_max)));
        }
        // Next selection in mixed radix.
        let mut digit = 0;
        loop {
            if digit == ns {
                let sup_alpha = match worst {
                    None => SupAlpha::Unbounded,
                    Some(l) => SupAlpha::Bounded(1.0 / l),
                };
                return Ok(build_report(sup_alpha, safety_fraction, min_eig));
            }
            selection[digit] += 1;
            if selection[digit] < na {
                break;
            }
            selection[digit] = 0;
            digit += 1;
        }
    }
}

/// Geometric mixing estimate paired with the step size it gates.
#[derive(Debug, Clone, Copy)]
pub struct MixingEstimate {
    pub lambda: f64,
    pub rho: f64,
    pub tau_star: u64,
}

/// `tau* = min { t >= 0 : lambda rho^t <= eta_t }`, exact against the
/// floating-point evaluation `lambda * rho.powi(t)`.
pub fn mixing_time_tau(lambda: f64, rho: f64, eta_t: f64) -> u64 {
    assert!(rho > 0.0 && rho < 1.0, "rho must lie in (0, 1)");
    assert!(lambda > 0.0 && eta_t > 0.0, "lambda and eta must be positive");
    let value = |t: i64| lambda * rho.powi(t as i32);
    if lambda <= eta_t {
        return 0;
    }
    let mut t = ((eta_t / lambda).ln() / rho.ln()).ceil().max(0.0) as i64;
    while value(t) > eta_t {
        t += 1;
    }
    while t > 0 && value(t - 1) <= eta_t {
        t -= 1;
    }
    t as u64
}

/// Bundles a fitted TV envelope with the mixing time at a given step size.
pub fn mixing_estimate(lambda: f64, rho: f64, eta_t: f64) -> MixingEstimate {
    MixingEstimate { lambda, rho, tau_star: mixing_time_tau(lambda, rho, eta_t) }
}

/// One measured grid cell of a probe.
#[derive(Debug, Clone)]
pub struct ProbeCell {
    pub probe: &'static str,
    pub m: usize,
    pub num_layers: usize,
    pub omega: f64,
    pub seed: u64,
    pub value: f64,
}

/// Grid of probe measurements, one value per `(probe, m, L, omega, seed)`.
#[derive(Debug, Clone, Default)]
pub struct ProbeReport {
    pub cells: Vec<ProbeCell>,
}

impl ProbeReport {
    pub fn push(&mut self, cell: ProbeCell) {
        self.cells.push(cell);
    }

    /// Median of `probe` over seeds at width `m`.
    pub fn median_for(&self, probe: &str, m: usize) -> Option<f64> {
        let mut values: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.probe == probe && c.m == m)
            .map(|c| c.value)
            .collect();
        if values.is_empty() {
            return None;
        }
        values.sort_by(|a, b| a.partial_cmp(b).expect("finite probe values"));
        let n = values.len();
        Some(if n % 2 == 1 {
            values[n / 2]
        } else {
            0.5 * (values[n / 2 - 1] + values[n / 2])
        })
    }

    pub const CSV_HEADER: &'static str = "probe,m,L,omega,seed,value";

    pub fn csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                c.probe, c.m, c.num_layers, c.omega, c.seed, c.value
            ));
        }
        out
    }
}

/// Radius rule for the linearization probe.
#[derive(Debug, Clone, Copy)]
pub enum OmegaRule {
    /// `coeff * m^{-1/2} L^{-9/4}`.
    TheoremScaling { coeff: f64 },
    Fixed(f64),
}

impl OmegaRule {
    pub fn omega(&self, shape: NetShape) -> f64 {
        match *self {
            OmegaRule::TheoremScaling { coeff } => {
                coeff * (shape.m as f64).powf(-0.5) * (shape.num_layers as f64).powf(-2.25)
            }
            OmegaRule::Fixed(omega) => omega,
        }
    }
}

/// Displaces each layer by `omega` along an independent uniform direction
/// on the unit Frobenius sphere.
fn displace_on_sphere(theta0: &Theta, omega: f64, rng: &mut impl Rng) -> Theta {
    let mut theta = theta0.clone();
    if omega == 0.0 {
        return theta;
    }
    let normal = rand_distr::StandardNormal;
    for l in 0..theta0.shape().num_layers {
        let (r, c) = theta0.shape().layer_dims(l);
        let dir_data: Vec<f64> = (0..r * c)
            .map(|_| rand_distr::Distribution::sample(&normal, rng))
            .collect();
        let mut dir = DMatrix::from_vec(r, c, dir_data);
        let norm = dir.norm();
        dir *= omega / norm;
        *theta.weight_mut(l) += dir;
    }
    theta
}

/// For each `(shape, seed)`: place `theta` on the per-layer sphere of
/// radius `omega(m)` and record
/// `lin_gap  = max_{s,a} |f(theta; phi) - f_hat(theta; phi)|`, and
/// `grad_ratio = max_{s,a} ||grad f(theta) - grad f(theta0)|| / ||grad f(theta0)||`.
pub fn linearization_probe(
    shapes: &[NetShape],
    rule: OmegaRule,
    n_seeds: u64,
    mdp: &MdpSpec,
) -> ProbeReport {
    let mut report = ProbeReport::default();
    for &shape in shapes {
        assert_eq!(shape.d, mdp.feature_dim(), "shape input dim must match features");
        let omega = rule.omega(shape);
        for seed in 0..n_seeds {
            let theta0 = init_gaussian(shape, &mut seeded_stream(seed, 0));
            let theta = displace_on_sphere(&theta0, omega, &mut seeded_stream(seed, 2));
            let model = LinearizedModel::new(theta0.clone(), mdp.features());
            let diff = model.diff_flat(&theta).expect("same shape");
            let mut gap: f64 = 0.0;
            let mut ratio: f64 = 0.0;
            for idx in 0..mdp.n_pairs() {
                let x = &mdp.features()[idx];
                let f = crate::net::forward(&theta, x);
                let f_hat = model.value_from_diff(&diff, idx);
                gap = gap.max((f - f_hat).abs());
                let g = gradient(&theta, x).flat();
                let g0 = &model.anchor(idx).grad_flat;
                let denom = g0.norm();
                if denom > 0.0 {
                    ratio = ratio.max((g - g0).norm() / denom);
                }
            }
            report.push(ProbeCell {
                probe: "lin_gap",
                m: shape.m,
                num_layers: shape.num_layers,
                omega,
                seed,
                value: gap,
            });
            report.push(ProbeCell {
                probe: "grad_ratio",
                m: shape.m,
                num_layers: shape.num_layers,
                omega,
                seed,
                value: ratio,
            });
        }
    }
    report
}

/// Linearized TD values `f_hat(theta; phi(s, a))` for every pair.
fn linear_value_table(model: &LinearizedModel, diff: &DVector<f64>, n_pairs: usize) -> Vec<f64> {
    (0..n_pairs).map(|idx| model.value_from_diff(diff, idx)).collect()
}

/// Per-pair expected linearized TD error,
/// `e(s,a) = f_hat(s,a) - r(s,a) - gamma sum_{s'} P(s'|s,a) max_b f_hat(s',b)`.
fn expected_linear_td(
    mdp: &MdpSpec,
    gamma: f64,
    fhat: &[f64],
) -> Vec<f64> {
    let max_next: Vec<f64> = (0..mdp.n_states())
        .map(|s| {
            (0..mdp.n_actions())
                .map(|b| fhat[mdp.pair_index(s, b)])
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect();
    let mut e = vec![0.0; mdp.n_pairs()];
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let cont: f64 = mdp
                .transition_row(s, a)
                .iter()
                .zip(&max_next)
                .map(|(p, mx)| p * mx)
                .sum();
            e[mdp.pair_index(s, a)] = fhat[mdp.pair_index(s, a)] - mdp.reward(s, a) - gamma * cont;
        }
    }
    e
}

/// Population semi-gradient of the linearized map,
/// `m_bar(theta) = E[Delta_hat(s,a,s'; theta) grad f(theta0; s,a)]`, as an
/// exact finite sum with `s ~ mu_pi` (the stationary weighting; recorded
/// choice for all diagnostics).
pub fn population_semi_gradient(
    theta: &Theta,
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
) -> Result<DVector<f64>, DiagError> {
    let mu = stationary_distribution(mdp, policy)?;
    population_semi_gradient_with_mu(theta, model, mdp, policy, &mu)
}

/// [`population_semi_gradient`] with the stationary distribution supplied,
/// for probes that evaluate the map along a whole trajectory.
pub fn population_semi_gradient_with_mu(
    theta: &Theta,
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
    mu: &[f64],
) -> Result<DVector<f64>, DiagError> {
    let diff = model.diff_flat(theta).map_err(crate::error::TrainError::Net)?;
    let fhat = linear_value_table(model, &diff, mdp.n_pairs());
    let e = expected_linear_td(mdp, mdp.gamma(), &fhat);
    let mut out = DVector::zeros(model.flat_len());
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let idx = mdp.pair_index(s, a);
            let w = mu[s] * policy.prob(s, a);
            if w == 0.0 {
                continue;
            }
            out.axpy(w * e[idx], &model.anchor(idx).grad_flat, 1.0);
        }
    }
    Ok(out)
}

/// `<m_bar(theta_a) - m_bar(theta_b), theta_a - theta_b>
///  - beta * E_{mu,pi}[(f_hat(theta_a) - f_hat(theta_b))^2]`.
///
/// When the regularity check passed with the `alpha` behind `beta`, the
/// margin is nonnegative up to round-off for arbitrary pairs in the ball.
pub fn estimation_gap_check(
    theta_a: &Theta,
    theta_b: &Theta,
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
    beta: f64,
) -> Result<f64, DiagError> {
    let mu = stationary_distribution(mdp, policy)?;
    let ma = population_semi_gradient_with_mu(theta_a, model, mdp, policy, &mu)?;
    let mb = population_semi_gradient_with_mu(theta_b, model, mdp, policy, &mu)?;
    let diff_a = model.diff_flat(theta_a).map_err(crate::error::TrainError::Net)?;
    let diff_b = model.diff_flat(theta_b).map_err(crate::error::TrainError::Net)?;
    let fa = linear_value_table(model, &diff_a, mdp.n_pairs());
    let fb = linear_value_table(model, &diff_b, mdp.n_pairs());

    let inner = (ma - mb).dot(&(&diff_a - &diff_b));
    let mut expect_sq = 0.0;
    for s in 0..mdp.n_states() {
        for a in 0..mdp.n_actions() {
            let idx = mdp.pair_index(s, a);
            expect_sq += mu[s] * policy.prob(s, a) * (fa[idx] - fb[idx]).powi(2);
        }
    }
    Ok(inner - beta * expect_sq)
}

/// One window of the bias probe.
#[derive(Debug, Clone)]
pub struct BiasWindow {
    pub t_start: usize,
    pub len: usize,
    pub mean_zeta: f64,
}

/// Windowed summary of the Markovian bias
/// `zeta_t = <m_t(theta_t) - m_bar(theta_t), theta_t - theta_ref>` along a
/// replayed run.
#[derive(Debug, Clone)]
pub struct BiasReport {
    pub window: usize,
    pub windows: Vec<BiasWindow>,
    /// Mean of the window means.
    pub mean: f64,
    /// Standard error of the window means.
    pub stderr: f64,
    /// `tau* * eta` envelope scale, when the chain's TV fit was available.
    pub envelope_tau_eta: Option<f64>,
}

impl BiasReport {
    pub fn mean_abs_window(&self) -> f64 {
        if self.windows.is_empty() {
            return 0.0;
        }
        self.windows.iter().map(|w| w.mean_zeta.abs()).sum::<f64>() / self.windows.len() as f64
    }
}

/// Replays the recorded run (the config echo pins the seed and sampler
/// mode) and accumulates `zeta_t` in windows of `window` steps against the
/// supplied reference point.
pub fn bias_probe(
    record: &RunRecord,
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
    reference: &Theta,
    window: usize,
) -> Result<BiasReport, DiagError> {
    assert!(window >= 1, "window must be at least 1");
    let config = &record.config;
    let theta0 = init_gaussian(config.shape, &mut seeded_stream(config.seed, 0));
    if &theta0 != model.theta0() {
        return Err(DiagError::AnchorMismatch);
    }
    let mu = stationary_distribution(mdp, policy)?;
    let ref_flat = reference.flat();
    let theta0_flat = theta0.flat();

    let mut zetas: Vec<f64> = Vec::with_capacity(config.t_steps);
    train_with_observer(config, mdp, policy, None, |_t, theta, tr| {
        let diff = theta.flat() - &theta0_flat;
        let fhat = linear_value_table(model, &diff, mdp.n_pairs());
        let e = expected_linear_td(mdp, config.gamma, &fhat);
        // v = theta_t - reference, in flat coordinates.
        let v = theta.flat() - &ref_flat;

        // m_t(theta_t) . v for the observed tuple.
        let idx = mdp.pair_index(tr.s, tr.a);
        let max_next = (0..mdp.n_actions())
            .map(|b| fhat[mdp.pair_index(tr.s_next, b)])
            .fold(f64::NEG_INFINITY, f64::max);
        let delta_hat = fhat[idx] - tr.r - config.gamma * max_next;
        let m_t_dot = delta_hat * model.anchor(idx).grad_flat.dot(&v);

        // m_bar(theta_t) . v as the exact weighted sum.
        let mut m_bar_dot = 0.0;
        for s in 0..mdp.n_states() {
            for a in 0..mdp.n_actions() {
                let j = mdp.pair_index(s, a);
                let w = mu[s] * policy.prob(s, a);
                if w == 0.0 {
                    continue;
                }
                m_bar_dot += w * e[j] * model.anchor(j).grad_flat.dot(&v);
            }
        }
        zetas.push(m_t_dot - m_bar_dot);
    })
    .map_err(DiagError::Train)?;

    let windows: Vec<BiasWindow> = zetas
        .chunks(window)
        .enumerate()
        .map(|(i, chunk)| BiasWindow {
            t_start: i * window,
            len: chunk.len(),
            mean_zeta: chunk.iter().sum::<f64>() / chunk.len() as f64,
        })
        .collect();
    let n = windows.len() as f64;
    let mean = windows.iter().map(|w| w.mean_zeta).sum::<f64>() / n;
    let var = windows.iter().map(|w| (w.mean_zeta - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    let stderr = (var / n).sqrt();

    let envelope_tau_eta = tv_mixing_curve(mdp, policy, 200)
        .ok()
        .map(|curve| mixing_time_tau(curve.lambda, curve.rho, record.eta) as f64 * record.eta);

    Ok(BiasReport { window, windows, mean, stderr, envelope_tau_eta })
}

/// Closed-form minimum of `<m_bar(theta*), theta - theta*>` over the
/// per-layer ball: per layer `<m_l, W0_l - W*_l> - omega ||m_l||_F`. A
/// nonnegative value (up to tolerance) certifies the approximate
/// stationary-point inequality.
pub fn stationarity_margin(
    theta_star: &Theta,
    model: &LinearizedModel,
    constraint: &BallConstraint,
    mdp: &MdpSpec,
    policy: &Policy,
) -> Result<f64, DiagError> {
    let m_bar_flat = population_semi_gradient(theta_star, model, mdp, policy)?;
    let m_bar = Theta::from_flat(theta_star.shape(), &m_bar_flat)
        .map_err(crate::error::TrainError::Net)?;
    let mut total = 0.0;
    for l in 0..theta_star.shape().num_layers {
        let anchor_term = m_bar
            .weight(l)
            .dot(&(constraint.theta0().weight(l) - theta_star.weight(l)));
        total += anchor_term - constraint.omega() * m_bar.weight(l).norm();
    }
    Ok(total)
}

/// Damped fixed-point iteration `theta <- Pi(theta - eta m_bar(theta))`
/// from `theta0`, declared converged at step norm 1e-10. Non-convergence
/// is reported, not papered over.
pub fn solve_stationary_point(
    model: &LinearizedModel,
    mdp: &MdpSpec,
    policy: &Policy,
    constraint: &BallConstraint,
    damping: f64,
    cap: usize,
) -> Result<Theta, DiagError> {
    let mu = stationary_distribution(mdp, policy)?;
    let mut theta = constraint.theta0().clone();
    let mut last_step = f64::INFINITY;
    for _ in 0..cap {
        let m_bar = population_semi_gradient_with_mu(&theta, model, mdp, policy, &mu)?;
        let step = Theta::from_flat(theta.shape(), &m_bar).map_err(crate::error::TrainError::Net)?;
        let mut next = theta.clone();
        next.axpy_in_place(-damping, &step);
        constraint.project_in_place(&mut next);
        last_step = next.sq_dist(&theta).sqrt();
        theta = next;
        if last_step <= 1e-10 {
            return Ok(theta);
        }
    }
    Err(DiagError::NonConvergence { cap, step: last_step })
}

/// Replays a run's step size from its echoed config.
pub fn run_step_size(record: &RunRecord) -> f64 {
    step_size(&record.config)
}
