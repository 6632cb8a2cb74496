//! Neural Q-learning laboratory core: finite MDPs with exact dynamic
//! programming oracles, deep bias-free ReLU networks with analytic
//! gradients, the projected semi-gradient Q-learning loop, and numerical
//! diagnostics for the mixing, regularity, and linearization quantities the
//! convergence analysis of that loop depends on.

pub mod diag;
pub mod error;
pub mod mdp;
pub mod net;
pub mod rng;
pub mod train;

pub use diag::{
    bias_probe, check_regularity, check_regularity_all_selections, check_regularity_with,
    estimate_sigma, estimate_sigma_mc, estimation_gap_check, linearization_probe,
    mixing_estimate, mixing_time_tau, population_semi_gradient, sigma_from_flat_gradients,
    solve_stationary_point, stationarity_margin, BiasReport, BiasWindow, MixingEstimate,
    OmegaRule, ProbeCell, ProbeReport, RegularityReport, SampleCount, SigmaPair, SupAlpha,
};
pub use error::{DiagError, MdpError, NetError, TrainError};
pub use mdp::{
    bellman_optimality, build_mdp, exact_tv_distances, gen_random_mdp, induced_chain,
    sample_state, sample_transition, stationary_distribution, tv_mixing_curve, value_iteration,
    MdpFile, MdpSpec, MixingCurve, Policy, PolicySpec, QTable, Transition, ValueIterationResult,
};
pub use net::{
    forward, gradient, init_gaussian, linearize, project_ball, BallConstraint, LinearizedModel,
    NetShape, Theta,
};
pub use rng::{seeded_rng, seeded_stream};
pub use train::{
    run_csv, semi_gradient, step_size, td_error, train, train_with_observer, DataMode, LogRow,
    RunConfig, RunRecord, StepRule, RUN_CSV_HEADER,
};
