//! Learned tracking on the augmented state `s_t = [x_t; r̃_{t+1}; …; r̃_{t+L}]`.
//!
//! The stage cost is `(ρ/2)‖C x_{t+1} − r̃_{t+1}‖² + u_tᵀRu_t`, so a rollout
//! over `t = 0..T` sums to the tracking objective minus the constant
//! `(ρ/2)‖r̃_0 − Cξ‖²`. Policies are linear in `s` and critics are quadratic
//! forms in `(s, u)` fitted by least-squares policy iteration.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dual::DualMap;
use crate::error::{check_dim, Error, Result};
use crate::linalg::{randn_vector, spectral_norm, symmetrize};
use crate::oracle::TrackingOracle;
use crate::perturbation::PerturbationSpec;
use crate::planner::ValueQuadratic;
use crate::system::{LayeredProblem, Trajectory};

#[derive(Clone, Debug)]
pub struct AugmentedEnv {
    problem: LayeredProblem,
    window: usize,
    c: DMatrix<f64>,
}

impl AugmentedEnv {
    pub fn new(problem: &LayeredProblem, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("lookahead window must be positive".into()));
        }
        Ok(Self {
            c: problem.output().matrix(problem.state_dim()),
            problem: problem.clone(),
            window,
        })
    }

    /// Window equal to the horizon, so the initial state sees the whole reference.
    pub fn full_window(problem: &LayeredProblem) -> Result<Self> {
        Self::new(problem, problem.horizon())
    }

    pub fn problem(&self) -> &LayeredProblem {
        &self.problem
    }
    pub fn window(&self) -> usize {
        self.window
    }
    pub fn horizon(&self) -> usize {
        self.problem.horizon()
    }
    pub fn state_dim(&self) -> usize {
        self.problem.state_dim() + self.window * self.problem.output_dim()
    }
    pub fn input_dim(&self) -> usize {
        self.problem.input_dim()
    }

    /// `[ξ; r̃_1; …; r̃_L]`, zero past the horizon.
    pub fn initial_state(&self, xi: &DVector<f64>, r_tilde: &DVector<f64>) -> Result<DVector<f64>> {
        let dx = self.problem.state_dim();
        let dz = self.problem.output_dim();
        check_dim("initial state", dx, xi.len())?;
        check_dim("reference", self.problem.reference_len(), r_tilde.len())?;
        let mut s = DVector::zeros(self.state_dim());
        s.rows_mut(0, dx).copy_from(xi);
        for j in 0..self.window.min(self.horizon()) {
            s.rows_mut(dx + j * dz, dz).copy_from(&r_tilde.rows((j + 1) * dz, dz));
        }
        Ok(s)
    }

    fn step_unchecked(&self, s: &DVector<f64>, u: &DVector<f64>) -> (DVector<f64>, f64) {
        let dx = self.problem.state_dim();
        let dz = self.problem.output_dim();
        let sys = self.problem.system();
        let x = s.rows(0, dx);
        let next_x = sys.a() * x + sys.b() * u;
        let err = &self.c * &next_x - s.rows(dx, dz);
        let cost = 0.5 * self.problem.rho() * err.norm_squared() + (u.transpose() * self.problem.r() * u)[(0, 0)];
        let mut next = DVector::zeros(s.len());
        next.rows_mut(0, dx).copy_from(&next_x);
        let tail = (self.window - 1) * dz;
        next.rows_mut(dx, tail).copy_from(&s.rows(dx + dz, tail));
        (next, cost)
    }

    /// Linear transition `s' = 𝔽s + 𝔾u`.
    pub fn transition_matrices(&self) -> (DMatrix<f64>, DMatrix<f64>) {
        let dx = self.problem.state_dim();
        let dz = self.problem.output_dim();
        let ns = self.state_dim();
        let mut f = DMatrix::zeros(ns, ns);
        f.view_mut((0, 0), (dx, dx)).copy_from(self.problem.system().a());
        for j in 0..self.window - 1 {
            f.view_mut((dx + j * dz, dx + (j + 1) * dz), (dz, dz)).fill_with_identity();
        }
        let mut g = DMatrix::zeros(ns, self.input_dim());
        g.view_mut((0, 0), (dx, self.input_dim())).copy_from(self.problem.system().b());
        (f, g)
    }

    /// Stage cost as the quadratic form `zᵀ W z` with `z = [s; u]`.
    pub fn stage_cost_matrix(&self) -> DMatrix<f64> {
        let dx = self.problem.state_dim();
        let dz = self.problem.output_dim();
        let ns = self.state_dim();
        let du = self.input_dim();
        let sys = self.problem.system();
        let mut l = DMatrix::zeros(dz, ns + du);
        l.view_mut((0, 0), (dz, dx)).copy_from(&(&self.c * sys.a()));
        l.view_mut((0, dx), (dz, dz)).copy_from(&(-DMatrix::<f64>::identity(dz, dz)));
        l.view_mut((0, ns), (dz, du)).copy_from(&(&self.c * sys.b()));
        let mut w = l.transpose() * &l * (0.5 * self.problem.rho());
        let mut block = w.view_mut((ns, ns), (du, du));
        block += self.problem.r();
        symmetrize(&w)
    }
}

pub fn augmented_step(env: &AugmentedEnv, s: &DVector<f64>, u: &DVector<f64>) -> Result<(DVector<f64>, f64)> {
    check_dim("augmented state", env.state_dim(), s.len())?;
    check_dim("action", env.input_dim(), u.len())?;
    Ok(env.step_unchecked(s, u))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PolicyKind {
    TimeInvariant,
    TimeVarying,
}

#[derive(Clone, Debug, PartialEq)]
pub enum TrackingPolicy {
    TimeInvariant(DMatrix<f64>),
    TimeVarying(Vec<DMatrix<f64>>),
}

impl TrackingPolicy {
    pub fn zero(env: &AugmentedEnv, kind: PolicyKind) -> Self {
        let k = DMatrix::zeros(env.input_dim(), env.state_dim());
        match kind {
            PolicyKind::TimeInvariant => Self::TimeInvariant(k),
            PolicyKind::TimeVarying => Self::TimeVarying(vec![k; env.horizon()]),
        }
    }

    pub fn gain(&self, t: usize) -> &DMatrix<f64> {
        match self {
            Self::TimeInvariant(k) => k,
            Self::TimeVarying(ks) => &ks[t],
        }
    }

    pub fn act(&self, t: usize, s: &DVector<f64>) -> DVector<f64> {
        self.gain(t) * s
    }
}

/// Q-function `Q_t(s, u) = [s; u]ᵀ M_t [s; u]`.
#[derive(Clone, Debug, PartialEq)]
pub enum QuadraticCritic {
    TimeInvariant(DMatrix<f64>),
    TimeVarying(Vec<DMatrix<f64>>),
}

impl QuadraticCritic {
    pub fn matrix(&self, t: usize) -> &DMatrix<f64> {
        match self {
            Self::TimeInvariant(m) => m,
            Self::TimeVarying(ms) => &ms[t],
        }
    }

    /// Value at `t = 0` under `policy`: `[I; K_0]ᵀ M_0 [I; K_0]`.
    pub fn initial_value(&self, policy: &TrackingPolicy) -> DMatrix<f64> {
        closed_loop_value(self.matrix(0), policy.gain(0))
    }
}

fn closed_loop_value(m: &DMatrix<f64>, k: &DMatrix<f64>) -> DMatrix<f64> {
    let ns = k.ncols();
    let mut lift = DMatrix::zeros(ns + k.nrows(), ns);
    lift.view_mut((0, 0), (ns, ns)).fill_with_identity();
    lift.view_mut((ns, 0), (k.nrows(), ns)).copy_from(k);
    symmetrize(&(lift.transpose() * m * lift))
}

/// Greedy gain `−M_uu⁻¹ M_us`. Returns whether `M_uu` needed regularization.
fn greedy_gain(m: &DMatrix<f64>, ns: usize, du: usize) -> (DMatrix<f64>, bool) {
    let muu = symmetrize(&m.view((ns, ns), (du, du)).into_owned());
    let mus = m.view((ns, 0), (du, ns)).into_owned();
    let (lo, hi) = crate::linalg::sym_eigen_range(&muu);
    let floor = 1e-10 * hi.abs().max(1e-300);
    let (muu, flagged) = if lo > floor {
        (muu, false)
    } else {
        (muu + DMatrix::identity(du, du) * (floor - lo), true)
    };
    let k = match muu.clone().cholesky() {
        Some(ch) => -ch.solve(&mus),
        None => DMatrix::zeros(du, ns),
    };
    (k, flagged)
}

/// One closed-loop episode.
#[derive(Clone, Debug)]
pub struct Episode {
    /// `s_0, …, s_T`
    pub states: Vec<DVector<f64>>,
    pub actions: Vec<DVector<f64>>,
    pub costs: Vec<f64>,
}

impl Episode {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn trajectory(&self, env: &AugmentedEnv) -> Trajectory {
        let dx = env.problem.state_dim();
        let du = env.input_dim();
        let mut x = DVector::zeros(env.problem.state_len());
        for (t, s) in self.states.iter().enumerate() {
            x.rows_mut(t * dx, dx).copy_from(&s.rows(0, dx));
        }
        let mut u = DVector::zeros(env.problem.input_len());
        for (t, a) in self.actions.iter().enumerate() {
            u.rows_mut(t * du, du).copy_from(a);
        }
        let r = env.problem.output().apply_stacked_vec(&x, env.horizon() + 1);
        Trajectory { x, u, r }
    }
}

/// Rolls out `policy` from `[ξ; window(r̃)]`. Gaussian action noise of the
/// given standard deviation is added when `noise` is supplied.
pub fn run_episode<R: Rng + ?Sized>(
    env: &AugmentedEnv,
    policy: &TrackingPolicy,
    xi: &DVector<f64>,
    r_tilde: &DVector<f64>,
    noise: Option<(&mut R, f64)>,
) -> Result<Episode> {
    let mut s = env.initial_state(xi, r_tilde)?;
    let horizon = env.horizon();
    let mut states = Vec::with_capacity(horizon + 1);
    let mut actions = Vec::with_capacity(horizon);
    let mut costs = Vec::with_capacity(horizon);
    let mut noise = noise;
    for t in 0..horizon {
        let mut u = policy.act(t, &s);
        if let Some((rng, std)) = noise.as_mut() {
            if *std > 0.0 {
                u += randn_vector(&mut **rng, u.len()) * *std;
            }
        }
        let (next, cost) = env.step_unchecked(&s, &u);
        states.push(std::mem::replace(&mut s, next));
        actions.push(u);
        costs.push(cost);
    }
    states.push(s);
    Ok(Episode {
        states,
        actions,
        costs,
    })
}

/// Noise-free execution of a reference.
pub fn execute_policy(
    env: &AugmentedEnv,
    policy: &TrackingPolicy,
    xi: &DVector<f64>,
    r_tilde: &DVector<f64>,
) -> Result<Trajectory> {
    let ep = run_episode::<ChaCha8Rng>(env, policy, xi, r_tilde, None)?;
    Ok(ep.trajectory(env))
}

fn feature_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Monomials `z_i z_j` for `i ≤ j`, then a trailing intercept when `out` has room.
fn features(z: &DVector<f64>, out: &mut [f64]) {
    let n = z.len();
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            out[k] = z[i] * z[j];
            k += 1;
        }
    }
    if let Some(last) = out.get_mut(k) {
        *last = 1.0;
    }
}

fn weights_to_matrix(w: &DVector<f64>, n: usize) -> DMatrix<f64> {
    let mut m = DMatrix::zeros(n, n);
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            if i == j {
                m[(i, i)] = w[k];
            } else {
                m[(i, j)] = 0.5 * w[k];
                m[(j, i)] = 0.5 * w[k];
            }
            k += 1;
        }
    }
    m
}

fn stack_su(s: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
    let mut z = DVector::zeros(s.len() + u.len());
    z.rows_mut(0, s.len()).copy_from(s);
    z.rows_mut(s.len(), u.len()).copy_from(u);
    z
}

/// Solves `(A + λI) w = b` with `λ = ridge · mean(diag A)`, escalating the
/// ridge when the system is numerically singular.
fn ridge_solve(a: &DMatrix<f64>, b: &DVector<f64>, ridge: f64) -> (DVector<f64>, bool, f64) {
    let n = a.nrows();
    let scale = (a.trace().abs() / n.max(1) as f64).max(1e-300);
    let mut lambda = ridge * scale;
    let mut flagged = false;
    for _ in 0..6 {
        let mut reg = a.clone();
        for i in 0..n {
            reg[(i, i)] += lambda;
        }
        if let Some(w) = reg.lu().solve(b) {
            if w.iter().all(|v| v.is_finite()) {
                return (w, flagged, lambda);
            }
        }
        flagged = true;
        lambda = (lambda * 1e3).max(1e-12 * scale);
    }
    (DVector::zeros(n), true, lambda)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub kind: PolicyKind,
    pub episodes: usize,
    /// Evaluation and greedy-improvement rounds.
    pub lspi_iterations: usize,
    pub exploration_std: f64,
    /// Standard deviation of the Gaussian references used by [`train_tracking`].
    pub reference_std: f64,
    pub ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            kind: PolicyKind::TimeInvariant,
            episodes: 150,
            lspi_iterations: 6,
            exploration_std: 0.01,
            reference_std: 1.0,
            ridge: 1e-8,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    pub policy: TrackingPolicy,
    pub critic: QuadraticCritic,
    /// Set when the regression or the greedy step needed extra regularization.
    pub regularization_flag: bool,
    pub ridge_used: f64,
    /// Discount of the last time-invariant evaluation; below one when the
    /// evaluated policy was not yet stabilizing.
    pub discount: f64,
}

/// LSTD-Q policy iteration for the stationary policy of the continuing
/// augmented task. Episodes are truncated at `T`, not terminated, so the last
/// transition bootstraps like any other and the quadratic Q-function is exact.
/// Each evaluation is discounted by `min(1, DISCOUNT_MARGIN / ρ̂²)`, where `ρ̂`
/// is the closed-loop spectral radius estimated from simulator rollouts, so
/// the Q-function of a non-stabilizing policy stays finite.
///
/// `initial` must be the behaviour policy that generated `data`. Regressors are
/// built on `[s; u − K_b s]`, where the action block is pure exploration noise,
/// so on-policy data stays well-conditioned; the fit is mapped back exactly.
fn lstd_time_invariant(
    env: &AugmentedEnv,
    data: &[Episode],
    initial: &DMatrix<f64>,
    iterations: usize,
    ridge: f64,
) -> Result<TrainResult> {
    let ns = env.state_dim();
    let du = env.input_dim();
    let nz = ns + du;
    let nf = feature_len(nz);
    let rows: usize = data.iter().map(|e| e.actions.len()).sum();
    if rows == 0 {
        return Err(Error::InvalidArgument("no transitions to fit".into()));
    }
    let mut phi = DMatrix::<f64>::zeros(rows, nf);
    let mut cost = DVector::<f64>::zeros(rows);
    let mut buf = vec![0.0; nf];
    let mut row = 0;
    let kb = initial;
    for ep in data {
        for t in 0..ep.actions.len() {
            let s = &ep.states[t];
            features(&stack_su(s, &(&ep.actions[t] - kb * s)), &mut buf);
            for (k, v) in buf.iter().enumerate() {
                phi[(row, k)] = *v;
            }
            cost[row] = ep.costs[t];
            row += 1;
        }
    }
    let mut unmix = DMatrix::<f64>::identity(nz, nz);
    unmix.view_mut((ns, 0), (du, ns)).copy_from(&(-kb));
    // Unit-norm columns keep the ridge relative to each feature's excitation.
    let scale = DVector::from_iterator(nf, phi.column_iter().map(|c| {
        let n = c.norm();
        if n > 0.0 { 1.0 / n } else { 1.0 }
    }));
    for (j, mut col) in phi.column_iter_mut().enumerate() {
        col *= scale[j];
    }
    let b = phi.transpose() * &cost;
    let mut k = kb.clone();
    let mut m = DMatrix::zeros(nz, nz);
    let mut flagged = false;
    let mut ridge_used = 0.0;
    let mut discount = 1.0;
    for round in 0..iterations.max(1) {
        let radius = closed_loop_radius(env, &k);
        let gamma = if radius.is_finite() { (DISCOUNT_MARGIN / (radius * radius)).min(1.0) } else { 0.0 };
        if !(gamma > 0.0) {
            flagged = true;
            break;
        }
        let mut diff = phi.clone();
        let mut row = 0;
        for ep in data {
            for t in 0..ep.actions.len() {
                let s = &ep.states[t + 1];
                features(&stack_su(s, &((&k - kb) * s)), &mut buf);
                for (j, v) in buf.iter().enumerate() {
                    diff[(row, j)] -= gamma * scale[j] * *v;
                }
                row += 1;
            }
        }
        let a = phi.transpose() * diff;
        let (v, f, lam) = ridge_solve(&a, &b, ridge);
        flagged |= f;
        // A singular evaluation after the first round keeps the last sound
        // critic; the same data would reproduce the failure.
        if f && round > 0 {
            break;
        }
        ridge_used = lam;
        discount = gamma;
        let fitted = weights_to_matrix(&v.component_mul(&scale), nz);
        m = symmetrize(&(unmix.transpose() * fitted * &unmix));
        let (next, f) = greedy_gain(&m, ns, du);
        flagged |= f;
        k = next;
    }
    Ok(TrainResult {
        policy: TrackingPolicy::TimeInvariant(k),
        critic: QuadraticCritic::TimeInvariant(m),
        regularization_flag: flagged,
        ridge_used,
        discount,
    })
}

/// Evaluations of policies with `ρ̂ ≥ 1` are discounted to `DISCOUNT_MARGIN / ρ̂²`.
const DISCOUNT_MARGIN: f64 = 0.9;

/// Spectral radius of `s ↦ step(s, K s)` by power iteration on noise-free
/// rollouts. The window block is nilpotent, so `L` warm-up steps flush it.
fn closed_loop_radius(env: &AugmentedEnv, k: &DMatrix<f64>) -> f64 {
    let ns = env.state_dim();
    let mut s = DVector::from_fn(ns, |i, _| 1.0 / (1.0 + i as f64));
    s /= s.norm();
    let warmup = env.window() + 50;
    let measured = 50;
    let mut log_growth = 0.0;
    for step in 0..warmup + measured {
        let (next, _) = env.step_unchecked(&s, &(k * &s));
        let n = next.norm();
        if !n.is_finite() {
            return f64::INFINITY;
        }
        if n == 0.0 {
            return 0.0;
        }
        if step >= warmup {
            log_growth += n.ln();
        }
        s = next / n;
    }
    (log_growth / measured as f64).exp()
}

/// Backward fitted-Q sweep; one sweep is exact dynamic programming on noiseless data.
fn fitted_q_time_varying(env: &AugmentedEnv, data: &[Episode], ridge: f64) -> Result<TrainResult> {
    let ns = env.state_dim();
    let du = env.input_dim();
    let nz = ns + du;
    let nf = feature_len(nz) + 1;
    let horizon = env.horizon();
    let mut gains = vec![DMatrix::zeros(du, ns); horizon];
    let mut critics = vec![DMatrix::zeros(nz, nz); horizon];
    let mut next_value: Option<DMatrix<f64>> = None;
    let mut flagged = false;
    let mut ridge_used = 0.0;
    let mut buf = vec![0.0; nf];
    for t in (0..horizon).rev() {
        let mut phi = DMatrix::<f64>::zeros(data.len(), nf);
        let mut y = DVector::<f64>::zeros(data.len());
        for (i, ep) in data.iter().enumerate() {
            features(&stack_su(&ep.states[t], &ep.actions[t]), &mut buf);
            for (k, v) in buf.iter().enumerate() {
                phi[(i, k)] = *v;
            }
            let s1 = &ep.states[t + 1];
            let tail = next_value.as_ref().map_or(0.0, |v| (s1.transpose() * v * s1)[(0, 0)]);
            y[i] = ep.costs[t] + tail;
        }
        let (w, f, lam) = ridge_solve(&(phi.transpose() * &phi), &(phi.transpose() * y), ridge);
        flagged |= f;
        ridge_used = lam;
        let m = weights_to_matrix(&w, nz);
        let (k, f) = greedy_gain(&m, ns, du);
        flagged |= f;
        next_value = Some(closed_loop_value(&m, &k));
        gains[t] = k;
        critics[t] = m;
    }
    Ok(TrainResult {
        policy: TrackingPolicy::TimeVarying(gains),
        critic: QuadraticCritic::TimeVarying(critics),
        regularization_flag: flagged,
        ridge_used,
        discount: 1.0,
    })
}

/// Collects `episodes` exploration rollouts with references from `reference`.
pub(crate) fn collect_episodes<R, F>(
    env: &AugmentedEnv,
    policy: &TrackingPolicy,
    episodes: usize,
    exploration_std: f64,
    rng: &mut R,
    mut reference: F,
) -> Result<Vec<Episode>>
where
    R: Rng,
    F: FnMut(&mut R) -> Result<(DVector<f64>, DVector<f64>)>,
{
    let mut out = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let (xi, rt) = reference(rng)?;
        out.push(run_episode(env, policy, &xi, &rt, Some((&mut *rng, exploration_std)))?);
    }
    Ok(out)
}

/// Policy iteration on fixed data, starting from `current`.
pub(crate) fn fit_tracking(
    env: &AugmentedEnv,
    data: &[Episode],
    current: &TrackingPolicy,
    config: &TrainConfig,
) -> Result<TrainResult> {
    match (config.kind, current) {
        (PolicyKind::TimeInvariant, TrackingPolicy::TimeInvariant(k)) => {
            lstd_time_invariant(env, data, k, config.lspi_iterations, config.ridge)
        }
        (PolicyKind::TimeVarying, TrackingPolicy::TimeVarying(_)) => fitted_q_time_varying(env, data, config.ridge),
        _ => Err(Error::InvalidArgument("policy variant does not match the learner".into())),
    }
}

/// Least-squares policy iteration from the zero policy on rollouts with
/// standard-normal initial states and Gaussian references. Deterministic per seed.
pub fn train_tracking(env: &AugmentedEnv, config: &TrainConfig, seed: u64) -> Result<TrainResult> {
    if config.episodes == 0 {
        return Err(Error::Config("at least one training episode is required".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dx = env.problem.state_dim();
    let n = env.problem.reference_len();
    let draw = |rng: &mut ChaCha8Rng| Ok((randn_vector(rng, dx), randn_vector(rng, n) * config.reference_std));
    policy_iteration(env, None, config, config.episodes, config.lspi_iterations, &mut rng, draw)
}

/// Policy iteration on fresh rollouts under the current policy each round, so
/// every evaluation is on-policy. A flagged fit is discarded whenever a sound
/// policy is already available; the flag is still reported.
fn policy_iteration<F>(
    env: &AugmentedEnv,
    start: Option<(TrackingPolicy, QuadraticCritic)>,
    config: &TrainConfig,
    episodes: usize,
    rounds: usize,
    rng: &mut ChaCha8Rng,
    mut reference: F,
) -> Result<TrainResult>
where
    F: FnMut(&mut ChaCha8Rng) -> Result<(DVector<f64>, DVector<f64>)>,
{
    let single = TrainConfig {
        lspi_iterations: 1,
        ..config.clone()
    };
    let mut policy = start
        .as_ref()
        .map_or_else(|| TrackingPolicy::zero(env, config.kind), |(p, _)| p.clone());
    let mut sound = start.map(|(policy, critic)| TrainResult {
        policy,
        critic,
        regularization_flag: false,
        ridge_used: 0.0,
        discount: 1.0,
    });
    let mut flagged = false;
    for _ in 0..rounds.max(1) {
        let data = collect_episodes(env, &policy, episodes, config.exploration_std, rng, &mut reference)?;
        let fit = fit_tracking(env, &data, &policy, &single)?;
        flagged |= fit.regularization_flag;
        if fit.regularization_flag && sound.is_some() {
            continue;
        }
        policy = fit.policy.clone();
        sound = Some(fit);
    }
    let mut result = sound.expect("at least one round");
    result.regularization_flag = flagged;
    Ok(result)
}

/// Exact time-varying optimum of the augmented problem by backward Riccati recursion.
pub fn oracle_policy(env: &AugmentedEnv) -> Result<(TrackingPolicy, QuadraticCritic)> {
    let (f, g) = env.transition_matrices();
    let w = env.stage_cost_matrix();
    let ns = env.state_dim();
    let du = env.input_dim();
    let mut fg = DMatrix::zeros(ns, ns + du);
    fg.view_mut((0, 0), (ns, ns)).copy_from(&f);
    fg.view_mut((0, ns), (ns, du)).copy_from(&g);
    let mut value = DMatrix::<f64>::zeros(ns, ns);
    let horizon = env.horizon();
    let mut gains = vec![DMatrix::zeros(du, ns); horizon];
    let mut critics = vec![DMatrix::zeros(ns + du, ns + du); horizon];
    for t in (0..horizon).rev() {
        let m = symmetrize(&(&w + fg.transpose() * &value * &fg));
        let muu = m.view((ns, ns), (du, du)).into_owned();
        let chol = muu
            .cholesky()
            .ok_or_else(|| Error::Degenerate("augmented Riccati input block not positive definite".into()))?;
        let k = -chol.solve(&m.view((ns, 0), (du, ns)).into_owned());
        value = closed_loop_value(&m, &k);
        gains[t] = k;
        critics[t] = m;
    }
    Ok((TrackingPolicy::TimeVarying(gains), QuadraticCritic::TimeVarying(critics)))
}

/// Stacked maps `u = U_r r̃ + U_ξ ξ` of the closed loop.
#[derive(Clone, Debug, PartialEq)]
pub struct PolicyMaps {
    pub u_r: DMatrix<f64>,
    pub u_xi: DMatrix<f64>,
}

/// Exact by linearity: rolls out every basis vector of `ξ` and `r̃`.
pub fn linearize_policy(env: &AugmentedEnv, policy: &TrackingPolicy) -> Result<PolicyMaps> {
    let dx = env.problem.state_dim();
    let n = env.problem.reference_len();
    let m = env.problem.input_len();
    let mut u_r = DMatrix::zeros(m, n);
    let mut u_xi = DMatrix::zeros(m, dx);
    let zero_r = DVector::zeros(n);
    let zero_x = DVector::zeros(dx);
    for i in 0..dx {
        let mut e = DVector::zeros(dx);
        e[i] = 1.0;
        let t = execute_policy(env, policy, &e, &zero_r)?;
        u_xi.set_column(i, &t.u);
    }
    for j in 0..n {
        let mut e = DVector::zeros(n);
        e[j] = 1.0;
        let t = execute_policy(env, policy, &zero_x, &e)?;
        u_r.set_column(j, &t.u);
    }
    Ok(PolicyMaps { u_r, u_xi })
}

/// Selection maps with `s_0 = J_ξ ξ + J_r r̃`.
fn initial_state_maps(env: &AugmentedEnv) -> (DMatrix<f64>, DMatrix<f64>) {
    let dx = env.problem.state_dim();
    let dz = env.problem.output_dim();
    let ns = env.state_dim();
    let n = env.problem.reference_len();
    let mut jx = DMatrix::zeros(ns, dx);
    jx.view_mut((0, 0), (dx, dx)).fill_with_identity();
    let mut jr = DMatrix::zeros(ns, n);
    for j in 0..env.window.min(env.horizon()) {
        jr.view_mut((dx + j * dz, (j + 1) * dz), (dz, dz)).fill_with_identity();
    }
    (jx, jr)
}

/// Tracking value implied by the critic, including the constant first-step penalty.
pub fn critic_value(env: &AugmentedEnv, policy: &TrackingPolicy, critic: &QuadraticCritic) -> ValueQuadratic {
    let w = critic.initial_value(policy);
    let (jx, jr) = initial_state_maps(env);
    let dz = env.problem.output_dim();
    let n = env.problem.reference_len();
    let half = 0.5 * env.problem.rho();
    let mut s0 = DMatrix::zeros(dz, n);
    s0.view_mut((0, 0), (dz, dz)).fill_with_identity();
    ValueQuadratic {
        rr: symmetrize(&(jr.transpose() * &w * &jr + s0.transpose() * &s0 * half)),
        rxi: jr.transpose() * &w * &jx - s0.transpose() * &env.c * half,
        xixi: symmetrize(&(jx.transpose() * &w * &jx + env.c.transpose() * &env.c * half)),
    }
}

/// Lifts the smallest eigenvalues of `rr` so that `𝒬 + rr` is positive
/// definite with margin. Returns whether anything changed.
pub fn convexify_value(value: &mut ValueQuadratic, q_stack: &DMatrix<f64>) -> bool {
    let total = symmetrize(&(q_stack + &value.rr));
    let eig = nalgebra::SymmetricEigen::new(total.clone());
    let top = eig.eigenvalues.amax();
    let floor = 1e-6 * top.max(1e-12);
    if eig.eigenvalues.min() > floor {
        return false;
    }
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    let fixed = &eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose();
    value.rr = symmetrize(&(fixed - q_stack));
    true
}

#[derive(Clone, Debug)]
pub struct EffectivePerturbations {
    pub spec: PerturbationSpec,
    /// `‖rxi + rr Fz‖ / ‖rr Fz‖`; zero when the value is a function of `r̃ − Fξ`.
    pub residual_form_error: f64,
    pub flagged: bool,
}

/// Perturbation matrices that reproduce a learned policy and critic:
/// `Δ_ur = U_r − U_r*`, `Δ_uξ = U_ξ − U_ξ*` and `Δ_P = sym(rr) − P`.
pub fn effective_perturbations(
    oracle: &TrackingOracle,
    env: &AugmentedEnv,
    policy: &TrackingPolicy,
    critic: &QuadraticCritic,
) -> Result<EffectivePerturbations> {
    let maps = linearize_policy(env, policy)?;
    let delta_ur = &maps.u_r - oracle.tracking_gain();
    let delta_uxi = &maps.u_xi + oracle.tracking_gain() * oracle.fz();
    let value = critic_value(env, policy, critic);
    let rr = symmetrize(&value.rr);
    let rr_f = &rr * oracle.fz();
    let denom = spectral_norm(&rr_f).max(1e-300);
    let residual_form_error = spectral_norm(&(&value.rxi + &rr_f)) / denom;
    let delta_p = &rr - oracle.p();
    let spec = PerturbationSpec::new(oracle, delta_p, delta_ur, delta_uxi)?;
    Ok(EffectivePerturbations {
        spec,
        flagged: residual_form_error > 1e-6,
        residual_form_error,
    })
}

/// Reference source for pipeline training episodes.
pub(crate) fn planned_references<'a>(
    dual: &'a DualMap,
    planner: &'a crate::planner::Planner,
    dx: usize,
    reference_std: f64,
) -> impl FnMut(&mut ChaCha8Rng) -> Result<(DVector<f64>, DVector<f64>)> + 'a {
    move |rng: &mut ChaCha8Rng| {
        let xi = randn_vector(rng, dx);
        let nu = dual.predict(&xi)?;
        let plan = planner.plan(&nu, &xi)?;
        let mut rt = plan.r + nu;
        if reference_std > 0.0 {
            rt += randn_vector(rng, rt.len()) * reference_std;
        }
        Ok((xi, rt))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackingMode {
    /// Policy and critic learned from rollouts.
    Learned,
    /// Closed-form tracking and the exact value; the dual step is the only learning.
    Oracle,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualArch {
    Linear,
    Mlp { hidden: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayeredConfig {
    pub tracking: TrackingMode,
    /// Lookahead window; the horizon when absent.
    pub window: Option<usize>,
    pub policy_kind: PolicyKind,
    pub dual: DualArch,
    /// When false the dual map stays at zero and the planner runs its heuristic.
    pub dual_enabled: bool,
    pub eta: f64,
    pub batch: usize,
    pub joint_iterations: usize,
    /// Dual iterations after the tracker is frozen.
    pub freeze_iterations: usize,
    pub refit_every: usize,
    /// Episodes per policy-iteration round of a refit; [`default_episodes`] when absent.
    pub episodes_per_refit: Option<usize>,
    /// Episodes per round of the first fit, with Gaussian references.
    pub warmup_episodes: Option<usize>,
    /// Policy-iteration rounds of the first fit, which starts from the zero policy.
    pub warmup_iterations: usize,
    /// Policy-iteration rounds per later refit, warm-started from the current policy.
    pub policy_iterations: usize,
    pub exploration_std: f64,
    /// Reference-space exploration added to planned references in training episodes.
    pub reference_std: f64,
    pub ridge: f64,
    pub eval_count: usize,
    pub seed: u64,
}

impl Default for LayeredConfig {
    fn default() -> Self {
        Self {
            tracking: TrackingMode::Learned,
            window: None,
            policy_kind: PolicyKind::TimeInvariant,
            dual: DualArch::Linear,
            dual_enabled: true,
            eta: 0.1,
            batch: 5,
            joint_iterations: 1000,
            freeze_iterations: 250,
            refit_every: 250,
            episodes_per_refit: None,
            warmup_episodes: None,
            warmup_iterations: 6,
            policy_iterations: 2,
            exploration_std: 0.01,
            reference_std: 0.3,
            ridge: 1e-8,
            eval_count: 50,
            seed: 0,
        }
    }
}

impl LayeredConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(Error::Config(format!("step size must be positive, got {}", self.eta)));
        }
        if self.batch == 0 || self.eval_count == 0 {
            return Err(Error::Config("batch and evaluation counts must be positive".into()));
        }
        if self.tracking == TrackingMode::Learned
            && (self.refit_every == 0 || self.episodes_per_refit == Some(0) || self.warmup_episodes == Some(0))
        {
            return Err(Error::Config("learned tracking needs positive refit and episode counts".into()));
        }
        if let DualArch::Mlp { hidden: 0 } = self.dual {
            return Err(Error::Config("MLP hidden width must be positive".into()));
        }
        let stds = [self.exploration_std, self.reference_std, self.ridge];
        if stds.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("noise levels and ridge must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

/// At least 150 episodes and three regression rows per critic feature.
pub fn default_episodes(env: &AugmentedEnv) -> usize {
    let features = feature_len(env.state_dim() + env.input_dim());
    150.max((3 * features).div_ceil(env.horizon()))
}

/// Closed-loop evaluation of the layered controller on fixed initial states.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalMetrics {
    /// `Σ achieved / Σ optimal` over the evaluation states.
    pub relative_cost: f64,
    /// Mean of `(1/T) Σ_{t≥1} ‖r_t − C x_t‖`.
    pub mean_deviation: f64,
    /// Mean bound violation of `C x_t`, `t ≥ 1`, per coordinate.
    pub mean_violation: f64,
    pub achieved_cost: f64,
    pub optimal_cost: f64,
    /// Achieved cost above ten times the optimum.
    pub diverged: bool,
    pub unconverged_plans: usize,
}

#[derive(Clone, Debug)]
pub struct LayeredResult {
    pub policy: Option<TrackingPolicy>,
    pub critic: Option<QuadraticCritic>,
    pub dual: DualMap,
    pub metrics: EvalMetrics,
    /// One row per refit: `episode,eval_cost,eval_deviation,eps_ur,eps_uxi,eps_P`.
    pub history: crate::format::CsvTable,
    /// `‖Θ^(k) − Θ*‖₂` per dual iteration for linear maps.
    pub theta_error: Vec<f64>,
    pub regularization_flag: bool,
    pub value_convexified: bool,
}

enum Tracker<'a> {
    Oracle(&'a TrackingOracle),
    Learned(&'a AugmentedEnv, &'a TrackingPolicy),
}

impl Tracker<'_> {
    /// Executed `(x, u)`.
    fn execute(&self, r_tilde: &DVector<f64>, xi: &DVector<f64>) -> Result<(DVector<f64>, DVector<f64>)> {
        match self {
            Self::Oracle(o) => {
                let sol = o.optimal_tracking(r_tilde, xi)?;
                Ok((sol.x, sol.u))
            }
            Self::Learned(env, policy) => {
                let t = execute_policy(env, policy, xi, r_tilde)?;
                Ok((t.x, t.u))
            }
        }
    }
}

const EXPLORE_SALT: u64 = 0x5eed_0001;
const EVAL_SALT: u64 = 0x5eed_0002;
const INIT_SALT: u64 = 0x5eed_0003;

struct Evaluator {
    xis: Vec<DVector<f64>>,
    optimal: Vec<f64>,
}

impl Evaluator {
    fn new(problem: &LayeredProblem, oracle: &TrackingOracle, count: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ EVAL_SALT);
        let xis: Vec<_> = (0..count).map(|_| randn_vector(&mut rng, problem.state_dim())).collect();
        let optimal = xis
            .iter()
            .map(|xi| Ok(crate::planner::constrained_optimum(problem, oracle, xi)?.cost))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { xis, optimal })
    }

    fn run(
        &self,
        problem: &LayeredProblem,
        planner: &crate::planner::Planner,
        dual: &DualMap,
        tracker: &Tracker<'_>,
    ) -> Result<EvalMetrics> {
        let blocks = problem.horizon() + 1;
        let dz = problem.output_dim();
        let (lower, upper) = problem.constraints().effective_bounds(dz);
        let q_stack = problem.stacked_q();
        let r_stack = problem.stacked_r();
        let (mut achieved, mut deviation, mut violation) = (0.0, 0.0, 0.0);
        let mut unconverged = 0;
        for xi in &self.xis {
            let nu = dual.predict(xi)?;
            let plan = planner.plan(&nu, xi)?;
            unconverged += usize::from(!plan.converged);
            let (x, u) = tracker.execute(&(&plan.r + &nu), xi)?;
            let z = problem.output().apply_stacked_vec(&x, blocks);
            achieved += (z.transpose() * &q_stack * &z)[(0, 0)] + (u.transpose() * &r_stack * &u)[(0, 0)];
            let mut dev = 0.0;
            let mut viol = 0.0;
            for t in 1..blocks {
                dev += (plan.r.rows(t * dz, dz) - z.rows(t * dz, dz)).norm();
                for i in t * dz..(t + 1) * dz {
                    viol += (lower[i] - z[i]).max(0.0) + (z[i] - upper[i]).max(0.0);
                }
            }
            deviation += dev / problem.horizon() as f64;
            violation += viol / (problem.horizon() * dz) as f64;
        }
        let n = self.xis.len() as f64;
        let optimal: f64 = self.optimal.iter().sum();
        Ok(EvalMetrics {
            relative_cost: achieved / optimal,
            mean_deviation: deviation / n,
            mean_violation: violation / n,
            diverged: !(achieved <= 10.0 * optimal),
            achieved_cost: achieved,
            optimal_cost: optimal,
            unconverged_plans: unconverged,
        })
    }
}

/// Spectral norms `(ε_ur, ε_uξ, ε_P)` of the effective perturbation, without a definiteness check.
pub fn perturbation_norms(
    oracle: &TrackingOracle,
    env: &AugmentedEnv,
    policy: &TrackingPolicy,
    critic: &QuadraticCritic,
) -> Result<(f64, f64, f64)> {
    let maps = linearize_policy(env, policy)?;
    let value = critic_value(env, policy, critic);
    Ok((
        spectral_norm(&(&maps.u_r - oracle.tracking_gain())),
        spectral_norm(&(&maps.u_xi + oracle.tracking_gain() * oracle.fz())),
        spectral_norm(&(symmetrize(&value.rr) - oracle.p())),
    ))
}

struct LearnedTracker {
    env: AugmentedEnv,
    policy: TrackingPolicy,
    critic: QuadraticCritic,
    train: TrainConfig,
    rng: ChaCha8Rng,
    episodes: usize,
    flagged: bool,
    convexified: bool,
    trained: bool,
}

impl LearnedTracker {
    fn planner(&mut self, problem: &LayeredProblem) -> Result<crate::planner::Planner> {
        let mut value = critic_value(&self.env, &self.policy, &self.critic);
        self.convexified |= convexify_value(&mut value, &problem.stacked_q());
        crate::planner::Planner::new(problem, &value)
    }

    fn refit<F>(&mut self, episodes: usize, iterations: usize, reference: F) -> Result<()>
    where
        F: FnMut(&mut ChaCha8Rng) -> Result<(DVector<f64>, DVector<f64>)>,
    {
        let start = self.trained.then(|| (self.policy.clone(), self.critic.clone()));
        let fit = policy_iteration(&self.env, start, &self.train, episodes, iterations, &mut self.rng, reference)?;
        self.episodes += episodes * iterations.max(1);
        self.flagged |= fit.regularization_flag;
        self.policy = fit.policy;
        self.critic = fit.critic;
        self.trained = true;
        Ok(())
    }
}

/// Alternates dual ascent with tracker refits, then continues the dual
/// updates with the tracker frozen. Evaluation uses noise-free rollouts.
pub fn run_layered_actor_critic(problem: &LayeredProblem, config: &LayeredConfig) -> Result<LayeredResult> {
    config.validate()?;
    let oracle = TrackingOracle::build(problem)?;
    let dx = problem.state_dim();
    let n = problem.reference_len();
    let evaluator = Evaluator::new(problem, &oracle, config.eval_count, config.seed)?;
    let mut dual = match config.dual {
        DualArch::Linear => DualMap::zeros(n, dx),
        DualArch::Mlp { hidden } => {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ INIT_SALT);
            DualMap::mlp(&mut rng, dx, n, hidden, crate::dual::OutputInit::Zero)?
        }
    };
    let mut history = crate::format::CsvTable::new(&["episode", "eval_cost", "eval_deviation", "eps_ur", "eps_uxi", "eps_P"]);
    let mut learned = match config.tracking {
        TrackingMode::Oracle => None,
        TrackingMode::Learned => {
            let env = AugmentedEnv::new(problem, config.window.unwrap_or(problem.horizon()))?;
            let refit_episodes = config.episodes_per_refit.unwrap_or_else(|| default_episodes(&env));
            let warmup_episodes = config.warmup_episodes.unwrap_or(refit_episodes);
            let train = TrainConfig {
                kind: config.policy_kind,
                episodes: refit_episodes,
                lspi_iterations: config.policy_iterations,
                exploration_std: config.exploration_std,
                reference_std: 1.0,
                ridge: config.ridge,
            };
            let mut lt = LearnedTracker {
                policy: TrackingPolicy::zero(&env, config.policy_kind),
                critic: QuadraticCritic::TimeInvariant(DMatrix::zeros(0, 0)),
                env,
                train,
                rng: ChaCha8Rng::seed_from_u64(config.seed ^ EXPLORE_SALT),
                episodes: 0,
                flagged: false,
                convexified: false,
                trained: false,
            };
            lt.refit(warmup_episodes, config.warmup_iterations, |rng| {
                Ok((randn_vector(rng, dx), randn_vector(rng, n)))
            })?;
            Some(lt)
        }
    };
    let mut planner = match learned.as_mut() {
        Some(lt) => lt.planner(problem)?,
        None => crate::planner::Planner::new(problem, &ValueQuadratic::from_oracle(&oracle))?,
    };
    let mut record = |lt: &LearnedTracker, planner: &crate::planner::Planner, dual: &DualMap| -> Result<()> {
        let m = evaluator.run(problem, planner, dual, &Tracker::Learned(&lt.env, &lt.policy))?;
        let (eur, euxi, ep) = perturbation_norms(&oracle, &lt.env, &lt.policy, &lt.critic)?;
        history.push(vec![
            lt.episodes.into(),
            m.relative_cost.into(),
            m.mean_deviation.into(),
            eur.into(),
            euxi.into(),
            ep.into(),
        ]);
        Ok(())
    };
    if let Some(lt) = learned.as_ref() {
        record(lt, &planner, &dual)?;
    }

    let theta_err = |d: &DualMap| d.theta().map(|t| spectral_norm(&(t - oracle.theta_star())));
    let mut theta_error: Vec<f64> = theta_err(&dual).into_iter().collect();
    let mut dual_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let total = config.joint_iterations + config.freeze_iterations;
    let mut samples = Vec::with_capacity(config.batch);
    for k in 0..total {
        if config.dual_enabled {
            samples.clear();
            let tracker = match learned.as_ref() {
                Some(lt) => Tracker::Learned(&lt.env, &lt.policy),
                None => Tracker::Oracle(&oracle),
            };
            for _ in 0..config.batch {
                let xi = randn_vector(&mut dual_rng, dx);
                let nu = dual.predict(&xi)?;
                let r = planner.plan(&nu, &xi)?.r;
                let (x, _) = tracker.execute(&(&r + &nu), &xi)?;
                let res = r - problem.output().apply_stacked_vec(&x, problem.horizon() + 1);
                samples.push((xi, res));
            }
            dual = crate::dual::dual_gradient_step(&dual, &samples, config.eta)?;
            theta_error.extend(theta_err(&dual));
        }
        let refit_due = (k + 1) % config.refit_every.max(1) == 0 && k + 1 <= config.joint_iterations;
        if let (true, Some(lt)) = (refit_due, learned.as_mut()) {
            let reference_std = config.reference_std;
            let snapshot = dual.clone();
            let plan_snapshot = planner.clone();
            let source = planned_references(&snapshot, &plan_snapshot, dx, reference_std);
            let episodes = lt.train.episodes;
            lt.refit(episodes, config.policy_iterations, source)?;
            planner = lt.planner(problem)?;
            record(lt, &planner, &dual)?;
        }
    }

    let metrics = match learned.as_ref() {
        Some(lt) => evaluator.run(problem, &planner, &dual, &Tracker::Learned(&lt.env, &lt.policy))?,
        None => evaluator.run(problem, &planner, &dual, &Tracker::Oracle(&oracle))?,
    };
    Ok(LayeredResult {
        regularization_flag: learned.as_ref().is_some_and(|l| l.flagged),
        value_convexified: learned.as_ref().is_some_and(|l| l.convexified),
        policy: learned.as_ref().map(|l| l.policy.clone()),
        critic: learned.map(|l| l.critic),
        dual,
        metrics,
        history,
        theta_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::randn_matrix;
    use crate::system::{rollout, sample_system, LtiSystem};
    use approx::assert_abs_diff_eq;

    fn scalar_env() -> (LayeredProblem, AugmentedEnv) {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LtiSystem::new(one.clone(), one.clone()).unwrap();
        let p = LayeredProblem::new(sys, 1, one.clone(), one, 2.0).unwrap();
        let env = AugmentedEnv::full_window(&p).unwrap();
        (p, env)
    }

    fn small_env(seed: u64, dx: usize, du: usize, horizon: usize) -> (LayeredProblem, AugmentedEnv) {
        let sys = sample_system(seed, dx, du, 1.0).unwrap().system;
        let p = LayeredProblem::new(sys, horizon, DMatrix::identity(dx, dx), DMatrix::identity(du, du) * 0.1, 2.0).unwrap();
        let env = AugmentedEnv::full_window(&p).unwrap();
        (p, env)
    }

    #[test]
    fn zero_state_zero_cost() {
        let (_, env) = small_env(0, 2, 1, 4);
        let (next, cost) = augmented_step(&env, &DVector::zeros(env.state_dim()), &DVector::zeros(1)).unwrap();
        assert_eq!(cost, 0.0);
        assert!(next.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn scalar_hold_step() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LtiSystem::new(one.clone(), one.clone()).unwrap();
        let p = LayeredProblem::new(sys, 2, one.clone(), one, 2.0).unwrap();
        let env = AugmentedEnv::new(&p, 2).unwrap();
        let s = DVector::from_vec(vec![1.0, 1.0, 1.0]);
        let (next, cost) = augmented_step(&env, &s, &DVector::zeros(1)).unwrap();
        assert_eq!(next[0], 1.0);
        assert_eq!(cost, 0.0);
        assert_eq!(next.as_slice(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn step_cost_matches_direct_evaluation() {
        let (p, env) = small_env(1, 3, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = randn_vector(&mut rng, env.state_dim());
        let u = randn_vector(&mut rng, 2);
        let (next, cost) = augmented_step(&env, &s, &u).unwrap();
        let x1 = p.system().a() * s.rows(0, 3) + p.system().b() * &u;
        let direct = (&x1 - s.rows(3, 3)).norm_squared() + (u.transpose() * p.r() * &u)[(0, 0)];
        assert_abs_diff_eq!(cost, direct, epsilon = 1e-12);
        assert_abs_diff_eq!(next.rows(0, 3).into_owned(), x1, epsilon = 1e-15);
        let w = env.stage_cost_matrix();
        let z = stack_su(&s, &u);
        assert_abs_diff_eq!((z.transpose() * w * &z)[(0, 0)], cost, epsilon = 1e-10);
    }

    #[test]
    fn episode_costs_sum_to_tracking_objective() {
        let (p, env) = small_env(3, 2, 2, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let policy = TrackingPolicy::TimeInvariant(randn_matrix(&mut rng, 2, env.state_dim()) * 0.1);
        let xi = randn_vector(&mut rng, 2);
        let rt = randn_vector(&mut rng, p.reference_len());
        let ep = run_episode::<ChaCha8Rng>(&env, &policy, &xi, &rt, None).unwrap();
        let traj = rollout(&p, &xi, &ep.trajectory(&env).u).unwrap();
        let tail_dev = (&rt - &traj.r).rows(2, p.reference_len() - 2).norm_squared();
        let expected = (traj.u.transpose() * p.stacked_r() * &traj.u)[(0, 0)] + tail_dev;
        assert_abs_diff_eq!(ep.total_cost(), expected, epsilon = 1e-10);
    }

    #[test]
    fn oracle_policy_reproduces_closed_form() {
        let (p, env) = small_env(5, 2, 2, 5);
        let o = TrackingOracle::build(&p).unwrap();
        let (policy, critic) = oracle_policy(&env).unwrap();
        let maps = linearize_policy(&env, &policy).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let xi = randn_vector(&mut rng, 2);
            let rt = randn_vector(&mut rng, p.reference_len());
            let u = &maps.u_r * &rt + &maps.u_xi * &xi;
            let sol = o.optimal_tracking(&rt, &xi).unwrap();
            assert!((u - &sol.u).amax() <= 1e-8);
        }
        let eff = effective_perturbations(&o, &env, &policy, &critic).unwrap();
        assert!(eff.spec.eps_p <= 1e-8 && eff.spec.eps_ur <= 1e-8 && eff.spec.eps_uxi <= 1e-8);
        assert!(!eff.flagged);
    }

    #[test]
    fn zero_policy_has_zero_maps() {
        let (_, env) = small_env(6, 2, 1, 3);
        let maps = linearize_policy(&env, &TrackingPolicy::zero(&env, PolicyKind::TimeInvariant)).unwrap();
        assert!(maps.u_r.iter().all(|v| *v == 0.0) && maps.u_xi.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linearization_superposition() {
        let (p, env) = small_env(7, 3, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let policy = TrackingPolicy::TimeInvariant(randn_matrix(&mut rng, 2, env.state_dim()) * 0.2);
        let maps = linearize_policy(&env, &policy).unwrap();
        for _ in 0..5 {
            let xi = randn_vector(&mut rng, 3);
            let rt = randn_vector(&mut rng, p.reference_len());
            let t = execute_policy(&env, &policy, &xi, &rt).unwrap();
            assert!((&maps.u_r * &rt + &maps.u_xi * &xi - t.u).amax() <= 1e-10);
        }
    }

    #[test]
    fn injected_input_error_is_recovered() {
        let (p, env) = small_env(8, 2, 1, 3);
        let o = TrackingOracle::build(&p).unwrap();
        let (policy, critic) = oracle_policy(&env).unwrap();
        // Shifting the t = 0 gain by δ on the r̃_1 window slot perturbs U_r in one entry.
        let TrackingPolicy::TimeVarying(mut gains) = policy else { unreachable!() };
        gains[0][(0, 2)] += 0.05;
        let shifted = TrackingPolicy::TimeVarying(gains);
        let base = linearize_policy(&env, &oracle_policy(&env).unwrap().0).unwrap();
        let maps = linearize_policy(&env, &shifted).unwrap();
        let injected = &maps.u_r - &base.u_r;
        let eff = effective_perturbations(&o, &env, &shifted, &critic).unwrap();
        assert!((eff.spec.delta_ur() - &injected).amax() <= 1e-8);
    }

    #[test]
    fn no_control_authority_learns_zero_action() {
        let sys = LtiSystem::new(DMatrix::from_element(1, 1, 0.9), DMatrix::zeros(1, 1)).unwrap();
        let p = LayeredProblem::new(sys, 3, DMatrix::identity(1, 1), DMatrix::identity(1, 1), 2.0).unwrap();
        let env = AugmentedEnv::full_window(&p).unwrap();
        let gain = |kind, episodes| {
            let cfg = TrainConfig {
                kind,
                episodes,
                exploration_std: 0.3,
                ..TrainConfig::default()
            };
            let res = train_tracking(&env, &cfg, 1).unwrap();
            (0..3).map(|t| res.policy.gain(t).amax()).fold(0.0, f64::max)
        };
        assert!(gain(PolicyKind::TimeVarying, 60) < 1e-6);
        assert!(gain(PolicyKind::TimeInvariant, 60) < 1e-6);
    }

    #[test]
    fn scalar_time_varying_matches_oracle() {
        let (p, env) = scalar_env();
        let o = TrackingOracle::build(&p).unwrap();
        let cfg = TrainConfig {
            kind: PolicyKind::TimeVarying,
            episodes: 40,
            lspi_iterations: 1,
            exploration_std: 0.1,
            ..TrainConfig::default()
        };
        let res = train_tracking(&env, &cfg, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..10 {
            let xi = randn_vector(&mut rng, 1);
            let rt = randn_vector(&mut rng, 2);
            let t = execute_policy(&env, &res.policy, &xi, &rt).unwrap();
            let sol = o.optimal_tracking(&rt, &xi).unwrap();
            assert!((t.u - sol.u).amax() <= 1e-3);
        }
    }

    #[test]
    fn time_varying_iterations_are_monotone() {
        let (p, env) = small_env(9, 1, 1, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let eval: Vec<_> = (0..20)
            .map(|_| (randn_vector(&mut rng, 1), randn_vector(&mut rng, p.reference_len())))
            .collect();
        let cost = |policy: &TrackingPolicy| -> f64 {
            eval.iter()
                .map(|(xi, rt)| run_episode::<ChaCha8Rng>(&env, policy, xi, rt, None).unwrap().total_cost())
                .sum()
        };
        let mut prev = f64::INFINITY;
        for iters in 1..=3 {
            let cfg = TrainConfig {
                kind: PolicyKind::TimeVarying,
                episodes: 80,
                lspi_iterations: iters,
                exploration_std: 0.1,
                ..TrainConfig::default()
            };
            let c = cost(&train_tracking(&env, &cfg, 4).unwrap().policy);
            assert!(c <= prev + 1e-6 * (1.0 + prev.abs()));
            prev = c;
        }
    }

    #[test]
    fn convexify_leaves_pd_values_alone() {
        let (p, env) = small_env(11, 2, 2, 3);
        let o = TrackingOracle::build(&p).unwrap();
        let mut v = ValueQuadratic::from_oracle(&o);
        assert!(!convexify_value(&mut v, &p.stacked_q()));
        let (policy, critic) = oracle_policy(&env).unwrap();
        let learned = critic_value(&env, &policy, &critic);
        assert!((learned.rr - o.p()).amax() < 1e-8);
    }
}
