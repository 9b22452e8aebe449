//! Parametric dual maps and the dual-ascent learning loop.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};
use crate::format::{Cell, CsvTable};
use crate::linalg::{randn_matrix, randn_vector, spectral_norm};
use crate::oracle::TrackingOracle;
use crate::system::LayeredProblem;

/// Default hidden width of the MLP dual map.
pub const DEFAULT_HIDDEN: usize = 128;

/// One-hidden-layer rectifier network `ν = W2 relu(W1 ξ + b1) + b2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpDual {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
}

/// How the MLP output layer is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputInit {
    /// Same `1/√fan_in` Gaussian scaling as the hidden layer.
    Scaled,
    /// Zero output weights, so the initial map is `ν̂ ≡ 0`.
    Zero,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DualMap {
    Linear(DMatrix<f64>),
    Mlp(MlpDual),
}

impl DualMap {
    pub fn zeros(output_len: usize, state_dim: usize) -> Self {
        Self::Linear(DMatrix::zeros(output_len, state_dim))
    }

    pub fn mlp<R: Rng + ?Sized>(
        rng: &mut R,
        state_dim: usize,
        output_len: usize,
        hidden: usize,
        init: OutputInit,
    ) -> Result<Self> {
        if hidden == 0 || state_dim == 0 || output_len == 0 {
            return Err(Error::Config("MLP dimensions must be positive".into()));
        }
        let w1 = randn_matrix(rng, hidden, state_dim) / (state_dim as f64).sqrt();
        let w2 = match init {
            OutputInit::Scaled => randn_matrix(rng, output_len, hidden) / (hidden as f64).sqrt(),
            OutputInit::Zero => DMatrix::zeros(output_len, hidden),
        };
        Ok(Self::Mlp(MlpDual {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(output_len),
        }))
    }

    pub fn state_dim(&self) -> usize {
        match self {
            Self::Linear(t) => t.ncols(),
            Self::Mlp(m) => m.w1.ncols(),
        }
    }

    pub fn output_len(&self) -> usize {
        match self {
            Self::Linear(t) => t.nrows(),
            Self::Mlp(m) => m.w2.nrows(),
        }
    }

    pub fn theta(&self) -> Option<&DMatrix<f64>> {
        match self {
            Self::Linear(t) => Some(t),
            Self::Mlp(_) => None,
        }
    }

    pub fn predict(&self, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dual map input", self.state_dim(), xi.len())?;
        Ok(match self {
            Self::Linear(t) => t * xi,
            Self::Mlp(m) => {
                let hidden = (&m.w1 * xi + &m.b1).map(|a| a.max(0.0));
                &m.w2 * hidden + &m.b2
            }
        })
    }

    pub fn num_params(&self) -> usize {
        match self {
            Self::Linear(t) => t.len(),
            Self::Mlp(m) => m.w1.len() + m.b1.len() + m.w2.len() + m.b2.len(),
        }
    }

    /// Flattened parameters in the order `W1, b1, W2, b2` (column-major blocks).
    pub fn params(&self) -> DVector<f64> {
        match self {
            Self::Linear(t) => DVector::from_column_slice(t.as_slice()),
            Self::Mlp(m) => {
                let mut v = Vec::with_capacity(self.num_params());
                v.extend_from_slice(m.w1.as_slice());
                v.extend_from_slice(m.b1.as_slice());
                v.extend_from_slice(m.w2.as_slice());
                v.extend_from_slice(m.b2.as_slice());
                DVector::from_vec(v)
            }
        }
    }

    pub fn with_params(&self, p: &DVector<f64>) -> Result<Self> {
        check_dim("dual map parameters", self.num_params(), p.len())?;
        let s = p.as_slice();
        Ok(match self {
            Self::Linear(t) => Self::Linear(DMatrix::from_column_slice(t.nrows(), t.ncols(), s)),
            Self::Mlp(m) => {
                let (h, d) = m.w1.shape();
                let n = m.w2.nrows();
                let mut off = 0;
                let mut take = |len: usize| {
                    let out = &s[off..off + len];
                    off += len;
                    out
                };
                let w1 = DMatrix::from_column_slice(h, d, take(h * d));
                let b1 = DVector::from_column_slice(take(h));
                let w2 = DMatrix::from_column_slice(n, h, take(n * h));
                let b2 = DVector::from_column_slice(take(n));
                Self::Mlp(MlpDual { w1, b1, w2, b2 })
            }
        })
    }

    /// Parameter-Jacobian transpose product `J_θ(ξ)ᵀ w`, flattened like [`Self::params`].
    pub fn vjp(&self, xi: &DVector<f64>, w: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dual map input", self.state_dim(), xi.len())?;
        check_dim("dual map cotangent", self.output_len(), w.len())?;
        Ok(match self {
            Self::Linear(_) => DVector::from_column_slice((w * xi.transpose()).as_slice()),
            Self::Mlp(m) => {
                let pre = &m.w1 * xi + &m.b1;
                let hidden = pre.map(|a| a.max(0.0));
                let back = (m.w2.transpose() * w).zip_map(&pre, |g, a| if a > 0.0 { g } else { 0.0 });
                let mut v = Vec::with_capacity(self.num_params());
                v.extend_from_slice((&back * xi.transpose()).as_slice());
                v.extend_from_slice(back.as_slice());
                v.extend_from_slice((w * hidden.transpose()).as_slice());
                v.extend_from_slice(w.as_slice());
                DVector::from_vec(v)
            }
        })
    }
}

/// `θ ← θ + η (1/B) Σ J_θ(ξ_i)ᵀ residual_i`, with residuals held constant.
pub fn dual_gradient_step(map: &DualMap, batch: &[(DVector<f64>, DVector<f64>)], eta: f64) -> Result<DualMap> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty dual-update batch".into()));
    }
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::InvalidArgument(format!("step size must be positive, got {eta}")));
    }
    let scale = eta / batch.len() as f64;
    match map {
        DualMap::Linear(theta) => {
            let mut acc = DMatrix::zeros(theta.nrows(), theta.ncols());
            for (xi, res) in batch {
                check_dim("dual map input", theta.ncols(), xi.len())?;
                check_dim("residual", theta.nrows(), res.len())?;
                acc += res * xi.transpose();
            }
            Ok(DualMap::Linear(theta + acc * scale))
        }
        DualMap::Mlp(_) => {
            let mut acc = DVector::zeros(map.num_params());
            for (xi, res) in batch {
                acc += map.vjp(xi, res)?;
            }
            map.with_params(&(map.params() + acc * scale))
        }
    }
}

/// Step-size and batch-size constants derived from the spectrum of `H`.
#[derive(Clone, Debug, PartialEq)]
pub struct RecommendedConstants {
    pub eta_star: f64,
    pub b_min: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub state_dim: usize,
    eigenvalues: Vec<f64>,
}

impl RecommendedConstants {
    /// `‖I + ηH‖₂`, exact from the eigenvalues of the symmetric `H`.
    pub fn contraction_norm(&self, eta: f64) -> f64 {
        self.eigenvalues
            .iter()
            .map(|l| (1.0 + eta * l).abs())
            .fold(0.0, f64::max)
    }

    /// `√(2 d_x / B)`
    pub fn sampling_factor(&self, batch: usize) -> f64 {
        (2.0 * self.state_dim as f64 / batch as f64).sqrt()
    }

    /// `γ(η, B) = ‖I + ηH‖₂ + η‖H‖₂ √(2 d_x / B)`
    pub fn gamma(&self, eta: f64, batch: usize) -> f64 {
        self.contraction_norm(eta) + eta * self.sigma_max * self.sampling_factor(batch)
    }

    pub fn h_norm(&self) -> f64 {
        self.sigma_max
    }
}

pub fn recommended_constants(oracle: &TrackingOracle) -> Result<RecommendedConstants> {
    let eig = nalgebra::SymmetricEigen::new(oracle.h().clone());
    let eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    let mags = eigenvalues.iter().map(|l| l.abs());
    let sigma_min = mags.clone().fold(f64::INFINITY, f64::min);
    let sigma_max = mags.fold(0.0, f64::max);
    if !(sigma_min >= 1e-12) {
        return Err(Error::Degenerate(format!("smallest singular value of H is {sigma_min:.3e}")));
    }
    let dx = oracle.state_dim();
    let ratio = 2.0 * dx as f64 * sigma_max * sigma_max / (sigma_min * sigma_min);
    // Smallest integer strictly above the bound.
    let b_min = ratio.floor() as usize + 1;
    Ok(RecommendedConstants {
        eta_star: 2.0 / (sigma_max + sigma_min),
        b_min,
        sigma_min,
        sigma_max,
        state_dim: dx,
        eigenvalues,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepSize {
    /// `η*` for linear maps.
    Auto,
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualLearnConfig {
    pub eta: StepSize,
    pub batch: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Initial `Θ`; zero when absent.
    pub initial: Option<DMatrix<f64>>,
}

impl DualLearnConfig {
    pub fn validate(&self) -> Result<()> {
        if let StepSize::Fixed(eta) = self.eta {
            if !(eta > 0.0) || !eta.is_finite() {
                return Err(Error::Config(format!("step size must be positive, got {eta}")));
            }
        }
        if self.batch == 0 || self.iterations == 0 {
            return Err(Error::Config("batch size and iteration count must be at least 1".into()));
        }
        Ok(())
    }

    pub fn resolve_eta(&self, constants: &RecommendedConstants) -> f64 {
        match self.eta {
            StepSize::Auto => constants.eta_star,
            StepSize::Fixed(e) => e,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualLearnResult {
    /// `‖Θ^(k) − Θ*‖₂` for `k = 0..=K`.
    pub spectral: Vec<f64>,
    pub frobenius: Vec<f64>,
    pub eta: f64,
    pub batch: usize,
    pub gamma: f64,
    /// Set when `γ(η, B) ≥ 1`, so no contraction is guaranteed.
    pub gamma_warning: bool,
    pub final_map: DualMap,
}

impl DualLearnResult {
    pub fn trace_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["iter", "theta_err_spectral", "theta_err_frobenius", "gamma_bound"]);
        let e0 = self.spectral[0];
        for (k, (s, f)) in self.spectral.iter().zip(&self.frobenius).enumerate() {
            let bound = self.gamma.powi(k as i32) * e0;
            t.push(vec![Cell::from(k), (*s).into(), (*f).into(), bound.into()]);
        }
        t
    }

    /// Per-step ratios `e_{k+1} / e_k`, skipping steps that start from zero error.
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.spectral
            .windows(2)
            .filter(|w| w[0] > 0.0)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

pub(crate) struct LoopTrace {
    pub spectral: Vec<f64>,
    pub frobenius: Vec<f64>,
    pub theta: DMatrix<f64>,
}

/// Shared linear dual loop. `residual(ν, ξ)` returns the planner/tracker mismatch.
pub(crate) fn linear_dual_loop<F>(
    theta_star: &DMatrix<f64>,
    theta0: DMatrix<f64>,
    eta: f64,
    batch: usize,
    iterations: usize,
    seed: u64,
    mut residual: F,
) -> Result<LoopTrace>
where
    F: FnMut(&DVector<f64>, &DVector<f64>) -> Result<DVector<f64>>,
{
    let dx = theta_star.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = DualMap::Linear(theta0);
    let err = |m: &DualMap| m.theta().expect("linear map") - theta_star;
    let e = err(&map);
    let mut spectral = vec![spectral_norm(&e)];
    let mut frobenius = vec![e.norm()];
    let mut samples = Vec::with_capacity(batch);
    for _ in 0..iterations {
        samples.clear();
        let theta = map.theta().expect("linear map");
        for _ in 0..batch {
            let xi = randn_vector(&mut rng, dx);
            let nu = theta * &xi;
            let res = residual(&nu, &xi)?;
            samples.push((xi, res));
        }
        map = dual_gradient_step(&map, &samples, eta)?;
        let e = err(&map);
        spectral.push(spectral_norm(&e));
        frobenius.push(e.norm());
    }
    let DualMap::Linear(theta) = map else { unreachable!() };
    Ok(LoopTrace {
        spectral,
        frobenius,
        theta,
    })
}

/// Learns `Θ` with exact planning and tracking.
pub fn run_exact_dual_learning(
    problem: &LayeredProblem,
    oracle: &TrackingOracle,
    config: &DualLearnConfig,
) -> Result<DualLearnResult> {
    config.validate()?;
    if !problem.constraints().is_unconstrained() {
        return Err(Error::InvalidArgument("exact dual learning needs an unconstrained problem".into()));
    }
    let constants = recommended_constants(oracle)?;
    let eta = config.resolve_eta(&constants);
    let gamma = constants.gamma(eta, config.batch);
    let theta0 = initial_theta(oracle, config)?;
    let trace = linear_dual_loop(
        oracle.theta_star(),
        theta0,
        eta,
        config.batch,
        config.iterations,
        config.seed,
        |nu, xi| Ok(oracle.plan_and_track(nu, xi)?.2),
    )?;
    Ok(DualLearnResult {
        spectral: trace.spectral,
        frobenius: trace.frobenius,
        eta,
        batch: config.batch,
        gamma,
        gamma_warning: gamma >= 1.0,
        final_map: DualMap::Linear(trace.theta),
    })
}

pub(crate) fn initial_theta(oracle: &TrackingOracle, config: &DualLearnConfig) -> Result<DMatrix<f64>> {
    let (n, dx) = oracle.theta_star().shape();
    match &config.initial {
        Some(t) => {
            check_dim("initial dual rows", n, t.nrows())?;
            check_dim("initial dual columns", dx, t.ncols())?;
            Ok(t.clone())
        }
        None => Ok(DMatrix::zeros(n, dx)),
    }
}

/// Monte Carlo estimate of `E‖(1/B) Σ ξξᵀ − I‖_F` for standard normal `ξ ∈ R^{d_x}`.
pub fn wishart_deviation(state_dim: usize, batch: usize, trials: usize, seed: u64) -> Result<f64> {
    if trials == 0 || batch == 0 || state_dim == 0 {
        return Err(Error::InvalidArgument("trials, batch and dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = 0.0;
    let eye = DMatrix::<f64>::identity(state_dim, state_dim);
    for _ in 0..trials {
        let mut s = DMatrix::<f64>::zeros(state_dim, state_dim);
        for _ in 0..batch {
            let xi = DVector::<f64>::from_iterator(state_dim, (0..state_dim).map(|_| rng.sample(StandardNormal)));
            s += &xi * xi.transpose();
        }
        total += (s / batch as f64 - &eye).norm();
    }
    Ok(total / trials as f64)
}

/// `√(2 d_x / B)`
pub fn wishart_bound(state_dim: usize, batch: usize) -> f64 {
    (2.0 * state_dim as f64 / batch as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::randn_matrix;
    use crate::system::{sample_system, LtiSystem};
    use approx::assert_abs_diff_eq;

    fn scalar_oracle() -> (LayeredProblem, TrackingOracle) {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LtiSystem::new(one.clone(), one.clone()).unwrap();
        let p = LayeredProblem::new(sys, 1, one.clone(), one, 2.0).unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        (p, o)
    }

    fn random_oracle(seed: u64) -> (LayeredProblem, TrackingOracle) {
        let sys = sample_system(seed, 2, 2, 1.0).unwrap().system;
        let p = LayeredProblem::new(sys, 5, DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.1, 2.0).unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        (p, o)
    }

    #[test]
    fn linear_predict_and_zero_mlp_output() {
        let theta = DMatrix::from_row_slice(2, 1, &[1.5, -2.0]);
        let map = DualMap::Linear(theta.clone());
        let xi = DVector::from_element(1, 2.0);
        assert_eq!(map.predict(&xi).unwrap(), &theta * &xi);
        assert!(DualMap::zeros(2, 1).predict(&xi).unwrap().iter().all(|v| *v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let DualMap::Mlp(mut m) = DualMap::mlp(&mut rng, 2, 3, 8, OutputInit::Zero).unwrap() else {
            unreachable!()
        };
        m.b2 = DVector::from_vec(vec![0.1, 0.2, 0.3]);
        let map = DualMap::Mlp(m.clone());
        for _ in 0..5 {
            let xi = randn_vector(&mut rng, 2);
            assert_eq!(map.predict(&xi).unwrap(), m.b2);
        }
    }

    #[test]
    fn zero_residuals_leave_map_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = DualMap::Linear(randn_matrix(&mut rng, 4, 2));
        let mlp = DualMap::mlp(&mut rng, 2, 4, 16, OutputInit::Scaled).unwrap();
        let batch: Vec<_> = (0..3).map(|_| (randn_vector(&mut rng, 2), DVector::zeros(4))).collect();
        assert_eq!(dual_gradient_step(&lin, &batch, 0.3).unwrap(), lin);
        assert_eq!(dual_gradient_step(&mlp, &batch, 0.3).unwrap(), mlp);
        assert!(matches!(dual_gradient_step(&lin, &[], 0.3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn scalar_first_step_lands_on_g() {
        let (_, o) = scalar_oracle();
        let xi = DVector::from_element(1, 1.0);
        let map = DualMap::zeros(2, 1);
        let (_, _, res) = o.plan_and_track(&map.predict(&xi).unwrap(), &xi).unwrap();
        let next = dual_gradient_step(&map, &[(xi, res)], 1.0).unwrap();
        assert_abs_diff_eq!(*next.theta().unwrap(), *o.g(), epsilon = 1e-14);
        assert_abs_diff_eq!(next.theta().unwrap()[(1, 0)], -1.0 / 3.0, epsilon = 1e-14);
    }

    #[test]
    fn mlp_vjp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = DualMap::mlp(&mut rng, 3, 5, 12, OutputInit::Scaled).unwrap();
        let xi = randn_vector(&mut rng, 3);
        let w = randn_vector(&mut rng, 5);
        let grad = map.vjp(&xi, &w).unwrap();
        let p = map.params();
        let f = |q: &DVector<f64>| w.dot(&map.with_params(q).unwrap().predict(&xi).unwrap());
        let h = 1e-6;
        let mut fd = DVector::zeros(p.len());
        for i in 0..p.len() {
            let mut a = p.clone();
            let mut b = p.clone();
            a[i] += h;
            b[i] -= h;
            fd[i] = (f(&a) - f(&b)) / (2.0 * h);
        }
        assert!((&grad - &fd).norm() <= 1e-4 * fd.norm());
    }

    #[test]
    fn params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map = DualMap::mlp(&mut rng, 2, 3, 4, OutputInit::Scaled).unwrap();
        assert_eq!(map.with_params(&map.params()).unwrap(), map);
    }

    #[test]
    fn scalar_constants() {
        let (_, o) = scalar_oracle();
        let c = recommended_constants(&o).unwrap();
        assert_abs_diff_eq!(c.eta_star, 12.0 / 7.0, epsilon = 1e-13);
        assert_abs_diff_eq!(c.contraction_norm(c.eta_star), 1.0 / 7.0, epsilon = 1e-13);
        assert_eq!(c.b_min, 4);
        let by_hand = 1.0 / 7.0 + (12.0 / 7.0) * (2.0 / 3.0) * 0.5f64.sqrt();
        assert_abs_diff_eq!(c.gamma(c.eta_star, 4), by_hand, epsilon = 1e-13);
        assert!((c.gamma(c.eta_star, 4) - 0.951).abs() < 1e-3);
    }

    #[test]
    fn gamma_below_one_at_recommended_constants() {
        for seed in 0..5 {
            let (_, o) = random_oracle(seed);
            let c = recommended_constants(&o).unwrap();
            assert!(c.gamma(c.eta_star, c.b_min) < 1.0);
        }
    }

    #[test]
    fn starting_at_optimum_stays_there() {
        let (p, o) = random_oracle(4);
        let cfg = DualLearnConfig {
            eta: StepSize::Auto,
            batch: 5,
            iterations: 30,
            seed: 1,
            initial: Some(o.theta_star().clone()),
        };
        let r = run_exact_dual_learning(&p, &o, &cfg).unwrap();
        assert!(r.spectral.iter().all(|e| *e <= 1e-12));
    }

    #[test]
    fn update_matches_closed_form_algebra() {
        let (_, o) = random_oracle(5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let theta = randn_matrix(&mut rng, o.reference_len(), 2);
        let eta = 0.4;
        let xs: Vec<_> = (0..6).map(|_| randn_vector(&mut rng, 2)).collect();
        let batch: Vec<_> = xs
            .iter()
            .map(|xi| (xi.clone(), o.plan_and_track(&(&theta * xi), xi).unwrap().2))
            .collect();
        let next = dual_gradient_step(&DualMap::Linear(theta.clone()), &batch, eta).unwrap();
        let mut s = DMatrix::zeros(2, 2);
        for xi in &xs {
            s += xi * xi.transpose();
        }
        s /= xs.len() as f64;
        let d = &theta - o.theta_star();
        let eye = DMatrix::<f64>::identity(o.reference_len(), o.reference_len());
        let predicted = (&eye + o.h() * eta) * &d + o.h() * &d * (&s - DMatrix::identity(2, 2)) * eta;
        let actual = next.theta().unwrap() - o.theta_star();
        assert!((&actual - &predicted).amax() <= 1e-10 * (1.0 + d.amax()));
    }

    #[test]
    fn trace_csv_shape() {
        let (p, o) = scalar_oracle();
        let cfg = DualLearnConfig {
            eta: StepSize::Auto,
            batch: 8,
            iterations: 3,
            seed: 0,
            initial: None,
        };
        let r = run_exact_dual_learning(&p, &o, &cfg).unwrap();
        let csv = r.trace_table().render();
        let lines: Vec<_> = csv.lines().collect();
        assert_eq!(lines[0], "iter,theta_err_spectral,theta_err_frobenius,gamma_bound");
        assert_eq!(lines.len(), 5);
        assert!(!r.gamma_warning);
    }

    #[test]
    fn wishart_unit_case_matches_quadrature() {
        // E|z² − 1| for z ~ N(0, 1) by composite Simpson on [−12, 12].
        let n = 200_000;
        let (a, b) = (-12.0f64, 12.0f64);
        let h = (b - a) / n as f64;
        let f = |z: f64| (z * z - 1.0).abs() * (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let mut s = f(a) + f(b);
        for i in 1..n {
            let z = a + i as f64 * h;
            s += if i % 2 == 1 { 4.0 } else { 2.0 } * f(z);
        }
        let exact = s * h / 3.0;
        assert_abs_diff_eq!(exact, 0.968, epsilon = 5e-4);
        let mc = wishart_deviation(1, 1, 20_000, 3).unwrap();
        // The standard deviation of |z² − 1| is below 1.1.
        assert!((mc - exact).abs() < 4.0 * 1.1 / (20_000f64).sqrt());
        assert!(mc <= 2f64.sqrt());
    }

    #[test]
    fn wishart_large_batch() {
        let est = wishart_deviation(2, 4096, 400, 11).unwrap();
        assert!(est <= 0.04, "estimate {est}");
    }
}
