//! Structured suboptimal tracking and its effect on dual learning.
//!
//! A perturbation replaces the tracking value by `p* + (r̃ − Fξ)ᵀΔ_P(r̃ − Fξ)`
//! and the tracking input by `u* + Δ_ur r̃ + Δ_uξ ξ`. The planner then uses the
//! perturbed value, giving `r = (𝒬 + P + Δ_P)⁻¹(P + Δ_P)(Fξ − ν)`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::dual::{
    initial_theta, linear_dual_loop, recommended_constants, DualLearnConfig, DualMap,
};
use crate::error::{check_dim, Error, Result};
use crate::format::{Cell, CsvTable};
use crate::linalg::{randn_matrix, scale_to_spectral_norm, spectral_norm, sym_eigen_range, symmetrize, SpdSolver};
use crate::oracle::{TrackingOracle, TrackingSolution};
use crate::system::LayeredProblem;

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationSpec {
    delta_p: DMatrix<f64>,
    delta_ur: DMatrix<f64>,
    delta_uxi: DMatrix<f64>,
    pub eps_p: f64,
    pub eps_ur: f64,
    pub eps_uxi: f64,
}

impl PerturbationSpec {
    /// Validates shapes and that `𝒬 + P + Δ_P` stays positive definite.
    /// `Δ_P` is stored symmetrized.
    pub fn new(
        oracle: &TrackingOracle,
        delta_p: DMatrix<f64>,
        delta_ur: DMatrix<f64>,
        delta_uxi: DMatrix<f64>,
    ) -> Result<Self> {
        let n = oracle.reference_len();
        let m = oracle.ez().ncols();
        check_dim("Delta_P rows", n, delta_p.nrows())?;
        check_dim("Delta_P columns", n, delta_p.ncols())?;
        check_dim("Delta_ur rows", m, delta_ur.nrows())?;
        check_dim("Delta_ur columns", n, delta_ur.ncols())?;
        check_dim("Delta_uxi rows", m, delta_uxi.nrows())?;
        check_dim("Delta_uxi columns", oracle.state_dim(), delta_uxi.ncols())?;
        let all = delta_p.iter().chain(delta_ur.iter()).chain(delta_uxi.iter());
        if all.clone().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("perturbation entries must be finite".into()));
        }
        let delta_p = symmetrize(&delta_p);
        let (lo, _) = sym_eigen_range(&(oracle.stacked_q() + oracle.p() + &delta_p));
        if !(lo > 0.0) {
            return Err(Error::PerturbationTooLarge(format!(
                "Q + P + Delta_P has minimum eigenvalue {lo:.3e}"
            )));
        }
        Ok(Self {
            eps_p: spectral_norm(&delta_p),
            eps_ur: spectral_norm(&delta_ur),
            eps_uxi: spectral_norm(&delta_uxi),
            delta_p,
            delta_ur,
            delta_uxi,
        })
    }

    pub fn zero(oracle: &TrackingOracle) -> Self {
        let n = oracle.reference_len();
        let m = oracle.ez().ncols();
        Self {
            delta_p: DMatrix::zeros(n, n),
            delta_ur: DMatrix::zeros(m, n),
            delta_uxi: DMatrix::zeros(m, oracle.state_dim()),
            eps_p: 0.0,
            eps_ur: 0.0,
            eps_uxi: 0.0,
        }
    }

    /// Gaussian directions scaled to the requested spectral norms.
    pub fn random<R: Rng + ?Sized>(
        oracle: &TrackingOracle,
        rng: &mut R,
        eps_p: f64,
        eps_ur: f64,
        eps_uxi: f64,
    ) -> Result<Self> {
        let n = oracle.reference_len();
        let m = oracle.ez().ncols();
        let dp = symmetrize(&randn_matrix(rng, n, n));
        let dur = randn_matrix(rng, m, n);
        let duxi = randn_matrix(rng, m, oracle.state_dim());
        Self::new(
            oracle,
            scale_to_spectral_norm(&dp, eps_p),
            scale_to_spectral_norm(&dur, eps_ur),
            scale_to_spectral_norm(&duxi, eps_uxi),
        )
    }

    /// Single-level family: `ε_P = ε_uξ = ε` and `ε_ur = ε/‖E‖`, so that the
    /// combined level entering the bounds is `max(1, ρ/2)·ε`.
    pub fn random_level<R: Rng + ?Sized>(oracle: &TrackingOracle, rng: &mut R, eps: f64) -> Result<Self> {
        let e_norm = spectral_norm(oracle.ez());
        let eps_ur = if e_norm > 0.0 { eps / e_norm } else { eps };
        Self::random(oracle, rng, eps, eps_ur, eps)
    }

    pub fn delta_p(&self) -> &DMatrix<f64> {
        &self.delta_p
    }
    pub fn delta_ur(&self) -> &DMatrix<f64> {
        &self.delta_ur
    }
    pub fn delta_uxi(&self) -> &DMatrix<f64> {
        &self.delta_uxi
    }

    pub fn is_zero(&self) -> bool {
        self.eps_p == 0.0 && self.eps_ur == 0.0 && self.eps_uxi == 0.0
    }
}

/// Oracle with a perturbation applied to both tracking and planning.
#[derive(Clone, Debug)]
pub struct PerturbedOracle<'a> {
    oracle: &'a TrackingOracle,
    spec: PerturbationSpec,
    /// `(𝒬 + P + Δ_P)⁻¹ (P + Δ_P)`
    plan_gain: DMatrix<f64>,
}

impl<'a> PerturbedOracle<'a> {
    pub fn new(oracle: &'a TrackingOracle, spec: &PerturbationSpec) -> Result<Self> {
        let shifted = oracle.p() + spec.delta_p();
        let solver = SpdSolver::new(&(oracle.stacked_q() + &shifted), "Q + P + Delta_P")
            .map_err(|e| Error::PerturbationTooLarge(e.to_string()))?;
        Ok(Self {
            oracle,
            spec: spec.clone(),
            plan_gain: solver.solve(&shifted),
        })
    }

    pub fn spec(&self) -> &PerturbationSpec {
        &self.spec
    }

    pub fn oracle(&self) -> &TrackingOracle {
        self.oracle
    }

    pub fn tracking(&self, r_tilde: &DVector<f64>, xi: &DVector<f64>) -> Result<TrackingSolution> {
        let o = self.oracle;
        check_dim("reference", o.reference_len(), r_tilde.len())?;
        check_dim("initial state", o.state_dim(), xi.len())?;
        let free = o.fz() * xi;
        let dev = r_tilde - &free;
        let mut u = o.tracking_gain() * &dev;
        u += self.spec.delta_ur() * r_tilde;
        u += self.spec.delta_uxi() * xi;
        let mut sol = o.complete_tracking(u, xi, &free, &dev);
        sol.value += (dev.transpose() * self.spec.delta_p() * &dev)[(0, 0)];
        Ok(sol)
    }

    pub fn plan_reference(&self, nu: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dual variable", self.oracle.reference_len(), nu.len())?;
        check_dim("initial state", self.oracle.state_dim(), xi.len())?;
        Ok(&self.plan_gain * (self.oracle.fz() * xi - nu))
    }

    pub fn plan_and_track(
        &self,
        nu: &DVector<f64>,
        xi: &DVector<f64>,
    ) -> Result<(DVector<f64>, TrackingSolution, DVector<f64>)> {
        let r = self.plan_reference(nu, xi)?;
        let sol = self.tracking(&(&r + nu), xi)?;
        let residual = &r - &sol.z;
        Ok((r, sol, residual))
    }

    /// Exact `(H', G')` with `r − 𝒞x = H'ν + G'ξ` for the perturbed composition.
    pub fn difference_map(&self) -> PerturbedDifferenceMap {
        let o = self.oracle;
        let n = o.reference_len();
        let closed = o.ez() * o.tracking_gain() + o.ez() * self.spec.delta_ur();
        let pass = DMatrix::<f64>::identity(n, n) - &closed;
        let h_pert = -(&pass * &self.plan_gain) - &closed;
        let g_pert = &pass * &self.plan_gain * o.fz() + o.ez() * o.tracking_gain() * o.fz()
            - o.ez() * self.spec.delta_uxi()
            - o.fz();
        PerturbedDifferenceMap {
            delta_h: &h_pert - o.h(),
            delta_g: &g_pert - o.g(),
            h: h_pert,
            g: g_pert,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbedDifferenceMap {
    pub h: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub delta_h: DMatrix<f64>,
    pub delta_g: DMatrix<f64>,
}

pub fn perturbed_tracking(
    oracle: &TrackingOracle,
    spec: &PerturbationSpec,
    r_tilde: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<TrackingSolution> {
    PerturbedOracle::new(oracle, spec)?.tracking(r_tilde, xi)
}

pub fn perturbed_difference_map(oracle: &TrackingOracle, spec: &PerturbationSpec) -> Result<PerturbedDifferenceMap> {
    Ok(PerturbedOracle::new(oracle, spec)?.difference_map())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBounds {
    pub e_h: f64,
    pub e_g: f64,
    pub radius_e: f64,
    /// Hypothesis holds, `e_H` is below the threshold and `γ_perturbed < 1`.
    pub admissible: bool,
    pub gamma_perturbed: f64,
    /// `ε_P < λmin(𝒬 + P)/2`
    pub hypothesis: bool,
    pub threshold: f64,
    /// `max(ε_P, (ρ/2)‖E‖ε_ur)`
    pub eps: f64,
    pub lambda_min: f64,
    pub delta_h_norm: f64,
}

/// Error bounds for a perturbation at step size `eta`, batch `batch`, and
/// admissibility batch `batch0`.
pub fn perturbation_bounds(
    oracle: &TrackingOracle,
    spec: &PerturbationSpec,
    eta: f64,
    batch: usize,
    batch0: usize,
) -> Result<PerturbationBounds> {
    if batch == 0 || batch0 == 0 {
        return Err(Error::InvalidArgument("batch sizes must be positive".into()));
    }
    let constants = recommended_constants(oracle)?;
    let dx = oracle.state_dim() as f64;
    let (lambda_min, _) = sym_eigen_range(&(oracle.stacked_q() + oracle.p()));
    let p_norm = spectral_norm(oracle.p());
    let e_norm = spectral_norm(oracle.ez());
    let eps = spec.eps_p.max(0.5 * oracle.rho() * e_norm * spec.eps_ur);
    let hypothesis = spec.eps_p < lambda_min / 2.0;
    let sqrt_b = (2.0 * dx / batch as f64).sqrt();
    let sqrt_b0 = (2.0 * dx / batch0 as f64).sqrt();
    let (smin, smax) = (constants.sigma_min, constants.sigma_max);
    let threshold = (smax - smin) / (smax + smin) / (1.0 + sqrt_b0);
    let delta_h_norm = spectral_norm(&perturbed_difference_map(oracle, spec)?.delta_h);
    let gamma_perturbed =
        constants.contraction_norm(eta) + eta * smax * sqrt_b + (1.0 + sqrt_b) * delta_h_norm;

    let (e_h, e_g, radius_e) = if hypothesis {
        let e_h = 2.0 * eps * p_norm / lambda_min
            + eps * eps / lambda_min
            + 2.0 * eps * (p_norm + eps).powi(2) / (lambda_min * lambda_min);
        let e_g = spectral_norm(oracle.fz()) * e_h + e_norm * spec.eps_uxi;
        let radius = (1.0 + sqrt_b) * (e_g + e_h * spectral_norm(oracle.theta_star()));
        (e_h, e_g, radius)
    } else {
        (f64::INFINITY, f64::INFINITY, f64::INFINITY)
    };
    Ok(PerturbationBounds {
        e_h,
        e_g,
        radius_e,
        admissible: hypothesis && e_h < threshold && gamma_perturbed < 1.0,
        gamma_perturbed,
        hypothesis,
        threshold,
        eps,
        lambda_min,
        delta_h_norm,
    })
}

#[derive(Clone, Debug)]
pub struct PerturbedLearnResult {
    pub spectral: Vec<f64>,
    pub frobenius: Vec<f64>,
    /// `γ^k e_0 + (1 − γ^k)/(1 − γ) e` per iteration; infinite when inadmissible.
    pub bound_trace: Vec<f64>,
    /// Mean error over the final 20% of iterations.
    pub plateau: f64,
    /// First iteration counted in the plateau window.
    pub plateau_start: usize,
    pub bounds: PerturbationBounds,
    pub eta: f64,
    /// Set when the spec is inadmissible, so the bound is not guaranteed.
    pub inadmissible_warning: bool,
    pub final_map: DualMap,
}

impl PerturbedLearnResult {
    pub fn trace_table(&self) -> CsvTable {
        let mut t = CsvTable::new(&["iter", "theta_err", "theorem2_bound", "plateau_flag"]);
        for (k, (e, b)) in self.spectral.iter().zip(&self.bound_trace).enumerate() {
            t.push(vec![Cell::from(k), (*e).into(), (*b).into(), (k >= self.plateau_start).into()]);
        }
        t
    }
}

/// Perturbed contraction bound on the dual error for iterations `0..=iterations`.
pub fn contraction_bound_trace(initial_error: f64, gamma: f64, radius: f64, iterations: usize) -> Vec<f64> {
    (0..=iterations)
        .map(|k| {
            let gk = gamma.powi(k as i32);
            let tail = if gamma == 1.0 { k as f64 } else { (1.0 - gk) / (1.0 - gamma) };
            gk * initial_error + tail * radius
        })
        .collect()
}

fn plateau_of(trace: &[f64]) -> (f64, usize) {
    let k = trace.len() - 1;
    let start = k - (k / 5);
    let window = &trace[start..];
    (window.iter().sum::<f64>() / window.len() as f64, start)
}

/// Dual learning against the perturbed planner and tracker. Uses the same
/// sampling stream as the exact loop, so a zero spec reproduces it exactly.
pub fn run_perturbed_dual_learning(
    problem: &LayeredProblem,
    oracle: &TrackingOracle,
    spec: &PerturbationSpec,
    config: &DualLearnConfig,
) -> Result<PerturbedLearnResult> {
    config.validate()?;
    if !problem.constraints().is_unconstrained() {
        return Err(Error::InvalidArgument("perturbed dual learning needs an unconstrained problem".into()));
    }
    let constants = recommended_constants(oracle)?;
    let eta = config.resolve_eta(&constants);
    let bounds = perturbation_bounds(oracle, spec, eta, config.batch, config.batch)?;
    let pert = PerturbedOracle::new(oracle, spec)?;
    let theta0 = initial_theta(oracle, config)?;
    let e0 = spectral_norm(&(&theta0 - oracle.theta_star()));
    let trace = linear_dual_loop(
        oracle.theta_star(),
        theta0,
        eta,
        config.batch,
        config.iterations,
        config.seed,
        |nu, xi| Ok(pert.plan_and_track(nu, xi)?.2),
    )?;
    let bound_trace = if bounds.admissible {
        contraction_bound_trace(e0, bounds.gamma_perturbed, bounds.radius_e, config.iterations)
    } else {
        vec![f64::INFINITY; config.iterations + 1]
    };
    let (plateau, plateau_start) = plateau_of(&trace.spectral);
    Ok(PerturbedLearnResult {
        spectral: trace.spectral,
        frobenius: trace.frobenius,
        bound_trace,
        plateau,
        plateau_start,
        inadmissible_warning: !bounds.admissible,
        bounds,
        eta,
        final_map: DualMap::Linear(trace.theta),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{run_exact_dual_learning, StepSize};
    use crate::linalg::randn_vector;
    use crate::system::{sample_system, LtiSystem};
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar() -> (LayeredProblem, TrackingOracle) {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LtiSystem::new(one.clone(), one.clone()).unwrap();
        let p = LayeredProblem::new(sys, 1, one.clone(), one, 2.0).unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        (p, o)
    }

    fn random(seed: u64) -> (LayeredProblem, TrackingOracle) {
        let sys = sample_system(seed, 2, 2, 1.0).unwrap().system;
        let p = LayeredProblem::new(sys, 6, DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.1, 2.0).unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        (p, o)
    }

    #[test]
    fn zero_spec_is_exact() {
        let (_, o) = random(1);
        let spec = PerturbationSpec::zero(&o);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xi = randn_vector(&mut rng, 2);
        let rt = randn_vector(&mut rng, o.reference_len());
        assert_eq!(perturbed_tracking(&o, &spec, &rt, &xi).unwrap(), o.optimal_tracking(&rt, &xi).unwrap());
        let d = perturbed_difference_map(&o, &spec).unwrap();
        assert!(d.delta_h.amax() < 1e-14 && d.delta_g.amax() < 1e-14);
        let b = perturbation_bounds(&o, &spec, 1.0, 16, 16).unwrap();
        assert_eq!((b.e_h, b.e_g, b.radius_e), (0.0, 0.0, 0.0));
    }

    #[test]
    fn residual_vanishes_on_free_response() {
        let (_, o) = random(2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let spec = PerturbationSpec::random(&o, &mut rng, 0.1, 0.0, 0.0).unwrap();
        let xi = randn_vector(&mut rng, 2);
        let s = perturbed_tracking(&o, &spec, &(o.fz() * &xi), &xi).unwrap();
        assert!(s.value.abs() < 1e-12);
    }

    #[test]
    fn scalar_input_offset() {
        let (_, o) = scalar();
        let spec = PerturbationSpec::new(
            &o,
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 2),
            DMatrix::from_element(1, 1, 0.1),
        )
        .unwrap();
        let s = perturbed_tracking(&o, &spec, &DVector::from_vec(vec![1.0, 2.0]), &DVector::from_element(1, 1.0)).unwrap();
        assert_abs_diff_eq!(s.u[0], 0.6, epsilon = 1e-14);
        assert_abs_diff_eq!(s.x, DVector::from_vec(vec![1.0, 1.6]), epsilon = 1e-14);
    }

    #[test]
    fn scalar_bound_values() {
        let (_, o) = scalar();
        let spec = PerturbationSpec::new(
            &o,
            DMatrix::identity(2, 2) * 0.01,
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
        )
        .unwrap();
        let b = perturbation_bounds(&o, &spec, 12.0 / 7.0, 4, 4).unwrap();
        let independent = 2.0 * 0.01 * 1.0 / 1.5 + 0.0001 / 1.5 + 2.0 * 0.01 * 1.01f64.powi(2) / 2.25;
        assert_abs_diff_eq!(b.e_h, independent, epsilon = 1e-15);
        assert_abs_diff_eq!(b.e_h, 0.022468, epsilon = 1e-6);
        assert_abs_diff_eq!(b.threshold, 0.08368, epsilon = 1e-5);
        assert!(b.delta_h_norm <= b.e_h);
    }

    #[test]
    fn perturbed_lemma_residual() {
        let (_, o) = random(3);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let spec = PerturbationSpec::random(&o, &mut rng, 0.05, 0.03, 0.04).unwrap();
        let pert = PerturbedOracle::new(&o, &spec).unwrap();
        let d = pert.difference_map();
        let theta = randn_matrix(&mut rng, o.reference_len(), 2);
        for _ in 0..20 {
            let xi = randn_vector(&mut rng, 2);
            let nu = &theta * &xi;
            let (_, _, res) = pert.plan_and_track(&nu, &xi).unwrap();
            assert!((res - (&d.h * &nu + &d.g * &xi)).amax() <= 1e-10);
        }
    }

    #[test]
    fn too_large_delta_p_rejected() {
        let (_, o) = scalar();
        let err = PerturbationSpec::new(
            &o,
            -DMatrix::identity(2, 2) * 10.0,
            DMatrix::zeros(1, 2),
            DMatrix::zeros(1, 1),
        )
        .unwrap_err();
        assert!(matches!(err, Error::PerturbationTooLarge(_)));
    }

    #[test]
    fn spec_norms_are_exact() {
        let (_, o) = random(4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let s = PerturbationSpec::random(&o, &mut rng, 0.02, 0.03, 0.04).unwrap();
        assert_abs_diff_eq!(s.eps_p, 0.02, epsilon = 1e-10);
        assert_abs_diff_eq!(s.eps_ur, 0.03, epsilon = 1e-10);
        assert_abs_diff_eq!(s.eps_uxi, 0.04, epsilon = 1e-10);
        assert_eq!(s.delta_p(), &s.delta_p().transpose());
    }

    #[test]
    fn zero_spec_run_reproduces_exact_trace() {
        let (p, o) = random(5);
        let cfg = DualLearnConfig {
            eta: StepSize::Fixed(1.0),
            batch: 16,
            iterations: 40,
            seed: 9,
            initial: None,
        };
        let exact = run_exact_dual_learning(&p, &o, &cfg).unwrap();
        let pert = run_perturbed_dual_learning(&p, &o, &PerturbationSpec::zero(&o), &cfg).unwrap();
        assert_eq!(exact.spectral, pert.spectral);
        assert_eq!(exact.final_map, pert.final_map);
        let csv = pert.trace_table().render();
        assert!(csv.starts_with("iter,theta_err,theorem2_bound,plateau_flag\n"));
    }

    #[test]
    fn bound_trace_closed_form() {
        let t = contraction_bound_trace(2.0, 0.5, 0.1, 3);
        assert_abs_diff_eq!(t[0], 2.0);
        assert_abs_diff_eq!(t[1], 1.0 + 0.1);
        assert_abs_diff_eq!(t[3], 0.25 + 0.175);
    }
}
