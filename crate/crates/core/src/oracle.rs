//! Closed-form tracking, planning and dual maps for the unconstrained problem.
//!
//! All reference-side quantities live in output coordinates: `Ez = 𝒞E` and
//! `Fz = 𝒞F`, with `𝒞 = I ⊗ C`. For the identity output map these are `E`
//! and `F` themselves.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{symmetrize, SpdSolver};
use crate::system::{build_stacked_maps, LayeredProblem, StackedMaps};

#[derive(Clone, Debug)]
pub struct TrackingOracle {
    maps: StackedMaps,
    ez: DMatrix<f64>,
    fz: DMatrix<f64>,
    q_stack: DMatrix<f64>,
    rho: f64,
    state_dim: usize,
    output_dim: usize,
    rbar: DMatrix<f64>,
    /// `(ρ/2) R̄⁻¹ Ezᵀ`; the optimal input is `Ku (r̃ − Fz ξ)`.
    track_gain: DMatrix<f64>,
    p: DMatrix<f64>,
    plan_solver: SpdSolver,
    /// `(𝒬 + P)⁻¹ P`
    plan_gain: DMatrix<f64>,
    h: DMatrix<f64>,
    g: DMatrix<f64>,
    theta_star: DMatrix<f64>,
    /// Optimal cost of the original problem is `ξᵀ V ξ`.
    value_star: DMatrix<f64>,
    /// Optimal input of the original problem is `-U ξ`.
    direct_gain: DMatrix<f64>,
}

/// Minimizer of `uᵀ𝒭u + (ρ/2)‖r̃ − 𝒞x‖²` subject to the dynamics.
#[derive(Clone, Debug, PartialEq)]
pub struct TrackingSolution {
    pub u: DVector<f64>,
    pub x: DVector<f64>,
    /// Executed outputs `𝒞x`.
    pub z: DVector<f64>,
    pub value: f64,
}

/// Optimum of the original problem `min rᵀ𝒬r + uᵀ𝒭u` with `r = 𝒞x`.
#[derive(Clone, Debug, PartialEq)]
pub struct DirectSolution {
    pub u: DVector<f64>,
    pub x: DVector<f64>,
    pub cost: f64,
}

/// Primal/dual solution of the redundant equality-constrained problem.
#[derive(Clone, Debug, PartialEq)]
pub struct KktSolution {
    pub r: DVector<f64>,
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    /// Scaled multiplier of `r = 𝒞x`.
    pub nu: DVector<f64>,
    pub objective: f64,
}

fn quad(v: &DVector<f64>, m: &DMatrix<f64>) -> f64 {
    (v.transpose() * m * v)[(0, 0)]
}

impl TrackingOracle {
    pub fn build(problem: &LayeredProblem) -> Result<Self> {
        let maps = build_stacked_maps(problem);
        let blocks = problem.horizon() + 1;
        let ez = problem.output().apply_stacked(&maps.e, blocks);
        let fz = problem.output().apply_stacked(&maps.f, blocks);
        let q_stack = problem.stacked_q();
        let r_stack = problem.stacked_r();
        let rho = problem.rho();
        let half = 0.5 * rho;
        let n = ez.nrows();

        let rbar = symmetrize(&(&r_stack + ez.transpose() * &ez * half));
        let rbar_solver = SpdSolver::new(&rbar, "Rbar")?;
        let track_gain = rbar_solver.solve(&ez.transpose()) * half;
        let closed_loop = &ez * &track_gain;
        let p = symmetrize(&(DMatrix::identity(n, n) * half - &closed_loop * half));

        let plan_solver = SpdSolver::new(&(&q_stack + &p), "Q + P")?;
        let plan_gain = plan_solver.solve(&p);
        let h = symmetrize(&(-(&p * &plan_gain) * (2.0 / rho) - closed_loop));
        let g = -(&h * &fz) - &fz;

        let hess = symmetrize(&(ez.transpose() * &q_stack * &ez + &r_stack));
        let direct_solver = SpdSolver::new(&hess, "EᵀQE + R")?;
        let direct_gain = direct_solver.solve(&(ez.transpose() * &q_stack * &fz));
        let z_star = &fz - &ez * &direct_gain;
        let theta_star = -(&q_stack * &z_star) * (2.0 / rho);
        let value_star = symmetrize(&(fz.transpose() * &q_stack * &z_star));

        Ok(Self {
            maps,
            ez,
            fz,
            q_stack,
            rho,
            state_dim: problem.state_dim(),
            output_dim: problem.output_dim(),
            rbar,
            track_gain,
            p,
            plan_solver,
            plan_gain,
            h,
            g,
            theta_star,
            value_star,
            direct_gain,
        })
    }

    pub fn maps(&self) -> &StackedMaps {
        &self.maps
    }
    /// `𝒞E`
    pub fn ez(&self) -> &DMatrix<f64> {
        &self.ez
    }
    /// `𝒞F`
    pub fn fz(&self) -> &DMatrix<f64> {
        &self.fz
    }
    pub fn stacked_q(&self) -> &DMatrix<f64> {
        &self.q_stack
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn state_dim(&self) -> usize {
        self.state_dim
    }
    pub fn output_dim(&self) -> usize {
        self.output_dim
    }
    pub fn reference_len(&self) -> usize {
        self.ez.nrows()
    }
    pub fn rbar(&self) -> &DMatrix<f64> {
        &self.rbar
    }
    pub fn tracking_gain(&self) -> &DMatrix<f64> {
        &self.track_gain
    }
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn plan_gain(&self) -> &DMatrix<f64> {
        &self.plan_gain
    }
    pub fn h(&self) -> &DMatrix<f64> {
        &self.h
    }
    pub fn g(&self) -> &DMatrix<f64> {
        &self.g
    }
    pub fn theta_star(&self) -> &DMatrix<f64> {
        &self.theta_star
    }
    pub fn optimal_cost_matrix(&self) -> &DMatrix<f64> {
        &self.value_star
    }

    /// Affine residual pair `(H, G)` with `r − 𝒞x = Hν + Gξ`.
    pub fn difference_map(&self) -> (&DMatrix<f64>, &DMatrix<f64>) {
        (&self.h, &self.g)
    }

    pub fn optimal_tracking(&self, r_tilde: &DVector<f64>, xi: &DVector<f64>) -> Result<TrackingSolution> {
        check_dim("reference", self.reference_len(), r_tilde.len())?;
        check_dim("initial state", self.state_dim, xi.len())?;
        let free = &self.fz * xi;
        let dev = r_tilde - &free;
        let u = &self.track_gain * &dev;
        Ok(self.complete_tracking(u, xi, &free, &dev))
    }

    pub(crate) fn complete_tracking(
        &self,
        u: DVector<f64>,
        xi: &DVector<f64>,
        free: &DVector<f64>,
        dev: &DVector<f64>,
    ) -> TrackingSolution {
        let x = self.maps.apply(xi, &u);
        let z = &self.ez * &u + free;
        let value = quad(dev, &self.p);
        TrackingSolution { u, x, z, value }
    }

    /// `r = (𝒬 + P)⁻¹ P (Fz ξ − ν)`.
    pub fn plan_reference(&self, nu: &DVector<f64>, xi: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim("dual variable", self.reference_len(), nu.len())?;
        check_dim("initial state", self.state_dim, xi.len())?;
        Ok(&self.plan_gain * (&self.fz * xi - nu))
    }

    /// Plans with `ν`, tracks `r + ν` and returns `(r, tracking, r − 𝒞x)`.
    pub fn plan_and_track(
        &self,
        nu: &DVector<f64>,
        xi: &DVector<f64>,
    ) -> Result<(DVector<f64>, TrackingSolution, DVector<f64>)> {
        let r = self.plan_reference(nu, xi)?;
        let sol = self.optimal_tracking(&(&r + nu), xi)?;
        let residual = &r - &sol.z;
        Ok((r, sol, residual))
    }

    pub fn plan_solver(&self) -> &SpdSolver {
        &self.plan_solver
    }

    pub fn direct_optimum(&self, xi: &DVector<f64>) -> Result<DirectSolution> {
        check_dim("initial state", self.state_dim, xi.len())?;
        let u = -(&self.direct_gain * xi);
        let x = self.maps.apply(xi, &u);
        let cost = quad(xi, &self.value_star);
        Ok(DirectSolution { u, x, cost })
    }
}

/// Solves the redundant problem `min rᵀ𝒬r + uᵀ𝒭u` s.t. `r = 𝒞x`, `x_0 = ξ`
/// and the dynamics, as one dense KKT system. Independent of [`TrackingOracle`].
pub fn kkt_brute_force(problem: &LayeredProblem, xi: &DVector<f64>) -> Result<KktSolution> {
    if !problem.constraints().is_unconstrained() {
        return Err(Error::InvalidArgument(
            "brute-force KKT solve requires an unconstrained problem".into(),
        ));
    }
    let dx = problem.state_dim();
    let du = problem.input_dim();
    let dz = problem.output_dim();
    let horizon = problem.horizon();
    check_dim("initial state", dx, xi.len())?;
    let nr = problem.reference_len();
    let nx = problem.state_len();
    let nu = problem.input_len();
    let n = nr + nx + nu;
    let m = nr + nx;
    let c = problem.output().matrix(dx);
    let a = problem.system().a();
    let b = problem.system().b();

    let mut kkt = DMatrix::<f64>::zeros(n + m, n + m);
    let mut rhs = DVector::<f64>::zeros(n + m);
    kkt.view_mut((0, 0), (nr, nr)).copy_from(&(problem.stacked_q() * 2.0));
    kkt.view_mut((nr + nx, nr + nx), (nu, nu))
        .copy_from(&(problem.stacked_r() * 2.0));

    let mut cons = DMatrix::<f64>::zeros(m, n);
    for t in 0..=horizon {
        let row = t * dz;
        cons.view_mut((row, t * dz), (dz, dz)).fill_with_identity();
        cons.view_mut((row, nr + t * dx), (dz, dx)).copy_from(&(-&c));
    }
    cons.view_mut((nr, nr), (dx, dx)).fill_with_identity();
    rhs.rows_mut(n + nr, dx).copy_from(xi);
    for t in 0..horizon {
        let row = nr + (t + 1) * dx;
        cons.view_mut((row, nr + (t + 1) * dx), (dx, dx)).fill_with_identity();
        cons.view_mut((row, nr + t * dx), (dx, dx)).copy_from(&(-a));
        cons.view_mut((row, nr + nx + t * du), (dx, du)).copy_from(&(-b));
    }
    kkt.view_mut((0, n), (n, m)).copy_from(&cons.transpose());
    kkt.view_mut((n, 0), (m, n)).copy_from(&cons);

    let sol = kkt
        .clone()
        .lu()
        .solve(&rhs)
        .ok_or_else(|| Error::Degenerate("singular KKT matrix".into()))?;
    let residual = (&kkt * &sol - &rhs).amax();
    if !residual.is_finite() || residual > 1e-6 * (1.0 + rhs.amax()) {
        return Err(Error::Degenerate(format!("KKT solve residual {residual:.3e}")));
    }
    let r = sol.rows(0, nr).into_owned();
    let x = sol.rows(nr, nx).into_owned();
    let u = sol.rows(nr + nx, nu).into_owned();
    let nu_dual = sol.rows(n, nr).into_owned() / problem.rho();
    let objective = quad(&r, &problem.stacked_q()) + quad(&u, &problem.stacked_r());
    Ok(KktSolution {
        r,
        x,
        u,
        nu: nu_dual,
        objective,
    })
}
