//! Plants, finite-horizon problems and their stacked representations.
//!
//! Trajectories are stacked column vectors: `x = (x_0, …, x_T)`,
//! `u = (u_0, …, u_{T-1})` and `r = (r_0, …, r_T)`. The stacked state cost
//! spans all `T + 1` blocks, including the fixed initial state.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_dim, Error, Result};
use crate::linalg::{kron_eye, randn_matrix, randn_vector, spectral_radius};

/// Discrete-time plant `x_{t+1} = A x_t + B u_t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LtiSystem {
    a: DMatrix<f64>,
    b: DMatrix<f64>,
}

impl LtiSystem {
    pub fn new(a: DMatrix<f64>, b: DMatrix<f64>) -> Result<Self> {
        if a.nrows() == 0 || b.ncols() == 0 {
            return Err(Error::Config("system dimensions must be positive".into()));
        }
        check_dim("A columns", a.nrows(), a.ncols())?;
        check_dim("B rows", a.nrows(), b.nrows())?;
        if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
            return Err(Error::Config("system matrices must be finite".into()));
        }
        Ok(Self { a, b })
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn spectral_radius(&self) -> f64 {
        spectral_radius(&self.a)
    }

    pub fn step(&self, x: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.a * x + &self.b * u
    }
}

/// Result of [`sample_system`]; `seed` is the seed that produced the accepted draw.
#[derive(Clone, Debug)]
pub struct SampledSystem {
    pub system: LtiSystem,
    pub seed: u64,
    pub resamples: u32,
}

/// Draws `A` and `B` with i.i.d. standard normal entries and rescales `A` to
/// the requested spectral radius. Nilpotent draws are rejected and redrawn
/// from the next seed.
pub fn sample_system(
    seed: u64,
    state_dim: usize,
    input_dim: usize,
    spectral_radius_target: f64,
) -> Result<SampledSystem> {
    if !(spectral_radius_target > 0.0) || !spectral_radius_target.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "target spectral radius must be positive, got {spectral_radius_target}"
        )));
    }
    if state_dim == 0 || input_dim == 0 {
        return Err(Error::Config("system dimensions must be positive".into()));
    }
    let mut resamples = 0;
    let mut current = seed;
    loop {
        let mut rng = ChaCha8Rng::seed_from_u64(current);
        let a = randn_matrix(&mut rng, state_dim, state_dim);
        let b = randn_matrix(&mut rng, state_dim, input_dim);
        let radius = spectral_radius(&a);
        if radius >= 1e-12 {
            let a = a * (spectral_radius_target / radius);
            return Ok(SampledSystem {
                system: LtiSystem::new(a, b)?,
                seed: current,
                resamples,
            });
        }
        resamples += 1;
        current = current.wrapping_add(1);
        if resamples > 1000 {
            return Err(Error::Degenerate("repeatedly sampled nilpotent A".into()));
        }
    }
}

/// Linear map `z_t = C x_t` selecting the planned coordinates.
#[derive(Clone, Debug, PartialEq, Default)]
pub enum OutputMap {
    #[default]
    Identity,
    Linear(DMatrix<f64>),
}

impl OutputMap {
    pub fn output_dim(&self, state_dim: usize) -> usize {
        match self {
            Self::Identity => state_dim,
            Self::Linear(c) => c.nrows(),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, Self::Identity)
    }

    pub fn matrix(&self, state_dim: usize) -> DMatrix<f64> {
        match self {
            Self::Identity => DMatrix::identity(state_dim, state_dim),
            Self::Linear(c) => c.clone(),
        }
    }

    /// Applies `C` to a single state.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match self {
            Self::Identity => x.clone(),
            Self::Linear(c) => c * x,
        }
    }

    /// Applies `I ⊗ C` to the rows of a stacked matrix with `blocks` state blocks.
    pub fn apply_stacked(&self, m: &DMatrix<f64>, blocks: usize) -> DMatrix<f64> {
        match self {
            Self::Identity => m.clone(),
            Self::Linear(c) => {
                let (dz, dx) = c.shape();
                let mut out = DMatrix::zeros(blocks * dz, m.ncols());
                for t in 0..blocks {
                    let rows = m.rows(t * dx, dx);
                    out.rows_mut(t * dz, dz).copy_from(&(c * rows));
                }
                out
            }
        }
    }

    pub fn apply_stacked_vec(&self, x: &DVector<f64>, blocks: usize) -> DVector<f64> {
        match self {
            Self::Identity => x.clone(),
            Self::Linear(c) => {
                let (dz, dx) = c.shape();
                let mut out = DVector::zeros(blocks * dz);
                for t in 0..blocks {
                    out.rows_mut(t * dz, dz)
                        .copy_from(&(c * x.rows(t * dx, dx)));
                }
                out
            }
        }
    }
}

/// Box bounds on the stacked reference. Infinite entries mean "unbounded".
#[derive(Clone, Debug, PartialEq)]
pub struct ConstraintSpec {
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Excludes the `t = 0` block from the bounds.
    pub free_initial: bool,
}

impl ConstraintSpec {
    pub fn unconstrained(len: usize) -> Self {
        Self {
            lower: DVector::from_element(len, f64::NEG_INFINITY),
            upper: DVector::from_element(len, f64::INFINITY),
            free_initial: true,
        }
    }

    /// Same lower bound on every coordinate for `1 ≤ t ≤ T`.
    pub fn uniform_lower(horizon: usize, output_dim: usize, bound: f64) -> Self {
        let len = (horizon + 1) * output_dim;
        Self {
            lower: DVector::from_element(len, bound),
            upper: DVector::from_element(len, f64::INFINITY),
            free_initial: true,
        }
    }

    pub fn len(&self) -> usize {
        self.lower.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lower.is_empty()
    }

    pub fn is_unconstrained(&self) -> bool {
        self.lower.iter().all(|l| *l == f64::NEG_INFINITY)
            && self.upper.iter().all(|u| *u == f64::INFINITY)
    }

    pub fn validate(&self, len: usize) -> Result<()> {
        check_dim("constraint lower bound", len, self.lower.len())?;
        check_dim("constraint upper bound", len, self.upper.len())?;
        for (i, (l, u)) in self.lower.iter().zip(self.upper.iter()).enumerate() {
            if l.is_nan() || u.is_nan() || *l == f64::INFINITY || *u == f64::NEG_INFINITY {
                return Err(Error::Config(format!("invalid bound at index {i}")));
            }
            if l > u {
                return Err(Error::Infeasible(format!(
                    "lower bound {l} exceeds upper bound {u} at index {i}"
                )));
            }
        }
        Ok(())
    }

    /// Bounds with the initial block released when `free_initial` is set.
    pub fn effective_bounds(&self, output_dim: usize) -> (DVector<f64>, DVector<f64>) {
        let mut lo = self.lower.clone();
        let mut hi = self.upper.clone();
        if self.free_initial {
            for i in 0..output_dim.min(lo.len()) {
                lo[i] = f64::NEG_INFINITY;
                hi[i] = f64::INFINITY;
            }
        }
        (lo, hi)
    }
}

/// Finite-horizon problem: quadratic costs, penalty `rho`, output map and box constraints.
#[derive(Clone, Debug)]
pub struct LayeredProblem {
    system: LtiSystem,
    horizon: usize,
    q: DMatrix<f64>,
    r: DMatrix<f64>,
    rho: f64,
    output: OutputMap,
    constraints: ConstraintSpec,
}

impl LayeredProblem {
    pub fn new(
        system: LtiSystem,
        horizon: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        rho: f64,
    ) -> Result<Self> {
        Self::with_output(system, horizon, q, r, rho, OutputMap::Identity)
    }

    pub fn with_output(
        system: LtiSystem,
        horizon: usize,
        q: DMatrix<f64>,
        r: DMatrix<f64>,
        rho: f64,
        output: OutputMap,
    ) -> Result<Self> {
        if horizon == 0 {
            return Err(Error::Config("horizon must be positive".into()));
        }
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::Config(format!("penalty rho must be positive, got {rho}")));
        }
        let dx = system.state_dim();
        if let OutputMap::Linear(c) = &output {
            check_dim("output map columns", dx, c.ncols())?;
            if c.nrows() == 0 || c.nrows() > dx {
                return Err(Error::Config(format!(
                    "output dimension must be in 1..={dx}, got {}",
                    c.nrows()
                )));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config("output map must be finite".into()));
            }
        }
        let dz = output.output_dim(dx);
        check_dim("Q rows", dz, q.nrows())?;
        check_dim("Q columns", dz, q.ncols())?;
        check_dim("R rows", system.input_dim(), r.nrows())?;
        check_dim("R columns", system.input_dim(), r.ncols())?;
        let asym = |m: &DMatrix<f64>| (m - m.transpose()).abs().max();
        if asym(&q) > 1e-12 * (1.0 + q.abs().max()) || asym(&r) > 1e-12 * (1.0 + r.abs().max()) {
            return Err(Error::Config("Q and R must be symmetric".into()));
        }
        let (q_min, _) = crate::linalg::sym_eigen_range(&q);
        if q_min < -1e-12 {
            return Err(Error::Config("Q must be positive semidefinite".into()));
        }
        let (r_min, _) = crate::linalg::sym_eigen_range(&r);
        if r_min <= 0.0 {
            return Err(Error::Config("R must be positive definite".into()));
        }
        let constraints = ConstraintSpec::unconstrained((horizon + 1) * dz);
        Ok(Self {
            system,
            horizon,
            q,
            r,
            rho,
            output,
            constraints,
        })
    }

    pub fn constrained(mut self, constraints: ConstraintSpec) -> Result<Self> {
        constraints.validate(self.reference_len())?;
        self.constraints = constraints;
        Ok(self)
    }

    pub fn with_rho(&self, rho: f64) -> Result<Self> {
        let p = Self::with_output(
            self.system.clone(),
            self.horizon,
            self.q.clone(),
            self.r.clone(),
            rho,
            self.output.clone(),
        )?;
        p.constrained(self.constraints.clone())
    }

    pub fn system(&self) -> &LtiSystem {
        &self.system
    }
    pub fn horizon(&self) -> usize {
        self.horizon
    }
    pub fn q(&self) -> &DMatrix<f64> {
        &self.q
    }
    pub fn r(&self) -> &DMatrix<f64> {
        &self.r
    }
    pub fn rho(&self) -> f64 {
        self.rho
    }
    pub fn output(&self) -> &OutputMap {
        &self.output
    }
    pub fn constraints(&self) -> &ConstraintSpec {
        &self.constraints
    }
    pub fn state_dim(&self) -> usize {
        self.system.state_dim()
    }
    pub fn input_dim(&self) -> usize {
        self.system.input_dim()
    }
    pub fn output_dim(&self) -> usize {
        self.output.output_dim(self.state_dim())
    }
    /// `(T + 1) d_x`
    pub fn state_len(&self) -> usize {
        (self.horizon + 1) * self.state_dim()
    }
    /// `T d_u`
    pub fn input_len(&self) -> usize {
        self.horizon * self.input_dim()
    }
    /// `(T + 1) d_z`
    pub fn reference_len(&self) -> usize {
        (self.horizon + 1) * self.output_dim()
    }

    /// Block-diagonal state cost with `T + 1` copies of `Q`.
    pub fn stacked_q(&self) -> DMatrix<f64> {
        kron_eye(self.horizon + 1, &self.q)
    }

    /// Block-diagonal input cost with `T` copies of `R`.
    pub fn stacked_r(&self) -> DMatrix<f64> {
        kron_eye(self.horizon, &self.r)
    }

    pub fn sample_initial<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        randn_vector(rng, self.state_dim())
    }
}

/// A stacked state/input/reference triple.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub x: DVector<f64>,
    pub u: DVector<f64>,
    pub r: DVector<f64>,
}

impl Trajectory {
    pub fn state(&self, t: usize, dx: usize) -> DVector<f64> {
        self.x.rows(t * dx, dx).into_owned()
    }
}

/// `x = E u + F ξ`.
#[derive(Clone, Debug, PartialEq)]
pub struct StackedMaps {
    pub e: DMatrix<f64>,
    pub f: DMatrix<f64>,
}

impl StackedMaps {
    pub fn build(system: &LtiSystem, horizon: usize) -> Self {
        let dx = system.state_dim();
        let du = system.input_dim();
        let mut powers = Vec::with_capacity(horizon + 1);
        powers.push(DMatrix::<f64>::identity(dx, dx));
        for t in 1..=horizon {
            let next = system.a() * &powers[t - 1];
            powers.push(next);
        }
        let mut f = DMatrix::zeros((horizon + 1) * dx, dx);
        for (t, p) in powers.iter().enumerate() {
            f.view_mut((t * dx, 0), (dx, dx)).copy_from(p);
        }
        // A^k B for k = 0..T-1
        let impulse: Vec<DMatrix<f64>> = powers[..horizon].iter().map(|p| p * system.b()).collect();
        let mut e = DMatrix::zeros((horizon + 1) * dx, horizon * du);
        for t in 1..=horizon {
            for s in 0..t {
                e.view_mut((t * dx, s * du), (dx, du))
                    .copy_from(&impulse[t - 1 - s]);
            }
        }
        Self { e, f }
    }

    pub fn apply(&self, xi: &DVector<f64>, u: &DVector<f64>) -> DVector<f64> {
        &self.e * u + &self.f * xi
    }
}

pub fn build_stacked_maps(problem: &LayeredProblem) -> StackedMaps {
    StackedMaps::build(problem.system(), problem.horizon())
}

/// Simulates the plant from `xi` under the stacked inputs. The reference
/// slot is filled with the executed outputs `C x`.
pub fn rollout(problem: &LayeredProblem, xi: &DVector<f64>, inputs: &DVector<f64>) -> Result<Trajectory> {
    let dx = problem.state_dim();
    let du = problem.input_dim();
    check_dim("initial state", dx, xi.len())?;
    check_dim("stacked inputs", problem.input_len(), inputs.len())?;
    let mut x = DVector::zeros(problem.state_len());
    x.rows_mut(0, dx).copy_from(xi);
    for t in 0..problem.horizon() {
        let xt = x.rows(t * dx, dx).into_owned();
        let ut = inputs.rows(t * du, du).into_owned();
        let next = problem.system().step(&xt, &ut);
        x.rows_mut((t + 1) * dx, dx).copy_from(&next);
    }
    let r = problem.output().apply_stacked_vec(&x, problem.horizon() + 1);
    Ok(Trajectory {
        x,
        u: inputs.clone(),
        r,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CostBreakdown {
    /// `rᵀ𝒬r`
    pub state_cost: f64,
    /// `uᵀ𝒭u`
    pub input_cost: f64,
    /// `(ρ/2)‖r + ν − 𝒞x‖²`
    pub tracking_penalty: f64,
}

pub fn eval_costs(
    problem: &LayeredProblem,
    traj: &Trajectory,
    nu: Option<&DVector<f64>>,
) -> Result<CostBreakdown> {
    check_dim("trajectory states", problem.state_len(), traj.x.len())?;
    check_dim("trajectory inputs", problem.input_len(), traj.u.len())?;
    check_dim("trajectory reference", problem.reference_len(), traj.r.len())?;
    let blocks = problem.horizon() + 1;
    let dz = problem.output_dim();
    let du = problem.input_dim();
    let mut state_cost = 0.0;
    for t in 0..blocks {
        let rt = traj.r.rows(t * dz, dz);
        state_cost += (rt.transpose() * problem.q() * rt)[(0, 0)];
    }
    let mut input_cost = 0.0;
    for t in 0..problem.horizon() {
        let ut = traj.u.rows(t * du, du);
        input_cost += (ut.transpose() * problem.r() * ut)[(0, 0)];
    }
    let z = problem.output().apply_stacked_vec(&traj.x, blocks);
    let mut residual = &traj.r - z;
    if let Some(nu) = nu {
        check_dim("dual variable", problem.reference_len(), nu.len())?;
        residual += nu;
    }
    Ok(CostBreakdown {
        state_cost,
        input_cost,
        tracking_penalty: 0.5 * problem.rho() * residual.norm_squared(),
    })
}
