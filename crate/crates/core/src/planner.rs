//! Box-constrained reference planning.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{symmetrize, SpdSolver};
use crate::oracle::{DirectSolution, TrackingOracle};
use crate::system::LayeredProblem;

/// `min ½zᵀMz + qᵀz` subject to `lower ≤ z ≤ upper`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxQp {
    pub m: DMatrix<f64>,
    pub q: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl BoxQp {
    pub fn new(m: DMatrix<f64>, q: DVector<f64>, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        Self {
            m,
            q,
            lower,
            upper,
            tol: 1e-9,
            max_iter: 1000,
        }
    }

    pub fn unbounded(m: DMatrix<f64>, q: DVector<f64>) -> Self {
        let n = q.len();
        Self::new(
            m,
            q,
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.m * z)[(0, 0)] + self.q.dot(z)
    }

    fn validate(&self) -> Result<()> {
        let n = self.q.len();
        check_dim("QP Hessian rows", n, self.m.nrows())?;
        check_dim("QP Hessian columns", n, self.m.ncols())?;
        check_dim("QP lower bound", n, self.lower.len())?;
        check_dim("QP upper bound", n, self.upper.len())?;
        for i in 0..n {
            let (l, u) = (self.lower[i], self.upper[i]);
            if l.is_nan() || u.is_nan() || l == f64::INFINITY || u == f64::NEG_INFINITY {
                return Err(Error::InvalidArgument(format!("invalid bound at index {i}")));
            }
            if l > u {
                return Err(Error::Infeasible(format!("empty box at index {i}: {l} > {u}")));
            }
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument("QP tolerance must be positive".into()));
        }
        Ok(())
    }

    fn project(&self, z: &mut DVector<f64>) {
        for i in 0..z.len() {
            z[i] = z[i].clamp(self.lower[i], self.upper[i]);
        }
    }

    /// `max_i |z_i − Π(z_i − g_i)|`; zero exactly at a KKT point.
    pub fn kkt_residual(&self, z: &DVector<f64>) -> f64 {
        let g = &self.m * z + &self.q;
        (0..z.len())
            .map(|i| (z[i] - (z[i] - g[i]).clamp(self.lower[i], self.upper[i])).abs())
            .fold(0.0, f64::max)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    Free,
    Lower,
    Upper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoxQpSolution {
    pub z: DVector<f64>,
    pub active_set: Vec<Bound>,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn solve_free(qp: &BoxQp, z: &DVector<f64>, working: &[Bound]) -> Option<DVector<f64>> {
    let free: Vec<usize> = (0..z.len()).filter(|&i| working[i] == Bound::Free).collect();
    let mut out = z.clone();
    for (i, w) in working.iter().enumerate() {
        match w {
            Bound::Lower => out[i] = qp.lower[i],
            Bound::Upper => out[i] = qp.upper[i],
            Bound::Free => {}
        }
    }
    if free.is_empty() {
        return Some(out);
    }
    let k = free.len();
    let mut mff = DMatrix::zeros(k, k);
    let mut rhs = DVector::zeros(k);
    for (a, &i) in free.iter().enumerate() {
        rhs[a] = -qp.q[i];
        for j in 0..z.len() {
            if working[j] != Bound::Free {
                rhs[a] -= qp.m[(i, j)] * out[j];
            }
        }
        for (b, &j) in free.iter().enumerate() {
            mff[(a, b)] = qp.m[(i, j)];
        }
    }
    let sol = mff.cholesky()?.solve(&rhs);
    for (a, &i) in free.iter().enumerate() {
        out[i] = sol[a];
    }
    Some(out)
}

/// Projected gradient with exact line search, then a primal active-set polish.
pub fn solve_box_qp(qp: &BoxQp) -> Result<BoxQpSolution> {
    qp.validate()?;
    let n = qp.q.len();
    let m = symmetrize(&qp.m);
    if m.clone().cholesky().is_none() {
        return Err(Error::InvalidArgument("QP Hessian must be positive definite".into()));
    }
    let qp = BoxQp { m, ..qp.clone() };
    let mut z = DVector::zeros(n);
    qp.project(&mut z);

    let lipschitz = (0..n)
        .map(|i| qp.m.row(i).iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let pg_iters = qp.max_iter.min(50 + 2 * n);
    let mut iterations = 0;
    for _ in 0..pg_iters {
        iterations += 1;
        let g = &qp.m * &z + &qp.q;
        let mut target = &z - &g / lipschitz;
        qp.project(&mut target);
        let d = target - &z;
        let curv = (d.transpose() * &qp.m * &d)[(0, 0)];
        if curv <= 0.0 || d.amax() <= qp.tol * 1e-3 {
            break;
        }
        let alpha = (-g.dot(&d) / curv).clamp(0.0, 1.0);
        z += d * alpha;
    }

    let g = &qp.m * &z + &qp.q;
    let mut working: Vec<Bound> = (0..n)
        .map(|i| {
            if z[i] <= qp.lower[i] && g[i] > 0.0 {
                Bound::Lower
            } else if z[i] >= qp.upper[i] && g[i] < 0.0 {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    for i in 0..n {
        match working[i] {
            Bound::Lower => z[i] = qp.lower[i],
            Bound::Upper => z[i] = qp.upper[i],
            Bound::Free => {}
        }
    }

    let mut best = z.clone();
    let mut best_res = qp.kkt_residual(&z);
    let mut converged = false;
    let feas_tol = 1e-14;
    while iterations < qp.max_iter {
        iterations += 1;
        let Some(cand) = solve_free(&qp, &z, &working) else {
            break;
        };
        // Largest feasible step toward the subspace minimizer.
        let mut alpha = 1.0;
        let mut blocking = None;
        for i in 0..n {
            if working[i] != Bound::Free {
                continue;
            }
            let d = cand[i] - z[i];
            let scale = feas_tol * (1.0 + z[i].abs());
            if cand[i] < qp.lower[i] - scale && d < 0.0 {
                let a = (qp.lower[i] - z[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Lower));
                }
            } else if cand[i] > qp.upper[i] + scale && d > 0.0 {
                let a = (qp.upper[i] - z[i]) / d;
                if a < alpha {
                    alpha = a;
                    blocking = Some((i, Bound::Upper));
                }
            }
        }
        if let Some((i, side)) = blocking {
            let alpha = alpha.max(0.0);
            z = &z + (&cand - &z) * alpha;
            working[i] = side;
            z[i] = if side == Bound::Lower { qp.lower[i] } else { qp.upper[i] };
            qp.project(&mut z);
            continue;
        }
        z = cand;
        qp.project(&mut z);
        let g = &qp.m * &z + &qp.q;
        let mut worst = None;
        let mut worst_val = 0.0;
        for i in 0..n {
            let violation = match working[i] {
                Bound::Lower => -g[i],
                Bound::Upper => g[i],
                Bound::Free => continue,
            };
            if violation > worst_val {
                worst_val = violation;
                worst = Some(i);
            }
        }
        let res = qp.kkt_residual(&z);
        if res < best_res {
            best_res = res;
            best = z.clone();
        }
        match worst {
            Some(i) if worst_val > qp.tol * 1e-3 => working[i] = Bound::Free,
            _ => {
                converged = res <= qp.tol;
                break;
            }
        }
    }
    let res = qp.kkt_residual(&z);
    if res <= best_res {
        best = z;
        best_res = res;
    }
    let active_set = (0..n)
        .map(|i| {
            if best[i] == qp.lower[i] {
                Bound::Lower
            } else if best[i] == qp.upper[i] {
                Bound::Upper
            } else {
                Bound::Free
            }
        })
        .collect();
    Ok(BoxQpSolution {
        objective: qp.objective(&best),
        converged: converged || best_res <= qp.tol,
        z: best,
        active_set,
        kkt_residual: best_res,
        iterations,
    })
}

/// `p(r̃, ξ) = r̃ᵀ rr r̃ + 2 r̃ᵀ rxi ξ + ξᵀ xixi ξ`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueQuadratic {
    pub rr: DMatrix<f64>,
    pub rxi: DMatrix<f64>,
    pub xixi: DMatrix<f64>,
}

impl ValueQuadratic {
    /// The exact tracking value `(Fξ − r̃)ᵀ P (Fξ − r̃)`.
    pub fn from_oracle(oracle: &TrackingOracle) -> Self {
        let pf = oracle.p() * oracle.fz();
        Self {
            rr: oracle.p().clone(),
            xixi: symmetrize(&(oracle.fz().transpose() * &pf)),
            rxi: -pf,
        }
    }

    pub fn eval(&self, r_tilde: &DVector<f64>, xi: &DVector<f64>) -> f64 {
        (r_tilde.transpose() * &self.rr * r_tilde)[(0, 0)]
            + 2.0 * (r_tilde.transpose() * &self.rxi * xi)[(0, 0)]
            + (xi.transpose() * &self.xixi * xi)[(0, 0)]
    }
}

/// Planner for a fixed problem and value; caches the QP Hessian.
#[derive(Clone, Debug)]
pub struct Planner {
    value: ValueQuadratic,
    m: DMatrix<f64>,
    solver: SpdSolver,
    lower: DVector<f64>,
    upper: DVector<f64>,
    unconstrained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlanResult {
    pub r: DVector<f64>,
    pub kkt_residual: f64,
    pub converged: bool,
    pub active_constraints: usize,
}

impl Planner {
    pub fn new(problem: &LayeredProblem, value: &ValueQuadratic) -> Result<Self> {
        let n = problem.reference_len();
        check_dim("value rr rows", n, value.rr.nrows())?;
        check_dim("value rr columns", n, value.rr.ncols())?;
        check_dim("value rxi rows", n, value.rxi.nrows())?;
        check_dim("value rxi columns", problem.state_dim(), value.rxi.ncols())?;
        let m = symmetrize(&((problem.stacked_q() + &value.rr) * 2.0));
        let solver = SpdSolver::new(&m, "planner Hessian")?;
        let (lower, upper) = problem.constraints().effective_bounds(problem.output_dim());
        let unconstrained = lower.iter().all(|v| *v == f64::NEG_INFINITY) && upper.iter().all(|v| *v == f64::INFINITY);
        Ok(Self {
            value: value.clone(),
            m,
            solver,
            lower,
            upper,
            unconstrained,
        })
    }

    pub fn value(&self) -> &ValueQuadratic {
        &self.value
    }

    /// Minimizes `rᵀ𝒬r + p(r + ν, ξ)` over the box.
    pub fn plan(&self, nu: &DVector<f64>, xi: &DVector<f64>) -> Result<PlanResult> {
        check_dim("dual prediction", self.lower.len(), nu.len())?;
        check_dim("initial state", self.value.rxi.ncols(), xi.len())?;
        let q = (&self.value.rr * nu + &self.value.rxi * xi) * 2.0;
        if self.unconstrained {
            return Ok(PlanResult {
                r: -self.solver.solve_vec(&q),
                kkt_residual: 0.0,
                converged: true,
                active_constraints: 0,
            });
        }
        let qp = BoxQp::new(self.m.clone(), q, self.lower.clone(), self.upper.clone());
        let sol = solve_box_qp(&qp)?;
        Ok(PlanResult {
            active_constraints: sol.active_set.iter().filter(|b| **b != Bound::Free).count(),
            r: sol.z,
            kkt_residual: sol.kkt_residual,
            converged: sol.converged,
        })
    }

    pub fn plan_heuristic(&self, xi: &DVector<f64>) -> Result<PlanResult> {
        self.plan(&DVector::zeros(self.lower.len()), xi)
    }
}

pub fn plan_constrained(
    problem: &LayeredProblem,
    value: &ValueQuadratic,
    nu_hat: &DVector<f64>,
    xi: &DVector<f64>,
) -> Result<DVector<f64>> {
    Ok(Planner::new(problem, value)?.plan(nu_hat, xi)?.r)
}

pub fn plan_heuristic(problem: &LayeredProblem, value: &ValueQuadratic, xi: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Planner::new(problem, value)?.plan_heuristic(xi)?.r)
}

/// Optimum of `min rᵀ𝒬r + uᵀ𝒭u` with `r = 𝒞x` inside the box, via the
/// Lagrangian dual (a box QP over nonnegative multipliers).
pub fn constrained_optimum(problem: &LayeredProblem, oracle: &TrackingOracle, xi: &DVector<f64>) -> Result<DirectSolution> {
    check_dim("initial state", problem.state_dim(), xi.len())?;
    check_dim("oracle references", problem.reference_len(), oracle.reference_len())?;
    let (lower, upper) = problem.constraints().effective_bounds(problem.output_dim());
    let ez = oracle.ez();
    let free = oracle.fz() * xi;
    // Rows `G u ≤ h` for every finite bound.
    let mut g_rows = Vec::new();
    let mut h = Vec::new();
    for i in 0..lower.len() {
        if lower[i].is_finite() {
            g_rows.push(-ez.row(i).into_owned());
            h.push(free[i] - lower[i]);
        }
        if upper[i].is_finite() {
            g_rows.push(ez.row(i).into_owned());
            h.push(upper[i] - free[i]);
        }
    }
    if g_rows.is_empty() {
        return oracle.direct_optimum(xi);
    }
    let q_stack = problem.stacked_q();
    let hess = symmetrize(&((ez.transpose() * &q_stack * ez + problem.stacked_r()) * 2.0));
    let lin = ez.transpose() * &q_stack * &free * 2.0;
    let hs = SpdSolver::new(&hess, "constrained optimum Hessian")?;
    let gmat = DMatrix::from_rows(&g_rows);
    let h = DVector::from_vec(h);
    let hinv_gt = hs.solve(&gmat.transpose());
    let mut dual_m = symmetrize(&(&gmat * &hinv_gt));
    let ridge = 1e-12 * (1.0 + dual_m.diagonal().amax());
    for i in 0..dual_m.nrows() {
        dual_m[(i, i)] += ridge;
    }
    let dual_q = &gmat * hs.solve_vec(&lin) + &h;
    let k = h.len();
    let mut qp = BoxQp::new(
        dual_m,
        dual_q,
        DVector::zeros(k),
        DVector::from_element(k, f64::INFINITY),
    );
    qp.max_iter = 5000;
    let lambda = solve_box_qp(&qp)?;
    let worst = (&gmat * -hs.solve_vec(&(&lin + gmat.transpose() * &lambda.z)) - &h).max();
    if worst > 1e-6 {
        return Err(Error::Infeasible(format!("state constraints violated by {worst:.3e} at the optimum")));
    }
    let u = -hs.solve_vec(&(&lin + gmat.transpose() * &lambda.z));
    let x = oracle.maps().apply(xi, &u);
    let z = ez * &u + &free;
    let cost = (z.transpose() * &q_stack * &z)[(0, 0)] + (u.transpose() * problem.stacked_r() * &u)[(0, 0)];
    Ok(DirectSolution { u, x, cost })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{randn_matrix, randn_vector};
    use crate::system::{ConstraintSpec, LtiSystem, sample_system};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Minimum over every free/lower/upper pattern whose subspace minimizer is feasible.
    pub(crate) fn brute_force(qp: &BoxQp) -> f64 {
        let n = qp.q.len();
        let mut best = f64::INFINITY;
        let mut pattern = vec![Bound::Free; n];
        fn rec(qp: &BoxQp, i: usize, pattern: &mut Vec<Bound>, best: &mut f64) {
            let n = qp.q.len();
            if i == n {
                if let Some(z) = solve_free(qp, &DVector::zeros(n), pattern) {
                    let ok = (0..n).all(|j| z[j] >= qp.lower[j] - 1e-12 && z[j] <= qp.upper[j] + 1e-12);
                    if ok {
                        *best = best.min(qp.objective(&z));
                    }
                }
                return;
            }
            for b in [Bound::Free, Bound::Lower, Bound::Upper] {
                let finite = match b {
                    Bound::Free => true,
                    Bound::Lower => qp.lower[i].is_finite(),
                    Bound::Upper => qp.upper[i].is_finite(),
                };
                if finite {
                    pattern[i] = b;
                    rec(qp, i + 1, pattern, best);
                }
            }
            pattern[i] = Bound::Free;
        }
        rec(qp, 0, &mut pattern, &mut best);
        best
    }

    pub(crate) fn random_qp<R: Rng>(rng: &mut R, n: usize) -> BoxQp {
        let a = randn_matrix(rng, n, n);
        let m = &a * a.transpose() + DMatrix::identity(n, n) * 0.1;
        let q = randn_vector(rng, n) * 2.0;
        let mut lower = DVector::zeros(n);
        let mut upper = DVector::zeros(n);
        for i in 0..n {
            let c: f64 = rng.random_range(-1.0..1.0);
            let w: f64 = rng.random_range(0.0..1.0);
            lower[i] = if rng.random_bool(0.8) { c - w } else { f64::NEG_INFINITY };
            upper[i] = if rng.random_bool(0.8) { c + w } else { f64::INFINITY };
        }
        BoxQp::new(m, q, lower, upper)
    }

    #[test]
    fn interior_solution() {
        let s = solve_box_qp(&BoxQp::unbounded(DMatrix::identity(2, 2), DVector::from_vec(vec![-1.0, -2.0]))).unwrap();
        assert_abs_diff_eq!(s.z, DVector::from_vec(vec![1.0, 2.0]), epsilon = 1e-12);
        assert!(s.converged && s.kkt_residual <= 1e-9);
    }

    #[test]
    fn clamped_scalar() {
        // (z − 1)² = ½·2z² − 2z + 1
        let qp = BoxQp::new(
            DMatrix::from_element(1, 1, 2.0),
            DVector::from_element(1, -2.0),
            DVector::from_element(1, f64::NEG_INFINITY),
            DVector::from_element(1, 0.5),
        );
        let s = solve_box_qp(&qp).unwrap();
        assert_eq!(s.z[0], 0.5);
        assert_eq!(s.active_set, vec![Bound::Upper]);
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..40 {
            let n = 1 + trial % 8;
            let qp = random_qp(&mut rng, n);
            let s = solve_box_qp(&qp).unwrap();
            let bf = brute_force(&qp);
            assert!((s.objective - bf).abs() <= 1e-8 * (1.0 + bf.abs()), "trial {trial}: {} vs {bf}", s.objective);
            assert!(s.kkt_residual <= 1e-9 && s.converged);
            for i in 0..n {
                assert!(s.z[i] >= qp.lower[i] && s.z[i] <= qp.upper[i]);
            }
        }
    }

    #[test]
    fn tightening_never_helps() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let mut qp = random_qp(&mut rng, 6);
            let loose = solve_box_qp(&qp).unwrap().objective;
            for i in 0..6 {
                if qp.lower[i].is_finite() {
                    qp.lower[i] += 0.1;
                    qp.upper[i] = qp.upper[i].max(qp.lower[i]);
                }
            }
            assert!(solve_box_qp(&qp).unwrap().objective >= loose - 1e-12);
        }
    }

    #[test]
    fn rejects_empty_box_and_indefinite() {
        let qp = BoxQp::new(
            DMatrix::identity(1, 1),
            DVector::zeros(1),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 0.0),
        );
        assert!(matches!(solve_box_qp(&qp), Err(Error::Infeasible(_))));
        let qp = BoxQp::unbounded(-DMatrix::identity(1, 1), DVector::zeros(1));
        assert!(solve_box_qp(&qp).is_err());
    }

    fn scalar_problem() -> LayeredProblem {
        let one = DMatrix::from_element(1, 1, 1.0);
        let sys = LtiSystem::new(one.clone(), one.clone()).unwrap();
        LayeredProblem::new(sys, 1, one.clone(), one, 2.0).unwrap()
    }

    #[test]
    fn unconstrained_plan_matches_oracle() {
        let sys = sample_system(3, 2, 2, 1.0).unwrap().system;
        let p = LayeredProblem::new(sys, 6, DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.1, 2.0).unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        let v = ValueQuadratic::from_oracle(&o);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let xi = randn_vector(&mut rng, 2);
        let nu = randn_vector(&mut rng, o.reference_len());
        let r = plan_constrained(&p, &v, &nu, &xi).unwrap();
        assert_abs_diff_eq!(r, o.plan_reference(&nu, &xi).unwrap(), epsilon = 1e-8);
        let rt = randn_vector(&mut rng, o.reference_len());
        let sol = o.optimal_tracking(&rt, &xi).unwrap();
        assert_abs_diff_eq!(v.eval(&rt, &xi), sol.value, epsilon = 1e-9 * (1.0 + sol.value));
    }

    #[test]
    fn scalar_constrained_plan() {
        let mut lower = DVector::from_element(2, f64::NEG_INFINITY);
        lower[1] = 0.4;
        let cons = ConstraintSpec {
            lower,
            upper: DVector::from_element(2, f64::INFINITY),
            free_initial: true,
        };
        let p = scalar_problem().constrained(cons).unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        let v = ValueQuadratic::from_oracle(&o);
        let planner = Planner::new(&p, &v).unwrap();
        let res = planner.plan(&DVector::zeros(2), &DVector::from_element(1, 1.0)).unwrap();
        assert_abs_diff_eq!(res.r, DVector::from_vec(vec![0.5, 0.4]), epsilon = 1e-12);
        assert_eq!(res.active_constraints, 1);
        assert_eq!(planner.plan_heuristic(&DVector::from_element(1, 1.0)).unwrap(), res);
    }

    #[test]
    fn zero_state_cost_heuristic_equals_dual_plan() {
        let sys = sample_system(2, 2, 1, 1.0).unwrap().system;
        let p = LayeredProblem::new(sys, 4, DMatrix::zeros(2, 2), DMatrix::identity(1, 1), 2.0)
            .unwrap()
            .constrained(ConstraintSpec::uniform_lower(4, 2, -0.05))
            .unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        let v = ValueQuadratic::from_oracle(&o);
        let xi = DVector::from_vec(vec![0.3, -0.7]);
        let nu = o.theta_star() * &xi;
        assert_eq!(plan_constrained(&p, &v, &nu, &xi).unwrap(), plan_heuristic(&p, &v, &xi).unwrap());
    }

    #[test]
    fn constrained_optimum_is_feasible_and_sound() {
        let sys = sample_system(5, 2, 2, 0.995).unwrap().system;
        let base = LayeredProblem::new(sys, 10, DMatrix::identity(2, 2), DMatrix::identity(2, 2) * 0.01, 2.0).unwrap();
        let p = base.clone().constrained(ConstraintSpec::uniform_lower(10, 2, -0.05)).unwrap();
        let o = TrackingOracle::build(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let xi = randn_vector(&mut rng, 2);
            let c = constrained_optimum(&p, &o, &xi).unwrap();
            let un = o.direct_optimum(&xi).unwrap();
            assert!(c.cost >= un.cost - 1e-9);
            for i in 2..c.x.len() {
                assert!(c.x[i] >= -0.05 - 1e-7);
            }
        }
    }
}
