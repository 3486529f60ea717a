//! Primal-dual interior-point solver for smooth nonlinear programs
//!
//! ```text
//! min f(x)  s.t.  cl <= c(x) <= cu,  xl <= x <= xu
//! ```
//!
//! Rows with `cl == cu` are equalities; the others get a slack variable. Bounds
//! are handled by a log barrier with a monotone barrier-parameter schedule.
//! Steps come from the full primal-dual Newton system, regularized until the
//! computed direction has positive curvature, and are globalized with a
//! filter line search with second-order corrections.

use faer::prelude::Solve;
use faer::sparse::{SparseColMat, Triplet};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

/// A smooth NLP with dense derivatives.
pub trait NlpProblem {
    fn num_variables(&self) -> usize;
    fn num_constraints(&self) -> usize;
    /// Variable bounds, `±INFINITY` for none.
    fn variable_bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn constraint_bounds(&self) -> (DVector<f64>, DVector<f64>);
    fn objective(&self, x: &DVector<f64>) -> f64;
    fn gradient(&self, x: &DVector<f64>) -> DVector<f64>;
    fn constraints(&self, x: &DVector<f64>) -> DVector<f64>;
    /// `m × n` constraint Jacobian.
    fn jacobian(&self, x: &DVector<f64>) -> DMatrix<f64>;
    /// Hessian of `sigma f + lambdaᵀ c` (full symmetric).
    fn hessian(&self, x: &DVector<f64>, sigma: f64, lambda: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlpOptions {
    /// Scaled optimality tolerance (dual infeasibility and complementarity).
    pub tol: f64,
    /// Absolute constraint-violation tolerance.
    pub constr_viol_tol: f64,
    pub max_iter: usize,
    pub mu_init: f64,
    pub bound_push: f64,
    pub verbose: bool,
}

impl Default for NlpOptions {
    fn default() -> Self {
        Self { tol: 1e-8, constr_viol_tol: 1e-9, max_iter: 300, mu_init: 0.1, bound_push: 1e-2, verbose: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NlpStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    NumericalFailure,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NlpResult {
    pub x: DVector<f64>,
    pub lambda: DVector<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub status: NlpStatus,
    /// Max constraint violation (bounds on `c` included).
    pub primal_inf: f64,
    /// Unscaled max-norm of the Lagrangian gradient.
    pub dual_inf: f64,
    pub complementarity: f64,
}

impl NlpResult {
    pub fn converged(&self) -> bool {
        self.status == NlpStatus::Converged
    }
}

const KAPPA_SIGMA: f64 = 1e10;
const GAMMA_THETA: f64 = 1e-5;
const GAMMA_PHI: f64 = 1e-8;
const DELTA: f64 = 1.0;
const S_THETA: f64 = 1.1;
const S_PHI: f64 = 2.3;
const ETA: f64 = 1e-4;

/// Index of a bounded quantity and which side.
#[derive(Clone, Copy)]
struct Bound {
    idx: usize,
    value: f64,
    lower: bool,
}

fn collect_bounds(l: &DVector<f64>, u: &DVector<f64>) -> Vec<Bound> {
    let mut out = Vec::new();
    for i in 0..l.len() {
        if l[i].is_finite() {
            out.push(Bound { idx: i, value: l[i], lower: true });
        }
        if u[i].is_finite() {
            out.push(Bound { idx: i, value: u[i], lower: false });
        }
    }
    out
}

/// Distance to the bound, positive inside.
fn slack_of(b: &Bound, v: &DVector<f64>) -> f64 {
    if b.lower {
        v[b.idx] - b.value
    } else {
        b.value - v[b.idx]
    }
}

fn push_inside(v: f64, l: f64, u: f64, kappa: f64) -> f64 {
    let mut lo = l;
    let mut hi = u;
    if l.is_finite() {
        lo = l + kappa * l.abs().max(1.0);
    }
    if u.is_finite() {
        hi = u - kappa * u.abs().max(1.0);
    }
    if l.is_finite() && u.is_finite() {
        let half = kappa * (u - l);
        lo = lo.min(l + half);
        hi = hi.max(u - half);
    }
    v.max(lo).min(hi)
}

struct Layout {
    ineq: Vec<usize>,
    /// Slack index per constraint row, or `None` for equalities.
    slack_of_row: Vec<Option<usize>>,
}

impl Layout {
    fn ns(&self) -> usize {
        self.ineq.len()
    }
}

/// Iterate of the primal-dual method.
#[derive(Clone)]
struct Iterate {
    x: DVector<f64>,
    s: DVector<f64>,
    lambda: DVector<f64>,
    /// Bound multipliers for `x` then `s`, aligned with `bounds_x` / `bounds_s`.
    zx: Vec<f64>,
    zs: Vec<f64>,
}

pub fn solve<P: NlpProblem + ?Sized>(problem: &P, x0: &DVector<f64>, options: &NlpOptions) -> NlpResult {
    let n = problem.num_variables();
    let m = problem.num_constraints();
    let (xl, xu) = problem.variable_bounds();
    let (cl, cu) = problem.constraint_bounds();
    let ineq: Vec<usize> = (0..m).filter(|&i| cl[i] != cu[i]).collect();
    let mut slack_of_row = vec![None; m];
    for (k, &i) in ineq.iter().enumerate() {
        slack_of_row[i] = Some(k);
    }
    let lay = Layout { ineq, slack_of_row };
    let ns = lay.ns();
    let sl = DVector::from_iterator(ns, lay.ineq.iter().map(|&i| cl[i]));
    let su = DVector::from_iterator(ns, lay.ineq.iter().map(|&i| cu[i]));
    let bounds_x = collect_bounds(&xl, &xu);
    let bounds_s = collect_bounds(&sl, &su);

    let x = DVector::from_iterator(n, (0..n).map(|i| push_inside(x0[i], xl[i], xu[i], options.bound_push)));
    let c0 = problem.constraints(&x);
    let s = DVector::from_iterator(ns, (0..ns).map(|k| push_inside(c0[lay.ineq[k]], sl[k], su[k], options.bound_push)));
    let mut it = Iterate {
        x,
        s,
        lambda: DVector::zeros(m),
        zx: vec![1.0; bounds_x.len()],
        zs: vec![1.0; bounds_s.len()],
    };

    let mut mu = options.mu_init;
    let mut filter: Vec<(f64, f64)> = Vec::new();
    let mut filter_mu = mu;
    let mut theta_max = f64::NAN;
    let mut delta_w_last: f64 = 0.0;
    let mut status = NlpStatus::MaxIterations;
    let mut iterations = 0;
    let mut small_steps = 0usize;

    let residual = |s: &DVector<f64>, c: &DVector<f64>| -> DVector<f64> {
        let mut r = DVector::zeros(m);
        for i in 0..m {
            r[i] = match lay.slack_of_row[i] {
                Some(k) => c[i] - s[k],
                None => c[i] - cl[i],
            };
        }
        r
    };
    let barrier = |x: &DVector<f64>, s: &DVector<f64>, mu: f64| -> f64 {
        let mut b = 0.0;
        for bd in &bounds_x {
            b -= slack_of(bd, x).ln();
        }
        for bd in &bounds_s {
            b -= slack_of(bd, s).ln();
        }
        mu * b
    };

    loop {
        let f = problem.objective(&it.x);
        let g = problem.gradient(&it.x);
        let c = problem.constraints(&it.x);
        let jac = problem.jacobian(&it.x);
        let r = residual(&it.s, &c);

        // Lagrangian gradients.
        let mut grad_x = &g + jac.tr_mul(&it.lambda);
        for (bd, z) in bounds_x.iter().zip(&it.zx) {
            grad_x[bd.idx] += if bd.lower { -z } else { *z };
        }
        let mut grad_s = DVector::zeros(ns);
        for k in 0..ns {
            grad_s[k] = -it.lambda[lay.ineq[k]];
        }
        for (bd, z) in bounds_s.iter().zip(&it.zs) {
            grad_s[bd.idx] += if bd.lower { -z } else { *z };
        }
        let dual_inf = grad_x.amax().max(if ns > 0 { grad_s.amax() } else { 0.0 });
        let primal_inf = r.amax();
        let compl = |mu: f64| -> f64 {
            let mut e: f64 = 0.0;
            for (bd, z) in bounds_x.iter().zip(&it.zx) {
                e = e.max((slack_of(bd, &it.x) * z - mu).abs());
            }
            for (bd, z) in bounds_s.iter().zip(&it.zs) {
                e = e.max((slack_of(bd, &it.s) * z - mu).abs());
            }
            e
        };
        let nz = (bounds_x.len() + bounds_s.len()).max(1) as f64;
        let zsum: f64 = it.zx.iter().chain(&it.zs).map(|z| z.abs()).sum();
        let s_d = ((it.lambda.lp_norm(1) + zsum) / (m as f64 + nz)).max(100.0) / 100.0;
        let s_c = (zsum / nz).max(100.0) / 100.0;
        let err = |mu: f64| (dual_inf / s_d).max(primal_inf).max(compl(mu) / s_c);

        if options.verbose {
            eprintln!(
                "iter {iterations:4} f {f:+.6e} inf_pr {primal_inf:.2e} inf_du {dual_inf:.2e} mu {mu:.1e}"
            );
        }
        if err(0.0) <= options.tol && primal_inf <= options.constr_viol_tol {
            status = NlpStatus::Converged;
            break;
        }
        if iterations >= options.max_iter {
            break;
        }
        while mu > options.tol / 10.0 && err(mu) <= 10.0 * mu {
            mu = (options.tol / 10.0).max((0.2 * mu).min(mu.powf(1.5)));
        }
        iterations += 1;

        // Barrier gradient pieces and diagonal Sigma terms.
        let mut sig_x = DVector::zeros(n);
        let mut phi_x = g.clone();
        for (bd, z) in bounds_x.iter().zip(&it.zx) {
            let d = slack_of(bd, &it.x);
            sig_x[bd.idx] += z / d;
            phi_x[bd.idx] += if bd.lower { -mu / d } else { mu / d };
        }
        phi_x += jac.tr_mul(&it.lambda);
        let mut sig_s = DVector::zeros(ns);
        let mut phi_s = -DVector::from_iterator(ns, lay.ineq.iter().map(|&i| it.lambda[i]));
        for (bd, z) in bounds_s.iter().zip(&it.zs) {
            let d = slack_of(bd, &it.s);
            sig_s[bd.idx] += z / d;
            phi_s[bd.idx] += if bd.lower { -mu / d } else { mu / d };
        }

        let hess = problem.hessian(&it.x, 1.0, &it.lambda);
        let dim = n + ns + m;
        let kkt = Kkt::assemble(&hess, &jac, &lay.ineq);
        let build = |delta_w: f64, delta_c: f64| kkt.factor(&sig_x, &sig_s, delta_w, delta_c);
        let mut rhs = DVector::zeros(dim);
        rhs.rows_mut(0, n).copy_from(&(-&phi_x));
        rhs.rows_mut(n, ns).copy_from(&(-&phi_s));
        rhs.rows_mut(n + ns, m).copy_from(&(-&r));

        // Regularize until the direction has positive curvature.
        let mut delta_w: f64 = 0.0;
        let mut delta_c = 0.0;
        let mut solved = None;
        for attempt in 0..40 {
            let lu = build(delta_w, delta_c);
            match lu.as_ref().and_then(|lu| lu.solve(&rhs)) {
                Some(sol) if sol.iter().all(|v| v.is_finite()) => {
                    let dx = sol.rows(0, n).into_owned();
                    let ds = sol.rows(n, ns).into_owned();
                    let curv = dx.dot(&(&hess * &dx)) + dx.dot(&sig_x.component_mul(&dx)) + ds.dot(&sig_s.component_mul(&ds))
                        + delta_w * (dx.norm_squared() + ds.norm_squared());
                    let norm2 = dx.norm_squared() + ds.norm_squared();
                    if curv >= 1e-12 * norm2 || norm2 == 0.0 {
                        solved = lu.map(|lu| (lu, sol));
                        break;
                    }
                }
                _ => {
                    if delta_c == 0.0 {
                        delta_c = 1e-8 * mu.powf(0.25);
                        continue;
                    }
                }
            }
            let _ = attempt;
            delta_w = if delta_w == 0.0 {
                if delta_w_last == 0.0 {
                    1e-4
                } else {
                    (delta_w_last / 3.0).max(1e-20)
                }
            } else if delta_w_last == 0.0 {
                delta_w * 100.0
            } else {
                delta_w * 8.0
            };
            if delta_w > 1e40 {
                break;
            }
        }
        let Some((lu, sol)) = solved else {
            status = NlpStatus::NumericalFailure;
            break;
        };
        if delta_w > 0.0 {
            delta_w_last = delta_w;
        }
        let dx = sol.rows(0, n).into_owned();
        let ds = sol.rows(n, ns).into_owned();
        let dlambda = sol.rows(n + ns, m).into_owned();

        let bound_dual_step = |bounds: &[Bound], z: &[f64], v: &DVector<f64>, dv: &DVector<f64>| -> Vec<f64> {
            bounds
                .iter()
                .zip(z)
                .map(|(bd, z)| {
                    let d = slack_of(bd, v);
                    let dd = if bd.lower { dv[bd.idx] } else { -dv[bd.idx] };
                    (mu - z * d - z * dd) / d
                })
                .collect()
        };
        let dzx = bound_dual_step(&bounds_x, &it.zx, &it.x, &dx);
        let dzs = bound_dual_step(&bounds_s, &it.zs, &it.s, &ds);

        let tau = (1.0 - mu).max(0.99);
        let max_step = |bounds: &[Bound], v: &DVector<f64>, dv: &DVector<f64>| -> f64 {
            let mut a: f64 = 1.0;
            for bd in bounds {
                let d = slack_of(bd, v);
                let dd = if bd.lower { dv[bd.idx] } else { -dv[bd.idx] };
                if dd < 0.0 {
                    a = a.min(-tau * d / dd);
                }
            }
            a
        };
        let alpha_max = max_step(&bounds_x, &it.x, &dx).min(max_step(&bounds_s, &it.s, &ds));
        let mut alpha_z: f64 = 1.0;
        for (z, dz) in it.zx.iter().zip(&dzx).chain(it.zs.iter().zip(&dzs)) {
            if *dz < 0.0 {
                alpha_z = alpha_z.min(-tau * z / dz);
            }
        }

        // Filter line search on (constraint violation, barrier objective).
        let theta = r.lp_norm(1);
        let phi = f + barrier(&it.x, &it.s, mu);
        let gb = g.dot(&dx) + phi_barrier_dir(&bounds_x, &it.x, &dx, mu) + phi_barrier_dir(&bounds_s, &it.s, &ds, mu);
        if filter_mu != mu {
            filter.clear();
            filter_mu = mu;
        }
        if theta_max.is_nan() {
            theta_max = 1e4 * theta.max(1.0);
        }
        let theta_min = 1e-4 * theta.max(1.0);
        let trial = |xt: &DVector<f64>, st: &DVector<f64>| -> (f64, f64) {
            let ct = problem.constraints(xt);
            (residual(st, &ct).lp_norm(1), problem.objective(xt) + barrier(xt, st, mu))
        };
        let f_type = |alpha: f64| gb < 0.0 && alpha * (-gb).powf(S_PHI) > DELTA * theta.powf(S_THETA);
        let acceptable = |th: f64, ph: f64, alpha: f64, filter: &[(f64, f64)]| -> bool {
            if !(th.is_finite() && ph.is_finite()) || th > theta_max {
                return false;
            }
            if filter.iter().any(|&(tf, pf)| th >= tf && ph >= pf) {
                return false;
            }
            if theta <= theta_min && f_type(alpha) {
                ph <= phi + ETA * alpha * gb
            } else {
                th <= (1.0 - GAMMA_THETA) * theta || ph <= phi - GAMMA_PHI * theta
            }
        };
        let alpha_min = {
            let mut a = GAMMA_THETA;
            if gb < 0.0 {
                a = a.min(GAMMA_PHI * theta / -gb).min(DELTA * theta.powf(S_THETA) / (-gb).powf(S_PHI));
            }
            0.05 * a
        };

        let mut alpha = alpha_max;
        let mut accepted: Option<(DVector<f64>, DVector<f64>, f64)> = None;
        let mut first_trial = true;
        while alpha >= alpha_min {
            let xt = &it.x + &dx * alpha;
            let st = &it.s + &ds * alpha;
            let (th, ph) = trial(&xt, &st);
            if acceptable(th, ph, alpha, &filter) {
                accepted = Some((xt, st, alpha));
                break;
            }
            if first_trial && th >= theta {
                // Second-order correction for curvature of the constraints.
                let mut r_soc = &r * alpha + residual(&st, &problem.constraints(&xt));
                let mut theta_old = th;
                for _ in 0..4 {
                    let mut rhs2 = DVector::zeros(dim);
                    rhs2.rows_mut(0, n).copy_from(&(-&phi_x));
                    rhs2.rows_mut(n, ns).copy_from(&(-&phi_s));
                    rhs2.rows_mut(n + ns, m).copy_from(&(-&r_soc));
                    let Some(sol2) = lu.solve(&rhs2) else { break };
                    let dx2 = sol2.rows(0, n).into_owned();
                    let ds2 = sol2.rows(n, ns).into_owned();
                    let a2 = max_step(&bounds_x, &it.x, &dx2).min(max_step(&bounds_s, &it.s, &ds2));
                    let xs = &it.x + &dx2 * a2;
                    let ss = &it.s + &ds2 * a2;
                    let (ths, phs) = trial(&xs, &ss);
                    if acceptable(ths, phs, alpha, &filter) {
                        accepted = Some((xs, ss, alpha));
                        break;
                    }
                    if ths > 0.99 * theta_old {
                        break;
                    }
                    theta_old = ths;
                    r_soc = &r_soc * a2 + residual(&ss, &problem.constraints(&xs));
                }
                if accepted.is_some() {
                    break;
                }
            }
            first_trial = false;
            alpha *= 0.5;
        }
        let restored = accepted.is_none();
        let (xn, sn, alpha) = match accepted {
            Some(a) => {
                small_steps = 0;
                a
            }
            None => {
                // Feasibility restoration: minimum-norm step toward the
                // constraints, taken with backtracking on the violation alone.
                small_steps += 1;
                let mut rhs2 = DVector::zeros(dim);
                rhs2.rows_mut(n + ns, m).copy_from(&(-&r));
                let sol2 = build(delta_w.max(1e-4) + 1.0, delta_c.max(1e-8))
                    .and_then(|lu2| lu2.solve(&rhs2))
                    .unwrap_or_else(|| DVector::zeros(dim));
                let dx2 = sol2.rows(0, n).into_owned();
                let ds2 = sol2.rows(n, ns).into_owned();
                let mut a = max_step(&bounds_x, &it.x, &dx2).min(max_step(&bounds_s, &it.s, &ds2));
                let mut out = (it.x.clone(), it.s.clone(), 0.0);
                while a > 1e-8 {
                    let xs = &it.x + &dx2 * a;
                    let ss = &it.s + &ds2 * a;
                    let (ths, _) = trial(&xs, &ss);
                    if ths < theta {
                        out = (xs, ss, 0.0);
                        break;
                    }
                    a *= 0.5;
                }
                out
            }
        };
        if !restored && !(theta <= theta_min && f_type(alpha)) {
            filter.push(((1.0 - GAMMA_THETA) * theta, phi - GAMMA_PHI * theta));
        }
        if restored {
            filter.push((theta, f64::NEG_INFINITY));
        }
        if options.verbose {
            eprintln!(
                "    alpha {alpha:.2e} alpha_max {alpha_max:.2e} alpha_z {alpha_z:.2e} delta_w {delta_w:.1e} restored {restored} |dx| {:.2e} at {}",
                dx.amax(),
                dx.iamax()
            );
        }
        if small_steps > 10 {
            status = NlpStatus::LineSearchFailed;
            break;
        }
        it.x = xn;
        it.s = sn;
        it.lambda += &dlambda * alpha;
        let alpha_dual = if restored { 0.0 } else { alpha_z };
        for (z, dz) in it.zx.iter_mut().zip(&dzx) {
            *z += alpha_dual * dz;
        }
        for (z, dz) in it.zs.iter_mut().zip(&dzs) {
            *z += alpha_dual * dz;
        }
        // Keep bound multipliers close to their barrier estimates.
        for (bd, z) in bounds_x.iter().zip(it.zx.iter_mut()) {
            let d = slack_of(bd, &it.x);
            *z = z.max(mu / (KAPPA_SIGMA * d)).min(KAPPA_SIGMA * mu / d);
        }
        for (bd, z) in bounds_s.iter().zip(it.zs.iter_mut()) {
            let d = slack_of(bd, &it.s);
            *z = z.max(mu / (KAPPA_SIGMA * d)).min(KAPPA_SIGMA * mu / d);
        }
    }

    let c = problem.constraints(&it.x);
    let g = problem.gradient(&it.x);
    let jac = problem.jacobian(&it.x);
    let mut grad_x = &g + jac.tr_mul(&it.lambda);
    for (bd, z) in bounds_x.iter().zip(&it.zx) {
        grad_x[bd.idx] += if bd.lower { -z } else { *z };
    }
    let mut viol: f64 = 0.0;
    for i in 0..m {
        viol = viol.max(cl[i] - c[i]).max(c[i] - cu[i]);
    }
    let mut complementarity: f64 = 0.0;
    for (bd, z) in bounds_x.iter().zip(&it.zx) {
        complementarity = complementarity.max(slack_of(bd, &it.x) * z);
    }
    for (bd, z) in bounds_s.iter().zip(&it.zs) {
        complementarity = complementarity.max(slack_of(bd, &it.s) * z);
    }
    NlpResult {
        objective: problem.objective(&it.x),
        x: it.x,
        lambda: it.lambda,
        iterations,
        status,
        primal_inf: viol,
        dual_inf: grad_x.amax(),
        complementarity,
    }
}

/// Directional derivative of the log-barrier term.
fn phi_barrier_dir(bounds: &[Bound], v: &DVector<f64>, dv: &DVector<f64>, mu: f64) -> f64 {
    bounds
        .iter()
        .map(|bd| {
            let d = slack_of(bd, v);
            let dd = if bd.lower { dv[bd.idx] } else { -dv[bd.idx] };
            -mu * dd / d
        })
        .sum()
}

/// Sparsity pattern and values of the primal-dual system without the
/// iteration-dependent diagonal.
struct Kkt {
    n: usize,
    ns: usize,
    m: usize,
    entries: Vec<Triplet<usize, usize, f64>>,
}

struct KktFactor {
    lu: faer::sparse::linalg::solvers::Lu<usize, f64>,
}

impl Kkt {
    fn assemble(hess: &DMatrix<f64>, jac: &DMatrix<f64>, ineq: &[usize]) -> Self {
        let n = hess.nrows();
        let m = jac.nrows();
        let ns = ineq.len();
        let mut entries = Vec::new();
        for j in 0..n {
            for i in 0..n {
                let v = hess[(i, j)];
                if v != 0.0 && i != j {
                    entries.push(Triplet::new(i, j, v));
                }
            }
        }
        for j in 0..n {
            for i in 0..m {
                let v = jac[(i, j)];
                if v != 0.0 {
                    entries.push(Triplet::new(n + ns + i, j, v));
                    entries.push(Triplet::new(j, n + ns + i, v));
                }
            }
        }
        for (j, &row) in ineq.iter().enumerate() {
            entries.push(Triplet::new(n + ns + row, n + j, -1.0));
            entries.push(Triplet::new(n + j, n + ns + row, -1.0));
        }
        // Diagonal of the Hessian is added at factorization time.
        let mut kkt = Kkt { n, ns, m, entries };
        for i in 0..n {
            let v = hess[(i, i)];
            kkt.entries.push(Triplet::new(i, i, v));
        }
        kkt
    }

    fn factor(&self, sig_x: &DVector<f64>, sig_s: &DVector<f64>, delta_w: f64, delta_c: f64) -> Option<KktFactor> {
        let (n, ns, m) = (self.n, self.ns, self.m);
        let dim = n + ns + m;
        let mut entries = self.entries.clone();
        for i in 0..n {
            entries.push(Triplet::new(i, i, sig_x[i] + delta_w));
        }
        for j in 0..ns {
            entries.push(Triplet::new(n + j, n + j, sig_s[j] + delta_w));
        }
        for i in 0..m {
            entries.push(Triplet::new(n + ns + i, n + ns + i, -delta_c));
        }
        let mat = SparseColMat::<usize, f64>::try_new_from_triplets(dim, dim, &entries).ok()?;
        let lu = mat.sp_lu().ok()?;
        Some(KktFactor { lu })
    }
}

impl KktFactor {
    fn solve(&self, rhs: &DVector<f64>) -> Option<DVector<f64>> {
        let b = faer::Mat::<f64>::from_fn(rhs.len(), 1, |i, _| rhs[i]);
        let x = self.lu.solve(&b);
        let out = DVector::from_fn(rhs.len(), |i, _| x[(i, 0)]);
        out.iter().all(|v| v.is_finite()).then_some(out)
    }
}
