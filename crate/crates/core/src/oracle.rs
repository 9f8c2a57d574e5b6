//! Ground-truth optima: maximum margin, dual optimum, support structure.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::descent::{run_gd, StepSizePolicy};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sub};
use crate::loss::LossFunction;
use crate::smoothed::DualPoint;

pub const DEFAULT_MAX_ITERS: usize = 1_000_000;
const RANK_TOL: f64 = 1e-10;
const MIN_EIGENVALUE: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaxMargin {
    pub gamma: f64,
    pub u_bar: Vec<f64>,
    /// Minimizer of `||Z^T q||` over the simplex.
    pub q: Vec<f64>,
    /// `||Z^T q|| - min_i <u_bar, -z_i>`.
    pub duality_gap: f64,
    pub primal_margin: f64,
    pub iterations: usize,
}

struct FwState<'a> {
    ds: &'a Dataset,
    q: Vec<f64>,
    v: Vec<f64>,
}

impl FwState<'_> {
    fn refresh(&mut self) {
        self.v = self.ds.ztq(&self.q);
    }

    fn scores(&self) -> Vec<f64> {
        self.ds.zw(&self.v)
    }

    fn gap(&self) -> (f64, f64) {
        let vv = dot(&self.v, &self.v);
        let min_g = self.scores().into_iter().fold(f64::INFINITY, f64::min);
        let nv = vv.sqrt();
        (nv, if nv > 0.0 { (vv - min_g) / nv } else { f64::INFINITY })
    }
}

/// Minimum of `||Z^T q||` over the probability simplex, by Frank-Wolfe with away steps.
///
/// Stops once the certified duality gap `||Z^T q|| - min_i <u, -z_i>` is at most `tol`,
/// with `u = -Z^T q / ||Z^T q||`. Between Frank-Wolfe rounds the active set is
/// polished by solving the affine-hull problem exactly.
pub fn max_margin(ds: &Dataset, tol: f64) -> Result<MaxMargin> {
    max_margin_with(ds, tol, DEFAULT_MAX_ITERS)
}

pub fn max_margin_with(ds: &Dataset, tol: f64, max_iters: usize) -> Result<MaxMargin> {
    if !(tol > 0.0) {
        return Err(Error::config(format!("oracle tolerance must be positive, got {tol}")));
    }
    let n = ds.n();
    let start = (0..n)
        .min_by(|&a, &b| norm(ds.row(a)).total_cmp(&norm(ds.row(b))))
        .unwrap();
    let mut st = FwState {
        ds,
        q: vec![0.0; n],
        v: Vec::new(),
    };
    st.q[start] = 1.0;
    st.refresh();

    let mut iters = 0usize;
    let mut next_polish = 64usize;
    loop {
        let (nv, gap) = st.gap();
        if nv <= tol {
            return Err(Error::domain(format!(
                "dataset not separable at tolerance {tol}: ||Z^T q|| = {nv:.3e}"
            )));
        }
        if gap <= tol {
            break;
        }
        if iters >= next_polish {
            polish(&mut st);
            next_polish = iters * 2;
            let (_, g2) = st.gap();
            if g2 <= tol {
                break;
            }
        }
        if iters >= max_iters {
            return Err(Error::Convergence(format!(
                "Frank-Wolfe stopped after {iters} iterations with duality gap {gap:.3e}"
            )));
        }
        fw_step(&mut st);
        iters += 1;
        if iters % 256 == 0 {
            st.refresh();
        }
    }
    // one last exact solve on the final support can only tighten the answer
    polish(&mut st);
    st.refresh();
    let (nv, gap) = st.gap();
    let u_bar: Vec<f64> = st.v.iter().map(|x| -x / nv).collect();
    let primal = ds.margin_of(&u_bar);
    Ok(MaxMargin {
        gamma: nv,
        u_bar,
        q: st.q,
        duality_gap: gap.max(nv - primal),
        primal_margin: primal,
        iterations: iters,
    })
}

fn fw_step(st: &mut FwState) {
    let g = st.scores();
    let qg = dot(&st.q, &g);
    let (s, gs) = g
        .iter()
        .enumerate()
        .fold((0, f64::INFINITY), |acc, (i, &x)| if x < acc.1 { (i, x) } else { acc });
    let (a, ga) = g
        .iter()
        .enumerate()
        .filter(|(i, _)| st.q[*i] > 0.0)
        .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, &x)| if x > acc.1 { (i, x) } else { acc });

    if qg - gs >= ga - qg {
        // toward vertex s
        let dir = sub(st.ds.row(s), &st.v);
        let dd = dot(&dir, &dir);
        if dd == 0.0 {
            return;
        }
        let alpha = (-dot(&st.v, &dir) / dd).clamp(0.0, 1.0);
        for x in st.q.iter_mut() {
            *x *= 1.0 - alpha;
        }
        st.q[s] += alpha;
        if alpha == 1.0 {
            st.q.iter_mut().for_each(|x| *x = 0.0);
            st.q[s] = 1.0;
        }
        crate::linalg::axpy(alpha, &dir, &mut st.v);
    } else {
        // away from vertex a
        let qa = st.q[a];
        let alpha_max = qa / (1.0 - qa);
        let dir = sub(&st.v, st.ds.row(a));
        let dd = dot(&dir, &dir);
        if dd == 0.0 || !alpha_max.is_finite() {
            return;
        }
        let alpha = (-dot(&st.v, &dir) / dd).clamp(0.0, alpha_max);
        for x in st.q.iter_mut() {
            *x *= 1.0 + alpha;
        }
        st.q[a] -= alpha;
        if alpha == alpha_max {
            st.q[a] = 0.0;
        }
        crate::linalg::axpy(alpha, &dir, &mut st.v);
    }
}

/// Replaces `q` by the minimizer over the affine hull of its support when that
/// point stays in the simplex and does not widen the duality gap.
fn polish(st: &mut FwState) {
    let active: Vec<usize> = (0..st.q.len()).filter(|&i| st.q[i] > 0.0).collect();
    let k = active.len();
    if k < 2 {
        return;
    }
    let mut m = DMatrix::zeros(k + 1, k + 1);
    for (a, &i) in active.iter().enumerate() {
        for (b, &j) in active.iter().enumerate() {
            m[(a, b)] = dot(st.ds.row(i), st.ds.row(j));
        }
        m[(a, k)] = 1.0;
        m[(k, a)] = 1.0;
    }
    let mut rhs = DVector::zeros(k + 1);
    rhs[k] = 1.0;
    let Ok(sol) = m.svd(true, true).solve(&rhs, 1e-14) else {
        return;
    };
    let lam: Vec<f64> = (0..k).map(|a| sol[a]).collect();
    if lam.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
        return;
    }
    let s: f64 = lam.iter().sum();
    let mut q = vec![0.0; st.q.len()];
    for (&i, &l) in active.iter().zip(&lam) {
        q[i] = l / s;
    }
    // f is flat at the optimum, so compare certified gaps rather than objective values
    st.refresh();
    let before = st.gap().1;
    let old = std::mem::replace(&mut st.q, q);
    st.refresh();
    if !(st.gap().1 <= before) {
        st.q = old;
        st.refresh();
    }
}

/// Dual optimum `argmin { f(q) : psi*(q) <= 0 }`.
///
/// For the exponential loss this is the simplex minimizer. Other losses take the
/// limit of a constant-effective-step trajectory, see [`dual_optimum_with`].
pub fn dual_optimum(ds: &Dataset, loss: &LossFunction, mm: &MaxMargin, tol: f64) -> Result<DualPoint> {
    if loss.is_exp() {
        return DualPoint::from_simplex(mm.q.clone());
    }
    dual_optimum_with(ds, loss, tol, 1.0 / loss.beta(ds.n()), 1 << 24)
}

/// Runs gradient descent with `eta_hat = c` and checks `Z^T q` at doubling
/// checkpoints `t = 2^k`, accepting `q_t` once `||Z^T q_t - Z^T q_{t/2}|| <= tol`.
pub fn dual_optimum_with(
    ds: &Dataset,
    loss: &LossFunction,
    tol: f64,
    c: f64,
    max_iters: usize,
) -> Result<DualPoint> {
    let policy = StepSizePolicy::ConstantHatEta { c };
    let mut w = vec![0.0; ds.d()];
    let mut t = 0usize;
    let mut prev_ztq: Option<Vec<f64>> = None;
    let mut chunk = 1usize;
    loop {
        let tr = run_gd(ds, loss, policy, &w, chunk, chunk)?;
        let last = tr.last();
        t += chunk;
        w = last.w.clone();
        let residual = prev_ztq.as_ref().map(|p| norm(&sub(&last.ztq, p)));
        if let Some(r) = residual {
            if r <= tol {
                if last.dual.conj_value > 1e-10 {
                    return Err(Error::Consistency(format!(
                        "dual limit is infeasible: conjugate value {:.3e} at t = {t}",
                        last.dual.conj_value
                    )));
                }
                return Ok(last.dual.clone());
            }
        }
        if t >= max_iters {
            return Err(Error::Convergence(format!(
                "dual optimum not reached in {t} iterations; last residual {:.3e} against tolerance {tol:.1e}",
                residual.unwrap_or(f64::INFINITY)
            )));
        }
        prev_ztq = Some(last.ztq.clone());
        chunk = t;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Support {
    /// 0-based indices.
    pub idx: Vec<usize>,
    /// `None` when every row is a support row (`gamma' = inf`).
    pub gamma_prime: Option<f64>,
    /// `z_i - <z_i, u> u` for `i` in `idx`.
    pub s_perp: Vec<Vec<f64>>,
}

pub fn support_decomposition(ds: &Dataset, gamma: f64, u_bar: &[f64], support_tol: f64) -> Result<Support> {
    let mut idx = Vec::new();
    let mut rest = f64::INFINITY;
    for (i, r) in ds.rows().enumerate() {
        let m = -dot(r, u_bar);
        if m <= gamma + support_tol {
            idx.push(i);
        } else {
            rest = rest.min(m);
        }
    }
    if idx.is_empty() {
        return Err(Error::Consistency(format!(
            "no row attains margin {gamma} within {support_tol}"
        )));
    }
    let s_perp = idx
        .iter()
        .map(|&i| {
            let r = ds.row(i);
            let c = dot(r, u_bar);
            r.iter().zip(u_bar).map(|(x, u)| x - c * u).collect()
        })
        .collect();
    Ok(Support {
        idx,
        gamma_prime: rest.is_finite().then(|| rest - gamma),
        s_perp,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerpMinimizer {
    pub v_bar: Vec<f64>,
    /// Smallest Hessian eigenvalue within the span; `None` for a zero-dimensional span.
    pub strong_convexity: Option<f64>,
    pub grad_norm: f64,
    pub span_dim: usize,
}

/// Orthonormal basis of `span(vectors)` by modified Gram-Schmidt.
pub fn orthonormal_basis(vectors: &[Vec<f64>], rank_tol: f64) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut r = v.clone();
        for _ in 0..2 {
            for b in &basis {
                let c = dot(&r, b);
                crate::linalg::axpy(-c, b, &mut r);
            }
        }
        let nr = norm(&r);
        if nr > rank_tol {
            basis.push(r.into_iter().map(|x| x / nr).collect());
        }
    }
    basis
}

/// Minimizer of `R_perp(v) = (1/n) sum_{i in S} exp(<v, z_{i,perp}>)` over `span(S_perp)`.
pub fn perp_minimizer(s_perp: &[Vec<f64>], n: usize, tol: f64) -> Result<PerpMinimizer> {
    let d = s_perp.first().map_or(0, |v| v.len());
    let basis = orthonormal_basis(s_perp, RANK_TOL);
    let k = basis.len();
    if k == 0 {
        return Ok(PerpMinimizer {
            v_bar: vec![0.0; d],
            strong_convexity: None,
            grad_norm: 0.0,
            span_dim: 0,
        });
    }
    let inv_n = 1.0 / n as f64;
    // coordinates of each support vector in the basis
    let h: Vec<DVector<f64>> = s_perp
        .iter()
        .map(|z| DVector::from_iterator(k, basis.iter().map(|b| dot(b, z))))
        .collect();
    let objective = |c: &DVector<f64>| -> f64 { h.iter().map(|hi| (hi.dot(c)).exp()).sum::<f64>() * inv_n };
    let derivs = |c: &DVector<f64>| -> (DVector<f64>, DMatrix<f64>) {
        let mut g = DVector::zeros(k);
        let mut hess = DMatrix::zeros(k, k);
        for hi in &h {
            let e = hi.dot(c).exp() * inv_n;
            g.axpy(e, hi, 1.0);
            hess.ger(e, hi, hi, 1.0);
        }
        (g, hess)
    };
    let degenerate = |lam: f64| {
        Error::domain(format!(
            "degenerate support geometry: no stationary point found, smallest Hessian eigenvalue {lam:.3e} within the span"
        ))
    };

    // The gradient test is relative to the objective value: along an unbounded
    // direction both decay together and the test never passes.
    let mut c = DVector::zeros(k);
    let mut fc = objective(&c);
    for _ in 0..200 {
        let (g, hess) = derivs(&c);
        if g.norm() <= tol * fc.min(1.0) {
            break;
        }
        let Some(chol) = hess.clone().cholesky() else {
            return Err(degenerate(SymmetricEigen::new(hess).eigenvalues.min()));
        };
        let step = chol.solve(&(-&g));
        let slope = g.dot(&step);
        let mut a = 1.0;
        while a >= 1e-20 {
            let cand = &c + a * &step;
            let fcand = objective(&cand);
            if fcand <= fc + 1e-4 * a * slope {
                c = cand;
                fc = fcand;
                break;
            }
            a *= 0.5;
        }
        if a < 1e-20 {
            break;
        }
    }
    let (g, hess) = derivs(&c);
    let lam = SymmetricEigen::new(hess).eigenvalues.min();
    if lam <= MIN_EIGENVALUE || g.norm() > tol * fc.min(1.0) {
        return Err(degenerate(lam));
    }
    let mut v_bar = vec![0.0; d];
    for (ci, b) in c.iter().zip(&basis) {
        crate::linalg::axpy(*ci, b, &mut v_bar);
    }
    Ok(PerpMinimizer {
        v_bar,
        strong_convexity: Some(lam),
        grad_norm: g.norm(),
        span_dim: k,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginCertificate {
    pub loss: String,
    pub gamma: f64,
    pub u_bar: Vec<f64>,
    pub qbar: DualPoint,
    /// `Z^T qbar`
    pub ztq_bar: Vec<f64>,
    /// `f(qbar) = ||Z^T qbar||^2 / 2`
    pub f_qbar: f64,
    pub duality_gap: f64,
    pub tol: f64,
    pub support_tol: f64,
    pub support_idx: Vec<usize>,
    /// `None` means `+inf`.
    pub gamma_prime: Option<f64>,
    pub s_perp: Vec<Vec<f64>>,
    /// Absent when the support geometry is degenerate.
    pub v_bar: Option<Vec<f64>>,
    pub perp_strong_convexity: Option<f64>,
    pub perp_note: Option<String>,
}

/// Assembles the full certificate. `support_tol` defaults to `1e-6 * gamma`.
pub fn certify(ds: &Dataset, loss: &LossFunction, tol: f64, support_tol: Option<f64>) -> Result<MarginCertificate> {
    let mm = max_margin(ds, tol)?;
    let qbar = dual_optimum(ds, loss, &mm, tol)?;
    let ztq_bar = ds.ztq(&qbar.q);
    let support_tol = support_tol.unwrap_or(1e-6 * mm.gamma);
    let sup = support_decomposition(ds, mm.gamma, &mm.u_bar, support_tol)?;
    let (v_bar, sc, note) = match perp_minimizer(&sup.s_perp, ds.n(), tol) {
        Ok(pm) => (Some(pm.v_bar), pm.strong_convexity, None),
        Err(e @ (Error::Domain(_) | Error::Convergence(_))) => (None, None, Some(e.to_string())),
        Err(e) => return Err(e),
    };
    Ok(MarginCertificate {
        loss: loss.label(),
        gamma: mm.gamma,
        u_bar: mm.u_bar,
        f_qbar: 0.5 * dot(&ztq_bar, &ztq_bar),
        ztq_bar,
        qbar,
        duality_gap: mm.duality_gap,
        tol,
        support_tol,
        support_idx: sup.idx,
        gamma_prime: sup.gamma_prime,
        s_perp: sup.s_perp,
        v_bar,
        perp_strong_convexity: sc,
        perp_note: note,
    })
}

/// `Pi_perp[w] = w - <w, u> u`.
pub fn project_perp(w: &[f64], u: &[f64]) -> Vec<f64> {
    let c = dot(w, u);
    w.iter().zip(u).map(|(x, ui)| x - c * ui).collect()
}
