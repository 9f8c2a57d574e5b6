//! Smoothed-margin calculus.
//!
//! `psi(xi) = l^{-1}(sum_i l(xi_i))` is a soft maximum of `xi`. Its gradient
//! `q = grad psi(p)` is the dual variable of the iterate `p = Zw`, and the
//! conjugate `psi*` is only ever evaluated at such gradient points, where
//! `psi*(q) = <p, q> - psi(p)`. Every [`DualPoint`] therefore carries the
//! primal anchor it was generated from, which makes the generalized Bregman
//! distance computable for every loss without a closed-form conjugate.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, max};
use crate::loss::{LossFunction, LossKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualPoint {
    pub q: Vec<f64>,
    /// Primal point `p` with `q = grad psi(p)`. Absent for simplex points
    /// that are not in the range of the gradient (zero coordinates).
    pub anchor_p: Option<Vec<f64>>,
    pub psi_at_anchor: Option<f64>,
    /// `psi*(q)`.
    pub conj_value: f64,
}

impl DualPoint {
    /// A point of the probability simplex under the exponential loss, where
    /// `psi*` is the negative entropy.
    pub fn from_simplex(q: Vec<f64>) -> Result<Self> {
        if q.is_empty() {
            return Err(Error::domain("empty simplex point"));
        }
        if q.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::domain("simplex point has a negative coordinate"));
        }
        let s: f64 = q.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::domain(format!("simplex point sums to {s}")));
        }
        let conj_value = neg_entropy(&q);
        Ok(DualPoint {
            q,
            anchor_p: None,
            psi_at_anchor: None,
            conj_value,
        })
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn l1_mass(&self) -> f64 {
        self.q.iter().sum()
    }
}

/// `ln sum_i l(xi_i)` by max-shifting the per-coordinate log losses.
pub fn ln_total_loss(loss: &LossFunction, xi: &[f64]) -> Result<f64> {
    if xi.is_empty() {
        return Err(Error::domain("smoothed margin of an empty vector"));
    }
    let logs: Vec<f64> = xi.iter().map(|&z| loss.ln_value(z)).collect();
    let m = max(&logs);
    if m.is_nan() || m == f64::INFINITY {
        return Err(Error::Overflow(format!(
            "loss {} overflowed on input with max {}",
            loss.label(),
            max(xi)
        )));
    }
    if m == f64::NEG_INFINITY {
        return Err(Error::Overflow(format!("loss {} underflowed to zero", loss.label())));
    }
    let sum: f64 = logs.iter().map(|&l| (l - m).exp()).sum();
    Ok(m + sum.ln())
}

/// Returns `(psi(xi), ln L(xi))`.
pub fn psi_and_ln_total(loss: &LossFunction, xi: &[f64]) -> Result<(f64, f64)> {
    let ln_total = ln_total_loss(loss, xi)?;
    let psi = loss.inverse_from_ln(ln_total)?;
    if !psi.is_finite() {
        return Err(Error::Overflow(format!("psi is not finite for loss {}", loss.label())));
    }
    Ok((psi, ln_total))
}

pub fn psi(loss: &LossFunction, xi: &[f64]) -> Result<f64> {
    psi_and_ln_total(loss, xi).map(|(p, _)| p)
}

/// `q_i = l'(xi_i) / l'(psi(xi))`, anchored at `xi`.
pub fn grad_psi(loss: &LossFunction, xi: &[f64]) -> Result<DualPoint> {
    let psi_val = psi(loss, xi)?;
    Ok(grad_psi_at(loss, xi, psi_val))
}

/// Gradient when `psi(xi)` is already known.
pub(crate) fn grad_psi_at(loss: &LossFunction, xi: &[f64], psi_val: f64) -> DualPoint {
    let ln_d1_psi = loss.ln_d1(psi_val);
    let q: Vec<f64> = xi
        .iter()
        .map(|&z| (loss.ln_d1(z) - ln_d1_psi).exp())
        .collect();
    let conj_value = dot(xi, &q) - psi_val;
    DualPoint {
        q,
        anchor_p: Some(xi.to_vec()),
        psi_at_anchor: Some(psi_val),
        conj_value,
    }
}

/// Generalized Bregman distance `D(a, b) = psi*(a) - psi*(b) - <p_b, a - b>`.
pub fn bregman(a: &DualPoint, b: &DualPoint) -> Result<f64> {
    let anchor = b
        .anchor_p
        .as_ref()
        .ok_or_else(|| Error::domain("second Bregman argument needs a primal anchor"))?;
    if a.q.len() != b.q.len() {
        return Err(Error::domain(format!(
            "dimension mismatch: {} vs {}",
            a.q.len(),
            b.q.len()
        )));
    }
    let inner: f64 = anchor
        .iter()
        .zip(a.q.iter().zip(&b.q))
        .map(|(p, (x, y))| p * (x - y))
        .sum();
    Ok(a.conj_value - b.conj_value - inner)
}

/// Perspective `r psi(v / r)`, with the analytic limit `max_i v_i` at `r = 0`.
pub fn perspective(loss: &LossFunction, v: &[f64], r: f64) -> Result<f64> {
    if r.is_nan() || r < 0.0 {
        return Err(Error::domain(format!("perspective needs r >= 0, got {r}")));
    }
    if v.is_empty() {
        return Err(Error::domain("perspective of an empty vector"));
    }
    if r == 0.0 {
        if matches!(loss.kind(), LossKind::PolyTail { .. }) {
            return Err(Error::domain("perspective limit at r = 0 is only available for exp and logistic"));
        }
        if v.iter().any(|&x| x >= 0.0) {
            return Err(Error::domain("perspective at r = 0 needs every coordinate negative"));
        }
        return Ok(max(v));
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / r).collect();
    Ok(r * psi(loss, &scaled)?)
}

/// `sum_i q_i ln q_i` with `0 ln 0 = 0`.
pub fn neg_entropy(q: &[f64]) -> f64 {
    q.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum()
}

/// `KL(a || b)`; infinite when `b` vanishes where `a` does not.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(&x, _)| x > 0.0)
        .map(|(&x, &y)| if y > 0.0 { x * (x / y).ln() } else { f64::INFINITY })
        .sum()
}

/// Dense Hessian of `psi` at `xi`. O(n^2); meant for diagnostics and tests.
pub fn psi_hessian(loss: &LossFunction, xi: &[f64]) -> Result<DMatrix<f64>> {
    let dual = grad_psi(loss, xi)?;
    let psi_val = dual.psi_at_anchor.expect("gradient points carry an anchor");
    let n = xi.len();
    let d1_psi = loss.d1(psi_val);
    let rank_one = loss.d2(psi_val) / d1_psi;
    let mut h = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            h[(i, j)] = -rank_one * dual.q[i] * dual.q[j];
        }
        h[(i, i)] += loss.d2(xi[i]) / d1_psi;
    }
    Ok(h)
}
