//! The loss family: exponential, logistic and polynomial-tailed losses.
//!
//! Every loss is increasing, convex and positive, with closed-form first and
//! second derivatives and an inverse on `(0, inf)`. Logarithmic variants
//! (`ln_value`, `ln_d1`) stay finite far into the left tail where the plain
//! values underflow.

mod assumption;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use assumption::{
    default_b_grid, default_z_grid, verify_assumption2, AssumptionReport, ConditionResult,
    GridSpan,
};

/// Scalar loss interface used by the assumption verifier.
///
/// [`LossFunction`] is the production implementation; the trait exists so that
/// deliberately broken losses can be fed to the verifier as negative controls.
pub trait ScalarLoss {
    fn name(&self) -> String;
    fn value(&self, z: f64) -> f64;
    fn d1(&self, z: f64) -> f64;
    fn d2(&self, z: f64) -> f64;
    fn inverse(&self, s: f64) -> Result<f64>;

    /// A claimed constant `c` with `l'' <= c l'` everywhere, if one is known.
    fn curvature_ratio_bound(&self) -> Option<f64> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    Exp,
    Logistic,
    PolyTail { k: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EvalOrder {
    Value,
    First,
    Second,
    Inverse,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LossKind", into = "LossKind")]
pub struct LossFunction {
    kind: LossKind,
}

impl TryFrom<LossKind> for LossFunction {
    type Error = Error;

    fn try_from(kind: LossKind) -> Result<Self> {
        LossFunction::from_kind(kind)
    }
}

impl From<LossFunction> for LossKind {
    fn from(loss: LossFunction) -> Self {
        loss.kind
    }
}

impl LossFunction {
    pub fn exp() -> Self {
        LossFunction {
            kind: LossKind::Exp,
        }
    }

    pub fn logistic() -> Self {
        LossFunction {
            kind: LossKind::Logistic,
        }
    }

    pub fn poly_tail(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::domain(format!("poly-tail exponent must be positive, got {k}")));
        }
        Ok(LossFunction {
            kind: LossKind::PolyTail { k },
        })
    }

    pub fn from_kind(kind: LossKind) -> Result<Self> {
        match kind {
            LossKind::PolyTail { k } => Self::poly_tail(k),
            other => Ok(LossFunction { kind: other }),
        }
    }

    pub fn kind(&self) -> LossKind {
        self.kind
    }

    pub fn is_exp(&self) -> bool {
        matches!(self.kind, LossKind::Exp)
    }

    pub fn is_logistic(&self) -> bool {
        matches!(self.kind, LossKind::Logistic)
    }

    /// Constant `c` with `l''(z) <= c l'(z)` for all `z`.
    pub fn curvature_ratio(&self) -> f64 {
        match self.kind {
            LossKind::Exp | LossKind::Logistic => 1.0,
            LossKind::PolyTail { k } => k + 1.0,
        }
    }

    /// Global l-infinity smoothness constant of the smoothed margin on `n` coordinates.
    pub fn beta(&self, n: usize) -> f64 {
        match self.kind {
            LossKind::Exp => 1.0,
            _ => self.curvature_ratio() * n as f64,
        }
    }

    /// Smoothness constant on the warm-start sublevel region, when one is known.
    pub fn beta_sublevel(&self) -> Option<f64> {
        match self.kind {
            LossKind::Logistic => Some(2.0),
            _ => None,
        }
    }

    /// `ln(l(0) / (2 e^2))`: total-loss threshold of the logistic warm-start region.
    pub fn ln_warm_start_threshold(&self) -> f64 {
        self.value(0.0).ln() - std::f64::consts::LN_2 - 2.0
    }

    pub fn value(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Exp => z.exp(),
            LossKind::Logistic => softplus(z),
            LossKind::PolyTail { k } => {
                if z <= 0.0 {
                    (1.0 - z).powf(-k)
                } else {
                    2.0 * k * z + (1.0 + z).powf(-k)
                }
            }
        }
    }

    pub fn d1(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Exp => z.exp(),
            LossKind::Logistic => sigmoid(z),
            LossKind::PolyTail { k } => {
                if z <= 0.0 {
                    k * (1.0 - z).powf(-k - 1.0)
                } else {
                    2.0 * k - k * (1.0 + z).powf(-k - 1.0)
                }
            }
        }
    }

    pub fn d2(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Exp => z.exp(),
            LossKind::Logistic => sigmoid(z) * sigmoid(-z),
            LossKind::PolyTail { k } => {
                let base = if z <= 0.0 { 1.0 - z } else { 1.0 + z };
                k * (k + 1.0) * base.powf(-k - 2.0)
            }
        }
    }

    pub fn inverse(&self, s: f64) -> Result<f64> {
        if !(s > 0.0) {
            return Err(Error::domain(format!("loss inverse needs a positive argument, got {s}")));
        }
        if s == f64::INFINITY {
            return Ok(f64::INFINITY);
        }
        Ok(match self.kind {
            LossKind::Exp => s.ln(),
            LossKind::Logistic => {
                if s > 1.0 {
                    s + (-(-s).exp()).ln_1p()
                } else {
                    s.exp_m1().ln()
                }
            }
            LossKind::PolyTail { k } => {
                if s <= 1.0 {
                    1.0 - s.powf(-1.0 / k)
                } else {
                    poly_right_inverse(k, s)
                }
            }
        })
    }

    /// `ln l(z)`, finite even where `l(z)` underflows.
    pub fn ln_value(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Exp => z,
            LossKind::Logistic => {
                if z > -30.0 {
                    softplus(z).ln()
                } else {
                    // ln(ln(1 + x)) = z + ln(ln(1 + x) / x) with x = e^z
                    let x = z.exp();
                    if x == 0.0 {
                        z
                    } else {
                        z + (x.ln_1p() / x).ln()
                    }
                }
            }
            LossKind::PolyTail { k } if z <= 0.0 => -k * (-z).ln_1p(),
            LossKind::PolyTail { .. } => self.value(z).ln(),
        }
    }

    /// `ln l'(z)`, finite even where `l'(z)` underflows.
    pub fn ln_d1(&self, z: f64) -> f64 {
        match self.kind {
            LossKind::Exp => z,
            LossKind::Logistic => -softplus(-z),
            LossKind::PolyTail { k } if z <= 0.0 => k.ln() - (k + 1.0) * (-z).ln_1p(),
            LossKind::PolyTail { .. } => self.d1(z).ln(),
        }
    }

    /// `l^{-1}(e^{ln_s})` for a total loss known only through its logarithm.
    pub fn inverse_from_ln(&self, ln_s: f64) -> Result<f64> {
        if ln_s.is_nan() {
            return Err(Error::domain("loss inverse of NaN"));
        }
        match self.kind {
            LossKind::Exp => Ok(ln_s),
            LossKind::Logistic => {
                if ln_s < -20.0 {
                    // ln(e^s - 1) = ln s + ln(expm1(s) / s), ratio -> 1 as s -> 0
                    let s = ln_s.exp();
                    let corr = if s == 0.0 { 0.0 } else { (s.exp_m1() / s).ln() };
                    Ok(ln_s + corr)
                } else {
                    self.inverse(ln_s.exp())
                }
            }
            LossKind::PolyTail { .. } => self.inverse(ln_s.exp()),
        }
    }

    pub fn eval(&self, z: f64, order: EvalOrder) -> Result<f64> {
        match order {
            EvalOrder::Value => Ok(self.value(z)),
            EvalOrder::First => Ok(self.d1(z)),
            EvalOrder::Second => Ok(self.d2(z)),
            EvalOrder::Inverse => self.inverse(z),
        }
    }

    pub fn label(&self) -> String {
        match self.kind {
            LossKind::Exp => "exp".to_string(),
            LossKind::Logistic => "logistic".to_string(),
            LossKind::PolyTail { k } => format!("poly_tail(k={k})"),
        }
    }
}

impl ScalarLoss for LossFunction {
    fn name(&self) -> String {
        self.label()
    }
    fn value(&self, z: f64) -> f64 {
        LossFunction::value(self, z)
    }
    fn d1(&self, z: f64) -> f64 {
        LossFunction::d1(self, z)
    }
    fn d2(&self, z: f64) -> f64 {
        LossFunction::d2(self, z)
    }
    fn inverse(&self, s: f64) -> Result<f64> {
        LossFunction::inverse(self, s)
    }
    fn curvature_ratio_bound(&self) -> Option<f64> {
        Some(self.curvature_ratio())
    }
}

pub fn eval_loss(loss: &LossFunction, z: f64, order: EvalOrder) -> Result<f64> {
    loss.eval(z, order)
}

pub(crate) fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Solves `2kz + (1+z)^{-k} = s` for `z > 0`, given `s > 1`.
fn poly_right_inverse(k: f64, s: f64) -> f64 {
    let g = |z: f64| 2.0 * k * z + (1.0 + z).powf(-k) - s;
    let dg = |z: f64| 2.0 * k - k * (1.0 + z).powf(-k - 1.0);
    // g(0) = 1 - s < 0 and g(s / 2k) >= 0
    let (mut lo, mut hi) = (0.0, s / (2.0 * k));
    let mut z = ((s - 1.0) / (2.0 * k)).clamp(lo, hi);
    for _ in 0..200 {
        let gz = g(z);
        if gz == 0.0 {
            return z;
        }
        if gz < 0.0 {
            lo = z;
        } else {
            hi = z;
        }
        let mut next = z - gz / dg(z);
        if !(next > lo && next < hi) {
            next = 0.5 * (lo + hi);
        }
        if (next - z).abs() <= 1e-16 * next.abs().max(1e-300) {
            return next;
        }
        z = next;
    }
    z
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_losses() -> Vec<LossFunction> {
        let mut v = vec![LossFunction::exp(), LossFunction::logistic()];
        for k in [0.5, 1.0, 2.0, 5.0] {
            v.push(LossFunction::poly_tail(k).unwrap());
        }
        v
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn spot_values() {
        assert_eq!(eval_loss(&LossFunction::exp(), 0.0, EvalOrder::Value).unwrap(), 1.0);
        let l = eval_loss(&LossFunction::logistic(), 0.0, EvalOrder::Value).unwrap();
        assert!(close(l, std::f64::consts::LN_2, 1e-15));
        let p = LossFunction::poly_tail(1.0).unwrap();
        assert!(close(p.value(-1.0), 0.5, 1e-15));
        let inv = eval_loss(&LossFunction::exp(), 0.25, EvalOrder::Inverse).unwrap();
        assert!(close(inv, 0.25f64.ln(), 1e-15));
        assert!(close(inv, -1.386294, 1e-6));
    }

    #[test]
    fn inverse_rejects_nonpositive() {
        for loss in all_losses() {
            assert!(matches!(loss.inverse(0.0), Err(Error::Domain(_))));
            assert!(matches!(loss.inverse(-1.0), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn poly_tail_rejects_bad_exponent() {
        assert!(LossFunction::poly_tail(0.0).is_err());
        assert!(LossFunction::poly_tail(-1.0).is_err());
        assert!(LossFunction::poly_tail(f64::NAN).is_err());
    }

    #[test]
    fn finite_difference_consistency() {
        let h = 1e-5;
        // grid avoids z = 0, where poly_tail has a jump in l''' and central
        // differences of l' are only first order; continuity there is tested separately
        for loss in all_losses() {
            let mut z = -30.0 + 0.03125;
            while z <= 3.0 {
                let fd1 = (loss.value(z + h) - loss.value(z - h)) / (2.0 * h);
                let d1 = loss.d1(z);
                assert!(
                    (fd1 - d1).abs() <= 1e-6 * d1.abs().max(1.0),
                    "{} d1 at {z}: {fd1} vs {d1}",
                    loss.label()
                );
                let fd2 = (loss.d1(z + h) - loss.d1(z - h)) / (2.0 * h);
                let d2 = loss.d2(z);
                assert!(
                    (fd2 - d2).abs() <= 1e-6 * d2.abs().max(1.0),
                    "{} d2 at {z}: {fd2} vs {d2}",
                    loss.label()
                );
                z += 0.0625;
            }
        }
    }

    #[test]
    fn inverse_round_trip() {
        // grid avoids z = 0, where poly_tail has a jump in l''' and central
        // differences of l' are only first order; continuity there is tested separately
        for loss in all_losses() {
            let mut z = -30.0 + 0.03125;
            while z <= 3.0 {
                let back = loss.inverse(loss.value(z)).unwrap();
                assert!((back - z).abs() <= 1e-8, "{} at {z}: {back}", loss.label());
                z += 0.01;
            }
            for s in [1e-12, 1e-6, 0.3, 0.9, 1.0, 1.1, 2.0, 17.0, 1e4] {
                let v = loss.value(loss.inverse(s).unwrap());
                assert!((v - s).abs() <= 1e-10 * s, "{} at s={s}: {v}", loss.label());
            }
        }
    }

    #[test]
    fn logistic_inverse_small_argument_keeps_precision() {
        let l = LossFunction::logistic();
        // l^{-1}(s) ~ ln s for tiny s; the naive ln(exp(s) - 1) returns -inf here
        let s = 1e-20;
        let z = l.inverse(s).unwrap();
        assert!((z - s.ln()).abs() < 1e-12);
        assert!((l.inverse_from_ln(-1000.0).unwrap() + 1000.0).abs() < 1e-12);
    }

    #[test]
    fn poly_tail_branches_agree_at_zero() {
        for k in [0.5, 1.0, 2.0, 5.0] {
            let l = LossFunction::poly_tail(k).unwrap();
            let left = (1.0, k, k * (k + 1.0));
            let right = (
                2.0 * k * 0.0 + 1.0,
                2.0 * k - k,
                k * (k + 1.0),
            );
            assert!((left.0 - right.0).abs() < 1e-10);
            assert!((left.1 - right.1).abs() < 1e-10);
            assert!((left.2 - right.2).abs() < 1e-10);
            let eps = 1e-12;
            assert!((l.value(eps) - l.value(-eps)).abs() < 1e-10);
            assert!((l.d1(eps) - l.d1(-eps)).abs() < 1e-10);
            assert!((l.d2(eps) - l.d2(-eps)).abs() < 1e-10);
            assert!((l.d1(0.0) - k).abs() < 1e-15);
        }
    }

    #[test]
    fn log_variants_match_plain_values() {
        for loss in all_losses() {
            for z in [-20.0, -3.0, 0.0, 0.7, 4.0] {
                assert!((loss.ln_value(z) - loss.value(z).ln()).abs() < 1e-12);
                assert!((loss.ln_d1(z) - loss.d1(z).ln()).abs() < 1e-12);
            }
        }
        let l = LossFunction::logistic();
        assert_eq!(l.ln_value(-1e4), -1e4);
        assert!((l.ln_d1(-1e4) + 1e4).abs() < 1e-9);
    }

    #[test]
    fn smoothness_metadata() {
        assert_eq!(LossFunction::exp().beta(50), 1.0);
        assert_eq!(LossFunction::logistic().beta_sublevel(), Some(2.0));
        assert_eq!(LossFunction::logistic().beta(7), 7.0);
        assert_eq!(LossFunction::poly_tail(2.0).unwrap().beta(4), 12.0);
    }

    #[test]
    fn curvature_ratio_holds_on_grid() {
        for loss in all_losses() {
            let c = loss.curvature_ratio();
            let mut z = -40.0;
            while z < 40.0 {
                assert!(loss.d2(z) <= c * loss.d1(z) * (1.0 + 1e-12));
                z += 0.1;
            }
        }
    }
}
