//! Grid certification of the structural loss conditions.
//!
//! Each condition is evaluated on finite grids only. Monotonicity is checked
//! between adjacent grid points, so nothing outside the grid is certified.

use serde::{Deserialize, Serialize};

use super::ScalarLoss;
use crate::error::{Error, Result};

const MONOTONE_TOL: f64 = 1e-12;
const TAIL_LIMIT: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpan {
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
}

impl GridSpan {
    fn of(values: &[f64]) -> Self {
        GridSpan {
            lo: values.iter().copied().fold(f64::INFINITY, f64::min),
            hi: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            points: values.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    /// Assumption item (1..=4); the convexity and smoothness criteria report as 4.
    pub condition: u8,
    pub check: String,
    pub grid: GridSpan,
    pub worst_violation: f64,
    pub passed: bool,
    /// Smallest and largest value of the checked quantity on the grid.
    pub measured_min: f64,
    pub measured_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssumptionReport {
    pub loss: String,
    pub conditions: Vec<ConditionResult>,
    pub passed: bool,
    pub certification: String,
}

impl AssumptionReport {
    pub fn failed_checks(&self) -> Vec<&str> {
        self.conditions
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.check.as_str())
            .collect()
    }
}

/// Linear grid on `[-50, 5]` plus a geometric left tail, extended until both
/// `l(z)` and `|z l'(z)|` drop below `1e-8` (needed by slowly decaying tails).
pub fn default_z_grid(loss: &dyn ScalarLoss) -> Vec<f64> {
    let mut tail = Vec::new();
    let mut z = -50.0;
    for _ in 0..1100 {
        let v = loss.value(z);
        let zd = (z * loss.d1(z)).abs();
        if v < TAIL_LIMIT && zd < TAIL_LIMIT {
            break;
        }
        z *= 2.0;
        if !z.is_finite() {
            break;
        }
        tail.push(z);
    }
    tail.reverse();
    let steps = 2200;
    let linear = (0..=steps).map(|i| -50.0 + 55.0 * i as f64 / steps as f64);
    tail.into_iter().chain(linear).collect()
}

pub fn default_b_grid() -> Vec<f64> {
    vec![1.0, 1.5, 2.0, 5.0, 10.0, 100.0, 1e4]
}

fn monotone_violation(values: &[f64]) -> f64 {
    values
        .windows(2)
        .map(|w| w[0] - w[1] - MONOTONE_TOL * w[0].abs().max(1.0))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn min_max(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    })
}

fn result(
    condition: u8,
    check: impl Into<String>,
    grid: &[f64],
    worst_violation: f64,
    measured: &[f64],
) -> ConditionResult {
    let worst_violation = if worst_violation.is_nan() {
        f64::INFINITY
    } else {
        worst_violation
    };
    let (measured_min, measured_max) = min_max(measured);
    ConditionResult {
        condition,
        check: check.into(),
        grid: GridSpan::of(grid),
        worst_violation,
        passed: worst_violation <= 0.0,
        measured_min,
        measured_max,
    }
}

/// Strict-positivity violation: `-v` for positive `v`, otherwise `1 - v`.
fn positivity_violation(v: f64) -> f64 {
    if v > 0.0 {
        -v
    } else if v.is_nan() {
        f64::INFINITY
    } else {
        1.0 - v
    }
}

pub fn verify_assumption2(
    loss: &dyn ScalarLoss,
    z_grid: &[f64],
    b_grid: &[f64],
) -> Result<AssumptionReport> {
    let (lo, hi) = min_max(z_grid);
    if z_grid.len() < 1000 || lo > -50.0 || hi < 5.0 {
        return Err(Error::config(format!(
            "z grid must span [-50, 5] with at least 1000 points (got {} points on [{lo}, {hi}])",
            z_grid.len()
        )));
    }
    if b_grid.is_empty() || b_grid.iter().any(|&b| !(b >= 1.0)) {
        return Err(Error::config("b grid must be non-empty with every b >= 1"));
    }
    let mut grid = z_grid.to_vec();
    grid.sort_by(|a, b| a.total_cmp(b));

    let values: Vec<f64> = grid.iter().map(|&z| loss.value(z)).collect();
    let d1: Vec<f64> = grid.iter().map(|&z| loss.d1(z)).collect();
    let d2: Vec<f64> = grid.iter().map(|&z| loss.d2(z)).collect();
    let mut out = Vec::new();

    // 1: positivity and vanishing left tail
    let pos = (0..grid.len())
        .map(|i| {
            positivity_violation(values[i])
                .max(positivity_violation(d1[i]))
                .max(positivity_violation(d2[i]))
        })
        .fold(f64::NEG_INFINITY, f64::max);
    let smallest: Vec<f64> = (0..grid.len()).map(|i| values[i].min(d1[i]).min(d2[i])).collect();
    out.push(result(1, "positivity of l, l', l''", &grid, pos, &smallest));
    out.push(result(
        1,
        "l(z) -> 0 at the left end",
        &grid[..1],
        values[0].abs() - TAIL_LIMIT,
        &values[..1],
    ));

    // 2: z l'(z) / l(z) increasing on z < 0, and z l'(z) -> 0
    let neg: Vec<usize> = (0..grid.len()).filter(|&i| grid[i] < 0.0).collect();
    let ratio: Vec<f64> = neg.iter().map(|&i| grid[i] * d1[i] / values[i]).collect();
    let neg_grid: Vec<f64> = neg.iter().map(|&i| grid[i]).collect();
    out.push(result(
        2,
        "z l'(z)/l(z) increasing on z < 0",
        &neg_grid,
        monotone_violation(&ratio),
        &ratio,
    ));
    let tail = grid[0] * d1[0];
    out.push(result(
        2,
        "z l'(z) -> 0 at the left end",
        &grid[..1],
        tail.abs() - TAIL_LIMIT,
        &[tail],
    ));

    // 3: l'(l^{-1}(a)) / l'(l^{-1}(ab)) bounded below, for each b
    for &b in b_grid {
        let mut ratios = Vec::with_capacity(grid.len());
        let mut failed = false;
        for &a in &values {
            let pair = loss.inverse(a).and_then(|za| Ok((za, loss.inverse(a * b)?)));
            match pair {
                Ok((za, zab)) => ratios.push(loss.d1(za) / loss.d1(zab)),
                Err(_) => failed = true,
            }
        }
        let c = ratios.iter().copied().fold(f64::INFINITY, f64::min);
        let violation = if !failed && c > 0.0 && c.is_finite() {
            -c
        } else {
            1.0
        };
        out.push(result(
            3,
            format!("l'(l^-1(a))/l'(l^-1(ab)) >= c > 0 for b = {b}"),
            &values,
            violation,
            &ratios,
        ));
    }

    // 4: convexity criterion l'^2/(l l'') increasing
    let conv: Vec<f64> = (0..grid.len())
        .map(|i| d1[i] * d1[i] / (values[i] * d2[i]))
        .collect();
    out.push(result(
        4,
        "l'^2/(l l'') increasing",
        &grid,
        monotone_violation(&conv),
        &conv,
    ));

    // 4: smoothness criterion l'' <= c l'
    let curv: Vec<f64> = (0..grid.len()).map(|i| d2[i] / d1[i]).collect();
    let sup = curv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let violation = match loss.curvature_ratio_bound() {
        Some(claim) => curv
            .iter()
            .map(|&r| r - claim * (1.0 + MONOTONE_TOL))
            .fold(f64::NEG_INFINITY, f64::max),
        None if sup.is_finite() && curv.iter().all(|r| r.is_finite()) => -1.0,
        None => 1.0,
    };
    out.push(result(4, "l'' <= c l' on the grid", &grid, violation, &curv));

    let passed = out.iter().all(|c| c.passed);
    Ok(AssumptionReport {
        loss: loss.name(),
        conditions: out,
        passed,
        certification: "grid-certified only".to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossFunction;

    fn verify(loss: &LossFunction) -> AssumptionReport {
        verify_assumption2(loss, &default_z_grid(loss), &default_b_grid()).unwrap()
    }

    fn check<'a>(r: &'a AssumptionReport, prefix: &str) -> &'a ConditionResult {
        r.conditions.iter().find(|c| c.check.starts_with(prefix)).unwrap()
    }

    #[test]
    fn all_paper_losses_pass() {
        let mut losses = vec![LossFunction::exp(), LossFunction::logistic()];
        for k in [0.5, 1.0, 2.0, 5.0] {
            losses.push(LossFunction::poly_tail(k).unwrap());
        }
        for loss in &losses {
            let r = verify(loss);
            assert!(r.passed, "{}: failed {:?}", loss.label(), r.failed_checks());
            for c in &r.conditions {
                assert_eq!(c.passed, c.worst_violation <= 0.0);
            }
        }
    }

    #[test]
    fn exp_convexity_ratio_is_one() {
        let r = verify(&LossFunction::exp());
        let c = check(&r, "l'^2/(l l'')");
        assert!((c.measured_min - 1.0).abs() < 1e-12);
        assert!((c.measured_max - 1.0).abs() < 1e-12);
        // c = 1/b exactly for the exponential loss
        let c3 = check(&r, "l'(l^-1(a))/l'(l^-1(ab)) >= c > 0 for b = 10");
        assert!((c3.measured_min - 0.1).abs() < 1e-12);
    }

    #[test]
    fn poly_tail_ratio_on_left_half_is_k_over_k_plus_one() {
        let loss = LossFunction::poly_tail(1.0).unwrap();
        for z in [-1e6, -100.0, -3.0, -0.5, 0.0] {
            let h = loss.d1(z).powi(2) / (loss.value(z) * loss.d2(z));
            assert!((h - 0.5).abs() < 1e-12, "{z}: {h}");
        }
    }

    #[test]
    fn logistic_convexity_ratio_matches_closed_form() {
        let loss = LossFunction::logistic();
        let mut prev = 0.0;
        for i in 0..400 {
            let z = -20.0 + 0.1 * i as f64;
            let h = loss.d1(z).powi(2) / (loss.value(z) * loss.d2(z));
            let closed = z.exp() / z.exp().ln_1p();
            assert!((h - closed).abs() <= 1e-10 * closed);
            assert!(h >= prev);
            prev = h;
        }
    }

    #[test]
    fn small_grid_is_a_configuration_error() {
        let loss = LossFunction::exp();
        let grid: Vec<f64> = (0..100).map(|i| -50.0 + i as f64).collect();
        assert!(matches!(
            verify_assumption2(&loss, &grid, &[1.0]),
            Err(Error::Config(_))
        ));
        let grid = default_z_grid(&loss);
        assert!(matches!(verify_assumption2(&loss, &grid, &[]), Err(Error::Config(_))));
        assert!(matches!(verify_assumption2(&loss, &grid, &[0.5]), Err(Error::Config(_))));
    }

    struct Quadratic;

    impl ScalarLoss for Quadratic {
        fn name(&self) -> String {
            "quadratic".into()
        }
        fn value(&self, z: f64) -> f64 {
            z * z
        }
        fn d1(&self, z: f64) -> f64 {
            2.0 * z
        }
        fn d2(&self, _z: f64) -> f64 {
            2.0
        }
        fn inverse(&self, s: f64) -> Result<f64> {
            Ok(s.sqrt())
        }
    }

    #[test]
    fn broken_loss_fails_with_named_conditions() {
        let r = verify_assumption2(&Quadratic, &default_z_grid(&Quadratic), &[2.0]).unwrap();
        assert!(!r.passed);
        let failed = r.failed_checks();
        assert!(failed.contains(&"positivity of l, l', l''"));
        assert!(failed.contains(&"l(z) -> 0 at the left end"));
    }
}
