//! Adaptive Gauss–Kronrod quadrature (G7/K15) in one and two dimensions.
//!
//! The integrands in this crate are products of Gaussians with low-order
//! polynomials — smooth, rapidly decaying, and occasionally sharply peaked
//! relative to the integration box. A 7-point Gauss rule embedded in a
//! 15-point Kronrod extension gives a cheap per-panel error estimate
//! `|K15 - G7|`; panels are split worst-first until the accumulated estimate
//! meets the requested absolute tolerance. Two-dimensional integrals are
//! iterated: the outer 1D rule integrates a function whose values are inner
//! 1D integrals at a proportionally tighter tolerance.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::error::{Error, Result};

/// Nodes of the 15-point Kronrod rule on [-1, 1] (positive half; symmetric).
const XGK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];

/// Kronrod weights matching [`XGK`].
const WGK: [f64; 8] = [
    0.022_935_322_010_529_225,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_18,
    0.140_653_259_715_525_92,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_83,
];

/// Weights of the embedded 7-point Gauss rule (nodes are `XGK[1], XGK[3],
/// XGK[5], XGK[7]` by symmetry).
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_94,
    0.417_959_183_673_469_4,
];

/// Maximum number of panels before adaptive refinement gives up.
const MAX_PANELS: usize = 20_000;

/// A converged quadrature value with its accumulated error estimate.
#[derive(Debug, Clone, Copy)]
pub struct QuadResult {
    pub value: f64,
    pub error_estimate: f64,
}

/// One panel's K15 value and `|K15 - G7|` estimate.
fn kronrod_panel(f: &impl Fn(f64) -> f64, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kron = WGK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let fp = f(c + h * XGK[i]);
        let fm = f(c - h * XGK[i]);
        kron += WGK[i] * (fp + fm);
        if i % 2 == 1 {
            gauss += WG[i / 2] * (fp + fm);
        }
    }
    (h * kron, (h * (kron - gauss)).abs())
}

struct Panel {
    a: f64,
    b: f64,
    value: f64,
    error: f64,
}

impl PartialEq for Panel {
    fn eq(&self, other: &Self) -> bool {
        self.error == other.error
    }
}
impl Eq for Panel {}
impl PartialOrd for Panel {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Panel {
    fn cmp(&self, other: &Self) -> Ordering {
        // Worst panel first; errors are finite non-negative floats here.
        self.error.total_cmp(&other.error)
    }
}

/// Adaptive 1D integration of `f` over `[a, b]` to absolute tolerance
/// `abs_tol`. Fails with the achieved estimate if the panel budget is
/// exhausted first.
pub fn integrate_1d(f: impl Fn(f64) -> f64, a: f64, b: f64, abs_tol: f64) -> Result<QuadResult> {
    let (value, error) = kronrod_panel(&f, a, b);
    let mut heap = BinaryHeap::new();
    heap.push(Panel { a, b, value, error });
    let mut total_error: f64 = error;
    let mut panels = 1usize;
    while total_error > abs_tol && panels < MAX_PANELS {
        let worst = heap.pop().expect("heap never empties during refinement");
        let mid = 0.5 * (worst.a + worst.b);
        if mid <= worst.a || mid >= worst.b {
            // Interval at floating-point resolution; keep its estimate.
            total_error -= worst.error;
            heap.push(Panel {
                error: 0.0,
                ..worst
            });
            continue;
        }
        let (lv, le) = kronrod_panel(&f, worst.a, mid);
        let (rv, re) = kronrod_panel(&f, mid, worst.b);
        total_error += le + re - worst.error;
        heap.push(Panel {
            a: worst.a,
            b: mid,
            value: lv,
            error: le,
        });
        heap.push(Panel {
            a: mid,
            b: worst.b,
            value: rv,
            error: re,
        });
        panels += 1;
    }
    let value: f64 = heap.iter().map(|p| p.value).sum();
    if total_error > abs_tol {
        return Err(Error::QuadratureNonConvergence {
            achieved: total_error,
            requested: abs_tol,
        });
    }
    Ok(QuadResult {
        value,
        error_estimate: total_error,
    })
}

/// Adaptive 2D integration of `f(u, v)` over `[ax,bx] x [ay,by]` to absolute
/// tolerance `abs_tol`, by iterated 1D rules. The inner integrals run at a
/// tolerance small enough that their accumulated contribution stays below 10%
/// of the budget; the reported estimate combines both levels conservatively.
pub fn integrate_2d(
    f: impl Fn(f64, f64) -> f64,
    ax: f64,
    bx: f64,
    ay: f64,
    by: f64,
    abs_tol: f64,
) -> Result<QuadResult> {
    let inner_tol = 0.1 * abs_tol / (by - ay).abs().max(1.0);
    let inner_failure: std::cell::RefCell<Option<Error>> = std::cell::RefCell::new(None);
    let outer = integrate_1d(
        |v| match integrate_1d(|u| f(u, v), ax, bx, inner_tol) {
            Ok(r) => r.value,
            Err(e) => {
                let mut slot = inner_failure.borrow_mut();
                if slot.is_none() {
                    *slot = Some(e);
                }
                f64::NAN
            }
        },
        ay,
        by,
        0.8 * abs_tol,
    );
    if let Some(e) = inner_failure.into_inner() {
        return Err(e);
    }
    let outer = outer?;
    let combined = outer.error_estimate + 0.1 * abs_tol;
    if combined > abs_tol || !outer.value.is_finite() {
        return Err(Error::QuadratureNonConvergence {
            achieved: combined,
            requested: abs_tol,
        });
    }
    Ok(QuadResult {
        value: outer.value,
        error_estimate: combined,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn gaussian_integral_1d() {
        let r = integrate_1d(|u| (-u * u).exp(), -10.0, 10.0, 1e-12).unwrap();
        assert_abs_diff_eq!(r.value, PI.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn polynomial_is_exact() {
        // K15 integrates degree <= 22 exactly; a cubic over one panel is trivial.
        let r = integrate_1d(|u| 3.0 * u * u, 0.0, 2.0, 1e-13).unwrap();
        assert_abs_diff_eq!(r.value, 8.0, epsilon = 1e-12);
    }

    #[test]
    fn sharp_peak_needs_refinement_but_converges() {
        // Narrow Gaussian far from the panel center.
        let r = integrate_1d(|u| (-(u - 3.0) * (u - 3.0) * 400.0).exp(), -10.0, 10.0, 1e-10)
            .unwrap();
        assert_abs_diff_eq!(r.value, (PI / 400.0).sqrt(), epsilon = 1e-10);
    }

    #[test]
    fn gaussian_integral_2d() {
        let r = integrate_2d(
            |u, v| (-(u * u + v * v)).exp(),
            -8.0,
            8.0,
            -8.0,
            8.0,
            1e-10,
        )
        .unwrap();
        assert_abs_diff_eq!(r.value, PI, epsilon = 1e-9);
        assert!(r.error_estimate <= 1e-10);
    }

    #[test]
    fn displaced_gaussian_2d() {
        // Same mass wherever the peak sits inside the box.
        let r = integrate_2d(
            |u, v| (-2.0 * ((u - 1.3) * (u - 1.3) + (v + 0.4) * (v + 0.4))).exp(),
            -9.0,
            9.0,
            -9.0,
            9.0,
            1e-10,
        )
        .unwrap();
        assert_abs_diff_eq!(r.value, PI / 2.0, epsilon = 1e-9);
    }

    #[test]
    fn impossible_tolerance_reports_failure() {
        // A discontinuous integrand cannot reach 1e-15 within the panel budget.
        let res = integrate_1d(|u| if u > 0.123456 { 1.0 } else { 0.0 }, -1.0, 1.0, 1e-15);
        match res {
            Err(Error::QuadratureNonConvergence { achieved, requested }) => {
                assert!(achieved > requested);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
