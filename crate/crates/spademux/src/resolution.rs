//! Minimal resolvable distance and its scaling with photon number.
//!
//! The resolution criterion is a unit signal-to-noise ratio: with `N`
//! detected photons and per-photon information `F`, the separation estimate
//! carries `SNR(d) = d sqrt(N F(d))`, and the minimal resolvable distance is
//! the *smallest* `d` with `SNR = 1`. In the dimensionless variables used
//! throughout (`x = d/(2w)`, `w^2 F`), `SNR = 2x sqrt(N w^2F)`.
//!
//! An ideal sorter gives `d_min = w/sqrt(N)` (shot-noise scaling). Crosstalk
//! flattens the information to `F ~ x^2` at small `x`, which degrades the
//! scaling to `d_min ~ N^(-1/4)`; the same quartic law governs direct
//! imaging. [`minimal_resolvable_distance`] solves the criterion on any
//! information curve; the `dmin_*` functions give the closed-form asymptotes;
//! [`scaling_exponent`] fits observed `d_min(N)` scaling laws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::X_FLOOR;

/// Default log-spaced scan resolution for bracketing the first SNR=1 root.
pub const SCAN_POINTS: usize = 400;
/// Scan domain for the root search, in `x = d/(2w)`.
pub const SCAN_MIN: f64 = 1e-6;
pub const SCAN_MAX: f64 = 5.0;
/// Root acceptance: `|SNR - 1|` below this.
pub const SNR_TOL: f64 = 1e-9;

/// How a resolution figure was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionMethod {
    RootSolve,
    AnalyticIdeal,
    AnalyticUniform,
    AnalyticDirectImaging,
}

impl std::fmt::Display for ResolutionMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ResolutionMethod::RootSolve => "root-solve",
            ResolutionMethod::AnalyticIdeal => "analytic-ideal",
            ResolutionMethod::AnalyticUniform => "analytic-uniform",
            ResolutionMethod::AnalyticDirectImaging => "analytic-direct-imaging",
        };
        f.write_str(s)
    }
}

/// A minimal resolvable distance, in `d/(2w)` units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolutionResult {
    /// Smallest `x` with `SNR(x) = 1`; `None` when the SNR stays below 1 on
    /// the whole scan domain (unresolvable at this photon number).
    pub dmin_over_2w: Option<f64>,
    pub n_photons: f64,
    pub method: ResolutionMethod,
    /// Tight interval certifying the returned root (root-solve only).
    pub bracket: Option<(f64, f64)>,
    /// Every sign-change interval found by the coarse scan, in order; only
    /// the first is refined and returned.
    pub brackets: Vec<(f64, f64)>,
}

/// A least-squares power-law fit of `d_min` against `N`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    /// Slope of `log d_min` vs `log N` (e.g. -1/2 shot-noise, -1/4 quartic).
    pub exponent: f64,
    /// Intercept in natural-log space: `ln d_min = exponent ln N + intercept`.
    pub intercept: f64,
    /// Photon-number range covered by the fit.
    pub n_range: (f64, f64),
    /// Root-mean-square residual of `ln d_min` about the fit line.
    pub residual: f64,
    pub n_points: usize,
}

/// `SNR = 2x sqrt(N w2f)` — the dimensionless form of `d sqrt(N F)`.
pub fn snr(x: f64, n_photons: f64, w2f: f64) -> f64 {
    2.0 * x * (n_photons * w2f).sqrt()
}

/// Solve `SNR(x) = 1` on the information curve `w2f_of_x`, returning the
/// smallest root in `[SCAN_MIN, SCAN_MAX]`.
///
/// A log-spaced scan of [`SCAN_POINTS`] points brackets every sign change of
/// `SNR - 1`; the first bracket is refined by bisection until
/// `|SNR - 1| < SNR_TOL`. The scan guarantees `SNR < 1` at every sampled
/// point below the returned root, so the "first root" semantics hold at the
/// scan resolution even when the information curve is non-monotone and the
/// criterion has several solutions (all found brackets are reported).
pub fn minimal_resolvable_distance(
    w2f_of_x: impl Fn(f64) -> Result<f64>,
    n_photons: f64,
) -> Result<ResolutionResult> {
    if !(n_photons > 0.0) || !n_photons.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "photon number must be finite and > 0, got {n_photons}"
        )));
    }
    let g = |x: f64| -> Result<f64> { Ok(snr(x, n_photons, w2f_of_x(x)?) - 1.0) };

    let log_min = SCAN_MIN.ln();
    let step = (SCAN_MAX / SCAN_MIN).ln() / (SCAN_POINTS - 1) as f64;
    let grid_x = |i: usize| (log_min + step * i as f64).exp();

    let mut brackets = Vec::new();
    let mut prev = g(grid_x(0))?;
    for i in 1..SCAN_POINTS {
        let x = grid_x(i);
        let cur = g(x)?;
        if prev < 0.0 && cur >= 0.0 {
            brackets.push((grid_x(i - 1), x));
        }
        prev = cur;
    }
    let Some(&(mut lo, mut hi)) = brackets.first() else {
        return Ok(ResolutionResult {
            dmin_over_2w: None,
            n_photons,
            method: ResolutionMethod::RootSolve,
            bracket: None,
            brackets,
        });
    };

    let mut root = 0.5 * (lo + hi);
    let mut residual = f64::INFINITY;
    for _ in 0..300 {
        root = 0.5 * (lo + hi);
        let val = g(root)?;
        residual = val.abs();
        if residual < SNR_TOL {
            break;
        }
        if val < 0.0 {
            lo = root;
        } else {
            hi = root;
        }
        if (hi - lo) < f64::EPSILON * hi {
            // Interval exhausted at floating-point resolution.
            break;
        }
    }
    if residual >= SNR_TOL {
        return Err(Error::QuadratureNonConvergence {
            achieved: residual,
            requested: SNR_TOL,
        });
    }
    Ok(ResolutionResult {
        dmin_over_2w: Some(root),
        n_photons,
        method: ResolutionMethod::RootSolve,
        bracket: Some((lo, hi)),
        brackets,
    })
}

/// Shot-noise limit of an ideal sorter: `d_min = w/sqrt(N)`, i.e.
/// `d_min/(2w) = 1/(2 sqrt(N))`.
pub fn dmin_ideal(n_photons: f64) -> Result<ResolutionResult> {
    if !(n_photons > 0.0) || !n_photons.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "photon number must be finite and > 0, got {n_photons}"
        )));
    }
    Ok(ResolutionResult {
        dmin_over_2w: Some(0.5 / n_photons.sqrt()),
        n_photons,
        method: ResolutionMethod::AnalyticIdeal,
        bracket: None,
        brackets: Vec::new(),
    })
}

/// Large-`N` minimal distance of the uniform crosstalk model:
///
/// `d_min = (w / N^(1/4)) sqrt(2|r| / (1 - P_scat)) (4 / (3 + cos 4theta))^(1/4)`
///
/// (`P_scat = 0` gives the loss-free version). Valid once `d_min` falls into
/// the quadratic-information regime; at small `N` the root-solved value on
/// the exact information curve is the meaningful one.
pub fn dmin_uniform(
    n_photons: f64,
    r_magnitude: f64,
    p_scat: f64,
    theta: f64,
) -> Result<ResolutionResult> {
    if !(n_photons > 0.0) || !n_photons.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "photon number must be finite and > 0, got {n_photons}"
        )));
    }
    if !(r_magnitude > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "off-diagonal magnitude must be > 0, got {r_magnitude}"
        )));
    }
    if !(0.0..1.0).contains(&p_scat) {
        return Err(Error::InvalidParameter(format!(
            "scattering probability must lie in [0, 1), got {p_scat}"
        )));
    }
    let d_over_w = n_photons.powf(-0.25)
        * (2.0 * r_magnitude / (1.0 - p_scat)).sqrt()
        * (4.0 / (3.0 + (4.0 * theta).cos())).powf(0.25);
    Ok(ResolutionResult {
        dmin_over_2w: Some(0.5 * d_over_w),
        n_photons,
        method: ResolutionMethod::AnalyticUniform,
        bracket: None,
        brackets: Vec::new(),
    })
}

/// Large-`N` minimal distance of ideal direct imaging:
/// `d_min = (w / N^(1/4)) (1/2)^(1/4)`, from the `8x^2` small-separation
/// information. Accurate for `N` of roughly 100 upward; at small `N` root
/// solving on the quadrature information curve differs noticeably.
pub fn dmin_direct_imaging(n_photons: f64) -> Result<ResolutionResult> {
    if !(n_photons > 0.0) || !n_photons.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "photon number must be finite and > 0, got {n_photons}"
        )));
    }
    let d_over_w = n_photons.powf(-0.25) * 0.5f64.powf(0.25);
    Ok(ResolutionResult {
        dmin_over_2w: Some(0.5 * d_over_w),
        n_photons,
        method: ResolutionMethod::AnalyticDirectImaging,
        bracket: None,
        brackets: Vec::new(),
    })
}

/// True when a uniform-crosstalk sorter still beats ideal direct imaging:
/// `|r|^2 / (1 - P_scat)^2 < 1/8`.
pub fn uniform_beats_direct_imaging(r_magnitude: f64, p_scat: f64) -> bool {
    let r2 = r_magnitude * r_magnitude;
    r2 / ((1.0 - p_scat) * (1.0 - p_scat)) < 0.125
}

fn fit_loglog(points: &[(f64, f64)]) -> Result<ScalingFit> {
    for &(n, d) in points {
        if !(n > 0.0) || !(d > 0.0) || !n.is_finite() || !d.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "scaling fit needs positive finite (N, d_min) pairs, got ({n}, {d})"
            )));
        }
    }
    let k = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(n, d) in points {
        let (lx, ly) = (n.ln(), d.ln());
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    let denom = k * sxx - sx * sx;
    if denom <= 0.0 {
        return Err(Error::InsufficientData(
            "scaling fit needs at least two distinct N values".into(),
        ));
    }
    let exponent = (k * sxy - sx * sy) / denom;
    let intercept = (sy - exponent * sx) / k;
    let mut ss = 0.0;
    for &(n, d) in points {
        let resid = d.ln() - (exponent * n.ln() + intercept);
        ss += resid * resid;
    }
    let n_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let n_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    Ok(ScalingFit {
        exponent,
        intercept,
        n_range: (n_min, n_max),
        residual: (ss / k).sqrt(),
        n_points: points.len(),
    })
}

/// Least-squares fit of `log d_min` vs `log N` over an asymptotic regime:
/// requires at least 5 points spanning at least two decades in `N`, so the
/// fitted exponent is meaningful as a scaling law.
pub fn scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 5 {
        return Err(Error::InsufficientData(format!(
            "scaling fit needs >= 5 points, got {}",
            points.len()
        )));
    }
    let n_min = points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let n_max = points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
    if n_max < 100.0 * n_min * (1.0 - 1e-12) {
        return Err(Error::InsufficientData(format!(
            "scaling fit needs N spanning >= 2 decades, got [{n_min:e}, {n_max:e}]"
        )));
    }
    fit_loglog(points)
}

/// The same fit without the span requirement, for sliding-window diagnostics
/// of the regime transition (one-decade windows have well-defined local
/// slopes but are not asymptotic scaling laws).
pub fn local_scaling_exponent(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "local slope needs >= 2 points, got {}",
            points.len()
        )));
    }
    fit_loglog(points)
}

/// Log-spaced photon-number grid, inclusive of both ends.
pub fn log_spaced(min: f64, max: f64, count: usize) -> Result<Vec<f64>> {
    if count < 2 || !(min > 0.0) || !(max > min) {
        return Err(Error::InvalidParameter(format!(
            "log grid needs max > min > 0 and >= 2 points, got [{min}, {max}] x {count}"
        )));
    }
    let step = (max / min).ln() / (count - 1) as f64;
    Ok((0..count)
        .map(|i| (min.ln() + step * i as f64).exp())
        .collect())
}

/// Convenience: root-solve `d_min` for the ideal sorter with measured cutoff
/// `q_measured`, using the closed-form information curve.
pub fn dmin_ideal_root_solved(q_measured: u32, n_photons: f64) -> Result<ResolutionResult> {
    minimal_resolvable_distance(
        |x| {
            Ok(crate::fisher::fisher_ideal_closed_form(q_measured, x.max(X_FLOOR))?.w2f)
        },
        n_photons,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::FRAC_PI_4;

    #[test]
    fn snr_reference_points() {
        assert_abs_diff_eq!(snr(0.5, 1.0, 1.0), 1.0, epsilon = 1e-15);
        assert_eq!(snr(0.3, 0.0, 0.7), 0.0);
        assert_relative_eq!(snr(0.005, 1e4, 1.0), 1.0, max_relative = 1e-12);
    }

    #[test]
    fn ideal_root_solve_frozen_values() {
        let cases = [
            (100.0, 0.050_125_707_9),
            (1e4, 0.005_000_125_0),
            (1e6, 0.000_500_000_1),
        ];
        for (n, expected) in cases {
            let res = dmin_ideal_root_solved(1, n).unwrap();
            let root = res.dmin_over_2w.unwrap();
            assert_relative_eq!(root, expected, max_relative = 1e-6);
            // Certification: the root satisfies the criterion to tolerance.
            assert!((snr(root, n, crate::fisher::fisher_ideal_closed_form(1, root).unwrap().w2f)
                - 1.0)
                .abs()
                < SNR_TOL);
            assert_eq!(res.method, ResolutionMethod::RootSolve);
            assert!(res.bracket.is_some());
        }
    }

    #[test]
    fn saturated_information_gives_half() {
        // With w2F pinned at 1 and N = 1, SNR = 2x crosses 1 at exactly 1/2.
        let res = minimal_resolvable_distance(|_| Ok(1.0), 1.0).unwrap();
        assert_abs_diff_eq!(res.dmin_over_2w.unwrap(), 0.5, epsilon = 1e-9);
        // A deep measured cutoff approximates that saturation.
        let deep = dmin_ideal_root_solved(10, 1.0).unwrap();
        assert_abs_diff_eq!(deep.dmin_over_2w.unwrap(), 0.5, epsilon = 1e-3);
    }

    #[test]
    fn unresolvable_when_snr_stays_low() {
        // Tiny information over the whole domain: SNR_max = 2*5*sqrt(1e-4) = 0.1.
        let res = minimal_resolvable_distance(|_| Ok(1e-4), 1.0).unwrap();
        assert_eq!(res.dmin_over_2w, None);
        assert!(res.brackets.is_empty());
    }

    #[test]
    fn first_root_semantics_with_multiple_crossings() {
        // SNR(x) = 1.1 + sin(6x): crosses 1 several times on the scan domain.
        let w2f = |x: f64| {
            let s = 1.1 + (6.0 * x).sin();
            Ok(s * s / (4.0 * x * x))
        };
        let res = minimal_resolvable_distance(w2f, 1.0).unwrap();
        assert!(res.brackets.len() >= 2, "found {:?}", res.brackets);
        let root = res.dmin_over_2w.unwrap();
        // First crossing of sin(6x) = -0.1 from above.
        let expected = (std::f64::consts::PI + 0.1f64.asin()) / 6.0;
        assert_relative_eq!(root, expected, max_relative = 1e-8);
        assert!(root >= res.brackets[0].0 && root <= res.brackets[0].1);
    }

    #[test]
    fn curve_errors_propagate() {
        let res = minimal_resolvable_distance(
            |x| {
                if x > 0.1 {
                    Err(crate::Error::InvalidParameter("boom".into()))
                } else {
                    Ok(1.0)
                }
            },
            1e4,
        );
        assert!(res.is_err());
    }

    #[test]
    fn analytic_ideal_values() {
        assert_abs_diff_eq!(dmin_ideal(1.0).unwrap().dmin_over_2w.unwrap(), 0.5);
        assert_abs_diff_eq!(dmin_ideal(1e4).unwrap().dmin_over_2w.unwrap(), 0.005);
        // d_min = 0.1 w at N = 100, i.e. 0.05 in 2w units.
        assert_abs_diff_eq!(dmin_ideal(100.0).unwrap().dmin_over_2w.unwrap(), 0.05);
        assert!(dmin_ideal(0.0).is_err());
    }

    #[test]
    fn analytic_uniform_values() {
        let r = 0.0017f64.sqrt();
        let res = dmin_uniform(1e4, r, 0.0, 0.0).unwrap();
        // d/w = 0.0287162..., reported in 2w units.
        assert_relative_eq!(
            res.dmin_over_2w.unwrap(),
            0.5 * 0.028_716_2,
            max_relative = 1e-5
        );
        // Angular factor: theta = pi/4 costs 2^(1/4) in distance.
        let a = dmin_uniform(1e4, r, 0.0, FRAC_PI_4).unwrap().dmin_over_2w.unwrap();
        let b = dmin_uniform(1e4, r, 0.0, 0.0).unwrap().dmin_over_2w.unwrap();
        assert_relative_eq!(a / b, 2.0f64.powf(0.25), max_relative = 1e-12);
        // Quartic scaling: 16x the photons halves the distance.
        let c = dmin_uniform(16e4, r, 0.0, 0.0).unwrap().dmin_over_2w.unwrap();
        assert_relative_eq!(c / b, 0.5, max_relative = 1e-12);
        // Loss correction increases d_min.
        let lossy = dmin_uniform(1e4, r, 0.3, 0.0).unwrap().dmin_over_2w.unwrap();
        assert!(lossy > b);
        assert!(dmin_uniform(1e4, 0.0, 0.0, 0.0).is_err());
        assert!(dmin_uniform(1e4, r, 1.0, 0.0).is_err());
    }

    #[test]
    fn analytic_direct_imaging_value_and_crossover() {
        let res = dmin_direct_imaging(1e4).unwrap();
        assert_relative_eq!(
            res.dmin_over_2w.unwrap(),
            0.5 * 0.1 * 0.5f64.powf(0.25),
            max_relative = 1e-12
        );
        assert!(uniform_beats_direct_imaging(0.0017f64.sqrt(), 0.0136));
        // |r|^2 = 0.05 at D=9: left side 0.05/(1-0.4)^2 = 0.1389 > 1/8.
        let r = 0.05f64.sqrt();
        assert!(!uniform_beats_direct_imaging(r, 8.0 * 0.05));
    }

    #[test]
    fn ordering_below_crossover() {
        let n = 1e4;
        let r = 0.0017f64.sqrt();
        let ideal = dmin_ideal(n).unwrap().dmin_over_2w.unwrap();
        let uniform = dmin_uniform(n, r, 0.0136, 0.0).unwrap().dmin_over_2w.unwrap();
        let di = dmin_direct_imaging(n).unwrap().dmin_over_2w.unwrap();
        assert!(ideal < uniform && uniform < di);
    }

    #[test]
    fn scaling_fit_recovers_exact_laws() {
        let ideal: Vec<(f64, f64)> = (1..=6)
            .map(|k| {
                let n = 10f64.powi(k);
                (n, dmin_ideal(n).unwrap().dmin_over_2w.unwrap())
            })
            .collect();
        let fit = scaling_exponent(&ideal).unwrap();
        assert_abs_diff_eq!(fit.exponent, -0.5, epsilon = 1e-12);
        assert!(fit.residual < 1e-12);
        assert_eq!(fit.n_points, 6);

        let r = 0.0017f64.sqrt();
        let uniform: Vec<(f64, f64)> = (6..=9)
            .flat_map(|k| {
                let n = 10f64.powi(k);
                [(n, dmin_uniform(n, r, 0.0, 0.0).unwrap().dmin_over_2w.unwrap()),
                 (3.0 * n, dmin_uniform(3.0 * n, r, 0.0, 0.0).unwrap().dmin_over_2w.unwrap())]
            })
            .collect();
        let fit = scaling_exponent(&uniform).unwrap();
        assert_abs_diff_eq!(fit.exponent, -0.25, epsilon = 1e-12);
    }

    #[test]
    fn scaling_fit_validation() {
        let pts: Vec<(f64, f64)> = vec![(1.0, 1.0), (2.0, 0.9), (3.0, 0.8), (4.0, 0.75)];
        assert!(scaling_exponent(&pts).is_err()); // too few points
        let narrow: Vec<(f64, f64)> =
            (0..6).map(|i| (10.0 + i as f64, 1.0 / (10.0 + i as f64))).collect();
        assert!(scaling_exponent(&narrow).is_err()); // < 2 decades
        assert!(local_scaling_exponent(&narrow).is_ok()); // local fit allowed
        let local = local_scaling_exponent(&[(1.0, 1.0), (10.0, 0.5)]).unwrap();
        assert_relative_eq!(local.exponent, -(2.0f64.ln()) / 10f64.ln(), max_relative = 1e-12);
        assert!(local_scaling_exponent(&[(1.0, 1.0)]).is_err());
        assert!(scaling_exponent(&[(1.0, 0.0); 6]).is_err()); // nonpositive d
    }

    #[test]
    fn log_grid_endpoints() {
        let g = log_spaced(1e-2, 1e2, 5).unwrap();
        assert_relative_eq!(g[0], 1e-2, max_relative = 1e-12);
        assert_relative_eq!(g[4], 1e2, max_relative = 1e-12);
        assert_relative_eq!(g[2], 1.0, max_relative = 1e-12);
        assert!(log_spaced(0.0, 1.0, 5).is_err());
        assert!(log_spaced(1.0, 2.0, 1).is_err());
    }
}
