//! Hermite-Gauss mode overlaps and ideal detection probabilities.
//!
//! A diffraction-limited image of a point source displaced by `r0` from the
//! optical axis is a shifted Gaussian. Expanded in the Hermite-Gauss basis
//! `u_nm` matched to the point-spread function (width `w`), the expansion
//! coefficients have the closed form
//!
//! ```text
//! beta_nm = x^(n+m) cos^n(theta) sin^m(theta) exp(-x^2/2) / sqrt(n! m!)
//! ```
//!
//! with `x = d/(2w)` the dimensionless half-separation and `theta` the
//! orientation of the separation axis. For two incoherent equal-brightness
//! sources at `+r0` and `-r0`, an ideal (crosstalk-free) mode sorter clicks in
//! mode `(n,m)` with probability `beta_nm^2` — the same for both sources, since
//! the two displacements differ only by the sign `(-1)^(n+m)` of the amplitude.
//!
//! All quantities here are exact elementary formulas; [`overlap_oracle`]
//! additionally evaluates the defining overlap integral by adaptive quadrature
//! so the closed form can be validated against an independent computation.

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::fisher::ProbabilityModel;
use crate::quad;
use crate::X_FLOOR;

/// The estimation scenario: dimensionless half-separation `x = d/(2w)`, tilt
/// angle `theta` of the separation axis, and total photon number `N`.
///
/// `N` may be non-integer: only the product of source brightness and detection
/// efficiency matters, and every downstream quantity uses `N` as a real scale
/// factor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneParams {
    /// Half-separation in units of the beam width: `x = d/(2w)`, `x >= 0`.
    pub x: f64,
    /// Tilt angle in radians, normalized to `[0, 2*pi)`.
    pub theta: f64,
    /// Total photon number `N > 0`.
    pub n_photons: f64,
}

impl SceneParams {
    pub fn new(x: f64, theta: f64, n_photons: f64) -> Result<Self> {
        if !x.is_finite() || x < 0.0 {
            return Err(Error::InvalidParameter(format!(
                "half-separation x must be finite and >= 0, got {x}"
            )));
        }
        if !theta.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "tilt angle must be finite, got {theta}"
            )));
        }
        if !(n_photons > 0.0) || !n_photons.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "photon number must be finite and > 0, got {n_photons}"
            )));
        }
        Ok(SceneParams {
            x,
            theta: theta.rem_euclid(std::f64::consts::TAU),
            n_photons,
        })
    }

    /// Same scene at a different separation (used by separation sweeps and the
    /// likelihood search).
    pub fn with_x(&self, x: f64) -> Result<Self> {
        SceneParams::new(x, self.theta, self.n_photons)
    }
}

/// The 2D Hermite-Gauss index set: modes `(n,m)` with `n,m <= q_crosstalk`
/// span the crosstalk space of dimension `D = (q_crosstalk+1)^2`, of which the
/// subset `n,m <= q_measured` is actually detected.
///
/// Flat indexing is row-major in `(n,m)`: `flat = n*(q_crosstalk+1) + m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModeGrid {
    q_crosstalk: u32,
    q_measured: u32,
}

impl ModeGrid {
    pub fn new(q_crosstalk: u32, q_measured: u32) -> Result<Self> {
        if q_measured > q_crosstalk {
            return Err(Error::InvalidParameter(format!(
                "q_measured ({q_measured}) must not exceed q_crosstalk ({q_crosstalk})"
            )));
        }
        Ok(ModeGrid {
            q_crosstalk,
            q_measured,
        })
    }

    /// Construct from the crosstalk-space dimension `D`, which must be a
    /// perfect square `(q+1)^2`.
    pub fn from_dim(dim: usize, q_measured: u32) -> Result<Self> {
        let q = (dim as f64).sqrt().round() as usize;
        if q == 0 || q * q != dim {
            return Err(Error::InvalidParameter(format!(
                "crosstalk dimension {dim} is not a perfect square (q+1)^2"
            )));
        }
        ModeGrid::new((q - 1) as u32, q_measured)
    }

    pub fn q_crosstalk(&self) -> u32 {
        self.q_crosstalk
    }

    pub fn q_measured(&self) -> u32 {
        self.q_measured
    }

    /// Dimension of the crosstalk space, `D = (q_crosstalk+1)^2`.
    pub fn dim(&self) -> usize {
        let side = self.q_crosstalk as usize + 1;
        side * side
    }

    /// Number of measured modes, `(q_measured+1)^2`.
    pub fn n_measured(&self) -> usize {
        let side = self.q_measured as usize + 1;
        side * side
    }

    /// Row-major flat index of mode `(n,m)`. Panics if the mode lies outside
    /// the crosstalk space (an internal indexing bug, not a data error).
    pub fn flat_index(&self, n: u32, m: u32) -> usize {
        assert!(
            n <= self.q_crosstalk && m <= self.q_crosstalk,
            "mode ({n},{m}) outside crosstalk space q={}",
            self.q_crosstalk
        );
        (n as usize) * (self.q_crosstalk as usize + 1) + m as usize
    }

    /// Inverse of [`flat_index`](Self::flat_index).
    pub fn index_pair(&self, flat: usize) -> (u32, u32) {
        let side = self.q_crosstalk as usize + 1;
        assert!(flat < side * side, "flat index {flat} out of range");
        ((flat / side) as u32, (flat % side) as u32)
    }

    /// Whether mode `(n,m)` belongs to the measured subset.
    pub fn is_measured(&self, n: u32, m: u32) -> bool {
        n <= self.q_measured && m <= self.q_measured
    }

    /// Flat indices of the measured subset, in row-major order.
    pub fn measured_flat_indices(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.n_measured());
        for n in 0..=self.q_measured {
            for m in 0..=self.q_measured {
                out.push(self.flat_index(n, m));
            }
        }
        out
    }

    /// All `(n,m)` pairs of the crosstalk space in flat-index order.
    pub fn all_modes(&self) -> Vec<(u32, u32)> {
        let mut out = Vec::with_capacity(self.dim());
        for n in 0..=self.q_crosstalk {
            for m in 0..=self.q_crosstalk {
                out.push((n, m));
            }
        }
        out
    }
}

/// Overlap amplitude `beta_nm` between the displaced fundamental mode and the
/// Hermite-Gauss mode `(n,m)`, evaluated at an arbitrary raw angle (the mirror
/// source at `-r0` is reached via `theta + pi`).
///
/// Computed in log space so that `n+m` up to ~60 stays finite; the sign is
/// carried separately since `cos^n sin^m` may be negative.
pub(crate) fn overlap_raw(n: u32, m: u32, x: f64, theta: f64) -> f64 {
    if x == 0.0 {
        return if n + m == 0 { 1.0 } else { 0.0 };
    }
    let c = theta.cos();
    let s = theta.sin();
    if (n > 0 && c == 0.0) || (m > 0 && s == 0.0) {
        return 0.0;
    }
    let mut sign = 1.0;
    if n % 2 == 1 && c < 0.0 {
        sign = -sign;
    }
    if m % 2 == 1 && s < 0.0 {
        sign = -sign;
    }
    let ln_mag = f64::from(n + m) * x.ln() + f64::from(n) * c.abs().ln()
        + f64::from(m) * s.abs().ln()
        - 0.5 * x * x
        - 0.5 * (ln_gamma(f64::from(n) + 1.0) + ln_gamma(f64::from(m) + 1.0));
    sign * ln_mag.exp()
}

/// `d beta_nm / dx` at an arbitrary raw angle. Valid for `x > 0`; the factor
/// `(n+m-x^2)/x` covers the `n+m=0` case too (it reduces to `-x`).
pub(crate) fn overlap_dx_raw(n: u32, m: u32, x: f64, theta: f64) -> f64 {
    (f64::from(n + m) - x * x) / x * overlap_raw(n, m, x, theta)
}

/// Closed-form overlap amplitude `beta_nm(r0)` for the scene's displacement.
///
/// `beta_nm = x^(n+m) cos^n(theta) sin^m(theta) exp(-x^2/2) / sqrt(n! m!)`,
/// always real with `|beta_nm| <= 1`.
pub fn hermite_gauss_overlap(n: u32, m: u32, scene: &SceneParams) -> f64 {
    overlap_raw(n, m, scene.x, scene.theta)
}

/// Independent evaluation of the overlap as the defining 2D integral
/// `integral of u_nm(r) * u_00(r - r0) d^2r`, by adaptive quadrature over the
/// square `|u|,|v| <= x + 8` beam widths (the Gaussian tail beyond is below
/// 1e-27 of the peak). Intended as a test oracle for small mode orders.
///
/// Agrees with [`hermite_gauss_overlap`] to 1e-8 absolute for `n,m <= 6`.
pub fn overlap_oracle(n: u32, m: u32, scene: &SceneParams) -> Result<f64> {
    if n > 6 || m > 6 {
        return Err(Error::InvalidParameter(format!(
            "overlap oracle supports mode orders up to 6, got ({n},{m})"
        )));
    }
    let x = scene.x;
    let (ax, ay) = (x * scene.theta.cos(), x * scene.theta.sin());
    let half = x + 8.0;
    // u_nm(u,v) * u_00(u-ax, v-ay): both in beam-width units, normalization
    // (2/pi)^(1/2) per mode pair combined below.
    let norm = 2.0 / std::f64::consts::PI
        / (2f64.powi((n + m) as i32) * gamma_int(n) * gamma_int(m)).sqrt();
    let integrand = move |u: f64, v: f64| {
        let hu = hermite_phys(n, std::f64::consts::SQRT_2 * u);
        let hv = hermite_phys(m, std::f64::consts::SQRT_2 * v);
        let du = u - ax;
        let dv = v - ay;
        norm * hu * hv * (-(u * u + v * v) - (du * du + dv * dv)).exp()
    };
    let res = quad::integrate_2d(integrand, -half, half, -half, half, 1e-10)?;
    Ok(res.value)
}

/// `n!` as a float (exact for the small orders the oracle supports).
fn gamma_int(n: u32) -> f64 {
    ln_gamma(f64::from(n) + 1.0).exp()
}

/// Physicists' Hermite polynomial `H_n(z)` by the three-term recurrence.
fn hermite_phys(n: u32, z: f64) -> f64 {
    match n {
        0 => 1.0,
        1 => 2.0 * z,
        _ => {
            let mut hm = 1.0;
            let mut h = 2.0 * z;
            for k in 1..n {
                let next = 2.0 * z * h - 2.0 * f64::from(k) * hm;
                hm = h;
                h = next;
            }
            h
        }
    }
}

/// Ideal (crosstalk-free) detection probabilities over the whole crosstalk
/// space: `p(nm) = beta_nm^2`, with the analytic separation derivative
/// `dp/dx = (2/x) (n+m-x^2) p`.
///
/// The truncated sum over any finite grid is `<= 1`; it approaches 1 as the
/// cutoff grows. Separations below [`X_FLOOR`](crate::X_FLOOR) are rejected:
/// the derivative has a removable `1/x` singularity there and the closed-form
/// operations supply the exact limits instead.
pub fn ideal_probabilities(grid: &ModeGrid, scene: &SceneParams) -> Result<ProbabilityModel> {
    if scene.x < X_FLOOR {
        return Err(Error::InvalidParameter(format!(
            "separation x = {:e} below floor {X_FLOOR:e}; use the closed-form limits instead",
            scene.x
        )));
    }
    let x = scene.x;
    let dim = grid.dim();
    let mut probs = vec![0.0; dim];
    let mut dprobs = vec![0.0; dim];
    for (flat, (n, m)) in grid.all_modes().into_iter().enumerate() {
        let b = overlap_raw(n, m, x, scene.theta);
        let p = b * b;
        probs[flat] = p;
        dprobs[flat] = 2.0 / x * (f64::from(n + m) - x * x) * p;
    }
    Ok(ProbabilityModel::from_parts(
        *grid,
        *scene,
        probs,
        dprobs,
        crate::crosstalk::Provenance::Identity,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use std::f64::consts::{FRAC_PI_4, FRAC_PI_6, PI};

    #[test]
    fn grid_round_trips_and_counts() {
        let grid = ModeGrid::new(2, 1).unwrap();
        assert_eq!(grid.dim(), 9);
        assert_eq!(grid.n_measured(), 4);
        for flat in 0..grid.dim() {
            let (n, m) = grid.index_pair(flat);
            assert_eq!(grid.flat_index(n, m), flat);
        }
        assert_eq!(grid.measured_flat_indices(), vec![0, 1, 3, 4]);
        assert!(ModeGrid::new(1, 2).is_err());
        assert_eq!(ModeGrid::from_dim(16, 2).unwrap().q_crosstalk(), 3);
        assert!(ModeGrid::from_dim(10, 0).is_err());
    }

    #[test]
    fn scene_validation_and_angle_normalization() {
        assert!(SceneParams::new(-0.1, 0.0, 1.0).is_err());
        assert!(SceneParams::new(0.1, 0.0, 0.0).is_err());
        assert!(SceneParams::new(0.1, f64::NAN, 1.0).is_err());
        let s = SceneParams::new(0.1, -FRAC_PI_4, 1.0).unwrap();
        assert_relative_eq!(s.theta, 2.0 * PI - FRAC_PI_4, max_relative = 1e-15);
    }

    #[test]
    fn overlap_reference_values() {
        // Zero separation: perfect overlap with the fundamental, nothing else.
        let s0 = SceneParams::new(0.0, 0.7, 1.0).unwrap();
        assert_eq!(hermite_gauss_overlap(0, 0, &s0), 1.0);
        assert_eq!(hermite_gauss_overlap(2, 1, &s0), 0.0);

        let s1 = SceneParams::new(1.0, 0.0, 1.0).unwrap();
        assert_relative_eq!(
            hermite_gauss_overlap(1, 0, &s1),
            (-0.5f64).exp(),
            max_relative = 1e-14
        );
        assert_abs_diff_eq!(hermite_gauss_overlap(1, 0, &s1), 0.606_530_659_712_633_4, epsilon = 1e-14);

        let s2 = SceneParams::new(0.5, FRAC_PI_4, 1.0).unwrap();
        assert_relative_eq!(
            hermite_gauss_overlap(1, 1, &s2),
            0.125 * (-0.125f64).exp(),
            max_relative = 1e-14
        );
        assert_abs_diff_eq!(hermite_gauss_overlap(1, 1, &s2), 0.110_312_112_823_074_43, epsilon = 1e-14);

        let s3 = SceneParams::new(0.3, FRAC_PI_6, 1.0).unwrap();
        assert_abs_diff_eq!(
            hermite_gauss_overlap(2, 1, &s3),
            0.006_844_422_059_789_661_2,
            epsilon = 1e-15
        );
    }

    #[test]
    fn overlap_magnitude_bounded_by_one() {
        for &x in &[0.0, 0.3, 1.0, 2.0, 5.0] {
            for &theta in &[0.0, 0.4, FRAC_PI_4, 2.0] {
                let s = SceneParams::new(x, theta, 1.0).unwrap();
                for n in 0..6 {
                    for m in 0..6 {
                        assert!(hermite_gauss_overlap(n, m, &s).abs() <= 1.0 + 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn exchange_symmetry() {
        // beta_nm(x, theta) = beta_mn(x, pi/2 - theta)
        for &(n, m) in &[(0u32, 1u32), (2, 1), (3, 0), (2, 2)] {
            for &x in &[0.2, 0.9, 1.7] {
                for &theta in &[0.1, 0.8, 1.3] {
                    let a = overlap_raw(n, m, x, theta);
                    let b = overlap_raw(m, n, x, std::f64::consts::FRAC_PI_2 - theta);
                    assert_relative_eq!(a, b, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn parity_via_angle_shift() {
        // beta_nm(-r0) = (-1)^(n+m) beta_nm(r0), with -r0 reached as theta+pi.
        for n in 0..4u32 {
            for m in 0..4u32 {
                for &theta in &[0.0, 0.35, 1.9] {
                    let plus = overlap_raw(n, m, 0.6, theta);
                    let minus = overlap_raw(n, m, 0.6, theta + PI);
                    let sign = if (n + m) % 2 == 0 { 1.0 } else { -1.0 };
                    assert_relative_eq!(minus, sign * plus, max_relative = 1e-12);
                }
            }
        }
    }

    #[test]
    fn large_order_stays_finite() {
        // n+m up to 60 must not overflow thanks to log-space evaluation.
        let s = SceneParams::new(2.0, 0.9, 1.0).unwrap();
        let b = hermite_gauss_overlap(30, 30, &s);
        assert!(b.is_finite());
        assert!(b.abs() <= 1.0);
    }

    #[test]
    fn oracle_matches_closed_form() {
        let cases = [
            (0u32, 0u32, 0.0, 0.0),
            (1, 0, 1.0, 0.0),
            (2, 1, 0.3, FRAC_PI_6),
            (1, 1, 0.5, FRAC_PI_4),
            (3, 2, 0.8, 1.1),
        ];
        for &(n, m, x, theta) in &cases {
            let s = SceneParams::new(x, theta, 1.0).unwrap();
            let numeric = overlap_oracle(n, m, &s).unwrap();
            let closed = hermite_gauss_overlap(n, m, &s);
            assert_abs_diff_eq!(numeric, closed, epsilon = 1e-8);
        }
        assert!(overlap_oracle(7, 0, &SceneParams::new(0.1, 0.0, 1.0).unwrap()).is_err());
    }

    #[test]
    fn ideal_probabilities_reference_point() {
        // x = 0.2 on-axis: p(00) = exp(-0.04), p(10) = 0.04 exp(-0.04).
        let grid = ModeGrid::new(1, 1).unwrap();
        let scene = SceneParams::new(0.2, 0.0, 1.0).unwrap();
        let model = ideal_probabilities(&grid, &scene).unwrap();
        let p = model.full_probs();
        assert_abs_diff_eq!(p[grid.flat_index(0, 0)], 0.960_789_439_152_323_07, epsilon = 1e-15);
        assert_abs_diff_eq!(p[grid.flat_index(1, 0)], 0.038_431_577_566_092_924, epsilon = 1e-15);
        assert_eq!(p[grid.flat_index(0, 1)], 0.0);
        assert_eq!(p[grid.flat_index(1, 1)], 0.0);
    }

    #[test]
    fn ideal_probabilities_reject_below_floor() {
        let grid = ModeGrid::new(1, 1).unwrap();
        let scene = SceneParams::new(1e-9, 0.0, 1.0).unwrap();
        assert!(ideal_probabilities(&grid, &scene).is_err());
    }

    #[test]
    fn diagonal_symmetry_at_quarter_turn() {
        // theta = pi/4 exchanges the two axes: p(10) = p(01).
        let grid = ModeGrid::new(2, 2).unwrap();
        let scene = SceneParams::new(0.3, FRAC_PI_4, 1.0).unwrap();
        let model = ideal_probabilities(&grid, &scene).unwrap();
        let p = model.full_probs();
        assert_relative_eq!(
            p[grid.flat_index(1, 0)],
            p[grid.flat_index(0, 1)],
            max_relative = 1e-12
        );
    }

    #[test]
    fn truncated_sum_grows_monotonically_to_one() {
        let scene = SceneParams::new(0.5, 0.9, 1.0).unwrap();
        let mut prev = 0.0;
        for q in 0..8u32 {
            let grid = ModeGrid::new(q, q).unwrap();
            let model = ideal_probabilities(&grid, &scene).unwrap();
            let total: f64 = model.full_probs().iter().sum();
            assert!(total >= prev - 1e-15);
            assert!(total <= 1.0 + 1e-12);
            prev = total;
        }
        // Basis completeness: the tail vanishes fast at moderate separation.
        assert!((1.0 - prev) < 1e-9);
    }

    #[test]
    fn derivative_matches_finite_differences() {
        let grid = ModeGrid::new(2, 2).unwrap();
        let h = 1e-5;
        for &x in &[0.01, 0.1, 0.5, 1.0, 2.0] {
            for &theta in &[0.0, 0.6, FRAC_PI_4] {
                let model =
                    ideal_probabilities(&grid, &SceneParams::new(x, theta, 1.0).unwrap()).unwrap();
                let plus =
                    ideal_probabilities(&grid, &SceneParams::new(x + h, theta, 1.0).unwrap())
                        .unwrap();
                let minus =
                    ideal_probabilities(&grid, &SceneParams::new(x - h, theta, 1.0).unwrap())
                        .unwrap();
                for flat in 0..grid.dim() {
                    let fd = (plus.full_probs()[flat] - minus.full_probs()[flat]) / (2.0 * h);
                    let an = model.full_dprobs()[flat];
                    let scale = fd.abs().max(an.abs());
                    if scale > 1e-12 {
                        assert!(
                            (fd - an).abs() / scale < 1e-6,
                            "dp mismatch at x={x}, theta={theta}, flat={flat}: {an} vs {fd}"
                        );
                    }
                }
            }
        }
    }
}
