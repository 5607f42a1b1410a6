//! Fisher information engines for the two-source separation parameter.
//!
//! Everything is reported in the dimensionless form `w^2 F`, where `F` is the
//! per-photon Fisher information about the source separation `d` and `w` the
//! PSF width; with `x = d/(2w)` this is `w^2 F = (1/4) sum_k (dp_k/dx)^2 /
//! p_k`, bounded above by 1 (the quantum limit, reached by an ideal sorter as
//! `x -> 0`).
//!
//! Five engines cover the models of interest:
//!
//! - [`fisher_exact`]: the measured-mode sum on any [`ProbabilityModel`] —
//!   ideal or produced by [`demux_probabilities`] with an arbitrary coupling
//!   matrix.
//! - [`fisher_ideal_closed_form`]: the crosstalk-free result in closed form
//!   (finite incomplete-Gamma sum), valid for every `x` and cutoff `Q`.
//! - [`fisher_uniform_smalld`]: the `O(x^2)` law of the uniform coupling
//!   model, in three variants (full angular form, axis-aligned, and the
//!   weak-crosstalk leading law).
//! - [`fisher_generic_smalld`]: the small-separation law for an arbitrary
//!   matrix, driven by the six entries coupling the `00`, `01`, `10` modes.
//! - [`fisher_direct_imaging`]: adaptive quadrature of the ideal-camera
//!   (intensity) Fisher information, the baseline every sorter has to beat.

use std::f64::consts::PI;

use nalgebra::DVector;
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosstalk::{self, CrosstalkMatrix, Provenance};
use crate::error::{Error, Result};
use crate::modes::{ModeGrid, SceneParams};
use crate::quad;
use crate::stream::RngStream;
use crate::X_FLOOR;

/// Below this, a probability is treated as exactly zero in the Fisher sum.
pub const PROB_FLOOR: f64 = 1e-300;
/// A zero-probability channel whose derivative magnitude exceeds this is a
/// genuine singularity, not a truncation artifact.
pub const DERIV_FLOOR: f64 = 1e-150;

/// Which engine produced a number.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FisherMethod {
    ExactSum,
    ClosedForm,
    SmallDUniform,
    SmallDGeneric,
    DirectImaging,
}

impl std::fmt::Display for FisherMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FisherMethod::ExactSum => "exact-sum",
            FisherMethod::ClosedForm => "closed-form",
            FisherMethod::SmallDUniform => "smalld-uniform",
            FisherMethod::SmallDGeneric => "smalld-generic",
            FisherMethod::DirectImaging => "direct-imaging",
        };
        f.write_str(s)
    }
}

/// A dimensionless Fisher information value `w^2 F` with its origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FisherValue {
    pub w2f: f64,
    pub method: FisherMethod,
}

/// Per-mode detection probabilities and their separation derivatives for one
/// scene, over the full crosstalk space, with the measured subset marked by
/// the grid.
///
/// `probs[flat]` is `p(nm | x, theta)` and `dprobs[flat]` its `d/dx`
/// derivative, both indexed like [`ModeGrid`] flat indices.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityModel {
    grid: ModeGrid,
    scene: SceneParams,
    probs: Vec<f64>,
    dprobs: Vec<f64>,
    provenance: Provenance,
}

impl ProbabilityModel {
    pub(crate) fn from_parts(
        grid: ModeGrid,
        scene: SceneParams,
        probs: Vec<f64>,
        dprobs: Vec<f64>,
        provenance: Provenance,
    ) -> Self {
        assert_eq!(probs.len(), grid.dim(), "probability vector length");
        assert_eq!(dprobs.len(), grid.dim(), "derivative vector length");
        ProbabilityModel {
            grid,
            scene,
            probs,
            dprobs,
            provenance,
        }
    }

    pub fn grid(&self) -> &ModeGrid {
        &self.grid
    }

    pub fn scene(&self) -> &SceneParams {
        &self.scene
    }

    pub fn provenance(&self) -> &Provenance {
        &self.provenance
    }

    /// Probabilities over the full crosstalk space (including unmeasured
    /// modes, whose population acts as loss).
    pub fn full_probs(&self) -> &[f64] {
        &self.probs
    }

    /// `d/dx` derivatives over the full crosstalk space.
    pub fn full_dprobs(&self) -> &[f64] {
        &self.dprobs
    }

    /// Flat indices of the measured modes, in flat order.
    pub fn measured_indices(&self) -> Vec<usize> {
        self.grid.measured_flat_indices()
    }

    /// Probabilities of the measured modes only, in flat order.
    pub fn probs(&self) -> Vec<f64> {
        self.measured_indices()
            .into_iter()
            .map(|i| self.probs[i])
            .collect()
    }

    /// `d/dx` derivatives of the measured modes only, in flat order.
    pub fn dprobs(&self) -> Vec<f64> {
        self.measured_indices()
            .into_iter()
            .map(|i| self.dprobs[i])
            .collect()
    }

    /// Total detection probability of the measured subset (`<= 1`; the rest
    /// is lost to unmeasured modes or truncation).
    pub fn total_measured(&self) -> f64 {
        self.measured_indices()
            .into_iter()
            .map(|i| self.probs[i])
            .sum()
    }
}

/// Detection probabilities behind a crosstalk matrix: the detected amplitude
/// in mode `nm` from a point source at displacement `r0` is `gamma_nm(r0) =
/// sum_kl conj(c_nm,kl) beta_kl(r0)`, and the two incoherent sources at
/// `+-r0` give `p(nm) = (|gamma_nm(r0)|^2 + |gamma_nm(-r0)|^2) / 2`.
///
/// `-r0` is represented as the scene rotated by `theta + pi`; the overlap
/// parity `beta_kl(-r0) = (-1)^(k+l) beta_kl(r0)` then comes out of the
/// overlap itself and must *not* be applied again to the derivatives.
pub fn demux_probabilities(
    c: &CrosstalkMatrix,
    grid: &ModeGrid,
    scene: &SceneParams,
) -> Result<ProbabilityModel> {
    if c.dim != grid.dim() {
        return Err(Error::DimensionMismatch(format!(
            "matrix is {}x{} but the mode grid spans D = {}",
            c.dim,
            c.dim,
            grid.dim()
        )));
    }
    if scene.x < X_FLOOR {
        return Err(Error::InvalidParameter(format!(
            "separation x = {:e} below floor {X_FLOOR:e}; use the closed-form limits instead",
            scene.x
        )));
    }
    let dim = grid.dim();
    let mut beta_p = DVector::zeros(dim);
    let mut dbeta_p = DVector::zeros(dim);
    let mut beta_m = DVector::zeros(dim);
    let mut dbeta_m = DVector::zeros(dim);
    let theta_m = scene.theta + PI;
    for (flat, (k, l)) in grid.all_modes().into_iter().enumerate() {
        beta_p[flat] = Complex64::new(crate::modes::overlap_raw(k, l, scene.x, scene.theta), 0.0);
        dbeta_p[flat] =
            Complex64::new(crate::modes::overlap_dx_raw(k, l, scene.x, scene.theta), 0.0);
        beta_m[flat] = Complex64::new(crate::modes::overlap_raw(k, l, scene.x, theta_m), 0.0);
        dbeta_m[flat] = Complex64::new(crate::modes::overlap_dx_raw(k, l, scene.x, theta_m), 0.0);
    }
    let cconj = c.entries.conjugate();
    let gamma_p = &cconj * beta_p;
    let dgamma_p = &cconj * dbeta_p;
    let gamma_m = &cconj * beta_m;
    let dgamma_m = &cconj * dbeta_m;
    let mut probs = vec![0.0; dim];
    let mut dprobs = vec![0.0; dim];
    for flat in 0..dim {
        probs[flat] = 0.5 * (gamma_p[flat].norm_sqr() + gamma_m[flat].norm_sqr());
        dprobs[flat] = (gamma_p[flat].conj() * dgamma_p[flat]).re
            + (gamma_m[flat].conj() * dgamma_m[flat]).re;
    }
    Ok(ProbabilityModel::from_parts(
        *grid,
        *scene,
        probs,
        dprobs,
        c.provenance.clone(),
    ))
}

/// The measured-mode Fisher sum `w^2 F = (1/4) sum_k (dp_k/dx)^2 / p_k`.
///
/// Channels that are numerically dead (`p < 1e-300` with a comparably dead
/// derivative) contribute zero; a dead probability with a live derivative is
/// reported as a singular term, since it means the quadratic vanishing of `p`
/// near `x = 0` has been violated by the chosen parameters.
pub fn fisher_exact(model: &ProbabilityModel) -> Result<FisherValue> {
    let mut sum = 0.0;
    for idx in model.measured_indices() {
        let p = model.full_probs()[idx];
        let dp = model.full_dprobs()[idx];
        if p < PROB_FLOOR {
            if dp.abs() < DERIV_FLOOR {
                continue;
            }
            return Err(Error::SingularFisherTerm { index: idx, p, dp });
        }
        sum += dp * dp / p;
    }
    Ok(FisherValue {
        w2f: 0.25 * sum,
        method: FisherMethod::ExactSum,
    })
}

/// Crosstalk-free Fisher information for a square measured cutoff `Q >= 1`,
/// in closed form: with `z = x^2`,
///
/// `w^2 F = e^(-z) (z - (Q+1)) z^Q / Q!  +  e^(-z) sum_{k=0}^{Q} z^k / k!`
///
/// which is the incomplete-Gamma expression with `Gamma(Q+1, z)` expanded as
/// its finite sum (exact for integer `Q`, no special-function library
/// needed). Exact at `x = 0` (value 1) and agrees with [`fisher_exact`] on an
/// identity matrix to near machine precision for all `x`.
pub fn fisher_ideal_closed_form(q_measured: u32, x: f64) -> Result<FisherValue> {
    if q_measured < 1 {
        return Err(Error::InvalidParameter(format!(
            "closed form needs cutoff Q >= 1, got {q_measured}"
        )));
    }
    if !x.is_finite() || x < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "half-separation x must be finite and >= 0, got {x}"
        )));
    }
    let z = x * x;
    // After the loop `term` is z^Q/Q! and `partial` is sum_{k<=Q} z^k/k!.
    let mut term = 1.0f64;
    let mut partial = 1.0f64;
    for k in 1..=q_measured {
        term *= z / f64::from(k);
        partial += term;
    }
    let w2f = (-z).exp() * ((z - f64::from(q_measured + 1)) * term + partial);
    Ok(FisherValue {
        w2f,
        method: FisherMethod::ClosedForm,
    })
}

/// Variant selector for [`fisher_uniform_smalld`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SmallDForm {
    /// The complete `O(x^2)` angular expression, including the
    /// `4x^2(Q-1)^2 sin^2(2 theta) |r|^2` tail from modes with `n+m >= 3`.
    Full,
    /// The simple axis-aligned limit (`theta -> 0` or `pi/2`):
    /// `x^2 (|r|^4/|t|^2 + |t|^4/|r|^2 - |r|^2 - |t|^2)`.
    AxisAligned,
    /// The leading law for weak crosstalk at fixed scattering probability:
    /// `x^2 (3 + cos 4theta)/4 * (1 - P_scat)^2 / |r|^2`.
    WeakCrosstalk,
}

/// Small-separation Fisher information of the uniform coupling model
/// (diagonal `t`, off-diagonal `r`, `|t|^2 + (D-1)|r|^2 = 1`), accurate to
/// `O(x^4)`; the caller is responsible for keeping `x` small.
///
/// `q_measured` only enters the [`SmallDForm::Full`] tail term. `r = 0` is
/// rejected for every form (the expressions diverge; with no crosstalk the
/// ideal closed form applies instead).
pub fn fisher_uniform_smalld(
    dim: usize,
    r: Complex64,
    t: Complex64,
    theta: f64,
    x: f64,
    q_measured: u32,
    form: SmallDForm,
) -> Result<FisherValue> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "uniform model needs dimension >= 2, got {dim}"
        )));
    }
    let r2 = r.norm_sqr();
    let t2 = t.norm_sqr();
    if r2 == 0.0 {
        return Err(Error::InvalidParameter(
            "small-separation laws diverge at r = 0; use the ideal closed form".into(),
        ));
    }
    let closure = t2 + (dim as f64 - 1.0) * r2;
    if (closure - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidParameter(format!(
            "|t|^2 + (D-1)|r|^2 = {closure} violates normalization by more than 1e-9"
        )));
    }
    let x2 = x * x;
    let w2f = match form {
        SmallDForm::Full => {
            let g = (2.0 * theta).sin() * (r2 + (t.conj() * r).re);
            let (s2, c2) = (theta.sin() * theta.sin(), theta.cos() * theta.cos());
            let q1 = f64::from(q_measured) - 1.0;
            x2 * ((r2 - t2 + g).powi(2) / t2
                + (c2 * (t2 - r2) + g).powi(2) / r2
                + (s2 * (t2 - r2) + g).powi(2) / r2
                + g * g / r2)
                + 4.0 * x2 * q1 * q1 * (2.0 * theta).sin().powi(2) * r2
        }
        SmallDForm::AxisAligned => x2 * (r2 * r2 / t2 + t2 * t2 / r2 - r2 - t2),
        SmallDForm::WeakCrosstalk => {
            let p_scat = (dim as f64 - 1.0) * r2;
            x2 * (3.0 + (4.0 * theta).cos()) / 4.0 * (1.0 - p_scat) * (1.0 - p_scat) / r2
        }
    };
    Ok(FisherValue {
        w2f,
        method: FisherMethod::SmallDUniform,
    })
}

/// The six coupling-matrix entries that control the small-separation behavior
/// of an arbitrary sorter: transmissions of the first excited modes and the
/// scattering amplitudes between them and the fundamental.
///
/// Entry `c_ab` couples detected mode `a` to ideal mode `b` (row `a`,
/// column `b` of the matrix).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenericEntries {
    pub c00_01: Complex64,
    pub c00_10: Complex64,
    pub c01_01: Complex64,
    pub c01_00: Complex64,
    pub c10_10: Complex64,
    pub c10_00: Complex64,
}

impl GenericEntries {
    /// Pull the six entries out of a matrix over the given grid.
    pub fn from_matrix(c: &CrosstalkMatrix, grid: &ModeGrid) -> Result<Self> {
        if c.dim != grid.dim() {
            return Err(Error::DimensionMismatch(format!(
                "matrix is {}x{} but the mode grid spans D = {}",
                c.dim,
                c.dim,
                grid.dim()
            )));
        }
        if grid.q_crosstalk() < 1 {
            return Err(Error::InvalidParameter(
                "generic small-separation law needs the 01/10 modes in the crosstalk space".into(),
            ));
        }
        let f00 = grid.flat_index(0, 0);
        let f01 = grid.flat_index(0, 1);
        let f10 = grid.flat_index(1, 0);
        Ok(GenericEntries {
            c00_01: c.entries[(f00, f01)],
            c00_10: c.entries[(f00, f10)],
            c01_01: c.entries[(f01, f01)],
            c01_00: c.entries[(f01, f00)],
            c10_10: c.entries[(f10, f10)],
            c10_00: c.entries[(f10, f00)],
        })
    }
}

/// Small-separation Fisher information for generic weak crosstalk:
///
/// `w^2 F = x^2 (|c01,01|^4 sin^4 theta / |c01,00|^2
///              + |c10,10|^4 cos^4 theta / |c10,00|^2)`
///
/// dominated by correct transmission of the first excited modes and their
/// scattering into the fundamental. Reduces to the uniform weak-crosstalk law
/// when the entries coincide with the uniform model's `t` and `r`.
pub fn fisher_generic_smalld(entries: &GenericEntries, theta: f64, x: f64) -> Result<FisherValue> {
    let s01 = entries.c01_00.norm_sqr();
    let s10 = entries.c10_00.norm_sqr();
    if s01 == 0.0 || s10 == 0.0 {
        return Err(Error::InvalidParameter(
            "zero scattering amplitude between the 01/10 modes and the fundamental: \
             the generic small-separation prediction diverges"
                .into(),
        ));
    }
    let (s, c) = (theta.sin(), theta.cos());
    let t01 = entries.c01_01.norm_sqr();
    let t10 = entries.c10_10.norm_sqr();
    let w2f = x * x * (t01 * t01 * s.powi(4) / s01 + t10 * t10 * c.powi(4) / s10);
    Ok(FisherValue {
        w2f,
        method: FisherMethod::SmallDGeneric,
    })
}

/// Fisher information of ideal direct imaging (an infinite-resolution,
/// noise-free camera), by adaptive 2D quadrature of `(dp/dx)^2 / p` for the
/// two-Gaussian intensity `p(r) = (e^(-2|r-r0|^2) + e^(-2|r+r0|^2)) / pi`
/// (lengths in units of `w`). The domain is the square of half-side `x + 8`:
/// it contains the disk of radius `x + 8` around the midpoint, outside which
/// the integrand is below 1e-27 of its peak. Result is independent of
/// `theta` by symmetry; behaves as `8 x^2` for small `x` and saturates to 1
/// as the spots separate.
pub fn fisher_direct_imaging(x: f64, theta: f64) -> Result<FisherValue> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "half-separation x must be finite and >= 0, got {x}"
        )));
    }
    let (ux, uy) = (theta.cos(), theta.sin());
    let (r0x, r0y) = (x * ux, x * uy);
    let integrand = move |px: f64, py: f64| {
        let (mx, my) = (px - r0x, py - r0y);
        let (qx, qy) = (px + r0x, py + r0y);
        let fm = (-2.0 * (mx * mx + my * my)).exp();
        let fp = (-2.0 * (qx * qx + qy * qy)).exp();
        let p = (fm + fp) / PI;
        if p < 1e-290 {
            return 0.0;
        }
        let dpdx = 4.0 / PI * ((mx * ux + my * uy) * fm - (qx * ux + qy * uy) * fp);
        dpdx * dpdx / p
    };
    let half = x + 8.0;
    let res = quad::integrate_2d(integrand, -half, half, -half, half, 1e-8)?;
    Ok(FisherValue {
        w2f: 0.25 * res.value,
        method: FisherMethod::DirectImaging,
    })
}

/// Exact `w^2 F` for each member of a random-crosstalk ensemble at one scene:
/// sample `i` uses stream `stream.with_index(i)`, so the result vector is
/// ordered, reproducible, and independent of the parallel schedule.
pub fn ensemble_w2f(
    grid: &ModeGrid,
    scene: &SceneParams,
    mu: f64,
    samples: u64,
    stream: RngStream,
) -> Result<Vec<f64>> {
    if samples == 0 {
        return Err(Error::InvalidParameter("ensemble needs >= 1 sample".into()));
    }
    (0..samples)
        .into_par_iter()
        .map(|i| {
            let c = crosstalk::sample_random_crosstalk(grid.dim(), mu, stream.with_index(i))?;
            let model = demux_probabilities(&c, grid, scene)?;
            Ok(fisher_exact(&model)?.w2f)
        })
        .collect()
}

/// Mean and sample standard deviation (n-1 denominator; 0 for n < 2).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0);
    (mean, var.sqrt())
}
