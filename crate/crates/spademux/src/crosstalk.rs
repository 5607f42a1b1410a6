//! Crosstalk matrices: construction, sampling, characterization, persistence.
//!
//! A mode sorter maps the ideal Hermite-Gauss amplitudes into detector
//! channels through a coupling matrix `C`: row = detector mode, column = ideal
//! mode, flat-indexed by [`ModeGrid`](crate::modes::ModeGrid). Three families
//! are supported:
//!
//! - **Random unitaries** `C = exp(-i mu H)` with `H = sum_k lambda_k G_k`, the
//!   `G_k` being the generalized `D x D` Gell-Mann generators and `lambda`
//!   drawn uniformly on the unit sphere. The coupling strength `mu` dials the
//!   crosstalk level; [`calibrate_mu`] inverts the ensemble-mean off-diagonal
//!   power to a requested value.
//! - **The uniform model**: `t` on the diagonal, `r` everywhere off-diagonal,
//!   with `|t|^2 = 1 - (D-1)|r|^2`. This matrix is *not* exactly unitary (its
//!   Gram matrix has off-diagonal entries `2|t||r| + (D-2)|r|^2`); it is kept
//!   verbatim because the small-separation predictions are derived from it,
//!   and [`CrosstalkMatrix::nearest_unitary`] provides the polar-projected
//!   variant for sensitivity checks.
//! - **Loaded matrices** from text files (e.g. measured sorter
//!   characterizations), accepted even when non-unitary — real devices lose
//!   light — with the deviation recorded in the provenance.

use std::fmt;
use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stream::RngStream;

/// Unitarity requirement for sampled and identity matrices:
/// `max |(C^H C - I)_ij|` must stay below this.
pub const UNITARITY_TOL: f64 = 1e-12;

/// Threshold above which a loaded matrix is flagged as non-unitary.
pub const LOADED_UNITARY_WARN: f64 = 1e-10;

/// Where a crosstalk matrix came from, with enough detail to regenerate it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Provenance {
    /// The ideal sorter: no crosstalk at all.
    Identity,
    /// A sample of the random-unitary ensemble: `exp(-i mu H)` from the
    /// reproducible stream `(seed, sample_index)`.
    Random {
        mu: f64,
        seed: u64,
        sample_index: u64,
    },
    /// The analytic uniform model with off-diagonal magnitude `r_magnitude`
    /// and phase `r_phase` (0 for the default real convention).
    Uniform { r_magnitude: f64, r_phase: f64 },
    /// Read from a file; `unitarity_deviation` is `max |(C^H C - I)_ij|` and
    /// `unitary` records whether it passed [`LOADED_UNITARY_WARN`].
    Loaded {
        path: String,
        unitarity_deviation: f64,
        unitary: bool,
    },
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Identity => write!(f, "identity"),
            Provenance::Random {
                mu,
                seed,
                sample_index,
            } => write!(f, "random(mu={mu},seed={seed},sample={sample_index})"),
            Provenance::Uniform {
                r_magnitude,
                r_phase,
            } => {
                if *r_phase == 0.0 {
                    write!(f, "uniform(r2={})", r_magnitude * r_magnitude)
                } else {
                    write!(
                        f,
                        "uniform(r2={},phase={r_phase})",
                        r_magnitude * r_magnitude
                    )
                }
            }
            Provenance::Loaded { path, .. } => write!(f, "loaded({path})"),
        }
    }
}

/// Mean on- and off-diagonal coupling powers of a matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrosstalkStats {
    /// Mean of `|c_ii|^2` over the diagonal.
    pub avg_diag: f64,
    /// Mean of `|c_ij|^2` over the `D(D-1)` off-diagonal entries.
    pub avg_offdiag: f64,
}

/// A `D x D` complex coupling matrix with provenance metadata.
///
/// Rows are detector modes, columns are ideal Hermite-Gauss modes, both
/// flat-indexed row-major in `(n, m)`.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosstalkMatrix {
    pub dim: usize,
    pub entries: DMatrix<Complex64>,
    pub provenance: Provenance,
}

impl CrosstalkMatrix {
    /// The ideal (identity) coupling.
    pub fn identity(dim: usize) -> Self {
        CrosstalkMatrix {
            dim,
            entries: DMatrix::identity(dim, dim),
            provenance: Provenance::Identity,
        }
    }

    /// The uniform model; see [`uniform_crosstalk`].
    pub fn uniform(dim: usize, r_magnitude: f64, r_phase: Option<f64>) -> Result<Self> {
        uniform_crosstalk(dim, r_magnitude, r_phase)
    }

    /// A random-ensemble sample; see [`sample_random_crosstalk`].
    pub fn random(dim: usize, mu: f64, stream: RngStream) -> Result<Self> {
        sample_random_crosstalk(dim, mu, stream)
    }

    /// `max |(C^H C - I)_ij|` — zero for exactly unitary coupling.
    pub fn unitarity_deviation(&self) -> f64 {
        let gram = self.entries.adjoint() * &self.entries;
        let mut worst = 0.0f64;
        for i in 0..self.dim {
            for j in 0..self.dim {
                let target = if i == j {
                    Complex64::new(1.0, 0.0)
                } else {
                    Complex64::new(0.0, 0.0)
                };
                worst = worst.max((gram[(i, j)] - target).norm());
            }
        }
        worst
    }

    /// Modulus of the determinant (1 for unitary coupling).
    pub fn determinant_modulus(&self) -> f64 {
        self.entries.clone().determinant().norm()
    }

    /// Closest unitary in the Frobenius sense, via the polar decomposition
    /// `C = U P`: returns `U = W V^H` from the SVD `C = W S V^H`. Provenance
    /// is carried over unchanged; this is a sensitivity-check transform, not a
    /// new physical model.
    pub fn nearest_unitary(&self) -> Result<Self> {
        let svd = self.entries.clone().svd(true, true);
        let (u, v_t) = (
            svd.u.ok_or_else(|| {
                Error::InvalidParameter("SVD did not return left singular vectors".into())
            })?,
            svd.v_t.ok_or_else(|| {
                Error::InvalidParameter("SVD did not return right singular vectors".into())
            })?,
        );
        Ok(CrosstalkMatrix {
            dim: self.dim,
            entries: u * v_t,
            provenance: self.provenance.clone(),
        })
    }

    /// Mean diagonal / off-diagonal powers; see [`crosstalk_stats`].
    pub fn stats(&self) -> CrosstalkStats {
        crosstalk_stats(self)
    }
}

/// The `D^2 - 1` generalized Gell-Mann generators of `su(D)`: for each pair
/// `j < k` a symmetric (`E_jk + E_kj`) and an antisymmetric
/// (`-i E_jk + i E_kj`) generator, plus `D - 1` diagonal generators
/// `sqrt(2/(l(l+1))) (sum_{j<l} E_jj - l E_ll)`. All are traceless Hermitian
/// with `Tr(G_a G_b) = 2 delta_ab`.
pub fn gell_mann_basis(dim: usize) -> Result<Vec<DMatrix<Complex64>>> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "Gell-Mann basis needs dimension >= 2, got {dim}"
        )));
    }
    let mut basis = Vec::with_capacity(dim * dim - 1);
    for j in 0..dim {
        for k in (j + 1)..dim {
            let mut sym = DMatrix::zeros(dim, dim);
            sym[(j, k)] = Complex64::new(1.0, 0.0);
            sym[(k, j)] = Complex64::new(1.0, 0.0);
            basis.push(sym);
            let mut asym = DMatrix::zeros(dim, dim);
            asym[(j, k)] = Complex64::new(0.0, -1.0);
            asym[(k, j)] = Complex64::new(0.0, 1.0);
            basis.push(asym);
        }
    }
    for l in 1..dim {
        let scale = (2.0 / (l as f64 * (l as f64 + 1.0))).sqrt();
        let mut diag = DMatrix::zeros(dim, dim);
        for j in 0..l {
            diag[(j, j)] = Complex64::new(scale, 0.0);
        }
        diag[(l, l)] = Complex64::new(-scale * l as f64, 0.0);
        basis.push(diag);
    }
    Ok(basis)
}

/// Draw `lambda` uniformly on the unit sphere in `R^(D^2-1)` from the stream.
fn unit_sphere_direction(n: usize, stream: RngStream) -> Vec<f64> {
    let mut rng = stream.rng();
    loop {
        let lambda: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let norm = lambda.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 1e-100 {
            return lambda.into_iter().map(|v| v / norm).collect();
        }
        // Astronomically unlikely; redraw deterministically from the same stream.
    }
}

/// Sample with a pre-built generator basis (ensemble loops reuse the basis).
fn sample_with_basis(
    basis: &[DMatrix<Complex64>],
    dim: usize,
    mu: f64,
    stream: RngStream,
) -> CrosstalkMatrix {
    let provenance = Provenance::Random {
        mu,
        seed: stream.seed,
        sample_index: stream.index,
    };
    if mu == 0.0 {
        return CrosstalkMatrix {
            dim,
            entries: DMatrix::identity(dim, dim),
            provenance,
        };
    }
    let lambda = unit_sphere_direction(dim * dim - 1, stream);
    let mut h: DMatrix<Complex64> = DMatrix::zeros(dim, dim);
    for (l, g) in lambda.iter().zip(basis) {
        h += g * Complex64::new(*l, 0.0);
    }
    // exp(-i mu H) through the Hermitian eigendecomposition: exactly unitary
    // up to roundoff, no series truncation.
    let eig = h.symmetric_eigen();
    let phases = DVector::from_iterator(
        dim,
        eig.eigenvalues.iter().map(|w| Complex64::cis(-mu * w)),
    );
    let entries = &eig.eigenvectors * DMatrix::from_diagonal(&phases) * eig.eigenvectors.adjoint();
    CrosstalkMatrix {
        dim,
        entries,
        provenance,
    }
}

/// One sample of the random-unitary crosstalk ensemble: `exp(-i mu H)` with
/// `H = sum_k lambda_k G_k` and `lambda` isotropic on the unit sphere.
///
/// Identical `(seed, sample_index)` streams give bitwise-identical matrices,
/// independent of thread count or call order.
pub fn sample_random_crosstalk(dim: usize, mu: f64, stream: RngStream) -> Result<CrosstalkMatrix> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "coupling strength mu must be >= 0, got {mu}"
        )));
    }
    let basis = gell_mann_basis(dim)?;
    Ok(sample_with_basis(&basis, dim, mu, stream))
}

/// Per-sample mean off-diagonal powers of an ensemble of `samples` random
/// matrices at fixed `mu`, using streams `stream.with_index(0..samples)`.
/// The result is ordered by sample index, so it is reproducible and
/// scheduling-independent.
pub fn ensemble_offdiag(
    dim: usize,
    mu: f64,
    samples: u64,
    stream: RngStream,
) -> Result<Vec<f64>> {
    if !(mu >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "coupling strength mu must be >= 0, got {mu}"
        )));
    }
    if samples == 0 {
        return Err(Error::InvalidParameter("ensemble needs >= 1 sample".into()));
    }
    let basis = gell_mann_basis(dim)?;
    Ok((0..samples)
        .into_par_iter()
        .map(|i| {
            let c = sample_with_basis(&basis, dim, mu, stream.with_index(i));
            crosstalk_stats(&c).avg_offdiag
        })
        .collect())
}

/// Find the coupling strength `mu` whose ensemble-mean off-diagonal power
/// matches `target` within 2% relative, by bisection on `[0, pi]` over a
/// fixed `samples`-member ensemble (streams `0..samples` of the given master
/// seed). The map `mu -> mean off-diagonal` is monotone on the relevant range.
pub fn calibrate_mu(dim: usize, target: f64, samples: u64, stream: RngStream) -> Result<f64> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "calibration needs dimension >= 2, got {dim}"
        )));
    }
    let ceiling = 1.0 / (dim as f64 - 1.0);
    if !(target > 0.0 && target < ceiling) {
        return Err(Error::InvalidParameter(format!(
            "target off-diagonal power must lie in (0, {ceiling:.6}), got {target}"
        )));
    }
    let mean_at = |mu: f64| -> Result<f64> {
        let v = ensemble_offdiag(dim, mu, samples, stream)?;
        Ok(v.iter().sum::<f64>() / v.len() as f64)
    };
    let mu_max = std::f64::consts::PI;
    let achieved_max = mean_at(mu_max)?;
    if achieved_max < target {
        return Err(Error::CalibrationUnreachable {
            target,
            achieved: achieved_max,
            mu_max,
        });
    }
    let (mut lo, mut hi) = (0.0f64, mu_max);
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let val = mean_at(mid)?;
        if (val - target).abs() <= 0.005 * target {
            return Ok(mid);
        }
        if val < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-13 {
            break;
        }
    }
    let final_val = mean_at(mid)?;
    if (final_val - target).abs() <= 0.02 * target {
        Ok(mid)
    } else {
        Err(Error::CalibrationUnreachable {
            target,
            achieved: final_val,
            mu_max,
        })
    }
}

/// The uniform coupling matrix: `t` on the diagonal, `r` off it, with
/// `|t|^2 = 1 - (D-1)|r|^2` exact by construction. Default convention keeps
/// both real and non-negative; `r_phase` rotates `r` in the complex plane for
/// exploring interference terms (`t` stays real).
///
/// The matrix is intentionally *not* unitarized — see the module docs.
pub fn uniform_crosstalk(
    dim: usize,
    r_magnitude: f64,
    r_phase: Option<f64>,
) -> Result<CrosstalkMatrix> {
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "uniform model needs dimension >= 2, got {dim}"
        )));
    }
    if !(r_magnitude >= 0.0) {
        return Err(Error::InvalidParameter(format!(
            "off-diagonal magnitude must be >= 0, got {r_magnitude}"
        )));
    }
    let r2 = r_magnitude * r_magnitude;
    let t2 = 1.0 - (dim as f64 - 1.0) * r2;
    if t2 <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "off-diagonal magnitude too large: (D-1)|r|^2 = {} >= 1",
            (dim as f64 - 1.0) * r2
        )));
    }
    let phase = r_phase.unwrap_or(0.0);
    let r = Complex64::from_polar(r_magnitude, phase);
    let t = Complex64::new(t2.sqrt(), 0.0);
    let mut entries = DMatrix::from_element(dim, dim, r);
    for i in 0..dim {
        entries[(i, i)] = t;
    }
    Ok(CrosstalkMatrix {
        dim,
        entries,
        provenance: Provenance::Uniform {
            r_magnitude,
            r_phase: phase,
        },
    })
}

/// Mean `|c_ii|^2` and mean `|c_ij|^2 (i != j)`. For unitary `C` the closure
/// `avg_diag + (D-1) avg_offdiag = 1` holds to roundoff.
pub fn crosstalk_stats(c: &CrosstalkMatrix) -> CrosstalkStats {
    let d = c.dim;
    let mut diag = 0.0;
    let mut off = 0.0;
    for i in 0..d {
        for j in 0..d {
            let p = c.entries[(i, j)].norm_sqr();
            if i == j {
                diag += p;
            } else {
                off += p;
            }
        }
    }
    CrosstalkStats {
        avg_diag: diag / d as f64,
        avg_offdiag: off / (d as f64 * (d as f64 - 1.0)),
    }
}

/// Total probability of scattering out of a given mode in the uniform model:
/// `P_scat = (D-1)|r|^2`.
pub fn scattering_probability(dim: usize, r_magnitude: f64) -> f64 {
    (dim as f64 - 1.0) * r_magnitude * r_magnitude
}

/// Write a matrix as UTF-8 text: a `D <dim>` header line, then one line
/// `<row> <col> <re> <im>` per entry in row-major order, 17 significant
/// digits (lossless binary64 round-trip).
pub fn store_matrix(c: &CrosstalkMatrix, path: &Path) -> Result<()> {
    let mut out = String::with_capacity(32 * c.dim * c.dim);
    out.push_str(&format!("D {}\n", c.dim));
    for row in 0..c.dim {
        for col in 0..c.dim {
            let e = c.entries[(row, col)];
            out.push_str(&format!("{row} {col} {:.16e} {:.16e}\n", e.re, e.im));
        }
    }
    fs::write(path, out)?;
    Ok(())
}

/// Read a matrix written by [`store_matrix`], or the CSV variant with header
/// `row,col,re,im` (dimension inferred from the largest index). Unitarity is
/// measured and recorded in the provenance; non-unitary matrices are accepted
/// with the `unitary` flag cleared, since measured sorters include loss.
pub fn load_matrix(path: &Path) -> Result<CrosstalkMatrix> {
    let text = fs::read_to_string(path)?;
    let mut lines = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .peekable();
    let first = *lines.peek().ok_or_else(|| {
        Error::MatrixFormat(format!("{}: empty file", path.display()))
    })?;

    let records: Vec<(usize, usize, f64, f64)>;
    let declared_dim: Option<usize>;
    if let Some(rest) = first.strip_prefix("D ").or_else(|| first.strip_prefix("D\t")) {
        let dim: usize = rest.trim().parse().map_err(|_| {
            Error::MatrixFormat(format!("{}: bad dimension header {first:?}", path.display()))
        })?;
        declared_dim = Some(dim);
        lines.next();
        records = lines
            .map(|l| parse_entry_line(l, &[' ', '\t'], path))
            .collect::<Result<_>>()?;
    } else if first.split(',').map(str::trim).collect::<Vec<_>>() == ["row", "col", "re", "im"] {
        declared_dim = None;
        lines.next();
        records = lines
            .map(|l| parse_entry_line(l, &[','], path))
            .collect::<Result<_>>()?;
    } else {
        return Err(Error::MatrixFormat(format!(
            "{}: expected a 'D <dim>' header or a 'row,col,re,im' CSV header, found {first:?}",
            path.display()
        )));
    }

    let dim = match declared_dim {
        Some(d) => d,
        None => {
            let max_idx = records
                .iter()
                .map(|&(r, c, _, _)| r.max(c))
                .max()
                .ok_or_else(|| Error::MatrixFormat(format!("{}: no entries", path.display())))?;
            max_idx + 1
        }
    };
    if dim == 0 {
        return Err(Error::MatrixFormat(format!(
            "{}: zero-dimensional matrix",
            path.display()
        )));
    }
    if records.len() != dim * dim {
        return Err(Error::DimensionMismatch(format!(
            "{}: expected {} entries for D={dim}, found {}",
            path.display(),
            dim * dim,
            records.len()
        )));
    }
    let mut entries = DMatrix::zeros(dim, dim);
    let mut seen = vec![false; dim * dim];
    for (row, col, re, im) in records {
        if row >= dim || col >= dim {
            return Err(Error::DimensionMismatch(format!(
                "{}: index ({row},{col}) outside D={dim}",
                path.display()
            )));
        }
        if std::mem::replace(&mut seen[row * dim + col], true) {
            return Err(Error::MatrixFormat(format!(
                "{}: duplicate entry for ({row},{col})",
                path.display()
            )));
        }
        entries[(row, col)] = Complex64::new(re, im);
    }
    let mut loaded = CrosstalkMatrix {
        dim,
        entries,
        provenance: Provenance::Identity, // placeholder until deviation is known
    };
    let deviation = loaded.unitarity_deviation();
    loaded.provenance = Provenance::Loaded {
        path: path.display().to_string(),
        unitarity_deviation: deviation,
        unitary: deviation <= LOADED_UNITARY_WARN,
    };
    Ok(loaded)
}

fn parse_entry_line(line: &str, seps: &[char], path: &Path) -> Result<(usize, usize, f64, f64)> {
    let fields: Vec<&str> = line
        .split(|c| seps.contains(&c))
        .filter(|s| !s.is_empty())
        .map(str::trim)
        .collect();
    if fields.len() != 4 {
        return Err(Error::MatrixFormat(format!(
            "{}: expected 4 fields per line, got {:?}",
            path.display(),
            line
        )));
    }
    let parse_idx = |s: &str| -> Result<usize> {
        s.parse().map_err(|_| {
            Error::MatrixFormat(format!("{}: bad index {s:?} in {line:?}", path.display()))
        })
    };
    let parse_f = |s: &str| -> Result<f64> {
        s.parse().map_err(|_| {
            Error::MatrixFormat(format!("{}: bad number {s:?} in {line:?}", path.display()))
        })
    };
    Ok((
        parse_idx(fields[0])?,
        parse_idx(fields[1])?,
        parse_f(fields[2])?,
        parse_f(fields[3])?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn stream() -> RngStream {
        RngStream::new(20240915, 0)
    }

    #[test]
    fn pauli_matrices_at_dim_two() {
        let basis = gell_mann_basis(2).unwrap();
        assert_eq!(basis.len(), 3);
        // sigma_x
        assert_eq!(basis[0][(0, 1)], Complex64::new(1.0, 0.0));
        assert_eq!(basis[0][(1, 0)], Complex64::new(1.0, 0.0));
        // sigma_y
        assert_eq!(basis[1][(0, 1)], Complex64::new(0.0, -1.0));
        assert_eq!(basis[1][(1, 0)], Complex64::new(0.0, 1.0));
        // sigma_z
        assert_eq!(basis[2][(0, 0)], Complex64::new(1.0, 0.0));
        assert_eq!(basis[2][(1, 1)], Complex64::new(-1.0, 0.0));
        assert!(gell_mann_basis(1).is_err());
    }

    #[test]
    fn generator_count_traceless_hermitian() {
        for dim in [3usize, 9] {
            let basis = gell_mann_basis(dim).unwrap();
            assert_eq!(basis.len(), dim * dim - 1);
            for g in &basis {
                let trace: Complex64 = (0..dim).map(|i| g[(i, i)]).sum();
                assert_abs_diff_eq!(trace.norm(), 0.0, epsilon = 1e-14);
                assert_eq!(g, &g.adjoint());
            }
        }
    }

    #[test]
    fn generator_orthonormality() {
        for dim in [3usize, 4] {
            let basis = gell_mann_basis(dim).unwrap();
            for (a, ga) in basis.iter().enumerate() {
                for (b, gb) in basis.iter().enumerate() {
                    let prod = ga * gb;
                    let trace: Complex64 = (0..dim).map(|i| prod[(i, i)]).sum();
                    let expected = if a == b { 2.0 } else { 0.0 };
                    assert_abs_diff_eq!(trace.re, expected, epsilon = 1e-12);
                    assert_abs_diff_eq!(trace.im, 0.0, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn basis_reconstructs_traceless_hermitian() {
        // H = sum_a Tr(H G_a)/2 G_a for any traceless Hermitian H (D=3).
        let dim = 3;
        let basis = gell_mann_basis(dim).unwrap();
        let mut h: DMatrix<Complex64> = DMatrix::zeros(dim, dim);
        h[(0, 1)] = Complex64::new(0.3, -0.7);
        h[(1, 0)] = Complex64::new(0.3, 0.7);
        h[(0, 2)] = Complex64::new(-1.1, 0.2);
        h[(2, 0)] = Complex64::new(-1.1, -0.2);
        h[(0, 0)] = Complex64::new(0.9, 0.0);
        h[(1, 1)] = Complex64::new(-0.4, 0.0);
        h[(2, 2)] = Complex64::new(-0.5, 0.0);
        let mut rebuilt: DMatrix<Complex64> = DMatrix::zeros(dim, dim);
        for g in &basis {
            let prod = &h * g;
            let coeff: Complex64 = (0..dim).map(|i| prod[(i, i)]).sum();
            rebuilt += g * (coeff / 2.0);
        }
        for i in 0..dim {
            for j in 0..dim {
                assert_abs_diff_eq!((rebuilt[(i, j)] - h[(i, j)]).norm(), 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn zero_coupling_gives_identity() {
        let c = sample_random_crosstalk(9, 0.0, stream()).unwrap();
        assert_eq!(c.entries, DMatrix::identity(9, 9));
    }

    #[test]
    fn samples_are_unitary_with_unit_determinant() {
        for idx in 0..5 {
            let c = sample_random_crosstalk(9, 0.3, stream().with_index(idx)).unwrap();
            assert!(c.unitarity_deviation() < UNITARITY_TOL);
            assert_abs_diff_eq!(c.determinant_modulus(), 1.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn sampling_is_reproducible() {
        let a = sample_random_crosstalk(9, 0.26, stream().with_index(7)).unwrap();
        let b = sample_random_crosstalk(9, 0.26, stream().with_index(7)).unwrap();
        assert_eq!(a.entries, b.entries);
        let c = sample_random_crosstalk(9, 0.26, stream().with_index(8)).unwrap();
        assert_ne!(a.entries, c.entries);
    }

    #[test]
    fn ensemble_offdiag_clusters_and_grows_with_mu() {
        let mut prev_mean = 0.0;
        for &mu in &[0.05f64, 0.15, 0.35, 0.7, 1.0] {
            let v = ensemble_offdiag(9, mu, 60, stream()).unwrap();
            let mean = v.iter().sum::<f64>() / v.len() as f64;
            assert!(mean > prev_mean, "mean off-diagonal not increasing at mu={mu}");
            prev_mean = mean;
        }
    }

    #[test]
    fn weak_coupling_quadratic_law() {
        // Second-order perturbation: mean off-diagonal ~ 2 mu^2 / (D^2 - 1).
        let dim = 4;
        let mu = 0.05;
        let v = ensemble_offdiag(dim, mu, 200, stream()).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let law = 2.0 * mu * mu / (dim as f64 * dim as f64 - 1.0);
        assert_relative_eq!(mean, law, max_relative = 0.05);
    }

    #[test]
    fn calibration_hits_target() {
        let target = 0.01;
        let mu = calibrate_mu(4, target, 80, stream()).unwrap();
        let v = ensemble_offdiag(4, mu, 80, stream()).unwrap();
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert_relative_eq!(mean, target, max_relative = 0.02);
    }

    #[test]
    fn calibration_rejects_unreachable_targets() {
        // Saturation sits near 1/D; targets between that and 1/(D-1) fail.
        let err = calibrate_mu(9, 0.122, 40, stream()).unwrap_err();
        assert!(matches!(err, Error::CalibrationUnreachable { .. }), "{err:?}");
        assert!(calibrate_mu(9, 0.2, 40, stream()).is_err()); // above 1/(D-1)
        assert!(calibrate_mu(9, 0.0, 40, stream()).is_err());
    }

    #[test]
    fn uniform_model_reference_values() {
        let c = uniform_crosstalk(9, 0.0017f64.sqrt(), None).unwrap();
        let t2 = c.entries[(0, 0)].norm_sqr();
        assert_abs_diff_eq!(t2, 0.9864, epsilon = 1e-12);
        assert_abs_diff_eq!(scattering_probability(9, 0.0017f64.sqrt()), 0.0136, epsilon = 1e-12);
        assert_abs_diff_eq!(
            scattering_probability(16, 0.017f64.sqrt()),
            0.255,
            epsilon = 1e-12
        );
        // r = 0 degenerates to the identity coupling.
        let id = uniform_crosstalk(5, 0.0, None).unwrap();
        assert_eq!(id.entries, DMatrix::identity(5, 5));
        assert!(uniform_crosstalk(9, 0.5, None).is_err()); // (D-1) r^2 >= 1
    }

    #[test]
    fn uniform_gram_offdiagonal_documented_value() {
        // Row Gram off-diagonals are exactly 2 t r + (D-2) r^2 in the real
        // convention; the matrix is deliberately left non-unitary.
        let dim = 9;
        let r = 0.0017f64.sqrt();
        let c = uniform_crosstalk(dim, r, None).unwrap();
        let t = (1.0 - (dim as f64 - 1.0) * r * r).sqrt();
        let expected = 2.0 * t * r + (dim as f64 - 2.0) * r * r;
        let gram = c.entries.adjoint() * &c.entries;
        assert_relative_eq!(gram[(0, 1)].re, expected, max_relative = 1e-12);
        assert_abs_diff_eq!(c.unitarity_deviation(), expected, epsilon = 1e-12);
        // Diagonal closure is exact: |t|^2 + (D-1)|r|^2 = 1.
        assert_abs_diff_eq!(gram[(0, 0)].re, 1.0, epsilon = 1e-14);
    }

    #[test]
    fn nearest_unitary_projects_cleanly() {
        let c = uniform_crosstalk(9, 0.1, None).unwrap();
        let u = c.nearest_unitary().unwrap();
        assert!(u.unitarity_deviation() < UNITARITY_TOL);
        // Projection moves entries by O(r^2)-scale amounts, not wholesale.
        let delta = (&u.entries - &c.entries).map(|z| z.norm()).max();
        assert!(delta < 0.05, "projection moved entries by {delta}");
    }

    #[test]
    fn stats_reference_points() {
        let id = CrosstalkMatrix::identity(6);
        let s = crosstalk_stats(&id);
        assert_eq!(s.avg_diag, 1.0);
        assert_eq!(s.avg_offdiag, 0.0);

        let c = uniform_crosstalk(9, 0.0017f64.sqrt(), None).unwrap();
        assert_relative_eq!(crosstalk_stats(&c).avg_offdiag, 0.0017, max_relative = 1e-14);

        let r = sample_random_crosstalk(9, 0.4, stream()).unwrap();
        let rs = crosstalk_stats(&r);
        assert_abs_diff_eq!(rs.avg_diag + 8.0 * rs.avg_offdiag, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn store_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.txt");

        let id = CrosstalkMatrix::identity(4);
        store_matrix(&id, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back.entries, id.entries);
        match &back.provenance {
            Provenance::Loaded { unitary, .. } => assert!(unitary),
            other => panic!("unexpected provenance {other:?}"),
        }

        let c = sample_random_crosstalk(9, 0.31, stream().with_index(2)).unwrap();
        store_matrix(&c, &path).unwrap();
        let back = load_matrix(&path).unwrap();
        assert_eq!(back.entries, c.entries, "17-digit round-trip must be lossless");
    }

    #[test]
    fn csv_variant_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("matrix.csv");
        let mut text = String::from("row,col,re,im\n");
        for row in 0..2 {
            for col in 0..2 {
                let v = if row == col { 1.0 } else { 0.0 };
                text.push_str(&format!("{row},{col},{v:.16e},0.0\n"));
            }
        }
        fs::write(&path, text).unwrap();
        let c = load_matrix(&path).unwrap();
        assert_eq!(c.dim, 2);
        assert_eq!(c.entries, DMatrix::identity(2, 2));
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();

        // Header claims D=9 but only 80 entries follow.
        let path = dir.path().join("short.txt");
        let c = sample_random_crosstalk(9, 0.2, stream()).unwrap();
        let mut text = String::from("D 9\n");
        let mut n = 0;
        'outer: for row in 0..9 {
            for col in 0..9 {
                if n == 80 {
                    break 'outer;
                }
                let e = c.entries[(row, col)];
                text.push_str(&format!("{row} {col} {:.16e} {:.16e}\n", e.re, e.im));
                n += 1;
            }
        }
        fs::write(&path, &text).unwrap();
        assert!(matches!(
            load_matrix(&path).unwrap_err(),
            Error::DimensionMismatch(_)
        ));

        // Garbage line.
        let path2 = dir.path().join("garbage.txt");
        fs::write(&path2, "D 2\n0 0 1.0 0.0\n0 1 zero 0.0\n1 0 0.0 0.0\n1 1 1.0 0.0\n").unwrap();
        assert!(matches!(
            load_matrix(&path2).unwrap_err(),
            Error::MatrixFormat(_)
        ));

        // Unknown header.
        let path3 = dir.path().join("unknown.txt");
        fs::write(&path3, "hello\n").unwrap();
        assert!(matches!(
            load_matrix(&path3).unwrap_err(),
            Error::MatrixFormat(_)
        ));
    }

    #[test]
    fn loaded_nonunitary_is_accepted_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lossy.txt");
        // A lossy diagonal "matrix": 20% amplitude loss in one channel.
        fs::write(
            &path,
            "D 2\n0 0 0.8 0.0\n0 1 0.0 0.0\n1 0 0.0 0.0\n1 1 1.0 0.0\n",
        )
        .unwrap();
        let c = load_matrix(&path).unwrap();
        match &c.provenance {
            Provenance::Loaded {
                unitary,
                unitarity_deviation,
                ..
            } => {
                assert!(!unitary);
                assert_relative_eq!(*unitarity_deviation, 1.0 - 0.64, max_relative = 1e-12);
            }
            other => panic!("unexpected provenance {other:?}"),
        }
    }

    #[test]
    fn provenance_descriptor_strings() {
        assert_eq!(Provenance::Identity.to_string(), "identity");
        let c = uniform_crosstalk(9, 0.1, None).unwrap();
        assert_eq!(c.provenance.to_string(), "uniform(r2=0.010000000000000002)");
        let s = Provenance::Random {
            mu: 0.25,
            seed: 7,
            sample_index: 3,
        };
        assert_eq!(s.to_string(), "random(mu=0.25,seed=7,sample=3)");
    }
}
