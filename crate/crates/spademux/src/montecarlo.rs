//! Monte Carlo verification of the separation estimate's precision.
//!
//! Photodetection is modeled as independent Poisson counts per measured mode
//! with means `N p(k|x, theta)`. A maximum-likelihood estimator recovers the
//! separation from one shot of counts, and [`crb_experiment`] repeats the
//! simulate-estimate cycle to compare the empirical estimator spread against
//! the Cramér-Rao bound `Delta d >= 1/sqrt(N F)` — in the dimensionless units
//! used here, `Delta x >= 1/(2 sqrt(N w^2F))`.
//!
//! Everything is driven by counter-based RNG streams: trial `i` of a run with
//! master seed `s` always sees the same photons, regardless of thread count
//! or execution order.

use rand::Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::crosstalk::Provenance;
use crate::error::{Error, Result};
use crate::fisher::{fisher_exact, mean_std, ProbabilityModel};
use crate::modes::{ModeGrid, SceneParams};
use crate::resolution::minimal_resolvable_distance;
use crate::stream::RngStream;
use crate::X_FLOOR;

/// Coarse likelihood-scan resolution before golden-section refinement.
pub const MLE_SCAN_POINTS: usize = 400;
/// Absolute tolerance on the estimated `x` after refinement.
pub const MLE_X_TOL: f64 = 1e-7;
/// Default search interval for the estimator, in `x = d/(2w)`.
pub const DEFAULT_SEARCH: (f64, f64) = (X_FLOOR, 3.0);

/// One shot of photon counts over the measured modes, with the scene and
/// model identity that produced it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    /// Counts per measured mode, in measured flat order.
    pub counts: Vec<u64>,
    /// Scene of the simulation; `n_photons` is the exposure actually used.
    pub scene: SceneParams,
    pub grid: ModeGrid,
    pub provenance: Provenance,
}

/// A maximum-likelihood separation estimate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MleEstimate {
    /// Estimated separation, `x = d/(2w)`.
    pub x_hat: f64,
    /// Poisson log-likelihood at the maximum (additive constants dropped).
    pub log_likelihood: f64,
    /// Set when the coarse scan peaked at an end of the search interval —
    /// the likelihood may continue rising outside it.
    pub boundary: bool,
}

/// Summary of a repeated simulate-and-estimate experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationReport {
    pub trials: u64,
    /// True separation of the simulated scenes.
    pub x_true: f64,
    pub n_photons: f64,
    /// Exact `w^2 F` of the model at `x_true`.
    pub w2f_true: f64,
    pub mean_x_hat: f64,
    /// Sample standard deviation of the estimates.
    pub std_x_hat: f64,
    /// `mean_x_hat - x_true`.
    pub bias: f64,
    /// Cramér-Rao lower bound on the estimator spread, `1/(2 sqrt(N w^2F))`,
    /// in the same `d/(2w)` units as the estimates.
    pub crb_std: f64,
    /// `std_x_hat / crb_std`: 1 means the bound is saturated.
    pub ratio: f64,
    /// Monte Carlo standard error of `ratio` (Gaussian approximation).
    pub ratio_standard_error: f64,
    /// Root-solved minimal resolvable distance of this model and `N`.
    pub dmin_over_2w: Option<f64>,
    /// Fraction of zero-separation datasets whose estimate lands at or above
    /// the minimal resolvable distance (false-resolution rate; the SNR = 1
    /// criterion corresponds to roughly a one-sigma exceedance). NaN when no
    /// `d_min` exists on the scan domain.
    pub false_resolution_probability: f64,
    /// Boundary-flagged estimates among the main trials.
    pub boundary_hits: u64,
    pub warnings: Vec<String>,
}

/// Configuration for [`crb_experiment`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrbConfig {
    /// True scene: separation, angle, and photon number per shot.
    pub scene: SceneParams,
    pub trials: u64,
    /// Estimator search interval.
    pub search: (f64, f64),
    /// Master stream; trial `i` uses index `i`, zero-separation trial `i`
    /// uses index `trials + i`.
    pub stream: RngStream,
}

impl CrbConfig {
    pub fn new(scene: SceneParams, trials: u64, stream: RngStream) -> Self {
        CrbConfig {
            scene,
            trials,
            search: DEFAULT_SEARCH,
            stream,
        }
    }
}

/// The Cramér-Rao bound on the estimator standard deviation in `d/(2w)`
/// units: `1/(2 sqrt(N w2f))`.
pub fn crb_std_over_2w(n_photons: f64, w2f: f64) -> f64 {
    0.5 / (n_photons * w2f).sqrt()
}

/// Draw one shot of Poisson counts, mode `k` with mean `n_photons * p(k)`.
/// The exposure is passed separately from the model because the
/// probabilities depend only on the scene geometry, so one model serves a
/// whole `N` sweep.
pub fn simulate_counts(
    model: &ProbabilityModel,
    n_photons: f64,
    stream: RngStream,
) -> Result<CountRecord> {
    if !(n_photons > 0.0) || !n_photons.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "photon number must be finite and > 0, got {n_photons}"
        )));
    }
    let mut rng = stream.rng();
    let mut counts = Vec::with_capacity(model.grid().n_measured());
    for p in model.probs() {
        let mean = n_photons * p;
        let c = if mean > 0.0 {
            let dist = Poisson::new(mean).map_err(|e| {
                Error::InvalidParameter(format!("Poisson mean {mean} is not usable: {e}"))
            })?;
            rng.sample(dist) as u64
        } else {
            0
        };
        counts.push(c);
    }
    let mut scene = *model.scene();
    scene.n_photons = n_photons;
    Ok(CountRecord {
        counts,
        scene,
        grid: *model.grid(),
        provenance: model.provenance().clone(),
    })
}

/// Poisson log-likelihood of real-valued counts under the model family at
/// separation `x` (constants independent of `x` dropped):
/// `l(x) = sum_k (n_k ln(N p_k(x)) - N p_k(x))`.
fn log_likelihood(
    counts: &[f64],
    n_photons: f64,
    probs: &[f64],
) -> Result<f64> {
    if probs.len() != counts.len() {
        return Err(Error::DimensionMismatch(format!(
            "model yields {} measured modes but the record has {} counts",
            probs.len(),
            counts.len()
        )));
    }
    let mut ll = 0.0;
    for (&n_k, &p_k) in counts.iter().zip(probs) {
        let mean = n_photons * p_k;
        if mean > 0.0 {
            ll += n_k * mean.ln() - mean;
        } else if n_k > 0.0 {
            // Counts in a channel the model says is dark: impossible.
            return Ok(f64::NEG_INFINITY);
        }
    }
    Ok(ll)
}

/// Maximum-likelihood separation from real-valued counts (integer draws or
/// exact expectations). `family` maps a separation to its probability model
/// at the known angle and matrix; only `x` is estimated.
///
/// A log-spaced coarse scan of [`MLE_SCAN_POINTS`] points locates the
/// likelihood peak; golden-section refinement inside the bracketing cell
/// narrows it to [`MLE_X_TOL`]. A peak in the first or last scan cell is
/// flagged as a boundary maximum.
pub fn mle_estimate_raw<F>(
    counts: &[f64],
    n_photons: f64,
    family: F,
    search: (f64, f64),
) -> Result<MleEstimate>
where
    F: Fn(f64) -> Result<ProbabilityModel>,
{
    if counts.iter().all(|&c| c == 0.0) {
        return Err(Error::EstimatorUndefined);
    }
    if counts.iter().any(|&c| c < 0.0 || !c.is_finite()) {
        return Err(Error::InvalidParameter(
            "counts must be finite and nonnegative".into(),
        ));
    }
    let lo = search.0.max(X_FLOOR);
    let hi = search.1;
    if !(hi > lo) {
        return Err(Error::InvalidParameter(format!(
            "search interval [{:e}, {:e}] is empty",
            search.0, search.1
        )));
    }
    let ll = |x: f64| -> Result<f64> {
        log_likelihood(counts, n_photons, &family(x)?.probs())
    };

    let step = (hi / lo).ln() / (MLE_SCAN_POINTS - 1) as f64;
    let grid_x = |i: usize| (lo.ln() + step * i as f64).exp();
    let mut best_i = 0;
    let mut best_ll = f64::NEG_INFINITY;
    for i in 0..MLE_SCAN_POINTS {
        let v = ll(grid_x(i))?;
        if v > best_ll {
            best_ll = v;
            best_i = i;
        }
    }
    if best_ll == f64::NEG_INFINITY {
        return Err(Error::InsufficientData(
            "likelihood is -inf over the whole search interval: the counts place photons \
             in channels this model family keeps dark"
                .into(),
        ));
    }
    let boundary = best_i == 0 || best_i == MLE_SCAN_POINTS - 1;
    let mut a = grid_x(best_i.saturating_sub(1));
    let mut b = grid_x((best_i + 1).min(MLE_SCAN_POINTS - 1));
    // Golden-section maximization inside [a, b].
    const INVPHI: f64 = 0.618_033_988_749_894_8;
    let mut c = b - INVPHI * (b - a);
    let mut d = a + INVPHI * (b - a);
    let mut fc = ll(c)?;
    let mut fd = ll(d)?;
    while (b - a) > MLE_X_TOL {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - INVPHI * (b - a);
            fc = ll(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + INVPHI * (b - a);
            fd = ll(d)?;
        }
    }
    let x_hat = 0.5 * (a + b);
    Ok(MleEstimate {
        x_hat,
        log_likelihood: ll(x_hat)?,
        boundary,
    })
}

/// Maximum-likelihood separation from a simulated [`CountRecord`]; see
/// [`mle_estimate_raw`].
pub fn mle_estimate<F>(record: &CountRecord, family: F, search: (f64, f64)) -> Result<MleEstimate>
where
    F: Fn(f64) -> Result<ProbabilityModel>,
{
    let counts: Vec<f64> = record.counts.iter().map(|&c| c as f64).collect();
    mle_estimate_raw(&counts, record.scene.n_photons, family, search)
}

/// Run `trials` simulate-estimate cycles at the true scene, compare the
/// estimator spread against the Cramér-Rao bound, and measure how often a
/// zero-separation dataset is mistaken for a resolved pair (`x_hat >=
/// d_min`). Fully deterministic given the config's stream; trials run in
/// parallel with order-independent results.
pub fn crb_experiment<F>(family: F, config: &CrbConfig) -> Result<EstimationReport>
where
    F: Fn(f64) -> Result<ProbabilityModel> + Sync,
{
    crb_experiment_detailed(family, config).map(|(report, _)| report)
}

/// Like [`crb_experiment`], but also returns the per-trial estimates of the
/// main (true-separation) trials, in trial order.
pub fn crb_experiment_detailed<F>(
    family: F,
    config: &CrbConfig,
) -> Result<(EstimationReport, Vec<MleEstimate>)>
where
    F: Fn(f64) -> Result<ProbabilityModel> + Sync,
{
    if config.trials < 2 {
        return Err(Error::InvalidParameter(format!(
            "need at least 2 trials for a spread estimate, got {}",
            config.trials
        )));
    }
    let mut warnings = Vec::new();
    if config.trials < 100 {
        warnings.push(format!(
            "only {} trials: the std/CRB comparison has a Monte Carlo error of about {:.0}%",
            config.trials,
            100.0 / (2.0 * (config.trials as f64 - 1.0)).sqrt()
        ));
    }
    let scene = config.scene;
    let n = scene.n_photons;
    let model_true = family(scene.x)?;
    let w2f_true = fisher_exact(&model_true)?.w2f;
    let crb_std = crb_std_over_2w(n, w2f_true);

    let main: Vec<MleEstimate> = (0..config.trials)
        .into_par_iter()
        .map(|i| {
            let record = simulate_counts(&model_true, n, config.stream.with_index(i))?;
            mle_estimate(&record, &family, config.search).map_err(|e| Error::TrialFailure {
                trial: i,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let hats: Vec<f64> = main.iter().map(|e| e.x_hat).collect();
    let (mean_x_hat, std_x_hat) = mean_std(&hats);
    let boundary_hits = main.iter().filter(|e| e.boundary).count() as u64;
    let ratio = std_x_hat / crb_std;
    let ratio_standard_error = ratio / (2.0 * (config.trials as f64 - 1.0)).sqrt();

    // Resolution threshold for the false-resolution rate.
    let dmin = minimal_resolvable_distance(|x| Ok(fisher_exact(&family(x)?)?.w2f), n)?;
    let false_resolution_probability = match dmin.dmin_over_2w {
        Some(threshold) => {
            let model_zero = family(X_FLOOR)?;
            let exceed = (0..config.trials)
                .into_par_iter()
                .map(|i| {
                    let record = simulate_counts(
                        &model_zero,
                        n,
                        config.stream.with_index(config.trials + i),
                    )?;
                    let est =
                        mle_estimate(&record, &family, config.search).map_err(|e| {
                            Error::TrialFailure {
                                trial: config.trials + i,
                                source: Box::new(e),
                            }
                        })?;
                    Ok(u64::from(est.x_hat >= threshold))
                })
                .collect::<Result<Vec<u64>>>()?
                .iter()
                .sum::<u64>();
            exceed as f64 / config.trials as f64
        }
        None => {
            warnings.push(
                "no SNR = 1 root on the scan domain: false-resolution rate undefined".into(),
            );
            f64::NAN
        }
    };

    let report = EstimationReport {
        trials: config.trials,
        x_true: scene.x,
        n_photons: n,
        w2f_true,
        mean_x_hat,
        std_x_hat,
        bias: mean_x_hat - scene.x,
        crb_std,
        ratio,
        ratio_standard_error,
        dmin_over_2w: dmin.dmin_over_2w,
        false_resolution_probability,
        boundary_hits,
        warnings,
    };
    Ok((report, main))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::modes::ideal_probabilities;
    use approx::{assert_abs_diff_eq, assert_relative_eq};

    fn stream() -> RngStream {
        RngStream::new(77_2024, 0)
    }

    fn ideal_family(q: u32, theta: f64) -> impl Fn(f64) -> Result<ProbabilityModel> + Sync {
        move |x: f64| {
            let grid = ModeGrid::new(q, q)?;
            let scene = SceneParams::new(x, theta, 1.0)?;
            ideal_probabilities(&grid, &scene)
        }
    }

    #[test]
    fn counts_land_only_in_populated_modes() {
        let grid = ModeGrid::new(1, 1).unwrap();
        let scene = SceneParams::new(0.1, 0.0, 1.0).unwrap();
        let model = ProbabilityModel::from_parts(
            grid,
            scene,
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0; 4],
            Provenance::Identity,
        );
        let rec = simulate_counts(&model, 5.0, stream()).unwrap();
        assert_eq!(rec.counts.len(), 4);
        assert!(rec.counts[1..].iter().all(|&c| c == 0));
        assert_eq!(rec.scene.n_photons, 5.0);
    }

    #[test]
    fn poisson_mean_and_variance() {
        let grid = ModeGrid::new(1, 1).unwrap();
        let scene = SceneParams::new(0.5, 0.0, 1.0).unwrap();
        let model = ideal_probabilities(&grid, &scene).unwrap();
        let n = 200.0;
        let trials = 2000u64;
        let lam0 = n * model.probs()[0];
        let mut totals = Vec::with_capacity(trials as usize);
        let mut mode0 = Vec::with_capacity(trials as usize);
        for i in 0..trials {
            let rec = simulate_counts(&model, n, stream().with_index(i)).unwrap();
            totals.push(rec.counts.iter().sum::<u64>() as f64);
            mode0.push(rec.counts[0] as f64);
        }
        let expected_total = n * model.total_measured();
        let (mean_total, _) = mean_std(&totals);
        // 3 sigma of the mean of `trials` Poisson totals.
        let sigma = (expected_total / trials as f64).sqrt();
        assert!(
            (mean_total - expected_total).abs() < 3.0 * sigma,
            "total-count mean {mean_total} vs expectation {expected_total}"
        );
        let (mean0, std0) = mean_std(&mode0);
        assert_relative_eq!(mean0, lam0, max_relative = 0.05);
        assert_relative_eq!(std0 * std0, lam0, max_relative = 0.2);
    }

    #[test]
    fn simulation_is_reproducible() {
        let grid = ModeGrid::new(1, 1).unwrap();
        let scene = SceneParams::new(0.3, 0.4, 1.0).unwrap();
        let model = ideal_probabilities(&grid, &scene).unwrap();
        let a = simulate_counts(&model, 1e4, stream().with_index(9)).unwrap();
        let b = simulate_counts(&model, 1e4, stream().with_index(9)).unwrap();
        assert_eq!(a, b);
        let c = simulate_counts(&model, 1e4, stream().with_index(10)).unwrap();
        assert_ne!(a.counts, c.counts);
    }

    #[test]
    fn exact_expectations_are_a_likelihood_fixed_point() {
        // Feeding the estimator the noiseless expectation profile must
        // return the true separation to the refinement tolerance.
        let family = ideal_family(1, 0.0);
        let x_true = 0.1;
        let n = 1e4;
        let expectations: Vec<f64> = family(x_true)
            .unwrap()
            .probs()
            .iter()
            .map(|p| n * p)
            .collect();
        let est = mle_estimate_raw(&expectations, n, &family, DEFAULT_SEARCH).unwrap();
        assert_abs_diff_eq!(est.x_hat, x_true, epsilon = 1e-6);
        assert!(!est.boundary);
    }

    #[test]
    fn all_zero_counts_are_rejected() {
        let family = ideal_family(1, 0.0);
        let err = mle_estimate_raw(&[0.0, 0.0, 0.0, 0.0], 10.0, &family, DEFAULT_SEARCH)
            .unwrap_err();
        assert!(matches!(err, Error::EstimatorUndefined));

        let grid = ModeGrid::new(1, 1).unwrap();
        let rec = CountRecord {
            counts: vec![0; 4],
            scene: SceneParams::new(0.1, 0.0, 10.0).unwrap(),
            grid,
            provenance: Provenance::Identity,
        };
        assert!(matches!(
            mle_estimate(&rec, &family, DEFAULT_SEARCH).unwrap_err(),
            Error::EstimatorUndefined
        ));
    }

    #[test]
    fn peak_outside_interval_is_flagged() {
        let family = ideal_family(1, 0.0);
        let n = 1e4;
        let expectations: Vec<f64> = family(1.0)
            .unwrap()
            .probs()
            .iter()
            .map(|p| n * p)
            .collect();
        let est = mle_estimate_raw(&expectations, n, &family, (X_FLOOR, 0.3)).unwrap();
        assert!(est.boundary);
        assert!(est.x_hat > 0.29, "x_hat = {}", est.x_hat);
    }

    #[test]
    fn crb_experiment_saturates_for_ideal_sorter() {
        let family = ideal_family(1, 0.0);
        let scene = SceneParams::new(0.1, 0.0, 1e4).unwrap();
        let config = CrbConfig::new(scene, 120, stream());
        let report = crb_experiment(&family, &config).unwrap();
        assert_relative_eq!(report.w2f_true, 0.980_248_340_395_051_38, max_relative = 1e-12);
        assert_relative_eq!(report.crb_std, 0.005_050_122_9, max_relative = 1e-6);
        assert!(
            report.ratio > 0.7 && report.ratio < 1.3,
            "ratio = {} +- {}",
            report.ratio,
            report.ratio_standard_error
        );
        assert!(report.bias.abs() < 3.0 * report.std_x_hat / (report.trials as f64).sqrt());
        assert_relative_eq!(report.dmin_over_2w.unwrap(), 0.005, max_relative = 1e-4);
        assert!(report.false_resolution_probability >= 0.0);
        assert!(report.false_resolution_probability <= 1.0);
        // Fewer than 100 trials would have added a warning; 120 does not.
        assert!(report.warnings.is_empty());
    }

    #[test]
    fn crb_experiment_is_deterministic() {
        let family = ideal_family(1, 0.0);
        let scene = SceneParams::new(0.1, 0.0, 1e3).unwrap();
        let mut config = CrbConfig::new(scene, 60, stream().with_index(3));
        config.search = (X_FLOOR, 1.0);
        let a = crb_experiment(&family, &config).unwrap();
        let b = crb_experiment(&family, &config).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.trials, 60);
        assert!(!a.warnings.is_empty(), "60 trials should warn");
    }

    #[test]
    fn experiment_validation() {
        let family = ideal_family(1, 0.0);
        let scene = SceneParams::new(0.1, 0.0, 1e3).unwrap();
        let config = CrbConfig::new(scene, 1, stream());
        assert!(crb_experiment(&family, &config).is_err());
    }
}
