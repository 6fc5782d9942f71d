//! Pooled-quantile calibration of sigma fields into bands, and the
//! coverage/bandwidth metric suite, including bandwidths conditioned on the
//! coverage indicator.

use crate::error::{Error, Result};
use crate::tensor_field::Field;

/// Scalar band multiplier fitted on the calibration split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationResult {
    pub k: f64,
    pub target_coverage: f64,
    /// Pooled coverage on the calibration split at the fitted k.
    pub achieved_on_cal: f64,
    /// Points with sigma = 0 but a nonzero residual: excluded from the
    /// quantile, never covered by any band; surfaced for diagnosis.
    pub zero_sigma_misses: usize,
}

/// Fits k as the ⌈target·n⌉-th smallest |r|/σ over all pooled points with
/// σ > 0: the smallest multiplier achieving at least the target pooled
/// coverage. Points with σ = 0 and r = 0 are covered for any k; σ = 0 with
/// r ≠ 0 can never be covered and is only counted.
pub fn fit_calibration_scale(
    residuals: &[Field],
    sigmas: &[Field],
    target: f64,
) -> Result<CalibrationResult> {
    if !(0.0 < target && target <= 1.0) {
        return Err(Error::Config(format!(
            "target coverage {} outside (0,1]",
            target
        )));
    }
    if residuals.len() != sigmas.len() || residuals.is_empty() {
        return Err(Error::Shape(
            "need matching, nonempty residual and sigma case lists".into(),
        ));
    }
    let mut ratios = Vec::new();
    let mut zero_sigma_misses = 0usize;
    let mut zero_sigma_hits = 0usize;
    for (r, s) in residuals.iter().zip(sigmas) {
        if r.values.len() != s.values.len() {
            return Err(Error::Shape("residual and sigma shapes differ".into()));
        }
        for (rv, sv) in r.values.iter().zip(&s.values) {
            if *sv < 0.0 || !sv.is_finite() || !rv.is_finite() {
                return Err(Error::NonFinite("invalid residual or sigma value".into()));
            }
            if *sv > 0.0 {
                ratios.push(rv.abs() / sv);
            } else if *rv == 0.0 {
                zero_sigma_hits += 1;
            } else {
                zero_sigma_misses += 1;
            }
        }
    }
    if ratios.is_empty() {
        return Err(Error::Numerical(
            "uncalibratable: all sigmas zero with nonzero residuals".into(),
        ));
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
    let n = ratios.len();
    let rank = ((target * n as f64).ceil() as usize).clamp(1, n);
    // residuals identically zero give quantile 0; any positive band covers
    let k = ratios[rank - 1].max(f64::MIN_POSITIVE);
    let covered = ratios.iter().filter(|&&r| r <= k).count() + zero_sigma_hits;
    let achieved_on_cal = covered as f64 / (n + zero_sigma_hits) as f64;
    Ok(CalibrationResult {
        k,
        target_coverage: target,
        achieved_on_cal,
        zero_sigma_misses,
    })
}

/// band = k·sigma, channel-wise.
pub fn band_from_sigma(sigma: &Field, k: f64) -> Result<Field> {
    if !(k > 0.0) {
        return Err(Error::Config(format!("band multiplier {} must be positive", k)));
    }
    let mut band = sigma.clone();
    band.values.iter_mut().for_each(|v| *v *= k);
    Ok(band)
}

/// Fraction of grid points covered: a point counts only if |r_c| ≤ band_c
/// in every channel; ties covered.
pub fn case_coverage(residual: &Field, band: &Field) -> Result<f64> {
    if residual.grid != band.grid || residual.channels != band.channels {
        return Err(Error::Shape("residual and band shapes differ".into()));
    }
    let c = residual.channels;
    let n = residual.grid.n_points();
    let mut covered = 0usize;
    for p in 0..n {
        let ok = (0..c).all(|ch| {
            residual.values[p * c + ch].abs() <= band.values[p * c + ch]
        });
        if ok {
            covered += 1;
        }
    }
    Ok(covered as f64 / n as f64)
}

/// Unweighted mean of case coverages and the point-count-weighted pooled
/// coverage. The two coincide on uniform grids.
pub fn aggregate_coverage(coverages: &[f64], point_counts: &[usize]) -> Result<(f64, f64)> {
    if coverages.is_empty() || coverages.len() != point_counts.len() {
        return Err(Error::Shape(
            "need matching, nonempty coverage and count lists".into(),
        ));
    }
    let avg = coverages.iter().sum::<f64>() / coverages.len() as f64;
    let total_points: usize = point_counts.iter().sum();
    if total_points == 0 {
        return Err(Error::Config("zero total points".into()));
    }
    let weighted: f64 = coverages
        .iter()
        .zip(point_counts)
        .map(|(c, &n)| c * n as f64)
        .sum();
    Ok((avg, weighted / total_points as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BandwidthStats {
    /// Pooled mean half-bandwidth over all points, divided by the
    /// normalization constant.
    pub bw_all: f64,
    /// Restricted to covered points; `None` when no point is covered.
    pub bw_covered: Option<f64>,
    /// Restricted to missed points; `None` when everything is covered.
    pub bw_missed: Option<f64>,
    pub n_covered: usize,
    pub n_missed: usize,
}

/// Normalized mean half-bandwidths, overall and conditioned on the
/// per-point coverage indicator.
pub fn bandwidth_report(
    residuals: &[Field],
    bands: &[Field],
    normalization: f64,
) -> Result<BandwidthStats> {
    if !(normalization > 0.0) {
        return Err(Error::Config(format!(
            "normalization {} must be positive",
            normalization
        )));
    }
    if residuals.len() != bands.len() || residuals.is_empty() {
        return Err(Error::Shape(
            "need matching, nonempty residual and band case lists".into(),
        ));
    }
    let mut sum_cov = 0.0;
    let mut sum_miss = 0.0;
    let mut n_cov = 0usize;
    let mut n_miss = 0usize;
    for (r, b) in residuals.iter().zip(bands) {
        if r.grid != b.grid || r.channels != b.channels {
            return Err(Error::Shape("residual and band shapes differ".into()));
        }
        let c = r.channels;
        for p in 0..r.grid.n_points() {
            let covered =
                (0..c).all(|ch| r.values[p * c + ch].abs() <= b.values[p * c + ch]);
            // pooled mean band over channels at this point
            let bw: f64 = (0..c).map(|ch| b.values[p * c + ch]).sum::<f64>() / c as f64;
            if covered {
                sum_cov += bw;
                n_cov += 1;
            } else {
                sum_miss += bw;
                n_miss += 1;
            }
        }
    }
    let total = (n_cov + n_miss) as f64;
    Ok(BandwidthStats {
        bw_all: (sum_cov + sum_miss) / total / normalization,
        bw_covered: (n_cov > 0).then(|| sum_cov / n_cov as f64 / normalization),
        bw_missed: (n_miss > 0).then(|| sum_miss / n_miss as f64 / normalization),
        n_covered: n_cov,
        n_missed: n_miss,
    })
}

/// Default bandwidth normalization: mean |u| over the calibration split.
pub fn mean_abs_normalization(fields: &[Field]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in fields {
        sum += f.values.iter().map(|v| v.abs()).sum::<f64>();
        n += f.values.len();
    }
    if n == 0 {
        return Err(Error::Config("no fields for normalization".into()));
    }
    let norm = sum / n as f64;
    if !(norm > 0.0) {
        return Err(Error::Numerical(
            "normalization constant is zero; reference fields vanish".into(),
        ));
    }
    Ok(norm)
}

/// Full per-configuration metric bundle.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub avg_cr: f64,
    pub total_cr: f64,
    pub bandwidth: BandwidthStats,
    pub per_case_cr: Vec<f64>,
    pub normalization: f64,
}

/// Evaluates coverage and bandwidth of calibrated bands on a test split.
pub fn evaluate_bands(
    residuals: &[Field],
    bands: &[Field],
    normalization: f64,
) -> Result<MetricsReport> {
    if residuals.len() != bands.len() || residuals.is_empty() {
        return Err(Error::Shape(
            "need matching, nonempty residual and band case lists".into(),
        ));
    }
    let mut per_case = Vec::with_capacity(residuals.len());
    let mut counts = Vec::with_capacity(residuals.len());
    for (r, b) in residuals.iter().zip(bands) {
        per_case.push(case_coverage(r, b)?);
        counts.push(r.grid.n_points());
    }
    let (avg_cr, total_cr) = aggregate_coverage(&per_case, &counts)?;
    let bandwidth = bandwidth_report(residuals, bands, normalization)?;
    Ok(MetricsReport {
        avg_cr,
        total_cr,
        bandwidth,
        per_case_cr: per_case,
        normalization,
    })
}

pub const METRICS_CSV_HEADER: &str =
    "method,site,p,T,k,target,avg_cr,total_cr,bw_all,bw_covered,bw_missed,norm";

fn opt_cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into())
}

/// One metrics CSV row; undefined conditional bandwidths render as `NA`.
#[allow(clippy::too_many_arguments)]
pub fn metrics_csv_row(
    method: &str,
    site: &str,
    p: f64,
    t_samples: usize,
    k: f64,
    target: f64,
    report: &MetricsReport,
) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{},{},{},{}",
        method,
        site,
        p,
        t_samples,
        k,
        target,
        report.avg_cr,
        report.total_cr,
        report.bandwidth.bw_all,
        opt_cell(report.bandwidth.bw_covered),
        opt_cell(report.bandwidth.bw_missed),
        report.normalization
    )
}
