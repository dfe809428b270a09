//! Pearson functional connectivity and pseudo-connectivity augmentation.
//!
//! A connectome is the V x V correlation matrix of a V x T timeseries.
//! Augmentation recomputes the correlation after dropping a random subset of
//! timepoints, which leaves the planted structure intact but perturbs the
//! sample estimate.

use crate::mat::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Default augmentation drop rate; accuracy is flat within the 10-20% band
/// and deteriorates past 40%.
pub const DEFAULT_DROP_RATE: f64 = 0.15;

#[derive(Debug, Error)]
pub enum ConnectomeError {
    #[error("timeseries needs at least 3 timepoints, got {0}")]
    TooFewTimepoints(usize),
    #[error("drop rate must lie in [0, 1), got {0}")]
    BadDropRate(f64),
    #[error("dropping {dropped} of {total} timepoints leaves {left}, need at least 3")]
    TooFewSurvivors { dropped: usize, total: usize, left: usize },
    #[error("drop plan does not fit the scan: {0}")]
    PlanMismatch(String),
}

pub type Result<T> = std::result::Result<T, ConnectomeError>;

/// V x V functional connectivity matrix for one subject.
#[derive(Debug, Clone)]
pub struct Connectome {
    /// Symmetric, unit-diagonal, entries in [-1, 1].
    pub matrix: Mat,
    pub source_subject: String,
    /// Column indices removed before the correlation; empty for the full FC.
    pub dropped_timepoints: Vec<usize>,
}

/// A deterministic timepoint-dropping plan for one augmentation view.
#[derive(Debug, Clone, PartialEq)]
pub struct DropPlan {
    pub drop_rate: f64,
    /// Strictly increasing indices of the retained columns.
    pub kept_columns: Vec<usize>,
    pub seed: u64,
}

/// Timeseries scaled to zero mean and unit population variance per row.
#[derive(Debug, Clone)]
pub struct NormalizedTimeseries {
    pub data: Mat,
    /// Rows with zero variance, returned as all zeros.
    pub zero_variance_rows: Vec<usize>,
}

/// Round to nearest with ties to even (drop counts from fractional rates).
pub fn round_half_even(v: f64) -> usize {
    let floor = v.floor();
    let frac = v - floor;
    let base = floor as usize;
    if frac > 0.5 {
        base + 1
    } else if frac < 0.5 {
        base
    } else if base % 2 == 0 {
        base
    } else {
        base + 1
    }
}

/// Scale each row to zero mean and unit population variance.
/// Zero-variance rows come back as all zeros and are flagged, not fatal:
/// aggressive timepoint drops can produce degenerate rows mid-training.
pub fn normalize_timeseries(data: &Mat) -> Result<NormalizedTimeseries> {
    let t = data.cols();
    if t < 3 {
        return Err(ConnectomeError::TooFewTimepoints(t));
    }
    let inv_t = 1.0 / t as f64;
    let mut out = Mat::zeros(data.rows(), t);
    let mut zero_variance_rows = Vec::new();
    for r in 0..data.rows() {
        let row = data.row(r);
        let mean = row.iter().sum::<f64>() * inv_t;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() * inv_t;
        if var == 0.0 {
            zero_variance_rows.push(r);
            continue;
        }
        let inv_std = 1.0 / var.sqrt();
        for c in 0..t {
            out.set(r, c, (row[c] - mean) * inv_std);
        }
    }
    Ok(NormalizedTimeseries { data: out, zero_variance_rows })
}

/// Pearson correlation of every row pair.
///
/// Zero-variance rows get 0 off-diagonal and 1 on the diagonal (with a
/// warning) so degenerate augmentations stay usable.
pub fn pearson_fc(data: &Mat, subject: &str) -> Result<Connectome> {
    let normalized = normalize_timeseries(data)?;
    if !normalized.zero_variance_rows.is_empty() {
        log::warn!(
            "subject {subject}: zero-variance rows {:?}; correlations involving them set to 0",
            normalized.zero_variance_rows
        );
    }
    let v = data.rows();
    let t = data.cols();
    let inv_t = 1.0 / t as f64;
    let z = &normalized.data;
    let mut matrix = Mat::zeros(v, v);
    for i in 0..v {
        matrix.set(i, i, 1.0);
        for j in (i + 1)..v {
            // zero-variance rows are all-zero in z, so their products vanish
            let mut acc = 0.0;
            for c in 0..t {
                acc += z.get(i, c) * z.get(j, c);
            }
            let corr = (acc * inv_t).clamp(-1.0, 1.0);
            matrix.set(i, j, corr);
            matrix.set(j, i, corr);
        }
    }
    Ok(Connectome { matrix, source_subject: subject.to_string(), dropped_timepoints: Vec::new() })
}

/// Choose `round(drop_rate * T)` columns to drop, uniformly without
/// replacement. Deterministic for a fixed `(T, drop_rate, seed)`.
pub fn make_drop_plan(t: usize, drop_rate: f64, seed: u64) -> Result<DropPlan> {
    if !(0.0..1.0).contains(&drop_rate) {
        return Err(ConnectomeError::BadDropRate(drop_rate));
    }
    let m = round_half_even(drop_rate * t as f64);
    if t - m < 3 {
        return Err(ConnectomeError::TooFewSurvivors { dropped: m, total: t, left: t - m });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..t).collect();
    // partial Fisher-Yates: the first m entries become the dropped set
    for k in 0..m {
        let j = rng.random_range(k..t);
        indices.swap(k, j);
    }
    let mut dropped = vec![false; t];
    for &i in &indices[..m] {
        dropped[i] = true;
    }
    let kept_columns: Vec<usize> = (0..t).filter(|&i| !dropped[i]).collect();
    Ok(DropPlan { drop_rate, kept_columns, seed })
}

/// Apply a drop plan and recompute the Pearson correlation: the
/// pseudo-functional-connectivity view of a scan.
pub fn pfc_augment(data: &Mat, subject: &str, plan: &DropPlan) -> Result<Connectome> {
    let t = data.cols();
    if let Some(&max) = plan.kept_columns.iter().max() {
        if max >= t {
            return Err(ConnectomeError::PlanMismatch(format!(
                "kept column {max} out of range for {t} timepoints"
            )));
        }
    }
    if plan.kept_columns.len() < 3 {
        return Err(ConnectomeError::TooFewSurvivors {
            dropped: t.saturating_sub(plan.kept_columns.len()),
            total: t,
            left: plan.kept_columns.len(),
        });
    }
    let restricted = data.select_columns(&plan.kept_columns);
    let mut fc = pearson_fc(&restricted, subject)?;
    let kept: std::collections::HashSet<usize> = plan.kept_columns.iter().copied().collect();
    fc.dropped_timepoints = (0..t).filter(|i| !kept.contains(i)).collect();
    Ok(fc)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, v: Vec<f64>) -> Mat {
        Mat::from_vec(rows, cols, v)
    }

    /// Independent two-pass mean/variance oracle.
    fn normalize_oracle(row: &[f64]) -> Vec<f64> {
        let n = row.len() as f64;
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        row.iter().map(|v| (v - mean) / var.sqrt()).collect()
    }

    #[test]
    fn normalize_matches_two_pass_oracle() {
        let data = mat(1, 5, vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let norm = normalize_timeseries(&data).unwrap();
        let expect = normalize_oracle(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        let mean: f64 = norm.data.row(0).iter().sum::<f64>() / 5.0;
        let var: f64 = norm.data.row(0).iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        assert!(mean.abs() < 1e-9);
        assert!((var - 1.0).abs() < 1e-12);
        for (got, want) in norm.data.row(0).iter().zip(&expect) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_flags_constant_row() {
        let data = mat(2, 4, vec![1.0, 1.0, 1.0, 1.0, 1.0, 2.0, 3.0, 4.0]);
        let norm = normalize_timeseries(&data).unwrap();
        assert_eq!(norm.zero_variance_rows, vec![0]);
        assert!(norm.data.row(0).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalize_rejects_two_timepoints() {
        let data = mat(1, 2, vec![0.0, 2.0]);
        assert!(matches!(
            normalize_timeseries(&data),
            Err(ConnectomeError::TooFewTimepoints(2))
        ));
    }

    #[test]
    fn collinear_rows_correlate_to_one() {
        let data = mat(2, 4, vec![1.0, 2.0, 3.0, 4.0, 2.0, 4.0, 6.0, 8.0]);
        let fc = pearson_fc(&data, "s").unwrap();
        assert!((fc.matrix.get(0, 1) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn anti_collinear_rows_correlate_to_minus_one() {
        let data = mat(2, 4, vec![1.0, 2.0, 3.0, 4.0, 4.0, 3.0, 2.0, 1.0]);
        let fc = pearson_fc(&data, "s").unwrap();
        assert!((fc.matrix.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn zero_variance_row_yields_identity_block() {
        let data = mat(2, 4, vec![3.0, 3.0, 3.0, 3.0, 1.0, 2.0, 3.0, 4.0]);
        let fc = pearson_fc(&data, "s").unwrap();
        assert_eq!(fc.matrix.get(0, 0), 1.0);
        assert_eq!(fc.matrix.get(0, 1), 0.0);
        assert_eq!(fc.matrix.get(1, 0), 0.0);
        assert_eq!(fc.matrix.get(1, 1), 1.0);
    }

    #[test]
    fn affine_transform_leaves_fc_unchanged() {
        let base = mat(3, 6, vec![
            0.3, -1.2, 2.0, 0.7, 1.1, 0.0,
            -0.4, 0.9, -2.2, 1.5, 0.6, -0.8,
            1.9, 0.2, -0.5, -1.1, 0.4, 2.3,
        ]);
        let mut shifted = Mat::zeros(3, 6);
        let scales = [2.5, 0.3, 7.0];
        let offsets = [-4.0, 11.0, 0.5];
        for r in 0..3 {
            for c in 0..6 {
                shifted.set(r, c, scales[r] * base.get(r, c) + offsets[r]);
            }
        }
        let fc_a = pearson_fc(&base, "s").unwrap();
        let fc_b = pearson_fc(&shifted, "s").unwrap();
        for (a, b) in fc_a.matrix.iter().zip(fc_b.matrix.iter()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn drop_plan_zero_rate_keeps_everything() {
        let plan = make_drop_plan(7, 0.0, 42).unwrap();
        assert_eq!(plan.kept_columns, (0..7).collect::<Vec<_>>());
    }

    #[test]
    fn drop_plan_is_deterministic() {
        let a = make_drop_plan(10, 0.2, 7).unwrap();
        let b = make_drop_plan(10, 0.2, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn drop_plan_rejects_too_few_survivors() {
        assert!(matches!(
            make_drop_plan(4, 0.5, 1),
            Err(ConnectomeError::TooFewSurvivors { .. })
        ));
        assert!(matches!(make_drop_plan(10, 1.0, 1), Err(ConnectomeError::BadDropRate(_))));
    }

    #[test]
    fn round_half_even_ties() {
        assert_eq!(round_half_even(1.5), 2);
        assert_eq!(round_half_even(2.5), 2);
        assert_eq!(round_half_even(3.5), 4);
        assert_eq!(round_half_even(2.4), 2);
        assert_eq!(round_half_even(2.6), 3);
        assert_eq!(round_half_even(0.0), 0);
    }

    #[test]
    fn drop_frequency_is_uniform() {
        let t = 10;
        let draws = 10_000;
        let mut dropped_count = vec![0usize; t];
        for seed in 0..draws {
            let plan = make_drop_plan(t, 0.2, seed as u64).unwrap();
            let kept: std::collections::HashSet<usize> = plan.kept_columns.iter().copied().collect();
            for (c, count) in dropped_count.iter_mut().enumerate() {
                if !kept.contains(&c) {
                    *count += 1;
                }
            }
        }
        for &count in &dropped_count {
            let freq = count as f64 / draws as f64;
            assert!((freq - 0.2).abs() < 0.02, "drop frequency {freq} outside 0.2 +/- 0.02");
        }
    }

    #[test]
    fn different_seeds_give_different_plans() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..100u64 {
            let plan = make_drop_plan(50, 0.2, seed).unwrap();
            seen.insert(plan.kept_columns.clone());
        }
        assert!(seen.len() >= 99, "only {} distinct plans out of 100", seen.len());
    }

    #[test]
    fn pfc_with_empty_drop_is_bitwise_equal_to_fc() {
        let data = mat(3, 8, vec![
            0.3, -1.2, 2.0, 0.7, 1.1, 0.0, -0.4, 0.9,
            -2.2, 1.5, 0.6, -0.8, 1.9, 0.2, -0.5, -1.1,
            0.4, 2.3, -0.6, 0.1, -1.8, 0.9, 1.2, -0.3,
        ]);
        let plan = make_drop_plan(8, 0.0, 3).unwrap();
        let full = pearson_fc(&data, "s").unwrap();
        let pfc = pfc_augment(&data, "s", &plan).unwrap();
        assert_eq!(full.matrix, pfc.matrix);
        assert!(pfc.dropped_timepoints.is_empty());
    }

    #[test]
    fn pfc_equals_fc_of_kept_submatrix() {
        let data = mat(2, 4, vec![1.0, 5.0, 2.0, 4.0, 3.0, -1.0, 0.5, 2.0]);
        let plan = DropPlan { drop_rate: 0.25, kept_columns: vec![0, 2, 3], seed: 0 };
        let pfc = pfc_augment(&data, "s", &plan).unwrap();
        let sub = data.select_columns(&[0, 2, 3]);
        let direct = pearson_fc(&sub, "s").unwrap();
        assert_eq!(pfc.matrix, direct.matrix);
        assert_eq!(pfc.dropped_timepoints, vec![1]);
    }
}
