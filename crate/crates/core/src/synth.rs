//! Synthetic BOLD cohorts with planted community structure.
//!
//! Subjects are sampled from a multivariate Gaussian whose covariance is
//! block-structured: ROIs in the same community correlate at
//! `within_block_corr`, and each diagnostic class additively perturbs the
//! correlations of selected block pairs. Observation noise is isotropic, so
//! the population FC of the observed series is known in closed form
//! ([`planted_fc`]) and every downstream stage can be checked against exact
//! targets.

use crate::ingest::{Split, TimeseriesScan};
use crate::mat::{derive_seed, Mat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("latent covariance for class {class} is not positive definite")]
    NotPositiveDefinite { class: usize },
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
}

pub type Result<T> = std::result::Result<T, SynthError>;

/// Additive perturbation applied to the latent correlations of one class:
/// every ROI pair spanning one of `block_pairs` gets `delta` added.
#[derive(Debug, Clone)]
pub struct ClassEffect {
    pub block_pairs: Vec<(usize, usize)>,
    pub delta: f64,
}

#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub n_subjects: usize,
    pub v_rois: usize,
    pub t_points: usize,
    pub n_classes: usize,
    /// Community id per ROI.
    pub block_partition: Vec<usize>,
    pub within_block_corr: f64,
    /// Effects for classes 1..n_classes; class 0 is the unperturbed control.
    pub class_effects: Vec<ClassEffect>,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Four equal communities, one shared perturbed block pair (0,1) plus a
    /// class-specific pair per diagnostic class.
    pub fn standard(
        n_subjects: usize,
        v_rois: usize,
        t_points: usize,
        n_classes: usize,
        class_effect: f64,
        noise_sigma: f64,
        seed: u64,
    ) -> Self {
        let n_blocks = if v_rois >= 8 { 4 } else { 2 };
        let block_partition = (0..v_rois).map(|i| i * n_blocks / v_rois).collect();
        let specific: [(usize, usize); 5] = [(2, 3), (0, 2), (1, 3), (0, 3), (1, 2)];
        let class_effects = (1..n_classes)
            .map(|k| ClassEffect {
                block_pairs: vec![(0, 1), specific[(k - 1) % specific.len()]],
                delta: class_effect,
            })
            .collect();
        SynthSpec {
            n_subjects,
            v_rois,
            t_points,
            n_classes,
            block_partition,
            within_block_corr: 0.6,
            class_effects,
            noise_sigma,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.v_rois < 2 || self.t_points < 3 || self.n_classes == 0 || self.n_subjects == 0 {
            return Err(SynthError::InvalidSpec(format!(
                "need subjects >= 1, V >= 2, T >= 3, classes >= 1; got {} / {} / {} / {}",
                self.n_subjects, self.v_rois, self.t_points, self.n_classes
            )));
        }
        if self.block_partition.len() != self.v_rois {
            return Err(SynthError::InvalidSpec("block partition must cover every ROI".into()));
        }
        if !(0.0..1.0).contains(&self.within_block_corr) {
            return Err(SynthError::InvalidSpec(format!(
                "within_block_corr must lie in [0, 1), got {}",
                self.within_block_corr
            )));
        }
        if self.class_effects.len() + 1 < self.n_classes {
            return Err(SynthError::InvalidSpec(format!(
                "{} classes need {} effects, got {}",
                self.n_classes,
                self.n_classes - 1,
                self.class_effects.len()
            )));
        }
        for class in 0..self.n_classes {
            let cov = self.latent_covariance(class)?;
            if cholesky(&cov).is_none() {
                return Err(SynthError::NotPositiveDefinite { class });
            }
        }
        Ok(())
    }

    /// Latent (pre-noise) covariance for one class. Diagonal is 1, so this is
    /// also the latent correlation matrix.
    pub fn latent_covariance(&self, class: usize) -> Result<Mat> {
        let v = self.v_rois;
        let mut cov = Mat::zeros(v, v);
        for i in 0..v {
            cov.set(i, i, 1.0);
            for j in (i + 1)..v {
                let mut c = if self.block_partition[i] == self.block_partition[j] {
                    self.within_block_corr
                } else {
                    0.0
                };
                if class > 0 {
                    let effect = &self.class_effects[class - 1];
                    let pair = (self.block_partition[i], self.block_partition[j]);
                    let hit = effect.block_pairs.iter().any(|&(a, b)| {
                        (pair.0 == a && pair.1 == b) || (pair.0 == b && pair.1 == a)
                    });
                    if hit {
                        c += effect.delta;
                    }
                }
                if c.abs() >= 1.0 {
                    return Err(SynthError::InvalidSpec(format!(
                        "class {class} pushes correlation ({i},{j}) to {c}, outside (-1, 1)"
                    )));
                }
                cov.set(i, j, c);
                cov.set(j, i, c);
            }
        }
        Ok(cov)
    }

    /// Population FC of the observed (noise-added) series for one class:
    /// off-diagonal latent correlations shrink by 1 / (1 + sigma^2).
    pub fn planted_fc(&self, class: usize) -> Result<Mat> {
        let latent = self.latent_covariance(class)?;
        let shrink = 1.0 / (1.0 + self.noise_sigma * self.noise_sigma);
        let v = self.v_rois;
        let mut fc = Mat::zeros(v, v);
        for i in 0..v {
            fc.set(i, i, 1.0);
            for j in 0..v {
                if i != j {
                    fc.set(i, j, latent.get(i, j) * shrink);
                }
            }
        }
        Ok(fc)
    }

    pub fn class_of(&self, subject_idx: usize) -> usize {
        subject_idx % self.n_classes
    }

    pub fn site_of(&self, subject_idx: usize) -> String {
        format!("site{}", (subject_idx / self.n_classes) % 2)
    }
}

/// Sample one subject's scan. Deterministic in (spec.seed, subject_idx); the
/// values are quantized to f32 so CSV and `.bts` encodings agree bitwise.
pub fn gen_scan(spec: &SynthSpec, subject_idx: usize) -> Result<TimeseriesScan> {
    let class = spec.class_of(subject_idx);
    let cov = spec.latent_covariance(class)?;
    let chol = cholesky(&cov).ok_or(SynthError::NotPositiveDefinite { class })?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth-subject", &[subject_idx as u64]));
    let v = spec.v_rois;
    let t = spec.t_points;
    let mut data = Mat::zeros(v, t);
    let mut latent = vec![0.0f64; v];
    for col in 0..t {
        for g in latent.iter_mut() {
            *g = rng.sample(StandardNormal);
        }
        for i in 0..v {
            let mut x = 0.0;
            for j in 0..=i {
                x += chol.get(i, j) * latent[j];
            }
            let noise: f64 = rng.sample(StandardNormal);
            let value = x + spec.noise_sigma * noise;
            data.set(i, col, value as f32 as f64);
        }
    }
    Ok(TimeseriesScan {
        subject_id: format!("subj{subject_idx:04}"),
        site: spec.site_of(subject_idx),
        label: class as i32,
        split: Split::Train,
        data,
    })
}

/// Sample the whole cohort: labels balanced across classes, two synthetic
/// sites interleaved.
pub fn gen_cohort(spec: &SynthSpec) -> Result<Vec<TimeseriesScan>> {
    spec.validate()?;
    (0..spec.n_subjects).map(|i| gen_scan(spec, i)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScanFormat {
    Csv,
    Bts,
}

impl std::str::FromStr for ScanFormat {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ScanFormat::Csv),
            "bts" => Ok(ScanFormat::Bts),
            other => Err(format!("unknown scan format {other:?}; expected csv or bts")),
        }
    }
}

/// Write a cohort as scans plus a manifest under `dir`; returns the manifest
/// path. Scan files land in `dir/scans/`.
pub fn write_cohort(
    cohort: &[TimeseriesScan],
    dir: &std::path::Path,
    format: ScanFormat,
) -> std::result::Result<std::path::PathBuf, crate::ingest::IngestError> {
    use crate::ingest;
    let scans_dir = dir.join("scans");
    std::fs::create_dir_all(&scans_dir).map_err(|e| ingest::IngestError::Io {
        path: scans_dir.clone(),
        source: e,
    })?;
    let ext = match format {
        ScanFormat::Csv => "csv",
        ScanFormat::Bts => "bts",
    };
    let mut entries = Vec::with_capacity(cohort.len());
    for scan in cohort {
        let rel = format!("scans/{}.{ext}", scan.subject_id);
        let path = dir.join(&rel);
        match format {
            ScanFormat::Csv => ingest::write_scan_csv(&scan.data, &path)?,
            ScanFormat::Bts => ingest::write_scan_bts(&scan.data, &path)?,
        }
        entries.push((scan.subject_id.clone(), rel, scan.site.clone(), scan.label, scan.split));
    }
    let manifest_path = dir.join("manifest.tsv");
    ingest::write_manifest(&entries, &manifest_path)?;
    Ok(manifest_path)
}

/// Lower-triangular Cholesky factor, or `None` if the matrix is not positive
/// definite.
pub fn cholesky(a: &Mat) -> Option<Mat> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a.get(i, j);
            for k in 0..j {
                sum -= l.get(i, k) * l.get(j, k);
            }
            if i == j {
                if sum <= 1e-12 {
                    return None;
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Some(l)
}

/// Pearson correlation by direct two-pass summation, entry by entry.
///
/// Structurally independent of `connectome::pearson_fc` (no shared code); a
/// zero-variance row makes every entry that touches it `None`.
pub fn oracle_pearson(data: &Mat) -> Vec<Vec<Option<f64>>> {
    let v = data.rows();
    let t = data.cols();
    let n = t as f64;
    let means: Vec<f64> = (0..v).map(|i| data.row(i).iter().sum::<f64>() / n).collect();
    let mut out = vec![vec![None; v]; v];
    for i in 0..v {
        for j in 0..v {
            let mut cov = 0.0;
            let mut var_i = 0.0;
            let mut var_j = 0.0;
            for c in 0..t {
                let di = data.get(i, c) - means[i];
                let dj = data.get(j, c) - means[j];
                cov += di * dj;
                var_i += di * di;
                var_j += dj * dj;
            }
            if var_i > 0.0 && var_j > 0.0 {
                out[i][j] = Some(cov / (var_i.sqrt() * var_j.sqrt()));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectome::pearson_fc;

    fn tiny_spec(effect: f64, noise: f64, seed: u64) -> SynthSpec {
        SynthSpec::standard(4, 16, 200, 2, effect, noise, seed)
    }

    #[test]
    fn single_class_cohort_has_all_zero_labels() {
        let spec = SynthSpec::standard(6, 8, 50, 1, 0.0, 0.5, 3);
        let cohort = gen_cohort(&spec).unwrap();
        assert!(cohort.iter().all(|s| s.label == 0));
    }

    #[test]
    fn generation_is_deterministic_per_subject() {
        let spec = tiny_spec(0.2, 0.5, 11);
        let a = gen_scan(&spec, 2).unwrap();
        let b = gen_scan(&spec, 2).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.subject_id, b.subject_id);
    }

    #[test]
    fn labels_balanced_and_sites_interleaved() {
        let spec = tiny_spec(0.2, 0.5, 1);
        let cohort = gen_cohort(&spec).unwrap();
        let ones = cohort.iter().filter(|s| s.label == 1).count();
        assert_eq!(ones, 2);
        assert!(cohort.iter().any(|s| s.site == "site0"));
        assert!(cohort.iter().any(|s| s.site == "site1"));
    }

    #[test]
    fn oracle_pearson_handles_collinear_and_degenerate_rows() {
        let data = Mat::from_vec(3, 4, vec![
            1.0, 2.0, 3.0, 4.0,
            4.0, 3.0, 2.0, 1.0,
            5.0, 5.0, 5.0, 5.0,
        ]);
        let r = oracle_pearson(&data);
        assert!((r[0][0].unwrap() - 1.0).abs() < 1e-12);
        assert!((r[0][1].unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(r[0][2], None);
        assert_eq!(r[2][2], None);
    }

    #[test]
    fn oracle_agrees_with_pearson_fc() {
        let spec = tiny_spec(0.2, 0.8, 5);
        let scan = gen_scan(&spec, 0).unwrap();
        let fc = pearson_fc(&scan.data, "s").unwrap();
        let oracle = oracle_pearson(&scan.data);
        for i in 0..16 {
            for j in 0..16 {
                let want = oracle[i][j].unwrap();
                assert!((fc.matrix.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn empirical_fc_converges_to_planted_correlation() {
        for seed in 0..5u64 {
            let mut spec_short = tiny_spec(0.0, 0.5, seed);
            spec_short.t_points = 200;
            let mut spec_long = spec_short.clone();
            spec_long.t_points = 2000;
            let planted = spec_short.planted_fc(0).unwrap();
            let err = |spec: &SynthSpec| {
                let scan = gen_scan(spec, 0).unwrap();
                let fc = pearson_fc(&scan.data, "s").unwrap();
                fc.matrix
                    .iter()
                    .zip(planted.iter())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0f64, f64::max)
            };
            assert!(
                err(&spec_long) < err(&spec_short),
                "seed {seed}: T=2000 should beat T=200"
            );
        }
    }

    #[test]
    fn within_block_correlation_exceeds_between_block() {
        let spec = tiny_spec(0.2, 0.5, 9);
        for (idx, scan) in gen_cohort(&spec).unwrap().iter().enumerate() {
            let fc = pearson_fc(&scan.data, &scan.subject_id).unwrap();
            let mut within = (0.0, 0usize);
            let mut between = (0.0, 0usize);
            for i in 0..16 {
                for j in (i + 1)..16 {
                    let same = spec.block_partition[i] == spec.block_partition[j];
                    let v = fc.matrix.get(i, j);
                    if same {
                        within = (within.0 + v, within.1 + 1);
                    } else {
                        between = (between.0 + v, between.1 + 1);
                    }
                }
            }
            assert!(
                within.0 / within.1 as f64 > between.0 / between.1 as f64,
                "subject {idx}: block structure not recoverable"
            );
        }
    }

    #[test]
    fn class_effect_knob_increases_edge_t_statistic() {
        // t-statistic of one perturbed edge, classes 0 vs 1
        let t_stat = |effect: f64| {
            let spec = SynthSpec::standard(40, 16, 200, 2, effect, 0.5, 17);
            let cohort = gen_cohort(&spec).unwrap();
            // blocks 0 and 1 cover ROIs 0..4 and 4..8; edge (0, 4) is perturbed
            let edge: Vec<(f64, i32)> = cohort
                .iter()
                .map(|s| {
                    let fc = pearson_fc(&s.data, &s.subject_id).unwrap();
                    (fc.matrix.get(0, 4), s.label)
                })
                .collect();
            let (g0, g1): (Vec<_>, Vec<_>) = edge.iter().partition(|(_, l)| *l == 0);
            let mean = |g: &[(f64, i32)]| g.iter().map(|(v, _)| v).sum::<f64>() / g.len() as f64;
            let var = |g: &[(f64, i32)], m: f64| {
                g.iter().map(|(v, _)| (v - m).powi(2)).sum::<f64>() / (g.len() - 1) as f64
            };
            let (m0, m1) = (mean(&g0), mean(&g1));
            let se = (var(&g0, m0) / g0.len() as f64 + var(&g1, m1) / g1.len() as f64).sqrt();
            (m1 - m0) / se
        };
        let t_small = t_stat(0.1);
        let t_mid = t_stat(0.2);
        let t_large = t_stat(0.3);
        assert!(t_small < t_mid && t_mid < t_large, "{t_small} {t_mid} {t_large}");
    }

    #[test]
    fn non_positive_definite_spec_is_rejected() {
        let mut spec = tiny_spec(0.2, 0.5, 1);
        spec.within_block_corr = 0.999;
        // three mutually anti-correlated blocks cannot come from a valid
        // covariance (the effective 3x3 block matrix has a negative eigenvalue)
        spec.class_effects =
            vec![ClassEffect { block_pairs: vec![(0, 1), (0, 2), (1, 2)], delta: -0.9 }];
        assert!(matches!(
            spec.validate(),
            Err(SynthError::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn scan_values_are_f32_exact() {
        let spec = tiny_spec(0.2, 0.5, 23);
        let scan = gen_scan(&spec, 1).unwrap();
        for &v in scan.data.iter() {
            assert_eq!(v, v as f32 as f64);
        }
    }
}
