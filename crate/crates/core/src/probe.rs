//! Frozen-encoder evaluation: embedding extraction, site-stratified splits,
//! a deterministic linear SVM probe, ACC/SEN/SPE metrics, and probability
//! ensembles for zero/few-shot transfer to unseen diseases.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::connectome::pearson_fc;
use crate::encoder::EncoderError;
use crate::ingest::{Split, TimeseriesScan};
use crate::mat::derive_seed;
use crate::ssl::SslModel;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("checkpoint expects V={expected} ROIs, cohort has V={got}")]
    VMismatch { expected: usize, got: usize },
    #[error("training set contains a single class ({0})")]
    SingleClass(i32),
    #[error("empty input: {0}")]
    Empty(String),
    #[error("feature dimension mismatch: {lhs} vs {rhs}")]
    DimensionMismatch { lhs: usize, rhs: usize },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Connectome(#[from] crate::connectome::ConnectomeError),
}

pub type Result<T> = std::result::Result<T, ProbeError>;

/// The frozen D*V representation of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub subject_id: String,
    pub vector: Vec<f64>,
    pub label: i32,
    pub site: String,
    pub split: Split,
}

/// Encode every scan with the frozen model: full FC, no dropping, no masking,
/// then the readout. The encoder state is never mutated.
pub fn extract_embeddings(
    model: &SslModel<f32>,
    scans: &[TimeseriesScan],
) -> Result<Vec<EmbeddingRecord>> {
    let v = model.encoder.config.v_rois;
    let mut out = Vec::with_capacity(scans.len());
    for scan in scans {
        if scan.data.rows() != v {
            return Err(ProbeError::VMismatch { expected: v, got: scan.data.rows() });
        }
        let fc = pearson_fc(&scan.data, &scan.subject_id)?;
        let encoded = model.encoder.encode(&fc, None, false)?;
        let z = model.encoder.readout(&encoded)?;
        out.push(EmbeddingRecord {
            subject_id: scan.subject_id.clone(),
            vector: z.values().iter().map(|&x| x as f64).collect(),
            label: scan.label,
            site: scan.site.clone(),
            split: scan.split,
        });
    }
    Ok(out)
}

/// Largest-remainder allocation of `n` items across fractions. Ties between
/// equal remainders rotate with `rotation` (the cell index) so that equal
/// cells spread their leftover items over different buckets and the global
/// counts stay proportional.
fn allocate(n: usize, fractions: &[f64], rotation: usize) -> Vec<usize> {
    let k = fractions.len();
    let ideals: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts: Vec<usize> = ideals.iter().map(|&x| x.floor() as usize).collect();
    let mut remaining = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        let ra = ideals[a] - ideals[a].floor();
        let rb = ideals[b] - ideals[b].floor();
        rb.partial_cmp(&ra).unwrap().then(((a + rotation) % k).cmp(&((b + rotation) % k)))
    });
    let mut i = 0;
    while remaining > 0 {
        counts[order[i % k]] += 1;
        remaining -= 1;
        i += 1;
    }
    counts
}

/// Assign train/val/test within each (site, label) cell so per-cell
/// proportions match the fractions within one sample. Cells smaller than 3
/// go wholly to train, with a warning. Deterministic per seed.
pub fn stratified_split(
    records: &[EmbeddingRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Split>> {
    let (ft, fv, fs) = fractions;
    if (ft + fv + fs - 1.0).abs() > 1e-9 {
        return Err(ProbeError::Empty(format!("fractions must sum to 1, got {ft}+{fv}+{fs}")));
    }
    if records.is_empty() {
        return Err(ProbeError::Empty("no records to split".into()));
    }
    let mut cells: BTreeMap<(String, i32), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        cells.entry((r.site.clone(), r.label)).or_default().push(i);
    }
    let mut assignment = vec![Split::Train; records.len()];
    for (cell_idx, ((site, label), mut members)) in cells.into_iter().enumerate() {
        if members.len() < 3 {
            log::warn!(
                "cell (site={site}, label={label}) has {} record(s); assigning all to train",
                members.len()
            );
            continue;
        }
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "stratify", &[cell_idx as u64]));
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), &[ft, fv, fs], cell_idx);
        let mut cursor = 0;
        for (bucket, split) in [Split::Train, Split::Val, Split::Test].iter().enumerate() {
            for &idx in &members[cursor..cursor + counts[bucket]] {
                assignment[idx] = *split;
            }
            cursor += counts[bucket];
        }
    }
    Ok(assignment)
}

/// Re-split only the given records between val and test (train stays fixed
/// across repeats), stratified by (site, label).
pub fn resplit_val_test(
    records: &[EmbeddingRecord],
    pool: &[usize],
    val_frac: f64,
    seed: u64,
) -> Vec<(usize, Split)> {
    let mut cells: BTreeMap<(String, i32), Vec<usize>> = BTreeMap::new();
    for &i in pool {
        cells.entry((records[i].site.clone(), records[i].label)).or_default().push(i);
    }
    let mut out = Vec::with_capacity(pool.len());
    for (cell_idx, (_, mut members)) in cells.into_iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, "resplit", &[cell_idx as u64]));
        members.shuffle(&mut rng);
        let counts = allocate(members.len(), &[val_frac, 1.0 - val_frac], cell_idx);
        for (k, &idx) in members.iter().enumerate() {
            out.push((idx, if k < counts[0] { Split::Val } else { Split::Test }));
        }
    }
    out
}

/// Trained soft-margin linear SVM. The train-split standardization is folded
/// into the weights, so the margin applies to raw embeddings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
    /// (negative label, positive/patient label)
    pub classes: (i32, i32),
}

impl SvmModel {
    pub fn margin(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            return Err(ProbeError::DimensionMismatch { lhs: self.weights.len(), rhs: x.len() });
        }
        let mut acc = self.bias;
        for (w, v) in self.weights.iter().zip(x) {
            acc += w * v;
        }
        Ok(acc)
    }

    pub fn predict(&self, x: &[f64]) -> Result<i32> {
        Ok(if self.margin(x)? >= 0.0 { self.classes.1 } else { self.classes.0 })
    }

    /// Positive-class probability: logistic of the signed margin.
    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        let m = self.margin(x)?;
        Ok(1.0 / (1.0 + (-m).exp()))
    }
}

/// Minimize `(1/2)||w||^2 + C * sum hinge` by deterministic projected
/// sub-gradient descent (Pegasos steps on the augmented feature vector) with
/// averaged iterates over the second half of a fixed budget.
pub fn svm_train(records: &[&EmbeddingRecord], c: f64, seed: u64) -> Result<SvmModel> {
    if records.is_empty() {
        return Err(ProbeError::Empty("svm_train needs training records".into()));
    }
    let mut labels: Vec<i32> = records.iter().map(|r| r.label).collect();
    labels.sort_unstable();
    labels.dedup();
    if labels.len() < 2 {
        return Err(ProbeError::SingleClass(labels[0]));
    }
    let (neg, pos) = (labels[0], *labels.last().unwrap());
    let dim = records[0].vector.len();
    for r in records {
        if r.vector.len() != dim {
            return Err(ProbeError::DimensionMismatch { lhs: dim, rhs: r.vector.len() });
        }
    }

    // standardize with train statistics
    let n = records.len();
    let mut mean = vec![0.0f64; dim];
    for r in records {
        for (m, v) in mean.iter_mut().zip(&r.vector) {
            *m += v;
        }
    }
    for m in mean.iter_mut() {
        *m /= n as f64;
    }
    let mut std = vec![0.0f64; dim];
    for r in records {
        for j in 0..dim {
            let d = r.vector[j] - mean[j];
            std[j] += d * d;
        }
    }
    for s in std.iter_mut() {
        *s = (*s / n as f64).sqrt();
        if *s < 1e-12 {
            *s = 1.0;
        }
    }
    let xs: Vec<Vec<f64>> = records
        .iter()
        .map(|r| (0..dim).map(|j| (r.vector[j] - mean[j]) / std[j]).collect())
        .collect();
    let ys: Vec<f64> = records.iter().map(|r| if r.label == pos { 1.0 } else { -1.0 }).collect();

    // Pegasos on [x, 1]: lambda = 1 / (C * n) maps the (1/2)||w||^2 + C*sum
    // objective onto the per-sample average form.
    let lambda = 1.0 / (c * n as f64);
    let epochs = 80usize;
    let mut w = vec![0.0f64; dim + 1];
    let mut w_avg = vec![0.0f64; dim + 1];
    let mut averaged = 0usize;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "svm", &[]));
    let mut t = 0usize;
    let radius = 1.0 / lambda.sqrt();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let mut margin = w[dim];
            for j in 0..dim {
                margin += w[j] * xs[i][j];
            }
            let scale = 1.0 - eta * lambda;
            for wj in w.iter_mut() {
                *wj *= scale;
            }
            if ys[i] * margin < 1.0 {
                let step = eta * ys[i] / n as f64;
                for j in 0..dim {
                    w[j] += step * xs[i][j];
                }
                w[dim] += step;
            }
            // projection onto the ball that contains the optimum
            let norm: f64 = w.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > radius {
                let shrink = radius / norm;
                for wj in w.iter_mut() {
                    *wj *= shrink;
                }
            }
            if epoch >= epochs / 2 {
                for (a, v) in w_avg.iter_mut().zip(&w) {
                    *a += v;
                }
                averaged += 1;
            }
        }
    }
    for a in w_avg.iter_mut() {
        *a /= averaged as f64;
    }

    // fold the scaler into the weights: w.(x - mu)/sigma + b
    let mut weights = vec![0.0f64; dim];
    let mut bias = w_avg[dim];
    for j in 0..dim {
        weights[j] = w_avg[j] / std[j];
        bias -= w_avg[j] * mean[j] / std[j];
    }
    Ok(SvmModel { weights, bias, c, classes: (neg, pos) })
}

/// Candidate regularization values for validation selection.
pub const C_GRID: [f64; 4] = [0.01, 0.1, 1.0, 10.0];

/// Train at every C in the grid, keep the model with the best validation
/// accuracy (ties go to the smaller C).
pub fn svm_train_select_c(
    train: &[&EmbeddingRecord],
    val: &[&EmbeddingRecord],
    seed: u64,
) -> Result<(SvmModel, f64)> {
    let mut best: Option<(SvmModel, f64, f64)> = None;
    for &c in &C_GRID {
        let model = svm_train(train, c, seed)?;
        let preds: Vec<i32> =
            val.iter().map(|r| model.predict(&r.vector)).collect::<Result<_>>()?;
        let labels: Vec<i32> = val.iter().map(|r| r.label).collect();
        let acc = preds.iter().zip(&labels).filter(|(p, l)| p == l).count() as f64
            / val.len().max(1) as f64;
        if best.as_ref().is_none_or(|(_, _, b)| acc > *b) {
            best = Some((model, c, acc));
        }
    }
    let (model, c, _) = best.expect("C grid is non-empty");
    Ok((model, c))
}

/// Confusion counts and the derived ACC/SEN/SPE. A zero denominator reports
/// the metric as undefined rather than 0.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub accuracy: f64,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// ACC/SEN/SPE from predictions against labels, with `positive` the patient
/// class.
pub fn metrics(predictions: &[i32], labels: &[i32], positive: i32) -> Result<MetricsReport> {
    if predictions.is_empty() || predictions.len() != labels.len() {
        return Err(ProbeError::Empty(format!(
            "metrics needs matched non-empty inputs, got {} predictions and {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p == positive, l == positive) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { None } else { Some(num as f64 / den as f64) };
    Ok(MetricsReport {
        tp,
        fp,
        tn,
        fn_,
        accuracy: (tp + tn) as f64 / predictions.len() as f64,
        sensitivity: ratio(tp, tp + fn_),
        specificity: ratio(tn, tn + fp),
    })
}

/// Mean and population standard deviation over the defined repeat values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub values: Vec<Option<f64>>,
}

impl Aggregate {
    fn from_values(values: Vec<Option<f64>>) -> Self {
        let defined: Vec<f64> = values.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Aggregate { mean: None, std: None, values };
        }
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / defined.len() as f64;
        Aggregate { mean: Some(mean), std: Some(var.sqrt()), values }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatOutcome {
    pub repeat: usize,
    pub chosen_c: f64,
    pub metrics: MetricsReport,
}

/// The probe's metrics report: mean/std per metric plus per-repeat values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatedEvalReport {
    pub repeats: usize,
    pub seed: u64,
    pub positive_label: i32,
    pub accuracy: Aggregate,
    pub sensitivity: Aggregate,
    pub specificity: Aggregate,
    pub per_repeat: Vec<RepeatOutcome>,
}

/// Downstream evaluation with `k` resampled val/test splits (train fixed):
/// per repeat, C is re-selected on the repeat's validation split and metrics
/// come from its test split.
pub fn repeated_eval(
    records: &[EmbeddingRecord],
    fractions: (f64, f64, f64),
    k: usize,
    seed: u64,
) -> Result<RepeatedEvalReport> {
    if k == 0 {
        return Err(ProbeError::Empty("repeated_eval needs k >= 1".into()));
    }
    let assignment = stratified_split(records, fractions, derive_seed(seed, "base-split", &[]))?;
    let train_idx: Vec<usize> =
        (0..records.len()).filter(|&i| assignment[i] == Split::Train).collect();
    let pool: Vec<usize> =
        (0..records.len()).filter(|&i| assignment[i] != Split::Train).collect();
    if pool.is_empty() {
        return Err(ProbeError::Empty("no held-out records after the base split".into()));
    }
    let train: Vec<&EmbeddingRecord> = train_idx.iter().map(|&i| &records[i]).collect();
    let positive = records.iter().map(|r| r.label).max().unwrap();
    let val_frac = fractions.1 / (fractions.1 + fractions.2);

    let mut per_repeat = Vec::with_capacity(k);
    for repeat in 0..k {
        let resplit =
            resplit_val_test(records, &pool, val_frac, derive_seed(seed, "repeat", &[repeat as u64]));
        let val: Vec<&EmbeddingRecord> = resplit
            .iter()
            .filter(|(_, s)| *s == Split::Val)
            .map(|(i, _)| &records[*i])
            .collect();
        let test: Vec<&EmbeddingRecord> = resplit
            .iter()
            .filter(|(_, s)| *s == Split::Test)
            .map(|(i, _)| &records[*i])
            .collect();
        if test.is_empty() {
            return Err(ProbeError::Empty(format!("repeat {repeat} produced an empty test split")));
        }
        let (model, chosen_c) = svm_train_select_c(&train, &val, derive_seed(seed, "svm-seed", &[]))?;
        let preds: Vec<i32> =
            test.iter().map(|r| model.predict(&r.vector)).collect::<Result<_>>()?;
        let labels: Vec<i32> = test.iter().map(|r| r.label).collect();
        per_repeat.push(RepeatOutcome { repeat, chosen_c, metrics: metrics(&preds, &labels, positive)? });
    }
    Ok(RepeatedEvalReport {
        repeats: k,
        seed,
        positive_label: positive,
        accuracy: Aggregate::from_values(
            per_repeat.iter().map(|r| Some(r.metrics.accuracy)).collect(),
        ),
        sensitivity: Aggregate::from_values(
            per_repeat.iter().map(|r| r.metrics.sensitivity).collect(),
        ),
        specificity: Aggregate::from_values(
            per_repeat.iter().map(|r| r.metrics.specificity).collect(),
        ),
        per_repeat,
    })
}

/// Fit the exportable probe classifier: base stratified split, C selected on
/// the first resampled validation split, trained on the fixed train split.
pub fn fit_probe_classifier(
    records: &[EmbeddingRecord],
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<(SvmModel, f64)> {
    let assignment = stratified_split(records, fractions, derive_seed(seed, "base-split", &[]))?;
    let train: Vec<&EmbeddingRecord> = (0..records.len())
        .filter(|&i| assignment[i] == Split::Train)
        .map(|i| &records[i])
        .collect();
    let pool: Vec<usize> =
        (0..records.len()).filter(|&i| assignment[i] != Split::Train).collect();
    let val_frac = fractions.1 / (fractions.1 + fractions.2);
    let resplit = resplit_val_test(records, &pool, val_frac, derive_seed(seed, "repeat", &[0]));
    let val: Vec<&EmbeddingRecord> = resplit
        .iter()
        .filter(|(_, s)| *s == Split::Val)
        .map(|(i, _)| &records[*i])
        .collect();
    svm_train_select_c(&train, &val, derive_seed(seed, "svm-seed", &[]))
}

/// Zero-shot ensemble probability: per-classifier logistic margins averaged
/// uniformly. Decision threshold is 0.5.
pub fn ensemble_zero_shot(classifiers: &[SvmModel], x: &[f64]) -> Result<f64> {
    if classifiers.is_empty() {
        return Err(ProbeError::Empty("ensemble needs at least one classifier".into()));
    }
    let mut acc = 0.0;
    for c in classifiers {
        acc += c.probability(x)?;
    }
    Ok(acc / classifiers.len() as f64)
}

/// Few-shot ensemble weights: proportional to each classifier's balanced
/// accuracy on the labeled support set, normalized to sum 1; uniform when the
/// balanced accuracies carry no signal.
pub fn ensemble_few_shot(classifiers: &[SvmModel], support: &[EmbeddingRecord]) -> Result<Vec<f64>> {
    if classifiers.is_empty() {
        return Err(ProbeError::Empty("ensemble needs at least one classifier".into()));
    }
    if support.is_empty() {
        return Err(ProbeError::Empty("few-shot weighting needs a support set".into()));
    }
    let positive = support.iter().map(|r| r.label).max().unwrap();
    let has_pos = support.iter().any(|r| r.label == positive);
    let has_neg = support.iter().any(|r| r.label != positive);
    if !has_pos || !has_neg {
        return Err(ProbeError::SingleClass(support[0].label));
    }
    let mut weights = Vec::with_capacity(classifiers.len());
    for c in classifiers {
        let mut counts = (0usize, 0usize, 0usize, 0usize); // tp, fn, tn, fp
        for r in support {
            let pred_pos = c.margin(&r.vector)? >= 0.0;
            match (pred_pos, r.label == positive) {
                (true, true) => counts.0 += 1,
                (false, true) => counts.1 += 1,
                (false, false) => counts.2 += 1,
                (true, false) => counts.3 += 1,
            }
        }
        let sen = counts.0 as f64 / (counts.0 + counts.1) as f64;
        let spe = counts.2 as f64 / (counts.2 + counts.3) as f64;
        weights.push((sen + spe) / 2.0);
    }
    let total: f64 = weights.iter().sum();
    let spread = weights.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &w| {
        (lo.min(w), hi.max(w))
    });
    if total <= 0.0 || (spread.1 - spread.0).abs() < 1e-12 {
        return Ok(vec![1.0 / classifiers.len() as f64; classifiers.len()]);
    }
    Ok(weights.into_iter().map(|w| w / total).collect())
}

/// Weighted ensemble probability.
pub fn ensemble_predict(classifiers: &[SvmModel], weights: &[f64], x: &[f64]) -> Result<f64> {
    if classifiers.len() != weights.len() {
        return Err(ProbeError::DimensionMismatch { lhs: classifiers.len(), rhs: weights.len() });
    }
    let mut acc = 0.0;
    for (c, w) in classifiers.iter().zip(weights) {
        acc += w * c.probability(x)?;
    }
    Ok(acc)
}

/// Embeddings CSV: `subject_id,label,site,split,f0,...,f{n-1}`.
pub fn write_embeddings_csv(records: &[EmbeddingRecord], path: &Path) -> Result<()> {
    if records.is_empty() {
        return Err(ProbeError::Empty("no embeddings to write".into()));
    }
    let dim = records[0].vector.len();
    let mut out = String::from("subject_id,label,site,split");
    for i in 0..dim {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for r in records {
        out.push_str(&format!("{},{},{},{}", r.subject_id, r.label, r.site, r.split));
        for v in &r.vector {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| ProbeError::Io { path: path.into(), source: e })
}

pub fn load_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ProbeError::Io { path: path.into(), source: e })?;
    let format_err =
        |msg: String| ProbeError::Format { path: path.into(), msg };
    let mut lines = text.lines().filter(|l| !l.is_empty());
    let header = lines.next().ok_or_else(|| format_err("empty embeddings file".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 5 || cols[..4] != ["subject_id", "label", "site", "split"] {
        return Err(format_err(format!("unexpected header {header:?}")));
    }
    let dim = cols.len() - 4;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let row = i + 2;
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 + dim {
            return Err(format_err(format!(
                "line {row}: expected {} fields, got {}",
                4 + dim,
                fields.len()
            )));
        }
        let label: i32 = fields[1]
            .parse()
            .map_err(|_| format_err(format!("line {row}: bad label {:?}", fields[1])))?;
        let split = fields[3]
            .parse::<Split>()
            .map_err(|e| format_err(format!("line {row}: {e}")))?;
        let mut vector = Vec::with_capacity(dim);
        for f in &fields[4..] {
            let v: f64 = f
                .parse()
                .map_err(|_| format_err(format!("line {row}: bad value {f:?}")))?;
            if !v.is_finite() {
                return Err(format_err(format!("line {row}: non-finite embedding value")));
            }
            vector.push(v);
        }
        records.push(EmbeddingRecord {
            subject_id: fields[0].to_string(),
            label,
            site: fields[2].to_string(),
            split,
            vector,
        });
    }
    if records.is_empty() {
        return Err(format_err("no embedding rows".into()));
    }
    Ok(records)
}

pub fn save_svm(model: &SvmModel, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(model)
        .map_err(|e| ProbeError::Format { path: path.into(), msg: e.to_string() })?;
    std::fs::write(path, json).map_err(|e| ProbeError::Io { path: path.into(), source: e })
}

pub fn load_svm(path: &Path) -> Result<SvmModel> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| ProbeError::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text)
        .map_err(|e| ProbeError::Format { path: path.into(), msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: i32, site: &str, vector: Vec<f64>) -> EmbeddingRecord {
        EmbeddingRecord {
            subject_id: id.into(),
            vector,
            label,
            site: site.into(),
            split: Split::Train,
        }
    }

    #[test]
    fn stratified_split_hits_exact_70_15_15() {
        let records: Vec<EmbeddingRecord> = (0..100)
            .map(|i| rec(&format!("s{i}"), (i % 2) as i32, "one", vec![0.0]))
            .collect();
        let split = stratified_split(&records, (0.7, 0.15, 0.15), 3).unwrap();
        let count = |s: Split| split.iter().filter(|&&x| x == s).count();
        assert_eq!(count(Split::Train), 70);
        assert_eq!(count(Split::Val), 15);
        assert_eq!(count(Split::Test), 15);
    }

    #[test]
    fn stratified_split_cells_of_twenty_go_14_3_3() {
        let mut records = Vec::new();
        for site in ["a", "b"] {
            for label in 0..2 {
                for i in 0..20 {
                    records.push(rec(&format!("{site}{label}{i}"), label, site, vec![0.0]));
                }
            }
        }
        let split = stratified_split(&records, (0.7, 0.15, 0.15), 5).unwrap();
        for site in ["a", "b"] {
            for label in 0..2 {
                let idx: Vec<usize> = records
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| r.site == site && r.label == label)
                    .map(|(i, _)| i)
                    .collect();
                let count =
                    |s: Split| idx.iter().filter(|&&i| split[i] == s).count();
                assert_eq!(count(Split::Train), 14, "site {site} label {label}");
                assert_eq!(count(Split::Val), 3);
                assert_eq!(count(Split::Test), 3);
            }
        }
    }

    #[test]
    fn tiny_cell_goes_wholly_to_train() {
        let mut records: Vec<EmbeddingRecord> = (0..12)
            .map(|i| rec(&format!("s{i}"), 0, "big", vec![0.0]))
            .collect();
        records.push(rec("lonely", 1, "small", vec![0.0]));
        let split = stratified_split(&records, (0.7, 0.15, 0.15), 1).unwrap();
        assert_eq!(split[12], Split::Train);
    }

    #[test]
    fn split_is_deterministic() {
        let records: Vec<EmbeddingRecord> = (0..50)
            .map(|i| rec(&format!("s{i}"), (i % 2) as i32, "one", vec![0.0]))
            .collect();
        assert_eq!(
            stratified_split(&records, (0.7, 0.15, 0.15), 9).unwrap(),
            stratified_split(&records, (0.7, 0.15, 0.15), 9).unwrap()
        );
    }

    #[test]
    fn svm_separates_two_points() {
        let a = rec("a", 0, "x", vec![-1.0, 0.0]);
        let b = rec("b", 1, "x", vec![1.0, 0.0]);
        let model = svm_train(&[&a, &b], 1.0, 0).unwrap();
        assert_eq!(model.predict(&a.vector).unwrap(), 0);
        assert_eq!(model.predict(&b.vector).unwrap(), 1);
    }

    #[test]
    fn xor_train_accuracy_capped_at_three_quarters() {
        let pts = [
            rec("a", 0, "x", vec![0.0, 0.0]),
            rec("b", 1, "x", vec![0.0, 1.0]),
            rec("c", 1, "x", vec![1.0, 0.0]),
            rec("d", 0, "x", vec![1.0, 1.0]),
        ];
        // oracle: grid-enumerate linear classifiers; none exceeds 3/4
        let mut best = 0usize;
        let grid: Vec<f64> = (-10..=10).map(|v| v as f64 / 2.0).collect();
        for &w0 in &grid {
            for &w1 in &grid {
                for &b in &grid {
                    let correct = pts
                        .iter()
                        .filter(|p| {
                            let pred = if w0 * p.vector[0] + w1 * p.vector[1] + b >= 0.0 { 1 } else { 0 };
                            pred == p.label
                        })
                        .count();
                    best = best.max(correct);
                }
            }
        }
        assert_eq!(best, 3, "no linear labeling of XOR exceeds 3/4");

        let refs: Vec<&EmbeddingRecord> = pts.iter().collect();
        let model = svm_train(&refs, 1.0, 0).unwrap();
        let correct = pts
            .iter()
            .filter(|p| model.predict(&p.vector).unwrap() == p.label)
            .count();
        assert!(correct <= 3, "trained linear SVM beat the XOR bound: {correct}/4");
    }

    #[test]
    fn svm_training_is_deterministic() {
        let records: Vec<EmbeddingRecord> = (0..20)
            .map(|i| {
                let y = (i % 2) as i32;
                let base = if y == 1 { 1.0 } else { -1.0 };
                rec(&format!("s{i}"), y, "x", vec![base + 0.1 * i as f64, -base])
            })
            .collect();
        let refs: Vec<&EmbeddingRecord> = records.iter().collect();
        let a = svm_train(&refs, 0.1, 7).unwrap();
        let b = svm_train(&refs, 0.1, 7).unwrap();
        assert_eq!(a.weights, b.weights);
        assert_eq!(a.bias, b.bias);
    }

    #[test]
    fn svm_rejects_single_class() {
        let a = rec("a", 1, "x", vec![0.0]);
        let b = rec("b", 1, "x", vec![1.0]);
        assert!(matches!(svm_train(&[&a, &b], 1.0, 0), Err(ProbeError::SingleClass(1))));
    }

    #[test]
    fn decision_is_invariant_to_positive_rescaling() {
        let a = rec("a", 0, "x", vec![-1.0, 0.3]);
        let b = rec("b", 1, "x", vec![1.0, -0.4]);
        let mut model = svm_train(&[&a, &b], 1.0, 0).unwrap();
        let probe = vec![0.37, 0.11];
        let before = model.predict(&probe).unwrap();
        for w in model.weights.iter_mut() {
            *w *= 3.0;
        }
        model.bias *= 3.0;
        assert_eq!(model.predict(&probe).unwrap(), before);
    }

    #[test]
    fn metrics_identity_and_degenerate_cases() {
        let perfect = metrics(&[1, 0, 1], &[1, 0, 1], 1).unwrap();
        assert_eq!(perfect.accuracy, 1.0);
        assert_eq!(perfect.sensitivity, Some(1.0));
        assert_eq!(perfect.specificity, Some(1.0));

        let all_neg = metrics(&[0, 0, 0, 0], &[1, 0, 1, 0], 1).unwrap();
        assert_eq!(all_neg.sensitivity, Some(0.0));
        assert_eq!(all_neg.specificity, Some(1.0));

        // no true positives in the labels: sensitivity undefined
        let no_pos = metrics(&[0, 1], &[0, 0], 1).unwrap();
        assert_eq!(no_pos.sensitivity, None);
        assert_eq!(no_pos.specificity, Some(0.5));
    }

    #[test]
    fn metrics_matches_confusion_matrix_arithmetic() {
        // TP=3, FN=1, TN=4, FP=2
        let labels = vec![1, 1, 1, 1, 0, 0, 0, 0, 0, 0];
        let preds = vec![1, 1, 1, 0, 0, 0, 0, 0, 1, 1];
        let m = metrics(&preds, &labels, 1).unwrap();
        assert_eq!((m.tp, m.fn_, m.tn, m.fp), (3, 1, 4, 2));
        assert!((m.accuracy - 0.7).abs() < 1e-12);
        assert!((m.sensitivity.unwrap() - 0.75).abs() < 1e-12);
        assert!((m.specificity.unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn metrics_rejects_empty_input() {
        assert!(matches!(metrics(&[], &[], 1), Err(ProbeError::Empty(_))));
    }

    fn separable_records(n: usize, seed: u64) -> Vec<EmbeddingRecord> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let label = (i % 2) as i32;
                let center = if label == 1 { 1.0 } else { -1.0 };
                let site = if (i / 2) % 2 == 0 { "s0" } else { "s1" };
                let v: Vec<f64> =
                    (0..4).map(|_| center + rng.random_range(-0.6..0.6)).collect();
                rec(&format!("r{i}"), label, site, v)
            })
            .collect()
    }

    #[test]
    fn repeated_eval_single_repeat_has_zero_std() {
        let records = separable_records(60, 1);
        let report = repeated_eval(&records, (0.7, 0.15, 0.15), 1, 5).unwrap();
        assert_eq!(report.accuracy.std, Some(0.0));
        assert_eq!(report.per_repeat.len(), 1);
    }

    #[test]
    fn repeated_eval_mean_matches_direct_average() {
        let records = separable_records(80, 2);
        let report = repeated_eval(&records, (0.7, 0.15, 0.15), 5, 9).unwrap();
        let direct: f64 = report
            .per_repeat
            .iter()
            .map(|r| r.metrics.accuracy)
            .sum::<f64>()
            / report.per_repeat.len() as f64;
        assert!((report.accuracy.mean.unwrap() - direct).abs() < 1e-12);
    }

    fn margin_model(w: Vec<f64>, bias: f64) -> SvmModel {
        SvmModel { weights: w, bias, c: 1.0, classes: (0, 1) }
    }

    #[test]
    fn zero_shot_averages_probabilities() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let m1 = margin_model(vec![logit(0.6)], 0.0);
        let m2 = margin_model(vec![logit(0.8)], 0.0);
        let prob = ensemble_zero_shot(&[m1.clone(), m2], &[1.0]).unwrap();
        assert!((prob - 0.7).abs() < 1e-12);
        let single = ensemble_zero_shot(&[m1], &[1.0]).unwrap();
        assert!((single - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ensemble_probability_is_permutation_invariant() {
        let m1 = margin_model(vec![0.4], 0.1);
        let m2 = margin_model(vec![-0.3], 0.2);
        let m3 = margin_model(vec![1.1], -0.5);
        let x = [0.9];
        let a = ensemble_zero_shot(&[m1.clone(), m2.clone(), m3.clone()], &x).unwrap();
        let b = ensemble_zero_shot(&[m3, m1, m2], &x).unwrap();
        assert!((a - b).abs() < 1e-15);
    }

    #[test]
    fn few_shot_identical_classifiers_get_uniform_weights() {
        let m = margin_model(vec![1.0], 0.0);
        let support = vec![rec("p", 1, "x", vec![1.0]), rec("n", 0, "x", vec![-1.0])];
        let w = ensemble_few_shot(&[m.clone(), m.clone(), m], &support).unwrap();
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }

    #[test]
    fn few_shot_rewards_the_accurate_classifier() {
        let good = margin_model(vec![1.0], 0.0);
        let chance = margin_model(vec![0.0], 1.0); // always predicts positive
        let support = vec![
            rec("p1", 1, "x", vec![1.0]),
            rec("p2", 1, "x", vec![0.8]),
            rec("n1", 0, "x", vec![-1.0]),
            rec("n2", 0, "x", vec![-0.7]),
        ];
        let w = ensemble_few_shot(&[good, chance], &support).unwrap();
        assert!(w[0] > w[1], "{w:?}");
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        // independent balanced-accuracy tally: good = 1.0, chance = 0.5
        assert!((w[0] - 1.0 / 1.5).abs() < 1e-12);
        assert!((w[1] - 0.5 / 1.5).abs() < 1e-12);
    }

    #[test]
    fn few_shot_rejects_single_class_support() {
        let m = margin_model(vec![1.0], 0.0);
        let support = vec![rec("p1", 1, "x", vec![1.0]), rec("p2", 1, "x", vec![0.5])];
        assert!(matches!(
            ensemble_few_shot(&[m], &support),
            Err(ProbeError::SingleClass(_))
        ));
    }

    #[test]
    fn embeddings_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("emb.csv");
        let records = vec![
            rec("s1", 0, "siteA", vec![0.25, -1.5, 3.0]),
            rec("s2", 1, "siteB", vec![0.1 + 0.2, 1e-17, -42.0]),
        ];
        write_embeddings_csv(&records, &path).unwrap();
        let loaded = load_embeddings_csv(&path).unwrap();
        assert_eq!(loaded, records);
    }

    #[test]
    fn svm_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("svm.json");
        let model = margin_model(vec![0.5, -0.25], 0.125);
        save_svm(&model, &path).unwrap();
        let loaded = load_svm(&path).unwrap();
        assert_eq!(loaded.weights, model.weights);
        assert_eq!(loaded.bias, model.bias);
        assert_eq!(loaded.classes, model.classes);
    }
}
