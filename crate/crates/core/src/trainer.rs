//! Adam optimization with linear warmup, the pretraining epoch loop, and the
//! checkpoint format.
//!
//! Checkpoint layout: magic `BMASS1`, a u32-length-prefixed UTF-8 JSON
//! metadata document, the parameter blob as f32 little-endian in canonical
//! enumeration order, then the 64-bit FNV-1a digest of the blob. Training is
//! serial and seeded throughout, so reruns are bitwise identical.

use std::path::{Path, PathBuf};

use crate::encoder::{EncoderConfig, EncoderError, ParamMeta, PARAM_ORDER_VERSION};
use crate::ingest::{Split, TimeseriesScan};
use crate::mat::{derive_seed, Fnv1a};
use crate::numerics::{checked_mode, Real, Tensor};
use crate::ssl::{
    pretrain_step, AblationToggles, EmaState, LossWeights, SslError, SslModel, StepConfig,
};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"BMASS1";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("non-finite gradient on {name} in checked mode")]
    NonFiniteGradient { name: String },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt checkpoint {path}: {msg}")]
    Corrupt { path: PathBuf, msg: String },
    #[error("incompatible checkpoint {path}: {msg}")]
    Incompatible { path: PathBuf, msg: String },
    #[error(transparent)]
    Ssl(#[from] SslError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Training hyperparameters. Defaults follow the pretraining protocol:
/// Adam at 3e-5 warming linearly to 3e-4 over 10 epochs, weight decay 5e-5,
/// batch 256, EMA decay 0.996, drop rate 0.15, lambda_c 0.1, lambda_r 5.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_peak: f64,
    pub warmup_epochs: u64,
    pub epochs: u64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub tau: f64,
    pub drop_rate: f64,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub latent: bool,
    pub mrm_cls: bool,
    pub mrm_rec: bool,
    pub symmetric_lra: bool,
    /// Cosine-decay the rate after warmup instead of holding it constant.
    pub cosine_decay: bool,
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_init: 3e-5,
            lr_peak: 3e-4,
            warmup_epochs: 10,
            epochs: 100,
            batch_size: 256,
            weight_decay: 5e-5,
            tau: 0.996,
            drop_rate: 0.15,
            lambda_c: 0.1,
            lambda_r: 5.0,
            latent: true,
            mrm_cls: true,
            mrm_rec: true,
            symmetric_lra: false,
            cosine_decay: false,
            seed: 0,
            deterministic: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_init > self.lr_peak {
            return Err(TrainError::InvalidConfig(format!(
                "lr_init ({}) must not exceed lr_peak ({})",
                self.lr_init, self.lr_peak
            )));
        }
        if self.warmup_epochs > self.epochs && self.epochs > 0 {
            return Err(TrainError::InvalidConfig(format!(
                "warmup_epochs ({}) must not exceed epochs ({})",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.tau) {
            return Err(TrainError::InvalidConfig(format!("tau must lie in [0, 1], got {}", self.tau)));
        }
        Ok(())
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_c: self.lambda_c, lambda_r: self.lambda_r }
    }

    pub fn toggles(&self) -> AblationToggles {
        AblationToggles { latent: self.latent, mrm_cls: self.mrm_cls, mrm_rec: self.mrm_rec }
    }

    /// Learning rate at a real-valued epoch progress: linear from `lr_init`
    /// to `lr_peak` across the warmup, then constant (or cosine-decayed).
    pub fn lr_at(&self, epoch: f64) -> f64 {
        if self.warmup_epochs > 0 && epoch < self.warmup_epochs as f64 {
            let frac = epoch / self.warmup_epochs as f64;
            self.lr_init + (self.lr_peak - self.lr_init) * frac
        } else if self.cosine_decay && self.epochs > self.warmup_epochs {
            let span = (self.epochs - self.warmup_epochs) as f64;
            let frac = ((epoch - self.warmup_epochs as f64) / span).clamp(0.0, 1.0);
            self.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
        } else {
            self.lr_peak
        }
    }
}

/// One JSON document drives a whole run: the encoder section is the exact
/// `EncoderConfig` schema, the train section defaults field-by-field.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub encoder: EncoderConfig,
    #[serde(default)]
    pub train: TrainConfig,
}

/// Adam first/second moments per parameter, aligned with canonical order.
pub struct OptimState<E: Real> {
    m: Vec<Vec<E>>,
    v: Vec<Vec<E>>,
    t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl<E: Real> OptimState<E> {
    pub fn new(model: &SslModel<E>, weight_decay: f64) -> Self {
        let shapes: Vec<usize> = model.params().iter().map(|(_, t)| t.len()).collect();
        OptimState {
            m: shapes.iter().map(|&n| vec![E::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![E::zero(); n]).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam step with decoupled weight decay. Decay is applied
/// before the Adam delta and skips layer-norm gains/biases and the mask and
/// positional embeddings. Gradients are consumed; parameters are replaced by
/// fresh leaves.
pub fn adam_step<E: Real>(model: &mut SslModel<E>, opt: &mut OptimState<E>, lr: f64) -> Result<()> {
    let metas: Vec<ParamMeta> = model.params().iter().map(|(m, _)| m.clone()).collect();
    let grads: Vec<Option<Vec<E>>> = model.params().iter().map(|(_, t)| t.take_grad()).collect();
    if checked_mode() {
        for (meta, grad) in metas.iter().zip(&grads) {
            if let Some(g) = grad {
                if !g.iter().all(|v| v.is_finite()) {
                    return Err(TrainError::NonFiniteGradient { name: meta.name.clone() });
                }
            }
        }
    }
    opt.t += 1;
    let beta1 = E::from_f64(opt.beta1);
    let beta2 = E::from_f64(opt.beta2);
    let one_minus_b1 = E::from_f64(1.0 - opt.beta1);
    let one_minus_b2 = E::from_f64(1.0 - opt.beta2);
    let corr1 = E::from_f64(1.0 - opt.beta1.powi(opt.t as i32));
    let corr2 = E::from_f64(1.0 - opt.beta2.powi(opt.t as i32));
    let eps = E::from_f64(opt.eps);
    let lr_e = E::from_f64(lr);
    let decay = E::from_f64(lr * opt.weight_decay);

    for (i, slot) in model.params_mut().into_iter().enumerate() {
        let mut values = slot.values().to_vec();
        let zero_grad;
        let g = match &grads[i] {
            Some(g) => g.as_slice(),
            None => {
                zero_grad = vec![E::zero(); values.len()];
                zero_grad.as_slice()
            }
        };
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        let apply_decay = opt.weight_decay != 0.0 && !metas[i].decay_exempt;
        for j in 0..values.len() {
            m[j] = beta1 * m[j] + one_minus_b1 * g[j];
            v[j] = beta2 * v[j] + one_minus_b2 * g[j] * g[j];
            let mut w = values[j];
            if apply_decay {
                w = w - decay * w;
            }
            let m_hat = m[j] / corr1;
            let v_hat = v[j] / corr2;
            values[j] = w - lr_e * m_hat / (v_hat.sqrt() + eps);
        }
        *slot = Tensor::leaf(slot.rows(), slot.cols(), values, true);
    }
    Ok(())
}

/// One row of the emitted loss curve.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub mean_loss: f64,
    pub l_latent: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub lr: f64,
}

pub fn loss_curve_csv(rows: &[EpochRow]) -> String {
    let mut out = String::from("epoch,mean_loss,l_latent,l_c,l_r,lr\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.epoch, r.mean_loss, r.l_latent, r.l_c, r.l_r, r.lr
        ));
    }
    out
}

/// Result of a pretraining run: the model restored to its best-loss epoch.
pub struct TrainOutcome<E: Real> {
    pub model: SslModel<E>,
    pub curve: Vec<EpochRow>,
    pub best_epoch: Option<u64>,
    /// Lowest epoch-mean training loss; `None` marks an untrained model.
    pub best_loss: Option<f64>,
    /// Set when a non-finite loss aborted the run (last good state kept).
    pub diverged_at: Option<String>,
}

fn snapshot<E: Real>(model: &SslModel<E>) -> Vec<Vec<E>> {
    model.params().iter().map(|(_, t)| t.values().to_vec()).collect()
}

fn restore<E: Real>(model: &mut SslModel<E>, values: &[Vec<E>]) {
    for (slot, vals) in model.params_mut().into_iter().zip(values) {
        *slot = Tensor::leaf(slot.rows(), slot.cols(), vals.clone(), true);
    }
}

/// Pretrain on every scan whose split is `train` or `pretrain-only`.
///
/// Each epoch shuffles with a seeded permutation and walks fixed-size batches
/// (cohorts smaller than the batch size run full-batch). The lowest
/// epoch-mean-loss parameters are kept; a non-finite loss aborts with the
/// last good state.
pub fn pretrain<E: Real>(
    scans: &[TimeseriesScan],
    enc_cfg: &EncoderConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<E>> {
    cfg.validate()?;
    enc_cfg.validate()?;
    let pool: Vec<&TimeseriesScan> = scans
        .iter()
        .filter(|s| matches!(s.split, Split::Train | Split::PretrainOnly))
        .collect();
    if pool.is_empty() {
        return Err(TrainError::InvalidConfig("no pretraining scans in the cohort".into()));
    }

    let mut model = SslModel::<E>::init(enc_cfg, derive_seed(cfg.seed, "init", &[]))?;
    let mut ema = EmaState::new(&model.encoder, cfg.tau)?;
    let mut opt = OptimState::new(&model, cfg.weight_decay);

    let mut curve = Vec::with_capacity(cfg.epochs as usize);
    let mut best: Option<(u64, f64, Vec<Vec<E>>)> = None;
    let mut diverged_at = None;
    let steps_per_epoch = pool.len().div_ceil(cfg.batch_size) as f64;

    'epochs: for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle", &[epoch]));
        order.shuffle(&mut rng);

        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut steps = 0u64;
        let lr_first = cfg.lr_at(epoch as f64);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&TimeseriesScan> = chunk.iter().map(|&i| pool[i]).collect();
            let step_cfg = StepConfig {
                drop_rate: cfg.drop_rate,
                weights: cfg.weights(),
                toggles: cfg.toggles(),
                symmetric_lra: cfg.symmetric_lra,
                seed: cfg.seed,
                epoch,
                step: step as u64,
            };
            let stats = pretrain_step(&model, &mut ema, &batch, &step_cfg)?;
            if !stats.total.is_finite() {
                diverged_at = Some(format!("epoch {epoch}, step {step}"));
                log::error!("non-finite loss at epoch {epoch}, step {step}; aborting");
                break 'epochs;
            }
            let lr = cfg.lr_at(epoch as f64 + step as f64 / steps_per_epoch);
            adam_step(&mut model, &mut opt, lr)?;
            sums.0 += stats.total;
            sums.1 += stats.latent;
            sums.2 += stats.cls;
            sums.3 += stats.rec;
            steps += 1;
        }
        let inv = 1.0 / steps as f64;
        let mean_loss = sums.0 * inv;
        curve.push(EpochRow {
            epoch,
            mean_loss,
            l_latent: sums.1 * inv,
            l_c: sums.2 * inv,
            l_r: sums.3 * inv,
            lr: lr_first,
        });
        if best.as_ref().is_none_or(|(_, loss, _)| mean_loss < *loss) {
            best = Some((epoch, mean_loss, snapshot(&model)));
        }
    }

    let (best_epoch, best_loss) = match &best {
        Some((e, l, values)) => {
            restore(&mut model, values);
            (Some(*e), Some(*l))
        }
        None => (None, None),
    };
    Ok(TrainOutcome { model, curve, best_epoch, best_loss, diverged_at })
}

/// Checkpoint metadata document (JSON, embedded in the file).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub param_order_version: String,
    /// FNV-1a over `name:rowsxcols;` in canonical order.
    pub param_enum_digest: u64,
    pub param_count: usize,
    pub epoch: Option<u64>,
    pub best_loss: Option<f64>,
    /// "trained" or "untrained" (zero-epoch run).
    pub status: String,
}

fn param_enum_digest(metas: &[ParamMeta]) -> u64 {
    let mut h = Fnv1a::new();
    for m in metas {
        h.update(format!("{}:{}x{};", m.name, m.rows, m.cols).as_bytes());
    }
    h.finish()
}

/// A loaded or about-to-be-saved checkpoint.
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub model: SslModel<f32>,
    /// FNV-1a of the parameter blob, as stored in the file.
    pub blob_digest: u64,
}

impl std::fmt::Debug for Checkpoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Checkpoint")
            .field("meta", &self.meta)
            .field("blob_digest", &self.blob_digest)
            .finish()
    }
}


/// Serialize model parameters (f32 little-endian, canonical order) with
/// validated metadata and a trailing blob digest.
pub fn save_checkpoint<E: Real>(
    model: &SslModel<E>,
    enc_cfg: &EncoderConfig,
    train_cfg: &TrainConfig,
    epoch: Option<u64>,
    best_loss: Option<f64>,
    path: &Path,
) -> Result<u64> {
    let params = model.params();
    let metas: Vec<ParamMeta> = params.iter().map(|(m, _)| m.clone()).collect();
    let param_count: usize = params.iter().map(|(_, t)| t.len()).sum();
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        encoder: enc_cfg.clone(),
        train: train_cfg.clone(),
        param_order_version: PARAM_ORDER_VERSION.to_string(),
        param_enum_digest: param_enum_digest(&metas),
        param_count,
        epoch,
        best_loss,
        status: if best_loss.is_some() { "trained".into() } else { "untrained".into() },
    };
    let meta_json = serde_json::to_vec(&meta)
        .map_err(|e| TrainError::Corrupt { path: path.into(), msg: e.to_string() })?;

    let mut blob = Vec::with_capacity(4 * param_count);
    for (_, t) in &params {
        for v in t.values() {
            blob.extend_from_slice(&(v.into_f64() as f32).to_le_bytes());
        }
    }
    let digest = crate::mat::fnv1a(&blob);

    let mut bytes = Vec::with_capacity(6 + 4 + meta_json.len() + blob.len() + 8);
    bytes.extend_from_slice(CHECKPOINT_MAGIC);
    bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&meta_json);
    bytes.extend_from_slice(&blob);
    bytes.extend_from_slice(&digest.to_le_bytes());
    std::fs::write(path, bytes).map_err(|e| TrainError::Io { path: path.into(), source: e })?;
    Ok(digest)
}

/// Load and validate a checkpoint. `expect` cross-checks the encoder config
/// when the caller requires a particular architecture.
pub fn load_checkpoint(path: &Path, expect: Option<&EncoderConfig>) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| TrainError::Io { path: path.into(), source: e })?;
    let corrupt = |msg: &str| TrainError::Corrupt { path: path.into(), msg: msg.into() };
    if bytes.len() < 10 || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic; expected BMASS1"));
    }
    let meta_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    if bytes.len() < 10 + meta_len {
        return Err(corrupt("truncated metadata"));
    }
    let meta: CheckpointMeta = serde_json::from_slice(&bytes[10..10 + meta_len])
        .map_err(|e| corrupt(&format!("metadata parse failed: {e}")))?;
    if meta.format_version != CHECKPOINT_VERSION {
        return Err(TrainError::Incompatible {
            path: path.into(),
            msg: format!("format version {} (supported: {CHECKPOINT_VERSION})", meta.format_version),
        });
    }
    if meta.param_order_version != PARAM_ORDER_VERSION {
        return Err(TrainError::Incompatible {
            path: path.into(),
            msg: format!(
                "parameter order {} (supported: {PARAM_ORDER_VERSION})",
                meta.param_order_version
            ),
        });
    }
    if let Some(expected) = expect {
        if *expected != meta.encoder {
            return Err(TrainError::Incompatible {
                path: path.into(),
                msg: format!("encoder config {:?} but expected {expected:?}", meta.encoder),
            });
        }
    }

    let blob_start = 10 + meta_len;
    let expected_len = blob_start + 4 * meta.param_count + 8;
    if bytes.len() != expected_len {
        return Err(corrupt(&format!(
            "size mismatch: expected {expected_len} bytes, found {}",
            bytes.len()
        )));
    }
    let blob = &bytes[blob_start..blob_start + 4 * meta.param_count];
    let stored_digest = u64::from_le_bytes(bytes[expected_len - 8..].try_into().unwrap());
    let digest = crate::mat::fnv1a(blob);
    if digest != stored_digest {
        return Err(corrupt(&format!(
            "blob digest {digest:#018x} does not match stored {stored_digest:#018x}"
        )));
    }

    let mut model = SslModel::<f32>::init(&meta.encoder, 0)?;
    {
        let metas: Vec<ParamMeta> = model.params().iter().map(|(m, _)| m.clone()).collect();
        if param_enum_digest(&metas) != meta.param_enum_digest {
            return Err(TrainError::Incompatible {
                path: path.into(),
                msg: "parameter enumeration digest mismatch".into(),
            });
        }
        let mut offset = 0usize;
        for slot in model.params_mut() {
            let n = slot.len();
            let values: Vec<f32> = blob[offset * 4..(offset + n) * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            *slot = Tensor::leaf(slot.rows(), slot.cols(), values, true);
            offset += n;
        }
        if !model.params().iter().all(|(_, t)| t.values().iter().all(|v| v.is_finite())) {
            return Err(corrupt("non-finite parameter values"));
        }
    }
    Ok(Checkpoint { meta, model, blob_digest: digest })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssl::evaluate_batch;
    use crate::synth::SynthSpec;

    #[test]
    fn lr_schedule_endpoints_and_midpoint() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0.0), 3e-5);
        assert_eq!(cfg.lr_at(10.0), 3e-4);
        assert!((cfg.lr_at(5.0) - 1.65e-4).abs() < 1e-18);
        assert_eq!(cfg.lr_at(50.0), 3e-4);
    }

    #[test]
    fn lr_schedule_is_continuous_at_warmup_boundary() {
        let cfg = TrainConfig { cosine_decay: true, ..TrainConfig::default() };
        let just_before = cfg.lr_at(10.0 - 1e-9);
        assert!((just_before - cfg.lr_at(10.0)).abs() < 1e-10);
        // cosine tail ends near zero
        assert!(cfg.lr_at(100.0) < 1e-8);
    }

    fn tiny_model(seed: u64) -> SslModel<f64> {
        SslModel::init(&EncoderConfig::tiny(), seed).unwrap()
    }

    #[test]
    fn adam_zero_gradient_zero_decay_is_identity() {
        let mut model = tiny_model(0);
        let before = snapshot(&model);
        let mut opt = OptimState::new(&model, 0.0);
        adam_step(&mut model, &mut opt, 1e-3).unwrap();
        assert_eq!(snapshot(&model), before);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn adam_first_step_matches_scalar_recurrence_oracle() {
        // single scalar with g = 1 at t = 1: bias-corrected moments are both
        // ~1, so the delta is -lr / (1 + eps')
        let mut model = tiny_model(1);
        let lr = 1e-2;
        let before = model.params()[0].1.values()[0];
        model.params()[0].1.accumulate_grad(|g| g[0] += 1.0);
        let mut opt = OptimState::new(&model, 0.0);
        adam_step(&mut model, &mut opt, lr).unwrap();
        let after = model.params()[0].1.values()[0];

        // oracle: explicit Adam recurrence on one scalar
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let m = (1.0 - b1) * 1.0;
        let v: f64 = (1.0 - b2) * 1.0;
        let m_hat = m / (1.0 - b1);
        let v_hat: f64 = v / (1.0 - b2);
        let expect = before - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((after - expect).abs() < 1e-15);
        assert!((after - (before - lr)).abs() < 1e-9);
    }

    #[test]
    fn weight_decay_skips_exempt_parameters() {
        let mut model = tiny_model(2);
        let before = snapshot(&model);
        let metas: Vec<ParamMeta> = model.params().iter().map(|(m, _)| m.clone()).collect();
        let mut opt = OptimState::new(&model, 0.1);
        adam_step(&mut model, &mut opt, 1e-2).unwrap();
        let after = snapshot(&model);
        for (i, meta) in metas.iter().enumerate() {
            if meta.decay_exempt {
                assert_eq!(before[i], after[i], "{} should be exempt from decay", meta.name);
            } else {
                let changed = before[i]
                    .iter()
                    .zip(&after[i])
                    .any(|(a, b)| a != b && *a != 0.0);
                let has_nonzero = before[i].iter().any(|v| *v != 0.0);
                assert!(
                    !has_nonzero || changed,
                    "{} should shrink under decay",
                    meta.name
                );
            }
        }
    }

    fn small_cohort(seed: u64, n: usize) -> Vec<TimeseriesScan> {
        crate::synth::gen_cohort(&SynthSpec::standard(n, 8, 40, 2, 0.2, 0.5, seed)).unwrap()
    }

    fn fast_cfg(seed: u64, epochs: u64) -> TrainConfig {
        TrainConfig { epochs, warmup_epochs: 2.min(epochs), seed, ..TrainConfig::default() }
    }

    #[test]
    fn one_small_step_decreases_batch_loss() {
        let mut decreased = 0;
        for seed in 0..5u64 {
            let scans = small_cohort(seed, 4);
            let batch: Vec<&TimeseriesScan> = scans.iter().collect();
            let mut model = tiny_model(seed);
            let mut ema = EmaState::new(&model.encoder, 0.996).unwrap();
            let mut opt = OptimState::new(&model, 0.0);
            let step_cfg = StepConfig {
                drop_rate: 0.15,
                weights: LossWeights::default(),
                toggles: AblationToggles::default(),
                symmetric_lra: false,
                seed,
                epoch: 0,
                step: 0,
            };
            let before = pretrain_step(&model, &mut ema, &batch, &step_cfg).unwrap();
            adam_step(&mut model, &mut opt, 1e-4).unwrap();
            let after = evaluate_batch(&model, &ema.target, &batch, &step_cfg).unwrap();
            if after.total < before.total {
                decreased += 1;
            }
        }
        assert!(decreased >= 4, "loss decreased on only {decreased}/5 seeds");
    }

    #[test]
    fn twenty_epochs_reduce_mean_loss_on_most_seeds() {
        let mut improved = 0;
        for seed in 0..5u64 {
            let scans = small_cohort(100 + seed, 8);
            let cfg = TrainConfig { batch_size: 8, ..fast_cfg(seed, 20) };
            let outcome = pretrain::<f64>(&scans, &EncoderConfig::tiny(), &cfg).unwrap();
            assert!(outcome.diverged_at.is_none());
            let first = outcome.curve.first().unwrap().mean_loss;
            let last = outcome.curve.last().unwrap().mean_loss;
            if last < first {
                improved += 1;
            }
        }
        assert!(improved >= 4, "loss improved on only {improved}/5 seeds");
    }

    #[test]
    fn zero_epoch_run_is_untrained() {
        let scans = small_cohort(7, 4);
        let cfg = fast_cfg(3, 0);
        let outcome = pretrain::<f32>(&scans, &EncoderConfig::tiny(), &cfg).unwrap();
        assert!(outcome.curve.is_empty());
        assert_eq!(outcome.best_loss, None);
        assert_eq!(outcome.best_epoch, None);
    }

    #[test]
    fn rerun_with_same_seed_is_bitwise_identical() {
        let scans = small_cohort(11, 6);
        let cfg = TrainConfig { batch_size: 3, ..fast_cfg(5, 4) };
        let a = pretrain::<f32>(&scans, &EncoderConfig::tiny(), &cfg).unwrap();
        let b = pretrain::<f32>(&scans, &EncoderConfig::tiny(), &cfg).unwrap();
        for ((_, ta), (_, tb)) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(ta.values(), tb.values());
        }
        for (ra, rb) in a.curve.iter().zip(&b.curve) {
            assert_eq!(ra.mean_loss.to_bits(), rb.mean_loss.to_bits());
        }
    }

    #[test]
    fn best_checkpoint_loss_bounds_the_curve() {
        let scans = small_cohort(13, 6);
        let cfg = TrainConfig { batch_size: 6, ..fast_cfg(9, 10) };
        let outcome = pretrain::<f32>(&scans, &EncoderConfig::tiny(), &cfg).unwrap();
        let best = outcome.best_loss.unwrap();
        for row in &outcome.curve {
            assert!(best <= row.mean_loss + 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SslModel::<f32>::init(&EncoderConfig::tiny(), 21).unwrap();
        let cfg = TrainConfig::default();
        let digest =
            save_checkpoint(&model, &EncoderConfig::tiny(), &cfg, Some(3), Some(1.25), &path)
                .unwrap();
        let loaded = load_checkpoint(&path, Some(&EncoderConfig::tiny())).unwrap();
        assert_eq!(loaded.blob_digest, digest);
        assert_eq!(loaded.meta.status, "trained");
        assert_eq!(loaded.meta.epoch, Some(3));
        for ((_, a), (_, b)) in model.params().iter().zip(loaded.model.params().iter()) {
            assert_eq!(a.values(), b.values());
        }
    }

    #[test]
    fn truncated_checkpoint_is_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SslModel::<f32>::init(&EncoderConfig::tiny(), 22).unwrap();
        save_checkpoint(&model, &EncoderConfig::tiny(), &TrainConfig::default(), None, None, &path)
            .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_checkpoint(&path, None), Err(TrainError::Corrupt { .. })));
    }

    #[test]
    fn flipped_bit_fails_the_digest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = SslModel::<f32>::init(&EncoderConfig::tiny(), 23).unwrap();
        save_checkpoint(&model, &EncoderConfig::tiny(), &TrainConfig::default(), None, None, &path)
            .unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() - 100;
        bytes[mid] ^= 0x40;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path, None).unwrap_err();
        assert!(err.to_string().contains("digest"), "{err}");
    }

    #[test]
    fn cross_config_load_names_both_configs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let cfg_a = EncoderConfig::tiny();
        let cfg_b = EncoderConfig { v_rois: 4, n_heads: 2, ..EncoderConfig::tiny() };
        let model = SslModel::<f32>::init(&cfg_a, 24).unwrap();
        save_checkpoint(&model, &cfg_a, &TrainConfig::default(), None, None, &path).unwrap();
        let err = load_checkpoint(&path, Some(&cfg_b)).unwrap_err();
        let msg = err.to_string();
        assert!(matches!(&err, TrainError::Incompatible { .. }));
        assert!(msg.contains("v_rois: 8") && msg.contains("v_rois: 4"), "{msg}");
    }

    #[test]
    fn run_config_json_defaults_train_section() {
        let json = r#"{"encoder":{"v_rois":8,"n_layers":2,"n_heads":2,"ffn_dim":16,"readout_dim":4,"mask_ratio":0.25}}"#;
        let rc: RunConfig = serde_json::from_str(json).unwrap();
        assert_eq!(rc.train, TrainConfig::default());
        assert_eq!(rc.encoder, EncoderConfig::tiny());
    }
}
