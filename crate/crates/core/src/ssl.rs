//! The three pretraining objectives and their plumbing.
//!
//! Masked-ROI modeling drives a classification head (InfoNCE over the masked
//! patches of the minibatch) and a reconstruction head (mean squared error).
//! Latent alignment regularizes two augmented views of one scan: the online
//! encoder's predicted embedding must match the EMA target encoder's
//! embedding in cosine distance. The total objective is
//! `L = L_latent + lambda_c * L_c + lambda_r * L_r`.

use crate::connectome::{make_drop_plan, pfc_augment, round_half_even};
use crate::encoder::{EncoderConfig, EncoderError, EncoderState, ParamMeta, INIT_STD};
use crate::ingest::TimeseriesScan;
use crate::mat::{derive_seed, scan_seed};
use crate::numerics::{self as nx, backward, Real, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SslError {
    #[error("mask ratio {ratio} with {v} ROIs gives {p} masked indices; need 1 <= P < V")]
    BadMaskCount { ratio: f64, v: usize, p: usize },
    #[error("embedding norm below 1e-12; the representation has collapsed")]
    CollapsedEmbedding,
    #[error("EMA decay must lie in [0, 1], got {0}")]
    BadDecay(f64),
    #[error("EMA shape mismatch on {name}: online {online}, target {target}")]
    EmaShapeMismatch { name: String, online: String, target: String },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Numerics(#[from] nx::NumericsError),
    #[error(transparent)]
    Connectome(#[from] crate::connectome::ConnectomeError),
}

pub type Result<T> = std::result::Result<T, SslError>;

/// The set of masked ROI indices for one forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted, unique, each < V.
    pub indices: Vec<usize>,
    pub seed: u64,
}

/// Uniform subset of `round(mask_ratio * V)` ROI indices, without replacement.
pub fn sample_mask(v: usize, mask_ratio: f64, seed: u64) -> Result<MaskPlan> {
    let p = round_half_even(mask_ratio * v as f64);
    if p == 0 || p >= v {
        return Err(SslError::BadMaskCount { ratio: mask_ratio, v, p });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..v).collect();
    for k in 0..p {
        let j = rng.random_range(k..v);
        indices.swap(k, j);
    }
    let mut chosen = indices[..p].to_vec();
    chosen.sort_unstable();
    Ok(MaskPlan { indices: chosen, seed })
}

/// Two affine layers with GELU between (classification/reconstruction heads
/// and the alignment predictor).
pub struct Mlp<E: Real> {
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
}

impl<E: Real> Mlp<E> {
    pub fn init(in_dim: usize, hidden: usize, out_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gauss = |rows: usize, cols: usize| -> Vec<E> {
            (0..rows * cols)
                .map(|_| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    E::from_f64(g * INIT_STD)
                })
                .collect()
        };
        Mlp {
            w1: Tensor::leaf(in_dim, hidden, gauss(in_dim, hidden), true),
            b1: Tensor::leaf(1, hidden, vec![E::zero(); hidden], true),
            w2: Tensor::leaf(hidden, out_dim, gauss(hidden, out_dim), true),
            b2: Tensor::leaf(1, out_dim, vec![E::zero(); out_dim], true),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> nx::Result<Tensor<E>> {
        let h = nx::gelu(&nx::add(&nx::matmul(x, &self.w1)?, &self.b1)?)?;
        nx::add(&nx::matmul(&h, &self.w2)?, &self.b2)
    }

    pub fn params(&self, prefix: &str) -> Vec<(ParamMeta, &Tensor<E>)> {
        let meta = |name: String, t: &Tensor<E>| ParamMeta {
            name,
            rows: t.rows(),
            cols: t.cols(),
            decay_exempt: false,
        };
        vec![
            (meta(format!("{prefix}.w1"), &self.w1), &self.w1),
            (meta(format!("{prefix}.b1"), &self.b1), &self.b1),
            (meta(format!("{prefix}.w2"), &self.w2), &self.w2),
            (meta(format!("{prefix}.b2"), &self.b2), &self.b2),
        ]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Online model: encoder plus MRM heads and the alignment predictor. The MRM
/// pass shares the online encoder weights.
pub struct SslModel<E: Real> {
    pub encoder: EncoderState<E>,
    pub cls_head: Mlp<E>,
    pub rec_head: Mlp<E>,
    pub predictor: Mlp<E>,
}

impl<E: Real> SslModel<E> {
    pub fn init(config: &EncoderConfig, seed: u64) -> Result<Self> {
        let v = config.v_rois;
        let dv = config.embedding_len();
        Ok(SslModel {
            encoder: EncoderState::init(config, derive_seed(seed, "encoder", &[]))?,
            cls_head: Mlp::init(v, v, v, derive_seed(seed, "cls_head", &[])),
            rec_head: Mlp::init(v, v, v, derive_seed(seed, "rec_head", &[])),
            predictor: Mlp::init(dv, dv, dv, derive_seed(seed, "predictor", &[])),
        })
    }

    /// Canonical order: encoder, then cls head, rec head, predictor.
    pub fn params(&self) -> Vec<(ParamMeta, &Tensor<E>)> {
        let mut out = self.encoder.params();
        out.extend(self.cls_head.params("cls_head"));
        out.extend(self.rec_head.params("rec_head"));
        out.extend(self.predictor.params("predictor"));
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<E>> {
        let mut out = self.encoder.params_mut();
        out.extend(self.cls_head.params_mut());
        out.extend(self.rec_head.params_mut());
        out.extend(self.predictor.params_mut());
        out
    }

    pub fn predictor_forward(&self, z: &Tensor<E>) -> nx::Result<Tensor<E>> {
        self.predictor.forward(z)
    }
}

/// Per-batch MRM tensors: for each masked patch, the original connection
/// profile ("target"), the classification output and the reconstruction output.
pub struct MrmOutputs<E: Real> {
    /// `N x V`, constant.
    pub targets: Tensor<E>,
    /// `N x V` classification head outputs.
    pub cls: Tensor<E>,
    /// `N x V` reconstruction head outputs.
    pub rec: Tensor<E>,
    /// Number of masked patches in the batch.
    pub n: usize,
}

/// One alignment direction: online embedding, its prediction, and the target
/// embedding produced without gradients.
pub struct AlignmentPair<E: Real> {
    pub z: Tensor<E>,
    pub q: Tensor<E>,
    pub z_hat: Tensor<E>,
}

/// Balancing weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_c: 0.1, lambda_r: 5.0 }
    }
}

/// Which loss terms participate (ablation rows).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AblationToggles {
    pub latent: bool,
    pub mrm_cls: bool,
    pub mrm_rec: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        AblationToggles { latent: true, mrm_cls: true, mrm_rec: true }
    }
}

/// Row-wise concatenation, composed from transpose + column concat.
fn concat_rows<E: Real>(parts: &[Tensor<E>]) -> nx::Result<Tensor<E>> {
    let transposed: Vec<Tensor<E>> = parts.iter().map(nx::transpose).collect::<nx::Result<_>>()?;
    nx::transpose(&nx::concat_cols(&transposed)?)
}

/// InfoNCE over the masked patches: negatives for patch i are all N patches
/// of the minibatch. Computed via overflow-safe log-sum-exp.
pub fn loss_infonce<E: Real>(outputs: &MrmOutputs<E>) -> Result<Tensor<E>> {
    let n = outputs.n;
    let scores = nx::matmul(&outputs.cls, &nx::transpose(&outputs.targets)?)?;
    let lse_sum = nx::sum_all(&nx::row_logsumexp(&scores)?)?;
    let mut eye = vec![E::zero(); n * n];
    for i in 0..n {
        eye[i * n + i] = E::one();
    }
    let diag_sum = nx::sum_all(&nx::mul(&scores, &Tensor::constant(n, n, eye))?)?;
    Ok(nx::scale(&nx::sub(&lse_sum, &diag_sum)?, E::from_f64(1.0 / n as f64))?)
}

/// Mean over masked patches of the squared L2 reconstruction distance
/// (summed over the V components, no division by V).
pub fn loss_recon<E: Real>(outputs: &MrmOutputs<E>) -> Result<Tensor<E>> {
    let se = nx::squared_error(&outputs.rec, &outputs.targets)?;
    Ok(nx::scale(&se, E::from_f64(1.0 / outputs.n as f64))?)
}

/// `2 - 2 <q, z_hat> / (||q|| * ||z_hat||)`, in [0, 4]. Near-zero norms signal
/// a collapsed embedding and abort.
pub fn loss_latent<E: Real>(pair: &AlignmentPair<E>) -> Result<Tensor<E>> {
    let norm_sq = |t: &Tensor<E>| t.values().iter().fold(0.0, |acc, v| acc + v.into_f64() * v.into_f64());
    if norm_sq(&pair.q).sqrt() <= 1e-12 || norm_sq(&pair.z_hat).sqrt() <= 1e-12 {
        return Err(SslError::CollapsedEmbedding);
    }
    let dot = nx::sum_all(&nx::mul(&pair.q, &pair.z_hat)?)?;
    let denom = nx::mul(&nx::l2_norm(&pair.q)?, &nx::l2_norm(&pair.z_hat)?)?;
    let cos = nx::div(&dot, &denom)?;
    let two = Tensor::scalar(E::from_f64(2.0));
    Ok(nx::add(&two, &nx::scale(&cos, E::from_f64(-2.0))?)?)
}

/// Weighted total `L = L_latent + lambda_c * L_c + lambda_r * L_r`; absent
/// terms contribute zero.
pub fn total_loss<E: Real>(
    l_latent: Option<&Tensor<E>>,
    l_c: Option<&Tensor<E>>,
    l_r: Option<&Tensor<E>>,
    w: &LossWeights,
) -> Result<Tensor<E>> {
    let mut acc: Option<Tensor<E>> = l_latent.cloned();
    for (term, weight) in [(l_c, w.lambda_c), (l_r, w.lambda_r)] {
        if let Some(t) = term {
            let scaled = nx::scale(t, E::from_f64(weight))?;
            acc = Some(match acc {
                Some(a) => nx::add(&a, &scaled)?,
                None => scaled,
            });
        }
    }
    Ok(acc.unwrap_or_else(|| Tensor::scalar(E::zero())))
}

/// Target-network side of bootstrapped alignment: a gradient-free encoder
/// copy updated as `xi <- tau * xi + (1 - tau) * theta`.
pub struct EmaState<E: Real> {
    pub target: EncoderState<E>,
    pub tau: f64,
}

impl<E: Real> EmaState<E> {
    /// Target starts as an exact copy of the online encoder.
    pub fn new(online: &EncoderState<E>, tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(SslError::BadDecay(tau));
        }
        Ok(EmaState { target: online.detached_copy(), tau })
    }

    /// Elementwise convex blend of target toward the online encoder, in the
    /// delta form `xi + (1 - tau) * (theta - xi)` so that theta == xi is an
    /// exact fixed point. The predictor and MRM heads have no target-side
    /// counterpart.
    pub fn update(&mut self, online: &EncoderState<E>) -> Result<()> {
        let one_minus = E::from_f64(1.0 - self.tau);
        let online_params: Vec<(ParamMeta, &Tensor<E>)> = online.params();
        let mut blended: Vec<Vec<E>> = Vec::with_capacity(online_params.len());
        {
            let target_params = self.target.params();
            for ((meta, theta), (_, xi)) in online_params.iter().zip(target_params.iter()) {
                if theta.rows() != xi.rows() || theta.cols() != xi.cols() {
                    return Err(SslError::EmaShapeMismatch {
                        name: meta.name.clone(),
                        online: theta.shape_str(),
                        target: xi.shape_str(),
                    });
                }
                // endpoints are exact: tau = 0 copies theta, tau = 1 keeps xi
                blended.push(if self.tau == 0.0 {
                    theta.values().to_vec()
                } else {
                    xi.values()
                        .iter()
                        .zip(theta.values())
                        .map(|(&x, &t)| x + one_minus * (t - x))
                        .collect()
                });
            }
        }
        for (slot, values) in self.target.params_mut().into_iter().zip(blended) {
            *slot = Tensor::constant(slot.rows(), slot.cols(), values);
        }
        Ok(())
    }
}

/// Per-step loss statistics (plain values, for curves and checkpoints).
#[derive(Debug, Clone, Copy, Default)]
pub struct StepStats {
    pub total: f64,
    pub latent: f64,
    pub cls: f64,
    pub rec: f64,
    pub masked_patches: usize,
}

/// Everything one pretraining step needs besides the model and batch.
#[derive(Debug, Clone)]
pub struct StepConfig {
    pub drop_rate: f64,
    pub weights: LossWeights,
    pub toggles: AblationToggles,
    /// Evaluate the alignment in both view directions and average.
    pub symmetric_lra: bool,
    pub seed: u64,
    pub epoch: u64,
    pub step: u64,
}

/// The assembled objective of one batch, still attached to the tape.
pub struct BatchLosses<E: Real> {
    pub total: Tensor<E>,
    pub stats: StepStats,
}

/// Build the objective for a batch: two pFC views per scan, online(A) aligned
/// against target(B), and the masked pass on view A feeding both MRM heads.
pub fn batch_losses<E: Real>(
    model: &SslModel<E>,
    target: &EncoderState<E>,
    batch: &[&TimeseriesScan],
    cfg: &StepConfig,
) -> Result<BatchLosses<E>> {
    assert!(!batch.is_empty(), "batch_losses needs a non-empty batch");
    let enc_cfg = &model.encoder.config;
    let view_base = derive_seed(cfg.seed, "view", &[cfg.epoch, cfg.step]);
    let mask_base = derive_seed(cfg.seed, "mask", &[cfg.epoch, cfg.step]);
    let need_mrm = cfg.toggles.mrm_cls || cfg.toggles.mrm_rec;

    let mut latent_terms: Vec<Tensor<E>> = Vec::new();
    let mut mrm_token_rows: Vec<Tensor<E>> = Vec::new();
    let mut mrm_target_values: Vec<E> = Vec::new();
    let mut masked_patches = 0usize;

    for scan in batch {
        let t = scan.data.cols();
        let plan_a = make_drop_plan(t, cfg.drop_rate, scan_seed(view_base, &scan.subject_id, 0))?;
        let view_a = pfc_augment(&scan.data, &scan.subject_id, &plan_a)?;

        if cfg.toggles.latent {
            let plan_b =
                make_drop_plan(t, cfg.drop_rate, scan_seed(view_base, &scan.subject_id, 1))?;
            let view_b = pfc_augment(&scan.data, &scan.subject_id, &plan_b)?;

            let z = model.encoder.readout(&model.encoder.encode(&view_a, None, false)?)?;
            let q = model.predictor_forward(&z)?;
            let z_hat = target.readout(&target.encode(&view_b, None, false)?)?;
            latent_terms.push(loss_latent(&AlignmentPair { z, q, z_hat })?);

            if cfg.symmetric_lra {
                let z2 = model.encoder.readout(&model.encoder.encode(&view_b, None, false)?)?;
                let q2 = model.predictor_forward(&z2)?;
                let z_hat2 = target.readout(&target.encode(&view_a, None, false)?)?;
                let swapped = loss_latent(&AlignmentPair { z: z2, q: q2, z_hat: z_hat2 })?;
                let first = latent_terms.pop().expect("just pushed");
                let avg = nx::scale(&nx::add(&first, &swapped)?, E::from_f64(0.5))?;
                latent_terms.push(avg);
            }
        }

        if need_mrm {
            let plan = sample_mask(
                enc_cfg.v_rois,
                enc_cfg.mask_ratio,
                scan_seed(mask_base, &scan.subject_id, 0),
            )?;
            let out = model.encoder.encode(&view_a, Some(&plan), false)?;
            mrm_token_rows.push(nx::gather_rows(&out.tokens, &plan.indices)?);
            for &i in &plan.indices {
                for j in 0..enc_cfg.v_rois {
                    mrm_target_values.push(E::from_f64(view_a.matrix.get(i, j)));
                }
            }
            masked_patches += plan.indices.len();
        }
    }

    let latent = if latent_terms.is_empty() {
        None
    } else {
        let mut acc = latent_terms[0].clone();
        for term in &latent_terms[1..] {
            acc = nx::add(&acc, term)?;
        }
        Some(nx::scale(&acc, E::from_f64(1.0 / latent_terms.len() as f64))?)
    };

    let (l_c, l_r) = if need_mrm {
        let o_masked = concat_rows(&mrm_token_rows)?;
        let targets =
            Tensor::constant(masked_patches, enc_cfg.v_rois, std::mem::take(&mut mrm_target_values));
        let outputs = MrmOutputs {
            cls: model.cls_head.forward(&o_masked)?,
            rec: model.rec_head.forward(&o_masked)?,
            targets,
            n: masked_patches,
        };
        let c = if cfg.toggles.mrm_cls { Some(loss_infonce(&outputs)?) } else { None };
        let r = if cfg.toggles.mrm_rec { Some(loss_recon(&outputs)?) } else { None };
        (c, r)
    } else {
        (None, None)
    };

    let total = total_loss(latent.as_ref(), l_c.as_ref(), l_r.as_ref(), &cfg.weights)?;
    let stats = StepStats {
        total: total.value().into_f64(),
        latent: latent.as_ref().map_or(0.0, |t| t.value().into_f64()),
        cls: l_c.as_ref().map_or(0.0, |t| t.value().into_f64()),
        rec: l_r.as_ref().map_or(0.0, |t| t.value().into_f64()),
        masked_patches,
    };
    Ok(BatchLosses { total, stats })
}

/// Forward-only objective evaluation (no backward, no EMA movement).
pub fn evaluate_batch<E: Real>(
    model: &SslModel<E>,
    target: &EncoderState<E>,
    batch: &[&TimeseriesScan],
    cfg: &StepConfig,
) -> Result<StepStats> {
    Ok(batch_losses(model, target, batch, cfg)?.stats)
}

/// Check the analytic gradient of the complete objective (both MRM terms plus
/// latent alignment) against central finite differences, in 64-bit. The check
/// runs at a generic parameter point (the init plus Gaussian jitter): at the
/// raw sigma=0.02 init the attention logits are nearly uniform, which leaves
/// first derivatives of the query/key projections orders of magnitude below
/// their curvature and turns the relative error into a 0/0 comparison. The
/// target network is a distinct fixed constant so the latent term sits away
/// from its minimum.
pub fn objective_grad_check(
    enc_cfg: &crate::encoder::EncoderConfig,
    scans: &[&TimeseriesScan],
    cfg: &StepConfig,
    seed: u64,
    h: f64,
) -> Result<crate::numerics::GradCheckReport> {
    use crate::numerics::{grad_check, GradCheckParam, NumericsError};
    const JITTER_SCALE: f64 = 0.2;
    let model = SslModel::<f64>::init(enc_cfg, derive_seed(seed, "gc-online", &[]))?;
    let target = EncoderState::<f64>::init(enc_cfg, derive_seed(seed, "gc-target", &[]))?
        .detached_copy();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gc-jitter", &[]));
    let params: Vec<GradCheckParam> = model
        .params()
        .iter()
        .map(|(m, t)| {
            let values = t
                .values()
                .iter()
                .map(|&v| {
                    let g: f64 = StandardNormal.sample(&mut rng);
                    v + JITTER_SCALE * g
                })
                .collect();
            GradCheckParam::new(m.name.clone(), t.rows(), t.cols(), values)
        })
        .collect();
    let f = |leaves: &[crate::numerics::Tensor<f64>]| {
        let mut scratch = SslModel::<f64>::init(enc_cfg, 0)
            .map_err(|e| NumericsError::Invalid { op: "objective", msg: e.to_string() })?;
        for (slot, leaf) in scratch.params_mut().into_iter().zip(leaves) {
            *slot = leaf.clone();
        }
        batch_losses(&scratch, &target, scans, cfg)
            .map(|b| b.total)
            .map_err(|e| NumericsError::Invalid { op: "objective", msg: e.to_string() })
    };
    Ok(grad_check(f, &params, h)?)
}

/// One pretraining step: evaluate the objective, backpropagate into the
/// online parameters (gradients stay on the model for the optimizer), then
/// move the target by EMA.
pub fn pretrain_step<E: Real>(
    model: &SslModel<E>,
    ema: &mut EmaState<E>,
    batch: &[&TimeseriesScan],
    cfg: &StepConfig,
) -> Result<StepStats> {
    let losses = batch_losses(model, &ema.target, batch, cfg)?;
    backward(&losses.total)?;
    ema.update(&model.encoder)?;
    Ok(losses.stats)
}
