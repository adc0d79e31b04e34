//! Classification logits and the composite training loss: cross-entropy on
//! the tuned model plus a KL term against the frozen backbone's predictions,
//! which anchors the tuned predictive distribution to the zero-shot one.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::AdaptedModel;
use crate::params::{ParamSet, TapeBinding};
use crate::tape::{softmax_raw, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KlDirection {
    /// KL(frozen ‖ tuned): mass where the frozen model puts it.
    FrozenToTuned,
    /// KL(tuned ‖ frozen).
    TunedToFrozen,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight λ of the KL preservation term.
    pub kl_weight: f64,
    pub kl_direction: KlDirection,
    /// Logit scale; fixed, not learned. Desk default 10 (a CLIP-like 100 is
    /// too sharp for 16-dim toy embeddings).
    pub temperature: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kl_weight: 1.0,
            kl_direction: KlDirection::FrozenToTuned,
            temperature: 10.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kl_weight < 0.0 {
            return Err(Error::Config(format!(
                "loss.kl_weight must be >= 0, got {}",
                self.kl_weight
            )));
        }
        if self.temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(Error::Config(format!(
                "loss.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Temperature-scaled cosine-similarity logits, shape (b×c).
///
/// `f_txt` is either a shared (c×d) text matrix or an image-conditioned
/// (b×c×d) block from the text-adjustment head; embeddings are assumed
/// unit-norm along the last axis.
pub fn similarity_logits(
    tape: &mut Tape,
    f_img: NodeId,
    f_txt: NodeId,
    temperature: f64,
) -> Result<NodeId> {
    let si = tape.shape(f_img)?.to_vec();
    let st = tape.shape(f_txt)?.to_vec();
    if si.len() != 2 {
        return Err(Error::shape("similarity_logits", &si, &st));
    }
    let (b, d) = (si[0], si[1]);
    match st.len() {
        2 => {
            if st[1] != d {
                return Err(Error::shape("similarity_logits", &si, &st));
            }
            let tt = tape.transpose(f_txt)?;
            let sims = tape.matmul(f_img, tt)?;
            tape.scale(sims, temperature)
        }
        3 => {
            if st[0] != b || st[2] != d {
                return Err(Error::shape("similarity_logits", &si, &st));
            }
            let c = st[1];
            // Row-wise dot between image i (repeated per class) and its own
            // adjusted class embeddings.
            let rep = tape.repeat_rows(f_img, c)?;
            let txt_rows = tape.reshape(f_txt, vec![b * c, d])?;
            let prod = tape.mul(rep, txt_rows)?;
            let sums = tape.row_sum(prod)?;
            let mat = tape.reshape(sums, vec![b, c])?;
            tape.scale(mat, temperature)
        }
        _ => Err(Error::shape("similarity_logits", &si, &st)),
    }
}

/// Mean over the batch of −log softmax(logits)[label].
pub fn cross_entropy(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let shape = tape.shape(logits)?.to_vec();
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "cross_entropy expects (b×c) logits, got {shape:?}"
        )));
    }
    let b = shape[0];
    if labels.len() != b {
        return Err(Error::Data(format!(
            "cross_entropy: {} labels for batch of {b}",
            labels.len()
        )));
    }
    let lsm = tape.log_softmax(logits)?;
    let picked = tape.pick_per_row(lsm, labels)?;
    let total = tape.sum(picked)?;
    tape.scale(total, -1.0 / b as f64)
}

/// Mean KL divergence between the frozen backbone's predictive distribution
/// and the tuned one. The frozen logits are plain values: gradient flows
/// only through the tuned logits.
pub fn kl_preservation(
    tape: &mut Tape,
    tuned_logits: NodeId,
    frozen_logits: &Tensor,
    direction: KlDirection,
) -> Result<NodeId> {
    let shape = tape.shape(tuned_logits)?.to_vec();
    if shape != frozen_logits.shape() {
        return Err(Error::shape(
            "kl_preservation",
            &shape,
            frozen_logits.shape(),
        ));
    }
    if shape.len() != 2 {
        return Err(Error::Contract(format!(
            "kl_preservation expects (b×c) logits, got {shape:?}"
        )));
    }
    let (b, c) = (shape[0], shape[1]);
    let p_frozen = softmax_raw(frozen_logits.data(), c);
    let log_p_frozen: Vec<f64> = p_frozen.iter().map(|p| p.ln()).collect();
    let p_node = tape.constant(&Tensor::new(vec![b, c], p_frozen)?)?;
    let logp_node = tape.constant(&Tensor::new(vec![b, c], log_p_frozen)?)?;

    let kl_rows = match direction {
        KlDirection::FrozenToTuned => {
            // Σ p_f · (log p_f − log q)
            let log_q = tape.log_softmax(tuned_logits)?;
            let diff = tape.sub(logp_node, log_q)?;
            let terms = tape.mul(p_node, diff)?;
            tape.row_sum(terms)?
        }
        KlDirection::TunedToFrozen => {
            // Σ q · (log q − log p_f)
            let log_q = tape.log_softmax(tuned_logits)?;
            let q = tape.softmax(tuned_logits)?;
            let diff = tape.sub(log_q, logp_node)?;
            let terms = tape.mul(q, diff)?;
            tape.row_sum(terms)?
        }
    };
    let total = tape.sum(kl_rows)?;
    tape.scale(total, 1.0 / b as f64)
}

/// Per-term values of one composite loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub kl: f64,
}

/// A labeled batch: images with class indices into the text descriptor rows.
#[derive(Debug, Clone)]
pub struct Batch {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

/// The training objective over one batch: L = L_CE + λ·L_KL, differentiable
/// with respect to the trainable parameters. The frozen logits are computed
/// once per batch from the backbone (B = 0 path, no AlignNet) and enter the
/// tape as constants, so no gradient can reach frozen weights.
pub struct TrainingObjective<'a> {
    model: &'a AdaptedModel,
    class_texts: &'a Tensor,
    cfg: LossConfig,
    batch: Batch,
    frozen_logits: Tensor,
    /// Forward+backward pass counter (the cost contract of a regularized
    /// step is exactly two passes).
    pub passes: u64,
}

impl<'a> TrainingObjective<'a> {
    pub fn new(
        model: &'a AdaptedModel,
        class_texts: &'a Tensor,
        cfg: LossConfig,
        batch: Batch,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = class_texts.shape()[0];
        if let Some(&bad) = batch.labels.iter().find(|&&l| l >= c) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {c} classes"
            )));
        }
        let frozen_logits = model.encoder.frozen_logits(&batch.images, class_texts)?;
        Ok(TrainingObjective {
            model,
            class_texts,
            cfg,
            batch,
            frozen_logits,
            passes: 0,
        })
    }

    /// Swap in the next batch (frozen logits are recomputed).
    pub fn set_batch(&mut self, batch: Batch) -> Result<()> {
        self.frozen_logits = self
            .model
            .encoder
            .frozen_logits(&batch.images, self.class_texts)?;
        self.batch = batch;
        Ok(())
    }

    /// Loss value only (no backward pass); used by the flatness probe.
    pub fn loss_value(&mut self, params: &ParamSet) -> Result<LossBreakdown> {
        let (breakdown, _tape, _root) = self.forward(params)?;
        Ok(breakdown)
    }

    /// Full forward + backward, returning the loss terms and the flat
    /// gradient over `params`.
    pub fn loss_and_grad(&mut self, params: &ParamSet) -> Result<crate::optim::LossEval> {
        let (breakdown, mut tape, parts) = self.forward(params)?;
        let (root, binding) = parts;
        tape.backward(root)?;
        self.passes += 1;
        let grad = binding.read_grads(&tape, params)?;
        Ok(crate::optim::LossEval {
            loss: breakdown.total,
            grad,
            ce: breakdown.ce,
            kl: breakdown.kl,
        })
    }

    #[allow(clippy::type_complexity)]
    fn forward(&self, params: &ParamSet) -> Result<(LossBreakdown, Tape, (NodeId, TapeBinding))> {
        let mut tape = Tape::new();
        let binding = TapeBinding::bind(&mut tape, params)?;
        let logits = self.model.logits(
            &mut tape,
            &binding,
            &self.batch.images,
            self.class_texts,
            true,
        )?;
        let ce = cross_entropy(&mut tape, logits, &self.batch.labels)?;
        let (root, ce_v, kl_v) = if self.cfg.kl_weight > 0.0 {
            let kl = kl_preservation(
                &mut tape,
                logits,
                &self.frozen_logits,
                self.cfg.kl_direction,
            )?;
            let kl_scaled = tape.scale(kl, self.cfg.kl_weight)?;
            let total = tape.add(ce, kl_scaled)?;
            (total, tape.value(ce)?[0], tape.value(kl)?[0])
        } else {
            (ce, tape.value(ce)?[0], 0.0)
        };
        let total_v = tape.value(root)?[0];
        if !total_v.is_finite() {
            return Err(Error::NonFinite {
                context: "training loss".into(),
            });
        }
        Ok((
            LossBreakdown {
                total: total_v,
                ce: ce_v,
                kl: kl_v,
            },
            tape,
            (root, binding),
        ))
    }
}
