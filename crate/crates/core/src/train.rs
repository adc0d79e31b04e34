//! Few-shot adaptation loop over the 16-shot training split.

use serde::{Deserialize, Serialize};

use crate::bench::TaskBundle;
use crate::error::{Error, Result};
use crate::models::AdaptedModel;
use crate::objective::{Batch, LossConfig, TrainingObjective};
use crate::optim::{
    compute_gradient, perturbed_gradient, regularized_step, sam_perturbation, GradRegConfig,
    StepReport, UpdateKind, UpdateRule, Updater,
};
use crate::params::ParamSet;
use crate::rng;
use crate::tensor::{dot, l2_norm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub kind: UpdateKind,
    pub base_lr: f64,
    pub momentum: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            kind: UpdateKind::SgdMomentum,
            base_lr: 0.001,
            momentum: 0.9,
            epochs: 20,
            batch_size: 16,
        }
    }
}

impl TrainSettings {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("train.epochs must be >= 1".into()));
        }
        UpdateRule {
            kind: self.kind,
            base_lr: self.base_lr,
            momentum: self.momentum,
            total_steps: 1,
        }
        .validate()
    }
}

/// How gradients drive the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// One pass per step, update with g.
    Plain,
    /// Two passes, update with the raw perturbed gradient g'.
    SamOnly,
    /// Two passes, conflict filter and fusion (the regularized step).
    GradReg,
}

#[derive(Debug)]
pub struct AdaptOutcome {
    pub reports: Vec<StepReport>,
    /// Forward+backward passes consumed by the objective.
    pub passes: u64,
}

/// Run the adaptation loop on the bundle's few-shot training split.
/// Batch order is a pure function of `seed`, shared across modes so that
/// degenerate configurations (α = 0) are bit-comparable to the plain path.
#[allow(clippy::too_many_arguments)]
pub fn adapt(
    model: &AdaptedModel,
    params: &mut ParamSet,
    bundle: &TaskBundle,
    loss_cfg: LossConfig,
    gradreg: &GradRegConfig,
    train: &TrainSettings,
    mode: TrainMode,
    seed: u64,
) -> Result<AdaptOutcome> {
    train.validate()?;
    gradreg.validate()?;
    loss_cfg.validate()?;

    let set = &bundle.train;
    let n = set.labels.len();
    if n == 0 {
        return Err(Error::Contract("adapt: empty training split".into()));
    }
    let d = bundle.spec.d_in;
    let steps_per_epoch = n.div_ceil(train.batch_size);
    let total_steps = train.epochs * steps_per_epoch;
    let rule = UpdateRule {
        kind: train.kind,
        base_lr: train.base_lr,
        momentum: train.momentum,
        total_steps,
    };
    let mut updater = Updater::new(rule);
    let mut batch_rng = rng::stream(seed, "train-batches");

    let first_batch = Batch {
        images: Tensor::new(vec![1, d], set.images.data()[0..d].to_vec())?,
        labels: vec![set.labels[0]],
    };
    let mut objective = TrainingObjective::new(
        model,
        bundle.texts_for(crate::bench::Split::Train),
        loss_cfg,
        first_batch,
    )?;

    let mut reports = Vec::with_capacity(total_steps);
    let mut t = 0usize;
    for _ in 0..train.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        shuffle(&mut order, &mut batch_rng);
        for chunk in order.chunks(train.batch_size) {
            let mut xs = Vec::with_capacity(chunk.len() * d);
            let mut labels = Vec::with_capacity(chunk.len());
            for &i in chunk {
                xs.extend_from_slice(&set.images.data()[i * d..(i + 1) * d]);
                labels.push(set.labels[i]);
            }
            objective.set_batch(Batch {
                images: Tensor::new(vec![chunk.len(), d], xs)?,
                labels,
            })?;

            let report = {
                let mut loss_fn = |p: &ParamSet| objective.loss_and_grad(p);
                match mode {
                    TrainMode::GradReg => {
                        regularized_step(&mut loss_fn, params, gradreg, &mut updater, t)?
                    }
                    TrainMode::Plain => {
                        let eval = compute_gradient(&mut loss_fn, params)?;
                        let lr = updater.apply(params, &eval.grad, t)?;
                        StepReport {
                            step: t,
                            loss: eval.loss,
                            perturbed_loss: None,
                            dot_sign: 0,
                            dot: 0.0,
                            projected: false,
                            grad_norm: l2_norm(&eval.grad),
                            perturbed_grad_norm: 0.0,
                            fused_grad_norm: l2_norm(&eval.grad),
                            fused_dot: dot(&eval.grad, &eval.grad),
                            lr,
                            ce: eval.ce,
                            kl: eval.kl,
                            perturbation_skipped: false,
                        }
                    }
                    TrainMode::SamOnly => {
                        let base = compute_gradient(&mut loss_fn, params)?;
                        let (update_grad, perturbed_loss, skipped) =
                            match sam_perturbation(&base.grad, gradreg.rho)? {
                                Some(eps) => {
                                    let p = perturbed_gradient(&mut loss_fn, params, &eps)?;
                                    (p.grad, Some(p.loss), false)
                                }
                                None => (base.grad.clone(), None, true),
                            };
                        let d_gp = dot(&base.grad, &update_grad);
                        let lr = updater.apply(params, &update_grad, t)?;
                        StepReport {
                            step: t,
                            loss: base.loss,
                            perturbed_loss,
                            dot_sign: if d_gp > 0.0 {
                                1
                            } else if d_gp < 0.0 {
                                -1
                            } else {
                                0
                            },
                            dot: d_gp,
                            projected: false,
                            grad_norm: l2_norm(&base.grad),
                            perturbed_grad_norm: l2_norm(&update_grad),
                            fused_grad_norm: l2_norm(&update_grad),
                            fused_dot: d_gp,
                            lr,
                            ce: base.ce,
                            kl: base.kl,
                            perturbation_skipped: skipped,
                        }
                    }
                }
            };
            reports.push(report);
            t += 1;
        }
    }
    Ok(AdaptOutcome {
        reports,
        passes: objective.passes,
    })
}

fn shuffle(v: &mut [usize], rng: &mut rand_chacha::ChaCha8Rng) {
    use rand::Rng;
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bench::{generate_task, TaskSpec};
    use crate::models::{AdaptedModel, AlignNetSettings, DualEncoder, EncoderDims, LoraSettings};

    fn tiny_spec() -> TaskSpec {
        TaskSpec {
            n_pretrain_classes: 8,
            n_heldout: 2,
            pretrain_per_class: 2,
            n_base: 4,
            n_novel: 4,
            shots: 4,
            test_per_class: 5,
            ..TaskSpec::default()
        }
    }

    fn fixture(seed: u64) -> (AdaptedModel, ParamSet, crate::bench::TaskBundle) {
        let bundle = generate_task(&TaskSpec {
            seed,
            ..tiny_spec()
        })
        .unwrap();
        let backbone = DualEncoder::random_frozen(EncoderDims::default(), 10.0, seed);
        let mut params = ParamSet::new();
        let model = AdaptedModel::build(
            backbone,
            &LoraSettings::default(),
            Some(&AlignNetSettings::default()),
            &mut params,
            seed,
        )
        .unwrap();
        (model, params, bundle)
    }

    #[test]
    fn alpha_zero_trajectory_matches_plain_bit_exactly() {
        let (model, params0, bundle) = fixture(3);
        let train = TrainSettings {
            epochs: 2,
            ..TrainSettings::default()
        };

        let mut p1 = params0.clone();
        let cfg0 = GradRegConfig {
            alpha: 0.0,
            ..GradRegConfig::default()
        };
        adapt(
            &model,
            &mut p1,
            &bundle,
            LossConfig::default(),
            &cfg0,
            &train,
            TrainMode::GradReg,
            3,
        )
        .unwrap();

        let mut p2 = params0.clone();
        adapt(
            &model,
            &mut p2,
            &bundle,
            LossConfig::default(),
            &GradRegConfig::default(),
            &train,
            TrainMode::Plain,
            3,
        )
        .unwrap();

        assert_eq!(p1.flat(), p2.flat());
    }

    #[test]
    fn gradreg_costs_exactly_two_passes_per_step() {
        let (model, mut params, bundle) = fixture(5);
        let train = TrainSettings {
            epochs: 1,
            ..TrainSettings::default()
        };
        let outcome = adapt(
            &model,
            &mut params,
            &bundle,
            LossConfig::default(),
            &GradRegConfig::default(),
            &train,
            TrainMode::GradReg,
            5,
        )
        .unwrap();
        assert_eq!(outcome.passes, 2 * outcome.reports.len() as u64);
    }

    #[test]
    fn plain_costs_one_pass_per_step() {
        let (model, mut params, bundle) = fixture(7);
        let train = TrainSettings {
            epochs: 1,
            ..TrainSettings::default()
        };
        let outcome = adapt(
            &model,
            &mut params,
            &bundle,
            LossConfig::default(),
            &GradRegConfig::default(),
            &train,
            TrainMode::Plain,
            7,
        )
        .unwrap();
        assert_eq!(outcome.passes, outcome.reports.len() as u64);
    }

    #[test]
    fn identical_seeds_give_identical_trajectories() {
        let (model, params0, bundle) = fixture(11);
        let train = TrainSettings {
            epochs: 2,
            ..TrainSettings::default()
        };
        let run = || {
            let mut p = params0.clone();
            adapt(
                &model,
                &mut p,
                &bundle,
                LossConfig::default(),
                &GradRegConfig::default(),
                &train,
                TrainMode::GradReg,
                11,
            )
            .unwrap();
            p.flat()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn descent_guarantee_holds_per_step() {
        let (model, mut params, bundle) = fixture(13);
        let cfg = GradRegConfig::default();
        let train = TrainSettings {
            epochs: 2,
            ..TrainSettings::default()
        };
        let outcome = adapt(
            &model,
            &mut params,
            &bundle,
            LossConfig::default(),
            &cfg,
            &train,
            TrainMode::GradReg,
            13,
        )
        .unwrap();
        // ⟨g_f, g⟩ ≥ (1−α)‖g‖² − slack, via the report norms: g_f is a convex
        // combination, so check the projection contract indirectly through
        // the contraction property of the logged norms.
        for r in &outcome.reports {
            assert!(r.fused_grad_norm <= r.grad_norm.max(r.perturbed_grad_norm) + 1e-9);
        }
    }
}
