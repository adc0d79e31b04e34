//! Accuracy, harmonic mean, and the loss-landscape flatness probe.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bench::{Split, TaskBundle};
use crate::error::{Error, Result};
use crate::models::AdaptedModel;
use crate::params::ParamSet;
use crate::rng;

/// Base/novel evaluation record; accuracies are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub base_acc: f64,
    pub novel_acc: f64,
    pub hm: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_domain: Option<BTreeMap<String, f64>>,
    /// Zero-shot transfer accuracy per target task.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub transfer: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub flatness: Option<f64>,
}

impl Metrics {
    pub fn from_base_novel(base_acc: f64, novel_acc: f64) -> Result<Metrics> {
        Ok(Metrics {
            base_acc,
            novel_acc,
            hm: harmonic_mean(base_acc, novel_acc)?,
            per_domain: None,
            transfer: None,
            flatness: None,
        })
    }

    /// Copy with accuracies rounded to two decimals (table reporting).
    pub fn rounded(&self) -> Metrics {
        let r = |x: f64| (x * 100.0).round() / 100.0;
        Metrics {
            base_acc: r(self.base_acc),
            novel_acc: r(self.novel_acc),
            hm: r(self.hm),
            per_domain: self
                .per_domain
                .as_ref()
                .map(|m| m.iter().map(|(k, v)| (k.clone(), r(*v))).collect()),
            transfer: self
                .transfer
                .as_ref()
                .map(|m| m.iter().map(|(k, v)| (k.clone(), r(*v))).collect()),
            flatness: self.flatness,
        }
    }
}

/// Percent of argmax-correct predictions over a labeled set.
pub fn accuracy_of_predictions(preds: &[usize], labels: &[usize]) -> Result<f64> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::Contract(format!(
            "accuracy over {} predictions and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * correct as f64 / preds.len() as f64)
}

/// Accuracy of the adapted model on one bundle split. Evaluation is
/// read-only: neither the model nor the parameters are mutated.
pub fn accuracy(
    model: &AdaptedModel,
    params: &ParamSet,
    bundle: &TaskBundle,
    split: Split,
    use_alignnet: bool,
) -> Result<f64> {
    let set = bundle.split(split);
    if set.labels.is_empty() {
        return Err(Error::Contract(format!(
            "accuracy: split {split:?} is empty"
        )));
    }
    let texts = bundle.texts_for(split);
    let preds = model.predict(params, &set.images, texts, use_alignnet)?;
    accuracy_of_predictions(&preds, &set.labels)
}

/// HM = 2·b·n/(b + n); defined as 0 when both inputs are 0.
pub fn harmonic_mean(base: f64, novel: f64) -> Result<f64> {
    if base < 0.0 || novel < 0.0 {
        return Err(Error::Contract(format!(
            "harmonic_mean of negative accuracies ({base}, {novel})"
        )));
    }
    if base + novel == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * base * novel / (base + novel))
}

/// Expected loss increase under isotropic perturbations of radius ρ in the
/// flattened trainable space. θ is restored bit-exactly; trials whose loss
/// evaluation fails numerically are discarded and counted.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlatnessReport {
    pub mean_increase: f64,
    pub median_increase: f64,
    pub trials_used: usize,
    pub trials_discarded: usize,
}

pub fn flatness_probe<F>(
    loss_fn: &mut F,
    params: &mut ParamSet,
    rho: f64,
    trials: usize,
    seed: u64,
) -> Result<FlatnessReport>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if trials == 0 {
        return Err(Error::Contract(
            "flatness_probe requires trials >= 1".into(),
        ));
    }
    if rho < 0.0 {
        return Err(Error::Config(format!(
            "flatness rho must be >= 0, got {rho}"
        )));
    }
    let snapshot = params.flat();
    let baseline = loss_fn(params)?;
    if !baseline.is_finite() {
        return Err(Error::NonFinite {
            context: "flatness baseline loss".into(),
        });
    }
    let mut dir_rng = rng::stream(seed, "flatness");
    let p = params.flat_len();
    let mut increases = Vec::with_capacity(trials);
    let mut discarded = 0;
    for _ in 0..trials {
        let u = rng::unit_vector(&mut dir_rng, p);
        params.add_scaled(&u, rho)?;
        let result = loss_fn(params);
        params.set_flat(&snapshot)?;
        match result {
            Ok(l) if l.is_finite() => increases.push(l - baseline),
            _ => discarded += 1,
        }
    }
    debug_assert_eq!(params.flat(), snapshot);
    if increases.is_empty() {
        return Err(Error::NonFinite {
            context: "all flatness trials discarded".into(),
        });
    }
    let mean = increases.iter().sum::<f64>() / increases.len() as f64;
    let mut sorted = increases.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
    let median = sorted[sorted.len() / 2];
    Ok(FlatnessReport {
        mean_increase: mean,
        median_increase: median,
        trials_used: increases.len(),
        trials_discarded: discarded,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{dot, Tensor};

    #[test]
    fn hm_reproduces_reference_rows() {
        // (84.47, 74.22) -> 79.01 and (85.05, 76.74) -> 80.68.
        assert!((harmonic_mean(84.47, 74.22).unwrap() - 79.01).abs() <= 0.005);
        assert!((harmonic_mean(85.05, 76.74).unwrap() - 80.68).abs() <= 0.005);
    }

    #[test]
    fn hm_of_equal_inputs_is_identity() {
        for x in [1.0, 37.5, 99.99] {
            assert!((harmonic_mean(x, x).unwrap() - x).abs() < 1e-12);
        }
    }

    #[test]
    fn hm_edge_cases() {
        assert_eq!(harmonic_mean(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(harmonic_mean(0.0, 50.0).unwrap(), 0.0);
        assert!(harmonic_mean(-1.0, 5.0).is_err());
    }

    #[test]
    fn hm_bounds_hold_on_random_inputs() {
        let mut r = rng::stream(4, "hm");
        for _ in 0..1000 {
            use rand::Rng;
            let b: f64 = r.gen::<f64>() * 100.0;
            let n: f64 = r.gen::<f64>() * 100.0;
            let hm = harmonic_mean(b, n).unwrap();
            assert!(hm <= (b + n) / 2.0 + 1e-12);
            assert!(hm <= 2.0 * b.min(n) + 1e-12);
        }
    }

    #[test]
    fn accuracy_counting_matches_brute_force() {
        let preds = vec![0, 1, 2, 2, 1, 0, 0, 1, 2, 0, 1, 1, 0, 2, 2, 1, 0, 0, 1, 2];
        let labels = vec![0, 1, 2, 0, 1, 0, 1, 1, 2, 0, 2, 1, 0, 2, 1, 1, 0, 2, 1, 2];
        let mut brute = 0usize;
        for i in 0..20 {
            if preds[i] == labels[i] {
                brute += 1;
            }
        }
        let got = accuracy_of_predictions(&preds, &labels).unwrap();
        assert_eq!(got, 100.0 * brute as f64 / 20.0);
    }

    #[test]
    fn accuracy_rejects_empty() {
        assert!(accuracy_of_predictions(&[], &[]).is_err());
    }

    fn quad_params(theta: &[f64]) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(
            "theta",
            Tensor::new(vec![theta.len()], theta.to_vec()).unwrap(),
        )
        .unwrap();
        p
    }

    #[test]
    fn flatness_probe_zero_radius_is_zero() {
        let mut p = quad_params(&[0.3, -0.7, 1.1]);
        let mut loss = |p: &ParamSet| {
            let t = p.flat();
            Ok(0.5 * dot(&t, &t))
        };
        let r = flatness_probe(&mut loss, &mut p, 0.0, 5, 9).unwrap();
        assert!(r.mean_increase.abs() < 1e-12);
        assert_eq!(r.trials_used, 5);
    }

    #[test]
    fn flatness_probe_isotropic_quadratic_at_origin() {
        // L(θ) = ‖θ‖²/2 at θ = 0: L(ρu) − L(0) = ρ²/2 for every unit u.
        let mut p = quad_params(&[0.0; 8]);
        let mut loss = |p: &ParamSet| {
            let t = p.flat();
            Ok(0.5 * dot(&t, &t))
        };
        let rho = 0.3;
        let r = flatness_probe(&mut loss, &mut p, rho, 20, 11).unwrap();
        assert!((r.mean_increase - rho * rho / 2.0).abs() < 1e-12);
        assert_eq!(p.flat(), vec![0.0; 8]);
    }

    #[test]
    fn flatness_probe_discards_failing_trials() {
        let mut p = quad_params(&[1.0, 1.0]);
        let mut calls = 0usize;
        let mut flaky = |p: &ParamSet| {
            calls += 1;
            if calls == 3 {
                Err(Error::NonFinite {
                    context: "flaky".into(),
                })
            } else {
                let t = p.flat();
                Ok(0.5 * dot(&t, &t))
            }
        };
        let r = flatness_probe(&mut flaky, &mut p, 0.1, 5, 13).unwrap();
        assert_eq!(r.trials_used + r.trials_discarded, 5);
        assert_eq!(r.trials_discarded, 1);
        assert_eq!(p.flat(), vec![1.0, 1.0]);
    }

    #[test]
    fn metrics_rounding() {
        let m = Metrics::from_base_novel(84.4711, 74.2249).unwrap();
        let r = m.rounded();
        assert_eq!(r.base_acc, 84.47);
        assert_eq!(r.novel_acc, 74.22);
    }
}
