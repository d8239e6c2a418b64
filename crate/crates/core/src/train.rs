//! Adam optimization with early stopping.
//!
//! One training sample is one annotated slice: its normalized context stack
//! and its per-pixel labels. Batches average slice gradients in a fixed
//! order, epochs reshuffle with a seeded generator, and the validation score
//! is cross-entropy pooled over strong pixels only, so runs are bitwise
//! reproducible and scores are comparable across loss modes.

use crate::dataset::{context_volume, make_partial_annotation, Case};
use crate::error::{Error, Result};
use crate::folds::SliceRef;
use crate::loss::{attach_loss, strong_ce_terms, LossMode, PixelLabel};
use crate::model::Model;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

fn default_step_size() -> f64 {
    0.001
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.999
}

fn default_epsilon() -> f64 {
    1e-8
}

fn default_patience() -> usize {
    5
}

fn default_batch_size() -> usize {
    4
}

fn default_max_epochs() -> usize {
    50
}

/// Adam hyperparameters plus the epoch/batch budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    #[serde(default = "default_step_size")]
    pub step_size: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Annotated slices per optimizer step.
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            step_size: default_step_size(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            batch_size: default_batch_size(),
        }
    }
}

impl AdamHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) {
            return Err(Error::Config(format!(
                "step_size must be positive, got {}",
                self.step_size
            )));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!("{name} must be in (0,1), got {b}")));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_epochs, patience, and batch_size must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Optimizer state: first/second moments per parameter and the step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    pub t: usize,
}

impl AdamState {
    pub fn for_params(params: &[Tensor]) -> AdamState {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }
}

/// One Adam update over aligned parameter/gradient lists. The step counter
/// increments before the bias correction.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    state: &mut AdamState,
    hyper: &AdamHyper,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dimension(
            "shape",
            format!(
                "{} parameters vs {} gradients vs {} moment pairs",
                params.len(),
                grads.len(),
                state.m.len()
            ),
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::dimension(
                "shape",
                format!(
                    "parameter {i} has shape {:?} but its gradient {:?}",
                    p.shape(),
                    g.shape()
                ),
            ));
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    for i in 0..params.len() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = params[i].data_mut();
        let g = grads[i].data();
        for j in 0..p.len() {
            m[j] = hyper.beta1 * m[j] + (1.0 - hyper.beta1) * g[j];
            v[j] = hyper.beta2 * v[j] + (1.0 - hyper.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= hyper.step_size * m_hat / (v_hat.sqrt() + hyper.epsilon);
        }
    }
    Ok(())
}

/// Loss record of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

/// A finished training run: best-epoch parameters and the loss history.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub history: Vec<EpochStats>,
    /// 1-based epoch whose parameters `model` carries.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// A network-ready slice: its normalized context stack and its labels.
pub struct Sample {
    pub input: Tensor,
    pub labels: Vec<PixelLabel>,
}

/// Resolves slice references against their cases and builds model inputs.
pub fn prepare_samples(
    cases: &[Case],
    slices: &[SliceRef],
    context: usize,
) -> Result<Vec<Sample>> {
    let by_id: HashMap<&str, &Case> =
        cases.iter().map(|c| (c.case_id.as_str(), c)).collect();
    slices
        .iter()
        .map(|s| {
            let case = by_id.get(s.case_id.as_str()).ok_or_else(|| {
                Error::Contract(format!("slice refers to unknown case {}", s.case_id))
            })?;
            let input = context_volume(case, s.slice_index, context)?;
            let ann = make_partial_annotation(case, s.slice_index, s.chosen)?;
            Ok(Sample { input, labels: ann.labels })
        })
        .collect()
}

/// Pooled strong-pixel cross-entropy of a model over a slice set.
pub fn validation_loss(model: &Model, samples: &[Sample]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for sample in samples {
        let mut pass = model.forward(&sample.input)?;
        let probs = pass.graph.softmax_channels(pass.logits)?;
        let (s, n) = strong_ce_terms(&sample.labels, pass.graph.value(probs).data())?;
        sum += s;
        count += n;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Trains to convergence or the epoch budget and returns the parameters of
/// the best validation epoch. Bitwise deterministic in all inputs.
pub fn train(
    mut model: Model,
    cases: &[Case],
    train_slices: &[SliceRef],
    val_slices: &[SliceRef],
    mode: LossMode,
    hyper: &AdamHyper,
    seed: u64,
) -> Result<TrainOutcome> {
    hyper.validate()?;
    if train_slices.is_empty() || val_slices.is_empty() {
        return Err(Error::Config(
            "training needs non-empty train and validation slice sets".into(),
        ));
    }
    let context = model.config().context_slices;
    let train_samples = prepare_samples(cases, train_slices, context)?;
    let val_samples = prepare_samples(cases, val_slices, context)?;

    let mut state = AdamState::for_params(
        &model.parameters().iter().map(|(_, t)| t.clone()).collect::<Vec<_>>(),
    );
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut history = Vec::new();
    let mut best: Option<(usize, f64, Vec<(String, Tensor)>)> = None;
    let mut since_improvement = 0usize;

    for epoch in 1..=hyper.max_epochs {
        let mut order: Vec<usize> = (0..train_samples.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss_sum = 0.0;
        for batch in order.chunks(hyper.batch_size) {
            let mut acc: Vec<Tensor> = model
                .parameters()
                .iter()
                .map(|(_, t)| Tensor::zeros(t.shape()))
                .collect();
            let scale = 1.0 / batch.len() as f64;
            for &idx in batch {
                let sample = &train_samples[idx];
                let mut pass = model.forward(&sample.input)?;
                let loss = attach_loss(&mut pass.graph, pass.logits, &sample.labels, mode)?;
                let loss_value = pass.graph.value(loss).item()?;
                if !loss_value.is_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite loss at epoch {epoch}"
                    )));
                }
                epoch_loss_sum += loss_value;
                let grads = pass.graph.backward(loss)?;
                for (slot, &pid) in acc.iter_mut().zip(&pass.params) {
                    let g = grads.wrt(pid).expect("parameter gradient");
                    for (a, gv) in slot.data_mut().iter_mut().zip(g.data()) {
                        *a += gv * scale;
                    }
                }
            }
            let mut tensors: Vec<Tensor> =
                model.parameters().iter().map(|(_, t)| t.clone()).collect();
            adam_step(&mut tensors, &acc, &mut state, hyper)?;
            for ((_, dst), src) in model.parameters_mut().iter_mut().zip(tensors) {
                if !src.all_finite() {
                    return Err(Error::Diverged(format!(
                        "non-finite parameters at epoch {epoch}"
                    )));
                }
                *dst = src;
            }
        }

        let train_loss = epoch_loss_sum / train_samples.len() as f64;
        let val_loss = validation_loss(&model, &val_samples)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged(format!(
                "non-finite validation loss at epoch {epoch}"
            )));
        }
        history.push(EpochStats { epoch, train_loss, val_loss });

        if std::env::var_os("DLDSEG_PROBE").is_some() {
            let mut wrong = 0usize;
            let mut total = 0usize;
            for sample in &val_samples {
                let mut pass = model.forward(&sample.input)?;
                let pred = crate::eval::decode_argmax(pass.graph.value(pass.logits))?;
                for (p, l) in pred.iter().zip(&sample.labels) {
                    if let PixelLabel::Strong(c) = l {
                        total += 1;
                        if *p != *c {
                            wrong += 1;
                        }
                    }
                }
            }
            eprintln!(
                "PROBE epoch {epoch} train {train_loss:.4} valce {val_loss:.4} valerr {:.4}",
                wrong as f64 / total.max(1) as f64
            );
        }

        let improved = best.as_ref().map_or(true, |&(_, b, _)| val_loss < b);
        if improved {
            best = Some((epoch, val_loss, model.parameters().to_vec()));
            since_improvement = 0;
        } else {
            since_improvement += 1;
            if since_improvement >= hyper.patience {
                break;
            }
        }
    }

    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch ran");
    for (dst, src) in model.parameters_mut().iter_mut().zip(best_params) {
        *dst = src;
    }
    Ok(TrainOutcome { model, history, best_epoch, best_val_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{synth_dataset, GeneratorConfig, TextureParams};
    use crate::folds::annotated_slice_refs;
    use crate::model::ModelConfig;
    use rand::SeedableRng;

    #[test]
    fn first_adam_step_moves_by_the_step_size() {
        let mut params = vec![Tensor::scalar(0.0)];
        let grads = vec![Tensor::scalar(1.0)];
        let mut state = AdamState::for_params(&params);
        let hyper = AdamHyper::default();
        adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        assert_eq!(state.t, 1);
        assert!(
            (params[0].data()[0] + hyper.step_size).abs() < 1e-9,
            "{}",
            params[0].data()[0]
        );
    }

    #[test]
    fn zero_gradient_leaves_parameters_alone() {
        let mut params = vec![Tensor::scalar(0.7), Tensor::filled(&[3], 1.5)];
        let grads = vec![Tensor::scalar(0.0), Tensor::filled(&[3], 2.0)];
        let mut state = AdamState::for_params(&params);
        adam_step(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap();
        assert_eq!(params[0].data()[0], 0.7);
        assert!(params[1].data().iter().all(|&v| v != 1.5));
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut params = vec![Tensor::filled(&[2], 0.0)];
        let grads = vec![Tensor::filled(&[3], 0.0)];
        let mut state = AdamState::for_params(&params);
        let err = adam_step(&mut params, &grads, &mut state, &AdamHyper::default()).unwrap_err();
        assert!(matches!(err, Error::Dimension { .. }));
    }

    fn toy_setup(seed: u64) -> (Vec<crate::dataset::Case>, ModelConfig) {
        let cfg = GeneratorConfig {
            num_cases: 6,
            image_size: 32,
            context_slices: 3,
            slices_min: 4,
            slices_max: 6,
            class_slice_weights: [1.0, 0.0, 0.0, 0.0, 1.0],
            texture: TextureParams::default(),
            seed,
        };
        let cases = synth_dataset(&cfg).unwrap();
        let model_cfg = ModelConfig {
            context_slices: 3,
            image_size: 32,
            base_channels: 4,
            depth: 2,
            num_classes: 5,
        };
        (cases, model_cfg)
    }

    fn toy_outcome(mode: LossMode, seed: u64, max_epochs: usize) -> TrainOutcome {
        let (cases, model_cfg) = toy_setup(3);
        let slices = annotated_slice_refs(&cases);
        let split = slices.len() * 3 / 4;
        let (train_slices, val_slices) = (&slices[..split], &slices[split..]);
        let model = Model::build(
            model_cfg,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(100),
        )
        .unwrap();
        let hyper = AdamHyper { max_epochs, patience: 3, ..Default::default() };
        train(model, &cases, train_slices, val_slices, mode, &hyper, seed).unwrap()
    }

    #[test]
    fn single_epoch_budget_gives_single_history_entry() {
        let outcome = toy_outcome(LossMode::SupervisedOnly, 0, 1);
        assert_eq!(outcome.history.len(), 1);
        assert_eq!(outcome.best_epoch, 1);
    }

    #[test]
    fn separable_toy_improves_validation_loss() {
        let outcome = toy_outcome(LossMode::SupervisedOnly, 0, 6);
        let first = outcome.history.first().unwrap().val_loss;
        assert!(
            outcome.best_val_loss < first,
            "best {} vs first {first}",
            outcome.best_val_loss
        );
    }

    #[test]
    fn returned_model_matches_best_recorded_epoch() {
        let outcome = toy_outcome(LossMode::Proposed { lambda: 0.1 }, 1, 6);
        let min_val = outcome
            .history
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(outcome.best_val_loss, min_val);
        assert_eq!(
            outcome.history[outcome.best_epoch - 1].val_loss,
            outcome.best_val_loss
        );

        let (cases, _) = toy_setup(3);
        let slices = annotated_slice_refs(&cases);
        let split = slices.len() * 3 / 4;
        let val_samples =
            prepare_samples(&cases, &slices[split..], outcome.model.config().context_slices)
                .unwrap();
        let recomputed = validation_loss(&outcome.model, &val_samples).unwrap();
        assert!((recomputed - outcome.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let a = toy_outcome(LossMode::Proposed { lambda: 0.1 }, 5, 3);
        let b = toy_outcome(LossMode::Proposed { lambda: 0.1 }, 5, 3);
        assert_eq!(a.history, b.history);
        for ((na, ta), (nb, tb)) in a.model.parameters().iter().zip(b.model.parameters()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn lambda_zero_trajectory_matches_supervised_only() {
        let a = toy_outcome(LossMode::SupervisedOnly, 2, 3);
        let b = toy_outcome(LossMode::Proposed { lambda: 0.0 }, 2, 3);
        assert_eq!(a.history, b.history);
        for ((_, ta), (_, tb)) in a.model.parameters().iter().zip(b.model.parameters()) {
            assert_eq!(ta.data(), tb.data());
        }
    }

    #[test]
    fn empty_sets_are_configuration_errors() {
        let (cases, model_cfg) = toy_setup(3);
        let slices = annotated_slice_refs(&cases);
        let model = Model::build(
            model_cfg,
            &mut rand_chacha::ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let hyper = AdamHyper { max_epochs: 1, ..Default::default() };
        assert!(matches!(
            train(model.clone(), &cases, &[], &slices, LossMode::SupervisedOnly, &hyper, 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            train(model, &cases, &slices, &[], LossMode::SupervisedOnly, &hyper, 0),
            Err(Error::Config(_))
        ));
    }
}
