//! SGD with momentum and weight decay under a step learning-rate schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autograd::{Gradients, Graph};
use crate::data::LabeledVideo;
use crate::error::{Error, Result};
use crate::evaluation::{self, EvalReport, Matching};
use crate::inference::{self, DetectionResult};
use crate::network::ScTransformer;
use crate::param::{ParamStore, Parameter};
use crate::supervision::{self, SoftLabels, SupervisionConfig};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub total_epochs: usize,
    /// Epochs at which the learning rate is divided by `drop_factor`.
    pub drop_epochs: Vec<usize>,
    pub drop_factor: f64,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            total_epochs: 20,
            drop_epochs: vec![6, 10],
            drop_factor: 10.0,
        }
    }
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::InvalidArgument("total_epochs must be >= 1".into()));
        }
        if self.drop_epochs.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("drop_epochs must be strictly ascending".into()));
        }
        if !(self.drop_factor >= 1.0 && self.drop_factor.is_finite()) {
            return Err(Error::InvalidArgument("drop_factor must be >= 1".into()));
        }
        Ok(())
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, base_lr: f64, schedule: &Schedule) -> f64 {
    let drops = schedule.drop_epochs.iter().filter(|&&e| epoch >= e).count();
    base_lr / schedule.drop_factor.powi(drops as i32)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            weight_decay: 1e-4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub velocity: Vec<Tensor>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore, config: &OptimizerConfig) -> Self {
        Self {
            velocity: params.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect(),
            lr: config.lr,
            momentum: config.momentum,
            weight_decay: config.weight_decay,
        }
    }
}

/// `v ← μ·v + g + λ·θ`, `θ ← θ − lr·v` for every parameter, using the
/// gradients stored in `params`. Nothing is updated if any gradient is
/// non-finite.
pub fn sgd_step(params: &mut ParamStore, state: &mut OptimizerState) -> Result<()> {
    if state.velocity.len() != params.len() {
        return Err(Error::shape(
            "sgd_step",
            format!("{} velocities for {} parameters", state.velocity.len(), params.len()),
        ));
    }
    for ((_, p), v) in params.iter().zip(&state.velocity) {
        if v.shape() != p.value.shape() {
            return Err(Error::shape("sgd_step", format!("velocity shape for {}", p.name)));
        }
        if let Some(k) = p.grad.data().iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}[{k}]", p.name)));
        }
    }
    let (lr, mu, wd) = (state.lr, state.momentum, state.weight_decay);
    for (p, v) in params.iter_mut().zip(&mut state.velocity) {
        let Parameter { value, grad, .. } = p;
        for ((x, g), vel) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(v.data_mut())
        {
            *vel = mu * *vel + g + wd * *x;
            *x -= lr * *vel;
        }
    }
    Ok(())
}

/// Peak-selection and matching settings used to score a validation set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationSettings {
    pub peak_radius: usize,
    pub threshold: f64,
    pub rel_dis: f64,
}

impl Default for ValidationSettings {
    fn default() -> Self {
        Self {
            peak_radius: inference::DEFAULT_PEAK_RADIUS,
            threshold: inference::DEFAULT_THRESHOLD,
            rel_dis: evaluation::DEFAULT_REL_DIS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub schedule: Schedule,
    pub supervision: SupervisionConfig,
    /// Videos per SGD step.
    pub batch_size: usize,
    pub seed: u64,
    pub validation: ValidationSettings,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: OptimizerConfig::default(),
            schedule: Schedule::default(),
            supervision: SupervisionConfig::default(),
            batch_size: 2,
            seed: 0,
            validation: ValidationSettings::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    pub lr: f64,
    pub val_f1: Option<f64>,
}

impl EpochReport {
    /// `epoch loss lr`
    pub fn to_line(&self) -> String {
        format!("{} {} {}", self.epoch, self.loss, self.lr)
    }
}

/// Soft targets for one video under the model's head layout.
pub fn labels_for(video: &LabeledVideo, model: &ScTransformer, sup: &SupervisionConfig) -> Result<SoftLabels> {
    let t = video.features.num_frames();
    let frames = video.boundary_frames();
    let binary = supervision::soften(&frames, t, sup.sigma, sup.radius())?;
    let categorical = if model.config().category_head {
        let cats = match &video.annotation.categories {
            Some(c) => c.clone(),
            None if frames.is_empty() => Vec::new(),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "{}: category head needs labeled boundaries",
                    video.annotation.video_id
                )))
            }
        };
        Some(supervision::soften_categorical(
            &frames,
            &cats,
            t,
            model.config().categories,
            sup.sigma,
            sup.radius(),
        )?)
    } else {
        None
    };
    Ok(SoftLabels { binary, categorical })
}

/// Loss and gradients of one video, scaled by `weight`.
pub fn video_gradients(
    model: &ScTransformer,
    features: &Tensor,
    labels: &SoftLabels,
    lambda: f64,
    weight: f64,
) -> Result<(f64, Gradients)> {
    let mut g = Graph::new();
    let out = model.forward(&mut g, features)?;
    let loss = model.loss(&mut g, &out, labels, lambda)?;
    let value = g.value(loss).item();
    let scaled = g.scale(loss, weight)?;
    Ok((value, g.backward(scaled)?))
}

/// Detections for a set of videos with the current parameters.
pub fn detect_all(
    model: &ScTransformer,
    videos: &[LabeledVideo],
    radius: usize,
    threshold: f64,
) -> Result<Vec<DetectionResult>> {
    videos
        .par_iter()
        .map(|v| {
            let s = inference::score_video(model, &v.features)?;
            Ok(inference::detect(&s, radius, threshold))
        })
        .collect()
}

pub fn evaluate_model(model: &ScTransformer, videos: &[LabeledVideo], settings: &ValidationSettings) -> Result<EvalReport> {
    let dets = detect_all(model, videos, settings.peak_radius, settings.threshold)?;
    let anns: Vec<_> = videos.iter().map(|v| v.annotation.clone()).collect();
    evaluation::evaluate(&dets, &anns, settings.rel_dis, Matching::Greedy)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub curve: Vec<EpochReport>,
}

/// Trains `model` in place. `on_epoch` runs after every epoch with the
/// updated model, e.g. to write a checkpoint.
///
/// Batches come from a seeded shuffle, and per-video gradients are reduced
/// in a fixed order, so a run is bit-reproducible. On a non-finite loss the
/// parameters are restored to the end of the last completed epoch and
/// [`Error::Diverged`] is returned.
pub fn train(
    model: &mut ScTransformer,
    train_set: &[LabeledVideo],
    validation: Option<&[LabeledVideo]>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport, &ScTransformer) -> Result<()>,
) -> Result<TrainOutcome> {
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    config.schedule.validate()?;
    config.supervision.validate()?;

    let labels = train_set
        .iter()
        .map(|v| labels_for(v, model, &config.supervision))
        .collect::<Result<Vec<_>>>()?;
    let mut state = OptimizerState::new(model.params(), &config.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut last_good = model.params().clone();
    let mut curve = Vec::with_capacity(config.schedule.total_epochs);
    let lambda = config.supervision.lambda;

    for epoch in 0..config.schedule.total_epochs {
        state.lr = lr_at(epoch, config.optimizer.lr, &config.schedule);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut steps = 0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            let weight = 1.0 / batch.len() as f64;
            let results = batch
                .par_iter()
                .map(|&i| video_gradients(model, &train_set[i].features.features, &labels[i], lambda, weight))
                .collect::<Result<Vec<_>>>()?;
            let loss: f64 = results.iter().map(|(l, _)| l * weight).sum();
            if !loss.is_finite() {
                model.params_mut().load_values_from(&last_good)?;
                return Err(Error::Diverged { epoch, step, loss });
            }
            let params = model.params_mut();
            params.zero_grad();
            for (_, grads) in &results {
                grads.accumulate_into(params);
            }
            if let Err(e) = sgd_step(params, &mut state) {
                params.load_values_from(&last_good)?;
                return Err(e);
            }
            total += loss;
            steps += 1;
        }
        let val_f1 = match validation {
            Some(v) if !v.is_empty() => Some(evaluate_model(model, v, &config.validation)?.f1),
            _ => None,
        };
        let report = EpochReport {
            epoch,
            loss: total / steps as f64,
            lr: state.lr,
            val_f1,
        };
        log::info!(
            "epoch {epoch} loss {:.5} lr {:e}{}",
            report.loss,
            report.lr,
            val_f1.map_or(String::new(), |f| format!(" val_f1 {f:.4}"))
        );
        last_good = model.params().clone();
        on_epoch(&report, model)?;
        curve.push(report);
    }
    Ok(TrainOutcome { curve })
}

pub fn format_curve(curve: &[EpochReport]) -> String {
    curve.iter().map(|r| r.to_line() + "\n").collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(values: &[f64], grads: &[f64]) -> ParamStore {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::vector(values.to_vec()));
        s.get_mut(id).grad = Tensor::vector(grads.to_vec());
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = store_with(&[1.0, -2.0], &[0.0, 0.0]);
        let cfg = OptimizerConfig { weight_decay: 0.0, ..OptimizerConfig::default() };
        let mut st = OptimizerState::new(&s, &cfg);
        sgd_step(&mut s, &mut st).unwrap();
        assert_eq!(s.get(crate::param::ParamId(0)).value.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_delta() {
        let (x, g) = ([0.5, -1.5], [0.2, 0.3]);
        let mut s = store_with(&x, &g);
        let cfg = OptimizerConfig::default();
        let mut st = OptimizerState::new(&s, &cfg);
        sgd_step(&mut s, &mut st).unwrap();
        let after = s.get(crate::param::ParamId(0)).value.data().to_vec();
        for i in 0..2 {
            let expected = x[i] - cfg.lr * (g[i] + cfg.weight_decay * x[i]);
            assert_eq!(after[i], expected);
        }
    }

    #[test]
    fn ten_steps_follow_scalar_recurrence() {
        let grads = [0.3, -0.1, 0.25, 0.0, 0.7, -0.4, 0.05, 0.2, -0.6, 0.1];
        let cfg = OptimizerConfig::default();
        let mut s = store_with(&[1.25], &[0.0]);
        let mut st = OptimizerState::new(&s, &cfg);
        let (mut x, mut v) = (1.25f64, 0.0f64);
        for &g in &grads {
            s.get_mut(crate::param::ParamId(0)).grad = Tensor::vector(vec![g]);
            sgd_step(&mut s, &mut st).unwrap();
            v = 0.9 * v + g + 1e-4 * x;
            x -= 1e-2 * v;
        }
        assert!((s.get(crate::param::ParamId(0)).value.item() - x).abs() < 1e-10);
    }

    #[test]
    fn non_finite_gradient_aborts_without_update() {
        let mut s = store_with(&[1.0, 2.0], &[0.1, f64::NAN]);
        let mut st = OptimizerState::new(&s, &OptimizerConfig::default());
        let err = sgd_step(&mut s, &mut st).unwrap_err();
        assert!(err.to_string().contains("w[1]"));
        assert_eq!(s.get(crate::param::ParamId(0)).value.data(), &[1.0, 2.0]);
    }

    #[test]
    fn schedule_values() {
        let s = Schedule::default();
        assert_eq!(lr_at(0, 1e-2, &s), 1e-2);
        assert_eq!(lr_at(5, 1e-2, &s), 1e-2);
        assert_eq!(lr_at(6, 1e-2, &s), 1e-3);
        assert_eq!(lr_at(9, 1e-2, &s), 1e-3);
        assert_eq!(lr_at(10, 1e-2, &s), 1e-4);
        assert_eq!(lr_at(19, 1e-2, &s), 1e-4);
        let sweep: Vec<f64> = (0..40).map(|e| lr_at(e, 1e-2, &s)).collect();
        assert!(sweep.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn schedule_validation() {
        assert!(Schedule { drop_epochs: vec![10, 6], ..Schedule::default() }.validate().is_err());
        assert!(Schedule { drop_epochs: vec![6, 6], ..Schedule::default() }.validate().is_err());
        assert!(Schedule { total_epochs: 3, ..Schedule::default() }.validate().is_ok());
        assert!(Schedule::default().validate().is_ok());
    }
}
