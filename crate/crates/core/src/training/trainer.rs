use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{apply_draw, sample_draw, AugmentConfig, AugmentParams};
use super::ohem::OhemConfig;
use super::optim::{sgd_step, OptimizerState, PolySchedule};
use crate::data::metrics::argmax_channels;
use crate::data::{channel_mean, images_to_tensor, ConfusionMatrix, Dataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::network::{total_loss, LossBundle, SfanetModel};
use crate::nn::Bindings;
use crate::tensor::Tensor;
use crate::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub total_iters: usize,
    pub batch_size: usize,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub ohem: OhemConfig,
    pub augment: AugmentParams,
    pub seed: u64,
    /// Validate every this many iterations; 0 validates only at the end.
    pub val_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 0.01,
            total_iters: 2000,
            batch_size: 8,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 5e-4,
            ohem: OhemConfig::default(),
            augment: AugmentParams::default(),
            seed: 0,
            val_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 || self.batch_size == 0 {
            return Err(Error::invalid("train_config", "zero iterations or batch size"));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::invalid("train_config", format!("base lr {}", self.base_lr)));
        }
        if self.ohem.threshold.is_nan() || self.ohem.threshold <= 0.0 {
            return Err(Error::invalid("train_config", format!("ohem threshold {}", self.ohem.threshold)));
        }
        let negative = |v: f64| v.is_nan() || v < 0.0;
        if negative(self.power) || !(0.0..1.0).contains(&self.momentum) || negative(self.weight_decay) {
            return Err(Error::invalid(
                "train_config",
                format!("power {}, momentum {}, weight decay {}", self.power, self.momentum, self.weight_decay),
            ));
        }
        self.augment.validate()
    }

    pub fn schedule(&self) -> PolySchedule {
        PolySchedule {
            power: self.power,
            ..PolySchedule::new(self.base_lr, self.total_iters)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iter: usize,
    pub lr: f64,
    pub loss: LossBundle,
}

/// Everything needed to continue a run besides the model itself.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Iterations completed.
    pub iter: usize,
    pub optimizer: OptimizerState<f32>,
    pub mean: [f32; 3],
    pub history: Vec<IterRecord>,
    /// `(iteration, mIoU)` of every validation pass.
    pub validations: Vec<(usize, f64)>,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, mean: [f32; 3]) -> Self {
        TrainState {
            iter: 0,
            optimizer: OptimizerState::new(cfg.momentum, cfg.weight_decay),
            mean,
            history: Vec::new(),
            validations: Vec::new(),
        }
    }
}

pub enum Event<'a> {
    Iter(&'a IterRecord),
    Validation { iter: usize, matrix: &'a ConfusionMatrix },
}

pub trait Observer {
    fn on_event(&mut self, event: Event<'_>, model: &SfanetModel<f32>, state: &TrainState) -> Result<()>;
}

impl<F> Observer for F
where
    F: FnMut(Event<'_>, &SfanetModel<f32>, &TrainState) -> Result<()>,
{
    fn on_event(&mut self, event: Event<'_>, model: &SfanetModel<f32>, state: &TrainState) -> Result<()> {
        self(event, model, state)
    }
}

/// Channel mean over the whole dataset.
pub fn dataset_mean(ds: &dyn Dataset) -> Result<[f32; 3]> {
    let images = (0..ds.len()).map(|i| ds.get(i).map(|p| p.0)).collect::<Result<Vec<_>>>()?;
    channel_mean(&images)
}

/// Draws and augments the batch of iteration `iter`. The draw depends only
/// on the seed and the iteration, so resumed runs see the same batches.
pub fn sample_batch(ds: &dyn Dataset, aug: &AugmentConfig, batch: usize, seed: u64, iter: usize) -> Result<(Tensor<f32>, Vec<u8>)> {
    if ds.is_empty() {
        return Err(Error::Empty("training set".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(iter as u64);
    let mut images = Vec::with_capacity(batch * 3 * aug.crop_h * aug.crop_w);
    let mut labels = Vec::with_capacity(batch * aug.crop_h * aug.crop_w);
    for _ in 0..batch {
        let (img, lab) = ds.get(rng.random_range(0..ds.len()))?;
        let draw = sample_draw(aug, img.height, img.width, &mut rng);
        let (x, y) = apply_draw(&img, &lab, &draw, aug)?;
        images.extend(x);
        labels.extend(y);
    }
    Ok((Tensor::from_vec(vec![batch, 3, aug.crop_h, aug.crop_w], images)?, labels))
}

fn diverged(iter: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            iter,
            detail: format!("{op} produced a non-finite value"),
        },
        e => e,
    }
}

/// One forward, backward and update.
pub fn train_step(
    model: &mut SfanetModel<f32>,
    images: &Tensor<f32>,
    labels: &[u8],
    lr: f64,
    ohem: &OhemConfig,
    optimizer: &mut OptimizerState<f32>,
) -> Result<LossBundle> {
    if model.mode() != Mode::Train {
        return Err(Error::Mode("training step on a model in infer mode".into()));
    }
    let mut graph = Graph::new();
    let x = graph.constant(images.clone());
    let out = model.forward(&mut graph, x, Bindings::default())?;
    let lambda = model.config.lambda;
    let (root, bundle) = total_loss(&mut graph, out.decoder.logits, out.decoder.aux, labels, lambda, Some(ohem))?;
    if !bundle.total.is_finite() {
        return Err(Error::NonFinite { op: "total loss" });
    }
    graph.backward(root)?;
    model.store.zero_grads();
    model.store.absorb_grads(&mut graph, &out.bindings);
    sgd_step(&mut model.store, optimizer, lr)?;
    Ok(bundle)
}

/// Per-class confusion of the principal head over a dataset, evaluated in
/// infer mode. The model's mode is restored afterwards.
pub fn evaluate(model: &mut SfanetModel<f32>, ds: &dyn Dataset, mean: [f32; 3], batch: usize) -> Result<ConfusionMatrix> {
    if ds.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mode = model.mode();
    model.set_mode(Mode::Infer)?;
    let result = (|| {
        let mut cm = ConfusionMatrix::new(model.config.num_classes);
        let idx: Vec<usize> = (0..ds.len()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let pairs = chunk.iter().map(|&i| ds.get(i)).collect::<Result<Vec<_>>>()?;
            let imgs: Vec<_> = pairs.iter().map(|p| &p.0).collect();
            let pred = argmax_channels(&model.predict(&images_to_tensor(&imgs, mean)?)?)?;
            let gt: Vec<u8> = pairs.iter().flat_map(|p| p.1.data.iter().copied()).collect();
            cm.accumulate(&pred, &gt)?;
        }
        Ok(cm)
    })();
    model.set_mode(mode)?;
    result
}

/// Runs iterations `state.iter..cfg.total_iters`, reporting each iteration
/// and validation pass to `observer`.
pub fn train(
    model: &mut SfanetModel<f32>,
    train_set: &dyn Dataset,
    val_set: Option<&dyn Dataset>,
    cfg: &TrainConfig,
    state: &mut TrainState,
    observer: &mut dyn Observer,
) -> Result<()> {
    cfg.validate()?;
    model.set_mode(Mode::Train)?;
    let schedule = cfg.schedule();
    let aug = AugmentConfig {
        params: cfg.augment,
        crop_h: model.config.input_h,
        crop_w: model.config.input_w,
        mean: state.mean,
    };
    while state.iter < cfg.total_iters {
        let iter = state.iter;
        let lr = schedule.lr(iter)?;
        let (images, labels) = sample_batch(train_set, &aug, cfg.batch_size, cfg.seed, iter)?;
        let loss = train_step(model, &images, &labels, lr, &cfg.ohem, &mut state.optimizer)
            .map_err(|e| diverged(iter, e))?;
        let record = IterRecord { iter, lr, loss };
        state.history.push(record);
        state.iter += 1;
        observer.on_event(Event::Iter(&record), model, state)?;

        let done = state.iter == cfg.total_iters;
        if let Some(val) = val_set {
            if done || (cfg.val_every > 0 && state.iter.is_multiple_of(cfg.val_every)) {
                let cm = evaluate(model, val, state.mean, cfg.batch_size)?;
                state.validations.push((state.iter, cm.miou()?));
                observer.on_event(
                    Event::Validation {
                        iter: state.iter,
                        matrix: &cm,
                    },
                    model,
                    state,
                )?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{SceneSpec, SyntheticDataset};
    use crate::network::SfanetConfig;
    use crate::nn::ParamKind;

    fn setup() -> (SfanetModel<f32>, SyntheticDataset, TrainConfig) {
        let spec = SceneSpec {
            width: 32,
            height: 32,
            ..SceneSpec::default()
        };
        let model_cfg = SfanetConfig {
            width: 0.0625,
            input_h: 32,
            input_w: 32,
            ..SfanetConfig::default()
        };
        let cfg = TrainConfig {
            total_iters: 3,
            batch_size: 2,
            ..TrainConfig::default()
        };
        (
            SfanetModel::new(model_cfg, 4).unwrap(),
            SyntheticDataset::new(spec, 0, 6).unwrap(),
            cfg,
        )
    }

    fn trainable(m: &SfanetModel<f32>) -> Vec<Vec<f32>> {
        m.store
            .iter()
            .filter(|(_, e)| e.kind.trainable())
            .map(|(_, e)| e.tensor.data().to_vec())
            .collect()
    }

    fn noop(_: Event<'_>, _: &SfanetModel<f32>, _: &TrainState) -> Result<()> {
        Ok(())
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (mut model, ds, cfg) = setup();
        let cfg = TrainConfig { base_lr: 0.0, ..cfg };
        let before = trainable(&model);
        let mut state = TrainState::new(&cfg, [100.0; 3]);
        train(&mut model, &ds, None, &cfg, &mut state, &mut noop).unwrap();
        assert_eq!(state.history.len(), 3);
        assert_eq!(trainable(&model), before);
        // Running statistics still move.
        let stats_moved = model
            .store
            .iter()
            .any(|(_, e)| e.kind == ParamKind::BnRunningMean && e.tensor.data().iter().any(|&v| v != 0.0));
        assert!(stats_moved);
    }

    #[test]
    fn fixed_seed_reproduces_losses() {
        let run = || {
            let (mut model, ds, cfg) = setup();
            let mut state = TrainState::new(&cfg, [100.0; 3]);
            train(&mut model, &ds, Some(&ds), &cfg, &mut state, &mut noop).unwrap();
            (state.history.iter().map(|r| r.loss.total).collect::<Vec<_>>(), state.validations)
        };
        let a = run();
        assert_eq!(a, run());
        assert_eq!(a.1.len(), 1);
    }

    #[test]
    fn resumed_run_matches_straight_run() {
        let (mut a, ds, cfg) = setup();
        let mut sa = TrainState::new(&cfg, [100.0; 3]);
        train(&mut a, &ds, None, &cfg, &mut sa, &mut noop).unwrap();

        let (mut b, _, _) = setup();
        let mut sb = TrainState::new(&cfg, [100.0; 3]);
        let partial = TrainConfig { total_iters: 3, ..cfg.clone() };
        let mut stop_after_two = |e: Event<'_>, _: &SfanetModel<f32>, s: &TrainState| match e {
            Event::Iter(_) if s.iter == 2 => Err(Error::Empty("stop".into())),
            _ => Ok(()),
        };
        assert!(train(&mut b, &ds, None, &partial, &mut sb, &mut stop_after_two).is_err());
        assert_eq!(sb.iter, 2);
        train(&mut b, &ds, None, &cfg, &mut sb, &mut noop).unwrap();
        assert_eq!(trainable(&a), trainable(&b));
        assert_eq!(sa.history, sb.history);
    }

    #[test]
    fn nan_input_reports_divergence() {
        let (mut model, _, cfg) = setup();
        let images = Tensor::full(vec![1, 3, 32, 32], f32::NAN);
        let mut opt = OptimizerState::default();
        let err = train_step(&mut model, &images, &[0; 1024], 0.1, &cfg.ohem, &mut opt)
            .map_err(|e| diverged(7, e))
            .unwrap_err();
        assert!(matches!(err, Error::Diverged { iter: 7, .. }), "{err}");
    }
}
