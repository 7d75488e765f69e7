//! Mini-batch training loops for full pretraining and adapter fine-tuning.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::autograd::{softmax_xent, Tape, VarId};
use crate::data::Dataset;
use crate::error::{invalid, Error, Result};
use crate::nn::{AdapterSet, Bindings, Model, Trainable};
use crate::optim::{accuracy, clip_global_norm, step, OptimizerConfig, TrainState};
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Optional global-norm gradient clip.
    pub clip: Option<f64>,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be positive"));
        }
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(invalid("clip norm must be positive"));
            }
        }
        self.optimizer.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    /// 1-based; epoch 0 is the evaluation before any update.
    pub epoch: usize,
    /// Mean of the mini-batch losses seen during the epoch.
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochStats>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

/// Mean cross-entropy and accuracy over the whole dataset.
pub fn evaluate(model: &Model, adapters: Option<&AdapterSet>, data: &Dataset, batch_size: usize) -> Result<Evaluation> {
    if data.is_empty() || batch_size == 0 {
        return Err(invalid("evaluation needs samples and a positive batch size"));
    }
    let (mut loss, mut hits) = (0.0, 0.0);
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(batch_size) {
        let (x, y) = data.batch(chunk)?;
        let logits = model.logits(&x, adapters)?;
        let (l, _) = softmax_xent(&logits, &y)?;
        loss += l * chunk.len() as f64;
        hits += accuracy(&logits, &y)? * chunk.len() as f64;
    }
    let n = data.len() as f64;
    Ok(Evaluation { loss: loss / n, accuracy: hits / n })
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(derive_seed(seed, epoch as u64)).shuffle(&mut order);
    order
}

/// One pass over `train` in the epoch's shuffled order; `update` performs a
/// gradient step and returns the batch loss.
fn train_epoch(
    config: &TrainConfig,
    train: &Dataset,
    epoch: usize,
    state: &mut TrainState,
    log: &mut TrainLog,
    mut update: impl FnMut(&Tensor, &[usize], &mut TrainState) -> Result<f64>,
) -> Result<f64> {
    let order = epoch_order(train.len(), config.seed, epoch);
    let mut total = 0.0;
    let mut steps = 0;
    for chunk in order.chunks(config.batch_size) {
        let (x, y) = train.batch(chunk)?;
        let l = update(&x, &y, state)?;
        total += l;
        steps += 1;
        log.step_losses.push(l);
    }
    Ok(total / steps as f64)
}

fn gradient_step(
    tape: &Tape,
    loss: VarId,
    bindings: &Bindings,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<BTreeMap<String, Tensor>> {
    let grads = tape.backward(loss)?;
    let mut params = BTreeMap::new();
    let mut named = BTreeMap::new();
    for (name, &id) in bindings {
        params.insert(name.clone(), tape.value(id).clone());
        let g = grads.get(&id).ok_or_else(|| invalid(format!("no gradient for {name}")))?;
        named.insert(name.clone(), g.clone());
    }
    if let Some(c) = config.clip {
        clip_global_norm(&mut named, c)?;
    }
    step(state, &config.optimizer, &params, &named)
}

/// Trains every weight and bias of `model`.
pub fn pretrain(
    model: &mut Model,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainLog> {
    config.validate()?;
    let mut state = TrainState::new();
    let mut log = TrainLog::default();
    for epoch in 1..=config.epochs {
        let train_loss = train_epoch(config, train, epoch, &mut state, &mut log, |x, y, state| {
            let mut tape = Tape::new();
            let (logits, bindings) = model.forward(&mut tape, x, None, Trainable::All)?;
            let loss = tape.softmax_xent(logits, y)?;
            let updated = gradient_step(&tape, loss, &bindings, config, state)?;
            let mut all = model.named_tensors();
            all.extend(updated);
            model.load_named_tensors(&all)?;
            Ok(tape.value(loss).data()[0])
        })?;
        let tr = evaluate(model, None, train, config.batch_size)?;
        let va = evaluate(model, None, val, config.batch_size)?;
        let stats = EpochStats {
            epoch,
            train_loss,
            train_acc: tr.accuracy,
            val_loss: va.loss,
            val_acc: va.accuracy,
        };
        on_epoch(&stats);
        log.epochs.push(stats);
    }
    Ok(log)
}

/// Adapter fine-tuning advanced one epoch at a time, so that several runs
/// can be interleaved. Only the adapter factors change; the model and every
/// base tensor stay untouched.
pub struct Finetuner<'a> {
    model: &'a Model,
    adapters: AdapterSet,
    train: &'a Dataset,
    val: &'a Dataset,
    config: TrainConfig,
    state: TrainState,
    log: TrainLog,
}

impl<'a> Finetuner<'a> {
    pub fn new(model: &'a Model, adapters: AdapterSet, train: &'a Dataset, val: &'a Dataset, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if adapters.is_empty() {
            return Err(invalid("no adapters to fine-tune"));
        }
        if adapters.iter().any(|(_, a)| a.is_merged()) {
            return Err(invalid("cannot fine-tune merged adapters"));
        }
        Ok(Self {
            model,
            adapters,
            train,
            val,
            config,
            state: TrainState::new(),
            log: TrainLog::default(),
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.log.epochs.len()
    }

    pub fn is_done(&self) -> bool {
        self.epochs_done() >= self.config.epochs
    }

    pub fn adapters(&self) -> &AdapterSet {
        &self.adapters
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    /// Trains one epoch, then evaluates on both splits.
    pub fn run_epoch(&mut self) -> Result<EpochStats> {
        if self.is_done() {
            return Err(Error::State(format!("all {} epochs already run", self.config.epochs)));
        }
        let epoch = self.epochs_done() + 1;
        let (model, config, adapters) = (self.model, &self.config, &mut self.adapters);
        let train_loss = train_epoch(config, self.train, epoch, &mut self.state, &mut self.log, |x, y, state| {
            let mut tape = Tape::new();
            let (logits, bindings) = model.forward(&mut tape, x, Some(adapters), Trainable::Adapters)?;
            let loss = tape.softmax_xent(logits, y)?;
            let updated = gradient_step(&tape, loss, &bindings, config, state)?;
            adapters.set_factor_tensors(&updated)?;
            Ok(tape.value(loss).data()[0])
        })?;
        let tr = evaluate(model, Some(adapters), self.train, config.batch_size)?;
        let va = evaluate(model, Some(adapters), self.val, config.batch_size)?;
        let stats = EpochStats {
            epoch,
            train_loss,
            train_acc: tr.accuracy,
            val_loss: va.loss,
            val_acc: va.accuracy,
        };
        self.log.epochs.push(stats);
        Ok(stats)
    }

    pub fn into_parts(self) -> (AdapterSet, TrainLog) {
        (self.adapters, self.log)
    }
}

/// Runs every epoch of a [`Finetuner`] and writes the trained factors back
/// into `adapters`.
pub fn finetune(
    model: &Model,
    adapters: &mut AdapterSet,
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochStats),
) -> Result<TrainLog> {
    let mut ft = Finetuner::new(model, adapters.clone(), train, val, *config)?;
    while !ft.is_done() {
        let stats = ft.run_epoch()?;
        on_epoch(&stats);
    }
    let (trained, log) = ft.into_parts();
    *adapters = trained;
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, TaskSpec, Transform};
    use crate::nn::attach_adapters;
    use crate::optim::{AdamWConfig, SgdConfig};
    use crate::peft::{AdapterConfig, LiftMode};
    use crate::tensor::DType;
    use alloc::vec;

    fn cfg(epochs: usize, optimizer: OptimizerConfig) -> TrainConfig {
        TrainConfig { epochs, batch_size: 32, optimizer, clip: None, seed: 9 }
    }

    #[test]
    fn mlp_learns_bars() {
        let (train, val) = generate(&TaskSpec::bars(1), 256, 128).unwrap();
        let mut model = Model::mlp([1, 8, 8], 4, DType::F64, &mut Rng::new(3)).unwrap();
        let opt = OptimizerConfig::AdamW(AdamWConfig { lr: 1e-2, ..AdamWConfig::default() });
        let log = pretrain(&mut model, &train, &val, &cfg(8, opt), &mut |_| {}).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(last.val_acc >= 0.99, "{last:?}");
        assert_eq!(log.step_losses.len(), 8 * 8);
    }

    #[test]
    fn finetune_freezes_base_and_lowers_loss() {
        let (ptrain, pval) = generate(&TaskSpec::bars(1), 128, 64).unwrap();
        let mut model = Model::small_cnn([1, 8, 8], 4, DType::F64, &mut Rng::new(4)).unwrap();
        let sgd = OptimizerConfig::Sgd(SgdConfig { lr: 0.05, momentum: 0.9 });
        pretrain(&mut model, &ptrain, &pval, &cfg(2, sgd), &mut |_| {}).unwrap();
        model.freeze_all_base();
        let before = model.named_tensors();

        let spec = TaskSpec::bars(1).with_transforms(vec![Transform::Shift { rows: 2, cols: 1 }]);
        let (train, val) = generate(&spec, 128, 64).unwrap();
        for mode in [LiftMode::Additive, LiftMode::LieTaylor] {
            let ac = AdapterConfig::new(2, 4.0, mode).with_target("conv*,linear*");
            let (mut set, _) = attach_adapters(&model, &ac, &mut Rng::new(5)).unwrap();
            let opt = OptimizerConfig::AdamW(AdamWConfig { lr: 1e-2, ..AdamWConfig::default() });
            let mut seen = 0;
            let log = finetune(&model, &mut set, &train, &val, &cfg(13, opt), &mut |_| seen += 1).unwrap();
            assert_eq!(seen, 13);
            let s = &log.step_losses;
            let head: f64 = s[..10].iter().sum::<f64>() / 10.0;
            let tail: f64 = s[40..50].iter().sum::<f64>() / 10.0;
            assert!(tail < head, "{mode}: {head} -> {tail}");
            for (name, t) in &before {
                assert!(model.named_tensors()[name].bit_eq(t));
            }
            for (layer, ad) in set.iter() {
                let key = before.keys().find(|k| k.starts_with(&format!("{layer}.")) && !k.ends_with(".bias")).unwrap();
                assert!(ad.base.bit_eq(&before[key]));
            }
            assert!(set.iter().any(|(_, ad)| !ad.effective_weight().unwrap().bit_eq(&ad.base)));
        }
    }

    #[test]
    fn runs_are_reproducible() {
        let (train, val) = generate(&TaskSpec::bars(2), 64, 32).unwrap();
        let run_once = || {
            let mut model = Model::mlp([1, 8, 8], 4, DType::F64, &mut Rng::new(1)).unwrap();
            let opt = OptimizerConfig::AdamW(AdamWConfig::default());
            pretrain(&mut model, &train, &val, &cfg(2, opt), &mut |_| {}).unwrap()
        };
        let (a, b) = (run_once(), run_once());
        assert_eq!(
            a.step_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.step_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}
