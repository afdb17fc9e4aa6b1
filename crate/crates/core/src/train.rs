//! Training loop: an optional cross-entropy pretraining phase, then the
//! warm / total schedule.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{Mode, RunConfig};
use crate::data::{Dataset, LocalizationSample};
use crate::error::{Error, Result};
use crate::evaluate::gt_loc;
use crate::eval::in_top_k;
use crate::losses::{LossWeights, Stage};
use crate::model::{clip_grad_norm, LearningRates, Model, Sgd};
use crate::objective::{sample_objective, Frozen};
use crate::tensor::Tape;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub stage: Stage,
    pub l_ce: f64,
    pub l_sim: f64,
    pub l_norm: f64,
    pub l_drop: f64,
    pub train_acc: f64,
    pub val_gt_loc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub epoch: usize,
    pub l_ce: f64,
    pub train_acc: f64,
    pub val_gt_loc: f64,
}

/// Progress event passed to the training callback.
#[derive(Clone, Copy, Debug)]
pub enum Progress<'a> {
    Pretrain(&'a PretrainRecord),
    Epoch(&'a EpochRecord),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub mode: Mode,
    pub seed: u64,
    pub pretrain: Vec<PretrainRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_gt_loc: f64,
}

pub struct TrainOutcome {
    pub model: Model,
    /// Checkpoint with the highest validation GT Loc (earliest on ties).
    pub best: Model,
    pub log: TrainLog,
}

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const PRETRAIN_STREAM: u64 = 3;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Runs one batch: accumulates averaged gradients and returns the summed
/// per-sample `[ce, sim, norm, drop]` and the number of correct predictions.
#[allow(clippy::too_many_arguments)]
fn run_batch(
    model: &mut Model,
    batch: &[&LocalizationSample],
    stage: Stage,
    weights: &LossWeights,
    rng: &mut ChaCha8Rng,
    epoch: usize,
    step: usize,
) -> Result<([f64; 4], usize)> {
    let scale = 1.0 / batch.len() as f64;
    let mut sums = [0.0; 4];
    let mut correct = 0;
    for sample in batch {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let x = tape.constant(sample.image_tensor());
        let terms = sample_objective(
            model,
            &mut tape,
            &bound,
            x,
            sample.label,
            stage,
            weights,
            &mut Frozen::default(),
            rng,
        )
        .map_err(|e| match e {
            Error::NonFinite { .. } => Error::DivergedLoss { epoch, step },
            other => other,
        })?;
        if !tape.scalar(terms.total).is_finite() {
            return Err(Error::DivergedLoss { epoch, step });
        }
        let grads = tape.backward(terms.total).map_err(|_| Error::DivergedLoss { epoch, step })?;
        model.accumulate_grads(&grads, &bound, scale);
        for (s, v) in sums.iter_mut().zip(terms.values(&tape)) {
            *s += v;
        }
        if in_top_k(tape.value(terms.logits), sample.label, 1) {
            correct += 1;
        }
    }
    Ok((sums, correct))
}

/// One pass over the training split in a fresh random order.
#[allow(clippy::too_many_arguments)]
fn run_epoch(
    model: &mut Model,
    sgd: &mut Sgd,
    data: &Dataset,
    order: &mut [usize],
    stage: Stage,
    weights: &LossWeights,
    cfg: &RunConfig,
    rates: LearningRates,
    shuffle_rng: &mut ChaCha8Rng,
    dropout_rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<([f64; 4], f64)> {
    order.shuffle(shuffle_rng);
    let mut sums = [0.0; 4];
    let mut correct = 0;
    for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let batch: Vec<&LocalizationSample> = chunk.iter().map(|&i| &data.train[i]).collect();
        let (s, c) = run_batch(model, &batch, stage, weights, dropout_rng, epoch, step)?;
        if cfg.optimizer.grad_clip > 0.0 {
            clip_grad_norm(model, cfg.optimizer.grad_clip);
        }
        sgd.step(model, rates)?;
        if model.params().iter().any(|p| p.value.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::DivergedLoss { epoch, step });
        }
        sums.iter_mut().zip(s).for_each(|(a, b)| *a += b);
        correct += c;
    }
    let n = data.train.len() as f64;
    Ok((sums.map(|v| v / n), correct as f64 / n))
}

fn check_data(cfg: &RunConfig, data: &Dataset) -> Result<()> {
    if data.spec.num_classes != cfg.model.num_classes {
        return Err(Error::config(
            "model.num_classes",
            format!(
                "dataset has {} classes, model expects {}",
                data.spec.num_classes, cfg.model.num_classes
            ),
        ));
    }
    if data.train.is_empty() {
        return Err(Error::config("data.train_per_class", "training split is empty"));
    }
    Ok(())
}

fn val_gt_loc(model: &Model, data: &Dataset, cfg: &RunConfig) -> Result<f64> {
    if data.val.is_empty() {
        Ok(0.0)
    } else {
        gt_loc(model, &data.val, &cfg.eval)
    }
}

/// Cross-entropy-only training at `cfg.pretrain.lr`. Identical in both modes,
/// so vanilla and full runs with the same seed start from the same weights.
pub fn pretrain(
    cfg: &RunConfig,
    data: &Dataset,
    mut model: Model,
    mut on_epoch: impl FnMut(&PretrainRecord),
) -> Result<(Model, Vec<PretrainRecord>)> {
    cfg.validate()?;
    check_data(cfg, data)?;
    let weights = LossWeights {
        lambda_sim: 0.0,
        lambda_norm: 0.0,
        lambda_drop: 0.0,
        ..cfg.loss.clone()
    };
    let mut sgd = Sgd::new(&model, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut shuffle_rng = stream(cfg.seed, PRETRAIN_STREAM);
    let mut no_dropout = stream(cfg.seed, PRETRAIN_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(cfg.pretrain.epochs);
    for epoch in 0..cfg.pretrain.epochs {
        let (sums, acc) = run_epoch(
            &mut model,
            &mut sgd,
            data,
            &mut order,
            Stage::Warm,
            &weights,
            cfg,
            LearningRates::uniform(cfg.pretrain.lr),
            &mut shuffle_rng,
            &mut no_dropout,
            epoch,
        )?;
        let record = PretrainRecord {
            epoch,
            l_ce: sums[0],
            train_acc: acc,
            val_gt_loc: val_gt_loc(&model, data, cfg)?,
        };
        on_epoch(&record);
        records.push(record);
    }
    Ok((model, records))
}

/// Trains from a fresh initialization: pretraining, then the main schedule.
pub fn train(cfg: &RunConfig, data: &Dataset, mut progress: impl FnMut(Progress)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let init = Model::init(cfg.model.clone(), cfg.seed)?;
    let (model, pre) = pretrain(cfg, data, init, |r| progress(Progress::Pretrain(r)))?;
    let mut out = train_from(cfg, data, model, |r| progress(Progress::Epoch(r)))?;
    out.log.pretrain = pre;
    Ok(out)
}

/// Runs the warm / total schedule starting from `init`, skipping pretraining.
pub fn train_from(
    cfg: &RunConfig,
    data: &Dataset,
    init: Model,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if init.config() != &cfg.model {
        return Err(Error::config("model", "initial weights do not match the model configuration"));
    }
    check_data(cfg, data)?;
    let mut model = init;
    let mut sgd = Sgd::new(&model, cfg.optimizer.momentum, cfg.optimizer.weight_decay);
    let mut shuffle_rng = stream(cfg.seed, SHUFFLE_STREAM);
    let mut dropout_rng = stream(cfg.seed, DROPOUT_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut records = Vec::with_capacity(cfg.epochs);
    let mut best = (model.clone(), 0usize, f64::NEG_INFINITY);

    let weights = cfg.effective_loss();
    for epoch in 0..cfg.epochs {
        let stage = Stage::for_epoch(epoch, cfg.loss.warm_epochs);
        let (sums, acc) = run_epoch(
            &mut model,
            &mut sgd,
            data,
            &mut order,
            stage,
            &weights,
            cfg,
            cfg.optimizer.rates(),
            &mut shuffle_rng,
            &mut dropout_rng,
            epoch,
        )?;
        let val = val_gt_loc(&model, data, cfg).map_err(|e| match e {
            Error::NonFinite { .. } => Error::DivergedLoss { epoch, step: data.train.len().div_ceil(cfg.batch_size) - 1 },
            other => other,
        })?;
        let record = EpochRecord {
            epoch,
            stage,
            l_ce: sums[0],
            l_sim: sums[1],
            l_norm: sums[2],
            l_drop: sums[3],
            train_acc: acc,
            val_gt_loc: val,
        };
        on_epoch(&record);
        if val > best.2 {
            best = (model.clone(), epoch, val);
        }
        records.push(record);
    }
    let (best_model, best_epoch, best_val) = best;
    Ok(TrainOutcome {
        model,
        best: best_model,
        log: TrainLog {
            mode: cfg.mode,
            seed: cfg.seed,
            pretrain: Vec::new(),
            epochs: records,
            best_epoch,
            best_val_gt_loc: best_val,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, DatasetSpec};
    use crate::model::{ConvBlock, ModelConfig};

    fn small_config(mode: Mode) -> (RunConfig, Dataset) {
        let data = DatasetSpec {
            num_classes: 2,
            train_per_class: 4,
            val_per_class: 1,
            test_per_class: 1,
            image_size: 32,
            marker_cell_px: 1,
            ..DatasetSpec::default()
        };
        let cfg = RunConfig {
            data: data.clone(),
            model: ModelConfig {
                input_size: 32,
                conv_blocks: vec![
                    ConvBlock { out_channels: 4, kernel: 3, stride: 2 },
                    ConvBlock { out_channels: 6, kernel: 3, stride: 2 },
                    ConvBlock { out_channels: 6, kernel: 1, stride: 1 },
                ],
                drop_layer_index: 1,
                num_classes: 2,
                feature_dim: 6,
                ..ModelConfig::default()
            },
            epochs: 3,
            batch_size: 3,
            mode,
            ..RunConfig::default()
        };
        cfg.loss.validate().unwrap();
        let mut cfg = cfg;
        cfg.loss.warm_epochs = 1;
        cfg.pretrain.epochs = 1;
        (cfg, generate(&data).unwrap())
    }

    #[test]
    fn deterministic_with_stage_switch() {
        let (cfg, data) = small_config(Mode::Full);
        let a = train(&cfg, &data, |_| {}).unwrap();
        let b = train(&cfg, &data, |_| {}).unwrap();
        assert_eq!(a.log, b.log);
        let stages: Vec<Stage> = a.log.epochs.iter().map(|r| r.stage).collect();
        assert_eq!(stages, vec![Stage::Warm, Stage::Total, Stage::Total]);
        assert_eq!(a.log.epochs[0].l_sim, 0.0);
        assert!(a.log.epochs[1].l_sim != 0.0);
        assert!(a.log.epochs[0].l_drop > 0.0);
    }

    #[test]
    fn vanilla_logs_zero_auxiliary_terms() {
        let (cfg, data) = small_config(Mode::Vanilla);
        let out = train(&cfg, &data, |_| {}).unwrap();
        for r in &out.log.epochs {
            assert_eq!((r.l_sim, r.l_norm, r.l_drop), (0.0, 0.0, 0.0));
            assert!(r.l_ce > 0.0);
        }
    }

    #[test]
    fn pretraining_is_shared_between_modes() {
        let (full, data) = small_config(Mode::Full);
        let (vanilla, _) = small_config(Mode::Vanilla);
        let a = train(&full, &data, |_| {}).unwrap();
        let b = train(&vanilla, &data, |_| {}).unwrap();
        assert_eq!(a.log.pretrain.len(), 1);
        assert_eq!(a.log.pretrain, b.log.pretrain);
        let init = Model::init(full.model.clone(), full.seed).unwrap();
        let (p1, _) = pretrain(&full, &data, init.clone(), |_| {}).unwrap();
        let (p2, _) = pretrain(&vanilla, &data, init, |_| {}).unwrap();
        for (x, y) in p1.params().iter().zip(p2.params()) {
            assert_eq!(x.value, y.value);
        }
    }

    #[test]
    fn train_from_rejects_other_architectures() {
        let (cfg, data) = small_config(Mode::Full);
        let other = Model::init(ModelConfig::default(), 0).unwrap();
        assert!(matches!(train_from(&cfg, &data, other, |_| {}), Err(Error::Config { .. })));
    }

    #[test]
    fn divergence_reports_context() {
        let (mut cfg, data) = small_config(Mode::Vanilla);
        cfg.optimizer.lr_former = 1e12;
        cfg.optimizer.lr_latter = 1e12;
        cfg.epochs = 5;
        match train(&cfg, &data, |_| {}) {
            Err(Error::DivergedLoss { epoch, .. }) => assert!(epoch < 5),
            Err(other) => panic!("unexpected error {other}"),
            Ok(_) => panic!("expected divergence"),
        }
    }
}
