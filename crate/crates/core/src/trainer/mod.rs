//! Expert pretraining, joint training with early stopping, ablations and
//! evaluation.

mod config;
mod early_stop;
mod evaluate;

pub use config::{apply_ablation, AblationMode, TrainConfig, Wiring};
pub use early_stop::{EarlyStopping, Verdict};
pub use evaluate::{evaluate, evaluate_model, predict, usage_counts, EvalReport, THREADS_ENV};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{info, warn};

use crate::checkpoint::Checkpoint;
use crate::data::Splits;
use crate::diffcore::{OptimizerState, ParameterStore, Tape};
use crate::encoders::{is_encoder_param, FeatureDims, Sample};
use crate::error::{Error, Result};
use crate::losses::record_objective;
use crate::metrics::{auroc, ScoredBatch};
use crate::model::MoeHealthModel;
use crate::moe::{ExpertPool, Fusion};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainRecord {
    pub combination: String,
    pub samples: usize,
    /// Mean batch BCE in the first and the last pretraining epoch.
    pub first_epoch_loss: f64,
    pub last_epoch_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean composite objective over the epoch's batches.
    pub train_loss: f64,
    pub train_task_loss: f64,
    pub val_auroc: Option<f64>,
    /// Validation selection counts per expert.
    pub val_usage: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub ablation: AblationMode,
    pub fusion: Fusion,
    pub config: TrainConfig,
    pub experts: Vec<String>,
    pub pretraining: Vec<PretrainRecord>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_auroc: Option<f64>,
    pub stopped_early: bool,
    pub validation: EvalReport,
    pub test: EvalReport,
}

/// Validation outcome of one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationScore {
    pub auroc: Option<f64>,
    pub usage: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

fn labels_of(batch: &[&Sample]) -> Vec<f64> {
    batch.iter().map(|s| f64::from(s.label)).collect()
}

/// Combination-specific pretraining: for each expert in pool order, trains
/// that expert and the shared encoders with BCE on samples of its pattern.
/// Gate and other experts are left untouched.
pub fn pretrain_experts<R: rand::Rng>(
    model: &MoeHealthModel,
    store: &mut ParameterStore,
    train: &[Sample],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<Vec<PretrainRecord>> {
    let pool = model.pool();
    let mut records = Vec::with_capacity(pool.len());
    for (index, &combo) in pool.combinations().iter().enumerate() {
        let subset: Vec<&Sample> = train
            .iter()
            .filter(|s| s.combination().map_or(false, |c| c == combo))
            .collect();
        let mut record = PretrainRecord {
            combination: combo.key(),
            samples: subset.len(),
            first_epoch_loss: f64::NAN,
            last_epoch_loss: f64::NAN,
        };
        if subset.is_empty() || config.pretrain_epochs == 0 {
            records.push(record);
            continue;
        }
        let prefix = pool.expert_prefix(index);
        let trainable = |name: &str| is_encoder_param(name) || name.starts_with(&prefix);
        let mut opt = OptimizerState::new(config.optimizer());
        let mut order: Vec<usize> = (0..subset.len()).collect();
        for epoch in 0..config.pretrain_epochs {
            order.shuffle(rng);
            let mut total = 0.0;
            let mut batches = 0usize;
            for chunk in order.chunks(config.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| subset[i]).collect();
                let mut tape = Tape::new();
                let pred = model.expert_forward(&mut tape, store, &batch, index)?;
                let loss = tape.bce(pred, &labels_of(&batch))?;
                let value = tape.value(loss).get(0, 0);
                if !value.is_finite() {
                    return Err(Error::NonFinite { op: "pretrain loss" });
                }
                tape.backward(loss, store)?;
                opt.step_filtered(store, trainable)?;
                total += value;
                batches += 1;
            }
            let mean = total / batches as f64;
            if epoch == 0 {
                record.first_epoch_loss = mean;
            }
            record.last_epoch_loss = mean;
        }
        info!(
            expert = %record.combination,
            samples = record.samples,
            first = record.first_epoch_loss,
            last = record.last_epoch_loss,
            "pretrained expert"
        );
        records.push(record);
    }
    Ok(records)
}

/// Validation AUROC and expert usage of the current parameters.
pub fn validate(
    model: &MoeHealthModel,
    store: &ParameterStore,
    fusion: Fusion,
    samples: &[Sample],
) -> Result<ValidationScore> {
    let preds = predict(model, store, samples, fusion)?;
    let scores = preds.iter().map(|p| p.probability).collect();
    let labels = samples.iter().map(|s| s.label).collect();
    Ok(ValidationScore {
        auroc: auroc(&ScoredBatch::new(scores, labels)?).ok(),
        usage: usage_counts(&preds, model.pool().len()),
    })
}

/// Trains with early stopping on validation AUROC and returns the report
/// together with the best-epoch checkpoint.
pub fn train(splits: &Splits, dims: FeatureDims, config: &TrainConfig) -> Result<TrainOutcome> {
    let val = &splits.val;
    train_with_validator(splits, dims, config, &mut |_, model, store, fusion| {
        validate(model, store, fusion, val)
    })
}

/// As [`train`], with the per-epoch validation score supplied by `validator`,
/// which receives the 1-based epoch number.
pub fn train_with_validator(
    splits: &Splits,
    dims: FeatureDims,
    config: &TrainConfig,
    validator: &mut dyn FnMut(usize, &MoeHealthModel, &ParameterStore, Fusion) -> Result<ValidationScore>,
) -> Result<TrainOutcome> {
    config.validate()?;
    for (name, part) in [("train", &splits.train), ("validation", &splits.val), ("test", &splits.test)] {
        if part.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
    }
    let wiring = apply_ablation(config);
    let pool = ExpertPool::from_samples(&splits.train)?;
    if let Fusion::TopK(k) = wiring.fusion {
        if k > pool.len() {
            warn!(k, experts = pool.len(), "k exceeds the number of experts; using all experts");
        }
    }
    let model = MoeHealthModel::new(wiring.model, dims, pool);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = model.init(&mut rng)?;
    info!(
        ablation = %config.ablation,
        experts = ?model.pool().keys(),
        parameters = store.num_values(),
        "starting training"
    );

    let pretraining = if wiring.pretrain {
        pretrain_experts(&model, &mut store, &splits.train, config, &mut rng)?
    } else {
        Vec::new()
    };

    let mut opt = OptimizerState::new(config.optimizer());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best_store: Option<ParameterStore> = None;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..splits.train.len()).collect();
    let alpha = config.alpha;

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng);
        let (mut total, mut task, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &splits.train[i]).collect();
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, &store, &batch, wiring.fusion)?;
            let out = &pass.out;
            let objective =
                record_objective(&mut tape, out.pred, &labels_of(&batch), out.gate, &out.decisions, alpha)?;
            let value = tape.value(objective.total).get(0, 0);
            if !value.is_finite() {
                return Err(Error::NonFinite { op: "training loss" });
            }
            total += value;
            task += tape.value(objective.task).get(0, 0);
            batches += 1;
            tape.backward(objective.total, &mut store)?;
            opt.step(&mut store)?;
        }

        let score = validator(epoch, &model, &store, wiring.fusion)?;
        let verdict = stopper.observe(epoch, score.auroc);
        let record = EpochRecord {
            epoch,
            train_loss: total / batches as f64,
            train_task_loss: task / batches as f64,
            val_auroc: score.auroc,
            val_usage: score.usage,
        };
        info!(
            epoch,
            loss = record.train_loss,
            val_auroc = ?record.val_auroc,
            ?verdict,
            "epoch finished"
        );
        epochs.push(record);
        match verdict {
            Verdict::Improved => best_store = Some(store.clone()),
            Verdict::Skipped => warn!(epoch, "validation AUROC undefined; epoch ignored for early stopping"),
            Verdict::Stop => {
                stopped_early = true;
                break;
            }
            Verdict::NoImprovement => {}
        }
    }

    let best = stopper.best();
    let store = match best_store {
        Some(s) => s,
        None => {
            warn!("no epoch had a defined validation AUROC; keeping final parameters");
            store
        }
    };
    let validation = evaluate_model(&model, &store, wiring.fusion, &splits.val, config.threshold)?;
    let test = evaluate_model(&model, &store, wiring.fusion, &splits.test, config.threshold)?;
    let checkpoint = Checkpoint {
        config: *config,
        dims,
        pool: model.pool().clone(),
        best_epoch: best.map(|b| b.0),
        params: store,
        meta: Value::Null,
    };
    let report = TrainReport {
        ablation: config.ablation,
        fusion: wiring.fusion,
        config: *config,
        experts: model.pool().keys(),
        pretraining,
        epochs,
        best_epoch: best.map(|b| b.0),
        best_val_auroc: best.map(|b| b.1),
        stopped_early,
        validation,
        test,
    };
    Ok(TrainOutcome { report, checkpoint })
}
