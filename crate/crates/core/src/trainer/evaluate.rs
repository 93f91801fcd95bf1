use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::check_dims;
use crate::diffcore::{coefficient_of_variation, ParameterStore};
use crate::encoders::Sample;
use crate::error::{Error, Result};
use crate::metrics::{Metrics, ScoredBatch};
use crate::model::{MoeHealthModel, Prediction};
use crate::moe::Fusion;

/// Environment variable capping the number of inference threads.
pub const THREADS_ENV: &str = "MOE_HEALTH_THREADS";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub overall: Metrics,
    /// Metrics per availability pattern, keyed by canonical combination key.
    pub by_combination: BTreeMap<String, Metrics>,
    /// How often each expert was among the selected ones.
    pub usage: Vec<usize>,
    /// Coefficient of variation of `usage` (population standard deviation).
    pub usage_cv: f64,
}

fn inference_pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = std::env::var(THREADS_ENV).ok()?.trim().parse::<usize>().ok()?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .ok()
    })
    .as_ref()
}

/// Batched inference honouring the thread cap.
pub fn predict(
    model: &MoeHealthModel,
    store: &ParameterStore,
    samples: &[Sample],
    fusion: Fusion,
) -> Result<Vec<Prediction>> {
    match inference_pool() {
        Some(pool) => pool.install(|| model.predict(store, samples, fusion)),
        None => model.predict(store, samples, fusion),
    }
}

/// Selection counts per expert over a set of predictions.
pub fn usage_counts(predictions: &[Prediction], num_experts: usize) -> Vec<usize> {
    let mut counts = vec![0; num_experts];
    for p in predictions {
        for &j in &p.decision.selected {
            counts[j] += 1;
        }
    }
    counts
}

pub fn evaluate_model(
    model: &MoeHealthModel,
    store: &ParameterStore,
    fusion: Fusion,
    samples: &[Sample],
    threshold: f64,
) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    for s in samples {
        check_dims(s, &model.encoders.dims).map_err(|reason| Error::InvalidSample {
            id: s.id.clone(),
            reason: format!("incompatible with checkpoint: {reason}"),
        })?;
    }
    let preds = predict(model, store, samples, fusion)?;
    let scores: Vec<f64> = preds.iter().map(|p| p.probability).collect();
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    let overall = Metrics::compute(&ScoredBatch::new(scores.clone(), labels.clone())?, threshold);

    let mut groups: BTreeMap<String, (Vec<f64>, Vec<u8>)> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        let g = groups.entry(s.combination()?.key()).or_default();
        g.0.push(scores[i]);
        g.1.push(labels[i]);
    }
    let by_combination = groups
        .into_iter()
        .map(|(k, (s, l))| Ok((k, Metrics::compute(&ScoredBatch::new(s, l)?, threshold))))
        .collect::<Result<_>>()?;

    let usage = usage_counts(&preds, model.pool().len());
    let as_f64: Vec<f64> = usage.iter().map(|&c| c as f64).collect();
    Ok(EvalReport {
        overall,
        by_combination,
        usage_cv: coefficient_of_variation(&as_f64),
        usage,
    })
}

/// Metrics of a saved model on a split, overall and per availability pattern.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[Sample]) -> Result<EvalReport> {
    evaluate_model(
        &checkpoint.model(),
        &checkpoint.params,
        checkpoint.fusion(),
        samples,
        checkpoint.config.threshold,
    )
}
