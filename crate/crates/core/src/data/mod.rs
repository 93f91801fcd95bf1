//! Synthetic multimodal data, dataset files and train/val/test splitting.

mod generate;
mod io;
mod split;

pub use generate::{default_combination_probabilities, generate, GeneratorConfig, NoiseScales};
pub use io::{
    check_dims, file_digest, load_dataset, read_dataset, to_ndjson, write_atomic, write_dataset, Dataset,
    DatasetHeader, DATASET_FORMAT, DATASET_VERSION,
};
pub use split::{split, SplitSpec, Splits};

use std::collections::BTreeMap;

use crate::encoders::{ModalityCombination, ModalityKind, Sample};

/// Samples that carry modality `m`, stripped of every other modality.
pub fn project(samples: &[Sample], m: ModalityKind) -> Vec<Sample> {
    let keep = ModalityCombination::new([m]).expect("single modality");
    samples.iter().filter_map(|s| s.restricted_to(keep)).collect()
}

/// Count of samples per availability pattern, keyed by canonical key.
pub fn combination_counts(samples: &[Sample]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for s in samples {
        if let Ok(c) = s.combination() {
            *counts.entry(c.key()).or_insert(0) += 1;
        }
    }
    counts
}

pub fn positive_rate(samples: &[Sample]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().filter(|s| s.label == 1).count() as f64 / samples.len() as f64
}
