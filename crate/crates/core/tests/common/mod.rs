#![allow(dead_code)]

use moe_health::data::{generate, split, GeneratorConfig, SplitSpec, Splits};
use moe_health::encoders::{EncoderConfig, FeatureDims, MissingMode, Sample};
use moe_health::model::ModelConfig;
use moe_health::moe::MoeConfig;
use moe_health::trainer::TrainConfig;

pub fn tiny_dims() -> FeatureDims {
    FeatureDims {
        static_dim: 3,
        series_len: 5,
        series_dim: 2,
        vocab_size: 20,
        image_dim: 4,
    }
}

pub fn tiny_samples(n: usize, seed: u64) -> Vec<Sample> {
    generate(&GeneratorConfig {
        n_samples: n,
        seed,
        dims: tiny_dims(),
        min_tokens: 2,
        max_tokens: 5,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

pub fn tiny_splits(n: usize, seed: u64) -> Splits {
    split(
        &tiny_samples(n, seed),
        &SplitSpec {
            seed,
            ..SplitSpec::default()
        },
    )
    .unwrap()
}

pub fn tiny_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            d_h: 4,
            rnn_hidden: 3,
            token_dim: 4,
            image_hidden: 4,
            missing: MissingMode::PerModality,
        },
        moe: MoeConfig {
            expert_hidden: 6,
            gate_hidden: 6,
        },
    }
}

pub fn tiny_config() -> TrainConfig {
    TrainConfig {
        batch_size: 16,
        max_epochs: 3,
        pretrain_epochs: 1,
        learning_rate: 1e-3,
        model: tiny_model(),
        ..TrainConfig::default()
    }
}
