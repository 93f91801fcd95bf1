//! Full model: encoders, fused representation and the expert layer.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::{NodeId, ParameterStore, Tape};
use crate::encoders::{EncoderConfig, Encoders, FeatureDims, Sample};
use crate::error::{Error, Result};
use crate::moe::{ExpertPool, Fusion, MoeConfig, MoeLayer, MoeOutput, RoutingDecision};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub moe: MoeConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeHealthModel {
    pub encoders: Encoders,
    pub moe: MoeLayer,
}

#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub representation: NodeId,
    pub out: MoeOutput,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub probability: f64,
    pub decision: RoutingDecision,
}

/// Rows per forward pass during inference.
const INFERENCE_CHUNK: usize = 256;

impl MoeHealthModel {
    pub fn new(config: ModelConfig, dims: FeatureDims, pool: ExpertPool) -> Self {
        let encoders = Encoders::new(config.encoder, dims);
        let width = encoders.width();
        Self {
            encoders,
            moe: MoeLayer::new(config.moe, pool, width),
        }
    }

    pub fn config(&self) -> ModelConfig {
        ModelConfig {
            encoder: self.encoders.config,
            moe: self.moe.config,
        }
    }

    pub fn pool(&self) -> &ExpertPool {
        &self.moe.pool
    }

    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParameterStore> {
        let mut store = ParameterStore::new();
        self.encoders.register(&mut store, rng)?;
        self.moe.register(&mut store, rng)?;
        Ok(store)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[&Sample],
        fusion: Fusion,
    ) -> Result<ForwardPass> {
        let representation = self.encoders.assemble(tape, store, batch)?;
        let out = self.moe.forward(tape, store, representation, fusion)?;
        Ok(ForwardPass {
            representation,
            out,
        })
    }

    /// Output of expert `index` alone on a batch (`B x 1`).
    pub fn expert_forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        batch: &[&Sample],
        index: usize,
    ) -> Result<NodeId> {
        let r = self.encoders.assemble(tape, store, batch)?;
        self.moe.expert(tape, store, index, r)
    }

    /// Read-only inference, chunked and evaluated in parallel. Results are in
    /// input order and independent of the thread count.
    pub fn predict(
        &self,
        store: &ParameterStore,
        samples: &[Sample],
        fusion: Fusion,
    ) -> Result<Vec<Prediction>> {
        if samples.is_empty() {
            return Err(Error::Empty("predict"));
        }
        let chunks: Vec<Vec<Prediction>> = samples
            .par_chunks(INFERENCE_CHUNK)
            .map(|chunk| {
                let refs: Vec<&Sample> = chunk.iter().collect();
                let mut tape = Tape::new();
                let pass = self.forward(&mut tape, store, &refs, fusion)?;
                let probs = tape.value(pass.out.pred).data().to_vec();
                Ok(probs
                    .into_iter()
                    .zip(pass.out.decisions)
                    .map(|(probability, decision)| Prediction {
                        probability,
                        decision,
                    })
                    .collect())
            })
            .collect::<Result<_>>()?;
        Ok(chunks.into_iter().flatten().collect())
    }
}
