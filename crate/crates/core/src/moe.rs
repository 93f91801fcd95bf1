//! Combination-keyed expert pool, gating network and top-k fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{self, top_k_indices, Matrix, NodeId, ParameterStore, Tape};
use crate::encoders::{ModalityCombination, Sample};
use crate::error::{Error, Result};

/// Soft distribution over the experts for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDistribution(pub Vec<f64>);

/// Selected experts (descending gate order) and their renormalized weights.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    pub selected: Vec<usize>,
    pub weights: Vec<f64>,
}

/// How expert outputs are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Gate-weighted top-k experts.
    TopK(usize),
    /// Equal weights over every expert; the gate is not evaluated.
    Uniform,
}

/// Ordered experts, one per availability pattern seen in training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<ModalityCombination>", into = "Vec<ModalityCombination>")]
pub struct ExpertPool {
    combinations: Vec<ModalityCombination>,
}

impl TryFrom<Vec<ModalityCombination>> for ExpertPool {
    type Error = Error;

    fn try_from(combinations: Vec<ModalityCombination>) -> Result<Self> {
        Self::new(combinations)
    }
}

impl From<ExpertPool> for Vec<ModalityCombination> {
    fn from(pool: ExpertPool) -> Self {
        pool.combinations
    }
}

impl ExpertPool {
    pub fn new(combinations: Vec<ModalityCombination>) -> Result<Self> {
        if combinations.is_empty() {
            return Err(Error::Empty("expert pool"));
        }
        let mut keys: Vec<String> = combinations.iter().map(|c| c.key()).collect();
        keys.sort();
        keys.dedup();
        if keys.len() != combinations.len() {
            return Err(Error::Config("expert pool keys must be unique".into()));
        }
        Ok(Self { combinations })
    }

    pub fn from_samples(samples: &[Sample]) -> Result<Self> {
        Self::new(enumerate_combinations(samples)?)
    }

    pub fn len(&self) -> usize {
        self.combinations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.combinations.is_empty()
    }

    pub fn combinations(&self) -> &[ModalityCombination] {
        &self.combinations
    }

    pub fn keys(&self) -> Vec<String> {
        self.combinations.iter().map(|c| c.key()).collect()
    }

    pub fn index_of(&self, combo: ModalityCombination) -> Option<usize> {
        self.combinations.iter().position(|&c| c == combo)
    }

    pub fn expert_prefix(&self, index: usize) -> String {
        format!("expert.{}.", self.combinations[index].key())
    }
}

/// Distinct availability patterns of `samples`, sorted by canonical key.
pub fn enumerate_combinations(samples: &[Sample]) -> Result<Vec<ModalityCombination>> {
    if samples.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut combos = samples
        .iter()
        .map(Sample::combination)
        .collect::<Result<Vec<_>>>()?;
    combos.sort();
    combos.dedup();
    Ok(combos)
}

/// Picks the `min(k, K)` largest gate values (ties toward the smaller index)
/// and renormalizes them to sum to one.
pub fn route_topk(g: &GateDistribution, k: usize) -> RoutingDecision {
    let selected = top_k_indices(&g.0, k.max(1));
    let total: f64 = selected.iter().map(|&j| g.0[j]).sum();
    let weights = selected.iter().map(|&j| g.0[j] / total).collect();
    RoutingDecision { selected, weights }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MoeConfig {
    pub expert_hidden: usize,
    pub gate_hidden: usize,
}

impl Default for MoeConfig {
    fn default() -> Self {
        Self {
            expert_hidden: 64,
            gate_hidden: 64,
        }
    }
}

/// Tape handles produced by one fused forward pass.
#[derive(Debug, Clone)]
pub struct MoeOutput {
    /// `B x 1` fused probability.
    pub pred: NodeId,
    /// `B x K` gate distribution; absent under uniform fusion.
    pub gate: Option<NodeId>,
    /// `B x K` individual expert probabilities.
    pub experts: NodeId,
    pub decisions: Vec<RoutingDecision>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeLayer {
    pub config: MoeConfig,
    pub pool: ExpertPool,
    pub input_width: usize,
}

impl MoeLayer {
    pub fn new(config: MoeConfig, pool: ExpertPool, input_width: usize) -> Self {
        Self {
            config,
            pool,
            input_width,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.pool.len()
    }

    pub fn register<R: Rng + ?Sized>(&self, store: &mut ParameterStore, rng: &mut R) -> Result<()> {
        let (w, h) = (self.input_width, self.config.expert_hidden);
        for i in 0..self.pool.len() {
            let p = self.pool.expert_prefix(i);
            store.glorot(&format!("{p}l1.w"), vec![h, w], rng)?;
            store.zeros(&format!("{p}l1.b"), vec![h])?;
            store.glorot(&format!("{p}l2.w"), vec![h, h], rng)?;
            store.zeros(&format!("{p}l2.b"), vec![h])?;
            store.glorot(&format!("{p}out.w"), vec![1, h], rng)?;
            store.zeros(&format!("{p}out.b"), vec![1])?;
        }
        let g = self.config.gate_hidden;
        store.glorot("gate.hidden.w", vec![g, w], rng)?;
        store.zeros("gate.hidden.b", vec![g])?;
        store.glorot("gate.out.w", vec![self.pool.len(), g], rng)?;
        store.zeros("gate.out.b", vec![self.pool.len()])?;
        Ok(())
    }

    fn check_width(&self, tape: &Tape, r: NodeId) -> Result<()> {
        let v = tape.value(r);
        if v.cols() != self.input_width {
            return Err(Error::shape("moe input", &[self.input_width], &[v.cols()]));
        }
        Ok(())
    }

    /// `B x 1` output of expert `index`, strictly inside (0, 1).
    pub fn expert(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        index: usize,
        r: NodeId,
    ) -> Result<NodeId> {
        self.check_width(tape, r)?;
        let p = self.pool.expert_prefix(index);
        let mut h = r;
        for layer in ["l1", "l2"] {
            let w = tape.param_named(store, &format!("{p}{layer}.w"))?;
            let b = tape.param_named(store, &format!("{p}{layer}.b"))?;
            let z = tape.linear(h, w, Some(b))?;
            h = tape.relu(z);
        }
        let w = tape.param_named(store, &format!("{p}out.w"))?;
        let b = tape.param_named(store, &format!("{p}out.b"))?;
        let z = tape.linear(h, w, Some(b))?;
        Ok(tape.sigmoid(z))
    }

    /// Pre-softmax gate logits, `B x K`.
    pub fn gate_logits(&self, tape: &mut Tape, store: &ParameterStore, r: NodeId) -> Result<NodeId> {
        self.check_width(tape, r)?;
        let w = tape.param_named(store, "gate.hidden.w")?;
        let b = tape.param_named(store, "gate.hidden.b")?;
        let z = tape.linear(r, w, Some(b))?;
        let h = tape.relu(z);
        let w = tape.param_named(store, "gate.out.w")?;
        let b = tape.param_named(store, "gate.out.b")?;
        tape.linear(h, w, Some(b))
    }

    pub fn gate(&self, tape: &mut Tape, store: &ParameterStore, r: NodeId) -> Result<NodeId> {
        let logits = self.gate_logits(tape, store, r)?;
        tape.softmax(logits)
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        r: NodeId,
        fusion: Fusion,
    ) -> Result<MoeOutput> {
        let k_total = self.pool.len();
        let outs: Vec<NodeId> = (0..k_total)
            .map(|i| self.expert(tape, store, i, r))
            .collect::<Result<_>>()?;
        let experts = tape.concat(&outs)?;
        let rows = tape.value(r).rows();

        let (weights, gate, decisions) = match fusion {
            Fusion::TopK(k) => {
                let gate = self.gate(tape, store, r)?;
                let (weights, selected) = tape.top_k_renorm(gate, k)?;
                let wv = tape.value(weights);
                let decisions = selected
                    .into_iter()
                    .enumerate()
                    .map(|(row, sel)| RoutingDecision {
                        weights: sel.iter().map(|&j| wv.get(row, j)).collect(),
                        selected: sel,
                    })
                    .collect();
                (weights, Some(gate), decisions)
            }
            Fusion::Uniform => {
                let u = 1.0 / k_total as f64;
                let weights = tape.constant(Matrix::filled(rows, k_total, u));
                let decision = RoutingDecision {
                    selected: (0..k_total).collect(),
                    weights: vec![u; k_total],
                };
                (weights, None, vec![decision; rows])
            }
        };
        let mixed = tape.mul(weights, experts)?;
        let pred = tape.row_sum(mixed);
        Ok(MoeOutput {
            pred,
            gate,
            experts,
            decisions,
        })
    }

    /// Gate distribution for one fused representation.
    pub fn gate_distribution(&self, store: &ParameterStore, r: &[f64]) -> Result<GateDistribution> {
        let mut tape = Tape::new();
        let rn = tape.constant(Matrix::row_vector(r.to_vec()));
        let g = self.gate(&mut tape, store, rn)?;
        Ok(GateDistribution(tape.value(g).data().to_vec()))
    }

    /// Fused probability and routing for one fused representation.
    pub fn fuse_predict(
        &self,
        store: &ParameterStore,
        r: &[f64],
        fusion: Fusion,
    ) -> Result<(f64, RoutingDecision)> {
        let mut tape = Tape::new();
        let rn = tape.constant(Matrix::row_vector(r.to_vec()));
        let out = self.forward(&mut tape, store, rn, fusion)?;
        let decision = out.decisions.into_iter().next().expect("one row");
        Ok((tape.value(out.pred).get(0, 0), decision))
    }

    /// Output of a single expert for one fused representation.
    pub fn expert_predict(&self, store: &ParameterStore, index: usize, r: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let rn = tape.constant(Matrix::row_vector(r.to_vec()));
        let out = self.expert(&mut tape, store, index, rn)?;
        Ok(tape.value(out).get(0, 0))
    }
}

/// Softmax restricted to the top-k logits, zero elsewhere.
pub fn sparse_softmax(logits: &[f64], k: usize) -> Result<Vec<f64>> {
    let sel = top_k_indices(logits, k.max(1));
    let picked: Vec<f64> = sel.iter().map(|&j| logits[j]).collect();
    let probs = diffcore::softmax(&picked)?;
    let mut out = vec![0.0; logits.len()];
    for (j, p) in sel.into_iter().zip(probs) {
        out[j] = p;
    }
    Ok(out)
}
