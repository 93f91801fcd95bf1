//! Task loss, expert-usage statistics and the load-balancing regularizer.

use crate::diffcore::{bce_value, coefficient_of_variation, NodeId, Tape};
use crate::error::{Error, Result};
use crate::moe::{GateDistribution, RoutingDecision};

/// Per-batch expert usage: selection counts `f` and mean gate `p`.
#[derive(Debug, Clone, PartialEq)]
pub struct UsageStats {
    pub counts: Vec<f64>,
    pub mean_gate: Vec<f64>,
}

pub fn bce_loss(predictions: &[f64], labels: &[f64]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("bce_loss", &[predictions.len()], &[labels.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Empty("bce_loss"));
    }
    Ok(bce_value(predictions, labels))
}

/// Selection counts over `decisions` for `num_experts` experts.
pub fn selection_counts(decisions: &[RoutingDecision], num_experts: usize) -> Result<Vec<f64>> {
    let mut f = vec![0.0; num_experts];
    for d in decisions {
        for &j in &d.selected {
            if j >= num_experts {
                return Err(Error::shape("selection_counts", &[num_experts], &[j + 1]));
            }
            f[j] += 1.0;
        }
    }
    Ok(f)
}

pub fn usage_stats(decisions: &[RoutingDecision], gates: &[GateDistribution]) -> Result<UsageStats> {
    if decisions.len() != gates.len() {
        return Err(Error::shape("usage_stats", &[decisions.len()], &[gates.len()]));
    }
    let k = gates.first().ok_or(Error::Empty("usage_stats"))?.0.len();
    let mut p = vec![0.0; k];
    for g in gates {
        if g.0.len() != k {
            return Err(Error::shape("usage_stats", &[k], &[g.0.len()]));
        }
        for (acc, v) in p.iter_mut().zip(&g.0) {
            *acc += v;
        }
    }
    let n = gates.len() as f64;
    p.iter_mut().for_each(|v| *v /= n);
    Ok(UsageStats {
        counts: selection_counts(decisions, k)?,
        mean_gate: p,
    })
}

/// `alpha * CV(f ⊙ p)` with population standard deviation; zero when the
/// mean of `f ⊙ p` is not positive.
pub fn load_balance_loss(stats: &UsageStats, alpha: f64) -> f64 {
    let x: Vec<f64> = stats
        .counts
        .iter()
        .zip(&stats.mean_gate)
        .map(|(f, p)| f * p)
        .collect();
    alpha * coefficient_of_variation(&x)
}

pub fn composite_loss(task: f64, balance: f64) -> Result<f64> {
    if !task.is_finite() || !balance.is_finite() {
        return Err(Error::NonFinite { op: "composite_loss" });
    }
    Ok(task + balance)
}

/// Recorded form of the composite objective.
#[derive(Debug, Clone, Copy)]
pub struct Objective {
    pub total: NodeId,
    pub task: NodeId,
    pub balance: Option<NodeId>,
}

/// Adds `BCE(pred, labels) + alpha * CV(f ⊙ mean(gate))` to the tape. The
/// balance term is skipped when there is no gate or `alpha` is zero.
pub fn record_objective(
    tape: &mut Tape,
    pred: NodeId,
    labels: &[f64],
    gate: Option<NodeId>,
    decisions: &[RoutingDecision],
    alpha: f64,
) -> Result<Objective> {
    let task = tape.bce(pred, labels)?;
    let balance = match gate {
        Some(g) if alpha > 0.0 => {
            let k = tape.value(g).cols();
            let counts = selection_counts(decisions, k)?;
            let p = tape.mean_rows(g)?;
            Some(tape.balance_cv(p, &counts, alpha)?)
        }
        _ => None,
    };
    let total = match balance {
        Some(b) => tape.add(task, b)?,
        None => task,
    };
    Ok(Objective {
        total,
        task,
        balance,
    })
}
