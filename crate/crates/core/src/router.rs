//! Top-K sparse routing from the `cls` embedding and the expert selection
//! balancing (ESB) auxiliary loss.

use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{softmax_row, Graph, Mat, Var};

/// Weights of the three ESB terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EsbWeights {
    pub importance: f64,
    pub load: f64,
    pub z: f64,
}

impl Default for EsbWeights {
    fn default() -> Self {
        Self {
            importance: 1.0,
            load: 1.0,
            z: 1.0,
        }
    }
}

/// Gating matrix and routing policy.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Router {
    /// `N_exp×D` gating weights.
    pub gate: ParamId,
    pub dim: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Group index of every expert, used by the group-constrained policy.
    pub expert_groups: Vec<usize>,
    pub group_constrained: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub logits: Vec<f64>,
    /// Selected experts in ascending index order.
    pub topk_indices: Vec<usize>,
    pub gates: Vec<f64>,
}

impl Router {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        dim: usize,
        expert_groups: Vec<usize>,
        top_k: usize,
        group_constrained: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let n_experts = expert_groups.len();
        if top_k == 0 || top_k > n_experts {
            return Err(Error::Config(format!(
                "top_k {top_k} must lie in [1, {n_experts}]"
            )));
        }
        // Small initial logits keep early routing close to uniform.
        let gate = store.add_glorot("router.gate", n_experts, dim, rng);
        store.get_mut(gate).mapv_inplace(|v| v * 0.1);
        Ok(Self {
            gate,
            dim,
            n_experts,
            top_k,
            expert_groups,
            group_constrained,
        })
    }

    pub fn select(&self, logits: &[f64]) -> Vec<usize> {
        if self.group_constrained {
            group_constrained_top_k(logits, self.top_k, &self.expert_groups)
        } else {
            top_k_indices(logits, self.top_k)
        }
    }

    pub fn route(&self, store: &ParamStore, cls: &[f64]) -> Result<RoutingDecision> {
        let w = store.get(self.gate);
        if cls.len() != w.ncols() {
            return Err(Error::DimMismatch(format!(
                "cls has {} values, router expects {}",
                cls.len(),
                w.ncols()
            )));
        }
        let logits: Vec<f64> = w.rows().into_iter().map(|r| r.iter().zip(cls).map(|(a, b)| a * b).sum()).collect();
        let topk = self.select(&logits);
        let gates = restricted_softmax(&logits, &topk);
        Ok(RoutingDecision {
            logits,
            topk_indices: topk,
            gates,
        })
    }
}

/// Route a bare gating matrix with the unconstrained policy.
pub fn route(cls: &[f64], gate: &Mat, top_k: usize) -> Result<RoutingDecision> {
    if cls.len() != gate.ncols() {
        return Err(Error::DimMismatch(format!(
            "cls has {} values, gate expects {}",
            cls.len(),
            gate.ncols()
        )));
    }
    if top_k == 0 || top_k > gate.nrows() {
        return Err(Error::Config(format!("top_k {top_k} out of range")));
    }
    let logits: Vec<f64> = gate.rows().into_iter().map(|r| r.iter().zip(cls).map(|(a, b)| a * b).sum()).collect();
    let topk = top_k_indices(&logits, top_k);
    let gates = restricted_softmax(&logits, &topk);
    Ok(RoutingDecision {
        logits,
        topk_indices: topk,
        gates,
    })
}

/// Indices by decreasing logit; equal logits (including `-0.0` and `0.0`)
/// keep ascending index order.
fn rank_descending(logits: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| (logits[b] + 0.0).total_cmp(&(logits[a] + 0.0)));
    order
}

/// Indices of the `k` largest logits, ties to the lower index, returned sorted.
pub fn top_k_indices(logits: &[f64], k: usize) -> Vec<usize> {
    let order = rank_descending(logits);
    let mut picked = order[..k.min(order.len())].to_vec();
    picked.sort_unstable();
    picked
}

/// One pick per group first (groups visited by their best logit), then the
/// remaining slots from the global ranking.
pub fn group_constrained_top_k(logits: &[f64], k: usize, groups: &[usize]) -> Vec<usize> {
    let order = rank_descending(logits);
    let mut picked = Vec::with_capacity(k);
    let mut seen_groups = Vec::new();
    for &i in &order {
        if picked.len() == k {
            break;
        }
        if !seen_groups.contains(&groups[i]) {
            seen_groups.push(groups[i]);
            picked.push(i);
        }
    }
    for &i in &order {
        if picked.len() == k {
            break;
        }
        if !picked.contains(&i) {
            picked.push(i);
        }
    }
    picked.sort_unstable();
    picked
}

/// Softmax over `selected` entries, zero elsewhere.
pub fn restricted_softmax(logits: &[f64], selected: &[usize]) -> Vec<f64> {
    let probs = softmax_row(selected.iter().map(|&i| logits[i]));
    let mut gates = vec![0.0; logits.len()];
    for (&i, p) in selected.iter().zip(probs) {
        gates[i] = p;
    }
    gates
}

pub fn selection_mask(selections: &[Vec<usize>], n_experts: usize) -> Array2<bool> {
    let mut mask = Array2::from_elem((selections.len(), n_experts), false);
    for (b, sel) in selections.iter().enumerate() {
        for &j in sel {
            mask[[b, j]] = true;
        }
    }
    mask
}

/// `ceil(ceil(B·K / N_exp) · factor)`.
pub fn default_capacity(batch: usize, top_k: usize, n_experts: usize, factor: f64) -> usize {
    let base = (batch * top_k).div_ceil(n_experts);
    (base as f64 * factor).ceil() as usize
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchRoutingStats {
    /// Mean gate per expert.
    pub importance: Vec<f64>,
    /// Number of samples whose top-K set contains each expert.
    pub counts: Vec<usize>,
    pub batch: usize,
    pub capacity: usize,
}

impl BatchRoutingStats {
    pub fn from_decisions(decisions: &[RoutingDecision], capacity: usize) -> Self {
        let n = decisions.first().map_or(0, |d| d.gates.len());
        let b = decisions.len();
        let mut importance = vec![0.0; n];
        let mut counts = vec![0usize; n];
        for d in decisions {
            for (p, g) in importance.iter_mut().zip(&d.gates) {
                *p += g / b as f64;
            }
            for &j in &d.topk_indices {
                counts[j] += 1;
            }
        }
        Self {
            importance,
            counts,
            batch: b,
            capacity,
        }
    }

    pub fn excess(&self) -> Vec<f64> {
        self.counts
            .iter()
            .map(|&c| c.saturating_sub(self.capacity) as f64)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EsbBreakdown {
    pub importance: f64,
    pub load: f64,
    pub z: f64,
    pub total: f64,
}

pub fn importance_loss(importance: &[f64]) -> f64 {
    importance.len() as f64 * importance.iter().map(|p| p * p).sum::<f64>()
}

pub fn load_loss(counts: &[usize], capacity: usize) -> f64 {
    counts
        .iter()
        .map(|&c| (c.saturating_sub(capacity) as f64).powi(2))
        .sum()
}

pub fn z_loss(logits: &Mat) -> f64 {
    logits.iter().map(|l| l * l).sum::<f64>() / logits.nrows() as f64
}

/// Value of the ESB loss for a batch.
pub fn esb_loss(stats: &BatchRoutingStats, logits: &Mat, weights: EsbWeights) -> Result<EsbBreakdown> {
    if logits.nrows() != stats.batch || logits.ncols() != stats.importance.len() {
        return Err(Error::ShapeMismatch(format!(
            "logits {:?} vs stats batch {} experts {}",
            logits.dim(),
            stats.batch,
            stats.importance.len()
        )));
    }
    let importance = importance_loss(&stats.importance);
    let load = load_loss(&stats.counts, stats.capacity);
    let z = z_loss(logits);
    Ok(EsbBreakdown {
        importance,
        load,
        z,
        total: weights.importance * importance + weights.load * load + weights.z * z,
    })
}

/// Graph-level ESB loss. `gates` are the sparse top-K gates (`B×N_exp`) and
/// `logits` the full pre-softmax logits.
pub fn esb_loss_graph(
    g: &mut Graph,
    logits: Var,
    gates: Var,
    stats: &BatchRoutingStats,
    weights: EsbWeights,
) -> (Var, EsbBreakdown) {
    let n_exp = g.value(logits).ncols() as f64;
    let batch = g.value(logits).nrows() as f64;
    let p = g.mean_rows(gates);
    let p2 = g.square(p);
    let imp_sum = g.sum(p2);
    let imp = g.scale(imp_sum, n_exp);
    let excess: Arc<[f64]> = stats.excess().into();
    let load = g.load_penalty(logits, excess);
    let l2 = g.square(logits);
    let z_sum = g.sum(l2);
    let z = g.scale(z_sum, 1.0 / batch);
    let wi = g.scale(imp, weights.importance);
    let wl = g.scale(load, weights.load);
    let wz = g.scale(z, weights.z);
    let a = g.add(wi, wl);
    let total = g.add(a, wz);
    let breakdown = EsbBreakdown {
        importance: g.scalar(imp),
        load: g.scalar(load),
        z: g.scalar(z),
        total: g.scalar(total),
    };
    (total, breakdown)
}
