//! Token-choice routing: affinities, top-k selection, per-pool statistics,
//! and the loss-free bias mechanism.

use crate::tensor::{Element, Graph, TensorId};

use super::MoeError;

/// Mutable routing state for one expert pool.
///
/// The router weight matrix itself is a learned parameter owned by the
/// model; this struct carries the non-learned selection bias of the
/// loss-free load-balancing mechanism and its step size gamma.
///
/// The bias participates in expert *selection* only. It never enters
/// combine weights, the load-balancing loss, or the z-loss, and it stays
/// all-zero whenever gamma is zero.
#[derive(Clone, Debug)]
pub struct RouterState {
    pub bias: Vec<f64>,
    pub step_size: f64,
}

impl RouterState {
    pub fn new(num_experts: usize, step_size: f64) -> Self {
        RouterState {
            bias: vec![0.0; num_experts],
            step_size,
        }
    }
}

/// Graph handles for one pool's router outputs.
#[derive(Clone, Copy, Debug)]
pub struct RouterAffinities {
    /// Raw router logits, (tokens, n).
    pub logits: TensorId,
    /// Per-token softmax of the logits, (tokens, n).
    pub probs: TensorId,
}

/// Per-token selection for one pool: `k` slots per token.
#[derive(Clone, Debug)]
pub struct RoutingOutcome {
    pub tokens: usize,
    pub num_experts: usize,
    pub k: usize,
    /// Selected expert per (token, slot), flat (tokens * k).
    pub experts: Vec<u32>,
    /// Router probability of the selected expert (bias excluded).
    pub affinity: Vec<f64>,
    /// Combine weight per slot: affinities renormalized over kept slots.
    pub combine: Vec<f64>,
    /// Capacity-overflow flags; always false under dropless routing.
    pub dropped: Vec<bool>,
}

impl RoutingOutcome {
    pub fn slot(&self, token: usize, slot: usize) -> usize {
        token * self.k + slot
    }

    pub fn drop_count(&self) -> u64 {
        self.dropped.iter().filter(|&&d| d).count() as u64
    }

    /// Pre-drop per-expert assignment counts.
    pub fn raw_loads(&self) -> Vec<u64> {
        let mut loads = vec![0u64; self.num_experts];
        for &e in &self.experts {
            loads[e as usize] += 1;
        }
        loads
    }

    /// Renormalizes combine weights over non-dropped slots per token.
    /// Tokens whose every slot was dropped get all-zero weights.
    pub fn renormalize_combine(&mut self) {
        for t in 0..self.tokens {
            let base = t * self.k;
            let total: f64 = (0..self.k)
                .filter(|&j| !self.dropped[base + j])
                .map(|j| self.affinity[base + j])
                .sum();
            for j in 0..self.k {
                self.combine[base + j] = if !self.dropped[base + j] && total > 0.0 {
                    self.affinity[base + j] / total
                } else {
                    0.0
                };
            }
        }
    }
}

/// Load statistics for one pool over one batch.
#[derive(Clone, Debug)]
pub struct RoutingStats {
    /// Load fraction per expert: assignments / (tokens * k); sums to 1.
    pub load_fraction: Vec<f64>,
    /// Mean routing probability per expert; sums to 1.
    pub mean_prob: Vec<f64>,
    /// Pre-drop assignment counts per expert.
    pub raw_loads: Vec<u64>,
}

/// Top-k expert indices for one token: ranked by `probs + bias` descending,
/// ties broken by the lower expert index.
pub fn select_topk(probs: &[f64], bias: &[f64], k: usize) -> Vec<usize> {
    debug_assert_eq!(probs.len(), bias.len());
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| {
        let sa = probs[a] + bias[a];
        let sb = probs[b] + bias[b];
        sb.total_cmp(&sa).then(a.cmp(&b))
    });
    order.truncate(k);
    order
}

/// Routes every token to its top-k experts of one pool.
///
/// Selection ranks `probs + bias`; combine weights come from the probs of
/// the selected experts alone, renormalized to sum to one per token.
pub fn route_topk<T: Element>(
    graph: &mut Graph<T>,
    hidden: TensorId,
    router_weight: TensorId,
    state: &RouterState,
    k: usize,
) -> Result<(RouterAffinities, RoutingOutcome), MoeError> {
    let affinities = router_affinities(graph, hidden, router_weight)?;
    let n = graph.shape(affinities.probs)[1];
    if k > n {
        return Err(MoeError::ActiveAboveTotal { k, n });
    }
    if state.bias.len() != n {
        return Err(MoeError::StateMismatch(format!(
            "bias has {} entries for a pool of {n}",
            state.bias.len()
        )));
    }
    let tokens = graph.shape(affinities.probs)[0];
    let probs: Vec<f64> = graph
        .data(affinities.probs)
        .iter()
        .map(|x| x.to_f64().unwrap())
        .collect();

    let mut experts = Vec::with_capacity(tokens * k);
    let mut affinity = Vec::with_capacity(tokens * k);
    for t in 0..tokens {
        let row = &probs[t * n..(t + 1) * n];
        for e in select_topk(row, &state.bias, k) {
            experts.push(e as u32);
            affinity.push(row[e]);
        }
    }
    let mut outcome = RoutingOutcome {
        tokens,
        num_experts: n,
        k,
        experts,
        affinity,
        combine: vec![0.0; tokens * k],
        dropped: vec![false; tokens * k],
    };
    outcome.renormalize_combine();
    Ok((affinities, outcome))
}

/// Router logits and probabilities for a pool, without selection.
pub fn router_affinities<T: Element>(
    graph: &mut Graph<T>,
    hidden: TensorId,
    router_weight: TensorId,
) -> Result<RouterAffinities, MoeError> {
    let logits = graph.matmul(hidden, router_weight)?;
    let probs = graph.softmax(logits, 1)?;
    Ok(RouterAffinities { logits, probs })
}

/// Batch statistics from an outcome and its probabilities.
pub fn routing_stats<T: Element>(
    graph: &Graph<T>,
    affinities: &RouterAffinities,
    outcome: &RoutingOutcome,
) -> RoutingStats {
    let n = outcome.num_experts;
    let raw_loads = outcome.raw_loads();
    let total = (outcome.tokens * outcome.k) as f64;
    let load_fraction: Vec<f64> = raw_loads.iter().map(|&l| l as f64 / total).collect();

    let probs = graph.data(affinities.probs);
    let mut mean_prob = vec![0.0f64; n];
    for t in 0..outcome.tokens {
        for e in 0..n {
            mean_prob[e] += probs[t * n + e].to_f64().unwrap();
        }
    }
    for p in &mut mean_prob {
        *p /= outcome.tokens as f64;
    }
    RoutingStats {
        load_fraction,
        mean_prob,
        raw_loads,
    }
}

/// Nudges the selection bias toward balanced loads:
/// `b_i += gamma * sign(mean_load - load_i)`, with `sign(0) = 0`.
/// A no-op when gamma is zero.
pub fn update_loss_free_bias(state: &mut RouterState, raw_loads: &[u64]) {
    if state.step_size == 0.0 {
        return;
    }
    debug_assert_eq!(state.bias.len(), raw_loads.len());
    let mean = raw_loads.iter().sum::<u64>() as f64 / raw_loads.len() as f64;
    for (b, &load) in state.bias.iter_mut().zip(raw_loads) {
        let diff = mean - load as f64;
        *b += state.step_size * if diff > 0.0 { 1.0 } else if diff < 0.0 { -1.0 } else { 0.0 };
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;

    #[test]
    fn topk_picks_highest_prob() {
        let sel = select_topk(&[0.7, 0.2, 0.1], &[0.0; 3], 1);
        assert_eq!(sel, vec![0]);
    }

    #[test]
    fn topk_breaks_ties_by_index() {
        let sel = select_topk(&[0.4, 0.4, 0.2], &[0.0; 3], 1);
        assert_eq!(sel, vec![0]);
        let sel = select_topk(&[0.25; 4], &[0.0; 4], 2);
        assert_eq!(sel, vec![0, 1]);
    }

    #[test]
    fn bias_shifts_selection_not_weights() {
        // probs [0.5, 0.3, 0.2] with bias [-1, 0, 0]: expert 1 wins, and the
        // combine weight renormalizes to 1 from probs alone.
        let probs = [0.5, 0.3, 0.2];
        let sel = select_topk(&probs, &[-1.0, 0.0, 0.0], 1);
        assert_eq!(sel, vec![1]);

        let mut g = Graph::<f64>::new();
        let hidden = g.constant(TensorData::new(vec![1, 2], vec![1.0, 0.0]).unwrap());
        // Router weight engineered so softmax(logits) = probs above.
        let logits: Vec<f64> = probs.iter().map(|p| p.ln()).collect();
        let w = g.constant(TensorData::new(vec![2, 3], vec![logits[0], logits[1], logits[2], 0.0, 0.0, 0.0]).unwrap());
        let state = RouterState {
            bias: vec![-1.0, 0.0, 0.0],
            step_size: 0.0,
        };
        let (_aff, outcome) = route_topk(&mut g, hidden, w, &state, 1).unwrap();
        assert_eq!(outcome.experts, vec![1]);
        assert!((outcome.combine[0] - 1.0).abs() < 1e-12);
        assert!((outcome.affinity[0] - 0.3).abs() < 1e-9);
    }

    #[test]
    fn combine_weights_renormalize_over_selected() {
        let mut outcome = RoutingOutcome {
            tokens: 1,
            num_experts: 4,
            k: 2,
            experts: vec![0, 2],
            affinity: vec![0.6, 0.2],
            combine: vec![0.0; 2],
            dropped: vec![false; 2],
        };
        outcome.renormalize_combine();
        assert!((outcome.combine[0] - 0.75).abs() < 1e-12);
        assert!((outcome.combine[1] - 0.25).abs() < 1e-12);

        outcome.dropped[0] = true;
        outcome.renormalize_combine();
        assert_eq!(outcome.combine[0], 0.0);
        assert!((outcome.combine[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn bias_update_examples() {
        // gamma = 0: untouched.
        let mut state = RouterState::new(4, 0.0);
        update_loss_free_bias(&mut state, &[10, 0, 0, 0]);
        assert_eq!(state.bias, vec![0.0; 4]);

        // Balanced loads: sign(0) keeps the bias fixed.
        let mut state = RouterState::new(4, 1e-3);
        update_loss_free_bias(&mut state, &[5, 5, 5, 5]);
        assert_eq!(state.bias, vec![0.0; 4]);

        // Skewed loads (mean 2.5): overloaded expert pushed down.
        let mut state = RouterState::new(4, 1e-3);
        update_loss_free_bias(&mut state, &[10, 0, 0, 0]);
        assert_eq!(state.bias, vec![-1e-3, 1e-3, 1e-3, 1e-3]);
    }

    #[test]
    fn rejects_k_above_n() {
        let mut g = Graph::<f64>::new();
        let hidden = g.constant(TensorData::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let w = g.constant(TensorData::zeros(vec![2, 3]));
        let state = RouterState::new(3, 0.0);
        assert!(matches!(
            route_topk(&mut g, hidden, w, &state, 4),
            Err(MoeError::ActiveAboveTotal { k: 4, n: 3 })
        ));
    }
}
