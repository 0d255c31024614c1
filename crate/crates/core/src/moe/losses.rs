//! Auxiliary router losses.

use crate::tensor::{Element, Graph, TensorId};

use super::router::{RouterAffinities, RoutingStats};
use super::MoeError;

/// Load-balancing loss for one pool: `N_E * sum_i f_i * P_i`.
///
/// The load fractions `f_i` are batch constants; the gradient reaches the
/// router only through the mean probabilities `P_i`.
pub fn lb_loss<T: Element>(
    graph: &mut Graph<T>,
    affinities: &RouterAffinities,
    stats: &RoutingStats,
) -> Result<TensorId, MoeError> {
    let mean_probs = graph.mean_axis0(affinities.probs)?;
    lb_loss_from_mean_probs(graph, mean_probs, &stats.load_fraction)
}

/// Load-balancing loss given the differentiable mean probabilities `P`
/// directly: `N_E * sum_i f_i * P_i`.
pub fn lb_loss_from_mean_probs<T: Element>(
    graph: &mut Graph<T>,
    mean_probs: TensorId,
    load_fraction: &[f64],
) -> Result<TensorId, MoeError> {
    let n = load_fraction.len() as f64;
    let weights: Vec<f64> = load_fraction.iter().map(|&f| n * f).collect();
    Ok(graph.weighted_sum(mean_probs, &weights)?)
}

/// Router z-loss for one pool: the batch mean of the squared log-sum-exp
/// of each token's router logits.
pub fn z_loss<T: Element>(
    graph: &mut Graph<T>,
    affinities: &RouterAffinities,
) -> Result<TensorId, MoeError> {
    let lse = graph.log_sum_exp_last(affinities.logits)?;
    let sq = graph.square(lse);
    Ok(graph.mean_all(sq))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::TensorData;

    fn vec_tensor(g: &mut Graph<f64>, data: Vec<f64>) -> TensorId {
        let n = data.len();
        g.leaf(TensorData::new(vec![n], data).unwrap(), true)
    }

    #[test]
    fn lb_uniform_is_one() {
        let mut g = Graph::new();
        let p = vec_tensor(&mut g, vec![0.25; 4]);
        let loss = lb_loss_from_mean_probs(&mut g, p, &[0.25; 4]).unwrap();
        assert!((g.value(loss).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lb_fully_concentrated_is_n() {
        let mut g = Graph::new();
        let p = vec_tensor(&mut g, vec![1.0, 0.0, 0.0, 0.0]);
        let loss = lb_loss_from_mean_probs(&mut g, p, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((g.value(loss).item() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn lb_half_concentrated_uniform_probs() {
        let mut g = Graph::new();
        let p = vec_tensor(&mut g, vec![0.25; 4]);
        let loss = lb_loss_from_mean_probs(&mut g, p, &[0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((g.value(loss).item() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lb_gradient_flows_only_through_probs() {
        let mut g = Graph::new();
        let p = vec_tensor(&mut g, vec![0.7, 0.1, 0.1, 0.1]);
        let loss = lb_loss_from_mean_probs(&mut g, p, &[0.5, 0.5, 0.0, 0.0]).unwrap();
        g.backward(loss).unwrap();
        // d loss / d P_i = N * f_i
        assert_eq!(g.grad(p).unwrap(), &[2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn z_loss_single_expert_zero_logits() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(TensorData::zeros(vec![3, 1]), true);
        let aff = RouterAffinities {
            logits,
            probs: logits,
        };
        let loss = z_loss(&mut g, &aff).unwrap();
        assert_eq!(g.value(loss).item(), 0.0);
    }

    #[test]
    fn z_loss_zero_logits_is_ln_n_squared() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(TensorData::zeros(vec![5, 4]), true);
        let aff = RouterAffinities {
            logits,
            probs: logits,
        };
        let loss = z_loss(&mut g, &aff).unwrap();
        let want = 4f64.ln().powi(2);
        assert!((g.value(loss).item() - want).abs() < 1e-6);
    }

    #[test]
    fn z_loss_dominant_logit() {
        let mut g = Graph::<f64>::new();
        let logits = g.leaf(
            TensorData::new(vec![1, 4], vec![10.0, -1e9, -1e9, -1e9]).unwrap(),
            true,
        );
        let aff = RouterAffinities {
            logits,
            probs: logits,
        };
        let loss = z_loss(&mut g, &aff).unwrap();
        assert!((g.value(loss).item() - 100.0).abs() < 1e-6);
    }
}
