//! Non-embedding parameter counting and token budgeting.

use serde::{Deserialize, Serialize};

use super::{ConfigError, ModelArchSpec, Rational};

/// Parameter tallies for one architecture, split the way the published
/// table splits them.
///
/// `active_non_embedding` and `total_non_embedding` cover attention, FFN
/// (active vs. all experts), and norm gains. Router matrices are reported
/// separately in `router_params` and excluded from both, as is the
/// `2 * vocab * model_dim` untied embedding pair in `embedding_params`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub active_non_embedding: u64,
    pub total_non_embedding: u64,
    pub router_params: u64,
    pub embedding_params: u64,
}

/// Counts parameters for an architecture, exactly.
///
/// Per layer: attention `4d^2`; FFN `3 * d * m` per component where `m` is
/// the component's intermediate dimension (`4d * g`); two norm gains of `d`;
/// router `d * n_i` per pool. One final norm gain of `d` on top.
pub fn count_params(arch: &ModelArchSpec) -> Result<ParamCount, ConfigError> {
    arch.validate()?;
    let d = arch.model_dim;
    let dense = arch.dense_ffn_dim();
    let layer = &arch.layer_spec;

    let attention = 4 * d * d;
    let norms_per_layer = 2 * d;

    let mut active_ffn = 0u64;
    let mut total_ffn = 0u64;
    let mut routers = 0u64;
    if let Some(g) = layer.generalist_granularity() {
        let m = g.ffn_dim(dense)?;
        active_ffn += 3 * d * m;
        total_ffn += 3 * d * m;
    }
    for pool in &layer.pools {
        let m = pool.granularity.ffn_dim(dense)?;
        active_ffn += pool.active * 3 * d * m;
        total_ffn += pool.total * 3 * d * m;
        routers += d * pool.total;
    }

    let l = arch.layers;
    let active_non_embedding = l * (attention + active_ffn + norms_per_layer) + d;
    let total_non_embedding = l * (attention + total_ffn + norms_per_layer) + d;
    Ok(ParamCount {
        active_non_embedding,
        total_non_embedding,
        router_params: l * routers,
        embedding_params: 2 * arch.vocab * d,
    })
}

/// Training-token budget: `round(multiplier * active_params)`. The default
/// multiplier is 20 tokens per active parameter.
pub fn token_budget(active_params: u64, multiplier: Rational) -> u64 {
    multiplier.round_mul_int(active_params)
}

/// The default token-to-active-parameter multiplier.
pub fn default_token_multiplier() -> Rational {
    Rational::from_int(20)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{arch_from_table, Granularity, MoELayerSpec, Rational, PAPER_VOCAB};

    fn arch_with_sparsity(name: &str, total: u64, g_den: u64) -> ModelArchSpec {
        let g = Granularity::unit(g_den).unwrap();
        let spec = MoELayerSpec::homogeneous(total, g, g_den);
        arch_from_table(name, PAPER_VOCAB, spec).unwrap()
    }

    #[test]
    fn dense_rows_are_exact() {
        let dense = MoELayerSpec::dense_baseline();
        let c10 = count_params(&arch_from_table("10M", PAPER_VOCAB, dense.clone()).unwrap())
            .unwrap();
        assert_eq!(c10.active_non_embedding, 110_928);
        assert_eq!(c10.total_non_embedding, 110_928);
        assert_eq!(c10.router_params, 0);
        assert_eq!(c10.embedding_params, 2 * 50_000 * 48);

        let c50 = count_params(&arch_from_table("50M", PAPER_VOCAB, dense.clone()).unwrap())
            .unwrap();
        assert_eq!(c50.active_non_embedding, 4_610_640);

        let c110 =
            count_params(&arch_from_table("110M", PAPER_VOCAB, dense).unwrap()).unwrap();
        assert_eq!(c110.active_non_embedding, 26_882_064);
    }

    #[test]
    fn moe_total_grows_with_sparsity() {
        // 50M at s = 64 via n=128, g=1/2.
        let arch = arch_with_sparsity("50M", 128, 2);
        let c = count_params(&arch).unwrap();
        assert_eq!(c.active_non_embedding, 4_610_640);
        assert_eq!(c.total_non_embedding, 222_338_640);
        assert_eq!(c.router_params, 5 * 240 * 128);
    }

    #[test]
    fn active_independent_of_total_count() {
        // FLOP-matched configs share the same active count regardless of n, g.
        let a = count_params(&arch_with_sparsity("50M", 8, 2)).unwrap();
        let b = count_params(&arch_with_sparsity("50M", 64, 8)).unwrap();
        let dense =
            count_params(&arch_from_table("50M", PAPER_VOCAB, MoELayerSpec::dense_baseline()).unwrap())
                .unwrap();
        assert_eq!(a.active_non_embedding, b.active_non_embedding);
        assert_eq!(a.active_non_embedding, dense.active_non_embedding);
    }

    #[test]
    fn total_minus_active_identity() {
        // total - active = 12 * d^2 * L * (s - 1) for FLOP-matched layers.
        for (n, den) in [(8u64, 2u64), (32, 4), (64, 8)] {
            let arch = arch_with_sparsity("110M", n, den);
            let c = count_params(&arch).unwrap();
            let s = arch.layer_spec.activation_sparsity();
            let excess = s.checked_sub(Rational::ONE).unwrap();
            let expected = excess
                .scale_integer(12 * arch.model_dim * arch.model_dim * arch.layers)
                .unwrap();
            assert_eq!(c.total_non_embedding - c.active_non_embedding, expected);
        }
    }

    #[test]
    fn token_budget_cases() {
        assert_eq!(
            token_budget(1_000_000_000, default_token_multiplier()),
            20_000_000_000
        );
        assert_eq!(token_budget(123, Rational::ZERO), 0);
        assert_eq!(
            token_budget(52_700_000, default_token_multiplier()),
            1_054_000_000
        );
    }
}
