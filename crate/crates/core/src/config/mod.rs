//! Exact-rational expert configuration algebra: granularity, expert pools,
//! FLOP-matching validation, sparsity, parameter counting, and sweep grids.

mod grid;
mod params;
mod rational;
mod specfile;

pub use grid::{
    enumerate_generalist_grid, enumerate_heterogeneous_grid, enumerate_homogeneous_grid,
    paper_granularities, paper_pool_sizes, PAPER_SPARSITY_MAX,
};
pub use params::{count_params, default_token_multiplier, token_budget, ParamCount};
pub use rational::{flop_matched_active_count, Granularity, Rational};
pub use specfile::{canonical_toml, parse_arch_spec, spec_hash};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("denominator of {num}/{den} is not a positive power of two")]
    BadDenominator { num: u64, den: u64 },
    #[error("cannot parse rational from {0:?}")]
    BadRational(String),
    #[error("granularity {0} is outside (0, 1]")]
    GranularityRange(String),
    #[error("granularity {0} has denominator above the supported maximum of 64")]
    GranularityDenominator(String),
    #[error("granularity {0} has no integer reciprocal; cannot FLOP-match")]
    NonIntegerReciprocal(String),
    #[error("granularity {granularity} times dense FFN dim {dense_dim} is not a positive integer")]
    FractionalFfnDim { granularity: String, dense_dim: u64 },
    #[error("invalid layer spec: {0}")]
    InvalidLayer(String),
    #[error("invalid architecture {name}: {reason}")]
    InvalidArch { name: String, reason: String },
    #[error("cannot parse spec file: {0}")]
    SpecParse(String),
}

/// One pool of identically sized routed experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ExpertPoolSpec {
    /// Total expert count in the pool.
    #[serde(rename = "n")]
    pub total: u64,
    /// Granularity shared by every expert in the pool.
    #[serde(rename = "g")]
    pub granularity: Granularity,
    /// Experts activated per token.
    #[serde(rename = "k")]
    pub active: u64,
}

impl ExpertPoolSpec {
    pub fn new(total: u64, granularity: Granularity, active: u64) -> Self {
        ExpertPoolSpec {
            total,
            granularity,
            active,
        }
    }

    /// Pool contribution to activation sparsity: `n * g`.
    pub fn sparsity(&self) -> Rational {
        self.granularity.rational().mul_int(self.total)
    }

    /// Pool contribution to the active FFN budget: `k * g`.
    pub fn active_share(&self) -> Rational {
        self.granularity.rational().mul_int(self.active)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RoutingPolicy {
    /// Every token-expert assignment is honored; nothing is dropped.
    Dropless,
    /// Per-expert capacity `ceil(factor * tokens * k / n)`; overflow is dropped.
    Capacity { factor: Rational },
}

impl RoutingPolicy {
    pub fn is_dropless(&self) -> bool {
        matches!(self, RoutingPolicy::Dropless)
    }

    pub fn label(&self) -> String {
        match self {
            RoutingPolicy::Dropless => "dropless".to_string(),
            RoutingPolicy::Capacity { factor } => format!("capacity:{factor}"),
        }
    }
}

/// Densely activated granular-FFN ablation: split the FFN into `n` always-on
/// components with no sparsity.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenseGranularMode {
    #[default]
    Off,
    /// Combine the components with fixed weight `1/n` each.
    EqualWeight,
    /// Combine with learned softmax weights over all components.
    PseudoRouter,
}

/// Full specification of one MoE feed-forward layer.
///
/// Field order matters for the canonical TOML form: plain values first,
/// then the routing table, then the pool array.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayerSpec {
    /// Generalist (always-active) granularity; zero disables the generalist.
    #[serde(rename = "g_gen", default = "Rational::zero_default")]
    pub generalist: Rational,
    /// Load-balancing loss weight.
    #[serde(default = "default_lb_weight")]
    pub lb_weight: f64,
    /// Router z-loss weight.
    #[serde(default = "default_z_weight")]
    pub z_weight: f64,
    /// Loss-free load-balancing bias step (gamma); zero disables the mechanism.
    #[serde(default)]
    pub bias_step: f64,
    #[serde(default)]
    pub dense_granular_mode: DenseGranularMode,
    #[serde(default = "default_routing")]
    pub routing: RoutingPolicy,
    /// Routed expert pools; one pool is homogeneous, two or more heterogeneous.
    #[serde(rename = "pool", default)]
    pub pools: Vec<ExpertPoolSpec>,
}

impl Rational {
    fn zero_default() -> Rational {
        Rational::ZERO
    }
}

fn default_routing() -> RoutingPolicy {
    RoutingPolicy::Dropless
}

fn default_lb_weight() -> f64 {
    1e-2
}

fn default_z_weight() -> f64 {
    1e-3
}

impl MoELayerSpec {
    /// A homogeneous layer with the paper-default knobs.
    pub fn homogeneous(total: u64, granularity: Granularity, active: u64) -> Self {
        MoELayerSpec {
            generalist: Rational::ZERO,
            lb_weight: default_lb_weight(),
            z_weight: default_z_weight(),
            bias_step: 0.0,
            dense_granular_mode: DenseGranularMode::Off,
            routing: RoutingPolicy::Dropless,
            pools: vec![ExpertPoolSpec::new(total, granularity, active)],
        }
    }

    /// The dense baseline expressed in the same schema: a lone generalist of
    /// granularity one and no routed pools.
    pub fn dense_baseline() -> Self {
        MoELayerSpec {
            generalist: Rational::ONE,
            lb_weight: 0.0,
            z_weight: 0.0,
            bias_step: 0.0,
            dense_granular_mode: DenseGranularMode::Off,
            routing: RoutingPolicy::Dropless,
            pools: Vec::new(),
        }
    }

    pub fn generalist_granularity(&self) -> Option<Granularity> {
        if self.generalist.is_zero() {
            None
        } else {
            Granularity::from_rational(self.generalist).ok()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !self.generalist.is_zero() {
            Granularity::from_rational(self.generalist)
                .map_err(|e| ConfigError::InvalidLayer(format!("generalist: {e}")))?;
        }
        if self.pools.is_empty() && self.generalist.is_zero() {
            return Err(ConfigError::InvalidLayer(
                "layer needs at least one pool or a generalist".to_string(),
            ));
        }
        for (i, pool) in self.pools.iter().enumerate() {
            if pool.active == 0 || pool.total == 0 {
                return Err(ConfigError::InvalidLayer(format!(
                    "pool {i}: n and k must be positive"
                )));
            }
            if pool.active > pool.total {
                return Err(ConfigError::InvalidLayer(format!(
                    "pool {i}: k={} exceeds n={}",
                    pool.active, pool.total
                )));
            }
        }
        if let RoutingPolicy::Capacity { factor } = self.routing {
            if factor.is_zero() {
                return Err(ConfigError::InvalidLayer(
                    "capacity factor must be positive".to_string(),
                ));
            }
        }
        if !(self.lb_weight >= 0.0 && self.z_weight >= 0.0 && self.bias_step >= 0.0) {
            return Err(ConfigError::InvalidLayer(
                "loss weights and bias step must be nonnegative".to_string(),
            ));
        }
        if self.dense_granular_mode != DenseGranularMode::Off {
            let ok = self.pools.len() == 1
                && self.pools[0].active == self.pools[0].total
                && self.activation_sparsity().is_one();
            if !ok {
                return Err(ConfigError::InvalidLayer(
                    "dense granular mode requires one pool with k = n and s = 1".to_string(),
                ));
            }
        }
        Ok(())
    }

    /// Activation sparsity `s = g_gen + sum_i n_i * g_i`, exact.
    pub fn activation_sparsity(&self) -> Rational {
        self.pools
            .iter()
            .fold(self.generalist, |acc, p| acc.add(p.sparsity()))
    }

    /// Active FFN share `g_gen + sum_i k_i * g_i`; FLOP-matched iff exactly 1.
    pub fn matched_active_share(&self) -> Rational {
        self.pools
            .iter()
            .fold(self.generalist, |acc, p| acc.add(p.active_share()))
    }
}

/// Activation sparsity of a layer spec (free-function form).
pub fn activation_sparsity(spec: &MoELayerSpec) -> Rational {
    spec.activation_sparsity()
}

/// Result of checking the FLOP-matching identity `g_gen + sum k_i g_i = 1`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FlopMatch {
    Ok,
    Violation { sum: Rational, detail: String },
}

impl FlopMatch {
    pub fn is_ok(&self) -> bool {
        matches!(self, FlopMatch::Ok)
    }
}

/// Checks `g_gen + sum_i k_i * g_i = 1` by exact rational equality, plus
/// `k_i <= n_i` per pool. Violations are reported, not raised.
pub fn validate_flop_match(spec: &MoELayerSpec) -> FlopMatch {
    let sum = spec.matched_active_share();
    for (i, pool) in spec.pools.iter().enumerate() {
        if pool.active > pool.total {
            return FlopMatch::Violation {
                sum,
                detail: format!("pool {i}: k={} exceeds n={}", pool.active, pool.total),
            };
        }
    }
    if sum.is_one() {
        FlopMatch::Ok
    } else {
        FlopMatch::Violation {
            sum,
            detail: format!("active share sums to {sum}, expected 1"),
        }
    }
}

/// Architecture of a full transformer LM; the same MoE layer spec applies to
/// every layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelArchSpec {
    pub name: String,
    pub layers: u64,
    pub model_dim: u64,
    pub heads: u64,
    /// Dense FFN intermediate dimension as a multiple of the model dim; fixed at 4.
    #[serde(default = "default_ffn_multiplier")]
    pub ffn_multiplier: u64,
    pub vocab: u64,
    #[serde(rename = "moe")]
    pub layer_spec: MoELayerSpec,
}

fn default_ffn_multiplier() -> u64 {
    4
}

impl ModelArchSpec {
    pub fn new(
        name: impl Into<String>,
        layers: u64,
        model_dim: u64,
        heads: u64,
        vocab: u64,
        layer_spec: MoELayerSpec,
    ) -> Self {
        ModelArchSpec {
            name: name.into(),
            layers,
            model_dim,
            heads,
            ffn_multiplier: 4,
            vocab,
            layer_spec,
        }
    }

    /// Dense FFN intermediate dimension (`4 * model_dim`).
    pub fn dense_ffn_dim(&self) -> u64 {
        self.ffn_multiplier * self.model_dim
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |reason: String| ConfigError::InvalidArch {
            name: self.name.clone(),
            reason,
        };
        if self.layers == 0 || self.model_dim == 0 || self.heads == 0 {
            return Err(fail("layers, model_dim, and heads must be positive".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(fail(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.ffn_multiplier != 4 {
            return Err(fail(format!(
                "ffn_multiplier is fixed at 4, got {}",
                self.ffn_multiplier
            )));
        }
        if self.vocab < 2 {
            return Err(fail("vocab must be at least 2".into()));
        }
        self.layer_spec
            .validate()
            .map_err(|e| fail(e.to_string()))?;
        // Every expert dimension must come out integral.
        let dense = self.dense_ffn_dim();
        if let Some(g) = self.layer_spec.generalist_granularity() {
            g.ffn_dim(dense).map_err(|e| fail(e.to_string()))?;
        }
        for pool in &self.layer_spec.pools {
            pool.granularity
                .ffn_dim(dense)
                .map_err(|e| fail(e.to_string()))?;
        }
        Ok(())
    }
}

/// The architecture rows studied at each active-parameter scale:
/// (name, layers, model dim, attention heads).
pub const ARCH_TABLE: [(&str, u64, u64, u64); 7] = [
    ("10M", 3, 48, 3),
    ("20M", 4, 96, 4),
    ("50M", 5, 240, 6),
    ("80M", 8, 336, 7),
    ("110M", 9, 432, 9),
    ("200M", 10, 640, 10),
    ("300M", 12, 832, 13),
];

/// Vocabulary size used for the published parameter-count rows.
pub const PAPER_VOCAB: u64 = 50_000;

/// Builds a named architecture row from [`ARCH_TABLE`] with the given layer
/// spec and vocabulary.
pub fn arch_from_table(
    name: &str,
    vocab: u64,
    layer_spec: MoELayerSpec,
) -> Result<ModelArchSpec, ConfigError> {
    let row = ARCH_TABLE
        .iter()
        .find(|(n, ..)| *n == name)
        .ok_or_else(|| ConfigError::InvalidArch {
            name: name.to_string(),
            reason: format!(
                "unknown architecture; known: {}",
                ARCH_TABLE.map(|(n, ..)| n).join(", ")
            ),
        })?;
    Ok(ModelArchSpec::new(
        row.0, row.1, row.2, row.3, vocab, layer_spec,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g(num: u64, den: u64) -> Granularity {
        Granularity::new(num, den).unwrap()
    }

    #[test]
    fn sparsity_single_pool() {
        let spec = MoELayerSpec::homogeneous(64, g(1, 2), 2);
        assert_eq!(spec.activation_sparsity(), Rational::from_int(32));
    }

    #[test]
    fn sparsity_heterogeneous_matches_table_row() {
        // Pools (4, 1/2) and (8, 1/4) give s = 4.
        let mut spec = MoELayerSpec::homogeneous(4, g(1, 2), 1);
        spec.pools.push(ExpertPoolSpec::new(8, g(1, 4), 2));
        assert_eq!(spec.activation_sparsity(), Rational::from_int(4));
    }

    #[test]
    fn sparsity_with_generalist() {
        let mut spec = MoELayerSpec::homogeneous(16, g(1, 4), 2);
        spec.generalist = Rational::new(1, 2).unwrap();
        assert_eq!(spec.activation_sparsity(), Rational::new(9, 2).unwrap());
    }

    #[test]
    fn flop_match_ok_cases() {
        let spec = MoELayerSpec::homogeneous(8, g(1, 2), 2);
        assert!(validate_flop_match(&spec).is_ok());

        // Generalist 1/8 with k=7 experts of granularity 1/8 sums to 1.
        let mut spec = MoELayerSpec::homogeneous(16, g(1, 8), 7);
        spec.generalist = Rational::new(1, 8).unwrap();
        assert!(validate_flop_match(&spec).is_ok());
    }

    #[test]
    fn flop_match_violation_reports_sum() {
        let spec = MoELayerSpec::homogeneous(8, g(1, 2), 3);
        match validate_flop_match(&spec) {
            FlopMatch::Violation { sum, .. } => {
                assert_eq!(sum, Rational::new(3, 2).unwrap());
            }
            FlopMatch::Ok => panic!("expected violation"),
        }
    }

    #[test]
    fn flop_match_rejects_k_above_n() {
        let spec = MoELayerSpec::homogeneous(2, g(1, 4), 4);
        assert!(!validate_flop_match(&spec).is_ok());
    }

    #[test]
    fn dense_granular_mode_requires_s_one() {
        let mut spec = MoELayerSpec::homogeneous(4, g(1, 4), 4);
        spec.dense_granular_mode = DenseGranularMode::EqualWeight;
        assert!(spec.validate().is_ok());

        spec.pools[0].total = 8; // s = 2 now
        spec.pools[0].active = 8;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn arch_validation() {
        let arch = arch_from_table("10M", 50_000, MoELayerSpec::dense_baseline()).unwrap();
        assert_eq!(arch.layers, 3);
        assert_eq!(arch.model_dim, 48);
        arch.validate().unwrap();

        let mut bad = arch.clone();
        bad.heads = 5; // 48 % 5 != 0
        assert!(bad.validate().is_err());
    }

    #[test]
    fn arch_rejects_fractional_expert_dim() {
        // d=48 gives dense dim 192; g=1/64 gives 3 which is fine, but with
        // d=4 dense dim 16 and g=1/64 the expert dim would be 1/4.
        let spec = MoELayerSpec::homogeneous(64, g(1, 64), 64);
        let arch = ModelArchSpec::new("tiny", 1, 4, 1, 256, spec);
        assert!(arch.validate().is_err());
    }
}
