//! Architecture spec files: TOML on disk, with a normalized canonical form
//! whose SHA-256 hash identifies a configuration.

use sha2::{Digest, Sha256};

use super::{ConfigError, ModelArchSpec};

/// Parses and validates a spec file.
///
/// Granularities and rationals are written as strings like `"1/8"`:
///
/// ```toml
/// name = "tiny-moe"
/// layers = 2
/// model_dim = 32
/// heads = 4
/// vocab = 64
///
/// [moe]
/// g_gen = "0"
/// lb_weight = 0.01
/// z_weight = 0.001
/// bias_step = 0.0
/// dense_granular_mode = "off"
///
/// [moe.routing]
/// mode = "dropless"
///
/// [[moe.pool]]
/// n = 4
/// g = "1/2"
/// k = 2
/// ```
pub fn parse_arch_spec(text: &str) -> Result<ModelArchSpec, ConfigError> {
    let arch: ModelArchSpec =
        toml::from_str(text).map_err(|e| ConfigError::SpecParse(e.to_string()))?;
    arch.validate()?;
    Ok(arch)
}

/// Serializes a spec to its normalized canonical form: fixed field order,
/// reduced rationals, no comments. Equal specs always produce equal text.
pub fn canonical_toml(arch: &ModelArchSpec) -> String {
    toml::to_string(arch).expect("arch spec serializes")
}

/// Hex SHA-256 of the canonical form; the run-identity key.
pub fn spec_hash(arch: &ModelArchSpec) -> String {
    let digest = Sha256::digest(canonical_toml(arch).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{arch_from_table, Granularity, MoELayerSpec, RoutingPolicy};

    fn sample() -> ModelArchSpec {
        let spec = MoELayerSpec::homogeneous(8, Granularity::unit(4).unwrap(), 4);
        arch_from_table("10M", 50_000, spec).unwrap()
    }

    #[test]
    fn round_trip_preserves_spec() {
        let arch = sample();
        let text = canonical_toml(&arch);
        let back = parse_arch_spec(&text).unwrap();
        assert_eq!(back, arch);
    }

    #[test]
    fn canonical_form_is_stable_under_reparse() {
        let arch = sample();
        let text = canonical_toml(&arch);
        let again = canonical_toml(&parse_arch_spec(&text).unwrap());
        assert_eq!(text, again);
        assert_eq!(spec_hash(&arch), spec_hash(&parse_arch_spec(&text).unwrap()));
    }

    #[test]
    fn unreduced_granularity_normalizes_to_same_hash() {
        let a = sample();
        let mut text = canonical_toml(&a);
        text = text.replace("\"1/4\"", "\"2/8\"");
        let b = parse_arch_spec(&text).unwrap();
        assert_eq!(spec_hash(&a), spec_hash(&b));
    }

    #[test]
    fn capacity_routing_round_trips() {
        let mut arch = sample();
        arch.layer_spec.routing = RoutingPolicy::Capacity {
            factor: "2".parse().unwrap(),
        };
        let text = canonical_toml(&arch);
        assert!(text.contains("mode = \"capacity\""));
        let back = parse_arch_spec(&text).unwrap();
        assert_eq!(back, arch);
    }

    #[test]
    fn parse_rejects_invalid() {
        let arch = sample();
        let text = canonical_toml(&arch).replace("k = 4", "k = 40");
        assert!(parse_arch_spec(&text).is_err());
    }

    #[test]
    fn example_from_doc_comment_parses() {
        let text = r#"
name = "tiny-moe"
layers = 2
model_dim = 32
heads = 4
vocab = 64

[moe]
g_gen = "0"
lb_weight = 0.01
z_weight = 0.001

[moe.routing]
mode = "dropless"

[[moe.pool]]
n = 4
g = "1/2"
k = 2
"#;
        let arch = parse_arch_spec(text).unwrap();
        assert_eq!(arch.layers, 2);
        assert_eq!(arch.layer_spec.pools.len(), 1);
        assert!(arch.layer_spec.routing.is_dropless());
    }
}
