//! Sweep-grid enumeration over expert configurations.

use super::{
    flop_matched_active_count, ExpertPoolSpec, Granularity, MoELayerSpec, Rational,
};

/// Total expert counts swept in the published grid: powers of two up to 1024.
pub fn paper_pool_sizes() -> Vec<u64> {
    (0..=10).map(|e| 1u64 << e).collect()
}

/// Granularities swept in the published grid: 1, 1/2, ..., 1/64.
pub fn paper_granularities() -> Vec<Granularity> {
    (0..=6)
        .map(|e| Granularity::unit(1 << e).expect("unit fraction"))
        .collect()
}

/// Largest activation sparsity appearing in the published grid.
pub const PAPER_SPARSITY_MAX: u64 = 256;

/// Enumerates FLOP-matched homogeneous configurations: all `(n, g)` with
/// `n` in `n_range`, `g` in `g_range`, `k = 1/g <= n`, and `s = n * g`
/// at most `s_max`. Output is sorted by `(s, n)`.
pub fn enumerate_homogeneous_grid(
    n_range: &[u64],
    g_range: &[Granularity],
    s_max: Rational,
) -> Vec<MoELayerSpec> {
    let mut specs = Vec::new();
    for &n in n_range {
        for &g in g_range {
            let Ok(k) = flop_matched_active_count(g) else {
                continue;
            };
            if k > n {
                continue;
            }
            let s = g.rational().mul_int(n);
            if s > s_max {
                continue;
            }
            specs.push(MoELayerSpec::homogeneous(n, g, k));
        }
    }
    sort_specs(&mut specs);
    specs
}

/// The four heterogeneous granularity groups: `(g1, g2, k1, k2)` with
/// `g1 = 2 * g2`, `k1 = k2 / 2`, and `k1 * g1 = k2 * g2 = 1/2`, paired with
/// the smaller pool sizes `n1` swept for that group (`n2 = 2 * n1`).
const HET_GROUPS: [((u64, u64), (u64, u64), (u64, u64), [u64; 4]); 4] = [
    ((1, 2), (1, 4), (1, 2), [4, 8, 16, 32]),
    ((1, 4), (1, 8), (2, 4), [8, 16, 32, 64]),
    ((1, 8), (1, 16), (4, 8), [16, 32, 64, 128]),
    ((1, 16), (1, 32), (8, 16), [16, 32, 64, 128]),
];

/// Enumerates the two-pool heterogeneous configurations: each pool holds
/// identical active and total expert parameters (`n1 = n2/2`, `k1 = k2/2`,
/// `g1 = 2*g2`), over the published `(g1, g2) x (n1, n2)` table.
pub fn enumerate_heterogeneous_grid() -> Vec<MoELayerSpec> {
    let mut specs = Vec::new();
    for ((g1n, g1d), (g2n, g2d), (k1, k2), n1s) in HET_GROUPS {
        let g1 = Granularity::new(g1n, g1d).expect("table granularity");
        let g2 = Granularity::new(g2n, g2d).expect("table granularity");
        for n1 in n1s {
            let mut spec = MoELayerSpec::homogeneous(n1, g1, k1);
            spec.pools.push(ExpertPoolSpec::new(2 * n1, g2, k2));
            specs.push(spec);
        }
    }
    sort_specs(&mut specs);
    specs
}

/// Homogeneous configurations augmented with a generalist of granularity
/// `g_gen`: routed experts pick up the remaining `1 - g_gen` active share,
/// so `k = (1 - g_gen) / g` must be a positive integer.
pub fn enumerate_generalist_grid(
    n_range: &[u64],
    g_range: &[Granularity],
    g_gen_range: &[Granularity],
    s_max: Rational,
) -> Vec<MoELayerSpec> {
    let mut specs = Vec::new();
    for &g_gen in g_gen_range {
        let Some(remaining) = Rational::ONE.checked_sub(g_gen.rational()) else {
            continue;
        };
        if remaining.is_zero() {
            continue;
        }
        for &n in n_range {
            for &g in g_range {
                // k * g = remaining with integer k.
                let num = remaining.num() * g.rational().den();
                let den = remaining.den() * g.rational().num();
                if num % den != 0 {
                    continue;
                }
                let k = num / den;
                if k == 0 || k > n {
                    continue;
                }
                let mut spec = MoELayerSpec::homogeneous(n, g, k);
                spec.generalist = g_gen.rational();
                if spec.activation_sparsity() > s_max {
                    continue;
                }
                specs.push(spec);
            }
        }
    }
    sort_specs(&mut specs);
    specs
}

fn sort_specs(specs: &mut [MoELayerSpec]) {
    specs.sort_by(|a, b| {
        let sa = a.activation_sparsity();
        let sb = b.activation_sparsity();
        sa.cmp(&sb)
            .then_with(|| {
                let na: u64 = a.pools.iter().map(|p| p.total).sum();
                let nb: u64 = b.pools.iter().map(|p| p.total).sum();
                na.cmp(&nb)
            })
            .then_with(|| a.generalist.cmp(&b.generalist))
    });
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::validate_flop_match;

    #[test]
    fn tiny_grid_exhaustive() {
        // Independent oracle: list the valid cells by hand for n = 2,
        // g in {1, 1/2}, s_max = 128.
        let g_range = [Granularity::ONE, Granularity::unit(2).unwrap()];
        let specs = enumerate_homogeneous_grid(&[2], &g_range, Rational::from_int(128));
        let cells: Vec<(u64, Granularity, u64)> = specs
            .iter()
            .map(|s| (s.pools[0].total, s.pools[0].granularity, s.pools[0].active))
            .collect();
        assert_eq!(
            cells,
            vec![
                (2, Granularity::unit(2).unwrap(), 2),
                (2, Granularity::ONE, 1),
            ]
        );
    }

    #[test]
    fn paper_ranges_include_and_exclude() {
        let specs = enumerate_homogeneous_grid(
            &paper_pool_sizes(),
            &paper_granularities(),
            Rational::from_int(PAPER_SPARSITY_MAX),
        );
        let has = |n: u64, den: u64| {
            specs.iter().any(|s| {
                s.pools[0].total == n && s.pools[0].granularity == Granularity::unit(den).unwrap()
            })
        };
        assert!(has(512, 2)); // s = 256 is in range
        assert!(!has(2, 4)); // k = 4 exceeds n = 2
    }

    #[test]
    fn s_max_one_keeps_only_dense_granular_candidates() {
        let specs = enumerate_homogeneous_grid(
            &paper_pool_sizes(),
            &paper_granularities(),
            Rational::ONE,
        );
        for spec in &specs {
            let pool = &spec.pools[0];
            assert!(spec.activation_sparsity().is_one());
            assert_eq!(pool.active, pool.total);
        }
        assert_eq!(specs.len(), 7); // n in {1..64} with g = 1/n
    }

    #[test]
    fn every_enumerated_spec_is_flop_matched() {
        let mut all = enumerate_homogeneous_grid(
            &paper_pool_sizes(),
            &paper_granularities(),
            Rational::from_int(PAPER_SPARSITY_MAX),
        );
        all.extend(enumerate_heterogeneous_grid());
        all.extend(enumerate_generalist_grid(
            &paper_pool_sizes(),
            &paper_granularities(),
            &[
                Granularity::unit(2).unwrap(),
                Granularity::unit(4).unwrap(),
                Granularity::unit(8).unwrap(),
            ],
            Rational::from_int(PAPER_SPARSITY_MAX),
        ));
        assert!(!all.is_empty());
        for spec in &all {
            assert!(validate_flop_match(spec).is_ok(), "spec: {spec:?}");
            spec.validate().unwrap();
        }
    }

    #[test]
    fn heterogeneous_rows_match_published_table() {
        // The sixteen (g1, g2, n1, n2, s) rows, typed from the table.
        let expected: Vec<((u64, u64), (u64, u64), u64, u64, u64)> = vec![
            ((1, 2), (1, 4), 4, 8, 4),
            ((1, 2), (1, 4), 8, 16, 8),
            ((1, 2), (1, 4), 16, 32, 16),
            ((1, 2), (1, 4), 32, 64, 32),
            ((1, 4), (1, 8), 8, 16, 4),
            ((1, 4), (1, 8), 16, 32, 8),
            ((1, 4), (1, 8), 32, 64, 16),
            ((1, 4), (1, 8), 64, 128, 32),
            ((1, 8), (1, 16), 16, 32, 4),
            ((1, 8), (1, 16), 32, 64, 8),
            ((1, 8), (1, 16), 64, 128, 16),
            ((1, 8), (1, 16), 128, 256, 32),
            ((1, 16), (1, 32), 16, 32, 2),
            ((1, 16), (1, 32), 32, 64, 4),
            ((1, 16), (1, 32), 64, 128, 8),
            ((1, 16), (1, 32), 128, 256, 16),
        ];
        let specs = enumerate_heterogeneous_grid();
        assert_eq!(specs.len(), expected.len());
        let mut got: Vec<((u64, u64), (u64, u64), u64, u64, u64)> = specs
            .iter()
            .map(|s| {
                let p1 = &s.pools[0];
                let p2 = &s.pools[1];
                (
                    (p1.granularity.rational().num(), p1.granularity.rational().den()),
                    (p2.granularity.rational().num(), p2.granularity.rational().den()),
                    p1.total,
                    p2.total,
                    s.activation_sparsity().as_integer().unwrap(),
                )
            })
            .collect();
        let mut want = expected.clone();
        got.sort();
        want.sort();
        assert_eq!(got, want);
    }

    #[test]
    fn generalist_grid_respects_constraint() {
        // With g_gen = 1/8, experts of granularity 1/2 cannot FLOP-match
        // (7/8 is not a multiple of 1/2).
        let specs = enumerate_generalist_grid(
            &paper_pool_sizes(),
            &paper_granularities(),
            &[Granularity::unit(8).unwrap()],
            Rational::from_int(64),
        );
        assert!(!specs.is_empty());
        for spec in &specs {
            assert!(spec.pools[0].granularity <= Granularity::unit(8).unwrap());
            assert!(validate_flop_match(spec).is_ok());
        }
    }
}
