//! Expert dispatch: dropless gather/scatter and capacity-limited dropping.

use crate::config::Rational;

use super::router::RoutingOutcome;

/// One routed assignment: which token, and which of its k slots.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DispatchSlot {
    pub token: usize,
    pub slot: usize,
}

/// Kept assignments grouped per expert, token order ascending within each.
#[derive(Clone, Debug)]
pub struct DispatchPlan {
    pub per_expert: Vec<Vec<DispatchSlot>>,
}

impl DispatchPlan {
    pub fn kept_count(&self) -> u64 {
        self.per_expert.iter().map(|v| v.len() as u64).sum()
    }
}

/// Per-expert capacity `ceil(cf * tokens * k / n)`.
pub fn capacity_limit(cf: Rational, tokens: usize, k: usize, n: usize) -> usize {
    let num = u128::from(cf.num()) * tokens as u128 * k as u128;
    let den = u128::from(cf.den()) * n as u128;
    usize::try_from(num.div_ceil(den)).expect("capacity fits usize")
}

fn group_by_expert(outcome: &RoutingOutcome) -> Vec<Vec<DispatchSlot>> {
    let mut per_expert = vec![Vec::new(); outcome.num_experts];
    for token in 0..outcome.tokens {
        for slot in 0..outcome.k {
            let e = outcome.experts[outcome.slot(token, slot)] as usize;
            per_expert[e].push(DispatchSlot { token, slot });
        }
    }
    per_expert
}

/// Dropless dispatch: every assignment is kept. Evaluating each expert on
/// its full batch reproduces the per-token combine exactly; nothing is
/// ever dropped regardless of imbalance.
pub fn dispatch_dropless(outcome: &RoutingOutcome) -> DispatchPlan {
    debug_assert!(outcome.dropped.iter().all(|&d| !d));
    DispatchPlan {
        per_expert: group_by_expert(outcome),
    }
}

/// Capacity-limited dispatch: each expert keeps its highest-affinity
/// assignments up to `ceil(cf * tokens * k / n)`, ties going to the earlier
/// token position. Overflow slots are flagged dropped and the outcome's
/// combine weights are renormalized over the survivors.
pub fn dispatch_capacity(outcome: &mut RoutingOutcome, cf: Rational) -> DispatchPlan {
    let cap = capacity_limit(cf, outcome.tokens, outcome.k, outcome.num_experts);
    let mut per_expert = group_by_expert(outcome);
    for slots in &mut per_expert {
        if slots.len() <= cap {
            continue;
        }
        slots.sort_by(|a, b| {
            let aa = outcome.affinity[outcome.slot(a.token, a.slot)];
            let ab = outcome.affinity[outcome.slot(b.token, b.slot)];
            ab.total_cmp(&aa).then(a.token.cmp(&b.token))
        });
        for dropped in slots.split_off(cap) {
            let i = outcome.slot(dropped.token, dropped.slot);
            outcome.dropped[i] = true;
        }
        slots.sort_by_key(|s| (s.token, s.slot));
    }
    outcome.renormalize_combine();
    DispatchPlan { per_expert }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn outcome_from_assignments(n: usize, k: usize, experts: Vec<u32>) -> RoutingOutcome {
        let tokens = experts.len() / k;
        // Affinity descending in token order so tie-breaks are exercised
        // through equal values elsewhere.
        let affinity = vec![1.0 / k as f64; tokens * k];
        let mut o = RoutingOutcome {
            tokens,
            num_experts: n,
            k,
            experts,
            affinity,
            combine: vec![0.0; tokens * k],
            dropped: vec![false; tokens * k],
        };
        o.renormalize_combine();
        o
    }

    #[test]
    fn dropless_uniform_assignment() {
        // 8 tokens, 4 experts, k=1, round-robin: every expert gets 2.
        let experts: Vec<u32> = (0..8).map(|t| (t % 4) as u32).collect();
        let outcome = outcome_from_assignments(4, 1, experts);
        let plan = dispatch_dropless(&outcome);
        assert!(plan.per_expert.iter().all(|v| v.len() == 2));
        assert_eq!(outcome.drop_count(), 0);
    }

    #[test]
    fn dropless_keeps_everything_even_fully_skewed() {
        let outcome = outcome_from_assignments(4, 1, vec![0; 8]);
        let plan = dispatch_dropless(&outcome);
        assert_eq!(plan.per_expert[0].len(), 8);
        assert_eq!(outcome.drop_count(), 0);
    }

    #[test]
    fn capacity_formula_hand_case() {
        // T=8, n=2, k=1, cf=1: capacity 4; all tokens to expert 0 drops 4.
        assert_eq!(capacity_limit(Rational::ONE, 8, 1, 2), 4);
        let mut outcome = outcome_from_assignments(2, 1, vec![0; 8]);
        let plan = dispatch_capacity(&mut outcome, Rational::ONE);
        assert_eq!(plan.per_expert[0].len(), 4);
        assert_eq!(outcome.drop_count(), 4);
        // Equal affinities: ties keep the earliest tokens.
        let kept: Vec<usize> = plan.per_expert[0].iter().map(|s| s.token).collect();
        assert_eq!(kept, vec![0, 1, 2, 3]);
    }

    #[test]
    fn capacity_two_balanced_never_drops() {
        let experts: Vec<u32> = (0..16).map(|t| (t % 4) as u32).collect();
        let mut outcome = outcome_from_assignments(4, 1, experts);
        let cf = Rational::from_int(2);
        dispatch_capacity(&mut outcome, cf);
        assert_eq!(outcome.drop_count(), 0);
    }

    #[test]
    fn capacity_keeps_highest_affinity() {
        let mut outcome = outcome_from_assignments(2, 1, vec![0, 0, 0, 0]);
        outcome.affinity = vec![0.1, 0.9, 0.5, 0.9];
        let plan = dispatch_capacity(&mut outcome, Rational::ONE);
        // cap = ceil(1*4*1/2) = 2: keeps the two 0.9s (tie -> earlier token 1, then 3).
        let kept: Vec<usize> = plan.per_expert[0].iter().map(|s| s.token).collect();
        assert_eq!(kept, vec![1, 3]);
        assert_eq!(outcome.dropped, vec![true, false, true, false]);
    }

    proptest! {
        #[test]
        fn dropless_never_drops_and_covers_all(
            seed_experts in proptest::collection::vec(0u32..8, 64),
        ) {
            let k = 2;
            let mut experts = seed_experts;
            experts.truncate(64);
            let outcome = outcome_from_assignments(8, k, experts);
            let plan = dispatch_dropless(&outcome);
            prop_assert_eq!(plan.kept_count(), (outcome.tokens * k) as u64);
            prop_assert_eq!(outcome.drop_count(), 0);
            // Per-expert batch sizes equal the raw loads.
            let loads = outcome.raw_loads();
            for (e, slots) in plan.per_expert.iter().enumerate() {
                prop_assert_eq!(slots.len() as u64, loads[e]);
            }
        }

        #[test]
        fn capacity_bounds_and_conservation(
            seed_experts in proptest::collection::vec(0u32..4, 48),
            cf_num in 1u64..6,
        ) {
            let k = 2;
            let cf = Rational::new(cf_num, 2).unwrap();
            let mut outcome = outcome_from_assignments(4, k, seed_experts);
            let tokens = outcome.tokens;
            let plan = dispatch_capacity(&mut outcome, cf);
            let cap = capacity_limit(cf, tokens, k, 4);
            for slots in &plan.per_expert {
                prop_assert!(slots.len() <= cap);
            }
            prop_assert_eq!(
                plan.kept_count() + outcome.drop_count(),
                (tokens * k) as u64
            );
        }

        #[test]
        fn huge_capacity_equals_dropless(
            seed_experts in proptest::collection::vec(0u32..4, 48),
        ) {
            let k = 2;
            let mut capped = outcome_from_assignments(4, k, seed_experts.clone());
            let plan_cap = dispatch_capacity(&mut capped, Rational::from_int(1_000_000_000));
            let free = outcome_from_assignments(4, k, seed_experts);
            let plan_free = dispatch_dropless(&free);
            prop_assert_eq!(capped.drop_count(), 0);
            for (a, b) in plan_cap.per_expert.iter().zip(&plan_free.per_expert) {
                prop_assert_eq!(a, b);
            }
            prop_assert_eq!(capped.combine, free.combine);
        }
    }
}
