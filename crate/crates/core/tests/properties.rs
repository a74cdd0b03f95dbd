use proptest::prelude::*;

use cospec_core::arbitration::{
    acceptance_prob, build_hybrid_mask, cospec_round_length, run_cospec, sigmoid,
    ArbitrationPolicy, DecisionMode,
};
use cospec_core::diagnostics::{complementarity_gap, mismatch_breakdown, BranchUtilities};
use cospec_core::lm::{
    generate_autoregressive, make_chain_task, make_noisy_expert, ChainFamily, DecodeConfig,
    TabularModel,
};
use cospec_core::rl::{
    allocate_advantages, effective_actions, rebalance_group, round_progress, Rollout,
    RewardConfig,
};
use cospec_core::rng::run_stream;
use cospec_core::spd::{
    run_vanilla_spd, speculative_marginal, strict_round_length, DraftBlock, RoundRecord,
    Verification,
};
use std::sync::OnceLock;

fn experts() -> &'static (TabularModel, TabularModel) {
    static CELL: OnceLock<(TabularModel, TabularModel)> = OnceLock::new();
    CELL.get_or_init(|| {
        let fam = ChainFamily::new(3);
        (make_noisy_expert(&fam, 0.90, 1).unwrap(), make_noisy_expert(&fam, 0.97, 0).unwrap())
    })
}

fn record(delta: Vec<u8>, actions: Vec<u8>, s: usize, ell: Vec<f64>) -> RoundRecord {
    let k = delta.len();
    let probs = (0..k).map(|i| (i < s).then_some(if delta[i] == 1 { 1.0 } else { 0.5 })).collect();
    RoundRecord {
        r: 1,
        prefix_len: 0,
        block: DraftBlock { tokens: vec![0; k], probs: vec![vec![]; k] },
        verification: Verification { tokens: vec![0; k + 1], probs: vec![vec![]; k + 1], draft_log_probs: ell },
        delta,
        actions: Some(actions),
        s,
        probs,
        features: vec![None; k],
    }
}

/// Δ and actions with forced acceptance at matches, plus the resulting length.
fn round_strategy() -> impl Strategy<Value = (Vec<u8>, Vec<u8>, Vec<f64>)> {
    (1usize..12).prop_flat_map(|k| {
        (
            prop::collection::vec(0u8..3, k),
            prop::collection::vec(0.0f64..6.0, k),
        )
            .prop_map(|(codes, ell)| {
                let delta = codes.iter().map(|&c| (c == 0) as u8).collect();
                let actions = codes.iter().map(|&c| (c != 2) as u8).collect();
                (delta, actions, ell.into_iter().map(|x| -x).collect())
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn strict_length_is_first_mismatch(delta in prop::collection::vec(0u8..2, 1..30)) {
        let s = strict_round_length(&delta);
        prop_assert!(s >= 1 && s <= delta.len() + 1);
        prop_assert!(delta[..s - 1].iter().all(|&d| d == 1));
        if s <= delta.len() {
            prop_assert_eq!(delta[s - 1], 0);
        }
    }

    #[test]
    fn reject_all_is_strict((delta, _, _) in round_strategy()) {
        let rejects: Vec<u8> = delta.clone();
        prop_assert_eq!(cospec_round_length(&delta, &rejects).unwrap(), strict_round_length(&delta));
        let accepts = vec![1u8; delta.len()];
        prop_assert_eq!(cospec_round_length(&delta, &accepts).unwrap(), delta.len() + 1);
    }

    #[test]
    fn cospec_length_dominates_strict((delta, actions, _) in round_strategy()) {
        let c = cospec_round_length(&delta, &actions).unwrap();
        prop_assert!(c >= strict_round_length(&delta));
    }

    #[test]
    fn forced_acceptance(z in -50.0f64..50.0) {
        prop_assert_eq!(acceptance_prob(z, 1), 1.0);
        let p = acceptance_prob(z, 0);
        prop_assert!((0.0..=1.0).contains(&p));
        prop_assert!((p - sigmoid(z)).abs() < 1e-15);
    }

    #[test]
    fn progress_bounds((delta, actions, ell) in round_strategy()) {
        let k = delta.len();
        let s = cospec_round_length(&delta, &actions).unwrap();
        let rec = record(delta.clone(), actions, s, ell);
        if !effective_actions(&rec).is_empty() {
            let rho = round_progress(&delta, s, k).unwrap();
            prop_assert!((0.0..=1.0).contains(&rho));
            prop_assert_eq!(rho == 1.0, s == k + 1);
            let first = delta.iter().position(|&d| d == 0).unwrap() + 1;
            prop_assert_eq!(rho == 0.0, s == first);
        }
    }

    #[test]
    fn credit_stays_in_effective_set(
        rounds in prop::collection::vec(round_strategy(), 1..4),
        corr in 0u8..2,
        adv in -3.0f64..3.0,
    ) {
        let recs: Vec<RoundRecord> = rounds
            .into_iter()
            .map(|(d, a, l)| {
                let s = cospec_round_length(&d, &a).unwrap();
                record(d, a, s, l)
            })
            .collect();
        let ro = Rollout::new(0, recs, corr, vec![]);
        let cfg = RewardConfig::default();
        let credit = allocate_advantages(&ro, adv, &cfg);
        for c in &credit.entries {
            prop_assert!(effective_actions(&ro.rounds[c.round]).contains(&c.pos));
        }
        let gsum: f64 = credit.entries.iter().map(|c| c.reward.abs()).sum();
        if corr == 0 && gsum > 0.0 {
            prop_assert!((credit.total_abs() - adv.abs()).abs() < 1e-9);
        }
    }

    #[test]
    fn rebalancing_centers_and_keeps_signs(
        pos in prop::collection::vec(0.01f64..30.0, 1..6),
        neg in prop::collection::vec(-30.0f64..-0.01, 1..6),
    ) {
        let mut returns = pos.clone();
        returns.extend(&neg);
        let mut corr = vec![1u8; pos.len()];
        corr.extend(vec![0u8; neg.len()]);
        let bal = rebalance_group(&returns, &corr, 1e-12).unwrap();
        let scale: f64 = returns.iter().map(|x| x.abs()).sum();
        prop_assert!(bal.iter().sum::<f64>().abs() <= 1e-6 * scale);
        for (b, r) in bal.iter().zip(&returns) {
            prop_assert!(b.signum() == r.signum());
        }
    }

    #[test]
    fn complementarity_identity(u in prop::collection::vec((0.0f64..1.0, 0.0f64..1.0), 1..64)) {
        let (lhs, rhs) = complementarity_gap(&u).unwrap();
        prop_assert!((lhs - rhs).abs() <= 1e-12);
        prop_assert!(rhs >= 0.0);
    }

    #[test]
    fn breakdown_partitions(bits in prop::collection::vec((0u8..2, 0u8..2, 0u8..2), 1..80)) {
        let items: Vec<(BranchUtilities, u8)> = bits
            .iter()
            .map(|&(d, t, a)| (BranchUtilities { draft: d as f64, target: t as f64, samples: 1, exact: true }, a))
            .collect();
        let b = mismatch_breakdown(&items).unwrap();
        prop_assert!((b.share_sum() - 1.0).abs() < 1e-9);
        let counted: usize = b.rows.iter().skip(1).map(|r| r.count).sum();
        prop_assert_eq!(counted, items.len());
    }

    #[test]
    fn mask_rules(lc in 1usize..30, k in 1usize..12) {
        let m = build_hybrid_mask(lc, k).unwrap();
        prop_assert_eq!(m.len(), lc + 2 * k + 3);
        for i in 0..m.len() {
            for j in 0..m.len() {
                let want = if i < lc { j <= i } else { true };
                prop_assert_eq!(m.allowed(i, j), want);
            }
        }
    }

    #[test]
    fn marginal_is_target(raw_d in prop::collection::vec(0.01f64..1.0, 2..8), seed in any::<u64>()) {
        let n = raw_d.len();
        let zd: f64 = raw_d.iter().sum();
        let pd: Vec<f64> = raw_d.iter().map(|x| x / zd).collect();
        let raw_t: Vec<f64> = (0..n).map(|i| ((seed >> (i * 7)) & 0x7f) as f64 + 1.0).collect();
        let zt: f64 = raw_t.iter().sum();
        let pt: Vec<f64> = raw_t.iter().map(|x| x / zt).collect();
        let m = speculative_marginal(&pd, &pt);
        for (a, b) in m.iter().zip(&pt) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn vanilla_is_lossless(seed in any::<u64>(), k in 1usize..30) {
        let (draft, target) = experts();
        let task = make_chain_task(seed, 3);
        let cfg = DecodeConfig::greedy(1 << 20);
        let mut rng = run_stream("prop", seed, 0);
        let (reference, _) = generate_autoregressive(target, &task, &cfg, &mut rng).unwrap();
        let run = run_vanilla_spd(draft, target, &task, k, &cfg, &mut rng).unwrap();
        prop_assert_eq!(&run.output, &reference);
        let cospec = run_cospec(
            draft, target, &ArbitrationPolicy::AlwaysReject, &task, k,
            DecisionMode::Threshold(0.6), &cfg, &mut rng,
        ).unwrap();
        prop_assert_eq!(&cospec.output, &reference);
        prop_assert_eq!(cospec.stats.round_lengths, run.stats.round_lengths);
    }
}
