use proptest::prelude::*;

use trunc_mc::envs::{CorridorEnv, MilestoneEnv};
use trunc_mc::estimators::{collect_batch, off_policy_estimate, on_policy_estimate, per_length_renyi};
use trunc_mc::policies::renyi2;
use trunc_mc::schedule::{coefficients, optimal_dcs};
use trunc_mc::{PolicyParams, TruncatedBatch};

fn milestone_batch(gamma: f64, budget: u64, p: f64, seed: u64) -> (MilestoneEnv, PolicyParams, TruncatedBatch) {
    let env = MilestoneEnv::new(20).unwrap();
    let behavior = PolicyParams::constant(1, &[p, 1.0 - p]).unwrap();
    let dcs = optimal_dcs(&coefficients(gamma, 20).unwrap(), budget).unwrap().with_gamma(gamma);
    let batch = collect_batch(&env, &behavior, &dcs, seed).unwrap();
    (env, behavior, batch)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn batches_spend_the_schedule(gamma in 0.3f64..0.999, extra in 0u64..400, p in 0.05f64..0.95, seed in any::<u64>()) {
        let (_, _, batch) = milestone_batch(gamma, 20 + extra, p, seed);
        prop_assert_eq!(batch.transitions(), 20 + extra);
        for (h, group) in batch.by_length().iter().enumerate() {
            prop_assert_eq!(group.len() as u64, batch.dcs().m()[h]);
            prop_assert!(group.iter().all(|traj| traj.len() == h + 1));
        }
    }

    #[test]
    fn collection_is_a_function_of_the_seed(extra in 0u64..200, seed in any::<u64>()) {
        let env = CorridorEnv::dense(0.9).unwrap();
        let policy = PolicyParams::constant(1, &[0.7, 0.3]).unwrap();
        let dcs = optimal_dcs(&coefficients(0.99, 1000).unwrap(), 1000 + extra).unwrap();
        let a = collect_batch(&env, &policy, &dcs, seed).unwrap();
        let b = collect_batch(&env, &policy, &dcs, seed).unwrap();
        prop_assert_eq!(a.to_records(), b.to_records());
    }

    #[test]
    fn off_policy_at_behavior_is_on_policy(gamma in 0.3f64..0.999, extra in 0u64..400, p in 0.05f64..0.95, seed in any::<u64>()) {
        let (_, behavior, batch) = milestone_batch(gamma, 20 + extra, p, seed);
        let on = on_policy_estimate(&batch, gamma).unwrap();
        let off = off_policy_estimate(&batch, gamma, &behavior, &behavior, None).unwrap();
        prop_assert_eq!(on.to_bits(), off.to_bits());
        prop_assert!(per_length_renyi(&batch, &behavior, &behavior).unwrap().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn constant_policies_give_geometric_divergence(p in 0.05f64..0.95, q in 0.05f64..0.95, extra in 0u64..300, seed in any::<u64>()) {
        let (_, behavior, batch) = milestone_batch(0.9, 20 + extra, q, seed);
        let target = PolicyParams::constant(1, &[p, 1.0 - p]).unwrap();
        let d = renyi2(&[p, 1.0 - p], &[q, 1.0 - q]);
        let plug_in = per_length_renyi(&batch, &target, &behavior).unwrap();
        for (h, v) in plug_in.iter().enumerate() {
            let expected = d.powi(h as i32 + 1);
            prop_assert!(((v - expected) / expected).abs() < 1e-12);
        }
    }

    #[test]
    fn records_preserve_estimates(gamma in 0.3f64..0.999, extra in 0u64..300, p in 0.05f64..0.95, seed in any::<u64>()) {
        let (_, behavior, batch) = milestone_batch(gamma, 20 + extra, p, seed);
        let restored = TruncatedBatch::from_records(&batch.to_records()).unwrap();
        prop_assert_eq!(
            on_policy_estimate(&batch, gamma).unwrap().to_bits(),
            on_policy_estimate(&restored, gamma).unwrap().to_bits()
        );
        let target = PolicyParams::constant(1, &[0.49, 0.51]).unwrap();
        prop_assert_eq!(
            off_policy_estimate(&batch, gamma, &target, &behavior, Some(100.0)).unwrap().to_bits(),
            off_policy_estimate(&restored, gamma, &target, &behavior, Some(100.0)).unwrap().to_bits()
        );
    }
}

#[test]
fn optimal_schedule_beats_uniform_in_mean_squared_error() {
    let gamma = 0.9;
    let env = MilestoneEnv::new(20).unwrap();
    let policy = PolicyParams::constant(1, &[0.5, 0.5]).unwrap();
    let exact = env.exact_return(&policy, gamma).unwrap();
    let mse = |dcs: &trunc_mc::Dcs| {
        let runs = 3000u64;
        (0..runs)
            .map(|s| (on_policy_estimate(&collect_batch(&env, &policy, dcs, s).unwrap(), gamma).unwrap() - exact).powi(2))
            .sum::<f64>()
            / runs as f64
    };
    let optimal = optimal_dcs(&coefficients(gamma, 20).unwrap(), 400).unwrap().with_gamma(gamma);
    let uniform = trunc_mc::schedule::uniform_dcs(20, 400).unwrap().with_gamma(gamma);
    assert!(mse(&optimal) < mse(&uniform));
}
