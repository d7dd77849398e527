use proptest::prelude::*;
use skillmdp::env::{mastermind_feedback, PegFeedback};
use skillmdp::gate::{clipped_term, return_to_go, surrogate, GateInput, GateStep, GateTrajectory};
use skillmdp::testkit::{naive_peg_count, naive_return_to_go, naive_surrogate};

fn trajectory() -> impl Strategy<Value = GateTrajectory> {
    (1usize..=20)
        .prop_flat_map(|len| {
            (
                prop::collection::vec(-1.0f64..1.0, len),
                prop::collection::vec((any::<bool>(), -5.0f64..0.0, -3.0f64..3.0), len),
            )
        })
        .prop_map(|(rewards, raw)| {
            let steps = raw
                .into_iter()
                .enumerate()
                .filter(|(_, (keep, _, _))| *keep)
                .map(|(index, (_, beh, delta))| GateStep {
                    index,
                    behavior_logprob: beh,
                    candidate_logprob: beh + delta,
                })
                .collect();
            GateTrajectory { rewards, steps }
        })
}

fn gate_input() -> impl Strategy<Value = GateInput> {
    (
        prop::collection::vec(trajectory(), 1..=8),
        prop::sample::select(vec![0.5, 0.9, 1.0]),
        prop::sample::select(vec![0.1, 0.2, 0.3]),
        -1.0f64..1.0,
    )
        .prop_map(|(trajectories, gamma, epsilon, return_baseline)| GateInput {
            trajectories,
            gamma,
            epsilon,
            return_baseline,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn surrogate_matches_oracle(input in gate_input()) {
        match (surrogate(&input), naive_surrogate(&input)) {
            (Ok(s), Some(n)) => prop_assert!((s.value - n).abs() < 1e-9, "{} vs {}", s.value, n),
            (Err(_), None) => {}
            (a, b) => prop_assert!(false, "disagree: {a:?} vs {b:?}"),
        }
    }

    #[test]
    fn return_to_go_matches_oracle(rewards in prop::collection::vec(-4i32..=4, 0..=20), g in 0usize..3) {
        let gamma = [0.25, 0.5, 1.0][g];
        let rewards: Vec<f64> = rewards.into_iter().map(|r| f64::from(r) / 4.0).collect();
        prop_assert_eq!(return_to_go(&rewards, gamma), naive_return_to_go(&rewards, gamma));
    }

    #[test]
    fn clip_is_pessimistic(rho in 1e-6f64..1e6, adv in -10.0f64..10.0, eps in 0.01f64..0.5) {
        prop_assert!(clipped_term(rho, adv, eps).unwrap() <= rho * adv);
    }

    #[test]
    fn feedback_matches_oracle(secret in prop::collection::vec(1u8..=6, 4), guess in prop::collection::vec(1u8..=6, 4)) {
        let fast = mastermind_feedback(&secret, &guess).unwrap();
        prop_assert_eq!(Some(fast), naive_peg_count(&secret, &guess));
        prop_assert!(fast.black + fast.white <= 4);
    }
}

#[test]
fn feedback_exhaustive_small() {
    let codes: Vec<Vec<u8>> = (1..=3u8)
        .flat_map(|a| (1..=3u8).filter(move |&b| b != a).map(move |b| vec![a, b]))
        .collect();
    assert_eq!(codes.len(), 6);
    let mut pairs = 0;
    for s in &codes {
        for g in &codes {
            assert_eq!(Some(mastermind_feedback(s, g).unwrap()), naive_peg_count(s, g));
            pairs += 1;
        }
    }
    assert_eq!(pairs, 36);
    assert_eq!(
        mastermind_feedback(&[1, 2], &[2, 1]).unwrap(),
        PegFeedback { black: 0, white: 2 }
    );
}

#[test]
fn return_to_go_worked_example() {
    assert_eq!(return_to_go(&[0.0, 0.0, 1.0], 0.5), vec![0.25, 0.5, 1.0]);
}
