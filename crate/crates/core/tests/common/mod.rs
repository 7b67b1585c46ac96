#![allow(dead_code)]

use infodesign::{GameSpec, OffSupport, SenderPrescription};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const CORPUS: [&str; 6] = [
    "judge",
    "aligned",
    "conflict",
    "persuasion",
    "invest",
    "two_receivers",
];

pub fn corpus(name: &str) -> GameSpec {
    let path = format!("{}/../../corpus/{name}.json", env!("CARGO_MANIFEST_DIR"));
    GameSpec::from_path(path).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random point of the simplex, occasionally with a zero entry.
pub fn random_dist(rng: &mut impl Rng, n: usize, allow_zero: bool) -> Vec<f64> {
    loop {
        let w: Vec<f64> = (0..n)
            .map(|_| {
                if allow_zero && rng.gen_bool(0.2) {
                    0.0
                } else {
                    rng.gen_range(0.05..1.0)
                }
            })
            .collect();
        let total: f64 = w.iter().sum();
        if total > 0.0 {
            return w.into_iter().map(|v| v / total).collect();
        }
    }
}

/// Random game with small alphabets. Rewards are drawn from a few levels so
/// that distinct states often produce the same observation.
pub fn random_spec(rng: &mut impl Rng, max_receivers: usize) -> GameSpec {
    let n_states = rng.gen_range(2..=3);
    let n_signals = rng.gen_range(1..=3);
    let n_receivers = rng.gen_range(1..=max_receivers);
    let action_counts: Vec<usize> = (0..n_receivers)
        .map(|_| {
            if n_receivers == 1 {
                rng.gen_range(2..=3)
            } else {
                2
            }
        })
        .collect();
    let n_joint: usize = action_counts.iter().product();
    let transition = (0..n_states)
        .map(|_| {
            (0..n_joint)
                .map(|_| random_dist(rng, n_states, false))
                .collect()
        })
        .collect();
    let level = |rng: &mut dyn rand::RngCore| [0.0, 0.5, 1.0][rng.gen_range(0..3)];
    let sender_reward = (0..n_states)
        .map(|_| (0..n_joint).map(|_| level(rng)).collect())
        .collect();
    let receiver_rewards = (0..n_receivers)
        .map(|_| {
            (0..n_states)
                .map(|_| (0..n_joint).map(|_| level(rng)).collect())
                .collect()
        })
        .collect();
    GameSpec {
        schema_version: "1".into(),
        n_states,
        n_signals,
        n_receivers,
        action_counts,
        transition,
        initial: random_dist(rng, n_states, false),
        sender_reward,
        receiver_rewards,
        horizon: rng.gen_range(1..=3),
        discount: 0.9,
    }
}

pub fn random_prescription(
    rng: &mut impl Rng,
    n_states: usize,
    n_signals: usize,
) -> SenderPrescription {
    SenderPrescription::new(
        (0..n_states)
            .map(|_| random_dist(rng, n_signals, true))
            .collect(),
    )
    .unwrap()
}

pub const STRICT: OffSupport = OffSupport::Reject;
