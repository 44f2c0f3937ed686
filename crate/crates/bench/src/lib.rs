//! Fixtures shared by the benchmarks.

use bsa_core::actors::EnvEvent;
use bsa_core::harness::ScenarioConfig;
use bsa_core::{Keypair, SigScheme, TweakData};

/// Tweak data for an instance with `arbiters` arbitration oracles.
pub fn tweak(arbiters: usize) -> TweakData {
    let dep = Keypair::from_seed(b"bench/dep").public();
    TweakData {
        depositor: dep,
        operator: Keypair::from_seed(b"bench/to").public(),
        arbiters: (0..arbiters).map(|i| Keypair::from_seed(format!("bench/ao{i}").as_bytes()).public()).collect(),
        t1: 144,
        t2: 72,
        destination_address: b"bench:dest".to_vec(),
        return_address: dep.key_address().0.to_vec(),
    }
}

/// A three-deposit instance that exits at tick 5.
pub fn honest_exit(scheme: SigScheme) -> ScenarioConfig {
    ScenarioConfig {
        name: "bench-honest-exit".into(),
        scheme,
        amounts: vec![100_000, 200_000, 300_000],
        ..ScenarioConfig::default()
    }
    .with_event(5, EnvEvent::Exit)
}
