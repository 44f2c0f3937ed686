//! Randomized adversarial scenarios for the one-honest-party property.
//!
//! Arbiters fail only by going offline and the operator is rational: it
//! either behaves or attacks with a false rebalance or a false challenge.

use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{run_scenario, ArbiterConfig, HarnessError, ScenarioConfig, FOREVER};
use crate::actors::{DepositorBehavior, Downtime, EnvEvent, OperatorBehavior, RebalanceModel};
use crate::keys::SigScheme;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepCase {
    pub config: ScenarioConfig,
    pub correct_arbiters: usize,
    pub honest_operator: bool,
}

impl SweepCase {
    /// At least one correct arbiter or an honest operator.
    pub fn trust_assumption(&self) -> bool {
        self.correct_arbiters > 0 || self.honest_operator
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub total: usize,
    pub assumption_held: usize,
    /// Scenarios where the assumption held but safety failed.
    pub violations: Vec<(String, Vec<String>)>,
    /// Scenarios outside the assumption that lost safety.
    pub counterexamples: Vec<String>,
}

const HORIZON_BLOCKS: u64 = 60;

pub fn random_adversarial_scenario(rng: &mut ChaCha8Rng, id: usize) -> SweepCase {
    let k = rng.random_range(1..=3usize);
    let mut arbiters = Vec::with_capacity(k);
    let mut correct = 0;
    for _ in 0..k {
        if rng.random_bool(0.5) {
            arbiters.push(ArbiterConfig { downtime: Downtime(vec![(0, FOREVER)]), ..ArbiterConfig::default() });
        } else {
            correct += 1;
            let mut blips = Vec::new();
            if rng.random_bool(0.3) {
                let at = rng.random_range(1..30);
                blips.push((at, at + rng.random_range(1..=2)));
            }
            arbiters.push(ArbiterConfig { downtime: Downtime(blips), ..ArbiterConfig::default() });
        }
    }
    let operator = [
        OperatorBehavior::Honest,
        OperatorBehavior::MaliciousFalseRebalance,
        OperatorBehavior::MaliciousFalseChallenge,
    ]
    .choose(rng)
    .cloned()
    .unwrap_or(OperatorBehavior::Honest);
    let honest_operator = operator == OperatorBehavior::Honest;
    let depositor =
        if rng.random_bool(0.7) { DepositorBehavior::Honest } else { DepositorBehavior::MaliciousUnbondWithoutBurn };
    let n = rng.random_range(1..=3usize);
    let amounts: Vec<u64> = (0..n).map(|_| rng.random_range(50..400) * 1_000).collect();
    let total: u64 = amounts.iter().sum();
    let mut cfg = ScenarioConfig {
        name: format!("sweep {id}"),
        seed: id as u64,
        scheme: SigScheme::Mock,
        horizon: Some(HORIZON_BLOCKS * 50),
        amounts,
        arbiters,
        ..ScenarioConfig::default()
    };
    cfg.depositor.behavior = depositor;
    cfg.operator.behavior = operator;
    cfg.operator.model = if rng.random_bool(0.5) { RebalanceModel::UtxoBased } else { RebalanceModel::Collaborative };
    cfg.operator.attack_at = Some(rng.random_range(2..12));
    let exit_at = rng.random_range(4..16);
    if rng.random_bool(0.3) {
        let supplied = rng.random_range(total / 4..=total / 2);
        let lost = rng.random_range(1..=supplied);
        let at = rng.random_range(1..exit_at);
        cfg = cfg
            .with_event(at, EnvEvent::Supply { adapter: 1, amount: supplied })
            .with_event(at, EnvEvent::Liquidate { adapter: 1, amount: lost });
    }
    if rng.random_bool(0.85) {
        cfg = cfg.with_event(exit_at, EnvEvent::Exit);
    }
    SweepCase { config: cfg, correct_arbiters: correct, honest_operator }
}

pub fn trust_sweep(cases: usize, seed: u64) -> Result<SweepOutcome, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = SweepOutcome { total: cases, ..SweepOutcome::default() };
    for id in 0..cases {
        let case = random_adversarial_scenario(&mut rng, id);
        let report = run_scenario(&case.config)?;
        if case.trust_assumption() {
            out.assumption_held += 1;
            if !report.protocol_safe {
                out.violations.push((case.config.name.clone(), report.witnesses));
            }
        } else if !report.protocol_safe {
            out.counterexamples.push(case.config.name.clone());
        }
    }
    Ok(out)
}
