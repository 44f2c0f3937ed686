//! The eight failure rows: each row runs a few probe scenarios and a
//! guarantee holds for the row only if it holds in every probe.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{run_scenario, ArbiterConfig, HarnessError, ScenarioConfig};
use crate::actors::{DepositorBehavior, EnvEvent, OperatorBehavior};
use crate::keys::SigScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub dep: bool,
    pub to: bool,
    pub safety: bool,
}

impl Verdict {
    const fn new(dep: bool, to: bool, safety: bool) -> Self {
        Verdict { dep, to, safety }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let yn = |b: bool| if b { "Y" } else { "N" };
        write!(f, "{} {} {}", yn(self.dep), yn(self.to), yn(self.safety))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub name: String,
    pub dep_safe: bool,
    pub to_safe: bool,
    pub witnesses: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixRow {
    pub row: usize,
    pub failure: &'static str,
    pub condition: &'static str,
    pub expected: Verdict,
    pub observed: Verdict,
    pub probes: Vec<ProbeResult>,
}

impl MatrixRow {
    pub fn matches(&self) -> bool {
        self.expected == self.observed
    }
}

/// Published guarantees per row: (failure, condition, Dep, TO, Safety).
pub fn published_matrix() -> [(&'static str, &'static str, Verdict); 8] {
    [
        ("1 AO offline", ">=1 AO correct", Verdict::new(true, true, true)),
        ("All AOs offline", "TO honest", Verdict::new(true, true, true)),
        ("All AOs offline", "TO malicious", Verdict::new(false, true, false)),
        ("AO key leak", "Dep malicious", Verdict::new(true, false, false)),
        ("TO no consensus", ">=1 AO correct", Verdict::new(true, false, false)),
        ("TO no consensus", "All AOs offline", Verdict::new(true, false, false)),
        ("TO quorum corruption", ">=1 AO correct", Verdict::new(true, false, false)),
        ("TO quorum corruption", "All AOs offline", Verdict::new(false, false, false)),
    ]
}

const EXIT_AT: u64 = 5;
const ATTACK_AT: u64 = 3;

fn base(scheme: SigScheme) -> ScenarioConfig {
    ScenarioConfig {
        scheme,
        horizon: Some(60 * 50),
        ..ScenarioConfig::default()
    }
}

struct Probe {
    name: &'static str,
    operator: OperatorBehavior,
    depositor: DepositorBehavior,
    attack: bool,
    exit: bool,
}

const fn probe(
    name: &'static str,
    operator: OperatorBehavior,
    depositor: DepositorBehavior,
    attack: bool,
    exit: bool,
) -> Probe {
    Probe { name, operator, depositor, attack, exit }
}

fn row_setup(row: usize) -> (Vec<ArbiterConfig>, Vec<Probe>) {
    use DepositorBehavior::{Honest as DH, MaliciousUnbondWithoutBurn as DM};
    use OperatorBehavior::*;
    let online = ArbiterConfig::default;
    let offline = ArbiterConfig::offline;
    let leaked = || ArbiterConfig { key_leaked: true, ..ArbiterConfig::default() };
    match row {
        1 => (
            vec![offline(), online()],
            vec![
                probe("false rebalance", MaliciousFalseRebalance, DH, true, false),
                probe("false challenge", MaliciousFalseChallenge, DH, false, true),
                probe("illegitimate unbond", Honest, DM, false, true),
            ],
        ),
        2 => (
            vec![offline()],
            vec![probe("honest exit", Honest, DH, false, true), probe("illegitimate unbond", Honest, DM, false, true)],
        ),
        3 => (
            vec![offline()],
            vec![
                probe("false rebalance", MaliciousFalseRebalance, DH, true, false),
                probe("false challenge", MaliciousFalseChallenge, DH, false, true),
                probe("illegitimate unbond", MaliciousFalseChallenge, DM, false, true),
            ],
        ),
        4 => (
            vec![leaked()],
            vec![probe("honest exit", Honest, DH, false, true), probe("illegitimate unbond", Honest, DM, false, true)],
        ),
        5 | 6 => (
            vec![if row == 5 { online() } else { offline() }],
            vec![
                probe("honest exit", NoConsensus, DH, false, true),
                probe("illegitimate unbond", NoConsensus, DM, false, true),
            ],
        ),
        7 | 8 => (
            vec![if row == 7 { online() } else { offline() }],
            vec![
                probe("false rebalance", QuorumCorrupted, DH, true, false),
                probe("honest exit", QuorumCorrupted, DH, false, true),
                probe("illegitimate unbond", QuorumCorrupted, DM, false, true),
            ],
        ),
        _ => unreachable!("rows are 1 to 8"),
    }
}

/// Builds the scenario for one probe of `row` (1-based).
pub fn probe_config(row: usize, index: usize, scheme: SigScheme) -> Option<ScenarioConfig> {
    let (arbiters, probes) = row_setup(row);
    let p = probes.into_iter().nth(index)?;
    let mut cfg = base(scheme);
    cfg.name = format!("row {row}: {}", p.name);
    cfg.seed = (row * 10 + index) as u64;
    cfg.arbiters = arbiters;
    cfg.operator.behavior = p.operator;
    cfg.operator.attack_at = p.attack.then_some(ATTACK_AT);
    cfg.depositor.behavior = p.depositor;
    if p.exit {
        cfg = cfg.with_event(EXIT_AT, EnvEvent::Exit);
    }
    Some(cfg)
}

pub fn failure_matrix() -> Result<Vec<MatrixRow>, HarnessError> {
    failure_matrix_with(SigScheme::Schnorr)
}

pub fn failure_matrix_with(scheme: SigScheme) -> Result<Vec<MatrixRow>, HarnessError> {
    let mut rows = Vec::with_capacity(8);
    for (i, (failure, condition, expected)) in published_matrix().into_iter().enumerate() {
        let row = i + 1;
        let mut observed = Verdict::new(true, true, true);
        let mut probes = Vec::new();
        let mut index = 0;
        while let Some(cfg) = probe_config(row, index, scheme) {
            let r = run_scenario(&cfg)?;
            observed.dep &= r.dep_safe;
            observed.to &= r.to_safe;
            observed.safety &= r.protocol_safe;
            probes.push(ProbeResult { name: cfg.name, dep_safe: r.dep_safe, to_safe: r.to_safe, witnesses: r.witnesses });
            index += 1;
        }
        rows.push(MatrixRow { row, failure, condition, expected, observed, probes });
    }
    Ok(rows)
}
