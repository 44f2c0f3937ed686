//! Exit timing in blocks against the configured timelocks, plus whole
//! scenarios loaded from the files under `scenarios/`.

use std::path::PathBuf;

use bsa_core::actors::{DepositorBehavior, Downtime, EnvEvent, OperatorBehavior, Simulation};
use bsa_core::harness::{build_simulation, drive, report, ArbiterConfig, GuaranteeReport, ScenarioConfig, Side};
use bsa_core::{OutPoint, SigScheme};

const EXIT_AT: u64 = 5;

fn timelocked(t1: u32, t2: u32, scheme: SigScheme) -> ScenarioConfig {
    ScenarioConfig {
        t1,
        t2,
        t3: ((t1 + t2) as u64 + 10) * 50,
        scheme,
        horizon: Some(((t1 + t2) as u64 + 30) * 50),
        ..ScenarioConfig::default()
    }
}

fn run(cfg: &ScenarioConfig) -> (Simulation, GuaranteeReport) {
    let mut sim = build_simulation(cfg).unwrap();
    drive(&mut sim, cfg);
    let r = report(&sim, cfg);
    (sim, r)
}

/// Height at which the spend of `op` confirmed, and the first output of
/// the spending transaction.
fn spend(sim: &Simulation, op: &OutPoint) -> Option<(u64, OutPoint)> {
    let chain = sim.world.chain();
    let id = chain.confirmed_spender(op)?;
    Some((chain.confirmed_tx(&id)?.height, OutPoint::new(id, 0)))
}

const TIMELOCKS: [(u32, u32); 5] = [(10, 10), (6, 20), (20, 5), (3, 3), (144, 72)];

#[test]
fn honest_exit_completes_within_t1_plus_margin() {
    for (t1, t2) in TIMELOCKS {
        let cfg = timelocked(t1, t2, SigScheme::Mock).with_event(EXIT_AT, EnvEvent::Exit);
        let (sim, r) = run(&cfg);
        assert!(r.protocol_safe, "{t1}/{t2}: {:?}", r.witnesses);
        let exit = r.exit_height.unwrap();
        for f in &r.fates {
            assert_eq!(f.route, ["unbond-request", "unbond-finalize"]);
            assert_eq!(f.holder, Some(Side::Depositor));
            let (req, uta) = spend(&sim, &f.deposit).unwrap();
            let (fin, _) = spend(&sim, &uta).unwrap();
            // The finalize becomes valid T1 blocks after the request and
            // confirms in the next block.
            assert_eq!(fin, req + t1 as u64 + 1, "{t1}/{t2}");
            assert_eq!(f.settled_at, Some(fin));
            assert!(fin - exit <= t1 as u64 + cfg.margin, "{t1}/{t2}: {} blocks", fin - exit);
        }
        assert_eq!(r.balances.token_supply, 0);
    }
}

#[test]
fn unfairly_challenged_exit_completes_within_t1_t2_plus_margin() {
    for (t1, t2) in TIMELOCKS {
        let mut base = timelocked(t1, t2, SigScheme::Mock);
        base.operator.behavior = OperatorBehavior::MaliciousFalseChallenge;
        // Arbiter down from the exit tick for 0..=T2+2 ticks.
        for down in 0..=t2 as u64 + 2 {
            let mut cfg = base.clone().with_event(EXIT_AT, EnvEvent::Exit);
            cfg.arbiters = vec![ArbiterConfig { downtime: Downtime(vec![(EXIT_AT, EXIT_AT + down)]), ..Default::default() }];
            let (sim, r) = run(&cfg);
            let exit = r.exit_height.unwrap();
            let f = &r.fates[0];
            assert_eq!(f.route, ["unbond-request", "unbond-challenge", "resolved"], "{t1}/{t2} down {down}");
            let (_, uta) = spend(&sim, &f.deposit).unwrap();
            let (challenged, uca) = spend(&sim, &uta).unwrap();
            let (settled, _) = spend(&sim, &uca).unwrap();
            // Operator's sweep path opens T2 blocks after the challenge.
            let sweep = challenged + t2 as u64 + 1;
            match f.holder {
                Some(Side::Depositor) => {
                    assert!(r.dep_safe);
                    assert!(settled < sweep, "{t1}/{t2} down {down}");
                    assert!(settled - exit <= (t1 + t2) as u64 + cfg.margin, "{t1}/{t2} down {down}");
                }
                _ => {
                    assert!(!r.dep_safe);
                    assert_eq!(settled, sweep, "{t1}/{t2} down {down}");
                }
            }
            // With the arbiter back before the window closes, the depositor wins.
            let back = sim.world.setup_height + EXIT_AT + down;
            if back + 1 < sweep {
                assert_eq!(f.holder, Some(Side::Depositor), "{t1}/{t2} down {down}");
            }
        }
    }
}

#[test]
fn schnorr_lifecycle_matches_mock_timing() {
    for mal in [false, true] {
        let mut a = timelocked(10, 10, SigScheme::Mock);
        if mal {
            a.operator.behavior = OperatorBehavior::MaliciousFalseChallenge;
        }
        a = a.with_event(EXIT_AT, EnvEvent::Exit);
        let b = ScenarioConfig { scheme: SigScheme::Schnorr, ..a.clone() };
        let (_, ra) = run(&a);
        let (_, rb) = run(&b);
        let times = |r: &GuaranteeReport| r.fates.iter().map(|f| f.settled_at).collect::<Vec<_>>();
        assert_eq!(times(&ra), times(&rb));
        assert!(rb.protocol_safe);
    }
}

#[test]
fn illegitimate_unbond_is_challenged_at_every_offset() {
    let t1 = 10;
    for at in 1..=t1 as u64 {
        let mut cfg = timelocked(t1, 10, SigScheme::Mock);
        cfg.depositor.behavior = DepositorBehavior::MaliciousUnbondWithoutBurn;
        let cfg = cfg.with_event(at, EnvEvent::Exit);
        let (_, r) = run(&cfg);
        assert!(r.to_safe, "offset {at}: {:?}", r.witnesses);
        for f in &r.fates {
            assert_eq!(f.route[1], "unbond-challenge", "offset {at}");
            assert_eq!(f.holder, Some(Side::Operator));
        }
    }
}

#[test]
fn same_config_gives_same_trace() {
    let cfg = timelocked(10, 10, SigScheme::Schnorr).with_event(EXIT_AT, EnvEvent::Exit);
    let (_, a) = run(&cfg);
    let (_, b) = run(&cfg);
    assert_eq!(a.trace_digest, b.trace_digest);
    assert_eq!(a.canonical_text(), b.canonical_text());
    let other = ScenarioConfig { seed: cfg.seed + 1, ..cfg.clone() };
    let (_, c) = run(&other);
    assert_ne!(a.trace_digest, c.trace_digest);
}

#[test]
fn reports_compose_protocol_safety() {
    let (_, honest) = run(&ScenarioConfig::default().with_event(EXIT_AT, EnvEvent::Exit));
    assert_eq!((honest.dep_safe, honest.to_safe, honest.protocol_safe), (true, true, true));

    let mut cfg = ScenarioConfig { horizon: Some(3000), ..ScenarioConfig::default() };
    cfg.operator.behavior = OperatorBehavior::MaliciousFalseRebalance;
    cfg.operator.attack_at = Some(3);
    cfg.arbiters = vec![ArbiterConfig::offline()];
    let (_, r) = run(&cfg);
    assert_eq!((r.dep_safe, r.to_safe, r.protocol_safe), (false, true, false));
    assert!(!r.witnesses.is_empty());

    let mut cfg = ScenarioConfig { horizon: Some(3000), ..ScenarioConfig::default() };
    cfg.depositor.behavior = DepositorBehavior::MaliciousUnbondWithoutBurn;
    cfg.arbiters = vec![ArbiterConfig { key_leaked: true, ..Default::default() }];
    let (_, r) = run(&cfg.with_event(EXIT_AT, EnvEvent::Exit));
    assert_eq!((r.dep_safe, r.to_safe, r.protocol_safe), (true, false, false));
}

fn scenario_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

#[test]
fn scenario_files_run_with_expected_verdicts() {
    let expected = [
        ("honest_exit.toml", (true, true)),
        ("false_challenge.toml", (true, true)),
        ("false_rebalance_all_offline.toml", (false, true)),
        ("key_leak.toml", (true, false)),
        ("liquidation.toml", (true, true)),
    ];
    let mut seen = 0;
    for entry in std::fs::read_dir(scenario_dir()).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_str().unwrap().to_string();
        let text = std::fs::read_to_string(&path).unwrap();
        let cfg = ScenarioConfig::from_toml(&text).unwrap();
        assert_eq!(ScenarioConfig::from_toml(&cfg.to_toml()).unwrap(), cfg, "{name}");
        let (_, r) = run(&cfg);
        let want = expected.iter().find(|(n, _)| *n == name).unwrap_or_else(|| panic!("no verdict for {name}")).1;
        assert_eq!((r.dep_safe, r.to_safe), want, "{name}: {:?}", r.witnesses);
        assert_eq!(r.protocol_safe, want.0 && want.1);
        seen += 1;
    }
    assert_eq!(seen, expected.len());
}

#[test]
fn malformed_scenarios_are_rejected() {
    assert!(ScenarioConfig::from_toml("t1 = 10\nt2 = 10\nt3 = 20\n").is_err());
    assert!(ScenarioConfig::from_toml("colour = \"blue\"\n").is_err());
    assert!(ScenarioConfig::from_toml("amounts = [100]\n").is_err());
    assert!(ScenarioConfig::from_toml("arbiter = []\n").is_err());
    assert!(ScenarioConfig::from_toml("[[arbiter]]\nt_op = 0\n").is_err());
    assert!(ScenarioConfig::from_toml("").is_ok());
}
