//! Arbiter gates: software version expiry, weak subjectivity resync, and
//! key release bound to the image signer.

use bsa_core::actors::Simulation;
use bsa_core::arbitration::{
    ArbitrationError, ArbitrationOracle, AttestationAuthority, Bottom, Check, EnclaveImage, MockKms, SyncOutcome,
    SyncSource,
};
use bsa_core::chain::CheckpointSigner;
use bsa_core::harness::{build_simulation, ScenarioConfig};
use bsa_core::registry::{Registry, UtxoStatus};
use bsa_core::SigScheme;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A live instance whose deposits all sit at `status`, advanced by
/// `extra_slots` past setup, with the first arbiter following.
fn instance(expiry: Option<u64>, status: UtxoStatus, extra_slots: u64, seed: u64) -> Simulation {
    let cfg = ScenarioConfig {
        seed,
        scheme: SigScheme::Mock,
        amounts: vec![110_000, 220_000, 330_000],
        version_expiry: expiry,
        ..ScenarioConfig::default()
    };
    let mut sim = build_simulation(&cfg).unwrap();
    let dest = &mut sim.world.ledgers.dest;
    let text = dest.registry().canonical_text().replace("\"status\":\"Active\"", &format!("\"status\":\"{status:?}\""));
    *dest.registry_mut() = Registry::from_canonical_text(&text).unwrap();
    dest.advance(extra_slots.max(dest.finality_interval())).unwrap();
    let w = &sim.world;
    sim.arbiters[0].oracle.follow(&w.ledgers.dest, &w.authority);
    sim
}

/// Feeds `trials` well-formed dispute inputs, each with a status that
/// favors the depositor, and returns (signatures, failures by check).
fn fuzz_disputes(sim: &mut Simulation, rng: &mut ChaCha8Rng, trials: usize) -> (u64, Vec<Bottom>) {
    let scheme = sim.world.chain().scheme();
    let view = sim.arbiters[0].oracle.view(&sim.world.ledgers.dest).expect("synced");
    let before = sim.arbiters[0].oracle.signatures_produced();
    let mut errors = Vec::new();
    for _ in 0..trials {
        let d = &sim.world.instance.deposits[rng.random_range(0..sim.world.instance.deposits.len())];
        let status = view.registry().status(&d.deposit.outpoint).unwrap();
        let ao = &mut sim.arbiters[0].oracle;
        let out = if status == UtxoStatus::Withdrawn && rng.random_bool(0.5) {
            let uta = d.unbond_request.finalize(Some(&sim.depositor.keypair), scheme).unwrap();
            let uca = d.unbond_challenge.finalize(Some(&sim.operator.keypair), scheme).unwrap();
            ao.resolve_unbond_challenge(&uta, &uca, &view)
        } else {
            let rca = d.rebalance_request.finalize(Some(&sim.operator.keypair), scheme).unwrap();
            ao.resolve_rebalance(&rca, &view)
        };
        if let Err(e) = out {
            errors.push(e);
        }
    }
    (sim.arbiters[0].oracle.signatures_produced() - before, errors)
}

#[test]
fn expired_version_never_signs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut trials = 0;
    for round in 0..20 {
        let status = if round % 2 == 0 { UtxoStatus::Withdrawn } else { UtxoStatus::Active };
        let past = rng.random_range(0..500);
        // Expiry lands somewhere at or before the slot the view is taken at.
        let probe = instance(None, status, 64 + past, round);
        let view_slot = probe.arbiters[0].oracle.view(&probe.world.ledgers.dest).unwrap().slot();
        let expiry = view_slot - rng.random_range(0..=past.min(view_slot));
        let mut sim = instance(Some(expiry), status, 64 + past, round);
        assert_eq!(sim.arbiters[0].oracle.view(&sim.world.ledgers.dest).unwrap().slot(), view_slot);
        let (sigs, errors) = fuzz_disputes(&mut sim, &mut rng, 50);
        assert_eq!(sigs, 0, "round {round}");
        assert_eq!(errors.len(), 50);
        assert!(errors.iter().all(|e| *e == Bottom::Failed(Check::VersionUnexpired)), "{errors:?}");
        trials += 50;
    }
    assert_eq!(trials, 1000);
}

#[test]
fn unexpired_version_signs_the_same_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for round in 0..4 {
        let status = if round % 2 == 0 { UtxoStatus::Withdrawn } else { UtxoStatus::Active };
        let mut sim = instance(None, status, 64, round);
        let view_slot = sim.arbiters[0].oracle.view(&sim.world.ledgers.dest).unwrap().slot();
        let mut tight = instance(Some(view_slot + 1), status, 64, round);
        for s in [&mut sim, &mut tight] {
            let (sigs, errors) = fuzz_disputes(s, &mut rng, 25);
            assert_eq!(sigs, 25);
            assert!(errors.is_empty());
        }
    }
}

struct Following {
    ao: ArbitrationOracle,
    auth: AttestationAuthority,
    op: bsa_core::Keypair,
    dest: bsa_core::DestChain,
}

const WSP: u64 = 300;
const DEFAULT_WSP: u64 = 200;

/// An arbiter that has been following the destination chain, with known
/// weak subjectivity period `WSP`.
fn following() -> Following {
    let op = bsa_core::Keypair::from_seed(b"operator");
    let reg = Registry::new(op.public(), ScenarioConfig::default().timelocks(), SigScheme::Mock).unwrap();
    let mut dest = bsa_core::DestChain::new(reg, 8, WSP, SigScheme::Mock);
    dest.advance(40).unwrap();
    let auth = AttestationAuthority::new(b"root", SigScheme::Mock);
    let mut kms = MockKms::new(auth.root(), SigScheme::Mock, b"kms");
    let mut ao = ArbitrationOracle::new(0, EnclaveImage::new("ao", "cfg", "signer"), b"nsm", DEFAULT_WSP, SigScheme::Mock);
    let cp = dest.latest_checkpoint().unwrap().endorse(CheckpointSigner::TokenOperator, &op, SigScheme::Mock);
    assert_eq!(
        ao.come_online(dest.slot(), Some(&cp), &op.public(), &auth, WSP).unwrap(),
        SyncOutcome::Synced(SyncSource::OperatorCheckpoint)
    );
    ao.key_init(&mut kms, &auth, b"entropy").unwrap();
    ao.follow(&dest, &auth);
    Following { ao, auth, op, dest }
}

#[test]
fn resync_boundary_at_weak_subjectivity_period() {
    for (offset, self_attested) in [(-1i64, true), (0, false), (1, false)] {
        let Following { mut ao, auth, op, mut dest } = following();
        let left = dest.slot();
        ao.go_offline(left);
        assert!(ao.view(&dest).is_none());
        let downtime = (WSP as i64 + offset) as u64;
        dest.advance(downtime).unwrap();
        let out = ao.come_online(left + downtime, None, &op.public(), &auth, WSP).unwrap();
        if self_attested {
            assert_eq!(out, SyncOutcome::Synced(SyncSource::SelfAttested), "downtime WSP{offset:+}");
            ao.follow(&dest, &auth);
            let v = ao.view(&dest).unwrap();
            assert_eq!(Some(v.checkpoint()), dest.latest_checkpoint());
        } else {
            assert_eq!(out, SyncOutcome::NeedsOperatorCheckpoint, "downtime WSP{offset:+}");
            assert!(ao.view(&dest).is_none());
            let cp = dest.latest_checkpoint().unwrap().endorse(CheckpointSigner::TokenOperator, &op, SigScheme::Mock);
            let out = ao.come_online(dest.slot(), Some(&cp), &op.public(), &auth, WSP).unwrap();
            assert_eq!(out, SyncOutcome::Synced(SyncSource::OperatorCheckpoint));
            assert!(ao.view(&dest).is_some());
        }
    }
}

fn first_boot() -> ArbitrationOracle {
    ArbitrationOracle::new(1, EnclaveImage::new("ao", "cfg", "signer"), b"fresh", DEFAULT_WSP, SigScheme::Mock)
}

#[test]
fn operator_checkpoint_age_boundary() {
    for (age, ok) in [(DEFAULT_WSP - 1, true), (DEFAULT_WSP, true), (DEFAULT_WSP + 1, false)] {
        let Following { auth, op, dest, .. } = following();
        let mut ao = first_boot();
        let cp = dest.latest_checkpoint().unwrap().endorse(CheckpointSigner::TokenOperator, &op, SigScheme::Mock);
        let res = ao.come_online(cp.slot + age, Some(&cp), &op.public(), &auth, WSP);
        if ok {
            assert_eq!(res.unwrap(), SyncOutcome::Synced(SyncSource::OperatorCheckpoint), "age {age}");
        } else {
            assert_eq!(res.unwrap_err(), ArbitrationError::StaleCheckpoint, "age {age}");
        }
    }
}

#[test]
fn checkpoint_from_someone_else_is_refused() {
    let Following { auth, op, dest, .. } = following();
    let mut ao = first_boot();
    let stranger = bsa_core::Keypair::from_seed(b"stranger");
    let cp = dest.latest_checkpoint().unwrap().endorse(CheckpointSigner::TokenOperator, &stranger, SigScheme::Mock);
    assert_eq!(ao.come_online(dest.slot(), Some(&cp), &op.public(), &auth, WSP).unwrap(), SyncOutcome::Refused);
    assert!(ao.view(&dest).is_none());
}

#[test]
fn key_restore_denied_whenever_signer_measurement_differs() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut denied, mut restored) = (0, 0);
    for trial in 0..200 {
        let auth = AttestationAuthority::new(b"root", SigScheme::Mock);
        let mut kms = MockKms::new(auth.root(), SigScheme::Mock, b"kms");
        let original = EnclaveImage::new("ao-v1", "cfg", "consortium");
        let mut ao = ArbitrationOracle::new(0, original.clone(), &[trial as u8], DEFAULT_WSP, SigScheme::Mock);
        let art = ao.key_init(&mut kms, &auth, &rng.random::<[u8; 16]>()).unwrap();
        let code = format!("ao-v{}", rng.random_range(1..5));
        let same_signer = rng.random_bool(0.3);
        let signer = if same_signer { "consortium".to_string() } else { format!("signer-{}", rng.random::<u32>()) };
        let next = EnclaveImage::new(&code, "cfg", &signer);
        assert_eq!(next.pcr8() == original.pcr8(), same_signer);
        ao.swap_image(next);
        match ao.key_restore(&art, &kms, &auth) {
            Ok(()) => {
                assert!(same_signer, "trial {trial}: restored under a foreign signer");
                assert_eq!(ao.pubkey(), Some(art.pubkey));
                restored += 1;
            }
            Err(e) => {
                assert!(!same_signer, "trial {trial}: {e}");
                assert_eq!(e, ArbitrationError::KmsPolicyDenied);
                assert!(!ao.is_initialized());
                denied += 1;
            }
        }
    }
    assert!(denied > 100 && restored > 20, "{denied} denied, {restored} restored");
}
