//! Pre-signed templates are bound to their outputs: changing where a
//! template pays breaks the signatures collected at setup.

use bsa_core::actors::Simulation;
use bsa_core::harness::{build_simulation, ScenarioConfig};
use bsa_core::keys::Keypair;
use bsa_core::psbt::Psbt;
use bsa_core::{AddressId, SigScheme};
use rand::seq::IndexedRandom;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn setup() -> (Simulation, ScenarioConfig) {
    let cfg = ScenarioConfig {
        seed: 77,
        amounts: vec![120_000, 250_000, 90_000],
        arbiters: vec![Default::default(), Default::default()],
        ..ScenarioConfig::default()
    };
    (build_simulation(&cfg).unwrap(), cfg)
}

fn invalid_sigs(p: &Psbt, scheme: SigScheme) -> usize {
    p.partial_sigs.keys().filter(|pk| !p.signed_by(pk, scheme)).count()
}

#[test]
fn setup_templates_carry_valid_presignatures() {
    let (sim, cfg) = setup();
    for d in &sim.world.instance.deposits {
        for p in d.all() {
            assert!(!p.partial_sigs.is_empty(), "{}", p.transition);
            assert!(p.partial_sigs_valid(cfg.scheme), "{}", p.transition);
        }
    }
}

#[test]
fn redirecting_any_output_invalidates_a_presignature() {
    let (sim, cfg) = setup();
    let inst = &sim.world.instance;
    let mut known: Vec<AddressId> = inst.addresses.all().iter().map(|a| a.id).collect();
    known.push(inst.tweak.depositor.key_address());
    known.push(inst.tweak.operator.key_address());
    known.push(sim.operator.reserve.public().key_address());
    known.push(sim.world.liquidator_address);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut broken = 0;
    for trial in 0..1000 {
        let d = inst.deposits.choose(&mut rng).unwrap();
        let mut p = (*d.all().choose(&mut rng).unwrap()).clone();
        let vout = rng.random_range(0..p.tx.outputs.len());
        let old = p.tx.outputs[vout].address;
        let new = loop {
            let cand = if rng.random_bool(0.5) { *known.choose(&mut rng).unwrap() } else { AddressId(rng.random()) };
            if cand != old {
                break cand;
            }
        };
        p.tx.outputs[vout].address = new;
        let bad = invalid_sigs(&p, cfg.scheme);
        assert!(bad >= 1, "trial {trial}: {} output {vout} redirected with all signatures intact", p.transition);
        broken += 1;
    }
    assert_eq!(broken, 1000);
}

#[test]
fn other_output_edits_also_invalidate() {
    let (sim, cfg) = setup();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for d in &sim.world.instance.deposits {
        for p in d.all() {
            let mut value = p.clone();
            value.tx.outputs[0].value -= rng.random_range(1..1000);
            assert!(!value.partial_sigs_valid(cfg.scheme));

            let mut extra = p.clone();
            extra.tx.outputs.push(bsa_core::chain::TxOut { address: AddressId(rng.random()), value: 1 });
            assert!(!extra.partial_sigs_valid(cfg.scheme));

            let mut input = p.clone();
            input.tx.inputs[0].prevout.vout ^= 1;
            assert!(!input.partial_sigs_valid(cfg.scheme));
        }
    }
}

#[test]
fn chain_rejects_finalized_unbond_with_redirected_output() {
    let (sim, _) = setup();
    let chain = sim.world.chain();
    let dep: &Keypair = &sim.depositor.keypair;
    let thief = Keypair::from_seed(b"thief").public().key_address();
    for d in &sim.world.instance.deposits {
        let tx = d.unbond_request.finalize(Some(dep), chain.scheme()).unwrap();
        chain.verify_spend(&tx).unwrap();
        let mut stolen = tx.clone();
        stolen.outputs[0].address = thief;
        assert!(chain.verify_spend(&stolen).is_err());
        // Re-signing as the depositor alone cannot repair the operator's share.
        let mut p = d.unbond_request.clone();
        p.tx.outputs[0].address = thief;
        p.partial_sigs.clear();
        p.sign(dep, chain.scheme()).unwrap();
        assert!(p.finalize(None, chain.scheme()).is_err());
    }
}
