//! Package relay and ANYONECANPAY fee inputs on the simulated chain.

use bsa_core::chain::{FeeSchedule, Lock, SighashFlag, TxIn, TxOut, Utxo, WitnessSig};
use bsa_core::keys::{Keypair, SpendPolicy};
use bsa_core::psbt::{add_fee_input, attach_cpfp_child, min_anchor_fee, PsbtError};
use bsa_core::{AddressId, BtcChain, SigScheme, SimTx};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ANCHOR: u64 = 330;
const FUND: u64 = 100_000;

struct Package {
    chain: BtcChain,
    parent: SimTx,
    child: SimTx,
}

fn sign_all(tx: &mut SimTx, keys: &[&Keypair], scheme: SigScheme) {
    for (i, k) in keys.iter().enumerate() {
        let sig = k.sign(scheme, &tx.sighash(i, SighashFlag::All));
        tx.inputs[i].witness = vec![WitnessSig { signature: sig, flag: SighashFlag::All }];
    }
}

/// A parent of weight `w0` paying `f0` with an anchor to the executor, and
/// a child of weight `wc` spending the anchor and paying `fa`.
fn package(rate: u64, w0: usize, wc: usize, f0: u64, fa: u64) -> Package {
    let scheme = SigScheme::Mock;
    let mut chain = BtcChain::new(scheme, FeeSchedule::flat(rate));
    let owner = Keypair::from_seed(b"owner");
    let exec = Keypair::from_seed(b"executor");
    let own_addr = chain.register_key(owner.public());
    let exec_addr = chain.register_key(exec.public());
    let src = chain.credit(own_addr, FUND);
    let extra_outputs = w0 - 3;
    let mut outputs = vec![TxOut { address: own_addr, value: FUND - f0 - ANCHOR - 10 * extra_outputs as u64 }];
    outputs.push(TxOut { address: exec_addr, value: ANCHOR });
    outputs.extend((0..extra_outputs).map(|_| TxOut { address: own_addr, value: 10 }));
    let mut parent = SimTx { inputs: vec![TxIn { prevout: src, path: 0, witness: vec![] }], outputs, anchor: Some(1) };
    sign_all(&mut parent, &[&owner], scheme);

    let wallet_inputs = wc - 2;
    let mut inputs = vec![TxIn { prevout: parent.outpoint(1), path: 0, witness: vec![] }];
    let mut total = ANCHOR;
    for _ in 0..wallet_inputs {
        inputs.push(TxIn { prevout: chain.credit(exec_addr, 1_000), path: 0, witness: vec![] });
        total += 1_000;
    }
    let mut child = SimTx { inputs, outputs: vec![TxOut { address: exec_addr, value: total - fa }], anchor: None };
    let keys: Vec<&Keypair> = vec![&exec; wc - 1];
    sign_all(&mut child, &keys, scheme);
    Package { chain, parent, child }
}

fn confirmed(chain: &BtcChain, tx: &SimTx) -> bool {
    chain.confirmed_tx(&tx.txid()).is_some()
}

#[test]
fn package_confirms_iff_combined_fee_covers_both_requirements() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut bumped = 0;
    for case in 0..3000 {
        let rate = rng.random_range(1..=8u64);
        let w0 = rng.random_range(3..=6usize);
        let wc = rng.random_range(2..=5usize);
        let f_req = rate * w0 as u64;
        let fc_req = rate * wc as u64;
        let f0 = rng.random_range(0..=f_req + 2);
        let fa = rng.random_range(0..=f_req + fc_req + 2);
        let Package { mut chain, parent, child } = package(rate, w0, wc, f0, fa);
        assert_eq!(parent.weight(), w0 as u64);
        assert_eq!(child.weight(), wc as u64);
        chain.submit_tx(parent.clone()).unwrap();
        chain.submit_tx(child.clone()).unwrap();
        assert_eq!(chain.fee_of(&parent.txid()), Some(f0));
        chain.mine_block();

        let parent_alone = f0 >= f_req;
        let eq2 = f0 + fa >= f_req + fc_req;
        let ctx = format!("case {case}: rate {rate} w0 {w0} wc {wc} f0 {f0} fa {fa}");
        assert_eq!(confirmed(&chain, &parent), parent_alone || eq2, "{ctx}");
        if !parent_alone {
            bumped += 1;
            assert_eq!(confirmed(&chain, &child), eq2, "{ctx}");
            assert_eq!(eq2, fa >= min_anchor_fee(f0, f_req, fc_req), "{ctx}");
        } else {
            assert_eq!(confirmed(&chain, &child), fa >= fc_req, "{ctx}");
        }
    }
    assert!(bumped > 1000);
}

#[test]
fn parent_without_child_waits_below_rate() {
    let Package { mut chain, parent, .. } = package(5, 3, 3, 14, 0);
    chain.submit_tx(parent.clone()).unwrap();
    chain.mine_block();
    assert!(!confirmed(&chain, &parent));
}

#[test]
fn attached_child_pays_exactly_the_minimum() {
    let scheme = SigScheme::Mock;
    for rate in 1..=10u64 {
        for f0 in 0..3 * rate {
            let Package { mut chain, parent, .. } = package(rate, 3, 3, f0, 0);
            let exec = Keypair::from_seed(b"executor");
            let wallet = chain.credit(exec.public().key_address(), 5_000);
            let utxo = chain.utxo(&wallet).unwrap().clone();
            let child = attach_cpfp_child(&parent, f0, &exec, &utxo, rate, scheme).unwrap();
            chain.submit_tx(parent.clone()).unwrap();
            chain.submit_tx(child.clone()).unwrap();
            assert_eq!(chain.fee_of(&child.txid()), Some(min_anchor_fee(f0, 3 * rate, 3 * rate)));
            chain.mine_block();
            assert!(confirmed(&chain, &parent) && confirmed(&chain, &child), "rate {rate} f0 {f0}");
        }
    }
}

#[test]
fn child_one_sat_short_leaves_package_unconfirmed() {
    for rate in 1..=10u64 {
        for f0 in 0..3 * rate {
            let fa = min_anchor_fee(f0, 3 * rate, 3 * rate) - 1;
            let Package { mut chain, parent, child } = package(rate, 3, 3, f0, fa);
            chain.submit_tx(parent.clone()).unwrap();
            chain.submit_tx(child.clone()).unwrap();
            chain.mine_block();
            assert!(!confirmed(&chain, &parent), "rate {rate} f0 {f0}");
        }
    }
}

#[test]
fn cpfp_rejects_a_foreign_anchor() {
    let Package { mut chain, parent, .. } = package(2, 3, 3, 0, 0);
    let stranger = Keypair::from_seed(b"stranger");
    let op = chain.credit(stranger.public().key_address(), 5_000);
    let utxo = chain.utxo(&op).unwrap().clone();
    assert_eq!(attach_cpfp_child(&parent, 0, &stranger, &utxo, 2, SigScheme::Mock), Err(PsbtError::NoAnchor));
}

struct AcpCase {
    chain: BtcChain,
    tx: SimTx,
    fee_utxo: Utxo,
    fee_key: Keypair,
}

/// A transaction whose inputs mix single-key and 2-of-2 locks, every
/// signature committing only to its own input and all outputs.
fn acp_case(rng: &mut ChaCha8Rng, scheme: SigScheme, flag: SighashFlag) -> AcpCase {
    let mut chain = BtcChain::new(scheme, FeeSchedule::flat(1));
    let n_in = rng.random_range(1..=3);
    let mut signers: Vec<Vec<Keypair>> = Vec::new();
    let mut inputs = Vec::new();
    let mut total = 0;
    for _ in 0..n_in {
        let a = Keypair::from_seed(&rng.random::<[u8; 16]>());
        let value = rng.random_range(10_000..1_000_000);
        total += value;
        let (addr, keys) = if rng.random_bool(0.5) {
            (chain.register_key(a.public()), vec![a])
        } else {
            let b = Keypair::from_seed(&rng.random::<[u8; 16]>());
            let addr = AddressId(rng.random());
            chain.register_lock(addr, Lock::Script(vec![SpendPolicy::TwoOfTwo { a: a.public(), b: b.public() }]));
            (addr, vec![a, b])
        };
        let op = chain.credit(addr, value);
        inputs.push(TxIn { prevout: op, path: 0, witness: vec![] });
        signers.push(keys);
    }
    let n_out = rng.random_range(1..=3);
    let spend = total - rng.random_range(0..5_000);
    let outputs: Vec<TxOut> = (0..n_out)
        .map(|i| TxOut { address: AddressId(rng.random()), value: spend / n_out + if i == 0 { spend % n_out } else { 0 } })
        .collect();
    let mut tx = SimTx { inputs, outputs, anchor: None };
    for (i, keys) in signers.iter().enumerate() {
        let msg = tx.sighash(i, flag);
        tx.inputs[i].witness = keys.iter().map(|k| WitnessSig { signature: k.sign(scheme, &msg), flag }).collect();
    }
    let fee_key = Keypair::from_seed(&rng.random::<[u8; 16]>());
    let fee_addr = chain.register_key(fee_key.public());
    let fee_op = chain.credit(fee_addr, rng.random_range(1..100_000));
    let fee_utxo = chain.utxo(&fee_op).unwrap().clone();
    AcpCase { chain, tx, fee_utxo, fee_key }
}

#[test]
fn anyone_can_pay_fee_input_preserves_prior_signatures() {
    let mut rng = ChaCha8Rng::seed_from_u64(1000);
    let mut preserved = 0;
    for case in 0..1000 {
        let scheme = if case % 4 == 0 { SigScheme::Schnorr } else { SigScheme::Mock };
        let AcpCase { mut chain, tx, fee_utxo, fee_key } = acp_case(&mut rng, scheme, SighashFlag::AnyoneCanPayAll);
        chain.verify_spend(&tx).unwrap();
        let bumped = add_fee_input(&tx, &fee_utxo, &fee_key, scheme).unwrap();
        assert_eq!(bumped.inputs.len(), tx.inputs.len() + 1);
        assert_eq!(bumped.outputs, tx.outputs);
        for (before, after) in tx.inputs.iter().zip(&bumped.inputs) {
            assert_eq!(before.witness, after.witness);
        }
        if chain.verify_spend(&bumped).is_ok() {
            preserved += 1;
        }
        let in_total: u64 =
            tx.inputs.iter().map(|i| chain.utxo(&i.prevout).unwrap().value).sum::<u64>() + fee_utxo.value;
        let txid = chain.submit_tx(bumped.clone()).unwrap();
        assert_eq!(chain.fee_of(&txid), Some(in_total - bumped.output_total()));
    }
    assert_eq!(preserved, 1000);
}

#[test]
fn fee_input_refused_when_any_signature_commits_to_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    for _ in 0..100 {
        let AcpCase { mut chain, tx, fee_utxo, fee_key } = acp_case(&mut rng, SigScheme::Mock, SighashFlag::All);
        assert_eq!(add_fee_input(&tx, &fee_utxo, &fee_key, SigScheme::Mock), Err(PsbtError::FlagViolation));
        // Forcing the extra input in anyway breaks the existing witnesses.
        let mut forced = tx.clone();
        forced.inputs.push(TxIn { prevout: fee_utxo.outpoint, path: 0, witness: vec![] });
        let idx = forced.inputs.len() - 1;
        let sig = fee_key.sign(SigScheme::Mock, &forced.sighash(idx, SighashFlag::All));
        forced.inputs[idx].witness = vec![WitnessSig { signature: sig, flag: SighashFlag::All }];
        assert!(chain.submit_tx(forced).is_err());
    }
}

#[test]
fn changing_outputs_after_anyone_can_pay_signing_fails() {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    for _ in 0..100 {
        let AcpCase { chain, tx, fee_utxo, fee_key } =
            acp_case(&mut rng, SigScheme::Mock, SighashFlag::AnyoneCanPayAll);
        let mut bumped = add_fee_input(&tx, &fee_utxo, &fee_key, SigScheme::Mock).unwrap();
        bumped.outputs.push(TxOut { address: fee_key.public().key_address(), value: 1 });
        assert!(chain.verify_spend(&bumped).is_err());
    }
}
