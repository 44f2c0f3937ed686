//! Cross product of registry status and single-check failures for both
//! resolution pipelines, compared against an independent decision table.

use std::collections::BTreeSet;

use bsa_core::actors::Simulation;
use bsa_core::arbitration::{Bottom, Check, RegistryView, REBALANCE_CHECKS, UNBOND_CHECKS};
use bsa_core::chain::{SighashFlag, WitnessSig};
use bsa_core::harness::{build_simulation, ScenarioConfig};
use bsa_core::keys::{Keypair, Signature};
use bsa_core::registry::{Registry, UtxoStatus, VersionRecord};
use bsa_core::{AddressId, SigScheme, SimTx};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Rebalance,
    Unbond,
}

/// The decision an arbiter must reach, written out independently.
fn expected(kind: Kind, status: UtxoStatus, failing: Option<Check>) -> Result<(), Bottom> {
    if let Some(c) = failing {
        return Err(Bottom::Failed(c));
    }
    let signs = match kind {
        Kind::Rebalance => !matches!(status, UtxoStatus::SpentOnRebalance),
        Kind::Unbond => matches!(status, UtxoStatus::Withdrawn | UtxoStatus::Rejected),
    };
    if signs {
        Ok(())
    } else {
        Err(Bottom::StatusFavorsOperator(status))
    }
}

#[derive(Default, Clone, Copy)]
struct RegistryEdit {
    foreign_operator: bool,
    expired_version: bool,
}

fn config() -> ScenarioConfig {
    ScenarioConfig { seed: 5, amounts: vec![150_000, 250_000], ..ScenarioConfig::default() }
}

/// A fresh instance whose registry shows every deposit at `status`, with
/// the arbiter following a checkpoint that commits to it.
fn fixture(status: UtxoStatus, edit: RegistryEdit) -> Simulation {
    let cfg = config();
    let mut sim = build_simulation(&cfg).unwrap();
    let pcr0 = sim.arbiters[0].oracle.pcr0();
    let now = sim.world.ledgers.dest.slot();
    let reg = sim.world.ledgers.dest.registry_mut();
    let mut text = reg.canonical_text().replace("\"status\":\"Active\"", &format!("\"status\":\"{status:?}\""));
    if edit.foreign_operator {
        let real = format!("\"operator\":\"{}\"", reg.operator());
        let fake = format!("\"operator\":\"{}\"", Keypair::from_seed(b"someone else").public());
        assert!(text.starts_with(&format!("{{{real}")));
        text = text.replacen(&real, &fake, 1);
    }
    let mut forged = Registry::from_canonical_text(&text).unwrap();
    if edit.expired_version {
        let rec = VersionRecord::signed(pcr0, now, &sim.operator.keypair, cfg.scheme);
        forged.set_version_expiry(rec).unwrap();
    }
    *reg = forged;
    let fi = sim.world.ledgers.dest.finality_interval();
    sim.world.ledgers.dest.advance(fi).unwrap();
    let w = &sim.world;
    sim.arbiters[0].oracle.follow(&w.ledgers.dest, &w.authority);
    sim
}

fn resign(tx: &mut SimTx, keys: &[&Keypair], path: u32, scheme: SigScheme) {
    tx.inputs[0].path = path;
    let msg = tx.sighash(0, SighashFlag::All);
    tx.inputs[0].witness =
        keys.iter().map(|k| WitnessSig { signature: k.sign(scheme, &msg), flag: SighashFlag::All }).collect();
}

fn corrupt(tx: &mut SimTx) {
    let w = &mut tx.inputs[0].witness[0];
    w.signature = Signature::corrupted(&w.signature);
}

struct Txs {
    va_rca: SimTx,
    va_uta: SimTx,
    uta_uca: SimTx,
    /// The challenge of the second deposit's unbond.
    other_uta_uca: SimTx,
}

fn txs(sim: &Simulation) -> Txs {
    let scheme = sim.world.chain().scheme();
    let dep = &sim.depositor.keypair;
    let to = &sim.operator.keypair;
    let d0 = &sim.world.instance.deposits[0];
    let d1 = &sim.world.instance.deposits[1];
    Txs {
        va_rca: d0.rebalance_request.finalize(Some(to), scheme).unwrap(),
        va_uta: d0.unbond_request.finalize(Some(dep), scheme).unwrap(),
        uta_uca: d0.unbond_challenge.finalize(Some(to), scheme).unwrap(),
        other_uta_uca: d1.unbond_challenge.finalize(Some(to), scheme).unwrap(),
    }
}

/// How to make exactly one check of a pipeline fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Fault {
    None,
    Rebooted,
    StaleView,
    UnknownDeposit,
    BadVaultWitness,
    BadChallengeWitness,
    ForeignOperator,
    ChallengeWithoutOperator,
    ChallengeOfOtherUnbond,
    WrongUnbondDestination,
    WrongChallengeDestination,
    WrongRebalanceDestination,
    ExpiredVersion,
}

impl Fault {
    fn check(self) -> Option<Check> {
        use Fault::*;
        Some(match self {
            None => return Option::None,
            Rebooted => Check::Initialized,
            StaleView => Check::Synced,
            UnknownDeposit => Check::DepositLookup,
            BadVaultWitness | BadChallengeWitness => Check::WitnessSignatures,
            ForeignOperator => Check::OperatorSignature,
            ChallengeWithoutOperator => Check::ChallengeOperatorSignature,
            ChallengeOfOtherUnbond => Check::Chaining,
            WrongUnbondDestination => Check::UtaAddress,
            WrongChallengeDestination => Check::UcaAddress,
            WrongRebalanceDestination => Check::RcaAddress,
            ExpiredVersion => Check::VersionUnexpired,
        })
    }

    fn applies(self, kind: Kind) -> bool {
        use Fault::*;
        match self {
            BadChallengeWitness | ChallengeWithoutOperator | ChallengeOfOtherUnbond | WrongUnbondDestination
            | WrongChallengeDestination => kind == Kind::Unbond,
            WrongRebalanceDestination => kind == Kind::Rebalance,
            _ => true,
        }
    }
}

const FAULTS: [Fault; 13] = [
    Fault::None,
    Fault::Rebooted,
    Fault::StaleView,
    Fault::UnknownDeposit,
    Fault::BadVaultWitness,
    Fault::BadChallengeWitness,
    Fault::ForeignOperator,
    Fault::ChallengeWithoutOperator,
    Fault::ChallengeOfOtherUnbond,
    Fault::WrongUnbondDestination,
    Fault::WrongChallengeDestination,
    Fault::WrongRebalanceDestination,
    Fault::ExpiredVersion,
];

fn run_cell(kind: Kind, status: UtxoStatus, fault: Fault) -> Result<(), Bottom> {
    let edit = RegistryEdit {
        foreign_operator: fault == Fault::ForeignOperator,
        expired_version: fault == Fault::ExpiredVersion,
    };
    let mut sim = fixture(status, edit);
    let scheme = sim.world.chain().scheme();
    let dep = sim.depositor.keypair.clone();
    let to = sim.operator.keypair.clone();
    let Txs { mut va_rca, mut va_uta, mut uta_uca, other_uta_uca } = txs(&sim);
    let dest = &sim.world.ledgers.dest;
    let mut view = sim.arbiters[0].oracle.view(dest).expect("arbiter synced");
    let elsewhere = AddressId([0x5a; 32]);
    match fault {
        Fault::None | Fault::ForeignOperator | Fault::ExpiredVersion => {}
        Fault::Rebooted => sim.arbiters[0].oracle.reboot(),
        Fault::StaleView => {
            let cps = dest.checkpoints();
            let old = cps[cps.len() - 2].clone();
            view = RegistryView::new(old.clone(), dest.registry_at(&old).unwrap()).unwrap();
        }
        Fault::UnknownDeposit => {
            va_rca.inputs[0].prevout.vout += 7;
            va_uta.inputs[0].prevout.vout += 7;
        }
        Fault::BadVaultWitness => {
            corrupt(&mut va_rca);
            corrupt(&mut va_uta);
        }
        Fault::BadChallengeWitness => corrupt(&mut uta_uca),
        Fault::ChallengeWithoutOperator => resign(&mut uta_uca, &[&dep], 1, scheme),
        Fault::ChallengeOfOtherUnbond => uta_uca = other_uta_uca,
        Fault::WrongUnbondDestination => {
            va_uta.outputs[0].address = elsewhere;
            resign(&mut va_uta, &[&dep, &to], 0, scheme);
            uta_uca.inputs[0].prevout = va_uta.outpoint(0);
            resign(&mut uta_uca, &[&dep, &to], 0, scheme);
        }
        Fault::WrongChallengeDestination => {
            uta_uca.outputs[0].address = elsewhere;
            resign(&mut uta_uca, &[&dep, &to], 0, scheme);
        }
        Fault::WrongRebalanceDestination => {
            va_rca.outputs[0].address = elsewhere;
            resign(&mut va_rca, &[&dep, &to], 0, scheme);
        }
    }
    let ao = &mut sim.arbiters[0].oracle;
    let before = ao.signatures_produced();
    let out = match kind {
        Kind::Rebalance => ao.resolve_rebalance(&va_rca, &view),
        Kind::Unbond => ao.resolve_unbond_challenge(&va_uta, &uta_uca, &view),
    };
    match &out {
        Ok(psbt) => {
            let pk = ao.pubkey().unwrap();
            assert!(psbt.signed_by(&pk, scheme));
            assert_eq!(ao.signatures_produced(), before + 1);
        }
        Err(_) => assert_eq!(ao.signatures_produced(), before),
    }
    out.map(|_| ())
}

fn cross_product(kind: Kind) -> (usize, usize) {
    let mut cells = 0;
    let mut signed = 0;
    let mut failed_checks = BTreeSet::new();
    for status in UtxoStatus::ALL {
        for fault in FAULTS.into_iter().filter(|f| f.applies(kind)) {
            let want = expected(kind, status, fault.check());
            let got = run_cell(kind, status, fault);
            assert_eq!(got, want, "{kind:?} {status:?} {fault:?}");
            if let Some(c) = fault.check() {
                failed_checks.insert(c);
            }
            signed += got.is_ok() as usize;
            cells += 1;
        }
    }
    let all: BTreeSet<Check> = match kind {
        Kind::Rebalance => REBALANCE_CHECKS.into_iter().collect(),
        Kind::Unbond => UNBOND_CHECKS.into_iter().collect(),
    };
    assert_eq!(failed_checks, all, "every check of the pipeline is exercised");
    (cells, signed)
}

#[test]
fn rebalance_resolution_cross_product() {
    let (cells, signed) = cross_product(Kind::Rebalance);
    assert_eq!(cells, 5 * 8);
    // Valid inputs only, and every status but SpentOnRebalance.
    assert_eq!(signed, 4);
}

#[test]
fn unbond_resolution_cross_product() {
    let (cells, signed) = cross_product(Kind::Unbond);
    assert_eq!(cells, 5 * 12);
    // Valid inputs with Withdrawn or Rejected.
    assert_eq!(signed, 2);
}

#[test]
fn compromised_enclave_signs_regardless_of_status() {
    let mut sim = fixture(UtxoStatus::SpentOnRebalance, RegistryEdit::default());
    let Txs { va_rca, .. } = txs(&sim);
    let view = sim.arbiters[0].oracle.view(&sim.world.ledgers.dest).unwrap();
    let ao = &mut sim.arbiters[0].oracle;
    assert_eq!(ao.resolve_rebalance(&va_rca, &view).unwrap_err(), Bottom::StatusFavorsOperator(UtxoStatus::SpentOnRebalance));
    ao.compromise_tee();
    assert!(ao.resolve_rebalance(&va_rca, &view).is_ok());
}
