//! The setup ceremony: templates are exchanged and signed, the registry
//! receives the depositor-protective ones, and only then is the vault
//! funded and the token minted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{DepositPsbts, FeePolicy, Prevout, PsbtError};
use crate::arbitration::Attestation;
use crate::chain::{BtcChain, ChainError, Ledgers, Lock, OutPoint, SighashFlag, SimTx, TxIn, TxOut, Utxo, WitnessSig};
use crate::digest::Txid;
use crate::keys::{build_protocol_addresses, KeyError, Keypair, Point, ProtocolAddresses, TweakData};
use crate::registry::{Caller, DepositRegistration, DepositorId, RegistryError, Timelocks, REGISTRY_TRANSITIONS};

pub const MINT_CONFIRMATIONS: u64 = 6;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CeremonyError {
    #[error("verification failed at step {step}: {reason}")]
    VerificationFailed { step: &'static str, reason: String },
    #[error("T3 must exceed T1 + T2")]
    TimelockRelationViolated,
    #[error("depositor funding of {have} cannot cover {need}")]
    InsufficientFunding { have: u64, need: u64 },
    #[error(transparent)]
    Psbt(#[from] PsbtError),
    #[error(transparent)]
    Registry(#[from] RegistryError),
    #[error(transparent)]
    Chain(#[from] ChainError),
    #[error(transparent)]
    Key(#[from] KeyError),
}

/// One depositor's account: keys, addresses and per-deposit templates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolInstance {
    pub depositor_id: DepositorId,
    pub tweak: TweakData,
    pub addresses: ProtocolAddresses,
    pub deposits: Vec<DepositPsbts>,
    pub policy: FeePolicy,
}

impl ProtocolInstance {
    pub fn deposit(&self, op: &OutPoint) -> Option<&DepositPsbts> {
        self.deposits.iter().find(|d| d.deposit.outpoint == *op)
    }

    /// Makes the four addresses spendable on `chain` by script path only.
    pub fn register_locks(&self, chain: &mut BtcChain) {
        for a in self.addresses.all() {
            chain.register_lock(a.id, Lock::Script(a.leaves.clone()));
        }
        chain.register_key(self.tweak.depositor);
        chain.register_key(self.tweak.operator);
    }

    pub fn registration(&self, d: &DepositPsbts) -> DepositRegistration {
        DepositRegistration {
            outpoint: d.deposit.outpoint,
            owner: self.depositor_id,
            amount: d.deposit.value,
            tweak: self.tweak.clone(),
            psbts: d.registry_set().into_iter().cloned().collect(),
        }
    }
}

pub struct CeremonyParties<'a> {
    pub depositor: &'a Keypair,
    pub depositor_id: DepositorId,
    pub operator: &'a Keypair,
    /// Arbiter attestations the operator checks before using their keys.
    pub arbiters: &'a [Attestation],
    pub attestation_root: Point,
    pub t1: u32,
    pub t2: u32,
    pub destination_address: Vec<u8>,
    /// Depositor wallet outputs that fund the vault.
    pub funding: Vec<Utxo>,
    /// Value of each vault output to create.
    pub amounts: Vec<u64>,
    pub policy: FeePolicy,
}

/// Fault injection for the ceremony.
#[derive(Debug, Clone, Copy, Default)]
pub struct CeremonyHooks {
    /// The operator posts an altered unbond-resolve template.
    pub tamper_posted_unbond_resolve: bool,
}

#[derive(Debug, Clone)]
pub struct CeremonyReport {
    pub instance: ProtocolInstance,
    pub funding_txid: Txid,
    pub minted_at_height: u64,
    pub log: Vec<String>,
}

fn fail(step: &'static str, reason: impl Into<String>) -> CeremonyError {
    CeremonyError::VerificationFailed { step, reason: reason.into() }
}

/// Runs steps 0 to 5 in order. Any failure before funding leaves no deposit.
pub fn run_setup_ceremony(
    ledgers: &mut Ledgers,
    parties: &CeremonyParties<'_>,
    hooks: CeremonyHooks,
) -> Result<CeremonyReport, CeremonyError> {
    let scheme = ledgers.btc.scheme();
    let mut log = Vec::new();
    let now = ledgers.slot();
    let registry_tl = ledgers.dest.registry().timelocks_at(now);
    let tl = Timelocks { t1: parties.t1, t2: parties.t2, ..registry_tl };
    if tl.validate().is_err() {
        return Err(CeremonyError::TimelockRelationViolated);
    }

    let root = parties.attestation_root;
    let mut arbiters = Vec::with_capacity(parties.arbiters.len());
    for att in parties.arbiters {
        match att.ao_pubkey {
            Some(pk) if att.verify(&root, scheme) => arbiters.push(pk),
            _ => return Err(fail("arbiter-attestation", "attestation does not verify")),
        }
    }
    let dep = parties.depositor;
    let to = parties.operator;
    let tweak = TweakData {
        depositor: dep.public(),
        operator: to.public(),
        arbiters,
        t1: parties.t1,
        t2: parties.t2,
        destination_address: parties.destination_address.clone(),
        return_address: dep.public().key_address().0.to_vec(),
    };
    let addresses = build_protocol_addresses(&tweak)?;

    // Step 0: the depositor fixes the funding transaction and shares the
    // vault outpoints it will create.
    let funding_tx = build_funding_tx(&ledgers.btc, dep, &parties.funding, &parties.amounts, addresses.va.id)?;
    let funding_txid = funding_tx.txid();
    let deposits: Vec<Prevout> = parties
        .amounts
        .iter()
        .enumerate()
        .map(|(i, v)| Prevout { outpoint: funding_tx.outpoint(i as u32), value: *v, address: addresses.va.id })
        .collect();
    log.push(format!("0 depositor shares {} intended outputs", deposits.len()));

    let mut sets = Vec::with_capacity(deposits.len());
    for d in deposits {
        let mut set = DepositPsbts::build(&addresses, &tweak, d, &parties.policy)?;
        // Step 1a / 1b
        set.sign_as_operator(to, scheme)?;
        set.sign_as_depositor(dep, scheme)?;
        sets.push(set);
    }
    log.push("1a operator signs unbond-request".into());
    log.push("1b depositor signs rebalance-request, unbond-challenge, rebalance-resolve, unbond-resolve".into());

    // Step 2a: operator checks what it will hold locally.
    for set in &sets {
        for p in [&set.rebalance_request, &set.unbond_challenge] {
            if !p.signed_by(&dep.public(), scheme) {
                return Err(fail("2a", format!("{} lacks a valid depositor signature", p.transition)));
            }
        }
        if set.rebalance_request.destination() != addresses.rca.id
            || set.unbond_challenge.destination() != addresses.uca.id
        {
            return Err(fail("2a", "operator-held template pays the wrong address"));
        }
    }
    log.push("2a operator verifies depositor templates".into());

    let instance = ProtocolInstance {
        depositor_id: parties.depositor_id,
        tweak: tweak.clone(),
        addresses,
        deposits: sets,
        policy: parties.policy,
    };

    // Step 2b: operator posts the three registry templates.
    for set in &instance.deposits {
        let mut reg = instance.registration(set);
        if hooks.tamper_posted_unbond_resolve {
            if let Some(p) = reg.psbts.iter_mut().find(|p| p.transition == super::Transition::UnbondResolve) {
                p.partial_sigs.clear();
            }
        }
        ledgers.dest.registry_mut().register_deposit(reg, Caller::Operator, now)?;
    }
    log.push("2b operator posts unbond-request, unbond-resolve, rebalance-resolve".into());

    // Step 3: depositor checks the registry holds exactly its copies.
    for set in &instance.deposits {
        let rec = ledgers
            .dest
            .registry()
            .record(&set.deposit.outpoint)
            .ok_or_else(|| fail("3", "deposit missing from registry"))?;
        for t in REGISTRY_TRANSITIONS {
            let mine = set.registry_set().into_iter().find(|p| p.transition == t).expect("three templates");
            if rec.psbt(t).map(|p| p.digest()) != Some(mine.digest()) {
                return Err(fail("3", format!("registry {t} differs from depositor copy")));
            }
        }
        if rec.tweak_digest != tweak.digest() {
            return Err(fail("3", "registry tweak data differs"));
        }
    }
    log.push("3 depositor verifies registry contents".into());

    // Step 4: fund the vault.
    instance.register_locks(&mut ledgers.btc);
    ledgers.btc.submit_tx(funding_tx)?;
    log.push(format!("4 depositor funds vault in {}", funding_txid.short()));

    // Step 5: mint after enough confirmations.
    while ledgers.btc.confirmations(&funding_txid) < MINT_CONFIRMATIONS {
        ledgers.step();
        if ledgers.height() > 10_000 {
            return Err(fail("5", "funding transaction never confirmed"));
        }
    }
    let slot = ledgers.slot();
    for set in &instance.deposits {
        ledgers.dest.registry_mut().activate_on_mint(&set.deposit.outpoint, Caller::Operator, slot)?;
    }
    let minted_at_height = ledgers.height();
    log.push(format!("5 operator mints at height {minted_at_height}"));
    Ok(CeremonyReport { instance, funding_txid, minted_at_height, log })
}

fn build_funding_tx(
    chain: &BtcChain,
    dep: &Keypair,
    funding: &[Utxo],
    amounts: &[u64],
    va: crate::digest::AddressId,
) -> Result<SimTx, CeremonyError> {
    let have: u64 = funding.iter().map(|u| u.value).sum();
    let mut outputs: Vec<TxOut> = amounts.iter().map(|v| TxOut { address: va, value: *v }).collect();
    let weight = (funding.len() + outputs.len() + 1) as u64;
    let fee = chain.next_block_feerate() * weight;
    let need = amounts.iter().sum::<u64>() + fee;
    if have <= need || amounts.iter().any(|v| *v == 0) || amounts.is_empty() {
        return Err(CeremonyError::InsufficientFunding { have, need: need + 1 });
    }
    outputs.push(TxOut { address: dep.public().key_address(), value: have - need });
    let mut tx = SimTx {
        inputs: funding.iter().map(|u| TxIn { prevout: u.outpoint, path: 0, witness: vec![] }).collect(),
        outputs,
        anchor: None,
    };
    for i in 0..tx.inputs.len() {
        let sig = dep.sign(chain.scheme(), &tx.sighash(i, SighashFlag::All));
        tx.inputs[i].witness = vec![WitnessSig { signature: sig, flag: SighashFlag::All }];
    }
    Ok(tx)
}
