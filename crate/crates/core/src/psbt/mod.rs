//! Transaction templates with accumulated partial signatures. Pre-signing
//! fixed outputs is what constrains where deposited coins can go.

mod ceremony;
mod fees;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::{BtcChain, ChainError, OutPoint, SighashFlag, SimTx, TxIn, TxOut, WitnessSig};
use crate::digest::{sha256, AddressId, Hash32};
use crate::keys::{verify, AddressKind, KeyError, Keypair, Point, ProtocolAddresses, SigScheme, Signature, SpendPolicy, TweakData};

pub use ceremony::{
    run_setup_ceremony, CeremonyError, CeremonyHooks, CeremonyParties, CeremonyReport, ProtocolInstance,
    MINT_CONFIRMATIONS,
};
pub use fees::{add_fee_input, attach_cpfp_child, collaborative_resplit, min_anchor_fee, ResplitOutcome, SplitPackage};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PsbtError {
    #[error("source output is not at the {0} address")]
    WrongSourceAddress(AddressKind),
    #[error("unknown transition {0:?}")]
    UnknownTransition(String),
    #[error("key is not a signer of this template")]
    NotASigner,
    #[error("key already signed")]
    AlreadySigned,
    #[error("a required counterparty signature is missing")]
    MissingCounterpartySig,
    #[error("input value {value} cannot cover fee {fee} and anchor {anchor}")]
    InsufficientValue { value: u64, fee: u64, anchor: u64 },
    #[error("transaction has no anchor output for this executor")]
    NoAnchor,
    #[error("fee UTXO worth {have} cannot pay {need}")]
    InsufficientFunds { have: u64, need: u64 },
    #[error("an existing signature does not use ANYONECANPAY")]
    FlagViolation,
    #[error("split amounts do not add up to {expected}")]
    InvalidSplit { expected: u64 },
    #[error(transparent)]
    Key(#[from] KeyError),
    #[error(transparent)]
    Chain(#[from] ChainError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transition {
    UnbondRequest,
    UnbondFinalize,
    UnbondChallenge,
    UnbondResolve,
    UnbondResolveExpired,
    RebalanceRequest,
    RebalanceResolve,
    RebalanceResolveExpired,
    CooperativeUnbond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Party {
    Depositor,
    Operator,
    Arbiter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Storage {
    Registry,
    OperatorLocal,
    NotStored,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeeMode {
    /// Dust anchor output to the executor, bumped by a child.
    AnchorCpfp,
    /// ANYONECANPAY pre-signatures; the executor appends a fee input.
    AnyoneCanPay,
    DepositorWallet,
    OperatorWallet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Destination {
    Protocol(AddressKind),
    DepositorReturn,
    OperatorReserve,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TransitionRow {
    pub source: AddressKind,
    pub destination: Destination,
    pub signers: &'static [Party],
    pub creator: Option<Party>,
    pub stored: Storage,
    pub executor: Party,
    pub fee: FeeMode,
}

impl Transition {
    pub const ALL: [Transition; 9] = [
        Transition::UnbondRequest,
        Transition::UnbondFinalize,
        Transition::UnbondChallenge,
        Transition::UnbondResolve,
        Transition::UnbondResolveExpired,
        Transition::RebalanceRequest,
        Transition::RebalanceResolve,
        Transition::RebalanceResolveExpired,
        Transition::CooperativeUnbond,
    ];

    pub const fn row(self) -> TransitionRow {
        use AddressKind::*;
        use Party::*;
        match self {
            Transition::UnbondRequest => TransitionRow {
                source: Vault,
                destination: Destination::Protocol(UnbondTimelock),
                signers: &[Operator, Depositor],
                creator: Some(Operator),
                stored: Storage::Registry,
                executor: Depositor,
                fee: FeeMode::AnchorCpfp,
            },
            Transition::UnbondFinalize => TransitionRow {
                source: UnbondTimelock,
                destination: Destination::DepositorReturn,
                signers: &[Depositor],
                creator: None,
                stored: Storage::NotStored,
                executor: Depositor,
                fee: FeeMode::DepositorWallet,
            },
            Transition::UnbondChallenge => TransitionRow {
                source: UnbondTimelock,
                destination: Destination::Protocol(UnbondChallenge),
                signers: &[Depositor, Operator],
                creator: Some(Depositor),
                stored: Storage::OperatorLocal,
                executor: Operator,
                fee: FeeMode::AnchorCpfp,
            },
            Transition::UnbondResolve => TransitionRow {
                source: UnbondChallenge,
                destination: Destination::DepositorReturn,
                signers: &[Depositor, Arbiter],
                creator: Some(Depositor),
                stored: Storage::Registry,
                executor: Arbiter,
                fee: FeeMode::AnyoneCanPay,
            },
            Transition::UnbondResolveExpired => TransitionRow {
                source: UnbondChallenge,
                destination: Destination::OperatorReserve,
                signers: &[Operator],
                creator: None,
                stored: Storage::NotStored,
                executor: Operator,
                fee: FeeMode::OperatorWallet,
            },
            Transition::RebalanceRequest => TransitionRow {
                source: Vault,
                destination: Destination::Protocol(RebalanceChallenge),
                signers: &[Depositor, Operator],
                creator: Some(Depositor),
                stored: Storage::OperatorLocal,
                executor: Operator,
                fee: FeeMode::AnchorCpfp,
            },
            Transition::RebalanceResolve => TransitionRow {
                source: RebalanceChallenge,
                destination: Destination::DepositorReturn,
                signers: &[Depositor, Arbiter],
                creator: Some(Depositor),
                stored: Storage::Registry,
                executor: Arbiter,
                fee: FeeMode::AnyoneCanPay,
            },
            Transition::RebalanceResolveExpired => TransitionRow {
                source: RebalanceChallenge,
                destination: Destination::OperatorReserve,
                signers: &[Operator],
                creator: None,
                stored: Storage::NotStored,
                executor: Operator,
                fee: FeeMode::OperatorWallet,
            },
            Transition::CooperativeUnbond => TransitionRow {
                source: Vault,
                destination: Destination::DepositorReturn,
                signers: &[Operator, Depositor],
                creator: Some(Operator),
                stored: Storage::NotStored,
                executor: Depositor,
                fee: FeeMode::AnchorCpfp,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Transition::UnbondRequest => "unbond-request",
            Transition::UnbondFinalize => "unbond-finalize",
            Transition::UnbondChallenge => "unbond-challenge",
            Transition::UnbondResolve => "unbond-resolve",
            Transition::UnbondResolveExpired => "unbond-resolve-expired",
            Transition::RebalanceRequest => "rebalance-request",
            Transition::RebalanceResolve => "rebalance-resolve",
            Transition::RebalanceResolveExpired => "rebalance-resolve-expired",
            Transition::CooperativeUnbond => "cooperative-unbond",
        }
    }

    /// Leaves of the source address this transition may spend through.
    fn paths(self, arbiters: usize) -> Vec<u32> {
        match self {
            Transition::UnbondRequest
            | Transition::RebalanceRequest
            | Transition::CooperativeUnbond
            | Transition::UnbondChallenge => vec![0],
            Transition::UnbondFinalize => vec![1],
            Transition::UnbondResolve | Transition::RebalanceResolve => (0..arbiters as u32).collect(),
            Transition::UnbondResolveExpired | Transition::RebalanceResolveExpired => vec![arbiters as u32],
        }
    }
}

impl fmt::Display for Transition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Transition {
    type Err = PsbtError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Transition::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| PsbtError::UnknownTransition(s.to_string()))
    }
}

/// An output being spent, with what the spender needs to know about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prevout {
    pub outpoint: OutPoint,
    pub value: u64,
    pub address: AddressId,
}

/// Fee parameters used when a template is created.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeePolicy {
    /// sat per weight unit baked into the template.
    pub base_feerate: u64,
    pub anchor_value: u64,
}

impl Default for FeePolicy {
    fn default() -> Self {
        FeePolicy { base_feerate: 1, anchor_value: 330 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub path: u32,
    pub policy: SpendPolicy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Psbt {
    pub transition: Transition,
    /// Unsigned transaction; input 0 spends the protocol output.
    pub tx: SimTx,
    pub input: Prevout,
    /// Leaves still able to complete given the signatures so far.
    pub candidates: Vec<Candidate>,
    pub flag: SighashFlag,
    pub partial_sigs: BTreeMap<Point, Signature>,
}

/// Ledger address a transition pays to.
pub fn destination_address(
    transition: Transition,
    addresses: &ProtocolAddresses,
    tweak: &TweakData,
    operator_reserve: Option<AddressId>,
) -> Result<Option<AddressId>, KeyError> {
    Ok(match transition.row().destination {
        Destination::Protocol(k) => Some(addresses.get(k).id),
        Destination::DepositorReturn => Some(tweak.return_address_id()?),
        Destination::OperatorReserve => operator_reserve,
    })
}

/// Creates the template for `transition` spending `input`.
///
/// `operator_reserve` is required only for the expired-resolution claims.
pub fn build_psbt(
    transition: Transition,
    addresses: &ProtocolAddresses,
    tweak: &TweakData,
    input: Prevout,
    operator_reserve: Option<AddressId>,
    policy: &FeePolicy,
) -> Result<Psbt, PsbtError> {
    let row = transition.row();
    let source = addresses.get(row.source);
    if input.address != source.id {
        return Err(PsbtError::WrongSourceAddress(row.source));
    }
    let dest = destination_address(transition, addresses, tweak, operator_reserve)?
        .ok_or(KeyError::InvalidTweakData("operator reserve address required"))?;
    let anchor = match row.fee {
        FeeMode::AnchorCpfp => {
            let exec = match row.executor {
                Party::Depositor => tweak.depositor,
                _ => tweak.operator,
            };
            Some(TxOut { address: exec.key_address(), value: policy.anchor_value })
        }
        _ => None,
    };
    let weight = 1 + 1 + anchor.is_some() as u64;
    let fee = policy.base_feerate * weight;
    let anchor_value = anchor.map_or(0, |a| a.value);
    if input.value <= fee + anchor_value {
        return Err(PsbtError::InsufficientValue { value: input.value, fee, anchor: anchor_value });
    }
    let mut outputs = vec![TxOut { address: dest, value: input.value - fee - anchor_value }];
    outputs.extend(anchor);
    let tx = SimTx {
        inputs: vec![TxIn { prevout: input.outpoint, path: 0, witness: vec![] }],
        outputs,
        anchor: anchor.map(|_| 1),
    };
    let candidates = transition
        .paths(tweak.arbiters.len())
        .into_iter()
        .map(|path| Candidate { path, policy: source.leaves[path as usize].clone() })
        .collect();
    let flag = match row.fee {
        FeeMode::AnyoneCanPay => SighashFlag::AnyoneCanPayAll,
        _ => SighashFlag::All,
    };
    Ok(Psbt { transition, tx, input, candidates, flag, partial_sigs: BTreeMap::new() })
}

impl Psbt {
    pub fn sighash(&self) -> [u8; 32] {
        self.tx.sighash(0, self.flag)
    }

    pub fn txid(&self) -> crate::digest::Txid {
        self.tx.txid()
    }

    /// Outpoint of the main (non-anchor) output.
    pub fn output(&self) -> Prevout {
        Prevout { outpoint: self.tx.outpoint(0), value: self.tx.outputs[0].value, address: self.tx.outputs[0].address }
    }

    pub fn destination(&self) -> AddressId {
        self.tx.outputs[0].address
    }

    pub fn signers(&self) -> impl Iterator<Item = &Point> {
        self.partial_sigs.keys()
    }

    pub fn has_signed(&self, pk: &Point) -> bool {
        self.partial_sigs.contains_key(pk)
    }

    fn live_candidates<'a>(&'a self, extra: Option<&'a Point>) -> impl Iterator<Item = &'a Candidate> + 'a {
        self.candidates.iter().filter(move |c| {
            let keys = c.policy.keys();
            self.partial_sigs.keys().chain(extra).all(|k| keys.contains(k))
        })
    }

    /// Adds `kp`'s partial signature.
    pub fn sign(&mut self, kp: &Keypair, scheme: SigScheme) -> Result<(), PsbtError> {
        let pk = kp.public();
        if self.partial_sigs.contains_key(&pk) {
            return Err(PsbtError::AlreadySigned);
        }
        if self.live_candidates(Some(&pk)).next().is_none() {
            return Err(PsbtError::NotASigner);
        }
        let sig = kp.sign(scheme, &self.sighash());
        self.partial_sigs.insert(pk, sig);
        Ok(())
    }

    /// Every partial signature verifies over this template.
    pub fn partial_sigs_valid(&self, scheme: SigScheme) -> bool {
        let msg = self.sighash();
        self.partial_sigs.iter().all(|(pk, sig)| verify(scheme, pk, &msg, sig))
    }

    pub fn signed_by(&self, pk: &Point, scheme: SigScheme) -> bool {
        self.partial_sigs.get(pk).is_some_and(|s| verify(scheme, pk, &self.sighash(), s))
    }

    /// Adds the executor's signature if still needed and assembles the
    /// witness from the first leaf whose keys have all signed.
    pub fn finalize(&self, executor: Option<&Keypair>, scheme: SigScheme) -> Result<SimTx, PsbtError> {
        let mut p = self.clone();
        if let Some(kp) = executor {
            match p.sign(kp, scheme) {
                Ok(()) | Err(PsbtError::AlreadySigned) | Err(PsbtError::NotASigner) => {}
                Err(e) => return Err(e),
            }
        }
        let done = p
            .candidates
            .iter()
            .find(|c| c.policy.keys().iter().all(|k| p.partial_sigs.contains_key(k)))
            .ok_or(PsbtError::MissingCounterpartySig)?;
        let witness = done
            .policy
            .keys()
            .iter()
            .map(|k| WitnessSig { signature: p.partial_sigs[k], flag: p.flag })
            .collect();
        let mut tx = p.tx.clone();
        tx.inputs[0].path = done.path;
        tx.inputs[0].witness = witness;
        Ok(tx)
    }

    pub fn finalize_and_broadcast(
        &self,
        executor: Option<&Keypair>,
        chain: &mut BtcChain,
    ) -> Result<SimTx, PsbtError> {
        let tx = self.finalize(executor, chain.scheme())?;
        chain.submit_tx(tx.clone())?;
        Ok(tx)
    }

    /// Canonical text: compact JSON with hex fields in declaration order.
    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("psbt serializes")
    }

    pub fn digest(&self) -> Hash32 {
        Hash32(sha256(&[self.canonical_text().as_bytes()]))
    }
}

/// The five templates created per deposited output during setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositPsbts {
    pub deposit: Prevout,
    pub unbond_request: Psbt,
    pub unbond_challenge: Psbt,
    pub unbond_resolve: Psbt,
    pub rebalance_request: Psbt,
    pub rebalance_resolve: Psbt,
}

impl DepositPsbts {
    /// Builds the unsigned chain of templates rooted at `deposit`.
    pub fn build(
        addresses: &ProtocolAddresses,
        tweak: &TweakData,
        deposit: Prevout,
        policy: &FeePolicy,
    ) -> Result<Self, PsbtError> {
        let b = |t, input| build_psbt(t, addresses, tweak, input, None, policy);
        let unbond_request = b(Transition::UnbondRequest, deposit)?;
        let unbond_challenge = b(Transition::UnbondChallenge, unbond_request.output())?;
        let unbond_resolve = b(Transition::UnbondResolve, unbond_challenge.output())?;
        let rebalance_request = b(Transition::RebalanceRequest, deposit)?;
        let rebalance_resolve = b(Transition::RebalanceResolve, rebalance_request.output())?;
        Ok(DepositPsbts { deposit, unbond_request, unbond_challenge, unbond_resolve, rebalance_request, rebalance_resolve })
    }

    /// Operator's share of the setup signatures.
    pub fn sign_as_operator(&mut self, to: &Keypair, scheme: SigScheme) -> Result<(), PsbtError> {
        self.unbond_request.sign(to, scheme)
    }

    /// Depositor's share of the setup signatures.
    pub fn sign_as_depositor(&mut self, dep: &Keypair, scheme: SigScheme) -> Result<(), PsbtError> {
        self.rebalance_request.sign(dep, scheme)?;
        self.unbond_challenge.sign(dep, scheme)?;
        self.rebalance_resolve.sign(dep, scheme)?;
        self.unbond_resolve.sign(dep, scheme)
    }

    pub fn all(&self) -> [&Psbt; 5] {
        [&self.unbond_request, &self.unbond_challenge, &self.unbond_resolve, &self.rebalance_request, &self.rebalance_resolve]
    }

    /// The three templates the registry holds.
    pub fn registry_set(&self) -> [&Psbt; 3] {
        [&self.unbond_request, &self.unbond_resolve, &self.rebalance_resolve]
    }
}
