//! Input verification and resolution. An arbiter signs only after every
//! check of the relevant pipeline passes and the registry status favors
//! the depositor.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{ArbitrationOracle, RegistryView};
use crate::chain::{OutPoint, SimTx};
use crate::keys::{build_protocol_addresses, verify, Point, ProtocolAddresses, SigScheme, SpendPolicy};
use crate::psbt::{Psbt, Transition};
use crate::registry::UtxoStatus;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Check {
    /// Enclave holds its key.
    Initialized,
    /// Light client synced and the view is its trusted checkpoint.
    Synced,
    /// The spent vault output is a registered deposit.
    DepositLookup,
    /// Witness signatures verify against the recomputed leaves.
    WitnessSignatures,
    /// The vault spend carries the operator's signature.
    OperatorSignature,
    /// The challenge spend carries the operator's signature.
    ChallengeOperatorSignature,
    /// The challenge spends the unbond output.
    Chaining,
    UtaAddress,
    UcaAddress,
    RcaAddress,
    VersionUnexpired,
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

pub const REBALANCE_CHECKS: [Check; 7] = [
    Check::Initialized,
    Check::Synced,
    Check::DepositLookup,
    Check::WitnessSignatures,
    Check::OperatorSignature,
    Check::RcaAddress,
    Check::VersionUnexpired,
];

pub const UNBOND_CHECKS: [Check; 10] = [
    Check::Initialized,
    Check::Synced,
    Check::DepositLookup,
    Check::WitnessSignatures,
    Check::OperatorSignature,
    Check::ChallengeOperatorSignature,
    Check::Chaining,
    Check::UtaAddress,
    Check::UcaAddress,
    Check::VersionUnexpired,
];

/// Every way an arbiter declines to sign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bottom {
    Failed(Check),
    StatusFavorsOperator(UtxoStatus),
    PsbtMissingOnSar,
    PsbtDoesNotSpendOutput,
}

impl fmt::Display for Bottom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bottom::Failed(c) => write!(f, "check {c} failed"),
            Bottom::StatusFavorsOperator(s) => write!(f, "status {s:?} favors the operator"),
            Bottom::PsbtMissingOnSar => f.write_str("resolution template missing from registry"),
            Bottom::PsbtDoesNotSpendOutput => f.write_str("registry template does not spend the challenge output"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResolutionKind {
    Rebalance,
    Unbond,
}

impl ResolutionKind {
    fn template(self) -> Transition {
        match self {
            ResolutionKind::Rebalance => Transition::RebalanceResolve,
            ResolutionKind::Unbond => Transition::UnbondResolve,
        }
    }
}

/// Proof that a pipeline passed. Only the pipelines construct it.
#[derive(Debug, Clone)]
pub struct VerifiedContext {
    kind: ResolutionKind,
    deposit: OutPoint,
    status: UtxoStatus,
    /// Output the resolution must spend.
    challenged: OutPoint,
    template: Option<Psbt>,
}

impl VerifiedContext {
    pub fn kind(&self) -> ResolutionKind {
        self.kind
    }

    pub fn deposit(&self) -> OutPoint {
        self.deposit
    }

    pub fn status(&self) -> UtxoStatus {
        self.status
    }

    pub fn challenged(&self) -> OutPoint {
        self.challenged
    }
}

fn witness_valid<'a>(tx: &SimTx, index: usize, leaves: &'a [SpendPolicy], scheme: SigScheme) -> Option<&'a SpendPolicy> {
    let input = tx.inputs.get(index)?;
    let leaf = leaves.get(input.path as usize)?;
    let keys = leaf.keys();
    if keys.len() != input.witness.len() {
        return None;
    }
    let ok = keys
        .iter()
        .zip(&input.witness)
        .all(|(k, w)| verify(scheme, k, &tx.sighash(index, w.flag), &w.signature));
    ok.then_some(leaf)
}

fn leaf_has(leaf: &SpendPolicy, pk: &Point) -> bool {
    leaf.keys().contains(pk)
}

struct Pipeline<'a> {
    ao: &'a ArbitrationOracle,
    view: &'a RegistryView,
}

impl Pipeline<'_> {
    fn gate(&self, check: Check, ok: bool) -> Result<(), Bottom> {
        if ok {
            Ok(())
        } else {
            Err(Bottom::Failed(check))
        }
    }

    fn preamble(&self) -> Result<(), Bottom> {
        self.gate(Check::Initialized, self.ao.is_initialized())?;
        let synced = self.ao.is_online()
            && self.ao.light_client.is_synced()
            && self.ao.light_client.trusted() == Some(self.view.checkpoint());
        self.gate(Check::Synced, synced)
    }

    fn lookup(&self, tx: &SimTx) -> Result<(OutPoint, UtxoStatus, ProtocolAddresses), Bottom> {
        let deposit = tx.inputs.first().map(|i| i.prevout).ok_or(Bottom::Failed(Check::DepositLookup))?;
        let rec = self.view.registry().record(&deposit).ok_or(Bottom::Failed(Check::DepositLookup))?;
        let addrs = build_protocol_addresses(&rec.tweak).map_err(|_| Bottom::Failed(Check::DepositLookup))?;
        Ok((deposit, rec.status, addrs))
    }

    fn version(&self) -> Result<(), Bottom> {
        let expiry = self.view.registry().get_version_expiry(&self.ao.pcr0());
        self.gate(Check::VersionUnexpired, expiry.is_some_and(|e| self.view.slot() < e))
    }

    fn template(&self, kind: ResolutionKind, deposit: &OutPoint) -> Option<Psbt> {
        self.view.registry().record(deposit)?.psbt(kind.template()).cloned()
    }
}

impl ArbitrationOracle {
    /// Checks a broadcast vault-to-rebalance-challenge spend.
    pub fn verify_rebalance_inputs(&self, tx_va_rca: &SimTx, view: &RegistryView) -> Result<VerifiedContext, Bottom> {
        let p = Pipeline { ao: self, view };
        let scheme = self.scheme();
        p.preamble()?;
        let (deposit, status, addrs) = p.lookup(tx_va_rca)?;
        let pk_to = view.registry().operator();
        let leaf = witness_valid(tx_va_rca, 0, &addrs.va.leaves, scheme);
        p.gate(Check::WitnessSignatures, leaf.is_some())?;
        p.gate(Check::OperatorSignature, leaf.is_some_and(|l| leaf_has(l, &pk_to)))?;
        p.gate(Check::RcaAddress, tx_va_rca.outputs.first().is_some_and(|o| o.address == addrs.rca.id))?;
        p.version()?;
        let template = p.template(ResolutionKind::Rebalance, &deposit);
        Ok(VerifiedContext {
            kind: ResolutionKind::Rebalance,
            deposit,
            status,
            challenged: tx_va_rca.outpoint(0),
            template,
        })
    }

    /// Checks a vault-to-unbond spend and the operator's challenge of it.
    pub fn verify_unbond_inputs(
        &self,
        tx_va_uta: &SimTx,
        tx_uta_uca: &SimTx,
        view: &RegistryView,
    ) -> Result<VerifiedContext, Bottom> {
        let p = Pipeline { ao: self, view };
        let scheme = self.scheme();
        p.preamble()?;
        let (deposit, status, addrs) = p.lookup(tx_va_uta)?;
        let pk_to = view.registry().operator();
        let unbond_leaf = witness_valid(tx_va_uta, 0, &addrs.va.leaves, scheme);
        let challenge_leaf = witness_valid(tx_uta_uca, 0, &addrs.uta.leaves, scheme);
        p.gate(Check::WitnessSignatures, unbond_leaf.is_some() && challenge_leaf.is_some())?;
        p.gate(Check::OperatorSignature, unbond_leaf.is_some_and(|l| leaf_has(l, &pk_to)))?;
        p.gate(Check::ChallengeOperatorSignature, challenge_leaf.is_some_and(|l| leaf_has(l, &pk_to)))?;
        p.gate(Check::Chaining, tx_uta_uca.inputs[0].prevout == tx_va_uta.outpoint(0))?;
        p.gate(Check::UtaAddress, tx_va_uta.outputs.first().is_some_and(|o| o.address == addrs.uta.id))?;
        p.gate(Check::UcaAddress, tx_uta_uca.outputs.first().is_some_and(|o| o.address == addrs.uca.id))?;
        p.version()?;
        let template = p.template(ResolutionKind::Unbond, &deposit);
        Ok(VerifiedContext {
            kind: ResolutionKind::Unbond,
            deposit,
            status,
            challenged: tx_uta_uca.outpoint(0),
            template,
        })
    }

    /// Signs the registry's resolution template if the status favors the
    /// depositor.
    pub fn resolve(&mut self, ctx: &VerifiedContext) -> Result<Psbt, Bottom> {
        if !self.tee_compromised() {
            let favors = match ctx.kind {
                ResolutionKind::Rebalance => ctx.status != UtxoStatus::SpentOnRebalance,
                ResolutionKind::Unbond => ctx.status.favors_depositor_exit(),
            };
            if !favors {
                return Err(Bottom::StatusFavorsOperator(ctx.status));
            }
        }
        let mut psbt = ctx.template.clone().ok_or(Bottom::PsbtMissingOnSar)?;
        if psbt.input.outpoint != ctx.challenged {
            return Err(Bottom::PsbtDoesNotSpendOutput);
        }
        let kp = self.keypair().ok_or(Bottom::Failed(Check::Initialized))?.clone();
        psbt.sign(&kp, self.scheme()).map_err(|_| Bottom::PsbtDoesNotSpendOutput)?;
        self.count_signature();
        Ok(psbt)
    }

    pub fn resolve_rebalance(&mut self, tx_va_rca: &SimTx, view: &RegistryView) -> Result<Psbt, Bottom> {
        let ctx = self.verify_rebalance_inputs(tx_va_rca, view)?;
        self.resolve(&ctx)
    }

    pub fn resolve_unbond_challenge(
        &mut self,
        tx_va_uta: &SimTx,
        tx_uta_uca: &SimTx,
        view: &RegistryView,
    ) -> Result<Psbt, Bottom> {
        let ctx = self.verify_unbond_inputs(tx_va_uta, tx_uta_uca, view)?;
        self.resolve(&ctx)
    }
}

