//! Fee bumping for templates whose fees were fixed at setup, and the
//! collaborative re-split used by the exact-amount rebalance model.

use serde::{Deserialize, Serialize};

use super::{DepositPsbts, FeePolicy, Prevout, ProtocolInstance, PsbtError};
use crate::chain::{SighashFlag, SimTx, TxIn, TxOut, Utxo, WitnessSig};
use crate::keys::{Keypair, SigScheme};

/// Smallest anchor-child fee that lifts the package to the required total:
/// `f_anchor = f_required + f̃_required − f_0`, floored at zero.
pub fn min_anchor_fee(f0: u64, f_required: u64, f_child_required: u64) -> u64 {
    (f_required + f_child_required).saturating_sub(f0)
}

/// Builds a child spending `parent`'s anchor plus `executor_utxo` so the
/// pair meets `feerate`. `parent_fee` is the fee the parent already pays.
pub fn attach_cpfp_child(
    parent: &SimTx,
    parent_fee: u64,
    executor: &Keypair,
    executor_utxo: &Utxo,
    feerate: u64,
    scheme: SigScheme,
) -> Result<SimTx, PsbtError> {
    let own = executor.public().key_address();
    let anchor_vout = parent.anchor.ok_or(PsbtError::NoAnchor)?;
    let anchor = parent.outputs.get(anchor_vout as usize).ok_or(PsbtError::NoAnchor)?;
    if anchor.address != own {
        return Err(PsbtError::NoAnchor);
    }
    const CHILD_WEIGHT: u64 = 3;
    let f_anchor = min_anchor_fee(parent_fee, feerate * parent.weight(), feerate * CHILD_WEIGHT);
    if executor_utxo.value < f_anchor {
        return Err(PsbtError::InsufficientFunds { have: executor_utxo.value, need: f_anchor });
    }
    let mut child = SimTx {
        inputs: vec![
            TxIn { prevout: parent.outpoint(anchor_vout), path: 0, witness: vec![] },
            TxIn { prevout: executor_utxo.outpoint, path: 0, witness: vec![] },
        ],
        outputs: vec![TxOut { address: own, value: anchor.value + executor_utxo.value - f_anchor }],
        anchor: None,
    };
    for i in 0..2 {
        let sig = executor.sign(scheme, &child.sighash(i, SighashFlag::All));
        child.inputs[i].witness = vec![WitnessSig { signature: sig, flag: SighashFlag::All }];
    }
    Ok(child)
}

/// Appends `fee_utxo` as an extra input; its whole value goes to fees since
/// adding an output would break the existing signatures.
pub fn add_fee_input(tx: &SimTx, fee_utxo: &Utxo, key: &Keypair, scheme: SigScheme) -> Result<SimTx, PsbtError> {
    if tx.inputs.iter().flat_map(|i| &i.witness).any(|w| w.flag != SighashFlag::AnyoneCanPayAll) {
        return Err(PsbtError::FlagViolation);
    }
    let mut out = tx.clone();
    out.inputs.push(TxIn { prevout: fee_utxo.outpoint, path: 0, witness: vec![] });
    let idx = out.inputs.len() - 1;
    let sig = key.sign(scheme, &out.sighash(idx, SighashFlag::AnyoneCanPayAll));
    out.inputs[idx].witness = vec![WitnessSig { signature: sig, flag: SighashFlag::AnyoneCanPayAll }];
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPackage {
    /// Fully signed VA → (VA, VA) transaction.
    pub split_tx: SimTx,
    pub rebalanced: DepositPsbts,
    pub remainder: DepositPsbts,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ResplitOutcome {
    Split(Box<SplitPackage>),
    /// No depositor signature in time; the whole output is rebalanced.
    Timeout,
}

/// Splits `deposit` into `(rebalanced, remainder)` outputs at the vault and
/// produces fresh templates for both, if the depositor answers within
/// `deadline` blocks. The split pays `3 × base_feerate` out of the deposit.
#[allow(clippy::too_many_arguments)]
pub fn collaborative_resplit(
    instance: &ProtocolInstance,
    deposit: Prevout,
    rebalanced: u64,
    remainder: u64,
    operator: &Keypair,
    depositor: Option<(&Keypair, u64)>,
    deadline: u64,
    scheme: SigScheme,
) -> Result<ResplitOutcome, PsbtError> {
    let policy: &FeePolicy = &instance.policy;
    let fee = 3 * policy.base_feerate;
    let expected = deposit.value.saturating_sub(fee);
    if rebalanced == 0 || remainder == 0 || rebalanced.checked_add(remainder) != Some(expected) {
        return Err(PsbtError::InvalidSplit { expected });
    }
    let Some((dep, _)) = depositor.filter(|(_, d)| *d <= deadline) else {
        return Ok(ResplitOutcome::Timeout);
    };
    let va = instance.addresses.va.id;
    if deposit.address != va {
        return Err(PsbtError::WrongSourceAddress(crate::keys::AddressKind::Vault));
    }
    let mut split_tx = SimTx {
        inputs: vec![TxIn { prevout: deposit.outpoint, path: 0, witness: vec![] }],
        outputs: vec![TxOut { address: va, value: rebalanced }, TxOut { address: va, value: remainder }],
        anchor: None,
    };
    let msg = split_tx.sighash(0, SighashFlag::All);
    split_tx.inputs[0].witness = [dep, operator]
        .iter()
        .map(|k| WitnessSig { signature: k.sign(scheme, &msg), flag: SighashFlag::All })
        .collect();
    let mk = |vout: u32, value: u64| -> Result<DepositPsbts, PsbtError> {
        let prev = Prevout { outpoint: split_tx.outpoint(vout), value, address: va };
        let mut set = DepositPsbts::build(&instance.addresses, &instance.tweak, prev, policy)?;
        set.sign_as_operator(operator, scheme)?;
        set.sign_as_depositor(dep, scheme)?;
        Ok(set)
    };
    let rebalanced = mk(0, rebalanced)?;
    let remainder = mk(1, remainder)?;
    Ok(ResplitOutcome::Split(Box::new(SplitPackage { split_tx, rebalanced, remainder })))
}
