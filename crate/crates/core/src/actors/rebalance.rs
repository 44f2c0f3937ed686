use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{anchored_package, OperatorActor, World};
use crate::chain::OutPoint;
use crate::keys::Keypair;
use crate::psbt::{collaborative_resplit, Prevout, ResplitOutcome};
use crate::registry::{select_prefix, Caller};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RebalanceModel {
    /// Whole outputs are seized; the excess becomes depositor credit.
    #[default]
    UtxoBased,
    /// The last selected output is first split so the seizure is exact.
    Collaborative,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalanceOutcome {
    pub delta: u64,
    pub selected: Vec<OutPoint>,
    pub overseized: u64,
    /// The split output, when a collaborative split happened.
    pub split: Option<OutPoint>,
    pub broadcast: usize,
    pub errors: Vec<String>,
}

/// Marks deposits covering `delta` as SpentOnRebalance and broadcasts their
/// rebalance requests.
pub fn execute_rebalance(
    w: &mut World,
    operator: &OperatorActor,
    depositor: Option<(Keypair, u64)>,
    model: RebalanceModel,
    delta: u64,
) -> Result<RebalanceOutcome, String> {
    let now = w.slot();
    let dep = w.instance.depositor_id;
    let mut delta = delta;
    let mut split = None;
    if model == RebalanceModel::Collaborative {
        if let Some(op) = try_split(w, operator, depositor, delta)? {
            split = Some(op);
            delta = w.registry().detect_imbalance(dep, now);
        }
    }
    let ev = w
        .ledgers
        .dest
        .registry_mut()
        .mark_rebalance(dep, delta, Caller::Operator, now)
        .map_err(|e| e.to_string())?;
    let mut used = BTreeSet::new();
    let mut broadcast = 0;
    let mut errors = Vec::new();
    for op in &ev.selected {
        let Some(set) = w.deposit_set(op) else { continue };
        let sent = anchored_package(w.chain(), &set.rebalance_request, &operator.keypair, &mut used).and_then(|txs| {
            txs.into_iter().try_for_each(|tx| w.ledgers.btc.submit_tx(tx).map(|_| ()).map_err(|e| e.to_string()))
        });
        match sent {
            Ok(()) => broadcast += 1,
            Err(e) => errors.push(format!("{op}: {e}")),
        }
    }
    Ok(RebalanceOutcome { delta, selected: ev.selected, overseized: ev.overseized, split, broadcast, errors })
}

/// Splits the output that would overshoot `delta` into an exact part and a
/// remainder. Returns the split output, or `None` when no split is needed
/// or the depositor did not answer.
fn try_split(
    w: &mut World,
    operator: &OperatorActor,
    depositor: Option<(Keypair, u64)>,
    delta: u64,
) -> Result<Option<OutPoint>, String> {
    let now = w.slot();
    let reg = w.registry();
    let dep = w.instance.depositor_id;
    let order = reg.rebalance_order(dep);
    let amounts: Vec<u64> = order.iter().map(|o| reg.record(o).map_or(0, |r| r.amount)).collect();
    let n = select_prefix(&amounts, delta);
    if n == 0 {
        return Ok(None);
    }
    let overshoot = amounts[..n].iter().sum::<u64>().saturating_sub(delta);
    let last = order[n - 1];
    let value = amounts[n - 1];
    let fee = 3 * w.instance.policy.base_feerate;
    if overshoot == 0 || value <= overshoot + fee {
        return Ok(None);
    }
    let prevout = Prevout { outpoint: last, value, address: w.instance.addresses.va.id };
    let scheme = w.chain().scheme();
    let outcome = collaborative_resplit(
        &w.instance,
        prevout,
        value - overshoot - fee,
        overshoot,
        &operator.keypair,
        depositor.as_ref().map(|(k, d)| (k, *d)),
        1,
        scheme,
    )
    .map_err(|e| e.to_string())?;
    let ResplitOutcome::Split(pkg) = outcome else { return Ok(None) };
    let regs = vec![w.instance.registration(&pkg.rebalanced), w.instance.registration(&pkg.remainder)];
    w.ledgers.btc.submit_tx(pkg.split_tx.clone()).map_err(|e| e.to_string())?;
    w.ledgers
        .dest
        .registry_mut()
        .replace_deposit(&last, regs, Caller::Operator, now)
        .map_err(|e| e.to_string())?;
    w.instance.deposits.push(pkg.rebalanced);
    w.instance.deposits.push(pkg.remainder);
    Ok(Some(last))
}
