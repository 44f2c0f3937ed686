use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{anchored_package, pay_from, sweep, Action, Downtime, RebalanceModel, World};
use crate::chain::{Checkpoint, CheckpointSigner, OutPoint};
use crate::keys::Keypair;
use crate::registry::UtxoStatus;

/// Most the fee wallet adds to a redemption beyond reserve funds.
const FEE_TOP_UP: u64 = 5_000;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OperatorBehavior {
    Honest,
    /// Sends a deposit to the rebalance challenge address without an imbalance.
    MaliciousFalseRebalance,
    /// Challenges legitimate unbonds.
    MaliciousFalseChallenge,
    /// The quorum cannot agree: nothing is signed or published.
    NoConsensus,
    /// The quorum is controlled by an attacker that also never challenges.
    QuorumCorrupted,
    /// Honest, but absent during the given ticks.
    Offline(Downtime),
}

#[derive(Debug, Clone)]
pub struct OperatorActor {
    /// Signs templates and checkpoints; its address is the fee wallet.
    pub keypair: Keypair,
    /// Receives claimed outputs and pays redemptions.
    pub reserve: Keypair,
    pub behavior: OperatorBehavior,
    /// Tick at which a malicious operator attacks, if ever.
    pub attack_at: Option<u64>,
    pub model: RebalanceModel,
    attacked: bool,
}

impl OperatorActor {
    pub fn new(keypair: Keypair, reserve: Keypair, behavior: OperatorBehavior, model: RebalanceModel) -> Self {
        OperatorActor { keypair, reserve, behavior, attack_at: None, model, attacked: false }
    }

    fn silent(&self, tick: u64) -> bool {
        match &self.behavior {
            OperatorBehavior::NoConsensus => true,
            OperatorBehavior::Offline(d) => d.offline_at(tick),
            _ => false,
        }
    }

    fn challenges_illegitimate(&self) -> bool {
        !matches!(self.behavior, OperatorBehavior::NoConsensus | OperatorBehavior::QuorumCorrupted)
    }

    fn challenges_legitimate(&self) -> bool {
        matches!(self.behavior, OperatorBehavior::MaliciousFalseChallenge | OperatorBehavior::QuorumCorrupted)
    }

    fn rebalances_falsely(&self) -> bool {
        matches!(self.behavior, OperatorBehavior::MaliciousFalseRebalance | OperatorBehavior::QuorumCorrupted)
    }

    /// Latest finalized checkpoint, countersigned for arbiters that need one.
    pub fn published_checkpoint(&self, w: &World) -> Option<Checkpoint> {
        if self.silent(w.tick()) {
            return None;
        }
        let cp = w.ledgers.dest.latest_checkpoint()?;
        Some(cp.endorse(CheckpointSigner::TokenOperator, &self.keypair, w.ledgers.dest.scheme()))
    }

    pub fn tick(&mut self, w: &World) -> Vec<Action> {
        if self.silent(w.tick()) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut used = BTreeSet::new();
        self.challenge(w, &mut out, &mut used);
        let claimed = self.claim_expired(w, &mut out);
        self.rebalance(w, &mut out, &mut used);
        if self.rebalances_falsely() && !self.attacked && self.attack_at.is_some_and(|a| w.tick() >= a) {
            self.false_rebalance(w, &mut out, &mut used);
        }
        self.pay_redemptions(w, claimed, &mut out);
        out
    }

    fn challenge(&self, w: &World, out: &mut Vec<Action>, used: &mut BTreeSet<OutPoint>) {
        let reg = w.registry();
        let uta = w.instance.addresses.uta.id;
        for set in &w.instance.deposits {
            let Some((id, tx, _)) = w.spend_of(&set.deposit.outpoint) else { continue };
            if tx.outputs[0].address != uta || w.chain().spender(&OutPoint::new(id, 0)).is_some() {
                continue;
            }
            let legit = reg.status(&set.deposit.outpoint).is_some_and(UtxoStatus::favors_depositor_exit);
            let go = if legit { self.challenges_legitimate() } else { self.challenges_illegitimate() };
            if !go {
                continue;
            }
            match anchored_package(w.chain(), &set.unbond_challenge, &self.keypair, used) {
                Ok(txs) => out.push(Action::Broadcast { label: "unbond-challenge".into(), txs }),
                Err(e) => out.push(Action::Note(format!("unbond-challenge not built: {e}"))),
            }
        }
    }

    /// Sweeps challenge outputs whose resolution window has passed. Returns
    /// the swept outputs now paying the reserve, for chaining payouts.
    fn claim_expired(&self, w: &World, out: &mut Vec<Action>) -> Vec<(OutPoint, u64)> {
        let chain = w.chain();
        let addrs = &w.instance.addresses;
        let t2 = w.instance.tweak.t2 as u64;
        let path = w.instance.tweak.arbiters.len() as u32;
        let reserve = self.reserve.public().key_address();
        let mut claimed = Vec::new();
        let mut targets = Vec::new();
        for set in &w.instance.deposits {
            let Some((id, tx, _)) = w.spend_of(&set.deposit.outpoint) else { continue };
            let first = tx.outputs[0].address;
            if first == addrs.rca.id {
                targets.push(OutPoint::new(id, 0));
            } else if first == addrs.uta.id {
                if let Some((cid, ctx, _)) = w.spend_of(&OutPoint::new(id, 0)) {
                    if ctx.outputs[0].address == addrs.uca.id {
                        targets.push(OutPoint::new(cid, 0));
                    }
                }
            }
        }
        for op in targets {
            let Some(u) = chain.utxo(&op) else { continue };
            if chain.spender(&op).is_some() || chain.height() < u.confirmed_height + t2 {
                continue;
            }
            match sweep(chain, op, u.value, path, &[&self.keypair], reserve) {
                Ok(tx) => {
                    claimed.push((tx.outpoint(0), tx.outputs[0].value));
                    out.push(Action::Broadcast { label: "resolve-expired".into(), txs: vec![tx] });
                }
                Err(e) => out.push(Action::Note(e)),
            }
        }
        claimed
    }

    fn rebalance(&self, w: &World, out: &mut Vec<Action>, used: &mut BTreeSet<OutPoint>) {
        let reg = w.registry();
        let dep = w.instance.depositor_id;
        let delta = reg.detect_imbalance(dep, w.slot());
        if delta > 0 {
            out.push(Action::Rebalance { delta, model: self.model });
        }
        for rec in reg.records_of(dep) {
            if rec.status != UtxoStatus::SpentOnRebalance || w.chain().spender(&rec.outpoint).is_some() {
                continue;
            }
            let Some(set) = w.deposit_set(&rec.outpoint) else { continue };
            match anchored_package(w.chain(), &set.rebalance_request, &self.keypair, used) {
                Ok(txs) => out.push(Action::Broadcast { label: "rebalance-request".into(), txs }),
                Err(e) => out.push(Action::Note(format!("rebalance-request not built: {e}"))),
            }
        }
    }

    fn false_rebalance(&mut self, w: &World, out: &mut Vec<Action>, used: &mut BTreeSet<OutPoint>) {
        let reg = w.registry();
        let target = reg
            .records_of(w.instance.depositor_id)
            .into_iter()
            .find(|r| r.status != UtxoStatus::SpentOnRebalance && w.chain().spender(&r.outpoint).is_none());
        let Some(rec) = target else { return };
        let Some(set) = w.deposit_set(&rec.outpoint) else { return };
        self.attacked = true;
        match anchored_package(w.chain(), &set.rebalance_request, &self.keypair, used) {
            Ok(txs) => out.push(Action::Broadcast { label: "false rebalance-request".into(), txs }),
            Err(e) => out.push(Action::Note(format!("false rebalance not built: {e}"))),
        }
    }

    /// Pays queued redemptions from the reserve, then from claimed outputs,
    /// and tops up from the fee wallet when fees leave the reserve short.
    fn pay_redemptions(&self, w: &World, claimed: Vec<(OutPoint, u64)>, out: &mut Vec<Action>) {
        let chain = w.chain();
        let reserve = self.reserve.public().key_address();
        let wallet = self.keypair.public().key_address();
        let mut pool: Vec<(OutPoint, u64, &Keypair)> =
            chain.spendable_at(&wallet).iter().map(|u| (u.outpoint, u.value, &self.keypair)).collect();
        pool.extend(chain.spendable_at(&reserve).iter().map(|u| (u.outpoint, u.value, &self.reserve)));
        pool.extend(claimed.into_iter().map(|(op, v)| (op, v, &self.reserve)));
        let backing: u64 = pool.iter().filter(|p| std::ptr::eq(p.2, &self.reserve)).map(|p| p.1).sum();
        let mut reserved = 0;
        for r in w.registry().redemptions().iter().filter(|r| r.paid_by.is_none()) {
            // Wallet top-ups cover fees, not principal.
            if reserved + r.amount > backing + FEE_TOP_UP {
                continue;
            }
            let rate = chain.next_block_feerate();
            let mut inputs = Vec::new();
            let mut have = 0;
            while have < r.amount + rate * (inputs.len() as u64 + 2) {
                let Some(next) = pool.pop() else { break };
                have += next.1;
                inputs.push(next);
            }
            match pay_from(chain, &inputs, r.btc_address, r.amount, reserve) {
                Ok(tx) => {
                    if tx.outputs.len() > 1 {
                        pool.push((tx.outpoint(1), tx.outputs[1].value, &self.reserve));
                    }
                    reserved += r.amount;
                    out.push(Action::PayRedemption { id: r.id, tx });
                }
                Err(e) => {
                    if !inputs.is_empty() {
                        out.push(Action::Note(format!("redemption {} unpaid: {e}", r.id)));
                    }
                    pool.extend(inputs);
                }
            }
        }
    }
}
