use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use super::{anchored_package, pick_utxo, sweep, Action, Downtime, World};
use crate::chain::OutPoint;
use crate::keys::Keypair;
use crate::psbt::add_fee_input;
use crate::registry::{DepositorId, UtxoStatus};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepositorBehavior {
    Honest,
    /// Unbonds while keeping the minted tokens.
    MaliciousUnbondWithoutBurn,
    /// Honest, but absent during the given ticks.
    Offline(Downtime),
}

#[derive(Debug, Clone)]
pub struct DepositorActor {
    pub id: DepositorId,
    pub keypair: Keypair,
    pub behavior: DepositorBehavior,
    /// Answers re-split requests while online.
    pub cooperates_on_resplit: bool,
    /// An arbiter key the depositor obtained illegitimately.
    pub leaked_arbiter_key: Option<Keypair>,
    exit_at: Option<u64>,
}

impl DepositorActor {
    pub fn new(id: DepositorId, keypair: Keypair, behavior: DepositorBehavior) -> Self {
        DepositorActor { id, keypair, behavior, cooperates_on_resplit: true, leaked_arbiter_key: None, exit_at: None }
    }

    pub fn request_exit(&mut self, tick: u64) {
        self.exit_at.get_or_insert(tick);
    }

    pub fn exit_requested_at(&self) -> Option<u64> {
        self.exit_at
    }

    fn malicious(&self) -> bool {
        self.behavior == DepositorBehavior::MaliciousUnbondWithoutBurn
    }

    pub fn offline_at(&self, tick: u64) -> bool {
        matches!(&self.behavior, DepositorBehavior::Offline(d) if d.offline_at(tick))
    }

    /// Signing key and response delay offered to a re-split request.
    pub fn resplit_response(&self, w: &World) -> Option<(Keypair, u64)> {
        (self.cooperates_on_resplit && !self.malicious() && !self.offline_at(w.tick())).then(|| (self.keypair.clone(), 0))
    }

    pub fn tick(&mut self, w: &World) -> Vec<Action> {
        if self.offline_at(w.tick()) {
            return Vec::new();
        }
        let mut out = Vec::new();
        let mut used = BTreeSet::new();
        self.reconcile_returned(w, &mut out);
        if self.exit_at.is_some_and(|e| w.tick() >= e) {
            self.start_exits(w, &mut out, &mut used);
        }
        self.finish_exits(w, &mut out, &mut used);
        out
    }

    /// A deposit sent back by a rebalance resolution is no longer
    /// collateral: burn its tokens so the registry stops counting it.
    fn reconcile_returned(&self, w: &World, out: &mut Vec<Action>) {
        if self.malicious() {
            return;
        }
        let reg = w.registry();
        let addrs = &w.instance.addresses;
        let Ok(home) = w.instance.tweak.return_address_id() else { return };
        let mut balance = reg.personal_balance(self.id);
        let mut positions = self.positions(w);
        for rec in reg.records_of(self.id) {
            if rec.status != UtxoStatus::Active {
                continue;
            }
            let Some((rid, rtx, Some(_))) = w.spend_of(&rec.outpoint) else { continue };
            if rtx.outputs[0].address != addrs.rca.id {
                continue;
            }
            let Some((_, back, Some(_))) = w.spend_of(&OutPoint::new(rid, 0)) else { continue };
            if back.outputs[0].address != home {
                continue;
            }
            withdraw_up_to(&mut positions, &mut balance, rec.amount, out);
            if balance < rec.amount {
                continue;
            }
            balance -= rec.amount;
            out.push(Action::SetStatus { outpoint: rec.outpoint, status: UtxoStatus::Withdrawn });
        }
    }

    fn positions(&self, w: &World) -> Vec<(u32, u64)> {
        w.registry()
            .adapters()
            .filter_map(|a| a.positions.get(&self.id).filter(|p| **p > 0).map(|p| (a.id, *p)))
            .collect()
    }

    fn start_exits(&self, w: &World, out: &mut Vec<Action>, used: &mut BTreeSet<OutPoint>) {
        let reg = w.registry();
        let chain = w.chain();
        let mut balance = reg.personal_balance(self.id);
        let mut positions = self.positions(w);
        for rec in reg.records_of(self.id) {
            let op = rec.outpoint;
            if chain.spender(&op).is_some() || chain.utxo(&op).is_none() {
                continue;
            }
            let Some(set) = w.deposit_set(&op) else { continue };
            let status_change = match (self.malicious(), rec.status) {
                (_, UtxoStatus::SpentOnRebalance) => continue,
                (true, _) | (false, UtxoStatus::Withdrawn | UtxoStatus::Rejected) => None,
                (false, UtxoStatus::Active) => Some(UtxoStatus::Withdrawn),
                (false, UtxoStatus::Registered) => Some(UtxoStatus::Rejected),
            };
            if status_change == Some(UtxoStatus::Withdrawn) {
                withdraw_up_to(&mut positions, &mut balance, rec.amount, out);
                if balance < rec.amount {
                    out.push(Action::Note(format!("cannot burn {} for {op}", rec.amount)));
                    continue;
                }
                balance -= rec.amount;
            }
            if let Some(status) = status_change {
                out.push(Action::SetStatus { outpoint: op, status });
            }
            match anchored_package(chain, &set.unbond_request, &self.keypair, used) {
                Ok(txs) => out.push(Action::Broadcast { label: "unbond-request".into(), txs }),
                Err(e) => out.push(Action::Note(format!("unbond-request not built: {e}"))),
            }
        }
        let credit = reg.overseizure_credit(self.id);
        if !self.malicious() && credit > 0 {
            withdraw_up_to(&mut positions, &mut balance, credit, out);
            if balance >= credit {
                out.push(Action::ClaimOverseizure);
            }
        }
    }

    /// Claims unbonded coins after T1, or resolves a challenge with a
    /// leaked arbiter key.
    fn finish_exits(&self, w: &World, out: &mut Vec<Action>, used: &mut BTreeSet<OutPoint>) {
        let chain = w.chain();
        let addrs = &w.instance.addresses;
        let t1 = w.instance.tweak.t1 as u64;
        let Ok(home) = w.instance.tweak.return_address_id() else { return };
        for set in &w.instance.deposits {
            let Some((uid, utx, Some(h))) = w.spend_of(&set.deposit.outpoint) else { continue };
            if utx.outputs[0].address != addrs.uta.id {
                continue;
            }
            let uta = OutPoint::new(uid, 0);
            match w.spend_of(&uta) {
                None if chain.height() >= h + t1 => {
                    match sweep(chain, uta, utx.outputs[0].value, 1, &[&self.keypair], home) {
                        Ok(tx) => out.push(Action::Broadcast { label: "unbond-finalize".into(), txs: vec![tx] }),
                        Err(e) => out.push(Action::Note(e)),
                    }
                }
                Some((cid, ctx, Some(_))) if ctx.outputs[0].address == addrs.uca.id => {
                    let Some(leaked) = &self.leaked_arbiter_key else { continue };
                    if w.spend_of(&OutPoint::new(cid, 0)).is_some() {
                        continue;
                    }
                    let mut psbt = set.unbond_resolve.clone();
                    let built = psbt
                        .sign(leaked, chain.scheme())
                        .and_then(|_| psbt.finalize(None, chain.scheme()))
                        .map_err(|e| e.to_string())
                        .and_then(|tx| {
                            let need = (chain.next_block_feerate() * 3).saturating_sub(psbt.input.value - tx.output_total());
                            let fee = pick_utxo(chain, &self.keypair.public().key_address(), need.max(1), used)
                                .ok_or_else(|| "no fee output".to_string())?;
                            used.insert(fee.outpoint);
                            add_fee_input(&tx, &fee, &self.keypair, chain.scheme()).map_err(|e| e.to_string())
                        });
                    match built {
                        Ok(tx) => out.push(Action::Broadcast { label: "unbond-resolve with leaked key".into(), txs: vec![tx] }),
                        Err(e) => out.push(Action::Note(e)),
                    }
                }
                _ => {}
            }
        }
    }
}

/// Pulls tokens out of adapter positions until `balance` reaches `target`.
fn withdraw_up_to(positions: &mut [(u32, u64)], balance: &mut u64, target: u64, out: &mut Vec<Action>) {
    for (adapter, pos) in positions.iter_mut() {
        if *balance >= target {
            break;
        }
        let take = (*pos).min(target - *balance);
        if take > 0 {
            out.push(Action::WithdrawFromAdapter { adapter: *adapter, amount: take });
            *pos -= take;
            *balance += take;
        }
    }
}
