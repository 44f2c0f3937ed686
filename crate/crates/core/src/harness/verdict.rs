//! Who ended up with each vault output, and who should have.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::ScenarioConfig;
use crate::actors::{DepositorBehavior, OperatorBehavior, Simulation, World};
use crate::chain::OutPoint;
use crate::digest::AddressId;
use crate::registry::{Holder, RegistryEvent, UtxoStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Depositor,
    Operator,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoinFate {
    pub deposit: OutPoint,
    pub value: u64,
    /// Confirmed transitions, in order.
    pub route: Vec<String>,
    /// `None` for an output still in the vault or split into new ones.
    pub entitled: Option<Side>,
    pub holder: Option<Side>,
    pub left_vault_at: Option<u64>,
    pub settled_at: Option<u64>,
    pub deadline: Option<u64>,
}

impl CoinFate {
    pub fn describe(&self) -> String {
        let mut s = format!("{} ({}): {}", self.deposit, self.value, self.route.join(" -> "));
        if let Some(e) = self.entitled {
            let _ = write!(s, "; owed to {e:?}");
        }
        match (self.holder, self.settled_at) {
            (Some(h), Some(t)) => {
                let _ = write!(s, ", paid to {h:?} at {t}");
            }
            _ if self.left_vault_at.is_some() => s.push_str(", unresolved"),
            _ => {}
        }
        s
    }
}

fn final_status(w: &World, op: &OutPoint) -> Option<UtxoStatus> {
    let reg = w.registry();
    reg.status(op).or_else(|| reg.retired().find(|r| r.outpoint == *op).map(|r| r.status))
}

/// Confirmed spend of `op`: transaction id, first output address and height.
fn confirmed_spend(w: &World, op: &OutPoint) -> Option<(OutPoint, AddressId, u64)> {
    let id = w.chain().confirmed_spender(op)?;
    let c = w.chain().confirmed_tx(&id)?;
    Some((OutPoint::new(id, 0), c.tx.outputs[0].address, c.height))
}

struct Trace<'a> {
    w: &'a World,
    home: AddressId,
}

impl Trace<'_> {
    fn owner(&self, addr: AddressId) -> Side {
        if addr == self.home {
            Side::Depositor
        } else {
            Side::Operator
        }
    }

    fn fate(&self, deposit: OutPoint, value: u64) -> CoinFate {
        let w = self.w;
        let a = &w.instance.addresses;
        let mut fate = CoinFate {
            deposit,
            value,
            route: Vec::new(),
            entitled: None,
            holder: None,
            left_vault_at: None,
            settled_at: None,
            deadline: None,
        };
        let status = final_status(w, &deposit);
        let Some((first, addr, h)) = confirmed_spend(w, &deposit) else {
            fate.route.push("in vault".into());
            return fate;
        };
        if addr == a.va.id {
            fate.route.push("split".into());
            return fate;
        }
        fate.left_vault_at = Some(h);
        let settle = |fate: &mut CoinFate, step: Option<(OutPoint, AddressId, u64)>, label: &str| {
            if let Some((_, to, at)) = step {
                fate.route.push(label.into());
                fate.holder = Some(self.owner(to));
                fate.settled_at = Some(at);
            }
        };
        if addr == a.uta.id {
            fate.route.push("unbond-request".into());
            fate.entitled =
                Some(if status.is_some_and(UtxoStatus::favors_depositor_exit) { Side::Depositor } else { Side::Operator });
            match confirmed_spend(w, &first) {
                Some((ch, to, _)) if to == a.uca.id => {
                    fate.route.push("unbond-challenge".into());
                    settle(&mut fate, confirmed_spend(w, &ch), "resolved");
                }
                step => settle(&mut fate, step, "unbond-finalize"),
            }
        } else if addr == a.rca.id {
            fate.route.push("rebalance-request".into());
            fate.entitled =
                Some(if status == Some(UtxoStatus::SpentOnRebalance) { Side::Operator } else { Side::Depositor });
            settle(&mut fate, confirmed_spend(w, &first), "resolved");
        } else {
            fate.route.push("cooperative".into());
            fate.entitled = Some(self.owner(addr));
            fate.holder = Some(self.owner(addr));
            fate.settled_at = Some(h);
        }
        fate
    }
}

/// Returns `(dep_safe, to_safe, fates, witnesses)`. A guarantee only binds
/// for a party that followed the protocol: a depositor unbonding without a
/// burn, or an operator launching a false rebalance or false challenge,
/// forfeits its own. Witnesses are still listed.
pub fn judge(sim: &Simulation, cfg: &ScenarioConfig) -> (bool, bool, Vec<CoinFate>, Vec<String>) {
    let w = &sim.world;
    let Ok(home) = w.instance.tweak.return_address_id() else {
        return (false, false, Vec::new(), vec!["instance has no return address".into()]);
    };
    let tr = Trace { w, home };
    let height = w.ledgers.height();
    let t1t2 = (cfg.t1 + cfg.t2) as u64;
    let honest = sim.depositor.behavior != DepositorBehavior::MaliciousUnbondWithoutBurn;
    let exit_height = sim.depositor.exit_requested_at().map(|t| w.setup_height + t);
    let exit_due = exit_height.map(|e| e + t1t2 + cfg.margin).filter(|due| *due <= height);
    let mut dep_ok = true;
    let mut to_ok = true;
    let mut witnesses = Vec::new();
    let mut fates = Vec::new();
    for set in &w.instance.deposits {
        let d = &set.deposit;
        let mut fate = tr.fate(d.outpoint, d.value);
        fate.deadline = match (fate.entitled, fate.left_vault_at) {
            (Some(Side::Depositor), Some(h)) => Some(exit_height.map_or(h, |e| e.min(h)) + t1t2 + cfg.margin),
            (Some(Side::Operator), Some(h)) => Some(h + cfg.t2 as u64 + cfg.margin),
            _ => None,
        };
        let status = final_status(w, &d.outpoint);
        if fate.left_vault_at.is_none() && fate.route != ["split"] {
            if status == Some(UtxoStatus::SpentOnRebalance) {
                to_ok = false;
                witnesses.push(format!("{}: marked for rebalance but never seized", d.outpoint));
            } else if honest && exit_due.is_some() {
                dep_ok = false;
                witnesses.push(format!("{}: still in the vault after the exit deadline", d.outpoint));
            }
        }
        if let Some(owed) = fate.entitled {
            let late = match (fate.settled_at, fate.deadline) {
                (Some(s), Some(dl)) => s > dl,
                _ => false,
            };
            if fate.holder != Some(owed) || late {
                let what = match fate.holder {
                    None => "never resolved".to_string(),
                    Some(h) if h != owed => format!("paid to {h:?}"),
                    Some(_) => format!("settled after deadline {}", fate.deadline.unwrap_or(0)),
                };
                witnesses.push(format!("{}: owed to {owed:?} but {what}", d.outpoint));
                match owed {
                    Side::Depositor => dep_ok = false,
                    Side::Operator => to_ok = false,
                }
            }
        }
        fates.push(fate);
    }
    let reg = w.registry();
    let dep = w.instance.depositor_id;
    // Credit is owed only for marked outputs the depositor did not get back.
    let marked: u64 = fates
        .iter()
        .filter(|f| final_status(w, &f.deposit) == Some(UtxoStatus::SpentOnRebalance))
        .filter(|f| f.holder != Some(Side::Depositor))
        .map(|f| f.value)
        .sum();
    let deltas: u64 = reg
        .events()
        .iter()
        .filter_map(|e| match e {
            RegistryEvent::Rebalance(r) if r.depositor == dep => Some(r.delta),
            _ => None,
        })
        .sum();
    let mut claimed = 0;
    let mut paid = 0;
    for r in reg.redemptions().iter().filter(|r| r.holder == Holder::Depositor(dep)) {
        claimed += r.amount;
        if r.paid_by.and_then(|t| w.confirmed_height(&t)).is_some() {
            paid += r.amount;
        }
    }
    let owed = claimed.min(marked.saturating_sub(deltas));
    if paid < owed {
        dep_ok = false;
        witnesses.push(format!("over-seizure credit: {paid} of {owed} paid"));
    }
    let imbalance = reg.detect_imbalance(dep, w.slot());
    if imbalance > 0 {
        to_ok = false;
        witnesses.push(format!("tokens exceed tracked backing by {imbalance}"));
    }
    let operator_deviated = matches!(
        sim.operator.behavior,
        OperatorBehavior::MaliciousFalseRebalance | OperatorBehavior::MaliciousFalseChallenge
    );
    (dep_ok || !honest, to_ok || operator_deviated, fates, witnesses)
}
