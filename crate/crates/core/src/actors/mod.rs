//! Depositor, operator and arbiter state machines. Each tick an actor
//! returns actions; the simulation applies them through the ledgers' own
//! rules and records what happened.

mod arbiter;
mod depositor;
mod operator;
mod rebalance;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

pub use arbiter::ArbiterActor;
pub use depositor::{DepositorActor, DepositorBehavior};
pub use operator::{OperatorActor, OperatorBehavior};
pub use rebalance::{execute_rebalance, RebalanceModel, RebalanceOutcome};

use crate::arbitration::{AttestationAuthority, MockKms};
use crate::chain::{BtcChain, Ledgers, OutPoint, SighashFlag, SimTx, TxIn, TxOut, Utxo, WitnessSig};
use crate::digest::{sha256, AddressId, Hash32, Txid};
use crate::keys::Keypair;
use crate::psbt::{attach_cpfp_child, DepositPsbts, ProtocolInstance, Psbt};
use crate::registry::{Caller, Holder, Registry, Timelocks, UtxoStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActorId {
    Depositor,
    Operator,
    Arbiter(usize),
    Environment,
}

/// Half-open tick intervals `[from, to)` during which an actor is absent.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Downtime(pub Vec<(u64, u64)>);

impl Downtime {
    pub fn always_online() -> Self {
        Downtime(Vec::new())
    }

    pub fn offline_at(&self, tick: u64) -> bool {
        self.0.iter().any(|(a, b)| *a <= tick && tick < *b)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Action {
    SetStatus { outpoint: OutPoint, status: UtxoStatus },
    /// Submits transactions in order (a parent then its fee child).
    Broadcast { label: String, txs: Vec<SimTx> },
    Rebalance { delta: u64, model: RebalanceModel },
    ClaimOverseizure,
    WithdrawFromAdapter { adapter: u32, amount: u64 },
    PayRedemption { id: u64, tx: SimTx },
    Note(String),
}

impl Action {
    fn describe(&self) -> String {
        match self {
            Action::SetStatus { outpoint, status } => format!("set {outpoint} {status:?}"),
            Action::Broadcast { label, txs } => format!("broadcast {label} ({} tx)", txs.len()),
            Action::Rebalance { delta, model } => format!("rebalance {delta} {model:?}"),
            Action::ClaimOverseizure => "claim over-seizure".into(),
            Action::WithdrawFromAdapter { adapter, amount } => format!("withdraw {amount} from adapter {adapter}"),
            Action::PayRedemption { id, .. } => format!("pay redemption {id}"),
            Action::Note(s) => s.clone(),
        }
    }
}

/// Things that happen to the system from outside the three roles.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EnvEvent {
    /// The depositor decides to leave (or, if malicious, to attack).
    Exit,
    Supply { adapter: u32, amount: u64 },
    Withdraw { adapter: u32, amount: u64 },
    /// A lending position is liquidated; the tokens go to the liquidator.
    Liquidate { adapter: u32, amount: u64 },
    /// The depositor buys tokens back from the liquidator.
    Buyback { amount: u64 },
    /// The liquidator redeems tokens for native coins.
    Redeem { amount: u64 },
    SetOrder { perm: Vec<usize> },
    RebootArbiter { index: usize },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub tick: u64,
    pub height: u64,
    pub actor: ActorId,
    pub action: String,
    pub ok: bool,
    pub detail: String,
}

pub const LIQUIDATOR: &str = "liquidator";

/// Shared state every actor reads.
#[derive(Debug, Clone)]
pub struct World {
    pub ledgers: Ledgers,
    pub instance: ProtocolInstance,
    pub authority: AttestationAuthority,
    pub kms: MockKms,
    /// Height at which setup finished; ticks count from here.
    pub setup_height: u64,
    pub liquidator_address: AddressId,
    /// One line per setup ceremony step.
    pub setup_log: Vec<String>,
    pub trace: Vec<TraceEntry>,
}

impl World {
    pub fn tick(&self) -> u64 {
        self.ledgers.height().saturating_sub(self.setup_height)
    }

    pub fn registry(&self) -> &Registry {
        self.ledgers.dest.registry()
    }

    pub fn slot(&self) -> u64 {
        self.ledgers.slot()
    }

    pub fn timelocks(&self) -> Timelocks {
        self.registry().timelocks_at(self.slot())
    }

    pub fn chain(&self) -> &BtcChain {
        &self.ledgers.btc
    }

    /// Transaction by id, confirmed or pending.
    pub fn tx(&self, txid: &Txid) -> Option<&SimTx> {
        self.chain().confirmed_tx(txid).map(|c| &c.tx).or_else(|| self.chain().mempool_tx(txid))
    }

    pub fn confirmed_height(&self, txid: &Txid) -> Option<u64> {
        self.chain().confirmed_tx(txid).map(|c| c.height)
    }

    pub fn deposit_set(&self, op: &OutPoint) -> Option<&DepositPsbts> {
        self.instance.deposit(op)
    }

    /// The transaction spending `op` and whether it is confirmed.
    pub fn spend_of(&self, op: &OutPoint) -> Option<(Txid, &SimTx, Option<u64>)> {
        let id = self.chain().spender(op)?;
        let tx = self.tx(&id)?;
        Some((id, tx, self.confirmed_height(&id)))
    }

    pub fn trace_digest(&self) -> Hash32 {
        let text = serde_json::to_string(&self.trace).expect("trace serializes");
        Hash32(sha256(&[text.as_bytes()]))
    }

    fn record(&mut self, actor: ActorId, action: String, outcome: Result<String, String>) {
        let (ok, detail) = match outcome {
            Ok(d) => (true, d),
            Err(e) => (false, e),
        };
        self.trace.push(TraceEntry { tick: self.tick(), height: self.ledgers.height(), actor, action, ok, detail });
    }
}

/// Smallest spendable UTXO at `address` worth at least `min`.
pub(crate) fn pick_utxo(chain: &BtcChain, address: &AddressId, min: u64, skip: &BTreeSet<OutPoint>) -> Option<Utxo> {
    chain
        .spendable_at(address)
        .into_iter()
        .filter(|u| u.value >= min && !skip.contains(&u.outpoint))
        .min_by_key(|u| (u.value, u.outpoint))
        .cloned()
}

/// Finalizes an anchored template and, if the parent alone would not meet
/// the next block's feerate, adds a fee-paying child from the executor's
/// wallet.
pub(crate) fn anchored_package(
    chain: &BtcChain,
    psbt: &Psbt,
    executor: &Keypair,
    used: &mut BTreeSet<OutPoint>,
) -> Result<Vec<SimTx>, String> {
    let parent = psbt.finalize(Some(executor), chain.scheme()).map_err(|e| e.to_string())?;
    let fee = psbt.input.value - parent.output_total();
    let rate = chain.next_block_feerate();
    if fee >= rate * parent.weight() {
        return Ok(vec![parent]);
    }
    let wallet = executor.public().key_address();
    let need = (rate * (parent.weight() + 3)).saturating_sub(fee);
    let utxo = pick_utxo(chain, &wallet, need, used).ok_or("no wallet output for the fee child")?;
    used.insert(utxo.outpoint);
    let child = attach_cpfp_child(&parent, fee, executor, &utxo, rate, chain.scheme()).map_err(|e| e.to_string())?;
    Ok(vec![parent, child])
}

/// One-input, one-output spend through leaf `path`, signed by `signers` in
/// leaf key order, paying the current feerate out of the input.
pub(crate) fn sweep(
    chain: &BtcChain,
    prevout: OutPoint,
    value: u64,
    path: u32,
    signers: &[&Keypair],
    to: AddressId,
) -> Result<SimTx, String> {
    let fee = chain.next_block_feerate() * 2;
    if value <= fee {
        return Err(format!("output of {value} cannot pay fee {fee}"));
    }
    let mut tx = SimTx {
        inputs: vec![TxIn { prevout, path, witness: vec![] }],
        outputs: vec![TxOut { address: to, value: value - fee }],
        anchor: None,
    };
    let msg = tx.sighash(0, SighashFlag::All);
    tx.inputs[0].witness = signers
        .iter()
        .map(|k| WitnessSig { signature: k.sign(chain.scheme(), &msg), flag: SighashFlag::All })
        .collect();
    Ok(tx)
}

/// Key-path payment to `payee` from `inputs`, each signed by its own key,
/// with change to `change`.
pub(crate) fn pay_from(
    chain: &BtcChain,
    inputs: &[(OutPoint, u64, &Keypair)],
    payee: AddressId,
    amount: u64,
    change: AddressId,
) -> Result<SimTx, String> {
    let have: u64 = inputs.iter().map(|i| i.1).sum();
    let rate = chain.next_block_feerate();
    let fee = rate * (inputs.len() as u64 + 2);
    if have < amount + fee {
        return Err(format!("reserve holds {have}, needs {}", amount + fee));
    }
    let mut outputs = vec![TxOut { address: payee, value: amount }];
    if have > amount + fee {
        outputs.push(TxOut { address: change, value: have - amount - fee });
    }
    let mut tx = SimTx {
        inputs: inputs.iter().map(|(op, _, _)| TxIn { prevout: *op, path: 0, witness: vec![] }).collect(),
        outputs,
        anchor: None,
    };
    for (i, (_, _, key)) in inputs.iter().enumerate() {
        let sig = key.sign(chain.scheme(), &tx.sighash(i, SighashFlag::All));
        tx.inputs[i].witness = vec![WitnessSig { signature: sig, flag: SighashFlag::All }];
    }
    Ok(tx)
}

/// The world plus everyone acting in it.
#[derive(Debug, Clone)]
pub struct Simulation {
    pub world: World,
    pub depositor: DepositorActor,
    pub operator: OperatorActor,
    pub arbiters: Vec<ArbiterActor>,
}

impl Simulation {
    /// Mines a block, advances the destination chain, then lets the
    /// environment, depositor, operator and arbiters act in that order.
    pub fn step(&mut self, events: &[EnvEvent]) {
        self.world.ledgers.step();
        for e in events {
            let out = self.environment(e);
            self.world.record(ActorId::Environment, format!("{e:?}"), out);
        }
        let acts = self.depositor.tick(&self.world);
        self.apply_all(ActorId::Depositor, acts);
        let acts = self.operator.tick(&self.world);
        self.apply_all(ActorId::Operator, acts);
        let cp = self.operator.published_checkpoint(&self.world);
        for i in 0..self.arbiters.len() {
            let acts = self.arbiters[i].tick(&self.world, cp.as_ref());
            self.apply_all(ActorId::Arbiter(i), acts);
        }
    }

    fn apply_all(&mut self, actor: ActorId, actions: Vec<Action>) {
        for a in actions {
            let label = a.describe();
            let out = self.apply(actor, a);
            self.world.record(actor, label, out);
        }
    }

    fn caller(&self, actor: ActorId) -> Caller {
        match actor {
            ActorId::Depositor => Caller::Depositor(self.depositor.id),
            _ => Caller::Operator,
        }
    }

    pub fn apply(&mut self, actor: ActorId, action: Action) -> Result<String, String> {
        let now = self.world.slot();
        let caller = self.caller(actor);
        let dep = self.depositor.id;
        match action {
            Action::SetStatus { outpoint, status } => self
                .world
                .ledgers
                .dest
                .registry_mut()
                .set_utxo_status(&outpoint, status, caller, now)
                .map(|_| String::new())
                .map_err(|e| e.to_string()),
            Action::Broadcast { txs, .. } => {
                let mut ids = Vec::new();
                for tx in txs {
                    let id = self.world.ledgers.btc.submit_tx(tx).map_err(|e| e.to_string())?;
                    ids.push(id.short());
                }
                Ok(ids.join(","))
            }
            Action::Rebalance { delta, model } => {
                let resp = self.depositor.resplit_response(&self.world);
                let out = execute_rebalance(&mut self.world, &self.operator, resp, model, delta)?;
                Ok(format!("{out:?}"))
            }
            Action::ClaimOverseizure => {
                let addr = self.depositor.keypair.public().key_address();
                self.world
                    .ledgers
                    .dest
                    .registry_mut()
                    .claim_overseizure(dep, addr, caller, now)
                    .map(|id| format!("{id:?}"))
                    .map_err(|e| e.to_string())
            }
            Action::WithdrawFromAdapter { adapter, amount } => self
                .world
                .ledgers
                .dest
                .registry_mut()
                .withdraw_from_adapter(dep, adapter, amount)
                .map(|_| String::new())
                .map_err(|e| e.to_string()),
            Action::PayRedemption { id, tx } => {
                let txid = self.world.ledgers.btc.submit_tx(tx).map_err(|e| e.to_string())?;
                self.world
                    .ledgers
                    .dest
                    .registry_mut()
                    .mark_redemption_paid(id, txid, caller)
                    .map(|_| txid.short())
                    .map_err(|e| e.to_string())
            }
            Action::Note(s) => Ok(s),
        }
    }

    fn environment(&mut self, e: &EnvEvent) -> Result<String, String> {
        let dep = self.depositor.id;
        let liquidator = Holder::Account(LIQUIDATOR.into());
        let now = self.world.slot();
        let reg = self.world.ledgers.dest.registry_mut();
        let r = match e {
            EnvEvent::Exit => {
                self.depositor.request_exit(self.world.tick());
                Ok(())
            }
            EnvEvent::Supply { adapter, amount } => reg.supply_to_adapter(dep, *adapter, *amount),
            EnvEvent::Withdraw { adapter, amount } => reg.withdraw_from_adapter(dep, *adapter, *amount),
            EnvEvent::Liquidate { adapter, amount } => reg.liquidate(dep, *adapter, *amount, liquidator),
            EnvEvent::Buyback { amount } => reg.transfer(liquidator, Holder::Depositor(dep), *amount),
            EnvEvent::Redeem { amount } => {
                let addr = self.world.liquidator_address;
                return reg.redeem(liquidator, *amount, addr, now).map(|id| format!("redemption {id}")).map_err(|e| e.to_string());
            }
            EnvEvent::SetOrder { perm } => reg.set_rebalance_order(dep, perm, Caller::Depositor(dep)).map(|_| ()),
            EnvEvent::RebootArbiter { index } => {
                let a = self.arbiters.get_mut(*index).ok_or("no such arbiter")?;
                a.oracle.reboot();
                Ok(())
            }
        };
        r.map(|_| String::new()).map_err(|e| e.to_string())
    }
}
