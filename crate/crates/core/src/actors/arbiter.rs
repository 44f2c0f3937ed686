use std::collections::{BTreeMap, BTreeSet};

use super::{pick_utxo, Action, Downtime, World};
use crate::arbitration::{ArbitrationOracle, KeyArtifacts, RegistryView, SyncOutcome};
use crate::chain::{Checkpoint, OutPoint};
use crate::keys::Keypair;
use crate::psbt::add_fee_input;

/// A challenge awaiting resolution: the vault spend and, for unbonds, the
/// challenge spending it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Job {
    first: OutPoint,
    second: Option<OutPoint>,
}

/// An arbitration oracle plus its host: uptime, stored key artifacts and a
/// small wallet for resolution fees.
#[derive(Debug, Clone)]
pub struct ArbiterActor {
    pub oracle: ArbitrationOracle,
    pub artifacts: Option<KeyArtifacts>,
    pub downtime: Downtime,
    /// Blocks of online time needed to process one resolution.
    pub t_op: u64,
    pub fee_key: Keypair,
    jobs: BTreeMap<Job, u64>,
    done: BTreeSet<Job>,
}

impl ArbiterActor {
    pub fn new(oracle: ArbitrationOracle, fee_key: Keypair, downtime: Downtime) -> Self {
        ArbiterActor { oracle, artifacts: None, downtime, t_op: 1, fee_key, jobs: BTreeMap::new(), done: BTreeSet::new() }
    }

    pub fn pending_jobs(&self) -> usize {
        self.jobs.len()
    }

    pub fn tick(&mut self, w: &World, operator_checkpoint: Option<&Checkpoint>) -> Vec<Action> {
        let now = w.slot();
        if self.downtime.offline_at(w.tick()) {
            self.oracle.go_offline(now);
            return Vec::new();
        }
        let mut out = Vec::new();
        if !self.oracle.is_initialized() {
            let Some(art) = &self.artifacts else { return out };
            if let Err(e) = self.oracle.key_restore(art, &w.kms, &w.authority) {
                out.push(Action::Note(format!("key restore failed: {e}")));
                return out;
            }
        }
        if !self.oracle.is_online() {
            let to = w.registry().operator();
            let wsp = w.ledgers.dest.wsp_current();
            match self.oracle.come_online(now, operator_checkpoint, &to, &w.authority, wsp) {
                Ok(SyncOutcome::Synced(_)) => {}
                Ok(o) => {
                    out.push(Action::Note(format!("sync: {o:?}")));
                    return out;
                }
                Err(e) => {
                    out.push(Action::Note(format!("sync: {e}")));
                    return out;
                }
            }
        }
        self.oracle.follow(&w.ledgers.dest, &w.authority);
        let Some(view) = self.oracle.view(&w.ledgers.dest) else { return out };
        self.scan(w, &view);
        let ready: Vec<Job> = self
            .jobs
            .iter_mut()
            .filter_map(|(j, p)| {
                *p += 1;
                (*p >= self.t_op).then_some(*j)
            })
            .collect();
        let mut used = BTreeSet::new();
        for job in ready {
            self.jobs.remove(&job);
            self.done.insert(job);
            out.push(self.run(w, &view, job, &mut used));
        }
        out
    }

    /// Finds challenges the arbiter has not handled yet.
    fn scan(&mut self, w: &World, view: &RegistryView) {
        let chain = w.chain();
        let addrs = &w.instance.addresses;
        for rec in view.registry().records().chain(view.registry().retired()) {
            let Some((id, tx, Some(_))) = w.spend_of(&rec.outpoint) else { continue };
            let first = OutPoint::new(id, 0);
            let job = if tx.outputs[0].address == addrs.rca.id {
                Job { first, second: None }
            } else if tx.outputs[0].address == addrs.uta.id {
                let Some((cid, ctx, Some(_))) = w.spend_of(&first) else { continue };
                if ctx.outputs[0].address != addrs.uca.id {
                    continue;
                }
                Job { first, second: Some(OutPoint::new(cid, 0)) }
            } else {
                continue;
            };
            let target = job.second.unwrap_or(job.first);
            if chain.spender(&target).is_some() || self.done.contains(&job) {
                continue;
            }
            self.jobs.entry(job).or_insert(0);
        }
    }

    fn run(&mut self, w: &World, view: &RegistryView, job: Job, used: &mut BTreeSet<OutPoint>) -> Action {
        let chain = w.chain();
        let Some(first) = w.tx(&job.first.txid) else { return Action::Note("vault spend vanished".into()) };
        let ctx = match job.second.and_then(|s| w.tx(&s.txid)) {
            Some(second) => self.oracle.verify_unbond_inputs(first, second, view),
            None => self.oracle.verify_rebalance_inputs(first, view),
        };
        let label = if job.second.is_some() { "unbond-resolve" } else { "rebalance-resolve" };
        let psbt = match ctx.and_then(|c| self.oracle.resolve(&c)) {
            Ok(p) => p,
            Err(b) => return Action::Note(format!("{label} declined: {b}")),
        };
        let built = psbt.finalize(None, chain.scheme()).map_err(|e| e.to_string()).and_then(|tx| {
            let need = chain.next_block_feerate() * (tx.weight() + 1);
            let paid = psbt.input.value - tx.output_total();
            let fee = pick_utxo(chain, &self.fee_key.public().key_address(), need.saturating_sub(paid).max(1), used)
                .ok_or_else(|| "arbiter fee wallet empty".to_string())?;
            used.insert(fee.outpoint);
            add_fee_input(&tx, &fee, &self.fee_key, chain.scheme()).map_err(|e| e.to_string())
        });
        match built {
            Ok(tx) => Action::Broadcast { label: label.into(), txs: vec![tx] },
            Err(e) => Action::Note(format!("{label} not broadcast: {e}")),
        }
    }
}
