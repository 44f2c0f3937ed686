//! Discrete-block UTXO ledger with script-path locks, relative timelocks,
//! a feerate threshold and anchor-based package evaluation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest::{sha256, AddressId, Txid};
use crate::keys::{verify, Point, SigScheme, Signature, SpendPolicy};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ChainError {
    #[error("input {0} not found")]
    UnknownInput(OutPoint),
    #[error("input {0} already spent")]
    DoubleSpend(OutPoint),
    #[error("malformed witness on input {index}: {reason}")]
    MalformedWitness { index: usize, reason: &'static str },
    #[error("bad signature on input {0}")]
    BadSignature(usize),
    #[error("input {index} timelocked until height {unlock_height}")]
    TimelockNotExpired { index: usize, unlock_height: u64 },
    #[error("input {index} names unknown spend path {path}")]
    UnknownPath { index: usize, path: u32 },
    #[error("no lock registered for address {0:?}")]
    UnknownAddress(AddressId),
    #[error("outputs exceed inputs")]
    ValueNotConserved,
    #[error("transaction must have inputs and positive-value outputs")]
    EmptyTransaction,
    #[error("cannot advance by zero slots")]
    ZeroSlots,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OutPoint {
    pub txid: Txid,
    pub vout: u32,
}

impl OutPoint {
    pub fn new(txid: Txid, vout: u32) -> Self {
        OutPoint { txid, vout }
    }
}

impl std::fmt::Display for OutPoint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}", self.txid.short(), self.vout)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TxOut {
    pub address: AddressId,
    pub value: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SighashFlag {
    /// Commits to every input outpoint and every output.
    All,
    /// Commits to the signer's own outpoint and every output.
    AnyoneCanPayAll,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessSig {
    pub signature: Signature,
    pub flag: SighashFlag,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TxIn {
    pub prevout: OutPoint,
    /// Leaf index for script locks; ignored for key locks.
    pub path: u32,
    pub witness: Vec<WitnessSig>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimTx {
    pub inputs: Vec<TxIn>,
    pub outputs: Vec<TxOut>,
    /// Index of the fee-bumping anchor output, if any.
    pub anchor: Option<u32>,
}

impl SimTx {
    /// Digest over outpoints, outputs and the anchor marker. Witnesses and
    /// path choices are excluded, so the id is fixed before signing.
    pub fn txid(&self) -> Txid {
        let mut buf = Vec::with_capacity(8 + 40 * (self.inputs.len() + self.outputs.len()));
        buf.extend_from_slice(b"tx");
        for i in &self.inputs {
            push_outpoint(&mut buf, &i.prevout);
        }
        buf.push(0xff);
        for o in &self.outputs {
            buf.extend_from_slice(&o.address.0);
            buf.extend_from_slice(&o.value.to_be_bytes());
        }
        match self.anchor {
            Some(a) => buf.extend_from_slice(&a.to_be_bytes()),
            None => buf.extend_from_slice(&[0xff; 4]),
        }
        Txid(sha256(&[&buf]))
    }

    pub fn weight(&self) -> u64 {
        (self.inputs.len() + self.outputs.len()) as u64
    }

    pub fn output_total(&self) -> u64 {
        self.outputs.iter().map(|o| o.value).sum()
    }

    pub fn outpoint(&self, vout: u32) -> OutPoint {
        OutPoint::new(self.txid(), vout)
    }

    pub fn anchor_outpoint(&self) -> Option<OutPoint> {
        self.anchor.map(|a| self.outpoint(a))
    }

    /// Message signed by the witness of input `index` under `flag`.
    pub fn sighash(&self, index: usize, flag: SighashFlag) -> [u8; 32] {
        let mut buf = Vec::with_capacity(8 + 40 * (self.inputs.len() + self.outputs.len()));
        buf.extend_from_slice(b"sighash");
        match flag {
            SighashFlag::All => {
                buf.push(0x01);
                for i in &self.inputs {
                    push_outpoint(&mut buf, &i.prevout);
                }
            }
            SighashFlag::AnyoneCanPayAll => {
                buf.push(0x81);
                push_outpoint(&mut buf, &self.inputs[index].prevout);
            }
        }
        buf.push(0xff);
        for o in &self.outputs {
            buf.extend_from_slice(&o.address.0);
            buf.extend_from_slice(&o.value.to_be_bytes());
        }
        sha256(&[&buf])
    }

    /// Copy with all witnesses stripped.
    pub fn unsigned(&self) -> SimTx {
        let mut t = self.clone();
        for i in &mut t.inputs {
            i.witness.clear();
        }
        t
    }
}

fn push_outpoint(buf: &mut Vec<u8>, op: &OutPoint) {
    buf.extend_from_slice(&op.txid.0);
    buf.extend_from_slice(&op.vout.to_be_bytes());
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utxo {
    pub outpoint: OutPoint,
    pub value: u64,
    pub address: AddressId,
    pub confirmed_height: u64,
}

/// How an address may be spent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Lock {
    Key(Point),
    /// Script-path only; the internal key is unspendable.
    Script(Vec<SpendPolicy>),
}

/// Required feerate as a step function of block height.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeeSchedule {
    steps: Vec<(u64, u64)>,
}

impl FeeSchedule {
    pub fn flat(rate: u64) -> Self {
        FeeSchedule { steps: vec![(0, rate)] }
    }

    /// `steps` are (from_height, feerate) pairs; unsorted input is sorted.
    pub fn steps(mut steps: Vec<(u64, u64)>) -> Self {
        steps.sort_unstable();
        if steps.first().is_none_or(|s| s.0 > 0) {
            steps.insert(0, (0, 1));
        }
        FeeSchedule { steps }
    }

    pub fn rate_at(&self, height: u64) -> u64 {
        self.steps.iter().rev().find(|(h, _)| *h <= height).map(|s| s.1).unwrap_or(1)
    }
}

impl Default for FeeSchedule {
    fn default() -> Self {
        FeeSchedule::flat(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TxStatus {
    Unknown,
    Mempool,
    Confirmed(u64),
}

#[derive(Debug, Clone)]
struct MempoolEntry {
    txid: Txid,
    tx: SimTx,
    fee: u64,
    arrival: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfirmedTx {
    pub tx: SimTx,
    pub height: u64,
    pub fee: u64,
}

/// The simulated Bitcoin-side ledger.
#[derive(Debug, Clone)]
pub struct BtcChain {
    height: u64,
    scheme: SigScheme,
    fees: FeeSchedule,
    utxos: BTreeMap<OutPoint, Utxo>,
    spent: BTreeMap<OutPoint, Txid>,
    confirmed: BTreeMap<Txid, ConfirmedTx>,
    mempool: Vec<MempoolEntry>,
    mempool_spends: BTreeMap<OutPoint, Txid>,
    locks: BTreeMap<AddressId, Lock>,
    coinbase_counter: u64,
}

/// Resolved input during validation.
struct Prev {
    value: u64,
    address: AddressId,
    confirmed_height: Option<u64>,
}

impl BtcChain {
    pub fn new(scheme: SigScheme, fees: FeeSchedule) -> Self {
        BtcChain {
            height: 0,
            scheme,
            fees,
            utxos: BTreeMap::new(),
            spent: BTreeMap::new(),
            confirmed: BTreeMap::new(),
            mempool: Vec::new(),
            mempool_spends: BTreeMap::new(),
            locks: BTreeMap::new(),
            coinbase_counter: 0,
        }
    }

    pub fn height(&self) -> u64 {
        self.height
    }

    pub fn scheme(&self) -> SigScheme {
        self.scheme
    }

    pub fn fee_schedule(&self) -> &FeeSchedule {
        &self.fees
    }

    /// Feerate the next block will demand.
    pub fn next_block_feerate(&self) -> u64 {
        self.fees.rate_at(self.height + 1)
    }

    pub fn register_lock(&mut self, address: AddressId, lock: Lock) {
        self.locks.insert(address, lock);
    }

    /// Registers a single-key lock and returns its address.
    pub fn register_key(&mut self, pk: Point) -> AddressId {
        let a = pk.key_address();
        self.locks.insert(a, Lock::Key(pk));
        a
    }

    pub fn lock(&self, address: &AddressId) -> Option<&Lock> {
        self.locks.get(address)
    }

    /// Mints a confirmed output out of thin air (genesis funding).
    pub fn credit(&mut self, address: AddressId, value: u64) -> OutPoint {
        self.coinbase_counter += 1;
        let txid = Txid(sha256(&[
            b"coinbase",
            &self.coinbase_counter.to_be_bytes(),
            &address.0,
            &value.to_be_bytes(),
        ]));
        let op = OutPoint::new(txid, 0);
        self.utxos.insert(
            op,
            Utxo { outpoint: op, value, address, confirmed_height: self.height },
        );
        op
    }

    pub fn utxo(&self, op: &OutPoint) -> Option<&Utxo> {
        self.utxos.get(op)
    }

    pub fn utxos_at(&self, address: &AddressId) -> Vec<&Utxo> {
        self.utxos.values().filter(|u| u.address == *address).collect()
    }

    /// Confirmed UTXOs at `address` not already spent by a mempool tx.
    pub fn spendable_at(&self, address: &AddressId) -> Vec<&Utxo> {
        self.utxos
            .values()
            .filter(|u| u.address == *address && !self.mempool_spends.contains_key(&u.outpoint))
            .collect()
    }

    pub fn balance(&self, address: &AddressId) -> u64 {
        self.utxos.values().filter(|u| u.address == *address).map(|u| u.value).sum()
    }

    pub fn status(&self, txid: &Txid) -> TxStatus {
        if let Some(c) = self.confirmed.get(txid) {
            TxStatus::Confirmed(c.height)
        } else if self.mempool.iter().any(|e| e.txid == *txid) {
            TxStatus::Mempool
        } else {
            TxStatus::Unknown
        }
    }

    pub fn confirmed_tx(&self, txid: &Txid) -> Option<&ConfirmedTx> {
        self.confirmed.get(txid)
    }

    pub fn mempool_tx(&self, txid: &Txid) -> Option<&SimTx> {
        self.mempool.iter().find(|e| e.txid == *txid).map(|e| &e.tx)
    }

    pub fn mempool_len(&self) -> usize {
        self.mempool.len()
    }

    /// Confirmed spender of `op`.
    pub fn confirmed_spender(&self, op: &OutPoint) -> Option<Txid> {
        self.spent.get(op).copied()
    }

    /// Spender of `op`, confirmed or in the mempool.
    pub fn spender(&self, op: &OutPoint) -> Option<Txid> {
        self.spent.get(op).or_else(|| self.mempool_spends.get(op)).copied()
    }

    pub fn confirmations(&self, txid: &Txid) -> u64 {
        match self.status(txid) {
            TxStatus::Confirmed(h) => self.height - h + 1,
            _ => 0,
        }
    }

    /// All confirmed transactions in (height, txid) order.
    pub fn history(&self) -> Vec<(&Txid, &ConfirmedTx)> {
        let mut v: Vec<_> = self.confirmed.iter().collect();
        v.sort_by_key(|(id, c)| (c.height, **id));
        v
    }

    fn resolve(&self, op: &OutPoint) -> Result<Prev, ChainError> {
        if let Some(u) = self.utxos.get(op) {
            return Ok(Prev { value: u.value, address: u.address, confirmed_height: Some(u.confirmed_height) });
        }
        if self.spent.contains_key(op) {
            return Err(ChainError::DoubleSpend(*op));
        }
        if let Some(e) = self.mempool.iter().find(|e| e.txid == op.txid) {
            if let Some(o) = e.tx.outputs.get(op.vout as usize) {
                return Ok(Prev { value: o.value, address: o.address, confirmed_height: None });
            }
        }
        Err(ChainError::UnknownInput(*op))
    }

    /// Checks every input's witness against its lock at the current tip.
    pub fn verify_spend(&self, tx: &SimTx) -> Result<(), ChainError> {
        for index in 0..tx.inputs.len() {
            let prev = self.resolve(&tx.inputs[index].prevout)?;
            self.verify_input(tx, index, &prev)?;
        }
        Ok(())
    }

    fn verify_input(&self, tx: &SimTx, index: usize, prev: &Prev) -> Result<(), ChainError> {
        let input = &tx.inputs[index];
        let lock = self.locks.get(&prev.address).ok_or(ChainError::UnknownAddress(prev.address))?;
        let (keys, delay) = match lock {
            Lock::Key(pk) => (vec![*pk], 0),
            Lock::Script(leaves) => {
                let leaf = leaves
                    .get(input.path as usize)
                    .ok_or(ChainError::UnknownPath { index, path: input.path })?;
                (leaf.keys(), leaf.delay())
            }
        };
        if input.witness.len() != keys.len() {
            return Err(ChainError::MalformedWitness { index, reason: "signature count does not match policy" });
        }
        for (pk, w) in keys.iter().zip(&input.witness) {
            let msg = tx.sighash(index, w.flag);
            if !verify(self.scheme, pk, &msg, &w.signature) {
                return Err(ChainError::BadSignature(index));
            }
        }
        if delay > 0 {
            let unlock_height = match prev.confirmed_height {
                Some(h) => h + delay as u64,
                None => self.height + 1 + delay as u64,
            };
            if self.height < unlock_height {
                return Err(ChainError::TimelockNotExpired { index, unlock_height });
            }
        }
        Ok(())
    }

    /// Validates and enters `tx` into the mempool. First seen wins.
    pub fn submit_tx(&mut self, tx: SimTx) -> Result<Txid, ChainError> {
        if tx.inputs.is_empty() || tx.outputs.is_empty() || tx.outputs.iter().any(|o| o.value == 0) {
            return Err(ChainError::EmptyTransaction);
        }
        let mut seen = BTreeSet::new();
        let mut total_in = 0u64;
        let mut prevs = Vec::with_capacity(tx.inputs.len());
        for i in &tx.inputs {
            if !seen.insert(i.prevout) || self.mempool_spends.contains_key(&i.prevout) {
                return Err(ChainError::DoubleSpend(i.prevout));
            }
            let p = self.resolve(&i.prevout)?;
            total_in += p.value;
            prevs.push(p);
        }
        let total_out = tx.output_total();
        if total_out > total_in {
            return Err(ChainError::ValueNotConserved);
        }
        for (index, p) in prevs.iter().enumerate() {
            self.verify_input(&tx, index, p)?;
        }
        let txid = tx.txid();
        for i in &tx.inputs {
            self.mempool_spends.insert(i.prevout, txid);
        }
        self.mempool.push(MempoolEntry { txid, tx, fee: total_in - total_out, arrival: self.height });
        Ok(txid)
    }

    /// Mines one block and returns the confirmed txids in block order.
    ///
    /// A tx is included when its own feerate meets the block's rate, or when
    /// it together with the mempool children spending its anchor meets it.
    /// Inclusion repeats until nothing changes so chains can confirm
    /// together, parents first.
    pub fn mine_block(&mut self) -> Vec<Txid> {
        let new_height = self.height + 1;
        let rate = self.fees.rate_at(new_height);
        let mut included: Vec<usize> = Vec::new();
        let mut in_block: BTreeSet<Txid> = BTreeSet::new();

        let parents_ready = |e: &MempoolEntry, in_block: &BTreeSet<Txid>, extra: Option<Txid>| {
            e.tx.inputs.iter().all(|i| {
                self.utxos.contains_key(&i.prevout)
                    || in_block.contains(&i.prevout.txid)
                    || Some(i.prevout.txid) == extra
            })
        };

        loop {
            let mut progress = false;
            for (idx, e) in self.mempool.iter().enumerate() {
                if in_block.contains(&e.txid) || !parents_ready(e, &in_block, None) {
                    continue;
                }
                if e.fee >= rate * e.tx.weight() {
                    included.push(idx);
                    in_block.insert(e.txid);
                    progress = true;
                    continue;
                }
                let Some(anchor) = e.tx.anchor_outpoint() else { continue };
                let child = self.mempool.iter().position(|c| {
                    !in_block.contains(&c.txid)
                        && c.tx.inputs.iter().any(|i| i.prevout == anchor)
                        && parents_ready(c, &in_block, Some(e.txid))
                });
                if let Some(ci) = child {
                    let c = &self.mempool[ci];
                    if e.fee + c.fee >= rate * (e.tx.weight() + c.tx.weight()) {
                        included.push(idx);
                        in_block.insert(e.txid);
                        included.push(ci);
                        in_block.insert(c.txid);
                        progress = true;
                    }
                }
            }
            if !progress {
                break;
            }
        }

        self.height = new_height;
        let mut confirmed = Vec::with_capacity(included.len());
        for &idx in &included {
            let e = self.mempool[idx].clone();
            for i in &e.tx.inputs {
                self.utxos.remove(&i.prevout);
                self.spent.insert(i.prevout, e.txid);
                self.mempool_spends.remove(&i.prevout);
            }
            for (vout, o) in e.tx.outputs.iter().enumerate() {
                let op = OutPoint::new(e.txid, vout as u32);
                self.utxos.insert(
                    op,
                    Utxo { outpoint: op, value: o.value, address: o.address, confirmed_height: new_height },
                );
            }
            self.confirmed.insert(e.txid, ConfirmedTx { tx: e.tx, height: new_height, fee: e.fee });
            confirmed.push(e.txid);
        }
        let done: BTreeSet<usize> = included.into_iter().collect();
        let mut i = 0;
        self.mempool.retain(|_| {
            let keep = !done.contains(&i);
            i += 1;
            keep
        });
        confirmed
    }

    /// Fee paid by a mempool or confirmed tx.
    pub fn fee_of(&self, txid: &Txid) -> Option<u64> {
        self.confirmed
            .get(txid)
            .map(|c| c.fee)
            .or_else(|| self.mempool.iter().find(|e| e.txid == *txid).map(|e| e.fee))
    }

    /// Height at which a mempool tx arrived.
    pub fn arrival_height(&self, txid: &Txid) -> Option<u64> {
        self.mempool.iter().find(|e| e.txid == *txid).map(|e| e.arrival)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keys::Keypair;

    fn signed_key_spend(kp: &Keypair, prevs: &[OutPoint], outs: Vec<TxOut>, anchor: Option<u32>) -> SimTx {
        let mut tx = SimTx {
            inputs: prevs.iter().map(|p| TxIn { prevout: *p, path: 0, witness: vec![] }).collect(),
            outputs: outs,
            anchor,
        };
        for i in 0..tx.inputs.len() {
            let sig = kp.sign(SigScheme::Mock, &tx.sighash(i, SighashFlag::All));
            tx.inputs[i].witness = vec![WitnessSig { signature: sig, flag: SighashFlag::All }];
        }
        tx
    }

    fn setup() -> (BtcChain, Keypair, AddressId, OutPoint) {
        let mut c = BtcChain::new(SigScheme::Mock, FeeSchedule::flat(25));
        let kp = Keypair::from_seed(b"w");
        let a = c.register_key(kp.public());
        let op = c.credit(a, 10_000);
        (c, kp, a, op)
    }

    #[test]
    fn threshold_met_exactly_confirms_alone() {
        let (mut c, kp, a, op) = setup();
        // weight 1 input + 3 outputs = 4, fee 100
        let outs = vec![
            TxOut { address: a, value: 3000 },
            TxOut { address: a, value: 3000 },
            TxOut { address: a, value: 3900 },
        ];
        let tx = signed_key_spend(&kp, &[op], outs, None);
        let id = c.submit_tx(tx).unwrap();
        assert_eq!(c.mine_block(), vec![id]);
        assert_eq!(c.status(&id), TxStatus::Confirmed(1));
    }

    #[test]
    fn below_threshold_stays_in_mempool() {
        let (mut c, kp, a, op) = setup();
        let tx = signed_key_spend(&kp, &[op], vec![TxOut { address: a, value: 9_990 }], None);
        let id = c.submit_tx(tx).unwrap();
        assert!(c.mine_block().is_empty());
        assert_eq!(c.status(&id), TxStatus::Mempool);
    }

    #[test]
    fn double_spend_and_unknown_rejected() {
        let (mut c, kp, a, op) = setup();
        let t1 = signed_key_spend(&kp, &[op], vec![TxOut { address: a, value: 9000 }], None);
        let t2 = signed_key_spend(&kp, &[op], vec![TxOut { address: a, value: 8000 }], None);
        c.submit_tx(t1).unwrap();
        assert_eq!(c.submit_tx(t2.clone()), Err(ChainError::DoubleSpend(op)));
        c.mine_block();
        assert_eq!(c.submit_tx(t2), Err(ChainError::DoubleSpend(op)));
        let ghost = OutPoint::new(Txid([9; 32]), 0);
        let t3 = signed_key_spend(&kp, &[ghost], vec![TxOut { address: a, value: 1 }], None);
        assert_eq!(c.submit_tx(t3), Err(ChainError::UnknownInput(ghost)));
    }

    #[test]
    fn value_conservation_enforced() {
        let (mut c, kp, a, op) = setup();
        let t = signed_key_spend(&kp, &[op], vec![TxOut { address: a, value: 10_001 }], None);
        assert_eq!(c.submit_tx(t), Err(ChainError::ValueNotConserved));
    }

    #[test]
    fn wrong_key_is_bad_signature() {
        let (mut c, _, a, op) = setup();
        let t = signed_key_spend(&Keypair::from_seed(b"x"), &[op], vec![TxOut { address: a, value: 1 }], None);
        assert_eq!(c.submit_tx(t), Err(ChainError::BadSignature(0)));
    }

    #[test]
    fn schedule_steps() {
        let s = FeeSchedule::steps(vec![(10, 5), (3, 2)]);
        assert_eq!(s.rate_at(0), 1);
        assert_eq!(s.rate_at(3), 2);
        assert_eq!(s.rate_at(9), 2);
        assert_eq!(s.rate_at(10), 5);
        assert_eq!(s.rate_at(1000), 5);
    }

    #[test]
    fn chained_spend_confirms_same_block() {
        let (mut c, kp, a, op) = setup();
        let t1 = signed_key_spend(&kp, &[op], vec![TxOut { address: a, value: 9_000 }], None);
        let id1 = c.submit_tx(t1).unwrap();
        let t2 = signed_key_spend(&kp, &[OutPoint::new(id1, 0)], vec![TxOut { address: a, value: 8_000 }], None);
        let id2 = c.submit_tx(t2).unwrap();
        assert_eq!(c.mine_block(), vec![id1, id2]);
    }
}
