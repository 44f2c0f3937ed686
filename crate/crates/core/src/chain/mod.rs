//! The two simulated ledgers: a Bitcoin-like UTXO chain and the
//! destination chain hosting the registry.

mod btc;
mod dest;

pub use btc::{
    BtcChain, ChainError, ConfirmedTx, FeeSchedule, Lock, OutPoint, SighashFlag, SimTx, TxIn, TxOut, TxStatus, Utxo,
    WitnessSig,
};
pub use dest::{Checkpoint, CheckpointSigner, DestChain, SECONDS_PER_SLOT};

use crate::digest::Txid;

/// Both ledgers advanced in lockstep: one block, then that block's slots.
#[derive(Debug, Clone)]
pub struct Ledgers {
    pub btc: BtcChain,
    pub dest: DestChain,
    pub slots_per_block: u64,
}

impl Ledgers {
    pub fn new(btc: BtcChain, dest: DestChain, slots_per_block: u64) -> Self {
        Ledgers { btc, dest, slots_per_block }
    }

    pub fn step(&mut self) -> Vec<Txid> {
        let mined = self.btc.mine_block();
        self.dest.advance(self.slots_per_block).expect("slots_per_block is positive");
        mined
    }

    pub fn slot(&self) -> u64 {
        self.dest.slot()
    }

    pub fn height(&self) -> u64 {
        self.btc.height()
    }
}
