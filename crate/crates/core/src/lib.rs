//! Simulation of a Bitcoin-backed bridge in which deposited coins stay in
//! per-depositor vaults, guarded by pre-signed transactions, a registry on
//! the destination chain and enclave-hosted arbiters.

pub mod actors;
pub mod arbitration;
pub mod chain;
pub mod digest;
pub mod harness;
pub mod keys;
pub mod psbt;
pub mod registry;

pub use chain::{BtcChain, DestChain, Ledgers, OutPoint, SimTx};
pub use digest::{AddressId, Hash32, Txid};
pub use keys::{Keypair, Point, SigScheme, TweakData};
