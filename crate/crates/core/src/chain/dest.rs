//! Destination chain: slots, finalized checkpoints and the registry they
//! commit to.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::ChainError;
use crate::digest::{sha256, Hash32};
use crate::keys::{verify, Keypair, Point, SigScheme, Signature};
use crate::registry::Registry;

pub const SECONDS_PER_SLOT: u64 = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CheckpointSigner {
    /// The chain's own finality gadget.
    Finality,
    TokenOperator,
    AoSelfAttested,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub slot: u64,
    pub state_digest: Hash32,
    pub timestamp: u64,
    pub signer: CheckpointSigner,
    pub signer_key: Point,
    pub signature: Signature,
}

impl Checkpoint {
    pub fn message(slot: u64, state_digest: &Hash32, timestamp: u64) -> [u8; 32] {
        sha256(&[b"checkpoint", &slot.to_be_bytes(), &state_digest.0, &timestamp.to_be_bytes()])
    }

    fn signed(slot: u64, state_digest: Hash32, signer: CheckpointSigner, key: &Keypair, scheme: SigScheme) -> Self {
        let timestamp = slot * SECONDS_PER_SLOT;
        let signature = key.sign(scheme, &Self::message(slot, &state_digest, timestamp));
        Checkpoint { slot, state_digest, timestamp, signer, signer_key: key.public(), signature }
    }

    /// Same checkpoint vouched for by another party.
    pub fn endorse(&self, signer: CheckpointSigner, key: &Keypair, scheme: SigScheme) -> Self {
        Self::signed(self.slot, self.state_digest, signer, key, scheme)
    }

    /// Signature verifies against the embedded key.
    pub fn verifies(&self, scheme: SigScheme) -> bool {
        verify(scheme, &self.signer_key, &Self::message(self.slot, &self.state_digest, self.timestamp), &self.signature)
    }

    /// Signature verifies and was made by `expected`.
    pub fn verifies_as(&self, expected: &Point, scheme: SigScheme) -> bool {
        self.signer_key == *expected && self.verifies(scheme)
    }

    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("checkpoint serializes")
    }
}

#[derive(Debug, Clone)]
pub struct DestChain {
    slot: u64,
    finality_interval: u64,
    wsp_current: u64,
    scheme: SigScheme,
    finality_key: Keypair,
    checkpoints: Vec<Checkpoint>,
    snapshots: BTreeMap<u64, Arc<Registry>>,
    registry: Registry,
    dirty: bool,
    last_snapshot: Option<(Hash32, Arc<Registry>)>,
}

impl DestChain {
    pub fn new(registry: Registry, finality_interval: u64, wsp_current: u64, scheme: SigScheme) -> Self {
        assert!(finality_interval > 0 && wsp_current > 0);
        DestChain {
            slot: 0,
            finality_interval,
            wsp_current,
            scheme,
            finality_key: Keypair::from_seed(b"bsa/dest-finality"),
            checkpoints: Vec::new(),
            snapshots: BTreeMap::new(),
            registry,
            dirty: true,
            last_snapshot: None,
        }
    }

    pub fn slot(&self) -> u64 {
        self.slot
    }

    pub fn scheme(&self) -> SigScheme {
        self.scheme
    }

    pub fn finality_interval(&self) -> u64 {
        self.finality_interval
    }

    pub fn wsp_current(&self) -> u64 {
        self.wsp_current
    }

    pub fn set_wsp_current(&mut self, wsp: u64) {
        assert!(wsp > 0);
        self.wsp_current = wsp;
    }

    /// Public key of the finality gadget that signs checkpoints.
    pub fn finality_key(&self) -> Point {
        self.finality_key.public()
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Contract calls go through here so snapshots know the state moved.
    pub fn registry_mut(&mut self) -> &mut Registry {
        self.dirty = true;
        &mut self.registry
    }

    pub fn checkpoints(&self) -> &[Checkpoint] {
        &self.checkpoints
    }

    pub fn latest_checkpoint(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    /// Registry state a checkpoint commits to.
    pub fn registry_at(&self, cp: &Checkpoint) -> Option<Arc<Registry>> {
        let snap = self.snapshots.get(&cp.slot)?;
        let matches = self
            .checkpoints
            .binary_search_by_key(&cp.slot, |c| c.slot)
            .is_ok_and(|i| self.checkpoints[i].state_digest == cp.state_digest);
        matches.then(|| Arc::clone(snap))
    }

    /// Advances `n` slots, finalizing a checkpoint on every multiple of the
    /// finality interval.
    pub fn advance(&mut self, n: u64) -> Result<Vec<Checkpoint>, ChainError> {
        if n == 0 {
            return Err(ChainError::ZeroSlots);
        }
        let mut new = Vec::new();
        let end = self.slot + n;
        let mut next = (self.slot / self.finality_interval + 1) * self.finality_interval;
        while next <= end {
            let (digest, snap) = match (&self.last_snapshot, self.dirty) {
                (Some((d, s)), false) => (*d, Arc::clone(s)),
                _ => {
                    let s = Arc::new(self.registry.clone());
                    let d = s.digest();
                    self.last_snapshot = Some((d, Arc::clone(&s)));
                    self.dirty = false;
                    (d, s)
                }
            };
            let cp = Checkpoint::signed(next, digest, CheckpointSigner::Finality, &self.finality_key, self.scheme);
            self.snapshots.insert(next, snap);
            self.checkpoints.push(cp.clone());
            new.push(cp);
            next += self.finality_interval;
        }
        self.slot = end;
        Ok(new)
    }
}
