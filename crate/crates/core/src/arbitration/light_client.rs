//! Checkpoint tracking for the arbiter's view of the destination chain.

use serde::{Deserialize, Serialize};

use super::enclave::Attestation;
use crate::chain::{Checkpoint, CheckpointSigner, DestChain};
use crate::keys::{Point, SigScheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncSource {
    SelfAttested,
    OperatorCheckpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SyncOutcome {
    Synced(SyncSource),
    /// The arbiter declined the operator checkpoint and stays offline.
    Refused,
    NeedsOperatorCheckpoint,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LightClient {
    trusted: Option<Checkpoint>,
    synced: bool,
    /// Latest stored self-attestation of a checkpoint.
    self_attested: Option<Attestation>,
    wsp_known: u64,
    default_wsp: u64,
    pub accept_operator_checkpoints: bool,
}

impl LightClient {
    pub fn new(default_wsp: u64) -> Self {
        LightClient {
            trusted: None,
            synced: false,
            self_attested: None,
            wsp_known: default_wsp,
            default_wsp,
            accept_operator_checkpoints: true,
        }
    }

    pub fn is_synced(&self) -> bool {
        self.synced
    }

    pub fn trusted(&self) -> Option<&Checkpoint> {
        self.trusted.as_ref()
    }

    pub fn wsp_known(&self) -> u64 {
        self.wsp_known
    }

    pub fn default_wsp(&self) -> u64 {
        self.default_wsp
    }

    pub fn self_attested(&self) -> Option<&Attestation> {
        self.self_attested.as_ref()
    }

    pub(crate) fn store_self_attestation(&mut self, att: Attestation) {
        self.self_attested = Some(att);
    }

    /// Going offline drops sync; the stored state survives.
    pub fn disconnect(&mut self) {
        self.synced = false;
    }

    /// Re-establishes sync after `downtime` slots offline.
    ///
    /// Shorter than the known weak subjectivity period: resume from the
    /// stored self-attested checkpoint. Otherwise, or on first boot, an
    /// operator-signed checkpoint no older than the default period is
    /// required.
    #[allow(clippy::too_many_arguments)]
    pub fn sync(
        &mut self,
        now: u64,
        downtime: Option<u64>,
        operator_checkpoint: Option<&Checkpoint>,
        operator_key: &Point,
        authority_root: &Point,
        wsp_current: u64,
        scheme: SigScheme,
    ) -> Result<SyncOutcome, super::ArbitrationError> {
        if let (Some(d), Some(att)) = (downtime, &self.self_attested) {
            if d < self.wsp_known && att.verify(authority_root, scheme) {
                if let Some(cp) = &att.checkpoint {
                    self.trusted = Some(cp.clone());
                    self.synced = true;
                    self.wsp_known = wsp_current;
                    return Ok(SyncOutcome::Synced(SyncSource::SelfAttested));
                }
            }
        }
        let Some(cp) = operator_checkpoint else {
            return Ok(SyncOutcome::NeedsOperatorCheckpoint);
        };
        if cp.signer != CheckpointSigner::TokenOperator || !cp.verifies_as(operator_key, scheme) {
            return Ok(SyncOutcome::Refused);
        }
        if now.saturating_sub(cp.slot) > self.default_wsp {
            return Err(super::ArbitrationError::StaleCheckpoint);
        }
        if !self.accept_operator_checkpoints {
            return Ok(SyncOutcome::Refused);
        }
        self.trusted = Some(cp.clone());
        self.synced = true;
        self.wsp_known = wsp_current;
        Ok(SyncOutcome::Synced(SyncSource::OperatorCheckpoint))
    }

    /// Follows finality forward from the trusted checkpoint.
    pub fn follow(&mut self, dest: &DestChain) {
        if !self.synced {
            return;
        }
        let from = self.trusted.as_ref().map_or(0, |c| c.slot);
        let key = dest.finality_key();
        if let Some(cp) = dest
            .checkpoints()
            .iter()
            .rev()
            .take_while(|c| c.slot > from)
            .find(|c| c.verifies_as(&key, dest.scheme()))
        {
            self.trusted = Some(cp.clone());
        }
        self.wsp_known = dest.wsp_current();
    }
}
