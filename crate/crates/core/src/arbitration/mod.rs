//! Arbitration oracles: enclave key lifecycle, light-client sync, the two
//! input-verification pipelines and version checks.

mod enclave;
mod light_client;
mod verify;
mod version;

use std::sync::Arc;

use thiserror::Error;

pub use enclave::{Attestation, AttestationAuthority, EnclaveImage, KeyArtifacts, KmsPolicy, MockKms};
pub use light_client::{LightClient, SyncOutcome, SyncSource};
pub use verify::{Bottom, Check, ResolutionKind, VerifiedContext, UNBOND_CHECKS, REBALANCE_CHECKS};
pub use version::{evaluate_version, VersionDecision, VersionRejection};

use crate::chain::{Checkpoint, CheckpointSigner, DestChain};
use crate::digest::{sha256, Hash32};
use crate::keys::{Keypair, Point, SigScheme};
use crate::registry::Registry;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ArbitrationError {
    #[error("arbiter has no key")]
    NotInitialized,
    #[error("arbiter already holds a key")]
    AlreadyInitialized,
    #[error("attestation does not verify")]
    AttestationInvalid,
    #[error("KMS policy denies this enclave")]
    KmsPolicyDenied,
    #[error("restored key does not match the published key")]
    KeyMismatch,
    #[error("KMS key policy cannot be changed")]
    PolicyUpdateDenied,
    #[error("unknown KMS key {0}")]
    UnknownKey(u64),
    #[error("checkpoint older than the weak subjectivity period")]
    StaleCheckpoint,
    #[error("arbiter is offline")]
    Offline,
}

/// Registry state as of a finalized checkpoint.
#[derive(Debug, Clone)]
pub struct RegistryView {
    checkpoint: Checkpoint,
    registry: Arc<Registry>,
}

impl RegistryView {
    /// `None` unless `registry` is the state `checkpoint` commits to.
    pub fn new(checkpoint: Checkpoint, registry: Arc<Registry>) -> Option<Self> {
        (registry.digest() == checkpoint.state_digest).then_some(RegistryView { checkpoint, registry })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.checkpoint
    }

    pub fn registry(&self) -> &Registry {
        &self.registry
    }

    /// Time as the arbiter knows it.
    pub fn slot(&self) -> u64 {
        self.checkpoint.slot
    }
}

#[derive(Debug, Clone)]
pub struct ArbitrationOracle {
    pub index: usize,
    image: EnclaveImage,
    /// Lives only in enclave memory; lost on restart.
    keypair: Option<Keypair>,
    nsm_seed: [u8; 32],
    pub light_client: LightClient,
    scheme: SigScheme,
    /// Models a broken enclave: the status check is skipped.
    tee_compromised: bool,
    signatures: u64,
    online: bool,
    last_online_slot: Option<u64>,
}

impl ArbitrationOracle {
    pub fn new(index: usize, image: EnclaveImage, seed: &[u8], default_wsp: u64, scheme: SigScheme) -> Self {
        ArbitrationOracle {
            index,
            image,
            keypair: None,
            nsm_seed: sha256(&[b"bsa/nsm", seed]),
            light_client: LightClient::new(default_wsp),
            scheme,
            tee_compromised: false,
            signatures: 0,
            online: false,
            last_online_slot: None,
        }
    }

    pub fn pubkey(&self) -> Option<Point> {
        self.keypair.as_ref().map(Keypair::public)
    }

    pub fn image(&self) -> &EnclaveImage {
        &self.image
    }

    pub fn pcr0(&self) -> Hash32 {
        self.image.pcr0()
    }

    pub fn scheme(&self) -> SigScheme {
        self.scheme
    }

    pub fn is_initialized(&self) -> bool {
        self.keypair.is_some()
    }

    pub fn is_online(&self) -> bool {
        self.online
    }

    /// Resolution signatures produced so far.
    pub fn signatures_produced(&self) -> u64 {
        self.signatures
    }

    pub fn compromise_tee(&mut self) {
        self.tee_compromised = true;
    }

    pub fn tee_compromised(&self) -> bool {
        self.tee_compromised
    }

    /// Enclave restart: memory is wiped, stored artifacts survive outside.
    pub fn reboot(&mut self) {
        self.keypair = None;
        self.online = false;
        self.light_client.disconnect();
    }

    /// The host runs a different image. Needs a key restore afterwards.
    pub fn swap_image(&mut self, image: EnclaveImage) {
        self.reboot();
        self.image = image;
    }

    fn attest_self(&self, authority: &AttestationAuthority, user_data: Hash32) -> Attestation {
        authority.attest(&self.image, self.pubkey(), self.light_client.trusted().cloned(), Some(self.light_client.wsp_known()), user_data)
    }

    /// Generates a key inside the enclave and exports it sealed to the KMS.
    pub fn key_init(
        &mut self,
        kms: &mut MockKms,
        authority: &AttestationAuthority,
        entropy: &[u8],
    ) -> Result<KeyArtifacts, ArbitrationError> {
        if self.keypair.is_some() {
            return Err(ArbitrationError::AlreadyInitialized);
        }
        let kp = Keypair::from_seed(&sha256(&[&self.nsm_seed, entropy]));
        let key_id = kms.create_key(KmsPolicy { required_pcr8: self.image.pcr8(), policy_update_denied: true });
        let encrypted_sk = kms.encrypt(key_id, &kp.secret_bytes())?;
        let pubkey = kp.public();
        let user_data = KeyArtifacts::binding(&pubkey, &encrypted_sk, key_id);
        self.keypair = Some(kp);
        let attestation = self.attest_self(authority, user_data);
        Ok(KeyArtifacts { pubkey, encrypted_sk, key_id, attestation })
    }

    /// Recovers the key from stored artifacts after a restart.
    pub fn key_restore(
        &mut self,
        artifacts: &KeyArtifacts,
        kms: &MockKms,
        authority: &AttestationAuthority,
    ) -> Result<(), ArbitrationError> {
        if self.keypair.is_some() {
            return Err(ArbitrationError::AlreadyInitialized);
        }
        if !artifacts.attestation.verify(&authority.root(), authority.scheme()) {
            return Err(ArbitrationError::AttestationInvalid);
        }
        let fresh = self.attest_self(authority, Hash32(sha256(&[b"restore", &artifacts.key_id.to_be_bytes()])));
        let sk = kms.decrypt(artifacts.key_id, &artifacts.encrypted_sk, &fresh)?;
        let kp = Keypair::from_secret_bytes(&sk).map_err(|_| ArbitrationError::KeyMismatch)?;
        let bound = KeyArtifacts::binding(&artifacts.pubkey, &artifacts.encrypted_sk, artifacts.key_id);
        if kp.public() != artifacts.pubkey || artifacts.attestation.user_data != bound {
            return Err(ArbitrationError::KeyMismatch);
        }
        self.keypair = Some(kp);
        Ok(())
    }

    pub fn go_offline(&mut self, now: u64) {
        if self.online {
            self.last_online_slot = Some(now);
        }
        self.online = false;
        self.light_client.disconnect();
    }

    /// Comes back at `now` and resyncs, using `operator_checkpoint` if the
    /// stored self-attestation is too old or missing.
    pub fn come_online(
        &mut self,
        now: u64,
        operator_checkpoint: Option<&Checkpoint>,
        operator_key: &Point,
        authority: &AttestationAuthority,
        wsp_current: u64,
    ) -> Result<SyncOutcome, ArbitrationError> {
        let downtime = self.last_online_slot.map(|l| now.saturating_sub(l));
        let out = self.light_client.sync(
            now,
            downtime,
            operator_checkpoint,
            operator_key,
            &authority.root(),
            wsp_current,
            authority.scheme(),
        )?;
        self.online = matches!(out, SyncOutcome::Synced(_));
        Ok(out)
    }

    /// While online: follow finality and refresh the self-attested checkpoint.
    pub fn follow(&mut self, dest: &DestChain, authority: &AttestationAuthority) {
        if !self.online {
            return;
        }
        self.light_client.follow(dest);
        self.last_online_slot = Some(dest.slot());
        let (Some(kp), Some(cp)) = (&self.keypair, self.light_client.trusted()) else {
            return;
        };
        let endorsed = cp.endorse(CheckpointSigner::AoSelfAttested, kp, self.scheme);
        let user_data = Hash32(sha256(&[endorsed.canonical_text().as_bytes()]));
        let att = authority.attest(&self.image, self.pubkey(), Some(endorsed), Some(self.light_client.wsp_known()), user_data);
        self.light_client.store_self_attestation(att);
    }

    /// Registry view at the trusted checkpoint, if the arbiter is synced.
    pub fn view(&self, dest: &DestChain) -> Option<RegistryView> {
        if !self.online || !self.light_client.is_synced() {
            return None;
        }
        let cp = self.light_client.trusted()?;
        let reg = dest.registry_at(cp)?;
        Some(RegistryView { checkpoint: cp.clone(), registry: reg })
    }

    /// Attests to `payload` with the current key and checkpoint.
    pub fn produce_attestation(
        &self,
        authority: &AttestationAuthority,
        payload: &[u8],
    ) -> Result<Attestation, ArbitrationError> {
        if self.keypair.is_none() {
            return Err(ArbitrationError::NotInitialized);
        }
        Ok(self.attest_self(authority, Hash32(sha256(&[payload]))))
    }

    /// Models a compromised key: the secret escapes the enclave.
    pub fn leak_key(&self) -> Option<Keypair> {
        self.keypair.clone()
    }

    pub(crate) fn keypair(&self) -> Option<&Keypair> {
        self.keypair.as_ref()
    }

    pub(crate) fn count_signature(&mut self) {
        self.signatures += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup() -> (ArbitrationOracle, MockKms, AttestationAuthority) {
        let auth = AttestationAuthority::new(b"root", SigScheme::Mock);
        let kms = MockKms::new(auth.root(), SigScheme::Mock, b"kms");
        let ao = ArbitrationOracle::new(0, EnclaveImage::new("ao-v1", "cfg", "signer"), b"ao0", 2000, SigScheme::Mock);
        (ao, kms, auth)
    }

    #[test]
    fn init_then_restore_same_key() {
        let (mut ao, mut kms, auth) = setup();
        let art = ao.key_init(&mut kms, &auth, b"e").unwrap();
        assert!(art.attestation.verify(&auth.root(), SigScheme::Mock));
        assert_eq!(art.attestation.ao_pubkey, Some(art.pubkey));
        ao.reboot();
        assert!(!ao.is_initialized());
        ao.key_restore(&art, &kms, &auth).unwrap();
        assert_eq!(ao.pubkey(), Some(art.pubkey));
    }

    #[test]
    fn restore_denied_for_other_signer() {
        let (mut ao, mut kms, auth) = setup();
        let art = ao.key_init(&mut kms, &auth, b"e").unwrap();
        ao.swap_image(EnclaveImage::new("ao-v1", "cfg", "someone-else"));
        assert_eq!(ao.key_restore(&art, &kms, &auth), Err(ArbitrationError::KmsPolicyDenied));
    }

    #[test]
    fn restore_rejects_substituted_pubkey() {
        let (mut ao, mut kms, auth) = setup();
        let mut art = ao.key_init(&mut kms, &auth, b"e").unwrap();
        art.pubkey = Keypair::from_seed(b"attacker").public();
        ao.reboot();
        assert_eq!(ao.key_restore(&art, &kms, &auth), Err(ArbitrationError::KeyMismatch));
    }

    #[test]
    fn restore_rejects_forged_attestation() {
        let (mut ao, mut kms, auth) = setup();
        let mut art = ao.key_init(&mut kms, &auth, b"e").unwrap();
        art.attestation.wsp = Some(1);
        ao.reboot();
        assert_eq!(ao.key_restore(&art, &kms, &auth), Err(ArbitrationError::AttestationInvalid));
    }

    #[test]
    fn policy_is_immutable() {
        let (mut ao, mut kms, auth) = setup();
        let art = ao.key_init(&mut kms, &auth, b"e").unwrap();
        let p = kms.policy(art.key_id).unwrap();
        assert_eq!(kms.update_policy(art.key_id, p), Err(ArbitrationError::PolicyUpdateDenied));
    }
}
