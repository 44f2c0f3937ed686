//! Measured enclave images, a mock attestation authority and a mock KMS
//! whose key release is bound to the image signer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::ArbitrationError;
use crate::chain::Checkpoint;
use crate::digest::{sha256, Hash32};
use crate::keys::{verify, Keypair, Point, SigScheme, Signature};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnclaveImage {
    pub code_id: Hash32,
    pub config_digest: Hash32,
    pub signer_cert: Hash32,
}

impl EnclaveImage {
    pub fn new(code: &str, config: &str, signer: &str) -> Self {
        EnclaveImage {
            code_id: Hash32(sha256(&[b"code", code.as_bytes()])),
            config_digest: Hash32(sha256(&[b"config", config.as_bytes()])),
            signer_cert: Hash32(sha256(&[b"cert", signer.as_bytes()])),
        }
    }

    /// Image measurement.
    pub fn pcr0(&self) -> Hash32 {
        Hash32(sha256(&[b"pcr", &[0], &self.code_id.0, &self.config_digest.0]))
    }

    /// Signing-certificate measurement.
    pub fn pcr8(&self) -> Hash32 {
        Hash32(sha256(&[b"pcr", &[8], &self.signer_cert.0]))
    }
}

/// A platform-signed statement about an enclave and what it reports.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attestation {
    pub pcr0: Hash32,
    pub pcr8: Hash32,
    pub ao_pubkey: Option<Point>,
    pub checkpoint: Option<Checkpoint>,
    /// Weak subjectivity period the enclave computed, in slots.
    pub wsp: Option<u64>,
    pub user_data: Hash32,
    pub signature: Signature,
}

impl Attestation {
    fn message(&self) -> [u8; 32] {
        let body = serde_json::to_string(&(
            &self.pcr0,
            &self.pcr8,
            &self.ao_pubkey,
            &self.checkpoint,
            &self.wsp,
            &self.user_data,
        ))
        .expect("attestation body serializes");
        sha256(&[b"attestation", body.as_bytes()])
    }

    pub fn verify(&self, root: &Point, scheme: SigScheme) -> bool {
        verify(scheme, root, &self.message(), &self.signature)
    }

    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("attestation serializes")
    }
}

/// Stand-in for the hardware vendor's attestation PKI.
#[derive(Debug, Clone)]
pub struct AttestationAuthority {
    key: Keypair,
    scheme: SigScheme,
}

impl AttestationAuthority {
    pub fn new(seed: &[u8], scheme: SigScheme) -> Self {
        AttestationAuthority { key: Keypair::from_seed(&[b"bsa/authority".as_slice(), seed].concat()), scheme }
    }

    pub fn root(&self) -> Point {
        self.key.public()
    }

    pub fn scheme(&self) -> SigScheme {
        self.scheme
    }

    /// Measures `image` and signs what it reports.
    pub fn attest(
        &self,
        image: &EnclaveImage,
        ao_pubkey: Option<Point>,
        checkpoint: Option<Checkpoint>,
        wsp: Option<u64>,
        user_data: Hash32,
    ) -> Attestation {
        let mut a = Attestation {
            pcr0: image.pcr0(),
            pcr8: image.pcr8(),
            ao_pubkey,
            checkpoint,
            wsp,
            user_data,
            signature: Signature::Mock([0; 32]),
        };
        a.signature = self.key.sign(self.scheme, &a.message());
        a
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KmsPolicy {
    pub required_pcr8: Hash32,
    pub policy_update_denied: bool,
}

#[derive(Debug, Clone)]
struct KmsKey {
    wrap: [u8; 32],
    policy: KmsPolicy,
    nonce: u64,
}

/// Key service that decrypts only for enclaves whose attested signer
/// measurement matches the key policy.
#[derive(Debug, Clone)]
pub struct MockKms {
    root: Point,
    scheme: SigScheme,
    seed: [u8; 32],
    keys: BTreeMap<u64, KmsKey>,
}

impl MockKms {
    pub fn new(authority_root: Point, scheme: SigScheme, seed: &[u8]) -> Self {
        MockKms { root: authority_root, scheme, seed: sha256(&[b"kms", seed]), keys: BTreeMap::new() }
    }

    pub fn create_key(&mut self, policy: KmsPolicy) -> u64 {
        let id = self.keys.len() as u64;
        let wrap = sha256(&[&self.seed, &id.to_be_bytes()]);
        self.keys.insert(id, KmsKey { wrap, policy, nonce: 0 });
        id
    }

    pub fn policy(&self, key_id: u64) -> Option<KmsPolicy> {
        self.keys.get(&key_id).map(|k| k.policy)
    }

    pub fn update_policy(&mut self, key_id: u64, _policy: KmsPolicy) -> Result<(), ArbitrationError> {
        let k = self.keys.get(&key_id).ok_or(ArbitrationError::UnknownKey(key_id))?;
        if k.policy.policy_update_denied {
            return Err(ArbitrationError::PolicyUpdateDenied);
        }
        unreachable!("policies are always created with updates denied")
    }

    fn keystream(wrap: &[u8; 32], nonce: u64) -> [u8; 32] {
        sha256(&[b"stream", wrap, &nonce.to_be_bytes()])
    }

    fn tag(wrap: &[u8; 32], body: &[u8]) -> [u8; 32] {
        sha256(&[b"tag", wrap, body])
    }

    /// nonce ‖ ciphertext ‖ tag
    pub fn encrypt(&mut self, key_id: u64, plaintext: &[u8; 32]) -> Result<Vec<u8>, ArbitrationError> {
        let k = self.keys.get_mut(&key_id).ok_or(ArbitrationError::UnknownKey(key_id))?;
        k.nonce += 1;
        let ks = Self::keystream(&k.wrap, k.nonce);
        let mut out = k.nonce.to_be_bytes().to_vec();
        out.extend(plaintext.iter().zip(ks).map(|(a, b)| a ^ b));
        let tag = Self::tag(&k.wrap, &out);
        out.extend_from_slice(&tag);
        Ok(out)
    }

    /// Decrypts for the enclave described by `caller`.
    pub fn decrypt(&self, key_id: u64, ciphertext: &[u8], caller: &Attestation) -> Result<[u8; 32], ArbitrationError> {
        let k = self.keys.get(&key_id).ok_or(ArbitrationError::UnknownKey(key_id))?;
        if !caller.verify(&self.root, self.scheme) {
            return Err(ArbitrationError::AttestationInvalid);
        }
        if caller.pcr8 != k.policy.required_pcr8 {
            return Err(ArbitrationError::KmsPolicyDenied);
        }
        if ciphertext.len() != 8 + 32 + 32 {
            return Err(ArbitrationError::KeyMismatch);
        }
        let (body, tag) = ciphertext.split_at(40);
        if Self::tag(&k.wrap, body) != tag {
            return Err(ArbitrationError::KeyMismatch);
        }
        let nonce = u64::from_be_bytes(body[..8].try_into().expect("8 bytes"));
        let ks = Self::keystream(&k.wrap, nonce);
        let mut pt = [0u8; 32];
        for (i, b) in body[8..].iter().enumerate() {
            pt[i] = b ^ ks[i];
        }
        Ok(pt)
    }
}

/// Everything an arbiter persists outside the enclave after key creation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyArtifacts {
    pub pubkey: Point,
    #[serde(with = "crate::digest::hex_bytes")]
    pub encrypted_sk: Vec<u8>,
    pub key_id: u64,
    pub attestation: Attestation,
}

impl KeyArtifacts {
    pub fn binding(pubkey: &Point, encrypted_sk: &[u8], key_id: u64) -> Hash32 {
        Hash32(sha256(&[&pubkey.to_bytes(), encrypted_sk, &key_id.to_be_bytes()]))
    }
}
