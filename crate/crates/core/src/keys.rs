//! secp256k1 keys, signatures, NUMS internal keys and the four protocol
//! addresses of an instance.

use std::fmt;

use k256::elliptic_curve::ops::Reduce;
use k256::elliptic_curve::sec1::{FromSec1Point, ToSec1Point};
use k256::elliptic_curve::group::Group;
use k256::elliptic_curve::PrimeField;
use k256::{AffinePoint, FieldBytes, ProjectivePoint, Scalar};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::digest::{hex_bytes, sha256, AddressId, Hash32};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum KeyError {
    #[error("secret scalar is zero or not below the curve order")]
    InvalidScalar,
    #[error("bytes do not encode a point on secp256k1")]
    InvalidPoint,
    #[error("invalid tweak data: {0}")]
    InvalidTweakData(&'static str),
    #[error("script tree has no leaves")]
    EmptyScriptTree,
    #[error("spend policy invalid: {0}")]
    InvalidPolicy(&'static str),
}

/// x coordinate of the fixed NUMS base point `H` (even y).
pub const NUMS_H_X: [u8; 32] = [
    0x50, 0x92, 0x9b, 0x74, 0xc1, 0xa0, 0x49, 0x54, 0xb7, 0x8b, 0x4b, 0x60, 0x35, 0xe9, 0x7a, 0x5e,
    0x07, 0x8a, 0x5a, 0x0f, 0x28, 0xec, 0x96, 0xd5, 0x47, 0xbf, 0xee, 0x9a, 0xce, 0x80, 0x3a, 0xc0,
];

/// A valid, non-identity curve point kept in compressed form.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Point([u8; 33]);

impl Point {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KeyError> {
        let affine = AffinePoint::from_sec1_bytes(bytes).map_err(|_| KeyError::InvalidPoint)?;
        Self::from_projective(ProjectivePoint::from(affine))
    }

    pub(crate) fn from_projective(p: ProjectivePoint) -> Result<Self, KeyError> {
        if bool::from(p.is_identity()) {
            return Err(KeyError::InvalidPoint);
        }
        let enc = p.to_affine().to_compressed_point();
        let mut out = [0u8; 33];
        out.copy_from_slice(enc.as_ref());
        Ok(Point(out))
    }

    pub(crate) fn to_projective(self) -> ProjectivePoint {
        let affine = AffinePoint::from_sec1_bytes(&self.0)
            .expect("Point holds a validated encoding");
        ProjectivePoint::from(affine)
    }

    pub fn to_bytes(&self) -> [u8; 33] {
        self.0
    }

    /// The 32-byte x coordinate.
    pub fn x_only(&self) -> [u8; 32] {
        let mut x = [0u8; 32];
        x.copy_from_slice(&self.0[1..]);
        x
    }

    /// Address of a plain single-key lock.
    pub fn key_address(&self) -> AddressId {
        AddressId(sha256(&[b"key", &self.0]))
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Point({})", hex::encode(&self.0[..5]))
    }
}

impl Serialize for Point {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&hex::encode(self.0))
    }
}

impl<'de> Deserialize<'de> for Point {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let bytes = hex::decode(s).map_err(serde::de::Error::custom)?;
        Point::from_bytes(&bytes).map_err(serde::de::Error::custom)
    }
}

/// The NUMS base point `H`.
pub fn nums_base() -> Point {
    let mut enc = [0u8; 33];
    enc[0] = 0x02;
    enc[1..].copy_from_slice(&NUMS_H_X);
    Point::from_bytes(&enc).expect("H is on the curve")
}

/// Reduces sha256(parts) mod n. A zero result is re-hashed with a counter
/// byte appended until it is not.
pub(crate) fn hash_to_scalar(parts: &[&[u8]]) -> Scalar {
    let first = reduce(sha256(parts));
    if !bool::from(first.is_zero()) {
        return first;
    }
    for counter in 0u8..=u8::MAX {
        let c = [counter];
        let mut owned: Vec<&[u8]> = parts.to_vec();
        owned.push(&c);
        let s = reduce(sha256(&owned));
        if !bool::from(s.is_zero()) {
            return s;
        }
    }
    unreachable!("256 consecutive zero scalars")
}

fn reduce(d: [u8; 32]) -> Scalar {
    let fb: FieldBytes = d.into();
    <Scalar as Reduce<FieldBytes>>::reduce(&fb)
}

fn scalar_bytes(s: &Scalar) -> [u8; 32] {
    s.to_bytes().into()
}

/// Which signature implementation a ledger or party uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SigScheme {
    /// Deterministic Schnorr-style signatures over secp256k1.
    #[default]
    Schnorr,
    /// Keyed hash of (public key, digest). Fast, not unforgeable; for
    /// property tests and large sweeps only.
    Mock,
}

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub enum Signature {
    /// Nonce point (compressed) followed by the response scalar.
    Schnorr([u8; 65]),
    Mock([u8; 32]),
}

impl Signature {
    pub fn to_bytes(&self) -> Vec<u8> {
        match self {
            Signature::Schnorr(b) => b.to_vec(),
            Signature::Mock(b) => b.to_vec(),
        }
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        match b.len() {
            65 => {
                let mut a = [0u8; 65];
                a.copy_from_slice(b);
                Some(Signature::Schnorr(a))
            }
            32 => {
                let mut a = [0u8; 32];
                a.copy_from_slice(b);
                Some(Signature::Mock(a))
            }
            _ => None,
        }
    }

    /// Flip one bit; used by tamper tests.
    pub fn corrupted(&self) -> Self {
        let mut b = self.to_bytes();
        let last = b.len() - 1;
        b[last] ^= 1;
        Signature::from_bytes(&b).expect("same length")
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.to_bytes();
        write!(f, "Sig({})", hex::encode(&b[b.len() - 4..]))
    }
}

impl Serialize for Signature {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        hex_bytes::serialize(&self.to_bytes(), s)
    }
}

impl<'de> Deserialize<'de> for Signature {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let b = hex_bytes::deserialize(d)?;
        Signature::from_bytes(&b).ok_or_else(|| serde::de::Error::custom("bad signature length"))
    }
}

/// A secret scalar with its public point.
#[derive(Clone)]
pub struct Keypair {
    secret: Scalar,
    public: Point,
}

impl fmt::Debug for Keypair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Keypair").field("public", &self.public).finish_non_exhaustive()
    }
}

impl PartialEq for Keypair {
    fn eq(&self, other: &Self) -> bool {
        self.public == other.public
    }
}

impl Keypair {
    pub fn from_secret_bytes(bytes: &[u8; 32]) -> Result<Self, KeyError> {
        let fb: FieldBytes = (*bytes).into();
        let s = Option::<Scalar>::from(Scalar::from_repr(fb)).ok_or(KeyError::InvalidScalar)?;
        if bool::from(s.is_zero()) {
            return Err(KeyError::InvalidScalar);
        }
        Ok(Self::from_scalar(s))
    }

    /// Deterministic keypair from arbitrary seed material.
    pub fn from_seed(seed: &[u8]) -> Self {
        Self::from_scalar(hash_to_scalar(&[b"bsa/keygen", seed]))
    }

    fn from_scalar(secret: Scalar) -> Self {
        let public = Point::from_projective(ProjectivePoint::GENERATOR * secret)
            .expect("nonzero scalar gives a non-identity point");
        Keypair { secret, public }
    }

    pub fn public(&self) -> Point {
        self.public
    }

    pub(crate) fn secret_bytes(&self) -> [u8; 32] {
        scalar_bytes(&self.secret)
    }

    pub fn sign(&self, scheme: SigScheme, digest: &[u8; 32]) -> Signature {
        match scheme {
            SigScheme::Mock => Signature::Mock(mock_sig(&self.public, digest)),
            SigScheme::Schnorr => {
                let sk = scalar_bytes(&self.secret);
                let k = hash_to_scalar(&[b"bsa/nonce", &sk, digest]);
                let r = Point::from_projective(ProjectivePoint::GENERATOR * k)
                    .expect("nonzero nonce");
                let e = challenge(&r, &self.public, digest);
                let s = k + e * self.secret;
                let mut out = [0u8; 65];
                out[..33].copy_from_slice(&r.0);
                out[33..].copy_from_slice(&scalar_bytes(&s));
                Signature::Schnorr(out)
            }
        }
    }
}

fn mock_sig(pk: &Point, digest: &[u8; 32]) -> [u8; 32] {
    sha256(&[b"bsa/mock-sig", &pk.0, digest])
}

fn challenge(r: &Point, pk: &Point, digest: &[u8; 32]) -> Scalar {
    hash_to_scalar(&[b"bsa/challenge", &r.0, &pk.0, digest])
}

pub fn verify(scheme: SigScheme, pk: &Point, digest: &[u8; 32], sig: &Signature) -> bool {
    match (scheme, sig) {
        (SigScheme::Mock, Signature::Mock(b)) => *b == mock_sig(pk, digest),
        (SigScheme::Schnorr, Signature::Schnorr(b)) => {
            let Ok(r) = Point::from_bytes(&b[..33]) else {
                return false;
            };
            let mut sb = [0u8; 32];
            sb.copy_from_slice(&b[33..]);
            let Some(s) = Option::<Scalar>::from(Scalar::from_repr(sb.into())) else {
                return false;
            };
            let e = challenge(&r, pk, digest);
            ProjectivePoint::GENERATOR * s == r.to_projective() + pk.to_projective() * e
        }
        _ => false,
    }
}

/// Everything that characterizes one protocol instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TweakData {
    pub depositor: Point,
    pub operator: Point,
    pub arbiters: Vec<Point>,
    pub t1: u32,
    pub t2: u32,
    #[serde(with = "hex_bytes")]
    pub destination_address: Vec<u8>,
    #[serde(with = "hex_bytes")]
    pub return_address: Vec<u8>,
}

impl TweakData {
    pub fn validate(&self) -> Result<(), KeyError> {
        if self.arbiters.is_empty() {
            return Err(KeyError::InvalidTweakData("at least one arbiter key required"));
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(KeyError::InvalidTweakData("T1 and T2 must be positive"));
        }
        Ok(())
    }

    /// Fixed field order; variable-length fields carry a u32 length prefix.
    pub fn serialize(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(120 + 33 * self.arbiters.len());
        out.extend_from_slice(&self.depositor.0);
        out.extend_from_slice(&self.operator.0);
        out.extend_from_slice(&(self.arbiters.len() as u32).to_be_bytes());
        for a in &self.arbiters {
            out.extend_from_slice(&a.0);
        }
        out.extend_from_slice(&self.t1.to_be_bytes());
        out.extend_from_slice(&self.t2.to_be_bytes());
        for field in [&self.destination_address, &self.return_address] {
            out.extend_from_slice(&(field.len() as u32).to_be_bytes());
            out.extend_from_slice(field);
        }
        out
    }

    pub fn digest(&self) -> Hash32 {
        Hash32(sha256(&[&self.serialize()]))
    }

    /// The return address read as a ledger address.
    pub fn return_address_id(&self) -> Result<AddressId, KeyError> {
        let b: [u8; 32] = self
            .return_address
            .as_slice()
            .try_into()
            .map_err(|_| KeyError::InvalidTweakData("return address must be 32 bytes"))?;
        Ok(AddressId(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AddressKind {
    #[serde(rename = "VA")]
    Vault,
    #[serde(rename = "UTA")]
    UnbondTimelock,
    #[serde(rename = "UCA")]
    UnbondChallenge,
    #[serde(rename = "RCA")]
    RebalanceChallenge,
}

impl AddressKind {
    pub const ALL: [AddressKind; 4] = [
        AddressKind::Vault,
        AddressKind::UnbondTimelock,
        AddressKind::UnbondChallenge,
        AddressKind::RebalanceChallenge,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AddressKind::Vault => "VA",
            AddressKind::UnbondTimelock => "UTA",
            AddressKind::UnbondChallenge => "UCA",
            AddressKind::RebalanceChallenge => "RCA",
        }
    }
}

impl fmt::Display for AddressKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

/// Spending condition of one script leaf.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum SpendPolicy {
    TwoOfTwo { a: Point, b: Point },
    SingleAfterDelay { key: Point, delay: u32 },
}

impl SpendPolicy {
    pub fn validate(&self) -> Result<(), KeyError> {
        match self {
            SpendPolicy::TwoOfTwo { a, b } if a == b => {
                Err(KeyError::InvalidPolicy("2-of-2 with identical keys"))
            }
            SpendPolicy::SingleAfterDelay { delay: 0, .. } => {
                Err(KeyError::InvalidPolicy("delay must be positive"))
            }
            _ => Ok(()),
        }
    }

    /// Keys whose signatures the witness must carry, in witness order.
    pub fn keys(&self) -> Vec<Point> {
        match self {
            SpendPolicy::TwoOfTwo { a, b } => vec![*a, *b],
            SpendPolicy::SingleAfterDelay { key, .. } => vec![*key],
        }
    }

    /// Relative timelock in blocks; zero when none.
    pub fn delay(&self) -> u32 {
        match self {
            SpendPolicy::TwoOfTwo { .. } => 0,
            SpendPolicy::SingleAfterDelay { delay, .. } => *delay,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(67);
        match self {
            SpendPolicy::TwoOfTwo { a, b } => {
                out.push(0x01);
                out.extend_from_slice(&a.0);
                out.extend_from_slice(&b.0);
            }
            SpendPolicy::SingleAfterDelay { key, delay } => {
                out.push(0x02);
                out.extend_from_slice(&key.0);
                out.extend_from_slice(&delay.to_be_bytes());
            }
        }
        out
    }

    pub fn leaf_digest(&self) -> Hash32 {
        Hash32(sha256(&[b"leaf", &self.encode()]))
    }
}

/// Merkle root over the leaf digests. Leaves are sorted first and each
/// branch hashes its children in sorted order, so the root does not depend
/// on leaf order. An odd node is carried up unchanged.
pub fn merkle_root(leaves: &[SpendPolicy]) -> Result<Hash32, KeyError> {
    if leaves.is_empty() {
        return Err(KeyError::EmptyScriptTree);
    }
    let mut level: Vec<[u8; 32]> = leaves.iter().map(|l| l.leaf_digest().0).collect();
    level.sort_unstable();
    while level.len() > 1 {
        level = level
            .chunks(2)
            .map(|pair| match pair {
                [a, b] => {
                    let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                    sha256(&[b"branch", lo, hi])
                }
                [a] => *a,
                _ => unreachable!(),
            })
            .collect();
    }
    Ok(Hash32(level[0]))
}

/// `Q = P + t·G` with `t = sha256(x(P) ‖ m) mod n`.
pub fn taproot_output_key(internal: &Point, leaves: &[SpendPolicy]) -> Result<(Hash32, Point), KeyError> {
    let m = merkle_root(leaves)?;
    let t = hash_to_scalar(&[&internal.x_only(), &m.0]);
    let q = Point::from_projective(internal.to_projective() + ProjectivePoint::GENERATOR * t)?;
    Ok((m, q))
}

/// `H + r·G` with `r = sha256(label ‖ serialize(tweak)) mod n`.
pub fn derive_nums_point(kind: AddressKind, tweak: &TweakData) -> Result<Point, KeyError> {
    let r = hash_to_scalar(&[kind.label().as_bytes(), &tweak.serialize()]);
    Point::from_projective(nums_base().to_projective() + ProjectivePoint::GENERATOR * r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolAddress {
    pub kind: AddressKind,
    pub internal_key: Point,
    pub leaves: Vec<SpendPolicy>,
    pub merkle_root: Hash32,
    pub output_key: Point,
    pub id: AddressId,
}

impl ProtocolAddress {
    fn build(kind: AddressKind, tweak: &TweakData, leaves: Vec<SpendPolicy>) -> Result<Self, KeyError> {
        for l in &leaves {
            l.validate()?;
        }
        let internal_key = derive_nums_point(kind, tweak)?;
        let (merkle_root, output_key) = taproot_output_key(&internal_key, &leaves)?;
        Ok(ProtocolAddress {
            kind,
            internal_key,
            leaves,
            merkle_root,
            output_key,
            id: AddressId(output_key.x_only()),
        })
    }

    /// True iff the stored root, output key and id follow from the other fields.
    pub fn is_consistent(&self) -> bool {
        match taproot_output_key(&self.internal_key, &self.leaves) {
            Ok((m, q)) => m == self.merkle_root && q == self.output_key && self.id.0 == q.x_only(),
            Err(_) => false,
        }
    }

    pub fn leaf(&self, index: u32) -> Option<&SpendPolicy> {
        self.leaves.get(index as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolAddresses {
    pub va: ProtocolAddress,
    pub uta: ProtocolAddress,
    pub uca: ProtocolAddress,
    pub rca: ProtocolAddress,
}

impl ProtocolAddresses {
    pub fn get(&self, kind: AddressKind) -> &ProtocolAddress {
        match kind {
            AddressKind::Vault => &self.va,
            AddressKind::UnbondTimelock => &self.uta,
            AddressKind::UnbondChallenge => &self.uca,
            AddressKind::RebalanceChallenge => &self.rca,
        }
    }

    pub fn all(&self) -> [&ProtocolAddress; 4] {
        [&self.va, &self.uta, &self.uca, &self.rca]
    }

    pub fn kind_of(&self, id: &AddressId) -> Option<AddressKind> {
        self.all().into_iter().find(|a| a.id == *id).map(|a| a.kind)
    }
}

/// Leaf policies of each address kind.
pub fn leaves_for(kind: AddressKind, tweak: &TweakData) -> Vec<SpendPolicy> {
    let dep = tweak.depositor;
    let to = tweak.operator;
    let arbiter_leaves = |delay: u32| {
        let mut v: Vec<SpendPolicy> =
            tweak.arbiters.iter().map(|ao| SpendPolicy::TwoOfTwo { a: dep, b: *ao }).collect();
        v.push(SpendPolicy::SingleAfterDelay { key: to, delay });
        v
    };
    match kind {
        AddressKind::Vault => vec![SpendPolicy::TwoOfTwo { a: dep, b: to }],
        AddressKind::UnbondTimelock => vec![
            SpendPolicy::TwoOfTwo { a: dep, b: to },
            SpendPolicy::SingleAfterDelay { key: dep, delay: tweak.t1 },
        ],
        AddressKind::UnbondChallenge | AddressKind::RebalanceChallenge => arbiter_leaves(tweak.t2),
    }
}

pub fn build_protocol_addresses(tweak: &TweakData) -> Result<ProtocolAddresses, KeyError> {
    tweak.validate()?;
    let mk = |kind| ProtocolAddress::build(kind, tweak, leaves_for(kind, tweak));
    Ok(ProtocolAddresses {
        va: mk(AddressKind::Vault)?,
        uta: mk(AddressKind::UnbondTimelock)?,
        uca: mk(AddressKind::UnbondChallenge)?,
        rca: mk(AddressKind::RebalanceChallenge)?,
    })
}
