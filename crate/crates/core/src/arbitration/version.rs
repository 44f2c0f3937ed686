//! Whether an arbiter should deploy a published software version.

use serde::{Deserialize, Serialize};

use crate::keys::{Point, SigScheme};
use crate::registry::VersionRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VersionRejection {
    BadSignature,
    /// Fewer than T3 slots remain before expiry.
    TooCloseToExpiry,
    /// An upgrade must expire later than the running version.
    NotLater,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VersionDecision {
    Deploy,
    Reject(VersionRejection),
}

/// `current` is the running version's record, `None` on first deployment.
pub fn evaluate_version(
    current: Option<&VersionRecord>,
    candidate: &VersionRecord,
    t3: u64,
    now: u64,
    operator: &Point,
    scheme: SigScheme,
) -> VersionDecision {
    if !candidate.verifies(operator, scheme) {
        return VersionDecision::Reject(VersionRejection::BadSignature);
    }
    match current {
        None if candidate.expiry.saturating_sub(now) <= t3 => VersionDecision::Reject(VersionRejection::TooCloseToExpiry),
        Some(cur) if candidate.expiry <= cur.expiry => VersionDecision::Reject(VersionRejection::NotLater),
        _ => VersionDecision::Deploy,
    }
}
