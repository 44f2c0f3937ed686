//! Destination-chain registry contract: deposit records and statuses,
//! stored templates, the token ledger, perimeter adapters, imbalance
//! detection and rebalance selection, version expiries and delayed
//! parameter upgrades.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::chain::OutPoint;
use crate::digest::{map_as_pairs, sha256, AddressId, Hash32, Txid};
use crate::keys::{build_protocol_addresses, verify, Point, SigScheme, Signature, TweakData};
use crate::psbt::{destination_address, Psbt, Transition};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("caller is not the token operator")]
    NotTO,
    #[error("caller does not own this deposit")]
    NotOwner,
    #[error("no imbalance to rebalance")]
    NoImbalance,
    #[error("requested rebalance {requested} exceeds detected imbalance {detected}")]
    ExceedsImbalance { requested: u64, detected: u64 },
    #[error("outpoint {0} already registered")]
    DuplicateOutpoint(OutPoint),
    #[error("outpoint {0} not registered")]
    UnknownOutpoint(OutPoint),
    #[error("missing {0} template")]
    MissingPsbt(Transition),
    #[error("{0} template does not match the instance")]
    PsbtMismatch(Transition),
    #[error("transition {from:?} -> {to:?} not allowed for this caller")]
    UnauthorizedTransition { from: UtxoStatus, to: UtxoStatus },
    #[error("not a permutation of the depositor's active deposits")]
    NotAPermutation,
    #[error("signature does not verify against the operator key")]
    BadSignature,
    #[error("T3 must exceed T1 + T2")]
    TimelockRelationViolated,
    #[error("{holder} holds {have}, needs {need}")]
    InsufficientBalance { holder: Holder, have: u64, need: u64 },
    #[error("unknown adapter {0}")]
    UnknownAdapter(u32),
    #[error("unknown redemption {0}")]
    UnknownRedemption(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DepositorId(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum UtxoStatus {
    Registered,
    Active,
    Withdrawn,
    Rejected,
    SpentOnRebalance,
}

impl UtxoStatus {
    pub const ALL: [UtxoStatus; 5] = [
        UtxoStatus::Registered,
        UtxoStatus::Active,
        UtxoStatus::Withdrawn,
        UtxoStatus::Rejected,
        UtxoStatus::SpentOnRebalance,
    ];

    /// Statuses under which the depositor is owed the unbonded coins.
    pub fn favors_depositor_exit(self) -> bool {
        matches!(self, UtxoStatus::Withdrawn | UtxoStatus::Rejected)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Caller {
    Operator,
    Depositor(DepositorId),
}

/// A token account.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Holder {
    Depositor(DepositorId),
    Adapter(u32),
    Account(String),
}

impl fmt::Display for Holder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Holder::Depositor(d) => write!(f, "depositor-{}", d.0),
            Holder::Adapter(a) => write!(f, "adapter-{a}"),
            Holder::Account(s) => f.write_str(s),
        }
    }
}

/// Protocol timelocks. T1 and T2 are in blocks, T3 in slots.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Timelocks {
    pub t1: u32,
    pub t2: u32,
    pub t3: u64,
    pub slots_per_block: u64,
}

impl Timelocks {
    /// T1, T2 positive and T3 > T1 + T2 (compared in slots).
    pub fn validate(&self) -> Result<(), RegistryError> {
        if self.t1 == 0 || self.t2 == 0 || self.slots_per_block == 0 || self.t3 <= self.t1_t2_slots() {
            return Err(RegistryError::TimelockRelationViolated);
        }
        Ok(())
    }

    pub fn t1_t2_slots(&self) -> u64 {
        (self.t1 as u64 + self.t2 as u64) * self.slots_per_block
    }

    pub fn blocks_to_slots(&self, blocks: u64) -> u64 {
        blocks * self.slots_per_block
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UtxoRecord {
    pub outpoint: OutPoint,
    pub owner: DepositorId,
    pub amount: u64,
    pub status: UtxoStatus,
    pub tweak: TweakData,
    pub tweak_digest: Hash32,
    pub psbts: BTreeMap<Transition, Psbt>,
    /// Index in the depositor's rebalance order, once one is set.
    pub rebalance_position: Option<usize>,
    /// Registration order; split outputs extend their parent's key.
    pub order_key: Vec<u64>,
    pub registered_at: u64,
}

impl UtxoRecord {
    pub fn psbt(&self, t: Transition) -> Option<&Psbt> {
        self.psbts.get(&t)
    }
}

/// What the operator posts when registering a deposit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DepositRegistration {
    pub outpoint: OutPoint,
    pub owner: DepositorId,
    pub amount: u64,
    pub tweak: TweakData,
    pub psbts: Vec<Psbt>,
}

pub const REGISTRY_TRANSITIONS: [Transition; 3] =
    [Transition::UnbondRequest, Transition::UnbondResolve, Transition::RebalanceResolve];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Adapter {
    pub id: u32,
    pub positions: BTreeMap<DepositorId, u64>,
    pub registered_at: u64,
    pub removal_effective_at: Option<u64>,
}

impl Adapter {
    pub fn counts_at(&self, now: u64) -> bool {
        self.registered_at <= now && self.removal_effective_at.is_none_or(|r| now < r)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AdapterAction {
    Add(u32),
    Remove(u32),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenOp {
    Mint { to: Holder, amount: u64 },
    Burn { from: Holder, amount: u64 },
    Transfer { from: Holder, to: Holder, amount: u64 },
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenLedger {
    #[serde(with = "map_as_pairs")]
    balances: BTreeMap<Holder, u64>,
    minted: u64,
    burned: u64,
    #[serde(skip)]
    log: Vec<TokenOp>,
}

impl TokenLedger {
    pub fn balance(&self, h: &Holder) -> u64 {
        self.balances.get(h).copied().unwrap_or(0)
    }

    pub fn supply(&self) -> u64 {
        self.minted - self.burned
    }

    pub fn minted(&self) -> u64 {
        self.minted
    }

    pub fn burned(&self) -> u64 {
        self.burned
    }

    pub fn log(&self) -> &[TokenOp] {
        &self.log
    }

    pub fn sum_of_balances(&self) -> u64 {
        self.balances.values().sum()
    }

    fn mint(&mut self, to: Holder, amount: u64) {
        *self.balances.entry(to.clone()).or_default() += amount;
        self.minted += amount;
        self.log.push(TokenOp::Mint { to, amount });
    }

    fn debit(&mut self, from: &Holder, amount: u64) -> Result<(), RegistryError> {
        if amount == 0 {
            return Ok(());
        }
        let have = self.balance(from);
        if have < amount {
            return Err(RegistryError::InsufficientBalance { holder: from.clone(), have, need: amount });
        }
        let e = self.balances.get_mut(from).expect("nonzero balance present");
        *e -= amount;
        if *e == 0 {
            self.balances.remove(from);
        }
        Ok(())
    }

    fn burn(&mut self, from: Holder, amount: u64) -> Result<(), RegistryError> {
        self.debit(&from, amount)?;
        self.burned += amount;
        self.log.push(TokenOp::Burn { from, amount });
        Ok(())
    }

    fn transfer(&mut self, from: Holder, to: Holder, amount: u64) -> Result<(), RegistryError> {
        self.debit(&from, amount)?;
        *self.balances.entry(to.clone()).or_default() += amount;
        self.log.push(TokenOp::Transfer { from, to, amount });
        Ok(())
    }
}

/// Operator-signed expiry of an arbiter software version.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VersionRecord {
    pub pcr0: Hash32,
    pub expiry: u64,
    pub to_signature: Signature,
}

impl VersionRecord {
    pub fn message(pcr0: &Hash32, expiry: u64) -> [u8; 32] {
        sha256(&[b"version", &pcr0.0, &expiry.to_be_bytes()])
    }

    pub fn signed(pcr0: Hash32, expiry: u64, to: &crate::keys::Keypair, scheme: SigScheme) -> Self {
        VersionRecord { pcr0, expiry, to_signature: to.sign(scheme, &Self::message(&pcr0, expiry)) }
    }

    pub fn verifies(&self, to: &Point, scheme: SigScheme) -> bool {
        verify(scheme, to, &Self::message(&self.pcr0, self.expiry), &self.to_signature)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamChange {
    SetT3(u64),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PendingUpgrade {
    pub change: ParamChange,
    pub scheduled_at: u64,
    pub effective_at: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RebalanceEvent {
    pub depositor: DepositorId,
    pub delta: u64,
    pub selected: Vec<OutPoint>,
    pub selected_sum: u64,
    pub overseized: u64,
    pub slot: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Redemption {
    pub id: u64,
    pub holder: Holder,
    pub amount: u64,
    pub btc_address: AddressId,
    pub requested_at: u64,
    pub paid_by: Option<Txid>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegistryEvent {
    Registered(OutPoint),
    StatusChanged { outpoint: OutPoint, from: UtxoStatus, to: UtxoStatus, slot: u64 },
    Rebalance(RebalanceEvent),
    Replaced { old: OutPoint, new: Vec<OutPoint> },
    OrderSet { depositor: DepositorId, order: Vec<OutPoint> },
    Redeemed(u64),
    RedemptionPaid(u64),
    AdapterAdded(u32),
    AdapterRemovalScheduled { id: u32, effective_at: u64 },
    UpgradeScheduled(PendingUpgrade),
    VersionSet { pcr0: Hash32, expiry: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Registry {
    operator: Point,
    scheme: SigScheme,
    timelocks: Timelocks,
    #[serde(with = "map_as_pairs")]
    records: BTreeMap<OutPoint, UtxoRecord>,
    #[serde(with = "map_as_pairs")]
    retired: BTreeMap<OutPoint, UtxoRecord>,
    orders: BTreeMap<DepositorId, Vec<OutPoint>>,
    adapters: BTreeMap<u32, Adapter>,
    tokens: TokenLedger,
    overseizure_credit: BTreeMap<DepositorId, u64>,
    versions: BTreeMap<Hash32, VersionRecord>,
    upgrades: Vec<PendingUpgrade>,
    redemptions: Vec<Redemption>,
    next_seq: u64,
    #[serde(skip)]
    events: Vec<RegistryEvent>,
}

impl Registry {
    pub fn new(operator: Point, timelocks: Timelocks, scheme: SigScheme) -> Result<Self, RegistryError> {
        timelocks.validate()?;
        Ok(Registry {
            operator,
            scheme,
            timelocks,
            records: BTreeMap::new(),
            retired: BTreeMap::new(),
            orders: BTreeMap::new(),
            adapters: BTreeMap::new(),
            tokens: TokenLedger::default(),
            overseizure_credit: BTreeMap::new(),
            versions: BTreeMap::new(),
            upgrades: Vec::new(),
            redemptions: Vec::new(),
            next_seq: 0,
            events: Vec::new(),
        })
    }

    pub fn operator(&self) -> Point {
        self.operator
    }

    pub fn scheme(&self) -> SigScheme {
        self.scheme
    }

    fn require_operator(caller: Caller) -> Result<(), RegistryError> {
        match caller {
            Caller::Operator => Ok(()),
            _ => Err(RegistryError::NotTO),
        }
    }

    // ---- records ----

    pub fn record(&self, op: &OutPoint) -> Option<&UtxoRecord> {
        self.records.get(op)
    }

    pub fn records(&self) -> impl Iterator<Item = &UtxoRecord> {
        self.records.values()
    }

    pub fn retired(&self) -> impl Iterator<Item = &UtxoRecord> {
        self.retired.values()
    }

    /// A depositor's records in registration order.
    pub fn records_of(&self, dep: DepositorId) -> Vec<&UtxoRecord> {
        let mut v: Vec<_> = self.records.values().filter(|r| r.owner == dep).collect();
        v.sort_by(|a, b| a.order_key.cmp(&b.order_key));
        v
    }

    pub fn status(&self, op: &OutPoint) -> Option<UtxoStatus> {
        self.records.get(op).map(|r| r.status)
    }

    fn validate_registration(&self, reg: &DepositRegistration) -> Result<BTreeMap<Transition, Psbt>, RegistryError> {
        if self.records.contains_key(&reg.outpoint) || self.retired.contains_key(&reg.outpoint) {
            return Err(RegistryError::DuplicateOutpoint(reg.outpoint));
        }
        let mut psbts = BTreeMap::new();
        for p in &reg.psbts {
            psbts.insert(p.transition, p.clone());
        }
        for t in REGISTRY_TRANSITIONS {
            if !psbts.contains_key(&t) {
                return Err(RegistryError::MissingPsbt(t));
            }
        }
        let addrs = build_protocol_addresses(&reg.tweak).map_err(|_| RegistryError::PsbtMismatch(Transition::UnbondRequest))?;
        if reg.tweak.operator != self.operator {
            return Err(RegistryError::PsbtMismatch(Transition::UnbondRequest));
        }
        for (t, p) in &psbts {
            let expected = destination_address(*t, &addrs, &reg.tweak, None).ok().flatten();
            if !REGISTRY_TRANSITIONS.contains(t) || expected != Some(p.destination()) || !p.partial_sigs_valid(self.scheme) {
                return Err(RegistryError::PsbtMismatch(*t));
            }
        }
        let ur = &psbts[&Transition::UnbondRequest];
        if ur.input.outpoint != reg.outpoint || ur.input.value != reg.amount || ur.input.address != addrs.va.id {
            return Err(RegistryError::PsbtMismatch(Transition::UnbondRequest));
        }
        Ok(psbts)
    }

    fn insert_record(
        &mut self,
        reg: DepositRegistration,
        psbts: BTreeMap<Transition, Psbt>,
        status: UtxoStatus,
        order_key: Option<Vec<u64>>,
        now: u64,
    ) {
        let tweak_digest = reg.tweak.digest();
        let order_key = order_key.unwrap_or_else(|| {
            self.next_seq += 1;
            vec![self.next_seq - 1]
        });
        self.records.insert(
            reg.outpoint,
            UtxoRecord {
                outpoint: reg.outpoint,
                owner: reg.owner,
                amount: reg.amount,
                status,
                tweak: reg.tweak,
                tweak_digest,
                psbts,
                rebalance_position: None,
                order_key,
                registered_at: now,
            },
        );
        self.events.push(RegistryEvent::Registered(reg.outpoint));
    }

    pub fn register_deposit(&mut self, reg: DepositRegistration, caller: Caller, now: u64) -> Result<(), RegistryError> {
        Self::require_operator(caller)?;
        let psbts = self.validate_registration(&reg)?;
        self.insert_record(reg, psbts, UtxoStatus::Registered, None, now);
        Ok(())
    }

    /// Mints the deposit's amount to its owner and marks it Active.
    pub fn activate_on_mint(&mut self, op: &OutPoint, caller: Caller, now: u64) -> Result<(), RegistryError> {
        Self::require_operator(caller)?;
        let r = self.records.get(op).ok_or(RegistryError::UnknownOutpoint(*op))?;
        if r.status != UtxoStatus::Registered {
            return Err(RegistryError::UnauthorizedTransition { from: r.status, to: UtxoStatus::Active });
        }
        let (owner, amount) = (r.owner, r.amount);
        self.tokens.mint(Holder::Depositor(owner), amount);
        self.set_status_unchecked(op, UtxoStatus::Active, now);
        Ok(())
    }

    fn set_status_unchecked(&mut self, op: &OutPoint, to: UtxoStatus, now: u64) {
        let r = self.records.get_mut(op).expect("caller checked presence");
        let from = r.status;
        r.status = to;
        self.events.push(RegistryEvent::StatusChanged { outpoint: *op, from, to, slot: now });
    }

    /// Applies one edge of the status lifecycle:
    /// Registered→Active (operator, mints), Active→Withdrawn (owner, burns
    /// the full amount), Registered→Rejected (owner), Active→SpentOnRebalance
    /// (operator, only while an imbalance exists).
    pub fn set_utxo_status(&mut self, op: &OutPoint, to: UtxoStatus, caller: Caller, now: u64) -> Result<(), RegistryError> {
        let r = self.records.get(op).ok_or(RegistryError::UnknownOutpoint(*op))?;
        let from = r.status;
        let owner = r.owner;
        let amount = r.amount;
        let denied = RegistryError::UnauthorizedTransition { from, to };
        match (from, to, caller) {
            (UtxoStatus::Registered, UtxoStatus::Active, Caller::Operator) => self.activate_on_mint(op, caller, now),
            (UtxoStatus::Active, UtxoStatus::Withdrawn, Caller::Depositor(d)) if d == owner => {
                self.tokens.burn(Holder::Depositor(owner), amount)?;
                self.set_status_unchecked(op, to, now);
                Ok(())
            }
            (UtxoStatus::Registered, UtxoStatus::Rejected, Caller::Depositor(d)) if d == owner => {
                self.set_status_unchecked(op, to, now);
                Ok(())
            }
            (UtxoStatus::Active, UtxoStatus::SpentOnRebalance, Caller::Operator) => {
                let delta = self.detect_imbalance(owner, now);
                if delta == 0 {
                    return Err(denied);
                }
                let credit = self.overseizure_credit.entry(owner).or_default();
                *credit = (*credit + amount).saturating_sub(delta);
                self.set_status_unchecked(op, to, now);
                Ok(())
            }
            _ => Err(denied),
        }
    }

    /// Replaces an Active record by the outputs of a collaborative split.
    /// The new records take the old one's place in the rebalance order,
    /// first new record first.
    pub fn replace_deposit(
        &mut self,
        old: &OutPoint,
        new: Vec<DepositRegistration>,
        caller: Caller,
        now: u64,
    ) -> Result<(), RegistryError> {
        Self::require_operator(caller)?;
        let r = self.records.get(old).ok_or(RegistryError::UnknownOutpoint(*old))?;
        if r.status != UtxoStatus::Active {
            return Err(RegistryError::UnauthorizedTransition { from: r.status, to: UtxoStatus::Active });
        }
        let owner = r.owner;
        let mut validated = Vec::new();
        for reg in &new {
            if reg.owner != owner || reg.tweak != r.tweak {
                return Err(RegistryError::PsbtMismatch(Transition::UnbondRequest));
            }
            validated.push(self.validate_registration(reg)?);
        }
        let old_rec = self.records.remove(old).expect("present");
        let new_ops: Vec<OutPoint> = new.iter().map(|r| r.outpoint).collect();
        for (i, (reg, psbts)) in new.into_iter().zip(validated).enumerate() {
            let mut key = old_rec.order_key.clone();
            key.push(i as u64);
            self.insert_record(reg, psbts, UtxoStatus::Active, Some(key), now);
        }
        if let Some(order) = self.orders.get_mut(&owner) {
            if let Some(pos) = order.iter().position(|o| o == old) {
                order.splice(pos..=pos, new_ops.iter().copied());
            }
        }
        self.retired.insert(*old, old_rec);
        self.events.push(RegistryEvent::Replaced { old: *old, new: new_ops });
        Ok(())
    }

    // ---- tokens and adapters ----

    pub fn tokens(&self) -> &TokenLedger {
        &self.tokens
    }

    pub fn personal_balance(&self, dep: DepositorId) -> u64 {
        self.tokens.balance(&Holder::Depositor(dep))
    }

    pub fn transfer(&mut self, from: Holder, to: Holder, amount: u64) -> Result<(), RegistryError> {
        self.tokens.transfer(from, to, amount)
    }

    pub fn adapter_admin(&mut self, action: AdapterAction, caller: Caller, now: u64) -> Result<(), RegistryError> {
        Self::require_operator(caller)?;
        match action {
            AdapterAction::Add(id) => {
                self.adapters.insert(
                    id,
                    Adapter { id, positions: BTreeMap::new(), registered_at: now, removal_effective_at: None },
                );
                self.events.push(RegistryEvent::AdapterAdded(id));
            }
            AdapterAction::Remove(id) => {
                let t3 = self.timelocks_at(now).t3;
                let a = self.adapters.get_mut(&id).ok_or(RegistryError::UnknownAdapter(id))?;
                let effective_at = now + t3;
                a.removal_effective_at = Some(effective_at);
                self.events.push(RegistryEvent::AdapterRemovalScheduled { id, effective_at });
            }
        }
        Ok(())
    }

    pub fn adapters(&self) -> impl Iterator<Item = &Adapter> {
        self.adapters.values()
    }

    pub fn adapter(&self, id: u32) -> Option<&Adapter> {
        self.adapters.get(&id)
    }

    /// Moves tokens from the depositor into an adapter position.
    pub fn supply_to_adapter(&mut self, dep: DepositorId, adapter: u32, amount: u64) -> Result<(), RegistryError> {
        if !self.adapters.contains_key(&adapter) {
            return Err(RegistryError::UnknownAdapter(adapter));
        }
        self.tokens.transfer(Holder::Depositor(dep), Holder::Adapter(adapter), amount)?;
        *self.adapters.get_mut(&adapter).expect("checked").positions.entry(dep).or_default() += amount;
        Ok(())
    }

    pub fn withdraw_from_adapter(&mut self, dep: DepositorId, adapter: u32, amount: u64) -> Result<(), RegistryError> {
        self.reduce_position(dep, adapter, amount)?;
        self.tokens.transfer(Holder::Adapter(adapter), Holder::Depositor(dep), amount)
    }

    /// A lending position is liquidated: the tokens leave to `to`.
    pub fn liquidate(&mut self, dep: DepositorId, adapter: u32, amount: u64, to: Holder) -> Result<(), RegistryError> {
        self.reduce_position(dep, adapter, amount)?;
        self.tokens.transfer(Holder::Adapter(adapter), to, amount)
    }

    fn reduce_position(&mut self, dep: DepositorId, adapter: u32, amount: u64) -> Result<(), RegistryError> {
        let a = self.adapters.get_mut(&adapter).ok_or(RegistryError::UnknownAdapter(adapter))?;
        let pos = a.positions.entry(dep).or_default();
        if *pos < amount {
            return Err(RegistryError::InsufficientBalance { holder: Holder::Adapter(adapter), have: *pos, need: amount });
        }
        *pos -= amount;
        Ok(())
    }

    /// Sum of the depositor's positions in adapters counted at `now`.
    pub fn defi_balance(&self, dep: DepositorId, now: u64) -> u64 {
        self.adapters
            .values()
            .filter(|a| a.counts_at(now))
            .map(|a| a.positions.get(&dep).copied().unwrap_or(0))
            .sum()
    }

    /// Active deposits plus unclaimed over-seizure credit.
    pub fn deposited(&self, dep: DepositorId) -> u64 {
        let active: u64 =
            self.records.values().filter(|r| r.owner == dep && r.status == UtxoStatus::Active).map(|r| r.amount).sum();
        active + self.overseizure_credit(dep)
    }

    pub fn tracked_balance(&self, dep: DepositorId, now: u64) -> u64 {
        self.defi_balance(dep, now) + self.personal_balance(dep)
    }

    /// `max(0, D − B_total)`.
    pub fn detect_imbalance(&self, dep: DepositorId, now: u64) -> u64 {
        self.deposited(dep).saturating_sub(self.tracked_balance(dep, now))
    }

    pub fn overseizure_credit(&self, dep: DepositorId) -> u64 {
        self.overseizure_credit.get(&dep).copied().unwrap_or(0)
    }

    // ---- rebalancing ----

    /// Active deposits in the order they would be rebalanced.
    pub fn rebalance_order(&self, dep: DepositorId) -> Vec<OutPoint> {
        let active: Vec<OutPoint> = self
            .records_of(dep)
            .into_iter()
            .filter(|r| r.status == UtxoStatus::Active)
            .map(|r| r.outpoint)
            .collect();
        let Some(order) = self.orders.get(&dep) else { return active };
        let set: BTreeSet<_> = active.iter().copied().collect();
        let mut out: Vec<OutPoint> = order.iter().filter(|o| set.contains(o)).copied().collect();
        let placed: BTreeSet<_> = out.iter().copied().collect();
        out.extend(active.into_iter().filter(|o| !placed.contains(o)));
        out
    }

    /// Sets `L[j] = O[π(j)]` where `O` is the depositor's Active deposits in
    /// registration order.
    pub fn set_rebalance_order(&mut self, dep: DepositorId, perm: &[usize], caller: Caller) -> Result<Vec<OutPoint>, RegistryError> {
        match caller {
            Caller::Depositor(d) if d == dep => {}
            _ => return Err(RegistryError::NotOwner),
        }
        let base: Vec<OutPoint> = self
            .records_of(dep)
            .into_iter()
            .filter(|r| r.status == UtxoStatus::Active)
            .map(|r| r.outpoint)
            .collect();
        if perm.len() != base.len() {
            return Err(RegistryError::NotAPermutation);
        }
        let mut seen = vec![false; perm.len()];
        for &p in perm {
            if p >= perm.len() || std::mem::replace(&mut seen[p], true) {
                return Err(RegistryError::NotAPermutation);
            }
        }
        let order: Vec<OutPoint> = perm.iter().map(|&p| base[p]).collect();
        for (j, op) in order.iter().enumerate() {
            self.records.get_mut(op).expect("active record").rebalance_position = Some(j);
        }
        self.orders.insert(dep, order.clone());
        self.events.push(RegistryEvent::OrderSet { depositor: dep, order: order.clone() });
        Ok(order)
    }

    /// Marks the shortest prefix of the rebalance order covering `delta` as
    /// SpentOnRebalance and records any over-seizure as depositor credit.
    pub fn mark_rebalance(&mut self, dep: DepositorId, delta: u64, caller: Caller, now: u64) -> Result<RebalanceEvent, RegistryError> {
        Self::require_operator(caller)?;
        let detected = self.detect_imbalance(dep, now);
        if delta == 0 || detected == 0 {
            return Err(RegistryError::NoImbalance);
        }
        if delta > detected {
            return Err(RegistryError::ExceedsImbalance { requested: delta, detected });
        }
        let order = self.rebalance_order(dep);
        let amounts: Vec<u64> = order.iter().map(|o| self.records[o].amount).collect();
        let n = select_prefix(&amounts, delta);
        let selected: Vec<OutPoint> = order[..n].to_vec();
        let selected_sum: u64 = amounts[..n].iter().sum();
        let overseized = selected_sum.saturating_sub(delta);
        let credit = self.overseizure_credit.entry(dep).or_default();
        *credit = (*credit + selected_sum).saturating_sub(delta);
        for op in &selected {
            self.set_status_unchecked(op, UtxoStatus::SpentOnRebalance, now);
        }
        let ev = RebalanceEvent { depositor: dep, delta, selected, selected_sum, overseized, slot: now };
        self.events.push(RegistryEvent::Rebalance(ev.clone()));
        Ok(ev)
    }

    /// Burns tokens and queues a native payout by the operator.
    pub fn redeem(&mut self, holder: Holder, amount: u64, btc_address: AddressId, now: u64) -> Result<u64, RegistryError> {
        self.tokens.burn(holder.clone(), amount)?;
        let id = self.redemptions.len() as u64;
        self.redemptions.push(Redemption { id, holder, amount, btc_address, requested_at: now, paid_by: None });
        self.events.push(RegistryEvent::Redeemed(id));
        Ok(id)
    }

    /// Redeems the depositor's whole over-seizure credit.
    pub fn claim_overseizure(&mut self, dep: DepositorId, btc_address: AddressId, caller: Caller, now: u64) -> Result<Option<u64>, RegistryError> {
        match caller {
            Caller::Depositor(d) if d == dep => {}
            _ => return Err(RegistryError::NotOwner),
        }
        let credit = self.overseizure_credit(dep);
        if credit == 0 {
            return Ok(None);
        }
        let id = self.redeem(Holder::Depositor(dep), credit, btc_address, now)?;
        self.overseizure_credit.remove(&dep);
        Ok(Some(id))
    }

    pub fn mark_redemption_paid(&mut self, id: u64, txid: Txid, caller: Caller) -> Result<(), RegistryError> {
        Self::require_operator(caller)?;
        let r = self.redemptions.get_mut(id as usize).ok_or(RegistryError::UnknownRedemption(id))?;
        r.paid_by = Some(txid);
        self.events.push(RegistryEvent::RedemptionPaid(id));
        Ok(())
    }

    pub fn redemptions(&self) -> &[Redemption] {
        &self.redemptions
    }

    // ---- versions and upgrades ----

    pub fn set_version_expiry(&mut self, record: VersionRecord) -> Result<(), RegistryError> {
        if !record.verifies(&self.operator, self.scheme) {
            return Err(RegistryError::BadSignature);
        }
        self.events.push(RegistryEvent::VersionSet { pcr0: record.pcr0, expiry: record.expiry });
        self.versions.insert(record.pcr0, record);
        Ok(())
    }

    pub fn get_version_expiry(&self, pcr0: &Hash32) -> Option<u64> {
        self.versions.get(pcr0).map(|v| v.expiry)
    }

    pub fn version_record(&self, pcr0: &Hash32) -> Option<&VersionRecord> {
        self.versions.get(pcr0)
    }

    /// Queues `change`, effective one T3 after `now`.
    pub fn schedule_upgrade(&mut self, change: ParamChange, caller: Caller, now: u64) -> Result<u64, RegistryError> {
        Self::require_operator(caller)?;
        let current = self.timelocks_at(now);
        let ParamChange::SetT3(t3) = change;
        Timelocks { t3, ..current }.validate()?;
        let up = PendingUpgrade { change, scheduled_at: now, effective_at: now + current.t3 };
        self.events.push(RegistryEvent::UpgradeScheduled(up.clone()));
        self.upgrades.push(up);
        Ok(now + current.t3)
    }

    /// Parameters in force at slot `now`.
    pub fn timelocks_at(&self, now: u64) -> Timelocks {
        let mut t = self.timelocks;
        for u in self.upgrades.iter().filter(|u| u.effective_at <= now) {
            match u.change {
                ParamChange::SetT3(v) => t.t3 = v,
            }
        }
        t
    }

    pub fn pending_upgrades(&self) -> &[PendingUpgrade] {
        &self.upgrades
    }

    // ---- export ----

    pub fn events(&self) -> &[RegistryEvent] {
        &self.events
    }

    /// Compact JSON of the full contract state (events excluded).
    pub fn canonical_text(&self) -> String {
        serde_json::to_string(self).expect("registry serializes")
    }

    pub fn from_canonical_text(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn digest(&self) -> Hash32 {
        Hash32(sha256(&[self.canonical_text().as_bytes()]))
    }
}

/// Length of the shortest prefix of `amounts` whose sum reaches `delta`;
/// all of them if none does.
pub fn select_prefix(amounts: &[u64], delta: u64) -> usize {
    let mut sum = 0u64;
    for (i, a) in amounts.iter().enumerate() {
        sum += a;
        if sum >= delta {
            return i + 1;
        }
    }
    amounts.len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefix_selection_examples() {
        assert_eq!(select_prefix(&[3, 2, 5], 4), 2);
        assert_eq!(select_prefix(&[5, 1], 5), 1);
        assert_eq!(select_prefix(&[1, 1], 5), 2);
        assert_eq!(select_prefix(&[], 5), 0);
    }

    #[test]
    fn timelock_relation() {
        let ok = Timelocks { t1: 10, t2: 10, t3: 1001, slots_per_block: 50 };
        assert!(ok.validate().is_ok());
        assert_eq!(Timelocks { t3: 1000, ..ok }.validate(), Err(RegistryError::TimelockRelationViolated));
        assert!(Timelocks { t1: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn adapter_window() {
        let a = Adapter { id: 1, positions: BTreeMap::new(), registered_at: 5, removal_effective_at: Some(9) };
        assert!(!a.counts_at(4));
        assert!(a.counts_at(5));
        assert!(a.counts_at(8));
        assert!(!a.counts_at(9));
    }
}
