//! Scenario runner: builds a world from a config, drives the actors, and
//! judges the outcome from what ended up on chain.

mod availability;
mod liquidation;
mod matrix;
mod sweep;
mod verdict;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use availability::{
    availability_simulation, check_depositor_exit_window, compute_availability, exit_window, online_ticks,
    window_condition_holds, worst_case_challenge, AvailabilityParams, AvailabilityReport, DisputeWindow, ExitWindow,
};
pub use liquidation::{liquidation_flow, LiquidationReport, LiquidationSetup, EXIT_AT, LIQUIDATE_AT, REDEEM_AT};
pub use matrix::{failure_matrix, failure_matrix_with, probe_config, published_matrix, MatrixRow, ProbeResult, Verdict};
pub use sweep::{random_adversarial_scenario, trust_sweep, SweepCase, SweepOutcome};
pub use verdict::{judge, CoinFate, Side};

use crate::actors::{
    ArbiterActor, DepositorActor, DepositorBehavior, Downtime, EnvEvent, OperatorActor, OperatorBehavior,
    RebalanceModel, Simulation, TraceEntry, World,
};
use crate::arbitration::{ArbitrationOracle, AttestationAuthority, EnclaveImage, MockKms};
use crate::chain::{BtcChain, CheckpointSigner, DestChain, FeeSchedule, Ledgers};
use crate::digest::Hash32;
use crate::keys::{Keypair, SigScheme};
use crate::psbt::{run_setup_ceremony, CeremonyError, CeremonyHooks, CeremonyParties, FeePolicy};
use crate::registry::{AdapterAction, Caller, DepositorId, Registry, Timelocks, VersionRecord};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid scenario: {0}")]
    ConfigInvalid(String),
    #[error("invalid availability parameters: {0}")]
    InvalidParams(String),
    #[error("setup failed: {0}")]
    Setup(String),
    #[error(transparent)]
    Parse(#[from] toml::de::Error),
}

impl From<CeremonyError> for HarnessError {
    fn from(e: CeremonyError) -> Self {
        HarnessError::Setup(e.to_string())
    }
}

/// Downtime long enough to cover any scenario.
pub const FOREVER: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DepositorConfig {
    pub behavior: DepositorBehavior,
    pub cooperates_on_resplit: bool,
}

impl Default for DepositorConfig {
    fn default() -> Self {
        DepositorConfig { behavior: DepositorBehavior::Honest, cooperates_on_resplit: true }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorConfig {
    pub behavior: OperatorBehavior,
    pub attack_at: Option<u64>,
    pub model: RebalanceModel,
    /// Native coins in the operator reserve at the start.
    pub reserve: u64,
}

impl Default for OperatorConfig {
    fn default() -> Self {
        OperatorConfig { behavior: OperatorBehavior::Honest, attack_at: None, model: RebalanceModel::UtxoBased, reserve: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArbiterConfig {
    pub downtime: Downtime,
    pub key_leaked: bool,
    pub tee_failure: bool,
    pub t_op: u64,
}

impl Default for ArbiterConfig {
    fn default() -> Self {
        ArbiterConfig { downtime: Downtime::always_online(), key_leaked: false, tee_failure: false, t_op: 1 }
    }
}

impl ArbiterConfig {
    pub fn offline() -> Self {
        ArbiterConfig { downtime: Downtime(vec![(0, FOREVER)]), ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduledEvent {
    pub at: u64,
    #[serde(flatten)]
    pub event: EnvEvent,
}

/// Everything a run depends on. Ticks count blocks after setup.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub scheme: SigScheme,
    /// Blocks.
    pub t1: u32,
    /// Blocks.
    pub t2: u32,
    /// Slots.
    pub t3: u64,
    pub slots_per_block: u64,
    pub finality_interval: u64,
    pub wsp_default: u64,
    pub wsp_current: u64,
    pub base_feerate: u64,
    pub anchor_value: u64,
    /// `(from_height, feerate)` steps; empty means a flat base feerate.
    pub fee_steps: Vec<(u64, u64)>,
    /// Confirmation slack, in blocks, added to every deadline.
    pub margin: u64,
    /// Operator execution delay in blocks: a redemption against an empty
    /// reserve is paid within T2 + omega.
    pub omega: u64,
    /// Run length in slots; defaults to 4·T3.
    pub horizon: Option<u64>,
    pub amounts: Vec<u64>,
    pub adapters: Vec<u32>,
    /// Expiry slot of the arbiter software version.
    pub version_expiry: Option<u64>,
    pub depositor: DepositorConfig,
    pub operator: OperatorConfig,
    #[serde(rename = "arbiter")]
    pub arbiters: Vec<ArbiterConfig>,
    #[serde(rename = "event")]
    pub events: Vec<ScheduledEvent>,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            name: "default".into(),
            seed: 1,
            scheme: SigScheme::Schnorr,
            t1: 10,
            t2: 10,
            t3: 1500,
            slots_per_block: 50,
            finality_interval: 32,
            wsp_default: 2000,
            wsp_current: 4000,
            base_feerate: 1,
            anchor_value: 330,
            fee_steps: Vec::new(),
            margin: 6,
            omega: 2,
            horizon: None,
            amounts: vec![300_000, 200_000],
            adapters: vec![1],
            version_expiry: None,
            depositor: DepositorConfig::default(),
            operator: OperatorConfig::default(),
            arbiters: vec![ArbiterConfig::default()],
            events: Vec::new(),
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        let cfg: ScenarioConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn timelocks(&self) -> Timelocks {
        Timelocks { t1: self.t1, t2: self.t2, t3: self.t3, slots_per_block: self.slots_per_block }
    }

    pub fn horizon_blocks(&self) -> u64 {
        self.horizon.unwrap_or(4 * self.t3) / self.slots_per_block.max(1)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |m: &str| Err(HarnessError::ConfigInvalid(m.into()));
        if self.timelocks().validate().is_err() {
            return bad("timelocks must be positive with T3 > T1 + T2");
        }
        if self.finality_interval == 0 || self.wsp_default == 0 || self.wsp_current == 0 {
            return bad("finality interval and weak subjectivity periods must be positive");
        }
        if self.arbiters.is_empty() {
            return bad("at least one arbiter is required");
        }
        if self.arbiters.iter().any(|a| a.t_op == 0) {
            return bad("t_op must be positive");
        }
        if self.amounts.is_empty() || self.amounts.iter().any(|a| *a < 10 * self.anchor_value) {
            return bad("every deposit must be well above the anchor value");
        }
        if self.base_feerate == 0 {
            return bad("base feerate must be positive");
        }
        Ok(())
    }

    pub fn with_event(mut self, at: u64, event: EnvEvent) -> Self {
        self.events.push(ScheduledEvent { at, event });
        self
    }

    fn tagged(&self, tag: &str) -> Vec<u8> {
        format!("{}/{tag}", self.seed).into_bytes()
    }
}

/// Fixed keys of one scenario.
struct Keys {
    depositor: Keypair,
    operator: Keypair,
    reserve: Keypair,
    liquidator: Keypair,
}

const WALLET_OUTPUTS: u64 = 8;
const WALLET_VALUE: u64 = 20_000;

/// Runs setup and returns a simulation ready for its first tick.
pub fn build_simulation(cfg: &ScenarioConfig) -> Result<Simulation, HarnessError> {
    cfg.validate()?;
    let scheme = cfg.scheme;
    let keys = Keys {
        depositor: Keypair::from_seed(&cfg.tagged("depositor")),
        operator: Keypair::from_seed(&cfg.tagged("operator")),
        reserve: Keypair::from_seed(&cfg.tagged("reserve")),
        liquidator: Keypair::from_seed(&cfg.tagged("liquidator")),
    };
    let tl = cfg.timelocks();
    let mut registry =
        Registry::new(keys.operator.public(), tl, scheme).map_err(|e| HarnessError::ConfigInvalid(e.to_string()))?;
    for id in &cfg.adapters {
        registry
            .adapter_admin(AdapterAction::Add(*id), Caller::Operator, 0)
            .map_err(|e| HarnessError::Setup(e.to_string()))?;
    }
    let image = EnclaveImage::new("arbiter", "default", "consortium");
    let horizon_slots = cfg.horizon_blocks() * cfg.slots_per_block;
    let expiry = cfg.version_expiry.unwrap_or(horizon_slots + 10 * cfg.t3);
    registry
        .set_version_expiry(VersionRecord::signed(image.pcr0(), expiry, &keys.operator, scheme))
        .map_err(|e| HarnessError::Setup(e.to_string()))?;

    let fees = if cfg.fee_steps.is_empty() { FeeSchedule::flat(cfg.base_feerate) } else { FeeSchedule::steps(cfg.fee_steps.clone()) };
    let dest = DestChain::new(registry, cfg.finality_interval, cfg.wsp_current, scheme);
    let mut ledgers = Ledgers::new(BtcChain::new(scheme, fees), dest, cfg.slots_per_block);
    for k in [&keys.depositor, &keys.operator, &keys.reserve, &keys.liquidator] {
        ledgers.btc.register_key(k.public());
    }
    let dep_addr = keys.depositor.public().key_address();
    let total: u64 = cfg.amounts.iter().sum();
    let funding_op = ledgers.btc.credit(dep_addr, total + WALLET_VALUE);
    for _ in 0..WALLET_OUTPUTS {
        ledgers.btc.credit(dep_addr, WALLET_VALUE);
        ledgers.btc.credit(keys.operator.public().key_address(), WALLET_VALUE);
    }
    if cfg.operator.reserve > 0 {
        ledgers.btc.credit(keys.reserve.public().key_address(), cfg.operator.reserve);
    }
    ledgers.step();

    let authority = AttestationAuthority::new(&cfg.tagged("authority"), scheme);
    let mut kms = MockKms::new(authority.root(), scheme, &cfg.tagged("kms"));
    let setup_cp = ledgers
        .dest
        .latest_checkpoint()
        .ok_or_else(|| HarnessError::Setup("no finalized checkpoint".into()))?
        .endorse(CheckpointSigner::TokenOperator, &keys.operator, scheme);
    let mut arbiters = Vec::with_capacity(cfg.arbiters.len());
    let mut attestations = Vec::with_capacity(cfg.arbiters.len());
    for (i, ac) in cfg.arbiters.iter().enumerate() {
        let mut oracle = ArbitrationOracle::new(i, image.clone(), &cfg.tagged(&format!("nsm{i}")), cfg.wsp_default, scheme);
        oracle
            .come_online(ledgers.slot(), Some(&setup_cp), &keys.operator.public(), &authority, cfg.wsp_current)
            .map_err(|e| HarnessError::Setup(e.to_string()))?;
        let artifacts = oracle
            .key_init(&mut kms, &authority, &cfg.tagged(&format!("entropy{i}")))
            .map_err(|e| HarnessError::Setup(e.to_string()))?;
        attestations.push(artifacts.attestation.clone());
        let fee_key = Keypair::from_seed(&cfg.tagged(&format!("ao-fee{i}")));
        ledgers.btc.register_key(fee_key.public());
        for _ in 0..WALLET_OUTPUTS {
            ledgers.btc.credit(fee_key.public().key_address(), WALLET_VALUE);
        }
        let mut actor = ArbiterActor::new(oracle, fee_key, ac.downtime.clone());
        actor.artifacts = Some(artifacts);
        actor.t_op = ac.t_op;
        arbiters.push(actor);
    }

    let funding = ledgers.btc.utxo(&funding_op).cloned().ok_or_else(|| HarnessError::Setup("funding output missing".into()))?;
    let parties = CeremonyParties {
        depositor: &keys.depositor,
        depositor_id: DepositorId(1),
        operator: &keys.operator,
        arbiters: &attestations,
        attestation_root: authority.root(),
        t1: cfg.t1,
        t2: cfg.t2,
        destination_address: b"dest:depositor".to_vec(),
        funding: vec![funding],
        amounts: cfg.amounts.clone(),
        policy: FeePolicy { base_feerate: cfg.base_feerate, anchor_value: cfg.anchor_value },
    };
    let report = run_setup_ceremony(&mut ledgers, &parties, CeremonyHooks::default())?;

    let mut depositor = DepositorActor::new(DepositorId(1), keys.depositor.clone(), cfg.depositor.behavior.clone());
    depositor.cooperates_on_resplit = cfg.depositor.cooperates_on_resplit;
    for (a, ac) in arbiters.iter_mut().zip(&cfg.arbiters) {
        a.oracle.follow(&ledgers.dest, &authority);
        if ac.key_leaked {
            depositor.leaked_arbiter_key = a.oracle.leak_key();
        }
        if ac.tee_failure {
            a.oracle.compromise_tee();
        }
    }
    let mut operator =
        OperatorActor::new(keys.operator.clone(), keys.reserve.clone(), cfg.operator.behavior.clone(), cfg.operator.model);
    operator.attack_at = cfg.operator.attack_at;
    let world = World {
        setup_height: ledgers.height(),
        ledgers,
        instance: report.instance,
        authority,
        kms,
        liquidator_address: keys.liquidator.public().key_address(),
        setup_log: report.log,
        trace: Vec::new(),
    };
    Ok(Simulation { world, depositor, operator, arbiters })
}

/// Advances `sim` through the configured horizon, firing scheduled events.
pub fn drive(sim: &mut Simulation, cfg: &ScenarioConfig) {
    let mut events: BTreeMap<u64, Vec<EnvEvent>> = BTreeMap::new();
    for e in &cfg.events {
        events.entry(e.at).or_default().push(e.event.clone());
    }
    while sim.world.tick() < cfg.horizon_blocks() {
        let next = sim.world.tick() + 1;
        let due = events.remove(&next).unwrap_or_default();
        sim.step(&due);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EndBalances {
    pub depositor_btc: u64,
    pub reserve_btc: u64,
    pub operator_wallet_btc: u64,
    pub liquidator_btc: u64,
    pub token_supply: u64,
    pub depositor_tokens: u64,
    pub imbalance: u64,
    pub overseizure_credit: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RedemptionTiming {
    pub id: u64,
    pub amount: u64,
    pub requested_height: u64,
    pub paid_height: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GuaranteeReport {
    pub name: String,
    pub dep_safe: bool,
    pub to_safe: bool,
    pub protocol_safe: bool,
    /// Why a guarantee failed, one line per violation.
    pub witnesses: Vec<String>,
    pub fates: Vec<CoinFate>,
    pub balances: EndBalances,
    pub redemptions: Vec<RedemptionTiming>,
    pub exit_height: Option<u64>,
    pub final_height: u64,
    pub trace: Vec<TraceEntry>,
    pub trace_digest: Hash32,
}

impl GuaranteeReport {
    /// Verdicts, balances and digest as compact JSON.
    pub fn canonical_text(&self) -> String {
        #[derive(Serialize)]
        struct Canon<'a> {
            name: &'a str,
            dep_safe: bool,
            to_safe: bool,
            protocol_safe: bool,
            balances: &'a EndBalances,
            trace_digest: Hash32,
        }
        serde_json::to_string(&Canon {
            name: &self.name,
            dep_safe: self.dep_safe,
            to_safe: self.to_safe,
            protocol_safe: self.protocol_safe,
            balances: &self.balances,
            trace_digest: self.trace_digest,
        })
        .expect("report serializes")
    }

    pub fn table(&self) -> String {
        let yn = |b: bool| if b { "Yes" } else { "No" };
        let mut s = String::new();
        let _ = writeln!(s, "scenario        {}", self.name);
        let _ = writeln!(s, "depositor safe  {}", yn(self.dep_safe));
        let _ = writeln!(s, "operator safe   {}", yn(self.to_safe));
        let _ = writeln!(s, "protocol safe   {}", yn(self.protocol_safe));
        for f in &self.fates {
            let _ = writeln!(s, "  {}", f.describe());
        }
        for w in &self.witnesses {
            let _ = writeln!(s, "  ! {w}");
        }
        let b = &self.balances;
        let _ = writeln!(
            s,
            "balances        dep {} / reserve {} / liquidator {} / supply {} / imbalance {}",
            b.depositor_btc, b.reserve_btc, b.liquidator_btc, b.token_supply, b.imbalance
        );
        let _ = writeln!(s, "trace digest    {}", self.trace_digest);
        s
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<GuaranteeReport, HarnessError> {
    let mut sim = build_simulation(cfg)?;
    drive(&mut sim, cfg);
    Ok(report(&sim, cfg))
}

pub fn report(sim: &Simulation, cfg: &ScenarioConfig) -> GuaranteeReport {
    let w = &sim.world;
    let chain = w.chain();
    let reg = w.registry();
    let dep = w.instance.depositor_id;
    let (dep_safe, to_safe, fates, witnesses) = judge(sim, cfg);
    let balances = EndBalances {
        depositor_btc: chain.balance(&sim.depositor.keypair.public().key_address()),
        reserve_btc: chain.balance(&sim.operator.reserve.public().key_address()),
        operator_wallet_btc: chain.balance(&sim.operator.keypair.public().key_address()),
        liquidator_btc: chain.balance(&w.liquidator_address),
        token_supply: reg.tokens().supply(),
        depositor_tokens: reg.personal_balance(dep),
        imbalance: reg.detect_imbalance(dep, w.slot()),
        overseizure_credit: reg.overseizure_credit(dep),
    };
    let spb = cfg.slots_per_block;
    let redemptions = reg
        .redemptions()
        .iter()
        .map(|r| RedemptionTiming {
            id: r.id,
            amount: r.amount,
            requested_height: r.requested_at / spb,
            paid_height: r.paid_by.and_then(|t| w.confirmed_height(&t)),
        })
        .collect();
    GuaranteeReport {
        name: cfg.name.clone(),
        dep_safe,
        to_safe,
        protocol_safe: dep_safe && to_safe,
        witnesses,
        fates,
        balances,
        redemptions,
        exit_height: sim.depositor.exit_requested_at().map(|t| w.setup_height + t),
        final_height: w.ledgers.height(),
        trace: w.trace.clone(),
        trace_digest: w.trace_digest(),
    }
}
