//! A lending position is liquidated, the liquidator redeems, and the
//! depositor later exits.

use serde::{Deserialize, Serialize};

use super::{build_simulation, drive, report, GuaranteeReport, HarnessError, ScenarioConfig};
use crate::actors::{EnvEvent, RebalanceModel};
use crate::registry::{Holder, RegistryEvent};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LiquidationSetup {
    pub amounts: Vec<u64>,
    pub supplied: u64,
    pub liquidated: u64,
    /// Tokens the depositor buys back from the liquidator in the same tick.
    pub buyback: u64,
    pub redeemed: u64,
    pub model: RebalanceModel,
    pub reserve: u64,
    pub exit: bool,
}

impl Default for LiquidationSetup {
    fn default() -> Self {
        LiquidationSetup {
            amounts: vec![100_000, 150_000, 200_000],
            supplied: 300_000,
            liquidated: 120_000,
            buyback: 0,
            redeemed: 120_000,
            model: RebalanceModel::UtxoBased,
            reserve: 0,
            exit: true,
        }
    }
}

pub const LIQUIDATE_AT: u64 = 3;
pub const REDEEM_AT: u64 = 4;
pub const EXIT_AT: u64 = 6;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LiquidationReport {
    /// Deltas of every rebalance the registry recorded.
    pub rebalance_deltas: Vec<u64>,
    pub overseized: u64,
    /// Blocks from the liquidator's redemption request to payment.
    pub redemption_latency: Option<u64>,
    /// Over-seizure paid back to the depositor.
    pub credit_returned: u64,
    pub report: GuaranteeReport,
}

pub fn liquidation_flow(setup: &LiquidationSetup, base: &ScenarioConfig) -> Result<LiquidationReport, HarnessError> {
    let mut cfg = ScenarioConfig { amounts: setup.amounts.clone(), ..base.clone() };
    cfg.name = format!("liquidation {}", cfg.name);
    cfg.operator.model = setup.model;
    cfg.operator.reserve = setup.reserve;
    cfg = cfg
        .with_event(LIQUIDATE_AT, EnvEvent::Supply { adapter: 1, amount: setup.supplied })
        .with_event(LIQUIDATE_AT, EnvEvent::Liquidate { adapter: 1, amount: setup.liquidated });
    if setup.buyback > 0 {
        cfg = cfg.with_event(LIQUIDATE_AT, EnvEvent::Buyback { amount: setup.buyback });
    }
    if setup.redeemed > 0 {
        cfg = cfg.with_event(REDEEM_AT, EnvEvent::Redeem { amount: setup.redeemed });
    }
    if setup.exit {
        cfg = cfg.with_event(EXIT_AT, EnvEvent::Exit);
    }
    let mut sim = build_simulation(&cfg)?;
    drive(&mut sim, &cfg);
    let report = report(&sim, &cfg);
    let reg = sim.world.registry();
    let mut rebalance_deltas = Vec::new();
    let mut overseized = 0;
    for e in reg.events() {
        if let RegistryEvent::Rebalance(r) = e {
            rebalance_deltas.push(r.delta);
            overseized += r.overseized;
        }
    }
    let dep = Holder::Depositor(sim.depositor.id);
    let redemption_latency = report
        .redemptions
        .iter()
        .zip(reg.redemptions())
        .find(|(_, r)| r.holder != dep)
        .and_then(|(t, _)| t.paid_height.map(|p| p - t.requested_height));
    let credit_returned = reg
        .redemptions()
        .iter()
        .filter(|r| r.holder == dep && r.paid_by.is_some())
        .map(|r| r.amount)
        .sum();
    Ok(LiquidationReport { rebalance_deltas, overseized, redemption_latency, credit_returned, report })
}
