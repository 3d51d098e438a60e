//! Logical-clock cost model: per-batch and per-epoch compute and LAN time for
//! a client's split discriminator, and the slowest-client bottleneck.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::splitplan::{AssignmentPlan, DeviceProfile, PortionSpec};

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingConfig {
    /// Seconds per inter-device transfer on the client's LAN.
    pub lan_latency: f64,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    /// Seconds per work unit per sample; calibration constant.
    pub unit_time: f64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig {
            lan_latency: 0.050,
            batches_per_epoch: 24,
            batch_size: 256,
            unit_time: 1e-9,
        }
    }
}

/// Per-client epoch timing row.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientTiming {
    pub client_id: usize,
    pub compute_time: f64,
    pub lan_time: f64,
    pub total_time: f64,
}

/// Epoch timing for all eligible clients plus the system bottleneck.
#[derive(Debug, Clone)]
pub struct TimingLedger {
    pub clients: Vec<ClientTiming>,
    pub slowest_client_id: usize,
    pub bottleneck_time: f64,
}

/// Compute + LAN time for one batch through a split plan.
///
/// Each cut is charged twice per batch: once for the forward activation
/// transfer and once for the backward gradient transfer.
pub fn batch_time(
    plan: &AssignmentPlan,
    portions: &[PortionSpec],
    devices: &[DeviceProfile],
    cfg: &TimingConfig,
) -> Result<f64> {
    if plan.assignments.len() != portions.len() {
        return Err(Error::InvalidPlan(format!(
            "plan covers {} portions, expected {}",
            plan.assignments.len(),
            portions.len()
        )));
    }
    let by_id: HashMap<usize, &DeviceProfile> =
        devices.iter().map(|d| (d.device_id, d)).collect();
    let mut compute = 0.0;
    for (portion_id, device_id) in &plan.assignments {
        let portion = portions
            .get(*portion_id)
            .filter(|p| p.portion_id == *portion_id)
            .ok_or_else(|| Error::InvalidPlan(format!("unknown portion {portion_id}")))?;
        let device = by_id
            .get(device_id)
            .ok_or_else(|| Error::InvalidPlan(format!("unknown device {device_id}")))?;
        compute += portion.work * cfg.batch_size as f64 * device.time_factor * cfg.unit_time;
    }
    let lan = 2.0 * plan.cut_count as f64 * cfg.lan_latency;
    Ok(compute + lan)
}

/// Per-epoch time: `batches_per_epoch` sequential batches.
pub fn epoch_time(
    plan: &AssignmentPlan,
    portions: &[PortionSpec],
    devices: &[DeviceProfile],
    cfg: &TimingConfig,
) -> Result<f64> {
    Ok(cfg.batches_per_epoch as f64 * batch_time(plan, portions, devices, cfg)?)
}

/// Split one epoch's batch cost into (compute, lan) components.
pub fn epoch_components(
    plan: &AssignmentPlan,
    portions: &[PortionSpec],
    devices: &[DeviceProfile],
    cfg: &TimingConfig,
) -> Result<(f64, f64)> {
    let lan_per_batch = 2.0 * plan.cut_count as f64 * cfg.lan_latency;
    let total_per_batch = batch_time(plan, portions, devices, cfg)?;
    let b = cfg.batches_per_epoch as f64;
    Ok((b * (total_per_batch - lan_per_batch), b * lan_per_batch))
}

/// The slowest eligible client: argmax total time, ties to lower client_id.
pub fn bottleneck(clients: &[ClientTiming]) -> Result<(usize, f64)> {
    let mut best: Option<&ClientTiming> = None;
    for c in clients {
        best = match best {
            None => Some(c),
            Some(b) if c.total_time > b.total_time => Some(c),
            Some(b) if c.total_time == b.total_time && c.client_id < b.client_id => Some(c),
            Some(b) => Some(b),
        };
    }
    best.map(|c| (c.client_id, c.total_time))
        .ok_or_else(|| Error::NoEligibleClients("bottleneck over empty ledger".into()))
}

/// Build the full ledger for one epoch from per-client plans.
pub fn build_ledger(
    entries: &[(usize, &AssignmentPlan, &[PortionSpec], &[DeviceProfile])],
    cfg: &TimingConfig,
) -> Result<TimingLedger> {
    let mut clients = Vec::with_capacity(entries.len());
    for (client_id, plan, portions, devices) in entries {
        let (compute_time, lan_time) = epoch_components(plan, portions, devices, cfg)?;
        clients.push(ClientTiming {
            client_id: *client_id,
            compute_time,
            lan_time,
            total_time: compute_time + lan_time,
        });
    }
    let (slowest_client_id, bottleneck_time) = bottleneck(&clients)?;
    Ok(TimingLedger {
        clients,
        slowest_client_id,
        bottleneck_time,
    })
}

/// CSV rows `epoch,client_id,compute_s,lan_s,total_s,is_bottleneck`.
pub fn ledger_csv_rows(epoch: usize, ledger: &TimingLedger) -> String {
    let mut out = String::new();
    for c in &ledger.clients {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            epoch,
            c.client_id,
            c.compute_time,
            c.lan_time,
            c.total_time,
            (c.client_id == ledger.slowest_client_id) as u8
        ));
    }
    out
}
