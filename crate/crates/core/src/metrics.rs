//! Objective evaluation, constraint audit and the QoS-gated averaging used
//! for Monte Carlo results.

use serde::{Deserialize, Serialize};

use crate::model::{epoch_capacity, epoch_weighted_capacity, EpochAlloc, Policy, SystemConfig};
use crate::scenario::Timeline;

pub const DEFAULT_AUDIT_TOL: f64 = 1e-6;

pub fn weighted_capacity(pol: &Policy, tl: &Timeline, cfg: &SystemConfig) -> f64 {
    tl.epochs.iter().zip(pol).map(|(e, a)| epoch_weighted_capacity(e, a, cfg)).sum()
}

pub fn capacity(pol: &Policy, tl: &Timeline, cfg: &SystemConfig) -> f64 {
    tl.epochs.iter().zip(pol).map(|(e, a)| epoch_capacity(e, a, cfg)).sum()
}

/// Weighted power of one allocation: harvested watts count `phi`, non-renewable watts count 1.
pub fn weighted_power(a: &EpochAlloc, cfg: &SystemConfig) -> f64 {
    cfg.phi * a.pc_e + a.pc_n + cfg.pa_ineff * (cfg.phi * a.radiated_harvest() + a.radiated_nonrenew())
}

pub fn weighted_energy(pol: &Policy, tl: &Timeline, cfg: &SystemConfig) -> f64 {
    tl.epochs.iter().zip(pol).map(|(e, a)| e.length * weighted_power(a, cfg)).sum()
}

pub fn energy_efficiency(pol: &Policy, tl: &Timeline, cfg: &SystemConfig) -> f64 {
    let u = weighted_capacity(pol, tl, cfg);
    let utp = weighted_energy(pol, tl, cfg);
    if utp > 0.0 {
        u / utp
    } else {
        0.0
    }
}

/// Total harvested and non-renewable energy drawn, in J.
pub fn energy_by_source(pol: &Policy, tl: &Timeline, cfg: &SystemConfig) -> (f64, f64) {
    tl.epochs.iter().zip(pol).fold((0.0, 0.0), |(h, n), (e, a)| {
        (h + e.length * a.harvest_draw(cfg.pa_ineff), n + e.length * a.nonrenew_draw(cfg.pa_ineff))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// Cumulative harvested use never exceeds cumulative arrivals.
    Causality,
    /// Stored energy at each arrival stays within the battery capacity.
    Overflow,
    /// Non-renewable draw within its cap.
    NonrenewCap,
    /// Circuit power fully covered by the two sources.
    CircuitBalance,
    /// Minimum delivered bits over the horizon.
    MinRate,
    /// Total radiated power within its cap.
    RadiatedCap,
    /// Time-sharing factors inside [0, 1].
    ShareBox,
    /// Time-sharing factors of one subcarrier sum to at most 1.
    ShareSum,
    /// All power entries non-negative.
    NonNegative,
    /// No power on an unused subcarrier.
    IdleZero,
}

impl Constraint {
    pub const ALL: [Constraint; 10] = [
        Constraint::Causality,
        Constraint::Overflow,
        Constraint::NonrenewCap,
        Constraint::CircuitBalance,
        Constraint::MinRate,
        Constraint::RadiatedCap,
        Constraint::ShareBox,
        Constraint::ShareSum,
        Constraint::NonNegative,
        Constraint::IdleZero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Constraint::Causality => "causality",
            Constraint::Overflow => "overflow",
            Constraint::NonrenewCap => "nonrenew_cap",
            Constraint::CircuitBalance => "circuit_balance",
            Constraint::MinRate => "min_rate",
            Constraint::RadiatedCap => "radiated_cap",
            Constraint::ShareBox => "share_box",
            Constraint::ShareSum => "share_sum",
            Constraint::NonNegative => "non_negative",
            Constraint::IdleZero => "idle_zero",
        }
    }
}

/// Worst signed slack of one constraint family; negative means violated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSlack {
    pub constraint: Constraint,
    pub min_slack: f64,
    /// Epoch attaining the minimum, if the constraint is per epoch.
    pub epoch: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditReport {
    pub slacks: Vec<ConstraintSlack>,
    pub tol: f64,
}

impl AuditReport {
    pub fn slack(&self, c: Constraint) -> f64 {
        self.slacks.iter().find(|s| s.constraint == c).map_or(f64::INFINITY, |s| s.min_slack)
    }

    pub fn max_violation(&self) -> f64 {
        self.slacks.iter().map(|s| (-s.min_slack).max(0.0)).fold(0.0, f64::max)
    }

    /// Largest violation ignoring the minimum-rate requirement, which the
    /// QoS gate handles separately.
    pub fn max_violation_except_rate(&self) -> f64 {
        self.slacks
            .iter()
            .filter(|s| s.constraint != Constraint::MinRate)
            .map(|s| (-s.min_slack).max(0.0))
            .fold(0.0, f64::max)
    }

    pub fn violated(&self) -> Vec<Constraint> {
        self.slacks.iter().filter(|s| s.min_slack < -self.tol).map(|s| s.constraint).collect()
    }

    pub fn passes(&self) -> bool {
        self.max_violation() <= self.tol
    }

    pub fn rate_ok(&self) -> bool {
        self.slack(Constraint::MinRate) >= -self.tol
    }

    pub fn to_csv(&self) -> crate::Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["constraint", "min_slack", "epoch", "violated"])?;
        for s in &self.slacks {
            w.write_record([
                s.constraint.name().to_string(),
                format!("{:e}", s.min_slack),
                s.epoch.map_or(String::new(), |e| e.to_string()),
                (s.min_slack < -self.tol).to_string(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }
}

struct Tracker(Vec<ConstraintSlack>);

impl Tracker {
    fn see(&mut self, c: Constraint, slack: f64, epoch: Option<usize>) {
        let slot = &mut self.0[c as usize];
        if slack < slot.min_slack || slot.min_slack.is_nan() {
            slot.min_slack = slack;
            slot.epoch = epoch;
        }
    }
}

/// Audits a policy against every constraint of the offline problem.
pub fn audit_constraints(pol: &Policy, tl: &Timeline, cfg: &SystemConfig) -> AuditReport {
    let inflow: Vec<f64> = tl.epochs.iter().map(|e| e.energy_in).collect();
    audit_with_inflow(pol, tl, cfg, &inflow, DEFAULT_AUDIT_TOL)
}

/// Same audit with explicit per-epoch battery inflow, for runs where part
/// of an arrival was discarded because the battery was full.
pub fn audit_with_inflow(
    pol: &Policy,
    tl: &Timeline,
    cfg: &SystemConfig,
    inflow: &[f64],
    tol: f64,
) -> AuditReport {
    let mut tr = Tracker(
        Constraint::ALL
            .iter()
            .map(|&c| ConstraintSlack { constraint: c, min_slack: f64::INFINITY, epoch: None })
            .collect(),
    );
    let eps = cfg.pa_ineff;
    let k_n = cfg.n_users;
    let mut arrived = tl.e_initial_j;
    let mut used = 0.0;
    for (j, (e, a)) in tl.epochs.iter().zip(pol).enumerate() {
        let before = arrived;
        arrived += inflow[j];
        if j > 0 {
            // A single arrival larger than the battery spills whatever was
            // drawn before it; only the avoidable part counts.
            tr.see(Constraint::Overflow, used - (arrived - cfg.e_max_j).min(before), Some(j));
        }
        used += e.length * a.harvest_draw(eps);
        tr.see(Constraint::Causality, arrived - used, Some(j));
        tr.see(Constraint::NonrenewCap, cfg.p_nonrenew_w - eps * a.radiated_nonrenew() - a.pc_n, Some(j));
        tr.see(Constraint::CircuitBalance, -(a.pc_e + a.pc_n - cfg.circuit_power_w).abs(), Some(j));
        tr.see(Constraint::RadiatedCap, cfg.p_max_w - a.radiated(), Some(j));
        let mut min_entry = a.pc_e.min(a.pc_n);
        for i in 0..cfg.n_subcarriers {
            let row = i * k_n..(i + 1) * k_n;
            tr.see(Constraint::ShareSum, 1.0 - a.s[row.clone()].iter().sum::<f64>(), Some(j));
            for idx in row {
                let s = a.s[idx];
                tr.see(Constraint::ShareBox, s.min(1.0 - s), Some(j));
                min_entry = min_entry.min(a.p_e[idx]).min(a.p_n[idx]);
                if s <= 0.0 {
                    tr.see(Constraint::IdleZero, -(a.p_e[idx].abs() + a.p_n[idx].abs()), Some(j));
                }
            }
        }
        tr.see(Constraint::NonNegative, min_entry, Some(j));
    }
    tr.see(Constraint::MinRate, capacity(pol, tl, cfg) - cfg.r_min_bits, None);
    for s in &mut tr.0 {
        if s.min_slack == f64::INFINITY {
            // Constraint family had no instance (e.g. overflow with one epoch).
            s.min_slack = 0.0;
        }
    }
    AuditReport { slacks: tr.0, tol }
}

/// Result of one solver on one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialOutcome {
    pub ee: f64,
    pub capacity: f64,
    pub qos_ok: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatedStats {
    pub n: usize,
    pub mean_ee: f64,
    pub se_ee: f64,
    pub mean_capacity: f64,
    pub se_capacity: f64,
    /// Fraction of trials meeting the rate requirement.
    pub pass_rate: f64,
}

/// Mean and standard error of `xs` (sample variance with n-1).
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Averages outcomes with failed-QoS trials counted as zero EE and zero capacity.
pub fn qos_gate(outcomes: &[TrialOutcome]) -> GatedStats {
    let ee: Vec<f64> = outcomes.iter().map(|o| if o.qos_ok { o.ee } else { 0.0 }).collect();
    let cap: Vec<f64> = outcomes.iter().map(|o| if o.qos_ok { o.capacity } else { 0.0 }).collect();
    let (mean_ee, se_ee) = mean_se(&ee);
    let (mean_capacity, se_capacity) = mean_se(&cap);
    let passed = outcomes.iter().filter(|o| o.qos_ok).count();
    GatedStats {
        n: outcomes.len(),
        mean_ee,
        se_ee,
        mean_capacity,
        se_capacity,
        pass_rate: if outcomes.is_empty() { 0.0 } else { passed as f64 / outcomes.len() as f64 },
    }
}
