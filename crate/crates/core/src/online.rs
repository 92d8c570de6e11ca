//! Causal online solver. Each event triggers a fresh Dinkelbach solve of a
//! single-epoch problem that plans over the mean epoch length with whatever
//! the battery holds right now; the plan is then billed for the true epoch
//! length and the battery ledger is updated.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::metrics::{self, DEFAULT_AUDIT_TOL};
use crate::model::{epoch_capacity, Epoch, EpochAlloc, Policy, SystemConfig};
use crate::offline::{self, InnerSolveSettings, SolveReport};
use crate::scenario::Timeline;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OnlineSettings {
    /// Planning length of every epoch, s.
    pub avg_epoch_len_s: f64,
    /// Expected number of events over the horizon; the per-epoch bit target
    /// is the horizon target divided by this.
    pub z: usize,
    pub inner: InnerSolveSettings,
}

impl OnlineSettings {
    pub fn new(avg_epoch_len_s: f64, horizon_s: f64, inner: InnerSolveSettings) -> Result<Self> {
        if !(avg_epoch_len_s > 0.0 && avg_epoch_len_s.is_finite()) {
            return Err(invalid("average epoch length must be positive"));
        }
        let z = (horizon_s / avg_epoch_len_s + 1.0).floor() as usize;
        Ok(Self { avg_epoch_len_s, z: z.max(1), inner })
    }

    pub fn from_config(cfg: &SystemConfig, inner: InnerSolveSettings) -> Result<Self> {
        Self::new(cfg.avg_epoch_len(), cfg.horizon_s, inner)
    }

    pub fn rate_target(&self, cfg: &SystemConfig) -> f64 {
        cfg.r_min_bits / self.z as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub epoch: usize,
    pub inflow_j: f64,
    pub transmit_draw_j: f64,
    pub circuit_draw_j: f64,
    pub overflow_j: f64,
}

/// Battery state as seen by the base station. Arrivals land at the start of
/// an epoch; whatever does not fit is discarded on the spot.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatteryLedger {
    pub level: f64,
    pub e_max: f64,
    pub history: Vec<LedgerEntry>,
}

impl BatteryLedger {
    pub fn new(level: f64, e_max: f64) -> Self {
        Self { level: level.clamp(0.0, e_max), e_max, history: Vec::new() }
    }

    /// Energy usable in an epoch whose arrival is `inflow`.
    pub fn available(&self, inflow: f64) -> f64 {
        (self.level + inflow).min(self.e_max)
    }

    /// Books one epoch. Draws beyond the available energy are an error.
    pub fn update(&mut self, epoch: usize, inflow: f64, transmit: f64, circuit: f64) -> Result<()> {
        let gross = self.level + inflow;
        let overflow = (gross - self.e_max).max(0.0);
        let avail = gross - overflow;
        let draw = transmit + circuit;
        if !(transmit >= 0.0 && circuit >= 0.0) || draw > avail + 1e-9 * (1.0 + avail) {
            return Err(invalid(format!("epoch {epoch} draws {draw} J with {avail} J available")));
        }
        self.level = (avail - draw).clamp(0.0, self.e_max);
        self.history.push(LedgerEntry {
            epoch,
            inflow_j: inflow,
            transmit_draw_j: transmit,
            circuit_draw_j: circuit,
            overflow_j: overflow,
        });
        Ok(())
    }

    /// Arrivals actually stored in each booked epoch.
    pub fn effective_inflow(&self) -> Vec<f64> {
        self.history.iter().map(|h| h.inflow_j - h.overflow_j).collect()
    }
}

/// Multipliers of the single-epoch problem in the printed closed forms,
/// where the battery multiplier enters the harvested price without the PA
/// factor.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EpochMultipliers {
    pub gamma: f64,
    pub mu: f64,
    pub psi: f64,
    pub rho: f64,
}

/// Per-epoch powers of one subcarrier-user pair: `(harvested, non-renewable)`.
pub fn epoch_power_alloc(
    k: usize,
    mult: &EpochMultipliers,
    q: f64,
    gamma: f64,
    cfg: &SystemConfig,
    floor: f64,
) -> (f64, f64) {
    let eps = cfg.pa_ineff;
    let c_e = q * cfg.phi * eps + mult.psi + mult.gamma;
    let c_n = q * eps + mult.mu * eps + mult.psi;
    let weight = cfg.subcarrier_bw() * (cfg.alpha[k] + mult.rho);
    offline::water_levels(weight, gamma, c_e, c_n, floor)
}

/// Circuit split from the battery budget left after harvested PA power.
pub fn epoch_circuit_split(budget: f64, radiated_harvest: f64, cfg: &SystemConfig, plan_len: f64) -> (f64, f64) {
    let pc = cfg.circuit_power_w;
    let pce = ((budget - plan_len * cfg.pa_ineff * radiated_harvest) / plan_len).clamp(0.0, pc);
    (pce, pc - pce)
}

/// Step sizes of the per-epoch multiplier update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochSteps {
    pub gamma: f64,
    pub mu: f64,
    pub psi: f64,
    pub rho: f64,
}

impl EpochSteps {
    /// `c / sqrt(iter + 1)` with each step normalized by its constraint's
    /// natural magnitude.
    pub fn diminishing(c: f64, iter: usize, cfg: &SystemConfig, st: &OnlineSettings) -> Self {
        let d = c / ((iter + 1) as f64).sqrt();
        let l = st.avg_epoch_len_s;
        Self {
            gamma: d / cfg.e_max_j.max(f64::MIN_POSITIVE),
            mu: d / (l * cfg.p_nonrenew_w),
            psi: d / (l * cfg.p_max_w),
            rho: d / st.rate_target(cfg).max(1.0),
        }
    }
}

/// Projected subgradient step on the single-epoch constraints, all in joules
/// or bits over the planning length. The share-sum multiplier is not needed.
pub fn epoch_multiplier_update(
    mult: &EpochMultipliers,
    alloc: &EpochAlloc,
    epoch: &Epoch,
    budget: f64,
    cfg: &SystemConfig,
    st: &OnlineSettings,
    step: &EpochSteps,
) -> EpochMultipliers {
    let l = st.avg_epoch_len_s;
    let eps = cfg.pa_ineff;
    let battery = budget - l * (eps * alloc.radiated_harvest() + alloc.pc_e);
    let supply = l * (cfg.p_nonrenew_w - eps * alloc.radiated_nonrenew() - alloc.pc_n);
    let rate = l / epoch.length * epoch_capacity(epoch, alloc, cfg) - st.rate_target(cfg);
    let radiated = l * (cfg.p_max_w - alloc.radiated());
    EpochMultipliers {
        gamma: (mult.gamma - step.gamma * battery).max(0.0),
        mu: (mult.mu - step.mu * supply).max(0.0),
        psi: (mult.psi - step.psi * radiated).max(0.0),
        rho: (mult.rho - step.rho * rate).max(0.0),
    }
}

/// What the base station knows when an event fires.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochObservation {
    pub cnr: Vec<f64>,
    pub energy_in: f64,
}

/// Plan for one epoch, computed over the mean epoch length.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochDecision {
    pub alloc: EpochAlloc,
    /// Stored energy the plan was allowed to use, J.
    pub budget_j: f64,
    /// Dinkelbach iterates of this epoch.
    pub q_history: Vec<f64>,
    /// The local bit target could not be met at full power.
    pub flagged: bool,
    pub multipliers: EpochMultipliers,
    pub ops: u64,
}

impl EpochDecision {
    pub fn q(&self) -> f64 {
        self.q_history.last().copied().unwrap_or(0.0)
    }
}

/// Solves the single-epoch fractional problem for channel `cnr` and battery
/// budget `budget`. An unreachable bit target leaves the EE-optimal point.
pub fn epoch_solve(cnr: &[f64], budget: f64, cfg: &SystemConfig, st: &OnlineSettings) -> Result<EpochDecision> {
    if cnr.len() != cfg.n_pairs() {
        return Err(invalid("channel dimensions do not match the configuration"));
    }
    if !(budget >= 0.0 && budget.is_finite()) {
        return Err(invalid(format!("bad battery budget {budget}")));
    }
    let l = st.avg_epoch_len_s;
    let epoch = Epoch { index: 0, start: 0.0, length: l, cnr: cnr.to_vec(), energy_in: 0.0 };
    let tl = Timeline::from_epochs(vec![epoch], budget)?;
    let mut sub = cfg.clone();
    sub.r_min_bits = st.rate_target(cfg);
    sub.e_max_j = cfg.e_max_j.max(budget);
    sub.e_initial_j = budget;
    let (pol, rep, state, m) = offline::dinkelbach_full(&tl, &sub, &st.inner);
    let flagged = sub.r_min_bits > 0.0 && !rep.audit.rate_ok();
    let multipliers = EpochMultipliers { gamma: cfg.pa_ineff * m.gamma[0], mu: m.mu[0], psi: m.psi[0], rho: m.rho };
    Ok(EpochDecision {
        alloc: pol.into_iter().next().expect("one epoch"),
        budget_j: budget,
        q_history: state.history.iter().map(|h| h.q).collect(),
        flagged,
        multipliers,
        ops: rep.ops,
    })
}

/// Bills a plan for the true epoch length. Harvested draw beyond what the
/// battery holds moves to the non-renewable supply, and radiated
/// non-renewable power is cut if that supply would be exceeded.
pub fn realize(plan: &EpochAlloc, length: f64, available: f64, cfg: &SystemConfig) -> EpochAlloc {
    let eps = cfg.pa_ineff;
    let mut a = plan.clone();
    let draw = length * a.harvest_draw(eps);
    if draw > available {
        let f = (available / draw).clamp(0.0, 1.0);
        for (pe, pn) in a.p_e.iter_mut().zip(a.p_n.iter_mut()) {
            *pn += (1.0 - f) * *pe;
            *pe *= f;
        }
        a.pc_n += (1.0 - f) * a.pc_e;
        a.pc_e *= f;
    }
    let pn_total = a.radiated_nonrenew();
    if eps * pn_total + a.pc_n > cfg.p_nonrenew_w && pn_total > 0.0 {
        let f = ((cfg.p_nonrenew_w - a.pc_n) / (eps * pn_total)).clamp(0.0, 1.0);
        a.p_n.iter_mut().for_each(|p| *p *= f);
    }
    a
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionLogRow {
    pub epoch: usize,
    pub length_s: f64,
    /// Battery energy available when the epoch started.
    pub battery_j: f64,
    pub q_epoch: f64,
    pub rate_bps: f64,
    pub harvest_j: f64,
    pub nonrenew_j: f64,
    pub overflow_j: f64,
    pub flagged: bool,
}

pub fn decision_log_csv(rows: &[DecisionLogRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

/// Event-driven controller. It only ever sees the current observation and
/// its own ledger, so decisions cannot depend on future epochs.
pub struct OnlineController<'a> {
    cfg: &'a SystemConfig,
    st: &'a OnlineSettings,
    ledger: BatteryLedger,
    pending: Option<(EpochObservation, EpochDecision)>,
    epoch: usize,
    pub decisions: Vec<EpochDecision>,
    pub log: Vec<DecisionLogRow>,
}

impl<'a> OnlineController<'a> {
    pub fn new(cfg: &'a SystemConfig, st: &'a OnlineSettings, e_initial_j: f64) -> Self {
        Self {
            cfg,
            st,
            ledger: BatteryLedger::new(e_initial_j, cfg.e_max_j),
            pending: None,
            epoch: 0,
            decisions: Vec::new(),
            log: Vec::new(),
        }
    }

    pub fn ledger(&self) -> &BatteryLedger {
        &self.ledger
    }

    /// Plans the epoch that just started.
    pub fn decide(&mut self, obs: EpochObservation) -> Result<&EpochDecision> {
        if self.pending.is_some() {
            return Err(invalid("previous epoch was not settled"));
        }
        let budget = self.ledger.available(obs.energy_in);
        let d = epoch_solve(&obs.cnr, budget, self.cfg, self.st)?;
        self.pending = Some((obs, d));
        Ok(&self.pending.as_ref().expect("just set").1)
    }

    /// Closes the current epoch once its true length is known and returns
    /// the allocation that was actually run.
    pub fn settle(&mut self, length: f64) -> Result<EpochAlloc> {
        let (obs, d) = self.pending.take().ok_or_else(|| invalid("no epoch to settle"))?;
        let cfg = self.cfg;
        let available = self.ledger.available(obs.energy_in);
        let a = realize(&d.alloc, length, available, cfg);
        let eps = cfg.pa_ineff;
        let transmit = length * eps * a.radiated_harvest();
        let circuit = length * a.pc_e;
        self.ledger.update(self.epoch, obs.energy_in, transmit, circuit)?;
        let epoch = Epoch { index: self.epoch, start: 0.0, length, cnr: obs.cnr, energy_in: obs.energy_in };
        self.log.push(DecisionLogRow {
            epoch: self.epoch,
            length_s: length,
            battery_j: available,
            q_epoch: d.q(),
            rate_bps: epoch_capacity(&epoch, &a, cfg) / length,
            harvest_j: transmit + circuit,
            nonrenew_j: length * a.nonrenew_draw(eps),
            overflow_j: self.ledger.history.last().map_or(0.0, |h| h.overflow_j),
            flagged: d.flagged,
        });
        self.decisions.push(d);
        self.epoch += 1;
        Ok(a)
    }
}

/// Full online run with the per-epoch log.
#[derive(Debug, Clone)]
pub struct OnlineRun {
    pub policy: Policy,
    pub report: SolveReport,
    pub ledger: BatteryLedger,
    pub log: Vec<DecisionLogRow>,
    /// Dinkelbach iterates of every epoch.
    pub epoch_q: Vec<Vec<f64>>,
}

pub fn run_online(tl: &Timeline, cfg: &SystemConfig, st: &OnlineSettings) -> Result<(Policy, SolveReport)> {
    let run = run_online_logged(tl, cfg, st)?;
    Ok((run.policy, run.report))
}

pub fn run_online_logged(tl: &Timeline, cfg: &SystemConfig, st: &OnlineSettings) -> Result<OnlineRun> {
    let mut ctrl = OnlineController::new(cfg, st, tl.e_initial_j);
    let mut policy = Vec::with_capacity(tl.len());
    let mut planned = Vec::with_capacity(tl.len());
    for e in &tl.epochs {
        let d = ctrl.decide(EpochObservation { cnr: e.cnr.clone(), energy_in: e.energy_in })?;
        planned.push(d.alloc.clone());
        policy.push(ctrl.settle(e.length)?);
    }
    let ledger = ctrl.ledger.clone();
    let audit = metrics::audit_with_inflow(&policy, tl, cfg, &ledger.effective_inflow(), DEFAULT_AUDIT_TOL);
    let mut report = SolveReport::build("online-subopt", &policy, tl, cfg, audit, true);
    report.converged = true;
    report.ee_pre_projection = metrics::energy_efficiency(&planned, tl, cfg);
    report.q_history = ctrl.decisions.iter().map(EpochDecision::q).collect();
    report.inner_iters = ctrl.decisions.iter().map(|d| d.q_history.len()).collect();
    report.flagged_epochs = ctrl.decisions.iter().enumerate().filter(|(_, d)| d.flagged).map(|(j, _)| j).collect();
    report.ops = ctrl.decisions.iter().map(|d| d.ops).sum();
    let epoch_q = ctrl.decisions.iter().map(|d| d.q_history.clone()).collect();
    Ok(OnlineRun { policy, report, ledger, log: ctrl.log, epoch_q })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use crate::scenario;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};

    fn unit_cfg(nf: usize, k: usize) -> SystemConfig {
        SystemConfig {
            n_subcarriers: nf,
            n_users: k,
            bandwidth_hz: nf as f64,
            noise_psd_w_hz: 1.0,
            alpha: vec![1.0; k],
            circuit_power_w: 1.0,
            p_max_w: 4.0,
            p_nonrenew_w: 20.0,
            e_max_j: 100.0,
            r_min_bits: 0.0,
            horizon_s: 1.0,
            avg_epoch_len_s: Some(1.0),
            ..SystemConfig::desk_default()
        }
    }

    fn settings(cfg: &SystemConfig) -> OnlineSettings {
        OnlineSettings::from_config(cfg, InnerSolveSettings::default()).unwrap()
    }

    fn timeline(eps: Vec<(f64, Vec<f64>, f64)>, e0: f64) -> Timeline {
        let epochs = eps
            .into_iter()
            .map(|(l, cnr, e)| Epoch { index: 0, start: 0.0, length: l, cnr, energy_in: e })
            .collect();
        Timeline::from_epochs(epochs, e0).unwrap()
    }

    #[test]
    fn event_count_from_mean_length() {
        let st = OnlineSettings::new(0.3, 1.0, InnerSolveSettings::default()).unwrap();
        assert_eq!(st.z, 4);
        assert!(OnlineSettings::new(0.0, 1.0, InnerSolveSettings::default()).is_err());
    }

    #[test]
    fn ledger_discards_overflow() {
        let mut b = BatteryLedger::new(8.0, 10.0);
        b.update(0, 5.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(b.history[0].overflow_j, 3.0);
        assert_relative_eq!(b.level, 8.5);
        b.update(1, 0.0, 0.0, 0.0).unwrap();
        assert_relative_eq!(b.level, 8.5);
        assert!(b.update(2, 0.0, 9.0, 0.0).is_err());
    }

    #[test]
    fn ledger_replay_balances() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut b = BatteryLedger::new(2.0, 10.0);
        for j in 0..1000 {
            let inflow = if rng.gen_bool(0.3) { rng.gen_range(0.0..8.0) } else { 0.0 };
            let avail = b.available(inflow);
            let t = avail * rng.gen_range(0.0..0.6);
            let c = (avail - t) * rng.gen_range(0.0..1.0);
            b.update(j, inflow, t, c).unwrap();
            assert!((0.0..=10.0).contains(&b.level));
        }
        let replay = 2.0
            + b.history.iter().map(|h| h.inflow_j - h.overflow_j - h.transmit_draw_j - h.circuit_draw_j).sum::<f64>();
        assert!((replay - b.level).abs() < 1e-9);
    }

    #[test]
    fn printed_power_forms() {
        let cfg = unit_cfg(1, 1);
        let m = EpochMultipliers::default();
        assert_eq!(epoch_power_alloc(0, &m, 1.0, 0.0, &cfg, 1e-12), (0.0, 0.0));
        // Harvested price q*phi*eps + gamma; the battery multiplier has no PA factor.
        let m = EpochMultipliers { gamma: 0.5, ..m };
        let (pe, _) = epoch_power_alloc(0, &m, 0.0, 2.0, &cfg, 1e-12);
        assert_relative_eq!(pe, 1.0 / (std::f64::consts::LN_2 * 0.5) - 0.5, epsilon = 1e-12);
        // Water level exactly at 1/Gamma gives zero.
        let g = 1.0 / (1.0 / (std::f64::consts::LN_2 * 0.5));
        assert_eq!(epoch_power_alloc(0, &m, 0.0, g, &cfg, 1e-12).0, 0.0);
    }

    #[test]
    fn printed_forms_match_grid_per_subcarrier() {
        // One pair, prices fixed: maximize W log2(1+G(pe+pn)) - ce pe - cn pn on a grid.
        let mut cfg = unit_cfg(1, 1);
        cfg.phi = 0.2;
        let m = EpochMultipliers { gamma: 0.3, mu: 0.1, psi: 0.05, rho: 0.0 };
        let (q, g) = (0.4, 3.0);
        let (pe, pn) = epoch_power_alloc(0, &m, q, g, &cfg, 1e-12);
        let eps = cfg.pa_ineff;
        let ce = q * cfg.phi * eps + m.psi + m.gamma;
        let cn = q * eps + m.mu * eps + m.psi;
        let f = |a: f64, b: f64| (1.0 + g * (a + b)).log2() - ce * a - cn * b;
        let mut best = f64::NEG_INFINITY;
        for a in 0..=400 {
            for b in 0..=400 {
                best = best.max(f(a as f64 * 0.01, b as f64 * 0.01));
            }
        }
        assert!(f(pe, pn) >= best - 1e-9);
    }

    #[test]
    fn circuit_split_cases() {
        let cfg = unit_cfg(1, 1);
        assert_eq!(epoch_circuit_split(0.0, 0.0, &cfg, 1.0), (0.0, 1.0));
        assert_eq!(epoch_circuit_split(100.0, 1.0, &cfg, 1.0), (1.0, 0.0));
        let eps = cfg.pa_ineff;
        let (pce, pcn) = epoch_circuit_split(eps + 0.5, 1.0, &cfg, 1.0);
        assert_relative_eq!(pce, 0.5, epsilon = 1e-12);
        assert_relative_eq!(pcn, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn multiplier_update_directions() {
        let cfg = unit_cfg(1, 1);
        let st = settings(&cfg);
        let e = Epoch { index: 0, start: 0.0, length: 1.0, cnr: vec![1.0], energy_in: 0.0 };
        let mut a = EpochAlloc::idle(1, 1.0);
        a.s[0] = 1.0;
        a.p_e[0] = 1.0;
        a.pc_e = 1.0;
        a.pc_n = 0.0;
        let step = EpochSteps { gamma: 0.1, mu: 0.1, psi: 0.1, rho: 0.1 };
        let m = EpochMultipliers { gamma: 1.0, mu: 1.0, psi: 1.0, rho: 1.0 };
        // Budget 0 is violated by the harvested draw: gamma rises.
        let up = epoch_multiplier_update(&m, &a, &e, 0.0, &cfg, &st, &step);
        assert!(up.gamma > 1.0);
        // Everything slack: all decay.
        let down = epoch_multiplier_update(&m, &a, &e, 100.0, &cfg, &st, &step);
        assert!(down.gamma < 1.0 && down.mu < 1.0 && down.psi < 1.0 && down.rho < 1.0);
    }

    #[test]
    fn empty_budget_runs_on_supply() {
        let cfg = unit_cfg(2, 1);
        let st = settings(&cfg);
        let d = epoch_solve(&[2.0, 1.0], 0.0, &cfg, &st).unwrap();
        assert_eq!(d.alloc.radiated_harvest(), 0.0);
        assert_eq!(d.alloc.pc_e, 0.0);
        assert_eq!(d.alloc.pc_n, cfg.circuit_power_w);
    }

    #[test]
    fn identical_users_tie_to_first() {
        let cfg = unit_cfg(3, 2);
        let st = settings(&cfg);
        let d = epoch_solve(&[2.0; 6], 5.0, &cfg, &st).unwrap();
        for i in 0..3 {
            assert_eq!(d.alloc.s[2 * i], 1.0);
            assert_eq!(d.alloc.s[2 * i + 1], 0.0);
        }
    }

    #[test]
    fn epoch_q_matches_grid_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut cfg = unit_cfg(2, 1);
            cfg.avg_epoch_len_s = Some(rng.gen_range(0.2..2.0));
            cfg.horizon_s = 3.0;
            cfg.r_min_bits = rng.gen_range(0.0..4.0);
            let st = settings(&cfg);
            let cnr = vec![rng.gen_range(0.1..5.0), rng.gen_range(0.1..5.0)];
            let budget = rng.gen_range(0.0..10.0);
            let d = epoch_solve(&cnr, budget, &cfg, &st).unwrap();
            let e = Epoch { index: 0, start: 0.0, length: st.avg_epoch_len_s, cnr, energy_in: 0.0 };
            let o = oracle::grid_search_epoch(&e, budget, st.avg_epoch_len_s, st.rate_target(&cfg), &cfg, 200).unwrap();
            assert_relative_eq!(d.q(), o.ee, max_relative = 1e-3);
            assert_eq!(d.flagged, !o.rate_feasible);
        }
    }

    #[test]
    fn epoch_q_history_non_decreasing() {
        let cfg = SystemConfig::desk_default();
        let st = settings(&cfg);
        let (_, tl) = scenario::realize(&cfg, 9, 0).unwrap();
        let run = run_online_logged(&tl, &cfg, &st).unwrap();
        for h in &run.epoch_q {
            assert!(h.windows(2).all(|w| w[1] >= w[0] - 1e-9 * w[0].abs()), "{h:?}");
        }
    }

    #[test]
    fn fixed_point_drift_is_small() {
        let mut cfg = unit_cfg(2, 1);
        cfg.avg_epoch_len_s = Some(0.5);
        cfg.horizon_s = 2.0;
        cfg.r_min_bits = 3.0;
        let st = settings(&cfg);
        for budget in [0.3, 2.0, 50.0] {
            let cnr = vec![1.5, 0.4];
            let d = epoch_solve(&cnr, budget, &cfg, &st).unwrap();
            let e = Epoch { index: 0, start: 0.0, length: st.avg_epoch_len_s, cnr, energy_in: 0.0 };
            let step = EpochSteps::diminishing(1.0, 0, &cfg, &st);
            let m = d.multipliers;
            let next = epoch_multiplier_update(&m, &d.alloc, &e, budget, &cfg, &st, &step);
            for (a, b) in [(m.gamma, next.gamma), (m.mu, next.mu), (m.psi, next.psi), (m.rho, next.rho)] {
                assert!((a - b).abs() <= 1e-6 * (1.0 + a), "budget {budget}: {m:?} -> {next:?}");
            }
        }
    }

    #[test]
    fn printed_forms_reproduce_solution() {
        // With the returned multipliers the printed closed forms give the
        // solver's powers on the assigned subcarriers.
        let mut cfg = unit_cfg(2, 1);
        cfg.avg_epoch_len_s = Some(0.5);
        cfg.horizon_s = 2.0;
        let st = settings(&cfg);
        let cnr = [1.5, 0.4];
        for budget in [0.2, 1.0, 50.0] {
            let d = epoch_solve(&cnr, budget, &cfg, &st).unwrap();
            let q = d.q_history[d.q_history.len() - 2];
            for (i, g) in cnr.iter().enumerate() {
                let (pe, pn) = epoch_power_alloc(0, &d.multipliers, q, *g, &cfg, 1e-12);
                let p = d.alloc.p_e[i] + d.alloc.p_n[i];
                assert_relative_eq!(pe + pn, p, epsilon = 1e-6, max_relative = 1e-4);
            }
        }
    }

    #[test]
    fn zero_arrivals_keep_circuit_on_supply() {
        let cfg = SystemConfig { arrival_rate_hz: 0.0, e_initial_j: 0.0, ..SystemConfig::desk_default() };
        let st = settings(&cfg);
        let (_, tl) = scenario::realize(&cfg, 2, 0).unwrap();
        let (pol, rep) = run_online(&tl, &cfg, &st).unwrap();
        for a in &pol {
            assert_eq!(a.pc_n, cfg.circuit_power_w);
            assert_eq!(a.radiated_harvest(), 0.0);
        }
        assert_eq!(rep.harvest_used_j, 0.0);
    }

    #[test]
    fn single_long_epoch_matches_offline() {
        let cfg = SystemConfig { avg_epoch_len_s: Some(10.0), r_min_bits: 0.0, ..unit_cfg(3, 2) };
        let st = settings(&cfg);
        let tl = timeline(vec![(10.0, vec![1.0, 0.3, 2.0, 0.5, 0.2, 0.9], 0.0)], 90.0);
        let (_, on) = run_online(&tl, &cfg, &st).unwrap();
        let (_, off) = offline::dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
        assert_relative_eq!(on.ee, off.ee, max_relative = 1e-3);
    }

    #[test]
    fn desk_runs_are_feasible_and_ledger_bounded() {
        let cfg = SystemConfig::desk_default();
        let st = settings(&cfg);
        for t in 0..5 {
            let (_, tl) = scenario::realize(&cfg, 17, t).unwrap();
            let run = run_online_logged(&tl, &cfg, &st).unwrap();
            assert!(run.report.audit.max_violation_except_rate() <= 1e-6, "{:?}", run.report.audit);
            assert!((0.0..=cfg.e_max_j).contains(&run.ledger.level));
            assert_eq!(run.log.len(), tl.len());
        }
    }

    #[test]
    fn decisions_ignore_the_future() {
        let cfg = SystemConfig::desk_default();
        let st = settings(&cfg);
        let (_, tl) = scenario::realize(&cfg, 4, 1).unwrap();
        let (base, _) = run_online(&tl, &cfg, &st).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        for cut in [0, tl.len() / 3, tl.len() / 2] {
            let mut other = tl.clone();
            for e in other.epochs.iter_mut().skip(cut + 1) {
                e.energy_in = rng.gen_range(0.0..20.0);
                e.cnr.iter_mut().for_each(|g| *g *= rng.gen_range(0.1..10.0));
            }
            let (pol, _) = run_online(&other, &cfg, &st).unwrap();
            assert_eq!(pol[..=cut], base[..=cut]);
        }
    }

    #[test]
    fn work_grows_slowly_with_users() {
        let per_epoch = |k: usize| {
            let cfg = SystemConfig { n_users: k, alpha: vec![1.0; k], ..SystemConfig::desk_default() };
            let st = settings(&cfg);
            let mut ops = 0;
            let mut n = 0;
            for t in 0..3 {
                let (_, tl) = scenario::realize(&cfg, 21, t).unwrap();
                let (_, rep) = run_online(&tl, &cfg, &st).unwrap();
                ops += rep.ops;
                n += tl.len();
            }
            ops as f64 / n as f64
        };
        let ratio = per_epoch(6) / per_epoch(3);
        assert!(ratio <= 4.5, "ratio {ratio}");
    }

    #[test]
    fn decision_log_has_header_and_rows() {
        let cfg = SystemConfig::desk_default();
        let st = settings(&cfg);
        let (_, tl) = scenario::realize(&cfg, 1, 0).unwrap();
        let run = run_online_logged(&tl, &cfg, &st).unwrap();
        let csv = decision_log_csv(&run.log).unwrap();
        assert!(csv.starts_with("epoch,length_s,battery_j,q_epoch,rate_bps,harvest_j,nonrenew_j,overflow_j,flagged\n"));
        assert_eq!(csv.lines().count(), tl.len() + 1);
    }
}
