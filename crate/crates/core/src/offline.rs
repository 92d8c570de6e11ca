//! Offline solver with knowledge of all future channels and arrivals.
//!
//! A Dinkelbach outer loop turns the energy-efficiency ratio into a sequence
//! of subtractive problems `max U - q U_TP`. Each one is solved through its
//! Lagrange dual: closed-form multi-level water-filling per subcarrier and a
//! marginal-benefit rule for the binary subcarrier assignment. The stored
//! energy prices come either from an exact segment search (default) or from
//! projected subgradient steps on all multipliers. Every primal iterate is
//! repaired to an exactly feasible policy and the best repaired point is
//! kept, which makes the outer sequence of `q` non-decreasing.

use serde::{Deserialize, Serialize};
use std::f64::consts::LN_2;

use crate::metrics::{self, AuditReport};
use crate::model::{EpochAlloc, Multipliers, Policy, SystemConfig};
use crate::scenario::Timeline;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    LowestIndex,
}

/// How the subtractive problem of each outer iteration is solved.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InnerMethod {
    /// Exact stored-energy prices by segment bisection.
    Segment,
    /// Projected subgradient on all multipliers.
    Subgradient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InnerSolveSettings {
    pub method: InnerMethod,
    pub max_outer_iters: usize,
    /// Stop when `U - q U_TP` falls below this fraction of `U`.
    pub dinkelbach_tol: f64,
    pub subgrad_iters: usize,
    /// Base of the diminishing step `step_scale / sqrt(iter + 1)`.
    pub step_scale: f64,
    /// Inner loop stops once every multiplier moves by less than this
    /// fraction of its natural scale.
    pub mult_tol: f64,
    pub denom_floor: f64,
    pub tie_break: TieBreak,
}

impl Default for InnerSolveSettings {
    fn default() -> Self {
        Self {
            method: InnerMethod::Segment,
            max_outer_iters: 20,
            dinkelbach_tol: 1e-6,
            subgrad_iters: 500,
            step_scale: 0.5,
            mult_tol: 1e-6,
            denom_floor: 1e-12,
            tie_break: TieBreak::LowestIndex,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DinkelbachStep {
    pub q: f64,
    pub u: f64,
    pub u_tp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DinkelbachState {
    pub q: f64,
    pub iter: usize,
    pub history: Vec<DinkelbachStep>,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiplierNorms {
    pub gamma_max: f64,
    pub beta_max: f64,
    pub rho: f64,
    pub mu_max: f64,
    pub psi_max: f64,
}

impl MultiplierNorms {
    pub fn of(m: &Multipliers) -> Self {
        let mx = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        Self { gamma_max: mx(&m.gamma), beta_max: mx(&m.beta), rho: m.rho, mu_max: mx(&m.mu), psi_max: mx(&m.psi) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub solver: String,
    /// Energy efficiency after each outer iteration.
    pub q_history: Vec<f64>,
    pub converged: bool,
    pub u: f64,
    pub u_tp: f64,
    pub ee: f64,
    /// EE of the last raw dual iterate before the feasibility repair.
    pub ee_pre_projection: f64,
    pub capacity_bits: f64,
    pub harvest_used_j: f64,
    pub nonrenew_used_j: f64,
    pub qos_ok: bool,
    pub audit: AuditReport,
    pub multipliers: Option<MultiplierNorms>,
    /// Inner iterations spent in each outer iteration (or each epoch online).
    pub inner_iters: Vec<usize>,
    /// Epochs whose local rate target could not be met (online only).
    pub flagged_epochs: Vec<usize>,
    /// Primitive closed-form evaluations performed.
    pub ops: u64,
}

impl SolveReport {
    pub(crate) fn build(
        solver: &str,
        pol: &Policy,
        tl: &Timeline,
        cfg: &SystemConfig,
        audit: AuditReport,
        qos_feasible: bool,
    ) -> Self {
        let u = metrics::weighted_capacity(pol, tl, cfg);
        let u_tp = metrics::weighted_energy(pol, tl, cfg);
        let (harvest_used_j, nonrenew_used_j) = metrics::energy_by_source(pol, tl, cfg);
        let qos_ok = qos_feasible && audit.rate_ok();
        Self {
            solver: solver.to_string(),
            q_history: Vec::new(),
            converged: false,
            u,
            u_tp,
            ee: if u_tp > 0.0 { u / u_tp } else { 0.0 },
            ee_pre_projection: 0.0,
            capacity_bits: metrics::capacity(pol, tl, cfg),
            harvest_used_j,
            nonrenew_used_j,
            qos_ok,
            audit,
            multipliers: None,
            inner_iters: Vec::new(),
            flagged_epochs: Vec::new(),
            ops: 0,
        }
    }
}

/// Water-filling powers of one subcarrier-user pair for given prices per
/// radiated watt of harvested (`c_e`) and non-renewable (`c_n`) power.
/// Returns `(harvested, non-renewable)`; the harvested level is filled first.
pub fn water_levels(weight: f64, gamma: f64, c_e: f64, c_n: f64, floor: f64) -> (f64, f64) {
    if gamma <= 0.0 {
        return (0.0, 0.0);
    }
    let inv = 1.0 / gamma;
    let pe = (weight / (LN_2 * c_e.max(floor)) - inv).max(0.0);
    let pn = (weight / (LN_2 * c_n.max(floor)) - inv - pe).max(0.0);
    (pe, pn)
}

/// Closed-form powers of subcarrier `i`, user `k`, epoch `j`.
///
/// The harvested price carries the suffix sums of the causality and
/// overflow multipliers; the non-renewable price carries the supply-cap
/// multiplier. Both carry the radiated-power multiplier.
pub fn power_alloc_epoch(
    j: usize,
    k: usize,
    mult: &Multipliers,
    q: f64,
    gamma: f64,
    cfg: &SystemConfig,
    floor: f64,
) -> (f64, f64) {
    let eps = cfg.pa_ineff;
    let gamma_sum: f64 = mult.gamma[j..].iter().sum();
    let beta_sum: f64 = mult.beta.get(j + 1..).map_or(0.0, |b| b.iter().sum());
    let c_e = eps * gamma_sum - eps * beta_sum + q * cfg.phi * eps + mult.psi[j];
    let c_n = q * eps + mult.mu[j] * eps + mult.psi[j];
    let weight = cfg.subcarrier_bw() * (cfg.alpha[k] + mult.rho);
    water_levels(weight, gamma, c_e, c_n, floor)
}

/// Derivative of the per-subcarrier Lagrangian with respect to the share
/// factor at the optimal powers; never negative.
pub fn marginal_benefit(weight: f64, gamma: f64, p: f64) -> f64 {
    let x = gamma * p;
    if x <= 0.0 {
        return 0.0;
    }
    (weight * (x.ln_1p() / LN_2 - x / (LN_2 * (1.0 + x)))).max(0.0)
}

/// Index of the user winning a subcarrier; ties go to the lowest index.
pub fn select_user(q_row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in q_row.iter().enumerate().skip(1) {
        if v > q_row[best] {
            best = k;
        }
    }
    best
}

/// Circuit power split for epoch `j` from the battery ledger: harvested
/// energy that is left after all transmissions up to `j` and all earlier
/// circuit draws feeds the circuit first.
pub fn circuit_split(
    cum_arrivals_j: f64,
    cum_pa_harvest_through_j: f64,
    cum_circuit_harvest_before_j: f64,
    length: f64,
    circuit_power: f64,
) -> (f64, f64) {
    let residual = cum_arrivals_j - cum_pa_harvest_through_j - cum_circuit_harvest_before_j;
    let pce = (residual / length).clamp(0.0, circuit_power);
    (pce, circuit_power - pce)
}

/// Constraint brackets entering the multiplier updates. Positive means slack.
#[derive(Debug, Clone, PartialEq)]
pub struct Slacks {
    /// Battery causality at each epoch (J).
    pub gamma: Vec<f64>,
    /// Battery capacity at each arrival (J); the first entry is unused.
    pub beta: Vec<f64>,
    /// Delivered bits minus the minimum.
    pub rho: f64,
    /// Non-renewable cap (J per epoch).
    pub mu: Vec<f64>,
    /// Radiated power cap (J-equivalent per epoch).
    pub psi: Vec<f64>,
}

/// Evaluates the constraint brackets of a policy.
pub fn constraint_slacks(pol: &Policy, tl: &Timeline, cfg: &SystemConfig) -> Slacks {
    let n = tl.len();
    let eps = cfg.pa_ineff;
    let cum = tl.cumulative_arrivals();
    let mut used = vec![0.0; n];
    let mut acc = 0.0;
    for (j, (e, a)) in tl.epochs.iter().zip(pol).enumerate() {
        acc += e.length * a.harvest_draw(eps);
        used[j] = acc;
    }
    let gamma = (0..n).map(|e| cum[e] - used[e]).collect();
    let beta = (0..n).map(|r| if r == 0 { 0.0 } else { cfg.e_max_j - cum[r] + used[r - 1] }).collect();
    let mu = tl
        .epochs
        .iter()
        .zip(pol)
        .map(|(e, a)| e.length * (cfg.p_nonrenew_w - eps * a.radiated_nonrenew() - a.pc_n))
        .collect();
    let psi = tl.epochs.iter().zip(pol).map(|(e, a)| e.length * (cfg.p_max_w - a.radiated())).collect();
    let rho = metrics::capacity(pol, tl, cfg) - cfg.r_min_bits;
    Slacks { gamma, beta, rho, mu, psi }
}

/// Projected subgradient step on the constraint brackets of a policy.
pub fn multiplier_update(
    mult: &Multipliers,
    pol: &Policy,
    tl: &Timeline,
    cfg: &SystemConfig,
    step: &Slacks,
) -> Multipliers {
    project_step(mult, &constraint_slacks(pol, tl, cfg), step)
}

/// `m <- [m - step * slack]^+` for every multiplier. The first overflow
/// multiplier stays at zero.
pub fn project_step(mult: &Multipliers, slack: &Slacks, step: &Slacks) -> Multipliers {
    let upd = |m: &[f64], s: &[f64], x: &[f64]| -> Vec<f64> {
        m.iter().zip(s).zip(x).map(|((m, s), x)| (m - x * s).max(0.0)).collect()
    };
    let mut beta = upd(&mult.beta, &slack.beta, &step.beta);
    if let Some(b) = beta.first_mut() {
        *b = 0.0;
    }
    Multipliers {
        gamma: upd(&mult.gamma, &slack.gamma, &step.gamma),
        beta,
        rho: (mult.rho - step.rho * slack.rho).max(0.0),
        mu: upd(&mult.mu, &slack.mu, &step.mu),
        psi: upd(&mult.psi, &slack.psi, &step.psi),
    }
}

/// Binary assignment plus total radiated power per (epoch, subcarrier).
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Plan {
    pub users: Vec<usize>,
    pub power: Vec<f64>,
}

/// Exactly feasible policy in compact form.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Repaired {
    pub plan: Plan,
    /// Fraction of each epoch's PA power drawn from the battery.
    pub pa_harvest_frac: Vec<f64>,
    pub pc_e: Vec<f64>,
    pub u: f64,
    pub u_tp: f64,
    pub bits: f64,
}

impl Repaired {
    pub fn to_policy(&self, cfg: &SystemConfig, n_epochs: usize) -> Policy {
        let (nf, k_n) = (cfg.n_subcarriers, cfg.n_users);
        (0..n_epochs)
            .map(|j| {
                let mut a = EpochAlloc::idle(nf * k_n, cfg.circuit_power_w);
                let f = self.pa_harvest_frac[j];
                for i in 0..nf {
                    let idx = i * k_n + self.plan.users[j * nf + i];
                    let p = self.plan.power[j * nf + i];
                    a.s[idx] = 1.0;
                    a.p_e[idx] = f * p;
                    a.p_n[idx] = p - f * p;
                }
                a.pc_e = self.pc_e[j];
                a.pc_n = cfg.circuit_power_w - self.pc_e[j];
                a
            })
            .collect()
    }

    pub fn objective(&self, q: f64) -> f64 {
        self.u - q * self.u_tp
    }
}

/// Precomputed per-timeline data shared by the inner iterations.
pub(crate) struct Instance<'a> {
    pub tl: &'a Timeline,
    pub cfg: &'a SystemConfig,
    pub cum: Vec<f64>,
    pub w: f64,
}

impl<'a> Instance<'a> {
    pub fn new(tl: &'a Timeline, cfg: &'a SystemConfig) -> Self {
        Self { tl, cfg, cum: tl.cumulative_arrivals(), w: cfg.subcarrier_bw() }
    }

    fn gamma(&self, j: usize, i: usize, k: usize) -> f64 {
        self.tl.epochs[j].cnr[i * self.cfg.n_users + k]
    }

    /// Repairs a plan into an exactly feasible policy keeping the assignment.
    ///
    /// Powers are scaled down where the radiated cap is exceeded or where the
    /// non-renewable cap would need more stored energy than can have arrived.
    /// The battery is then drawn as early and as much as causality allows
    /// without starving a later epoch of its required minimum, which
    /// maximizes the total harvested energy for the given powers.
    pub fn repair(&self, mut plan: Plan) -> Repaired {
        let cfg = self.cfg;
        let (nf, n) = (cfg.n_subcarriers, self.tl.len());
        let eps = cfg.pa_ineff;
        let pc = cfg.circuit_power_w;
        let mut x = vec![0.0; n];
        let mut lo = vec![0.0; n];
        let mut cum_lo = 0.0;
        for j in 0..n {
            let l = self.tl.epochs[j].length;
            let row = &mut plan.power[j * nf..(j + 1) * nf];
            let mut xj: f64 = row.iter().sum();
            if xj > cfg.p_max_w {
                let f = cfg.p_max_w / xj;
                row.iter_mut().for_each(|p| *p *= f);
                xj = row.iter().sum();
            }
            let mut need = (l * (pc + eps * xj - cfg.p_nonrenew_w)).max(0.0);
            let avail = (self.cum[j] - cum_lo).max(0.0);
            if need > avail {
                let target = ((avail / l + cfg.p_nonrenew_w - pc) / eps).max(0.0);
                let f = if xj > 0.0 { (target / xj).min(1.0) } else { 0.0 };
                row.iter_mut().for_each(|p| *p *= f);
                xj = row.iter().sum();
                need = (l * (pc + eps * xj - cfg.p_nonrenew_w)).max(0.0).min(avail);
            }
            x[j] = xj;
            lo[j] = need;
            cum_lo += need;
        }
        // Arrivals that would overflow the battery even with the earliest
        // possible draws are absorbed by radiating more stored energy in the
        // epochs just before them.
        let mut h = self.greedy_draws(&x, &lo);
        for _ in 0..4 * n + 4 {
            let Some((r, excess)) = self.first_overflow(&h) else { break };
            let mut left = excess;
            for m in (0..r).rev() {
                let room = cfg.p_max_w - x[m];
                if room <= 0.0 || left <= 0.0 {
                    continue;
                }
                let l = self.tl.epochs[m].length;
                let dx = room.min(left / (l * eps));
                let row = &mut plan.power[m * nf..(m + 1) * nf];
                if x[m] > 0.0 {
                    let f = (x[m] + dx) / x[m];
                    row.iter_mut().for_each(|p| *p *= f);
                } else {
                    let users = &plan.users[m * nf..(m + 1) * nf];
                    let best = (0..nf)
                        .max_by(|&a, &b| self.gamma(m, a, users[a]).total_cmp(&self.gamma(m, b, users[b])))
                        .unwrap_or(0);
                    row[best] += dx;
                }
                x[m] = row.iter().sum();
                lo[m] = (l * (pc + eps * x[m] - cfg.p_nonrenew_w)).max(0.0);
                left -= dx * l * eps;
            }
            let next = self.greedy_draws(&x, &lo);
            let improved = self.first_overflow(&next).map_or(true, |(r2, e2)| r2 > r || e2 < excess - 1e-15);
            h = next;
            if !improved || left >= excess {
                break;
            }
        }
        let mut frac = vec![0.0; n];
        let mut pc_e = vec![0.0; n];
        let (mut u, mut u_tp, mut bits) = (0.0, 0.0, 0.0);
        for j in 0..n {
            let l = self.tl.epochs[j].length;
            let h = h[j];
            let pa = l * eps * x[j];
            let pa_h = h.min(pa);
            frac[j] = if pa > 0.0 { pa_h / pa } else { 0.0 };
            pc_e[j] = ((h - pa_h) / l).clamp(0.0, pc);
            let draw_total = pc + eps * x[j];
            let draw_h = h / l;
            u_tp += l * (cfg.phi * draw_h + (draw_total - draw_h));
            for i in 0..nf {
                let p = plan.power[j * nf + i];
                if p > 0.0 {
                    let k = plan.users[j * nf + i];
                    let r = (self.gamma(j, i, k) * p).ln_1p() / LN_2;
                    bits += l * self.w * r;
                    u += l * self.w * cfg.alpha[k] * r;
                }
            }
        }
        Repaired { plan, pa_harvest_frac: frac, pc_e, u, u_tp, bits }
    }

    /// Largest causal stored-energy draws for radiated powers `x`, drawing
    /// as early as possible; `lo` are the draws forced by the supply cap.
    fn greedy_draws(&self, x: &[f64], lo: &[f64]) -> Vec<f64> {
        let cfg = self.cfg;
        let n = x.len();
        // Suffix minima of arrivals minus cumulative minimum draws.
        let mut suffix = vec![f64::INFINITY; n + 1];
        let mut pref = 0.0;
        let mut b = vec![0.0; n];
        for j in 0..n {
            pref += lo[j];
            b[j] = self.cum[j] - pref;
        }
        for j in (0..n).rev() {
            suffix[j] = suffix[j + 1].min(b[j]);
        }
        let (mut h_tot, mut lo_pref) = (0.0, 0.0);
        let mut h = vec![0.0; n];
        for j in 0..n {
            lo_pref += lo[j];
            let hi = self.tl.epochs[j].length * (cfg.circuit_power_w + cfg.pa_ineff * x[j]);
            h[j] = hi.min(suffix[j] + lo_pref - h_tot).max(lo[j]).max(0.0);
            h_tot += h[j];
        }
        h
    }

    /// First arrival at which stored energy would exceed the capacity by
    /// more than is unavoidable (an arrival larger than the whole battery
    /// overflows whatever was drawn before it).
    fn first_overflow(&self, h: &[f64]) -> Option<(usize, f64)> {
        let tol = 1e-12 * (1.0 + self.cum.last().copied().unwrap_or(0.0));
        let mut used = 0.0;
        for j in 0..h.len() {
            if j > 0 {
                let excess = (self.cum[j] - self.cfg.e_max_j).min(self.cum[j - 1]) - used;
                if excess > tol {
                    return Some((j, excess));
                }
            }
            used += h[j];
        }
        None
    }
}

/// Upper bound on deliverable bits: each subcarrier given to its strongest
/// user and every epoch radiating as much as the caps allow, as if all
/// arrivals could be spent in that one epoch. Exact for a single epoch.
pub(crate) fn max_rate_bound(tl: &Timeline, cfg: &SystemConfig) -> f64 {
    let (nf, k_n) = (cfg.n_subcarriers, cfg.n_users);
    let w = cfg.subcarrier_bw();
    let total = tl.total_arrivals();
    let supply = cfg.p_nonrenew_w - cfg.circuit_power_w;
    tl.epochs
        .iter()
        .map(|e| {
            let g: Vec<f64> = (0..nf)
                .map(|i| e.cnr[i * k_n..(i + 1) * k_n].iter().copied().fold(0.0, f64::max))
                .collect();
            let x = cfg.p_max_w.min((supply + total / e.length).max(0.0) / cfg.pa_ineff);
            e.length * w * sorted_waterfill_rate(&g, x)
        })
        .sum()
}

/// Sum of `log2(1 + g_i p_i)` under an optimal split of `total` (equal weights),
/// using the sorted active-set form of water-filling.
pub(crate) fn sorted_waterfill_rate(g: &[f64], total: f64) -> f64 {
    let mut inv: Vec<f64> = g.iter().filter(|&&x| x > 0.0).map(|&x| 1.0 / x).collect();
    if inv.is_empty() || total <= 0.0 {
        return 0.0;
    }
    inv.sort_by(f64::total_cmp);
    let mut level = 0.0;
    let mut used = inv.len();
    let mut acc = 0.0;
    for (m, &v) in inv.iter().enumerate() {
        acc += v;
        let cand = (total + acc) / (m + 1) as f64;
        if m + 1 < inv.len() && cand > inv[m + 1] {
            continue;
        }
        level = cand;
        used = m + 1;
        break;
    }
    inv[..used].iter().map(|&v| (level / v).log2()).sum()
}

/// Fills epoch `j` at price `c` per radiated watt: every subcarrier goes to
/// the user with the largest marginal benefit at its water-filling power.
/// Returns the total radiated power.
fn fill_epoch(
    inst: &Instance,
    j: usize,
    c: f64,
    weights: &[f64],
    floor: f64,
    users: &mut [usize],
    power: &mut [f64],
) -> f64 {
    let k_n = inst.cfg.n_users;
    let mut x = 0.0;
    for i in 0..users.len() {
        let (mut best_k, mut best_q, mut best_p) = (0, f64::NEG_INFINITY, 0.0);
        for (k, &w) in weights.iter().enumerate().take(k_n) {
            let g = inst.gamma(j, i, k);
            let (pe, pn) = water_levels(w, g, c, c, floor);
            let p = pe + pn;
            let qv = marginal_benefit(w, g, p);
            if qv > best_q {
                (best_k, best_q, best_p) = (k, qv, p);
            }
        }
        users[i] = best_k;
        power[i] = best_p;
        x += best_p;
    }
    x
}

/// Dual iteration state for one value of `q`.
struct DualLoop<'a, 'b> {
    inst: &'b Instance<'a>,
    st: &'b InnerSolveSettings,
    /// Whether the minimum-rate multiplier is active.
    rate_active: bool,
    ops: u64,
}

/// Result of one closed-form primal step.
struct Response {
    plan: Plan,
    /// Epoch draws its battery for everything (harvested price is lower).
    harvest_src: Vec<bool>,
    /// Per-epoch price per radiated watt that set the water level.
    price: Vec<f64>,
    /// `sum a / c^2` over powered pairs per epoch.
    curv: Vec<f64>,
    curv_rho: f64,
    bits: f64,
}

impl<'a, 'b> DualLoop<'a, 'b> {
    fn respond(&mut self, m: &Multipliers, q: f64) -> Response {
        let inst = self.inst;
        let cfg = inst.cfg;
        let (nf, k_n, n) = (cfg.n_subcarriers, cfg.n_users, inst.tl.len());
        let eps = cfg.pa_ineff;
        let floor = self.st.denom_floor;
        let mut plan = Plan { users: vec![0; n * nf], power: vec![0.0; n * nf] };
        let mut harvest_src = vec![false; n];
        let mut price = vec![0.0; n];
        let mut curv = vec![0.0; n];
        let mut curv_rho = 0.0;
        let mut bits = 0.0;
        let pi = harvest_prices(m);
        let weights: Vec<f64> = (0..k_n).map(|k| inst.w * (cfg.alpha[k] + m.rho)).collect();
        for j in 0..n {
            let c_e = (eps * (q * cfg.phi + pi[j]) + m.psi[j]).max(floor);
            let c_n = (eps * (q + m.mu[j]) + m.psi[j]).max(floor);
            harvest_src[j] = c_e <= c_n;
            let c = c_e.min(c_n);
            price[j] = c;
            let l = inst.tl.epochs[j].length;
            let users = &mut plan.users[j * nf..(j + 1) * nf];
            let power = &mut plan.power[j * nf..(j + 1) * nf];
            fill_epoch(inst, j, c, &weights, floor, users, power);
            self.ops += (nf * k_n) as u64;
            for i in 0..nf {
                let p = power[i];
                if p > 0.0 {
                    let k = users[i];
                    let g = inst.gamma(j, i, k);
                    curv[j] += weights[k] / LN_2 / (c * c);
                    bits += l * inst.w * (g * p).ln_1p() / LN_2;
                    curv_rho += l * (inst.w / (LN_2 * c)) * inst.w * g / (LN_2 * (1.0 + g * p));
                }
            }
        }
        Response { plan, harvest_src, price, curv, curv_rho, bits }
    }

    /// Constraint brackets of the Lagrangian response: the cheaper source
    /// supplies both the amplifier and the circuit in each epoch.
    fn slacks(&self, r: &Response) -> Slacks {
        let inst = self.inst;
        let cfg = inst.cfg;
        let (nf, n) = (cfg.n_subcarriers, inst.tl.len());
        let eps = cfg.pa_ineff;
        let mut used = 0.0;
        let mut gamma = vec![0.0; n];
        let mut beta = vec![0.0; n];
        let mut mu = vec![0.0; n];
        let mut psi = vec![0.0; n];
        for j in 0..n {
            let l = inst.tl.epochs[j].length;
            let x: f64 = r.plan.power[j * nf..(j + 1) * nf].iter().sum();
            if j > 0 {
                beta[j] = cfg.e_max_j - inst.cum[j] + used;
            }
            let (h, nr) = if r.harvest_src[j] {
                (eps * x + cfg.circuit_power_w, 0.0)
            } else {
                (0.0, eps * x + cfg.circuit_power_w)
            };
            used += l * h;
            gamma[j] = inst.cum[j] - used;
            mu[j] = l * (cfg.p_nonrenew_w - nr);
            psi[j] = l * (cfg.p_max_w - x);
        }
        Slacks { gamma, beta, rho: r.bits - cfg.r_min_bits, mu, psi }
    }

    /// Diminishing steps scaled by the local sensitivity of each constraint
    /// to its multiplier, bounded so that an inactive multiplier moves by at
    /// most a fraction of its own size plus a reference price.
    fn steps(&self, r: &Response, m: &Multipliers, it: usize, q: f64) -> Slacks {
        let inst = self.inst;
        let cfg = inst.cfg;
        let n = inst.tl.len();
        let eps = cfg.pa_ineff;
        let theta = self.st.step_scale / ((it + 1) as f64).sqrt();
        let (watt_price, joule_price) = ref_prices(inst, q);
        let step = |kappa: f64, natural: f64, mval: f64, pref: f64| -> f64 {
            theta / kappa.max(natural / (mval + pref))
        };
        let mut prefix_e = vec![0.0; n];
        let mut acc = 0.0;
        let mut span = 0.0;
        let mut spans = vec![0.0; n];
        for j in 0..n {
            let l = inst.tl.epochs[j].length;
            if r.harvest_src[j] {
                acc += l * eps * eps * r.curv[j];
            }
            prefix_e[j] = acc;
            span += l * (cfg.circuit_power_w + eps * cfg.p_max_w);
            spans[j] = span;
        }
        let gamma = (0..n)
            .map(|e| step(prefix_e[e], inst.cum[e] + spans[e], m.gamma[e], joule_price))
            .collect();
        let beta = (0..n)
            .map(|r_| if r_ == 0 { 0.0 } else { step(prefix_e[r_ - 1], cfg.e_max_j, m.beta[r_], joule_price) })
            .collect();
        let mu = (0..n)
            .map(|j| {
                let l = inst.tl.epochs[j].length;
                let k = if r.harvest_src[j] { 0.0 } else { l * eps * eps * r.curv[j] };
                step(k, l * cfg.p_nonrenew_w, m.mu[j], joule_price)
            })
            .collect();
        let psi = (0..n)
            .map(|j| {
                let l = inst.tl.epochs[j].length;
                step(l * r.curv[j], l * cfg.p_max_w, m.psi[j], watt_price.max(r.price[j]))
            })
            .collect();
        let rho = if self.rate_active {
            step(r.curv_rho, cfg.r_min_bits.max(1.0), m.rho, 1.0)
        } else {
            0.0
        };
        Slacks { gamma, beta, rho, mu, psi }
    }

    /// Runs the subgradient loop, returning the best repaired point, the final
    /// multipliers, the last raw plan and the iteration count.
    fn run(&mut self, q: f64, mut m: Multipliers, seed: Option<Repaired>, rate_required: bool) -> InnerOut {
        let r_min = self.inst.cfg.r_min_bits;
        let mut best = seed;
        let mut last = None;
        let mut iters = 0;
        for it in 0..self.st.subgrad_iters {
            iters = it + 1;
            let resp = self.respond(&m, q);
            let cand = self.inst.repair(resp.plan.clone());
            if best.as_ref().map_or(true, |b| better(&cand, b, q, rate_required, r_min)) {
                best = Some(cand);
            }
            let slack = self.slacks(&resp);
            let step = self.steps(&resp, &m, it, q);
            let next = project_step(&m, &slack, &step);
            let moved = max_rel_change(&m, &next, q, self.inst);
            m = next;
            last = Some(resp.plan);
            if moved < self.st.mult_tol {
                break;
            }
        }
        let raw = last.unwrap_or_else(|| self.respond(&m, q).plan);
        InnerOut { best: best.expect("at least one iterate"), mult: m, raw, iters }
    }
}

/// Per-epoch reference prices (per radiated watt, per joule) used to scale
/// multiplier steps and stopping tests.
fn ref_prices(inst: &Instance, q: f64) -> (f64, f64) {
    let cfg = inst.cfg;
    let a_ref = inst.w * cfg.alpha.iter().copied().fold(0.0, f64::max) / LN_2;
    let watt = a_ref * cfg.n_subcarriers as f64 / cfg.p_max_w;
    (watt, q + watt / cfg.pa_ineff)
}

/// Harvested-energy price of each epoch: suffix sums of the causality
/// multipliers minus suffix sums of the later overflow multipliers.
fn harvest_prices(m: &Multipliers) -> Vec<f64> {
    let n = m.gamma.len();
    let mut pi = vec![0.0; n];
    let (mut g, mut b) = (0.0, 0.0);
    for j in (0..n).rev() {
        g += m.gamma[j];
        if j + 1 < n {
            b += m.beta[j + 1];
        }
        pi[j] = g - b;
    }
    pi
}

fn better(cand: &Repaired, best: &Repaired, q: f64, rate_required: bool, r_min: f64) -> bool {
    let ok = |r: &Repaired| !rate_required || r.bits >= r_min;
    match (ok(cand), ok(best)) {
        (true, false) => true,
        (false, true) => false,
        _ => cand.objective(q) > best.objective(q),
    }
}

fn max_rel_change(a: &Multipliers, b: &Multipliers, q: f64, inst: &Instance) -> f64 {
    let (watt, joule) = ref_prices(inst, q);
    let d = |x: &[f64], y: &[f64], s: f64| x.iter().zip(y).map(|(u, v)| (u - v).abs() / s).fold(0.0, f64::max);
    d(&a.gamma, &b.gamma, joule)
        .max(d(&a.beta, &b.beta, joule))
        .max(d(&a.mu, &b.mu, joule))
        .max(d(&a.psi, &b.psi, watt))
        .max((a.rho - b.rho).abs())
}

struct InnerOut {
    best: Repaired,
    mult: Multipliers,
    raw: Plan,
    iters: usize,
}

/// Prices per radiated watt at which an epoch's total power reaches the
/// radiated cap and the non-renewable kink.
struct EpochCurve {
    c_cap: f64,
    c_kink: Option<f64>,
}

/// Per-epoch outcome of the exact solver at one stored-energy price.
#[derive(Clone, Copy)]
struct Demand {
    /// Price per radiated watt at which the epoch is filled.
    c: f64,
    /// Stored energy drawn (J).
    h: f64,
}

/// Relative width of the price window over which an epoch switches source.
const SOURCE_RAMP: f64 = 1e-9;

/// Exact solver of the subtractive problem for fixed `q`.
///
/// For a given rate multiplier every epoch's best response to a price on
/// stored energy is monotone in that price, and the optimal price is
/// constant on segments. A segment ends where the cumulative draw touches
/// a bound: an empty battery (the price falls afterwards) or a full one
/// before an arrival (the price rises). Segments are found front to back
/// by bisecting on the type of the first bound the draw would break. The
/// rate multiplier is found by bisection on delivered bits.
struct SegmentSolver<'a, 'b> {
    inst: &'b Instance<'a>,
    st: &'b InnerSolveSettings,
    q: f64,
    weights: Vec<f64>,
    curves: Vec<EpochCurve>,
    users: Vec<usize>,
    power: Vec<f64>,
    ops: u64,
}

struct SegmentOut {
    plan: Plan,
    gamma: Vec<f64>,
    beta: Vec<f64>,
    psi: Vec<f64>,
    mu: Vec<f64>,
}

impl<'a, 'b> SegmentSolver<'a, 'b> {
    fn new(inst: &'b Instance<'a>, st: &'b InnerSolveSettings, q: f64) -> Self {
        let nf = inst.cfg.n_subcarriers;
        Self {
            inst,
            st,
            q,
            weights: Vec::new(),
            curves: Vec::new(),
            users: vec![0; nf],
            power: vec![0.0; nf],
            ops: 0,
        }
    }

    fn x_at(&mut self, j: usize, c: f64) -> f64 {
        self.ops += (self.users.len() * self.inst.cfg.n_users) as u64;
        fill_epoch(self.inst, j, c, &self.weights, self.st.denom_floor, &mut self.users, &mut self.power)
    }

    /// Smallest price at which epoch `j` radiates at most `target`.
    fn price_for(&mut self, j: usize, target: f64, c_min: f64) -> f64 {
        let floor = self.st.denom_floor;
        let lo0 = c_min.max(floor);
        if self.x_at(j, lo0) <= target {
            return lo0;
        }
        let k_n = self.inst.cfg.n_users;
        let mut hi = floor;
        for i in 0..self.users.len() {
            for k in 0..k_n {
                hi = f64::max(hi, self.weights[k] * self.inst.gamma(j, i, k) / LN_2);
            }
        }
        let mut lo = lo0;
        hi = hi.max(lo) * (1.0 + 1e-12);
        for _ in 0..200 {
            if hi / lo - 1.0 <= 1e-14 {
                break;
            }
            let mid = (lo * hi).sqrt();
            if self.x_at(j, mid) > target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }

    fn set_rho(&mut self, rho: f64) {
        let inst = self.inst;
        let cfg = inst.cfg;
        self.weights = (0..cfg.n_users).map(|k| inst.w * (cfg.alpha[k] + rho)).collect();
        let x_kink = (cfg.p_nonrenew_w - cfg.circuit_power_w) / cfg.pa_ineff;
        self.curves = (0..inst.tl.len())
            .map(|j| {
                let c_cap = self.price_for(j, cfg.p_max_w, 0.0);
                let c_kink = (x_kink < cfg.p_max_w).then(|| self.price_for(j, x_kink, c_cap));
                EpochCurve { c_cap, c_kink }
            })
            .collect();
    }

    /// Best response of epoch `j` when stored energy costs `q phi + lam`
    /// per joule and non-renewable energy costs `q`.
    ///
    /// Where both prices coincide the split between sources is free. The
    /// stored share is ramped linearly over a relative price window of
    /// `SOURCE_RAMP` so the draw is continuous in `lam`, which the segment
    /// search relies on.
    fn demand(&mut self, j: usize, lam: f64) -> Demand {
        let cfg = self.inst.cfg;
        let eps = cfg.pa_ineff;
        let (c_cap, c_kink) = (self.curves[j].c_cap, self.curves[j].c_kink);
        let clamp = |c: f64| c.max(c_cap);
        let c_n = eps * self.q;
        let c_h = eps * (self.q * cfg.phi + lam);
        let width = SOURCE_RAMP * c_n.max(self.st.denom_floor);
        let t = 0.5 + (c_n - c_h) / width;
        if t >= 1.0 {
            let c = clamp(c_h);
            let x = self.x_at(j, c);
            return Demand { c, h: self.energy(j, x) };
        }
        if t > 0.0 {
            let c = clamp(c_n);
            let x = self.x_at(j, c);
            let (lo, hi) = (self.forced(j, x), self.energy(j, x));
            return Demand { c, h: lo + t * (hi - lo) };
        }
        let c1 = clamp(c_n);
        let c = match c_kink {
            Some(k) if c1 < k => clamp(c_h).min(k),
            _ => c1,
        };
        let x = self.x_at(j, c);
        Demand { c, h: self.forced(j, x) }
    }

    fn energy(&self, j: usize, x: f64) -> f64 {
        let cfg = self.inst.cfg;
        self.inst.tl.epochs[j].length * (cfg.circuit_power_w + cfg.pa_ineff * x)
    }

    /// Stored energy an epoch must draw because the non-renewable supply is capped.
    fn forced(&self, j: usize, x: f64) -> f64 {
        let cfg = self.inst.cfg;
        (self.energy(j, x) - self.inst.tl.epochs[j].length * cfg.p_nonrenew_w).max(0.0)
    }

    /// First bound broken by the cumulative draw of epochs `s..` at price
    /// `lam`: `(true, e)` for causality at `e`, `(false, e)` for capacity.
    fn first_violation(&mut self, s: usize, base: f64, lam: f64, b: &Bounds) -> Option<(bool, usize)> {
        let mut acc = base;
        for e in s..b.upper.len() {
            acc += self.demand(e, lam).h;
            if acc > b.upper[e] + b.tol {
                return Some((true, e));
            }
            if acc < b.lower[e] - b.tol {
                return Some((false, e));
            }
        }
        None
    }

    fn solve(&mut self) -> SegmentOut {
        let inst = self.inst;
        let cfg = inst.cfg;
        let eps = cfg.pa_ineff;
        let n = inst.tl.len();
        let nf = cfg.n_subcarriers;
        let cum = &inst.cum;
        let upper = cum.clone();
        // An arrival larger than the battery cannot be stored whatever the
        // policy; the bound is relaxed to an empty battery before it.
        let lower: Vec<f64> = (0..n)
            .map(|e| if e + 1 < n { (cum[e + 1] - cfg.e_max_j).min(cum[e]) } else { f64::NEG_INFINITY })
            .collect();
        let bounds = Bounds { upper, lower, tol: 1e-12 * (1.0 + cum[n - 1]) };
        let c_cap_min = self.curves.iter().map(|c| c.c_cap).fold(f64::INFINITY, f64::min);
        // Below this price every epoch already radiates its cap from storage.
        let lam_floor = (c_cap_min / eps - self.q * cfg.phi).min(0.0) - self.q.max(1e-300);
        let mut plan = Plan { users: vec![0; n * nf], power: vec![0.0; n * nf] };
        let mut lambda = vec![0.0; n];
        let mut price = vec![0.0; n];
        let mut gamma = vec![0.0; n];
        let mut beta = vec![0.0; n];
        let mut ends = Vec::new();
        let (mut s, mut base) = (0, 0.0);
        while s < n {
            let is_low = |me: &mut Self, l: f64| matches!(me.first_violation(s, base, l, &bounds), Some((true, _)));
            let is_high = |me: &mut Self, l: f64| matches!(me.first_violation(s, base, l, &bounds), Some((false, _)));
            // Bracket the price where the first broken bound switches type.
            let (below, above) = match self.first_violation(s, base, 0.0, &bounds) {
                None => (0.0, 0.0),
                Some((true, _)) => {
                    let (mut lo, mut hi) = (0.0, self.q.max(1e-300));
                    while is_low(self, hi) && hi < 1e300 {
                        lo = hi;
                        hi *= 2.0;
                    }
                    bisect(&mut lo, &mut hi, |l| is_low(self, l));
                    (lo, hi)
                }
                Some((false, _)) => {
                    let (mut lo, mut hi) = (-self.q.max(1e-300), 0.0);
                    while is_high(self, lo) && lo > lam_floor {
                        hi = lo;
                        lo *= 2.0;
                    }
                    bisect(&mut lo, &mut hi, |l| !is_high(self, l));
                    (lo, hi)
                }
            };
            let end_u = match self.first_violation(s, base, below, &bounds) {
                Some((true, e)) if below < above => Some(e),
                _ => None,
            };
            let end_l = match self.first_violation(s, base, above, &bounds) {
                Some((false, e)) if below < above => Some(e),
                _ => None,
            };
            let (end, target, lam) = match (end_u, end_l) {
                (Some(u), Some(l)) if l < u => (l, Target::Lower, below),
                (Some(u), _) => (u, Target::Upper, above),
                (None, Some(l)) => (l, Target::Lower, below),
                (None, None) => (n - 1, Target::Free, if below < above { below } else { above }),
            };
            for m in s..=end {
                let d = self.demand(m, lam);
                price[m] = d.c;
                lambda[m] = lam;
                plan.users[m * nf..(m + 1) * nf].copy_from_slice(&self.users);
                plan.power[m * nf..(m + 1) * nf].copy_from_slice(&self.power);
            }
            base = match target {
                Target::Upper => bounds.upper[end],
                Target::Lower => bounds.lower[end],
                Target::Free => base,
            };
            ends.push((end, target));
            s = end + 1;
        }
        // Price changes at segment ends give the multipliers of the bound
        // that was touched there.
        for &(e, t) in &ends {
            let next = if e + 1 < n { lambda[e + 1] } else { 0.0 };
            match t {
                Target::Upper => gamma[e] = (lambda[e] - next).max(0.0),
                Target::Lower if e + 1 < n => beta[e + 1] = (next - lambda[e]).max(0.0),
                _ => gamma[e] = lambda[e].max(0.0),
            }
        }
        let mut psi = vec![0.0; n];
        let mut mu = vec![0.0; n];
        for j in 0..n {
            let c_n = eps * self.q;
            let c_h = eps * (self.q * cfg.phi + lambda[j]);
            if c_h > c_n && self.curves[j].c_kink == Some(price[j]) && price[j] > c_n {
                mu[j] = (price[j] - c_n) / eps;
            } else {
                psi[j] = (price[j] - c_h.min(c_n)).max(0.0);
            }
        }
        SegmentOut { plan, gamma, beta, psi, mu }
    }

    fn solve_rho(&mut self, rho: f64) -> (Repaired, SegmentOut) {
        self.set_rho(rho);
        let out = self.solve();
        (self.inst.repair(out.plan.clone()), out)
    }

    fn run(&mut self, seed: Option<Repaired>, rate_active: bool, rate_required: bool) -> InnerOut {
        let r_min = self.inst.cfg.r_min_bits;
        let mut evals = 1;
        let mut rho = 0.0;
        let mut res = self.solve_rho(0.0);
        if rate_active && res.0.bits < r_min {
            let (mut lo, mut hi) = (0.0, 1.0);
            let mut hit = loop {
                evals += 1;
                let r = self.solve_rho(hi);
                if r.0.bits >= r_min || hi > 1e12 {
                    break r;
                }
                lo = hi;
                hi *= 4.0;
            };
            for _ in 0..60 {
                if hi - lo <= 1e-10 * hi {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                evals += 1;
                let r = self.solve_rho(mid);
                if r.0.bits >= r_min {
                    hi = mid;
                    hit = r;
                } else {
                    lo = mid;
                }
            }
            rho = hi;
            res = hit;
        }
        let (mut best, out) = res;
        if let Some(s) = seed {
            if better(&s, &best, self.q, rate_required, r_min) {
                best = s;
            }
        }
        let mult = Multipliers { gamma: out.gamma, beta: out.beta, rho, mu: out.mu, psi: out.psi };
        InnerOut { best, mult, raw: out.plan, iters: evals }
    }
}

struct Bounds {
    /// Cumulative arrivals: the draw up to `e` may not exceed them.
    upper: Vec<f64>,
    /// Draw needed by `e` so the next arrival fits in the battery.
    lower: Vec<f64>,
    tol: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Target {
    Upper,
    Lower,
    Free,
}

/// Narrows `[lo, hi]` to the switch point of a predicate that holds at `lo`
/// and fails at `hi`.
fn bisect(lo: &mut f64, hi: &mut f64, mut holds: impl FnMut(f64) -> bool) {
    for _ in 0..200 {
        let mid = 0.5 * (*lo + *hi);
        if mid <= *lo || mid >= *hi || *hi - *lo <= 1e-15 * lo.abs().max(hi.abs()) {
            break;
        }
        if holds(mid) {
            *lo = mid;
        } else {
            *hi = mid;
        }
    }
}

/// Raw policy of a plan with the printed source split and the ledger rule
/// for the circuit.
fn raw_policy(inst: &Instance, plan: &Plan, m: &Multipliers, q: f64, st: &InnerSolveSettings) -> Policy {
    let cfg = inst.cfg;
    let (nf, k_n) = (cfg.n_subcarriers, cfg.n_users);
    let eps = cfg.pa_ineff;
    let mut pol = Vec::with_capacity(inst.tl.len());
    let (mut cum_pa, mut cum_circ) = (0.0, 0.0);
    for (j, e) in inst.tl.epochs.iter().enumerate() {
        let mut a = EpochAlloc::idle(nf * k_n, cfg.circuit_power_w);
        for i in 0..nf {
            let k = plan.users[j * nf + i];
            let (pe, pn) = power_alloc_epoch(j, k, m, q, e.cnr[i * k_n + k], cfg, st.denom_floor);
            let idx = i * k_n + k;
            a.s[idx] = 1.0;
            a.p_e[idx] = pe;
            a.p_n[idx] = pn;
        }
        cum_pa += e.length * eps * a.radiated_harvest();
        let (pce, pcn) = circuit_split(inst.cum[j], cum_pa, cum_circ, e.length, cfg.circuit_power_w);
        cum_circ += pce * e.length;
        a.pc_e = pce;
        a.pc_n = pcn;
        pol.push(a);
    }
    pol
}

/// Runs the configured inner method once for a fixed `q`.
fn inner_once(
    inst: &Instance,
    st: &InnerSolveSettings,
    q: f64,
    mult: Multipliers,
    seed: Option<Repaired>,
    rate_active: bool,
    rate_required: bool,
    ops: &mut u64,
) -> InnerOut {
    match st.method {
        InnerMethod::Segment => {
            let mut s = SegmentSolver::new(inst, st, q);
            let out = s.run(seed, rate_active, rate_required);
            *ops += s.ops;
            out
        }
        InnerMethod::Subgradient => {
            let mut dl = DualLoop { inst, st, rate_active, ops: 0 };
            let out = dl.run(q, mult, seed, rate_required);
            *ops += dl.ops;
            out
        }
    }
}

/// Best policy of `max U - q U_TP` found by the inner method, with multipliers.
pub fn inner_dual_solve(
    tl: &Timeline,
    cfg: &SystemConfig,
    q: f64,
    st: &InnerSolveSettings,
) -> (Policy, Multipliers) {
    let inst = Instance::new(tl, cfg);
    let rate_active = cfg.r_min_bits > 0.0 && max_rate_bound(tl, cfg) >= cfg.r_min_bits;
    let mut ops = 0;
    let out = inner_once(&inst, st, q, Multipliers::zeros(tl.len()), None, rate_active, rate_active, &mut ops);
    (out.best.to_policy(cfg, tl.len()), out.mult)
}

/// Dinkelbach iteration around the inner solver.
pub fn dinkelbach_solve(tl: &Timeline, cfg: &SystemConfig, st: &InnerSolveSettings) -> (Policy, SolveReport) {
    let (pol, report, _) = dinkelbach_with_state(tl, cfg, st);
    (pol, report)
}

pub fn dinkelbach_with_state(
    tl: &Timeline,
    cfg: &SystemConfig,
    st: &InnerSolveSettings,
) -> (Policy, SolveReport, DinkelbachState) {
    let (pol, report, state, _) = dinkelbach_full(tl, cfg, st);
    (pol, report, state)
}

/// Dinkelbach run that also hands back the multipliers of the last inner solve.
pub(crate) fn dinkelbach_full(
    tl: &Timeline,
    cfg: &SystemConfig,
    st: &InnerSolveSettings,
) -> (Policy, SolveReport, DinkelbachState, Multipliers) {
    let inst = Instance::new(tl, cfg);
    let qos_feasible = cfg.r_min_bits <= 0.0 || max_rate_bound(tl, cfg) >= cfg.r_min_bits;
    let rate_active = cfg.r_min_bits > 0.0 && qos_feasible;
    let mut state = DinkelbachState { q: 0.0, iter: 0, history: Vec::new(), converged: false };
    let mut mult = Multipliers::zeros(tl.len());
    let mut incumbent: Option<Repaired> = None;
    let mut inner_iters = Vec::new();
    let mut last_raw = None;
    let mut rate_required = rate_active;
    let mut ops = 0;
    for _ in 0..st.max_outer_iters {
        let q = state.q;
        let out = inner_once(&inst, st, q, mult, incumbent.clone(), rate_active, rate_required, &mut ops);
        let best = out.best;
        inner_iters.push(out.iters);
        state.iter += 1;
        let f = best.objective(q);
        let q_next = if best.u_tp > 0.0 { best.u / best.u_tp } else { 0.0 };
        state.history.push(DinkelbachStep { q: q_next, u: best.u, u_tp: best.u_tp });
        last_raw = Some((out.raw, out.mult.clone(), q));
        // If no repaired iterate meets the rate requirement, stop enforcing it.
        if rate_required && best.bits < cfg.r_min_bits {
            rate_required = false;
        }
        let u = best.u;
        incumbent = Some(best);
        // Price-like multipliers scale with q; carry them over proportionally.
        mult = out.mult;
        if q > 0.0 && q_next > 0.0 {
            let ratio = q_next / q;
            mult.gamma.iter_mut().chain(mult.beta.iter_mut()).chain(mult.mu.iter_mut()).for_each(|v| *v *= ratio);
        }
        let done = q > 0.0 && f <= st.dinkelbach_tol * u.max(f64::MIN_POSITIVE);
        state.q = q_next;
        if done || q_next == 0.0 {
            state.converged = true;
            break;
        }
    }
    let best = incumbent.expect("at least one outer iteration");
    let pol = best.to_policy(cfg, tl.len());
    let audit = metrics::audit_constraints(&pol, tl, cfg);
    let mut report = SolveReport::build("offline", &pol, tl, cfg, audit, qos_feasible);
    report.q_history = state.history.iter().map(|h| h.q).collect();
    report.converged = state.converged;
    report.inner_iters = inner_iters;
    report.ops = ops;
    let mut last_mult = Multipliers::zeros(tl.len());
    if let Some((plan, m, q)) = last_raw {
        let raw = raw_policy(&inst, &plan, &m, q, st);
        report.ee_pre_projection = metrics::energy_efficiency(&raw, tl, cfg);
        report.multipliers = Some(MultiplierNorms::of(&m));
        last_mult = m;
    }
    (pol, report, state, last_mult)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Epoch;
    use crate::oracle;
    use approx::assert_relative_eq;
    use rand::Rng;

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
            ..SystemConfig::desk_default()
        }
    }

    fn timeline(eps: Vec<(f64, Vec<f64>, f64)>, e0: f64) -> Timeline {
        let epochs = eps
            .into_iter()
            .map(|(l, cnr, e)| Epoch { index: 0, start: 0.0, length: l, cnr, energy_in: e })
            .collect();
        Timeline::from_epochs(epochs, e0).unwrap()
    }

    #[test]
    fn water_levels_hand_case() {
        // Prices 1/ln2 and 2/ln2 with unit weight give levels 1 and 0.5.
        let (pe, pn) = water_levels(1.0, 10.0, 1.0 / LN_2, 2.0 / LN_2, 1e-12);
        assert_relative_eq!(pe, 0.9, epsilon = 1e-12);
        assert_eq!(pn, 0.0);
        assert_eq!(water_levels(1.0, 0.0, 1.0, 1.0, 1e-12), (0.0, 0.0));
        // Level exactly at the inverse CNR.
        assert_eq!(water_levels(LN_2, 1.0, 1.0, 1.0, 1e-12).0, 0.0);
    }

    #[test]
    fn water_levels_match_grid_maximization() {
        let (w, g, ce, cn) = (1.0, 10.0, LN_2, 2.0 * LN_2);
        let (pe, pn) = water_levels(w, g, ce, cn, 1e-12);
        let f = |a: f64, b: f64| w * (g * (a + b)).ln_1p() / LN_2 - ce * a - cn * b;
        let mut best = (f64::NEG_INFINITY, 0.0, 0.0);
        for ia in 0..=400 {
            for ib in 0..=100 {
                let (a, b) = (ia as f64 * 0.005, ib as f64 * 0.005);
                let v = f(a, b);
                if v > best.0 {
                    best = (v, a, b);
                }
            }
        }
        assert!((best.1 - pe).abs() <= 0.005 && (best.2 - pn).abs() <= 0.005);
    }

    #[test]
    fn harvest_preferred_with_zero_multipliers() {
        let cfg = unit_cfg(1, 1);
        let m = Multipliers::zeros(1);
        let (pe, pn) = power_alloc_epoch(0, 0, &m, 0.5, 20.0, &cfg, 1e-12);
        let level_n = cfg.subcarrier_bw() / (LN_2 * 0.5 * cfg.pa_ineff) - 1.0 / 20.0;
        assert!(pe > level_n.max(0.0));
        assert_eq!(pn, 0.0);
        // Huge q switches everything off.
        assert_eq!(power_alloc_epoch(0, 0, &m, 1e9, 20.0, &cfg, 1e-12), (0.0, 0.0));
    }

    #[test]
    fn marginal_benefit_values() {
        assert_eq!(marginal_benefit(1.0, 1.0, 0.0), 0.0);
        assert_relative_eq!(marginal_benefit(1.0, 1.0, 1.0), 1.0 - 1.0 / (2.0 * LN_2), epsilon = 1e-12);
        let big = marginal_benefit(1.0, 1.0, 1e9);
        assert_relative_eq!(big, (1e9f64).log2() - 1.0 / LN_2, max_relative = 1e-6);
        assert!(marginal_benefit(1.0, 1.0, 2e9) > big);
    }

    #[test]
    fn marginal_benefit_is_share_derivative() {
        // d/ds [w s log2(1 + g pt / s)] at fixed radiated pt, evaluated at s = 1.
        let (w, g, pt) = (1.3, 2.0, 0.7);
        let f = |s: f64| w * s * (g * pt / s).ln_1p() / LN_2;
        let h = 1e-6;
        let num = (f(1.0 + h) - f(1.0 - h)) / (2.0 * h);
        assert_relative_eq!(marginal_benefit(w, g, pt), num, max_relative = 1e-6);
    }

    #[test]
    fn user_selection() {
        assert_eq!(select_user(&[0.5]), 0);
        assert_eq!(select_user(&[0.2, 0.2, 0.2]), 0);
        assert_eq!(select_user(&[0.1, 0.3]), 1);
    }

    #[test]
    fn circuit_split_cases() {
        assert_eq!(circuit_split(0.0, 0.0, 0.0, 1.0, 2.0), (0.0, 2.0));
        assert_eq!(circuit_split(10.0, 0.0, 0.0, 1.0, 2.0), (2.0, 0.0));
        assert_eq!(circuit_split(1.0, 0.0, 0.0, 1.0, 2.0), (1.0, 1.0));
    }

    #[test]
    fn multiplier_update_directions() {
        let mut m = Multipliers::zeros(2);
        m.gamma = vec![1.0, 1.0];
        m.mu = vec![1.0, 1.0];
        m.psi = vec![1.0, 1.0];
        m.beta = vec![0.0, 1.0];
        m.rho = 1.0;
        let pos = Slacks { gamma: vec![1.0; 2], beta: vec![1.0; 2], rho: 1.0, mu: vec![1.0; 2], psi: vec![1.0; 2] };
        let step = Slacks { gamma: vec![0.5; 2], beta: vec![0.5; 2], rho: 0.5, mu: vec![0.5; 2], psi: vec![0.5; 2] };
        let down = project_step(&m, &pos, &step);
        assert!(down.gamma.iter().all(|&v| v == 0.5));
        assert_eq!(down.beta, vec![0.0, 0.5]);
        let mut neg = pos.clone();
        neg.gamma[1] = -1.0;
        let up = project_step(&m, &neg, &step);
        assert!(up.gamma[1] > m.gamma[1]);
        let big = Slacks { gamma: vec![10.0; 2], ..pos };
        assert!(project_step(&m, &big, &step).is_valid());
    }

    #[test]
    fn zero_channel_gives_zero_q() {
        let cfg = unit_cfg(2, 1);
        let tl = timeline(vec![(1.0, vec![0.0, 0.0], 0.0)], 0.0);
        let (pol, rep) = dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
        assert_eq!(rep.ee, 0.0);
        assert!(pol[0].radiated() == 0.0);
        assert!(rep.audit.passes());
    }

    #[test]
    fn single_epoch_matches_golden_section() {
        let cfg = unit_cfg(1, 1);
        for (g, e0) in [(3.0, 100.0), (25.0, 100.0), (0.8, 0.5)] {
            let tl = timeline(vec![(2.0, vec![g], 0.0)], e0);
            let (_, rep) = dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
            let f = |x: f64| {
                let bits = 2.0 * (g * x).ln_1p() / LN_2;
                let d = 2.0 * (cfg.circuit_power_w + cfg.pa_ineff * x);
                bits / (d - (1.0 - cfg.phi) * d.min(e0))
            };
            let (_, best) = oracle::golden_section_max(f, 0.0, cfg.p_max_w, 1e-12);
            assert_relative_eq!(rep.ee, best, max_relative = 1e-4);
            assert!(rep.audit.passes());
        }
    }

    #[test]
    fn two_epochs_match_oracle() {
        let cfg = unit_cfg(2, 1);
        let tl = timeline(vec![(1.0, vec![3.0, 0.5], 0.5), (1.5, vec![1.0, 6.0], 1.0)], 0.0);
        let (_, rep) = dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
        let o = oracle::offline_oracle(&tl, &cfg, 60).unwrap();
        assert_relative_eq!(rep.ee, o.ee, max_relative = 1e-3);
    }

    #[test]
    fn q_history_non_decreasing_and_root() {
        let cfg = unit_cfg(2, 2);
        let tl = timeline(
            vec![(1.0, vec![3.0, 0.5, 1.0, 2.0], 0.5), (0.5, vec![1.0, 6.0, 0.3, 0.2], 2.0), (1.0, vec![2.0, 2.0, 2.0, 2.0], 0.0)],
            0.2,
        );
        let st = InnerSolveSettings::default();
        let (pol, rep) = dinkelbach_solve(&tl, &cfg, &st);
        for w in rep.q_history.windows(2) {
            assert!(w[1] >= w[0] - 1e-9);
        }
        let q = *rep.q_history.last().unwrap();
        assert_relative_eq!(q, rep.ee, max_relative = 1e-12);
        let resid = oracle::dinkelbach_root_check(q, &pol, &tl, &cfg);
        assert!(resid.abs() <= st.dinkelbach_tol * rep.u + 1e-9);
    }

    #[test]
    fn huge_q_switches_off() {
        let cfg = unit_cfg(2, 1);
        let tl = timeline(vec![(1.0, vec![3.0, 0.5], 0.0)], 1.0);
        let (pol, _) = inner_dual_solve(&tl, &cfg, 1e12, &InnerSolveSettings::default());
        assert_eq!(pol[0].radiated(), 0.0);
    }

    #[test]
    fn sorted_waterfill_matches_oracle_bisection() {
        let g = [3.0, 0.2, 7.0, 1.0];
        for total in [0.01, 0.5, 3.0, 40.0] {
            let p = oracle::waterfill_weighted(&[1.0; 4], &g, total);
            let want: f64 = g.iter().zip(&p).map(|(g, p)| (g * p).ln_1p() / LN_2).sum();
            assert_relative_eq!(sorted_waterfill_rate(&g, total), want, max_relative = 1e-9);
        }
    }

    fn random_tiny(rng: &mut impl rand::Rng) -> (SystemConfig, Timeline) {
        let (nf, k, ne) = (rng.gen_range(1..=2), rng.gen_range(1..=2), rng.gen_range(1..=3));
        let mut cfg = unit_cfg(nf, k);
        cfg.alpha = (0..k).map(|_| rng.gen_range(0.3..=1.0)).collect();
        cfg.circuit_power_w = rng.gen_range(0.2..2.0);
        cfg.p_max_w = rng.gen_range(1.0..6.0);
        cfg.phi = rng.gen_range(0.01..0.5);
        cfg.pa_ineff = rng.gen_range(1.0..3.0);
        cfg.p_nonrenew_w = cfg.circuit_power_w + cfg.pa_ineff * cfg.p_max_w * rng.gen_range(0.3..1.5);
        cfg.e_max_j = rng.gen_range(1.0..10.0);
        let eps = (0..ne)
            .map(|j| {
                let cnr = (0..nf * k).map(|_| rng.gen_range(0.05..10.0)).collect();
                (rng.gen_range(0.3..2.0), cnr, if j == 0 { 0.0 } else { rng.gen_range(0.0..2.0) })
            })
            .collect();
        (cfg, timeline(eps, rng.gen_range(0.0..1.0)))
    }

    #[test]
    fn overflow_binding_is_respected() {
        // A large second arrival forces the first epoch to drain the battery.
        let mut cfg = unit_cfg(1, 1);
        cfg.e_max_j = 2.0;
        let tl = timeline(vec![(1.0, vec![2.0], 0.0), (1.0, vec![2.0], 1.9)], 2.0);
        let (pol, rep) = dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
        assert!(rep.audit.passes(), "{:?}", rep.audit.violated());
        assert!(pol[0].harvest_draw(cfg.pa_ineff) >= 1.9 - 1e-6);
        let o = oracle::offline_oracle(&tl, &cfg, 60).unwrap();
        assert_relative_eq!(rep.ee, o.ee, max_relative = 1e-3);
    }

    #[test]
    fn fixed_point_drift_is_small() {
        let cfg = unit_cfg(1, 1);
        let tl = timeline(vec![(2.0, vec![3.0], 0.0)], 1.0);
        let st = InnerSolveSettings::default();
        let (pol, rep) = dinkelbach_solve(&tl, &cfg, &st);
        let q = *rep.q_history.last().unwrap();
        let (_, m) = inner_dual_solve(&tl, &cfg, q, &st);
        let unit = Slacks { gamma: vec![1e-3], beta: vec![0.0], rho: 1e-3, mu: vec![1e-3], psi: vec![1e-3] };
        let next = multiplier_update(&m, &pol, &tl, &cfg, &unit);
        assert!((next.gamma[0] - m.gamma[0]).abs() < 1e-6);
        assert!((next.psi[0] - m.psi[0]).abs() < 1e-6);
        assert!((next.mu[0] - m.mu[0]).abs() < 1e-6);
    }

    #[test]
    fn splitting_an_epoch_does_not_help() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let st = InnerSolveSettings::default();
        for _ in 0..20 {
            let (cfg, tl) = random_tiny(&mut rng);
            let (_, whole) = dinkelbach_solve(&tl, &cfg, &st);
            let j = rng.gen_range(0..tl.len());
            let cut: f64 = rng.gen_range(0.2..0.8);
            let mut eps: Vec<_> = tl.epochs.iter().map(|e| (e.length, e.cnr.clone(), e.energy_in)).collect();
            let (l, cnr, _) = eps[j].clone();
            eps[j].0 = l * cut;
            eps.insert(j + 1, (l * (1.0 - cut), cnr, 0.0));
            let (_, split) = dinkelbach_solve(&timeline(eps, tl.e_initial_j), &cfg, &st);
            assert!((split.ee - whole.ee).abs() <= 1e-6 * whole.ee.max(1e-12), "{} vs {}", split.ee, whole.ee);
        }
    }

    #[test]
    fn nonrenewable_only_when_battery_runs_dry() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let st = InnerSolveSettings::default();
        for _ in 0..30 {
            let (cfg, tl) = random_tiny(&mut rng);
            let (pol, _) = dinkelbach_solve(&tl, &cfg, &st);
            let sl = constraint_slacks(&pol, &tl, &cfg);
            for j in 0..tl.len() {
                if pol[j].radiated_nonrenew() > 1e-9 {
                    let tight = sl.gamma[j..].iter().any(|&g| g.abs() <= 1e-6);
                    assert!(tight, "epoch {j} uses the supply with stored energy left: {:?}", sl.gamma);
                }
            }
        }
    }

    #[test]
    fn doubling_weights_doubles_weighted_bits() {
        let cfg = unit_cfg(2, 2);
        let tl = timeline(vec![(1.0, vec![3.0, 0.5, 1.0, 2.0], 0.0)], 1.0);
        let (pol, rep) = dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
        let mut c2 = cfg.clone();
        c2.alpha.iter_mut().for_each(|a| *a *= 2.0);
        assert_relative_eq!(metrics::weighted_capacity(&pol, &tl, &c2), 2.0 * rep.u, max_relative = 1e-12);
        assert_relative_eq!(metrics::energy_efficiency(&pol, &tl, &c2), 2.0 * rep.ee, max_relative = 1e-12);
    }

    #[test]
    fn subgradient_method_is_feasible_and_close() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let sub = InnerSolveSettings { method: InnerMethod::Subgradient, ..Default::default() };
        for _ in 0..10 {
            let (cfg, tl) = random_tiny(&mut rng);
            let (_, a) = dinkelbach_solve(&tl, &cfg, &sub);
            let (_, b) = dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
            assert!(a.audit.passes(), "{:?}\n{:?}", a.audit, b.audit);
            assert!(a.ee <= b.ee * (1.0 + 1e-6));
            assert!(a.ee >= 0.8 * b.ee, "{} vs {}", a.ee, b.ee);
        }
    }

    #[test]
    fn report_serializes() {
        let cfg = unit_cfg(1, 1);
        let tl = timeline(vec![(1.0, vec![3.0], 0.0)], 1.0);
        let (_, rep) = dinkelbach_solve(&tl, &cfg, &InnerSolveSettings::default());
        let js = serde_json::to_string(&rep).unwrap();
        let back: SolveReport = serde_json::from_str(&js).unwrap();
        assert_eq!(back, rep);
    }
}
