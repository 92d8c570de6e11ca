//! Discretized stochastic dynamic program for the online problem. Time is
//! cut into steps of `time_step`, the battery into a uniform grid, fading
//! into quantiles of the Rayleigh CNR (i.i.d. per coherence block) and
//! arrivals into one Bernoulli packet per step. Only toy sizes are allowed.
//!
//! Within a step the battery pays first (harvested energy is cheaper) and
//! the arrival of that step lands after the draw. The cost-to-go between
//! grid levels is read by linear interpolation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::metrics::{self, DEFAULT_AUDIT_TOL};
use crate::model::{Epoch, EpochAlloc, Policy, SystemConfig};
use crate::offline::SolveReport;
use crate::scenario::Timeline;

pub const MAX_PAIRS: usize = 8;
pub const MAX_BATTERY_LEVELS: usize = 64;
pub const MAX_STEPS: usize = 1000;
/// Cap on `(steps + 1) * battery levels * fading states`.
pub const MAX_TABLE_ENTRIES: usize = 20_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FadingState {
    /// Row-major `[n_F x K]` CNR.
    pub cnr: Vec<f64>,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpGridSpec {
    pub time_step_s: f64,
    pub n_battery: usize,
    /// Power levels per subcarrier, including zero and `P_max`.
    pub n_actions: usize,
    /// Quantiles per subcarrier-user pair.
    pub n_quantiles: usize,
}

impl Default for DpGridSpec {
    fn default() -> Self {
        Self { time_step_s: 0.01, n_battery: 32, n_actions: 9, n_quantiles: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DPGrid {
    pub time_step: f64,
    pub steps: usize,
    pub battery_levels: Vec<f64>,
    /// Per-subcarrier power levels; the total over subcarriers also stays on
    /// this grid, so the last level is the radiated cap.
    pub action_levels: Vec<f64>,
    pub fading_states: Vec<FadingState>,
    /// Steps per coherence block; fading is redrawn at multiples of this.
    pub block_steps: usize,
    pub arrival_prob: f64,
    pub arrival_energy: f64,
}

/// Conditional means and probabilities of `n` equal-probability bins of a
/// unit exponential.
pub fn exp_quantiles(n: usize) -> Vec<(f64, f64)> {
    let p = 1.0 / n as f64;
    (0..n)
        .map(|i| {
            let a = -(1.0 - i as f64 * p).ln();
            let mean = if i + 1 == n {
                a + 1.0
            } else {
                let b = -(1.0 - (i + 1) as f64 * p).ln();
                let (ea, eb) = ((-a).exp(), (-b).exp());
                (a * ea - b * eb + ea - eb) / (ea - eb)
            };
            (mean, p)
        })
        .collect()
}

pub fn linspace(hi: f64, n: usize) -> Vec<f64> {
    if n <= 1 || hi <= 0.0 {
        return vec![0.0];
    }
    (0..n).map(|i| hi * i as f64 / (n - 1) as f64).collect()
}

impl DPGrid {
    /// Grid for `cfg` with the given per-user large-scale gains.
    pub fn build(cfg: &SystemConfig, large_scale: &[f64], spec: &DpGridSpec) -> Result<Self> {
        if large_scale.len() != cfg.n_users {
            return Err(invalid("need one large-scale gain per user"));
        }
        if !(spec.time_step_s > 0.0) || spec.n_actions == 0 || spec.n_quantiles == 0 {
            return Err(invalid("time step, action grid and quantiles must be positive"));
        }
        let steps = (cfg.horizon_s / spec.time_step_s).round() as usize;
        let pairs = cfg.n_pairs();
        let states = (spec.n_quantiles as f64).powi(pairs as i32);
        let entries = (steps as f64 + 1.0) * spec.n_battery as f64 * states;
        check_scale(pairs, spec.n_battery, steps, entries)?;
        let q = exp_quantiles(spec.n_quantiles);
        let noise = cfg.noise_power_w();
        let n_states = states as usize;
        let fading_states = (0..n_states)
            .map(|mut s| {
                let mut cnr = vec![0.0; pairs];
                let mut prob = 1.0;
                for (idx, g) in cnr.iter_mut().enumerate() {
                    let (h, p) = q[s % spec.n_quantiles];
                    s /= spec.n_quantiles;
                    *g = large_scale[idx % cfg.n_users] * h / noise;
                    prob *= p;
                }
                FadingState { cnr, prob }
            })
            .collect();
        let grid = Self {
            time_step: spec.time_step_s,
            steps,
            battery_levels: linspace(cfg.e_max_j, spec.n_battery),
            action_levels: linspace(cfg.p_max_w, spec.n_actions),
            fading_states,
            block_steps: ((cfg.coherence_s / spec.time_step_s).round() as usize).max(1),
            arrival_prob: (cfg.arrival_rate_hz * spec.time_step_s).min(1.0),
            arrival_energy: cfg.packet_energy_j,
        };
        grid.validate(cfg)?;
        Ok(grid)
    }

    pub fn validate(&self, cfg: &SystemConfig) -> Result<()> {
        if !(self.time_step > 0.0) || self.steps == 0 || self.block_steps == 0 {
            return Err(invalid("time step and step count must be positive"));
        }
        if self.battery_levels.is_empty() || self.action_levels.is_empty() || self.fading_states.is_empty() {
            return Err(invalid("DP grids must be non-empty"));
        }
        if self.battery_levels.windows(2).any(|w| !(w[1] > w[0])) || self.battery_levels[0] != 0.0 {
            return Err(invalid("battery grid must start at 0 and increase"));
        }
        if self.action_levels.windows(2).any(|w| !(w[1] > w[0])) || self.action_levels[0] != 0.0 {
            return Err(invalid("action grid must start at 0 and increase"));
        }
        let total: f64 = self.fading_states.iter().map(|f| f.prob).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(invalid(format!("fading probabilities sum to {total}")));
        }
        if self.fading_states.iter().any(|f| f.cnr.len() != cfg.n_pairs() || !(f.prob >= 0.0)) {
            return Err(invalid("fading state has wrong size or negative probability"));
        }
        if !(0.0..=1.0).contains(&self.arrival_prob) || !(self.arrival_energy >= 0.0) {
            return Err(invalid("arrival probability must lie in [0,1]"));
        }
        Ok(())
    }

    fn e_max(&self) -> f64 {
        *self.battery_levels.last().expect("non-empty")
    }

    /// Linear interpolation of `vals` (one per battery level) at `e`.
    fn interp(&self, vals: &[f64], e: f64) -> f64 {
        let lv = &self.battery_levels;
        let e = e.clamp(0.0, self.e_max());
        if lv.len() == 1 {
            return vals[0];
        }
        let hi = lv.partition_point(|&x| x < e).clamp(1, lv.len() - 1);
        let w = (e - lv[hi - 1]) / (lv[hi] - lv[hi - 1]);
        (1.0 - w) * vals[hi - 1] + w * vals[hi]
    }

    fn nearest_level(&self, e: f64) -> usize {
        let lv = &self.battery_levels;
        let hi = lv.partition_point(|&x| x < e);
        if hi == 0 {
            0
        } else if hi == lv.len() || e - lv[hi - 1] <= lv[hi] - e {
            hi - 1
        } else {
            hi
        }
    }

    fn block_start(&self, m: usize) -> bool {
        m % self.block_steps == 0
    }

    fn check(&self, cfg: &SystemConfig) -> Result<()> {
        let entries = (self.steps as f64 + 1.0) * self.battery_levels.len() as f64 * self.fading_states.len() as f64;
        check_scale(cfg.n_pairs(), self.battery_levels.len(), self.steps, entries)?;
        self.validate(cfg)
    }
}

fn check_scale(pairs: usize, n_b: usize, steps: usize, entries: f64) -> Result<()> {
    if pairs > MAX_PAIRS || n_b > MAX_BATTERY_LEVELS || steps > MAX_STEPS || entries > MAX_TABLE_ENTRIES as f64 {
        return Err(Error::ScaleGuard(format!(
            "DP limited to n_F*K <= {MAX_PAIRS}, N_b <= {MAX_BATTERY_LEVELS}, {MAX_STEPS} steps and \
             {MAX_TABLE_ENTRIES} table entries; got n_F*K = {pairs}, N_b = {n_b}, {steps} steps, {entries:.0} entries"
        )));
    }
    Ok(())
}

/// Best joint action of one fading state at one total power level.
#[derive(Debug, Clone, PartialEq)]
struct Action {
    users: Vec<usize>,
    levels: Vec<usize>,
    /// Rate with weights `alpha + rho` (maximized).
    obj_rate: f64,
    /// Rate with weights `alpha`.
    u_rate: f64,
}

/// For every total level `x`, the assignment and per-subcarrier levels
/// summing to `x` that maximize the `alpha + rho` weighted rate.
fn best_actions(state: &FadingState, grid: &DPGrid, cfg: &SystemConfig, rho: f64) -> Vec<Action> {
    let (nf, k_n) = (cfg.n_subcarriers, cfg.n_users);
    let a_n = grid.action_levels.len();
    let w = cfg.subcarrier_bw();
    let rate = |i: usize, k: usize, l: usize| w * (1.0 + state.cnr[i * k_n + k] * grid.action_levels[l]).log2();
    // best[i][x]: first i subcarriers using x levels in total.
    let mut best = vec![vec![f64::NEG_INFINITY; a_n]; nf + 1];
    let mut pick = vec![vec![(0usize, 0usize); a_n]; nf + 1];
    best[0][0] = 0.0;
    for i in 0..nf {
        for x in 0..a_n {
            for l in 0..=x {
                let prev = best[i][x - l];
                if prev == f64::NEG_INFINITY {
                    continue;
                }
                for k in 0..k_n {
                    let v = prev + if l == 0 { 0.0 } else { (cfg.alpha[k] + rho) * rate(i, k, l) };
                    if v > best[i + 1][x] {
                        best[i + 1][x] = v;
                        pick[i + 1][x] = (k, l);
                    }
                    if l == 0 {
                        break;
                    }
                }
            }
        }
    }
    (0..a_n)
        .map(|x| {
            let (mut users, mut levels) = (vec![0; nf], vec![0; nf]);
            let mut rem = x;
            for i in (0..nf).rev() {
                let (k, l) = pick[i + 1][rem];
                users[i] = k;
                levels[i] = l;
                rem -= l;
            }
            let u_rate = (0..nf).filter(|&i| levels[i] > 0).map(|i| cfg.alpha[users[i]] * rate(i, users[i], levels[i])).sum();
            Action { users, levels, obj_rate: best[nf][x], u_rate }
        })
        .collect()
}

/// Energy split of one step: harvested energy drawn (J) and non-renewable
/// power (W), or `None` when the supply cap cannot cover the rest.
fn source_split(e: f64, x: f64, grid: &DPGrid, cfg: &SystemConfig) -> Option<(f64, f64)> {
    let demand = cfg.pa_ineff * x + cfg.circuit_power_w;
    let h = e.min(grid.time_step * demand);
    let n = demand - h / grid.time_step;
    (n <= cfg.p_nonrenew_w * (1.0 + 1e-12)).then_some((h, n.max(0.0)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueTable {
    pub q: f64,
    pub rate_penalty: f64,
    pub steps: usize,
    pub n_battery: usize,
    pub n_states: usize,
    /// Cost-to-go `J*[m][b][s]`, `(steps + 1) x N_b x S`.
    pub value: Vec<f64>,
    /// Total power level chosen at `[m][b][s]`, `steps x N_b x S`.
    pub policy: Vec<u32>,
    /// Expected weighted bits and weighted energy still to come under the policy.
    pub exp_u: Vec<f64>,
    pub exp_tp: Vec<f64>,
}

impl ValueTable {
    fn idx(&self, m: usize, b: usize, s: usize) -> usize {
        (m * self.n_battery + b) * self.n_states + s
    }

    pub fn value(&self, m: usize, b: usize, s: usize) -> f64 {
        self.value[self.idx(m, b, s)]
    }

    pub fn action(&self, m: usize, b: usize, s: usize) -> usize {
        self.policy[self.idx(m, b, s)] as usize
    }

    /// Fading-averaged table entry at step `m`, battery level `b`.
    fn averaged(&self, v: &[f64], grid: &DPGrid, m: usize, b: usize) -> f64 {
        grid.fading_states.iter().enumerate().map(|(s, f)| f.prob * v[self.idx(m, b, s)]).sum()
    }

    /// Expected value at the start for initial battery energy `e0`.
    pub fn start_value(&self, grid: &DPGrid, e0: f64) -> f64 {
        self.start(&self.value, grid, e0)
    }

    /// Expected weighted bits and weighted energy from the start.
    pub fn start_expectations(&self, grid: &DPGrid, e0: f64) -> (f64, f64) {
        (self.start(&self.exp_u, grid, e0), self.start(&self.exp_tp, grid, e0))
    }

    fn start(&self, v: &[f64], grid: &DPGrid, e0: f64) -> f64 {
        let per_b: Vec<f64> = (0..self.n_battery).map(|b| self.averaged(v, grid, 0, b)).collect();
        grid.interp(&per_b, e0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Backward induction for `max E[U - q U_TP]`, with `rate_penalty` added to
/// every user weight in the maximization.
pub fn dp_backward(grid: &DPGrid, cfg: &SystemConfig, q: f64, rate_penalty: f64) -> Result<ValueTable> {
    grid.check(cfg)?;
    let (n_b, n_s, n_m) = (grid.battery_levels.len(), grid.fading_states.len(), grid.steps);
    let actions: Vec<Vec<Action>> = grid.fading_states.iter().map(|f| best_actions(f, grid, cfg, rate_penalty)).collect();
    let size = (n_m + 1) * n_b * n_s;
    let mut t = ValueTable {
        q,
        rate_penalty,
        steps: n_m,
        n_battery: n_b,
        n_states: n_s,
        value: vec![0.0; size],
        policy: vec![0; n_m * n_b * n_s],
        exp_u: vec![0.0; size],
        exp_tp: vec![0.0; size],
    };
    let (eps_t, p, pkt, e_max) = (grid.time_step, grid.arrival_prob, grid.arrival_energy, grid.e_max());
    for m in (0..n_m).rev() {
        // Continuation tables indexed by battery level; shared by all
        // states when fading is redrawn at the next step.
        let shared = grid.block_start(m + 1);
        let next = |v: &[f64], s: usize| -> Vec<f64> {
            (0..n_b)
                .map(|b| if shared { t.averaged(v, grid, m + 1, b) } else { v[t.idx(m + 1, b, s)] })
                .collect()
        };
        let conts: Vec<[Vec<f64>; 3]> = (0..if shared { 1 } else { n_s })
            .map(|s| [next(&t.value, s), next(&t.exp_u, s), next(&t.exp_tp, s)])
            .collect();
        for s in 0..n_s {
            let [nj, nu, nt] = &conts[if shared { 0 } else { s }];
            let expect = |v: &[f64], rest: f64| {
                (1.0 - p) * grid.interp(v, rest) + p * grid.interp(v, (rest + pkt).min(e_max))
            };
            for b in 0..n_b {
                let e = grid.battery_levels[b];
                let mut best: Option<(usize, f64, f64, f64)> = None;
                for (x, act) in actions[s].iter().enumerate() {
                    let Some((h, n)) = source_split(e, grid.action_levels[x], grid, cfg) else { continue };
                    let cost = cfg.phi * h + eps_t * n;
                    let rest = e - h;
                    let total = eps_t * act.obj_rate - q * cost + expect(nj, rest);
                    if best.map_or(true, |(_, v, _, _)| total > v) {
                        let u = eps_t * act.u_rate + expect(nu, rest);
                        let tp = cost + expect(nt, rest);
                        best = Some((x, total, u, tp));
                    }
                }
                let (x, v, u, tp) = best.expect("idle action is always feasible");
                let i = t.idx(m, b, s);
                t.value[i] = v;
                t.policy[i] = x as u32;
                t.exp_u[i] = u;
                t.exp_tp[i] = tp;
            }
        }
    }
    if t.value.iter().any(|v| !v.is_finite()) {
        return Err(invalid("non-finite value in DP table"));
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DpSettings {
    pub grid: DpGridSpec,
    pub max_outer_iters: usize,
    /// Stop when `|E[U] - q E[U_TP]|` falls below this fraction of `E[U]`.
    pub tol: f64,
    /// Fixed multiplier of the average-rate constraint.
    pub rate_penalty: f64,
}

impl Default for DpSettings {
    fn default() -> Self {
        Self { grid: DpGridSpec::default(), max_outer_iters: 30, tol: 1e-9, rate_penalty: 0.0 }
    }
}

#[derive(Debug, Clone)]
pub struct DpSolution {
    pub q: f64,
    pub table: ValueTable,
    pub q_history: Vec<f64>,
    pub converged: bool,
}

/// Dinkelbach iteration around the DP: `q <- E[U] / E[U_TP]` of the policy
/// optimal for the current `q`, from the initial battery `cfg.e_initial_j`.
pub fn dinkelbach_outer_dp(grid: &DPGrid, cfg: &SystemConfig, st: &DpSettings) -> Result<DpSolution> {
    let e0 = cfg.e_initial_j;
    let mut q = 0.0;
    let mut hist = Vec::new();
    for _ in 0..st.max_outer_iters.max(1) {
        let table = dp_backward(grid, cfg, q, st.rate_penalty)?;
        let (eu, etp) = table.start_expectations(grid, e0);
        let q_next = if etp > 0.0 { eu / etp } else { 0.0 };
        hist.push(q_next);
        let done = (eu - q * etp).abs() <= st.tol * eu.max(f64::MIN_POSITIVE) || q_next == 0.0;
        if done {
            return Ok(DpSolution { q: q_next, table, q_history: hist, converged: true });
        }
        q = q_next;
    }
    let table = dp_backward(grid, cfg, q, st.rate_penalty)?;
    Ok(DpSolution { q, table, q_history: hist, converged: false })
}

/// Index of the fading state closest (in log CNR) to `cnr`, pair by pair.
/// Only valid for grids built as a full product of per-pair quantiles.
fn quantize_fading(grid: &DPGrid, cnr: &[f64]) -> usize {
    let n_s = grid.fading_states.len();
    let pairs = cnr.len();
    let nq = if pairs == 0 { 1 } else { (n_s as f64).powf(1.0 / pairs as f64).round() as usize };
    if nq.checked_pow(pairs as u32) != Some(n_s) {
        // Not a product grid: fall back to the nearest joint state.
        let dist = |f: &FadingState| f.cnr.iter().zip(cnr).map(|(a, b)| (a.max(1e-300).ln() - b.max(1e-300).ln()).powi(2)).sum::<f64>();
        return (0..n_s).min_by(|&a, &b| dist(&grid.fading_states[a]).total_cmp(&dist(&grid.fading_states[b]))).unwrap_or(0);
    }
    let mut s = 0;
    let mut stride = 1;
    for (idx, &g) in cnr.iter().enumerate() {
        // Representative of quantile j for this pair sits at state j * stride.
        let rep = |j: usize| grid.fading_states[j * stride].cnr[idx];
        let best = (0..nq)
            .min_by(|&a, &b| {
                let d = |j: usize| (rep(j).max(1e-300).ln() - g.max(1e-300).ln()).abs();
                d(a).total_cmp(&d(b))
            })
            .unwrap_or(0);
        s += best * stride;
        stride *= nq;
    }
    s
}

#[derive(Debug, Clone)]
pub struct DpEval {
    pub policy: Policy,
    /// Steps cut at the timeline's event times.
    pub timeline: Timeline,
    pub report: SolveReport,
    /// Battery energy at every step boundary.
    pub battery: Vec<f64>,
}

/// Runs the stored policy forward on a concrete timeline whose horizon is
/// `steps * time_step`. Battery and fading are quantized for the table
/// lookup; energy and bits are billed with the true values.
pub fn dp_policy_eval(tbl: &ValueTable, tl: &Timeline, grid: &DPGrid, cfg: &SystemConfig) -> Result<DpEval> {
    let span = grid.steps as f64 * grid.time_step;
    if (tl.horizon_s - span).abs() > 1e-9 * span {
        return Err(invalid(format!("timeline horizon {} differs from DP span {span}", tl.horizon_s)));
    }
    if tbl.steps != grid.steps || tbl.n_battery != grid.battery_levels.len() || tbl.n_states != grid.fading_states.len() {
        return Err(invalid("value table does not belong to this grid"));
    }
    let actions: Vec<Vec<Action>> =
        grid.fading_states.iter().map(|f| best_actions(f, grid, cfg, tbl.rate_penalty)).collect();
    let (nf, k_n) = (cfg.n_subcarriers, cfg.n_users);
    let eps = cfg.pa_ineff;
    let e_max = cfg.e_max_j;
    let tol = 1e-9 * grid.time_step;
    let mut e = tl.e_initial_j.clamp(0.0, e_max);
    let mut battery = vec![e];
    let mut pieces = Vec::new();
    let mut policy = Vec::new();
    let mut inflow = Vec::new();
    let mut carry = 0.0;
    let mut next_epoch = 0;
    let add_arrival = |e: &mut f64, amount: f64, carry: &mut f64| {
        let stored = (*e + amount).min(e_max) - *e;
        *e += stored;
        *carry += stored;
    };
    for m in 0..grid.steps {
        let (t0, t1) = (m as f64 * grid.time_step, (m + 1) as f64 * grid.time_step);
        // Arrivals at the step start are usable in this step.
        while next_epoch < tl.len() && tl.epochs[next_epoch].start <= t0 + tol {
            add_arrival(&mut e, tl.epochs[next_epoch].energy_in, &mut carry);
            next_epoch += 1;
        }
        let cur = tl.epochs.partition_point(|ep| ep.start <= t0 + tol).saturating_sub(1);
        let s = quantize_fading(grid, &tl.epochs[cur].cnr);
        let b = grid.nearest_level(e);
        let x = tbl.action(m, b, s);
        let act = &actions[s][x];
        let mut total = grid.action_levels[x];
        let mut demand = eps * total + cfg.circuit_power_w;
        let h_rate = (e / grid.time_step).min(demand);
        if demand - h_rate > cfg.p_nonrenew_w {
            demand = cfg.p_nonrenew_w + h_rate;
            total = (demand - cfg.circuit_power_w) / eps;
        }
        let h_rate = h_rate.min(demand);
        let scale = if grid.action_levels[x] > 0.0 { total / grid.action_levels[x] } else { 0.0 };
        let mut a = EpochAlloc::idle(nf * k_n, cfg.circuit_power_w);
        let pa_h = (h_rate / eps).min(total);
        let f = if total > 0.0 { pa_h / total } else { 0.0 };
        for i in 0..nf {
            if act.levels[i] == 0 {
                continue;
            }
            let idx = i * k_n + act.users[i];
            let p = grid.action_levels[act.levels[i]] * scale;
            a.s[idx] = 1.0;
            a.p_e[idx] = f * p;
            a.p_n[idx] = p - f * p;
        }
        a.pc_e = (h_rate - eps * pa_h).clamp(0.0, cfg.circuit_power_w);
        a.pc_n = cfg.circuit_power_w - a.pc_e;
        // Cut the step at event times inside it.
        let mut cuts = vec![t0];
        cuts.extend(tl.epochs.iter().map(|ep| ep.start).filter(|&st| st > t0 + tol && st < t1 - tol));
        cuts.push(t1);
        for w in cuts.windows(2) {
            let ep = tl.epochs.partition_point(|ep| ep.start <= w[0] + tol).saturating_sub(1);
            pieces.push(Epoch { index: 0, start: 0.0, length: w[1] - w[0], cnr: tl.epochs[ep].cnr.clone(), energy_in: 0.0 });
            inflow.push(std::mem::take(&mut carry));
            policy.push(a.clone());
        }
        e = (e - grid.time_step * a.harvest_draw(eps)).max(0.0);
        // Arrivals strictly inside the step land after its draw.
        while next_epoch < tl.len() && tl.epochs[next_epoch].start < t1 - tol {
            add_arrival(&mut e, tl.epochs[next_epoch].energy_in, &mut carry);
            next_epoch += 1;
        }
        battery.push(e);
    }
    for (p, v) in pieces.iter_mut().zip(&inflow) {
        p.energy_in = *v;
    }
    let timeline = Timeline::from_epochs(pieces, tl.e_initial_j.clamp(0.0, e_max))?;
    let audit_inflow: Vec<f64> = timeline.epochs.iter().map(|p| p.energy_in).collect();
    let audit = metrics::audit_with_inflow(&policy, &timeline, cfg, &audit_inflow, DEFAULT_AUDIT_TOL);
    let mut report = SolveReport::build("online-dp", &policy, &timeline, cfg, audit, true);
    report.q_history = vec![tbl.q];
    report.converged = true;
    Ok(DpEval { policy, timeline, report, battery })
}

/// One realization of the DP's own model as a timeline of steps: fading
/// states drawn per block, one packet per step with the arrival probability,
/// landing at the start of the next step.
pub fn sample_dp_timeline<R: Rng>(grid: &DPGrid, cfg: &SystemConfig, rng: &mut R) -> Result<Timeline> {
    let mut epochs = Vec::with_capacity(grid.steps);
    let mut s = 0;
    let mut arrival = 0.0;
    for m in 0..grid.steps {
        if grid.block_start(m) {
            let u: f64 = rng.gen();
            let mut acc = 0.0;
            s = grid.fading_states.len() - 1;
            for (i, f) in grid.fading_states.iter().enumerate() {
                acc += f.prob;
                if u < acc {
                    s = i;
                    break;
                }
            }
        }
        epochs.push(Epoch {
            index: m,
            start: 0.0,
            length: grid.time_step,
            cnr: grid.fading_states[s].cnr.clone(),
            energy_in: arrival,
        });
        arrival = if rng.gen::<f64>() < grid.arrival_prob { grid.arrival_energy } else { 0.0 };
    }
    Timeline::from_epochs(epochs, cfg.e_initial_j)
}
