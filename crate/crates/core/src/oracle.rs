//! Brute-force references for tiny instances.
//!
//! Nothing here shares code with the solvers. Per-epoch rates come from an
//! exhaustive sweep over binary subcarrier assignments with a bisection
//! water-filling, energy sourcing from an interval propagation of the
//! battery constraints, and the outer search is a grid with zoom refinement.

use nalgebra::{Matrix5, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{shared_rate, Epoch, EpochAlloc, SystemConfig};
use crate::scenario::Timeline;

pub const MAX_ORACLE_PAIRS: usize = 4;
pub const MAX_GRID_RES: usize = 200;

/// Powers maximizing `sum a_i log2(1 + g_i p_i)` under `sum p_i = total`.
pub fn waterfill_weighted(a: &[f64], g: &[f64], total: f64) -> Vec<f64> {
    let n = a.len();
    if total <= 0.0 || g.iter().all(|&x| x <= 0.0) {
        return vec![0.0; n];
    }
    let fill = |nu: f64| -> f64 {
        a.iter()
            .zip(g)
            .map(|(&ai, &gi)| if gi > 0.0 { (ai * nu - 1.0 / gi).max(0.0) } else { 0.0 })
            .sum()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    while fill(hi) < total {
        hi *= 2.0;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if fill(mid) < total {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-15 * hi {
            break;
        }
    }
    let mut p: Vec<f64> = a
        .iter()
        .zip(g)
        .map(|(&ai, &gi)| if gi > 0.0 { (ai * hi - 1.0 / gi).max(0.0) } else { 0.0 })
        .collect();
    // Remove the bisection residue so the budget is met exactly.
    let sum: f64 = p.iter().sum();
    if sum > 0.0 {
        p.iter_mut().for_each(|x| *x *= total / sum);
    }
    p
}

/// Best binary assignment and powers of one epoch at total radiated power `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRate {
    /// Weighted bits per second.
    pub weighted: f64,
    /// Unweighted bits per second of the same allocation.
    pub plain: f64,
    /// User chosen on each subcarrier.
    pub users: Vec<usize>,
    pub powers: Vec<f64>,
}

pub fn epoch_rate(epoch: &Epoch, cfg: &SystemConfig, x: f64) -> EpochRate {
    let (nf, k_n) = (cfg.n_subcarriers, cfg.n_users);
    let w = cfg.subcarrier_bw();
    let combos = k_n.pow(nf as u32);
    let mut best: Option<EpochRate> = None;
    let mut users = vec![0usize; nf];
    for code in 0..combos {
        let mut c = code;
        for u in users.iter_mut() {
            *u = c % k_n;
            c /= k_n;
        }
        let a: Vec<f64> = users.iter().map(|&k| cfg.alpha[k]).collect();
        let g: Vec<f64> = users.iter().enumerate().map(|(i, &k)| epoch.cnr[i * k_n + k]).collect();
        let p = waterfill_weighted(&a, &g, x);
        let mut weighted = 0.0;
        let mut plain = 0.0;
        for i in 0..nf {
            let r = w * (g[i] * p[i]).ln_1p() / std::f64::consts::LN_2;
            weighted += a[i] * r;
            plain += r;
        }
        if best.as_ref().map_or(true, |b| weighted > b.weighted) {
            best = Some(EpochRate { weighted, plain, users: users.clone(), powers: p });
        }
    }
    best.expect("at least one assignment")
}

/// Largest total harvested energy usable under causality, battery capacity
/// and per-epoch draw bounds `lo[j] <= h[j] <= hi[j]`. `None` if no schedule
/// satisfies the bounds.
pub fn max_harvest(lo: &[f64], hi: &[f64], cum_arrivals: &[f64], e_max: f64) -> Option<f64> {
    let n = lo.len();
    let (mut a, mut b) = (0.0f64, 0.0f64);
    for e in 0..n {
        a += lo[e];
        b += hi[e];
        b = b.min(cum_arrivals[e]);
        if e + 1 < n {
            a = a.max(cum_arrivals[e + 1] - e_max);
        }
        if a > b + 1e-12 * (1.0 + b.abs()) {
            return None;
        }
    }
    Some(b)
}

/// Generic grid search with zoom refinement over a box. `f` returns `None`
/// for infeasible points.
pub fn zoom_maximize(
    lo: &[f64],
    hi: &[f64],
    res: usize,
    levels: usize,
    f: &dyn Fn(&[f64]) -> Option<f64>,
) -> Option<(Vec<f64>, f64)> {
    let dim = lo.len();
    let mut boxes = vec![(lo.to_vec(), hi.to_vec())];
    let mut cell: Vec<f64> = (0..dim).map(|d| (hi[d] - lo[d]) / res as f64).collect();
    let mut best: Option<(Vec<f64>, f64)> = None;
    for _ in 0..=levels {
        let mut scored: Vec<(Vec<f64>, f64)> = Vec::new();
        for (blo, bhi) in &boxes {
            let mut idx = vec![0usize; dim];
            loop {
                let x: Vec<f64> = (0..dim)
                    .map(|d| blo[d] + (bhi[d] - blo[d]) * idx[d] as f64 / res as f64)
                    .collect();
                if let Some(v) = f(&x) {
                    scored.push((x, v));
                }
                let mut d = 0;
                while d < dim {
                    idx[d] += 1;
                    if idx[d] <= res {
                        break;
                    }
                    idx[d] = 0;
                    d += 1;
                }
                if d == dim {
                    break;
                }
            }
        }
        scored.sort_by(|a, b| b.1.total_cmp(&a.1));
        if let Some(top) = scored.first() {
            if best.as_ref().map_or(true, |b| top.1 > b.1) {
                best = Some(top.clone());
            }
        }
        boxes = scored
            .iter()
            .take(3)
            .map(|(x, _)| {
                let l = (0..dim).map(|d| (x[d] - 2.0 * cell[d]).max(lo[d])).collect();
                let h = (0..dim).map(|d| (x[d] + 2.0 * cell[d]).min(hi[d])).collect();
                (l, h)
            })
            .collect();
        if boxes.is_empty() {
            break;
        }
        cell.iter_mut().for_each(|c| *c *= 4.0 / res as f64);
    }
    best
}

pub fn golden_section_max(f: impl Fn(f64) -> f64, mut a: f64, mut b: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    while (b - a).abs() > tol * (1.0 + a.abs().max(b.abs())) {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    (x, f(x))
}

fn guard(cfg: &SystemConfig, grid_res: usize) -> Result<()> {
    if cfg.n_pairs() > MAX_ORACLE_PAIRS {
        return Err(Error::ScaleGuard(format!(
            "oracle limited to {MAX_ORACLE_PAIRS} subcarrier-user pairs, got {}",
            cfg.n_pairs()
        )));
    }
    if grid_res == 0 || grid_res > MAX_GRID_RES {
        return Err(Error::ScaleGuard(format!("grid resolution must be in 1..={MAX_GRID_RES}")));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleOptimum {
    pub ee: f64,
    /// Total radiated power per epoch.
    pub x: Vec<f64>,
    /// Whether the rate requirement could be met at all.
    pub rate_feasible: bool,
}

/// Value of the horizon problem at per-epoch radiated totals `x`:
/// `(weighted bits, weighted energy)` or `None` if infeasible.
fn horizon_value(tl: &Timeline, cfg: &SystemConfig, x: &[f64], need_rate: bool) -> Option<(f64, f64)> {
    let mut lo = Vec::with_capacity(x.len());
    let mut hi = Vec::with_capacity(x.len());
    let (mut bits_w, mut bits) = (0.0, 0.0);
    for (e, &xj) in tl.epochs.iter().zip(x) {
        let r = epoch_rate(e, cfg, xj);
        bits_w += e.length * r.weighted;
        bits += e.length * r.plain;
        let demand = e.length * (cfg.circuit_power_w + cfg.pa_ineff * xj);
        hi.push(demand);
        lo.push((demand - e.length * cfg.p_nonrenew_w).max(0.0));
    }
    if need_rate && bits < cfg.r_min_bits {
        return None;
    }
    let h = max_harvest(&lo, &hi, &tl.cumulative_arrivals(), cfg.e_max_j)?;
    let total: f64 = hi.iter().sum();
    Some((bits_w, total - (1.0 - cfg.phi) * h))
}

fn horizon_search(
    tl: &Timeline,
    cfg: &SystemConfig,
    grid_res: usize,
    score: &dyn Fn(f64, f64) -> f64,
) -> Result<Option<(Vec<f64>, f64, bool)>> {
    guard(cfg, grid_res)?;
    if tl.len() > 3 {
        return Err(Error::ScaleGuard("horizon oracle limited to 3 epochs".into()));
    }
    let lo = vec![0.0; tl.len()];
    let hi = vec![cfg.p_max_w; tl.len()];
    let levels = 12;
    for need_rate in [true, false] {
        let f = |x: &[f64]| horizon_value(tl, cfg, x, need_rate).map(|(u, d)| score(u, d));
        if let Some((x, v)) = zoom_maximize(&lo, &hi, grid_res, levels, &f) {
            return Ok(Some((x, v, need_rate)));
        }
    }
    Ok(None)
}

/// Maximum EE over the whole horizon with full knowledge of the future.
pub fn offline_oracle(tl: &Timeline, cfg: &SystemConfig, grid_res: usize) -> Result<OracleOptimum> {
    let found = horizon_search(tl, cfg, grid_res, &|u, d| u / d)?;
    let (x, ee, rate_feasible) = found.ok_or_else(|| Error::InvalidInput("no feasible point".into()))?;
    Ok(OracleOptimum { ee, x, rate_feasible })
}

/// `max [U - q U_TP]` over the horizon, the parametric function driving the
/// fractional iteration.
pub fn parametric_value(tl: &Timeline, cfg: &SystemConfig, q: f64, grid_res: usize) -> Result<f64> {
    let found = horizon_search(tl, cfg, grid_res, &|u, d| u - q * d)?;
    Ok(found.map_or(f64::NEG_INFINITY, |(_, v, _)| v))
}

/// Per-epoch problem of the online solver: plan over `plan_len` seconds with
/// `budget` joules of stored energy and a bit target for this epoch.
pub fn grid_search_epoch(
    epoch: &Epoch,
    budget: f64,
    plan_len: f64,
    rate_target: f64,
    cfg: &SystemConfig,
    grid_res: usize,
) -> Result<OracleOptimum> {
    guard(cfg, grid_res)?;
    let value = |x: f64, need_rate: bool| -> Option<f64> {
        let r = epoch_rate(epoch, cfg, x);
        if need_rate && plan_len * r.plain < rate_target {
            return None;
        }
        let demand = cfg.circuit_power_w + cfg.pa_ineff * x;
        let harvest = demand.min(budget / plan_len);
        if demand - harvest > cfg.p_nonrenew_w + 1e-12 {
            return None;
        }
        Some(r.weighted / (demand - (1.0 - cfg.phi) * harvest))
    };
    for need_rate in [true, false] {
        let f = |x: &[f64]| value(x[0], need_rate);
        if let Some((x, ee)) = zoom_maximize(&[0.0], &[cfg.p_max_w], grid_res, 20, &f) {
            return Ok(OracleOptimum { ee, x, rate_feasible: need_rate });
        }
    }
    Err(Error::InvalidInput("no feasible point".into()))
}

/// Per-unit-time inner objective of one epoch allocation: weighted bit rate
/// minus `q` times weighted power.
pub fn inner_rate_objective(epoch: &Epoch, a: &EpochAlloc, cfg: &SystemConfig, q: f64) -> f64 {
    let k_n = cfg.n_users;
    let mut bits = 0.0;
    for (idx, &g) in epoch.cnr.iter().enumerate() {
        bits += cfg.alpha[idx % k_n] * shared_rate(a.s[idx], a.p_e[idx] + a.p_n[idx], g);
    }
    let power = cfg.phi * a.pc_e
        + a.pc_n
        + cfg.pa_ineff * (cfg.phi * a.p_e.iter().sum::<f64>() + a.p_n.iter().sum::<f64>());
    cfg.subcarrier_bw() * bits - q * power
}

/// Objective of the time-averaged constant allocation minus the time-weighted
/// objective of running `p1` for a fraction `theta` of the epoch and `p2`
/// for the rest. Concavity makes this non-negative.
pub fn mix_policy_test(
    epoch: &Epoch,
    cfg: &SystemConfig,
    q: f64,
    theta: f64,
    p1: &EpochAlloc,
    p2: &EpochAlloc,
) -> f64 {
    let mix = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| theta * x + (1.0 - theta) * y).collect();
    let p3 = EpochAlloc {
        s: mix(&p1.s, &p2.s),
        p_e: mix(&p1.p_e, &p2.p_e),
        p_n: mix(&p1.p_n, &p2.p_n),
        pc_e: theta * p1.pc_e + (1.0 - theta) * p2.pc_e,
        pc_n: theta * p1.pc_n + (1.0 - theta) * p2.pc_n,
    };
    let l = epoch.length;
    l * inner_rate_objective(epoch, &p3, cfg, q)
        - theta * l * inner_rate_objective(epoch, p1, cfg, q)
        - (1.0 - theta) * l * inner_rate_objective(epoch, p2, cfg, q)
}

/// Per-subcarrier Lagrangian term in the variables
/// `(harvested radiated, non-renewable radiated, share, circuit harvested, circuit non-renewable)`.
#[derive(Debug, Clone, Copy)]
pub struct SubcarrierTerm {
    /// `W (alpha + rho) / ln 2`.
    pub c: f64,
    pub gamma: f64,
    pub q: f64,
    pub phi: f64,
    pub eps: f64,
}

impl SubcarrierTerm {
    pub fn value(&self, v: &[f64; 5]) -> f64 {
        let [pe, pn, s, pce, pcn] = *v;
        let x = pe + pn;
        self.c * s * (self.gamma * x / s).ln_1p()
            - self.q * self.eps * (self.phi * pe + pn)
            - self.q * (self.phi * pce + pcn)
    }

    pub fn gradient(&self, v: &[f64; 5]) -> [f64; 5] {
        let [pe, pn, s, _, _] = *v;
        let x = pe + pn;
        let d = s + self.gamma * x;
        let gx = self.c * self.gamma * s / d;
        let u = self.gamma * x / s;
        let gs = self.c * (u.ln_1p() - u / (1.0 + u));
        [
            gx - self.q * self.eps * self.phi,
            gx - self.q * self.eps,
            gs,
            -self.q * self.phi,
            -self.q,
        ]
    }

    /// The only non-zero Hessian eigenvalue.
    pub fn phi5(&self, x: f64, s: f64) -> f64 {
        let d = s + self.gamma * x;
        -self.c * self.gamma * self.gamma * (x * x + 2.0 * s * s) / (s * d * d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HessianCheck {
    /// Eigenvalues in ascending order.
    pub eigenvalues: Vec<f64>,
    pub max_eigenvalue: f64,
    pub phi5_closed: f64,
    pub phi5_numeric: f64,
}

/// Hessian at `point` by central differences of the analytic gradient with
/// a relative step of 1e-5.
pub fn hessian_check(term: &SubcarrierTerm, point: [f64; 5]) -> HessianCheck {
    let mut h = Matrix5::<f64>::zeros();
    for j in 0..5 {
        let step = 1e-5 * point[j].abs().max(1e-3);
        let mut up = point;
        let mut dn = point;
        up[j] += step;
        dn[j] -= step;
        // Keep the share strictly positive.
        if j == 2 && dn[2] <= 0.0 {
            dn[2] = point[2];
        }
        let (gu, gd) = (term.gradient(&up), term.gradient(&dn));
        let width = up[j] - dn[j];
        for i in 0..5 {
            h[(i, j)] = (gu[i] - gd[i]) / width;
        }
    }
    let sym = (h + h.transpose()) * 0.5;
    let mut eig: Vec<f64> = SymmetricEigen::new(sym).eigenvalues.iter().copied().collect();
    eig.sort_by(f64::total_cmp);
    let x = point[0] + point[1];
    HessianCheck {
        max_eigenvalue: eig[4],
        phi5_numeric: eig[0],
        phi5_closed: term.phi5(x, point[2]),
        eigenvalues: eig,
    }
}

/// `U - q U_TP` of a candidate policy; zero exactly at the fixed point.
pub fn dinkelbach_root_check(q: f64, pol: &crate::model::Policy, tl: &Timeline, cfg: &SystemConfig) -> f64 {
    crate::metrics::weighted_capacity(pol, tl, cfg) - q * crate::metrics::weighted_energy(pol, tl, cfg)
}

/// Deterministic single-pair chain: one fixed CNR, a fixed packet after
/// every step, and a per-step choice among `powers`.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainToy {
    pub steps: usize,
    pub time_step: f64,
    pub cnr: f64,
    pub powers: Vec<f64>,
    pub arrival_j: f64,
}

pub const MAX_CHAIN_SEQUENCES: usize = 1 << 22;

impl ChainToy {
    /// `(weighted bits, weighted energy)` of running `seq` from battery `e`,
    /// or `None` if some step needs more than the non-renewable cap.
    fn run(&self, cfg: &SystemConfig, mut e: f64, seq: impl Iterator<Item = usize>) -> Option<(f64, f64)> {
        let tau = self.time_step;
        let (mut u, mut cost) = (0.0, 0.0);
        for a in seq {
            let p = self.powers[a];
            let demand = cfg.pa_ineff * p + cfg.circuit_power_w;
            let h = e.min(tau * demand);
            let n = demand - h / tau;
            if n > cfg.p_nonrenew_w * (1.0 + 1e-12) {
                return None;
            }
            u += tau * cfg.alpha[0] * cfg.subcarrier_bw() * (1.0 + self.cnr * p).log2();
            cost += cfg.phi * h + tau * n;
            e = (e - h + self.arrival_j).min(cfg.e_max_j);
        }
        Some((u, cost))
    }

    /// Every action sequence from step `m` to the end, scored by `score`.
    fn best(&self, cfg: &SystemConfig, m: usize, e: f64, score: &dyn Fn(f64, f64) -> f64) -> Result<f64> {
        if cfg.n_pairs() != 1 || self.powers.is_empty() {
            return Err(Error::InvalidInput("chain oracle needs one subcarrier, one user and some powers".into()));
        }
        let len = self.steps.saturating_sub(m);
        let a = self.powers.len();
        let count = (a as f64).powi(len as i32);
        if count > MAX_CHAIN_SEQUENCES as f64 {
            return Err(Error::ScaleGuard(format!("{count} action sequences exceed {MAX_CHAIN_SEQUENCES}")));
        }
        let mut best = f64::NEG_INFINITY;
        for code in 0..count as usize {
            let seq = (0..len).scan(code, |c, _| {
                let d = *c % a;
                *c /= a;
                Some(d)
            });
            if let Some((u, tp)) = self.run(cfg, e, seq) {
                best = best.max(score(u, tp));
            }
        }
        Ok(best)
    }

    /// `max [U - q U_TP]` from step `m` with battery `e`.
    pub fn value(&self, cfg: &SystemConfig, q: f64, m: usize, e: f64) -> Result<f64> {
        if m >= self.steps {
            return Ok(0.0);
        }
        self.best(cfg, m, e, &|u, tp| u - q * tp)
    }

    /// Largest `U / U_TP` over all action sequences from battery `e`.
    pub fn best_ratio(&self, cfg: &SystemConfig, e: f64) -> Result<f64> {
        self.best(cfg, 0, e, &|u, tp| if tp > 0.0 { u / tp } else { 0.0 })
    }
}
