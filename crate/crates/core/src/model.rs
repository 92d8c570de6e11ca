//! Domain types and per-epoch physics.
//!
//! Everything is stored in SI units: W, J, s, Hz and bits. Conversions from
//! dBm happen at the configuration boundary.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Time-sharing factors below this are treated as an unused subcarrier.
pub const S_EPS: f64 = 1e-12;

pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

pub fn w_to_dbm(w: f64) -> f64 {
    10.0 * w.log10() + 30.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FadingMode {
    /// Independent unit-mean Rayleigh power per subcarrier, user and block.
    Iid,
    /// Frequency-selective channel built from a tapped delay line, so
    /// neighbouring subcarriers are correlated.
    TappedDelay { tap_powers: Vec<f64>, tap_delays_s: Vec<f64> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub cell_radius_m: f64,
    pub ref_distance_m: f64,
    /// Path loss at the reference distance, dB.
    pub pl_ref_db: f64,
    pub pl_exponent: f64,
    pub fading: FadingMode,
}

impl ChannelModel {
    /// Log-distance path loss with the reference loss of free space at
    /// `carrier_hz` and `ref_distance_m`.
    pub fn urban(carrier_hz: f64, ref_distance_m: f64, cell_radius_m: f64) -> Self {
        let c = 299_792_458.0;
        let pl_ref_db = 20.0 * (4.0 * std::f64::consts::PI * ref_distance_m * carrier_hz / c).log10();
        Self {
            cell_radius_m,
            ref_distance_m,
            pl_ref_db,
            pl_exponent: 3.76,
            fading: FadingMode::Iid,
        }
    }

    /// Linear large-scale gain at distance `d` (clamped below at the reference distance).
    pub fn gain_at(&self, d: f64) -> f64 {
        let d = d.max(self.ref_distance_m);
        let pl = self.pl_ref_db + 10.0 * self.pl_exponent * (d / self.ref_distance_m).log10();
        10f64.powf(-pl / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_subcarriers: usize,
    pub n_users: usize,
    pub bandwidth_hz: f64,
    /// Noise power spectral density N0, W/Hz.
    pub noise_psd_w_hz: f64,
    pub circuit_power_w: f64,
    /// Cap on the total radiated power at any instant.
    pub p_max_w: f64,
    /// Cap on the power drawn from the non-renewable supply.
    pub p_nonrenew_w: f64,
    pub e_max_j: f64,
    pub e_initial_j: f64,
    /// Cost weight of harvested energy relative to non-renewable energy.
    pub phi: f64,
    /// Power amplifier inefficiency (drawn power per radiated watt).
    pub pa_ineff: f64,
    pub alpha: Vec<f64>,
    /// Minimum number of bits delivered over the horizon.
    pub r_min_bits: f64,
    pub horizon_s: f64,
    pub arrival_rate_hz: f64,
    pub packet_energy_j: f64,
    pub coherence_s: f64,
    /// Planning length of one epoch for the online solver. `None` derives it
    /// from the expected number of events.
    pub avg_epoch_len_s: Option<f64>,
    pub channel: ChannelModel,
    pub seed: u64,
}

impl SystemConfig {
    /// Reduced-size version of the reference micro-cell setup.
    pub fn desk_default() -> Self {
        let bandwidth_hz = 5e6;
        // -128 dBm over a 5 MHz / 128 subcarrier, expressed as a density.
        let noise_psd_w_hz = dbm_to_w(-128.0) / (bandwidth_hz / 128.0);
        Self {
            n_subcarriers: 16,
            n_users: 3,
            bandwidth_hz,
            noise_psd_w_hz,
            circuit_power_w: dbm_to_w(40.0),
            p_max_w: dbm_to_w(33.0),
            p_nonrenew_w: dbm_to_w(50.0),
            e_max_j: 500.0,
            e_initial_j: 0.0,
            phi: 0.01,
            pa_ineff: 1.0 / 0.35,
            alpha: vec![1.0; 3],
            r_min_bits: 5e6 * 10.0,
            horizon_s: 10.0,
            arrival_rate_hz: 4.0,
            packet_energy_j: 5.0,
            coherence_s: 0.2,
            avg_epoch_len_s: None,
            channel: ChannelModel::urban(2.5e9, 35.0, 500.0),
            seed: 1,
        }
    }

    /// Full-size reference setup (128 subcarriers, 5 users).
    pub fn full_scale() -> Self {
        Self {
            n_subcarriers: 128,
            n_users: 5,
            alpha: vec![1.0; 5],
            ..Self::desk_default()
        }
    }

    pub fn subcarrier_bw(&self) -> f64 {
        self.bandwidth_hz / self.n_subcarriers as f64
    }

    /// Noise power per subcarrier, N0 * W.
    pub fn noise_power_w(&self) -> f64 {
        self.noise_psd_w_hz * self.subcarrier_bw()
    }

    pub fn harvest_rate_w(&self) -> f64 {
        self.arrival_rate_hz * self.packet_energy_j
    }

    /// Sets the mean harvesting rate by changing the arrival rate.
    pub fn set_harvest_rate(&mut self, watts: f64) {
        self.arrival_rate_hz = watts / self.packet_energy_j;
    }

    /// Horizon divided by the expected number of events.
    pub fn avg_epoch_len(&self) -> f64 {
        if let Some(l) = self.avg_epoch_len_s {
            return l;
        }
        let t = self.horizon_s;
        let events = self.arrival_rate_hz * t + t / self.coherence_s;
        if events > 0.0 {
            t / events
        } else {
            t
        }
    }

    pub fn n_pairs(&self) -> usize {
        self.n_subcarriers * self.n_users
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("bandwidth_hz", self.bandwidth_hz),
            ("noise_psd_w_hz", self.noise_psd_w_hz),
            ("circuit_power_w", self.circuit_power_w),
            ("p_max_w", self.p_max_w),
            ("p_nonrenew_w", self.p_nonrenew_w),
            ("e_max_j", self.e_max_j),
            ("e_initial_j", self.e_initial_j),
            ("r_min_bits", self.r_min_bits),
            ("arrival_rate_hz", self.arrival_rate_hz),
            ("packet_energy_j", self.packet_energy_j),
        ];
        for (name, v) in finite {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.n_subcarriers == 0 || self.n_users == 0 {
            return Err(invalid("need at least one subcarrier and one user"));
        }
        if self.bandwidth_hz <= 0.0 || self.noise_psd_w_hz <= 0.0 {
            return Err(invalid("bandwidth and noise density must be positive"));
        }
        if !(self.horizon_s > 0.0 && self.horizon_s.is_finite()) {
            return Err(invalid("horizon must be positive"));
        }
        if !(self.coherence_s > 0.0) {
            return Err(invalid("coherence time must be positive"));
        }
        if !(self.phi > 0.0 && self.phi < 1.0) {
            return Err(invalid(format!("phi must lie in (0,1), got {}", self.phi)));
        }
        if !(self.pa_ineff >= 1.0) {
            return Err(invalid(format!("PA inefficiency must be >= 1, got {}", self.pa_ineff)));
        }
        if self.circuit_power_w <= 0.0 {
            return Err(invalid("circuit power must be positive"));
        }
        if self.p_nonrenew_w < self.circuit_power_w {
            return Err(invalid(
                "non-renewable cap must cover the circuit power, otherwise an empty battery is infeasible",
            ));
        }
        if self.e_initial_j > self.e_max_j {
            return Err(invalid("initial battery energy exceeds capacity"));
        }
        if self.alpha.len() != self.n_users {
            return Err(invalid(format!(
                "expected {} user weights, got {}",
                self.n_users,
                self.alpha.len()
            )));
        }
        if self.alpha.iter().any(|a| !(*a > 0.0 && *a <= 1.0)) {
            return Err(invalid("user weights must lie in (0,1]"));
        }
        if let Some(l) = self.avg_epoch_len_s {
            if !(l > 0.0 && l.is_finite()) {
                return Err(invalid("average epoch length must be positive"));
            }
        }
        let ch = &self.channel;
        if !(ch.ref_distance_m > 0.0 && ch.cell_radius_m >= ch.ref_distance_m) {
            return Err(invalid("cell radius must be at least the reference distance"));
        }
        if let FadingMode::TappedDelay { tap_powers, tap_delays_s } = &ch.fading {
            if tap_powers.is_empty() || tap_powers.len() != tap_delays_s.len() {
                return Err(invalid("tap powers and delays must be non-empty and equally long"));
            }
            if tap_powers.iter().any(|p| !(*p >= 0.0)) || tap_powers.iter().sum::<f64>() <= 0.0 {
                return Err(invalid("tap powers must be non-negative with positive sum"));
            }
        }
        Ok(())
    }
}

/// Channel-to-noise ratio g|H|^2 / (N0 W).
pub fn cnr(h_mag_sq: f64, g: f64, noise_power: f64) -> Result<f64> {
    if !h_mag_sq.is_finite() || !g.is_finite() || !noise_power.is_finite() {
        return Err(invalid("non-finite channel input"));
    }
    if h_mag_sq < 0.0 || g < 0.0 || noise_power <= 0.0 {
        return Err(invalid("channel gains must be >= 0 and noise power > 0"));
    }
    Ok(g * h_mag_sq / noise_power)
}

/// One inter-event interval with constant channel and a possible energy arrival at its start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Epoch {
    pub index: usize,
    pub start: f64,
    pub length: f64,
    /// Row-major `[n_F x K]` CNR matrix.
    pub cnr: Vec<f64>,
    pub energy_in: f64,
}

impl Epoch {
    pub fn gamma(&self, i: usize, k: usize, n_users: usize) -> f64 {
        self.cnr[i * n_users + k]
    }
}

/// Allocation for a single epoch. Powers are radiated powers already
/// multiplied by the time-sharing factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochAlloc {
    pub s: Vec<f64>,
    pub p_e: Vec<f64>,
    pub p_n: Vec<f64>,
    pub pc_e: f64,
    pub pc_n: f64,
}

impl EpochAlloc {
    /// No transmission; the circuit runs on the non-renewable supply.
    pub fn idle(n_pairs: usize, circuit_power: f64) -> Self {
        Self {
            s: vec![0.0; n_pairs],
            p_e: vec![0.0; n_pairs],
            p_n: vec![0.0; n_pairs],
            pc_e: 0.0,
            pc_n: circuit_power,
        }
    }

    pub fn radiated(&self) -> f64 {
        self.p_e.iter().sum::<f64>() + self.p_n.iter().sum::<f64>()
    }

    pub fn radiated_harvest(&self) -> f64 {
        self.p_e.iter().sum()
    }

    pub fn radiated_nonrenew(&self) -> f64 {
        self.p_n.iter().sum()
    }

    /// Harvested power drawn, PA plus circuit.
    pub fn harvest_draw(&self, eps: f64) -> f64 {
        eps * self.radiated_harvest() + self.pc_e
    }

    /// Non-renewable power drawn, PA plus circuit.
    pub fn nonrenew_draw(&self, eps: f64) -> f64 {
        eps * self.radiated_nonrenew() + self.pc_n
    }
}

pub type Policy = Vec<EpochAlloc>;

/// Dual variables of the offline problem. `beta[0]` is structurally zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Multipliers {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub rho: f64,
    pub mu: Vec<f64>,
    pub psi: Vec<f64>,
}

impl Multipliers {
    pub fn zeros(n_epochs: usize) -> Self {
        Self {
            gamma: vec![0.0; n_epochs],
            beta: vec![0.0; n_epochs],
            rho: 0.0,
            mu: vec![0.0; n_epochs],
            psi: vec![0.0; n_epochs],
        }
    }

    pub fn is_valid(&self) -> bool {
        let all = self
            .gamma
            .iter()
            .chain(&self.beta)
            .chain(&self.mu)
            .chain(&self.psi)
            .chain(std::iter::once(&self.rho));
        let nonneg = all.into_iter().all(|v| *v >= 0.0 && v.is_finite());
        nonneg && self.beta.first().map_or(true, |b| *b == 0.0)
    }
}

/// `s * log2(1 + p * gamma / s)` with the `s -> 0` limit taken as zero.
pub fn shared_rate(s: f64, p: f64, gamma: f64) -> f64 {
    if s < S_EPS {
        0.0
    } else {
        s * (p * gamma / s).ln_1p() / std::f64::consts::LN_2
    }
}

/// Bits delivered in one epoch, unweighted.
pub fn epoch_capacity(epoch: &Epoch, alloc: &EpochAlloc, cfg: &SystemConfig) -> f64 {
    epoch_capacity_with(epoch, alloc, cfg, |_| 1.0)
}

/// Bits delivered in one epoch with the user weights applied.
pub fn epoch_weighted_capacity(epoch: &Epoch, alloc: &EpochAlloc, cfg: &SystemConfig) -> f64 {
    epoch_capacity_with(epoch, alloc, cfg, |k| cfg.alpha[k])
}

fn epoch_capacity_with(
    epoch: &Epoch,
    alloc: &EpochAlloc,
    cfg: &SystemConfig,
    weight: impl Fn(usize) -> f64,
) -> f64 {
    let k_n = cfg.n_users;
    let mut bits = 0.0;
    for (idx, &g) in epoch.cnr.iter().enumerate() {
        let p = alloc.p_e[idx] + alloc.p_n[idx];
        bits += weight(idx % k_n) * shared_rate(alloc.s[idx], p, g);
    }
    epoch.length * cfg.subcarrier_bw() * bits
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn unit_cfg(nf: usize, k: usize) -> SystemConfig {
        SystemConfig {
            n_subcarriers: nf,
            n_users: k,
            bandwidth_hz: nf as f64,
            noise_psd_w_hz: 1.0,
            alpha: vec![1.0; k],
            ..SystemConfig::desk_default()
        }
    }

    fn epoch(l: f64, cnr: Vec<f64>) -> Epoch {
        Epoch { index: 0, start: 0.0, length: l, cnr, energy_in: 0.0 }
    }

    #[test]
    fn cnr_values() {
        assert_eq!(cnr(0.0, 1.0, 1.0).unwrap(), 0.0);
        assert_eq!(cnr(1.0, 1.0, 1.0).unwrap(), 1.0);
        assert_eq!(cnr(2.0, 0.5, 4.0).unwrap(), 0.25);
        assert!(cnr(f64::NAN, 1.0, 1.0).is_err());
        assert!(cnr(1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn capacity_hand_cases() {
        let cfg = unit_cfg(1, 1);
        let e = epoch(1.0, vec![1.0]);
        let mut a = EpochAlloc::idle(1, cfg.circuit_power_w);
        assert_eq!(epoch_capacity(&e, &a, &cfg), 0.0);
        a.s[0] = 1.0;
        a.p_n[0] = 1.0;
        assert_relative_eq!(epoch_capacity(&e, &a, &cfg), 1.0, epsilon = 1e-15);

        let e2 = epoch(2.0, vec![1.0]);
        let half = EpochAlloc { s: vec![0.5], p_e: vec![0.25], p_n: vec![0.25], pc_e: 0.0, pc_n: 0.0 };
        // s = 0.5 with radiated 0.5 gives 0.5 * log2(1 + 1) per second.
        assert_relative_eq!(epoch_capacity(&e2, &half, &cfg), 1.0, epsilon = 1e-15);
        // Approaching the same point along s gives the same limit.
        let near = EpochAlloc { s: vec![0.5 + 1e-9], ..half.clone() };
        assert_relative_eq!(epoch_capacity(&e2, &near, &cfg), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn shared_rate_zero_share() {
        assert_eq!(shared_rate(0.0, 5.0, 1e9), 0.0);
        assert_eq!(shared_rate(1e-13, 5.0, 1e9), 0.0);
    }

    #[test]
    fn desk_default_is_valid() {
        let cfg = SystemConfig::desk_default();
        cfg.validate().unwrap();
        assert_relative_eq!(cfg.subcarrier_bw() * cfg.n_subcarriers as f64, cfg.bandwidth_hz);
        assert_relative_eq!(cfg.harvest_rate_w(), 20.0);
        assert_relative_eq!(cfg.pa_ineff, 2.857142857, epsilon = 1e-8);
        assert_relative_eq!(w_to_dbm(cfg.circuit_power_w), 40.0, epsilon = 1e-12);
        SystemConfig::full_scale().validate().unwrap();
    }

    #[test]
    fn validation_rejects_bad_values() {
        let mut cfg = SystemConfig::desk_default();
        cfg.phi = 1.0;
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::desk_default();
        cfg.alpha = vec![1.0; 2];
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::desk_default();
        cfg.pa_ineff = 0.5;
        assert!(cfg.validate().is_err());
        let mut cfg = SystemConfig::desk_default();
        cfg.p_nonrenew_w = cfg.circuit_power_w * 0.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn path_loss_reference_point() {
        let ch = ChannelModel::urban(2.5e9, 35.0, 500.0);
        assert_relative_eq!(-10.0 * ch.gain_at(35.0).log10(), ch.pl_ref_db, epsilon = 1e-9);
        assert!((ch.pl_ref_db - 71.29).abs() < 0.05);
        assert!(ch.gain_at(100.0) < ch.gain_at(50.0));
    }

    #[test]
    fn multipliers_validity() {
        let mut m = Multipliers::zeros(3);
        assert!(m.is_valid());
        m.beta[0] = 1.0;
        assert!(!m.is_valid());
        m.beta[0] = 0.0;
        m.mu[1] = -1.0;
        assert!(!m.is_valid());
    }

    fn alloc_strategy() -> impl Strategy<Value = (f64, f64, f64)> {
        (0.0f64..10.0, 0.0f64..10.0, 0.001f64..1.0)
    }

    proptest! {
        #[test]
        fn capacity_concave((pe1, pn1, s1) in alloc_strategy(), (pe2, pn2, s2) in alloc_strategy(),
                            theta in 0.0f64..1.0, g in 0.01f64..100.0) {
            let cfg = unit_cfg(1, 1);
            let e = epoch(1.0, vec![g]);
            let mk = |pe: f64, pn: f64, s: f64| EpochAlloc { s: vec![s], p_e: vec![pe], p_n: vec![pn], pc_e: 0.0, pc_n: 0.0 };
            let f1 = epoch_capacity(&e, &mk(pe1, pn1, s1), &cfg);
            let f2 = epoch_capacity(&e, &mk(pe2, pn2, s2), &cfg);
            let fm = epoch_capacity(&e, &mk(theta * pe1 + (1.0 - theta) * pe2,
                                           theta * pn1 + (1.0 - theta) * pn2,
                                           theta * s1 + (1.0 - theta) * s2), &cfg);
            prop_assert!(fm >= theta * f1 + (1.0 - theta) * f2 - 1e-9);
        }

        #[test]
        fn capacity_monotone_in_power(pe in 0.0f64..10.0, pn in 0.0f64..10.0, d in 0.0f64..5.0,
                                      s in 0.01f64..1.0, g in 0.0f64..100.0) {
            let cfg = unit_cfg(1, 1);
            let e = epoch(1.0, vec![g]);
            let base = EpochAlloc { s: vec![s], p_e: vec![pe], p_n: vec![pn], pc_e: 0.0, pc_n: 0.0 };
            let mut up_e = base.clone();
            up_e.p_e[0] += d;
            let mut up_n = base.clone();
            up_n.p_n[0] += d;
            let c0 = epoch_capacity(&e, &base, &cfg);
            prop_assert!(epoch_capacity(&e, &up_e, &cfg) >= c0);
            prop_assert!(epoch_capacity(&e, &up_n, &cfg) >= c0);
        }

        #[test]
        fn cnr_bilinear(h in 0.0f64..10.0, g in 0.0f64..10.0, c in 0.0f64..5.0, n in 0.1f64..10.0) {
            let base = cnr(h, g, n).unwrap();
            prop_assert!((cnr(c * h, g, n).unwrap() - c * base).abs() <= 1e-12 * (1.0 + c * base));
            prop_assert!((cnr(h, c * g, n).unwrap() - c * base).abs() <= 1e-12 * (1.0 + c * base));
        }
    }
}
