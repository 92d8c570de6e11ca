//! Random energy arrivals, block fading and their merge into an epoch timeline.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{invalid, Result};
use crate::model::{cnr, Epoch, FadingMode, SystemConfig};

/// Raw events of one realization before they are cut into epochs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventTrace {
    pub horizon_s: f64,
    pub energy_times: Vec<f64>,
    pub energy_amounts: Vec<f64>,
    /// Instants where a new fading block starts; the first block starts at 0.
    pub fading_times: Vec<f64>,
    /// One row-major `[n_F x K]` matrix of |H|^2 per block.
    pub fading_gains: Vec<Vec<f64>>,
    pub large_scale: Vec<f64>,
}

impl EventTrace {
    pub fn validate(&self) -> Result<()> {
        let t = self.horizon_s;
        if !(t > 0.0) {
            return Err(invalid("empty horizon"));
        }
        for times in [&self.energy_times, &self.fading_times] {
            if times.windows(2).any(|w| w[1] <= w[0]) {
                return Err(invalid("event times must be strictly increasing"));
            }
            if times.iter().any(|x| !(*x > 0.0 && *x <= t)) {
                return Err(invalid("event times must lie in (0, T]"));
            }
        }
        if self.energy_amounts.len() != self.energy_times.len() {
            return Err(invalid("one energy amount per arrival time"));
        }
        if self.fading_gains.len() != self.fading_times.len() + 1 {
            return Err(invalid("need one fading matrix per block"));
        }
        let neg = |v: &Vec<f64>| v.iter().any(|x| !(*x >= 0.0));
        if self.fading_gains.iter().any(neg) || neg(&self.large_scale) || neg(&self.energy_amounts) {
            return Err(invalid("gains and energies must be non-negative"));
        }
        Ok(())
    }
}

/// The horizon cut at every event into epochs of constant channel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub epochs: Vec<Epoch>,
    pub horizon_s: f64,
    /// Energy already stored at t = 0.
    pub e_initial_j: f64,
}

impl Timeline {
    /// Builds a timeline from hand-made epochs, renumbering them in order.
    pub fn from_epochs(mut epochs: Vec<Epoch>, e_initial_j: f64) -> Result<Self> {
        if epochs.is_empty() {
            return Err(invalid("timeline needs at least one epoch"));
        }
        let mut start = 0.0;
        for (j, e) in epochs.iter_mut().enumerate() {
            if !(e.length > 0.0) || !(e.energy_in >= 0.0) || e.cnr.iter().any(|g| !(*g >= 0.0)) {
                return Err(invalid(format!("epoch {j} has a bad length, energy or CNR")));
            }
            e.index = j;
            e.start = start;
            start += e.length;
        }
        Ok(Self { epochs, horizon_s: start, e_initial_j })
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// Cumulative energy available up to and including each epoch's arrival.
    pub fn cumulative_arrivals(&self) -> Vec<f64> {
        let mut acc = self.e_initial_j;
        self.epochs
            .iter()
            .map(|e| {
                acc += e.energy_in;
                acc
            })
            .collect()
    }

    pub fn total_arrivals(&self) -> f64 {
        self.e_initial_j + self.epochs.iter().map(|e| e.energy_in).sum::<f64>()
    }
}

/// Per-trial RNG: one ChaCha stream per trial index under a common seed.
pub fn trial_rng(seed: u64, trial: u64) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial);
    rng
}

/// Short hex digest identifying a configuration.
pub fn config_hash(cfg: &SystemConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(&Sha256::digest(bytes)[..8])
}

pub fn gen_energy_arrivals<R: Rng>(cfg: &SystemConfig, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let mut times = Vec::new();
    if cfg.arrival_rate_hz > 0.0 {
        let gap = Exp::new(cfg.arrival_rate_hz).expect("positive rate");
        let mut t = 0.0;
        loop {
            t += gap.sample(rng);
            if t >= cfg.horizon_s {
                break;
            }
            // Exponential gaps are positive almost surely; guard against a zero draw.
            if times.last().map_or(t > 0.0, |&prev| t > prev) {
                times.push(t);
            }
        }
    }
    let amounts = vec![cfg.packet_energy_j; times.len()];
    (times, amounts)
}

/// Number of fading blocks covering the horizon.
pub fn n_fading_blocks(cfg: &SystemConfig) -> usize {
    ((cfg.horizon_s / cfg.coherence_s) - 1e-9).ceil().max(1.0) as usize
}

pub fn gen_fading<R: Rng>(cfg: &SystemConfig, rng: &mut R) -> (Vec<f64>, Vec<Vec<f64>>, Vec<f64>) {
    let ch = &cfg.channel;
    let large_scale: Vec<f64> = (0..cfg.n_users)
        .map(|_| ch.gain_at(rng.gen_range(ch.ref_distance_m..=ch.cell_radius_m)))
        .collect();
    let blocks = n_fading_blocks(cfg);
    let times = (1..blocks).map(|m| m as f64 * cfg.coherence_s).collect();
    let gains = (0..blocks).map(|_| fading_block(cfg, rng)).collect();
    (times, gains, large_scale)
}

fn fading_block<R: Rng>(cfg: &SystemConfig, rng: &mut R) -> Vec<f64> {
    let (nf, k_n) = (cfg.n_subcarriers, cfg.n_users);
    match &cfg.channel.fading {
        FadingMode::Iid => (0..nf * k_n).map(|_| Exp1.sample(rng)).collect(),
        FadingMode::TappedDelay { tap_powers, tap_delays_s } => {
            let total: f64 = tap_powers.iter().sum();
            let mut out = vec![0.0; nf * k_n];
            for k in 0..k_n {
                // Complex Gaussian taps with variance equal to the normalized tap power.
                let taps: Vec<(f64, f64)> = tap_powers
                    .iter()
                    .map(|p| {
                        let sd = (p / total / 2.0).sqrt();
                        let re: f64 = rng.sample(StandardNormal);
                        let im: f64 = rng.sample(StandardNormal);
                        (sd * re, sd * im)
                    })
                    .collect();
                for i in 0..nf {
                    let f = i as f64 * cfg.subcarrier_bw();
                    let (mut re, mut im) = (0.0, 0.0);
                    for ((a, b), tau) in taps.iter().zip(tap_delays_s) {
                        let (sin, cos) = (-2.0 * std::f64::consts::PI * f * tau).sin_cos();
                        re += a * cos - b * sin;
                        im += a * sin + b * cos;
                    }
                    out[i * k_n + k] = re * re + im * im;
                }
            }
            out
        }
    }
}

pub fn gen_trace<R: Rng>(cfg: &SystemConfig, rng: &mut R) -> EventTrace {
    let (energy_times, energy_amounts) = gen_energy_arrivals(cfg, rng);
    let (fading_times, fading_gains, large_scale) = gen_fading(cfg, rng);
    EventTrace {
        horizon_s: cfg.horizon_s,
        energy_times,
        energy_amounts,
        fading_times,
        fading_gains,
        large_scale,
    }
}

/// Splits the horizon at every fading change and energy arrival.
///
/// Event times closer than a relative 1e-12 of the horizon are merged into
/// one boundary; an arrival merged with a fading change is credited to the
/// epoch that starts there.
pub fn build_timeline(trace: &EventTrace, cfg: &SystemConfig) -> Result<Timeline> {
    trace.validate()?;
    let t_end = trace.horizon_s;
    let tol = 1e-12 * t_end;
    let nf_k = cfg.n_pairs();
    if trace.fading_gains.iter().any(|g| g.len() != nf_k) || trace.large_scale.len() != cfg.n_users {
        return Err(invalid("trace dimensions do not match the configuration"));
    }

    // (time, energy) boundaries; fading changes carry zero energy.
    let mut bounds: Vec<(f64, f64)> = trace
        .fading_times
        .iter()
        .map(|&t| (t, 0.0))
        .chain(trace.energy_times.iter().zip(&trace.energy_amounts).map(|(&t, &e)| (t, e)))
        .filter(|(t, _)| *t < t_end - tol)
        .collect();
    bounds.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut merged: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for (t, e) in bounds {
        let last = merged.last_mut().expect("non-empty");
        if t - last.0 <= tol {
            last.1 += e;
        } else {
            merged.push((t, e));
        }
    }

    let noise = cfg.noise_power_w();
    let mut epochs = Vec::with_capacity(merged.len());
    for (j, &(start, energy_in)) in merged.iter().enumerate() {
        let end = merged.get(j + 1).map_or(t_end, |b| b.0);
        let block = trace.fading_times.partition_point(|&f| f <= start + tol);
        let h = &trace.fading_gains[block];
        let cnr = (0..nf_k)
            .map(|idx| cnr(h[idx], trace.large_scale[idx % cfg.n_users], noise))
            .collect::<Result<Vec<_>>>()?;
        epochs.push(Epoch { index: j, start, length: end - start, cnr, energy_in });
    }
    Ok(Timeline { epochs, horizon_s: t_end, e_initial_j: cfg.e_initial_j })
}

/// One seeded realization: trace plus timeline.
pub fn realize(cfg: &SystemConfig, seed: u64, trial: u64) -> Result<(EventTrace, Timeline)> {
    let mut rng = trial_rng(seed, trial);
    let trace = gen_trace(cfg, &mut rng);
    let tl = build_timeline(&trace, cfg)?;
    Ok((trace, tl))
}

/// JSON form of a trace used for golden-file tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub seed: u64,
    pub cfg_hash: String,
    pub energy: Vec<[f64; 2]>,
    pub fading_times: Vec<f64>,
    pub fading_gains: Vec<Vec<f64>>,
    pub large_scale: Vec<f64>,
    pub horizon_s: f64,
}

impl TraceFile {
    pub fn new(trace: &EventTrace, cfg: &SystemConfig, seed: u64) -> Self {
        Self {
            seed,
            cfg_hash: config_hash(cfg),
            energy: trace.energy_times.iter().zip(&trace.energy_amounts).map(|(&t, &e)| [t, e]).collect(),
            fading_times: trace.fading_times.clone(),
            fading_gains: trace.fading_gains.clone(),
            large_scale: trace.large_scale.clone(),
            horizon_s: trace.horizon_s,
        }
    }

    pub fn into_trace(self) -> EventTrace {
        EventTrace {
            horizon_s: self.horizon_s,
            energy_times: self.energy.iter().map(|p| p[0]).collect(),
            energy_amounts: self.energy.iter().map(|p| p[1]).collect(),
            fading_times: self.fading_times,
            fading_gains: self.fading_gains,
            large_scale: self.large_scale,
        }
    }
}
