//! Experiment configuration files, Monte Carlo trials, parameter sweeps and
//! their CSV/JSON output.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dp::{self, DPGrid, DpSettings};
use crate::error::{Error, Result};
use crate::metrics::{qos_gate, TrialOutcome};
use crate::model::{dbm_to_w, w_to_dbm, ChannelModel, FadingMode, Policy, SystemConfig};
use crate::offline::{self, InnerSolveSettings, SolveReport};
use crate::online::{self, OnlineSettings};
use crate::scenario;

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Solver {
    #[serde(rename = "offline")]
    Offline,
    #[serde(rename = "online-subopt")]
    OnlineSubopt,
    #[serde(rename = "online-dp")]
    OnlineDp,
}

impl Solver {
    pub fn name(self) -> &'static str {
        match self {
            Solver::Offline => "offline",
            Solver::OnlineSubopt => "online-subopt",
            Solver::OnlineDp => "online-dp",
        }
    }
}

impl fmt::Display for Solver {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "offline" => Ok(Solver::Offline),
            "online-subopt" => Ok(Solver::OnlineSubopt),
            "online-dp" => Ok(Solver::OnlineDp),
            other => Err(config_err(format!(
                "unknown solver `{other}` (expected offline, online-subopt or online-dp)"
            ))),
        }
    }
}

/// Parses a comma-separated solver list such as `offline,online-subopt`.
pub fn parse_solvers(s: &str) -> Result<Vec<Solver>> {
    let out: Vec<Solver> = s.split(',').filter(|x| !x.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(config_err("empty solver list"));
    }
    Ok(out)
}

// On-disk layout. Every key names its unit; powers may be given in dBm or W.

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileLayout {
    seed: Option<u64>,
    trials: Option<usize>,
    solvers: Option<Vec<Solver>>,
    #[serde(default)]
    system: SystemKeys,
    #[serde(default)]
    channel: ChannelKeys,
    #[serde(default)]
    offline: InnerSolveSettings,
    #[serde(default)]
    dp: DpSettings,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SystemKeys {
    n_subcarriers: Option<usize>,
    n_users: Option<usize>,
    bandwidth_hz: Option<f64>,
    noise_psd_dbm_hz: Option<f64>,
    noise_psd_w_hz: Option<f64>,
    circuit_power_dbm: Option<f64>,
    circuit_power_w: Option<f64>,
    p_max_dbm: Option<f64>,
    p_max_w: Option<f64>,
    p_nonrenew_dbm: Option<f64>,
    p_nonrenew_w: Option<f64>,
    e_max_j: Option<f64>,
    e_initial_j: Option<f64>,
    phi: Option<f64>,
    /// Radiated over drawn power of the amplifier, in (0, 1].
    pa_efficiency: Option<f64>,
    alpha: Option<Vec<f64>>,
    /// Required average rate over the horizon.
    r_min_bps: Option<f64>,
    horizon_s: Option<f64>,
    harvest_rate_w: Option<f64>,
    arrival_rate_hz: Option<f64>,
    packet_energy_j: Option<f64>,
    coherence_s: Option<f64>,
    avg_epoch_len_s: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChannelKeys {
    carrier_hz: Option<f64>,
    ref_distance_m: Option<f64>,
    cell_radius_m: Option<f64>,
    pl_exponent: Option<f64>,
    pl_ref_db: Option<f64>,
    tap_powers_db: Option<Vec<f64>>,
    tap_delays_s: Option<Vec<f64>>,
}

fn either(name: &str, dbm: Option<f64>, w: Option<f64>, default: f64) -> Result<f64> {
    match (dbm, w) {
        (Some(_), Some(_)) => Err(config_err(format!("give only one of {name}_dbm and {name}_w"))),
        (Some(d), None) => Ok(dbm_to_w(d)),
        (None, Some(w)) => Ok(w),
        (None, None) => Ok(default),
    }
}

fn build_system(s: SystemKeys, c: ChannelKeys) -> Result<SystemConfig> {
    let d = SystemConfig::desk_default();
    let n_users = s.n_users.unwrap_or(d.n_users);
    let bandwidth_hz = s.bandwidth_hz.unwrap_or(d.bandwidth_hz);
    let noise_psd_w_hz = either("noise_psd", s.noise_psd_dbm_hz, s.noise_psd_w_hz, d.noise_psd_w_hz)?;
    let horizon_s = s.horizon_s.unwrap_or(d.horizon_s);
    let packet_energy_j = s.packet_energy_j.unwrap_or(d.packet_energy_j);
    let arrival_rate_hz = match (s.harvest_rate_w, s.arrival_rate_hz) {
        (Some(_), Some(_)) => return Err(config_err("give only one of harvest_rate_w and arrival_rate_hz")),
        (Some(w), None) if packet_energy_j > 0.0 => w / packet_energy_j,
        (Some(_), None) => return Err(config_err("harvest_rate_w needs a positive packet_energy_j")),
        (None, Some(r)) => r,
        (None, None) => d.arrival_rate_hz,
    };
    let pa_ineff = match s.pa_efficiency {
        Some(e) if e > 0.0 && e <= 1.0 => 1.0 / e,
        Some(e) => return Err(config_err(format!("pa_efficiency must lie in (0,1], got {e}"))),
        None => d.pa_ineff,
    };
    let carrier = c.carrier_hz.unwrap_or(2.5e9);
    let mut channel = ChannelModel::urban(
        carrier,
        c.ref_distance_m.unwrap_or(d.channel.ref_distance_m),
        c.cell_radius_m.unwrap_or(d.channel.cell_radius_m),
    );
    if let Some(n) = c.pl_exponent {
        channel.pl_exponent = n;
    }
    if let Some(pl) = c.pl_ref_db {
        channel.pl_ref_db = pl;
    }
    channel.fading = match (c.tap_powers_db, c.tap_delays_s) {
        (None, None) => FadingMode::Iid,
        (Some(p), Some(t)) => FadingMode::TappedDelay {
            tap_powers: p.iter().map(|db| 10f64.powf(db / 10.0)).collect(),
            tap_delays_s: t,
        },
        _ => return Err(config_err("tap_powers_db and tap_delays_s must be given together")),
    };
    let cfg = SystemConfig {
        n_subcarriers: s.n_subcarriers.unwrap_or(d.n_subcarriers),
        n_users,
        bandwidth_hz,
        noise_psd_w_hz,
        circuit_power_w: either("circuit_power", s.circuit_power_dbm, s.circuit_power_w, d.circuit_power_w)?,
        p_max_w: either("p_max", s.p_max_dbm, s.p_max_w, d.p_max_w)?,
        p_nonrenew_w: either("p_nonrenew", s.p_nonrenew_dbm, s.p_nonrenew_w, d.p_nonrenew_w)?,
        e_max_j: s.e_max_j.unwrap_or(d.e_max_j),
        e_initial_j: s.e_initial_j.unwrap_or(d.e_initial_j),
        phi: s.phi.unwrap_or(d.phi),
        pa_ineff,
        alpha: s.alpha.unwrap_or_else(|| vec![1.0; n_users]),
        r_min_bits: s.r_min_bps.map_or(d.r_min_bits, |r| r * horizon_s),
        horizon_s,
        arrival_rate_hz,
        packet_energy_j,
        coherence_s: s.coherence_s.unwrap_or(d.coherence_s),
        avg_epoch_len_s: s.avg_epoch_len_s,
        channel,
        seed: d.seed,
    };
    Ok(cfg)
}

/// Everything that determines the outputs of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub system: SystemConfig,
    pub trials: usize,
    pub seed: u64,
    pub solvers: Vec<Solver>,
    pub offline: InnerSolveSettings,
    pub dp: DpSettings,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::desk_default(),
            trials: 100,
            seed: 1,
            solvers: vec![Solver::Offline, Solver::OnlineSubopt],
            offline: InnerSolveSettings::default(),
            dp: DpSettings::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses a TOML configuration. Missing keys take the desk defaults.
    /// Syntax and unknown-key errors carry the line and column.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let file: FileLayout = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let d = Self::default();
        let mut system = build_system(file.system, file.channel)?;
        let seed = file.seed.unwrap_or(d.seed);
        system.seed = seed;
        let exp = Self {
            system,
            trials: file.trials.unwrap_or(d.trials),
            seed,
            solvers: file.solvers.unwrap_or(d.solvers),
            offline: file.offline,
            dp: file.dp,
        };
        exp.validate()?;
        Ok(exp)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate().map_err(|e| config_err(e.to_string()))?;
        if self.trials == 0 {
            return Err(config_err("trials must be at least 1"));
        }
        if self.solvers.is_empty() {
            return Err(config_err("no solver selected"));
        }
        if self.offline.max_outer_iters == 0 {
            return Err(config_err("offline.max_outer_iters must be at least 1"));
        }
        Ok(())
    }

    /// Builds the DP grid for every sweep point up front, so a grid that is
    /// too large is refused before any trial runs.
    pub fn preflight(&self, points: &[SystemConfig]) -> Result<()> {
        if !self.solvers.contains(&Solver::OnlineDp) {
            return Ok(());
        }
        for cfg in points {
            DPGrid::build(cfg, &vec![1.0; cfg.n_users], &self.dp.grid)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParam {
    /// Mean harvesting power, J/s.
    HarvestRate,
    PMaxDbm,
    PNonrenewDbm,
    Users,
}

impl SweepParam {
    pub fn key(self) -> &'static str {
        match self {
            SweepParam::HarvestRate => "harvest_rate",
            SweepParam::PMaxDbm => "p_max_dbm",
            SweepParam::PNonrenewDbm => "p_n_dbm",
            SweepParam::Users => "users",
        }
    }

    pub fn apply(self, cfg: &SystemConfig, v: f64) -> Result<SystemConfig> {
        let mut c = cfg.clone();
        match self {
            SweepParam::HarvestRate => c.set_harvest_rate(v),
            SweepParam::PMaxDbm => c.p_max_w = dbm_to_w(v),
            SweepParam::PNonrenewDbm => c.p_nonrenew_w = dbm_to_w(v),
            SweepParam::Users => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(config_err(format!("user count must be a positive integer, got {v}")));
                }
                let k = v as usize;
                let a0 = cfg.alpha[0];
                if cfg.alpha.iter().any(|&a| a != a0) {
                    return Err(config_err("cannot sweep the user count with unequal user weights"));
                }
                c.n_users = k;
                c.alpha = vec![a0; k];
            }
        }
        c.validate().map_err(|e| config_err(format!("{}={v}: {e}", self.key())))?;
        Ok(c)
    }
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "harvest_rate" | "harvest_rate_w" | "lambda" => Ok(SweepParam::HarvestRate),
            "p_max" | "p_max_dbm" => Ok(SweepParam::PMaxDbm),
            "p_n" | "p_n_dbm" | "p_nonrenew_dbm" => Ok(SweepParam::PNonrenewDbm),
            "users" | "k" | "K" | "n_users" => Ok(SweepParam::Users),
            other => Err(config_err(format!(
                "unknown sweep key `{other}` (expected harvest_rate, p_max_dbm, p_n_dbm or users)"
            ))),
        }
    }
}

/// One swept parameter with its values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

impl FromStr for Sweep {
    type Err = Error;
    /// Accepts `key=lo:hi:n` (n evenly spaced points), `key=a,b,c` or `key=v`.
    fn from_str(s: &str) -> Result<Self> {
        let (key, spec) = s.split_once('=').ok_or_else(|| config_err(format!("sweep `{s}` lacks `=`")))?;
        let param: SweepParam = key.parse()?;
        let num = |x: &str| -> Result<f64> {
            x.trim().parse::<f64>().map_err(|_| config_err(format!("bad number `{x}` in sweep `{s}`")))
        };
        let values = if spec.contains(':') {
            let parts: Vec<&str> = spec.split(':').collect();
            if parts.len() != 3 {
                return Err(config_err(format!("sweep `{s}` must look like key=lo:hi:n")));
            }
            let (lo, hi) = (num(parts[0])?, num(parts[1])?);
            let n: usize =
                parts[2].trim().parse().map_err(|_| config_err(format!("bad point count in sweep `{s}`")))?;
            match n {
                0 => return Err(config_err(format!("sweep `{s}` needs at least one point"))),
                1 => vec![lo],
                _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
            }
        } else {
            spec.split(',').map(num).collect::<Result<Vec<_>>>()?
        };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(config_err(format!("non-finite value in sweep `{s}`")));
        }
        Ok(Sweep { param, values })
    }
}

/// Cartesian product of the sweeps applied to `base`, first sweep slowest.
pub fn sweep_points(base: &SystemConfig, sweeps: &[Sweep]) -> Result<Vec<SystemConfig>> {
    let mut points = vec![base.clone()];
    for sw in sweeps {
        let mut next = Vec::with_capacity(points.len() * sw.values.len());
        for p in &points {
            for &v in &sw.values {
                next.push(sw.param.apply(p, v)?);
            }
        }
        points = next;
    }
    Ok(points)
}

/// One solver on one scenario.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub solver: Solver,
    pub harvest_rate_w: f64,
    pub p_max_dbm: f64,
    pub p_n_dbm: f64,
    pub n_users: usize,
    pub trial: u64,
    pub n_epochs: usize,
    pub ee: f64,
    pub capacity_bits: f64,
    pub qos_ok: bool,
    pub harvest_used_j: f64,
    pub nonrenew_used_j: f64,
    pub max_violation: f64,
    pub outer_iters: usize,
    pub flagged_epochs: usize,
}

impl TrialRow {
    fn outcome(&self) -> TrialOutcome {
        TrialOutcome { ee: self.ee, capacity: self.capacity_bits, qos_ok: self.qos_ok }
    }

    fn same_cell(&self, o: &TrialRow) -> bool {
        self.solver == o.solver
            && self.harvest_rate_w == o.harvest_rate_w
            && self.p_max_dbm == o.p_max_dbm
            && self.p_n_dbm == o.p_n_dbm
            && self.n_users == o.n_users
    }
}

/// QoS-gated statistics of one (sweep point, solver) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub solver: Solver,
    pub harvest_rate_w: f64,
    pub p_max_dbm: f64,
    pub p_n_dbm: f64,
    pub n_users: usize,
    pub n: usize,
    pub mean_ee: f64,
    pub se_ee: f64,
    pub mean_capacity_bits: f64,
    pub se_capacity_bits: f64,
    pub pass_rate: f64,
}

/// Groups consecutive rows of the same cell and gates each group.
pub fn aggregate(rows: &[TrialRow]) -> Vec<AggregateRow> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows.len() {
        let head = &rows[start];
        let end = start + rows[start..].iter().take_while(|r| r.same_cell(head)).count();
        let outcomes: Vec<TrialOutcome> = rows[start..end].iter().map(TrialRow::outcome).collect();
        let g = qos_gate(&outcomes);
        out.push(AggregateRow {
            solver: head.solver,
            harvest_rate_w: head.harvest_rate_w,
            p_max_dbm: head.p_max_dbm,
            p_n_dbm: head.p_n_dbm,
            n_users: head.n_users,
            n: g.n,
            mean_ee: g.mean_ee,
            se_ee: g.se_ee,
            mean_capacity_bits: g.mean_capacity,
            se_capacity_bits: g.se_capacity,
            pass_rate: g.pass_rate,
        });
        start = end;
    }
    out
}

/// Full result of one trial, kept for JSON output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRecord {
    pub row: TrialRow,
    pub report: SolveReport,
    pub policy: Policy,
}

/// Runs `solver` on trial `trial` of `cfg` under `exp`'s seed and settings.
pub fn run_trial(exp: &ExperimentConfig, cfg: &SystemConfig, solver: Solver, trial: u64) -> Result<TrialRecord> {
    let (trace, tl) = scenario::realize(cfg, exp.seed, trial)?;
    let (policy, report, n_epochs) = match solver {
        Solver::Offline => {
            let (p, r) = offline::dinkelbach_solve(&tl, cfg, &exp.offline);
            (p, r, tl.len())
        }
        Solver::OnlineSubopt => {
            let st = OnlineSettings::from_config(cfg, exp.offline.clone())?;
            let (p, r) = online::run_online(&tl, cfg, &st)?;
            (p, r, tl.len())
        }
        Solver::OnlineDp => {
            let grid = DPGrid::build(cfg, &trace.large_scale, &exp.dp.grid)?;
            let sol = dp::dinkelbach_outer_dp(&grid, cfg, &exp.dp)?;
            let ev = dp::dp_policy_eval(&sol.table, &tl, &grid, cfg)?;
            let mut report = ev.report;
            report.q_history = sol.q_history;
            report.converged = sol.converged;
            let n = ev.timeline.len();
            (ev.policy, report, n)
        }
    };
    let row = TrialRow {
        solver,
        harvest_rate_w: cfg.harvest_rate_w(),
        p_max_dbm: w_to_dbm(cfg.p_max_w),
        p_n_dbm: w_to_dbm(cfg.p_nonrenew_w),
        n_users: cfg.n_users,
        trial,
        n_epochs,
        ee: report.ee,
        capacity_bits: report.capacity_bits,
        qos_ok: report.qos_ok,
        harvest_used_j: report.harvest_used_j,
        nonrenew_used_j: report.nonrenew_used_j,
        max_violation: report.audit.max_violation_except_rate(),
        outer_iters: report.q_history.len(),
        flagged_epochs: report.flagged_epochs.len(),
    };
    Ok(TrialRecord { row, report, policy })
}

/// All trials of one cell, in trial order regardless of thread scheduling.
pub fn run_trials(exp: &ExperimentConfig, cfg: &SystemConfig, solver: Solver) -> Result<Vec<TrialRecord>> {
    (0..exp.trials as u64).into_par_iter().map(|t| run_trial(exp, cfg, solver, t)).collect()
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct ExperimentOutput {
    pub trials: Vec<TrialRow>,
    pub aggregates: Vec<AggregateRow>,
    /// Per-trial reports and policies; empty unless requested.
    pub records: Vec<TrialRecord>,
}

/// Runs every solver at every sweep point. With no sweeps this is a single
/// point at the base configuration.
pub fn run_experiment(exp: &ExperimentConfig, sweeps: &[Sweep], keep_records: bool) -> Result<ExperimentOutput> {
    exp.validate()?;
    let points = sweep_points(&exp.system, sweeps)?;
    exp.preflight(&points)?;
    let mut out = ExperimentOutput::default();
    for cfg in &points {
        for &solver in &exp.solvers {
            for rec in run_trials(exp, cfg, solver)? {
                out.trials.push(rec.row.clone());
                if keep_records {
                    out.records.push(rec);
                }
            }
        }
    }
    out.aggregates = aggregate(&out.trials);
    Ok(out)
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv writer emits UTF-8"))
}

pub fn trials_csv(rows: &[TrialRow]) -> Result<String> {
    to_csv(rows)
}

pub fn aggregates_csv(rows: &[AggregateRow]) -> Result<String> {
    to_csv(rows)
}

pub fn read_trials_csv(text: &str) -> Result<Vec<TrialRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<TrialRow>, _>>()?)
}

pub fn read_aggregates_csv(text: &str) -> Result<Vec<AggregateRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    Ok(r.deserialize().collect::<std::result::Result<Vec<AggregateRow>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quick() -> ExperimentConfig {
        let mut exp = ExperimentConfig::default();
        exp.system.n_subcarriers = 4;
        exp.system.n_users = 2;
        exp.system.alpha = vec![1.0; 2];
        exp.system.horizon_s = 1.0;
        exp.system.r_min_bits = 1e6;
        exp.trials = 3;
        exp
    }

    #[test]
    fn defaults_round_trip_through_an_empty_file() {
        let exp = ExperimentConfig::from_toml_str("").unwrap();
        assert_eq!(exp, ExperimentConfig::default());
    }

    #[test]
    fn units_convert_at_parse_time() {
        let text = "
seed = 9
solvers = [\"offline\", \"online-dp\"]
[system]
p_max_dbm = 23
circuit_power_w = 10
harvest_rate_w = 30
packet_energy_j = 5
pa_efficiency = 0.5
r_min_bps = 1e6
horizon_s = 2
n_users = 2
[dp.grid]
n_battery = 8
";
        let exp = ExperimentConfig::from_toml_str(text).unwrap();
        assert!((exp.system.p_max_w - 0.19952623149688797).abs() < 1e-15);
        assert_eq!(exp.system.circuit_power_w, 10.0);
        assert_eq!(exp.system.arrival_rate_hz, 6.0);
        assert_eq!(exp.system.pa_ineff, 2.0);
        assert_eq!(exp.system.r_min_bits, 2e6);
        assert_eq!(exp.system.alpha, vec![1.0; 2]);
        assert_eq!(exp.seed, 9);
        assert_eq!(exp.system.seed, 9);
        assert_eq!(exp.solvers, vec![Solver::Offline, Solver::OnlineDp]);
        assert_eq!(exp.dp.grid.n_battery, 8);
        assert_eq!(exp.dp.grid.n_actions, 9);
    }

    #[test]
    fn errors_name_the_line() {
        let err = ExperimentConfig::from_toml_str("trials = 3\n[system]\np_max_dbm = \"high\"\n").unwrap_err();
        let msg = err.to_string();
        assert!(matches!(err, Error::Config(_)));
        assert!(msg.contains("line 3"), "{msg}");
        let err = ExperimentConfig::from_toml_str("[system]\n\nmax_power = 3\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = ExperimentConfig::from_toml_str("[system]\np_max_dbm = 30\np_max_w = 1\n").unwrap_err();
        assert!(err.to_string().contains("p_max"), "{err}");
        let err = ExperimentConfig::from_toml_str("[system]\nphi = 2\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)) && err.to_string().contains("phi"), "{err}");
    }

    #[test]
    fn sweep_syntax() {
        let s: Sweep = "harvest_rate=1:30:5".parse().unwrap();
        assert_eq!(s.param, SweepParam::HarvestRate);
        assert_eq!(s.values, vec![1.0, 8.25, 15.5, 22.75, 30.0]);
        let s: Sweep = "p_max_dbm=23,33".parse().unwrap();
        assert_eq!(s.values, vec![23.0, 33.0]);
        let s: Sweep = "users=4".parse().unwrap();
        assert_eq!(s.values, vec![4.0]);
        assert!("users=2.5".parse::<Sweep>().unwrap().param.apply(&SystemConfig::desk_default(), 2.5).is_err());
        for bad in ["harvest_rate", "speed=1:2:3", "harvest_rate=1:2", "harvest_rate=1:2:0", "p_n=x"] {
            assert!(bad.parse::<Sweep>().is_err(), "{bad}");
        }
    }

    #[test]
    fn sweep_points_form_a_product() {
        let base = SystemConfig::desk_default();
        let sw = vec!["harvest_rate=1,5".parse().unwrap(), "users=2,4,6".parse().unwrap()];
        let pts = sweep_points(&base, &sw).unwrap();
        assert_eq!(pts.len(), 6);
        assert_eq!(pts[0].harvest_rate_w(), 1.0);
        assert_eq!(pts[2].n_users, 6);
        assert_eq!(pts[2].alpha.len(), 6);
        assert_eq!(pts[3].harvest_rate_w(), 5.0);
        assert!(sweep_points(&base, &[]).unwrap() == vec![base]);
    }

    #[test]
    fn one_row_per_point_and_solver() {
        let exp = quick();
        let sw = vec!["harvest_rate=5:20:2".parse().unwrap()];
        let out = run_experiment(&exp, &sw, false).unwrap();
        assert_eq!(out.trials.len(), 2 * 2 * 3);
        assert_eq!(out.aggregates.len(), 4);
        assert_eq!(out.aggregates[0].solver, Solver::Offline);
        assert_eq!(out.aggregates[1].solver, Solver::OnlineSubopt);
        assert_eq!(out.aggregates[2].harvest_rate_w, 20.0);
        assert!(out.records.is_empty());
    }

    #[test]
    fn aggregates_recompute_from_the_trial_csv() {
        let exp = quick();
        let out = run_experiment(&exp, &["p_max_dbm=23,33".parse().unwrap()], false).unwrap();
        let text = trials_csv(&out.trials).unwrap();
        let back = read_trials_csv(&text).unwrap();
        assert_eq!(back, out.trials);
        assert_eq!(aggregate(&back), out.aggregates);
        let agg = aggregates_csv(&out.aggregates).unwrap();
        assert_eq!(read_aggregates_csv(&agg).unwrap(), out.aggregates);
        assert!(text.starts_with("solver,harvest_rate_w,"));
    }

    #[test]
    fn same_seed_same_bytes() {
        let exp = quick();
        let a = trials_csv(&run_experiment(&exp, &[], false).unwrap().trials).unwrap();
        let b = trials_csv(&run_experiment(&exp, &[], false).unwrap().trials).unwrap();
        assert_eq!(a, b);
        let mut other = exp.clone();
        other.seed = 2;
        let c = trials_csv(&run_experiment(&other, &[], false).unwrap().trials).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn dp_guard_refuses_before_running() {
        let mut exp = quick();
        exp.solvers = vec![Solver::OnlineDp];
        let err = run_experiment(&exp, &[], false).unwrap_err();
        assert!(matches!(err, Error::ScaleGuard(_)), "{err}");
    }

    #[test]
    fn records_keep_policy_and_report() {
        let exp = quick();
        let out = run_experiment(&exp, &[], true).unwrap();
        assert_eq!(out.records.len(), out.trials.len());
        let r = &out.records[0];
        assert_eq!(r.policy.len(), r.row.n_epochs);
        assert_eq!(r.report.ee, r.row.ee);
        let js = serde_json::to_string(&out).unwrap();
        let back: ExperimentOutput = serde_json::from_str(&js).unwrap();
        assert_eq!(back.trials, out.trials);
    }
}
