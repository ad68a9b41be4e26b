//! Command-line front end: configuration loading, figure presets, sweeps
//! and CSV/JSON output.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::closed_form::{approx_outage, optimal_q, pearson_correlation};
use crate::csi_baseline::{estimate_outage_csi, genie_outage_lower_bound, MaxMinSettings};
use crate::monte_carlo::{
    empirical_rate_pdf, estimate_outage_random_users, outage_curve_random,
    sample_slot_correlation, Exec, MultiUserOutage, Z95,
};
use crate::sysmodel::{Placement, SystemParams};
use crate::Error;

/// Environment variable naming the default output directory.
pub const OUT_DIR_ENV: &str = "IRS_RPB_OUT_DIR";
pub const DEFAULT_OUT_DIR: &str = "results";
/// Desk-scale caps, lifted by `--full`.
pub const TRIALS_CAP: u64 = 1_000_000;
pub const ELEMENTS_CAP: usize = 512;
/// Fewer observed outages than this make a frequency estimate unreliable.
pub const MIN_OUTAGE_EVENTS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// Rate distribution versus Q and N.
    Fig3,
    /// Outage versus transmit power, simulated and closed form.
    Fig4,
    /// Optimal Q versus transmit power.
    Fig5,
    /// Outage versus Q.
    Fig6,
    /// Random scheme versus the CSI-based scheme across N and K.
    Fig7,
}

impl Preset {
    pub fn name(&self) -> &'static str {
        match self {
            Preset::Fig3 => "fig3",
            Preset::Fig4 => "fig4",
            Preset::Fig5 => "fig5",
            Preset::Fig6 => "fig6",
            Preset::Fig7 => "fig7",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Simulation effort and seeding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    /// Trials per point for the random scheme and rate histograms.
    pub trials: u64,
    /// Trials per point for the CSI scheme and its genie bound.
    pub csi_trials: u64,
    pub seed: u64,
    pub restarts: usize,
    pub grid_points: usize,
    /// IRS elements per CSI group.
    pub group_size: usize,
    pub bins: usize,
    /// Interval pairs for the slot correlation estimate.
    pub correlation_pairs: u64,
}

impl Default for RunSettings {
    fn default() -> Self {
        RunSettings {
            trials: 100_000,
            csi_trials: 10_000,
            seed: 1,
            restarts: 5,
            grid_points: 256,
            group_size: 8,
            bins: 50,
            correlation_pairs: 100_000,
        }
    }
}

/// Everything a run reads besides its preset grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub system: SystemParams,
    #[serde(default)]
    pub run: RunSettings,
}

/// Base configuration of a preset.
pub fn preset_config(preset: Preset) -> ExperimentConfig {
    let mut system = SystemParams::default();
    let mut run = RunSettings::default();
    match preset {
        Preset::Fig3 | Preset::Fig5 | Preset::Fig6 => {}
        Preset::Fig4 => run.trials = 1_000_000,
        Preset::Fig7 => {
            system.tx_power_dbm = 31.0;
            system.rate_target = 5.0;
            system.n_users = 8;
            system.geometry.placement = Placement::Circle {
                radius_m: 5.0,
                user_height_m: 1.0,
                seed: 7,
            };
        }
    }
    ExperimentConfig { system, run }
}

/// A named modification of the base system for one curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Variant {
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_elements: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tx_power_dbm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_target: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_len: Option<u32>,
}

impl Variant {
    fn base(label: &str) -> Self {
        Variant {
            label: label.into(),
            n_elements: None,
            tx_power_dbm: None,
            rate_target: None,
            frame_len: None,
        }
    }

    fn apply(&self, sys: &SystemParams) -> SystemParams {
        let mut s = sys.clone();
        if let Some(v) = self.n_elements {
            s.n_elements = v;
        }
        if let Some(v) = self.tx_power_dbm {
            s.tx_power_dbm = v;
        }
        if let Some(v) = self.rate_target {
            s.rate_target = v;
        }
        if let Some(v) = self.frame_len {
            s.frame_len = v;
        }
        s
    }
}

/// Sweep grid of a preset; recorded verbatim in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetGrid {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tx_power_dbm: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub q: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_elements: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub n_users: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub curves: Vec<Variant>,
}

fn power_range(lo: i32, hi: i32, step: i32) -> Vec<f64> {
    (lo..=hi).step_by(step as usize).map(f64::from).collect()
}

pub fn preset_grid(preset: Preset) -> PresetGrid {
    let empty = PresetGrid {
        tx_power_dbm: vec![],
        q: vec![],
        n_elements: vec![],
        n_users: vec![],
        curves: vec![],
    };
    match preset {
        Preset::Fig3 => PresetGrid {
            q: vec![1, 2, 4, 8],
            n_elements: vec![100, 300],
            ..empty
        },
        Preset::Fig4 => PresetGrid {
            tx_power_dbm: power_range(16, 40, 2),
            q: vec![1, 2, 4, 8],
            ..empty
        },
        Preset::Fig5 => PresetGrid {
            tx_power_dbm: power_range(0, 45, 1),
            curves: vec![
                Variant::base("base"),
                Variant { n_elements: Some(100), ..Variant::base("n100") },
                Variant { rate_target: Some(8.0), ..Variant::base("tau8") },
                Variant { frame_len: Some(500), ..Variant::base("l500") },
            ],
            ..empty
        },
        Preset::Fig6 => PresetGrid {
            q: (1..=8).collect(),
            curves: vec![
                Variant::base("l1"),
                Variant { n_elements: Some(100), ..Variant::base("l2") },
                Variant { tx_power_dbm: Some(30.0), ..Variant::base("l3") },
                Variant { rate_target: Some(4.0), ..Variant::base("l4") },
            ],
            ..empty
        },
        Preset::Fig7 => PresetGrid {
            q: vec![4],
            n_elements: vec![32, 64, 128, 256, 384, 512],
            n_users: vec![2, 8],
            ..empty
        },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    OutageMc,
    OutageCf,
    OutageCsi,
    OutageGenie,
    RateMean,
    RateVar,
    RhoHat,
    RhoCf,
    QStar,
}

impl Metric {
    fn is_outage_frequency(self) -> bool {
        matches!(self, Metric::OutageMc | Metric::OutageCsi | Metric::OutageGenie)
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub curve: String,
    #[serde(rename = "P_dbm")]
    pub p_dbm: f64,
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "K")]
    pub k: usize,
    #[serde(rename = "L")]
    pub l: u32,
    #[serde(rename = "Q")]
    pub q: Option<u32>,
    #[serde(rename = "M")]
    pub m: Option<usize>,
    pub tau: f64,
    pub trials: Option<u64>,
    pub seed: Option<u64>,
    pub metric: Metric,
    pub value: f64,
    pub ci_halfwidth: Option<f64>,
    pub wall_time_s: f64,
}

/// One bin of a rate histogram (auxiliary fig3 output).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramRow {
    #[serde(rename = "N")]
    pub n: usize,
    #[serde(rename = "Q")]
    pub q: u32,
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
    pub density: f64,
}

/// Written next to the CSV; feeding it back through `--config` repeats the
/// run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub preset: Preset,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub grid: PresetGrid,
    pub workers: usize,
    pub full: bool,
    pub runtime_s: f64,
    pub outputs: Vec<String>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum CliError {
    /// Unreadable, malformed or invalid configuration.
    Config(String),
    Numerical(String),
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numerical(_) => 3,
            CliError::Io(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
            CliError::Io(m) => write!(f, "i/o error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Config(e.to_string()),
        }
    }
}

fn io_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// A configuration after file loading, preset defaults and overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct LoadedConfig {
    pub preset: Option<Preset>,
    pub config: ExperimentConfig,
}

#[derive(Deserialize)]
struct ManifestView {
    preset: Option<Preset>,
    config: ExperimentConfig,
}

fn is_json(path: &Path, text: &str) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
        || text.trim_start().starts_with('{')
}

/// 1-based line of the first `key = ...` (TOML) or `"key":` (JSON).
fn key_line(text: &str, key: &str) -> Option<usize> {
    let quoted = format!("\"{key}\"");
    text.lines().position(|line| {
        let t = line.trim_start();
        let rest = t
            .strip_prefix(key)
            .or_else(|| t.strip_prefix(quoted.as_str()));
        rest.is_some_and(|r| {
            let r = r.trim_start();
            r.starts_with('=') || r.starts_with(':')
        })
    })
    .map(|i| i + 1)
}

/// Reads a TOML config or a JSON manifest into a TOML tree.
fn read_config_tree(path: &Path) -> Result<(toml::Table, Option<Preset>, String), CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    let anchored = |e: &dyn fmt::Display| CliError::Config(format!("{}: {e}", path.display()));
    if is_json(path, &text) {
        let json: serde_json::Value = serde_json::from_str(&text).map_err(|e| anchored(&e))?;
        let (preset, cfg) = if json.get("config").is_some() {
            let v: ManifestView = serde_json::from_str(&text).map_err(|e| anchored(&e))?;
            (v.preset, v.config)
        } else {
            (None, serde_json::from_str::<ExperimentConfig>(&text).map_err(|e| anchored(&e))?)
        };
        let tree = match toml::Value::try_from(&cfg) {
            Ok(toml::Value::Table(t)) => t,
            _ => return Err(anchored(&"config is not representable as a table")),
        };
        Ok((tree, preset, text))
    } else {
        // a typed parse first, so schema errors carry line numbers
        toml::from_str::<ExperimentConfig>(&text).map_err(|e| anchored(&e))?;
        let tree: toml::Table = text.parse().map_err(|e: toml::de::Error| anchored(&e))?;
        Ok((tree, None, text))
    }
}

/// Parses an override value as a TOML scalar or array, falling back to a
/// bare string.
fn parse_override_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `a.b.c=value` to the tree, creating missing tables.
pub fn apply_override(tree: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("override `{assignment}` has an empty key")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut node = tree;
    for k in parents {
        let entry = node
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{path}`: `{k}` is not a table")))?;
    }
    node.insert(last.to_string(), parse_override_value(raw.trim()));
    Ok(())
}

fn table_of(cfg: &ExperimentConfig) -> toml::Table {
    match toml::Value::try_from(cfg) {
        Ok(toml::Value::Table(t)) => t,
        _ => unreachable!("configs serialize to tables"),
    }
}

/// Resolves the configuration of a run: the preset's base config, or the
/// file at `config_path` with the preset's `[run]` values filling gaps,
/// then `overrides` in order.
pub fn load_config(
    config_path: Option<&Path>,
    preset: Option<Preset>,
    overrides: &[String],
) -> Result<LoadedConfig, CliError> {
    let (mut tree, preset, text) = match config_path {
        Some(path) => {
            let (mut tree, from_file, text) = read_config_tree(path)?;
            let preset = preset.or(from_file);
            let mut run = preset
                .map(|p| table_of(&preset_config(p)))
                .and_then(|mut t| t.remove("run"))
                .and_then(|v| v.as_table().cloned())
                .unwrap_or_default();
            if let Some(toml::Value::Table(file_run)) = tree.remove("run") {
                run.extend(file_run);
            }
            tree.insert("run".into(), toml::Value::Table(run));
            (tree, preset, Some((path.to_path_buf(), text)))
        }
        None => {
            let p = preset.ok_or_else(|| CliError::Config("give --preset, --config or both".into()))?;
            (table_of(&preset_config(p)), Some(p), None)
        }
    };
    for o in overrides {
        apply_override(&mut tree, o)?;
    }
    let config: ExperimentConfig = toml::Value::Table(tree).try_into().map_err(|e: toml::de::Error| {
        let msg = e.to_string();
        CliError::Config(if overrides.is_empty() {
            msg.trim().to_string()
        } else {
            format!("after overrides: {}", msg.trim())
        })
    })?;
    config.system.validate().map_err(|e| {
        let msg = e.to_string();
        let field = match &e {
            Error::InvalidParams(m) => m.split(':').next().map(str::trim),
            _ => None,
        };
        match (&text, field) {
            (Some((path, src)), Some(f)) => match key_line(src, f) {
                Some(line) => CliError::Config(format!("{}:{line}: {msg}", path.display())),
                None => CliError::Config(format!("{}: {msg}", path.display())),
            },
            (Some((path, _)), None) => CliError::Config(format!("{}: {msg}", path.display())),
            _ => CliError::Config(msg),
        }
    })?;
    Ok(LoadedConfig { preset, config })
}

/// Enforces the desk-scale caps. With `full` set, exceeded caps become
/// warnings.
pub fn check_caps(preset: Preset, cfg: &ExperimentConfig, full: bool) -> Result<Vec<String>, CliError> {
    let mut over = Vec::new();
    let run = &cfg.run;
    for (name, v) in [
        ("run.trials", run.trials),
        ("run.csi_trials", run.csi_trials),
        ("run.correlation_pairs", run.correlation_pairs),
    ] {
        if v > TRIALS_CAP {
            over.push(format!("{name} = {v} exceeds the cap of {TRIALS_CAP}"));
        }
    }
    let grid = preset_grid(preset);
    let n_max = grid
        .n_elements
        .iter()
        .copied()
        .chain(grid.curves.iter().filter_map(|c| c.n_elements))
        .chain(std::iter::once(cfg.system.n_elements))
        .max()
        .unwrap_or(0);
    if n_max > ELEMENTS_CAP {
        over.push(format!("N = {n_max} exceeds the cap of {ELEMENTS_CAP}"));
    }
    if over.is_empty() {
        return Ok(vec![]);
    }
    if full {
        Ok(over
            .into_iter()
            .map(|m| format!("{m}; running anyway (--full), expect a long runtime"))
            .collect())
    } else {
        Err(CliError::Config(format!("{} (pass --full to lift the caps)", over.join("; "))))
    }
}

/// Records and side outputs of one preset run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunOutput {
    pub records: Vec<SweepRecord>,
    pub histogram: Vec<HistogramRow>,
    pub warnings: Vec<String>,
}

struct Sweep<'a> {
    run: &'a RunSettings,
    out: RunOutput,
}

impl Sweep<'_> {
    fn record(
        &mut self,
        curve: &str,
        sys: &SystemParams,
        q: Option<u32>,
        m: Option<usize>,
        metric: Metric,
        value: f64,
        mc: Option<(u64, Option<f64>)>,
        wall: f64,
    ) {
        let (trials, ci) = match mc {
            Some((t, ci)) => (Some(t), ci),
            None => (None, None),
        };
        if metric.is_outage_frequency() {
            if let Some(t) = trials {
                let events = (value * t as f64).round() as u64;
                if events < MIN_OUTAGE_EVENTS {
                    self.out.warnings.push(format!(
                        "{metric:?} at curve={curve} P={} N={} K={} Q={q:?}: only {events} outage events in {t} trials",
                        sys.tx_power_dbm, sys.n_elements, sys.n_users
                    ));
                }
            }
        }
        self.out.records.push(SweepRecord {
            curve: curve.to_string(),
            p_dbm: sys.tx_power_dbm,
            n: sys.n_elements,
            k: sys.n_users,
            l: sys.frame_len,
            q,
            m,
            tau: sys.rate_target,
            trials,
            seed: trials.map(|_| self.run.seed),
            metric,
            value,
            ci_halfwidth: ci,
            wall_time_s: wall,
        });
    }

    fn outage(&mut self, curve: &str, sys: &SystemParams, q: Option<u32>, m: Option<usize>, metric: Metric, est: Result<MultiUserOutage, Error>, trials: u64, wall: f64) -> Result<(), CliError> {
        match est {
            Ok(e) => self.record(curve, sys, q, m, metric, e.worst.probability, Some((trials, Some(e.worst.ci_halfwidth))), wall),
            // no data time left: the scheme cannot deliver any rate
            Err(Error::InfeasiblePrelog(_)) => self.record(curve, sys, q, m, metric, 1.0, Some((trials, None)), wall),
            Err(e) => return Err(e.into()),
        }
        Ok(())
    }
}

fn closed_form_or_one(sys: &SystemParams, q: u32) -> Result<f64, CliError> {
    match approx_outage(sys, q) {
        Ok(v) => Ok(v),
        Err(Error::InfeasiblePrelog(_)) => Ok(1.0),
        Err(e) => Err(e.into()),
    }
}

/// Runs a preset sweep.
pub fn run_preset(preset: Preset, cfg: &ExperimentConfig, exec: Exec) -> Result<RunOutput, CliError> {
    let grid = preset_grid(preset);
    let run = &cfg.run;
    let base = &cfg.system;
    let mut sw = Sweep { run, out: RunOutput::default() };
    match preset {
        Preset::Fig3 => {
            for &n in &grid.n_elements {
                let mut sys = base.clone();
                sys.n_elements = n;
                for &q in &grid.q {
                    let t0 = Instant::now();
                    let h = match empirical_rate_pdf(&sys, q, run.trials, run.bins, run.seed, &exec) {
                        Ok(h) => h,
                        Err(Error::InfeasiblePrelog(m)) => {
                            sw.out.warnings.push(format!("skipped N={n} Q={q}: {m}"));
                            continue;
                        }
                        Err(e) => return Err(e.into()),
                    };
                    let wall = t0.elapsed().as_secs_f64();
                    let mc = |se: f64| Some((run.trials, Some(Z95 * se)));
                    sw.record("", &sys, Some(q), None, Metric::RateMean, h.mean, mc(h.mean_stderr()), wall);
                    sw.record("", &sys, Some(q), None, Metric::RateVar, h.variance, mc(h.variance_stderr), wall);
                    let dens = h.density();
                    for (i, &count) in h.counts.iter().enumerate() {
                        sw.out.histogram.push(HistogramRow {
                            n,
                            q,
                            bin_lo: h.edges[i],
                            bin_hi: h.edges[i + 1],
                            count,
                            density: dens[i],
                        });
                    }
                }
                let t0 = Instant::now();
                let c = sample_slot_correlation(&sys, run.correlation_pairs, run.seed, &exec)?;
                let wall = t0.elapsed().as_secs_f64();
                sw.record("", &sys, Some(2), None, Metric::RhoHat, c.rho, Some((run.correlation_pairs, Some(Z95 * c.stderr))), wall);
                let s = sys.derived_stats()?;
                let u = s.typical();
                let rho = pearson_correlation(u.sigma_g2, u.sigma_h2, s.sigma_f2, sys.n_elements)?;
                sw.record("", &sys, None, None, Metric::RhoCf, rho, None, 0.0);
            }
        }
        Preset::Fig4 => {
            for &q in &grid.q {
                let t0 = Instant::now();
                let curve = outage_curve_random(base, q, &grid.tx_power_dbm, run.trials, run.seed, &exec);
                let wall = t0.elapsed().as_secs_f64() / grid.tx_power_dbm.len() as f64;
                let curve: Vec<Result<MultiUserOutage, Error>> = match curve {
                    Ok(c) => c.into_iter().map(Ok).collect(),
                    Err(Error::InfeasiblePrelog(m)) => {
                        grid.tx_power_dbm.iter().map(|_| Err(Error::InfeasiblePrelog(m.clone()))).collect()
                    }
                    Err(e) => return Err(e.into()),
                };
                for (&p, est) in grid.tx_power_dbm.iter().zip(curve) {
                    let mut sys = base.clone();
                    sys.tx_power_dbm = p;
                    sw.outage("", &sys, Some(q), None, Metric::OutageMc, est, run.trials, wall)?;
                    let t0 = Instant::now();
                    let cf = closed_form_or_one(&sys, q)?;
                    sw.record("", &sys, Some(q), None, Metric::OutageCf, cf, None, t0.elapsed().as_secs_f64());
                }
            }
        }
        Preset::Fig5 => {
            for v in &grid.curves {
                for &p in &grid.tx_power_dbm {
                    let mut sys = v.apply(base);
                    sys.tx_power_dbm = p;
                    let t0 = Instant::now();
                    let opt = optimal_q(&sys)?;
                    let wall = t0.elapsed().as_secs_f64();
                    sw.record(&v.label, &sys, None, None, Metric::QStar, f64::from(opt.q_star), None, wall);
                    sw.record(&v.label, &sys, Some(opt.q_star), None, Metric::OutageCf, opt.outage_at_q_star(), None, wall);
                }
            }
        }
        Preset::Fig6 => {
            for v in &grid.curves {
                let sys = v.apply(base);
                for &q in &grid.q {
                    let t0 = Instant::now();
                    let cf = closed_form_or_one(&sys, q)?;
                    sw.record(&v.label, &sys, Some(q), None, Metric::OutageCf, cf, None, t0.elapsed().as_secs_f64());
                    let t0 = Instant::now();
                    let est = estimate_outage_random_users(&sys, q, run.trials, run.seed, &exec);
                    sw.outage(&v.label, &sys, Some(q), None, Metric::OutageMc, est, run.trials, t0.elapsed().as_secs_f64())?;
                }
                match optimal_q(&sys) {
                    Ok(opt) => sw.record(&v.label, &sys, None, None, Metric::QStar, f64::from(opt.q_star), None, 0.0),
                    Err(Error::InfeasiblePrelog(m)) => sw.out.warnings.push(format!("no q_star for {}: {m}", v.label)),
                    Err(e) => return Err(e.into()),
                }
            }
        }
        Preset::Fig7 => {
            let q = grid.q[0];
            let m = run.group_size;
            let settings = MaxMinSettings {
                restarts: run.restarts,
                grid_points: run.grid_points,
                ..MaxMinSettings::default()
            };
            settings.validate()?;
            for &k in &grid.n_users {
                for &n in &grid.n_elements {
                    let mut sys = base.clone();
                    sys.n_users = k;
                    sys.n_elements = n;
                    let t0 = Instant::now();
                    let est = estimate_outage_random_users(&sys, q, run.trials, run.seed, &exec);
                    sw.outage("", &sys, Some(q), None, Metric::OutageMc, est, run.trials, t0.elapsed().as_secs_f64())?;
                    let t0 = Instant::now();
                    let est = estimate_outage_csi(&sys, m, run.csi_trials, &settings, run.seed, &exec);
                    sw.outage("", &sys, None, Some(m), Metric::OutageCsi, est, run.csi_trials, t0.elapsed().as_secs_f64())?;
                    let t0 = Instant::now();
                    let est = genie_outage_lower_bound(&sys, m, run.csi_trials, run.seed, &exec);
                    sw.outage("", &sys, None, Some(m), Metric::OutageGenie, est, run.csi_trials, t0.elapsed().as_secs_f64())?;
                }
            }
        }
    }
    Ok(sw.out)
}

/// Output locations of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputPaths {
    pub csv: PathBuf,
    pub histogram: Option<PathBuf>,
    pub manifest: PathBuf,
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Writes the CSV files and the manifest into `dir`.
pub fn write_outputs(
    dir: &Path,
    preset: Preset,
    cfg: &ExperimentConfig,
    out: &RunOutput,
    workers: usize,
    full: bool,
    runtime_s: f64,
) -> Result<OutputPaths, CliError> {
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv = dir.join(format!("{preset}.csv"));
    write_csv(&csv, &out.records)?;
    let histogram = if out.histogram.is_empty() {
        None
    } else {
        let p = dir.join(format!("{preset}_hist.csv"));
        write_csv(&p, &out.histogram)?;
        Some(p)
    };
    let manifest_path = dir.join(format!("{preset}_manifest.json"));
    let file_name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut outputs = vec![file_name(&csv)];
    outputs.extend(histogram.as_deref().map(file_name));
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        preset,
        config: cfg.clone(),
        seeds: BTreeMap::from([
            ("master".to_string(), cfg.run.seed),
        ]),
        grid: preset_grid(preset),
        workers,
        full,
        runtime_s,
        outputs,
        warnings: out.warnings.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| io_err(&manifest_path, e))?;
    fs::write(&manifest_path, text + "\n").map_err(|e| io_err(&manifest_path, e))?;
    Ok(OutputPaths { csv, histogram, manifest: manifest_path })
}

/// Derived quantities of a configuration, as printed by `validate`.
pub fn validate_report(cfg: &ExperimentConfig) -> Result<String, CliError> {
    use std::fmt::Write as _;
    let sys = &cfg.system;
    let s = sys.derived_stats()?;
    let mut r = String::new();
    let w = &mut r;
    let _ = writeln!(w, "config ok");
    let _ = writeln!(w, "gamma          = {:.3e}", s.gamma);
    let _ = writeln!(w, "sigma_f2       = {:.3e}  (d_f = {:.3} m)", s.sigma_f2, s.d_f);
    for (k, u) in s.users.iter().enumerate() {
        let rho = pearson_correlation(u.sigma_g2, u.sigma_h2, s.sigma_f2, sys.n_elements)?;
        let _ = writeln!(
            w,
            "user {k}: d_g = {:.3} m, d_h = {:.3} m, sigma_g2 = {:.3e}, sigma_h2 = {:.3e}, lambda = {:.3e}, rho = {:.3e}",
            u.d_g, u.d_h, u.sigma_g2, u.sigma_h2, u.lambda, rho
        );
    }
    let feasible: Vec<String> = sys.feasible_q().iter().map(u32::to_string).collect();
    let _ = writeln!(w, "feasible Q     = {{{}}}", feasible.join(","));
    Ok(r)
}

#[derive(Debug, Parser)]
#[command(name = "irs-rpb", version, about = "Outage study of IRS-aided multicast with random passive beamforming")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a figure preset and write a CSV plus a JSON manifest.
    Run(RunArgs),
    /// Check a config and print derived quantities without simulating.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Print the full base config of a preset as TOML.
    ShowConfig {
        #[arg(long, value_enum)]
        preset: Preset,
    },
}

#[derive(Debug, clap::Args)]
pub struct RunArgs {
    /// Optional when the config is a manifest, which names its preset.
    #[arg(long, value_enum)]
    pub preset: Option<Preset>,
    /// TOML config, or a JSON manifest of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dotted-path override such as `run.trials=1000`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Output directory [default: $IRS_RPB_OUT_DIR or ./results].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Master seed; overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads [default: available parallelism].
    #[arg(long)]
    pub workers: Option<usize>,
    /// Lift the trial and N caps.
    #[arg(long)]
    pub full: bool,
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let mut overrides = args.set.clone();
    if let Some(seed) = args.seed {
        overrides.push(format!("run.seed={seed}"));
    }
    let loaded = load_config(args.config.as_deref(), args.preset, &overrides)?;
    let preset = loaded
        .preset
        .ok_or_else(|| CliError::Config("no preset: pass --preset or a manifest config".into()))?;
    let cfg = loaded.config;
    let mut warnings = check_caps(preset, &cfg, args.full)?;
    let exec = args.workers.map(Exec::new).unwrap_or_default();
    let t0 = Instant::now();
    let mut out = run_preset(preset, &cfg, exec)?;
    let runtime = t0.elapsed().as_secs_f64();
    warnings.append(&mut out.warnings);
    out.warnings = warnings;
    let dir = args
        .out
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT_DIR));
    let paths = write_outputs(&dir, preset, &cfg, &out, exec.workers(), args.full, runtime)?;
    for w in &out.warnings {
        eprintln!("warning: {w}");
    }
    println!("wrote {}", paths.csv.display());
    if let Some(h) = &paths.histogram {
        println!("wrote {}", h.display());
    }
    println!("wrote {}", paths.manifest.display());
    println!("{} records in {runtime:.2} s", out.records.len());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Validate { config } => {
            let loaded = load_config(Some(&config), None, &[])?;
            print!("{}", validate_report(&loaded.config)?);
            Ok(())
        }
        Command::ShowConfig { preset } => {
            let text = toml::to_string_pretty(&preset_config(preset))
                .map_err(|e| CliError::Io(e.to_string()))?;
            print!("{text}");
            Ok(())
        }
    }
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
