//! Batch experiments over catalog systems and strategies, and their tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::catalog::{self, CatalogError, System};
use crate::linalg::Vector;
use crate::netmpc::{CentralNode, InProcessLink, LocalNode};
use crate::simulator::{
    self, aggregate, default_max_steps, rollout_with, Monolithic, RolloutError, RolloutMetrics, SamplingError,
    SamplingMode, StateSampler, StepController, TrajectoryRecord,
};
use crate::strategies::{Strategy, StrategyOptions};

#[derive(Debug, thiserror::Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Catalog(#[from] CatalogError),
    #[error("{system}: {source}")]
    Sampling {
        system: String,
        #[source]
        source: SamplingError,
    },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("malformed result table: {0}")]
    Table(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub systems: Vec<String>,
    pub strategies: Vec<Strategy>,
    pub n_starts: usize,
    /// Per-system overrides of `n_starts`.
    pub starts: BTreeMap<String, usize>,
    /// Explicit initial states; replaces sampling for every system.
    pub initial_states: Option<Vec<Vec<f64>>>,
    pub seed: u64,
    pub eps: f64,
    pub options: StrategyOptions,
    pub sampling: SamplingMode,
    /// Run through an in-process central/local node pair.
    pub networked: bool,
    pub output: Option<PathBuf>,
    /// Worker threads; 0 uses the available parallelism.
    pub threads: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            systems: vec!["DI6".into()],
            strategies: vec![Strategy::Basic],
            n_starts: 100,
            starts: BTreeMap::new(),
            initial_states: None,
            seed: 1,
            eps: 1e-3,
            options: StrategyOptions::default(),
            sampling: SamplingMode::Auto,
            networked: false,
            output: None,
            threads: 0,
        }
    }
}

impl ExperimentConfig {
    /// All systems and strategies, 1000 starts on the small systems and 100
    /// on INPE50, COMA40 and MIMO75.
    pub fn desk_scale(seed: u64) -> Self {
        let starts = ["INPE50", "COMA40", "MIMO75"].iter().map(|s| (s.to_string(), 100)).collect();
        Self {
            systems: catalog::SYSTEM_NAMES.iter().map(|s| s.to_string()).collect(),
            strategies: Strategy::ALL.to_vec(),
            n_starts: 1000,
            starts,
            seed,
            ..Self::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        if self.systems.is_empty() || self.strategies.is_empty() {
            return Err(ExperimentError::Config("systems and strategies must be nonempty".into()));
        }
        for name in self.systems.iter().chain(self.starts.keys()) {
            if !catalog::SYSTEM_NAMES.iter().any(|s| s.eq_ignore_ascii_case(name)) {
                return Err(ExperimentError::Config(format!("unknown system {name:?}")));
            }
        }
        if self.n_starts == 0 || self.starts.values().any(|&n| n == 0) {
            return Err(ExperimentError::Config("n_starts must be at least 1".into()));
        }
        if !(self.eps > 0.0) {
            return Err(ExperimentError::Config("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn starts_for(&self, system: &str) -> usize {
        self.starts
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(system))
            .map_or(self.n_starts, |(_, &n)| n)
    }
}

/// Sampler seed of a system: the experiment seed mixed with the name, so
/// every strategy of a system starts from the same states.
pub fn system_seed(seed: u64, system: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in system.to_ascii_uppercase().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    seed ^ h
}

pub fn initial_states(cfg: &ExperimentConfig, sys: &System) -> Result<Vec<Vector>, ExperimentError> {
    if let Some(states) = &cfg.initial_states {
        return states
            .iter()
            .map(|x| {
                if x.len() == sys.qp.n {
                    Ok(Vector::from_row_slice(x))
                } else {
                    Err(ExperimentError::Config(format!("{}: initial state of length {}", sys.name, x.len())))
                }
            })
            .collect();
    }
    let wrap = |source| ExperimentError::Sampling { system: sys.name.clone(), source };
    let mut sampler = StateSampler::new(&sys.qp, sys.box_constraints(), system_seed(cfg.seed, &sys.name), cfg.sampling).map_err(wrap)?;
    log::info!("{}: sampling {} starts ({:?})", sys.name, cfg.starts_for(&sys.name), sampler.mode());
    sampler.take(&sys.qp, cfg.starts_for(&sys.name)).map_err(wrap)
}

/// Outcome of one rollout job.
#[derive(Debug, Clone)]
pub struct JobResult {
    pub record: TrajectoryRecord,
    pub metrics: Option<RolloutMetrics>,
}

fn run_job(cfg: &ExperimentConfig, sys: &System, central: &CentralNode, strategy: Strategy, start: usize, x0: &Vector) -> JobResult {
    let max_steps = default_max_steps(&sys.spec);
    let result = if cfg.networked {
        let link = InProcessLink { central: central.clone() };
        let mut node = LocalNode::new(&sys.spec, Arc::clone(&central.qp), strategy, cfg.options, link);
        rollout_with(&sys.spec, &mut node as &mut dyn StepController, x0, cfg.eps, max_steps)
    } else {
        let mut ctrl = Monolithic::new(&sys.spec, &sys.qp, strategy, cfg.options);
        rollout_with(&sys.spec, &mut ctrl, x0, cfg.eps, max_steps)
    };
    let (metrics, traj, converged) = match &result {
        Ok(tr) => (Some(RolloutMetrics::from_trajectory(tr, sys.qp.q())), Some(tr), true),
        Err(RolloutError::NonConvergence { partial, .. }) => {
            log::warn!("{} {strategy} start {start}: no convergence", sys.name);
            (None, Some(partial.as_ref()), false)
        }
        Err(e) => {
            log::warn!("{} {strategy} start {start}: {e}", sys.name);
            (None, None, false)
        }
    };
    let partial = traj.map(|tr| RolloutMetrics::from_trajectory(tr, sys.qp.q()));
    let shown = metrics.as_ref().or(partial.as_ref());
    let record = TrajectoryRecord {
        seed: cfg.seed,
        system: sys.name.clone(),
        strategy: strategy.name().to_string(),
        start,
        steps: shown.map_or(0, |m| m.n_steps),
        terminal_entry_step: traj.map_or(0, |t| t.terminal_entry_step),
        n_qp: shown.map_or(0, |m| m.n_qp),
        reusability: shown.and_then(|m| m.reusability),
        requests: shown.map_or(0, |m| m.requests),
        payload_bytes: shown.map_or(0, |m| m.payload_bytes),
        converged,
        wall_ms: shown.map_or(0.0, |m| m.wall_time * 1e3),
    };
    JobResult { record, metrics }
}

/// Runs `jobs` on `threads` workers, keeping the input order.
fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<R>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..threads {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                results.lock().expect("result slots")[i] = Some(r);
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every job ran")).collect()
}

/// Per-trajectory records and the aggregated table.
#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub records: Vec<TrajectoryRecord>,
    pub table: ResultTable,
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput, ExperimentError> {
    cfg.validate()?;
    let threads = if cfg.threads == 0 {
        std::thread::available_parallelism().map_or(1, |n| n.get())
    } else {
        cfg.threads
    };
    let mut records = Vec::new();
    let mut table = ResultTable {
        systems: Vec::new(),
        strategies: cfg.strategies.iter().map(|s| s.name().to_string()).collect(),
        cells: vec![Vec::new(); cfg.strategies.len()],
    };
    for name in &cfg.systems {
        let sys = catalog::load_system(name)?;
        let starts = initial_states(cfg, &sys)?;
        let central = CentralNode::new(Arc::new(sys.qp.clone()), cfg.options);
        table.systems.push(sys.name.clone());
        for (si, &strategy) in cfg.strategies.iter().enumerate() {
            let jobs: Vec<(usize, &Vector)> = starts.iter().enumerate().collect();
            let results = parallel_map(&jobs, threads, |&(j, x0)| run_job(cfg, &sys, &central, strategy, j, x0));
            let metrics: Vec<RolloutMetrics> = results.iter().filter_map(|r| r.metrics.clone()).collect();
            let failed = results.len() - metrics.len();
            table.cells[si].push(Cell::from_summary(aggregate(&metrics).as_ref(), results.len(), failed));
            records.extend(results.into_iter().map(|r| r.record));
            log::info!("{} {strategy}: done", sys.name);
        }
    }
    if let Some(dir) = &cfg.output {
        write_outputs(dir, &records, &table)?;
    }
    Ok(ExperimentOutput { records, table })
}

pub fn write_outputs(dir: &Path, records: &[TrajectoryRecord], table: &ResultTable) -> Result<(), ExperimentError> {
    std::fs::create_dir_all(dir)?;
    let mut w = csv::Writer::from_path(dir.join("trajectories.csv"))?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    emit_table(table, TableFormat::Csv, &dir.join("table.csv"))?;
    emit_table(table, TableFormat::Markdown, &dir.join("table.md"))?;
    Ok(())
}

fn round_to(v: f64, decimals: i32) -> f64 {
    let s = 10f64.powi(decimals);
    (v * s).round() / s
}

/// One (strategy, system) entry. Values are stored rounded to the
/// precision they are printed with.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    /// Percent, one decimal; `None` when no trajectory had a defined value.
    pub reusability: Option<f64>,
    pub requests: Option<f64>,
    pub data_bytes: Option<f64>,
    pub qp_per_trajectory: Option<f64>,
    /// Mean wall time per step in milliseconds.
    pub step_ms: Option<f64>,
    pub trajectories: usize,
    pub failed: usize,
}

impl Cell {
    pub fn from_summary(s: Option<&simulator::Summary>, trajectories: usize, failed: usize) -> Self {
        Self {
            reusability: s.and_then(|s| s.reusability).map(|r| round_to(100.0 * r, 1)),
            requests: s.map(|s| round_to(s.requests, 3)),
            data_bytes: s.map(|s| round_to(s.payload_bytes, 3)),
            qp_per_trajectory: s.map(|s| round_to(s.n_qp, 3)),
            step_ms: s.map(|s| round_to(1e3 * s.step_time, 4)),
            trajectories,
            failed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Reusability,
    Requests,
    DataBytes,
    QpPerTrajectory,
    StepMs,
    Trajectories,
    Failed,
}

impl Metric {
    pub const ALL: [Metric; 7] = [
        Metric::Reusability,
        Metric::Requests,
        Metric::DataBytes,
        Metric::QpPerTrajectory,
        Metric::StepMs,
        Metric::Trajectories,
        Metric::Failed,
    ];

    pub fn key(self) -> &'static str {
        match self {
            Metric::Reusability => "reusability_pct",
            Metric::Requests => "requests",
            Metric::DataBytes => "data_bytes",
            Metric::QpPerTrajectory => "qp_per_trajectory",
            Metric::StepMs => "step_ms",
            Metric::Trajectories => "trajectories",
            Metric::Failed => "failed",
        }
    }

    fn decimals(self) -> usize {
        match self {
            Metric::Reusability => 1,
            Metric::Requests | Metric::DataBytes | Metric::QpPerTrajectory => 3,
            Metric::StepMs => 4,
            Metric::Trajectories | Metric::Failed => 0,
        }
    }

    /// Wall-clock metrics differ between reruns.
    pub fn is_timing(self) -> bool {
        self == Metric::StepMs
    }

    fn get(self, c: &Cell) -> Option<f64> {
        match self {
            Metric::Reusability => c.reusability,
            Metric::Requests => c.requests,
            Metric::DataBytes => c.data_bytes,
            Metric::QpPerTrajectory => c.qp_per_trajectory,
            Metric::StepMs => c.step_ms,
            Metric::Trajectories => Some(c.trajectories as f64),
            Metric::Failed => Some(c.failed as f64),
        }
    }

    fn set(self, c: &mut Cell, v: Option<f64>) {
        match self {
            Metric::Reusability => c.reusability = v,
            Metric::Requests => c.requests = v,
            Metric::DataBytes => c.data_bytes = v,
            Metric::QpPerTrajectory => c.qp_per_trajectory = v,
            Metric::StepMs => c.step_ms = v,
            Metric::Trajectories => c.trajectories = v.unwrap_or(0.0) as usize,
            Metric::Failed => c.failed = v.unwrap_or(0.0) as usize,
        }
    }

    fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.key() == key)
    }
}

/// Strategies by systems, with a cross-system average per metric.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    pub systems: Vec<String>,
    pub strategies: Vec<String>,
    /// `cells[strategy][system]`.
    pub cells: Vec<Vec<Cell>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Csv,
    Markdown,
}

const NA: &str = "n/a";

impl ResultTable {
    pub fn cell(&self, strategy: &str, system: &str) -> Option<&Cell> {
        let si = self.strategies.iter().position(|s| s == strategy)?;
        let yi = self.systems.iter().position(|s| s.eq_ignore_ascii_case(system))?;
        self.cells.get(si)?.get(yi)
    }

    /// Mean over the systems where the metric is defined.
    pub fn average(&self, strategy: usize, metric: Metric) -> Option<f64> {
        let values: Vec<f64> = self.cells[strategy].iter().filter_map(|c| metric.get(c)).collect();
        if values.is_empty() {
            return None;
        }
        Some(round_to(values.iter().sum::<f64>() / values.len() as f64, metric.decimals() as i32))
    }

    fn fmt_value(v: Option<f64>, metric: Metric) -> String {
        match v {
            Some(v) => format!("{:.*}", metric.decimals(), v),
            None => NA.to_string(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("approach,metric");
        for s in &self.systems {
            out.push(',');
            out.push_str(s);
        }
        out.push_str(",average\n");
        for (si, strategy) in self.strategies.iter().enumerate() {
            for metric in Metric::ALL {
                let _ = write!(out, "{strategy},{}", metric.key());
                for c in &self.cells[si] {
                    let _ = write!(out, ",{}", Self::fmt_value(metric.get(c), metric));
                }
                let _ = writeln!(out, ",{}", Self::fmt_value(self.average(si, metric), metric));
            }
        }
        out
    }

    /// Parses `to_csv` output; stored averages must match the recomputed ones.
    pub fn from_csv(text: &str) -> Result<Self, ExperimentError> {
        let bad = |msg: String| ExperimentError::Table(msg);
        let mut lines = text.lines();
        let head: Vec<&str> = lines.next().ok_or_else(|| bad("empty table".into()))?.split(',').collect();
        if head.len() < 3 || head[0] != "approach" || head[1] != "metric" || head[head.len() - 1] != "average" {
            return Err(bad("unexpected header".into()));
        }
        let systems: Vec<String> = head[2..head.len() - 1].iter().map(|s| s.to_string()).collect();
        let empty = Cell {
            reusability: None,
            requests: None,
            data_bytes: None,
            qp_per_trajectory: None,
            step_ms: None,
            trajectories: 0,
            failed: 0,
        };
        let mut table = ResultTable { systems, strategies: Vec::new(), cells: Vec::new() };
        let mut averages = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != head.len() {
                return Err(bad(format!("row with {} fields", fields.len())));
            }
            let metric = Metric::from_key(fields[1]).ok_or_else(|| bad(format!("unknown metric {}", fields[1])))?;
            let si = match table.strategies.iter().position(|s| s == fields[0]) {
                Some(i) => i,
                None => {
                    table.strategies.push(fields[0].to_string());
                    table.cells.push(vec![empty.clone(); table.systems.len()]);
                    table.strategies.len() - 1
                }
            };
            let parse = |f: &str| -> Result<Option<f64>, ExperimentError> {
                if f == NA {
                    Ok(None)
                } else {
                    f.parse().map(Some).map_err(|_| bad(format!("bad number {f:?}")))
                }
            };
            for (yi, f) in fields[2..fields.len() - 1].iter().enumerate() {
                metric.set(&mut table.cells[si][yi], parse(f)?);
            }
            averages.push((si, metric, parse(fields[fields.len() - 1])?));
        }
        for (si, metric, stored) in averages {
            if table.average(si, metric) != stored {
                return Err(bad(format!("average of {} {} does not match its row", table.strategies[si], metric.key())));
            }
        }
        Ok(table)
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::new();
        for metric in Metric::ALL {
            let _ = writeln!(out, "### {}\n", metric.key());
            let _ = write!(out, "| approach |");
            for s in &self.systems {
                let _ = write!(out, " {s} |");
            }
            out.push_str(" average |\n|---|");
            for _ in &self.systems {
                out.push_str("---:|");
            }
            out.push_str("---:|\n");
            for (si, strategy) in self.strategies.iter().enumerate() {
                let _ = write!(out, "| {strategy} |");
                for c in &self.cells[si] {
                    let _ = write!(out, " {} |", Self::fmt_value(metric.get(c), metric));
                }
                let _ = writeln!(out, " {} |", Self::fmt_value(self.average(si, metric), metric));
            }
            out.push('\n');
        }
        out
    }
}

/// Drops wall-clock data from an emitted CSV: the `wall_ms` column of
/// trajectory files and the timing rows of table files. What remains is
/// reproducible byte for byte.
pub fn strip_timing(csv_text: &str) -> String {
    let mut lines = csv_text.lines();
    let Some(header) = lines.next() else {
        return String::new();
    };
    let fields: Vec<&str> = header.split(',').collect();
    let wall = fields.iter().position(|&f| f == "wall_ms");
    let metric = (fields.get(1) == Some(&"metric")).then_some(1);
    let timing_keys: Vec<&str> = Metric::ALL.iter().filter(|m| m.is_timing()).map(|m| m.key()).collect();
    let mut out = String::new();
    for line in std::iter::once(header).chain(lines) {
        let cols: Vec<&str> = line.split(',').collect();
        if metric.is_some_and(|i| cols.get(i).is_some_and(|k| timing_keys.contains(k))) {
            continue;
        }
        let kept: Vec<&str> = cols.iter().enumerate().filter(|&(i, _)| Some(i) != wall).map(|(_, c)| *c).collect();
        out.push_str(&kept.join(","));
        out.push('\n');
    }
    out
}

pub fn emit_table(table: &ResultTable, format: TableFormat, path: &Path) -> Result<(), ExperimentError> {
    if table.strategies.is_empty() || table.systems.is_empty() {
        return Err(ExperimentError::Table("empty table".into()));
    }
    let text = match format {
        TableFormat::Csv => table.to_csv(),
        TableFormat::Markdown => table.to_markdown(),
    };
    std::fs::write(path, text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(r: Option<f64>, req: f64) -> Cell {
        let s = simulator::Summary {
            trajectories: 2,
            reusability: r,
            reusability_defined: 2,
            requests: req,
            payload_bytes: 6.0 * req,
            n_qp: req,
            steps: 10.0,
            step_time: 1.234_567e-4,
        };
        Cell::from_summary(Some(&s), 2, 0)
    }

    #[test]
    fn csv_round_trip_and_layout() {
        let table = ResultTable {
            systems: vec!["DI6".into(), "US12".into()],
            strategies: vec!["basic".into(), "asu".into()],
            cells: vec![vec![cell(Some(0.0123), 2.663), cell(None, 3.306)], vec![cell(Some(1.0), 1.0), cell(Some(0.9876), 1.25)]],
        };
        let csv = table.to_csv();
        assert!(csv.starts_with("approach,metric,DI6,US12,average\n"));
        assert!(csv.contains("basic,reusability_pct,1.2,n/a,1.2\n"));
        assert!(csv.contains("asu,reusability_pct,100.0,98.8,99.4\n"));
        assert_eq!(ResultTable::from_csv(&csv).unwrap(), table);
        let tampered = csv.replace("asu,requests,1.000,1.250,1.125", "asu,requests,1.000,1.250,9.000");
        assert!(ResultTable::from_csv(&tampered).is_err());
        let md = table.to_markdown();
        assert!(md.contains("| approach | DI6 | US12 | average |"));
    }

    #[test]
    fn config_parsing() {
        let cfg = ExperimentConfig::from_json(r#"{"systems": ["DI6"], "strategies": ["basic", "closeq"], "n_starts": 3, "options": {"limit": 4}}"#).unwrap();
        assert_eq!(cfg.strategies, vec![Strategy::Basic, Strategy::Closeq]);
        assert_eq!(cfg.options.limit, 4);
        assert!(ExperimentConfig::from_json(r#"{"systems": ["XYZ"]}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"n_starts": 0}"#).is_err());
        assert!(ExperimentConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let desk = ExperimentConfig::desk_scale(1);
        assert_eq!(desk.starts_for("SISO20"), 1000);
        assert_eq!(desk.starts_for("MIMO75"), 100);
    }

    #[test]
    fn seeds_differ_per_system() {
        assert_ne!(system_seed(1, "DI6"), system_seed(1, "US12"));
        assert_eq!(system_seed(1, "di6"), system_seed(1, "DI6"));
    }
}
