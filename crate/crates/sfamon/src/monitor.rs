//! Two-level model assembly, the online verdict policy, and report I/O.
//!
//! A fitted model holds one linear slow feature model per variable subset
//! and one kernel model over the subset system features plus remainder
//! variables, each with kernel-density control limits for its four
//! statistics. Monitoring evaluates every statistic per sample and feeds
//! the aggregated T/D alarm flags into a windowed policy: persistent static
//! and temporal alarms mean a fault, while static alarms whose temporal
//! counterpart has cleared mean the process settled at a new operating
//! point.

use std::fmt;
use std::path::Path;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{RawDataset, Standardizer};
use crate::error::{Error, Result};
use crate::ksfa::{build_super_samples, fit_ksfa, KsfaModel};
use crate::limits::{evaluate, kde_limit, ControlLimit};
use crate::partition::{partition_variables, SubsetPartition};
use crate::sfa::{fit_sfa, SfaModel, SubsetStats};

/// Version string written into model files; loading any other version is
/// refused.
pub const MODEL_VERSION: &str = "1";

/// Verdict of the alarm policy at one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Normal,
    Transient,
    ConditionChange,
    Fault,
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Status::Normal => "normal",
            Status::Transient => "transient",
            Status::ConditionChange => "condition-change",
            Status::Fault => "fault",
        };
        f.write_str(s)
    }
}

impl std::str::FromStr for Status {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Status::Normal),
            "transient" => Ok(Status::Transient),
            "condition-change" => Ok(Status::ConditionChange),
            "fault" => Ok(Status::Fault),
            other => Err(Error::data(format!("unknown status {other:?}"))),
        }
    }
}

/// Control limits of one model level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitSet {
    pub t2s: ControlLimit,
    pub t2f: ControlLimit,
    pub d2s: ControlLimit,
    pub d2f: ControlLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelLimits {
    pub subsets: Vec<LimitSet>,
    pub global: LimitSet,
}

/// A fully fitted two-level monitoring model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TwoLevelModel {
    pub standardizer: Standardizer,
    pub partition: SubsetPartition,
    pub subsets: Vec<SfaModel>,
    pub global: KsfaModel,
    pub limits: ModelLimits,
    pub config: RunConfig,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: String,
    #[serde(flatten)]
    model: TwoLevelModel,
}

impl TwoLevelModel {
    pub fn subset_count(&self) -> usize {
        self.subsets.len()
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelFile {
            version: MODEL_VERSION.to_string(),
            model: self.clone(),
        };
        serde_json::to_string(&file).map_err(|e| Error::data(format!("model encode: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile =
            serde_json::from_str(text).map_err(|e| Error::data(format!("model decode: {e}")))?;
        if file.version != MODEL_VERSION {
            return Err(Error::data(format!(
                "unsupported model version {:?}; this build reads version {:?}",
                file.version, MODEL_VERSION
            )));
        }
        Ok(file.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Training alarm rate of every statistic, in report column order.
#[derive(Debug, Clone)]
pub struct TrainingSummary {
    pub rates: Vec<(String, f64)>,
}

/// Names of the four statistics of one level, `label` being a 1-based
/// subset number or `g` for the global level.
fn stat_names(label: &str) -> [String; 4] {
    ["T2s", "T2f", "D2s", "D2f"].map(|s| format!("{s}_{label}"))
}

fn alarm_rate(series: &[f64], limit: &ControlLimit) -> f64 {
    if series.is_empty() {
        return 0.0;
    }
    let hits = series
        .iter()
        .filter(|&&v| evaluate(Some(v), limit) == Some(true))
        .count();
    hits as f64 / series.len() as f64
}

/// Four statistic series of one level over a training run; T entries cover
/// every sample, D entries start at the second.
struct StatSeries {
    t2s: Vec<f64>,
    t2f: Vec<f64>,
    d2s: Vec<f64>,
    d2f: Vec<f64>,
}

impl StatSeries {
    fn collect(stats: &[SubsetStats]) -> Self {
        StatSeries {
            t2s: stats.iter().map(|s| s.t2s).collect(),
            t2f: stats.iter().map(|s| s.t2f).collect(),
            d2s: stats.iter().filter_map(|s| s.d2s).collect(),
            d2f: stats.iter().filter_map(|s| s.d2f).collect(),
        }
    }

    fn limits(&self, alpha: f64) -> Result<LimitSet> {
        Ok(LimitSet {
            t2s: kde_limit(&self.t2s, alpha)?,
            t2f: kde_limit(&self.t2f, alpha)?,
            d2s: kde_limit(&self.d2s, alpha)?,
            d2f: kde_limit(&self.d2f, alpha)?,
        })
    }

    fn rates(&self, label: &str, limits: &LimitSet, out: &mut Vec<(String, f64)>) {
        let names = stat_names(label);
        out.push((names[0].clone(), alarm_rate(&self.t2s, &limits.t2s)));
        out.push((names[1].clone(), alarm_rate(&self.t2f, &limits.t2f)));
        out.push((names[2].clone(), alarm_rate(&self.d2s, &limits.d2s)));
        out.push((names[3].clone(), alarm_rate(&self.d2f, &limits.d2f)));
    }
}

/// Fits the complete two-level model on a training set: standardize,
/// partition, one slow feature model per subset, a kernel model over the
/// super samples, and kernel-density limits for all statistics.
pub fn build_model(train: &RawDataset, cfg: &RunConfig) -> Result<(TwoLevelModel, TrainingSummary)> {
    if train.n() < train.j() {
        return Err(Error::data(format!(
            "training needs at least as many samples as variables ({} samples, {} variables)",
            train.n(),
            train.j()
        )));
    }
    let standardizer = Standardizer::fit(train)?;
    let std = standardizer.apply(train)?;
    let partition = partition_variables(&std, &cfg.ssfa(), cfg.alpha)?;
    let subsets: Vec<SfaModel> = partition
        .sdl
        .iter()
        .map(|vars| fit_sfa(&std.select_columns(vars)))
        .collect::<Result<_>>()?;
    let supers = build_super_samples(&partition, &subsets, &std)?;
    let global = fit_ksfa(&supers, &cfg.ksfa())?;

    let n = std.n();
    let mut subset_series = Vec::with_capacity(subsets.len());
    for (vars, model) in partition.sdl.iter().zip(&subsets) {
        let sub = std.select_columns(vars);
        let mut stats = Vec::with_capacity(n);
        for i in 0..n {
            let x = sub.x.row(i).transpose();
            let prev = (i > 0).then(|| sub.x.row(i - 1).transpose());
            let (sys, res) = model.project(&x, prev.as_ref());
            stats.push(model.statistics(&sys, &res)?);
        }
        subset_series.push(StatSeries::collect(&stats));
    }
    let mut global_stats = Vec::with_capacity(n);
    for i in 0..n {
        let x = supers.row(i).transpose();
        let prev = (i > 0).then(|| supers.row(i - 1).transpose());
        let (sys, res) = global.project(&x, prev.as_ref())?;
        global_stats.push(global.statistics(&sys, &res)?);
    }
    let global_series = StatSeries::collect(&global_stats);

    let limits = ModelLimits {
        subsets: subset_series
            .iter()
            .map(|s| s.limits(cfg.limit_alpha))
            .collect::<Result<_>>()?,
        global: global_series.limits(cfg.limit_alpha)?,
    };

    let mut rates = Vec::new();
    for (k, series) in subset_series.iter().enumerate() {
        series.rates(&(k + 1).to_string(), &limits.subsets[k], &mut rates);
    }
    global_series.rates("g", &limits.global, &mut rates);

    let model = TwoLevelModel {
        standardizer,
        partition,
        subsets,
        global,
        limits,
        config: cfg.clone(),
    };
    Ok((model, TrainingSummary { rates }))
}

/// Statistics and alarm decisions of one model level at one sample.
#[derive(Debug, Clone)]
pub struct LevelRecord {
    pub stats: SubsetStats,
    pub t2s_alarm: bool,
    pub t2f_alarm: bool,
    pub d2s_alarm: Option<bool>,
    pub d2f_alarm: Option<bool>,
}

impl LevelRecord {
    /// Aggregated static-group flag.
    pub fn t_flag(&self) -> bool {
        self.t2s_alarm || self.t2f_alarm
    }

    /// Aggregated temporal-group flag; absent statistics count as quiet.
    pub fn d_flag(&self) -> bool {
        self.d2s_alarm.unwrap_or(false) || self.d2f_alarm.unwrap_or(false)
    }

    fn new(stats: SubsetStats, limits: &LimitSet) -> Self {
        LevelRecord {
            stats,
            t2s_alarm: evaluate(Some(stats.t2s), &limits.t2s).unwrap_or(false),
            t2f_alarm: evaluate(Some(stats.t2f), &limits.t2f).unwrap_or(false),
            d2s_alarm: evaluate(stats.d2s, &limits.d2s),
            d2f_alarm: evaluate(stats.d2f, &limits.d2f),
        }
    }
}

/// Verdict at one sample: per-subset and global statistics, alarms, and the
/// policy statuses. `local_context` records whether any subset was
/// non-normal at this sample; it annotates but never alters the global
/// status.
#[derive(Debug, Clone)]
pub struct SampleVerdict {
    pub index: usize,
    pub subsets: Vec<LevelRecord>,
    pub global: LevelRecord,
    pub local_status: Vec<Status>,
    pub global_status: Status,
    pub local_context: bool,
}

/// Carry-over between consecutive monitored samples: the previous
/// standardized and super rows plus the alarm-flag history per level
/// (subsets first, global last).
#[derive(Debug, Clone)]
pub struct MonitorState {
    policy_window: usize,
    clear_window: usize,
    prev_std: Option<DVector<f64>>,
    prev_super: Option<DVector<f64>>,
    t_flags: Vec<Vec<bool>>,
    d_flags: Vec<Vec<bool>>,
}

impl MonitorState {
    /// Fresh state using the policy windows recorded in the model.
    pub fn new(model: &TwoLevelModel) -> Self {
        Self::with_policy(
            model,
            model.config.policy_window,
            model.config.clear_window,
        )
    }

    /// Fresh state with explicit policy windows.
    pub fn with_policy(model: &TwoLevelModel, policy_window: usize, clear_window: usize) -> Self {
        let levels = model.subset_count() + 1;
        MonitorState {
            policy_window,
            clear_window,
            prev_std: None,
            prev_super: None,
            t_flags: vec![Vec::new(); levels],
            d_flags: vec![Vec::new(); levels],
        }
    }

    pub fn samples_seen(&self) -> usize {
        self.t_flags[0].len()
    }
}

/// True when at least `ceil(w / 2)` of the last `w` flags are raised.
fn window_alarming(flags: &[bool], w: usize) -> bool {
    let take = w.min(flags.len());
    let raised = flags[flags.len() - take..].iter().filter(|&&f| f).count();
    raised >= w.div_ceil(2)
}

/// Applies the verdict policy to one level's full flag history.
///
/// T-alarming and D-alarming are majority votes over the last `w` flags.
/// D counts as cleared when the last `q` flags are all quiet after some
/// earlier D-alarming stretch. Fault = static and temporal both alarming;
/// condition change = static alarming with temporal cleared; transient =
/// static alarming while temporal is neither; otherwise normal.
pub fn classify_status(t_flags: &[bool], d_flags: &[bool], w: usize, q: usize) -> Status {
    let n = d_flags.len();
    let t_alarming = window_alarming(t_flags, w);
    let d_alarming = window_alarming(d_flags, w);
    let d_cleared = n >= q
        && d_flags[n - q..].iter().all(|&f| !f)
        && (1..=n).any(|m| window_alarming(&d_flags[..m], w));
    if t_alarming && d_alarming {
        Status::Fault
    } else if t_alarming && d_cleared {
        Status::ConditionChange
    } else if t_alarming {
        Status::Transient
    } else {
        Status::Normal
    }
}

/// Scores one raw sample against the model and advances the policy state.
pub fn monitor_sample(
    model: &TwoLevelModel,
    raw: &DVector<f64>,
    state: &mut MonitorState,
) -> Result<SampleVerdict> {
    let x = model.standardizer.apply_sample(raw)?;
    let index = state.samples_seen();

    let mut subsets = Vec::with_capacity(model.subset_count());
    let mut super_parts: Vec<f64> = Vec::new();
    for (vars, sub_model) in model.partition.sdl.iter().zip(&model.subsets) {
        let xk = DVector::from_fn(vars.len(), |i, _| x[vars[i]]);
        let prev_k = state
            .prev_std
            .as_ref()
            .map(|p| DVector::from_fn(vars.len(), |i, _| p[vars[i]]));
        let (sys, res) = sub_model.project(&xk, prev_k.as_ref());
        super_parts.extend(sys.values.iter());
        let stats = sub_model.statistics(&sys, &res)?;
        let k = subsets.len();
        subsets.push(LevelRecord::new(stats, &model.limits.subsets[k]));
    }
    super_parts.extend(model.partition.sdnl.iter().map(|&v| x[v]));
    let super_row = DVector::from_vec(super_parts);

    let (gsys, gres) = model.global.project(&super_row, state.prev_super.as_ref())?;
    let gstats = model.global.statistics(&gsys, &gres)?;
    let global = LevelRecord::new(gstats, &model.limits.global);

    for (k, rec) in subsets.iter().enumerate() {
        state.t_flags[k].push(rec.t_flag());
        state.d_flags[k].push(rec.d_flag());
    }
    let last = state.t_flags.len() - 1;
    state.t_flags[last].push(global.t_flag());
    state.d_flags[last].push(global.d_flag());
    state.prev_std = Some(x);
    state.prev_super = Some(super_row);

    let (w, q) = (state.policy_window, state.clear_window);
    let local_status: Vec<Status> = (0..subsets.len())
        .map(|k| classify_status(&state.t_flags[k], &state.d_flags[k], w, q))
        .collect();
    let global_status = classify_status(&state.t_flags[last], &state.d_flags[last], w, q);
    let local_context = local_status.iter().any(|&s| s != Status::Normal);

    Ok(SampleVerdict {
        index,
        subsets,
        global,
        local_status,
        global_status,
        local_context,
    })
}

/// Per-statistic monitoring summary plus final statuses.
#[derive(Debug, Clone)]
pub struct MonitorSummary {
    /// `(statistic name, alarm rate, first alarm index)` in report column
    /// order.
    pub statistics: Vec<(String, f64, Option<usize>)>,
    pub final_local: Vec<Status>,
    pub final_global: Status,
}

#[derive(Debug, Clone)]
pub struct MonitorReport {
    pub verdicts: Vec<SampleVerdict>,
    pub summary: MonitorSummary,
}

fn summarize(verdicts: &[SampleVerdict], subset_count: usize) -> MonitorSummary {
    let mut statistics = Vec::new();
    let levels: Vec<String> = (1..=subset_count)
        .map(|k| k.to_string())
        .chain(std::iter::once("g".to_string()))
        .collect();
    for (lvl, label) in levels.iter().enumerate() {
        let pick = |v: &SampleVerdict| -> LevelRecord {
            if lvl < subset_count {
                v.subsets[lvl].clone()
            } else {
                v.global.clone()
            }
        };
        let names = stat_names(label);
        let flags_of = |rec: &LevelRecord| {
            [
                Some(rec.t2s_alarm),
                Some(rec.t2f_alarm),
                rec.d2s_alarm,
                rec.d2f_alarm,
            ]
        };
        for s in 0..4 {
            let mut present = 0usize;
            let mut hits = 0usize;
            let mut first = None;
            for v in verdicts {
                if let Some(flag) = flags_of(&pick(v))[s] {
                    present += 1;
                    if flag {
                        hits += 1;
                        if first.is_none() {
                            first = Some(v.index);
                        }
                    }
                }
            }
            let rate = if present > 0 {
                hits as f64 / present as f64
            } else {
                0.0
            };
            statistics.push((names[s].clone(), rate, first));
        }
    }
    let (final_local, final_global) = match verdicts.last() {
        Some(v) => (v.local_status.clone(), v.global_status),
        None => (vec![Status::Normal; subset_count], Status::Normal),
    };
    MonitorSummary {
        statistics,
        final_local,
        final_global,
    }
}

/// Monitors a full dataset in sample order.
pub fn run_monitoring(
    model: &TwoLevelModel,
    test: &RawDataset,
    policy_window: usize,
    clear_window: usize,
) -> Result<MonitorReport> {
    if test.j() != model.standardizer.j() {
        return Err(Error::data(format!(
            "test data has {} variables, model expects {}",
            test.j(),
            model.standardizer.j()
        )));
    }
    let mut state = MonitorState::with_policy(model, policy_window, clear_window);
    let mut verdicts = Vec::with_capacity(test.n());
    for i in 0..test.n() {
        let raw = test.values.row(i).transpose();
        verdicts.push(monitor_sample(model, &raw, &mut state)?);
    }
    let summary = summarize(&verdicts, model.subset_count());
    Ok(MonitorReport { verdicts, summary })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn fmt_flag(f: Option<bool>) -> String {
    match f {
        Some(true) => "1".to_string(),
        Some(false) => "0".to_string(),
        None => String::new(),
    }
}

/// Writes the per-sample report CSV: index, then per subset and for the
/// global level the four statistic values plus the aggregated T and D
/// flags, then the statuses. Absent values are empty cells, so the verdict
/// policy can be replayed from the flag columns alone.
pub fn write_report(path: &Path, report: &MonitorReport, subset_count: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header = vec!["index".to_string()];
    let labels: Vec<String> = (1..=subset_count)
        .map(|k| k.to_string())
        .chain(std::iter::once("g".to_string()))
        .collect();
    for label in &labels {
        let names = stat_names(label);
        header.extend(names.iter().cloned());
        header.push(format!("a_T_{label}"));
        header.push(format!("a_D_{label}"));
    }
    for k in 1..=subset_count {
        header.push(format!("localStatus_{k}"));
    }
    header.push("globalStatus".to_string());
    w.write_record(&header).map_err(csv_err)?;

    for v in &report.verdicts {
        let mut row = vec![v.index.to_string()];
        for lvl in 0..=subset_count {
            let rec = if lvl < subset_count {
                &v.subsets[lvl]
            } else {
                &v.global
            };
            row.push(rec.stats.t2s.to_string());
            row.push(rec.stats.t2f.to_string());
            row.push(fmt_opt(rec.stats.d2s));
            row.push(fmt_opt(rec.stats.d2f));
            row.push(fmt_flag(Some(rec.t_flag())));
            let d = match (rec.d2s_alarm, rec.d2f_alarm) {
                (None, None) => None,
                _ => Some(rec.d_flag()),
            };
            row.push(fmt_flag(d));
        }
        for s in &v.local_status {
            row.push(s.to_string());
        }
        row.push(v.global_status.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::data(format!("csv: {e}"))
}

/// One parsed report row; `None` marks an empty cell.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub index: usize,
    /// Per level (subsets then global): `[t2s, t2f, d2s, d2f]`.
    pub values: Vec<[Option<f64>; 4]>,
    /// Per level: aggregated `(T flag, D flag)`.
    pub flags: Vec<(Option<bool>, Option<bool>)>,
    pub local_status: Vec<Status>,
    pub global_status: Status,
}

/// A parsed report CSV.
#[derive(Debug, Clone)]
pub struct ReportTable {
    pub subset_count: usize,
    pub header: Vec<String>,
    pub rows: Vec<ReportRow>,
}

fn parse_cell_f64(cell: &str) -> Result<Option<f64>> {
    if cell.is_empty() {
        return Ok(None);
    }
    cell.parse()
        .map(Some)
        .map_err(|_| Error::data(format!("bad numeric cell {cell:?}")))
}

fn parse_cell_flag(cell: &str) -> Result<Option<bool>> {
    match cell {
        "" => Ok(None),
        "1" => Ok(Some(true)),
        "0" => Ok(Some(false)),
        other => Err(Error::data(format!("bad flag cell {other:?}"))),
    }
}

/// Reads a report CSV back; the subset count is inferred from the header.
pub fn read_report(path: &Path) -> Result<ReportTable> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    // Layout: 1 + 6 * (K + 1) + K + 1 columns.
    let cols = header.len();
    if cols < 9 || (cols - 8) % 7 != 0 {
        return Err(Error::data(format!(
            "report header has {cols} columns, not a valid layout"
        )));
    }
    let subset_count = (cols - 8) / 7;
    let levels = subset_count + 1;

    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(csv_err)?;
        if rec.len() != cols {
            return Err(Error::data(format!(
                "report row has {} cells, header has {cols}",
                rec.len()
            )));
        }
        let index: usize = rec[0]
            .parse()
            .map_err(|_| Error::data(format!("bad index cell {:?}", &rec[0])))?;
        let mut values = Vec::with_capacity(levels);
        let mut flags = Vec::with_capacity(levels);
        for lvl in 0..levels {
            let base = 1 + 6 * lvl;
            values.push([
                parse_cell_f64(&rec[base])?,
                parse_cell_f64(&rec[base + 1])?,
                parse_cell_f64(&rec[base + 2])?,
                parse_cell_f64(&rec[base + 3])?,
            ]);
            flags.push((
                parse_cell_flag(&rec[base + 4])?,
                parse_cell_flag(&rec[base + 5])?,
            ));
        }
        let status_base = 1 + 6 * levels;
        let local_status = (0..subset_count)
            .map(|k| rec[status_base + k].parse())
            .collect::<Result<_>>()?;
        let global_status = rec[status_base + subset_count].parse()?;
        rows.push(ReportRow {
            index,
            values,
            flags,
            local_status,
            global_status,
        });
    }
    Ok(ReportTable {
        subset_count,
        header,
        rows,
    })
}

/// Recomputes every status in a parsed report from its aggregated flag
/// columns alone. Used to check that reports are self-contained.
pub fn replay_statuses(table: &ReportTable, w: usize, q: usize) -> Vec<(Vec<Status>, Status)> {
    let levels = table.subset_count + 1;
    let mut t: Vec<Vec<bool>> = vec![Vec::new(); levels];
    let mut d: Vec<Vec<bool>> = vec![Vec::new(); levels];
    let mut out = Vec::with_capacity(table.rows.len());
    for row in &table.rows {
        for lvl in 0..levels {
            t[lvl].push(row.flags[lvl].0.unwrap_or(false));
            d[lvl].push(row.flags[lvl].1.unwrap_or(false));
        }
        let local = (0..table.subset_count)
            .map(|k| classify_status(&t[k], &d[k], w, q))
            .collect();
        let global = classify_status(&t[levels - 1], &d[levels - 1], w, q);
        out.push((local, global));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simgen::{simulate, Scenario, ScenarioConfig};

    fn training_data(seed: u64, n: usize) -> RawDataset {
        simulate(&ScenarioConfig::new(Scenario::Normal, n, seed))
            .unwrap()
            .0
    }

    fn fitted(seed: u64, n: usize) -> (TwoLevelModel, TrainingSummary) {
        build_model(&training_data(seed, n), &RunConfig::default()).unwrap()
    }

    #[test]
    fn policy_all_quiet_is_normal() {
        let t = vec![false; 30];
        let d = vec![false; 30];
        assert_eq!(classify_status(&t, &d, 10, 20), Status::Normal);
    }

    #[test]
    fn policy_persistent_t_and_d_is_fault() {
        let t = vec![true; 30];
        let d = vec![true; 30];
        assert_eq!(classify_status(&t, &d, 10, 20), Status::Fault);
    }

    #[test]
    fn policy_t_with_cleared_d_is_condition_change() {
        // D alarmed early, then stayed quiet for the whole clear window.
        let mut t = vec![false; 5];
        t.extend(vec![true; 40]);
        let mut d = vec![false; 5];
        d.extend(vec![true; 15]);
        d.extend(vec![false; 25]);
        assert_eq!(classify_status(&t, &d, 10, 20), Status::ConditionChange);
    }

    #[test]
    fn policy_t_without_d_history_is_transient() {
        let t = vec![true; 30];
        let d = vec![false; 30];
        assert_eq!(classify_status(&t, &d, 10, 20), Status::Transient);
    }

    #[test]
    fn policy_t_alone_with_short_quiet_d_is_transient() {
        // D alarmed, but the quiet run is shorter than the clear window.
        let t = vec![true; 30];
        let mut d = vec![true; 15];
        d.extend(vec![false; 15]);
        assert_eq!(classify_status(&t, &d, 10, 20), Status::Transient);
    }

    #[test]
    fn policy_majority_threshold_is_ceil_half() {
        // w = 10: exactly 5 raised flags in the window alarm, 4 do not.
        let mut t = vec![false; 20];
        for i in 0..5 {
            t[19 - 2 * i] = true;
        }
        let d = vec![false; 20];
        assert_eq!(classify_status(&t, &d, 10, 20), Status::Transient);
        let mut t4 = vec![false; 20];
        for i in 0..4 {
            t4[19 - 2 * i] = true;
        }
        assert_eq!(classify_status(&t4, &d, 10, 20), Status::Normal);
    }

    #[test]
    fn policy_handles_short_history() {
        assert_eq!(classify_status(&[], &[], 10, 20), Status::Normal);
        assert_eq!(classify_status(&[true], &[false], 10, 20), Status::Normal);
        // Five samples, all raised: meets ceil(10/2) already.
        let t = vec![true; 5];
        let d = vec![false; 5];
        assert_eq!(classify_status(&t, &d, 10, 20), Status::Transient);
    }

    #[test]
    fn status_strings_roundtrip() {
        for s in [
            Status::Normal,
            Status::Transient,
            Status::ConditionChange,
            Status::Fault,
        ] {
            let text = s.to_string();
            assert_eq!(text.parse::<Status>().unwrap(), s);
        }
        assert!("broken".parse::<Status>().is_err());
    }

    #[test]
    fn build_model_rejects_fewer_samples_than_variables() {
        let data = training_data(3, 300);
        let short =
            RawDataset::new(data.names.clone(), data.values.rows(0, 5).clone_owned()).unwrap();
        let err = build_model(&short, &RunConfig::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn training_alarm_rates_stay_small() {
        let (_, summary) = fitted(21, 500);
        for (name, rate) in &summary.rates {
            assert!(
                *rate <= 0.07,
                "training alarm rate of {name} is {rate:.3}"
            );
        }
    }

    #[test]
    fn training_replay_stays_quiet() {
        let data = training_data(22, 450);
        let (model, _) = build_model(&data, &RunConfig::default()).unwrap();
        let report = run_monitoring(&model, &data, 10, 20).unwrap();
        for (name, rate, _) in &report.summary.statistics {
            assert!(*rate <= 0.07, "replay alarm rate of {name} is {rate:.3}");
        }
        assert_eq!(report.summary.final_global, Status::Normal);
    }

    #[test]
    fn injected_shift_alarms_the_right_subset() {
        let data = training_data(23, 450);
        let (model, _) = build_model(&data, &RunConfig::default()).unwrap();
        // Pick a variable from the first subset and shift it by ten
        // training standard deviations.
        let var = model.partition.sdl[0][0];
        let sigma = model.standardizer.std[var];
        let mut state = MonitorState::new(&model);
        let mut raw = data.values.row(0).transpose();
        monitor_sample(&model, &raw, &mut state).unwrap();
        raw[var] += 10.0 * sigma;
        let verdict = monitor_sample(&model, &raw, &mut state).unwrap();
        assert!(
            verdict.subsets[0].t_flag(),
            "subset holding the shifted variable must raise its static alarm"
        );
    }

    #[test]
    fn monitoring_rejects_wrong_width() {
        let (model, _) = fitted(24, 400);
        let narrow = RawDataset::new(
            (0..3).map(|c| format!("v{c}")).collect(),
            nalgebra::DMatrix::from_element(10, 3, 1.0),
        )
        .unwrap();
        assert!(run_monitoring(&model, &narrow, 10, 20).is_err());
    }

    #[test]
    fn model_json_roundtrip_reproduces_statistics() {
        let data = training_data(25, 400);
        let (model, _) = build_model(&data, &RunConfig::default()).unwrap();
        let json = model.to_json().unwrap();
        let back = TwoLevelModel::from_json(&json).unwrap();
        let a = run_monitoring(&model, &data, 10, 20).unwrap();
        let b = run_monitoring(&back, &data, 10, 20).unwrap();
        for (va, vb) in a.verdicts.iter().zip(&b.verdicts) {
            assert_eq!(va.global.stats.t2s, vb.global.stats.t2s);
            assert_eq!(va.global.stats.d2s, vb.global.stats.d2s);
            for (sa, sb) in va.subsets.iter().zip(&vb.subsets) {
                assert_eq!(sa.stats.t2s, sb.stats.t2s);
                assert_eq!(sa.stats.t2f, sb.stats.t2f);
            }
        }
    }

    #[test]
    fn unknown_model_version_is_refused() {
        let (model, _) = fitted(26, 400);
        let json = model.to_json().unwrap().replace("\"version\":\"1\"", "\"version\":\"2\"");
        let err = TwoLevelModel::from_json(&json).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn report_roundtrip_and_status_replay() {
        let data = training_data(27, 400);
        let (model, _) = build_model(&data, &RunConfig::default()).unwrap();
        let (test, _) = simulate(&ScenarioConfig::new(Scenario::Fault, 400, 28)).unwrap();
        let report = run_monitoring(&model, &test, 10, 20).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.csv");
        write_report(&path, &report, model.subset_count()).unwrap();
        let table = read_report(&path).unwrap();

        assert_eq!(table.subset_count, model.subset_count());
        assert_eq!(table.rows.len(), report.verdicts.len());
        // First sample has no temporal statistics.
        assert_eq!(table.rows[0].values[0][2], None);
        assert_eq!(table.rows[0].flags[0].1, None);

        // Statuses must be recomputable from the aggregated flags alone.
        let replayed = replay_statuses(&table, 10, 20);
        for ((local, global), row) in replayed.iter().zip(&table.rows) {
            assert_eq!(local, &row.local_status);
            assert_eq!(*global, row.global_status);
        }
    }

    #[test]
    fn local_context_flags_subset_trouble() {
        let data = training_data(29, 450);
        let (model, _) = build_model(&data, &RunConfig::default()).unwrap();
        let mut state = MonitorState::new(&model);
        let var = model.partition.sdl[0][0];
        let sigma = model.standardizer.std[var];
        let mut any_context = false;
        for i in 0..60 {
            let mut raw = data.values.row(i).transpose();
            if i >= 20 {
                raw[var] += 8.0 * sigma;
            }
            let v = monitor_sample(&model, &raw, &mut state).unwrap();
            if i >= 40 {
                any_context |= v.local_context;
                assert_eq!(
                    v.local_context,
                    v.local_status.iter().any(|&s| s != Status::Normal)
                );
            }
        }
        assert!(any_context, "sustained subset shift must set local context");
    }
}
