//! Experiment orchestration: dataset generation, single training runs,
//! evaluation, the variance-reduction sweep, the branch ablation grid and
//! plot-data extraction. Every command writes JSON or CSV only, and nothing
//! that depends on wall-clock time, so reruns with one seed are byte-identical.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_scans, split_scans, Scan, Split, SplitIds, SplitManifest, SplitSpec, VarianceMode, SCAN_EXTENSION};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_model, EvalConfig, Metrics, MetricsReport};
use crate::model::descriptor::argmax;
use crate::phantom::{generate_dataset, write_scan, Orientation, PhantomConfig, Shape};
use crate::seeds;
use crate::stats::{mean_std, median, unpaired_t_test, MeanStd};
use crate::training::{train, Checkpoint, LossBundle, RunConfig, TrainData};

/// Environment variable holding the worker thread count.
pub const WORKERS_ENV: &str = "FREEHAND_WORKERS";

pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCANS_DIR: &str = "scans";

/// Creates `dir`, refusing to reuse a non-empty one unless `force`. Forced
/// reuse overwrites files in place and deletes nothing.
pub fn prepare_output_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() && !force {
        return Err(Error::OutputExists(dir.to_path_buf()));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), reason: e.to_string() })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProtocolClassEntry {
    /// 1-based, shape-major within orientation.
    pub class_id: usize,
    pub shape: Shape,
    pub orientation: Orientation,
    pub n_scans: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScanEntry {
    pub scan_id: String,
    pub subject_id: usize,
    pub forearm: usize,
    pub class_id_3: usize,
    pub class_id_6: usize,
    pub n_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub config: PhantomConfig,
    pub n_scans: usize,
    pub protocol_classes: Vec<ProtocolClassEntry>,
    pub scans: Vec<ScanEntry>,
    pub splits: SplitManifest,
}

/// Renders a dataset into `out/scans` and writes `out/manifest.json`.
pub fn gen_data(config: &PhantomConfig, seed: u64, out: &Path, force: bool) -> Result<DatasetManifest> {
    config.validate()?;
    prepare_output_dir(out, force)?;
    let scans: Vec<Scan> = generate_dataset(config, seed)?.into_iter().map(Arc::new).collect();
    let scan_dir = out.join(SCANS_DIR);
    fs::create_dir_all(&scan_dir)?;
    for s in &scans {
        write_scan(&scan_dir.join(format!("{}.{SCAN_EXTENSION}", s.scan_id)), s)?;
    }
    let split_seed = seeds::derive(seed, seeds::SPLIT, 0);
    let split = split_scans(&scans, &SplitSpec { seed: split_seed })?;
    let mut protocol_classes = Vec::new();
    for orientation in Orientation::ALL {
        for shape in Shape::ALL {
            let class_id = shape.index() + 3 * orientation.index() + 1;
            let n_scans = scans.iter().filter(|s| s.protocol.class_id_6() + 1 == class_id).count();
            protocol_classes.push(ProtocolClassEntry { class_id, shape, orientation, n_scans });
        }
    }
    let manifest = DatasetManifest {
        format_version: 1,
        seed,
        config: config.clone(),
        n_scans: scans.len(),
        protocol_classes,
        scans: scans
            .iter()
            .map(|s| ScanEntry {
                scan_id: s.scan_id.clone(),
                subject_id: s.subject_id,
                forearm: s.forearm,
                class_id_3: s.protocol.class_id_3() + 1,
                class_id_6: s.protocol.class_id_6() + 1,
                n_frames: s.n_frames(),
            })
            .collect(),
        splits: SplitManifest::build(&split, split_seed, seeds::derive(seed, seeds::SUBSET, 0)),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

/// A generated dataset with its fixed train/val/test split.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub split: Split,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Dataset> {
        let manifest: DatasetManifest = read_json(&dir.join(MANIFEST_FILE))?;
        let scans = load_scans(&dir.join(SCANS_DIR))?;
        let by_id: BTreeMap<&str, &Scan> = scans.iter().map(|s| (s.scan_id.as_str(), s)).collect();
        let pick = |ids: &[String]| -> Result<Vec<Scan>> {
            ids.iter()
                .map(|id| {
                    by_id.get(id.as_str()).map(|s| (*s).clone()).ok_or_else(|| Error::Format {
                        path: dir.join(MANIFEST_FILE),
                        reason: format!("scan {id} listed but missing"),
                    })
                })
                .collect()
        };
        let ids = &manifest.splits.split;
        let split = Split { train: pick(&ids.train)?, val: pick(&ids.val)?, test: pick(&ids.test)? };
        Ok(Dataset { dir: dir.to_path_buf(), manifest, split })
    }

    pub fn split_named(&self, name: &str) -> Result<&[Scan]> {
        match name {
            "train" => Ok(&self.split.train),
            "val" => Ok(&self.split.val),
            "test" => Ok(&self.split.test),
            _ => Err(Error::InvalidParameter(format!("unknown split {name}"))),
        }
    }
}

/// Contents of a run directory's `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_config: RunConfig,
    pub n_train_scans: usize,
    pub n_val_scans: usize,
    pub skipped_train: Vec<String>,
    pub best_epoch: usize,
    pub best_val_rec: f64,
    /// 1-based branch per auxiliary task (subject, protocol); empty without branches.
    pub branches: Vec<usize>,
    pub final_train_loss: LossBundle,
    /// `[epoch][task][tap]`.
    pub descriptor_trace: Vec<Vec<Vec<f64>>>,
    pub test_ids: Vec<String>,
    /// Finalized (and fine-tuned) model on the test split.
    pub test: BTreeMap<String, MeanStd>,
    /// Best soft-mixture checkpoint on the test split.
    pub test_soft: BTreeMap<String, MeanStd>,
}

pub fn condition_label(cfg: &RunConfig) -> String {
    if cfg.no_branch {
        format!("{}_no-branch_M{}", cfg.variance_mode, cfg.seq_len)
    } else {
        format!("{}_{}-class_M{}", cfg.variance_mode, cfg.n_protocol, cfg.seq_len)
    }
}

/// Trains one configuration on `data`, evaluates on its test split and
/// writes the run directory.
pub fn run_train(cfg: &RunConfig, data: &Dataset, out: &Path, force: bool) -> Result<RunSummary> {
    cfg.validate()?;
    prepare_output_dir(out, force)?;
    let mut stored = cfg.clone();
    stored.data_dir = stored.data_dir.or_else(|| Some(data.dir.clone()));
    write_json(&out.join("run_config.json"), &stored)?;
    let td = TrainData::prepare(cfg, &data.split.train, &data.split.val)?;
    let outcome = train(cfg, &td, Some(out))?;
    let label = condition_label(cfg);
    let report = evaluate_model(&outcome.headline, &data.split.test, &cfg.eval, &label)?;
    let soft = evaluate_model(&outcome.best, &data.split.test, &cfg.eval, &format!("{label}_soft"))?;
    write_report(&report, &out.join("metrics"))?;
    write_report(&soft, &out.join("metrics_soft"))?;
    let summary = RunSummary {
        run_config: stored,
        n_train_scans: td.train.scans.len(),
        n_val_scans: td.val.scans.len(),
        skipped_train: td.train.skipped.clone(),
        best_epoch: outcome.best_record.epoch,
        best_val_rec: outcome.best_record.val_rec,
        branches: outcome.branches.iter().map(|b| b + 1).collect(),
        final_train_loss: outcome.log.last().map(|r| r.train).unwrap_or_default(),
        descriptor_trace: outcome.descriptor_history,
        test_ids: data.split.test.iter().map(|s| s.scan_id.clone()).collect(),
        test: report.aggregate.clone(),
        test_soft: soft.aggregate.clone(),
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Writes `<stem>.json` and `<stem>.csv`.
pub fn write_report(report: &MetricsReport, stem: &Path) -> Result<()> {
    report.write_json(&stem.with_extension("json"))?;
    let mut csv = Vec::new();
    std::io::Write::write_all(&mut csv, MetricsReport::CSV_HEADER.as_bytes())?;
    csv.push(b'\n');
    report.write_csv_rows(&mut csv)?;
    fs::write(stem.with_extension("csv"), csv)?;
    Ok(())
}

/// Evaluates a checkpoint's model on one split.
pub fn run_eval(checkpoint: &Path, data: &Dataset, split: &str, eval: &EvalConfig, out: &Path, force: bool) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    prepare_output_dir(out, force)?;
    let label = checkpoint.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let report = evaluate_model(&ck.model, data.split_named(split)?, eval, &label)?;
    write_report(&report, &out.join("metrics"))?;
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationCondition {
    #[serde(rename = "no-branch")]
    NoBranch,
    #[serde(rename = "3-class")]
    ThreeClass,
    #[serde(rename = "6-class")]
    SixClass,
}

impl AblationCondition {
    pub const ALL: [AblationCondition; 3] = [Self::NoBranch, Self::ThreeClass, Self::SixClass];

    pub fn name(self) -> &'static str {
        match self {
            Self::NoBranch => "no-branch",
            Self::ThreeClass => "3-class",
            Self::SixClass => "6-class",
        }
    }

    /// Protocol-class column of the ablation table.
    pub fn protocols(self) -> &'static str {
        match self {
            Self::NoBranch => "n/a",
            Self::ThreeClass => "3",
            Self::SixClass => "6",
        }
    }

    pub fn apply(self, cfg: &mut RunConfig) {
        match self {
            Self::NoBranch => cfg.no_branch = true,
            Self::ThreeClass => {
                cfg.no_branch = false;
                cfg.n_protocol = 3;
            }
            Self::SixClass => {
                cfg.no_branch = false;
                cfg.n_protocol = 6;
            }
        }
    }
}

/// A study design: the base run configuration and the grid to expand it over.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentPlan {
    pub data_dir: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub base: RunConfig,
    pub modes: Vec<VarianceMode>,
    pub m_values: Vec<usize>,
    pub conditions: Vec<AblationCondition>,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        ExperimentPlan {
            data_dir: None,
            seeds: vec![0, 1, 2],
            base: RunConfig::default(),
            modes: VarianceMode::ALL.to_vec(),
            m_values: vec![8],
            conditions: AblationCondition::ALL.to_vec(),
        }
    }
}

/// One grid cell: a run configuration and its directory relative to the
/// experiment output.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub rel_dir: PathBuf,
    pub config: RunConfig,
    pub seed_index: usize,
}

impl ExperimentPlan {
    pub fn load(path: &Path) -> Result<ExperimentPlan> {
        read_json(path)
    }

    /// Replaces the seed list with seeds derived from one master seed.
    pub fn with_master_seed(mut self, master: u64) -> Self {
        let n = self.seeds.len().max(1);
        self.seeds = (0..n as u64).map(|k| seeds::derive(master, seeds::CELL, k)).collect();
        self
    }

    /// Main-task-only cells, one per variance mode per seed.
    pub fn variance_cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &mode in &self.modes {
            for (k, &seed) in self.seeds.iter().enumerate() {
                let mut config = self.base.clone();
                config.no_branch = true;
                config.variance_mode = mode;
                config.seed = seed;
                config.data_dir = self.data_dir.clone();
                cells.push(Cell { rel_dir: PathBuf::from(format!("variance/{mode}/seed-{seed}")), config, seed_index: k });
            }
        }
        cells
    }

    pub fn ablation_cells(&self) -> Vec<Cell> {
        let mut cells = Vec::new();
        for &m in &self.m_values {
            for &cond in &self.conditions {
                for (k, &seed) in self.seeds.iter().enumerate() {
                    let mut config = self.base.clone();
                    cond.apply(&mut config);
                    config.seq_len = m;
                    config.seed = seed;
                    config.data_dir = self.data_dir.clone();
                    cells.push(Cell {
                        rel_dir: PathBuf::from(format!("ablation/M{m}/{}/seed-{seed}", cond.name())),
                        config,
                        seed_index: k,
                    });
                }
            }
        }
        cells
    }
}

/// Result of one cell; `error` is set when the cell did not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub dir: PathBuf,
    pub seed: u64,
    pub summary: Option<RunSummary>,
    /// Per-scan test metrics of the headline model.
    pub scans: Vec<(String, Metrics)>,
    pub error: Option<String>,
}

impl CellOutcome {
    pub fn values(&self, metric: &str) -> Vec<f64> {
        self.scans.iter().filter_map(|(_, m)| m.get(metric)).collect()
    }
}

fn run_cells(cells: &[Cell], data: &Dataset, out: &Path) -> Vec<CellOutcome> {
    cells
        .par_iter()
        .map(|cell| {
            let dir = out.join(&cell.rel_dir);
            let result = run_train(&cell.config, data, &dir, true).and_then(|summary| {
                let report: MetricsReport = read_json(&dir.join("metrics.json"))?;
                Ok((summary, report))
            });
            match result {
                Ok((summary, report)) => CellOutcome {
                    dir: cell.rel_dir.clone(),
                    seed: cell.config.seed,
                    summary: Some(summary),
                    scans: report.scans.iter().map(|s| (s.scan_id.clone(), s.metrics)).collect(),
                    error: None,
                },
                Err(e) => {
                    eprintln!("cell {} failed: {e}", cell.rel_dir.display());
                    CellOutcome { dir: cell.rel_dir.clone(), seed: cell.config.seed, summary: None, scans: Vec::new(), error: Some(e.to_string()) }
                }
            }
        })
        .collect()
}

fn open_plan_data(plan: &ExperimentPlan) -> Result<Dataset> {
    let dir = plan
        .data_dir
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("experiment plan has no data_dir".into()))?;
    Dataset::open(dir)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub mode: VarianceMode,
    pub seed: u64,
    pub n_train_scans: usize,
    pub eps_acc: Option<MeanStd>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub test_ids: Vec<String>,
    pub rows: Vec<VarianceRow>,
    /// Median over seeds of the per-run mean test `eps_acc`, per mode.
    pub median_eps_acc: BTreeMap<String, f64>,
    pub complete: bool,
}

impl VarianceReport {
    pub fn median(&self, mode: VarianceMode) -> f64 {
        self.median_eps_acc.get(mode.name()).copied().unwrap_or(f64::NAN)
    }
}

/// Trains one main-task-only model per variance mode and seed and tabulates
/// test `eps_acc`.
pub fn variance_sweep(plan: &ExperimentPlan, out: &Path, force: bool) -> Result<VarianceReport> {
    let data = open_plan_data(plan)?;
    prepare_output_dir(out, force)?;
    write_json(&out.join("plan.json"), plan)?;
    let cells = plan.variance_cells();
    let outcomes = run_cells(&cells, &data, out);

    let mut rows = Vec::new();
    let mut per_mode: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (cell, o) in cells.iter().zip(&outcomes) {
        let acc = o.summary.as_ref().and_then(|s| s.test.get("eps_acc").copied());
        if let Some(a) = acc {
            per_mode.entry(cell.config.variance_mode.name().into()).or_default().push(a.mean);
        }
        rows.push(VarianceRow {
            mode: cell.config.variance_mode,
            seed: cell.config.seed,
            n_train_scans: o.summary.as_ref().map_or(0, |s| s.n_train_scans),
            eps_acc: acc,
            error: o.error.clone(),
        });
    }
    let report = VarianceReport {
        test_ids: data.manifest.splits.split.test.clone(),
        median_eps_acc: per_mode.iter().map(|(k, v)| (k.clone(), median(v))).collect(),
        complete: outcomes.iter().all(|o| o.error.is_none()),
        rows,
    };
    write_json(&out.join("variance_sweep.json"), &report)?;

    let mut table = String::from("mode,seed,n_train_scans,eps_acc_mean,eps_acc_std,status\n");
    for r in &report.rows {
        let (m, s) = r.eps_acc.map_or((String::new(), String::new()), |a| (a.mean.to_string(), a.std.to_string()));
        let status = if r.error.is_some() { "failed" } else { "ok" };
        writeln!(table, "{},{},{},{m},{s},{status}", r.mode, r.seed, r.n_train_scans).unwrap();
    }
    fs::write(out.join("variance_table.csv"), table)?;
    let mut plot = String::from("mode,median_eps_acc\n");
    for &mode in &plan.modes {
        writeln!(plot, "{mode},{}", report.median(mode)).unwrap();
    }
    fs::write(out.join("plot_variance_eps_acc.csv"), plot)?;
    Ok(report)
}

/// Table row: one condition at one `M`, pooled over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub m: usize,
    pub condition: AblationCondition,
    pub protocols: String,
    /// Starred 1-based branch per task ("subject/protocol"), most frequent
    /// over seeds; "n/a" without branches.
    pub branches: String,
    pub metrics: BTreeMap<String, MeanStd>,
    /// Two-sided p-values of unpaired t-tests against the no-branch row at
    /// the same `M`; absent for the no-branch row itself.
    pub p_values: BTreeMap<String, f64>,
    pub n_seeds_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCellRow {
    pub m: usize,
    pub condition: AblationCondition,
    pub seed: u64,
    pub branches: String,
    pub median_eps_drift: Option<f64>,
    pub metrics: BTreeMap<String, MeanStd>,
    pub p_values: BTreeMap<String, f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub test_ids: Vec<String>,
    pub rows: Vec<AblationRow>,
    pub cells: Vec<AblationCellRow>,
    pub complete: bool,
}

pub fn starred_branches(branches: &[usize]) -> String {
    if branches.is_empty() {
        return "n/a".into();
    }
    branches.iter().map(|b| format!("{b}*")).collect::<Vec<_>>().join("/")
}

fn p_values(a: &[Vec<f64>; 4], base: Option<&[Vec<f64>; 4]>) -> BTreeMap<String, f64> {
    let Some(base) = base else { return BTreeMap::new() };
    Metrics::NAMES
        .iter()
        .zip(a.iter().zip(base))
        .filter_map(|(name, (x, y))| unpaired_t_test(x, y).map(|t| (name.to_string(), t.p_value)))
        .collect()
}

fn metric_columns(outcomes: &[&CellOutcome]) -> [Vec<f64>; 4] {
    std::array::from_fn(|i| outcomes.iter().flat_map(|o| o.values(Metrics::NAMES[i])).collect())
}

fn summarize(cols: &[Vec<f64>; 4]) -> BTreeMap<String, MeanStd> {
    Metrics::NAMES.iter().zip(cols).map(|(n, v)| (n.to_string(), mean_std(v))).collect()
}

/// Runs the `{no-branch, 3-class, 6-class} x M x seed` grid and writes the
/// table with t-tests against no-branch.
pub fn ablation(plan: &ExperimentPlan, out: &Path, force: bool) -> Result<AblationReport> {
    let data = open_plan_data(plan)?;
    prepare_output_dir(out, force)?;
    write_json(&out.join("plan.json"), plan)?;
    let cells = plan.ablation_cells();
    let outcomes = run_cells(&cells, &data, out);

    let condition_of = |cell: &Cell| {
        if cell.config.no_branch {
            AblationCondition::NoBranch
        } else if cell.config.n_protocol == 3 {
            AblationCondition::ThreeClass
        } else {
            AblationCondition::SixClass
        }
    };

    let mut cell_rows = Vec::new();
    for (cell, o) in cells.iter().zip(&outcomes) {
        let cond = condition_of(cell);
        let base = cells.iter().zip(&outcomes).find(|(c, _)| {
            condition_of(c) == AblationCondition::NoBranch && c.config.seq_len == cell.config.seq_len && c.config.seed == cell.config.seed
        });
        let cols = metric_columns(&[o]);
        let base_cols = base.filter(|(_, b)| b.error.is_none()).map(|(_, b)| metric_columns(&[b]));
        let has = o.error.is_none();
        cell_rows.push(AblationCellRow {
            m: cell.config.seq_len,
            condition: cond,
            seed: cell.config.seed,
            branches: o.summary.as_ref().map_or("n/a".into(), |s| starred_branches(&s.branches)),
            median_eps_drift: has.then(|| median(&cols[3])),
            metrics: if has { summarize(&cols) } else { BTreeMap::new() },
            p_values: if has && cond != AblationCondition::NoBranch { p_values(&cols, base_cols.as_ref()) } else { BTreeMap::new() },
            error: o.error.clone(),
        });
    }

    let mut rows = Vec::new();
    for &m in &plan.m_values {
        let group = |cond: AblationCondition| -> Vec<&CellOutcome> {
            cells
                .iter()
                .zip(&outcomes)
                .filter(|(c, o)| c.config.seq_len == m && condition_of(c) == cond && o.error.is_none())
                .map(|(_, o)| o)
                .collect()
        };
        let base = group(AblationCondition::NoBranch);
        let base_cols = (!base.is_empty()).then(|| metric_columns(&base));
        for &cond in &plan.conditions {
            let g = group(cond);
            if g.is_empty() {
                continue;
            }
            let cols = metric_columns(&g);
            let n_tasks = g[0].summary.as_ref().map_or(0, |s| s.branches.len());
            let modal: Vec<usize> = (0..n_tasks)
                .map(|t| {
                    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
                    for o in &g {
                        if let Some(b) = o.summary.as_ref().and_then(|s| s.branches.get(t)) {
                            *counts.entry(*b).or_default() += 1;
                        }
                    }
                    let keys: Vec<usize> = counts.keys().copied().collect();
                    let vals: Vec<f64> = counts.values().map(|&c| c as f64).collect();
                    keys[argmax(&vals)]
                })
                .collect();
            rows.push(AblationRow {
                m,
                condition: cond,
                protocols: cond.protocols().into(),
                branches: starred_branches(&modal),
                metrics: summarize(&cols),
                p_values: if cond == AblationCondition::NoBranch { BTreeMap::new() } else { p_values(&cols, base_cols.as_ref()) },
                n_seeds_completed: g.len(),
            });
        }
    }

    let report = AblationReport {
        test_ids: data.manifest.splits.split.test.clone(),
        rows,
        cells: cell_rows,
        complete: outcomes.iter().all(|o| o.error.is_none()),
    };
    write_json(&out.join("ablation.json"), &report)?;
    fs::write(out.join("ablation_table.csv"), ablation_table_csv(&report.rows))?;
    fs::write(out.join("ablation_cells.csv"), ablation_cells_csv(&report.cells))?;
    Ok(report)
}

fn pm(m: Option<&MeanStd>) -> String {
    m.map_or(String::new(), |m| format!("{:.2} ± {:.2}", m.mean, m.std))
}

fn p_cols(p: &BTreeMap<String, f64>) -> String {
    Metrics::NAMES.iter().map(|n| p.get(*n).map_or(String::new(), |v| format!("{v:.4}"))).collect::<Vec<_>>().join(",")
}

pub const ABLATION_TABLE_HEADER: &str =
    "M,protocols,branches,eps_frame,eps_acc,eps_dice,eps_drift,p_eps_frame,p_eps_acc,p_eps_dice,p_eps_drift";

pub fn ablation_table_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_TABLE_HEADER}\n");
    for r in rows {
        let metrics: Vec<String> = Metrics::NAMES.iter().map(|n| pm(r.metrics.get(*n))).collect();
        writeln!(s, "{},{},{},{},{}", r.m, r.protocols, r.branches, metrics.join(","), p_cols(&r.p_values)).unwrap();
    }
    s
}

fn ablation_cells_csv(rows: &[AblationCellRow]) -> String {
    let mut s = String::from(
        "M,condition,seed,branches,median_eps_drift,eps_frame,eps_acc,eps_dice,eps_drift,p_eps_frame,p_eps_acc,p_eps_dice,p_eps_drift,status\n",
    );
    for r in rows {
        let metrics: Vec<String> = Metrics::NAMES.iter().map(|n| pm(r.metrics.get(*n))).collect();
        writeln!(
            s,
            "{},{},{},{},{},{},{},{}",
            r.m,
            r.condition.name(),
            r.seed,
            r.branches,
            r.median_eps_drift.map_or(String::new(), |v| v.to_string()),
            metrics.join(","),
            p_cols(&r.p_values),
            if r.error.is_some() { "failed" } else { "ok" }
        )
        .unwrap();
    }
    s
}

/// Run directories (those holding `summary.json`) under `root`, sorted.
pub fn find_runs(root: &Path) -> Result<Vec<PathBuf>> {
    let mut found = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        if dir.join("summary.json").is_file() {
            found.push(dir);
            continue;
        }
        for entry in fs::read_dir(&dir)? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            }
        }
    }
    found.sort();
    Ok(found)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSummary {
    pub runs: Vec<String>,
    pub warnings: Vec<String>,
}

/// Extracts plot-ready CSVs from run directories found under `inputs`:
/// descriptor traces with the best-epoch marker, per-epoch loss traces and
/// test metrics per condition.
pub fn plot_data(inputs: &[PathBuf], out: &Path, force: bool) -> Result<PlotSummary> {
    let mut runs = Vec::new();
    for i in inputs {
        runs.extend(find_runs(i)?);
    }
    runs.sort();
    runs.dedup();
    prepare_output_dir(out, force)?;
    let mut warnings = Vec::new();
    let mut trace = String::from("run,epoch,task,best,z\n");
    let mut best = String::from("run,best_epoch,branches\n");
    let mut metrics = String::from("run,condition,seed,eps_frame,eps_acc,eps_dice,eps_drift\n");
    let mut losses = String::new();
    let mut names = Vec::new();
    for dir in &runs {
        let name = dir.to_string_lossy().into_owned();
        let s: RunSummary = read_json(&dir.join("summary.json"))?;
        if s.descriptor_trace.iter().all(|z| z.is_empty()) && !s.run_config.no_branch {
            warnings.push(format!("{name}: no descriptor trace"));
            eprintln!("warning: {name}: no descriptor trace");
        }
        for (e, tasks) in s.descriptor_trace.iter().enumerate() {
            for (t, z) in tasks.iter().enumerate() {
                let zs: Vec<String> = z.iter().map(|v| v.to_string()).collect();
                writeln!(trace, "{name},{},{},{},{}", e + 1, t + 1, (e + 1 == s.best_epoch) as u8, zs.join(";")).unwrap();
            }
        }
        writeln!(best, "{name},{},{}", s.best_epoch, starred_branches(&s.branches)).unwrap();
        let m: Vec<String> = Metrics::NAMES.iter().map(|n| s.test.get(*n).map_or(String::new(), |v| v.mean.to_string())).collect();
        writeln!(metrics, "{name},{},{},{}", condition_label(&s.run_config), s.run_config.seed, m.join(",")).unwrap();
        match fs::read_to_string(dir.join("epochs.csv")) {
            Ok(text) => {
                let mut lines = text.lines();
                let header = lines.next().unwrap_or_default();
                if losses.is_empty() {
                    let base: Vec<&str> = header.split(',').take(7).collect();
                    writeln!(losses, "run,{}", base.join(",")).unwrap();
                }
                for l in lines {
                    let cols: Vec<&str> = l.split(',').take(7).collect();
                    writeln!(losses, "{name},{}", cols.join(",")).unwrap();
                }
            }
            Err(_) => {
                warnings.push(format!("{name}: missing epochs.csv"));
                eprintln!("warning: {name}: missing epochs.csv");
            }
        }
        names.push(name);
    }
    fs::write(out.join("descriptor_trace.csv"), trace)?;
    fs::write(out.join("best_epochs.csv"), best)?;
    fs::write(out.join("metrics_by_condition.csv"), metrics)?;
    fs::write(out.join("loss_trace.csv"), losses)?;
    let summary = PlotSummary { runs: names, warnings };
    write_json(&out.join("plot_data.json"), &summary)?;
    Ok(summary)
}

/// Identical test split check for a set of cells.
pub fn same_test_split(summaries: &[&RunSummary]) -> bool {
    summaries.windows(2).all(|w| w[0].test_ids == w[1].test_ids)
}

pub fn split_ids(data: &Dataset) -> &SplitIds {
    &data.manifest.splits.split
}
