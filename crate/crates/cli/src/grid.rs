//! Experiment grids: named run configs that each change one axis of a base
//! config.
//!
//! ```toml
//! standard = ["structure", "train_ratio", "baselines"]
//!
//! [base]
//! seed = 1
//! corpus = "corpus"
//! # ... a full run config
//!
//! [[row]]
//! name = "wide-patch"
//! axis = "patch_size"
//! value = "16"
//! set = { "model.d_patch" = 16 }
//! ```
//!
//! `standard` expands into the sweeps listed in [`STANDARD_AXES`]; explicit
//! rows override fields of the base by dotted path. Every row is validated
//! before anything runs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Deserialize;

use patchfed_core::corpus::Corpus;
use patchfed_core::evaluation::MetricsReport;
use patchfed_core::model::config::issues_to_result;
use patchfed_core::model::{InsertionMode, PatchKind};
use patchfed_core::Error;

use crate::commands::{self, RunOutcome};
use crate::config::{parse_toml, read, resolve, RunConfig};
use crate::error::{CliError, Result, EXIT_INTERNAL};

/// Sweeps `standard` can name.
pub const STANDARD_AXES: [&str; 7] = [
    "structure",
    "shared_layers",
    "patch_size",
    "aggregation",
    "sampling",
    "train_ratio",
    "baselines",
];

/// Patch sizes swept against a 768-wide backbone; scaled to the configured
/// width by [`scaled_patch_size`].
pub const REFERENCE_PATCH_SIZES: [usize; 5] = [32, 64, 128, 256, 512];
const REFERENCE_WIDTH: f64 = 768.0;

pub const TRAIN_RATIOS: [f64; 5] = [0.2, 0.4, 0.6, 0.8, 1.0];

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct GridFile {
    #[serde(default)]
    standard: Vec<String>,
    base: toml::Table,
    #[serde(default)]
    row: Vec<RowFile>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct RowFile {
    name: String,
    #[serde(default)]
    axis: Option<String>,
    #[serde(default)]
    value: Option<String>,
    #[serde(default)]
    set: toml::Table,
}

/// One resolved grid row.
#[derive(Debug, Clone, PartialEq)]
pub struct GridRow {
    pub name: String,
    /// Swept axis, used to group rows into CSV series.
    pub axis: String,
    /// The axis value this row takes, as shown in tables.
    pub value: String,
    pub config: RunConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentGrid {
    pub rows: Vec<GridRow>,
}

/// `size` scaled from the reference width to `d_model`, at least 1, rounded
/// to a multiple of `multiple` and kept below `d_model`.
pub fn scaled_patch_size(size: usize, d_model: usize, multiple: usize) -> usize {
    let raw = size as f64 * d_model as f64 / REFERENCE_WIDTH;
    let m = multiple.max(1);
    let rounded = ((raw / m as f64).round() as usize).max(1) * m;
    rounded.min(d_model.saturating_sub(1).max(1) / m * m).max(m)
}

fn row(name: String, axis: &str, value: String, config: RunConfig) -> GridRow {
    GridRow {
        name,
        axis: axis.to_string(),
        value,
        config,
    }
}

/// Rows of one standard sweep around `base`. `clients` bounds the sampling
/// sweep.
pub fn standard_rows(axis: &str, base: &RunConfig, clients: usize) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    match axis {
        "structure" => {
            for mode in [
                InsertionMode::Inner,
                InsertionMode::Outer,
                InsertionMode::Vertical,
                InsertionMode::Horizontal,
            ] {
                for kind in [PatchKind::Pal, PatchKind::LowRank] {
                    let mut c = base.clone();
                    c.model.insertion_mode = mode;
                    c.model.patch_kind = kind;
                    let v = format!("{}-{}", mode.as_str(), kind.as_str());
                    rows.push(row(format!("structure/{v}"), axis, v, c));
                }
            }
        }
        "shared_layers" => {
            for n in 0..=base.model.n_layers {
                let mut c = base.clone();
                c.model.n_shared_layers = n;
                rows.push(row(format!("shared_layers/{n}"), axis, n.to_string(), c));
            }
        }
        "patch_size" => {
            let multiple = if base.model.patch_kind == PatchKind::Pal {
                base.model.pal_heads
            } else {
                1
            };
            let mut seen = BTreeSet::new();
            for size in REFERENCE_PATCH_SIZES {
                let d = scaled_patch_size(size, base.model.d_model, multiple);
                if !seen.insert(d) {
                    continue;
                }
                let mut c = base.clone();
                c.model.d_patch = d;
                rows.push(row(
                    format!("patch_size/{size}"),
                    axis,
                    format!("{size} (d_patch {d})"),
                    c,
                ));
            }
        }
        "aggregation" => {
            for k in 1..=3 {
                let mut c = base.clone();
                c.federation.aggregate_every_k_epochs = k;
                rows.push(row(format!("aggregation/{k}"), axis, k.to_string(), c));
            }
        }
        "sampling" => {
            for k in 1..=clients {
                let mut c = base.clone();
                c.federation.sample_size = Some(k);
                rows.push(row(format!("sampling/{k}"), axis, k.to_string(), c));
            }
        }
        "train_ratio" => {
            for r in TRAIN_RATIOS {
                let mut c = base.clone();
                c.federation.train_ratio = r;
                rows.push(row(format!("train_ratio/{r}"), axis, r.to_string(), c));
            }
        }
        "baselines" => {
            let mut c = base.clone();
            c.model.insertion_mode = InsertionMode::None;
            c.model.n_shared_layers = c.model.n_layers;
            rows.push(row("baselines/fedavg".into(), axis, "fedavg".into(), c));
            let mut c = base.clone();
            c.federation.aggregate = false;
            rows.push(row("baselines/isolated".into(), axis, "isolated".into(), c));
        }
        other => {
            return Err(Error::config(
                "standard",
                format!(
                    "unknown axis `{other}`; expected one of {}",
                    STANDARD_AXES.join(", ")
                ),
            )
            .into())
        }
    }
    Ok(rows)
}

/// Sets `value` at a dotted `path` inside `table`, creating tables on the way.
fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = path.split('.').collect();
    let last = parts
        .pop()
        .filter(|s| !s.is_empty())
        .ok_or_else(|| Error::config(format!("row.set.{path}"), "empty field path"))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| {
            Error::config(format!("row.set.{path}"), format!("`{p}` is not a table"))
        })?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl ExperimentGrid {
    /// Parses a grid file. `corpus_clients` reports the participant count of
    /// a corpus directory, used by the sampling sweep.
    pub fn from_toml(
        text: &str,
        origin: &Path,
        corpus_clients: &mut dyn FnMut(&Path) -> Result<usize>,
    ) -> Result<Self> {
        let file: GridFile = parse_toml(text, origin)?;
        let base_text = toml::to_string(&file.base).expect("table serializes");
        let base = RunConfig::from_toml(&base_text, origin).map_err(|e| match e {
            CliError::Parse {
                path,
                field,
                message,
            } => CliError::Parse {
                path,
                field: format!("base.{field}"),
                message,
            },
            other => other,
        })?;
        let mut rows = Vec::new();
        for axis in &file.standard {
            let clients = if axis == "sampling" {
                corpus_clients(&base.corpus)?
            } else {
                0
            };
            rows.extend(standard_rows(axis, &base, clients)?);
        }
        for (i, r) in file.row.into_iter().enumerate() {
            let mut table = file.base.clone();
            for (path, value) in r.set {
                set_path(&mut table, &path, value)?;
            }
            let text = toml::to_string(&table).expect("table serializes");
            let mut config = RunConfig::from_toml(&text, Path::new("")).map_err(|e| match e {
                CliError::Parse {
                    path,
                    field,
                    message,
                } => CliError::Parse {
                    path,
                    field: format!("row[{i}] ({}).{field}", r.name),
                    message,
                },
                other => other,
            })?;
            config.corpus = resolve(origin, &config.corpus);
            rows.push(GridRow {
                axis: r.axis.unwrap_or_else(|| "custom".into()),
                value: r.value.unwrap_or_else(|| r.name.clone()),
                name: r.name,
                config,
            });
        }
        Ok(Self { rows })
    }

    pub fn load(
        path: &Path,
        corpus_clients: &mut dyn FnMut(&Path) -> Result<usize>,
    ) -> Result<Self> {
        Self::from_toml(&read(path)?, path, corpus_clients)
    }

    /// Keeps rows whose name contains any of `patterns`.
    pub fn filter(&mut self, patterns: &[String]) {
        if patterns.is_empty() {
            return;
        }
        self.rows
            .retain(|r| patterns.iter().any(|p| r.name.contains(p.as_str())));
    }

    /// Checks names and every row's config, reporting all problems at once.
    /// `clients` gives the participant count of each row's corpus.
    pub fn validate(&self, clients: &dyn Fn(&Path) -> Option<usize>) -> Result<()> {
        if self.rows.is_empty() {
            return Err(Error::config("row", "the grid has no rows").into());
        }
        let mut issues = Vec::new();
        let mut names = BTreeSet::new();
        for (i, r) in self.rows.iter().enumerate() {
            if !names.insert(r.name.as_str()) {
                issues.push((
                    format!("row[{i}].name"),
                    format!("duplicate row name `{}`", r.name),
                ));
            }
            if r.name.is_empty() || r.name.contains("..") || r.name.starts_with('/') {
                issues.push((
                    format!("row[{i}].name"),
                    "must be a non-empty relative name".into(),
                ));
            }
            let prefix = format!("row[{i}] ({}).", r.name);
            let n = clients(&r.config.corpus);
            if n.is_none() {
                issues.push((
                    format!("{prefix}corpus"),
                    format!("cannot load {}", r.config.corpus.display()),
                ));
            }
            for (path, msg) in r.config.issues(n) {
                issues.push((format!("{prefix}{path}"), msg));
            }
        }
        Ok(issues_to_result(issues)?)
    }
}

/// Outcome of one grid row.
#[derive(Debug)]
pub struct RowResult {
    pub row: GridRow,
    pub outcome: std::result::Result<RunOutcome, CliError>,
}

/// Runs every row in order, loading each distinct corpus once. A failing
/// row is recorded and the rest still run. With `jobs > 1` rows run on that
/// many threads; each row's output depends only on its own config.
pub fn run_grid(grid: &ExperimentGrid, out: &Path, jobs: usize) -> Result<Vec<RowResult>> {
    let mut corpora: HashMap<PathBuf, Corpus> = HashMap::new();
    for r in &grid.rows {
        if !corpora.contains_key(&r.config.corpus) {
            let c = commands::load_corpus(&r.config.corpus)?;
            corpora.insert(r.config.corpus.clone(), c);
        }
    }
    grid.validate(&|p| corpora.get(p).map(|c| c.participants.len()))?;

    let run_row = |r: &GridRow| -> std::result::Result<RunOutcome, CliError> {
        let dir = out.join(&r.name);
        commands::run(&r.config, &corpora[&r.config.corpus], &dir, &r.name)
    };
    let outcomes: Vec<_> = if jobs <= 1 {
        grid.rows.iter().map(run_row).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<_>>> = grid
            .rows
            .iter()
            .map(|_| std::sync::Mutex::new(None))
            .collect();
        std::thread::scope(|s| {
            for _ in 0..jobs.min(grid.rows.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(r) = grid.rows.get(i) else { break };
                    *slots[i].lock().unwrap() = Some(run_row(r));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every row ran"))
            .collect()
    };
    let results: Vec<RowResult> = grid
        .rows
        .iter()
        .cloned()
        .zip(outcomes)
        .map(|(row, outcome)| RowResult { row, outcome })
        .collect();
    write_tables(&results, out)?;
    Ok(results)
}

/// The exit-status error for a finished grid, if any row failed.
pub fn grid_status(results: &[RowResult]) -> Result<()> {
    let failed: Vec<&CliError> = results
        .iter()
        .filter_map(|r| r.outcome.as_ref().err())
        .collect();
    if failed.is_empty() {
        return Ok(());
    }
    Err(CliError::GridRows {
        failed: failed.len(),
        total: results.len(),
        internal: failed.iter().any(|e| e.exit_code() == EXIT_INTERNAL),
    })
}

fn participants(results: &[RowResult]) -> Vec<String> {
    let mut names = BTreeSet::new();
    for r in results {
        if let Ok(o) = &r.outcome {
            names.extend(o.report.participants.iter().map(|p| p.participant.clone()));
        }
    }
    names.into_iter().collect()
}

fn participant_map(report: &MetricsReport, name: &str) -> String {
    report
        .participant(name)
        .map_or(String::new(), |p| format!("{:.4}", p.map))
}

/// Successful rows sorted by overall test MAP (descending, ties by name),
/// then failed rows by name.
pub fn sorted(results: &[RowResult]) -> Vec<&RowResult> {
    let mut order: Vec<&RowResult> = results.iter().collect();
    order.sort_by(|a, b| match (&a.outcome, &b.outcome) {
        (Ok(x), Ok(y)) => y
            .report
            .overall_map
            .total_cmp(&x.report.overall_map)
            .then_with(|| a.row.name.cmp(&b.row.name)),
        (Ok(_), Err(_)) => std::cmp::Ordering::Less,
        (Err(_), Ok(_)) => std::cmp::Ordering::Greater,
        (Err(_), Err(_)) => a.row.name.cmp(&b.row.name),
    });
    order
}

/// Plain-text comparison table, sorted as in [`sorted`].
pub fn comparison_table(results: &[RowResult]) -> String {
    let names = participants(results);
    let width = results
        .iter()
        .map(|r| r.row.name.len())
        .max()
        .unwrap_or(4)
        .max(4);
    let mut s = format!("{:<width$}", "row");
    for n in &names {
        let _ = write!(s, " {:>10}", truncate(n, 10));
    }
    s.push_str("    MAP(all)    MRR(all)\n");
    for r in sorted(results) {
        let _ = write!(s, "{:<width$}", r.row.name);
        match &r.outcome {
            Ok(o) => {
                for n in &names {
                    let _ = write!(s, " {:>10}", participant_map(&o.report, n));
                }
                let _ = writeln!(
                    s,
                    "  {:>10.4}  {:>10.4}",
                    o.report.overall_map, o.report.overall_mrr
                );
            }
            Err(e) => {
                let _ = writeln!(s, "  FAILED: {e}");
            }
        }
    }
    s
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn csv(results: &[&RowResult], names: &[String], first: &str) -> String {
    let mut s = format!("{first},axis,value");
    for n in names {
        let _ = write!(s, ",{}_map", csv_field(n));
    }
    s.push_str(",overall_map,overall_mrr,status\n");
    for r in results {
        let _ = write!(
            s,
            "{},{},{}",
            csv_field(&r.row.name),
            csv_field(&r.row.axis),
            csv_field(&r.row.value)
        );
        match &r.outcome {
            Ok(o) => {
                for n in names {
                    let _ = write!(s, ",{}", participant_map(&o.report, n));
                }
                let _ = writeln!(
                    s,
                    ",{:.6},{:.6},ok",
                    o.report.overall_map, o.report.overall_mrr
                );
            }
            Err(e) => {
                s.push_str(&",".repeat(names.len() + 2));
                let _ = writeln!(s, ",{}", csv_field(&format!("failed: {e}")));
            }
        }
    }
    s
}

/// Writes `comparison.txt`, `comparison.csv` and one `series/<axis>.csv`
/// per swept axis (rows in grid order, i.e. by swept value).
pub fn write_tables(results: &[RowResult], out: &Path) -> Result<()> {
    let write = |path: PathBuf, text: String| -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e).into())
    };
    let names = participants(results);
    write(out.join("comparison.txt"), comparison_table(results))?;
    write(
        out.join("comparison.csv"),
        csv(&sorted(results), &names, "row"),
    )?;
    let mut by_axis: BTreeMap<&str, Vec<&RowResult>> = BTreeMap::new();
    for r in results {
        by_axis.entry(r.row.axis.as_str()).or_default().push(r);
    }
    for (axis, rows) in by_axis {
        write(
            out.join("series").join(format!("{axis}.csv")),
            csv(&rows, &names, "row"),
        )?;
    }
    Ok(())
}
