//! Result rows, CSV persistence and markdown reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util::write_atomic;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub experiment: String,
    pub metric: String,
    pub k: Option<usize>,
    /// Localization threshold in meters.
    pub epsilon: Option<f64>,
    pub value: f64,
    pub split: String,
    pub seed: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub rows: Vec<ResultRow>,
}

/// Metrics where smaller values are better.
pub fn lower_is_better(metric: &str) -> bool {
    metric.contains("error") || metric.contains("loss")
}

impl ResultsTable {
    pub fn push(&mut self, experiment: &str, metric: &str, k: Option<usize>, epsilon: Option<f64>, value: f64, split: &str, seed: u64) {
        self.rows.push(ResultRow {
            experiment: experiment.to_string(),
            metric: metric.to_string(),
            k,
            epsilon,
            value,
            split: split.to_string(),
            seed,
        });
    }

    pub fn extend(&mut self, other: ResultsTable) {
        self.rows.extend(other.rows);
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// First row matching all given fields.
    pub fn find(&self, experiment: &str, metric: &str, k: Option<usize>, epsilon: Option<f64>) -> Option<&ResultRow> {
        self.rows
            .iter()
            .find(|r| r.experiment == experiment && r.metric == metric && r.k == k && r.epsilon == epsilon)
    }

    /// Values of `metric` at `k` for `experiment`, one per seed in row order.
    pub fn values(&self, experiment: &str, metric: &str, k: Option<usize>) -> Vec<f64> {
        self.rows
            .iter()
            .filter(|r| r.experiment == experiment && r.metric == metric && r.k == k)
            .map(|r| r.value)
            .collect()
    }

    /// Experiment ids in first-appearance order.
    pub fn experiments(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.experiment) {
                out.push(r.experiment.clone());
            }
        }
        out
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(csv_error)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let rows = r.deserialize().collect::<std::result::Result<Vec<ResultRow>, _>>().map_err(csv_error)?;
        Ok(Self { rows })
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv()?.as_bytes())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

fn fmt_opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_else(|| "-".into())
}

/// Renders each experiment's rows; localization recall becomes a `k × ε`
/// grid per seed.
pub fn render_markdown(table: &ResultsTable) -> String {
    let mut s = String::new();
    for exp in table.experiments() {
        let rows: Vec<&ResultRow> = table.rows.iter().filter(|r| r.experiment == exp).collect();
        let _ = writeln!(s, "## {exp}\n");
        let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
        seeds.dedup();
        for seed in seeds {
            let grid: Vec<&&ResultRow> = rows
                .iter()
                .filter(|r| r.seed == seed && r.metric == "localization_recall")
                .collect();
            if !grid.is_empty() {
                let mut ks: Vec<usize> = grid.iter().filter_map(|r| r.k).collect();
                ks.sort_unstable();
                ks.dedup();
                let mut eps: Vec<f64> = grid.iter().filter_map(|r| r.epsilon).collect();
                eps.sort_by(f64::total_cmp);
                eps.dedup();
                let _ = writeln!(s, "Localization recall, {} split, seed {seed}\n", grid[0].split);
                let head: Vec<String> = eps.iter().map(|e| format!("ε < {e} m")).collect();
                let _ = writeln!(s, "| k | {} |", head.join(" | "));
                let _ = writeln!(s, "|---|{}", "---|".repeat(eps.len()));
                for &k in &ks {
                    let cells: Vec<String> = eps
                        .iter()
                        .map(|&e| {
                            grid.iter()
                                .find(|r| r.k == Some(k) && r.epsilon == Some(e))
                                .map(|r| format!("{:.3}", r.value))
                                .unwrap_or_else(|| "-".into())
                        })
                        .collect();
                    let _ = writeln!(s, "| {k} | {} |", cells.join(" | "));
                }
                s.push('\n');
            }
            let rest: Vec<&&ResultRow> = rows
                .iter()
                .filter(|r| r.seed == seed && r.metric != "localization_recall")
                .collect();
            if !rest.is_empty() {
                let _ = writeln!(s, "| metric | k | ε | value | split | seed |");
                let _ = writeln!(s, "|---|---|---|---|---|---|");
                for r in rest {
                    let _ = writeln!(
                        s,
                        "| {} | {} | {} | {:.4} | {} | {} |",
                        r.metric,
                        fmt_opt(r.k),
                        fmt_opt(r.epsilon),
                        r.value,
                        r.split,
                        r.seed
                    );
                }
                s.push('\n');
            }
        }
    }
    s
}

/// Side-by-side seed means of every metric across experiments; the best
/// experiment per metric is marked with `*`.
pub fn render_comparison(table: &ResultsTable) -> String {
    let exps = table.experiments();
    let mut metrics: Vec<(String, Option<usize>, Option<u64>)> = Vec::new();
    let mut means: BTreeMap<(String, Option<usize>, Option<u64>, String), (f64, usize)> = BTreeMap::new();
    for r in &table.rows {
        let key = (r.metric.clone(), r.k, r.epsilon.map(f64::to_bits));
        if !metrics.contains(&key) {
            metrics.push(key.clone());
        }
        let e = means.entry((key.0, key.1, key.2, r.experiment.clone())).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    let mut s = String::new();
    let _ = writeln!(s, "| metric | k | ε | {} |", exps.join(" | "));
    let _ = writeln!(s, "|---|---|---|{}", "---|".repeat(exps.len()));
    for (metric, k, eps) in metrics {
        let vals: Vec<Option<f64>> = exps
            .iter()
            .map(|x| {
                means
                    .get(&(metric.clone(), k, eps, x.clone()))
                    .map(|(sum, n)| sum / *n as f64)
            })
            .collect();
        let best = vals
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .fold(None::<(usize, f64)>, |acc, (i, v)| match acc {
                Some((_, b)) if (lower_is_better(&metric) && v >= b) || (!lower_is_better(&metric) && v <= b) => acc,
                _ => Some((i, v)),
            });
        let cells: Vec<String> = vals
            .iter()
            .enumerate()
            .map(|(i, v)| match v {
                Some(v) if best.map(|b| b.0) == Some(i) => format!("{v:.4} *"),
                Some(v) => format!("{v:.4}"),
                None => "-".into(),
            })
            .collect();
        let _ = writeln!(
            s,
            "| {metric} | {} | {} | {} |",
            fmt_opt(k),
            fmt_opt(eps.map(f64::from_bits)),
            cells.join(" | ")
        );
    }
    s
}

/// Writes `report.md` plus `table_<i>.csv` for every table under `dir`.
pub fn report(tables: &[ResultsTable], dir: &Path) -> Result<String> {
    if tables.is_empty() || tables.iter().all(ResultsTable::is_empty) {
        return Err(Error::Empty("result tables"));
    }
    let mut md = String::from("# Results\n\n");
    for (i, t) in tables.iter().enumerate() {
        t.save_csv(&dir.join(format!("table_{i}.csv")))?;
        if t.experiments().len() > 1 {
            let _ = writeln!(md, "### Comparison {i}\n\n{}", render_comparison(t));
        }
        md.push_str(&render_markdown(t));
    }
    write_atomic(&dir.join("report.md"), md.as_bytes())?;
    Ok(md)
}
