//! Seed aggregation of a results directory into a long-format CSV and a
//! markdown summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use semidiff_core::math;

use crate::config::{scalarization_label, Mode};
use crate::error::LabError;
use crate::experiment::{Manifest, RESULTS};
use crate::table::{num, Table};

pub const REPORT_LONG: &str = "report_long.csv";
pub const SUMMARY: &str = "summary.md";

/// Grouping columns, in output order; `seed` is the replicate axis.
const KEYS: [&str; 5] = ["model", "scalarization", "n", "big_n", "k"];
const NON_METRICS: [&str; 5] = ["seed", "checkpoint", "config_hash", "version", "violation"];

/// Sort key that orders numeric cells numerically.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
enum KeyPart {
    Num(u64),
    Text(String),
}

fn key_part(s: &str) -> KeyPart {
    s.parse().map_or_else(|_| KeyPart::Text(s.to_string()), KeyPart::Num)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub key: Vec<String>,
    pub metric: String,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub n_seeds: usize,
    pub expected_seeds: usize,
    pub status: &'static str,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub key_columns: Vec<String>,
    pub rows: Vec<Aggregate>,
    pub summary: String,
}

/// Groups the manifest says must exist, as `(column, value)` pairs.
fn expected_groups(m: &Manifest) -> Vec<Vec<(&'static str, String)>> {
    let c = &m.config;
    let mut out = vec![];
    match m.mode {
        Mode::Distribution | Mode::Mdp => {
            let baseline = c.pipeline.as_ref().map(|p| p.baseline).or(c.mdp.as_ref().map(|p| p.baseline)).unwrap_or(false);
            for model in ["specialist", "generalist"].into_iter().chain(baseline.then_some("baseline")) {
                out.push(vec![("model", model.to_string())]);
            }
        }
        Mode::Sweep => {
            if let (Some(g), Some(p)) = (&c.sweep, &c.pipeline) {
                for n in &g.n_grid {
                    for big_n in &g.big_n_grid {
                        for model in ["specialist", "generalist"] {
                            out.push(vec![("model", model.into()), ("n", n.to_string()), ("big_n", big_n.to_string())]);
                        }
                    }
                    if p.baseline {
                        out.push(vec![("model", "baseline".into()), ("n", n.to_string()), ("big_n", "0".into())]);
                    }
                }
            }
        }
        Mode::Pareto => {
            if let Some(g) = &c.pareto {
                for w in &g.weights {
                    if let Ok(s) = semidiff_core::Scalarization::linear(w.clone()) {
                        out.push(vec![("model", "generalist".into()), ("scalarization", scalarization_label(&s))]);
                    }
                }
            }
        }
        Mode::Axioms => {
            if let Some(a) = &c.axioms {
                for s in &a.scalarizations {
                    out.push(vec![("scalarization", scalarization_label(s))]);
                }
            }
        }
    }
    out
}

pub fn build(dir: &Path) -> Result<Report, LabError> {
    if !dir.is_dir() {
        return Err(LabError::format(dir, "not a results directory"));
    }
    let manifest = Manifest::load(dir)?;
    let table = Table::read(&dir.join(RESULTS))?;
    let key_columns: Vec<String> = KEYS.iter().filter(|k| table.column(k).is_some()).map(|k| k.to_string()).collect();
    let key_idx: Vec<usize> = key_columns.iter().map(|k| table.column(k).expect("present")).collect();
    let metric_idx: Vec<usize> = (0..table.columns.len())
        .filter(|&i| {
            let name = table.columns[i].as_str();
            !KEYS.contains(&name)
                && !NON_METRICS.contains(&name)
                && table.rows.iter().all(|r| r[i].is_empty() || r[i].parse::<f64>().is_ok())
        })
        .collect();
    let expected_seeds = manifest.seeds.len();

    let mut groups: BTreeMap<Vec<KeyPart>, (Vec<String>, Vec<&Vec<String>>)> = BTreeMap::new();
    for row in &table.rows {
        let key: Vec<String> = key_idx.iter().map(|&i| row[i].clone()).collect();
        let entry = groups.entry(key.iter().map(|s| key_part(s)).collect()).or_insert_with(|| (key, vec![]));
        entry.1.push(row);
    }

    let mut rows = vec![];
    let mut incomplete = vec![];
    for (key, members) in groups.values() {
        for &m in &metric_idx {
            let values: Vec<f64> = members.iter().filter_map(|r| r[m].parse::<f64>().ok()).collect();
            if values.is_empty() {
                continue;
            }
            let status = if values.len() >= expected_seeds { "ok" } else { "partial" };
            if status != "ok" {
                incomplete.push(format!("{} {}: {} of {expected_seeds} seeds", key.join(" "), table.columns[m], values.len()));
            }
            rows.push(Aggregate {
                key: key.clone(),
                metric: table.columns[m].clone(),
                median: math::median(&values),
                q25: math::quantile(&values, 0.25),
                q75: math::quantile(&values, 0.75),
                n_seeds: values.len(),
                expected_seeds,
                status,
            });
        }
    }
    for want in expected_groups(&manifest) {
        let present = groups.values().any(|(key, _)| {
            want.iter().all(|(col, val)| key_columns.iter().position(|k| k == col).is_some_and(|i| &key[i] == val))
        });
        if !present {
            let desc: Vec<String> = want.iter().map(|(c, v)| format!("{c}={v}")).collect();
            incomplete.push(format!("{}: missing", desc.join(" ")));
            let key = key_columns
                .iter()
                .map(|k| want.iter().find(|(c, _)| c == k).map_or_else(String::new, |(_, v)| v.clone()))
                .collect();
            rows.push(Aggregate {
                key,
                metric: String::new(),
                median: f64::NAN,
                q25: f64::NAN,
                q75: f64::NAN,
                n_seeds: 0,
                expected_seeds,
                status: "missing",
            });
        }
    }
    let summary = summary(&manifest, &key_columns, &rows, &incomplete);
    Ok(Report { key_columns, rows, summary })
}

fn lookup<'a>(rows: &'a [Aggregate], keys: &[String], want: &[(&str, &str)], metric: &str) -> Option<&'a Aggregate> {
    rows.iter().find(|a| {
        a.metric == metric
            && want.iter().all(|(c, v)| keys.iter().position(|k| k == c).is_some_and(|i| a.key[i] == *v))
    })
}

fn cell(a: Option<&Aggregate>) -> String {
    a.map_or_else(|| "-".into(), |a| format!("{:.4}", a.median))
}

fn distinct(rows: &[Aggregate], keys: &[String], col: &str, filter: &[(&str, &str)]) -> Vec<String> {
    let Some(i) = keys.iter().position(|k| k == col) else { return vec![] };
    let mut v: Vec<String> = rows
        .iter()
        .filter(|a| filter.iter().all(|(c, val)| keys.iter().position(|k| k == c).is_some_and(|j| a.key[j] == *val)))
        .map(|a| a.key[i].clone())
        .filter(|s| !s.is_empty())
        .collect();
    v.sort_by_key(|s| key_part(s));
    v.dedup();
    v
}

fn summary(m: &Manifest, keys: &[String], rows: &[Aggregate], incomplete: &[String]) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "# Results summary\n");
    let _ = writeln!(s, "- mode: {}\n- version: {}\n- config hash: {}", m.mode.as_str(), m.version, m.config_hash);
    let _ = writeln!(s, "- seeds: {:?}\n\nValues are medians over seeds.\n", m.seeds);
    let k = m.config.pipeline.as_ref().map(|p| p.k()).or(m.config.mdp.as_ref().map(|p| p.k())).unwrap_or(0);
    match m.mode {
        Mode::Sweep => {
            let ns = distinct(rows, keys, "n", &[("model", "generalist")]);
            let bigs = distinct(rows, keys, "big_n", &[("model", "generalist")]);
            let _ = writeln!(s, "## Generalist scalarized TV by n (rows) and N (columns)\n");
            let _ = writeln!(s, "| n | {} | baseline |", bigs.join(" | "));
            let _ = writeln!(s, "|---|{}---|", "---|".repeat(bigs.len()));
            for n in &ns {
                let cells: Vec<String> = bigs
                    .iter()
                    .map(|b| cell(lookup(rows, keys, &[("model", "generalist"), ("n", n), ("big_n", b)], "scalarized_tv")))
                    .collect();
                let base = cell(lookup(rows, keys, &[("model", "baseline"), ("n", n)], "scalarized_tv"));
                let _ = writeln!(s, "| {n} | {} | {base} |", cells.join(" | "));
            }
            let _ = writeln!(s, "\n## Specialist scalarized L_P by n\n\n| n | scalarized_lp |\n|---|---|");
            for n in &ns {
                let b = bigs.first().map(String::as_str).unwrap_or("");
                let _ = writeln!(s, "| {n} | {} |", cell(lookup(rows, keys, &[("model", "specialist"), ("n", n), ("big_n", b)], "scalarized_lp")));
            }
        }
        Mode::Pareto => {
            let _ = writeln!(s, "## Pareto points\n");
            let head: Vec<String> = (0..k).map(|i| format!("tv_{i}")).collect();
            let _ = writeln!(s, "| weights | {} | dominated |", head.join(" | "));
            let _ = writeln!(s, "|---|{}---|", "---|".repeat(k));
            for l in distinct(rows, keys, "scalarization", &[]) {
                let f = [("scalarization", l.as_str())];
                let tv: Vec<String> = head.iter().map(|h| cell(lookup(rows, keys, &f, h))).collect();
                let _ = writeln!(s, "| {l} | {} | {} |", tv.join(" | "), cell(lookup(rows, keys, &f, "dominated")));
            }
        }
        Mode::Distribution => {
            let _ = writeln!(s, "## Models\n\n| model | scalarized_tv | scalarized_lp |\n|---|---|---|");
            for model in ["specialist", "generalist", "baseline"] {
                let f = [("model", model)];
                if lookup(rows, keys, &f, "scalarized_lp").is_some() {
                    let _ = writeln!(
                        s,
                        "| {model} | {} | {} |",
                        cell(lookup(rows, keys, &f, "scalarized_tv")),
                        cell(lookup(rows, keys, &f, "scalarized_lp"))
                    );
                }
            }
        }
        Mode::Mdp => {
            let _ = writeln!(s, "## Suboptimality gap versus performance-difference bound\n");
            let _ = writeln!(s, "| model | env | gap | bound |\n|---|---|---|---|");
            for model in ["specialist", "generalist", "baseline"] {
                for e in 0..k {
                    let f = [("model", model)];
                    if let Some(g) = lookup(rows, keys, &f, &format!("gap_{e}")) {
                        let _ = writeln!(s, "| {model} | {e} | {:.4} | {} |", g.median, cell(lookup(rows, keys, &f, &format!("bound_{e}"))));
                    }
                }
            }
            let _ = writeln!(s, "\n| model | scalarized_gap |\n|---|---|");
            for model in ["specialist", "generalist", "baseline"] {
                if let Some(a) = lookup(rows, keys, &[("model", model)], "scalarized_gap") {
                    let _ = writeln!(s, "| {model} | {:.4} |", a.median);
                }
            }
        }
        Mode::Axioms => {
            let _ = writeln!(s, "## Axiom checks\n\n| scalarization | passed (fraction of seeds) |\n|---|---|");
            for l in distinct(rows, keys, "scalarization", &[]) {
                let _ = writeln!(s, "| {l} | {} |", cell(lookup(rows, keys, &[("scalarization", l.as_str())], "passed")));
            }
        }
    }
    if !incomplete.is_empty() {
        let _ = writeln!(s, "\n## Incomplete cells\n");
        for line in incomplete {
            let _ = writeln!(s, "- {line}");
        }
    }
    s
}

impl Report {
    pub fn table(&self) -> Table {
        let mut cols = self.key_columns.clone();
        cols.extend(["metric", "median", "q25", "q75", "n_seeds", "expected_seeds", "status"].map(String::from));
        let mut t = Table::new(cols);
        for a in &self.rows {
            let mut r = a.key.clone();
            r.extend([
                a.metric.clone(),
                num(a.median),
                num(a.q25),
                num(a.q75),
                a.n_seeds.to_string(),
                a.expected_seeds.to_string(),
                a.status.to_string(),
            ]);
            t.push(r);
        }
        t
    }

    /// Writes `report_long.csv` and `summary.md` into `out`.
    pub fn write(&self, out: &Path) -> Result<(), LabError> {
        std::fs::create_dir_all(out).map_err(LabError::io(out))?;
        self.table().write(&out.join(REPORT_LONG))?;
        let path = out.join(SUMMARY);
        std::fs::write(&path, &self.summary).map_err(LabError::io(&path))
    }
}
