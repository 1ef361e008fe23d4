//! Plot data derived from metrics files.
//!
//! For every run id found in the inputs:
//!
//! * `curve_<run>.csv`: one row per epoch, one column per `<role>_<accuracy metric>`.
//! * `class_probs_<run>.csv`: softmax outputs of both models on the probe
//!   samples recorded during training, when a probes file sits next to the
//!   metrics file.
//!
//! Plus `comparison.csv` with the final and best value of every accuracy
//! metric of every run side by side.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::metrics::{read_metrics, MetricsRecord};

pub const PROBES_HEADER: &str = "run_id,sample,label,role,class,probability";
pub const COMPARISON_FILE: &str = "comparison.csv";

/// Tolerance on the sum of one probability row.
pub const PROBABILITY_SUM_TOLERANCE: f64 = 1e-9;

/// Probe file written by `train` alongside `metrics`.
pub fn probes_path(metrics: &Path) -> PathBuf {
    let stem = metrics.file_stem().map_or("metrics".into(), |s| s.to_string_lossy().into_owned());
    metrics.with_file_name(format!("{stem}_probes.csv"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeRow {
    pub run_id: String,
    pub sample: usize,
    pub label: usize,
    pub role: String,
    pub probabilities: Vec<f64>,
}

pub fn probes_csv(rows: &[ProbeRow]) -> String {
    let mut out = format!("{PROBES_HEADER}\n");
    for r in rows {
        for (k, p) in r.probabilities.iter().enumerate() {
            writeln!(out, "{},{},{},{},{k},{p}", r.run_id, r.sample, r.label, r.role).unwrap();
        }
    }
    out
}

pub fn parse_probes(text: &str, path: &str) -> Result<Vec<ProbeRow>, String> {
    let mut lines = text.lines().enumerate();
    if lines.next().map(|(_, l)| l) != Some(PROBES_HEADER) {
        return Err(format!("{path}: missing probes header"));
    }
    let mut rows: Vec<ProbeRow> = Vec::new();
    for (i, line) in lines {
        let bad = |what: &str| format!("{path}:{}: {what}", i + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad("expected 6 columns"));
        }
        let sample = f[1].parse().map_err(|_| bad("bad sample"))?;
        let label = f[2].parse().map_err(|_| bad("bad label"))?;
        let class: usize = f[4].parse().map_err(|_| bad("bad class"))?;
        let p: f64 = f[5].parse().map_err(|_| bad("bad probability"))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(bad("probability outside [0, 1]"));
        }
        let same = rows
            .last()
            .is_some_and(|r| r.run_id == f[0] && r.sample == sample && r.role == f[3]);
        if same {
            let r = rows.last_mut().unwrap();
            if class != r.probabilities.len() {
                return Err(bad("classes out of order"));
            }
            r.probabilities.push(p);
        } else {
            if class != 0 {
                return Err(bad("classes out of order"));
            }
            rows.push(ProbeRow {
                run_id: f[0].to_string(),
                sample,
                label,
                role: f[3].to_string(),
                probabilities: vec![p],
            });
        }
    }
    Ok(rows)
}

fn is_accuracy(metric: &str) -> bool {
    metric == "clean_acc" || metric.starts_with("robust_acc")
}

fn curve_csv(records: &[&MetricsRecord]) -> String {
    let mut columns: Vec<(&str, &str)> = Vec::new();
    let mut table: BTreeMap<usize, BTreeMap<(&str, &str), f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| is_accuracy(&r.metric)) {
        let key = (r.role.as_str(), r.metric.as_str());
        if !columns.contains(&key) {
            columns.push(key);
        }
        table.entry(r.epoch).or_default().insert(key, r.value);
    }
    let mut out = String::from("epoch");
    for (role, metric) in &columns {
        write!(out, ",{role}_{metric}").unwrap();
    }
    out.push('\n');
    for (epoch, values) in &table {
        write!(out, "{epoch}").unwrap();
        for key in &columns {
            match values.get(key) {
                Some(v) => write!(out, ",{v}").unwrap(),
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    out
}

/// `(role, metric)` with its `(epoch, value)` points.
type Series<'a> = ((&'a str, &'a str), Vec<(usize, f64)>);

fn comparison_csv(runs: &BTreeMap<String, Vec<&MetricsRecord>>) -> String {
    let mut out = String::from("run_id,role,metric,final_epoch,final_value,best_epoch,best_value\n");
    for (run, records) in runs {
        let mut series: Vec<Series> = Vec::new();
        for r in records.iter().filter(|r| is_accuracy(&r.metric)) {
            let key = (r.role.as_str(), r.metric.as_str());
            match series.iter_mut().find(|(k, _)| *k == key) {
                Some((_, points)) => points.push((r.epoch, r.value)),
                None => series.push((key, vec![(r.epoch, r.value)])),
            }
        }
        for ((role, metric), points) in series {
            let last = *points.iter().max_by_key(|p| p.0).unwrap();
            let best = points.iter().fold(points[0], |b, &p| if p.1 > b.1 { p } else { b });
            writeln!(out, "{run},{role},{metric},{},{},{},{}", last.0, last.1, best.0, best.1).unwrap();
        }
    }
    out
}

fn class_probs_csv(rows: &[&ProbeRow]) -> Result<String, String> {
    let classes = rows[0].probabilities.len();
    let mut out = String::from("sample,label,role");
    for k in 0..classes {
        write!(out, ",p_{k}").unwrap();
    }
    out.push('\n');
    for r in rows {
        let sum: f64 = r.probabilities.iter().sum();
        if r.probabilities.len() != classes || (sum - 1.0).abs() > PROBABILITY_SUM_TOLERANCE {
            return Err(format!(
                "run {} sample {} ({}): probabilities do not form a distribution",
                r.run_id, r.sample, r.role
            ));
        }
        write!(out, "{},{},{}", r.sample, r.label, r.role).unwrap();
        for p in &r.probabilities {
            write!(out, ",{p}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

/// Builds every output file in memory: `(file name, contents)`. Nothing is
/// returned unless every input parsed.
pub fn build_plot_files(metrics_paths: &[PathBuf]) -> Result<Vec<(String, String)>, String> {
    if metrics_paths.is_empty() {
        return Err("no metrics files given".into());
    }
    let mut records = Vec::new();
    let mut probes = Vec::new();
    for path in metrics_paths {
        records.extend(read_metrics(path).map_err(|e| e.to_string())?);
        let probe_path = probes_path(path);
        if probe_path.exists() {
            let text = fs::read_to_string(&probe_path).map_err(|e| format!("{}: {e}", probe_path.display()))?;
            probes.extend(parse_probes(&text, &probe_path.display().to_string())?);
        }
    }
    let mut runs: BTreeMap<String, Vec<&MetricsRecord>> = BTreeMap::new();
    for r in &records {
        if r.run_id.contains(['/', '\\']) || r.run_id.starts_with('.') {
            return Err(format!("run id '{}' cannot name a file", r.run_id));
        }
        runs.entry(r.run_id.clone()).or_default().push(r);
    }

    let mut files = Vec::new();
    for (run, rs) in &runs {
        files.push((format!("curve_{run}.csv"), curve_csv(rs)));
        let run_probes: Vec<&ProbeRow> = probes.iter().filter(|p| &p.run_id == run).collect();
        if !run_probes.is_empty() {
            files.push((format!("class_probs_{run}.csv"), class_probs_csv(&run_probes)?));
        }
    }
    files.push((COMPARISON_FILE.to_string(), comparison_csv(&runs)));
    Ok(files)
}

/// Writes the plot files into `out_dir`, creating it if needed. Each file is
/// written to a temporary name first and renamed into place.
pub fn export_plots(metrics_paths: &[PathBuf], out_dir: &Path) -> Result<Vec<PathBuf>, String> {
    let files = build_plot_files(metrics_paths)?;
    fs::create_dir_all(out_dir).map_err(|e| format!("{}: {e}", out_dir.display()))?;
    let mut staged = Vec::new();
    for (name, contents) in &files {
        let tmp = out_dir.join(format!(".{name}.tmp"));
        if let Err(e) = fs::write(&tmp, contents) {
            for (t, _) in &staged {
                let _ = fs::remove_file(t);
            }
            let _ = fs::remove_file(&tmp);
            return Err(format!("{}: {e}", tmp.display()));
        }
        staged.push((tmp, out_dir.join(name)));
    }
    for (tmp, dest) in &staged {
        fs::rename(tmp, dest).map_err(|e| format!("{}: {e}", dest.display()))?;
    }
    Ok(staged.into_iter().map(|(_, d)| d).collect())
}
