//! Metrics CSV: one row per (run, epoch, role, metric).

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::Path;

use d2r_core::{EpochRecord, EvalAttack};
use thiserror::Error;

pub const HEADER: &str = "run_id,epoch,role,metric,value,attack_eps,attack_iters";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub role: String,
    pub metric: String,
    pub value: f64,
    /// `(epsilon, iterations)` of the attack behind a robust accuracy.
    pub attack: Option<(f64, usize)>,
}

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("{path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("{path}:{line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("{path}: no metrics rows")]
    Empty { path: String },
}

impl MetricsRecord {
    pub fn new(run_id: &str, epoch: usize, role: &str, metric: &str, value: f64) -> Self {
        Self {
            run_id: run_id.to_string(),
            epoch,
            role: role.to_string(),
            metric: metric.to_string(),
            value,
            attack: None,
        }
    }

    pub fn accuracy(run_id: &str, epoch: usize, role: &str, attack: &EvalAttack, value: f64) -> Self {
        Self {
            attack: attack.config().map(|c| (c.epsilon, c.iterations)),
            ..Self::new(run_id, epoch, role, &attack.metric_name(), value)
        }
    }

    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv_line(&self) -> String {
        let mut line = format!("{},{},{},{},{}", self.run_id, self.epoch, self.role, self.metric, self.value);
        match self.attack {
            Some((eps, iters)) => write!(line, ",{eps},{iters}").unwrap(),
            None => line.push_str(",,"),
        }
        line
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 {
            return Err(format!("expected 7 columns, found {}", fields.len()));
        }
        let epoch = fields[1].parse().map_err(|_| format!("bad epoch '{}'", fields[1]))?;
        let value: f64 = fields[4].parse().map_err(|_| format!("bad value '{}'", fields[4]))?;
        if !value.is_finite() {
            return Err(format!("non-finite value '{}'", fields[4]));
        }
        let attack = match (fields[5], fields[6]) {
            ("", "") => None,
            (eps, iters) => Some((
                eps.parse().map_err(|_| format!("bad attack_eps '{eps}'"))?,
                iters.parse().map_err(|_| format!("bad attack_iters '{iters}'"))?,
            )),
        };
        if fields[0].is_empty() || fields[2].is_empty() || fields[3].is_empty() {
            return Err("empty run_id, role or metric".into());
        }
        Ok(Self {
            run_id: fields[0].to_string(),
            epoch,
            role: fields[2].to_string(),
            metric: fields[3].to_string(),
            value,
            attack,
        })
    }
}

/// Rows for one training epoch: clean and monitored robust accuracy of both
/// models, then the pair's mean loss terms and gap-sign fractions.
pub fn epoch_rows(run_id: &str, record: &EpochRecord, monitor: &EvalAttack) -> Vec<MetricsRecord> {
    let e = record.epoch;
    let mut rows = Vec::with_capacity(11);
    for (role, acc) in [("guide", record.guide), ("target", record.target)] {
        rows.push(MetricsRecord::accuracy(run_id, e, role, &EvalAttack::Clean, acc.clean));
        rows.push(MetricsRecord::accuracy(run_id, e, role, monitor, acc.robust));
    }
    let l = &record.loss;
    for (metric, value) in [
        ("loss_total", l.total),
        ("loss_ce", l.ce),
        ("loss_mse", l.mse),
        ("loss_kl_adv", l.kl_adv),
        ("loss_skl_gap", l.skl_gap),
        ("gap_sign_positive_fraction", record.gap_sign_positive_fraction),
        ("gap_sign_negative_fraction", record.gap_sign_negative_fraction),
    ] {
        rows.push(MetricsRecord::new(run_id, e, "pair", metric, value));
    }
    rows
}

/// Serialized writer over a metrics file.
pub struct MetricsWriter {
    file: fs::File,
    path: String,
}

impl MetricsWriter {
    /// Starts a fresh file holding only the header.
    pub fn create(path: &Path) -> Result<Self, MetricsError> {
        let mut w = Self::open(path, false)?;
        w.write_raw(&format!("{HEADER}\n"))?;
        Ok(w)
    }

    /// Appends to `path`, writing the header first if the file is new or
    /// empty, and refusing a file with a different header.
    pub fn append(path: &Path) -> Result<Self, MetricsError> {
        let existing = match fs::read_to_string(path) {
            Ok(text) => Some(text),
            Err(e) if e.kind() == io::ErrorKind::NotFound => None,
            Err(source) => {
                return Err(MetricsError::Io {
                    path: path.display().to_string(),
                    source,
                })
            }
        };
        let mut w = Self::open(path, true)?;
        match existing.as_deref().map(|t| t.lines().next()) {
            None | Some(None) => w.write_raw(&format!("{HEADER}\n"))?,
            Some(Some(HEADER)) => {}
            Some(Some(other)) => {
                return Err(MetricsError::Malformed {
                    path: w.path,
                    line: 1,
                    message: format!("unexpected header '{other}'"),
                })
            }
        }
        Ok(w)
    }

    fn open(path: &Path, append: bool) -> Result<Self, MetricsError> {
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)
            .map_err(|source| MetricsError::Io {
                path: path.display().to_string(),
                source,
            })?;
        Ok(Self {
            file,
            path: path.display().to_string(),
        })
    }

    fn write_raw(&mut self, text: &str) -> Result<(), MetricsError> {
        self.file.write_all(text.as_bytes()).map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })
    }

    pub fn write(&mut self, records: &[MetricsRecord]) -> Result<(), MetricsError> {
        let mut text = String::new();
        for r in records {
            text.push_str(&r.to_csv_line());
            text.push('\n');
        }
        self.write_raw(&text)?;
        self.file.flush().map_err(|source| MetricsError::Io {
            path: self.path.clone(),
            source,
        })
    }
}

pub fn parse_metrics(text: &str, path: &str) -> Result<Vec<MetricsRecord>, MetricsError> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, HEADER)) => {}
        Some((_, other)) => {
            return Err(MetricsError::Malformed {
                path: path.to_string(),
                line: 1,
                message: format!("unexpected header '{other}'"),
            })
        }
        None => return Err(MetricsError::Empty { path: path.to_string() }),
    }
    let records = lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            MetricsRecord::parse_line(l).map_err(|message| MetricsError::Malformed {
                path: path.to_string(),
                line: i + 1,
                message,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    if records.is_empty() {
        return Err(MetricsError::Empty { path: path.to_string() });
    }
    Ok(records)
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, MetricsError> {
    let text = fs::read_to_string(path).map_err(|source| MetricsError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_metrics(&text, &path.display().to_string())
}
