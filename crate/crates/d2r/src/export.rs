//! CSV exports of datasets and adversarial batches.

use std::fmt::Write as _;

use d2r_core::{AdvBatch, Dataset};

/// `x0,…,x{d-1},label`, one row per sample in dataset order.
pub fn dataset_csv(dataset: &Dataset) -> String {
    let d = dataset.dim();
    let mut out = String::new();
    for j in 0..d {
        write!(out, "x{j},").unwrap();
    }
    out.push_str("label\n");
    for (row, label) in dataset.features().data().chunks(d).zip(dataset.labels()) {
        for v in row {
            write!(out, "{v},").unwrap();
        }
        writeln!(out, "{label}").unwrap();
    }
    out
}

/// Parses [`dataset_csv`] output back into features and labels.
pub fn parse_dataset_csv(text: &str) -> Result<(Vec<Vec<f64>>, Vec<usize>), String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty file")?;
    let width = header.split(',').count();
    if header.split(',').next_back() != Some("label") {
        return Err("last column must be 'label'".into());
    }
    let mut features = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width {
            return Err(format!("row {}: expected {width} columns, found {}", i + 1, fields.len()));
        }
        let (label, row) = fields.split_last().unwrap();
        features.push(
            row.iter()
                .map(|f| f.parse().map_err(|_| format!("row {}: bad feature '{f}'", i + 1)))
                .collect::<Result<_, _>>()?,
        );
        labels.push(label.parse().map_err(|_| format!("row {}: bad label '{label}'", i + 1))?);
    }
    Ok((features, labels))
}

/// One row per sample: `sample,label,generator,linf,clean_0…,adv_0…`.
pub fn adv_batch_csv(batch: &AdvBatch, labels: &[usize]) -> String {
    let d = batch.x_clean.shape().get(1).copied().unwrap_or(0);
    let mut out = String::from("sample,label,generator,linf");
    for prefix in ["clean", "adv"] {
        for j in 0..d {
            write!(out, ",{prefix}_{j}").unwrap();
        }
    }
    out.push('\n');
    let rows = batch.x_clean.data().chunks(d.max(1)).zip(batch.x_adv.data().chunks(d.max(1)));
    for (i, ((clean, adv), label)) in rows.zip(labels).enumerate() {
        let linf = clean.iter().zip(adv).map(|(c, a)| (a - c).abs()).fold(0.0, f64::max);
        write!(out, "{i},{label},{},{linf}", batch.generator.as_str()).unwrap();
        for v in clean.iter().chain(adv) {
            write!(out, ",{v}").unwrap();
        }
        out.push('\n');
    }
    out
}
