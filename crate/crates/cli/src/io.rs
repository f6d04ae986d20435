//! CSV and JSON files. Floats are written in Rust's shortest round-trip
//! form, so identical values always produce identical bytes.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use nenkf::{Dataset, Observation};
use serde::Serialize;

use crate::error::CliError;

pub fn fmt(v: f64) -> String {
    format!("{v}")
}

fn writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    Ok(csv::Writer::from_writer(BufWriter::new(File::create(path)?)))
}

/// Writes a table with a fixed header.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<(), CliError> {
    let mut w = writer(path)?;
    w.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(CliError::Validation(format!(
                "row of width {} under a header of width {}",
                row.len(),
                header.len()
            )));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// `t, y_1, …, y_d`.
pub fn write_dataset(path: &Path, data: &Dataset) -> Result<(), CliError> {
    let header: Vec<String> = std::iter::once("t".to_string())
        .chain((1..=data.obs_dim()).map(|i| format!("y_{i}")))
        .collect();
    write_table(
        path,
        &header,
        data.observations()
            .iter()
            .map(|o| std::iter::once(o.t.to_string()).chain(o.values.iter().map(|v| fmt(*v))).collect()),
    )
}

/// `t, x_1, …, x_d`.
pub fn write_latent(path: &Path, times: &[usize], latent: &[Vec<f64>]) -> Result<(), CliError> {
    let d = latent.first().map_or(0, |x| x.len());
    let header: Vec<String> = std::iter::once("t".to_string()).chain((1..=d).map(|i| format!("x_{i}"))).collect();
    write_table(
        path,
        &header,
        times
            .iter()
            .zip(latent)
            .map(|(t, x)| std::iter::once(t.to_string()).chain(x.iter().map(|v| fmt(*v))).collect()),
    )
}

pub fn read_dataset(path: &Path) -> Result<Dataset, CliError> {
    let file = File::open(path).map_err(|e| CliError::Validation(format!("cannot open dataset {}: {e}", path.display())))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.clone();
    let ok = header.get(0) == Some("t") && header.iter().skip(1).enumerate().all(|(i, h)| h == format!("y_{}", i + 1));
    if !ok || header.len() < 2 {
        return Err(CliError::Validation(format!(
            "dataset header must be t,y_1,..,y_d; got {}",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let mut obs = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |what: &str| CliError::Validation(format!("dataset row {}: invalid {what}", line + 1));
        let t: usize = rec.get(0).and_then(|v| v.trim().parse().ok()).ok_or_else(|| bad("time index"))?;
        let values = rec
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>().map_err(|_| bad("value")))
            .collect::<Result<Vec<f64>, CliError>>()?;
        obs.push(Observation::new(t, values));
    }
    Ok(Dataset::new(obs)?)
}

/// Reads a headed CSV into rows of strings.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>), CliError> {
    let file = File::open(path).map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(String::from).collect());
    }
    Ok((header, rows))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    f.write_all(b"\n")?;
    f.flush()?;
    Ok(())
}
