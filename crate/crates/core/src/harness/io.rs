//! Dataset CSV files (`m,y,x0,...,x{D-1}` with an optional trailing
//! `y_oracle` column), result tables and JSON manifests.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::Serialize;

use crate::data::{Dataset, Unit};
use crate::datagen::OracleLabels;
use crate::error::{Error, Result};

pub const ORACLE_COLUMN: &str = "y_oracle";

#[derive(Debug, Clone, PartialEq)]
pub struct LoadedCsv {
    pub dataset: Dataset,
    pub oracle: Option<OracleLabels>,
}

fn parse_bit(field: &str, line: u64, column: &str) -> Result<u8> {
    match field.trim() {
        "0" => Ok(0),
        "1" => Ok(1),
        other => Err(Error::Validation {
            row: line as usize,
            message: format!("column `{column}` must be 0 or 1, got `{other}`"),
        }),
    }
}

/// Parses the dataset schema from any reader.
pub fn read_dataset(reader: impl Read) -> Result<LoadedCsv> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(reader);
    let headers = rdr.headers().map_err(|e| Error::Parse { line: 1, message: e.to_string() })?.clone();
    let names: Vec<&str> = headers.iter().map(str::trim).collect();
    let has_oracle = names.last() == Some(&ORACLE_COLUMN);
    let x_names = &names[..names.len() - usize::from(has_oracle)];
    if x_names.len() < 3 || x_names[0] != "m" || x_names[1] != "y" {
        return Err(Error::Parse { line: 1, message: "header must start with `m,y,x0`".into() });
    }
    for (d, name) in x_names[2..].iter().enumerate() {
        if *name != format!("x{d}") {
            return Err(Error::Parse { line: 1, message: format!("expected column `x{d}`, found `{name}`") });
        }
    }
    let dim = x_names.len() - 2;
    let mut units = Vec::new();
    let mut oracle = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let m = parse_bit(&record[0], line, "m")?;
        let y_field = record[1].trim();
        let y = match (m, y_field) {
            (1, "") => None,
            (1, _) => {
                return Err(Error::Validation { row: line as usize, message: "y must be empty when m = 1".into() })
            }
            (_, "") => {
                return Err(Error::Validation { row: line as usize, message: "y is required when m = 0".into() })
            }
            (_, v) => Some(parse_bit(v, line, "y")?),
        };
        let x = (0..dim).map(|d| parse_bit(&record[d + 2], line, x_names[d + 2])).collect::<Result<Vec<_>>>()?;
        if has_oracle {
            let truth = parse_bit(&record[dim + 2], line, ORACLE_COLUMN)?;
            if y.is_some_and(|v| v != truth) {
                return Err(Error::Validation { row: line as usize, message: "y disagrees with y_oracle".into() });
            }
            oracle.push(truth);
        }
        units.push(Unit::new(x, y).map_err(|e| Error::Validation { row: line as usize, message: e.to_string() })?);
    }
    if units.is_empty() {
        return Err(Error::InsufficientData("CSV has no data rows".into()));
    }
    Ok(LoadedCsv { dataset: Dataset::new(units)?, oracle: has_oracle.then(|| OracleLabels::new(oracle)) })
}

pub fn load_dataset_csv(path: impl AsRef<Path>) -> Result<LoadedCsv> {
    read_dataset(File::open(path)?)
}

/// Loads a dataset, ignoring any oracle column.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    Ok(load_dataset_csv(path)?.dataset)
}

/// Writes the dataset schema; the oracle column is emitted only when given.
pub fn write_dataset(dataset: &Dataset, oracle: Option<&OracleLabels>, writer: impl Write) -> Result<()> {
    if let Some(o) = oracle {
        if o.labels().len() != dataset.len() {
            return Err(Error::InvalidArgument("oracle labels do not match the dataset".into()));
        }
    }
    let mut w = BufWriter::new(writer);
    let mut header = String::from("m,y");
    for d in 0..dataset.dim() {
        header.push_str(&format!(",x{d}"));
    }
    if oracle.is_some() {
        header.push(',');
        header.push_str(ORACLE_COLUMN);
    }
    writeln!(w, "{header}")?;
    for (i, unit) in dataset.units().iter().enumerate() {
        let mut line = String::with_capacity(4 + 2 * dataset.dim());
        line.push(if unit.is_observed() { '0' } else { '1' });
        line.push(',');
        if let Some(y) = unit.y() {
            line.push(if y == 1 { '1' } else { '0' });
        }
        for &v in unit.x() {
            line.push(',');
            line.push(if v == 1 { '1' } else { '0' });
        }
        if let Some(o) = oracle {
            line.push(',');
            line.push(if o.labels()[i] == 1 { '1' } else { '0' });
        }
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_dataset_csv(dataset: &Dataset, oracle: Option<&OracleLabels>, path: impl AsRef<Path>) -> Result<()> {
    write_dataset(dataset, oracle, File::create(path)?)
}

/// Serializes rows with a header taken from the row type's field names.
pub fn write_rows<T: Serialize>(rows: &[T], writer: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(writer);
    for row in rows {
        w.serialize(row).map_err(|e| Error::Io(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Like [`write_rows`], but writes a bare header line for an empty table.
pub fn write_results<T: Serialize>(rows: &[T], header: &[&str], path: impl AsRef<Path>) -> Result<()> {
    let mut file = File::create(path)?;
    if rows.is_empty() {
        writeln!(file, "{}", header.join(","))?;
        return Ok(());
    }
    write_rows(rows, file)
}

pub fn write_manifest<T: Serialize>(manifest: &T, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, manifest)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}
