use std::path::{Path, PathBuf};

use log::warn;
use serde::{Deserialize, Serialize};

use super::{TaskCollection, TaskDataset};
use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Column mapping for a multi-task CSV file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CsvSchema {
    pub task_column: String,
    pub feature_columns: Vec<String>,
    pub target_column: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DroppedTask {
    pub task_id: String,
    pub rows: usize,
}

#[derive(Clone, Debug)]
pub struct LoadedCsv {
    pub collection: TaskCollection,
    pub dropped: Vec<DroppedTask>,
    pub rows_read: usize,
}

fn column_index(headers: &csv::StringRecord, name: &str, path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| h.trim() == name)
        .ok_or_else(|| Error::Schema {
            column: name.to_string(),
            path: path.to_path_buf(),
        })
}

fn csv_error(path: &Path, err: csv::Error) -> Error {
    let row = err.position().map_or(0, |p| p.line() as usize);
    match err.into_kind() {
        csv::ErrorKind::Io(e) => Error::io(path, e),
        other => Error::Parse {
            path: path.to_path_buf(),
            row,
            message: format!("{other:?}"),
        },
    }
}

/// Read one instance per row and group rows by task id.
///
/// Tasks appear in order of first occurrence. Tasks with fewer than
/// `min_task_size` rows are dropped with a warning. Row numbers in errors
/// are 1-based file lines, counting the header.
pub fn load_csv_multitask(
    path: impl AsRef<Path>,
    schema: &CsvSchema,
    min_task_size: usize,
) -> Result<LoadedCsv> {
    let path = path.as_ref();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let task_col = column_index(&headers, &schema.task_column, path)?;
    let feature_cols = schema
        .feature_columns
        .iter()
        .map(|c| column_index(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    let target_col = column_index(&headers, &schema.target_column, path)?;

    let mut order: Vec<String> = Vec::new();
    let mut rows: std::collections::HashMap<String, (Vec<f64>, Vec<f64>)> = Default::default();
    let mut rows_read = 0;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = i + 2;
        let parse = |col: usize| -> Result<f64> {
            let cell = record.get(col).unwrap_or("").trim();
            cell.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Parse {
                    path: path.to_path_buf(),
                    row: line,
                    message: format!(
                        "column `{}`: `{cell}` is not a finite number",
                        &headers[col]
                    ),
                })
        };
        let task = record.get(task_col).unwrap_or("").trim().to_string();
        let features = feature_cols
            .iter()
            .map(|&c| parse(c))
            .collect::<Result<Vec<_>>>()?;
        let target = parse(target_col)?;
        let entry = rows.entry(task.clone()).or_insert_with(|| {
            order.push(task);
            (Vec::new(), Vec::new())
        });
        entry.0.extend(features);
        entry.1.push(target);
        rows_read += 1;
    }

    let d = feature_cols.len();
    let mut tasks = Vec::new();
    let mut dropped = Vec::new();
    for id in order {
        let (x, y) = rows.remove(&id).expect("grouped above");
        if y.len() < min_task_size {
            warn!(
                "dropping task `{id}` from {}: {} rows < minimum {min_task_size}",
                path.display(),
                y.len()
            );
            dropped.push(DroppedTask {
                task_id: id,
                rows: y.len(),
            });
            continue;
        }
        let n = y.len();
        tasks.push(TaskDataset::new(id, Matrix::from_vec(n, d, x)?, y)?);
    }
    Ok(LoadedCsv {
        collection: TaskCollection::new(tasks)?,
        dropped,
        rows_read,
    })
}

/// Header names of a CSV file.
pub fn csv_headers(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?;
    Ok(headers.iter().map(|h| h.trim().to_string()).collect())
}

/// Numeric values of the named columns, one inner vector per data row.
pub fn read_csv_columns(path: impl AsRef<Path>, columns: &[String]) -> Result<Vec<Vec<f64>>> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let idx = columns
        .iter()
        .map(|c| column_index(&headers, c, path))
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let row = idx
            .iter()
            .map(|&c| {
                let cell = record.get(c).unwrap_or("").trim();
                cell.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| Error::Parse {
                        path: path.to_path_buf(),
                        row: i + 2,
                        message: format!(
                            "column `{}`: `{cell}` is not a finite number",
                            &headers[c]
                        ),
                    })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Write a collection in the format read by [`load_csv_multitask`].
pub fn write_csv_multitask(
    collection: &TaskCollection,
    path: impl AsRef<Path>,
    schema: &CsvSchema,
) -> Result<()> {
    let path: PathBuf = path.as_ref().to_path_buf();
    let mut writer = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
    let mut header = vec![schema.task_column.clone()];
    header.extend(schema.feature_columns.iter().cloned());
    header.push(schema.target_column.clone());
    writer
        .write_record(&header)
        .map_err(|e| csv_error(&path, e))?;
    for task in &collection.tasks {
        if task.dim() != schema.feature_columns.len() {
            return Err(Error::Shape(format!(
                "task `{}` has {} features but the schema names {}",
                task.task_id,
                task.dim(),
                schema.feature_columns.len()
            )));
        }
        for i in 0..task.len() {
            let mut record = vec![task.task_id.clone()];
            // `{}` on f64 prints the shortest string that parses back exactly.
            record.extend(task.features().row(i).iter().map(|v| format!("{v}")));
            record.push(format!("{}", task.targets()[i]));
            writer
                .write_record(&record)
                .map_err(|e| csv_error(&path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(&path, e))?;
    Ok(())
}
