//! Numeric CSV ingestion (comma-separated, '.' decimal, optional header row).

use std::path::Path;

use crate::error::{FunnelError, Result};
use crate::tensor::Tensor;

use super::DatasetSplit;

/// Parse numeric CSV text into a row-major matrix. A first line that does not
/// parse as numbers is treated as a header; any later non-numeric cell is an
/// error naming its row and column (1-based, counting the header).
pub fn parse_csv(text: &str) -> Result<Tensor> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut dim = None;
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        let parsed: std::result::Result<Vec<f64>, usize> = cells
            .iter()
            .enumerate()
            .map(|(c, s)| s.trim().parse::<f64>().map_err(|_| c))
            .collect();
        match parsed {
            Ok(values) => {
                match dim {
                    None => dim = Some(values.len()),
                    Some(d) if d != values.len() => {
                        return Err(FunnelError::Parse(format!(
                            "row {} has {} columns, expected {}",
                            lineno + 1,
                            values.len(),
                            d
                        )))
                    }
                    _ => {}
                }
                rows.push(values);
            }
            Err(col) => {
                if lineno == 0 && rows.is_empty() {
                    continue; // header row
                }
                return Err(FunnelError::Parse(format!(
                    "non-numeric cell at row {}, column {}",
                    lineno + 1,
                    col + 1
                )));
            }
        }
    }
    let dim = dim.ok_or_else(|| FunnelError::Parse("CSV contains no data rows".into()))?;
    if dim == 0 {
        return Err(FunnelError::Parse("CSV rows have no columns".into()));
    }
    let n = rows.len();
    Ok(Tensor::matrix(n, dim, rows.into_iter().flatten().collect()))
}

/// Load a numeric CSV file and split it 80/10/10 with a fixed shuffle seed;
/// optionally standardize every feature to train mean 0 / std 1.
pub fn load_csv_tabular(path: impl AsRef<Path>, standardize: bool) -> Result<DatasetSplit> {
    let text = std::fs::read_to_string(path)?;
    let data = parse_csv(&text)?;
    let mut split = DatasetSplit::from_rows(data, 0.1, 0.1, 0)?;
    if standardize {
        split.standardize()?;
    }
    Ok(split)
}

/// Write a matrix as CSV with a generated header (f0,f1,…) at 17 significant
/// digits, so values round-trip losslessly through `parse_csv`.
pub fn write_csv(path: impl AsRef<Path>, data: &Tensor) -> Result<()> {
    let dim = data.last_dim();
    let mut out = String::new();
    let header: Vec<String> = (0..dim).map(|j| format!("f{j}")).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for r in 0..data.row_count() {
        let row: Vec<String> = (0..dim)
            .map(|j| format!("{:.17e}", data.data[r * dim + j]))
            .collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
