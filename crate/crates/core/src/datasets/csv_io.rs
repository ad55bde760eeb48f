use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Numeric table read from CSV. A first record with any non-numeric field
/// is taken as the header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Option<Vec<String>>,
    pub data: Array2<f64>,
}

/// Rows are reported by 1-based line number in the file.
pub fn parse_matrix(text: &str) -> Result<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut header = None;
    let mut width = None;
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse {
            row: e.position().map_or(i + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let row = rec.position().map_or(i + 1, |p| p.line() as usize);
        if rec.iter().all(str::is_empty) {
            continue;
        }
        let parsed: Vec<std::result::Result<f64, _>> = rec.iter().map(str::parse::<f64>).collect();
        if width.is_none() && header.is_none() && parsed.iter().any(|p| p.is_err()) {
            header = Some(rec.iter().map(str::to_string).collect::<Vec<_>>());
            width = Some(rec.len());
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                row,
                message: format!("expected {w} fields, found {}", rec.len()),
            });
        }
        for (field, p) in rec.iter().zip(parsed) {
            match p {
                Ok(v) if v.is_finite() => values.push(v),
                _ => {
                    return Err(Error::Parse {
                        row,
                        message: format!("non-numeric field {field:?}"),
                    })
                }
            }
        }
    }
    let w = width.unwrap_or(0);
    let rows = if w == 0 { 0 } else { values.len() / w };
    let data = Array2::from_shape_vec((rows, w), values).expect("rectangular by construction");
    Ok(Table { header, data })
}

pub fn read_matrix(path: &Path) -> Result<Table> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text)
}

pub fn write_matrix_to(
    mut w: impl Write,
    header: &[&str],
    data: ArrayView2<'_, f64>,
) -> std::io::Result<()> {
    if !header.is_empty() {
        writeln!(w, "{}", header.join(","))?;
    }
    for row in data.rows() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    Ok(())
}

pub fn write_matrix(path: &Path, header: &[&str], data: ArrayView2<'_, f64>) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_matrix_to(&mut w, header, data)
        .and_then(|_| w.flush())
        .map_err(|e| Error::io(path, e))
}
