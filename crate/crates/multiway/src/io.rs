//! Long-format array files.
//!
//! ```text
//! # dims: 3,2,2
//! 1,1,1,0.25
//! 3,2,1,-1.5
//! ```
//!
//! Indices are 1-based; cells that never appear (or whose value is `NA`)
//! are masked. Other lines starting with `#` are comments.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::array::MultiwayArray;
use crate::error::{Error, Result};

const DIMS_PREFIX: &str = "# dims:";

pub fn read_long<R: BufRead>(reader: R) -> Result<MultiwayArray> {
    let mut dims: Option<Vec<usize>> = None;
    let mut data = Vec::new();
    let mut seen = Vec::new();
    let mut cell = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line?;
        let text = line.trim();
        if text.is_empty() {
            continue;
        }
        if let Some(rest) = text.strip_prefix(DIMS_PREFIX) {
            if dims.is_some() {
                return Err(Error::parse(line_no, "repeated dims header"));
            }
            let d = rest
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::parse(line_no, format!("bad dims: {e}")))?;
            if d.len() < 2 || d.contains(&0) {
                return Err(Error::parse(line_no, "dims must list at least two positive sizes"));
            }
            let len = d.iter().product();
            data = vec![0.0; len];
            seen = vec![false; len];
            dims = Some(d);
            continue;
        }
        if text.starts_with('#') {
            continue;
        }
        let d = dims
            .as_ref()
            .ok_or_else(|| Error::parse(line_no, "data before the '# dims:' header"))?;
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != d.len() + 1 {
            return Err(Error::parse(
                line_no,
                format!("expected {} indices and a value, found {} fields", d.len(), fields.len()),
            ));
        }
        cell.clear();
        for (k, (f, &m)) in fields.iter().zip(d).enumerate() {
            let i: usize = f
                .parse()
                .map_err(|_| Error::parse(line_no, format!("index {} is not a positive integer: {f:?}", k + 1)))?;
            if i == 0 || i > m {
                return Err(Error::parse(line_no, format!("index {} = {i} outside 1..={m}", k + 1)));
            }
            cell.push(i - 1);
        }
        let raw = fields[d.len()];
        if raw.eq_ignore_ascii_case("na") {
            continue;
        }
        let value: f64 = raw
            .parse()
            .map_err(|_| Error::parse(line_no, format!("value is not a number: {raw:?}")))?;
        if !value.is_finite() {
            return Err(Error::parse(line_no, "value must be finite (use NA for missing)"));
        }
        let lin = linear(d, &cell);
        if seen[lin] {
            return Err(Error::parse(line_no, "duplicate cell"));
        }
        seen[lin] = true;
        data[lin] = value;
    }
    let dims = dims.ok_or_else(|| Error::parse(1, "missing '# dims:' header"))?;
    let missing: Vec<usize> = (0..seen.len()).filter(|&i| !seen[i]).collect();
    MultiwayArray::new(dims, data)?.with_mask(missing)
}

fn linear(dims: &[usize], idx: &[usize]) -> usize {
    let mut lin = 0;
    let mut stride = 1;
    for (&i, &d) in idx.iter().zip(dims) {
        lin += i * stride;
        stride *= d;
    }
    lin
}

/// Observed cells in linear order (first index fastest), values in
/// shortest round-trip form.
pub fn write_long<W: Write>(a: &MultiwayArray, mut w: W) -> Result<()> {
    let dims: Vec<String> = a.dims().iter().map(|d| d.to_string()).collect();
    writeln!(w, "{DIMS_PREFIX} {}", dims.join(","))?;
    let mut line = String::new();
    for lin in 0..a.len() {
        if !a.is_observed(lin) {
            continue;
        }
        line.clear();
        for i in a.multi_index(lin) {
            line.push_str(&(i + 1).to_string());
            line.push(',');
        }
        line.push_str(&a.data()[lin].to_string());
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_long_path(path: impl AsRef<Path>) -> Result<MultiwayArray> {
    read_long(BufReader::new(File::open(path)?))
}

pub fn write_long_path(a: &MultiwayArray, path: impl AsRef<Path>) -> Result<()> {
    write_long(a, BufWriter::new(File::create(path)?))
}

/// Line number (1-based) of a csv record, for error messages.
pub(crate) fn record_line(rec: &csv::StringRecord) -> usize {
    rec.position().map(|p| p.line() as usize).unwrap_or(0)
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::parse(line, format!("{kind:?}")),
    }
}
