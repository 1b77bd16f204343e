//! CSV writers for the CLI outputs.

use std::path::Path;

use multiway::extensions::{CrossTabData, OrdinalPanel};
use multiway::{Error, Result};
use nalgebra::DMatrix;

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        kind => Error::InvalidParameter(format!("{kind:?}")),
    }
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// Matrix with a header row; `index` prepends a 1-based row-number column
/// under that name.
pub fn write_matrix_csv(path: impl AsRef<Path>, index: Option<&str>, columns: &[String], m: &DMatrix<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = index.map(|s| vec![s.to_string()]).unwrap_or_default();
    header.extend(columns.iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..m.nrows() {
        let mut rec: Vec<String> = index.map(|_| vec![(i + 1).to_string()]).unwrap_or_default();
        rec.extend(m.row(i).iter().map(|&v| fmt(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|j| format!("{prefix}{j}")).collect()
}

/// Decodes a linear cell index into 0-based levels (first variable fastest).
pub fn cell_levels(levels: &[usize], mut cell: usize) -> Vec<usize> {
    levels
        .iter()
        .map(|&m| {
            let v = cell % m;
            cell /= m;
            v
        })
        .collect()
}

pub fn write_crosstab_csv(path: impl AsRef<Path>, data: &CrossTabData) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let k = data.levels().len();
    let mut header = numbered("x", k);
    header.extend(data.y_names().iter().cloned());
    w.write_record(&header).map_err(csv_err)?;
    for obs in 0..data.n() {
        let mut rec: Vec<String> = cell_levels(data.levels(), data.cell_of(obs))
            .iter()
            .map(|v| (v + 1).to_string())
            .collect();
        rec.extend(data.y().row(obs).iter().map(|&v| fmt(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_panel_csv(path: impl AsRef<Path>, panel: &OrdinalPanel) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let mut header: Vec<String> = ["i", "j", "t", "y"].iter().map(|s| s.to_string()).collect();
    header.extend(numbered("x", panel.q()));
    w.write_record(&header).map_err(csv_err)?;
    for (n, c) in panel.cells().iter().enumerate() {
        let mut rec = vec![
            (c.i + 1).to_string(),
            (c.j + 1).to_string(),
            (c.t + 1).to_string(),
            panel.label(c.y).to_string(),
        ];
        rec.extend(panel.x().row(n).iter().map(|&v| fmt(v)));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{crosstab_sample, panel_sample};
    use multiway::RngStream;

    #[test]
    fn crosstab_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        let mut rng = RngStream::new(1);
        let s = crosstab_sample(&[3, 2], 2, 1, 0.1, 0.5, 5, &mut rng).unwrap();
        write_crosstab_csv(&path, &s.data).unwrap();
        let back = CrossTabData::read_csv_path(&path).unwrap();
        assert_eq!(back.n(), s.data.n());
        assert_eq!(back.y(), s.data.y());
        for obs in 0..back.n() {
            assert_eq!(back.cell_of(obs), s.data.cell_of(obs));
        }
    }

    #[test]
    fn panel_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let mut rng = RngStream::new(2);
        let s = panel_sample(5, 2, 1, &[0.5, -1.0], &[-0.5, 0.5], -1, 1.0, &mut rng).unwrap();
        write_panel_csv(&path, &s.panel).unwrap();
        let back = OrdinalPanel::read_csv_path(&path).unwrap();
        assert_eq!(back.cells(), s.panel.cells());
        assert_eq!(back.x(), s.panel.x());
    }

    #[test]
    fn cell_levels_inverts_linear_order() {
        assert_eq!(cell_levels(&[3, 2], 4), vec![1, 1]);
        assert_eq!(cell_levels(&[3, 2], 2), vec![2, 0]);
    }
}
