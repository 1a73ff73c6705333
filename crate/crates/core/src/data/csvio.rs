//! Plain CSV datasets and tabular exports.

use std::io::Read;
use std::path::Path;

use crate::data::metrics::format_float;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Parses a CSV with a header row. A column named `label` (non-negative
/// integers) becomes the class labels; every other column is a feature.
pub fn parse_csv_dataset(reader: impl Read, provenance: &str) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let label_col = headers.iter().position(|h| h.trim() == "label");
    let d = headers.len() - usize::from(label_col.is_some());
    if d == 0 {
        return Err(Error::Input("CSV dataset has no feature columns".into()));
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let record = record?;
        for (col, cell) in record.iter().enumerate() {
            let cell = cell.trim();
            if Some(col) == label_col {
                let y: usize = cell
                    .parse()
                    .map_err(|_| Error::Input(format!("row {}: bad label {cell:?}", row + 1)))?;
                labels.push(y);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Input(format!("row {}, column {}: bad number {cell:?}", row + 1, col)))?;
                if !v.is_finite() {
                    return Err(Error::Input(format!("row {}, column {col}: non-finite value", row + 1)));
                }
                data.push(v);
            }
        }
    }
    let n = data.len() / d;
    if n == 0 {
        return Err(Error::Empty("CSV dataset"));
    }
    let instances = Tensor::new(vec![n, d], data)?;
    match label_col {
        None => Dataset::unlabeled(instances, provenance),
        Some(_) => {
            let k = labels.iter().max().map(|m| m + 1);
            Dataset::new(instances, Some(labels), k, provenance)
        }
    }
}

pub fn load_csv_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_csv_dataset(std::io::BufReader::new(f), &format!("csv:{}", path.display()))
}

/// One row of the latent-statistics export.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentRow {
    pub instance_id: usize,
    pub component_id: usize,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub responsibility: f64,
}

pub fn latent_header(latent_dim: usize) -> Vec<String> {
    let mut h = vec!["instance_id".to_string(), "component_id".to_string()];
    h.extend((0..latent_dim).map(|j| format!("mu_{j}")));
    h.extend((0..latent_dim).map(|j| format!("sigma_{j}")));
    h.push("responsibility".into());
    h
}

pub fn write_latent_stats(path: &Path, rows: &[LatentRow], latent_dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(latent_header(latent_dim))?;
    for r in rows {
        if r.mu.len() != latent_dim || r.sigma.len() != latent_dim {
            return Err(Error::Shape {
                op: "write_latent_stats",
                lhs: vec![latent_dim],
                rhs: vec![r.mu.len(), r.sigma.len()],
            });
        }
        let mut rec = vec![r.instance_id.to_string(), r.component_id.to_string()];
        rec.extend(r.mu.iter().chain(&r.sigma).map(|&v| format_float(v)));
        rec.push(format_float(r.responsibility));
        w.write_record(rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes a numeric table with the given header.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        if row.len() != header.len() {
            return Err(Error::Shape {
                op: "write_table",
                lhs: vec![header.len()],
                rhs: vec![row.len()],
            });
        }
        w.write_record(row.iter().map(|&v| format_float(v)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labeled_csv() {
        let text = "a,label,b\n0.5,1,1\n0,0,0.25\n";
        let d = parse_csv_dataset(text.as_bytes(), "t").unwrap();
        assert_eq!(d.instances().shape(), &[2, 2]);
        assert_eq!(d.instances().row(0), &[0.5, 1.0]);
        assert_eq!(d.labels().unwrap(), &[1, 0]);
        assert_eq!(d.n_classes(), Some(2));
    }

    #[test]
    fn unlabeled_and_errors() {
        let d = parse_csv_dataset("x,y\n1,2\n".as_bytes(), "t").unwrap();
        assert!(d.labels().is_none());
        assert!(parse_csv_dataset("x,y\n1,z\n".as_bytes(), "t").is_err());
        assert!(parse_csv_dataset("x,y\n1\n".as_bytes(), "t").is_err());
        assert!(parse_csv_dataset("x,y\n".as_bytes(), "t").is_err());
        assert!(parse_csv_dataset("label\n1\n".as_bytes(), "t").is_err());
        assert!(parse_csv_dataset("x,label\n1,-1\n".as_bytes(), "t").is_err());
        assert!(parse_csv_dataset("x\ninf\n".as_bytes(), "t").is_err());
    }

    #[test]
    fn latent_export_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("lat.csv");
        let rows = vec![LatentRow {
            instance_id: 3,
            component_id: 1,
            mu: vec![0.5, -1.0],
            sigma: vec![1.0, 0.25],
            responsibility: 0.75,
        }];
        write_latent_stats(&p, &rows, 2).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(
            text,
            "instance_id,component_id,mu_0,mu_1,sigma_0,sigma_1,responsibility\n3,1,0.5,-1,1,0.25,0.75\n"
        );
    }
}
