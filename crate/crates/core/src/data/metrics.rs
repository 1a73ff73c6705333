//! Append-only metrics CSV.
//!
//! The file starts with a `# config: {...}` comment line and the column
//! header; both are written once, when the file is created or empty.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::error::{Error, Result};

pub const METRICS_COLUMNS: [&str; 9] = [
    "run_id",
    "phase",
    "sweep_or_epoch",
    "component_count",
    "elbo",
    "recon_error",
    "kl",
    "error_rate",
    "wall_ms",
];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("metrics schema violation: {0}")]
    Schema(String),
    #[error("{path} has an unexpected metrics header: {found:?}")]
    HeaderMismatch { path: PathBuf, found: String },
}

/// One metrics row. `None` fields become empty cells.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub phase: String,
    pub sweep_or_epoch: u64,
    pub component_count: Option<usize>,
    pub elbo: Option<f64>,
    pub recon_error: Option<f64>,
    pub kl: Option<f64>,
    pub error_rate: Option<f64>,
    pub wall_ms: Option<f64>,
}

impl MetricsRecord {
    pub fn new(run_id: impl Into<String>, phase: impl Into<String>, sweep_or_epoch: u64) -> Self {
        MetricsRecord {
            run_id: run_id.into(),
            phase: phase.into(),
            sweep_or_epoch,
            ..Default::default()
        }
    }

    fn to_line(&self) -> Result<String, MetricsError> {
        for (field, v) in [("run_id", &self.run_id), ("phase", &self.phase)] {
            if v.is_empty() || v.contains([',', '\n', '\r', '"']) {
                return Err(MetricsError::Schema(format!("{field} {v:?} must be a non-empty plain token")));
            }
        }
        let mut cells = vec![
            self.run_id.clone(),
            self.phase.clone(),
            self.sweep_or_epoch.to_string(),
            self.component_count.map(|c| c.to_string()).unwrap_or_default(),
        ];
        for (field, v) in [
            ("elbo", self.elbo),
            ("recon_error", self.recon_error),
            ("kl", self.kl),
            ("error_rate", self.error_rate),
            ("wall_ms", self.wall_ms),
        ] {
            cells.push(match v {
                None => String::new(),
                Some(x) if x.is_finite() => format_float(x),
                Some(x) => return Err(MetricsError::Schema(format!("{field} is not finite ({x})"))),
            });
        }
        Ok(cells.join(","))
    }
}

/// `%.9g`: nine significant digits, trailing zeros dropped, exponent form
/// outside `[1e-4, 1e9)`.
pub fn format_float(v: f64) -> String {
    const SIG: i32 = 9;
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{:.*e}", (SIG - 1) as usize, v);
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..SIG).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{m}e{sign}{:02}", exp.abs())
    } else {
        let fixed = format!("{:.*}", (SIG - 1 - exp) as usize, v);
        trim_zeros(&fixed).to_string()
    }
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl MetricsWriter {
    /// Opens `path` for appending. A new or empty file gets the config echo
    /// and header; an existing one must already carry the header.
    pub fn open(path: &Path, config_echo: &str) -> Result<Self> {
        if config_echo.contains(['\n', '\r']) {
            return Err(MetricsError::Schema("config echo must be a single line".into()).into());
        }
        let existing = std::fs::metadata(path).map(|m| m.len()).unwrap_or(0);
        if existing > 0 {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            let mut lines = BufReader::new(f).lines();
            let mut header = String::new();
            for line in lines.by_ref() {
                let line = line.map_err(|e| Error::io(path, e))?;
                if !line.starts_with('#') {
                    header = line;
                    break;
                }
            }
            if header != METRICS_COLUMNS.join(",") {
                return Err(MetricsError::HeaderMismatch {
                    path: path.to_path_buf(),
                    found: header,
                }
                .into());
            }
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut w = MetricsWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        };
        if existing == 0 {
            writeln!(w.out, "# config: {config_echo}").map_err(|e| Error::io(path, e))?;
            writeln!(w.out, "{}", METRICS_COLUMNS.join(",")).map_err(|e| Error::io(path, e))?;
        }
        Ok(w)
    }

    pub fn emit(&mut self, record: &MetricsRecord) -> Result<()> {
        let line = record.to_line()?;
        writeln!(self.out, "{line}").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}
