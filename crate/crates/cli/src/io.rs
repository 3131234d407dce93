//! CSV ingestion, fixed-precision CSV emission, digests and the run manifest.

use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};

use cmr_core::CmrError;
use nalgebra::DMatrix;
use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("sampler failure: {0}")]
    Sampler(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Malformed(_) => 2,
            CliError::Dimension(_) => 3,
            CliError::Sampler(_) => 4,
            CliError::Io(_) => 1,
        }
    }
}

impl From<CmrError> for CliError {
    fn from(e: CmrError) -> Self {
        let msg = e.to_string();
        match e {
            CmrError::DimensionMismatch(_) | CmrError::LengthMismatch(..) => CliError::Dimension(msg),
            CmrError::Sampler { .. }
            | CmrError::NotPositiveDefinite(_)
            | CmrError::AllWeightsDegenerate
            | CmrError::Singular(_) => CliError::Sampler(msg),
            _ => CliError::Malformed(msg),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Header plus raw string cells.
#[derive(Clone, Debug)]
pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

pub fn read_table(path: &Path) -> CliResult<Table> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?;
    let headers: Vec<String> = rdr
        .headers()
        .map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_string)
        .collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Malformed(format!("{}: {e}", path.display())))?;
        rows.push(rec.iter().map(str::to_string).collect());
    }
    Ok(Table { headers, rows })
}

fn parse_cell(path: &Path, row: usize, col: &str, s: &str) -> CliResult<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
        CliError::Malformed(format!("{}: row {}, column `{col}`: `{s}` is not a finite number", path.display(), row + 1))
    })
}

/// Numeric matrix; cells where `skip` is true may hold anything and read as 0.
pub fn table_matrix(path: &Path, t: &Table, skip: Option<&DMatrix<bool>>) -> CliResult<DMatrix<f64>> {
    let (n, p) = (t.rows.len(), t.headers.len());
    if let Some(m) = skip {
        if m.shape() != (n, p) {
            return Err(CliError::Dimension(format!(
                "{} is {n} x {p} but the mask is {} x {}",
                path.display(),
                m.nrows(),
                m.ncols()
            )));
        }
    }
    let mut out = DMatrix::zeros(n, p);
    for (i, row) in t.rows.iter().enumerate() {
        for j in 0..p {
            if skip.is_some_and(|m| m[(i, j)]) {
                continue;
            }
            out[(i, j)] = parse_cell(path, i, &t.headers[j], &row[j])?;
        }
    }
    Ok(out)
}

pub fn read_matrix(path: &Path) -> CliResult<(Vec<String>, DMatrix<f64>)> {
    let t = read_table(path)?;
    if t.rows.is_empty() || t.headers.is_empty() {
        return Err(CliError::Malformed(format!("{}: no data rows", path.display())));
    }
    let m = table_matrix(path, &t, None)?;
    Ok((t.headers, m))
}

pub fn read_mask(path: &Path) -> CliResult<DMatrix<bool>> {
    let t = read_table(path)?;
    let (n, p) = (t.rows.len(), t.headers.len());
    let mut m = DMatrix::from_element(n, p, false);
    for (i, row) in t.rows.iter().enumerate() {
        for j in 0..p {
            m[(i, j)] = match row[j].as_str() {
                "0" => false,
                "1" => true,
                other => {
                    return Err(CliError::Malformed(format!(
                        "{}: row {}, column `{}`: mask entries must be 0 or 1, got `{other}`",
                        path.display(),
                        i + 1,
                        t.headers[j]
                    )))
                }
            };
        }
    }
    Ok(m)
}

/// One row of per-column limits; empty cells mean no limit.
pub fn read_lod(path: &Path, p: usize) -> CliResult<Vec<f64>> {
    let t = read_table(path)?;
    if t.rows.len() != 1 {
        return Err(CliError::Malformed(format!("{}: expected exactly one row of limits", path.display())));
    }
    if t.headers.len() != p {
        return Err(CliError::Dimension(format!("{} has {} limits for {p} columns", path.display(), t.headers.len())));
    }
    t.rows[0]
        .iter()
        .enumerate()
        .map(|(j, s)| {
            if s.is_empty() {
                Ok(f64::INFINITY)
            } else {
                parse_cell(path, 0, &t.headers[j], s)
            }
        })
        .collect()
}

/// 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

#[derive(Clone, Debug, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

/// Output directory that fsyncs and digests everything it writes.
pub struct RunDir {
    pub dir: PathBuf,
    pub outputs: Vec<FileDigest>,
}

impl RunDir {
    pub fn create(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            outputs: Vec::new(),
        })
    }

    fn write_synced(&self, name: &str, bytes: &[u8]) -> CliResult<()> {
        let path = self.dir.join(name);
        let mut f = File::create(&path).map_err(|e| io_err(&path, e))?;
        f.write_all(bytes).map_err(|e| io_err(&path, e))?;
        f.sync_all().map_err(|e| io_err(&path, e))
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> CliResult<()> {
        self.write_synced(name, bytes)?;
        self.outputs.retain(|o| o.path != name);
        self.outputs.push(FileDigest {
            path: name.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        });
        Ok(())
    }

    pub fn write_rows(&mut self, name: &str, header: &[String], rows: &[Vec<String>]) -> CliResult<()> {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Io(e.to_string());
        w.write_record(header).map_err(csv_err)?;
        for r in rows {
            w.write_record(r).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| CliError::Io(e.to_string()))?;
        self.write(name, &bytes)
    }

    pub fn write_matrix(&mut self, name: &str, names: &[String], m: &DMatrix<f64>) -> CliResult<()> {
        let rows: Vec<Vec<String>> = m.row_iter().map(|r| r.iter().map(|v| fmt_f64(*v)).collect()).collect();
        self.write_rows(name, names, &rows)
    }

    pub fn write_bool_matrix(&mut self, name: &str, names: &[String], m: &DMatrix<bool>) -> CliResult<()> {
        let rows: Vec<Vec<String>> = m
            .row_iter()
            .map(|r| r.iter().map(|v| if *v { "1" } else { "0" }.to_string()).collect())
            .collect();
        self.write_rows(name, names, &rows)
    }

    /// Manifest is not listed among its own outputs.
    pub fn write_manifest(&self, manifest: &Manifest) -> CliResult<()> {
        let json = serde_json::to_vec_pretty(manifest).map_err(|e| CliError::Io(e.to_string()))?;
        self.write_synced(MANIFEST, &json)
    }
}

pub const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub config: serde_json::Value,
    pub inputs: Vec<FileDigest>,
    pub started_at: String,
    pub finished_at: Option<String>,
    pub status: String,
    pub outputs: Vec<FileDigest>,
}

impl Manifest {
    pub fn start(command: &str, config: serde_json::Value, inputs: &[&Path]) -> CliResult<Self> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(FileDigest {
                    path: p.display().to_string(),
                    sha256: sha256_file(p)?,
                })
            })
            .collect::<CliResult<Vec<_>>>()?;
        Ok(Self {
            tool: "cmr".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv: std::env::args().collect(),
            config,
            inputs,
            started_at: chrono::Utc::now().to_rfc3339(),
            finished_at: None,
            status: "running".into(),
            outputs: Vec::new(),
        })
    }

    pub fn finish(&mut self, run: &RunDir, status: &str) {
        self.finished_at = Some(chrono::Utc::now().to_rfc3339());
        self.status = status.into();
        self.outputs = run.outputs.clone();
    }
}
