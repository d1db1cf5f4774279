//! CSV, theta and JSON files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use plnpca::{Dataset, ModelParams};
use serde::Serialize;
use sha2::{Digest, Sha256};

fn read_cells<T>(path: &Path, parse: impl Fn(&str) -> Option<T>, expected: &str) -> Result<(Vec<String>, Array2<T>)> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;
    let header: Vec<String> = reader
        .headers()
        .with_context(|| format!("{}: unreadable header", path.display()))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header.is_empty() || header.iter().all(|h| h.trim().is_empty()) {
        bail!("{}: missing header row", path.display());
    }
    let cols = header.len();
    let mut cells = Vec::new();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != cols {
            bail!("{} line {line}: expected {cols} fields, found {}", path.display(), record.len());
        }
        for (k, field) in record.iter().enumerate() {
            let v = parse(field.trim()).with_context(|| {
                format!("{} line {line}, column {}: expected {expected}, found {field:?}", path.display(), k + 1)
            })?;
            cells.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("{}: no data rows", path.display());
    }
    Ok((header, Array2::from_shape_vec((rows, cols), cells)?))
}

/// Counts matrix; every cell must be a non-negative integer literal.
pub fn read_counts(path: &Path) -> Result<Array2<u64>> {
    Ok(read_cells(path, |s| s.parse::<u64>().ok(), "a non-negative integer count")?.1)
}

pub fn read_real(path: &Path) -> Result<Array2<f64>> {
    Ok(read_cells(path, |s| s.parse::<f64>().ok().filter(|v| v.is_finite()), "a finite real number")?.1)
}

/// `Y` plus optional `X` (intercept only when absent) and `O` (zeros when absent).
pub fn load_dataset(y: &Path, x: Option<&Path>, o: Option<&Path>) -> Result<Dataset<f64>> {
    let counts = read_counts(y)?;
    let (n, p) = counts.dim();
    let covariates = match x {
        Some(path) => read_real(path)?,
        None => Array2::ones((n, 1)),
    };
    if covariates.nrows() != n {
        bail!("{} has {} rows but Y has {n}", x.unwrap_or(y).display(), covariates.nrows());
    }
    let offsets = match o {
        Some(path) => read_real(path)?,
        None => Array2::zeros((n, p)),
    };
    if offsets.dim() != (n, p) {
        bail!("offsets must be {n}x{p}, found {}x{}", offsets.nrows(), offsets.ncols());
    }
    Dataset::new(counts, covariates, offsets).context("invalid dataset")
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("cannot create {}", path.display()))?,
    ))
}

fn numbered(prefix: &str, k: usize) -> Vec<String> {
    (1..=k).map(|j| format!("{prefix}{j}")).collect()
}

pub fn write_table<T: std::fmt::Display>(path: &Path, header: &[String], m: &Array2<T>) -> Result<()> {
    if header.len() != m.ncols() {
        bail!("{}: header has {} names for {} columns", path.display(), header.len(), m.ncols());
    }
    let mut w = create(path)?;
    writeln!(w, "{}", header.join(","))?;
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
        writeln!(w, "{}", cells.join(","))?;
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

pub fn write_counts(path: &Path, m: &Array2<u64>) -> Result<()> {
    write_table(path, &numbered("y", m.ncols()), m)
}

pub fn write_real(path: &Path, prefix: &str, m: &Array2<f64>) -> Result<()> {
    write_table(path, &numbered(prefix, m.ncols()), m)
}

/// Long format `block,row,col,value`: `B` column by column, then `C`.
pub fn write_theta(path: &Path, theta: &ModelParams<f64>) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "block,row,col,value")?;
    for (name, m) in [("B", theta.b()), ("C", theta.c())] {
        for col in 0..m.ncols() {
            for row in 0..m.nrows() {
                writeln!(w, "{name},{row},{col},{}", m[(row, col)])?;
            }
        }
    }
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

pub fn read_theta(path: &Path) -> Result<ModelParams<f64>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut entries: Vec<(String, usize, usize, f64)> = Vec::new();
    for record in reader.records() {
        let record = record.with_context(|| format!("{}: malformed CSV", path.display()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 4 {
            bail!("{} line {line}: expected block,row,col,value", path.display());
        }
        let block = record[0].trim().to_string();
        if block != "B" && block != "C" {
            bail!("{} line {line}: unknown block {block:?}", path.display());
        }
        let idx = |k: usize| {
            record[k]
                .trim()
                .parse::<usize>()
                .with_context(|| format!("{} line {line}, column {}: expected an index", path.display(), k + 1))
        };
        let value: f64 = record[3]
            .trim()
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .with_context(|| format!("{} line {line}, column 4: expected a finite real", path.display()))?;
        entries.push((block, idx(1)?, idx(2)?, value));
    }
    let dims = |name: &str| {
        entries
            .iter()
            .filter(|e| e.0 == name)
            .fold((0, 0), |(r, c), e| (r.max(e.1 + 1), c.max(e.2 + 1)))
    };
    let (d, p) = dims("B");
    let (pc, q) = dims("C");
    if d == 0 || q == 0 || pc != p {
        bail!("{}: B must be d x p and C must be p x q", path.display());
    }
    let mut b = Array2::from_elem((d, p), f64::NAN);
    let mut c = Array2::from_elem((p, q), f64::NAN);
    for (block, row, col, value) in entries {
        let target = if block == "B" { &mut b } else { &mut c };
        target[(row, col)] = value;
    }
    if b.iter().chain(c.iter()).any(|v| v.is_nan()) {
        bail!("{}: missing parameter entries", path.display());
    }
    ModelParams::new(b, c).with_context(|| format!("{}: invalid parameters", path.display()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush().with_context(|| format!("cannot write {}", path.display()))
}

/// Content address in git's object format (`blob <len>\0` prefix), SHA-256 flavor.
pub fn content_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(&bytes);
    Ok(hex::encode(h.finalize()))
}
