//! CSV and JSON artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use odekernel::Trajectory;
use serde::Serialize;

use crate::CliError;

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Shortest representation that parses back to the same double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:?}")
}

fn ensure_parent(path: &Path) -> Result<(), CliError> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
        _ => Ok(()),
    }
}

/// Writes a CSV with the given header and numeric rows.
pub fn write_table(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> Result<(), CliError> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).map_err(|e| io_err(path, e))?;
    w.write_record(header).map_err(|e| io_err(path, e))?;
    for row in rows {
        w.write_record(row.iter().map(|v| fmt_f64(*v))).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Header `t,u1,…,uN`, one row per sample.
pub fn write_trajectory(path: &Path, traj: &Trajectory) -> Result<(), CliError> {
    let mut header = vec!["t".to_string()];
    header.extend((1..=traj.dim()).map(|i| format!("u{i}")));
    let rows = traj.times.iter().zip(&traj.states).map(|(t, u)| {
        let mut row = vec![*t];
        row.extend_from_slice(u);
        row
    });
    write_table(path, &header, rows)
}

/// Reads a numeric CSV, returning the header and rows.
pub fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>), CliError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    let header: Vec<String> = r.headers().map_err(|e| io_err(path, e))?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| io_err(path, e))?;
        let row = rec
            .iter()
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| io_err(path, format!("row {}: {e}", i + 1)))?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn read_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    let (header, rows) = read_table(path)?;
    if header.first().map(String::as_str) != Some("t") || header.len() < 2 {
        return Err(io_err(path, "expected a header t,u1,…,uN"));
    }
    let times = rows.iter().map(|r| r[0]).collect();
    let states = rows.iter().map(|r| r[1..].to_vec()).collect();
    Trajectory::new(times, states).map_err(|e| io_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    ensure_parent(path)?;
    let text = serde_json::to_string_pretty(value).map_err(|e| io_err(path, e))?;
    fs::write(path, text + "\n").map_err(|e| io_err(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    ensure_parent(path)?;
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| io_err(path, e))
}

/// `<path>.meta.json`.
pub fn meta_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta.json");
    PathBuf::from(s)
}

/// Inserts `suffix` before the extension: `model.json` -> `model-M60.json`.
pub fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let name = match path.extension() {
        Some(ext) => format!("{stem}{suffix}.{}", ext.to_string_lossy()),
        None => format!("{stem}{suffix}"),
    };
    path.with_file_name(name)
}

#[derive(Serialize)]
struct Metadata<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    seed: u64,
    rng: &'static str,
    config: &'a C,
    timestamp_unix: u64,
    wall_ms: u64,
}

/// Writes the metadata sidecar describing how `output` was produced.
pub fn write_meta<C: Serialize>(output: &Path, command: &str, seed: u64, config: &C, wall_ms: u64) -> Result<(), CliError> {
    let timestamp_unix = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let meta = Metadata {
        tool: "odekernel",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed,
        rng: odekernel::systems::RNG_ALGORITHM,
        config,
        timestamp_unix,
        wall_ms,
    };
    write_json(&meta_path(output), &meta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suffix_insertion() {
        assert_eq!(with_suffix(Path::new("out/model.json"), "-M60"), PathBuf::from("out/model-M60.json"));
        assert_eq!(with_suffix(Path::new("model"), "-M2"), PathBuf::from("model-M2"));
        assert_eq!(meta_path(Path::new("a/b.csv")), PathBuf::from("a/b.csv.meta.json"));
    }

    #[test]
    fn float_format_roundtrips() {
        for v in [0.1, 1e-300, -2.5e17, 1.0 / 3.0, f64::MIN_POSITIVE, 5e-324, 0.0, -0.0] {
            assert_eq!(fmt_f64(v).parse::<f64>().unwrap().to_bits(), v.to_bits());
        }
    }
}
