//! Per-round metrics and their CSV form.

use std::fmt::Write as _;
use std::path::Path;

pub const CSV_HEADER: &str = "round,global_loss,accuracy,bytes_up,bytes_down,wall_ms";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub round: u32,
    pub global_loss: f64,
    pub accuracy: f64,
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub wall_ms: u64,
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round, r.global_loss, r.accuracy, r.bytes_up, r.bytes_down, r.wall_ms
        );
    }
    out
}

pub fn write_csv(path: &Path, rows: &[MetricsRow]) -> std::io::Result<()> {
    std::fs::write(path, to_csv(rows))
}

/// Parses a metrics file back into rows.
pub fn parse_csv(text: &str) -> Result<Vec<MetricsRow>, String> {
    let mut lines = text.lines();
    if lines.next() != Some(CSV_HEADER) {
        return Err("missing or unexpected header".into());
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = |e: &dyn std::fmt::Display| format!("line {}: {e}", i + 2);
            if f.len() != 6 {
                return Err(bad(&format!("{} fields", f.len())));
            }
            Ok(MetricsRow {
                round: f[0].parse().map_err(|e| bad(&e))?,
                global_loss: f[1].parse().map_err(|e| bad(&e))?,
                accuracy: f[2].parse().map_err(|e| bad(&e))?,
                bytes_up: f[3].parse().map_err(|e| bad(&e))?,
                bytes_down: f[4].parse().map_err(|e| bad(&e))?,
                wall_ms: f[5].parse().map_err(|e| bad(&e))?,
            })
        })
        .collect()
}
