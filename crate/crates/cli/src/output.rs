use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use npgap::report::{ExperimentReport, Manifest, Value};

pub fn write_csv<W: Write>(report: &ExperimentReport, w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(&report.columns)?;
    for row in &report.rows {
        out.write_record(row.iter().map(Value::to_string))?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    write_csv(report, std::io::BufWriter::new(f))
        .with_context(|| format!("writing {}", path.display()))
}

/// Header and typed rows of a CSV written by [`write_csv`].
#[cfg(test)]
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<Value>>)> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let header = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(Value::parse).collect());
    }
    Ok((header, rows))
}

pub fn save_manifest(manifest: &Manifest, path: &Path) -> Result<()> {
    let mut text = serde_json::to_string_pretty(manifest)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
