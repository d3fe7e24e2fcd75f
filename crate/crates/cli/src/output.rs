//! Artifact writers: per-round CSV, sweep tables, JSON summaries and the
//! run manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use salf::engine::{RoundRecord, SweepResult};
use serde::{Deserialize, Serialize};

pub const ROUNDS_MAGIC: &str = "# salf-rounds v1";
const ROUNDS_HEADER: [&str; 8] =
    ["round", "participants", "stragglers", "train_loss", "eval_loss", "eval_accuracy", "eta", "wall_ms"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Floats use the shortest representation that parses back to the same
/// value, so a read after a write is exact.
pub fn write_rounds_csv(path: &Path, records: &[RoundRecord]) -> Result<()> {
    let mut file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    writeln!(file, "{ROUNDS_MAGIC}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(ROUNDS_HEADER)?;
    for r in records {
        let participants = r.participants.iter().map(usize::to_string).collect::<Vec<_>>().join(";");
        w.write_record([
            r.round.to_string(),
            participants,
            r.stragglers.to_string(),
            r.train_loss.to_string(),
            opt(r.eval_loss),
            opt(r.eval_accuracy),
            r.eta.to_string(),
            opt(r.wall_ms),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rounds_csv(path: &Path) -> Result<Vec<RoundRecord>> {
    let mut reader = BufReader::new(fs::File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut first = String::new();
    reader.read_line(&mut first)?;
    if first.trim_end() != ROUNDS_MAGIC {
        bail!("{} does not start with `{ROUNDS_MAGIC}`", path.display());
    }
    let mut r = csv::Reader::from_reader(reader);
    if r.headers()?.iter().ne(ROUNDS_HEADER) {
        bail!("{}: unexpected column layout", path.display());
    }
    let parse_opt = |s: &str| -> Result<Option<f64>> { Ok(if s.is_empty() { None } else { Some(s.parse()?) }) };
    r.records()
        .map(|rec| {
            let rec = rec?;
            let participants =
                if rec[1].is_empty() { Vec::new() } else { rec[1].split(';').map(str::parse).collect::<Result<_, _>>()? };
            Ok(RoundRecord {
                round: rec[0].parse()?,
                participants,
                stragglers: rec[2].parse()?,
                train_loss: rec[3].parse()?,
                eval_loss: parse_opt(&rec[4])?,
                eval_accuracy: parse_opt(&rec[5])?,
                eta: rec[6].parse()?,
                wall_ms: parse_opt(&rec[7])?,
            })
        })
        .collect()
}

/// Rows are methods, columns fractions, cells `mean±sd` of final accuracy.
pub fn write_sweep_table(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["method".to_string()];
    header.extend(result.fractions.iter().map(|q| format!("q={q}")));
    w.write_record(&header)?;
    for row in &result.rows {
        let mut line = vec![row.method.clone()];
        line.extend(row.stats.iter().map(|s| match (s.mean, s.sd) {
            (Some(m), Some(sd)) => format!("{m:.4}±{sd:.4}"),
            _ => "failed".to_string(),
        }));
        w.write_record(&line)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_sweep_cells(path: &Path, result: &SweepResult) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["method", "fraction", "seed", "accuracy", "error"])?;
    for c in &result.cells {
        w.write_record([
            c.method.clone(),
            c.fraction.to_string(),
            c.seed.to_string(),
            opt(c.accuracy),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

/// Identifies what produced a directory of artifacts. Paths are relative to
/// the manifest so the file does not depend on where the run was written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    pub code_version: String,
    pub outputs: Vec<PathBuf>,
}

impl Manifest {
    pub fn new(command: &str, config_digest: String, seed: u64, outputs: &[&str]) -> Self {
        Self {
            command: command.to_string(),
            config_digest,
            seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            outputs: outputs.iter().map(PathBuf::from).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounds_csv_round_trips_awkward_floats() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("r.csv");
        let records = vec![
            RoundRecord {
                round: 1,
                participants: vec![30, 12, 3],
                stragglers: 27,
                train_loss: 0.1 + 0.2,
                eval_loss: None,
                eval_accuracy: None,
                eta: 1e-300,
                wall_ms: None,
            },
            RoundRecord {
                round: 2,
                participants: vec![0],
                stragglers: 4,
                train_loss: f64::MIN_POSITIVE,
                eval_loss: Some(2.302585092994046),
                eval_accuracy: Some(1.0 / 3.0),
                eta: 0.05,
                wall_ms: Some(12.25),
            },
        ];
        write_rounds_csv(&path, &records).unwrap();
        assert_eq!(read_rounds_csv(&path).unwrap(), records);
    }
}
