//! `metrics.csv` / `returns.csv` writers.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ctrlsplit_core::losses::LossBundle;
use ctrlsplit_core::trainer::MetricsSink;
use ctrlsplit_core::Error;

pub const METRICS_HEADER: &str = "iteration,l_c,l_u,l_h1,l_h2,l_adv,l_inv,l_q,l_enc_total";
pub const RETURNS_HEADER: &str = "iteration,mean_return";

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_row(iteration: u64, b: &LossBundle) -> String {
    let cols = [b.l_c, b.l_u, b.l_h1, b.l_h2, b.l_adv, b.l_inv, b.l_q, b.l_enc_total];
    let mut s = iteration.to_string();
    for c in cols {
        s.push(',');
        s.push_str(&cell(c));
    }
    s
}

/// Keeps the header and rows with `iteration <= keep`, dropping anything a
/// crashed run wrote past its last checkpoint.
fn truncate_after(path: &Path, header: &str, keep: u64) -> Result<()> {
    let mut kept = vec![header.to_string()];
    if path.exists() {
        for line in BufReader::new(File::open(path)?).lines().skip(1) {
            let line = line?;
            let it: u64 = line.split(',').next().unwrap_or("").parse().with_context(|| format!("bad row in {}", path.display()))?;
            if it <= keep {
                kept.push(line);
            }
        }
    }
    let mut text = kept.join("\n");
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn open(path: &Path, header: &str, resume_from: Option<u64>) -> Result<BufWriter<File>> {
    match resume_from {
        Some(keep) => truncate_after(path, header, keep)?,
        None => fs::write(path, format!("{}\n", header))?,
    }
    let f = OpenOptions::new().append(true).open(path).with_context(|| format!("opening {}", path.display()))?;
    Ok(BufWriter::new(f))
}

/// Streams losses and returns to CSV files in a run directory.
pub struct CsvSink {
    metrics: BufWriter<File>,
    returns: BufWriter<File>,
    pub metrics_path: PathBuf,
    pub returns_path: PathBuf,
}

impl CsvSink {
    /// Fresh files, or (on resume) the existing ones cut back to `resume_from`.
    pub fn create(dir: &Path, resume_from: Option<u64>) -> Result<Self> {
        let metrics_path = dir.join("metrics.csv");
        let returns_path = dir.join("returns.csv");
        Ok(Self {
            metrics: open(&metrics_path, METRICS_HEADER, resume_from)?,
            returns: open(&returns_path, RETURNS_HEADER, resume_from)?,
            metrics_path,
            returns_path,
        })
    }

    pub fn flush(&mut self) -> Result<()> {
        self.metrics.flush()?;
        self.returns.flush()?;
        Ok(())
    }
}

fn sink_err(e: std::io::Error) -> Error {
    Error::Sink(e.to_string())
}

impl MetricsSink for CsvSink {
    fn record_losses(&mut self, iteration: u64, losses: &LossBundle) -> ctrlsplit_core::Result<()> {
        writeln!(self.metrics, "{}", metrics_row(iteration, losses)).map_err(sink_err)
    }

    fn record_return(&mut self, iteration: u64, mean_return: f64) -> ctrlsplit_core::Result<()> {
        writeln!(self.returns, "{},{}", iteration, mean_return).map_err(sink_err)
    }
}
