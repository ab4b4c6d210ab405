//! Append-only training trace file: one CSV row per iteration, written as
//! the trainer produces them, parseable back without loss.

use std::io::Write;
use std::path::Path;

use anyhow::Context;
use nagvac::trainer::{IterRecord, TraceSink};

pub struct CsvTraceSink {
    out: std::io::BufWriter<std::fs::File>,
    wrote_header: bool,
    n_gamma: usize,
}

impl CsvTraceSink {
    pub fn create(path: &Path) -> anyhow::Result<CsvTraceSink> {
        let file = std::fs::File::create(path)
            .with_context(|| format!("cannot create trace file {}", path.display()))?;
        Ok(CsvTraceSink { out: std::io::BufWriter::new(file), wrote_header: false, n_gamma: 0 })
    }
}

impl TraceSink for CsvTraceSink {
    fn record(&mut self, rec: &IterRecord) {
        if !self.wrote_header {
            self.n_gamma = rec.gamma.len();
            let mut header = String::from(
                "iteration,lb,lb_smoothed,step_size,grad_norm,natgrad_norm,gamma_w",
            );
            for j in 1..=self.n_gamma {
                header.push_str(&format!(",gamma_{j}"));
            }
            let _ = writeln!(self.out, "{header}");
            self.wrote_header = true;
        }
        let smoothed = rec.lb_smoothed.map_or(String::new(), |v| format!("{v}"));
        let mut line = format!(
            "{},{},{},{},{},{},{}",
            rec.iteration,
            rec.lb,
            smoothed,
            rec.step_size,
            rec.grad_norm,
            rec.natgrad_norm,
            rec.gamma_w
        );
        for g in &rec.gamma {
            line.push_str(&format!(",{g}"));
        }
        let _ = writeln!(self.out, "{line}");
        let _ = self.out.flush();
    }
}

/// Reads a trace file back into records.
#[cfg_attr(not(test), allow(dead_code))]
pub fn read_trace(path: &Path) -> anyhow::Result<Vec<IterRecord>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read trace file {}", path.display()))?;
    let mut lines = text.lines();
    let header = lines.next().context("empty trace file")?;
    let n_gamma = header.split(',').filter(|c| c.starts_with("gamma_") && *c != "gamma_w").count();
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 7 + n_gamma {
            anyhow::bail!("trace line {} has {} fields, expected {}", i + 2, fields.len(), 7 + n_gamma);
        }
        let parse = |s: &str, what: &str| -> anyhow::Result<f64> {
            s.parse::<f64>().with_context(|| format!("bad {what} on trace line {}", i + 2))
        };
        records.push(IterRecord {
            iteration: fields[0].parse().context("bad iteration")?,
            lb: parse(fields[1], "lb")?,
            lb_smoothed: if fields[2].is_empty() {
                None
            } else {
                Some(parse(fields[2], "lb_smoothed")?)
            },
            step_size: parse(fields[3], "step_size")?,
            grad_norm: parse(fields[4], "grad_norm")?,
            natgrad_norm: parse(fields[5], "natgrad_norm")?,
            gamma_w: parse(fields[6], "gamma_w")?,
            gamma: fields[7..]
                .iter()
                .map(|s| parse(s, "gamma"))
                .collect::<anyhow::Result<Vec<f64>>>()?,
        });
    }
    Ok(records)
}
