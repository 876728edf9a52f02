use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dump::ProbeSample;
use super::metrics::{cka_rbf, effort, spectrum};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffortRow {
    pub block: String,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CkaRow {
    pub stage_a: String,
    pub stage_b: String,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpectrumRow {
    pub stage: String,
    pub index: usize,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Effort,
    Cka,
    Spectrum,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Effort, Metric::Cka, Metric::Spectrum];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Effort => "effort",
            Metric::Cka => "cka",
            Metric::Spectrum => "spectrum",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Metric::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown metric '{s}' (effort, cka, spectrum)")))
    }
}

/// Per-sample metrics aggregated across samples. Empty tables mean the
/// metric was not requested.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProbeReport {
    pub samples: usize,
    pub effort: Vec<EffortRow>,
    /// Every ordered stage pair, row-major over the stage list.
    pub cka: Vec<CkaRow>,
    pub spectrum: Vec<SpectrumRow>,
}

impl ProbeReport {
    pub fn effort_of(&self, block: &str) -> Option<&EffortRow> {
        self.effort.iter().find(|r| r.block == block)
    }

    pub fn cka_of(&self, a: &str, b: &str) -> Option<f64> {
        self.cka
            .iter()
            .find(|r| r.stage_a == a && r.stage_b == b)
            .map(|r| r.mean)
    }

    pub fn spectrum_of(&self, stage: &str) -> Vec<&SpectrumRow> {
        self.spectrum.iter().filter(|r| r.stage == stage).collect()
    }
}

/// Mean and population standard deviation, summed in order.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_consistent(samples: &[ProbeSample]) -> Result<()> {
    let first = samples
        .first()
        .ok_or_else(|| Error::Data("aggregate needs at least one sample".into()))?;
    for s in &samples[1..] {
        if s.stage_names() != first.stage_names() || s.block_names() != first.block_names() {
            return Err(Error::Data(format!(
                "sample {} has a different stage set from {}",
                s.id, first.id
            )));
        }
        for ((n, a), (_, b)) in s.stages.iter().zip(&first.stages) {
            if a.shape() != b.shape() {
                return Err(Error::Data(format!(
                    "stage {n} of sample {} has shape {:?}, expected {:?}",
                    s.id,
                    a.shape(),
                    b.shape()
                )));
            }
        }
        for ((n, a, _), (_, b, _)) in s.blocks.iter().zip(&first.blocks) {
            if a.shape() != b.shape() {
                return Err(Error::Data(format!(
                    "block {n} of sample {} has shape {:?}, expected {:?}",
                    s.id,
                    a.shape(),
                    b.shape()
                )));
            }
        }
    }
    Ok(())
}

/// Computes the requested metrics for every sample in parallel and reduces
/// them in sample order.
pub fn aggregate(samples: &[ProbeSample], metrics: &[Metric], theta: f64) -> Result<ProbeReport> {
    check_consistent(samples)?;
    let first = &samples[0];
    let mut report = ProbeReport {
        samples: samples.len(),
        ..Default::default()
    };

    if metrics.contains(&Metric::Effort) {
        let per: Vec<Vec<f64>> = samples
            .par_iter()
            .map(|s| s.blocks.iter().map(|(_, a, b)| effort(a, b)).collect())
            .collect::<Result<_>>()?;
        for (j, (name, _, _)) in first.blocks.iter().enumerate() {
            let vals: Vec<f64> = per.iter().map(|v| v[j]).collect();
            let (mean, std) = mean_std(&vals);
            report.effort.push(EffortRow {
                block: name.clone(),
                mean,
                std,
            });
        }
    }

    if metrics.contains(&Metric::Cka) {
        let s = first.stages.len();
        let per: Vec<Vec<f64>> = samples
            .par_iter()
            .map(|smp| {
                let mut m = vec![1.0; s * s];
                for a in 0..s {
                    for b in a + 1..s {
                        let v = cka_rbf(&smp.stages[a].1, &smp.stages[b].1, theta)?;
                        m[a * s + b] = v;
                        m[b * s + a] = v;
                    }
                }
                Ok(m)
            })
            .collect::<Result<_>>()?;
        for a in 0..s {
            for b in 0..s {
                let vals: Vec<f64> = per.iter().map(|m| m[a * s + b]).collect();
                report.cka.push(CkaRow {
                    stage_a: first.stages[a].0.clone(),
                    stage_b: first.stages[b].0.clone(),
                    mean: mean_std(&vals).0,
                });
            }
        }
    }

    if metrics.contains(&Metric::Spectrum) {
        let per: Vec<Vec<Vec<f64>>> = samples
            .par_iter()
            .map(|s| s.stages.iter().map(|(_, t)| spectrum(t)).collect())
            .collect::<Result<_>>()?;
        for (j, (name, _)) in first.stages.iter().enumerate() {
            for i in 0..per[0][j].len() {
                let vals: Vec<f64> = per.iter().map(|v| v[j][i]).collect();
                let (mean, std) = mean_std(&vals);
                report.spectrum.push(SpectrumRow {
                    stage: name.clone(),
                    index: i,
                    mean,
                    std,
                });
            }
        }
    }
    Ok(report)
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, rows: &S) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(rows)?).map_err(|e| Error::io(path, e))
}

/// Writes `<metric>.csv` and `<metric>.json` for each non-empty table.
pub fn write_report(dir: &Path, report: &ProbeReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !report.effort.is_empty() {
        write_csv(
            &dir.join("effort.csv"),
            &["block", "mean", "std"],
            report
                .effort
                .iter()
                .map(|r| vec![r.block.clone(), fmt(r.mean), fmt(r.std)]),
        )?;
        write_json(&dir.join("effort.json"), &report.effort)?;
    }
    if !report.cka.is_empty() {
        write_csv(
            &dir.join("cka.csv"),
            &["stage_a", "stage_b", "mean"],
            report
                .cka
                .iter()
                .map(|r| vec![r.stage_a.clone(), r.stage_b.clone(), fmt(r.mean)]),
        )?;
        write_json(&dir.join("cka.json"), &report.cka)?;
    }
    if !report.spectrum.is_empty() {
        write_csv(
            &dir.join("spectrum.csv"),
            &["stage", "index", "mean", "std"],
            report.spectrum.iter().map(|r| {
                vec![r.stage.clone(), r.index.to_string(), fmt(r.mean), fmt(r.std)]
            }),
        )?;
        write_json(&dir.join("spectrum.json"), &report.spectrum)?;
    }
    Ok(())
}

fn read_rows<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Reads back whatever CSV tables exist in `dir`. The sample count is not
/// stored in the tables and is returned as 0.
pub fn read_report(dir: &Path) -> Result<ProbeReport> {
    Ok(ProbeReport {
        samples: 0,
        effort: read_rows(&dir.join("effort.csv"))?,
        cka: read_rows(&dir.join("cka.csv"))?,
        spectrum: read_rows(&dir.join("spectrum.csv"))?,
    })
}
