//! Result artifacts. Every file is written to a temporary sibling and then
//! renamed into place.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::evaluate::ScenarioSeries;
use crate::error::{Error, Result};
use crate::grid::FaultScenario;
use crate::integrators::TimeGrid;
use crate::neudye::data::{LeftLimit, ScenarioData, TrainingSet};
use crate::neudye::EpochRecord;

pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let s = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&s)?)
}

/// Round-trip exact float formatting.
fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// CSV with header `t,<names...>` and one row per sample.
pub fn write_columns_csv(path: &Path, names: &[String], t: &[f64], row: impl Fn(usize) -> Vec<f64>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["t".to_string()];
    header.extend(names.iter().cloned());
    w.write_record(&header)?;
    for (i, ti) in t.iter().enumerate() {
        let mut rec = vec![fmt(*ti)];
        rec.extend(row(i).into_iter().map(fmt));
        w.write_record(&rec)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Reads a CSV written by [`write_columns_csv`]: header and numeric rows.
pub fn read_columns_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let row = rec
            .iter()
            .map(|f| f.parse::<f64>().map_err(|e| Error::Data(format!("{}: {e}", path.display()))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((header, rows))
}

pub fn write_loss_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut s = String::from("epoch,loss,grad_norm\n");
    for r in history {
        let _ = writeln!(s, "{},{},{}", r.epoch, fmt(r.loss), fmt(r.grad_norm));
    }
    write_atomic(path, s.as_bytes())
}

pub fn write_series(dir: &Path, series: &ScenarioSeries) -> Result<PathBuf> {
    let path = dir.join(format!("scenario_{}.csv", series.id));
    write_columns_csv(&path, &series.names, &series.t, |i| {
        series.values.iter().map(|v| v[i]).collect()
    })?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ScenarioMeta {
    file: String,
    scenario: FaultScenario,
    grid: TimeGrid,
    events: Vec<usize>,
    n_in: usize,
    n_ex: usize,
    n_features: usize,
    n_boundary: usize,
    equilibrium: Vec<f64>,
    left_limits: Vec<LeftLimit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Manifest {
    names: Vec<String>,
    scenarios: Vec<ScenarioMeta>,
}

/// Writes `dataset/<split>_<id>.csv` for every scenario plus
/// `dataset/<split>_manifest.json`. `names` label the columns
/// `[x_in; x_ex; s_in; boundary voltages]`.
pub fn write_dataset(dir: &Path, split: &str, data: &TrainingSet, names: &[String]) -> Result<()> {
    let mut metas = Vec::new();
    for sc in &data.scenarios {
        let file = format!("{split}_{}.csv", sc.scenario.id);
        let t: Vec<f64> = (0..sc.len()).map(|i| sc.grid.t(i)).collect();
        write_columns_csv(&dir.join(&file), names, &t, |i| {
            let mut row = sc.x_in(i).to_vec();
            row.extend_from_slice(sc.x_ex(i));
            row.extend_from_slice(sc.s_in(i));
            row.extend_from_slice(sc.boundary_voltage(i));
            row
        })?;
        metas.push(ScenarioMeta {
            file,
            scenario: sc.scenario,
            grid: sc.grid,
            events: sc.events.clone(),
            n_in: sc.n_in,
            n_ex: sc.n_ex,
            n_features: sc.n_features,
            n_boundary: sc.n_boundary(),
            equilibrium: sc.equilibrium.clone(),
            left_limits: sc.left_limits.clone(),
        });
    }
    write_json(
        &dir.join(format!("{split}_manifest.json")),
        &Manifest {
            names: names.to_vec(),
            scenarios: metas,
        },
    )
}

pub fn dataset_exists(dir: &Path, split: &str) -> bool {
    dir.join(format!("{split}_manifest.json")).exists()
}

pub fn read_dataset(dir: &Path, split: &str) -> Result<TrainingSet> {
    let manifest: Manifest = read_json(&dir.join(format!("{split}_manifest.json")))?;
    let mut out = Vec::new();
    for m in manifest.scenarios {
        let (_, rows) = read_columns_csv(&dir.join(&m.file))?;
        let width = 1 + m.n_in + m.n_ex + m.n_features + m.n_boundary;
        if rows.len() != m.grid.len() || rows.iter().any(|r| r.len() != width) {
            return Err(Error::Data(format!("{} does not match its manifest", m.file)));
        }
        let col = |a: usize, n: usize| -> Vec<f64> { rows.iter().flat_map(|r| r[a..a + n].to_vec()).collect() };
        let o_ex = 1 + m.n_in;
        let o_s = o_ex + m.n_ex;
        let o_b = o_s + m.n_features;
        out.push(ScenarioData {
            scenario: m.scenario,
            grid: m.grid,
            events: m.events,
            n_in: m.n_in,
            n_ex: m.n_ex,
            n_features: m.n_features,
            x_in: col(1, m.n_in),
            x_ex: col(o_ex, m.n_ex),
            s_in: col(o_s, m.n_features),
            boundary_voltage: col(o_b, m.n_boundary),
            equilibrium: m.equilibrium,
            left_limits: m.left_limits,
        });
    }
    TrainingSet::new(out)
}
