//! Columnar (CSV) files for pseudo-labeled data sets and audit trajectories.
//!
//! Floats are written in shortest round-trip form, so reading a file back
//! reproduces every value bit for bit.

use std::path::{Path, PathBuf};

use semidiff_core::mdp::Trajectory;
use semidiff_core::pipeline::{Provenance, PseudoDataset};

use crate::error::LabError;

/// Sidecar holding the provenance of a pseudo-data CSV.
pub fn provenance_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".provenance.json");
    PathBuf::from(p)
}

fn header(d_x: usize, d_y: usize) -> Vec<String> {
    let mut h = vec!["task".to_string()];
    h.extend((0..d_y).map(|i| format!("y_{i}")));
    h.extend((0..d_x).map(|i| format!("x_{i}")));
    h.push("accepted".into());
    h.push("retries".into());
    h
}

/// Writes `task, y_*, x_*, accepted, retries` rows plus the provenance
/// sidecar.
pub fn write_pseudo(data: &PseudoDataset, path: &Path) -> Result<(), LabError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header(data.d_x, data.d_y))?;
    for i in 0..data.len() {
        let mut row = vec![data.task.to_string()];
        row.extend(data.ys[i * data.d_y..(i + 1) * data.d_y].iter().map(f64::to_string));
        row.extend(data.xs[i * data.d_x..(i + 1) * data.d_x].iter().map(f64::to_string));
        row.push(u8::from(data.accepted[i]).to_string());
        row.push(data.retries[i].to_string());
        w.write_record(&row)?;
    }
    w.flush().map_err(LabError::io(path))?;
    let side = provenance_path(path);
    let json = serde_json::to_string_pretty(&data.provenance).expect("provenance serializes");
    std::fs::write(&side, json).map_err(LabError::io(side))
}

pub fn read_pseudo(path: &Path) -> Result<PseudoDataset, LabError> {
    let mut r = csv::Reader::from_path(path)?;
    let h = r.headers()?.clone();
    let d_y = h.iter().filter(|c| c.starts_with("y_")).count();
    let d_x = h.iter().filter(|c| c.starts_with("x_")).count();
    let expected = header(d_x, d_y);
    if h.iter().ne(expected.iter().map(String::as_str)) {
        return Err(LabError::format(path, format!("unexpected columns {h:?}")));
    }
    let side = provenance_path(path);
    let text = std::fs::read_to_string(&side).map_err(LabError::io(&side))?;
    let provenance: Provenance = serde_json::from_str(&text).map_err(|e| LabError::format(&side, e.to_string()))?;
    let mut out = PseudoDataset {
        task: 0,
        d_x,
        d_y,
        xs: vec![],
        ys: vec![],
        accepted: vec![],
        retries: vec![],
        provenance,
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| LabError::format(path, format!("{s:?}: {e}")));
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let task: usize = rec[0].parse().map_err(|e| LabError::format(path, format!("task: {e}")))?;
        if i == 0 {
            out.task = task;
        } else if task != out.task {
            return Err(LabError::format(path, "rows from several tasks"));
        }
        for j in 0..d_y {
            out.ys.push(num(&rec[1 + j])?);
        }
        for j in 0..d_x {
            out.xs.push(num(&rec[1 + d_y + j])?);
        }
        out.accepted.push(match &rec[1 + d_y + d_x] {
            "1" => true,
            "0" => false,
            other => return Err(LabError::format(path, format!("accepted flag {other:?}"))),
        });
        out.retries.push(rec[2 + d_y + d_x].parse().map_err(|e| LabError::format(path, format!("retries: {e}")))?);
    }
    Ok(out)
}

/// Writes `rollout, t, s_*, a_*, reward` rows.
pub fn write_trajectories(trajs: &[Trajectory], d_s: usize, d_a: usize, path: &Path) -> Result<(), LabError> {
    let mut w = csv::Writer::from_path(path)?;
    let mut h = vec!["rollout".to_string(), "t".into()];
    h.extend((0..d_s).map(|i| format!("s_{i}")));
    h.extend((0..d_a).map(|i| format!("a_{i}")));
    h.push("reward".into());
    w.write_record(&h)?;
    for (k, tr) in trajs.iter().enumerate() {
        for t in 0..tr.len() {
            let mut row = vec![k.to_string(), t.to_string()];
            row.extend(tr.states[t * d_s..(t + 1) * d_s].iter().map(f64::to_string));
            row.extend(tr.actions[t * d_a..(t + 1) * d_a].iter().map(f64::to_string));
            row.push(tr.rewards[t].to_string());
            w.write_record(&row)?;
        }
    }
    w.flush().map_err(LabError::io(path))
}
