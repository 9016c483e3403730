//! Analysis tables derived from a search trajectory.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use crate::netgraph::{decode_arch, flops_breakdown, FlopsBreakdown, NUM_STAGES};
use crate::search::TrajectoryRow;
use crate::{Error, Result};

/// Best-score gain credited to one kind of action.
#[derive(Clone, Debug, PartialEq)]
pub struct ActionIncrement {
    pub action: String,
    pub count: usize,
    /// Iterations whose candidate raised the best score.
    pub improvements: usize,
    pub increment: f64,
}

/// Credits every rise of the best-score column to the action of the row
/// that caused it, so the increments sum to the final best score minus the
/// initial one.
pub fn action_increments(rows: &[TrajectoryRow]) -> Result<Vec<ActionIncrement>> {
    let Some(first) = rows.first() else {
        return Err(Error::input("empty trajectory"));
    };
    if !first.best_score.is_finite() {
        return Err(Error::input("the initial row has no finite score"));
    }
    let mut by: BTreeMap<String, ActionIncrement> = BTreeMap::new();
    for w in rows.windows(2) {
        let label = w[1].action.label();
        let e = by
            .entry(label.clone())
            .or_insert(ActionIncrement { action: label, count: 0, improvements: 0, increment: 0.0 });
        e.count += 1;
        let d = w[1].best_score - w[0].best_score;
        if d > 0.0 {
            e.improvements += 1;
            e.increment += d;
        }
    }
    Ok(by.into_values().collect())
}

/// Iterations on the ancestry chain of the highest-scoring row.
pub fn best_path(rows: &[TrajectoryRow]) -> BTreeSet<usize> {
    let by_id: BTreeMap<usize, &TrajectoryRow> = rows.iter().map(|r| (r.iteration, r)).collect();
    let best = rows.iter().fold(None::<&TrajectoryRow>, |b, r| match b {
        Some(b) if b.score >= r.score => Some(b),
        _ => Some(r),
    });
    let mut path = BTreeSet::new();
    let mut cur = best;
    while let Some(r) = cur {
        if !path.insert(r.iteration) {
            break;
        }
        cur = r.parent.and_then(|p| by_id.get(&p).copied());
    }
    path
}

/// First row holding the maximum score.
pub fn best_row(rows: &[TrajectoryRow]) -> Option<&TrajectoryRow> {
    rows.iter().fold(None, |b: Option<&TrajectoryRow>, r| match b {
        Some(b) if b.score >= r.score => Some(b),
        _ => Some(r),
    })
}

/// FLOPS per backbone part of a row's student at its selected resolution.
pub fn allocation(row: &TrajectoryRow) -> Result<FlopsBreakdown> {
    let arch = decode_arch(&row.arch_encoding).map_err(|e| Error::input(format!("iteration {}: {e}", row.iteration)))?;
    let Some(res) = row.resolution else {
        return Err(Error::input(format!("iteration {} has no evaluated resolution", row.iteration)));
    };
    Ok(flops_breakdown(&arch, (res, res))?)
}

pub const ACTIONS_FILE: &str = "report_actions.csv";
pub const TEACHER_FILE: &str = "report_teacher.csv";
pub const ALLOCATION_FILE: &str = "report_allocation.csv";

pub fn write_actions<W: Write>(w: W, rows: &[TrajectoryRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["action", "count", "improvements", "score_increment"]).map_err(csv_err)?;
    for a in action_increments(rows)? {
        out.write_record([a.action, a.count.to_string(), a.improvements.to_string(), a.increment.to_string()])
            .map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// One line per iteration with the teacher's coordinates.
pub fn write_teacher_trace<W: Write>(w: W, rows: &[TrajectoryRow]) -> Result<()> {
    let path = best_path(rows);
    let mut out = csv::Writer::from_writer(w);
    let mut header: Vec<String> = vec!["iteration".into(), "action".into()];
    header.extend((1..=NUM_STAGES).map(|s| format!("depth_{s}")));
    header.extend((1..=NUM_STAGES).map(|s| format!("width_coeff_{s}")));
    header.extend(["neck_coeff", "teacher_resolution", "score", "best_score", "on_best_path"].map(String::from));
    out.write_record(&header).map_err(csv_err)?;
    for r in rows {
        let t = &r.teacher;
        let mut rec = vec![r.iteration.to_string(), r.action.label()];
        rec.extend(t.depths.iter().map(|d| d.to_string()));
        rec.extend(t.stage_coeffs.iter().map(|c| c.to_string()));
        rec.extend([
            t.neck_coeff.to_string(),
            t.resolution.to_string(),
            r.score.to_string(),
            r.best_score.to_string(),
            path.contains(&r.iteration).to_string(),
        ]);
        out.write_record(&rec).map_err(csv_err)?;
    }
    out.flush()?;
    Ok(())
}

/// Backbone FLOPS per part of the initial student and of the best one.
/// The `backbone` line is the sum of the part lines.
pub fn write_allocation<W: Write>(w: W, rows: &[TrajectoryRow]) -> Result<()> {
    let first = rows.first().ok_or_else(|| Error::input("empty trajectory"))?;
    let best = best_row(rows).expect("non-empty");
    let (a, b) = (allocation(first)?, allocation(best)?);
    let parts = |f: &FlopsBreakdown| {
        let mut v = vec![("stem".to_string(), f.stem)];
        v.extend((0..NUM_STAGES).map(|s| (format!("stage_{}", s + 1), f.stages.get(s).copied().unwrap_or(0.0))));
        v
    };
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["part", "initial_flops", "best_flops", "initial_share", "best_share"]).map_err(csv_err)?;
    for ((name, x), (_, y)) in parts(&a).into_iter().zip(parts(&b)) {
        out.write_record([
            name,
            x.to_string(),
            y.to_string(),
            (x / a.backbone()).to_string(),
            (y / b.backbone()).to_string(),
        ])
        .map_err(csv_err)?;
    }
    out.write_record(["backbone".to_string(), a.backbone().to_string(), b.backbone().to_string(), "1".into(), "1".into()])
        .map_err(csv_err)?;
    out.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::input(format!("csv: {e}"))
}
