//! CSV reports and line-oriented training logs.

use std::fmt::Write as _;

use hazeloop_core::pipeline::{EpochLog, EvalReport, LoopTrace};

use crate::error::{Error, Result};

pub const LOG_HEADER: &str = "epoch,split,l1,ratio,mcr,down,total,ordering_fraction";
pub const TRACE_HEADER: &str = "iteration,task,change,task_loss,psnr,ssim";
/// Row label of the aggregate row.
pub const MEAN_ROW: &str = "mean";

/// Floats use the shortest representation that parses back exactly.
fn num(v: f64) -> String {
    format!("{v}")
}

fn opt(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

pub fn log_line(l: &EpochLog) -> String {
    format!(
        "{},{},{},{},{},{},{},{}",
        l.epoch,
        l.split,
        num(l.l1),
        num(l.ratio),
        num(l.mcr),
        num(l.down),
        num(l.total),
        opt(l.ordering_fraction)
    )
}

/// `image_id` plus one column per metric, then the aggregate row.
pub fn report_csv(r: &EvalReport) -> String {
    let mut s = String::from("image_id");
    for c in &r.columns {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    let mut row = |id: &str, vals: &[f64]| {
        s.push_str(id);
        for v in vals {
            s.push(',');
            s.push_str(&num(*v));
        }
        s.push('\n');
    };
    for (id, vals) in &r.rows {
        row(id, vals);
    }
    row(MEAN_ROW, &r.aggregate());
    s
}

/// Inverse of [`report_csv`]; the aggregate row is dropped.
pub fn parse_report_csv(text: &str) -> Result<EvalReport> {
    let bad = |m: String| Error::Config(format!("malformed report: {m}"));
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let mut cols = header.split(',');
    if cols.next() != Some("image_id") {
        return Err(bad("first column must be image_id".into()));
    }
    let columns: Vec<String> = cols.map(String::from).collect();
    let mut rows = Vec::new();
    for line in lines {
        let mut f = line.split(',');
        let id = f.next().unwrap_or_default().to_string();
        let vals: Vec<f64> = f
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("{id}: {e}")))?;
        if vals.len() != columns.len() {
            return Err(bad(format!("{id}: {} values for {} columns", vals.len(), columns.len())));
        }
        if id != MEAN_ROW {
            rows.push((id, vals));
        }
    }
    Ok(EvalReport { columns, rows })
}

pub fn trace_csv(t: &LoopTrace) -> String {
    let mut s = format!("# instruction: {}\n{TRACE_HEADER}\n", t.instruction);
    for st in &t.steps {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{}",
            st.iteration,
            t.task.name(),
            num(st.change),
            opt(st.task_loss),
            opt(st.psnr),
            opt(st.ssim)
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_aggregate() {
        let r = EvalReport {
            columns: vec!["psnr".into(), "ssim".into()],
            rows: vec![("a".into(), vec![20.0, 0.5]), ("b".into(), vec![0.1 + 0.2, 1.0 / 3.0])],
        };
        let text = report_csv(&r);
        assert!(text.starts_with("image_id,psnr,ssim\n"));
        assert_eq!(text.lines().count(), 4);
        let last = text.lines().last().unwrap();
        assert!(last.starts_with("mean,"));
        let mean_psnr: f64 = last.split(',').nth(1).unwrap().parse().unwrap();
        assert!((mean_psnr - (20.0 + 0.1 + 0.2) / 2.0).abs() < 1e-12);
        assert_eq!(parse_report_csv(&text).unwrap(), r);
    }

    #[test]
    fn log_line_layout() {
        let l = EpochLog {
            epoch: 3,
            split: "train",
            l1: 0.25,
            ratio: 0.5,
            mcr: 0.0,
            down: 0.0,
            total: 0.3,
            ordering_fraction: None,
        };
        assert_eq!(log_line(&l), "3,train,0.25,0.5,0,0,0.3,");
        assert_eq!(LOG_HEADER.split(',').count(), log_line(&l).split(',').count());
    }
}
