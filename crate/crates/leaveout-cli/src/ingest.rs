//! CSV ingestion. Expected header: worker_id,firm_id,period,outcome with
//! any number of extra covariate_* columns; ids are opaque strings.

use std::collections::HashMap;
use std::path::Path;

use leaveout_core::{Obs, Panel};

use crate::error::{CliError, Result};

struct Layout {
    worker: usize,
    firm: usize,
    period: usize,
    outcome: usize,
    covariates: Vec<usize>,
}

fn layout_from_header(header: &csv::StringRecord) -> Result<Layout> {
    let find = |name: &str| -> Result<usize> {
        header
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| CliError::MissingColumn(name.to_string()))
    };
    let covariates = header
        .iter()
        .enumerate()
        .filter(|(_, h)| h.trim().starts_with("covariate_"))
        .map(|(i, _)| i)
        .collect();
    Ok(Layout {
        worker: find("worker_id")?,
        firm: find("firm_id")?,
        period: find("period")?,
        outcome: find("outcome")?,
        covariates,
    })
}

/// Read and validate a panel. Duplicate (worker, period) pairs are rejected
/// with both offending line numbers.
pub fn read_panel(path: &Path) -> Result<Panel> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)
        .map_err(|e| CliError::Parse { line: 1, message: e.to_string() })?;
    let layout = layout_from_header(reader.headers().map_err(|e| CliError::Parse {
        line: 1,
        message: e.to_string(),
    })?)?;

    let mut rows = Vec::new();
    let mut seen: HashMap<(String, i64), usize> = HashMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| CliError::Parse {
            line: e.position().map(|p| p.line() as usize).unwrap_or(0),
            message: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line() as usize).unwrap_or(0);
        let field = |idx: usize| -> &str { record.get(idx).unwrap_or("") };
        let worker = field(layout.worker).to_string();
        let firm = field(layout.firm).to_string();
        if worker.is_empty() || firm.is_empty() {
            return Err(CliError::Parse { line, message: "empty worker or firm id".into() });
        }
        let period: i64 = field(layout.period).parse().map_err(|_| CliError::Parse {
            line,
            message: format!("bad period '{}'", field(layout.period)),
        })?;
        let outcome: f64 = field(layout.outcome).parse().map_err(|_| CliError::Parse {
            line,
            message: format!("bad outcome '{}'", field(layout.outcome)),
        })?;
        let mut covariates = Vec::with_capacity(layout.covariates.len());
        for &c in &layout.covariates {
            covariates.push(field(c).parse().map_err(|_| CliError::Parse {
                line,
                message: format!("bad covariate '{}'", field(c)),
            })?);
        }
        if let Some(&first) = seen.get(&(worker.clone(), period)) {
            return Err(CliError::DuplicateRow { worker, period, first, second: line });
        }
        seen.insert((worker.clone(), period), line);
        rows.push(Obs { worker, firm, period, outcome, covariates });
    }
    Ok(Panel::from_records(rows)?)
}

/// Write a panel back out in the input schema; prune emits its surviving
/// sample this way.
pub fn write_panel(panel: &Panel, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    let n_cov = panel.n_covariates();
    let mut header = vec!["worker_id".to_string(), "firm_id".into(), "period".into(), "outcome".into()];
    for c in 0..n_cov {
        header.push(format!("covariate_{c}"));
    }
    writer.write_record(&header)?;
    for obs in &panel.rows {
        let mut rec = vec![
            obs.worker.clone(),
            obs.firm.clone(),
            obs.period.to_string(),
            format!("{:.17e}", obs.outcome),
        ];
        for v in &obs.covariates {
            rec.push(format!("{v:.17e}"));
        }
        writer.write_record(&rec)?;
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_tmp(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f
    }

    #[test]
    fn test_four_line_csv_two_workers() {
        let f = write_tmp(
            "worker_id,firm_id,period,outcome\nw1,a,1,1.0\nw1,b,2,2.0\nw2,b,1,0.5\nw2,a,2,1.5\n",
        );
        let panel = read_panel(f.path()).unwrap();
        assert_eq!(panel.n_workers(), 2);
        assert_eq!(panel.rows.len(), 4);
    }

    #[test]
    fn test_duplicate_worker_period_reports_both_lines() {
        let f = write_tmp("worker_id,firm_id,period,outcome\nw1,a,1,1.0\nw1,a,1,2.0\n");
        match read_panel(f.path()) {
            Err(CliError::DuplicateRow { worker, period, first, second }) => {
                assert_eq!(worker, "w1");
                assert_eq!(period, 1);
                assert_eq!(first, 2);
                assert_eq!(second, 3);
            }
            other => panic!("expected duplicate error, got {other:?}"),
        }
    }

    #[test]
    fn test_header_only_is_empty_panel() {
        let f = write_tmp("worker_id,firm_id,period,outcome\n");
        match read_panel(f.path()) {
            Err(CliError::Core(leaveout_core::Error::EmptyPanel)) => {}
            other => panic!("expected empty panel, got {other:?}"),
        }
    }

    #[test]
    fn test_missing_column_named() {
        let f = write_tmp("worker_id,firm_id,outcome\nw1,a,1.0\n");
        match read_panel(f.path()) {
            Err(CliError::MissingColumn(c)) => assert_eq!(c, "period"),
            other => panic!("expected missing column, got {other:?}"),
        }
    }

    #[test]
    fn test_bad_number_carries_line() {
        let f = write_tmp("worker_id,firm_id,period,outcome\nw1,a,1,1.0\nw1,b,2,sideways\n");
        match read_panel(f.path()) {
            Err(CliError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn test_covariate_columns_picked_up() {
        let f = write_tmp(
            "worker_id,firm_id,period,outcome,covariate_0\nw1,a,1,1.0,0.3\nw1,b,2,2.0,0.4\n",
        );
        let panel = read_panel(f.path()).unwrap();
        assert_eq!(panel.n_covariates(), 1);
        assert_eq!(panel.rows[1].covariates[0], 0.4);
    }

    #[test]
    fn test_round_trip_preserves_panel() {
        let f = write_tmp(
            "worker_id,firm_id,period,outcome\nw1,a,1,1.25\nw1,b,2,2.5\nw2,b,1,0.5\nw2,a,2,1.5\n",
        );
        let panel = read_panel(f.path()).unwrap();
        let out = tempfile::NamedTempFile::new().unwrap();
        write_panel(&panel, out.path()).unwrap();
        let back = read_panel(out.path()).unwrap();
        assert_eq!(back.rows.len(), panel.rows.len());
        for (a, b) in back.rows.iter().zip(&panel.rows) {
            assert_eq!(a.worker, b.worker);
            assert_eq!(a.firm, b.firm);
            assert_eq!(a.outcome, b.outcome);
        }
    }
}
