//! Wide-format CSV: `id`, then per stage `x{j}_<name>...` and `a{j}`, then `y`.

use std::io::{Read, Write};
use std::path::Path;

use crate::data::{Dataset, StageRecord, Subject};
use crate::error::{GestError, Result};

fn parse_err(line: usize, column: usize, message: impl Into<String>) -> GestError {
    GestError::Parse {
        line,
        column,
        message: message.into(),
    }
}

#[derive(Debug)]
enum Col {
    Covariate { stage: usize, index: usize },
    Treatment(usize),
}

/// Works out the stage layout from the header. Covariates must precede their
/// stage's treatment column and stages must appear in order.
fn layout(header: &csv::StringRecord) -> Result<(Vec<Vec<String>>, Vec<Col>)> {
    let cols: Vec<&str> = header.iter().collect();
    if cols.first().map(|c| c.trim()) != Some("id") {
        return Err(parse_err(1, 1, "first column must be `id`"));
    }
    if cols.last().map(|c| c.trim()) != Some("y") || cols.len() < 3 {
        return Err(parse_err(1, cols.len(), "last column must be `y`"));
    }
    let mut names: Vec<Vec<String>> = Vec::new();
    let mut order = Vec::new();
    let mut current = 1;
    let mut closed = false;
    for (k, raw) in cols[1..cols.len() - 1].iter().enumerate() {
        let col = k + 2;
        let c = raw.trim();
        let bad = || parse_err(1, col, format!("unexpected column `{c}`"));
        if let Some(rest) = c.strip_prefix('a') {
            let stage: usize = rest.parse().map_err(|_| bad())?;
            if stage != current || closed {
                return Err(parse_err(1, col, format!("treatment `{c}` out of order, expected a{current}")));
            }
            while names.len() < stage {
                names.push(Vec::new());
            }
            order.push(Col::Treatment(stage));
            closed = true;
        } else if let Some(rest) = c.strip_prefix('x') {
            let (stage, name) = rest.split_once('_').ok_or_else(bad)?;
            let stage: usize = stage.parse().map_err(|_| bad())?;
            if name.is_empty() {
                return Err(bad());
            }
            if closed {
                current += 1;
                closed = false;
            }
            if stage != current {
                return Err(parse_err(1, col, format!("covariate `{c}` out of order, expected stage {current}")));
            }
            while names.len() < stage {
                names.push(Vec::new());
            }
            if names[stage - 1].iter().any(|n| n == name) {
                return Err(parse_err(1, col, format!("duplicate column `{c}`")));
            }
            names[stage - 1].push(name.to_string());
            order.push(Col::Covariate {
                stage,
                index: names[stage - 1].len() - 1,
            });
        } else {
            return Err(bad());
        }
    }
    if !closed {
        return Err(parse_err(1, cols.len() - 1, format!("stage {current} has no treatment column")));
    }
    Ok((names, order))
}

/// Reads a dataset from wide-format CSV text.
pub fn read_csv<R: Read>(reader: R) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(false).trim(csv::Trim::All).from_reader(reader);
    let mut records = rdr.records();
    let header = match records.next() {
        None => return Err(parse_err(1, 1, "empty input, expected a header row")),
        Some(r) => r.map_err(|e| csv_err(&e))?,
    };
    let (names, order) = layout(&header)?;
    let width = header.len();
    let mut ids = Vec::new();
    let mut subjects = Vec::new();
    for (k, rec) in records.enumerate() {
        let rec = rec.map_err(|e| csv_err(&e))?;
        let line = rec.position().map_or(k + 2, |p| p.line() as usize);
        if rec.len() != width {
            return Err(parse_err(line, rec.len().min(width) + 1, format!("expected {width} fields, found {}", rec.len())));
        }
        let num = |c: usize| -> Result<f64> {
            let s = &rec[c];
            s.parse::<f64>()
                .map_err(|_| parse_err(line, c + 1, format!("`{s}` is not a number")))
        };
        let mut stages: Vec<StageRecord> = names
            .iter()
            .map(|n| StageRecord {
                covariates: vec![0.0; n.len()],
                treatment: 0.0,
            })
            .collect();
        for (c, col) in order.iter().enumerate() {
            let v = num(c + 1)?;
            match col {
                Col::Covariate { stage, index } => stages[stage - 1].covariates[*index] = v,
                Col::Treatment(stage) => stages[stage - 1].treatment = v,
            }
        }
        ids.push(rec[0].to_string());
        subjects.push(Subject {
            stages,
            outcome: num(width - 1)?,
        });
    }
    if subjects.is_empty() {
        return Err(parse_err(2, 1, "no data rows"));
    }
    Dataset::new(names, subjects, Some(ids))
}

fn csv_err(e: &csv::Error) -> GestError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    parse_err(line, 1, e.to_string())
}

pub fn read_csv_path(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let f = std::fs::File::open(path).map_err(|e| GestError::Io(format!("{}: {e}", path.display())))?;
    read_csv(f)
}

/// Header row matching [`write_csv`].
pub fn header(ds: &Dataset) -> Vec<String> {
    let mut h = vec!["id".to_string()];
    for (j, names) in ds.covariate_names.iter().enumerate() {
        h.extend(names.iter().map(|n| format!("x{}_{n}", j + 1)));
        h.push(format!("a{}", j + 1));
    }
    h.push("y".into());
    h
}

/// Writes a dataset; floats use the shortest representation that reads
/// back to the same value.
pub fn write_csv<W: Write>(ds: &Dataset, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let io = |e: csv::Error| GestError::Io(e.to_string());
    w.write_record(header(ds)).map_err(io)?;
    for (id, s) in ds.ids.iter().zip(&ds.subjects) {
        let mut row = vec![id.clone()];
        for st in &s.stages {
            row.extend(st.covariates.iter().map(|v| v.to_string()));
            row.push(st.treatment.to_string());
        }
        row.push(s.outcome.to_string());
        w.write_record(&row).map_err(io)?;
    }
    w.flush().map_err(|e| GestError::Io(e.to_string()))
}

pub fn write_csv_path(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let f = std::fs::File::create(path).map_err(|e| GestError::Io(format!("{}: {e}", path.display())))?;
    write_csv(ds, f)
}
