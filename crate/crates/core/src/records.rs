//! Line-oriented CSV intake shared by every input file format.
//!
//! Files carry no header row; lines starting with `#` and blank lines are
//! skipped. Malformed lines are collected rather than fatal until the error
//! cap is exceeded.

use std::io::Read;

use crate::error::{Error, LineError, Result};

/// Number of malformed lines tolerated before a parse is aborted.
pub const DEFAULT_ERROR_CAP: usize = 100;

/// Successfully parsed items plus the lines that were rejected.
#[derive(Debug, Clone)]
pub struct Parsed<T> {
    pub items: Vec<T>,
    pub errors: Vec<LineError>,
}

impl<T> Parsed<T> {
    /// Fails on the first rejected line, if any.
    pub fn strict(self) -> Result<Vec<T>> {
        match self.errors.into_iter().next() {
            Some(e) => Err(Error::Line(e)),
            None => Ok(self.items),
        }
    }
}

pub(crate) fn read_records<R, T, F>(reader: R, error_cap: usize, mut parse: F) -> Result<Parsed<T>>
where
    R: Read,
    F: FnMut(&csv::StringRecord) -> std::result::Result<T, String>,
{
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);

    let mut items = Vec::new();
    let mut errors = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = rdr.position().line();
        let outcome = match rdr.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) if record.get(0).is_some_and(|f| f.starts_with('#')) => continue,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                parse(&record).map_err(|message| LineError { line, message })
            }
            Err(e) => match e.kind() {
                csv::ErrorKind::Io(_) => return Err(Error::Io(std::io::Error::other(e))),
                _ => Err(LineError {
                    line: e.position().map_or(line, |p| p.line()),
                    message: e.to_string(),
                }),
            },
        };
        match outcome {
            Ok(item) => items.push(item),
            Err(err) => {
                errors.push(err);
                if errors.len() > error_cap {
                    return Err(Error::TooManyErrors {
                        count: errors.len(),
                        first: errors.swap_remove(0),
                    });
                }
            }
        }
    }
    Ok(Parsed { items, errors })
}

pub(crate) fn expect_fields(
    record: &csv::StringRecord,
    n: usize,
) -> std::result::Result<(), String> {
    if record.len() != n {
        return Err(format!("expected {n} fields, found {}", record.len()));
    }
    Ok(())
}

pub(crate) fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    what: &str,
) -> std::result::Result<T, String> {
    let raw = &record[idx];
    raw.parse()
        .map_err(|_| format!("malformed {what}: {raw:?}"))
}

/// Parses a finite float; an empty field yields `None`.
pub(crate) fn parse_opt_f64(
    record: &csv::StringRecord,
    idx: usize,
    what: &str,
) -> std::result::Result<Option<f64>, String> {
    if record[idx].is_empty() {
        return Ok(None);
    }
    let v: f64 = parse_field(record, idx, what)?;
    if !v.is_finite() {
        return Err(format!("non-finite {what}: {v}"));
    }
    Ok(Some(v))
}
