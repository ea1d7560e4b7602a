use std::path::Path;

use crate::error::{Error, Result};

/// Queries from a UTF-8 file: one per line, or the `sentence` column when the
/// file name ends in `.csv`. Blank entries are skipped.
pub fn load_queries(path: &Path) -> Result<Vec<String>> {
    let is_csv = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let queries = if is_csv {
        let mut reader = csv::Reader::from_path(path).map_err(csv_error)?;
        let column = reader
            .headers()
            .map_err(csv_error)?
            .iter()
            .position(|h| h.trim() == "sentence")
            .ok_or_else(|| {
                Error::validation(format!("{} has no \"sentence\" column", path.display()))
            })?;
        let mut out = Vec::new();
        for record in reader.records() {
            let record = record.map_err(csv_error)?;
            out.push(record.get(column).unwrap_or_default().trim().to_string());
        }
        out
    } else {
        std::fs::read_to_string(path)?
            .lines()
            .map(|l| l.trim().to_string())
            .collect()
    };
    Ok(queries.into_iter().filter(|q| !q.is_empty()).collect())
}

/// One word per line; blank lines skipped.
pub fn load_wordlist(path: &Path) -> Result<Vec<String>> {
    let words: Vec<String> = std::fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect();
    if words.is_empty() {
        return Err(Error::validation(format!(
            "{} lists no words",
            path.display()
        )));
    }
    Ok(words)
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::validation(format!("malformed csv: {other:?}")),
    }
}
