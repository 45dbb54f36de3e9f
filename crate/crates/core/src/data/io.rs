use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Entry, SparseExpressionMatrix, Stage};
use crate::error::{Error, Result};

/// Reads the coordinate text format:
///
/// ```text
/// n_cells n_genes n_entries
/// cell gene value
/// ...
/// ```
///
/// Indices are 0-based. The stage is inferred: a file whose values are all
/// integers loads as raw counts, anything else as normalized.
pub fn load_matrix(path: impl AsRef<Path>) -> Result<SparseExpressionMatrix> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_matrix(&text)
}

pub fn parse_matrix(text: &str) -> Result<SparseExpressionMatrix> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());

    let (hline, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        msg: "missing header".into(),
    })?;
    let dims: Vec<usize> = header
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| Error::Parse {
            line: hline,
            msg: format!("bad header `{header}`: {e}"),
        })?;
    let [n_cells, n_genes, n_entries] = dims[..] else {
        return Err(Error::Parse {
            line: hline,
            msg: format!("header must be `n_cells n_genes n_entries`, got `{header}`"),
        });
    };

    let mut entries = Vec::with_capacity(n_entries);
    for (line, l) in lines {
        let fields: Vec<&str> = l.split_whitespace().collect();
        let bad = |msg: String| Error::Parse { line, msg };
        if fields.len() != 3 {
            return Err(bad(format!("expected `cell gene value`, got `{l}`")));
        }
        let cell = fields[0]
            .parse::<usize>()
            .map_err(|e| bad(format!("cell index `{}`: {e}", fields[0])))?;
        let gene = fields[1]
            .parse::<usize>()
            .map_err(|e| bad(format!("gene index `{}`: {e}", fields[1])))?;
        let value = fields[2]
            .parse::<f64>()
            .map_err(|e| bad(format!("value `{}`: {e}", fields[2])))?;
        entries.push(Entry { cell, gene, value });
    }
    if entries.len() != n_entries {
        return Err(Error::Parse {
            line: hline,
            msg: format!(
                "header declares {n_entries} entries, found {}",
                entries.len()
            ),
        });
    }
    let stage = if entries.iter().all(|e| e.value.fract() == 0.0) {
        Stage::RawCounts
    } else {
        Stage::Normalized
    };
    SparseExpressionMatrix::new(n_cells, n_genes, entries, stage)
}

/// Serializes in the coordinate text format. Values use the shortest
/// representation that round-trips exactly.
pub fn write_matrix(m: &SparseExpressionMatrix) -> String {
    let mut out = String::with_capacity(16 * (m.n_entries() + 1));
    let _ = writeln!(out, "{} {} {}", m.n_cells(), m.n_genes(), m.n_entries());
    for e in m.entries() {
        let _ = writeln!(out, "{} {} {}", e.cell, e.gene, e.value);
    }
    out
}

pub fn save_matrix(m: &SparseExpressionMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, write_matrix(m)).map_err(|e| Error::io(path, e))
}

/// Dense CSV fixture: one row per cell, one column per gene. A first row that
/// does not parse as numbers is treated as a header and skipped.
pub fn load_dense_csv(path: impl AsRef<Path>, stage: Stage) -> Result<SparseExpressionMatrix> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_path(path)?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parsed: std::result::Result<Vec<f64>, _> = rec.iter().map(str::parse).collect();
        match parsed {
            Ok(r) => rows.push(r),
            Err(_) if i == 0 => continue,
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: e.to_string(),
                })
            }
        }
    }
    SparseExpressionMatrix::from_dense(&rows, stage)
}

/// Reads `cell_id,label` rows (with header).
pub fn load_labels(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::Reader::from_path(path.as_ref())?;
    rdr.records()
        .map(|r| {
            let r = r?;
            match (r.get(0), r.get(1)) {
                (Some(id), Some(label)) => Ok((id.to_string(), label.to_string())),
                _ => Err(Error::Parse {
                    line: r.position().map_or(0, |p| p.line() as usize),
                    msg: "expected `cell_id,label`".into(),
                }),
            }
        })
        .collect()
}

pub fn save_labels(labels: &[(String, String)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(["cell_id", "label"])?;
    for (id, label) in labels {
        w.write_record([id, label])?;
    }
    w.flush().map_err(|e| Error::io(path.as_ref(), e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_two_by_ten_header() {
        let mut text = String::from("2 10 11\n");
        for g in 0..8 {
            text.push_str(&format!("0 {g} {}\n", g + 1));
        }
        for g in 0..3 {
            text.push_str(&format!("1 {g} 2\n"));
        }
        let m = parse_matrix(&text).unwrap();
        assert_eq!(m.n_cells(), 2);
        assert_eq!(m.n_genes(), 10);
        assert_eq!(m.n_entries(), 11);
        assert_eq!(m.stage(), Stage::RawCounts);
    }

    #[test]
    fn duplicate_triplet_rejected() {
        let err = parse_matrix("1 5 2\n0 3 4.5\n0 3 4.5\n").unwrap_err();
        assert!(matches!(err, Error::DuplicateEntry { cell: 0, gene: 3 }));
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_matrix("1 5 2\n0 1 1.0\n0 x 2.0\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_matrix("1 5\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }));
        let err = parse_matrix("1 5 1\n0 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn out_of_range_rejected() {
        let err = parse_matrix("1 5 1\n0 5 1\n").unwrap_err();
        assert!(matches!(err, Error::OutOfRange { what: "gene", .. }));
    }

    #[test]
    fn worked_example_rows() {
        let c1 = [0.3, 2.1, 0.0, 4.5, 0.0, 7.3, 8.9, 0.0, 3.4, 2.5];
        let c2 = [1.1, 0.0, 0.0, 3.4, 2.3, 0.7, 0.0, 0.0, 2.9, 0.0];
        let m = SparseExpressionMatrix::from_dense(&[c1.to_vec(), c2.to_vec()], Stage::Normalized)
            .unwrap();
        let back = parse_matrix(&write_matrix(&m)).unwrap();
        // G3, G5 and G8 are zero in the first cell.
        assert_eq!(back.nnz(0), 7);
        assert_eq!(back.nnz(1), 5);
        assert_eq!(back, m);
    }
}
