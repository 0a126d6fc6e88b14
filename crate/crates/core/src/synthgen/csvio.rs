//! CSV persistence: one column per schema feature plus `label`. Missing values
//! are empty cells; labels are class names.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use super::schema::{PatientRecord, Schema};
use crate::error::{Error, Result};

pub const LABEL_COLUMN: &str = "label";

pub fn write_records<W: Write>(out: W, schema: &Schema, records: &[PatientRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<&str> = schema.feature_names().collect();
    header.push(LABEL_COLUMN);
    w.write_record(&header)?;
    let mut row: Vec<String> = Vec::with_capacity(header.len());
    for r in records {
        r.check(schema)?;
        row.clear();
        row.extend(r.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()));
        row.push(schema.classes[r.label].clone());
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv writer>", e))?;
    Ok(())
}

/// Reads records; columns may appear in any order but must be exactly the
/// schema features plus `label`. Row numbers in errors count the header as 0.
pub fn read_records<R: Read>(input: R, schema: &Schema) -> Result<Vec<PatientRecord>> {
    let mut r = csv::ReaderBuilder::new().flexible(true).from_reader(input);
    let header = r.headers()?.clone();
    let mut slot = vec![None; header.len()];
    let mut label_col = None;
    for (c, name) in header.iter().enumerate() {
        if name == LABEL_COLUMN {
            label_col = Some(c);
        } else if let Some(j) = schema.feature_index(name) {
            if slot.contains(&Some(j)) {
                return Err(parse(0, c, format!("duplicate column `{name}`")));
            }
            slot[c] = Some(j);
        } else {
            return Err(parse(0, c, format!("unknown column `{name}`")));
        }
    }
    let label_col = label_col.ok_or_else(|| parse(0, header.len(), "missing `label` column".into()))?;
    if let Some(f) = schema
        .feature_names()
        .enumerate()
        .find(|(j, _)| !slot.contains(&Some(*j)))
    {
        return Err(parse(0, header.len(), format!("missing column `{}`", f.1)));
    }
    let mut out = Vec::new();
    for (i, row) in r.records().enumerate() {
        let row_no = i + 1;
        let row = row?;
        if row.len() != header.len() {
            return Err(parse(
                row_no,
                row.len().min(header.len()),
                format!("expected {} cells, found {}", header.len(), row.len()),
            ));
        }
        let mut values = vec![None; schema.n_features()];
        let mut label = 0;
        for (c, cell) in row.iter().enumerate() {
            if c == label_col {
                label = schema
                    .class_index(cell)
                    .ok_or_else(|| parse(row_no, c, format!("unknown class `{cell}`")))?;
            } else if !cell.is_empty() {
                let v: f64 = cell
                    .trim()
                    .parse()
                    .map_err(|_| parse(row_no, c, format!("non-numeric value `{cell}`")))?;
                values[slot[c].expect("feature column")] = Some(v);
            }
        }
        out.push(PatientRecord::new(values, label));
    }
    Ok(out)
}

fn parse(row: usize, column: usize, message: String) -> Error {
    Error::Parse { row, column, message }
}

pub fn write_csv(path: &Path, schema: &Schema, records: &[PatientRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_records(std::io::BufWriter::new(file), schema, records)
}

pub fn read_csv(path: &Path, schema: &Schema) -> Result<Vec<PatientRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_records(std::io::BufReader::new(file), schema)
}
