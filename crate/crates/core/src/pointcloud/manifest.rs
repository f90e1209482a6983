use super::Split;
use crate::error::{Error, Result};

const HEADER: [&str; 3] = ["path", "label", "split"];

/// One row of a dataset manifest (`path,label,split`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub split: Split,
}

pub fn read_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = reader.headers()?.clone();
    if header.iter().collect::<Vec<_>>() != HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!("manifest header must be `path,label,split`, got {:?}", header.as_slice()),
        });
    }
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        let line = i + 2;
        if record.len() != 3 {
            return Err(Error::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let split = record[2].parse().map_err(|_| Error::Parse {
            line,
            message: format!("unknown split {:?}", &record[2]),
        })?;
        rows.push(ManifestRow {
            path: record[0].to_string(),
            label: record[1].to_string(),
            split,
        });
    }
    Ok(rows)
}

pub fn write_manifest(rows: &[ManifestRow]) -> Result<String> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer.write_record(HEADER)?;
    for row in rows {
        writer.write_record([row.path.as_str(), row.label.as_str(), &row.split.to_string()])?;
    }
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::io("manifest", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("manifest fields are UTF-8"))
}
