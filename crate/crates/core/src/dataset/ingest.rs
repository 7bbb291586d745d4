use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use serde::{Deserialize, Serialize};

use super::{DatasetError, Interaction, InteractionLog};

/// Where the user, item and timestamp fields sit in a delimited file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnFormat {
    /// Field separator; may be more than one character (MovieLens uses `::`).
    pub delimiter: String,
    pub user_col: usize,
    pub item_col: usize,
    pub timestamp_col: usize,
    pub has_header: bool,
}

impl ColumnFormat {
    pub fn tsv() -> Self {
        Self {
            delimiter: "\t".into(),
            user_col: 0,
            item_col: 1,
            timestamp_col: 2,
            has_header: false,
        }
    }

    pub fn csv() -> Self {
        Self {
            delimiter: ",".into(),
            has_header: true,
            ..Self::tsv()
        }
    }

    /// `UserID::MovieID::Rating::Timestamp`, as in the MovieLens 1M ratings file.
    pub fn movielens() -> Self {
        Self {
            delimiter: "::".into(),
            user_col: 0,
            item_col: 1,
            timestamp_col: 3,
            has_header: false,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tsv" => Some(Self::tsv()),
            "csv" => Some(Self::csv()),
            "movielens" | "ml" => Some(Self::movielens()),
            _ => None,
        }
    }
}

impl Default for ColumnFormat {
    fn default() -> Self {
        Self::tsv()
    }
}

/// Reads a delimited interaction file, transparently gunzipping it when it
/// starts with the gzip magic bytes.
pub fn ingest(path: &Path, format: &ColumnFormat) -> Result<InteractionLog, DatasetError> {
    let opened = File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    let mut file = BufReader::new(opened);
    let gz = file.fill_buf()?.starts_with(&[0x1f, 0x8b]);
    let reader: Box<dyn Read> = if gz {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    parse_log(BufReader::new(reader), format)
}

pub fn parse_log<R: BufRead>(reader: R, format: &ColumnFormat) -> Result<InteractionLog, DatasetError> {
    let needed = format.user_col.max(format.item_col).max(format.timestamp_col) + 1;
    let mut log = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if format.has_header && i == 0 {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(format.delimiter.as_str()).collect();
        if fields.len() < needed {
            return Err(DatasetError::Parse {
                line: line_no,
                message: format!("expected at least {needed} fields, found {}", fields.len()),
            });
        }
        let ts = fields[format.timestamp_col].trim();
        let timestamp = ts.parse::<u64>().map_err(|_| DatasetError::Parse {
            line: line_no,
            message: format!("timestamp `{ts}` is not a non-negative integer"),
        })?;
        log.push(Interaction {
            user: fields[format.user_col].trim().to_string(),
            item: fields[format.item_col].trim().to_string(),
            timestamp,
        });
    }
    if log.is_empty() {
        return Err(DatasetError::EmptyInput);
    }
    Ok(log)
}
