use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDateTime};

use super::CheckinRecord;
use crate::error::{Result, TulError};

/// How the timestamp column is encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TimeFormat {
    /// Integer epoch seconds, falling back to ISO-8601.
    Auto,
    Epoch,
    Iso8601,
    /// A `strftime` pattern; parsed as UTC unless it carries an offset.
    Pattern(String),
}

impl TimeFormat {
    pub fn parse_value(&self, raw: &str) -> Option<i64> {
        let raw = raw.trim();
        match self {
            TimeFormat::Epoch => raw.parse::<i64>().ok(),
            TimeFormat::Iso8601 => parse_iso8601(raw),
            TimeFormat::Auto => raw.parse::<i64>().ok().or_else(|| parse_iso8601(raw)),
            TimeFormat::Pattern(p) => DateTime::parse_from_str(raw, p)
                .map(|dt| dt.timestamp())
                .or_else(|_| NaiveDateTime::parse_from_str(raw, p).map(|n| n.and_utc().timestamp()))
                .ok(),
        }
    }

    pub fn as_config_value(&self) -> String {
        match self {
            TimeFormat::Auto => "auto".into(),
            TimeFormat::Epoch => "epoch".into(),
            TimeFormat::Iso8601 => "iso8601".into(),
            TimeFormat::Pattern(p) => format!("pattern:{p}"),
        }
    }

    pub fn from_config_value(value: &str) -> Option<Self> {
        match value {
            "auto" => Some(TimeFormat::Auto),
            "epoch" => Some(TimeFormat::Epoch),
            "iso8601" => Some(TimeFormat::Iso8601),
            _ => value
                .strip_prefix("pattern:")
                .map(|p| TimeFormat::Pattern(p.to_string())),
        }
    }
}

fn parse_iso8601(raw: &str) -> Option<i64> {
    if let Ok(dt) = DateTime::parse_from_rfc3339(raw) {
        return Some(dt.timestamp());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M:%S%.f"]
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(raw, f).ok())
        .map(|n| n.and_utc().timestamp())
}

/// Column layout of a check-in file. The default is the native layout:
/// `user, timestamp, poi, category[, lat, lon]`, tab separated.
#[derive(Debug, Clone, PartialEq)]
pub struct FormatSpec {
    pub delimiter: char,
    pub user_col: usize,
    pub time_col: usize,
    pub poi_col: usize,
    pub category_col: usize,
    pub lat_col: Option<usize>,
    pub lon_col: Option<usize>,
    pub time_format: TimeFormat,
    pub skip_header: bool,
}

impl Default for FormatSpec {
    fn default() -> Self {
        Self {
            delimiter: '\t',
            user_col: 0,
            time_col: 1,
            poi_col: 2,
            category_col: 3,
            lat_col: Some(4),
            lon_col: Some(5),
            time_format: TimeFormat::Auto,
            skip_header: false,
        }
    }
}

impl FormatSpec {
    fn required_columns(&self) -> usize {
        self.user_col
            .max(self.time_col)
            .max(self.poi_col)
            .max(self.category_col)
            + 1
    }

    fn parse_line(&self, line: &str) -> Option<CheckinRecord> {
        let fields: Vec<&str> = line.split(self.delimiter).collect();
        if fields.len() < self.required_columns() {
            return None;
        }
        let user_id = fields[self.user_col].trim();
        let poi_id = fields[self.poi_col].trim();
        let category_id = fields[self.category_col].trim();
        if user_id.is_empty() || poi_id.is_empty() || category_id.is_empty() {
            return None;
        }
        let timestamp = self.time_format.parse_value(fields[self.time_col])?;
        if timestamp < 0 {
            return None;
        }
        let coord = |col: Option<usize>| -> Option<Option<f64>> {
            match col.and_then(|c| fields.get(c)).map(|s| s.trim()) {
                None | Some("") => Some(None),
                Some(s) => s.parse::<f64>().ok().filter(|v| v.is_finite()).map(Some),
            }
        };
        Some(CheckinRecord {
            user_id: user_id.to_string(),
            timestamp,
            poi_id: poi_id.to_string(),
            category_id: category_id.to_string(),
            lat: coord(self.lat_col)?,
            lon: coord(self.lon_col)?,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct ParseOutcome {
    pub records: Vec<CheckinRecord>,
    pub malformed: usize,
}

/// Parses a check-in stream. Blank lines are ignored; malformed lines are
/// skipped and counted, and more than half malformed is fatal.
pub fn parse_checkins<R: BufRead>(reader: R, format: &FormatSpec) -> Result<ParseOutcome> {
    let mut outcome = ParseOutcome::default();
    let mut seen = 0usize;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| TulError::io("<stream>", e))?;
        if lineno == 0 && format.skip_header {
            continue;
        }
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() {
            continue;
        }
        seen += 1;
        match format.parse_line(line) {
            Some(rec) => outcome.records.push(rec),
            None => {
                if outcome.malformed < 5 {
                    log::warn!("skipping malformed check-in line {}", lineno + 1);
                }
                outcome.malformed += 1;
            }
        }
    }
    if seen > 0 && outcome.malformed * 2 > seen {
        return Err(TulError::Data(format!(
            "{} of {} lines are malformed",
            outcome.malformed, seen
        )));
    }
    Ok(outcome)
}

pub fn read_checkins(path: &Path, format: &FormatSpec) -> Result<ParseOutcome> {
    let file = File::open(path).map_err(|e| TulError::io(path, e))?;
    parse_checkins(BufReader::new(file), format).map_err(|e| match e {
        TulError::Io { source, .. } => TulError::io(path, source),
        other => other,
    })
}

/// Writes records in the native tab-separated layout.
pub fn write_checkins<W: Write>(mut out: W, records: &[CheckinRecord]) -> std::io::Result<()> {
    for r in records {
        write!(
            out,
            "{}\t{}\t{}\t{}",
            r.user_id, r.timestamp, r.poi_id, r.category_id
        )?;
        match (r.lat, r.lon) {
            (Some(lat), Some(lon)) => writeln!(out, "\t{lat}\t{lon}")?,
            _ => writeln!(out)?,
        }
    }
    Ok(())
}
