use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::TimeSeriesWindow;
use crate::error::{Error, Result};
use crate::student::Token;

/// On-disk form of a window, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowRecord {
    pub x: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
    pub timestamps: Vec<i64>,
    #[serde(default)]
    pub true_mode: Option<usize>,
    pub event_label: String,
}

impl TryFrom<WindowRecord> for TimeSeriesWindow {
    type Error = Error;

    fn try_from(r: WindowRecord) -> Result<Self> {
        let event = match r.event_label.parse::<Token>() {
            Ok(Token::Event(e)) => e,
            _ => {
                return Err(Error::Parse(format!(
                    "event_label {:?} is not EVENT_k or EVENT_NONE",
                    r.event_label
                )))
            }
        };
        let v = r.x.first().map_or(0, Vec::len);
        if r.x.is_empty() || v == 0 {
            return Err(Error::Parse("window context is empty".into()));
        }
        if r.x.iter().chain(&r.y).any(|row| row.len() != v) {
            return Err(Error::Parse("ragged variate rows in window".into()));
        }
        if r.x.iter().chain(&r.y).flatten().any(|x| !x.is_finite()) {
            return Err(Error::Parse("non-finite value in window".into()));
        }
        Ok(TimeSeriesWindow {
            x: r.x,
            y: r.y,
            timestamps: r.timestamps,
            true_mode: r.true_mode,
            event,
        })
    }
}

impl From<TimeSeriesWindow> for WindowRecord {
    fn from(w: TimeSeriesWindow) -> Self {
        Self {
            x: w.x,
            y: w.y,
            timestamps: w.timestamps,
            true_mode: w.true_mode,
            event_label: Token::Event(w.event).to_string(),
        }
    }
}

/// Offline reasoning record emitted by the `teacher` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub window_id: usize,
    pub r_ref: Vec<String>,
    pub r_base: Vec<String>,
    pub prompt_ids: Vec<usize>,
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Blank lines are skipped; a malformed line reports its 1-based number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item =
            serde_json::from_str(&line).map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(item);
    }
    Ok(out)
}
