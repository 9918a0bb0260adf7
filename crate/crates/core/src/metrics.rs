//! Per-step training metrics as versioned CSV.
//!
//! The file starts with a comment line naming the schema version and the
//! run's ratio mode, followed by a CSV header and one row per step:
//!
//! ```text
//! # segrl-metrics v1 ratio_mode=POIS masking=dynamic
//! step,mean_reward,mean_entropy,...
//! ```
//!
//! Version 0 logs had no comment line and lacked the `retained_groups`,
//! `completed` and `truncated` columns; the parser accepts both.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
const MAGIC: &str = "# segrl-metrics";

pub const COLUMNS: [&str; 13] = [
    "step",
    "mean_reward",
    "mean_entropy",
    "masked_fraction",
    "clip_fraction",
    "experience_pool_size",
    "unfinished_pool_size",
    "retained_groups",
    "dropped_groups",
    "completed",
    "truncated",
    "loss",
    "wall_time",
];

/// One training step. Rates are `NaN` when the step had nothing to average.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub mean_reward: f64,
    pub mean_entropy: f64,
    pub masked_fraction: f64,
    pub clip_fraction: f64,
    pub experience_pool_size: usize,
    pub unfinished_pool_size: usize,
    #[serde(default)]
    pub retained_groups: Option<usize>,
    pub dropped_groups: usize,
    #[serde(default)]
    pub completed: Option<usize>,
    #[serde(default)]
    pub truncated: Option<usize>,
    pub loss: f64,
    /// Seconds since the run started; empty when not recorded.
    pub wall_time: Option<f64>,
}

/// Header comment for a log.
pub fn header_line(ratio_mode: &str, masking: &str) -> String {
    format!("{MAGIC} v{SCHEMA_VERSION} ratio_mode={ratio_mode} masking={masking}")
}

/// Serialise rows under the current schema, including both header lines.
pub fn write_log(header: &str, rows: &[MetricsRow]) -> Result<String> {
    let mut out = format!("{header}\n");
    out.push_str(&write_body(rows)?);
    Ok(out)
}

/// Column header and rows only.
pub fn write_body(rows: &[MetricsRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Input(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Input(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Input(format!("metrics csv: {e}"))
}

/// A parsed log: schema version, header comment (if any) and rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsLog {
    pub version: u32,
    pub header: Option<String>,
    pub rows: Vec<MetricsRow>,
}

pub fn parse_log(text: &str) -> Result<MetricsLog> {
    let (version, header, body) = match text.strip_prefix(MAGIC) {
        Some(rest) => {
            let (line, body) = rest.split_once('\n').unwrap_or((rest, ""));
            let v = line
                .split_whitespace()
                .next()
                .and_then(|t| t.strip_prefix('v'))
                .and_then(|t| t.parse::<u32>().ok())
                .ok_or_else(|| Error::Input("metrics log: unreadable version".into()))?;
            (v, Some(format!("{MAGIC}{line}")), body)
        }
        None => (0, None, text),
    };
    if version > SCHEMA_VERSION {
        return Err(Error::Input(format!("metrics log version {version} is newer than {SCHEMA_VERSION}")));
    }
    let mut rdr = csv::ReaderBuilder::new().from_reader(body.as_bytes());
    let rows = rdr
        .deserialize::<MetricsRow>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(csv_err)?;
    Ok(MetricsLog { version, header, rows })
}

/// Text after the first line, i.e. the part that must match between two
/// runs that differ only in labels recorded in the header.
pub fn body_after_header(text: &str) -> &str {
    text.split_once('\n').map_or("", |(_, rest)| rest)
}

/// Trailing running mean with window `w` (shorter at the start), skipping
/// `NaN` entries.
pub fn running_mean(values: &[f64], w: usize) -> Vec<f64> {
    (0..values.len())
        .map(|i| {
            let lo = (i + 1).saturating_sub(w);
            let win: Vec<f64> = values[lo..=i].iter().copied().filter(|v| v.is_finite()).collect();
            if win.is_empty() {
                f64::NAN
            } else {
                win.iter().sum::<f64>() / win.len() as f64
            }
        })
        .collect()
}

/// Mean of the finite values.
pub fn finite_mean(values: &[f64]) -> f64 {
    let v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(step: u64) -> MetricsRow {
        MetricsRow {
            step,
            mean_reward: 0.25,
            mean_entropy: 0.1 * step as f64,
            masked_fraction: 0.0,
            clip_fraction: 0.0,
            experience_pool_size: 3,
            unfinished_pool_size: 4,
            retained_groups: Some(1),
            dropped_groups: 2,
            completed: Some(5),
            truncated: Some(0),
            loss: f64::NAN,
            wall_time: None,
        }
    }

    #[test]
    fn round_trip_current_version() {
        let rows = vec![row(1), row(2)];
        let text = write_log(&header_line("POIS", "dynamic"), &rows).unwrap();
        assert!(text.starts_with("# segrl-metrics v1 ratio_mode=POIS"));
        let log = parse_log(&text).unwrap();
        assert_eq!(log.version, 1);
        assert_eq!(log.rows.len(), 2);
        assert_eq!(log.rows[1].mean_entropy, 0.2);
        assert!(log.rows[0].loss.is_nan());
        assert_eq!(log.rows[0].wall_time, None);
    }

    #[test]
    fn parses_version_zero() {
        let text = "step,mean_reward,mean_entropy,masked_fraction,clip_fraction,experience_pool_size,unfinished_pool_size,dropped_groups,loss,wall_time\n1,0.5,1.2,0,0.1,8,3,2,-0.4,0.01\n";
        let log = parse_log(text).unwrap();
        assert_eq!(log.version, 0);
        assert_eq!(log.rows[0].retained_groups, None);
        assert_eq!(log.rows[0].wall_time, Some(0.01));
        assert_eq!(log.rows[0].loss, -0.4);
    }

    #[test]
    fn rejects_future_version() {
        assert!(parse_log("# segrl-metrics v9 x\nstep\n").is_err());
    }

    #[test]
    fn running_mean_window() {
        let m = running_mean(&[1.0, 3.0, f64::NAN, 5.0], 2);
        assert_eq!(m, vec![1.0, 2.0, 3.0, 5.0]);
    }
}
