//! Hourly price ingestion and quarter-hour resampling.

use std::io::Read;
use std::path::Path;

use chrono::{NaiveDate, NaiveDateTime, TimeDelta};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The synthetic summer price file shipped with the crate.
pub const BUNDLED_PRICES: &str = include_str!("../../data/prices_2023_summer.csv");

const TIMESTAMP_FORMATS: [&str; 4] = [
    "%Y-%m-%dT%H:%M:%S",
    "%Y-%m-%d %H:%M:%S",
    "%Y-%m-%d %H:%M",
    // NYISO "Time Stamp" column.
    "%m/%d/%Y %H:%M",
];

fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    TIMESTAMP_FORMATS
        .iter()
        .find_map(|f| NaiveDateTime::parse_from_str(s, f).ok())
}

/// Contiguous hourly prices in $/kWh, held constant across each hour.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub start: NaiveDateTime,
    pub hourly: Vec<f64>,
    pub steps_per_hour: usize,
}

impl PriceSeries {
    pub fn bundled() -> Result<Self> {
        Self::from_reader(BUNDLED_PRICES.as_bytes(), 4)
    }

    pub fn from_path(path: &Path, steps_per_hour: usize) -> Result<Self> {
        let file = std::fs::File::open(path)
            .map_err(|e| Error::Price(format!("{}: {e}", path.display())))?;
        Self::from_reader(file, steps_per_hour)
    }

    /// Parses a CSV with `timestamp` and `price` columns (other columns are
    /// ignored). Rows must be hourly, in order and without gaps.
    pub fn from_reader(reader: impl Read, steps_per_hour: usize) -> Result<Self> {
        if steps_per_hour == 0 {
            return Err(Error::Price("steps per hour must be positive".into()));
        }
        let mut r = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let header = r.headers()?.clone();
        let column = |name: &str| {
            header
                .iter()
                .position(|h| h.eq_ignore_ascii_case(name))
                .ok_or_else(|| Error::Price(format!("missing column `{name}`")))
        };
        let (ts_col, price_col) = (column("timestamp")?, column("price")?);

        let hour = TimeDelta::hours(1);
        let mut start = None;
        let mut prev: Option<NaiveDateTime> = None;
        let mut hourly = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let line = i + 2;
            let raw_ts = rec.get(ts_col).unwrap_or("");
            let ts = parse_timestamp(raw_ts)
                .ok_or_else(|| Error::Price(format!("line {line}: unreadable timestamp `{raw_ts}`")))?;
            let raw_price = rec.get(price_col).unwrap_or("");
            let price: f64 = raw_price
                .parse()
                .map_err(|_| Error::Price(format!("line {line}: unreadable price `{raw_price}`")))?;
            if !price.is_finite() || price < 0.0 {
                return Err(Error::Price(format!("line {line}: price {price} at {ts} is negative or non-finite")));
            }
            if let Some(p) = prev {
                if ts != p + hour {
                    return Err(if ts > p + hour {
                        Error::Price(format!("coverage gap: no price between {} and {ts}", p + hour))
                    } else {
                        Error::Price(format!("line {line}: timestamp {ts} does not follow {p} by one hour"))
                    });
                }
            } else {
                start = Some(ts);
            }
            prev = Some(ts);
            hourly.push(price);
        }
        let start = start.ok_or_else(|| Error::Price("no price rows".into()))?;
        Ok(Self {
            start,
            hourly,
            steps_per_hour,
        })
    }

    /// Quarter-hour (or `steps_per_hour`) series, each hour repeated.
    pub fn resampled(&self) -> Vec<f64> {
        self.hourly
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, self.steps_per_hour))
            .collect()
    }

    pub fn end(&self) -> NaiveDateTime {
        self.start + TimeDelta::hours(self.hourly.len() as i64)
    }

    /// The resampled prices of one calendar day.
    pub fn day(&self, date: NaiveDate) -> Result<Vec<f64>> {
        let from = date.and_hms_opt(0, 0, 0).expect("midnight exists");
        let offset = from - self.start;
        if offset < TimeDelta::zero() || from + TimeDelta::days(1) > self.end() {
            return Err(Error::Price(format!(
                "prices cover {} to {}, not {date}",
                self.start,
                self.end()
            )));
        }
        if offset.num_seconds() % 3600 != 0 {
            return Err(Error::Price(format!("series starts at {}, not on the hour", self.start)));
        }
        let first = offset.num_hours() as usize;
        Ok(self.hourly[first..first + 24]
            .iter()
            .flat_map(|&p| std::iter::repeat_n(p, self.steps_per_hour))
            .collect())
    }
}
