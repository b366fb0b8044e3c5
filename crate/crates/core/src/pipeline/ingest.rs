use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};

pub const FLOW_COLUMNS: [&str; 7] = ["origin_id", "dest_id", "naics", "week", "visits", "dest_lat", "dest_lon"];

/// ISO week `YYYY-Www`, ordered chronologically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct IsoWeek {
    pub year: i32,
    pub week: u32,
}

impl IsoWeek {
    pub fn parse(s: &str) -> Option<Self> {
        let (y, w) = s.split_once("-W")?;
        if y.len() != 4 || w.len() != 2 {
            return None;
        }
        let year: i32 = y.parse().ok()?;
        let week: u32 = w.parse().ok()?;
        NaiveDate::from_isoywd_opt(year, week, chrono::Weekday::Mon)?;
        Some(Self { year, week })
    }

    fn monday(self) -> NaiveDate {
        NaiveDate::from_isoywd_opt(self.year, self.week, chrono::Weekday::Mon).expect("validated week")
    }

    pub fn next(self) -> Self {
        use chrono::Datelike;
        let d = self.monday() + chrono::Duration::days(7);
        let iso = d.iso_week();
        Self {
            year: iso.year(),
            week: iso.week(),
        }
    }

    pub fn label(self) -> String {
        format!("{:04}-W{:02}", self.year, self.week)
    }

    /// `from`, `from.next()`, … up to and including `to`.
    pub fn range(from: Self, to: Self) -> Vec<Self> {
        let mut out = vec![from];
        while *out.last().expect("non-empty") < to {
            let n = out.last().expect("non-empty").next();
            out.push(n);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowRecord {
    pub origin_id: String,
    pub dest_id: String,
    pub naics: String,
    pub week: IsoWeek,
    pub visits: u64,
    pub dest_lat: f64,
    pub dest_lon: f64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    /// 1-based line number in the file, header included.
    pub line: usize,
    pub reason: &'static str,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct IngestReport {
    pub accepted: Vec<FlowRecord>,
    pub rejected: Vec<Rejection>,
}

impl IngestReport {
    pub fn rows(&self) -> usize {
        self.accepted.len() + self.rejected.len()
    }

    pub fn reason_counts(&self) -> BTreeMap<&'static str, usize> {
        let mut out = BTreeMap::new();
        for r in &self.rejected {
            *out.entry(r.reason).or_insert(0) += 1;
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut s = format!("rows {}\naccepted {}\nrejected {}\n", self.rows(), self.accepted.len(), self.rejected.len());
        for (reason, n) in self.reason_counts() {
            writeln!(s, "rejected[{reason}] {n}").unwrap();
        }
        s
    }

    pub fn rejections_csv(&self) -> String {
        let mut s = String::from("line,reason,detail\n");
        for r in &self.rejected {
            writeln!(s, "{},{},\"{}\"", r.line, r.reason, r.detail.replace('"', "'")).unwrap();
        }
        s
    }
}

pub const EMPTY: &str = "empty value";
pub const OUT_OF_RANGE: &str = "out-of-range";
pub const INVALID: &str = "invalid value";
pub const MALFORMED: &str = "malformed row";

fn check_row(fields: &[&str]) -> std::result::Result<FlowRecord, (&'static str, String)> {
    if fields.len() != FLOW_COLUMNS.len() {
        return Err((MALFORMED, format!("{} fields, expected {}", fields.len(), FLOW_COLUMNS.len())));
    }
    if let Some(i) = fields.iter().position(|f| f.trim().is_empty()) {
        return Err((EMPTY, format!("`{}` is empty", FLOW_COLUMNS[i])));
    }
    let f: Vec<&str> = fields.iter().map(|s| s.trim()).collect();
    let naics = f[2];
    if !naics.bytes().all(|b| b.is_ascii_digit()) || !(3..=6).contains(&naics.len()) {
        return Err((INVALID, format!("naics `{naics}` is not a 3–6 digit code")));
    }
    let week = IsoWeek::parse(f[3]).ok_or((INVALID, format!("week `{}` is not YYYY-Www", f[3])))?;
    let visits: f64 = f[4].parse().map_err(|_| (INVALID, format!("visits `{}` is not a number", f[4])))?;
    if visits < 0.0 {
        return Err((OUT_OF_RANGE, format!("visits {visits} is negative")));
    }
    if visits.fract() != 0.0 || !visits.is_finite() || visits > u64::MAX as f64 {
        return Err((INVALID, format!("visits `{}` is not a whole count", f[4])));
    }
    let coord = |s: &str, name: &str| -> std::result::Result<f64, (&'static str, String)> {
        s.parse::<f64>().map_err(|_| (INVALID, format!("{name} `{s}` is not a number")))
    };
    let lat = coord(f[5], "dest_lat")?;
    let lon = coord(f[6], "dest_lon")?;
    if !(-90.0..=90.0).contains(&lat) || !(-180.0..=180.0).contains(&lon) {
        return Err((OUT_OF_RANGE, format!("coordinates ({lat}, {lon}) outside the globe")));
    }
    Ok(FlowRecord {
        origin_id: f[0].to_string(),
        dest_id: f[1].to_string(),
        naics: naics.to_string(),
        week,
        visits: visits as u64,
        dest_lat: lat,
        dest_lon: lon,
    })
}

/// Parses a flow CSV. Every data row is either accepted or rejected with a
/// reason; nothing is dropped silently.
pub fn ingest_str(text: &str) -> Result<IngestReport> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .has_headers(true)
        .from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != FLOW_COLUMNS {
        return Err(Error::Format(format!(
            "flow CSV header must be `{}`, found `{}`",
            FLOW_COLUMNS.join(","),
            header.join(",")
        )));
    }
    let mut report = IngestReport::default();
    for (i, row) in reader.records().enumerate() {
        let line = i + 2;
        match row {
            Err(e) => report.rejected.push(Rejection {
                line,
                reason: MALFORMED,
                detail: e.to_string(),
            }),
            Ok(rec) => {
                let fields: Vec<&str> = rec.iter().collect();
                match check_row(&fields) {
                    Ok(r) => report.accepted.push(r),
                    Err((reason, detail)) => report.rejected.push(Rejection { line, reason, detail }),
                }
            }
        }
    }
    Ok(report)
}

pub fn ingest(path: &Path) -> Result<IngestReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ingest_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const HEADER: &str = "origin_id,dest_id,naics,week,visits,dest_lat,dest_lon\n";

    #[test]
    fn rejection_reasons() {
        let text = format!(
            "{HEADER}a,p,336111,2022-W01,-3,40,-80\na,p,,2022-W01,3,40,-80\na,p,336111,2022-W54,3,40,-80\n\
             a,p,336111,2022-W01,3,95,-80\na,p,336111,2022-W01,3,40\na,p,336111,2022-W02,4,40,-80\n"
        );
        let r = ingest_str(&text).unwrap();
        assert_eq!(r.accepted.len(), 1);
        let reasons: Vec<_> = r.rejected.iter().map(|x| x.reason).collect();
        assert_eq!(reasons, vec![OUT_OF_RANGE, EMPTY, INVALID, OUT_OF_RANGE, MALFORMED]);
        assert_eq!(r.rejected[0].line, 2);
        assert_eq!(r.rows(), 6);
        assert!(r.summary().contains("rejected[out-of-range] 2"));
    }

    #[test]
    fn clean_file() {
        let mut text = HEADER.to_string();
        for i in 0..100 {
            text.push_str(&format!("o{i},d{i},484110,2022-W{:02},{i},35.5,-97.1\n", i % 52 + 1));
        }
        let r = ingest_str(&text).unwrap();
        assert_eq!((r.accepted.len(), r.rejected.len()), (100, 0));
        assert_eq!(r.accepted[3].visits, 3);
    }

    #[test]
    fn missing_header() {
        let e = ingest_str("a,b,c\n1,2,3\n").unwrap_err();
        assert!(matches!(e, Error::Format(_)));
        assert!(e.to_string().contains("origin_id,dest_id,naics,week,visits,dest_lat,dest_lon"));
    }

    #[test]
    fn iso_weeks() {
        let w = IsoWeek::parse("2022-W52").unwrap();
        assert_eq!(w.next().label(), "2023-W01");
        assert_eq!(IsoWeek::parse("2020-W53").unwrap().next().label(), "2021-W01");
        assert!(IsoWeek::parse("2021-W53").is_none());
        assert!(IsoWeek::parse("2022-52").is_none());
        let r = IsoWeek::range(w, IsoWeek::parse("2023-W02").unwrap());
        assert_eq!(r.len(), 3);
    }
}
