use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

pub const COMPOSITES: [&str; 6] = ["health", "education", "crime", "work", "economy", "housing"];
pub const SOCIO_COLUMNS: [&str; 9] = [
    "unit_id", "health", "education", "crime", "work", "economy", "housing", "lat", "lon",
];

/// Sub-variables behind each composite, in [`COMPOSITES`] order.
pub const SUBVARIABLES: [[&str; 3]; 6] = [
    ["PPD", "PMD", "FEI"],
    ["HSE", "BHD", "CCB"],
    ["VCO", "FF", "NID"],
    ["CMM", "EP", "HWP"],
    ["GDP", "MHI", "HIC"],
    ["MHV", "HRE", "HSE-spend"],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SocioRow {
    pub unit_id: String,
    /// Composite scores in [`COMPOSITES`] order.
    pub values: [f64; 6],
    pub lat: f64,
    pub lon: f64,
}

fn min_max_columns(columns: usize, rows: &mut [Vec<f64>]) {
    for c in 0..columns {
        let lo = rows.iter().map(|r| r[c]).fold(f64::INFINITY, f64::min);
        let hi = rows.iter().map(|r| r[c]).fold(f64::NEG_INFINITY, f64::max);
        for r in rows.iter_mut() {
            r[c] = if hi > lo { (r[c] - lo) / (hi - lo) } else { 0.0 };
        }
    }
}

/// Reads the socioeconomic CSV. With `normalize`, each composite column is
/// min–max scaled; otherwise values outside `[0, 1]` are rejected.
pub fn parse_socio(text: &str, normalize: bool) -> Result<Vec<SocioRow>> {
    let mut reader = csv::ReaderBuilder::new().from_reader(text.as_bytes());
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Format(format!("unreadable socioeconomic header: {e}")))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if header != SOCIO_COLUMNS {
        return Err(Error::Format(format!(
            "socioeconomic CSV header must be `{}`, found `{}`",
            SOCIO_COLUMNS.join(","),
            header.join(",")
        )));
    }
    let mut ids = Vec::new();
    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut coords = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Format(format!("socioeconomic line {}: {e}", i + 2)))?;
        let nums = (1..9)
            .map(|c| {
                rec[c].trim().parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    Error::Validation(format!("socioeconomic line {}: `{}` is not a number", i + 2, &rec[c]))
                })
            })
            .collect::<Result<Vec<f64>>>()?;
        ids.push(rec[0].trim().to_string());
        values.push(nums[..6].to_vec());
        coords.push((nums[6], nums[7]));
    }
    if ids.is_empty() {
        return Err(Error::Data("socioeconomic CSV has no rows".into()));
    }
    if normalize {
        min_max_columns(6, &mut values);
    } else if let Some((i, _)) = values.iter().enumerate().find(|(_, r)| r.iter().any(|v| !(0.0..=1.0).contains(v))) {
        return Err(Error::Validation(format!(
            "socioeconomic line {}: composites must be in [0, 1] (use --normalize for raw values)",
            i + 2
        )));
    }
    Ok(ids
        .into_iter()
        .zip(values)
        .zip(coords)
        .map(|((unit_id, v), (lat, lon))| SocioRow {
            unit_id,
            values: v.try_into().expect("six composites"),
            lat,
            lon,
        })
        .collect())
}

pub fn read_socio(path: &Path, normalize: bool) -> Result<Vec<SocioRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_socio(&text, normalize)
}

pub fn socio_csv(rows: &[SocioRow]) -> String {
    let mut out = SOCIO_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        write!(out, "{}", r.unit_id).unwrap();
        for v in r.values {
            write!(out, ",{v:.6}").unwrap();
        }
        writeln!(out, ",{:.6},{:.6}", r.lat, r.lon).unwrap();
    }
    out
}

/// Composite scores from the eighteen sub-variables (columns in
/// [`SUBVARIABLES`] order): each sub-variable is min–max normalized across
/// units, then combined with `weights` (renormalized to sum to one).
pub fn composites(sub: &[[f64; 18]], weights: &[[f64; 3]; 6]) -> Result<Vec<[f64; 6]>> {
    if sub.is_empty() {
        return Err(Error::Data("no units to combine".into()));
    }
    for w in weights {
        let s: f64 = w.iter().sum();
        if w.iter().any(|v| *v < 0.0 || !v.is_finite()) || s <= 0.0 {
            return Err(Error::Parameter(format!("composite weights {w:?} must be ≥ 0 with a positive sum")));
        }
    }
    let mut rows: Vec<Vec<f64>> = sub.iter().map(|r| r.to_vec()).collect();
    min_max_columns(18, &mut rows);
    Ok(rows
        .iter()
        .map(|r| {
            let mut out = [0.0; 6];
            for (k, w) in weights.iter().enumerate() {
                let s: f64 = w.iter().sum();
                out[k] = (0..3).map(|j| w[j] * r[3 * k + j]).sum::<f64>() / s;
            }
            out
        })
        .collect())
}
