use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::ingest::{FlowRecord, IsoWeek};
use super::naics::{classify_naics, IndustryClass};
use crate::error::{Error, Result};
use crate::forecast::FlowTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    State,
    Cbg,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "state" => Ok(Self::State),
            "cbg" => Ok(Self::Cbg),
            other => Err(Error::Parameter(format!("unknown level `{other}` (expected state or cbg)"))),
        }
    }
}

impl std::fmt::Display for Level {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::State => "state",
            Self::Cbg => "cbg",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparsityReport {
    pub imputed: usize,
    pub cells: usize,
}

impl std::fmt::Display for SparsityReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{} cells imputed", self.imputed, self.cells)
    }
}

#[derive(Debug, Clone)]
pub struct Aggregated {
    pub tensor: FlowTensor<f64>,
    pub sparsity: SparsityReport,
    /// Mean destination coordinates per unit, tensor node order.
    pub centroids: Vec<(f64, f64)>,
    /// Visits summed over the selected records.
    pub total_visits: u64,
}

/// Unit id of a record: the origin block group, or its state, taken from the
/// crosswalk when present and the leading two FIPS digits otherwise.
pub fn unit_of(origin: &str, level: Level, crosswalk: Option<&HashMap<String, String>>) -> Result<String> {
    match level {
        Level::Cbg => Ok(origin.to_string()),
        Level::State => {
            if let Some(s) = crosswalk.and_then(|c| c.get(origin)) {
                return Ok(s.clone());
            }
            origin
                .get(..2)
                .filter(|p| p.bytes().all(|b| b.is_ascii_digit()))
                .map(str::to_string)
                .ok_or_else(|| Error::Data(format!("origin `{origin}` has no state prefix and no crosswalk entry")))
        }
    }
}

/// Parses `origin_id,unit_id` crosswalk lines (header optional).
pub fn parse_crosswalk(text: &str) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("origin_id")) {
            continue;
        }
        let (a, b) = line
            .split_once(',')
            .ok_or_else(|| Error::Format(format!("crosswalk line {}: expected `origin_id,unit_id`", i + 1)))?;
        out.insert(a.trim().to_string(), b.trim().to_string());
    }
    Ok(out)
}

/// Sums visits per (unit, week) for one industry. Weeks span the first to
/// the last observed week; cells without records are zero and counted.
pub fn aggregate(
    records: &[FlowRecord],
    level: Level,
    industry: IndustryClass,
    crosswalk: Option<&HashMap<String, String>>,
) -> Result<Aggregated> {
    let mut cells: BTreeMap<(String, IsoWeek), u64> = BTreeMap::new();
    let mut coords: BTreeMap<String, (f64, f64, usize)> = BTreeMap::new();
    let mut total_visits = 0u64;
    for r in records {
        if classify_naics(&r.naics)? != industry {
            continue;
        }
        let unit = unit_of(&r.origin_id, level, crosswalk)?;
        *cells.entry((unit.clone(), r.week)).or_insert(0) += r.visits;
        let c = coords.entry(unit).or_insert((0.0, 0.0, 0));
        c.0 += r.dest_lat;
        c.1 += r.dest_lon;
        c.2 += 1;
        total_visits += r.visits;
    }
    if cells.is_empty() {
        return Err(Error::Data(format!("no records for industry {industry}")));
    }
    let units: Vec<String> = coords.keys().cloned().collect();
    let observed: BTreeSet<IsoWeek> = cells.keys().map(|(_, w)| *w).collect();
    let weeks = IsoWeek::range(*observed.first().expect("non-empty"), *observed.last().expect("non-empty"));
    let mut imputed = 0;
    let mut series = Vec::with_capacity(units.len());
    for u in &units {
        series.push(
            weeks
                .iter()
                .map(|w| match cells.get(&(u.clone(), *w)) {
                    Some(v) => *v as f64,
                    None => {
                        imputed += 1;
                        0.0
                    }
                })
                .collect::<Vec<f64>>(),
        );
    }
    let centroids = units
        .iter()
        .map(|u| {
            let (la, lo, n) = coords[u];
            (la / n as f64, lo / n as f64)
        })
        .collect();
    let tensor = FlowTensor::from_series(units, "visits", weeks.iter().map(|w| w.label()).collect(), &series)?;
    Ok(Aggregated {
        sparsity: SparsityReport {
            imputed,
            cells: tensor.nodes() * tensor.weeks(),
        },
        tensor,
        centroids,
        total_visits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(origin: &str, week: &str, visits: u64) -> FlowRecord {
        FlowRecord {
            origin_id: origin.into(),
            dest_id: "p".into(),
            naics: "336111".into(),
            week: IsoWeek::parse(week).unwrap(),
            visits,
            dest_lat: 40.0,
            dest_lon: -80.0,
        }
    }

    #[test]
    fn single_record() {
        let a = aggregate(&[rec("A", "2022-W01", 7)], Level::Cbg, IndustryClass::Automotive, None).unwrap();
        assert_eq!((a.tensor.nodes(), a.tensor.features(), a.tensor.weeks()), (1, 1, 1));
        assert_eq!(a.tensor.get(0, 0, 0), 7.0);
    }

    #[test]
    fn same_cell_sums() {
        let r = [rec("A", "2022-W01", 3), rec("A", "2022-W01", 4)];
        let a = aggregate(&r, Level::Cbg, IndustryClass::Automotive, None).unwrap();
        assert_eq!(a.tensor.get(0, 0, 0), 7.0);
    }

    #[test]
    fn missing_cell_imputed() {
        let mut r = Vec::new();
        for u in ["A", "B", "C"] {
            for w in 1..=4 {
                if !(u == "B" && w == 3) {
                    r.push(rec(u, &format!("2022-W0{w}"), 1));
                }
            }
        }
        let a = aggregate(&r, Level::Cbg, IndustryClass::Automotive, None).unwrap();
        assert_eq!(a.tensor.get(1, 0, 2), 0.0);
        assert_eq!(a.sparsity.to_string(), "1/12 cells imputed");
    }

    #[test]
    fn industry_filter_state_rollup_and_mass() {
        let mut other = rec("060750101001", "2022-W01", 100);
        other.naics = "722511".into();
        let r = [rec("060750101001", "2022-W01", 2), rec("060750102001", "2022-W02", 5), rec("170310101001", "2022-W01", 1), other];
        let a = aggregate(&r, Level::State, IndustryClass::Automotive, None).unwrap();
        assert_eq!(a.tensor.node_ids(), &["06".to_string(), "17".to_string()]);
        assert_eq!(a.tensor.total(), 8.0);
        assert_eq!(a.total_visits, 8);
        let cw = parse_crosswalk("origin_id,unit_id\n060750101001,CA\n").unwrap();
        let a = aggregate(&r, Level::State, IndustryClass::Automotive, Some(&cw)).unwrap();
        assert_eq!(a.tensor.node_ids()[0], "06");
        assert_eq!(a.tensor.node_ids()[2], "CA");
        assert!(matches!(
            aggregate(&r, Level::Cbg, IndustryClass::Cybersecurity, None),
            Err(Error::Data(_))
        ));
    }
}
