use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::ingest::{IsoWeek, FLOW_COLUMNS};
use super::naics::IndustryClass;
use super::socio::{SocioRow, SOCIO_COLUMNS};
use crate::error::{Error, Result};

/// NAICS code written for each sector's synthetic destinations.
pub fn representative_naics(class: IndustryClass) -> &'static str {
    match class {
        IndustryClass::Automotive => "336111",
        IndustryClass::Cybersecurity => "541512",
        IndustryClass::TransportLogistics => "484121",
        IndustryClass::Unclassified => "722511",
    }
}

fn base_level(class: IndustryClass) -> f64 {
    match class {
        IndustryClass::Automotive => 400.0,
        IndustryClass::Cybersecurity => 150.0,
        IndustryClass::TransportLogistics => 250.0,
        IndustryClass::Unclassified => 60.0,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub units: usize,
    pub weeks: usize,
    pub industries: Vec<IndustryClass>,
    /// Standard deviation of the log-normal weekly noise; 0 disables it.
    pub noise: f64,
    /// Multiplier on the planted weekly growth rate.
    pub growth_scale: f64,
    pub seasonal_amplitude: f64,
    pub seasonal_period: f64,
    pub start_week: IsoWeek,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            units: 12,
            weeks: 60,
            industries: IndustryClass::CLASSIFIED.to_vec(),
            noise: 0.05,
            growth_scale: 0.01,
            seasonal_amplitude: 0.3,
            seasonal_period: 13.0,
            start_week: IsoWeek { year: 2022, week: 1 },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthUnit {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    pub factor: f64,
    pub phase: f64,
    /// Planted location effect in `[-0.5, 0.5]`, linear in the grid position.
    pub location_effect: f64,
    /// Weekly growth rate applied to every sector of this unit.
    pub growth: f64,
    pub composites: [f64; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthManifest {
    pub config: SynthConfig,
    pub units: Vec<SynthUnit>,
    pub weeks: Vec<IsoWeek>,
}

impl SynthManifest {
    /// Noise-free visits before rounding.
    pub fn expected(&self, unit: usize, class: IndustryClass, week: usize) -> f64 {
        let u = &self.units[unit];
        let c = &self.config;
        let t = week as f64;
        let seasonal = 1.0 + c.seasonal_amplitude * (std::f64::consts::TAU * (t + u.phase) / c.seasonal_period).sin();
        base_level(class) * u.factor * seasonal * (1.0 + u.growth).powf(t)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let mut s = String::from("format visitflow-synth 1\n");
        writeln!(s, "seed {}", c.seed).unwrap();
        writeln!(s, "units {}", c.units).unwrap();
        writeln!(s, "weeks {}", c.weeks).unwrap();
        writeln!(s, "start_week {}", c.start_week.label()).unwrap();
        writeln!(s, "noise {:?}", c.noise).unwrap();
        writeln!(s, "growth_scale {:?}", c.growth_scale).unwrap();
        writeln!(s, "seasonal_amplitude {:?}", c.seasonal_amplitude).unwrap();
        writeln!(s, "seasonal_period {:?}", c.seasonal_period).unwrap();
        writeln!(s, "growth_rule growth_scale*(5*location+1*education+0.5*location*(work-0.5))").unwrap();
        writeln!(s, "flow_rule round(base*factor*(1+amplitude*sin(2pi*(t+phase)/period))*(1+growth)^t*lognormal(noise))").unwrap();
        for class in c.industries.iter().copied().chain([IndustryClass::Unclassified]) {
            writeln!(s, "industry {} {} {:?}", class, representative_naics(class), base_level(class)).unwrap();
        }
        writeln!(s, "unit_columns id lat lon factor phase location growth {}", &SOCIO_COLUMNS[1..7].join(" ")).unwrap();
        for u in &self.units {
            write!(
                s,
                "unit {} {:?} {:?} {:?} {:?} {:?} {:?}",
                u.id, u.lat, u.lon, u.factor, u.phase, u.location_effect, u.growth
            )
            .unwrap();
            for v in u.composites {
                write!(s, " {v:?}").unwrap();
            }
            s.push('\n');
        }
        s
    }

    pub fn socio_rows(&self) -> Vec<SocioRow> {
        self.units
            .iter()
            .map(|u| SocioRow {
                unit_id: u.id.clone(),
                values: u.composites,
                lat: u.lat,
                lon: u.lon,
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub flows_csv: String,
    pub socio_csv: String,
    pub manifest: SynthManifest,
}

/// Builds a synthetic flow panel with known structure: units on a jittered
/// grid, seasonal weekly flows, and growth rates planted from location,
/// education and a location × work interaction.
pub fn generate_synthetic(config: &SynthConfig) -> Result<SynthOutput> {
    if config.units < 4 {
        return Err(Error::Parameter(format!("synthetic data needs at least 4 units, got {}", config.units)));
    }
    if config.weeks < 20 {
        return Err(Error::Parameter(format!("synthetic data needs at least 20 weeks, got {}", config.weeks)));
    }
    if config.industries.is_empty() || config.industries.contains(&IndustryClass::Unclassified) {
        return Err(Error::Parameter("industries must be a non-empty set of classified sectors".into()));
    }
    for (name, v) in [
        ("noise", config.noise),
        ("growth_scale", config.growth_scale),
        ("seasonal_amplitude", config.seasonal_amplitude),
    ] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Parameter(format!("{name} must be finite and ≥ 0, got {v}")));
        }
    }
    if config.seasonal_amplitude >= 1.0 || !(config.seasonal_period > 0.0) {
        return Err(Error::Parameter("seasonal amplitude must be < 1 and the period positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let cols = (config.units as f64).sqrt().ceil() as usize;
    let rows = config.units.div_ceil(cols);
    let mut units = Vec::with_capacity(config.units);
    for i in 0..config.units {
        let (r, c) = (i / cols, i % cols);
        let lat = 35.0 + 0.5 * r as f64 + rng.gen_range(-0.1..0.1);
        let lon = -100.0 + 0.5 * c as f64 + rng.gen_range(-0.1..0.1);
        let gx = if cols > 1 { c as f64 / (cols - 1) as f64 } else { 0.5 };
        let gy = if rows > 1 { r as f64 / (rows - 1) as f64 } else { 0.5 };
        let location_effect = 0.5 * (gx + gy) - 0.5;
        let composites: [f64; 6] = std::array::from_fn(|_| rng.gen_range(0.0..1.0));
        let growth = config.growth_scale
            * (5.0 * location_effect + composites[1] + 0.5 * location_effect * (composites[3] - 0.5));
        units.push(SynthUnit {
            id: format!("{:02}{:03}{:06}1", 10 + r, 1 + c, 100 + i),
            lat,
            lon,
            factor: rng.gen_range(0.5..1.5),
            phase: rng.gen_range(0.0..config.seasonal_period),
            location_effect,
            growth,
            composites,
        });
    }
    let mut weeks = vec![config.start_week];
    while weeks.len() < config.weeks {
        let next = weeks.last().expect("non-empty").next();
        weeks.push(next);
    }
    let manifest = SynthManifest {
        config: config.clone(),
        units,
        weeks,
    };

    let mut flows = FLOW_COLUMNS.join(",");
    flows.push('\n');
    let classes: Vec<IndustryClass> = config.industries.iter().copied().chain([IndustryClass::Unclassified]).collect();
    for (t, week) in manifest.weeks.iter().enumerate() {
        for (i, u) in manifest.units.iter().enumerate() {
            for (k, &class) in classes.iter().enumerate() {
                let z: f64 = rng.sample(StandardNormal);
                let noise = (config.noise * z - 0.5 * config.noise * config.noise).exp();
                let visits = (manifest.expected(i, class, t) * noise).round();
                if visits <= 0.0 {
                    continue;
                }
                writeln!(
                    flows,
                    "{},poi-{:04}-{},{},{},{},{:.6},{:.6}",
                    u.id,
                    i,
                    k,
                    representative_naics(class),
                    week.label(),
                    visits as u64,
                    u.lat + 0.01 * (k as f64 + 1.0),
                    u.lon - 0.01 * (k as f64 + 1.0),
                )
                .unwrap();
            }
        }
    }
    Ok(SynthOutput {
        flows_csv: flows,
        socio_csv: super::socio::socio_csv(&manifest.socio_rows()),
        manifest,
    })
}
