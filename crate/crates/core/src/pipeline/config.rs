use std::path::{Path, PathBuf};

use super::aggregate::Level;
use super::naics::IndustryClass;
use super::socio::COMPOSITES;
use crate::error::{Error, Result};
use crate::forecast::{BiTransGcnConfig, CONFIG_KEYS};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightsScheme {
    Knn,
    Contiguity,
}

/// What the attribution model explains per unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttributeTarget {
    /// Forecast next-week rate of change, percent.
    Predicted,
    /// Mean observed week-on-week rate of change, percent.
    Observed,
}

const PATH_KEYS: [&str; 4] = ["flows", "socio", "crosswalk", "contiguity"];

const RUN_KEYS: [&str; 14] = [
    "industry",
    "level",
    "normalize_socio",
    "split_ratio",
    "knn",
    "weights",
    "clusters",
    "permutations",
    "alpha",
    "moran_variable",
    "attribute_target",
    "ridge_lambda",
    "background_rows",
    "kernel_samples",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// Paths exactly as written; resolved against `base_dir`.
    pub flows: Option<String>,
    pub socio: Option<String>,
    pub crosswalk: Option<String>,
    pub contiguity: Option<String>,
    pub base_dir: PathBuf,
    pub industry: IndustryClass,
    pub level: Level,
    pub normalize_socio: bool,
    pub split_ratio: f64,
    pub knn: usize,
    pub weights: WeightsScheme,
    pub clusters: usize,
    pub permutations: usize,
    pub alpha: f64,
    /// `volume` or one of the socioeconomic composites.
    pub moran_variable: String,
    pub attribute_target: AttributeTarget,
    pub ridge_lambda: f64,
    pub background_rows: usize,
    /// 0 selects exact enumeration.
    pub kernel_samples: usize,
    pub model: BiTransGcnConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            flows: None,
            socio: None,
            crosswalk: None,
            contiguity: None,
            base_dir: PathBuf::from("."),
            industry: IndustryClass::Automotive,
            level: Level::Cbg,
            normalize_socio: false,
            split_ratio: 0.8,
            knn: 4,
            weights: WeightsScheme::Knn,
            clusters: 6,
            permutations: crate::stats::DEFAULT_PERMUTATIONS,
            alpha: crate::stats::DEFAULT_ALPHA,
            moran_variable: "volume".into(),
            attribute_target: AttributeTarget::Predicted,
            ridge_lambda: 1e-3,
            background_rows: crate::attribution::DEFAULT_BACKGROUND_ROWS,
            kernel_samples: 0,
            model: BiTransGcnConfig::default(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Parameter(format!("invalid value `{value}` for `{key}`")))
}

impl RunConfig {
    /// Parses `key = value` lines; `#` starts a comment. Relative paths are
    /// taken relative to `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut config = Self {
            base_dir: base_dir.to_path_buf(),
            ..Self::default()
        };
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config line {}: expected `key = value`", i + 1)))?;
            config.set(k.trim(), v.trim())?;
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let path = || (!value.is_empty()).then(|| value.to_string());
        match key {
            "flows" => self.flows = path(),
            "socio" => self.socio = path(),
            "crosswalk" => self.crosswalk = path(),
            "contiguity" => self.contiguity = path(),
            "industry" => self.industry = value.parse()?,
            "level" => self.level = value.parse()?,
            "normalize_socio" => self.normalize_socio = parse(key, value)?,
            "split_ratio" => self.split_ratio = parse(key, value)?,
            "knn" => self.knn = parse(key, value)?,
            "weights" => {
                self.weights = match value {
                    "knn" => WeightsScheme::Knn,
                    "contiguity" => WeightsScheme::Contiguity,
                    _ => return Err(Error::Parameter(format!("weights must be knn or contiguity, got `{value}`"))),
                }
            }
            "clusters" => self.clusters = parse(key, value)?,
            "permutations" => self.permutations = parse(key, value)?,
            "alpha" => self.alpha = parse(key, value)?,
            "moran_variable" => self.moran_variable = value.to_string(),
            "attribute_target" => {
                self.attribute_target = match value {
                    "predicted" => AttributeTarget::Predicted,
                    "observed" => AttributeTarget::Observed,
                    _ => {
                        return Err(Error::Parameter(format!(
                            "attribute_target must be predicted or observed, got `{value}`"
                        )))
                    }
                }
            }
            "ridge_lambda" => self.ridge_lambda = parse(key, value)?,
            "background_rows" => self.background_rows = parse(key, value)?,
            "kernel_samples" => self.kernel_samples = parse(key, value)?,
            k if CONFIG_KEYS.contains(&k) => self.model.set(k, value)?,
            other => return Err(Error::Parameter(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("override `{}` must be key=value", o.as_ref())))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Checks value ranges and that every referenced path exists.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if !(self.split_ratio > 0.0 && self.split_ratio < 1.0) {
            return Err(Error::Parameter(format!("split_ratio must be in (0, 1), got {}", self.split_ratio)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must be in [0, 1], got {}", self.alpha)));
        }
        if !(self.ridge_lambda >= 0.0 && self.ridge_lambda.is_finite()) {
            return Err(Error::Parameter(format!("ridge_lambda must be ≥ 0, got {}", self.ridge_lambda)));
        }
        for (name, v) in [("knn", self.knn), ("clusters", self.clusters), ("permutations", self.permutations), ("background_rows", self.background_rows)] {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if self.moran_variable != "volume" && !COMPOSITES.contains(&self.moran_variable.as_str()) {
            return Err(Error::Parameter(format!(
                "moran_variable must be volume or one of {}, got `{}`",
                COMPOSITES.join(", "),
                self.moran_variable
            )));
        }
        if self.weights == WeightsScheme::Contiguity && self.contiguity.is_none() {
            return Err(Error::Parameter("weights = contiguity needs a contiguity file".into()));
        }
        for (key, value) in PATH_KEYS.iter().zip([&self.flows, &self.socio, &self.crosswalk, &self.contiguity]) {
            if let Some(p) = value {
                let full = self.resolve(p);
                if !full.is_file() {
                    return Err(Error::Validation(format!("{key} path {} does not exist", full.display())));
                }
            }
        }
        Ok(())
    }

    /// `key = value` text that [`RunConfig::parse`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (key, value) in PATH_KEYS.iter().zip([&self.flows, &self.socio, &self.crosswalk, &self.contiguity]) {
            out.push_str(&format!("{key} = {}\n", value.as_deref().unwrap_or("")));
        }
        for key in RUN_KEYS {
            let v = match key {
                "industry" => self.industry.to_string(),
                "level" => self.level.to_string(),
                "normalize_socio" => self.normalize_socio.to_string(),
                "split_ratio" => format!("{:?}", self.split_ratio),
                "knn" => self.knn.to_string(),
                "weights" => match self.weights {
                    WeightsScheme::Knn => "knn".into(),
                    WeightsScheme::Contiguity => "contiguity".into(),
                },
                "clusters" => self.clusters.to_string(),
                "permutations" => self.permutations.to_string(),
                "alpha" => format!("{:?}", self.alpha),
                "moran_variable" => self.moran_variable.clone(),
                "attribute_target" => match self.attribute_target {
                    AttributeTarget::Predicted => "predicted".into(),
                    AttributeTarget::Observed => "observed".into(),
                },
                "ridge_lambda" => format!("{:?}", self.ridge_lambda),
                "background_rows" => self.background_rows.to_string(),
                "kernel_samples" => self.kernel_samples.to_string(),
                _ => unreachable!(),
            };
            out.push_str(&format!("{key} = {v}\n"));
        }
        for (k, v) in self.model.to_pairs() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_and_overrides() {
        let mut c = RunConfig::default();
        c.apply_overrides(&["epochs=3", "industry = cybersecurity", "alpha=0.1", "attribute_target=observed"])
            .unwrap();
        let back = RunConfig::parse(&c.to_text(), Path::new(".")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.model.epochs, 3);
        assert_eq!(back.industry, IndustryClass::Cybersecurity);
    }

    #[test]
    fn unknown_key_and_missing_path_rejected() {
        assert!(matches!(RunConfig::parse("colour = red\n", Path::new(".")), Err(Error::Parameter(_))));
        assert!(RunConfig::parse("epochs 3\n", Path::new(".")).is_err());
        let c = RunConfig::parse("flows = definitely/not/here.csv\n", Path::new(".")).unwrap();
        assert!(matches!(c.validate(), Err(Error::Validation(_))));
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("f.csv"), "x").unwrap();
        let c = RunConfig::parse("flows = f.csv # local\n", dir.path()).unwrap();
        c.validate().unwrap();
        let bad = RunConfig::parse("moran_variable = wealth\n", Path::new(".")).unwrap();
        assert!(bad.validate().is_err());
    }
}
