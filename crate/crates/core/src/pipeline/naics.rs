use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum IndustryClass {
    Automotive,
    Cybersecurity,
    TransportLogistics,
    Unclassified,
}

impl IndustryClass {
    pub const CLASSIFIED: [IndustryClass; 3] = [Self::Automotive, Self::Cybersecurity, Self::TransportLogistics];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Automotive => "automotive",
            Self::Cybersecurity => "cybersecurity",
            Self::TransportLogistics => "transport",
            Self::Unclassified => "unclassified",
        }
    }
}

impl fmt::Display for IndustryClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IndustryClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "automotive" => Ok(Self::Automotive),
            "cybersecurity" => Ok(Self::Cybersecurity),
            "transport" | "transportation" | "logistics" | "transport_logistics" => Ok(Self::TransportLogistics),
            "unclassified" => Ok(Self::Unclassified),
            other => Err(Error::Parameter(format!(
                "unknown industry `{other}` (expected automotive, cybersecurity or transport)"
            ))),
        }
    }
}

/// NAICS prefixes of the three transportation-cybersecurity sectors.
pub const NAICS_TABLE: [(&str, IndustryClass); 17] = [
    ("336", IndustryClass::Automotive),
    ("4231", IndustryClass::Automotive),
    ("8111", IndustryClass::Automotive),
    ("54151", IndustryClass::Cybersecurity),
    ("541512", IndustryClass::Cybersecurity),
    ("541519", IndustryClass::Cybersecurity),
    ("56162", IndustryClass::Cybersecurity),
    ("561622", IndustryClass::Cybersecurity),
    ("541690", IndustryClass::Cybersecurity),
    ("481", IndustryClass::TransportLogistics),
    ("482", IndustryClass::TransportLogistics),
    ("483", IndustryClass::TransportLogistics),
    ("484", IndustryClass::TransportLogistics),
    ("485", IndustryClass::TransportLogistics),
    ("488", IndustryClass::TransportLogistics),
    ("492", IndustryClass::TransportLogistics),
    ("493", IndustryClass::TransportLogistics),
];

/// Longest-prefix match against [`NAICS_TABLE`].
pub fn classify_naics(code: &str) -> Result<IndustryClass> {
    if code.is_empty() || !code.bytes().all(|b| b.is_ascii_digit()) {
        return Err(Error::Format(format!("NAICS code `{code}` must be a digit string")));
    }
    Ok(NAICS_TABLE
        .iter()
        .filter(|(prefix, _)| code.starts_with(prefix))
        .max_by_key(|(prefix, _)| prefix.len())
        .map(|(_, class)| *class)
        .unwrap_or(IndustryClass::Unclassified))
}
