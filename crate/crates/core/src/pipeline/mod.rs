pub mod aggregate;
pub mod config;
pub mod ingest;
pub mod naics;
pub mod run;
pub mod socio;
pub mod synth;

pub use aggregate::{aggregate, parse_crosswalk, Aggregated, Level, SparsityReport};
pub use ingest::{ingest, ingest_str, FlowRecord, IngestReport, IsoWeek, Rejection, FLOW_COLUMNS};
pub use naics::{classify_naics, IndustryClass, NAICS_TABLE};
pub use socio::{composites, parse_socio, read_socio, socio_csv, SocioRow, COMPOSITES, SOCIO_COLUMNS, SUBVARIABLES};
pub use synth::{generate_synthetic, representative_naics, SynthConfig, SynthManifest, SynthOutput, SynthUnit};
pub use config::{AttributeTarget, RunConfig, WeightsScheme};
pub use run::{Panel, Run, REPORT_FILES};
