//! Cluster levels and spatial autocorrelation statistics.

mod kmeans;
mod moran;
mod weights;

use std::fmt::Write as _;

pub use kmeans::{kmeans, level_bins, level_of, normalize_columns, KMeansResult, LevelBins, LEVEL_EDGES, MAX_ITERATIONS};
pub use moran::{
    bivariate_moran, global_moran, local_bivariate_moran, LocalClass, LocalUnit, MoranResult, DEFAULT_ALPHA,
    DEFAULT_PERMUTATIONS,
};
pub use weights::SpatialWeights;

use crate::error::{Error, Result};

/// Per-unit results table
/// `unit_id,value,level,kmeans_cluster,local_I,class,pseudo_p`.
pub fn spatial_csv(
    ids: &[String],
    values: &[f64],
    levels: &[u8],
    clusters: &[usize],
    local: &[LocalUnit],
) -> Result<String> {
    let n = ids.len();
    if [values.len(), levels.len(), clusters.len(), local.len()].iter().any(|&l| l != n) {
        return Err(Error::Contract("spatial_csv columns differ in length".into()));
    }
    let mut out = String::from("unit_id,value,level,kmeans_cluster,local_I,class,pseudo_p\n");
    for i in 0..n {
        writeln!(
            out,
            "{},{:.6},{},{},{:.6},{},{:.4}",
            ids[i], values[i], levels[i], clusters[i], local[i].statistic, local[i].class, local[i].pseudo_p
        )
        .unwrap();
    }
    Ok(out)
}
