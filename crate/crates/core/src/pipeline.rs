//! Glue from raw study data to pooled results.

use crate::composite::{compose_all, StudyCorrelation};
use crate::dataset::{apply_cluster, ClusterMap, Dataset};
use crate::error::{Error, Result};
use crate::meta::{pool_all, PooledTable};

/// Per-study composite correlations for every canonical pair.
pub fn study_correlations(dataset: &Dataset, cluster: &ClusterMap) -> Result<Vec<StudyCorrelation>> {
    let groups = apply_cluster(dataset.observations(), cluster)?;
    compose_all(&groups, &dataset.sample_sizes())
}

/// Pools the dataset over `variables`, which must belong to the cluster map.
pub fn pool_dataset(dataset: &Dataset, cluster: &ClusterMap, variables: &[String]) -> Result<PooledTable> {
    if variables.is_empty() {
        return Err(Error::Config("no variables selected".into()));
    }
    for v in variables {
        if !cluster.has_variable(v) {
            return Err(Error::UnknownVariable(v.clone()));
        }
    }
    pool_all(&study_correlations(dataset, cluster)?, variables)
}
