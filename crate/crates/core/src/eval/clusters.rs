use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingSpace, Metric};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedCluster {
    pub seed: String,
    pub neighbors: Vec<String>,
    /// Mean of `1 - cos(seed, neighbour)` in the evaluated space.
    pub local_dist: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterReport {
    pub clusters: Vec<SeedCluster>,
    pub overall: f64,
    /// Distinct words over all seeds and neighbours.
    pub unique_points: usize,
}

impl ClusterReport {
    /// Distinct words with the index of the first cluster they appear in;
    /// seeds come before neighbours.
    pub fn points(&self) -> Vec<(String, usize)> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for (c, cl) in self.clusters.iter().enumerate() {
            if seen.insert(cl.seed.clone()) {
                out.push((cl.seed.clone(), c));
            }
        }
        for (c, cl) in self.clusters.iter().enumerate() {
            for n in &cl.neighbors {
                if seen.insert(n.clone()) {
                    out.push((n.clone(), c));
                }
            }
        }
        out
    }
}

/// Picks the `k` nearest neighbours of each seed in `neighbor_source`, then
/// measures their mean cosine distance to the seed in `space`.
pub fn cluster_report(
    space: &EmbeddingSpace,
    seeds: &[String],
    k: usize,
    neighbor_source: &EmbeddingSpace,
) -> Result<ClusterReport> {
    if seeds.is_empty() || k == 0 {
        return Err(Error::InvalidArgument("cluster report needs seeds and k > 0".into()));
    }
    let mut clusters = Vec::with_capacity(seeds.len());
    for seed in seeds {
        let query = neighbor_source
            .vector(seed)
            .ok_or_else(|| Error::OutOfVocabulary(seed.clone()))?;
        if !space.contains(seed) {
            return Err(Error::OutOfVocabulary(seed.clone()));
        }
        let want = (k + 1).min(neighbor_source.len());
        let neighbors: Vec<String> = neighbor_source
            .nearest_neighbors(query, want, Metric::Cosine)?
            .into_iter()
            .filter(|n| &n.word != seed)
            .take(k)
            .map(|n| n.word)
            .collect();
        if neighbors.is_empty() {
            return Err(Error::InsufficientData(format!("{seed} has no neighbours")));
        }
        let mut total = 0.0;
        for n in &neighbors {
            total += 1.0 - space.cosine(seed, n)?;
        }
        clusters.push(SeedCluster {
            seed: seed.clone(),
            local_dist: (total / neighbors.len() as f64).clamp(0.0, 2.0),
            neighbors,
        });
    }
    let overall = clusters.iter().map(|c| c.local_dist).sum::<f64>() / clusters.len() as f64;
    let mut report = ClusterReport {
        clusters,
        overall,
        unique_points: 0,
    };
    report.unique_points = report.points().len();
    Ok(report)
}

/// Mean Euclidean seed-to-neighbour distance per cluster in a 2-D layout.
///
/// `points` and `coords` must come from [`ClusterReport::points`] and the
/// matching projection.
pub fn planar_local_dist(report: &ClusterReport, points: &[(String, usize)], coords: &[[f64; 2]]) -> Result<Vec<f64>> {
    if points.len() != coords.len() {
        return Err(Error::DimensionMismatch {
            expected: points.len(),
            actual: coords.len(),
        });
    }
    let pos = |w: &str| {
        points
            .iter()
            .position(|(p, _)| p == w)
            .map(|i| coords[i])
            .ok_or_else(|| Error::OutOfVocabulary(w.to_string()))
    };
    report
        .clusters
        .iter()
        .map(|c| {
            let s = pos(&c.seed)?;
            let mut total = 0.0;
            for n in &c.neighbors {
                let p = pos(n)?;
                total += ((s[0] - p[0]).powi(2) + (s[1] - p[1]).powi(2)).sqrt();
            }
            Ok(total / c.neighbors.len() as f64)
        })
        .collect()
}
