//! Server-side aggregation rules over client updates.
//!
//! Every rule first sorts its input by client id, so outputs never depend on
//! the order in which updates arrived.

mod clustering;
mod dnc;
mod geomed;
mod median;
pub mod verify;

use serde::{Deserialize, Serialize};

use crate::peft::FlatUpdate;

pub use clustering::{average_linkage_two_clusters, clip_to, cosine_matrix};
pub use dnc::dnc_scores;
pub use geomed::{geomed_objective, optimality_residual, smoothed_gradient, GEOMED_EPS};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AggregationError {
    #[error("empty update set")]
    Empty,
    #[error("update dimensions differ: client {client} has {got}, expected {expected}")]
    Dimension { client: usize, got: usize, expected: usize },
    #[error("duplicate client id {0}")]
    DuplicateClient(usize),
    #[error("total weight is zero")]
    ZeroWeight,
    #[error("invalid aggregator parameter {param}: {message}")]
    Param { param: &'static str, message: String },
    #[error("empty benign set: every update was filtered")]
    EmptyBenignSet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct UpdateEntry {
    pub client_id: usize,
    /// Example count m_k.
    pub weight: u64,
    pub update: FlatUpdate,
}

/// Nonempty, uniformly sized, sorted by client id.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateSet {
    entries: Vec<UpdateEntry>,
}

impl UpdateSet {
    pub fn new(mut entries: Vec<UpdateEntry>) -> Result<Self, AggregationError> {
        let first = entries.first().ok_or(AggregationError::Empty)?;
        let dim = first.update.len();
        for e in &entries {
            if e.update.len() != dim {
                return Err(AggregationError::Dimension {
                    client: e.client_id,
                    got: e.update.len(),
                    expected: dim,
                });
            }
        }
        entries.sort_by_key(|e| e.client_id);
        if let Some(w) = entries.windows(2).find(|w| w[0].client_id == w[1].client_id) {
            return Err(AggregationError::DuplicateClient(w[0].client_id));
        }
        Ok(Self { entries })
    }

    /// Assigns ids `0..n` in input order.
    pub fn from_weighted(items: Vec<(u64, FlatUpdate)>) -> Result<Self, AggregationError> {
        Self::new(
            items
                .into_iter()
                .enumerate()
                .map(|(client_id, (weight, update))| UpdateEntry {
                    client_id,
                    weight,
                    update,
                })
                .collect(),
        )
    }

    pub fn entries(&self) -> &[UpdateEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.entries[0].update.len()
    }

    pub fn updates(&self) -> Vec<&[f64]> {
        self.entries.iter().map(|e| e.update.as_slice()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregatorName {
    Mean,
    Median,
    Geomed,
    Dnc,
    Clippedclustering,
}

impl AggregatorName {
    pub const ALL: [AggregatorName; 5] = [
        AggregatorName::Mean,
        AggregatorName::Median,
        AggregatorName::Geomed,
        AggregatorName::Dnc,
        AggregatorName::Clippedclustering,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AggregatorName::Mean => "mean",
            AggregatorName::Median => "median",
            AggregatorName::Geomed => "geomed",
            AggregatorName::Dnc => "dnc",
            AggregatorName::Clippedclustering => "clippedclustering",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeomedParams {
    pub max_iters: usize,
    pub tolerance: f64,
}

impl Default for GeomedParams {
    fn default() -> Self {
        Self {
            max_iters: 1000,
            tolerance: 1e-10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DncParams {
    /// Expected number of malicious updates, c.
    pub expected_malicious: usize,
    pub sub_dim_fraction: f64,
    pub filter_fraction: f64,
    pub n_iters: usize,
    pub seed: u64,
}

impl Default for DncParams {
    fn default() -> Self {
        Self {
            expected_malicious: 1,
            sub_dim_fraction: 0.5,
            filter_fraction: 1.0,
            n_iters: 5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorSpec {
    pub name: AggregatorName,
    pub geomed: GeomedParams,
    pub dnc: DncParams,
}

impl Default for AggregatorSpec {
    fn default() -> Self {
        Self::named(AggregatorName::Mean)
    }
}

impl AggregatorSpec {
    pub fn named(name: AggregatorName) -> Self {
        Self {
            name,
            geomed: GeomedParams::default(),
            dnc: DncParams::default(),
        }
    }

    pub fn validate(&self) -> Result<(), AggregationError> {
        let param = |param, message: String| Err(AggregationError::Param { param, message });
        let g = &self.geomed;
        if g.max_iters == 0 {
            return param("geomed.max_iters", "must be >= 1".into());
        }
        if !(g.tolerance > 0.0) {
            return param("geomed.tolerance", format!("must be > 0, got {}", g.tolerance));
        }
        let d = &self.dnc;
        if !(d.sub_dim_fraction > 0.0 && d.sub_dim_fraction <= 1.0) {
            return param("dnc.sub_dim_fraction", format!("must be in (0, 1], got {}", d.sub_dim_fraction));
        }
        if !(d.filter_fraction >= 0.0 && d.filter_fraction.is_finite()) {
            return param("dnc.filter_fraction", format!("must be >= 0, got {}", d.filter_fraction));
        }
        if d.n_iters == 0 {
            return param("dnc.n_iters", "must be >= 1".into());
        }
        Ok(())
    }
}

/// Rule-specific details of one aggregation call.
#[derive(Clone, Debug, PartialEq)]
pub enum AggReport {
    Plain,
    Geomed { iterations: usize, converged: bool },
    Dnc { removed: Vec<usize> },
    Clipped { tau: f64, kept: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AggOutput {
    pub update: FlatUpdate,
    pub report: AggReport,
}

/// A configured aggregator plus the state it carries across rounds.
#[derive(Clone, Debug)]
pub struct Aggregator {
    spec: AggregatorSpec,
    norm_history: Vec<f64>,
}

impl Aggregator {
    pub fn new(spec: AggregatorSpec) -> Result<Self, AggregationError> {
        spec.validate()?;
        Ok(Self {
            spec,
            norm_history: Vec::new(),
        })
    }

    pub fn spec(&self) -> &AggregatorSpec {
        &self.spec
    }

    pub fn norm_history(&self) -> &[f64] {
        &self.norm_history
    }

    pub fn aggregate(&mut self, set: &UpdateSet, round: usize) -> Result<AggOutput, AggregationError> {
        match self.spec.name {
            AggregatorName::Mean => Ok(AggOutput {
                update: agg_mean(set)?,
                report: AggReport::Plain,
            }),
            AggregatorName::Median => Ok(AggOutput {
                update: agg_median(set),
                report: AggReport::Plain,
            }),
            AggregatorName::Geomed => {
                let r = agg_geomed(set, self.spec.geomed.max_iters, self.spec.geomed.tolerance)?;
                Ok(AggOutput {
                    update: r.point,
                    report: AggReport::Geomed {
                        iterations: r.iterations,
                        converged: r.converged,
                    },
                })
            }
            AggregatorName::Dnc => {
                let (update, removed) = agg_dnc(set, &self.spec.dnc, round as u64)?;
                Ok(AggOutput {
                    update,
                    report: AggReport::Dnc { removed },
                })
            }
            AggregatorName::Clippedclustering => {
                let r = agg_clipped_clustering(set, &mut self.norm_history);
                Ok(AggOutput {
                    update: r.update,
                    report: AggReport::Clipped { tau: r.tau, kept: r.kept },
                })
            }
        }
    }
}

/// Running weighted mean; exact when all inputs coincide.
pub(crate) fn weighted_mean<'a>(dim: usize, items: impl IntoIterator<Item = (f64, &'a [f64])>) -> Option<Vec<f64>> {
    let mut out = vec![0.0; dim];
    let mut total = 0.0;
    for (w, x) in items {
        if w == 0.0 {
            continue;
        }
        total += w;
        let r = w / total;
        for (m, v) in out.iter_mut().zip(x) {
            *m += r * (v - *m);
        }
    }
    (total > 0.0).then_some(out)
}

/// FedAvg: Σ (m_k / Σ m_j) Δθ_k.
pub fn agg_mean(set: &UpdateSet) -> Result<FlatUpdate, AggregationError> {
    weighted_mean(
        set.dim(),
        set.entries().iter().map(|e| (e.weight as f64, e.update.as_slice())),
    )
    .map(FlatUpdate)
    .ok_or(AggregationError::ZeroWeight)
}

pub use median::{agg_median, coordinate_median};

pub use geomed::{agg_geomed, GeomedResult};

pub use dnc::agg_dnc;

pub use clustering::{agg_clipped_clustering, ClippedResult};
