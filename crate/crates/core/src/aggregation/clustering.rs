use crate::peft::FlatUpdate;

use super::median::median_in_place;
use super::{weighted_mean, UpdateSet};

#[derive(Clone, Debug, PartialEq)]
pub struct ClippedResult {
    pub update: FlatUpdate,
    pub tau: f64,
    /// Client ids in the averaged cluster.
    pub kept: Vec<usize>,
}

/// Scales `x` by `min(1, tau / ‖x‖)`.
pub fn clip_to(x: &[f64], tau: f64) -> Vec<f64> {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= tau || norm == 0.0 {
        return x.to_vec();
    }
    let s = tau / norm;
    x.iter().map(|v| v * s).collect()
}

/// Pairwise cosine similarities; a zero vector has similarity 0 with
/// everything but itself.
pub fn cosine_matrix(points: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let norms: Vec<f64> = points.iter().map(|p| p.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let n = points.len();
    let mut sim = vec![vec![0.0; n]; n];
    for i in 0..n {
        sim[i][i] = 1.0;
        for j in i + 1..n {
            let s = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = points[i].iter().zip(&points[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            } else {
                0.0
            };
            sim[i][j] = s;
            sim[j][i] = s;
        }
    }
    sim
}

/// Agglomerative clustering on a similarity matrix with average linkage,
/// stopped at two clusters. Each cluster lists member indices in ascending
/// order; ties merge the pair whose lowest members come first.
pub fn average_linkage_two_clusters(sim: &[Vec<f64>]) -> Vec<Vec<usize>> {
    let mut clusters: Vec<Vec<usize>> = (0..sim.len()).map(|i| vec![i]).collect();
    while clusters.len() > 2 {
        let mut best = (0, 1, f64::NEG_INFINITY);
        for a in 0..clusters.len() {
            for b in a + 1..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a] {
                    for &j in &clusters[b] {
                        total += sim[i][j];
                    }
                }
                let link = total / (clusters[a].len() * clusters[b].len()) as f64;
                if link > best.2 {
                    best = (a, b, link);
                }
            }
        }
        let (a, b, _) = best;
        let merged = clusters.remove(b);
        clusters[a].extend(merged);
        clusters[a].sort_unstable();
    }
    clusters.sort_by_key(|c| c[0]);
    clusters
}

/// Norm clipping against the running median of all norms seen so far, then
/// a two-way cosine clustering; the larger cluster (ties: the one holding
/// the lowest client id) is averaged.
pub fn agg_clipped_clustering(set: &UpdateSet, norm_history: &mut Vec<f64>) -> ClippedResult {
    let entries = set.entries();
    norm_history.extend(entries.iter().map(|e| e.update.norm()));
    let tau = median_in_place(&mut norm_history.clone());
    let clipped: Vec<Vec<f64>> = entries.iter().map(|e| clip_to(e.update.as_slice(), tau)).collect();
    let members = if clipped.len() == 1 {
        vec![0]
    } else {
        let clusters = average_linkage_two_clusters(&cosine_matrix(&clipped));
        let pick = if clusters[1].len() > clusters[0].len() { 1 } else { 0 };
        clusters[pick].clone()
    };
    let mean = weighted_mean(set.dim(), members.iter().map(|&i| (1.0, clipped[i].as_slice())))
        .expect("a cluster is never empty");
    ClippedResult {
        update: FlatUpdate(mean),
        tau,
        kept: members.iter().map(|&i| entries[i].client_id).collect(),
    }
}
