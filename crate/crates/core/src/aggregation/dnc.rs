use nalgebra::DMatrix;
use rand::seq::index;

use crate::peft::FlatUpdate;
use crate::rng;

use super::{weighted_mean, AggregationError, DncParams, UpdateSet};

/// Squared projections of the centered rows of `points` onto their top
/// right-singular direction. All zeros when the rows carry no variance.
pub fn dnc_scores(points: &[Vec<f64>]) -> Vec<f64> {
    let n = points.len();
    let d = points[0].len();
    let mut mu = vec![0.0; d];
    for p in points {
        for (m, v) in mu.iter_mut().zip(p) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centered = DMatrix::from_fn(n, d, |i, j| points[i][j] - mu[j]);
    let gram = &centered * centered.transpose();
    let eig = gram.symmetric_eigen();
    let (top, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |acc, (i, &l)| if l > acc.1 { (i, l) } else { acc });
    let u = eig.eigenvectors.column(top);
    let mut v = centered.transpose() * u;
    let norm = v.norm();
    if !(norm > 0.0) || !norm.is_finite() {
        return vec![0.0; n];
    }
    v /= norm;
    let proj = &centered * v;
    proj.iter().map(|p| p * p).collect()
}

/// Spectral filtering: repeatedly drops the ⌈filter_fraction·c⌉ updates that
/// project hardest onto the top singular direction of a random coordinate
/// subsample, then averages the survivors. Returns the output and the ids
/// of removed clients.
pub fn agg_dnc(set: &UpdateSet, params: &DncParams, round: u64) -> Result<(FlatUpdate, Vec<usize>), AggregationError> {
    let n = set.len();
    let c = params.expected_malicious;
    if c >= n {
        return Err(AggregationError::Param {
            param: "dnc.expected_malicious",
            message: format!("{c} must be below the number of updates ({n})"),
        });
    }
    let dim = set.dim();
    let sub = ((params.sub_dim_fraction * dim as f64).ceil() as usize).clamp(1, dim);
    let drop = ((params.filter_fraction * c as f64).ceil() as usize).min(n);
    let entries = set.entries();
    let mut removed = vec![false; n];
    for it in 0..params.n_iters {
        let mut rng = rng::stream(&[params.seed, round, it as u64]);
        let mut coords = index::sample(&mut rng, dim, sub).into_vec();
        coords.sort_unstable();
        let rows: Vec<Vec<f64>> = entries
            .iter()
            .map(|e| coords.iter().map(|&j| e.update.0[j]).collect())
            .collect();
        let scores = dnc_scores(&rows);
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
        for &i in &order[..drop] {
            removed[i] = true;
        }
    }
    let kept = entries.iter().zip(&removed).filter(|(_, r)| !**r);
    let mean = weighted_mean(dim, kept.map(|(e, _)| (1.0, e.update.as_slice()))).ok_or(AggregationError::EmptyBenignSet)?;
    let removed_ids = entries
        .iter()
        .zip(&removed)
        .filter(|(_, r)| **r)
        .map(|(e, _)| e.client_id)
        .collect();
    Ok((FlatUpdate(mean), removed_ids))
}

#[cfg(test)]
mod tests {
    use super::super::tests::set;
    use super::*;

    #[test]
    fn identical_updates_drop_highest_ids() {
        let p = [1.5, -2.0, 0.25, 4.0];
        let params = DncParams {
            expected_malicious: 2,
            ..DncParams::default()
        };
        let (out, removed) = agg_dnc(&set(&[&p, &p, &p, &p, &p]), &params, 0).unwrap();
        assert_eq!(out.0, p.to_vec());
        assert_eq!(removed, vec![3, 4]);
    }

    #[test]
    fn planted_outlier_scores_highest() {
        let rows = vec![vec![0.1, 0.0], vec![-0.1, 0.05], vec![0.0, -0.05], vec![30.0, 40.0]];
        let s = dnc_scores(&rows);
        let top = (0..4).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
        assert_eq!(top, 3);
    }

    #[test]
    fn too_many_expected_or_all_removed() {
        let s = set(&[&[0.0], &[1.0]]);
        let mut params = DncParams {
            expected_malicious: 2,
            ..DncParams::default()
        };
        assert!(matches!(agg_dnc(&s, &params, 0), Err(AggregationError::Param { .. })));
        params.expected_malicious = 1;
        params.filter_fraction = 2.0;
        assert_eq!(agg_dnc(&s, &params, 0), Err(AggregationError::EmptyBenignSet));
    }
}
