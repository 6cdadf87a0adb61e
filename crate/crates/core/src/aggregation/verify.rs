//! Runtime checks of an aggregator's output against direct recomputation.
//! Used by the `aggcheck` and `selfcheck` commands.

use super::clustering::clip_to;
use super::geomed::{geomed_objective, optimality_residual};
use super::{AggOutput, AggReport, AggregatorName, UpdateSet};

pub const MEAN_TOL: f64 = 1e-12;
pub const GRADIENT_TOL: f64 = 1e-6;

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn plain_mean(points: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; points[0].len()];
    for p in points {
        for (o, v) in out.iter_mut().zip(*p) {
            *o += v;
        }
    }
    out.iter().map(|v| v / points.len() as f64).collect()
}

fn close(what: &str, got: &[f64], want: &[f64], tol: f64) -> Result<(), String> {
    let diff = max_abs_diff(got, want);
    if diff <= tol {
        Ok(())
    } else {
        Err(format!("{what}: max deviation {diff:e} exceeds {tol:e}"))
    }
}

/// Checks `out` for the rule `name` on `set`.
pub fn verify(name: AggregatorName, set: &UpdateSet, out: &AggOutput, geomed_tol: f64) -> Result<(), String> {
    let points = set.updates();
    let got = out.update.as_slice();
    match (name, &out.report) {
        (AggregatorName::Mean, _) => {
            let total: f64 = set.entries().iter().map(|e| e.weight as f64).sum();
            let mut want = vec![0.0; set.dim()];
            for e in set.entries() {
                for (w, v) in want.iter_mut().zip(e.update.as_slice()) {
                    *w += e.weight as f64 * v;
                }
            }
            want.iter_mut().for_each(|w| *w /= total);
            close("weighted sum", got, &want, MEAN_TOL)
        }
        (AggregatorName::Median, _) => {
            for (j, &g) in got.iter().enumerate() {
                let mut col: Vec<f64> = points.iter().map(|p| p[j]).collect();
                col.sort_by(f64::total_cmp);
                let n = col.len();
                let want = if n % 2 == 1 { col[n / 2] } else { (col[n / 2 - 1] + col[n / 2]) / 2.0 };
                if g != want {
                    return Err(format!("coordinate {j}: {g} differs from sorted middle {want}"));
                }
            }
            Ok(())
        }
        (AggregatorName::Geomed, AggReport::Geomed { .. }) => {
            let residual = optimality_residual(got, &points);
            if residual > GRADIENT_TOL {
                return Err(format!("optimality residual {residual:e} exceeds {GRADIENT_TOL:e}"));
            }
            let obj = geomed_objective(got, &points);
            for (k, p) in points.iter().enumerate() {
                let other = geomed_objective(p, &points);
                if obj > other + geomed_tol {
                    return Err(format!("objective {obj} exceeds input {k}'s {other}"));
                }
            }
            Ok(())
        }
        (AggregatorName::Dnc, AggReport::Dnc { removed }) => {
            let kept: Vec<&[f64]> = set
                .entries()
                .iter()
                .filter(|e| !removed.contains(&e.client_id))
                .map(|e| e.update.as_slice())
                .collect();
            if kept.is_empty() {
                return Err("no update survived filtering".into());
            }
            close("mean of retained updates", got, &plain_mean(&kept), MEAN_TOL)
        }
        (AggregatorName::Clippedclustering, AggReport::Clipped { tau, kept }) => {
            let norm = out.update.norm();
            if norm > tau * (1.0 + MEAN_TOL) {
                return Err(format!("output norm {norm} exceeds clip bound {tau}"));
            }
            let clipped: Vec<Vec<f64>> = set
                .entries()
                .iter()
                .filter(|e| kept.contains(&e.client_id))
                .map(|e| clip_to(e.update.as_slice(), *tau))
                .collect();
            if clipped.is_empty() {
                return Err("kept cluster is empty".into());
            }
            let refs: Vec<&[f64]> = clipped.iter().map(Vec::as_slice).collect();
            close("mean of kept cluster", got, &plain_mean(&refs), MEAN_TOL)
        }
        (name, report) => Err(format!("report {report:?} does not belong to {}", name.as_str())),
    }
}
