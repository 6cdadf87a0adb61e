use nalgebra::{DMatrix, DVector};

use crate::peft::FlatUpdate;

use super::median::coordinate_median;
use super::{AggregationError, UpdateSet};

/// Smoothing term in the Weiszfeld denominators.
pub const GEOMED_EPS: f64 = 1e-10;

/// An iterate within `VERTEX_RADIUS·(1 + ‖y‖)` of an input sits on it.
pub const VERTEX_RADIUS: f64 = 1e-9;

fn norm(y: &[f64]) -> f64 {
    y.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn dist(y: &[f64], x: &[f64]) -> f64 {
    y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeomedResult {
    pub point: FlatUpdate,
    pub iterations: usize,
    pub converged: bool,
}

fn smoothed_dist(y: &[f64], x: &[f64]) -> f64 {
    let d2: f64 = y.iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
    (d2 + GEOMED_EPS * GEOMED_EPS).sqrt()
}

/// Σ_k ‖y − x_k‖₂.
pub fn geomed_objective(y: &[f64], points: &[&[f64]]) -> f64 {
    points
        .iter()
        .map(|x| y.iter().zip(*x).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        .sum()
}

/// Gradient of Σ_k sqrt(‖y − x_k‖² + ε²).
pub fn smoothed_gradient(y: &[f64], points: &[&[f64]]) -> Vec<f64> {
    let mut g = vec![0.0; y.len()];
    for x in points {
        let s = smoothed_dist(y, x);
        for ((gi, yi), xi) in g.iter_mut().zip(y).zip(*x) {
            *gi += (yi - xi) / s;
        }
    }
    g
}

/// First-order optimality residual of `y` for Σ_k ‖y − x_k‖₂. Away from the
/// inputs this is the smoothed gradient norm. When `y` sits on `m` inputs
/// (within ten times the vertex radius), the smoothed gradient is dominated by rounding
/// in `y − x_k`, so the exact vertex condition ‖Σ_{others} unit(y − x_j)‖ ≤ m
/// is used instead and the residual is its excess.
pub fn optimality_residual(y: &[f64], points: &[&[f64]]) -> f64 {
    let radius = 10.0 * VERTEX_RADIUS * (1.0 + norm(y));
    let on: usize = points.iter().filter(|x| dist(y, x) <= radius).count();
    if on == 0 {
        return smoothed_gradient(y, points).iter().map(|g| g * g).sum::<f64>().sqrt();
    }
    let mut pull = vec![0.0; y.len()];
    for x in points {
        let d = dist(y, x);
        if d > radius {
            for ((p, yi), xi) in pull.iter_mut().zip(y).zip(*x) {
                *p += (yi - xi) / d;
            }
        }
    }
    (pull.iter().map(|v| v * v).sum::<f64>().sqrt() - on as f64).max(0.0)
}

fn smoothed_objective(y: &[f64], points: &[&[f64]]) -> f64 {
    points.iter().map(|x| smoothed_dist(y, x)).sum()
}

/// Weiszfeld iteration from the coordinatewise median, with the
/// Vardi–Zhang step at input points, followed by an exact vertex check and
/// a Newton polish in the affine hull of the inputs. Weiszfeld alone crawls
/// when the median sits on or next to an input.
///
/// `iterations` counts Weiszfeld steps. `converged` means the displacement
/// fell below `tol` or the polished point meets the optimality conditions.
pub fn agg_geomed(set: &UpdateSet, max_iters: usize, tol: f64) -> Result<GeomedResult, AggregationError> {
    if !(tol > 0.0) {
        return Err(AggregationError::Param {
            param: "geomed.tolerance",
            message: format!("must be > 0, got {tol}"),
        });
    }
    let points = set.updates();
    let (best, iterations, settled) = weiszfeld(&points, max_iters, tol);
    if let Some(v) = optimal_vertex(&best, &points) {
        return Ok(GeomedResult {
            point: FlatUpdate(v),
            iterations,
            converged: true,
        });
    }
    let polished = newton_polish(&best, &points);
    let point = if smoothed_objective(&polished, &points) <= smoothed_objective(&best, &points) {
        polished
    } else {
        best
    };
    let converged = settled || optimality_residual(&point, &points) <= POLISHED_RESIDUAL;
    Ok(GeomedResult {
        point: FlatUpdate(point),
        iterations,
        converged,
    })
}

/// Residual below which a polished point counts as converged.
const POLISHED_RESIDUAL: f64 = 1e-9;

/// Returns the best iterate, the number of steps, and whether the
/// displacement fell below `tol` (or an input was found optimal).
fn weiszfeld(points: &[&[f64]], max_iters: usize, tol: f64) -> (Vec<f64>, usize, bool) {
    let dim = points[0].len();
    let mut y = coordinate_median(points);
    let mut best = y.clone();
    let mut best_obj = smoothed_objective(&y, points);
    let mut next = vec![0.0; dim];
    for it in 1..=max_iters {
        let radius = VERTEX_RADIUS * (1.0 + norm(&y));
        next.iter_mut().for_each(|v| *v = 0.0);
        let mut denom = 0.0;
        let mut on = 0usize;
        let mut vertex: Option<&[f64]> = None;
        for x in points {
            if dist(&y, x) <= radius {
                on += 1;
                vertex = Some(x);
                continue;
            }
            let w = 1.0 / smoothed_dist(&y, x);
            denom += w;
            for (n, xi) in next.iter_mut().zip(*x) {
                *n += w * xi;
            }
        }
        if denom == 0.0 {
            return (y, it, true);
        }
        next.iter_mut().for_each(|v| *v /= denom);
        if let Some(v) = vertex {
            let pull = denom * dist(&next, &y);
            if pull <= on as f64 {
                return (v.to_vec(), it, true);
            }
            let t = on as f64 / pull;
            for (n, yi) in next.iter_mut().zip(&y) {
                *n = (1.0 - t) * *n + t * yi;
            }
        }
        let step = dist(&next, &y);
        std::mem::swap(&mut y, &mut next);
        let obj = smoothed_objective(&y, points);
        if obj < best_obj {
            best_obj = obj;
            best.copy_from_slice(&y);
        }
        if step < tol {
            return (best, it, true);
        }
    }
    (best, max_iters, false)
}

/// The input nearest to `y`, if it satisfies the vertex condition
/// ‖Σ_{x_j ≠ x_k} unit(x_k − x_j)‖ ≤ multiplicity of x_k.
fn optimal_vertex(y: &[f64], points: &[&[f64]]) -> Option<Vec<f64>> {
    let nearest = points
        .iter()
        .min_by(|a, b| dist(y, a).total_cmp(&dist(y, b)))?;
    let mut pull = vec![0.0; y.len()];
    let mut on = 0usize;
    for x in points {
        let d = dist(nearest, x);
        if d == 0.0 {
            on += 1;
            continue;
        }
        for ((p, a), b) in pull.iter_mut().zip(*nearest).zip(*x) {
            *p += (a - b) / d;
        }
    }
    (norm(&pull) <= on as f64).then(|| nearest.to_vec())
}

/// Newton's method on the smoothed objective, in an orthonormal basis of
/// the inputs' affine hull (at most `n − 1` dimensions).
fn newton_polish(y: &[f64], points: &[&[f64]]) -> Vec<f64> {
    let origin = points[0];
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let scale = points.iter().map(|x| dist(x, origin)).fold(0.0, f64::max);
    for x in &points[1..] {
        let mut v: Vec<f64> = x.iter().zip(origin).map(|(a, b)| a - b).collect();
        for _ in 0..2 {
            for q in &basis {
                let c: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= c * b);
            }
        }
        let n = norm(&v);
        if n > 1e-12 * scale {
            v.iter_mut().for_each(|a| *a /= n);
            basis.push(v);
        }
    }
    let m = basis.len();
    if m == 0 {
        return origin.to_vec();
    }
    let coords = |p: &[f64]| -> DVector<f64> {
        DVector::from_iterator(m, basis.iter().map(|q| q.iter().zip(p.iter().zip(origin)).map(|(a, (b, o))| a * (b - o)).sum()))
    };
    let z: Vec<DVector<f64>> = points.iter().map(|x| coords(x)).collect();
    let objective = |c: &DVector<f64>| -> f64 {
        z.iter().map(|zk| ((c - zk).norm_squared() + GEOMED_EPS * GEOMED_EPS).sqrt()).sum()
    };
    let mut c = coords(y);
    let mut f = objective(&c);
    for _ in 0..100 {
        let mut g = DVector::zeros(m);
        let mut h = DMatrix::zeros(m, m);
        for zk in &z {
            let v = &c - zk;
            let s = (v.norm_squared() + GEOMED_EPS * GEOMED_EPS).sqrt();
            g += &v / s;
            h += (DMatrix::identity(m, m) - &v * v.transpose() / (s * s)) / s;
        }
        if g.norm() <= 1e-14 * points.len() as f64 {
            break;
        }
        let dir = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -g.clone(),
        };
        let slope = g.dot(&dir);
        let mut t = 1.0;
        let mut moved = false;
        while t > 1e-12 {
            let trial = &c + &dir * t;
            let ft = objective(&trial);
            if ft <= f + 1e-4 * t * slope {
                c = trial;
                f = ft;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
    }
    let mut out = origin.to_vec();
    for (q, ci) in basis.iter().zip(c.iter()) {
        out.iter_mut().zip(q).for_each(|(o, a)| *o += ci * a);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::tests::set;
    use super::*;

    #[test]
    fn majority_point_wins() {
        let r = agg_geomed(&set(&[&[0.0, 0.0], &[0.0, 0.0], &[10.0, 0.0]]), 1000, 1e-10).unwrap();
        assert!(r.converged);
        assert!(r.point.norm() < 1e-9, "{:?}", r.point);
    }

    #[test]
    fn iteration_budget_is_reported() {
        let s = set(&[&[0.0, 0.0], &[1.0, 0.0], &[0.0, 3.0], &[5.0, 7.0]]);
        let r = agg_geomed(&s, 1, 1e-15).unwrap();
        assert_eq!(r.iterations, 1);
        let points = s.updates();
        assert_eq!(r.converged, optimality_residual(&r.point.0, &points) <= POLISHED_RESIDUAL);
        assert!(agg_geomed(&s, 10, 0.0).is_err());
    }
}
