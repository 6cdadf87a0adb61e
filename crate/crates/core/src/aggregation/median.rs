use crate::peft::FlatUpdate;

use super::UpdateSet;

/// Per-coordinate median of `points`; an even count averages the two middle values.
pub fn coordinate_median(points: &[&[f64]]) -> Vec<f64> {
    let dim = points.first().map_or(0, |p| p.len());
    let mut column = Vec::with_capacity(points.len());
    (0..dim)
        .map(|j| {
            column.clear();
            column.extend(points.iter().map(|p| p[j]));
            median_in_place(&mut column)
        })
        .collect()
}

/// Median of a nonempty slice, sorting it in place.
pub(crate) fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    values.sort_by(f64::total_cmp);
    if n % 2 == 1 {
        values[n / 2]
    } else {
        let (lo, hi) = (values[n / 2 - 1], values[n / 2]);
        (lo + hi) / 2.0
    }
}

/// Unweighted coordinatewise median.
pub fn agg_median(set: &UpdateSet) -> FlatUpdate {
    FlatUpdate(coordinate_median(&set.updates()))
}
