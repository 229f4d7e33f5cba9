use rayon::prelude::*;

use super::{Feature, Match};

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Best and second-best `(index, distance)` of `query` among `pool`.
fn two_nearest(query: &Feature, pool: &[Feature]) -> Option<((usize, f64), f64)> {
    let mut best = (usize::MAX, f64::INFINITY);
    let mut second = f64::INFINITY;
    for (j, f) in pool.iter().enumerate() {
        let d = distance(&query.descriptor, &f.descriptor);
        if d < best.1 {
            second = best.1;
            best = (j, d);
        } else if d < second {
            second = d;
        }
    }
    (best.0 != usize::MAX).then_some((best, second))
}

/// Mutual nearest neighbours in descriptor space that also pass the ratio
/// test `best < ratio * second_best` in both directions.
pub fn match_features(a: &[Feature], b: &[Feature], ratio: f64) -> Vec<Match> {
    let fwd: Vec<_> = a.par_iter().map(|f| two_nearest(f, b)).collect();
    let bwd: Vec<_> = b.par_iter().map(|f| two_nearest(f, a)).collect();
    let passes = |best: f64, second: f64| second.is_infinite() || best < ratio * second;
    fwd.iter()
        .enumerate()
        .filter_map(|(i, nn)| {
            let ((j, d), second) = (*nn)?;
            let ((back, _), back_second) = bwd[j]?;
            (back == i && passes(d, second) && passes(d, back_second)).then_some(Match {
                index_a: i,
                index_b: j,
                distance: d,
            })
        })
        .collect()
}
