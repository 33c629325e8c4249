use std::cmp::Ordering;

/// `a` is no worse everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> bool {
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        strict |= x < y;
    }
    strict
}

fn lex(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// Indices of the non-dominated points, ascending. Equal points are all kept.
///
/// After a lexicographic sort a point can only be dominated by an earlier
/// one, and anything a dominated point dominates is also dominated by its
/// dominator, so each point is checked against the front found so far.
pub fn pareto_front(points: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| lex(&points[i], &points[j]).then(i.cmp(&j)));
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| dominates(&points[f], &points[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// Lebesgue measure of the region weakly dominated by `points` and bounded
/// by `reference`. Points not strictly below the reference everywhere
/// contribute nothing.
pub fn hypervolume(points: &[Vec<f64>], reference: &[f64]) -> f64 {
    let inside: Vec<Vec<f64>> = points
        .iter()
        .filter(|p| p.iter().zip(reference).all(|(x, r)| x < r))
        .cloned()
        .collect();
    // Only the distinct non-dominated points, in a canonical order, so the
    // value does not depend on dominated points or input order.
    let mut front: Vec<&[f64]> = pareto_front(&inside)
        .into_iter()
        .map(|i| inside[i].as_slice())
        .collect();
    front.sort_by(|a, b| lex(a, b));
    front.dedup();
    slice_volume(front, reference)
}

fn slice_volume(mut pts: Vec<&[f64]>, reference: &[f64]) -> f64 {
    let d = reference.len();
    if pts.is_empty() {
        return 0.0;
    }
    if d == 1 {
        return reference[0] - pts.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
    }
    pts.sort_by(|a, b| a[d - 1].total_cmp(&b[d - 1]).then_with(|| lex(a, b)));
    let mut total = 0.0;
    for i in 0..pts.len() {
        let top = if i + 1 < pts.len() {
            pts[i + 1][d - 1]
        } else {
            reference[d - 1]
        };
        let height = top - pts[i][d - 1];
        if height > 0.0 {
            let proj: Vec<&[f64]> = pts[..=i].iter().map(|p| &p[..d - 1]).collect();
            total += height * slice_volume(proj, &reference[..d - 1]);
        }
    }
    total
}
