//! Small numeric toolbox for the report generators: least squares, moving
//! average, prominence-based peak picking with sub-sample refinement, and
//! rank correlation.

/// Ordinary least squares fit `y = slope * x + intercept`.
pub fn ols(xs: &[f64], ys: &[f64]) -> (f64, f64) {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two points to fit a line");
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        sxy += (x - mx) * (y - my);
    }
    assert!(sxx > 0.0, "x values are all identical");
    let slope = sxy / sxx;
    (slope, my - slope * mx)
}

/// Centered moving average with an odd window; the window shrinks
/// symmetrically near the edges.
pub fn moving_average(ys: &[f64], window: usize) -> Vec<f64> {
    assert!(window % 2 == 1, "window must be odd");
    let half = window / 2;
    let n = ys.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let k = half.min(i).min(n - 1 - i);
        let slice = &ys[i - k..=i + k];
        out.push(slice.iter().sum::<f64>() / slice.len() as f64);
    }
    out
}

/// A detected local maximum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Peak {
    pub index: usize,
    /// Peak position after parabolic refinement, in x units.
    pub x: f64,
    pub y: f64,
    pub prominence: f64,
}

/// Local maxima of `ys` with prominence at least `min_prominence`.
/// Plateaus count once (leftmost sample). `xs` provides positions for the
/// three-point parabolic refinement of each peak.
pub fn find_peaks(xs: &[f64], ys: &[f64], min_prominence: f64) -> Vec<Peak> {
    assert_eq!(xs.len(), ys.len());
    let n = ys.len();
    let mut peaks = Vec::new();
    if n < 3 {
        return peaks;
    }
    let mut i = 1;
    while i < n - 1 {
        if ys[i] < ys[i - 1] {
            i += 1;
            continue;
        }
        // Walk a plateau: candidate spans [i, j].
        let mut j = i;
        while j + 1 < n && ys[j + 1] == ys[i] {
            j += 1;
        }
        let is_peak = ys[i] > ys[i - 1] && j + 1 < n && ys[i] > ys[j + 1];
        if is_peak {
            let prominence = prominence_at(ys, i, j);
            if prominence >= min_prominence {
                let (x, y) = refine_parabolic(xs, ys, i, j);
                peaks.push(Peak { index: i, x, y, prominence });
            }
        }
        i = j + 1;
    }
    peaks
}

/// Prominence of the peak spanning `[i, j]`: height above the higher of the
/// two valleys separating it from taller terrain (or the array edge).
fn prominence_at(ys: &[f64], i: usize, j: usize) -> f64 {
    let h = ys[i];
    let mut left_min = f64::INFINITY;
    let mut k = i;
    while k > 0 {
        k -= 1;
        if ys[k] > h {
            break;
        }
        left_min = left_min.min(ys[k]);
    }
    if left_min.is_infinite() {
        left_min = h;
    }
    let mut right_min = f64::INFINITY;
    let mut k = j;
    while k + 1 < ys.len() {
        k += 1;
        if ys[k] > h {
            break;
        }
        right_min = right_min.min(ys[k]);
    }
    if right_min.is_infinite() {
        right_min = h;
    }
    h - left_min.max(right_min)
}

/// Three-point parabola through the samples around a peak; falls back to
/// the sample itself when the curvature vanishes. For plateaus the center
/// of the flat run is used.
fn refine_parabolic(xs: &[f64], ys: &[f64], i: usize, j: usize) -> (f64, f64) {
    if j > i {
        let mid = (xs[i] + xs[j]) / 2.0;
        return (mid, ys[i]);
    }
    let (y0, y1, y2) = (ys[i - 1], ys[i], ys[i + 1]);
    let denom = y0 - 2.0 * y1 + y2;
    if denom.abs() < f64::EPSILON * y1.abs().max(1.0) {
        return (xs[i], y1);
    }
    let delta = 0.5 * (y0 - y2) / denom;
    let dx = (xs[i + 1] - xs[i - 1]) / 2.0;
    let x = xs[i] + delta.clamp(-0.5, 0.5) * dx;
    let y = y1 - 0.25 * (y0 - y2) * delta;
    (x, y)
}

/// Spearman rank correlation with tie-corrected (average) ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    assert!(xs.len() >= 2, "need at least two observations");
    let rx = average_ranks(xs);
    let ry = average_ranks(ys);
    pearson(&rx, &ry)
}

fn average_ranks(vs: &[f64]) -> Vec<f64> {
    let n = vs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vs[a].partial_cmp(&vs[b]).expect("ranks need orderable values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && vs[order[j + 1]] == vs[order[i]] {
            j += 1;
        }
        // Average rank for the tie run [i, j], 1-based.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
        sxy += (x - mx) * (y - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    sxy / (sxx * syy).sqrt()
}
