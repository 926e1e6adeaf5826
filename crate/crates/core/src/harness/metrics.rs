//! Front quality indicators for two-objective minimization.

use crate::error::{Error, Result};

/// Exact dominated area of a two-objective front.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hypervolume {
    pub value: f64,
    /// Points that do not strictly dominate the reference point.
    pub excluded: usize,
}

/// Area of the union of boxes `[f, ref]` by sorting on the first objective
/// and sweeping the staircase.
pub fn hypervolume_2d<P: AsRef<[f64]>>(front: &[P], reference: [f64; 2]) -> Result<Hypervolume> {
    let mut pts = Vec::with_capacity(front.len());
    let mut excluded = 0;
    for p in front {
        let p = p.as_ref();
        if p.len() != 2 {
            return Err(Error::LengthMismatch {
                expected: 2,
                found: p.len(),
            });
        }
        if p[0] < reference[0] && p[1] < reference[1] {
            pts.push([p[0], p[1]]);
        } else {
            excluded += 1;
        }
    }
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    let mut stairs: Vec<[f64; 2]> = Vec::with_capacity(pts.len());
    for p in pts {
        if stairs.last().is_none_or(|s| p[1] < s[1]) {
            stairs.push(p);
        }
    }
    let mut value = 0.0;
    for (i, s) in stairs.iter().enumerate() {
        let right = stairs.get(i + 1).map_or(reference[0], |n| n[0]);
        value += (right - s[0]) * (reference[1] - s[1]);
    }
    Ok(Hypervolume { value, excluded })
}

/// Mean distance from each true-front point to its nearest obtained point.
pub fn igd<P: AsRef<[f64]>, Q: AsRef<[f64]>>(front: &[P], true_front: &[Q]) -> Result<f64> {
    if front.is_empty() || true_front.is_empty() {
        return Err(Error::InvalidArgument("igd needs two non-empty fronts".into()));
    }
    let total: f64 = true_front
        .iter()
        .map(|t| {
            front
                .iter()
                .map(|p| {
                    t.as_ref()
                        .iter()
                        .zip(p.as_ref())
                        .map(|(a, b)| (a - b).powi(2))
                        .sum::<f64>()
                        .sqrt()
                })
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Ok(total / true_front.len() as f64)
}

/// Mean and sample standard deviation; zero deviation for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
