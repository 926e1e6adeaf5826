//! Pareto dominance, fast non-dominated sorting with crowding distances,
//! survivor selection, and the generator pool.

use std::cmp::Ordering;

use rand::seq::index;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::GeneratorGenome;

/// `a` dominates `b` under minimization: no worse anywhere, better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::LengthMismatch {
            expected: a.len(),
            found: b.len(),
        });
    }
    Ok(dominates_unchecked(a, b))
}

#[inline]
fn dominates_unchecked(a: &[f64], b: &[f64]) -> bool {
    let mut strictly = false;
    for (x, y) in a.iter().zip(b) {
        if x > y {
            return false;
        }
        if x < y {
            strictly = true;
        }
    }
    strictly
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoRanking {
    /// Front 1 first; indices ascending within a front.
    pub fronts: Vec<Vec<usize>>,
    /// Zero-based front index of every point.
    pub rank: Vec<usize>,
    /// Crowding distance within the point's own front.
    pub crowding: Vec<f64>,
}

/// Deb's fast non-dominated sort followed by per-front crowding distances.
pub fn fast_nondominated_sort<P: AsRef<[f64]>>(points: &[P]) -> ParetoRanking {
    let n = points.len();
    let mut dominated_by: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut count = vec![0usize; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let (a, b) = (points[i].as_ref(), points[j].as_ref());
            if dominates_unchecked(a, b) {
                dominated_by[i].push(j);
                count[j] += 1;
            } else if dominates_unchecked(b, a) {
                dominated_by[j].push(i);
                count[i] += 1;
            }
        }
    }
    let mut rank = vec![0usize; n];
    let mut fronts = Vec::new();
    let mut current: Vec<usize> = (0..n).filter(|&i| count[i] == 0).collect();
    while !current.is_empty() {
        let mut next = Vec::new();
        for &i in &current {
            rank[i] = fronts.len();
            for &j in &dominated_by[i] {
                count[j] -= 1;
                if count[j] == 0 {
                    next.push(j);
                }
            }
        }
        next.sort_unstable();
        fronts.push(current);
        current = next;
    }
    let mut crowding = vec![0.0; n];
    for front in &fronts {
        crowding_distance(points, front, &mut crowding);
    }
    ParetoRanking { fronts, rank, crowding }
}

fn crowding_distance<P: AsRef<[f64]>>(points: &[P], front: &[usize], out: &mut [f64]) {
    if front.len() <= 2 {
        for &i in front {
            out[i] = f64::INFINITY;
        }
        return;
    }
    let m = points[front[0]].as_ref().len();
    let mut order = front.to_vec();
    for obj in 0..m {
        let value = |i: usize| points[i].as_ref()[obj];
        order.sort_by(|&a, &b| value(a).total_cmp(&value(b)).then(a.cmp(&b)));
        let (lo, hi) = (value(order[0]), value(order[order.len() - 1]));
        out[order[0]] = f64::INFINITY;
        out[order[order.len() - 1]] = f64::INFINITY;
        let span = hi - lo;
        if span <= 0.0 {
            continue;
        }
        for w in order.windows(3) {
            out[w[1]] += (value(w[2]) - value(w[0])) / span;
        }
    }
}

/// Indices of the `max_size` survivors: whole fronts in order, the splitting
/// front cut by descending crowding distance. Returned ascending.
pub fn truncate_by_rank<P: AsRef<[f64]>>(points: &[P], max_size: usize) -> Vec<usize> {
    if points.len() <= max_size {
        return (0..points.len()).collect();
    }
    let ranking = fast_nondominated_sort(points);
    let mut keep = Vec::with_capacity(max_size);
    for front in &ranking.fronts {
        if keep.len() + front.len() <= max_size {
            keep.extend_from_slice(front);
            continue;
        }
        let mut rest = front.clone();
        rest.sort_by(|&a, &b| {
            ranking.crowding[b]
                .partial_cmp(&ranking.crowding[a])
                .unwrap_or(Ordering::Equal)
                .then(a.cmp(&b))
        });
        keep.extend(rest.into_iter().take(max_size - keep.len()));
        break;
    }
    keep.sort_unstable();
    keep
}

/// The evolution pool of generators.
#[derive(Debug, Clone)]
pub struct Pool {
    pub members: Vec<GeneratorGenome>,
    pub max_size: usize,
    /// Oldest members dropped before sorting when the objective is noisy.
    pub age_kill: usize,
    pub stochastic: bool,
}

impl Pool {
    pub fn new(max_size: usize, age_kill: usize, stochastic: bool) -> Result<Self> {
        if max_size < 2 {
            return Err(Error::InvalidArgument(format!("pool max_size {max_size} < 2")));
        }
        Ok(Self {
            members: Vec::new(),
            max_size,
            age_kill,
            stochastic,
        })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Fitness vectors of all members; panics on an unevaluated member.
    pub fn fitness(&self) -> Vec<&[f64]> {
        self.members
            .iter()
            .map(|m| m.fitness.as_deref().expect("pool members are evaluated"))
            .collect()
    }

    /// Front-1 objective vectors of the current pool.
    pub fn first_front(&self) -> Vec<Vec<f64>> {
        let fit = self.fitness();
        let ranking = fast_nondominated_sort(&fit);
        ranking
            .fronts
            .first()
            .map_or_else(Vec::new, |f| f.iter().map(|&i| fit[i].to_vec()).collect())
    }
}

/// Age removal (noisy objectives only) followed by rank-and-crowding
/// truncation to `max_size`.
pub fn select_survivors(mut pool: Pool) -> Result<Pool> {
    if pool.members.iter().any(|m| m.fitness.is_none()) {
        return Err(Error::InvalidArgument("pool member without fitness".into()));
    }
    if pool.stochastic && pool.age_kill > 0 {
        let removable = pool.age_kill.min(pool.members.len().saturating_sub(2));
        if removable > 0 {
            let mut by_age: Vec<usize> = (0..pool.members.len()).collect();
            by_age.sort_by_key(|&i| (pool.members[i].birth_iter, i));
            let mut drop = vec![false; pool.members.len()];
            for &i in by_age.iter().take(removable) {
                drop[i] = true;
            }
            let mut it = drop.into_iter();
            pool.members.retain(|_| !it.next().unwrap_or(false));
        }
    }
    if pool.members.len() > pool.max_size {
        let keep = truncate_by_rank(&pool.fitness(), pool.max_size);
        let mut flags = vec![false; pool.members.len()];
        for i in keep {
            flags[i] = true;
        }
        let mut it = flags.into_iter();
        pool.members.retain(|_| it.next().unwrap_or(false));
    }
    Ok(pool)
}

/// `k` distinct member indices, uniformly without replacement.
pub fn sample_parents<R: Rng + ?Sized>(pool_len: usize, k: usize, rng: &mut R) -> Result<Vec<usize>> {
    if k == 0 || k > pool_len {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} parents from {pool_len}"
        )));
    }
    Ok(index::sample(rng, pool_len, k).into_vec())
}
