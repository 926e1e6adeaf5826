//! Fast invariant checks runnable from the command line.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::evolution::{dominates, fast_nondominated_sort};
use crate::harness::metrics::hypervolume_2d;
use crate::models::{build_critic, ArchMode, NetworkArch};
use crate::nn::{boundary_map, BoundaryKind, Tensor};
use crate::optimizers::{run, Algorithm, RunConfig};
use crate::problems::{Bounds, Problem, ProblemKind};
use crate::surrogate::{latin_hypercube, ReplayBuffer};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

type CheckFn = fn() -> Result<(bool, String)>;

/// Runs every check; a check that errors counts as failed.
pub fn selftest() -> Vec<Check> {
    let checks: [(&'static str, CheckFn); 8] = [
        ("gradients_match_finite_differences", gradients),
        ("nondominated_sort_matches_brute_force", sorting),
        ("hypervolume_matches_monte_carlo", hypervolume),
        ("replay_buffer_is_fifo", buffer),
        ("boundary_maps_into_box", boundary),
        ("latin_hypercube_is_stratified", lhc),
        ("budget_is_spent_exactly", budget),
        ("seeded_runs_are_deterministic", determinism),
    ];
    checks
        .into_iter()
        .map(|(name, f)| match f() {
            Ok((passed, detail)) => Check { name, passed, detail },
            Err(e) => Check {
                name,
                passed: false,
                detail: format!("error: {e}"),
            },
        })
        .collect()
}

fn gradients() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut mlp = NetworkArch::mlp(3, 1, 3, 5);
    mlp.mode = ArchMode::Mlp;
    let mut tb = NetworkArch::mlp(4, 1, 2, 6);
    tb.mode = ArchMode::TrunkBranch;
    tb.branches = 2;
    tb.embed_dim = 4;
    tb.heads = 2;
    let mut worst: f64 = 0.0;
    for arch in [mlp, tb] {
        let mut critic = build_critic(&arch, 0, &mut rng)?;
        let rows: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..arch.input_dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        let x = Tensor::from_rows(&rows)?;
        let (out, tape) = critic.net.forward(&critic.params, &x)?;
        let grads = critic
            .net
            .backward(&critic.params, &tape, &Tensor::filled(out.shape(), 1.0))?;
        let h = 1e-6;
        for i in 0..critic.params.len() {
            for j in 0..critic.params.tensor(i).len() {
                let orig = critic.params.tensor(i).data()[j];
                critic.params.tensor_mut(i).data_mut()[j] = orig + h;
                let up = critic.net.predict(&critic.params, &x)?.sum();
                critic.params.tensor_mut(i).data_mut()[j] = orig - h;
                let down = critic.net.predict(&critic.params, &x)?.sum();
                critic.params.tensor_mut(i).data_mut()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads.params[i].data()[j];
                let err = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-4);
                worst = worst.max(err);
            }
        }
    }
    Ok((worst < 1e-4, format!("worst relative error {worst:.2e}")))
}

fn brute_force_ranks(points: &[Vec<f64>]) -> Result<Vec<usize>> {
    let mut rank = vec![usize::MAX; points.len()];
    let mut level = 0;
    while rank.contains(&usize::MAX) {
        let mut current = Vec::new();
        for i in 0..points.len() {
            if rank[i] != usize::MAX {
                continue;
            }
            let mut dominated = false;
            for j in 0..points.len() {
                if rank[j] == usize::MAX && dominates(&points[j], &points[i])? {
                    dominated = true;
                    break;
                }
            }
            if !dominated {
                current.push(i);
            }
        }
        for i in current {
            rank[i] = level;
        }
        level += 1;
    }
    Ok(rank)
}

fn sorting() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let n = rng.gen_range(1..=32);
        let m = rng.gen_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.gen_range(0..5) as f64).collect())
            .collect();
        if fast_nondominated_sort(&points).rank != brute_force_ranks(&points)? {
            return Ok((false, format!("case {case} differs")));
        }
    }
    Ok((true, "100 instances".into()))
}

fn hypervolume() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let samples = 100_000;
    let mut worst: f64 = 0.0;
    for _ in 0..5 {
        let front: Vec<[f64; 2]> = (0..rng.gen_range(1..10))
            .map(|_| [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)])
            .collect();
        let exact = hypervolume_2d(&front, [1.0, 1.0])?.value;
        let hits = (0..samples)
            .filter(|_| {
                let s = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
                front.iter().any(|p| p[0] <= s[0] && p[1] <= s[1])
            })
            .count();
        worst = worst.max((exact - hits as f64 / samples as f64).abs());
    }
    Ok((worst < 1e-2, format!("worst |exact - estimate| {worst:.2e}")))
}

fn buffer() -> Result<(bool, String)> {
    let mut buf = ReplayBuffer::new(5, 1)?;
    for i in 0..12u64 {
        buf.push(vec![i as f64], vec![0.0], i)?;
    }
    let kept: Vec<u64> = buf.iter().map(|e| e.iteration).collect();
    let ok = buf.len() == 5 && kept == [7, 8, 9, 10, 11] && buf.evicted() == 7;
    Ok((ok, format!("kept iterations {kept:?}")))
}

fn boundary() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y: Vec<f64> = (0..100_000).map(|_| rng.gen_range(-50.0..50.0)).collect();
    let lower = vec![-2.0; y.len()];
    let upper = vec![3.0; y.len()];
    let mut ok = true;
    for kind in [BoundaryKind::Tanh, BoundaryKind::Sin] {
        ok &= boundary_map(&y, &lower, &upper, kind)
            .iter()
            .all(|v| (-2.0..=3.0).contains(v));
    }
    Ok((ok, "100000 samples per kind".into()))
}

fn lhc() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bounds = Bounds {
        lower: vec![-1.0, 0.0, 10.0],
        upper: vec![1.0, 4.0, 11.0],
    };
    let n = 17;
    let pts = latin_hypercube(n, &bounds, &mut rng)?;
    let mut ok = pts.len() == n;
    for i in 0..bounds.dim() {
        let mut strata: Vec<usize> = pts
            .iter()
            .map(|p| (((p[i] - bounds.lower[i]) / bounds.width(i)) * n as f64).floor() as usize)
            .collect();
        strata.sort_unstable();
        ok &= strata == (0..n).collect::<Vec<_>>();
    }
    Ok((ok, format!("{n} points, one per stratum per axis")))
}

fn tiny(algorithm: Algorithm, budget: u64) -> RunConfig {
    let mut cfg = RunConfig::new(algorithm, budget, 7);
    cfg.geo.pool_size = 4;
    cfg.geo.parents = 2;
    cfg.geo.mutation_steps = 2;
    cfg.geo.width = Some(8);
    cfg.geo.critic_width = Some(8);
    cfg.geo.pretrain_epochs = 2;
    cfg.geo.critic_epochs = 1;
    cfg.ga.population = 6;
    cfg.lsm.local_samples = 3;
    cfg
}

fn budget() -> Result<(bool, String)> {
    let mut spent = Vec::new();
    for alg in [
        Algorithm::Geo,
        Algorithm::GeoOneLayer,
        Algorithm::Ga,
        Algorithm::Cmaes,
        Algorithm::Lsm,
    ] {
        let mut problem = Problem::new(ProblemKind::Sphere, 2)?;
        let res = run(&tiny(alg, 97), &mut problem)?;
        spent.push((alg, problem.calls(), res.calls));
    }
    let ok = spent.iter().all(|&(_, a, b)| a == 97 && b == 97);
    Ok((ok, format!("{spent:?}")))
}

fn determinism() -> Result<(bool, String)> {
    let once = || -> Result<_> {
        let mut problem = Problem::new(ProblemKind::Zdt1, 3)?;
        let res = run(&tiny(Algorithm::Geo, 80), &mut problem)?;
        Ok((res.final_population, res.front_trace.len()))
    };
    let (a, b) = (once()?, once()?);
    let same = a.1 == b.1
        && a.0.len() == b.0.len()
        && a.0.iter().zip(&b.0).all(|(p, q)| {
            p.0.iter().zip(&q.0).all(|(u, v)| u.to_bits() == v.to_bits())
                && p.1.iter().zip(&q.1).all(|(u, v)| u.to_bits() == v.to_bits())
        });
    Ok((same, "two GEO runs on zdt1, bitwise".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_checks_pass() {
        for c in selftest() {
            assert!(c.passed, "{}: {}", c.name, c.detail);
        }
    }

    #[test]
    fn brute_force_reference() {
        let pts = vec![vec![1.0, 1.0], vec![0.0, 2.0], vec![2.0, 2.0], vec![1.0, 1.0]];
        assert_eq!(brute_force_ranks(&pts).unwrap(), [0, 0, 1, 0]);
    }
}
