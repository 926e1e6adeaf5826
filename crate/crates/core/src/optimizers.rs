//! The GEO main loop and three baselines: a real-coded genetic algorithm,
//! CMA-ES, and a local surrogate method (LSM).
//!
//! Every algorithm spends exactly `budget` evaluations of the problem,
//! counting initialization samples.

use std::fmt;
use std::str::FromStr;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::evolution::{fast_nondominated_sort, sample_parents, select_survivors, truncate_by_rank, Pool};
use crate::models::{
    build_critic, build_generators, generate, mutate_generator, sample_latent, ArchMode, CriticModel, NetworkArch,
    Sense,
};
use crate::nn::{adam_step, Activation, BoundaryKind, BoundaryLayer, InitScheme, LayerSpec, Network, Tensor};
use crate::problems::{random_point, Bounds, Problem};
use crate::surrogate::{latin_hypercube, train_critics, ReplayBuffer};
use crate::{ObjectiveVector, SearchPoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    Geo,
    /// GEO with a single dense layer as generator.
    GeoOneLayer,
    Ga,
    Cmaes,
    Lsm,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::Geo,
        Algorithm::GeoOneLayer,
        Algorithm::Ga,
        Algorithm::Cmaes,
        Algorithm::Lsm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Geo => "geo",
            Algorithm::GeoOneLayer => "geo-1layer",
            Algorithm::Ga => "ga",
            Algorithm::Cmaes => "cmaes",
            Algorithm::Lsm => "lsm",
        }
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::UnknownAlgorithm(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeoConfig {
    pub pool_size: usize,
    /// Parents sampled per iteration; each yields one mutant per objective.
    pub parents: usize,
    pub mutation_steps: usize,
    /// One learning rate is drawn uniformly from this set per mutant.
    pub lr_set: Vec<f64>,
    /// Defaults to `50 · parents · objectives`.
    pub buffer_len: Option<usize>,
    pub critic_epochs: usize,
    pub critic_batch: usize,
    pub critic_lr: f64,
    pub pretrain_epochs: usize,
    /// Defaults to `min(10 · d, 2000)`.
    pub init_samples: Option<usize>,
    pub age_kill: usize,
    /// Defaults to `min(d, 64)`.
    pub latent_dim: Option<usize>,
    pub depth: usize,
    /// Defaults to `max(64, 2 · min(d, 128))`.
    pub width: Option<usize>,
    pub critic_depth: usize,
    pub critic_width: Option<usize>,
    /// Defaults to trunk-branch for `d ≥ 512`, MLP otherwise.
    pub mode: Option<ArchMode>,
    pub branches: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub attention_layers: usize,
    pub activation: Activation,
    pub boundary: Option<BoundaryKind>,
}

impl Default for GeoConfig {
    fn default() -> Self {
        Self {
            pool_size: 128,
            parents: 8,
            mutation_steps: 16,
            lr_set: vec![1e-4, 1e-3, 1e-2, 1e-1],
            buffer_len: None,
            critic_epochs: 4,
            critic_batch: 64,
            critic_lr: 1e-3,
            pretrain_epochs: 200,
            init_samples: None,
            age_kill: 2,
            latent_dim: None,
            depth: 4,
            width: None,
            critic_depth: 4,
            critic_width: None,
            mode: None,
            branches: 1,
            embed_dim: 32,
            heads: 4,
            attention_layers: 1,
            activation: Activation::Gelu,
            boundary: Some(BoundaryKind::Sin),
        }
    }
}

impl GeoConfig {
    pub fn init_count(&self, d: usize) -> usize {
        self.init_samples.unwrap_or((10 * d).min(2000))
    }

    pub fn latent(&self, d: usize) -> usize {
        self.latent_dim.unwrap_or(d.min(64))
    }

    pub fn resolved_width(&self, d: usize) -> usize {
        self.width.unwrap_or(64.max(2 * d.min(128)))
    }

    pub fn resolved_mode(&self, d: usize) -> ArchMode {
        self.mode
            .unwrap_or(if d >= 512 { ArchMode::TrunkBranch } else { ArchMode::Mlp })
    }

    pub fn buffer_capacity(&self, objectives: usize) -> usize {
        self.buffer_len.unwrap_or(50 * self.parents * objectives)
    }

    fn base_arch(&self, d: usize) -> NetworkArch {
        NetworkArch {
            input_dim: self.latent(d),
            output_dim: d,
            mode: self.resolved_mode(d),
            depth: self.depth,
            width: self.resolved_width(d),
            branches: self.branches,
            activation: self.activation,
            embed_dim: self.embed_dim,
            heads: self.heads,
            attention_layers: self.attention_layers,
            boundary: None,
            bounds: None,
        }
    }

    pub fn generator_arch(&self, bounds: &Bounds) -> NetworkArch {
        let d = bounds.dim();
        NetworkArch {
            boundary: self.boundary,
            bounds: self.boundary.map(|_| bounds.clone()),
            ..self.base_arch(d)
        }
    }

    pub fn critic_arch(&self, d: usize) -> NetworkArch {
        NetworkArch {
            input_dim: d,
            output_dim: 1,
            depth: self.critic_depth,
            width: self.critic_width.unwrap_or(self.resolved_width(d)),
            ..self.base_arch(d)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    pub crossover_eta: f64,
    pub crossover_prob: f64,
    pub mutation_eta: f64,
    /// Defaults to `1 / d`.
    pub mutation_prob: Option<f64>,
}

impl Default for GaConfig {
    fn default() -> Self {
        Self {
            population: 100,
            crossover_eta: 15.0,
            crossover_prob: 0.9,
            mutation_eta: 20.0,
            mutation_prob: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmaesConfig {
    /// Initial step size as a fraction of the search range.
    pub sigma0: f64,
    /// Defaults to `4 + ⌊3 ln d⌋`.
    pub population: Option<usize>,
}

impl Default for CmaesConfig {
    fn default() -> Self {
        Self {
            sigma0: 0.3,
            population: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LsmConfig {
    /// Half-width of the local box in units of the domain half-width.
    pub epsilon: f64,
    pub local_samples: usize,
    /// Fixed generator learning rate; `None` draws one from the GEO lr set
    /// per proposal, as GEO mutation does.
    pub generator_lr: Option<f64>,
}

impl Default for LsmConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.5,
            local_samples: 8,
            generator_lr: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub algorithm: Algorithm,
    pub budget: u64,
    pub seed: u64,
    /// Calls between front snapshots (multi-objective runs).
    pub snapshot_every: u64,
    pub geo: GeoConfig,
    pub ga: GaConfig,
    pub cmaes: CmaesConfig,
    pub lsm: LsmConfig,
}

impl RunConfig {
    pub fn new(algorithm: Algorithm, budget: u64, seed: u64) -> Self {
        Self {
            algorithm,
            budget,
            seed,
            snapshot_every: 1000,
            geo: GeoConfig::default(),
            ga: GaConfig::default(),
            cmaes: CmaesConfig::default(),
            lsm: LsmConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontSnapshot {
    pub calls: u64,
    pub front: Vec<ObjectiveVector>,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub budget: u64,
    pub calls: u64,
    /// `(calls, best objective so far)` at every improvement and at the end.
    /// Empty for multi-objective problems.
    pub best_trace: Vec<(u64, f64)>,
    pub best: Option<(SearchPoint, f64)>,
    /// Front-1 of the population at regular call intervals and at the end.
    pub front_trace: Vec<FrontSnapshot>,
    /// Front-1 of the initialization samples.
    pub initial_front: Vec<ObjectiveVector>,
    pub final_front: Vec<ObjectiveVector>,
    pub final_population: Vec<(SearchPoint, ObjectiveVector)>,
    pub iterations: u64,
    /// GEO: fraction of buffer entries within front-rank 3 of the pool, per
    /// iteration.
    pub near_front_fraction: Vec<f64>,
    /// GEO: mutants dropped after a non-finite loss.
    pub discarded_mutations: u64,
    /// CMA-ES: covariance resets after numerical breakdown.
    pub covariance_resets: u64,
    pub wall_time: Duration,
}

impl RunResult {
    pub fn final_best(&self) -> Option<f64> {
        self.best.as_ref().map(|b| b.1)
    }
}

/// Counts evaluations against the budget and keeps the best-so-far trace.
struct Tracker<'a> {
    problem: &'a mut Problem,
    budget: u64,
    single: bool,
    best: Option<(SearchPoint, f64)>,
    trace: Vec<(u64, f64)>,
    snapshot_every: u64,
    next_snapshot: u64,
    snapshots: Vec<FrontSnapshot>,
}

impl<'a> Tracker<'a> {
    fn new(problem: &'a mut Problem, budget: u64, snapshot_every: u64) -> Self {
        let single = problem.objectives() == 1;
        let snapshot_every = snapshot_every.max(1);
        Self {
            problem,
            budget,
            single,
            best: None,
            trace: Vec::new(),
            snapshot_every,
            next_snapshot: snapshot_every,
            snapshots: Vec::new(),
        }
    }

    fn calls(&self) -> u64 {
        self.problem.calls()
    }

    fn remaining(&self) -> u64 {
        self.budget.saturating_sub(self.problem.calls())
    }

    fn exhausted(&self) -> bool {
        self.remaining() == 0
    }

    fn evaluate(&mut self, x: &[f64]) -> Result<ObjectiveVector> {
        let f = self.problem.evaluate(x)?;
        if self.single && self.best.as_ref().is_none_or(|b| f[0] < b.1) {
            self.best = Some((x.to_vec(), f[0]));
            self.trace.push((self.problem.calls(), f[0]));
        }
        Ok(f)
    }

    /// Records a front snapshot when a snapshot interval has been crossed.
    fn maybe_snapshot<P: AsRef<[f64]>>(&mut self, fitness: &[P]) {
        if self.single || self.calls() < self.next_snapshot {
            return;
        }
        self.snapshots.push(FrontSnapshot {
            calls: self.calls(),
            front: first_front(fitness),
        });
        while self.next_snapshot <= self.calls() {
            self.next_snapshot += self.snapshot_every;
        }
    }

    fn finish(
        mut self,
        algorithm: Algorithm,
        seed: u64,
        started: Instant,
        population: Vec<(SearchPoint, ObjectiveVector)>,
        initial_front: Vec<ObjectiveVector>,
    ) -> RunResult {
        let fitness: Vec<&[f64]> = population.iter().map(|p| p.1.as_slice()).collect();
        let final_front = first_front(&fitness);
        let calls = self.calls();
        if self.single {
            if let Some(&(c, f)) = self.trace.last() {
                if c != calls {
                    self.trace.push((calls, f));
                }
            }
        } else if self.snapshots.last().is_none_or(|s| s.calls != calls) {
            self.snapshots.push(FrontSnapshot {
                calls,
                front: final_front.clone(),
            });
        }
        RunResult {
            algorithm,
            seed,
            budget: self.budget,
            calls,
            best_trace: self.trace,
            best: self.best,
            front_trace: self.snapshots,
            initial_front,
            final_front,
            final_population: population,
            iterations: 0,
            near_front_fraction: Vec::new(),
            discarded_mutations: 0,
            covariance_resets: 0,
            wall_time: started.elapsed(),
        }
    }
}

/// Front-1 objective vectors, in input order.
pub fn first_front<P: AsRef<[f64]>>(fitness: &[P]) -> Vec<ObjectiveVector> {
    if fitness.is_empty() {
        return Vec::new();
    }
    let ranking = fast_nondominated_sort(fitness);
    ranking.fronts[0]
        .iter()
        .map(|&i| fitness[i].as_ref().to_vec())
        .collect()
}

/// Fraction of `points` that would land in front 1, 2 or 3 if inserted into
/// `pool`: a point's rank is one past the deepest pool front dominating it.
pub fn near_front_fraction<P: AsRef<[f64]>, Q: AsRef<[f64]>>(points: &[P], pool: &[Q], max_rank: usize) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    let ranking = fast_nondominated_sort(pool);
    let near = points
        .iter()
        .filter(|p| {
            let deepest = pool
                .iter()
                .enumerate()
                .filter(|(_, q)| dominates_point(q.as_ref(), p.as_ref()))
                .map(|(i, _)| ranking.rank[i] + 1)
                .max()
                .unwrap_or(0);
            deepest < max_rank
        })
        .count();
    near as f64 / points.len() as f64
}

fn dominates_point(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

fn check_budget(budget: u64, init: u64) -> Result<()> {
    if budget < init {
        return Err(Error::BudgetTooSmall { budget, init });
    }
    Ok(())
}

fn require_single_objective(problem: &Problem, algorithm: Algorithm) -> Result<()> {
    if problem.objectives() != 1 {
        return Err(Error::UnsupportedProblem(format!(
            "{algorithm} handles single-objective problems only, {} has {}",
            problem.name(),
            problem.objectives()
        )));
    }
    Ok(())
}

/// Generative evolutionary optimization.
///
/// Initialization evaluates a Latin hypercube sample (critic pretraining
/// data) and then one point per initial generator. Each iteration samples
/// `parents` generators, trains a copy of each against every critic, and
/// evaluates the copies' points; critics are retrained on the buffer and the
/// pool is cut back by non-dominated sorting.
pub fn run_geo(config: &RunConfig, problem: &mut Problem) -> Result<RunResult> {
    let started = Instant::now();
    let cfg = &config.geo;
    let d = problem.dim();
    let n = problem.objectives();
    let bounds = problem.bounds().clone();
    let init = cfg.init_count(d);
    check_budget(config.budget, init as u64)?;
    if cfg.lr_set.is_empty() || cfg.lr_set.iter().any(|lr| !(lr.is_finite() && *lr >= 0.0)) {
        return Err(Error::InvalidArgument(
            "learning-rate set must be non-empty and non-negative".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gen_arch = cfg.generator_arch(&bounds);
    let critic_arch = cfg.critic_arch(d);
    let generators = build_generators(&gen_arch, cfg.pool_size, &mut rng)?;
    let mut critics = (0..n)
        .map(|i| build_critic(&critic_arch, i, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    let mut buffer = ReplayBuffer::new(cfg.buffer_capacity(n), n)?;
    let mut tracker = Tracker::new(problem, config.budget, config.snapshot_every);

    let mut lhc_fitness = Vec::with_capacity(init);
    for x in latin_hypercube(init, &bounds, &mut rng)? {
        let f = tracker.evaluate(&x)?;
        lhc_fitness.push(f.clone());
        buffer.push(x, f, 0)?;
    }
    let initial_front = first_front(&lhc_fitness);
    train_critics(
        &mut critics,
        &buffer,
        cfg.pretrain_epochs,
        cfg.critic_batch,
        cfg.critic_lr,
        &mut rng,
    )?;

    let mut pool = Pool::new(cfg.pool_size, cfg.age_kill, tracker.problem.is_stochastic())?;
    for mut g in generators {
        if tracker.exhausted() {
            break;
        }
        g.latent = sample_latent(g.latent_dim(), &mut rng);
        let x = clamped(generate(&g, &g.latent)?, &bounds);
        let f = tracker.evaluate(&x)?;
        buffer.push(x, f.clone(), 0)?;
        g.fitness = Some(f);
        pool.members.push(g);
    }
    tracker.maybe_snapshot(&pool.fitness());

    let mut iteration = 0u64;
    let mut near_front = Vec::new();
    let mut discarded = 0u64;
    while !tracker.exhausted() && !pool.is_empty() {
        iteration += 1;
        let parents = sample_parents(pool.len(), cfg.parents.min(pool.len()), &mut rng)?;
        let mut children = Vec::with_capacity(parents.len() * n);
        'mutants: for &p in &parents {
            for critic in &critics {
                if tracker.exhausted() {
                    break 'mutants;
                }
                let lr = *cfg.lr_set.choose(&mut rng).expect("non-empty lr set");
                let parent = &pool.members[p];
                let mutated = mutate_generator(
                    parent,
                    critic,
                    lr,
                    cfg.mutation_steps,
                    Sense::Minimize,
                    iteration,
                    &mut rng,
                )
                .and_then(|m| generate(&m.child, &m.child.latent).map(|x| (m.child, x)));
                let (mut child, x) = match mutated {
                    Ok(v) => v,
                    Err(Error::NonFinite(what)) => {
                        log::warn!("iteration {iteration}: mutant discarded, non-finite {what}");
                        discarded += 1;
                        continue;
                    }
                    Err(e) => return Err(e),
                };
                let x = clamped(x, &bounds);
                let f = tracker.evaluate(&x)?;
                buffer.push(x, f.clone(), iteration)?;
                child.fitness = Some(f);
                children.push(child);
            }
        }
        train_critics(
            &mut critics,
            &buffer,
            cfg.critic_epochs,
            cfg.critic_batch,
            cfg.critic_lr,
            &mut rng,
        )?;
        pool.members.extend(children);
        pool = select_survivors(pool)?;
        let fitness = pool.fitness();
        let buffered: Vec<&[f64]> = buffer.iter().map(|e| e.f.as_slice()).collect();
        near_front.push(near_front_fraction(&buffered, &fitness, 3));
        tracker.maybe_snapshot(&fitness);
    }

    let population = pool
        .members
        .iter()
        .map(|g| {
            let x = clamped(generate(g, &g.latent)?, &bounds);
            Ok((x, g.fitness.clone().expect("pool members are evaluated")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut result = tracker.finish(config.algorithm, config.seed, started, population, initial_front);
    result.iterations = iteration;
    result.near_front_fraction = near_front;
    result.discarded_mutations = discarded;
    Ok(result)
}

fn clamped(mut x: SearchPoint, bounds: &Bounds) -> SearchPoint {
    bounds.clamp(&mut x);
    x
}

/// Simulated binary crossover on one pair of bounded variables.
fn sbx_pair<R: Rng + ?Sized>(a: f64, b: f64, lo: f64, hi: f64, eta: f64, rng: &mut R) -> (f64, f64) {
    if (a - b).abs() <= 1e-14 {
        return (a, b);
    }
    let (y1, y2) = if a < b { (a, b) } else { (b, a) };
    let u: f64 = rng.gen();
    let spread = |beta: f64| {
        let alpha = 2.0 - beta.powf(-(eta + 1.0));
        if u <= 1.0 / alpha {
            (u * alpha).powf(1.0 / (eta + 1.0))
        } else {
            (1.0 / (2.0 - u * alpha)).powf(1.0 / (eta + 1.0))
        }
    };
    let bq1 = spread(1.0 + 2.0 * (y1 - lo) / (y2 - y1));
    let bq2 = spread(1.0 + 2.0 * (hi - y2) / (y2 - y1));
    let c1 = (0.5 * ((y1 + y2) - bq1 * (y2 - y1))).clamp(lo, hi);
    let c2 = (0.5 * ((y1 + y2) + bq2 * (y2 - y1))).clamp(lo, hi);
    if rng.gen_bool(0.5) {
        (c2, c1)
    } else {
        (c1, c2)
    }
}

/// Polynomial mutation of one bounded variable.
fn polynomial_mutation<R: Rng + ?Sized>(y: f64, lo: f64, hi: f64, eta: f64, rng: &mut R) -> f64 {
    let width = hi - lo;
    let (d1, d2) = ((y - lo) / width, (hi - y) / width);
    let u: f64 = rng.gen();
    let pow = 1.0 / (eta + 1.0);
    let dq = if u < 0.5 {
        let v = 2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1).powf(eta + 1.0);
        v.powf(pow) - 1.0
    } else {
        let v = 2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2).powf(eta + 1.0);
        1.0 - v.powf(pow)
    };
    (y + dq * width).clamp(lo, hi)
}

/// Real-coded generational GA. Single-objective runs keep one elite;
/// multi-objective runs select survivors from parents and offspring by rank
/// and crowding.
pub fn run_ga(config: &RunConfig, problem: &mut Problem) -> Result<RunResult> {
    let started = Instant::now();
    let cfg = &config.ga;
    if cfg.population < 2 {
        return Err(Error::InvalidArgument("GA population must be at least 2".into()));
    }
    let d = problem.dim();
    let bounds = problem.bounds().clone();
    let pm = cfg.mutation_prob.unwrap_or(1.0 / d as f64);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut tracker = Tracker::new(problem, config.budget, config.snapshot_every);
    let single = tracker.single;

    let mut pop: Vec<(SearchPoint, ObjectiveVector)> = Vec::with_capacity(cfg.population);
    while pop.len() < cfg.population && !tracker.exhausted() {
        let x = random_point(&bounds, &mut rng);
        let f = tracker.evaluate(&x)?;
        pop.push((x, f));
    }
    let initial_front = first_front(&pop.iter().map(|p| p.1.as_slice()).collect::<Vec<_>>());
    let mut generations = 0u64;
    while !tracker.exhausted() {
        generations += 1;
        let fitness: Vec<&[f64]> = pop.iter().map(|p| p.1.as_slice()).collect();
        let ranking = fast_nondominated_sort(&fitness);
        let better = |a: usize, b: usize| {
            if single {
                pop[a].1[0] < pop[b].1[0]
            } else {
                (ranking.rank[a], std::cmp::Reverse(OrdF64(ranking.crowding[a])))
                    < (ranking.rank[b], std::cmp::Reverse(OrdF64(ranking.crowding[b])))
            }
        };
        let tournament = |rng: &mut ChaCha8Rng| {
            let a = rng.gen_range(0..pop.len());
            let b = rng.gen_range(0..pop.len());
            if better(b, a) {
                b
            } else {
                a
            }
        };
        let elite = if single { 1 } else { 0 };
        let wanted = cfg.population - elite;
        let mut offspring: Vec<SearchPoint> = Vec::with_capacity(wanted + 1);
        while offspring.len() < wanted {
            let (pa, pb) = (tournament(&mut rng), tournament(&mut rng));
            let (mut c1, mut c2) = (pop[pa].0.clone(), pop[pb].0.clone());
            if rng.gen_bool(cfg.crossover_prob) {
                for j in 0..d {
                    if rng.gen_bool(0.5) {
                        let (a, b) = sbx_pair(
                            c1[j],
                            c2[j],
                            bounds.lower[j],
                            bounds.upper[j],
                            cfg.crossover_eta,
                            &mut rng,
                        );
                        c1[j] = a;
                        c2[j] = b;
                    }
                }
            }
            for c in [&mut c1, &mut c2] {
                for j in 0..d {
                    if rng.gen_bool(pm.min(1.0)) {
                        c[j] = polynomial_mutation(c[j], bounds.lower[j], bounds.upper[j], cfg.mutation_eta, &mut rng);
                    }
                }
            }
            offspring.push(c1);
            offspring.push(c2);
        }
        offspring.truncate(wanted);
        let mut evaluated = Vec::with_capacity(offspring.len());
        for x in offspring {
            if tracker.exhausted() {
                break;
            }
            let f = tracker.evaluate(&x)?;
            evaluated.push((x, f));
        }
        pop = if single {
            let best = (0..pop.len())
                .min_by(|&a, &b| pop[a].1[0].total_cmp(&pop[b].1[0]))
                .expect("non-empty population");
            let mut next = vec![pop[best].clone()];
            // A truncated final generation keeps the best of the old population.
            let fill = cfg.population - 1 - evaluated.len();
            if fill > 0 {
                let mut order: Vec<usize> = (0..pop.len()).filter(|&i| i != best).collect();
                order.sort_by(|&a, &b| pop[a].1[0].total_cmp(&pop[b].1[0]));
                next.extend(order.into_iter().take(fill).map(|i| pop[i].clone()));
            }
            next.extend(evaluated);
            next
        } else {
            let mut all = pop;
            all.extend(evaluated);
            let keep = truncate_by_rank(&all.iter().map(|p| p.1.as_slice()).collect::<Vec<_>>(), cfg.population);
            keep.into_iter().map(|i| all[i].clone()).collect()
        };
        tracker.maybe_snapshot(&pop.iter().map(|p| p.1.as_slice()).collect::<Vec<_>>());
    }
    let mut result = tracker.finish(config.algorithm, config.seed, started, pop, initial_front);
    result.iterations = generations;
    Ok(result)
}

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
struct OrdF64(f64);

/// (μ/μ_w, λ)-CMA-ES with cumulative step-size adaptation, rank-one and
/// rank-μ covariance updates, and no restarts. Samples outside the box are
/// evaluated at their projection; ranking adds the squared projection
/// distance so the mean stays inside.
pub fn run_cmaes(config: &RunConfig, problem: &mut Problem) -> Result<RunResult> {
    let started = Instant::now();
    require_single_objective(problem, config.algorithm)?;
    let n = problem.dim();
    let nf = n as f64;
    let bounds = problem.bounds().clone();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lambda = config
        .cmaes
        .population
        .unwrap_or(4 + (3.0 * nf.ln()).floor() as usize)
        .max(2);
    let mu = lambda / 2;
    let raw: Vec<f64> = (1..=mu).map(|i| (mu as f64 + 0.5).ln() - (i as f64).ln()).collect();
    let total: f64 = raw.iter().sum();
    let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let mu_eff = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    let cs = (mu_eff + 2.0) / (nf + mu_eff + 5.0);
    let ds = 1.0 + 2.0 * (((mu_eff - 1.0) / (nf + 1.0)).sqrt() - 1.0).max(0.0) + cs;
    let cc = (4.0 + mu_eff / nf) / (nf + 4.0 + 2.0 * mu_eff / nf);
    let c1 = 2.0 / ((nf + 1.3).powi(2) + mu_eff);
    let cmu = (1.0 - c1).min(2.0 * (mu_eff - 2.0 + 1.0 / mu_eff) / ((nf + 2.0).powi(2) + mu_eff));
    let chi_n = nf.sqrt() * (1.0 - 1.0 / (4.0 * nf) + 1.0 / (21.0 * nf * nf));
    let eigen_every = ((1.0 / (10.0 * nf * (c1 + cmu))).floor() as u64).max(1);

    let range = (0..n).map(|j| bounds.width(j)).fold(0.0, f64::max);
    let mut sigma = config.cmaes.sigma0 * range;
    let mut mean = DVector::from_vec(random_point(&bounds, &mut rng));
    let mut cov = DMatrix::<f64>::identity(n, n);
    let mut basis = DMatrix::<f64>::identity(n, n);
    let mut scales = DVector::<f64>::from_element(n, 1.0);
    let mut ps = DVector::<f64>::zeros(n);
    let mut pc = DVector::<f64>::zeros(n);
    let mut resets = 0u64;
    let mut generation = 0u64;
    let mut tracker = Tracker::new(problem, config.budget, config.snapshot_every);
    let mut population: Vec<(SearchPoint, ObjectiveVector)> = Vec::new();

    while !tracker.exhausted() {
        generation += 1;
        let mut samples: Vec<(DVector<f64>, f64)> = Vec::with_capacity(lambda);
        population.clear();
        for _ in 0..lambda {
            if tracker.exhausted() {
                break;
            }
            let z = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
            let y = &basis * z.component_mul(&scales);
            let x = &mean + sigma * &y;
            let xc = clamped(x.as_slice().to_vec(), &bounds);
            let f = tracker.evaluate(&xc)?;
            let penalty: f64 = x.iter().zip(&xc).map(|(a, b)| (a - b).powi(2)).sum();
            samples.push((y, f[0] + penalty));
            population.push((xc, f));
        }
        if samples.len() < lambda {
            break;
        }
        samples.sort_by(|a, b| a.1.total_cmp(&b.1));
        let mut yw = DVector::<f64>::zeros(n);
        for (w, (y, _)) in weights.iter().zip(&samples) {
            yw.axpy(*w, y, 1.0);
        }
        mean.axpy(sigma, &yw, 1.0);
        let inv_sqrt = &basis * DMatrix::from_diagonal(&scales.map(|s| 1.0 / s)) * basis.transpose();
        ps = (1.0 - cs) * &ps + (cs * (2.0 - cs) * mu_eff).sqrt() * (&inv_sqrt * &yw);
        let ps_norm = ps.norm();
        let hs = ps_norm / (1.0 - (1.0 - cs).powi(2 * generation as i32)).sqrt() < (1.4 + 2.0 / (nf + 1.0)) * chi_n;
        let hs = if hs { 1.0 } else { 0.0 };
        pc = (1.0 - cc) * &pc + hs * (cc * (2.0 - cc) * mu_eff).sqrt() * &yw;
        let mut rank_mu = DMatrix::<f64>::zeros(n, n);
        for (w, (y, _)) in weights.iter().zip(&samples) {
            rank_mu.ger(*w, y, y, 1.0);
        }
        cov =
            (1.0 - c1 - cmu) * &cov + c1 * (&pc * pc.transpose() + (1.0 - hs) * cc * (2.0 - cc) * &cov) + cmu * rank_mu;
        sigma *= ((cs / ds) * (ps_norm / chi_n - 1.0)).exp();

        if generation.is_multiple_of(eigen_every) {
            cov = (&cov + cov.transpose()) * 0.5;
            let eig = SymmetricEigen::new(cov.clone());
            let healthy = eig.eigenvalues.iter().all(|v| v.is_finite() && *v > 0.0) && sigma.is_finite() && sigma > 0.0;
            if healthy {
                basis = eig.eigenvectors;
                scales = eig.eigenvalues.map(f64::sqrt);
            } else {
                log::warn!("cma-es generation {generation}: degenerate covariance, reset to identity");
                resets += 1;
                cov = DMatrix::identity(n, n);
                basis = DMatrix::identity(n, n);
                scales = DVector::from_element(n, 1.0);
                ps.fill(0.0);
                pc.fill(0.0);
                if !(sigma.is_finite() && sigma > 0.0) {
                    sigma = config.cmaes.sigma0 * range;
                }
            }
        }
    }
    let mut result = tracker.finish(config.algorithm, config.seed, started, population, Vec::new());
    result.iterations = generation;
    result.covariance_resets = resets;
    Ok(result)
}

/// Local surrogate method: a critic fitted to samples from a box of
/// half-width `epsilon` (in domain half-widths) around the incumbent `x0`,
/// and a generator trained through it that proposes the next incumbent.
pub fn run_lsm(config: &RunConfig, problem: &mut Problem) -> Result<RunResult> {
    let started = Instant::now();
    require_single_objective(problem, config.algorithm)?;
    let cfg = &config.lsm;
    let geo = &config.geo;
    if !(cfg.epsilon > 0.0 && cfg.epsilon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {} must be positive",
            cfg.epsilon
        )));
    }
    if cfg.local_samples == 0 {
        return Err(Error::InvalidArgument("LSM needs at least one local sample".into()));
    }
    if cfg.generator_lr.is_none() && geo.lr_set.is_empty() {
        return Err(Error::InvalidArgument(
            "LSM needs a generator lr or a non-empty lr set".into(),
        ));
    }
    let d = problem.dim();
    let bounds = problem.bounds().clone();
    let init = geo.init_count(d);
    check_budget(config.budget, init as u64)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let arch = geo.generator_arch(&bounds);
    let unbounded = NetworkArch {
        boundary: None,
        bounds: None,
        ..arch
    };
    let base = unbounded.generator_network()?;
    let outputs = base.output_param_names();
    let fresh_generator = |rng: &mut ChaCha8Rng| {
        let mut p = crate::nn::init_weights(&base, InitScheme::Xavier, rng);
        p.zero_named(&outputs);
        p
    };
    let critic_arch = geo.critic_arch(d);
    let mut critic = build_critic(&critic_arch, 0, &mut rng)?;
    let capacity = geo.buffer_len.unwrap_or(50 * cfg.local_samples);
    let mut buffer = ReplayBuffer::new(capacity.max(init), 1)?;
    let mut tracker = Tracker::new(problem, config.budget, config.snapshot_every);

    let mut x0: Option<(SearchPoint, f64)> = None;
    for x in latin_hypercube(init, &bounds, &mut rng)? {
        let f = tracker.evaluate(&x)?;
        if x0.as_ref().is_none_or(|b| f[0] < b.1) {
            x0 = Some((x.clone(), f[0]));
        }
        buffer.push(x, f, 0)?;
    }
    let initial_front = x0.iter().map(|b| vec![b.1]).collect();
    let (mut x0, mut f0) = x0.expect("at least one initial sample");
    let half: Vec<f64> = (0..d).map(|j| cfg.epsilon * bounds.width(j) / 2.0).collect();
    let mut iteration = 0u64;
    while !tracker.exhausted() {
        iteration += 1;
        let local = Bounds {
            lower: (0..d).map(|j| (x0[j] - half[j]).max(bounds.lower[j])).collect(),
            upper: (0..d).map(|j| (x0[j] + half[j]).min(bounds.upper[j])).collect(),
        };
        for _ in 0..cfg.local_samples {
            if tracker.exhausted() {
                break;
            }
            let x: SearchPoint = (0..d)
                .map(|j| {
                    if local.upper[j] > local.lower[j] {
                        rng.gen_range(local.lower[j]..=local.upper[j])
                    } else {
                        local.lower[j]
                    }
                })
                .collect();
            let f = tracker.evaluate(&x)?;
            if f[0] < f0 {
                x0 = x.clone();
                f0 = f[0];
            }
            buffer.push(x, f, iteration)?;
        }
        if tracker.exhausted() {
            break;
        }
        let mut local_buffer = ReplayBuffer::new(buffer.len(), 1)?;
        for e in buffer.iter().filter(|e| local.contains(&e.x)) {
            local_buffer.push(e.x.clone(), e.f.clone(), e.iteration)?;
        }
        let epochs = if iteration == 1 {
            geo.pretrain_epochs
        } else {
            geo.critic_epochs
        };
        train_critics(
            std::slice::from_mut(&mut critic),
            &local_buffer,
            epochs,
            geo.critic_batch,
            geo.critic_lr,
            &mut rng,
        )?;

        // Zeroed output layers start the proposal at x0; training then moves
        // it along the critic's local gradient within the epsilon box.
        let mut gen_params = fresh_generator(&mut rng);
        let mut layers = base.layers().to_vec();
        layers.push(LayerSpec::Boundary(BoundaryLayer {
            kind: BoundaryKind::Tanh,
            lower: (0..d).map(|j| x0[j] - half[j]).collect(),
            upper: (0..d).map(|j| x0[j] + half[j]).collect(),
        }));
        let net = Network::new(base.input(), layers)?;
        let z = Tensor::row(&sample_latent(unbounded.input_dim, &mut rng));
        let lr = match cfg.generator_lr {
            Some(lr) => lr,
            None => *geo.lr_set.choose(&mut rng).expect("non-empty lr set"),
        };
        let proposal = match train_generator(&net, &mut gen_params, &critic, &z, geo.mutation_steps, lr) {
            Ok(()) => net.predict(&gen_params, &z).map(|x| clamped(x.into_data(), &bounds)),
            Err(e) => Err(e),
        };
        let x = match proposal {
            Ok(x) => x,
            Err(Error::NonFinite(what)) => {
                log::warn!("lsm iteration {iteration}: proposal dropped after non-finite {what}");
                continue;
            }
            Err(e) => return Err(e),
        };
        let f = tracker.evaluate(&x)?;
        buffer.push(x.clone(), f.clone(), iteration)?;
        if f[0] < f0 {
            x0 = x;
            f0 = f[0];
        }
    }
    let population = vec![(x0, vec![f0])];
    let mut result = tracker.finish(config.algorithm, config.seed, started, population, initial_front);
    result.iterations = iteration;
    Ok(result)
}

fn train_generator(
    net: &Network,
    params: &mut crate::nn::ParamSet,
    critic: &CriticModel,
    z: &Tensor,
    steps: usize,
    lr: f64,
) -> Result<()> {
    let out_grad = Tensor::filled(&[1, 1], critic.scaler.std);
    for _ in 0..steps {
        let (x, tape) = net.forward(params, z)?;
        let (_, critic_tape) = critic.net.forward(&critic.params, &x)?;
        let dx = critic.net.input_gradient(&critic.params, &critic_tape, &out_grad)?;
        let grads = net.backward(params, &tape, &dx)?;
        adam_step(params, &grads.params, lr)?;
    }
    Ok(())
}

/// Runs `config.algorithm` on `problem`.
pub fn run(config: &RunConfig, problem: &mut Problem) -> Result<RunResult> {
    match config.algorithm {
        Algorithm::Geo => run_geo(config, problem),
        Algorithm::GeoOneLayer => {
            let mut one = config.clone();
            one.geo.depth = 1;
            one.geo.mode = Some(ArchMode::Mlp);
            run_geo(&one, problem)
        }
        Algorithm::Ga => run_ga(config, problem),
        Algorithm::Cmaes => run_cmaes(config, problem),
        Algorithm::Lsm => run_lsm(config, problem),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::ProblemKind;

    fn small_geo(algorithm: Algorithm, budget: u64, seed: u64) -> RunConfig {
        let mut c = RunConfig::new(algorithm, budget, seed);
        c.geo.pool_size = 16;
        c.geo.parents = 4;
        c.geo.width = Some(16);
        c.geo.critic_width = Some(16);
        c.geo.depth = 3;
        c.geo.critic_depth = 3;
        c.geo.pretrain_epochs = 20;
        c.geo.mutation_steps = 4;
        c.ga.population = 20;
        c.snapshot_every = 50;
        c
    }

    fn problem(name: &str, d: usize) -> Problem {
        Problem::by_name(name, d).unwrap()
    }

    #[test]
    fn algorithm_names_round_trip() {
        for a in Algorithm::ALL {
            assert_eq!(a.name().parse::<Algorithm>().unwrap(), a);
        }
        assert!(matches!("bo".parse::<Algorithm>(), Err(Error::UnknownAlgorithm(_))));
    }

    #[test]
    fn budgets_are_spent_exactly() {
        for a in Algorithm::ALL {
            for budget in [40, 97, 160] {
                let mut p = problem("sphere", 3);
                let r = run(&small_geo(a, budget, 1), &mut p).unwrap();
                assert_eq!(r.calls, budget, "{a}");
                assert_eq!(p.calls(), budget, "{a}");
            }
        }
        let mut p = problem("zdt1", 4);
        assert_eq!(run(&small_geo(Algorithm::Geo, 123, 0), &mut p).unwrap().calls, 123);
        let mut p = problem("zdt2", 4);
        assert_eq!(run(&small_geo(Algorithm::Ga, 123, 0), &mut p).unwrap().calls, 123);
    }

    #[test]
    fn budget_below_initialization_is_rejected() {
        let mut p = problem("sphere", 3);
        let err = run(&small_geo(Algorithm::Geo, 29, 0), &mut p).unwrap_err();
        assert!(matches!(err, Error::BudgetTooSmall { budget: 29, init: 30 }));
        assert!(run(&small_geo(Algorithm::Lsm, 10, 0), &mut p).is_err());
    }

    #[test]
    fn budget_equal_to_initialization_returns_the_sample_best() {
        for a in [Algorithm::Geo, Algorithm::Lsm] {
            let mut p = problem("ackley", 2);
            let r = run(&small_geo(a, 20, 3), &mut p).unwrap();
            assert_eq!(r.iterations, 0);
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            if a == Algorithm::Geo {
                // Generators and critics are drawn before the sample.
                let cfg = small_geo(a, 20, 3).geo;
                build_generators(&cfg.generator_arch(p.bounds()), cfg.pool_size, &mut rng).unwrap();
                build_critic(&cfg.critic_arch(2), 0, &mut rng).unwrap();
            } else {
                let cfg = small_geo(a, 20, 3).geo;
                build_critic(&cfg.critic_arch(2), 0, &mut rng).unwrap();
            }
            let best = latin_hypercube(20, p.bounds(), &mut rng)
                .unwrap()
                .iter()
                .map(|x| crate::problems::ackley(x))
                .fold(f64::INFINITY, f64::min);
            assert_eq!(r.final_best(), Some(best), "{a}");
        }
    }

    #[test]
    fn seeded_runs_are_identical() {
        for a in Algorithm::ALL {
            let run_once = || {
                let mut p = problem("rastrigin", 3);
                run(&small_geo(a, 120, 9), &mut p).unwrap()
            };
            let (r1, r2) = (run_once(), run_once());
            assert_eq!(r1.best_trace, r2.best_trace, "{a}");
            assert_eq!(r1.final_population, r2.final_population, "{a}");
        }
    }

    #[test]
    fn best_trace_is_monotone() {
        let mut p = problem("ackley", 4);
        let r = run(&small_geo(Algorithm::Geo, 300, 2), &mut p).unwrap();
        assert!(r.best_trace.windows(2).all(|w| w[1].1 <= w[0].1 && w[1].0 > w[0].0));
        assert_eq!(r.best_trace.last().unwrap().0, 300);
        assert!(r.iterations > 0);
        assert_eq!(r.near_front_fraction.len() as u64, r.iterations);
    }

    #[test]
    fn single_objective_pool_best_never_worsens() {
        let mut c = small_geo(Algorithm::Geo, 300, 4);
        c.snapshot_every = 1;
        let mut p = problem("sphere", 4);
        let r = run(&c, &mut p).unwrap();
        let pool_best = r.final_population.iter().map(|e| e.1[0]).fold(f64::INFINITY, f64::min);
        assert_eq!(Some(pool_best), r.final_best());
    }

    #[test]
    fn multi_objective_runs_record_fronts() {
        let mut p = problem("zdt1", 4);
        let r = run(&small_geo(Algorithm::Geo, 200, 0), &mut p).unwrap();
        assert!(r.best_trace.is_empty());
        assert!(!r.initial_front.is_empty());
        assert_eq!(r.front_trace.last().unwrap().calls, 200);
        assert!(r.front_trace.windows(2).all(|w| w[0].calls < w[1].calls));
        assert_eq!(r.final_front, r.front_trace.last().unwrap().front);
        for a in [Algorithm::Cmaes, Algorithm::Lsm] {
            assert!(matches!(
                run(&small_geo(a, 200, 0), &mut problem("zdt1", 4)),
                Err(Error::UnsupportedProblem(_))
            ));
        }
    }

    #[test]
    fn geo_points_stay_in_bounds_on_zdt() {
        for boundary in [None, Some(BoundaryKind::Tanh), Some(BoundaryKind::Sin)] {
            let mut c = small_geo(Algorithm::Geo, 150, 5);
            c.geo.boundary = boundary;
            let mut p = problem("zdt3", 4);
            let r = run(&c, &mut p).unwrap();
            assert!(r.final_population.iter().all(|(x, _)| p.bounds().contains(x)));
        }
    }

    #[test]
    fn noisy_problems_use_age_kill() {
        let mut p = problem("zdt1", 4).with_noise(0.05, 1).unwrap();
        let r = run(&small_geo(Algorithm::Geo, 200, 0), &mut p).unwrap();
        assert_eq!(r.calls, 200);
    }

    #[test]
    fn ga_with_population_equal_to_budget_is_random_search() {
        let mut c = small_geo(Algorithm::Ga, 50, 8);
        c.ga.population = 50;
        let mut p = problem("sphere", 3);
        let r = run(&c, &mut p).unwrap();
        assert_eq!(r.iterations, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let best = (0..50)
            .map(|_| crate::problems::sphere(&random_point(p.bounds(), &mut rng)))
            .fold(f64::INFINITY, f64::min);
        assert_eq!(r.final_best(), Some(best));
    }

    #[test]
    fn ga_solves_sphere() {
        let mut p = problem("sphere", 4);
        let r = run(&RunConfig::new(Algorithm::Ga, 20_000, 1), &mut p).unwrap();
        assert!(r.final_best().unwrap() <= 1e-3, "{:?}", r.final_best());
    }

    #[test]
    fn cmaes_solves_sphere() {
        let mut p = problem("sphere", 8);
        let r = run(&RunConfig::new(Algorithm::Cmaes, 10_000, 1), &mut p).unwrap();
        assert!(r.final_best().unwrap() <= 1e-8, "{:?}", r.final_best());
        assert_eq!(r.covariance_resets, 0);
    }

    #[test]
    fn sbx_and_mutation_respect_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let (a, b) = (rng.gen_range(-1.0..2.0), rng.gen_range(-1.0..2.0));
            let (c1, c2) = sbx_pair(a, b, -1.0, 2.0, 15.0, &mut rng);
            assert!((-1.0..=2.0).contains(&c1) && (-1.0..=2.0).contains(&c2));
            let m = polynomial_mutation(a, -1.0, 2.0, 20.0, &mut rng);
            assert!((-1.0..=2.0).contains(&m));
        }
    }

    #[test]
    fn near_front_fraction_counts_depth() {
        // Pool fronts: {(0,0)}, {(1,1)}, {(2,2)}, {(3,3)}.
        let pool = vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, 3.0]];
        let pts = vec![vec![-1.0, 5.0], vec![1.5, 1.5], vec![2.5, 2.5], vec![4.0, 4.0]];
        assert_eq!(near_front_fraction(&pts, &pool, 3), 0.5);
        assert_eq!(near_front_fraction(&pts, &pool, 5), 1.0);
        assert_eq!(ProblemKind::Zdt1.objectives(), 2);
    }
}
