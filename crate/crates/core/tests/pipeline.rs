use std::io::BufReader;

use geo_core::harness::{run_experiment, ExperimentConfig};
use geo_core::models::{build_generator, generate, sample_latent, GeneratorGenome, NetworkArch};
use geo_core::nn::BoundaryKind;
use geo_core::optimizers::{run, Algorithm, RunConfig};
use geo_core::problems::{Bounds, Problem, ProblemKind};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_geo(budget: u64, seed: u64) -> RunConfig {
    let mut cfg = RunConfig::new(Algorithm::Geo, budget, seed);
    cfg.geo.pool_size = 16;
    cfg.geo.width = Some(16);
    cfg.geo.pretrain_epochs = 20;
    cfg
}

#[test]
fn geo_improves_on_its_initial_samples() {
    let mut p = Problem::new(ProblemKind::Sphere, 4).unwrap();
    let res = run(&small_geo(1500, 3), &mut p).unwrap();
    let first = res.best_trace.first().unwrap().1;
    assert!(res.final_best().unwrap() < first);
    assert_eq!(res.calls, 1500);
    assert!(res.best_trace.windows(2).all(|w| w[0].0 < w[1].0 && w[1].1 <= w[0].1));
}

#[test]
fn geo_keeps_zdt_points_in_bounds() {
    let mut p = Problem::new(ProblemKind::Zdt2, 5).unwrap();
    let res = run(&small_geo(800, 1), &mut p).unwrap();
    for (x, f) in &res.final_population {
        assert!(x.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(f.len(), 2);
    }
    assert!(!res.final_front.is_empty());
    assert!(res.front_trace.last().unwrap().calls == 800);
}

#[test]
fn noisy_experiment_with_age_removal_completes() {
    let text = "algorithm = geo\nproblem = zdt1\ndim = 4\nbudget = 500\nnoise_std = 0.1\nage_kill = 3\npool_size = 12\nwidth = 16\nrepeats = 2\n";
    let cfg = ExperimentConfig::parse(text).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let out = run_experiment(&cfg, tmp.path()).unwrap();
    assert!(!out.flagged());
    assert_eq!(out.summary[0].repeats, 2);
    assert!(out.summary.iter().all(|r| r.mean.is_finite() && r.std >= 0.0));
}

#[test]
fn genome_checkpoint_survives_a_file() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut arch = NetworkArch::mlp(3, 3, 3, 8);
    arch.boundary = Some(BoundaryKind::Sin);
    arch.bounds = Some(Bounds::uniform(3, -2.0, 2.0));
    let mut g = build_generator(&arch, &mut rng).unwrap();
    g.latent = sample_latent(3, &mut rng);
    g.fitness = Some(vec![1.25]);
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("genome.bin");
    g.write_to(std::fs::File::create(&path).unwrap()).unwrap();
    let back = GeneratorGenome::read_from(BufReader::new(std::fs::File::open(&path).unwrap())).unwrap();
    assert_eq!(back.fitness, g.fitness);
    assert_eq!(generate(&back, &g.latent).unwrap(), generate(&g, &g.latent).unwrap());
}

#[test]
fn lsm_with_a_domain_wide_box_solves_the_sphere() {
    let mut p = Problem::new(ProblemKind::Sphere, 4).unwrap();
    let mut cfg = RunConfig::new(Algorithm::Lsm, 20_000, 0);
    cfg.lsm.epsilon = 2.0;
    let res = run(&cfg, &mut p).unwrap();
    assert_eq!(res.calls, 20_000);
    assert!(res.final_best().unwrap() <= 0.1, "{:?}", res.final_best());
}
