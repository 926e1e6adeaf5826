//! Flat `key = value` experiment configuration.

use std::collections::HashSet;
use std::fmt::Display;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::models::ArchMode;
use crate::nn::{Activation, BoundaryKind};
use crate::optimizers::{Algorithm, RunConfig};
use crate::problems::ProblemKind;

/// One experiment: `repeats` runs of one algorithm on one problem.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub problem: ProblemKind,
    pub dim: usize,
    pub repeats: usize,
    pub noise_std: f64,
    /// Output subdirectory name; derived from the config when absent.
    pub output: Option<String>,
    /// Points sampled on the analytic front for IGD.
    pub igd_points: usize,
    /// `run.seed` is the base seed; repeat `r` uses `seed + r`.
    pub run: RunConfig,
}

const REQUIRED: [&str; 4] = ["algorithm", "problem", "dim", "budget"];

/// Every accepted key, in print order.
pub const KEYS: [&str; 44] = [
    "algorithm",
    "problem",
    "dim",
    "budget",
    "repeats",
    "seed",
    "noise_std",
    "output",
    "igd_points",
    "snapshot_every",
    "pool_size",
    "parents",
    "mutation_steps",
    "lr_set",
    "buffer_len",
    "critic_epochs",
    "critic_batch",
    "critic_lr",
    "pretrain_epochs",
    "init_samples",
    "age_kill",
    "latent_dim",
    "depth",
    "width",
    "critic_depth",
    "critic_width",
    "mode",
    "branches",
    "embed_dim",
    "heads",
    "attention_layers",
    "activation",
    "boundary",
    "ga_population",
    "ga_crossover_eta",
    "ga_crossover_prob",
    "ga_mutation_eta",
    "ga_mutation_prob",
    "cmaes_sigma0",
    "cmaes_population",
    "lsm_epsilon",
    "lsm_local_samples",
    "lsm_generator_lr",
    "description",
];

fn num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("expected a {}, got `{value}`", std::any::type_name::<T>())))
}

fn auto<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        num(key, value).map(Some)
    }
}

fn parsed<T: FromStr<Err = Error>>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|e: Error| Error::config(key, e.to_string()))
}

fn show_auto<T: Display>(v: &Option<T>) -> String {
    v.as_ref().map_or("auto".to_string(), |v| v.to_string())
}

impl ExperimentConfig {
    /// Defaults for every knob.
    pub fn new(algorithm: Algorithm, problem: ProblemKind, dim: usize, budget: u64) -> Self {
        Self {
            problem,
            dim,
            repeats: 1,
            noise_std: 0.0,
            output: None,
            igd_points: 1000,
            run: RunConfig::new(algorithm, budget, 0),
        }
    }

    pub fn algorithm(&self) -> Algorithm {
        self.run.algorithm
    }

    pub fn budget(&self) -> u64 {
        self.run.budget
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(line, format!("line {}: expected `key = value`", lineno + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(Error::config(k, "unknown key"));
            }
            if !seen.insert(k.to_string()) {
                return Err(Error::config(k, "duplicate key"));
            }
            pairs.push((k.to_string(), v.to_string()));
        }
        let get = |key: &str| pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        for key in REQUIRED {
            if get(key).is_none() {
                return Err(Error::config(key, "required key missing"));
            }
        }
        let mut cfg = ExperimentConfig::new(
            parsed("algorithm", get("algorithm").unwrap())?,
            parsed("problem", get("problem").unwrap())?,
            num("dim", get("dim").unwrap())?,
            num("budget", get("budget").unwrap())?,
        );
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one knob from its text form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let geo = &mut self.run.geo;
        match key {
            "algorithm" => self.run.algorithm = parsed(key, value)?,
            "problem" => self.problem = parsed(key, value)?,
            "dim" => self.dim = num(key, value)?,
            "budget" => self.run.budget = num(key, value)?,
            "repeats" => self.repeats = num(key, value)?,
            "seed" => self.run.seed = num(key, value)?,
            "noise_std" => self.noise_std = num(key, value)?,
            "output" => self.output = if value == "auto" { None } else { Some(value.to_string()) },
            "igd_points" => self.igd_points = num(key, value)?,
            "snapshot_every" => self.run.snapshot_every = num(key, value)?,
            "pool_size" => geo.pool_size = num(key, value)?,
            "parents" => geo.parents = num(key, value)?,
            "mutation_steps" => geo.mutation_steps = num(key, value)?,
            "lr_set" => {
                geo.lr_set = value
                    .split(',')
                    .map(|s| num(key, s.trim()))
                    .collect::<Result<Vec<f64>>>()?
            }
            "buffer_len" => geo.buffer_len = auto(key, value)?,
            "critic_epochs" => geo.critic_epochs = num(key, value)?,
            "critic_batch" => geo.critic_batch = num(key, value)?,
            "critic_lr" => geo.critic_lr = num(key, value)?,
            "pretrain_epochs" => geo.pretrain_epochs = num(key, value)?,
            "init_samples" => geo.init_samples = auto(key, value)?,
            "age_kill" => geo.age_kill = num(key, value)?,
            "latent_dim" => geo.latent_dim = auto(key, value)?,
            "depth" => geo.depth = num(key, value)?,
            "width" => geo.width = auto(key, value)?,
            "critic_depth" => geo.critic_depth = num(key, value)?,
            "critic_width" => geo.critic_width = auto(key, value)?,
            "mode" => {
                geo.mode = if value == "auto" {
                    None
                } else {
                    Some(parsed::<ArchMode>(key, value)?)
                }
            }
            "branches" => geo.branches = num(key, value)?,
            "embed_dim" => geo.embed_dim = num(key, value)?,
            "heads" => geo.heads = num(key, value)?,
            "attention_layers" => geo.attention_layers = num(key, value)?,
            "activation" => geo.activation = parsed::<Activation>(key, value)?,
            "boundary" => {
                geo.boundary = if value == "none" {
                    None
                } else {
                    Some(parsed::<BoundaryKind>(key, value)?)
                }
            }
            "ga_population" => self.run.ga.population = num(key, value)?,
            "ga_crossover_eta" => self.run.ga.crossover_eta = num(key, value)?,
            "ga_crossover_prob" => self.run.ga.crossover_prob = num(key, value)?,
            "ga_mutation_eta" => self.run.ga.mutation_eta = num(key, value)?,
            "ga_mutation_prob" => self.run.ga.mutation_prob = auto(key, value)?,
            "cmaes_sigma0" => self.run.cmaes.sigma0 = num(key, value)?,
            "cmaes_population" => self.run.cmaes.population = auto(key, value)?,
            "lsm_epsilon" => self.run.lsm.epsilon = num(key, value)?,
            "lsm_local_samples" => self.run.lsm.local_samples = num(key, value)?,
            "lsm_generator_lr" => self.run.lsm.generator_lr = auto(key, value)?,
            "description" => {}
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Canonical text of the resolved configuration; parses back to `self`.
    pub fn to_text(&self) -> String {
        let geo = &self.run.geo;
        let lr_set: Vec<String> = geo.lr_set.iter().map(|v| v.to_string()).collect();
        let entries: [(&str, String); 43] = [
            ("algorithm", self.run.algorithm.to_string()),
            ("problem", self.problem.to_string()),
            ("dim", self.dim.to_string()),
            ("budget", self.run.budget.to_string()),
            ("repeats", self.repeats.to_string()),
            ("seed", self.run.seed.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("output", self.output.clone().unwrap_or_else(|| "auto".into())),
            ("igd_points", self.igd_points.to_string()),
            ("snapshot_every", self.run.snapshot_every.to_string()),
            ("pool_size", geo.pool_size.to_string()),
            ("parents", geo.parents.to_string()),
            ("mutation_steps", geo.mutation_steps.to_string()),
            ("lr_set", lr_set.join(",")),
            ("buffer_len", show_auto(&geo.buffer_len)),
            ("critic_epochs", geo.critic_epochs.to_string()),
            ("critic_batch", geo.critic_batch.to_string()),
            ("critic_lr", geo.critic_lr.to_string()),
            ("pretrain_epochs", geo.pretrain_epochs.to_string()),
            ("init_samples", show_auto(&geo.init_samples)),
            ("age_kill", geo.age_kill.to_string()),
            ("latent_dim", show_auto(&geo.latent_dim)),
            ("depth", geo.depth.to_string()),
            ("width", show_auto(&geo.width)),
            ("critic_depth", geo.critic_depth.to_string()),
            ("critic_width", show_auto(&geo.critic_width)),
            ("mode", show_auto(&geo.mode)),
            ("branches", geo.branches.to_string()),
            ("embed_dim", geo.embed_dim.to_string()),
            ("heads", geo.heads.to_string()),
            ("attention_layers", geo.attention_layers.to_string()),
            ("activation", geo.activation.to_string()),
            ("boundary", geo.boundary.map_or("none".into(), |b| b.to_string())),
            ("ga_population", self.run.ga.population.to_string()),
            ("ga_crossover_eta", self.run.ga.crossover_eta.to_string()),
            ("ga_crossover_prob", self.run.ga.crossover_prob.to_string()),
            ("ga_mutation_eta", self.run.ga.mutation_eta.to_string()),
            ("ga_mutation_prob", show_auto(&self.run.ga.mutation_prob)),
            ("cmaes_sigma0", self.run.cmaes.sigma0.to_string()),
            ("cmaes_population", show_auto(&self.run.cmaes.population)),
            ("lsm_epsilon", self.run.lsm.epsilon.to_string()),
            ("lsm_local_samples", self.run.lsm.local_samples.to_string()),
            ("lsm_generator_lr", show_auto(&self.run.lsm.generator_lr)),
        ];
        entries.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Hex SHA-256 of the canonical text, shortened to 16 digits.
    pub fn digest(&self) -> String {
        let hash = Sha256::digest(self.to_text().as_bytes());
        hash.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    /// Directory name used when `output` is not set.
    pub fn output_name(&self) -> String {
        self.output.clone().unwrap_or_else(|| {
            format!(
                "{}_{}_d{}_{}",
                self.run.algorithm,
                self.problem,
                self.dim,
                &self.digest()[..8]
            )
        })
    }

    pub fn validate(&self) -> Result<()> {
        let geo = &self.run.geo;
        let check = |ok: bool, key: &str, msg: &str| if ok { Ok(()) } else { Err(Error::config(key, msg)) };
        check(self.repeats >= 1, "repeats", "must be at least 1")?;
        check(
            self.dim >= self.problem.min_dim(),
            "dim",
            &format!("{} needs at least {} dimensions", self.problem, self.problem.min_dim()),
        )?;
        check(
            self.noise_std >= 0.0 && self.noise_std.is_finite(),
            "noise_std",
            "must be finite and ≥ 0",
        )?;
        check(self.igd_points >= 2, "igd_points", "must be at least 2")?;
        check(self.run.snapshot_every >= 1, "snapshot_every", "must be at least 1")?;
        check(self.run.budget >= 1, "budget", "must be at least 1")?;
        let algo = self.run.algorithm;
        let single_only = matches!(algo, Algorithm::Cmaes | Algorithm::Lsm);
        check(
            !single_only || self.problem.objectives() == 1,
            "algorithm",
            &format!("{algo} supports single-objective problems only"),
        )?;
        if matches!(algo, Algorithm::Geo | Algorithm::GeoOneLayer | Algorithm::Lsm) {
            let init = geo.init_count(self.dim) as u64;
            check(
                self.run.budget >= init,
                "budget",
                &format!("budget {} is below the {init} initialization samples", self.run.budget),
            )?;
        }
        check(geo.pool_size >= 2, "pool_size", "must be at least 2")?;
        check(geo.parents >= 1, "parents", "must be at least 1")?;
        check(geo.mutation_steps >= 1, "mutation_steps", "must be at least 1")?;
        check(
            !geo.lr_set.is_empty() && geo.lr_set.iter().all(|v| v.is_finite() && *v >= 0.0),
            "lr_set",
            "must be a non-empty list of non-negative numbers",
        )?;
        check(geo.buffer_len != Some(0), "buffer_len", "must be positive")?;
        check(geo.critic_batch >= 1, "critic_batch", "must be at least 1")?;
        check(
            geo.critic_lr.is_finite() && geo.critic_lr >= 0.0,
            "critic_lr",
            "must be finite and ≥ 0",
        )?;
        check(
            geo.init_samples.is_none_or(|n| n >= 1),
            "init_samples",
            "must be at least 1",
        )?;
        check(
            geo.latent_dim.is_none_or(|n| n >= 1),
            "latent_dim",
            "must be at least 1",
        )?;
        check(geo.depth >= 1, "depth", "must be at least 1")?;
        check(geo.critic_depth >= 1, "critic_depth", "must be at least 1")?;
        check(geo.width.is_none_or(|n| n >= 1), "width", "must be at least 1")?;
        check(
            geo.critic_width.is_none_or(|n| n >= 1),
            "critic_width",
            "must be at least 1",
        )?;
        check(geo.branches >= 1, "branches", "must be at least 1")?;
        if geo.resolved_mode(self.dim) == ArchMode::TrunkBranch {
            check(
                self.dim.is_multiple_of(geo.branches),
                "branches",
                &format!("{} branches do not divide dimension {}", geo.branches, self.dim),
            )?;
            check(
                geo.heads >= 1 && geo.embed_dim.is_multiple_of(geo.heads),
                "heads",
                "must divide embed_dim",
            )?;
            check(geo.attention_layers >= 1, "attention_layers", "must be at least 1")?;
        }
        check(self.run.ga.population >= 2, "ga_population", "must be at least 2")?;
        check(
            (0.0..=1.0).contains(&self.run.ga.crossover_prob),
            "ga_crossover_prob",
            "must lie in [0, 1]",
        )?;
        check(
            self.run.ga.mutation_prob.is_none_or(|p| (0.0..=1.0).contains(&p)),
            "ga_mutation_prob",
            "must lie in [0, 1]",
        )?;
        check(self.run.ga.crossover_eta >= 0.0, "ga_crossover_eta", "must be ≥ 0")?;
        check(self.run.ga.mutation_eta >= 0.0, "ga_mutation_eta", "must be ≥ 0")?;
        check(
            self.run.cmaes.sigma0 > 0.0 && self.run.cmaes.sigma0.is_finite(),
            "cmaes_sigma0",
            "must be positive",
        )?;
        check(
            self.run.cmaes.population.is_none_or(|n| n >= 2),
            "cmaes_population",
            "must be at least 2",
        )?;
        check(
            self.run.lsm.epsilon > 0.0 && self.run.lsm.epsilon.is_finite(),
            "lsm_epsilon",
            "must be positive",
        )?;
        check(
            self.run.lsm.local_samples >= 1,
            "lsm_local_samples",
            "must be at least 1",
        )?;
        check(
            self.run.lsm.generator_lr.is_none_or(|lr| lr.is_finite() && lr >= 0.0),
            "lsm_generator_lr",
            "must be finite and ≥ 0",
        )?;
        if let Some(name) = &self.output {
            check(
                !name.is_empty() && !name.contains(['/', '\\']) && name != "." && name != "..",
                "output",
                "must be a plain directory name",
            )?;
        }
        Ok(())
    }
}
