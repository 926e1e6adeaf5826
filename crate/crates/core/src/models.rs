//! Generator and critic networks, and the two mutation operators applied to
//! generators.

use std::fmt;
use std::io::{BufRead, Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{
    adam_step, init_weights, Activation, BoundaryKind, BoundaryLayer, InitScheme, LayerSpec, Network, ParamSet,
    Signature, Tensor,
};
use crate::problems::Bounds;
use crate::{ObjectiveVector, SearchPoint};

pub use crate::nn::boundary_map;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ArchMode {
    Mlp,
    /// Shared trunk with `M` attention branches, each owning `d / M` of the
    /// search coordinates.
    TrunkBranch,
}

impl fmt::Display for ArchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ArchMode::Mlp => "mlp",
            ArchMode::TrunkBranch => "trunk_branch",
        })
    }
}

impl FromStr for ArchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(ArchMode::Mlp),
            "trunk_branch" => Ok(ArchMode::TrunkBranch),
            other => Err(Error::InvalidArgument(format!("unknown network mode `{other}`"))),
        }
    }
}

/// Objective direction for mutation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sense {
    Minimize,
    Maximize,
}

impl Sense {
    fn sign(self) -> f64 {
        match self {
            Sense::Minimize => 1.0,
            Sense::Maximize => -1.0,
        }
    }
}

/// Shape of a generator (`input_dim` = latent size, `output_dim` = d) or a
/// critic (`input_dim` = d, `output_dim` = 1).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkArch {
    pub input_dim: usize,
    pub output_dim: usize,
    pub mode: ArchMode,
    /// Number of dense layers (MLP) or of trunk dense layers (trunk-branch).
    pub depth: usize,
    pub width: usize,
    pub branches: usize,
    pub activation: Activation,
    pub embed_dim: usize,
    pub heads: usize,
    pub attention_layers: usize,
    pub boundary: Option<BoundaryKind>,
    pub bounds: Option<Bounds>,
}

impl NetworkArch {
    pub fn mlp(input_dim: usize, output_dim: usize, depth: usize, width: usize) -> Self {
        Self {
            input_dim,
            output_dim,
            mode: ArchMode::Mlp,
            depth,
            width,
            branches: 1,
            activation: Activation::Gelu,
            embed_dim: 32,
            heads: 4,
            attention_layers: 1,
            boundary: None,
            bounds: None,
        }
    }

    fn validate(&self, segmented_dim: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.input_dim == 0 || self.output_dim == 0 || self.width == 0 || self.depth == 0 {
            return bad(format!("degenerate architecture {self:?}"));
        }
        if self.mode == ArchMode::TrunkBranch {
            if self.branches == 0 || !segmented_dim.is_multiple_of(self.branches) {
                return bad(format!(
                    "{} branches do not divide dimension {segmented_dim}",
                    self.branches
                ));
            }
            if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
                return bad(format!(
                    "{} heads do not divide embedding {}",
                    self.heads, self.embed_dim
                ));
            }
        }
        if self.boundary.is_some() {
            match &self.bounds {
                Some(b) if b.is_valid() && b.dim() == self.output_dim => {}
                _ => return bad("a boundary map needs finite bounds for every output".into()),
            }
        }
        Ok(())
    }

    fn attention_stack(&self, tokens: usize) -> Vec<LayerSpec> {
        let e = self.embed_dim;
        let mut layers = vec![LayerSpec::PositionEmbedding { tokens, width: e }];
        for _ in 0..self.attention_layers {
            layers.push(LayerSpec::SelfAttention {
                heads: self.heads,
                head_dim: e / self.heads,
            });
            layers.push(LayerSpec::LayerNorm { width: e });
        }
        layers
    }

    fn mlp_layers(&self, input: usize, output: usize, depth: usize) -> Vec<LayerSpec> {
        let mut layers = Vec::new();
        let mut fan_in = input;
        for i in 0..depth {
            let fan_out = if i + 1 == depth { output } else { self.width };
            layers.push(LayerSpec::Dense { fan_in, fan_out });
            if i + 1 < depth {
                layers.push(LayerSpec::Activation(self.activation));
            }
            fan_in = fan_out;
        }
        layers
    }

    /// Generator network: latent → search point.
    pub fn generator_network(&self) -> Result<Network> {
        self.validate(self.output_dim)?;
        let d = self.output_dim;
        let mut layers = match self.mode {
            ArchMode::Mlp => self.mlp_layers(self.input_dim, d, self.depth),
            ArchMode::TrunkBranch => {
                let trunk_depth = self.depth.saturating_sub(2).max(1);
                let mut layers = Vec::new();
                let mut fan_in = self.input_dim;
                for _ in 0..trunk_depth {
                    layers.push(LayerSpec::Dense {
                        fan_in,
                        fan_out: self.width,
                    });
                    layers.push(LayerSpec::Activation(self.activation));
                    fan_in = self.width;
                }
                let tokens = d / self.branches;
                let branch = |_| {
                    let mut b = vec![
                        LayerSpec::Dense {
                            fan_in: self.width,
                            fan_out: self.embed_dim,
                        },
                        LayerSpec::Broadcast { tokens },
                    ];
                    b.extend(self.attention_stack(tokens));
                    b.push(LayerSpec::Dense {
                        fan_in: self.embed_dim,
                        fan_out: 1,
                    });
                    b.push(LayerSpec::Flatten);
                    b
                };
                layers.push(LayerSpec::Branches {
                    split: false,
                    branches: (0..self.branches).map(branch).collect(),
                });
                layers
            }
        };
        if let (Some(kind), Some(b)) = (self.boundary, &self.bounds) {
            layers.push(LayerSpec::Boundary(BoundaryLayer {
                kind,
                lower: b.lower.clone(),
                upper: b.upper.clone(),
            }));
        }
        Network::new(Signature::Flat(self.input_dim), layers)
    }

    /// Critic network: search point → scalar; the mirror of the generator.
    pub fn critic_network(&self) -> Result<Network> {
        let arch = NetworkArch {
            boundary: None,
            bounds: None,
            ..self.clone()
        };
        arch.validate(self.input_dim)?;
        let layers = match self.mode {
            ArchMode::Mlp => self.mlp_layers(self.input_dim, 1, self.depth),
            ArchMode::TrunkBranch => {
                let tokens = self.input_dim / self.branches;
                let branch = |_| {
                    let mut b = vec![
                        LayerSpec::ToTokens { tokens, width: 1 },
                        LayerSpec::Dense {
                            fan_in: 1,
                            fan_out: self.embed_dim,
                        },
                    ];
                    b.extend(self.attention_stack(tokens));
                    b.push(LayerSpec::MeanPool);
                    b
                };
                let mut layers = vec![LayerSpec::Branches {
                    split: true,
                    branches: (0..self.branches).map(branch).collect(),
                }];
                let trunk_depth = self.depth.saturating_sub(1).max(1);
                layers.push(LayerSpec::Activation(self.activation));
                layers.extend(self.mlp_layers(self.branches * self.embed_dim, 1, trunk_depth));
                layers
            }
        };
        Network::new(Signature::Flat(self.input_dim), layers)
    }

    fn to_header(&self) -> String {
        let boundary = self.boundary.map_or("none".to_string(), |b| b.to_string());
        format!(
            "mode={} input={} output={} depth={} width={} branches={} activation={} embed={} heads={} attention_layers={} boundary={}",
            self.mode,
            self.input_dim,
            self.output_dim,
            self.depth,
            self.width,
            self.branches,
            self.activation,
            self.embed_dim,
            self.heads,
            self.attention_layers,
            boundary
        )
    }

    fn from_header(line: &str, bounds: Option<Bounds>) -> Result<Self> {
        let mut arch = NetworkArch::mlp(1, 1, 1, 1);
        for kv in line.split_whitespace() {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad arch token `{kv}`")))?;
            let num = || {
                v.parse::<usize>()
                    .map_err(|_| Error::Format(format!("bad number for {k}: {v}")))
            };
            match k {
                "mode" => arch.mode = v.parse()?,
                "input" => arch.input_dim = num()?,
                "output" => arch.output_dim = num()?,
                "depth" => arch.depth = num()?,
                "width" => arch.width = num()?,
                "branches" => arch.branches = num()?,
                "activation" => arch.activation = v.parse()?,
                "embed" => arch.embed_dim = num()?,
                "heads" => arch.heads = num()?,
                "attention_layers" => arch.attention_layers = num()?,
                "boundary" => arch.boundary = if v == "none" { None } else { Some(v.parse()?) },
                other => return Err(Error::Format(format!("unknown arch key `{other}`"))),
            }
        }
        arch.bounds = bounds;
        Ok(arch)
    }
}

/// One member of the evolution pool.
#[derive(Debug, Clone)]
pub struct GeneratorGenome {
    pub arch: Arc<NetworkArch>,
    pub net: Arc<Network>,
    pub params: ParamSet,
    pub fitness: Option<ObjectiveVector>,
    pub birth_iter: u64,
    /// Latent seed the generator was last trained and evaluated on.
    pub latent: Vec<f64>,
}

impl GeneratorGenome {
    pub fn latent_dim(&self) -> usize {
        self.arch.input_dim
    }

    /// Writes a text header followed by length-prefixed little-endian tensors.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "geo-genome 1")?;
        writeln!(w, "arch {}", self.arch.to_header())?;
        match &self.arch.bounds {
            Some(b) => {
                let pairs: Vec<String> = b.lower.iter().zip(&b.upper).map(|(l, u)| format!("{l}:{u}")).collect();
                writeln!(w, "bounds {}", pairs.join(" "))?;
            }
            None => writeln!(w, "bounds none")?,
        }
        writeln!(w, "birth_iter {}", self.birth_iter)?;
        match &self.fitness {
            Some(f) => writeln!(w, "fitness {}", join(f))?,
            None => writeln!(w, "fitness unevaluated")?,
        }
        writeln!(w, "latent {}", join(&self.latent))?;
        writeln!(w, "params {}", self.params.len())?;
        writeln!(w, "end")?;
        for p in self.params.params() {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&(p.value.shape().len() as u32).to_le_bytes())?;
            for &s in p.value.shape() {
                w.write_all(&(s as u64).to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(mut r: R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            if r.read_line(&mut line)? == 0 {
                return Err(Error::Format("truncated header".into()));
            }
            Ok(line.trim_end().to_string())
        };
        if next_line(&mut r)? != "geo-genome 1" {
            return Err(Error::Format("not a genome file".into()));
        }
        let mut fields = std::collections::HashMap::new();
        loop {
            let l = next_line(&mut r)?;
            if l == "end" {
                break;
            }
            let (k, v) = l.split_once(' ').unwrap_or((l.as_str(), ""));
            fields.insert(k.to_string(), v.to_string());
        }
        let field = |k: &str| fields.get(k).ok_or_else(|| Error::Format(format!("missing `{k}`")));
        let bounds = match field("bounds")?.as_str() {
            "none" => None,
            s => {
                let mut b = Bounds {
                    lower: Vec::new(),
                    upper: Vec::new(),
                };
                for pair in s.split_whitespace() {
                    let (l, u) = pair
                        .split_once(':')
                        .ok_or_else(|| Error::Format(format!("bad bound `{pair}`")))?;
                    b.lower.push(parse_f64(l)?);
                    b.upper.push(parse_f64(u)?);
                }
                Some(b)
            }
        };
        let arch = NetworkArch::from_header(field("arch")?, bounds)?;
        let birth_iter = field("birth_iter")?
            .parse()
            .map_err(|_| Error::Format("bad birth_iter".into()))?;
        let fitness = match field("fitness")?.as_str() {
            "unevaluated" => None,
            s => Some(parse_list(s)?),
        };
        let latent = parse_list(field("latent")?)?;
        let net = arch.generator_network()?;
        let slots = net.param_slots();
        let mut tensors = Vec::with_capacity(slots.len());
        for slot in slots {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let shape = (0..ndim)
                .map(|_| read_u64(&mut r).map(|v| v as usize))
                .collect::<Result<Vec<_>>>()?;
            if name != slot.name || shape != slot.shape {
                return Err(Error::Format(format!(
                    "parameter `{name}` {shape:?} does not fit the architecture"
                )));
            }
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| read_u64(&mut r).map(f64::from_bits))
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, slot.group, slot.role, Tensor::new(shape, data)?));
        }
        Ok(Self {
            arch: Arc::new(arch),
            net: Arc::new(net),
            params: ParamSet::from_params(tensors),
            fitness,
            birth_iter,
            latent,
        })
    }
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_f64(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Format(format!("bad number `{s}`")))
}

fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split_whitespace().map(parse_f64).collect()
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

/// Affine map between raw critic output and objective units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScaler {
    pub mean: f64,
    pub std: f64,
}

impl Default for TargetScaler {
    fn default() -> Self {
        Self { mean: 0.0, std: 1.0 }
    }
}

/// Surrogate for one objective.
#[derive(Debug, Clone)]
pub struct CriticModel {
    pub arch: Arc<NetworkArch>,
    pub net: Arc<Network>,
    pub params: ParamSet,
    pub objective_index: usize,
    pub scaler: TargetScaler,
}

impl CriticModel {
    /// Predicted objective values for a batch of points.
    pub fn predict(&self, xs: &Tensor) -> Result<Vec<f64>> {
        let raw = self.net.predict(&self.params, xs)?;
        Ok(raw
            .data()
            .iter()
            .map(|r| self.scaler.mean + self.scaler.std * r)
            .collect())
    }

    pub fn predict_one(&self, x: &[f64]) -> Result<f64> {
        Ok(self.predict(&Tensor::row(x))?[0])
    }
}

pub fn build_generator<R: Rng + ?Sized>(arch: &NetworkArch, rng: &mut R) -> Result<GeneratorGenome> {
    let net = arch.generator_network()?;
    let params = init_weights(&net, InitScheme::Xavier, rng);
    Ok(GeneratorGenome {
        arch: Arc::new(arch.clone()),
        net: Arc::new(net),
        params,
        fitness: None,
        birth_iter: 0,
        latent: Vec::new(),
    })
}

/// Shares one network structure across many freshly initialized genomes.
pub fn build_generators<R: Rng + ?Sized>(
    arch: &NetworkArch,
    count: usize,
    rng: &mut R,
) -> Result<Vec<GeneratorGenome>> {
    let arch = Arc::new(arch.clone());
    let net = Arc::new(arch.generator_network()?);
    Ok((0..count)
        .map(|_| GeneratorGenome {
            arch: Arc::clone(&arch),
            net: Arc::clone(&net),
            params: init_weights(&net, InitScheme::Xavier, rng),
            fitness: None,
            birth_iter: 0,
            latent: Vec::new(),
        })
        .collect())
}

pub fn build_critic<R: Rng + ?Sized>(arch: &NetworkArch, objective_index: usize, rng: &mut R) -> Result<CriticModel> {
    let net = arch.critic_network()?;
    let params = init_weights(&net, InitScheme::Xavier, rng);
    Ok(CriticModel {
        arch: Arc::new(arch.clone()),
        net: Arc::new(net),
        params,
        objective_index,
        scaler: TargetScaler::default(),
    })
}

pub fn sample_latent<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

/// `x = G(z)`.
pub fn generate(genome: &GeneratorGenome, z: &[f64]) -> Result<SearchPoint> {
    if z.len() != genome.latent_dim() {
        return Err(Error::LengthMismatch {
            expected: genome.latent_dim(),
            found: z.len(),
        });
    }
    Ok(genome.net.predict(&genome.params, &Tensor::row(z))?.into_data())
}

/// Result of training a copy of a generator against one critic.
#[derive(Debug, Clone)]
pub struct Mutation {
    pub child: GeneratorGenome,
    /// Critic loss `sense · C(G(z))` before each optimizer step.
    pub losses: Vec<f64>,
}

/// Trains a copy of `parent` for `steps` adaptive-moment steps on the loss
/// `sense · C(G(z))` with a single fresh latent `z`. The parent is untouched.
pub fn mutate_generator<R: Rng + ?Sized>(
    parent: &GeneratorGenome,
    critic: &CriticModel,
    lr: f64,
    steps: usize,
    sense: Sense,
    current_iter: u64,
    rng: &mut R,
) -> Result<Mutation> {
    if steps == 0 {
        return Err(Error::InvalidArgument("mutation needs at least one step".into()));
    }
    let z = sample_latent(parent.latent_dim(), rng);
    let zt = Tensor::row(&z);
    let mut child = parent.clone();
    child.params.reset_optimizer();
    child.fitness = None;
    child.birth_iter = current_iter;
    child.latent = z;
    let mut losses = Vec::with_capacity(steps);
    let out_grad = Tensor::filled(&[1, 1], sense.sign() * critic.scaler.std);
    for _ in 0..steps {
        let (x, gen_tape) = child.net.forward(&child.params, &zt)?;
        let (c, critic_tape) = critic.net.forward(&critic.params, &x)?;
        let loss = sense.sign() * (critic.scaler.mean + critic.scaler.std * c.data()[0]);
        if !loss.is_finite() {
            return Err(Error::NonFinite("mutation loss".into()));
        }
        losses.push(loss);
        if lr == 0.0 {
            continue;
        }
        let dx = critic.net.input_gradient(&critic.params, &critic_tape, &out_grad)?;
        let grads = child.net.backward(&child.params, &gen_tape, &dx)?;
        adam_step(&mut child.params, &grads.params, lr)?;
    }
    Ok(Mutation { child, losses })
}

/// Gaussian perturbation of one randomly chosen layer, with standard
/// deviation `scale` times the spread of that layer's current values.
pub fn random_parameter_mutation<R: Rng + ?Sized>(
    parent: &GeneratorGenome,
    scale: f64,
    rng: &mut R,
) -> Result<GeneratorGenome> {
    if !(scale >= 0.0 && scale.is_finite()) {
        return Err(Error::InvalidArgument(format!("mutation scale {scale}")));
    }
    let mut child = parent.clone();
    let groups = child.params.groups();
    let group = groups[rng.gen_range(0..groups.len())];
    let members: Vec<usize> = (0..child.params.len())
        .filter(|&i| child.params.params()[i].group == group)
        .collect();
    let values: Vec<f64> = members
        .iter()
        .flat_map(|&i| child.params.tensor(i).data().iter().copied())
        .collect();
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    let sigma = scale * std;
    if sigma > 0.0 {
        let noise = Normal::new(0.0, sigma).expect("finite sigma");
        for i in members {
            for v in child.params.tensor_mut(i).data_mut() {
                *v += noise.sample(rng);
            }
        }
    }
    Ok(child)
}
