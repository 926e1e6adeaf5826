//! Critic training data: the bounded replay buffer, Latin hypercube
//! initialization, and critic regression.

use std::collections::VecDeque;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::models::{CriticModel, TargetScaler};
use crate::nn::{adam_step, Tensor};
use crate::problems::Bounds;
use crate::{ObjectiveVector, SearchPoint};

#[derive(Debug, Clone, PartialEq)]
pub struct BufferEntry {
    pub x: SearchPoint,
    pub f: ObjectiveVector,
    pub iteration: u64,
}

/// Bounded FIFO of evaluated points. Oldest entries are evicted first.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    entries: VecDeque<BufferEntry>,
    max_len: usize,
    objectives: usize,
    pushes: u64,
}

impl ReplayBuffer {
    pub fn new(max_len: usize, objectives: usize) -> Result<Self> {
        if max_len == 0 || objectives == 0 {
            return Err(Error::InvalidArgument(
                "buffer needs positive capacity and objective count".into(),
            ));
        }
        Ok(Self {
            entries: VecDeque::with_capacity(max_len),
            max_len,
            objectives,
            pushes: 0,
        })
    }

    pub fn push(&mut self, x: SearchPoint, f: ObjectiveVector, iteration: u64) -> Result<()> {
        if f.len() != self.objectives {
            return Err(Error::LengthMismatch {
                expected: self.objectives,
                found: f.len(),
            });
        }
        if self.entries.len() == self.max_len {
            self.entries.pop_front();
        }
        self.entries.push_back(BufferEntry { x, f, iteration });
        self.pushes += 1;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn pushes(&self) -> u64 {
        self.pushes
    }

    pub fn evicted(&self) -> u64 {
        self.pushes - self.entries.len() as u64
    }

    pub fn iter(&self) -> impl ExactSizeIterator<Item = &BufferEntry> {
        self.entries.iter()
    }

    pub fn get(&self, i: usize) -> Option<&BufferEntry> {
        self.entries.get(i)
    }

    /// Uniform sample with replacement.
    pub fn batch<R: Rng + ?Sized>(&self, size: usize, rng: &mut R) -> Result<Vec<&BufferEntry>> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        Ok((0..size)
            .map(|_| &self.entries[rng.gen_range(0..self.entries.len())])
            .collect())
    }

    /// Rows of `iteration, x..., f...`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let Some(first) = self.entries.front() else {
            writeln!(w, "iteration")?;
            return Ok(());
        };
        let mut header = vec!["iteration".to_string()];
        header.extend((1..=first.x.len()).map(|i| format!("x{i}")));
        header.extend((1..=self.objectives).map(|i| format!("f{i}")));
        writeln!(w, "{}", header.join(","))?;
        for e in &self.entries {
            let mut row = vec![e.iteration.to_string()];
            row.extend(e.x.iter().chain(&e.f).map(|v| v.to_string()));
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// One sample per equal stratum in every dimension, strata permuted
/// independently per dimension.
pub fn latin_hypercube<R: Rng + ?Sized>(count: usize, bounds: &Bounds, rng: &mut R) -> Result<Vec<SearchPoint>> {
    if count == 0 {
        return Err(Error::InvalidArgument(
            "latin hypercube needs at least one sample".into(),
        ));
    }
    if !bounds.is_valid() {
        return Err(Error::InvalidArgument("latin hypercube needs finite bounds".into()));
    }
    let d = bounds.dim();
    let mut points = vec![vec![0.0; d]; count];
    let mut strata: Vec<usize> = (0..count).collect();
    for j in 0..d {
        strata.shuffle(rng);
        let (lo, width) = (bounds.lower[j], bounds.width(j));
        for (p, &s) in points.iter_mut().zip(&strata) {
            let u: f64 = rng.gen();
            let v = lo + width * (s as f64 + u) / count as f64;
            p[j] = v.clamp(lo, bounds.upper[j]);
        }
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CriticReport {
    pub objective_index: usize,
    /// Mean squared error over the whole buffer, in objective units.
    pub loss_before: f64,
    pub loss_after: f64,
    /// Epochs cut short by a non-finite loss or gradient.
    pub aborted_epochs: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub critics: Vec<CriticReport>,
    pub epochs: usize,
    pub batches: usize,
}

fn buffer_tensor(buffer: &ReplayBuffer) -> Result<Tensor> {
    let d = buffer.get(0).map_or(0, |e| e.x.len());
    let mut data = Vec::with_capacity(buffer.len() * d);
    for e in buffer.iter() {
        if e.x.len() != d {
            return Err(Error::LengthMismatch {
                expected: d,
                found: e.x.len(),
            });
        }
        data.extend_from_slice(&e.x);
    }
    Tensor::new(vec![buffer.len(), d], data)
}

fn mse(critic: &CriticModel, xs: &Tensor, targets: &[f64]) -> Result<f64> {
    let pred = critic.predict(xs)?;
    Ok(pred.iter().zip(targets).map(|(p, t)| (p - t).powi(2)).sum::<f64>() / targets.len() as f64)
}

/// Refits the target standardization to `targets`. Once a critic has been
/// trained, its final dense layer is rewritten so predictions are unchanged.
fn refit_scaler(critic: &mut CriticModel, targets: &[f64]) {
    let n = targets.len() as f64;
    let mean = targets.iter().sum::<f64>() / n;
    let var = targets.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 { var.sqrt() } else { 1.0 };
    let old = critic.scaler;
    if critic.params.step() == 0 {
        critic.scaler = TargetScaler { mean, std };
        return;
    }
    let k = critic.params.len();
    let ratio = old.std / std;
    critic
        .params
        .tensor_mut(k - 2)
        .data_mut()
        .iter_mut()
        .for_each(|w| *w *= ratio);
    for b in critic.params.tensor_mut(k - 1).data_mut() {
        *b = (*b * old.std + old.mean - mean) / std;
    }
    critic.scaler = TargetScaler { mean, std };
}

/// Regresses each critic onto its own objective column of the buffer by mean
/// squared error on standardized targets. Each epoch is one shuffled pass.
pub fn train_critics<R: Rng + ?Sized>(
    critics: &mut [CriticModel],
    buffer: &ReplayBuffer,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    rng: &mut R,
) -> Result<TrainReport> {
    if buffer.is_empty() {
        return Err(Error::EmptyBuffer);
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let xs = buffer_tensor(buffer)?;
    let d = xs.last_dim();
    let n = buffer.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut reports = Vec::with_capacity(critics.len());
    let mut batches = 0;
    for critic in critics.iter_mut() {
        let idx = critic.objective_index;
        let targets: Vec<f64> = buffer.iter().map(|e| e.f[idx]).collect();
        let loss_before = mse(critic, &xs, &targets)?;
        if epochs > 0 {
            refit_scaler(critic, &targets);
        }
        let TargetScaler { mean, std } = critic.scaler;
        let mut aborted_epochs = 0;
        for _ in 0..epochs {
            order.shuffle(rng);
            for chunk in order.chunks(batch_size) {
                batches += 1;
                let mut bx = Vec::with_capacity(chunk.len() * d);
                for &i in chunk {
                    bx.extend_from_slice(&xs.data()[i * d..(i + 1) * d]);
                }
                let bx = Tensor::new(vec![chunk.len(), d], bx)?;
                let step = (|| -> Result<()> {
                    let (out, tape) = critic.net.forward(&critic.params, &bx)?;
                    let scale = 2.0 / chunk.len() as f64;
                    let grad: Vec<f64> = out
                        .data()
                        .iter()
                        .zip(chunk)
                        .map(|(o, &i)| scale * (o - (targets[i] - mean) / std))
                        .collect();
                    let grad = Tensor::new(vec![chunk.len(), 1], grad)?;
                    let grads = critic.net.backward(&critic.params, &tape, &grad)?;
                    adam_step(&mut critic.params, &grads.params, lr)
                })();
                match step {
                    Ok(()) => {}
                    Err(Error::NonFinite(what)) => {
                        log::warn!("critic {idx}: non-finite {what}, epoch aborted");
                        aborted_epochs += 1;
                        break;
                    }
                    Err(e) => return Err(e),
                }
            }
        }
        let loss_after = if epochs == 0 {
            loss_before
        } else {
            mse(critic, &xs, &targets)?
        };
        reports.push(CriticReport {
            objective_index: idx,
            loss_before,
            loss_after,
            aborted_epochs,
        });
    }
    Ok(TrainReport {
        critics: reports,
        epochs,
        batches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_critic, NetworkArch};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn filled(points: &[SearchPoint], f: impl Fn(&[f64]) -> Vec<f64>, objectives: usize) -> ReplayBuffer {
        let mut b = ReplayBuffer::new(points.len(), objectives).unwrap();
        for p in points {
            b.push(p.clone(), f(p), 0).unwrap();
        }
        b
    }

    #[test]
    fn fifo_eviction_keeps_order() {
        let mut b = ReplayBuffer::new(3, 1).unwrap();
        for i in 0..4 {
            b.push(vec![i as f64], vec![0.0], i).unwrap();
        }
        let xs: Vec<f64> = b.iter().map(|e| e.x[0]).collect();
        assert_eq!(xs, [1.0, 2.0, 3.0]);
        assert_eq!(b.evicted(), 1);
        assert!(b.push(vec![0.0], vec![0.0, 1.0], 5).is_err());
    }

    #[test]
    fn batches_sample_with_replacement() {
        let mut b = ReplayBuffer::new(4, 1).unwrap();
        assert!(matches!(b.batch(2, &mut rng(0)), Err(Error::EmptyBuffer)));
        b.push(vec![1.0], vec![1.0], 0).unwrap();
        b.push(vec![2.0], vec![2.0], 0).unwrap();
        assert_eq!(b.batch(10, &mut rng(0)).unwrap().len(), 10);
        let a: Vec<f64> = b.batch(10, &mut rng(3)).unwrap().iter().map(|e| e.x[0]).collect();
        let c: Vec<f64> = b.batch(10, &mut rng(3)).unwrap().iter().map(|e| e.x[0]).collect();
        assert_eq!(a, c);
    }

    #[test]
    fn latin_hypercube_strata() {
        let bounds = Bounds::uniform(1, 0.0, 1.0);
        let pts = latin_hypercube(4, &bounds, &mut rng(1)).unwrap();
        let mut cells: Vec<usize> = pts.iter().map(|p| (p[0] * 4.0).floor() as usize).collect();
        cells.sort();
        assert_eq!(cells, [0, 1, 2, 3]);
        let one = latin_hypercube(1, &Bounds::uniform(3, -2.0, 5.0), &mut rng(1)).unwrap();
        assert!(Bounds::uniform(3, -2.0, 5.0).contains(&one[0]));
        assert!(latin_hypercube(0, &bounds, &mut rng(1)).is_err());
    }

    #[test]
    fn latin_hypercube_marginals() {
        let bounds = Bounds::uniform(5, -3.0, 1.0);
        let count = 100;
        let pts = latin_hypercube(count, &bounds, &mut rng(7)).unwrap();
        for j in 0..5 {
            let mut col: Vec<f64> = pts.iter().map(|p| (p[j] + 3.0) / 4.0).collect();
            col.sort_by(f64::total_cmp);
            let mut cells: Vec<usize> = col
                .iter()
                .map(|u| ((u * count as f64) as usize).min(count - 1))
                .collect();
            cells.dedup();
            assert_eq!(cells.len(), count);
            let ks = col
                .iter()
                .enumerate()
                .map(|(i, u)| {
                    (u - i as f64 / count as f64)
                        .abs()
                        .max((u - (i + 1) as f64 / count as f64).abs())
                })
                .fold(0.0, f64::max);
            assert!(ks <= 2.0 / (count as f64).sqrt());
        }
    }

    #[test]
    fn constant_target_is_learned() {
        let bounds = Bounds::uniform(3, 0.0, 1.0);
        let pts = latin_hypercube(64, &bounds, &mut rng(2)).unwrap();
        let buf = filled(&pts, |_| vec![4.5], 1);
        let mut critics = vec![build_critic(&NetworkArch::mlp(3, 1, 2, 16), 0, &mut rng(3)).unwrap()];
        train_critics(&mut critics, &buf, 50, 16, 1e-2, &mut rng(4)).unwrap();
        for p in &pts {
            let p = critics[0].predict_one(p).unwrap();
            assert!((p - 4.5).abs() < 1e-2, "{p}");
        }
    }

    #[test]
    fn zero_epochs_leaves_critic_alone() {
        let pts = latin_hypercube(8, &Bounds::uniform(2, 0.0, 1.0), &mut rng(2)).unwrap();
        let buf = filled(&pts, |x| vec![x[0]], 1);
        let mut critics = vec![build_critic(&NetworkArch::mlp(2, 1, 2, 8), 0, &mut rng(3)).unwrap()];
        let before = critics[0].clone();
        let report = train_critics(&mut critics, &buf, 0, 4, 1e-2, &mut rng(4)).unwrap();
        assert!(critics[0].params.same_values(&before.params));
        assert_eq!(critics[0].scaler, before.scaler);
        assert_eq!(report.critics[0].loss_before, report.critics[0].loss_after);
    }

    #[test]
    fn linear_target_regression() {
        let pts = latin_hypercube(200, &Bounds::uniform(4, 0.0, 1.0), &mut rng(5)).unwrap();
        let buf = filled(&pts, |x| vec![1.0 + 2.0 * x[0] - x[1] + 0.5 * x[2] + 3.0 * x[3]], 1);
        let mut critics = vec![build_critic(&NetworkArch::mlp(4, 1, 2, 16), 0, &mut rng(6)).unwrap()];
        let report = train_critics(&mut critics, &buf, 500, 32, 3e-3, &mut rng(7)).unwrap();
        let r = &report.critics[0];
        assert!(r.loss_after < 1e-3, "{r:?}");
        assert!(r.loss_after.is_finite() && r.loss_before > r.loss_after);
    }

    #[test]
    fn critics_see_only_their_objective() {
        let pts = latin_hypercube(32, &Bounds::uniform(2, 0.0, 1.0), &mut rng(8)).unwrap();
        let buf = filled(&pts, |x| vec![x[0], 100.0 + x[1]], 2);
        let arch = NetworkArch::mlp(2, 1, 2, 8);
        let mut critics = vec![
            build_critic(&arch, 0, &mut rng(1)).unwrap(),
            build_critic(&arch, 1, &mut rng(1)).unwrap(),
        ];
        train_critics(&mut critics, &buf, 1, 8, 1e-3, &mut rng(2)).unwrap();
        let mean0: f64 = pts.iter().map(|p| p[0]).sum::<f64>() / 32.0;
        assert!((critics[0].scaler.mean - mean0).abs() < 1e-12);
        assert!((critics[1].scaler.mean - 100.0 - 0.5).abs() < 0.1);
    }

    #[test]
    fn scaler_refit_preserves_predictions() {
        let pts = latin_hypercube(8, &Bounds::uniform(2, 0.0, 1.0), &mut rng(2)).unwrap();
        let buf = filled(&pts, |x| vec![x[0] * 3.0], 1);
        let mut c = build_critic(&NetworkArch::mlp(2, 1, 3, 8), 0, &mut rng(1)).unwrap();
        train_critics(std::slice::from_mut(&mut c), &buf, 1, 4, 1e-3, &mut rng(3)).unwrap();
        let x = [0.3, 0.9];
        let before = c.predict_one(&x).unwrap();
        refit_scaler(&mut c, &[3.0, 5.0, 10.0]);
        assert!((c.predict_one(&x).unwrap() - before).abs() < 1e-12);
        refit_scaler(&mut c, &[7.0, 7.0]);
        assert!((c.predict_one(&x).unwrap() - before).abs() < 1e-12);
    }

    #[test]
    fn csv_dump() {
        let mut b = ReplayBuffer::new(2, 2).unwrap();
        b.push(vec![0.5, 1.0], vec![2.0, 3.0], 4).unwrap();
        let mut out = Vec::new();
        b.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "iteration,x1,x2,f1,f2\n4,0.5,1,2,3\n");
    }
}
