//! Attention-complement classifier. A sigmoid attention map splits the
//! backbone feature map into a content part `c = a * fm` and its exact
//! complement `s = fm - c`; only `c` reaches the classifier head. Training
//! reweights the empirical risk over data strata found by clustering the
//! style features, so the head cannot lean on patterns that vary across
//! strata.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{stack_batch, Backbone, CausalTaps, ModelConfig, ModelError, ModelResult};
use crate::autograd::{AgResult, Optimizer, Tape, Tensor, TensorId};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct CaamLite {
    pub backbone: Backbone,
    pub classes: usize,
    attn: Tensor, // [16,16,3,3]
    cls: Tensor,  // [16,K]
    strata: usize,
    refresh_every: usize,
    kmeans_iters: usize,
    batch_size: usize,
    partition: Option<Partition>,
}

/// Stratum assignment over one training set, with empirical weights.
#[derive(Debug, Clone)]
pub struct Partition {
    pub assignment: Vec<usize>,
    /// `weights[t]` is the fraction of samples in stratum `t`.
    pub weights: Vec<f64>,
}

impl Partition {
    fn from_assignment(assignment: Vec<usize>, strata: usize) -> Self {
        let mut weights = vec![0.0; strata];
        for &t in &assignment {
            weights[t] += 1.0;
        }
        let n = assignment.len().max(1) as f64;
        for w in weights.iter_mut() {
            *w /= n;
        }
        Partition { assignment, weights }
    }
}

struct Nodes {
    kernels: (TensorId, TensorId),
    attn: TensorId,
    cls: TensorId,
}

/// Lloyd's k-means on dense feature vectors with a seeded start: centroids
/// begin at `k` distinct shuffled samples, ties in assignment go to the
/// lowest centroid index, empty clusters keep their previous centroid.
pub fn kmeans_assign<R: rand::Rng>(
    features: &[Vec<f64>],
    k: usize,
    iters: usize,
    rng: &mut R,
) -> Vec<usize> {
    let n = features.len();
    if n == 0 {
        return Vec::new();
    }
    let k = k.min(n).max(1);
    let dim = features[0].len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut centroids: Vec<Vec<f64>> = order[..k].iter().map(|&i| features[i].clone()).collect();
    let mut assignment = vec![0usize; n];
    for _ in 0..iters.max(1) {
        for (i, f) in features.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cen) in centroids.iter().enumerate() {
                let d: f64 = f.iter().zip(cen).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assignment[i] = best;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (i, f) in features.iter().enumerate() {
            let t = assignment[i];
            counts[t] += 1;
            for (s, v) in sums[t].iter_mut().zip(f) {
                *s += v;
            }
        }
        for t in 0..k {
            if counts[t] > 0 {
                for (c, s) in centroids[t].iter_mut().zip(&sums[t]) {
                    *c = s / counts[t] as f64;
                }
            }
        }
    }
    assignment
}

impl CaamLite {
    pub fn new(
        cfg: &ModelConfig,
        in_shape: [usize; 3],
        classes: usize,
        seed: u64,
    ) -> ModelResult<Self> {
        let mut rng = stream(seed, "caam-init", 0);
        let backbone = Backbone::new(in_shape, &mut rng)?;
        let fm_c = backbone.fm_shape()[0];
        Ok(CaamLite {
            backbone,
            classes,
            attn: Tensor::randn(&[fm_c, fm_c, 3, 3], (2.0 / (fm_c * 9) as f64).sqrt(), &mut rng)
                .requires_grad(true),
            cls: Tensor::randn(&[fm_c, classes], (1.0 / fm_c as f64).sqrt(), &mut rng)
                .requires_grad(true),
            strata: cfg.strata,
            refresh_every: cfg.refresh_every,
            kmeans_iters: cfg.kmeans_iters,
            batch_size: cfg.batch_size,
            partition: None,
        })
    }

    fn register(&self, tape: &mut Tape) -> Nodes {
        Nodes {
            kernels: self.backbone.register(tape),
            attn: tape.leaf(self.attn.clone()),
            cls: tape.leaf(self.cls.clone()),
        }
    }

    /// Feature map and its attention split: `(fm, c, s)` with `c = a*fm`
    /// and `s = fm - c`.
    fn split(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        x: TensorId,
    ) -> AgResult<(TensorId, TensorId, TensorId)> {
        let fm = self.backbone.feature_map_with(tape, x, n.kernels)?;
        let z = tape.conv2d(fm, n.attn, 1)?;
        let a = tape.sigmoid(z)?;
        let c = tape.mul(a, fm)?;
        let s = tape.sub(fm, c)?;
        Ok((fm, c, s))
    }

    fn logits_from_content(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        c: TensorId,
        batch: usize,
    ) -> AgResult<TensorId> {
        let pooled = tape.global_mean_pool(c)?;
        let pooled = tape.reshape(pooled, &[batch, self.backbone.fm_shape()[0]])?;
        tape.matmul(pooled, n.cls)
    }

    /// Pooled style features for every sample, used to form the strata.
    fn style_features(&self, xs: &[Tensor]) -> ModelResult<Vec<Vec<f64>>> {
        xs.par_iter()
            .map(|x| {
                let mut tape = Tape::new();
                let n = self.register(&mut tape);
                let xid = tape.constant(x.clone());
                let (_, _, s) = self.split(&mut tape, &n, xid)?;
                let pooled = tape.global_mean_pool(s)?;
                Ok(tape.value(pooled).data().to_vec())
            })
            .collect()
    }

    fn refresh_partition(
        &mut self,
        xs: &[Tensor],
        epoch: usize,
        seed: u64,
    ) -> ModelResult<()> {
        let features = self.style_features(xs)?;
        let mut rng = stream(seed, "caam-kmeans", epoch as u64);
        let assignment = kmeans_assign(&features, self.strata, self.kmeans_iters, &mut rng);
        self.partition = Some(Partition::from_assignment(assignment, self.strata));
        Ok(())
    }

    pub fn partition(&self) -> Option<&Partition> {
        self.partition.as_ref()
    }

    pub fn train_epoch(
        &mut self,
        opt: &mut Optimizer,
        xs: &[Tensor],
        ys: &[usize],
        epoch: usize,
        seed: u64,
    ) -> ModelResult<f64> {
        let stale = match &self.partition {
            None => true,
            Some(p) => p.assignment.len() != xs.len(),
        };
        if stale || epoch % self.refresh_every == 0 {
            self.refresh_partition(xs, epoch, seed)?;
        }
        let partition = self.partition.clone().expect("partition refreshed above");

        // per-stratum sample queues, each shuffled independently
        let mut queues: Vec<Vec<usize>> = vec![Vec::new(); self.strata];
        for (i, &t) in partition.assignment.iter().enumerate() {
            queues[t].push(i);
        }
        for (t, q) in queues.iter_mut().enumerate() {
            q.shuffle(&mut stream(seed, "caam-shuffle", (epoch * 64 + t) as u64));
        }
        let rounds = queues
            .iter()
            .map(|q| q.len().div_ceil(self.batch_size))
            .max()
            .unwrap_or(0);

        let in_shape = self.backbone.in_shape();
        let mut total = 0.0;
        let mut steps = 0usize;
        for round in 0..rounds {
            let mut tape = Tape::new();
            let n = self.register(&mut tape);
            let mut loss: Option<TensorId> = None;
            for t in 0..self.strata {
                let q = &queues[t];
                let lo = round * self.batch_size;
                if lo >= q.len() {
                    continue;
                }
                let hi = (lo + self.batch_size).min(q.len());
                let idx = &q[lo..hi];
                let batch_refs: Vec<&Tensor> = idx.iter().map(|&i| &xs[i]).collect();
                let batch_ys: Vec<usize> = idx.iter().map(|&i| ys[i]).collect();
                let xb = tape.constant(stack_batch(&batch_refs, in_shape)?);
                let (_, c, _) = self.split(&mut tape, &n, xb)?;
                let logits = self.logits_from_content(&mut tape, &n, c, batch_refs.len())?;
                let ce = tape.softmax_cross_entropy(logits, &batch_ys)?;
                let weighted = tape.scale(ce, partition.weights[t])?;
                loss = Some(match loss {
                    None => weighted,
                    Some(acc) => tape.add(acc, weighted)?,
                });
            }
            let Some(loss) = loss else { continue };
            let loss_val = tape.value(loss).data()[0];
            let mut grads = tape.backward(loss)?;
            let ids = [n.kernels.0, n.kernels.1, n.attn, n.cls];
            let mut params = self.trainable_mut();
            for (p, id) in params.iter_mut().zip(ids) {
                p.grad = grads.take(id);
            }
            opt.step(&mut params)?;
            total += loss_val;
            steps += 1;
        }
        if steps == 0 {
            return Err(ModelError::EmptyTrainingSet);
        }
        Ok(total / steps as f64)
    }

    pub fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        let n = self.register(tape);
        let (_, c, _) = self.split(tape, &n, x)?;
        self.logits_from_content(tape, &n, c, 1)
    }

    /// Content and style are the flattened split halves from one forward
    /// pass, adjusted by one re-subtraction so that `c + s` reproduces the
    /// feature map bit for bit.
    pub fn taps(&self, x: &Tensor, y: usize) -> ModelResult<CausalTaps> {
        let _ = y; // the split does not condition on the label
        let mut tape = Tape::new();
        let n = self.register(&mut tape);
        let xid = tape.constant(x.clone());
        let (fm, c, s) = self.split(&mut tape, &n, xid)?;
        let logits_id = self.logits_from_content(&mut tape, &n, c, 1)?;
        let fm_v = tape.value(fm).data().to_vec();
        let s_v = tape.value(s).data().to_vec();
        // c is recomputed as fm - s: one refinement makes the complement
        // identity exact in floating point
        let c_v: Vec<f64> = fm_v.iter().zip(&s_v).map(|(&f, &sv)| f - sv).collect();
        let logits = tape.value(logits_id).data().to_vec();
        let dim = fm_v.len();
        Ok(CausalTaps {
            content: Tensor::new_unchecked(vec![dim], c_v),
            style: Tensor::new_unchecked(vec![dim], s_v),
            logits,
        })
    }

    /// Feature map and refined split values for one input, for invariant
    /// checks: returns `(fm, c, s)` flattened.
    pub fn split_values(&self, x: &Tensor) -> ModelResult<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let n = self.register(&mut tape);
        let xid = tape.constant(x.clone());
        let (fm, c, s) = self.split(&mut tape, &n, xid)?;
        let _ = c;
        let fm_v = tape.value(fm).data().to_vec();
        let s_v = tape.value(s).data().to_vec();
        let c_v: Vec<f64> = fm_v.iter().zip(&s_v).map(|(&f, &sv)| f - sv).collect();
        Ok((fm_v, c_v, s_v))
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(4);
        self.backbone.params(&mut out);
        out.push(("attn".into(), &self.attn));
        out.push(("cls".into(), &self.cls));
        out
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.backbone.conv1, &mut self.backbone.conv2, &mut self.attn, &mut self.cls]
    }

    pub(crate) fn set_param(&mut self, name: &str, value: Tensor) -> ModelResult<()> {
        if name.starts_with("backbone.") {
            return if self.backbone.set_param(name, value)? {
                Ok(())
            } else {
                Err(ModelError::UnknownParam(name.into()))
            };
        }
        let slot = match name {
            "attn" => &mut self.attn,
            "cls" => &mut self.cls,
            _ => return Err(ModelError::UnknownParam(name.into())),
        };
        if slot.shape() != value.shape() {
            return Err(ModelError::ParamShape {
                name: name.into(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value.requires_grad(true);
        Ok(())
    }
}
