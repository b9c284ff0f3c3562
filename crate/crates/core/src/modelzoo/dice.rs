//! Saliency-masked classifier with a backdoor adjustment. For each training
//! image the model masks out its most class-salient pixels (by the gradient
//! of its own loss) and keeps the masked remainder - the context - in a
//! rolling buffer. Inputs are classified after adding the buffer's mean
//! context, which approximately marginalizes the confounding background;
//! training also runs an inner attack so the adjusted classifier stays
//! robust.

use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{derive_seed, stack_batch, Backbone, CausalTaps, ModelConfig, ModelError, ModelResult};
use crate::attacks::{run_attack, AttackConfig, Norm, WhiteBoxModel};
use crate::autograd::{AgResult, Optimizer, Tape, Tensor, TensorId};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct DiceLite {
    pub backbone: Backbone,
    pub classes: usize,
    head: Tensor, // [D, K]
    mask_q: f64,
    buffer_cap: usize,
    adv_steps: usize,
    adv_epsilon: f64,
    adv_step_size: f64,
    batch_size: usize,
    /// FIFO of masked context images, oldest first.
    buffer: Vec<Tensor>,
}

struct Nodes {
    kernels: (TensorId, TensorId),
    head: TensorId,
}

impl DiceLite {
    pub fn new(
        cfg: &ModelConfig,
        in_shape: [usize; 3],
        classes: usize,
        seed: u64,
    ) -> ModelResult<Self> {
        let mut rng = stream(seed, "dice-init", 0);
        let backbone = Backbone::new(in_shape, &mut rng)?;
        let d = backbone.out_dim();
        Ok(DiceLite {
            backbone,
            classes,
            head: Tensor::randn(&[d, classes], (1.0 / d as f64).sqrt(), &mut rng)
                .requires_grad(true),
            mask_q: cfg.mask_q,
            buffer_cap: cfg.buffer_cap,
            adv_steps: cfg.adv_steps,
            adv_epsilon: cfg.adv_epsilon,
            adv_step_size: cfg.adv_step_size,
            batch_size: cfg.batch_size,
            buffer: Vec::new(),
        })
    }

    pub fn buffer_len(&self) -> usize {
        self.buffer.len()
    }

    /// Mean of the stored contexts, or None while the buffer is cold.
    pub fn buffer_mean(&self) -> Option<Tensor> {
        if self.buffer.is_empty() {
            return None;
        }
        let shape = self.buffer[0].shape().to_vec();
        let mut acc = vec![0.0; self.buffer[0].numel()];
        for t in &self.buffer {
            for (a, v) in acc.iter_mut().zip(t.data()) {
                *a += v;
            }
        }
        let inv = 1.0 / self.buffer.len() as f64;
        for a in acc.iter_mut() {
            *a *= inv;
        }
        Some(Tensor::new_unchecked(shape, acc))
    }

    fn register(&self, tape: &mut Tape) -> Nodes {
        Nodes { kernels: self.backbone.register(tape), head: tape.leaf(self.head.clone()) }
    }

    fn logits_from(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        x: TensorId,
        batch: usize,
    ) -> AgResult<TensorId> {
        let h = self.backbone.features_with(tape, x, n.kernels, batch)?;
        tape.matmul(h, n.head)
    }

    /// Adds the mean context to an on-tape input (tiled across the batch
    /// when needed). Falls back to the raw input while the buffer is cold.
    fn adjusted(&self, tape: &mut Tape, x: TensorId, batch: usize) -> AgResult<TensorId> {
        match self.buffer_mean() {
            None => Ok(x),
            Some(bm) => {
                let bm = if batch == 1 && tape.value(x).shape().len() == 3 {
                    bm
                } else {
                    let mut tiled = Vec::with_capacity(batch * bm.numel());
                    for _ in 0..batch {
                        tiled.extend_from_slice(bm.data());
                    }
                    let mut shape = vec![batch];
                    shape.extend_from_slice(bm.shape());
                    Tensor::new_unchecked(shape, tiled)
                };
                let bid = tape.constant(bm);
                tape.add(x, bid)
            }
        }
    }

    /// The masked context of one image: the `round(q*H*W)` pixels with the
    /// highest saliency (max over channels of |d loss / d x|, through the
    /// deployed, adjusted forward pass) are zeroed across all channels;
    /// saliency ties break toward the lower pixel index. Returns the context
    /// image and the zeroed pixel indices in ascending order.
    pub fn mask_context(&self, x: &Tensor, y: usize) -> ModelResult<(Tensor, Vec<usize>)> {
        let [c, h, w] = self.backbone.in_shape();
        let hw = h * w;
        let mut tape = Tape::new();
        let xid = tape.leaf(x.clone().requires_grad(true));
        let n = self.register(&mut tape);
        let adj = self.adjusted(&mut tape, xid, 1)?;
        let logits = self.logits_from(&mut tape, &n, adj, 1)?;
        let loss = tape.softmax_cross_entropy(logits, &[y])?;
        let mut grads = tape.backward(loss)?;
        let g = grads.take(xid).unwrap_or_else(|| vec![0.0; x.numel()]);

        let mut saliency = vec![0.0f64; hw];
        for ch in 0..c {
            for p in 0..hw {
                saliency[p] = saliency[p].max(g[ch * hw + p].abs());
            }
        }
        let k = ((self.mask_q * hw as f64).round() as usize).min(hw);
        let mut idx: Vec<usize> = (0..hw).collect();
        idx.sort_by(|&a, &b| {
            saliency[b].partial_cmp(&saliency[a]).unwrap().then(a.cmp(&b))
        });
        let mut masked: Vec<usize> = idx[..k].to_vec();
        masked.sort_unstable();

        let mut ctx = x.data().to_vec();
        for &p in &masked {
            for ch in 0..c {
                ctx[ch * hw + p] = 0.0;
            }
        }
        Ok((Tensor::new_unchecked(x.shape().to_vec(), ctx), masked))
    }

    /// The backdoor-adjusted input `x + mean(buffer)`. Unlike the deployed
    /// forward pass, this helper refuses to run on a cold buffer.
    pub fn backdoor_adjust(&self, x: &Tensor) -> ModelResult<Tensor> {
        let bm = self.buffer_mean().ok_or(ModelError::EmptyBuffer)?;
        let sum: Vec<f64> = x.data().iter().zip(bm.data()).map(|(&a, &b)| a + b).collect();
        Ok(Tensor::new_unchecked(x.shape().to_vec(), sum))
    }

    fn push_context(&mut self, ctx: Tensor) {
        if self.buffer.len() == self.buffer_cap {
            self.buffer.remove(0);
        }
        self.buffer.push(ctx);
    }

    pub fn train_epoch(
        &mut self,
        opt: &mut Optimizer,
        xs: &[Tensor],
        ys: &[usize],
        epoch: usize,
        seed: u64,
    ) -> ModelResult<f64> {
        let in_shape = self.backbone.in_shape();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut stream(seed, "dice-shuffle", epoch as u64));

        let attack = AttackConfig::pgd(
            Norm::Linf,
            self.adv_epsilon,
            self.adv_steps,
            self.adv_step_size,
        );
        let mut total = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(self.batch_size).enumerate() {
            let b = chunk.len();
            let batch_xs: Vec<Tensor> = chunk.iter().map(|&i| xs[i].clone()).collect();
            let batch_ys: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();

            // contexts from the current weights, then into the buffer in
            // batch order so the epoch stays deterministic
            let contexts: Vec<(Tensor, Vec<usize>)> = batch_xs
                .par_iter()
                .zip(batch_ys.par_iter())
                .map(|(x, &y)| self.mask_context(x, y))
                .collect::<ModelResult<_>>()?;
            for (ctx, _) in contexts {
                self.push_context(ctx);
            }

            let adv_seed = derive_seed(seed, "dice-adv", epoch as u64, bi as u64);
            let adv =
                run_attack(&*self as &dyn WhiteBoxModel, &batch_xs, &batch_ys, &attack, adv_seed)?;

            let clean_refs: Vec<&Tensor> = batch_xs.iter().collect();
            let adv_refs: Vec<&Tensor> = adv.adversarial.iter().collect();
            let clean = stack_batch(&clean_refs, in_shape)?;
            let advt = stack_batch(&adv_refs, in_shape)?;

            let mut tape = Tape::new();
            let n = self.register(&mut tape);
            let xc = tape.constant(clean);
            let xa = tape.constant(advt);
            let xc_adj = self.adjusted(&mut tape, xc, b)?;
            let xa_adj = self.adjusted(&mut tape, xa, b)?;
            let lc = self.logits_from(&mut tape, &n, xc_adj, b)?;
            let la = self.logits_from(&mut tape, &n, xa_adj, b)?;
            let ce_c = tape.softmax_cross_entropy(lc, &batch_ys)?;
            let ce_a = tape.softmax_cross_entropy(la, &batch_ys)?;
            let sum = tape.add(ce_c, ce_a)?;
            let loss = tape.scale(sum, 0.5)?;
            let loss_val = tape.value(loss).data()[0];

            let mut grads = tape.backward(loss)?;
            let ids = [n.kernels.0, n.kernels.1, n.head];
            let mut params = self.trainable_mut();
            for (p, id) in params.iter_mut().zip(ids) {
                p.grad = grads.take(id);
            }
            opt.step(&mut params)?;

            total += loss_val * b as f64;
            seen += b;
        }
        Ok(total / seen.max(1) as f64)
    }

    /// Deployed forward pass: adjust by the mean context when the buffer is
    /// warm, raw input during cold start.
    pub fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        let n = self.register(tape);
        let adj = self.adjusted(tape, x, 1)?;
        self.logits_from(tape, &n, adj, 1)
    }

    /// Content = features of the adjusted input, style = features of this
    /// image's own masked context, logits from the adjusted pass. Needs a
    /// warm buffer.
    pub fn taps(&self, x: &Tensor, y: usize) -> ModelResult<CausalTaps> {
        let x_adj = self.backdoor_adjust(x)?;
        let (ctx, _) = self.mask_context(x, y)?;
        let d = self.backbone.out_dim();
        let mut tape = Tape::new();
        let n = self.register(&mut tape);
        let adj_id = tape.constant(x_adj);
        let ctx_id = tape.constant(ctx);
        let content_id = self.backbone.features_with(&mut tape, adj_id, n.kernels, 1)?;
        let style_id = self.backbone.features_with(&mut tape, ctx_id, n.kernels, 1)?;
        let logits_id = tape.matmul(content_id, n.head)?;
        Ok(CausalTaps {
            content: Tensor::new_unchecked(vec![d], tape.value(content_id).data().to_vec()),
            style: Tensor::new_unchecked(vec![d], tape.value(style_id).data().to_vec()),
            logits: tape.value(logits_id).data().to_vec(),
        })
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(3 + self.buffer.len());
        self.backbone.params(&mut out);
        out.push(("head".into(), &self.head));
        for (i, t) in self.buffer.iter().enumerate() {
            out.push((format!("buffer.{i}"), t));
        }
        out
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.backbone.conv1, &mut self.backbone.conv2, &mut self.head]
    }

    pub(crate) fn set_param(&mut self, name: &str, value: Tensor) -> ModelResult<()> {
        if name.starts_with("backbone.") {
            return if self.backbone.set_param(name, value)? {
                Ok(())
            } else {
                Err(ModelError::UnknownParam(name.into()))
            };
        }
        if name == "head" {
            if self.head.shape() != value.shape() {
                return Err(ModelError::ParamShape {
                    name: name.into(),
                    expected: self.head.shape().to_vec(),
                    got: value.shape().to_vec(),
                });
            }
            self.head = value.requires_grad(true);
            return Ok(());
        }
        if let Some(idx) = name.strip_prefix("buffer.") {
            let idx: usize = idx
                .parse()
                .map_err(|_| ModelError::UnknownParam(name.into()))?;
            let expected: Vec<usize> = self.backbone.in_shape().to_vec();
            if value.shape() != expected.as_slice() {
                return Err(ModelError::ParamShape {
                    name: name.into(),
                    expected,
                    got: value.shape().to_vec(),
                });
            }
            if idx != self.buffer.len() || idx >= self.buffer_cap {
                return Err(ModelError::UnknownParam(name.into()));
            }
            self.buffer.push(value);
            return Ok(());
        }
        Err(ModelError::UnknownParam(name.into()))
    }
}

impl WhiteBoxModel for DiceLite {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        DiceLite::logits_tape(self, tape, x)
    }
}
