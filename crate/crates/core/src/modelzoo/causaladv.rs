//! Adversarially trained classifier with an orthogonality constraint
//! between its content and style projections. The style weights are pushed
//! through `P = I - Q Q^T`, where `Q` is an orthonormal basis of the content
//! weight columns, so style features can never see the content subspace.
//! Both heads are trained on clean and attacked inputs; the style head sees
//! its features through additive Gaussian noise.

use rand::seq::SliceRandom;

use super::{derive_seed, stack_batch, Backbone, CausalTaps, ModelConfig, ModelResult};
use crate::attacks::{run_attack, AttackConfig, Norm, WhiteBoxModel};
use crate::autograd::{AgResult, Optimizer, Tape, Tensor, TensorId};
use crate::rng::stream;

#[derive(Debug, Clone)]
pub struct CausalAdvLite {
    pub backbone: Backbone,
    pub classes: usize,
    width: usize, // S: columns of each projection
    wc: Tensor,      // [D, S]
    ws: Tensor,      // [D, S] unconstrained; used only through P ws
    head_c: Tensor,  // [S, K]
    head_s: Tensor,  // [S, K]
    alpha: f64,
    beta: f64,
    sigma: f64,
    adv_steps: usize,
    adv_epsilon: f64,
    adv_step_size: f64,
    batch_size: usize,
}

struct Nodes {
    kernels: (TensorId, TensorId),
    wc: TensorId,
    ws: TensorId,
    ws_proj: TensorId,
    head_c: TensorId,
    head_s: TensorId,
}

impl CausalAdvLite {
    pub fn new(
        cfg: &ModelConfig,
        in_shape: [usize; 3],
        classes: usize,
        seed: u64,
    ) -> ModelResult<Self> {
        let mut rng = stream(seed, "causaladv-init", 0);
        let backbone = Backbone::new(in_shape, &mut rng)?;
        let d = backbone.out_dim();
        let s = cfg.latent;
        Ok(CausalAdvLite {
            backbone,
            classes,
            width: s,
            wc: Tensor::randn(&[d, s], (1.0 / d as f64).sqrt(), &mut rng).requires_grad(true),
            ws: Tensor::randn(&[d, s], (1.0 / d as f64).sqrt(), &mut rng).requires_grad(true),
            head_c: Tensor::randn(&[s, classes], (1.0 / s as f64).sqrt(), &mut rng)
                .requires_grad(true),
            head_s: Tensor::randn(&[s, classes], (1.0 / s as f64).sqrt(), &mut rng)
                .requires_grad(true),
            alpha: cfg.alpha,
            beta: cfg.beta,
            sigma: cfg.sigma,
            adv_steps: cfg.adv_steps,
            adv_epsilon: cfg.adv_epsilon,
            adv_step_size: cfg.adv_step_size,
            batch_size: cfg.batch_size,
        })
    }

    /// Orthonormal basis of the content weight columns via two-pass modified
    /// Gram-Schmidt. Columns that collapse below `1e-12` of their original
    /// norm are dropped, so a rank-deficient content matrix just yields a
    /// smaller basis.
    pub fn content_basis(&self) -> Vec<Vec<f64>> {
        let d = self.wc.shape()[0];
        let s = self.wc.shape()[1];
        let data = self.wc.data();
        let mut basis: Vec<Vec<f64>> = Vec::with_capacity(s);
        for j in 0..s {
            let mut v: Vec<f64> = (0..d).map(|i| data[i * s + j]).collect();
            let orig: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for _ in 0..2 {
                for q in &basis {
                    let dot: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    for (vi, qi) in v.iter_mut().zip(q) {
                        *vi -= dot * qi;
                    }
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-12 * orig.max(1e-300) && norm > 0.0 {
                for vi in v.iter_mut() {
                    *vi /= norm;
                }
                basis.push(v);
            }
        }
        basis
    }

    /// `P = I - Q Q^T` as a dense `[D,D]` constant for the current basis.
    pub fn projection_matrix(&self) -> Tensor {
        let d = self.wc.shape()[0];
        let basis = self.content_basis();
        let mut p = vec![0.0; d * d];
        for i in 0..d {
            p[i * d + i] = 1.0;
        }
        for q in &basis {
            for i in 0..d {
                let qi = q[i];
                if qi == 0.0 {
                    continue;
                }
                let row = &mut p[i * d..(i + 1) * d];
                for (pj, &qj) in row.iter_mut().zip(q) {
                    *pj -= qi * qj;
                }
            }
        }
        Tensor::new_unchecked(vec![d, d], p)
    }

    fn register(&self, tape: &mut Tape) -> AgResult<Nodes> {
        let kernels = self.backbone.register(tape);
        let wc = tape.leaf(self.wc.clone());
        let ws = tape.leaf(self.ws.clone());
        let p = tape.constant(self.projection_matrix());
        let ws_proj = tape.matmul(p, ws)?;
        Ok(Nodes {
            kernels,
            wc,
            ws,
            ws_proj,
            head_c: tape.leaf(self.head_c.clone()),
            head_s: tape.leaf(self.head_s.clone()),
        })
    }

    /// `(c, s)` features for a batch: `c = h wc`, `s = h (P ws)`.
    fn split(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        x: TensorId,
        batch: usize,
    ) -> AgResult<(TensorId, TensorId)> {
        let h = self.backbone.features_with(tape, x, n.kernels, batch)?;
        let c = tape.matmul(h, n.wc)?;
        let s = tape.matmul(h, n.ws_proj)?;
        Ok((c, s))
    }

    /// Content CE plus noisy style CE for one batch pass.
    fn pass_loss(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        x: TensorId,
        ys: &[usize],
        noise: Tensor,
        batch: usize,
    ) -> AgResult<TensorId> {
        let (c, s) = self.split(tape, n, x, batch)?;
        let logits_c = tape.matmul(c, n.head_c)?;
        let ce_c = tape.softmax_cross_entropy(logits_c, ys)?;
        let nid = tape.constant(noise);
        let s_noisy = tape.add(s, nid)?;
        let logits_s = tape.matmul(s_noisy, n.head_s)?;
        let ce_s = tape.softmax_cross_entropy(logits_s, ys)?;
        let wc = tape.scale(ce_c, self.alpha)?;
        let ws = tape.scale(ce_s, self.beta)?;
        tape.add(wc, ws)
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
        order.shuffle(&mut stream(seed, "causaladv-shuffle", epoch as u64));

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

            // inner attack against the current weights
            let adv_seed = derive_seed(seed, "causaladv-adv", epoch as u64, bi as u64);
            let adv =
                run_attack(&*self as &dyn WhiteBoxModel, &batch_xs, &batch_ys, &attack, adv_seed)?;

            let clean_refs: Vec<&Tensor> = batch_xs.iter().collect();
            let adv_refs: Vec<&Tensor> = adv.adversarial.iter().collect();
            let clean = stack_batch(&clean_refs, in_shape)?;
            let advt = stack_batch(&adv_refs, in_shape)?;

            let mut noise_rng = stream(seed, "causaladv-noise", (epoch as u64) << 20 | bi as u64);
            let noise_clean = Tensor::randn(&[b, self.width], self.sigma, &mut noise_rng);
            let noise_adv = Tensor::randn(&[b, self.width], self.sigma, &mut noise_rng);

            let mut tape = Tape::new();
            let n = self.register(&mut tape)?;
            let xc = tape.constant(clean);
            let xa = tape.constant(advt);
            let loss_c = self.pass_loss(&mut tape, &n, xc, &batch_ys, noise_clean, b)?;
            let loss_a = self.pass_loss(&mut tape, &n, xa, &batch_ys, noise_adv, b)?;
            let loss = tape.add(loss_c, loss_a)?;
            let loss_val = tape.value(loss).data()[0];

            let mut grads = tape.backward(loss)?;
            let ids = [n.kernels.0, n.kernels.1, n.wc, n.ws, n.head_c, n.head_s];
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

    pub fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        let n = self.register(tape)?;
        let (c, _) = self.split(tape, &n, x, 1)?;
        tape.matmul(c, n.head_c)
    }

    /// Content and style features from one forward pass (style pre-noise),
    /// plus the content-head logits.
    pub fn taps(&self, x: &Tensor, y: usize) -> ModelResult<CausalTaps> {
        let _ = y; // the split does not condition on the label
        let mut tape = Tape::new();
        let n = self.register(&mut tape)?;
        let xid = tape.constant(x.clone());
        let (c, s) = self.split(&mut tape, &n, xid, 1)?;
        let logits_id = tape.matmul(c, n.head_c)?;
        Ok(CausalTaps {
            content: Tensor::new_unchecked(vec![self.width], tape.value(c).data().to_vec()),
            style: Tensor::new_unchecked(vec![self.width], tape.value(s).data().to_vec()),
            logits: tape.value(logits_id).data().to_vec(),
        })
    }

    /// `(||Q^T proj||_F, ||proj||_F)` where `proj = P ws` is the effective
    /// style matrix: how much of it still points into the content subspace.
    pub fn orthogonality_residual(&self) -> (f64, f64) {
        let d = self.wc.shape()[0];
        let s = self.width;
        let basis = self.content_basis();
        let p = self.projection_matrix();
        let pv = p.data();
        let wsv = self.ws.data();
        // proj = P ws, [D,S]
        let mut proj = vec![0.0; d * s];
        for i in 0..d {
            for k in 0..d {
                let pik = pv[i * d + k];
                if pik == 0.0 {
                    continue;
                }
                let row = &wsv[k * s..(k + 1) * s];
                let out = &mut proj[i * s..(i + 1) * s];
                for j in 0..s {
                    out[j] += pik * row[j];
                }
            }
        }
        let mut resid_sq = 0.0;
        for q in &basis {
            for j in 0..s {
                let dot: f64 = (0..d).map(|i| q[i] * proj[i * s + j]).sum();
                resid_sq += dot * dot;
            }
        }
        let norm_sq: f64 = proj.iter().map(|v| v * v).sum();
        (resid_sq.sqrt(), norm_sq.sqrt())
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(6);
        self.backbone.params(&mut out);
        out.push(("wc".into(), &self.wc));
        out.push(("ws".into(), &self.ws));
        out.push(("head_c".into(), &self.head_c));
        out.push(("head_s".into(), &self.head_s));
        out
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.backbone.conv1,
            &mut self.backbone.conv2,
            &mut self.wc,
            &mut self.ws,
            &mut self.head_c,
            &mut self.head_s,
        ]
    }

    pub(crate) fn set_param(&mut self, name: &str, value: Tensor) -> ModelResult<()> {
        if name.starts_with("backbone.") {
            return if self.backbone.set_param(name, value)? {
                Ok(())
            } else {
                Err(super::ModelError::UnknownParam(name.into()))
            };
        }
        let slot = match name {
            "wc" => &mut self.wc,
            "ws" => &mut self.ws,
            "head_c" => &mut self.head_c,
            "head_s" => &mut self.head_s,
            _ => return Err(super::ModelError::UnknownParam(name.into())),
        };
        if slot.shape() != value.shape() {
            return Err(super::ModelError::ParamShape {
                name: name.into(),
                expected: slot.shape().to_vec(),
                got: value.shape().to_vec(),
            });
        }
        *slot = value.requires_grad(true);
        Ok(())
    }
}

impl WhiteBoxModel for CausalAdvLite {
    fn num_classes(&self) -> usize {
        self.classes
    }

    fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        CausalAdvLite::logits_tape(self, tape, x)
    }
}
