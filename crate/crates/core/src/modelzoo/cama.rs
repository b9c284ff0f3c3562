//! Class-conditional VAE classifier. The generative story is
//! p(x | z, y, m): latent style z, class y, and a known manipulation
//! intensity m (horizontal pixel shift). Classification scores each class
//! by the evidence lower bound it assigns to the image, so the content
//! signal is the class embedding and the style signal is the inferred z.

use rand::seq::SliceRandom;

use super::{data_hash, onehot, stack_batch, Backbone, CausalTaps, ModelConfig, ModelResult};
use crate::autograd::{AgResult, Optimizer, Tape, Tensor, TensorId};
use crate::rng::stream;

const HID: usize = 64;
const JOINT: usize = 32;
const EMB: usize = 16;

#[derive(Debug, Clone)]
pub struct CamaLite {
    pub backbone: Backbone,
    pub classes: usize,
    latent: usize,
    shift_frac: f64,
    kl_weight: f64,
    batch_size: usize,
    enc_w: Tensor,   // [D, HID]
    merge_x: Tensor, // [HID, JOINT]
    merge_y: Tensor, // [EMB, JOINT]
    merge_m: Tensor, // [EMB, JOINT]
    y_emb: Tensor,   // [K, EMB]
    m_emb: Tensor,   // [1, EMB]
    mu_w: Tensor,    // [JOINT, L]
    lv_w: Tensor,    // [JOINT, L]
    dec_z: Tensor,   // [L, HID]
    dec_y: Tensor,   // [EMB, HID]
    dec_m: Tensor,   // [EMB, HID]
    dec_out: Tensor, // [HID, C*H*W]
}

/// Ids of every weight on one tape; registered once per tape so that
/// gradients from all passes land on the same leaves.
struct Nodes {
    kernels: (TensorId, TensorId),
    enc_w: TensorId,
    merge_x: TensorId,
    merge_y: TensorId,
    merge_m: TensorId,
    y_emb: TensorId,
    m_emb: TensorId,
    mu_w: TensorId,
    lv_w: TensorId,
    dec_z: TensorId,
    dec_y: TensorId,
    dec_m: TensorId,
    dec_out: TensorId,
}

/// Shifts every row of the image right by `round(frac * W)` pixels,
/// filling vacated columns with zeros.
pub fn shift_horizontal(x: &Tensor, frac: f64) -> Tensor {
    let shape = x.shape();
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let k = ((frac * w as f64).round() as usize).min(w);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for i in 0..h {
            let row = (ch * h + i) * w;
            for j in k..w {
                out[row + j] = src[row + j - k];
            }
        }
    }
    Tensor::new_unchecked(shape.to_vec(), out)
}

impl CamaLite {
    pub fn new(
        cfg: &ModelConfig,
        in_shape: [usize; 3],
        classes: usize,
        seed: u64,
    ) -> ModelResult<Self> {
        let mut rng = stream(seed, "cama-init", 0);
        let backbone = Backbone::new(in_shape, &mut rng)?;
        let d = backbone.out_dim();
        let d_img = in_shape.iter().product::<usize>();
        let l = cfg.latent;
        let he = |fan_in: usize| (2.0 / fan_in as f64).sqrt();
        let lin = |fan_in: usize| (1.0 / fan_in as f64).sqrt();
        Ok(CamaLite {
            backbone,
            classes,
            latent: l,
            shift_frac: cfg.shift_frac,
            kl_weight: cfg.kl_weight,
            batch_size: cfg.batch_size,
            enc_w: Tensor::randn(&[d, HID], he(d), &mut rng).requires_grad(true),
            merge_x: Tensor::randn(&[HID, JOINT], he(HID), &mut rng).requires_grad(true),
            merge_y: Tensor::randn(&[EMB, JOINT], he(EMB), &mut rng).requires_grad(true),
            merge_m: Tensor::randn(&[EMB, JOINT], he(EMB), &mut rng).requires_grad(true),
            y_emb: Tensor::randn(&[classes, EMB], 0.5, &mut rng).requires_grad(true),
            m_emb: Tensor::randn(&[1, EMB], 0.5, &mut rng).requires_grad(true),
            mu_w: Tensor::randn(&[JOINT, l], lin(JOINT), &mut rng).requires_grad(true),
            lv_w: Tensor::randn(&[JOINT, l], lin(JOINT), &mut rng).requires_grad(true),
            dec_z: Tensor::randn(&[l, HID], he(l), &mut rng).requires_grad(true),
            dec_y: Tensor::randn(&[EMB, HID], he(EMB), &mut rng).requires_grad(true),
            dec_m: Tensor::randn(&[EMB, HID], he(EMB), &mut rng).requires_grad(true),
            dec_out: Tensor::randn(&[HID, d_img], lin(HID), &mut rng).requires_grad(true),
        })
    }

    fn register(&self, tape: &mut Tape) -> Nodes {
        Nodes {
            kernels: self.backbone.register(tape),
            enc_w: tape.leaf(self.enc_w.clone()),
            merge_x: tape.leaf(self.merge_x.clone()),
            merge_y: tape.leaf(self.merge_y.clone()),
            merge_m: tape.leaf(self.merge_m.clone()),
            y_emb: tape.leaf(self.y_emb.clone()),
            m_emb: tape.leaf(self.m_emb.clone()),
            mu_w: tape.leaf(self.mu_w.clone()),
            lv_w: tape.leaf(self.lv_w.clone()),
            dec_z: tape.leaf(self.dec_z.clone()),
            dec_y: tape.leaf(self.dec_y.clone()),
            dec_m: tape.leaf(self.dec_m.clone()),
            dec_out: tape.leaf(self.dec_out.clone()),
        }
    }

    /// Posterior parameters for a batch. `features` is `[B,D]`, `hy`/`hm`
    /// are `[B,EMB]`. The log-variance is squashed into (-4,4) so the
    /// reparameterization can never overflow.
    fn encode(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        features: TensorId,
        hy: TensorId,
        hm: TensorId,
    ) -> AgResult<(TensorId, TensorId)> {
        let f = tape.matmul(features, n.enc_w)?;
        let f = tape.relu(f)?;
        let jx = tape.matmul(f, n.merge_x)?;
        let jy = tape.matmul(hy, n.merge_y)?;
        let jm = tape.matmul(hm, n.merge_m)?;
        let pre = tape.add(jx, jy)?;
        let pre = tape.add(pre, jm)?;
        let joint = tape.relu(pre)?;
        let mu = tape.matmul(joint, n.mu_w)?;
        let lv_raw = tape.matmul(joint, n.lv_w)?;
        let lv_t = tape.tanh(lv_raw)?;
        let lv = tape.scale(lv_t, 4.0)?;
        Ok((mu, lv))
    }

    fn decode(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        z: TensorId,
        hy: TensorId,
        hm: TensorId,
    ) -> AgResult<TensorId> {
        let gz = tape.matmul(z, n.dec_z)?;
        let gy = tape.matmul(hy, n.dec_y)?;
        let gm = tape.matmul(hm, n.dec_m)?;
        let pre = tape.add(gz, gy)?;
        let pre = tape.add(pre, gm)?;
        let g = tape.relu(pre)?;
        tape.matmul(g, n.dec_out)
    }

    /// Negative ELBO for one batch pass: reconstruction mse plus the
    /// Gaussian KL, both on a per-pixel scale. `eps = None` uses the
    /// posterior mean instead of sampling.
    #[allow(clippy::too_many_arguments)]
    fn neg_elbo(
        &self,
        tape: &mut Tape,
        n: &Nodes,
        x: TensorId,
        x_flat: TensorId,
        ys: &[usize],
        m_val: f64,
        eps: Option<Tensor>,
        batch: usize,
    ) -> AgResult<TensorId> {
        let d_img = self.backbone.in_shape().iter().product::<usize>();
        let features = self.backbone.features_with(tape, x, n.kernels, batch)?;
        let oh = tape.constant(onehot(ys, self.classes));
        let hy = tape.matmul(oh, n.y_emb)?;
        let mcol = tape.constant(Tensor::new_unchecked(vec![batch, 1], vec![m_val; batch]));
        let hm = tape.matmul(mcol, n.m_emb)?;
        let (mu, lv) = self.encode(tape, n, features, hy, hm)?;
        let z = match eps {
            Some(e) => {
                let half_lv = tape.scale(lv, 0.5)?;
                let std = tape.exp(half_lv)?;
                let eid = tape.constant(e);
                let noise = tape.mul(std, eid)?;
                tape.add(mu, noise)?
            }
            None => mu,
        };
        let xhat = self.decode(tape, n, z, hy, hm)?;
        let recon = tape.mse(xhat, x_flat)?;
        // KL(q || N(0,1)) = -0.5 sum(1 + lv - mu^2 - e^lv)
        let one_lv = tape.add_scalar(lv, 1.0)?;
        let mu2 = tape.mul(mu, mu)?;
        let elv = tape.exp(lv)?;
        let inner = tape.sub(one_lv, mu2)?;
        let inner = tape.sub(inner, elv)?;
        let kl_sum = tape.sum(inner)?;
        let kl = tape.scale(kl_sum, -0.5 * self.kl_weight / (batch * d_img) as f64)?;
        tape.add(recon, kl)
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
        let d_img = in_shape.iter().product::<usize>();
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut stream(seed, "cama-shuffle", epoch as u64));

        let mut total = 0.0;
        let mut seen = 0usize;
        for (bi, chunk) in order.chunks(self.batch_size).enumerate() {
            let b = chunk.len();
            let batch_refs: Vec<&Tensor> = chunk.iter().map(|&i| &xs[i]).collect();
            let batch_ys: Vec<usize> = chunk.iter().map(|&i| ys[i]).collect();
            let clean = stack_batch(&batch_refs, in_shape)?;
            let shifted_vec: Vec<Tensor> =
                batch_refs.iter().map(|x| shift_horizontal(x, self.shift_frac)).collect();
            let shifted_refs: Vec<&Tensor> = shifted_vec.iter().collect();
            let shifted = stack_batch(&shifted_refs, in_shape)?;

            let mut eps_rng = stream(seed, "cama-eps", (epoch as u64) << 20 | bi as u64);
            let eps_clean = Tensor::randn(&[b, self.latent], 1.0, &mut eps_rng);
            let eps_shift = Tensor::randn(&[b, self.latent], 1.0, &mut eps_rng);

            let mut tape = Tape::new();
            let n = self.register(&mut tape);
            let xc = tape.constant(clean.clone());
            let xc_flat = tape.constant(clean.reshaped(&[b, d_img])?);
            let xs_id = tape.constant(shifted.clone());
            let xs_flat = tape.constant(shifted.reshaped(&[b, d_img])?);
            let loss_c =
                self.neg_elbo(&mut tape, &n, xc, xc_flat, &batch_ys, 0.0, Some(eps_clean), b)?;
            let loss_s = self.neg_elbo(
                &mut tape,
                &n,
                xs_id,
                xs_flat,
                &batch_ys,
                self.shift_frac,
                Some(eps_shift),
                b,
            )?;
            let sum = tape.add(loss_c, loss_s)?;
            let loss = tape.scale(sum, 0.5)?;
            let loss_val = tape.value(loss).data()[0];

            let mut grads = tape.backward(loss)?;
            let ids = [
                n.kernels.0, n.kernels.1, n.enc_w, n.merge_x, n.merge_y, n.merge_m, n.y_emb,
                n.m_emb, n.mu_w, n.lv_w, n.dec_z, n.dec_y, n.dec_m, n.dec_out,
            ];
            let mut params = self.trainable_mut();
            for (p, id) in params.iter_mut().zip(ids) {
                p.grad = grads.take(id);
            }
            opt.step(&mut params)?;

            total += loss_val * b as f64;
            seen += b;
        }
        Ok(total / seen as f64)
    }

    /// Per-class negative ELBO at the posterior mean; the logit of class k
    /// is the ELBO the generative model assigns when conditioning on k.
    pub fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        let in_shape = self.backbone.in_shape();
        let d_img = in_shape.iter().product::<usize>();
        let n = self.register(tape);
        let x_flat = tape.reshape(x, &[1, d_img])?;
        let mut logits: Option<TensorId> = None;
        for k in 0..self.classes {
            let neg = self.neg_elbo(tape, &n, x, x_flat, &[k], 0.0, None, 1)?;
            let elbo = tape.scale(neg, -1.0)?;
            let cell = tape.reshape(elbo, &[1, 1])?;
            let mut row = vec![0.0; self.classes];
            row[k] = 1.0;
            let sel = tape.constant(Tensor::new_unchecked(vec![1, self.classes], row));
            let contrib = tape.matmul(cell, sel)?;
            logits = Some(match logits {
                None => contrib,
                Some(acc) => tape.add(acc, contrib)?,
            });
        }
        Ok(logits.expect("at least two classes"))
    }

    /// Content = embedding of the conditioning class, style = a posterior
    /// sample of z for this image (noise seeded from the image bits), plus
    /// the per-class evidence logits from the same tape.
    pub fn taps(&self, x: &Tensor, y: usize) -> ModelResult<CausalTaps> {
        let in_shape = self.backbone.in_shape();
        let d_img = in_shape.iter().product::<usize>();
        let mut tape = Tape::new();
        let n = self.register(&mut tape);
        let xid = tape.constant(x.clone());
        let features = self.backbone.features_with(&mut tape, xid, n.kernels, 1)?;
        let oh = tape.constant(onehot(&[y], self.classes));
        let hy = tape.matmul(oh, n.y_emb)?;
        let mcol = tape.constant(Tensor::new_unchecked(vec![1, 1], vec![0.0]));
        let hm = tape.matmul(mcol, n.m_emb)?;
        let (mu, lv) = self.encode(&mut tape, &n, features, hy, hm)?;

        let mut eps_rng = stream(data_hash(x.data()), "cama-tap-eps", 0);
        let eps = Tensor::randn(&[1, self.latent], 1.0, &mut eps_rng);
        let half_lv = tape.scale(lv, 0.5)?;
        let std = tape.exp(half_lv)?;
        let eid = tape.constant(eps);
        let noise = tape.mul(std, eid)?;
        let z = tape.add(mu, noise)?;
        let style = Tensor::new_unchecked(vec![self.latent], tape.value(z).data().to_vec());

        let content = Tensor::new_unchecked(
            vec![EMB],
            self.y_emb.data()[y * EMB..(y + 1) * EMB].to_vec(),
        );

        // evidence logits, rebuilt on a fresh tape to keep this one small
        let mut ltape = Tape::new();
        let lx = ltape.constant(x.clone());
        let lid = self.logits_tape(&mut ltape, lx)?;
        let logits = ltape.value(lid).data().to_vec();
        debug_assert_eq!(x.numel(), d_img);
        Ok(CausalTaps { content, style, logits })
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::with_capacity(14);
        self.backbone.params(&mut out);
        out.push(("enc_w".into(), &self.enc_w));
        out.push(("merge_x".into(), &self.merge_x));
        out.push(("merge_y".into(), &self.merge_y));
        out.push(("merge_m".into(), &self.merge_m));
        out.push(("y_emb".into(), &self.y_emb));
        out.push(("m_emb".into(), &self.m_emb));
        out.push(("mu_w".into(), &self.mu_w));
        out.push(("lv_w".into(), &self.lv_w));
        out.push(("dec_z".into(), &self.dec_z));
        out.push(("dec_y".into(), &self.dec_y));
        out.push(("dec_m".into(), &self.dec_m));
        out.push(("dec_out".into(), &self.dec_out));
        out
    }

    pub(crate) fn trainable_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.backbone.conv1,
            &mut self.backbone.conv2,
            &mut self.enc_w,
            &mut self.merge_x,
            &mut self.merge_y,
            &mut self.merge_m,
            &mut self.y_emb,
            &mut self.m_emb,
            &mut self.mu_w,
            &mut self.lv_w,
            &mut self.dec_z,
            &mut self.dec_y,
            &mut self.dec_m,
            &mut self.dec_out,
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
            "enc_w" => &mut self.enc_w,
            "merge_x" => &mut self.merge_x,
            "merge_y" => &mut self.merge_y,
            "merge_m" => &mut self.merge_m,
            "y_emb" => &mut self.y_emb,
            "m_emb" => &mut self.m_emb,
            "mu_w" => &mut self.mu_w,
            "lv_w" => &mut self.lv_w,
            "dec_z" => &mut self.dec_z,
            "dec_y" => &mut self.dec_y,
            "dec_m" => &mut self.dec_m,
            "dec_out" => &mut self.dec_out,
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
