use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use super::{MetricsError, MetricsResult, SignalBatch};
use crate::autograd::{Optimizer, Tape, Tensor, TensorId};
use crate::rng::stream;

/// Bias-free two-layer perceptron: in -> hidden (relu) -> out. Used as a
/// reconstruction decoder from a signal back to the flattened image.
#[derive(Debug, Clone)]
pub struct DecoderNet {
    w1: Tensor,
    w2: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl DecoderNet {
    fn new(in_dim: usize, hidden: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let w1 = Tensor::randn(&[in_dim, hidden], (2.0 / in_dim as f64).sqrt(), rng)
            .requires_grad(true);
        let w2 = Tensor::randn(&[hidden, out_dim], (2.0 / hidden as f64).sqrt(), rng)
            .requires_grad(true);
        Self { w1, w2, in_dim, out_dim }
    }

    /// Differentiable forward pass; also hands back the parameter leaf ids
    /// so the caller can fetch their gradients after backward.
    fn forward(&self, tape: &mut Tape, z: TensorId) -> MetricsResult<(TensorId, [TensorId; 2])> {
        let w1 = tape.leaf(self.w1.clone());
        let w2 = tape.leaf(self.w2.clone());
        let h = tape.matmul(z, w1)?;
        let a = tape.relu(h)?;
        let out = tape.matmul(a, w2)?;
        Ok((out, [w1, w2]))
    }

    /// Plain forward pass for a batch of rows; no gradients involved.
    pub fn predict_rows(&self, rows: &[f64], n: usize) -> MetricsResult<Vec<f64>> {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::from_vec(vec![n, self.in_dim], rows.to_vec())?);
        let w1 = tape.constant(self.w1.clone());
        let w2 = tape.constant(self.w2.clone());
        let h = tape.matmul(z, w1)?;
        let a = tape.relu(h)?;
        let y = tape.matmul(a, w2)?;
        Ok(tape.value(y).data().to_vec())
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.in_dim, self.out_dim)
    }
}

/// Decoder training budget. `full` is the measurement setting; `tracking`
/// is the cheap per-epoch variant used inside training curves.
#[derive(Debug, Clone)]
pub struct IobConfig {
    pub hidden: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub epoch_cap: usize,
    pub patience: usize,
    pub val_fraction: f64,
}

impl IobConfig {
    pub fn full() -> Self {
        Self { hidden: 256, lr: 1e-3, batch_size: 64, epoch_cap: 150, patience: 40, val_fraction: 0.2 }
    }

    pub fn tracking() -> Self {
        Self { epoch_cap: 50, patience: 5, ..Self::full() }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct TrainLogEntry {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
}

/// The two trained decoders: one reads the signal, one reads an all-ones
/// vector of the same length and so can only learn a dataset-wide prototype.
pub struct IobPair {
    pub decoder_z: DecoderNet,
    pub decoder_ones: DecoderNet,
    pub log_z: Vec<TrainLogEntry>,
    pub log_ones: Vec<TrainLogEntry>,
    pub trained_on: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct IobOutcome {
    pub iob: f64,
    pub boi: f64,
}

struct DecoderFit {
    net: DecoderNet,
    log: Vec<TrainLogEntry>,
}

fn train_decoder(
    inputs: &[f64],
    targets: &SignalBatch,
    in_dim: usize,
    cfg: &IobConfig,
    init_rng: &mut ChaCha8Rng,
    shuffle_rng: &mut ChaCha8Rng,
) -> MetricsResult<DecoderFit> {
    let n = targets.n();
    let out_dim = targets.dim();
    let mut net = DecoderNet::new(in_dim, cfg.hidden, out_dim, init_rng);
    let mut opt = Optimizer::adam(cfg.lr)?;

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(shuffle_rng);
    let val_n = ((n as f64 * cfg.val_fraction).round() as usize).clamp(1, n - 1);
    let (val_idx, train_idx) = order.split_at(val_n);
    let val_idx = val_idx.to_vec();
    let mut train_idx = train_idx.to_vec();

    let gather = |idx: &[usize], src: &[f64], dim: usize| -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * dim);
        for &i in idx {
            out.extend_from_slice(&src[i * dim..(i + 1) * dim]);
        }
        out
    };
    let target_rows: Vec<f64> = (0..n).flat_map(|i| targets.row(i).to_vec()).collect();

    let val_inputs = gather(&val_idx, inputs, in_dim);
    let val_targets = gather(&val_idx, &target_rows, out_dim);

    let val_mse_of = |net: &DecoderNet| -> MetricsResult<f64> {
        let pred = net.predict_rows(&val_inputs, val_idx.len())?;
        let sse: f64 = pred
            .iter()
            .zip(&val_targets)
            .map(|(&p, &t)| (p - t) * (p - t))
            .sum();
        Ok(sse / pred.len() as f64)
    };

    let mut best = (f64::INFINITY, net.clone(), 0usize);
    let mut log = Vec::new();
    for epoch in 0..cfg.epoch_cap {
        train_idx.shuffle(shuffle_rng);
        let mut sse_weighted = 0.0;
        for chunk in train_idx.chunks(cfg.batch_size) {
            let zb = gather(chunk, inputs, in_dim);
            let xb = gather(chunk, &target_rows, out_dim);
            let mut tape = Tape::new();
            let z = tape.constant(Tensor::from_vec(vec![chunk.len(), in_dim], zb)?);
            let x = tape.constant(Tensor::from_vec(vec![chunk.len(), out_dim], xb)?);
            let (pred, [w1_id, w2_id]) = net.forward(&mut tape, z)?;
            let loss = tape.mse(pred, x)?;
            let loss_val = tape.value(loss).item()?;
            let mut grads = tape.backward(loss)?;
            net.w1.grad = grads.take(w1_id);
            net.w2.grad = grads.take(w2_id);
            opt.step(&mut [&mut net.w1, &mut net.w2])?;
            sse_weighted += loss_val * chunk.len() as f64;
        }
        let train_mse = sse_weighted / train_idx.len() as f64;
        let val_mse = val_mse_of(&net)?;
        log.push(TrainLogEntry { epoch, train_mse, val_mse });
        if val_mse < best.0 {
            best = (val_mse, net.clone(), epoch);
        } else if epoch - best.2 >= cfg.patience {
            break;
        }
    }
    Ok(DecoderFit { net: best.1, log })
}

/// Trains the signal decoder and the ones decoder on the same targets with
/// the same budget. `xs` are flattened images (targets), `zs` the signal.
pub fn train_iob_decoders(
    xs: &SignalBatch,
    zs: &SignalBatch,
    cfg: &IobConfig,
    seed: u64,
) -> MetricsResult<IobPair> {
    if xs.n() < 10 {
        return Err(MetricsError::TooFewSamples { need: 10, got: xs.n() });
    }
    if xs.n() != zs.n() {
        return Err(MetricsError::SizeMismatch { a: xs.n(), b: zs.n() });
    }
    let n = xs.n();
    let dz = zs.dim();
    let z_rows: Vec<f64> = (0..n).flat_map(|i| zs.row(i).to_vec()).collect();
    let ones_rows = vec![1.0; n * dz];

    let fit_z = train_decoder(
        &z_rows,
        xs,
        dz,
        cfg,
        &mut stream(seed, "iob-init-z", 0),
        &mut stream(seed, "iob-shuffle-z", 0),
    )?;
    let fit_ones = train_decoder(
        &ones_rows,
        xs,
        dz,
        cfg,
        &mut stream(seed, "iob-init-ones", 0),
        &mut stream(seed, "iob-shuffle-ones", 0),
    )?;
    Ok(IobPair {
        decoder_z: fit_z.net,
        decoder_ones: fit_ones.net,
        log_z: fit_z.log,
        log_ones: fit_ones.log,
        trained_on: n,
    })
}

/// Mean over samples of `mse(x_i, ones decoder) / mse(x_i, signal decoder)`.
/// Evaluate on data the decoders never trained on.
pub fn iob(xs: &SignalBatch, zs: &SignalBatch, pair: &IobPair) -> MetricsResult<IobOutcome> {
    if xs.n() != zs.n() {
        return Err(MetricsError::SizeMismatch { a: xs.n(), b: zs.n() });
    }
    let n = xs.n();
    let (dz, dx) = pair.decoder_z.dims();
    if zs.dim() != dz {
        return Err(MetricsError::DimMismatch { index: 0, expected: dz, got: zs.dim() });
    }
    if xs.dim() != dx {
        return Err(MetricsError::DimMismatch { index: 0, expected: dx, got: xs.dim() });
    }

    // The ones decoder sees a constant input, so its output is one image.
    let proto = pair.decoder_ones.predict_rows(&vec![1.0; dz], 1)?;

    let mut ratio_sum = 0.0;
    for start in (0..n).step_by(256) {
        let end = (start + 256).min(n);
        let rows: Vec<f64> = (start..end).flat_map(|i| zs.row(i).to_vec()).collect();
        let preds = pair.decoder_z.predict_rows(&rows, end - start)?;
        for i in start..end {
            let x = xs.row(i);
            let pred = &preds[(i - start) * dx..(i - start + 1) * dx];
            let mse_z: f64 =
                x.iter().zip(pred).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / dx as f64;
            let mse_one: f64 =
                x.iter().zip(&proto).map(|(&a, &b)| (a - b) * (a - b)).sum::<f64>() / dx as f64;
            if mse_z == 0.0 {
                return Err(MetricsError::ZeroReconstruction { index: i });
            }
            ratio_sum += mse_one / mse_z;
        }
    }
    let iob = ratio_sum / n as f64;
    if iob == 0.0 {
        return Err(MetricsError::DegenerateRatio);
    }
    Ok(IobOutcome { iob, boi: 1.0 / iob })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::SignalKind;
    use rand::Rng;

    /// Tiny 8x8 images holding two gaussian bumps at random centers.
    fn two_blob_rows(n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, "blobs", 0);
        (0..n)
            .map(|_| {
                let mut img = vec![0.0f64; 64];
                for _ in 0..2 {
                    let (cy, cx): (f64, f64) =
                        (rng.random_range(1.0..7.0), rng.random_range(1.0..7.0));
                    for y in 0..8 {
                        for x in 0..8 {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[y * 8 + x] += (-d2 / 2.0).exp();
                        }
                    }
                }
                img.iter().map(|v| v.min(1.0)).collect()
            })
            .collect()
    }

    fn cfg() -> IobConfig {
        IobConfig { epoch_cap: 150, patience: 40, batch_size: 32, ..IobConfig::full() }
    }

    #[test]
    fn identity_signal_beats_ones_decoder() {
        let rows = two_blob_rows(160, 9);
        let (train, eval) = rows.split_at(120);
        let xs_train = SignalBatch::from_rows(SignalKind::Input, train).unwrap();
        let zs_train = SignalBatch::from_rows(SignalKind::Content, train).unwrap();
        let pair = train_iob_decoders(&xs_train, &zs_train, &cfg(), 41).unwrap();

        let xs_eval = SignalBatch::from_rows(SignalKind::Input, eval).unwrap();
        let zs_eval = SignalBatch::from_rows(SignalKind::Content, eval).unwrap();
        let out = iob(&xs_eval, &zs_eval, &pair).unwrap();
        assert!(out.iob > 2.0, "identity signal should be informative, iob = {}", out.iob);
        assert!((out.boi - 1.0 / out.iob).abs() < 1e-15);
    }

    #[test]
    fn constant_signal_is_as_good_as_ones() {
        let rows = two_blob_rows(160, 10);
        let consts = vec![vec![0.7; 8]; 160];
        let (train, eval) = (0..120usize, 120..160usize);
        let xs_train =
            SignalBatch::from_rows(SignalKind::Input, &rows[train.clone()]).unwrap();
        let zs_train =
            SignalBatch::from_rows(SignalKind::Content, &consts[train]).unwrap();
        let pair = train_iob_decoders(&xs_train, &zs_train, &cfg(), 42).unwrap();

        let xs_eval = SignalBatch::from_rows(SignalKind::Input, &rows[eval.clone()]).unwrap();
        let zs_eval = SignalBatch::from_rows(SignalKind::Content, &consts[eval]).unwrap();
        let out = iob(&xs_eval, &zs_eval, &pair).unwrap();
        assert!(
            (0.85..=1.15).contains(&out.iob),
            "constant signal should be uninformative, iob = {}",
            out.iob
        );
    }

    #[test]
    fn training_is_deterministic() {
        let rows = two_blob_rows(40, 11);
        let xs = SignalBatch::from_rows(SignalKind::Input, &rows).unwrap();
        let zs = SignalBatch::from_rows(SignalKind::Content, &rows).unwrap();
        let quick = IobConfig { epoch_cap: 5, patience: 5, ..IobConfig::full() };
        let a = train_iob_decoders(&xs, &zs, &quick, 7).unwrap();
        let b = train_iob_decoders(&xs, &zs, &quick, 7).unwrap();
        assert_eq!(a.log_z.len(), b.log_z.len());
        for (la, lb) in a.log_z.iter().zip(&b.log_z) {
            assert_eq!(la.val_mse.to_bits(), lb.val_mse.to_bits());
        }
    }

    #[test]
    fn too_few_samples_is_an_error() {
        let rows = two_blob_rows(6, 12);
        let xs = SignalBatch::from_rows(SignalKind::Input, &rows).unwrap();
        let zs = SignalBatch::from_rows(SignalKind::Content, &rows).unwrap();
        assert!(matches!(
            train_iob_decoders(&xs, &zs, &IobConfig::tracking(), 1),
            Err(MetricsError::TooFewSamples { need: 10, got: 6 })
        ));
    }
}
