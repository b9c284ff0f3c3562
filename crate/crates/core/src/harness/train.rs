//! Training orchestration: runs the epoch budget, keeps the weights with the
//! best clean validation accuracy, and optionally records a per-epoch series
//! of separation and attacked accuracy for training-dynamics plots.

use rand::seq::SliceRandom;

use super::{Dataset, HarnessError, HarnessResult};
use crate::attacks::{run_attack, AttackConfig, Norm};
use crate::autograd::{AutogradError, Optimizer, Tensor};
use crate::metrics::{distance_correlation, SignalBatch, SignalKind};
use crate::modelzoo::{derive_seed, ModelConfig, ModelError, Variant, ZooModel};
use crate::rng::stream;

/// Per-epoch extras: how many validation samples feed the separation
/// measurement and the attacked-accuracy probe.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrackingConfig {
    pub samples: usize,
}

impl Default for TrackingConfig {
    fn default() -> Self {
        Self { samples: 32 }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    /// 1 - DC(C,S) on the tracking subsample; present in tracking mode
    pub m1: Option<f64>,
    /// accuracy under the 40-step l-inf attack; present in tracking mode
    pub adv_acc: Option<f64>,
}

pub struct TrainOutcome {
    pub model: ZooModel,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub log: Vec<EpochRecord>,
}

fn tracking_probe(
    model: &ZooModel,
    xs: &[Tensor],
    ys: &[usize],
    epoch: usize,
    seed: u64,
) -> HarnessResult<(f64, f64)> {
    let mut contents = Vec::with_capacity(xs.len());
    let mut styles = Vec::with_capacity(xs.len());
    for (x, &y) in xs.iter().zip(ys) {
        let taps = model.taps(x, y)?;
        contents.push(taps.content);
        styles.push(taps.style);
    }
    let bc = SignalBatch::from_tensors(SignalKind::Content, &contents)?;
    let bs = SignalBatch::from_tensors(SignalKind::Style, &styles)?;
    let m1 = (1.0 - distance_correlation(&bc, &bs)?).clamp(0.0, 1.0);

    let pgd40 = AttackConfig::pgd(Norm::Linf, 8.0 / 255.0, 40, 4.0 / 255.0);
    let out = run_attack(model, xs, ys, &pgd40, derive_seed(seed, "track-attack", epoch as u64, 0))?;
    Ok((m1, out.accuracy()))
}

/// Trains one model for the full budget and returns the checkpoint with the
/// highest clean validation accuracy (earliest epoch wins ties) along with
/// the complete epoch log.
pub fn train_model(
    variant: Variant,
    mcfg: &ModelConfig,
    data: &Dataset,
    epochs: usize,
    seed: u64,
    tracking: Option<&TrackingConfig>,
) -> HarnessResult<TrainOutcome> {
    if epochs == 0 {
        return Err(HarnessError::BadParam {
            what: "epochs",
            bound: "at least 1",
            value: 0.0,
        });
    }
    let mut model = ZooModel::new(
        variant,
        mcfg,
        data.in_shape,
        data.classes,
        derive_seed(seed, "init", 0, 0),
    )?;
    let mut opt = Optimizer::adam(mcfg.lr)?;
    let train_seed = derive_seed(seed, "train", 0, 0);

    // one fixed validation subsample keeps the tracking series comparable
    // across epochs
    let track_idx: Vec<usize> = tracking
        .map(|t| {
            let mut idx: Vec<usize> = (0..data.val_x.len()).collect();
            if idx.len() > t.samples {
                idx.shuffle(&mut stream(seed, "track-sub", 0));
                idx.truncate(t.samples);
                idx.sort_unstable();
            }
            idx
        })
        .unwrap_or_default();
    let track_x: Vec<Tensor> = track_idx.iter().map(|&i| data.val_x[i].clone()).collect();
    let track_y: Vec<usize> = track_idx.iter().map(|&i| data.val_y[i]).collect();

    let mut best: Option<(f64, usize, ZooModel)> = None;
    let mut log = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        // The tensor ops trap non-finite values themselves, so divergence
        // arrives either as that error or as a non-finite mean loss.
        let train_loss =
            match model.train_epoch(&mut opt, &data.train_x, &data.train_y, epoch, train_seed) {
                Ok(loss) if loss.is_finite() => loss,
                Ok(_) => return Err(HarnessError::Diverged { epoch }),
                Err(ModelError::Autograd(
                    AutogradError::NonFinite { .. } | AutogradError::NonFiniteInput,
                )) => return Err(HarnessError::Diverged { epoch }),
                Err(e) => return Err(e.into()),
            };
        let val_acc = model.accuracy(&data.val_x, &data.val_y)?;
        let (m1, adv_acc) = if tracking.is_some() {
            let (m1, adv) = tracking_probe(&model, &track_x, &track_y, epoch, seed)?;
            (Some(m1), Some(adv))
        } else {
            (None, None)
        };
        log.push(EpochRecord { epoch, train_loss, val_acc, m1, adv_acc });
        if best.as_ref().map(|(acc, _, _)| val_acc > *acc).unwrap_or(true) {
            best = Some((val_acc, epoch, model.clone()));
        }
    }
    let (best_val_acc, best_epoch, model) = best.expect("epochs >= 1 always snapshots");
    Ok(TrainOutcome { model, best_epoch, best_val_acc, log })
}
