use rand::seq::SliceRandom;
use rayon::prelude::*;

use super::{
    distance_correlation, iob, train_iob_decoders, IobConfig, MetricsError, MetricsResult,
    SignalBatch, SignalKind,
};
use crate::autograd::Tensor;
use crate::rng::stream;

/// Anything that can split an input image into its content and style
/// signals. The label is part of the request because some models condition
/// their content branch on it.
pub trait TapSource: Sync {
    fn taps(&self, x: &Tensor, y: usize) -> Result<(Tensor, Tensor), String>;
}

/// Budget knobs for one measurement pass.
#[derive(Debug, Clone)]
pub struct MeasureConfig {
    /// Cap on evaluation samples entering the distance matrices; the cost of
    /// distance correlation grows quadratically with this.
    pub dc_max_samples: usize,
    /// Cap on training samples for the reconstruction decoders.
    pub iob_train_max: usize,
    pub iob: IobConfig,
}

impl Default for MeasureConfig {
    fn default() -> Self {
        Self { dc_max_samples: 2000, iob_train_max: 1000, iob: IobConfig::full() }
    }
}

/// The five measurements for one model on one dataset, all in [0,1].
#[derive(Debug, Clone, serde::Serialize)]
pub struct MeasurementRecord {
    pub model: String,
    pub dataset: String,
    /// evaluation samples used for the distance matrices
    pub n: usize,
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
    pub m5: f64,
}

impl MeasurementRecord {
    pub fn csv_header() -> &'static str {
        "model,dataset,n,m1,m2,m3,m4,m5"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.model, self.dataset, self.n, self.m1, self.m2, self.m3, self.m4, self.m5
        )
    }

    pub fn values(&self) -> [f64; 5] {
        [self.m1, self.m2, self.m3, self.m4, self.m5]
    }
}

fn subsample(n: usize, max: usize, seed: u64, tag: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    if n > max {
        idx.shuffle(&mut stream(seed, tag, 0));
        idx.truncate(max);
        idx.sort_unstable();
    }
    idx
}

fn extract_taps(
    src: &dyn TapSource,
    xs: &[Tensor],
    ys: &[usize],
    idx: &[usize],
) -> MetricsResult<(Vec<Tensor>, Vec<Tensor>, Vec<Tensor>)> {
    let pairs: Result<Vec<(Tensor, Tensor)>, String> = idx
        .par_iter()
        .map(|&i| src.taps(&xs[i], ys[i]))
        .collect();
    let pairs = pairs.map_err(MetricsError::Extraction)?;
    let images: Vec<Tensor> = idx.iter().map(|&i| xs[i].clone()).collect();
    let (cs, ss) = pairs.into_iter().unzip();
    Ok((images, cs, ss))
}

/// Runs the full measurement pass for one model: distance correlations on
/// the evaluation split, reconstruction decoders fitted on the train split
/// and scored on the evaluation split.
#[allow(clippy::too_many_arguments)]
pub fn measure_all(
    src: &dyn TapSource,
    train_xs: &[Tensor],
    train_ys: &[usize],
    eval_xs: &[Tensor],
    eval_ys: &[usize],
    cfg: &MeasureConfig,
    model: &str,
    dataset: &str,
    seed: u64,
) -> MetricsResult<MeasurementRecord> {
    if train_xs.len() != train_ys.len() {
        return Err(MetricsError::LabelMismatch { xs: train_xs.len(), ys: train_ys.len() });
    }
    if eval_xs.len() != eval_ys.len() {
        return Err(MetricsError::LabelMismatch { xs: eval_xs.len(), ys: eval_ys.len() });
    }

    let eval_idx = subsample(eval_xs.len(), cfg.dc_max_samples, seed, "measure-eval");
    let (ex, ec, es) = extract_taps(src, eval_xs, eval_ys, &eval_idx)?;
    let bx = SignalBatch::from_tensors(SignalKind::Input, &ex)?;
    let bc = SignalBatch::from_tensors(SignalKind::Content, &ec)?;
    let bs = SignalBatch::from_tensors(SignalKind::Style, &es)?;

    let m1 = 1.0 - distance_correlation(&bc, &bs)?;
    let m2 = distance_correlation(&bx, &bc)?;
    let m3 = distance_correlation(&bx, &bs)?;

    let train_idx = subsample(train_xs.len(), cfg.iob_train_max, seed, "measure-train");
    let (tx, tc, ts) = extract_taps(src, train_xs, train_ys, &train_idx)?;
    let tbx = SignalBatch::from_tensors(SignalKind::Input, &tx)?;
    let tbc = SignalBatch::from_tensors(SignalKind::Content, &tc)?;
    let tbs = SignalBatch::from_tensors(SignalKind::Style, &ts)?;

    let pair_c = train_iob_decoders(&tbx, &tbc, &cfg.iob, seed ^ 0x10b_c)?;
    let pair_s = train_iob_decoders(&tbx, &tbs, &cfg.iob, seed ^ 0x10b_5)?;
    let m4 = 1.0 - iob(&bx, &bc, &pair_c)?.boi;
    let m5 = 1.0 - iob(&bx, &bs, &pair_s)?.boi;

    Ok(MeasurementRecord {
        model: model.to_string(),
        dataset: dataset.to_string(),
        n: eval_idx.len(),
        m1: m1.clamp(0.0, 1.0),
        m2: m2.clamp(0.0, 1.0),
        m3: m3.clamp(0.0, 1.0),
        m4: m4.clamp(0.0, 1.0),
        m5: m5.clamp(0.0, 1.0),
    })
}
