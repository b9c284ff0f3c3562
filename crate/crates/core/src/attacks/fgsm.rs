use super::{
    check_batch, collect_outcome, input_gradient, norm_of, per_sample, predict, AttackConfig,
    AttackError, AttackOutcome, AttackResultT, SampleOutcome, WhiteBoxModel,
};
use crate::autograd::Tensor;

/// Single-step sign attack: `x + eps * sign(grad_x CE)`, clipped to [0,1].
/// Exactly one backward pass per sample. A gradient that is zero everywhere
/// returns the original image with its plain prediction outcome.
pub fn fgsm(
    model: &dyn WhiteBoxModel,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
) -> AttackResultT<AttackOutcome> {
    check_batch(model, xs, ys)?;
    let samples = per_sample(xs, ys, |index, x, y| {
        let shape = x.shape().to_vec();
        let grad = input_gradient(model, x.data(), &shape, y)
            .map_err(|source| AttackError::Model { index, source })?;
        let adv_data: Vec<f64> = x
            .data()
            .iter()
            .zip(&grad)
            .map(|(&xi, &gi)| {
                // sign(0) moves nothing; f64::signum would say 1
                let step = if gi > 0.0 {
                    cfg.epsilon
                } else if gi < 0.0 {
                    -cfg.epsilon
                } else {
                    0.0
                };
                (xi + step).clamp(0.0, 1.0)
            })
            .collect();
        let delta: Vec<f64> = adv_data.iter().zip(x.data()).map(|(&a, &b)| a - b).collect();
        let adv = Tensor::from_vec(shape, adv_data)
            .map_err(|source| AttackError::Model { index, source })?;
        let pred = predict(model, &adv).map_err(|source| AttackError::Model { index, source })?;
        Ok(SampleOutcome {
            success: pred != y,
            norm: norm_of(&delta, cfg.norm),
            adv,
            projected: false,
        })
    })?;
    Ok(collect_outcome(cfg, samples))
}
