use rand::Rng;

use super::{
    check_batch, collect_outcome, input_gradient, l2_norm, norm_of, per_sample, predict,
    project_to_ball, AttackConfig, AttackError, AttackOutcome, AttackResultT, Norm, SampleOutcome,
    WhiteBoxModel,
};
use crate::autograd::Tensor;
use crate::rng::stream;

/// Projected gradient descent under an l2 or linf budget. Random start
/// (when enabled) draws uniformly per coordinate and projects into the ball;
/// every step re-projects the running perturbation and clips to [0,1].
pub fn pgd(
    model: &dyn WhiteBoxModel,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> AttackResultT<AttackOutcome> {
    check_batch(model, xs, ys)?;
    let samples = per_sample(xs, ys, |index, x, y| {
        let shape = x.shape().to_vec();
        let orig = x.data();
        let n = orig.len();
        let mut delta = vec![0.0; n];
        if cfg.random_init && cfg.epsilon > 0.0 {
            let mut rng = stream(seed, "pgd-init", index as u64);
            for d in delta.iter_mut() {
                *d = rng.random_range(-cfg.epsilon..cfg.epsilon);
            }
            project_to_ball(&mut delta, cfg.norm, cfg.epsilon);
        }
        let mut current: Vec<f64> = orig
            .iter()
            .zip(&delta)
            .map(|(&xi, &di)| (xi + di).clamp(0.0, 1.0))
            .collect();

        for _ in 0..cfg.steps {
            let grad = input_gradient(model, &current, &shape, y)
                .map_err(|source| AttackError::Model { index, source })?;
            match cfg.norm {
                Norm::Linf => {
                    for (c, &g) in current.iter_mut().zip(&grad) {
                        if g > 0.0 {
                            *c += cfg.step_size;
                        } else if g < 0.0 {
                            *c -= cfg.step_size;
                        }
                    }
                }
                Norm::L2 => {
                    let gn = l2_norm(&grad);
                    if gn > 0.0 {
                        let scale = cfg.step_size / gn;
                        for (c, &g) in current.iter_mut().zip(&grad) {
                            *c += scale * g;
                        }
                    }
                }
            }
            let mut d: Vec<f64> = current.iter().zip(orig).map(|(&c, &o)| c - o).collect();
            project_to_ball(&mut d, cfg.norm, cfg.epsilon);
            for ((c, &o), &di) in current.iter_mut().zip(orig).zip(&d) {
                *c = (o + di).clamp(0.0, 1.0);
            }
        }

        let delta: Vec<f64> = current.iter().zip(orig).map(|(&c, &o)| c - o).collect();
        let adv = Tensor::from_vec(shape, current)
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
