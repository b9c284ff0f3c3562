use super::{
    check_batch, collect_outcome, l2_norm, norm_of, per_sample, predict, project_to_ball,
    AttackConfig, AttackError, AttackOutcome, AttackResultT, SampleOutcome, WhiteBoxModel,
};
use crate::autograd::{AdamParams, AgResult, Optimizer, Tape, Tensor};

/// Margin attack optimized in tanh space with Adam, then projected into the
/// l2 epsilon ball as a final step. The box constraint [0,1] holds by
/// construction of the tanh parameterization; the projection flag in the
/// outcome records whether the unconstrained optimum left the ball.
///
/// Loss per sample: `||x' - x||_2^2 + c * max(Z_y - max_{j!=y} Z_j, -kappa)`.
pub fn cw(
    model: &dyn WhiteBoxModel,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
) -> AttackResultT<AttackOutcome> {
    check_batch(model, xs, ys)?;
    let k = model.num_classes();
    let samples = per_sample(xs, ys, |index, x, y| {
        attack_one(model, x, y, k, cfg).map_err(|source| AttackError::Model { index, source })
    })?;
    Ok(collect_outcome(cfg, samples))
}

fn attack_one(
    model: &dyn WhiteBoxModel,
    x: &Tensor,
    y: usize,
    k: usize,
    cfg: &AttackConfig,
) -> AgResult<SampleOutcome> {
    let shape = x.shape().to_vec();
    let orig = x.data();

    // tanh-space variable: x = (tanh(w) + 1) / 2
    let w0: Vec<f64> = orig
        .iter()
        .map(|&v| {
            let t = (2.0 * v - 1.0).clamp(-1.0 + 1e-6, 1.0 - 1e-6);
            t.atanh()
        })
        .collect();
    let mut w = Tensor::from_vec(shape.clone(), w0)?.requires_grad(true);
    let mut opt = Optimizer::adam_with(AdamParams::with_lr(cfg.lr))?;

    for _ in 0..cfg.steps {
        let mut tape = Tape::new();
        let wid = tape.leaf(w.clone());
        let th = tape.tanh(wid)?;
        let shifted = tape.add_scalar(th, 1.0)?;
        let adv = tape.scale(shifted, 0.5)?;
        let xorig = tape.constant(x.clone());
        let diff = tape.sub(adv, xorig)?;
        let sq = tape.mul(diff, diff)?;
        let dist = tape.sum(sq)?;

        let logits = model.logits_tape(&mut tape, adv)?;
        let zrow = tape.value(logits).data().to_vec();
        // runner-up class, chosen on the host; the margin then flows through
        // a constant selector so gradients reach both logits
        let mut runner = usize::MAX;
        for j in 0..k {
            if j != y && (runner == usize::MAX || zrow[j] > zrow[runner]) {
                runner = j;
            }
        }
        let margin_val = zrow[y] - zrow[runner];

        let loss = if margin_val > -cfg.kappa {
            let mut sel = vec![0.0; k];
            sel[y] = 1.0;
            sel[runner] = -1.0;
            let sel_id = tape.constant(Tensor::from_vec(vec![k, 1], sel)?);
            let margin = tape.matmul(logits, sel_id)?;
            let margin_scalar = tape.reshape(margin, &[])?;
            let weighted = tape.scale(margin_scalar, cfg.c)?;
            tape.add(dist, weighted)?
        } else {
            dist
        };

        let mut grads = tape.backward(loss)?;
        w.grad = grads.take(wid);
        if w.grad.is_none() {
            break; // frozen: margin term inactive and distance already zero
        }
        opt.step(&mut [&mut w])?;
    }

    let mut delta: Vec<f64> = w
        .data()
        .iter()
        .zip(orig)
        .map(|(&wv, &ov)| (wv.tanh() + 1.0) / 2.0 - ov)
        .collect();
    let unconstrained = l2_norm(&delta);
    let projected = unconstrained > cfg.epsilon;
    project_to_ball(&mut delta, cfg.norm, cfg.epsilon);
    // the adversarial point is a convex combination of x and the tanh-space
    // point, both inside [0,1], so no extra clipping can move it
    let adv_data: Vec<f64> = orig
        .iter()
        .zip(&delta)
        .map(|(&o, &d)| (o + d).clamp(0.0, 1.0))
        .collect();
    let adv = Tensor::from_vec(shape, adv_data)?;
    let pred = predict(model, &adv)?;
    Ok(SampleOutcome {
        success: pred != y,
        norm: norm_of(&delta, cfg.norm),
        adv,
        projected,
    })
}
