//! White-box evasion attacks under explicit perturbation budgets.
//!
//! All attacks work per sample against any [`WhiteBoxModel`], run in
//! parallel across samples with per-sample seeds, and guarantee on return
//! that every adversarial image sits inside the configured norm ball around
//! its original and inside the pixel range [0,1].

mod config;
mod cw;
mod fgsm;
mod pgd;

pub use config::{AttackConfig, AttackFamily, AttackSpec, EpsSpec, Norm};
pub use cw::cw;
pub use fgsm::fgsm;
pub use pgd::pgd;

use rayon::prelude::*;

use crate::autograd::{AgResult, AutogradError, Tape, Tensor, TensorId};

#[derive(Debug, thiserror::Error)]
pub enum AttackError {
    #[error("{what} must be {bound}, got {value}")]
    BadParam { what: &'static str, bound: &'static str, value: f64 },
    #[error("unknown attack family {0:?}")]
    UnknownFamily(String),
    #[error("unknown norm {0:?} (expected l2 or linf)")]
    UnknownNorm(String),
    #[error("cannot parse {what} value {text:?} as a number or fraction")]
    BadFraction { what: &'static str, text: String },
    #[error("images and labels differ in length: {xs} vs {ys}")]
    LabelMismatch { xs: usize, ys: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("model failed on sample {index}: {source}")]
    Model {
        index: usize,
        #[source]
        source: AutogradError,
    },
}

pub type AttackResultT<T> = Result<T, AttackError>;

/// A model the attacks can differentiate through: it writes its forward pass
/// for one image onto the caller's tape.
pub trait WhiteBoxModel: Sync {
    fn num_classes(&self) -> usize;
    /// Appends the logits computation for a single image (shape `[C,H,W]`)
    /// to `tape`, returning the `[1,K]` logits id.
    fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId>;
}

/// Output of one attack over a batch.
#[derive(Debug, Clone)]
pub struct AttackOutcome {
    pub label: String,
    pub epsilon: f64,
    pub norm: Norm,
    pub adversarial: Vec<Tensor>,
    /// prediction on the adversarial image differs from the true label
    pub success: Vec<bool>,
    /// per-sample perturbation size under the attack norm
    pub norms: Vec<f64>,
    /// true when any sample finished outside the ball and was projected
    /// back (only the unconstrained-then-projected attack sets this)
    pub projected_final: bool,
}

impl AttackOutcome {
    pub fn success_rate(&self) -> f64 {
        if self.success.is_empty() {
            return 0.0;
        }
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    /// Accuracy of the model on the adversarial batch.
    pub fn accuracy(&self) -> f64 {
        1.0 - self.success_rate()
    }
}

pub(crate) struct SampleOutcome {
    pub adv: Tensor,
    pub success: bool,
    pub norm: f64,
    pub projected: bool,
}

/// Clamps `delta` into the epsilon ball of the given norm, in place.
pub fn project_to_ball(delta: &mut [f64], norm: Norm, epsilon: f64) {
    match norm {
        Norm::Linf => {
            for d in delta.iter_mut() {
                *d = d.clamp(-epsilon, epsilon);
            }
        }
        Norm::L2 => {
            let n = l2_norm(delta);
            if n > epsilon && n > 0.0 {
                let scale = epsilon / n;
                for d in delta.iter_mut() {
                    *d *= scale;
                }
            }
        }
    }
}

/// True when `candidate` lies inside the l2 ball of radius `radius`
/// around `center`.
pub fn l2_ball_contains(center: &[f64], candidate: &[f64], radius: f64) -> bool {
    debug_assert_eq!(center.len(), candidate.len());
    let mut acc = 0.0;
    for (c, p) in center.iter().zip(candidate) {
        let d = p - c;
        acc += d * d;
    }
    acc.sqrt() <= radius
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|d| d * d).sum::<f64>().sqrt()
}

pub(crate) fn linf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, d| m.max(d.abs()))
}

pub(crate) fn norm_of(v: &[f64], norm: Norm) -> f64 {
    match norm {
        Norm::L2 => l2_norm(v),
        Norm::Linf => linf_norm(v),
    }
}

/// Model prediction on one image, no gradients.
pub(crate) fn predict(model: &dyn WhiteBoxModel, x: &Tensor) -> AgResult<usize> {
    let mut tape = Tape::new();
    let id = tape.constant(x.clone());
    let logits = model.logits_tape(&mut tape, id)?;
    Ok(tape.value(logits).argmax())
}

/// Gradient of the cross-entropy loss at `x` with respect to the input.
pub(crate) fn input_gradient(
    model: &dyn WhiteBoxModel,
    x_data: &[f64],
    shape: &[usize],
    y: usize,
) -> AgResult<Vec<f64>> {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(shape.to_vec(), x_data.to_vec())?.requires_grad(true));
    let logits = model.logits_tape(&mut tape, x)?;
    let loss = tape.softmax_cross_entropy(logits, &[y])?;
    let mut grads = tape.backward(loss)?;
    Ok(grads.take(x).unwrap_or_else(|| vec![0.0; x_data.len()]))
}

pub(crate) fn check_batch(
    model: &dyn WhiteBoxModel,
    xs: &[Tensor],
    ys: &[usize],
) -> AttackResultT<()> {
    if xs.len() != ys.len() {
        return Err(AttackError::LabelMismatch { xs: xs.len(), ys: ys.len() });
    }
    let k = model.num_classes();
    if let Some(&bad) = ys.iter().find(|&&y| y >= k) {
        return Err(AttackError::LabelRange { label: bad, classes: k });
    }
    Ok(())
}

/// Runs `work` for every sample in parallel, collecting in input order.
pub(crate) fn per_sample<F>(
    xs: &[Tensor],
    ys: &[usize],
    work: F,
) -> AttackResultT<Vec<SampleOutcome>>
where
    F: Fn(usize, &Tensor, usize) -> AttackResultT<SampleOutcome> + Sync,
{
    xs.par_iter()
        .zip(ys.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| work(i, x, y))
        .collect()
}

pub(crate) fn collect_outcome(cfg: &AttackConfig, samples: Vec<SampleOutcome>) -> AttackOutcome {
    let mut adversarial = Vec::with_capacity(samples.len());
    let mut success = Vec::with_capacity(samples.len());
    let mut norms = Vec::with_capacity(samples.len());
    let mut projected = false;
    for s in samples {
        adversarial.push(s.adv);
        success.push(s.success);
        norms.push(s.norm);
        projected |= s.projected;
    }
    AttackOutcome {
        label: cfg.label(),
        epsilon: cfg.epsilon,
        norm: cfg.norm,
        adversarial,
        success,
        norms,
        projected_final: projected,
    }
}

/// Dispatches on the configured family.
pub fn run_attack(
    model: &dyn WhiteBoxModel,
    xs: &[Tensor],
    ys: &[usize],
    cfg: &AttackConfig,
    seed: u64,
) -> AttackResultT<AttackOutcome> {
    cfg.validate()?;
    match cfg.family {
        AttackFamily::Fgsm => fgsm(model, xs, ys, cfg),
        AttackFamily::Pgd => pgd(model, xs, ys, cfg, seed),
        AttackFamily::Cw => cw(model, xs, ys, cfg),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn projection_linf_clamps() {
        let mut d = vec![0.5, -0.9, 0.1];
        project_to_ball(&mut d, Norm::Linf, 0.3);
        assert_eq!(d, vec![0.3, -0.3, 0.1]);
    }

    #[test]
    fn projection_l2_rescales() {
        let mut d = vec![3.0, 4.0];
        project_to_ball(&mut d, Norm::L2, 1.0);
        assert!((l2_norm(&d) - 1.0).abs() < 1e-12);
        assert!((d[0] / d[1] - 0.75).abs() < 1e-12, "direction preserved");
    }

    #[test]
    fn projection_inside_ball_is_identity() {
        let mut d = vec![0.1, -0.2];
        let orig = d.clone();
        project_to_ball(&mut d, Norm::L2, 1.0);
        assert_eq!(d, orig);
        project_to_ball(&mut d, Norm::Linf, 0.2);
        assert_eq!(d, orig);
    }
}
