use super::{AgResult, AutogradError, Tensor};

/// Adam moment/decay constants. The defaults are the usual ones.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamParams {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

enum State {
    Sgd {
        lr: f64,
        momentum: f64,
        velocity: Vec<Vec<f64>>,
    },
    Adam {
        params: AdamParams,
        m: Vec<Vec<f64>>,
        v: Vec<Vec<f64>>,
    },
}

/// In-place parameter updates from gradients stored on the tensors. One
/// optimizer instance owns the state buffers for one fixed parameter list;
/// the list must keep its length and per-tensor shapes across steps.
pub struct Optimizer {
    state: State,
    step: u64,
}

impl Optimizer {
    pub fn sgd(lr: f64, momentum: f64) -> AgResult<Self> {
        if lr <= 0.0 {
            return Err(AutogradError::NonPositive { what: "learning rate", value: lr });
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(AutogradError::NonPositive { what: "momentum in [0,1)", value: momentum });
        }
        Ok(Self {
            state: State::Sgd { lr, momentum, velocity: Vec::new() },
            step: 0,
        })
    }

    pub fn adam(lr: f64) -> AgResult<Self> {
        Self::adam_with(AdamParams::with_lr(lr))
    }

    pub fn adam_with(params: AdamParams) -> AgResult<Self> {
        if params.lr <= 0.0 {
            return Err(AutogradError::NonPositive { what: "learning rate", value: params.lr });
        }
        Ok(Self {
            state: State::Adam { params, m: Vec::new(), v: Vec::new() },
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update. Every parameter must carry a gradient of its own
    /// length in `grad`; gradients are left in place (callers overwrite them
    /// on the next backward pass).
    pub fn step(&mut self, params: &mut [&mut Tensor]) -> AgResult<()> {
        self.step += 1;
        let step = self.step;
        match &mut self.state {
            State::Sgd { lr, momentum, velocity } => {
                if velocity.is_empty() {
                    *velocity = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                }
                if velocity.len() != params.len() {
                    return Err(AutogradError::ParamShapeChanged { step, index: velocity.len().min(params.len()) });
                }
                for (i, p) in params.iter_mut().enumerate() {
                    let g = p.grad.take().ok_or(AutogradError::MissingGradient { index: i })?;
                    if g.len() != p.numel() || velocity[i].len() != p.numel() {
                        return Err(AutogradError::ParamShapeChanged { step, index: i });
                    }
                    let vel = &mut velocity[i];
                    let (lr, mu) = (*lr, *momentum);
                    let data = p.data_mut();
                    for j in 0..data.len() {
                        vel[j] = mu * vel[j] + g[j];
                        data[j] -= lr * vel[j];
                    }
                    p.grad = Some(g);
                }
            }
            State::Adam { params: ap, m, v } => {
                if m.is_empty() {
                    *m = params.iter().map(|p| vec![0.0; p.numel()]).collect();
                    *v = m.clone();
                }
                if m.len() != params.len() {
                    return Err(AutogradError::ParamShapeChanged { step, index: m.len().min(params.len()) });
                }
                let bc1 = 1.0 - ap.beta1.powi(step as i32);
                let bc2 = 1.0 - ap.beta2.powi(step as i32);
                for (i, p) in params.iter_mut().enumerate() {
                    let g = p.grad.take().ok_or(AutogradError::MissingGradient { index: i })?;
                    if g.len() != p.numel() || m[i].len() != p.numel() {
                        return Err(AutogradError::ParamShapeChanged { step, index: i });
                    }
                    let (mi, vi) = (&mut m[i], &mut v[i]);
                    let data = p.data_mut();
                    for j in 0..data.len() {
                        mi[j] = ap.beta1 * mi[j] + (1.0 - ap.beta1) * g[j];
                        vi[j] = ap.beta2 * vi[j] + (1.0 - ap.beta2) * g[j] * g[j];
                        let mhat = mi[j] / bc1;
                        let vhat = vi[j] / bc2;
                        data[j] -= ap.lr * mhat / (vhat.sqrt() + ap.eps);
                    }
                    p.grad = Some(g);
                }
            }
        }
        Ok(())
    }
}
