//! Four desk-scale image classifiers that each factor their representation
//! into a content signal and a style signal by a different causal mechanism:
//!
//! * [`CamaLite`]: a class-conditional VAE that classifies by per-class
//!   evidence and treats a horizontal shift as a known manipulation.
//! * [`CaamLite`]: spatial attention splits the feature map into exact
//!   complements, trained with invariance weighting over data strata.
//! * [`CausalAdvLite`]: a style head whose weights are projected onto the
//!   orthogonal complement of the content head, trained adversarially.
//! * [`DiceLite`]: saliency masking plus a backdoor adjustment that adds the
//!   average masked context from a rolling buffer to the input.
//!
//! All variants share one convolutional [`Backbone`], expose their signals
//! through [`ZooModel::taps`], implement [`WhiteBoxModel`] for the attacks,
//! and serialize through one checkpoint format.

mod backbone;
mod caam;
mod cama;
mod causaladv;
mod checkpoint;
mod dice;

pub use backbone::Backbone;
pub use caam::{kmeans_assign, CaamLite, Partition};
pub use cama::{shift_horizontal, CamaLite};
pub use causaladv::CausalAdvLite;
pub use dice::DiceLite;

use crate::attacks::{AttackError, WhiteBoxModel};
use crate::autograd::{AgResult, AutogradError, Tape, Tensor, TensorId};
use crate::metrics::TapSource;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Autograd(#[from] AutogradError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("input shape {got:?} unusable: {why}")]
    InputShape { got: Vec<usize>, why: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelRange { label: usize, classes: usize },
    #[error("images and labels differ in length: {xs} vs {ys}")]
    LabelMismatch { xs: usize, ys: usize },
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{what} must be {bound}, got {value}")]
    BadParam { what: &'static str, bound: &'static str, value: f64 },
    #[error("context buffer is empty; adjustment needs at least one entry")]
    EmptyBuffer,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a model checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("unknown model variant tag {0}")]
    UnknownVariantTag(u8),
    #[error("unknown model variant {0:?}")]
    UnknownVariant(String),
    #[error("checkpoint truncated at byte {offset}")]
    Truncated { offset: usize },
    #[error("checkpoint parameter {name}: expected shape {expected:?}, got {got:?}")]
    ParamShape { name: String, expected: Vec<usize>, got: Vec<usize> },
    #[error("checkpoint has no parameter named {0}")]
    UnknownParam(String),
    #[error("checkpoint is missing parameter {0}")]
    MissingParam(String),
}

pub type ModelResult<T> = Result<T, ModelError>;

/// The four classifier variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Cama,
    Caam,
    CausalAdv,
    Dice,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Cama, Variant::Caam, Variant::CausalAdv, Variant::Dice];

    pub(crate) fn tag(self) -> u8 {
        match self {
            Variant::Cama => 0,
            Variant::Caam => 1,
            Variant::CausalAdv => 2,
            Variant::Dice => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> ModelResult<Self> {
        Ok(match tag {
            0 => Variant::Cama,
            1 => Variant::Caam,
            2 => Variant::CausalAdv,
            3 => Variant::Dice,
            other => return Err(ModelError::UnknownVariantTag(other)),
        })
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::Cama => "cama",
            Variant::Caam => "caam",
            Variant::CausalAdv => "causaladv",
            Variant::Dice => "dice",
        })
    }
}

impl std::str::FromStr for Variant {
    type Err = ModelError;

    fn from_str(s: &str) -> ModelResult<Self> {
        Ok(match s.to_lowercase().as_str() {
            "cama" => Variant::Cama,
            "caam" => Variant::Caam,
            "causaladv" | "causal_adv" | "causal-adv" => Variant::CausalAdv,
            "dice" => Variant::Dice,
            other => return Err(ModelError::UnknownVariant(other.to_string())),
        })
    }
}

/// Hyperparameters shared by every variant; variant-specific knobs carry
/// the variant name in their field name.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub latent: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// weight of the clean/adversarial content losses
    pub alpha: f64,
    /// weight of the style losses
    pub beta: f64,
    /// standard deviation of the style noise
    pub sigma: f64,
    /// steps of the inner training-time attack
    pub adv_steps: usize,
    pub adv_epsilon: f64,
    pub adv_step_size: f64,
    /// fraction of image width used for the shift manipulation
    pub shift_frac: f64,
    pub kl_weight: f64,
    /// number of data strata for the invariance weighting
    pub strata: usize,
    /// stratum refresh period in epochs
    pub refresh_every: usize,
    pub kmeans_iters: usize,
    /// fraction of pixels the saliency mask removes
    pub mask_q: f64,
    /// capacity of the masked-context buffer
    pub buffer_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent: 16,
            lr: 1e-3,
            batch_size: 32,
            alpha: 1.0,
            beta: 0.5,
            sigma: 1.0,
            adv_steps: 10,
            adv_epsilon: 8.0 / 255.0,
            adv_step_size: 2.0 / 255.0,
            shift_frac: 0.2,
            kl_weight: 1.0,
            strata: 4,
            refresh_every: 5,
            kmeans_iters: 10,
            mask_q: 0.2,
            buffer_cap: 20,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> ModelResult<()> {
        if self.latent == 0 {
            return Err(ModelError::BadParam { what: "latent", bound: "at least 1", value: 0.0 });
        }
        if self.lr <= 0.0 || !self.lr.is_finite() {
            return Err(ModelError::BadParam {
                what: "lr",
                bound: "positive and finite",
                value: self.lr,
            });
        }
        if self.batch_size == 0 {
            return Err(ModelError::BadParam { what: "batch_size", bound: "at least 1", value: 0.0 });
        }
        if !(0.0..=1.0).contains(&self.mask_q) {
            return Err(ModelError::BadParam {
                what: "mask_q",
                bound: "in [0,1]",
                value: self.mask_q,
            });
        }
        if self.strata == 0 {
            return Err(ModelError::BadParam { what: "strata", bound: "at least 1", value: 0.0 });
        }
        if self.refresh_every == 0 {
            return Err(ModelError::BadParam {
                what: "refresh_every",
                bound: "at least 1",
                value: 0.0,
            });
        }
        if self.buffer_cap == 0 {
            return Err(ModelError::BadParam {
                what: "buffer_cap",
                bound: "at least 1",
                value: 0.0,
            });
        }
        if self.sigma < 0.0 {
            return Err(ModelError::BadParam {
                what: "sigma",
                bound: "nonnegative",
                value: self.sigma,
            });
        }
        Ok(())
    }
}

/// Content/style/logits read out of one forward pass.
#[derive(Debug, Clone)]
pub struct CausalTaps {
    pub content: Tensor,
    pub style: Tensor,
    pub logits: Vec<f64>,
}

/// One of the four variants behind a uniform training, attack, and
/// measurement interface.
#[derive(Debug, Clone)]
pub enum ZooModel {
    Cama(CamaLite),
    Caam(CaamLite),
    CausalAdv(CausalAdvLite),
    Dice(DiceLite),
}

impl ZooModel {
    /// Fresh model with seeded initialization. `in_shape` is `[C,H,W]`; both
    /// spatial dims must be divisible by 4 for the two pooling stages.
    pub fn new(
        variant: Variant,
        cfg: &ModelConfig,
        in_shape: [usize; 3],
        classes: usize,
        seed: u64,
    ) -> ModelResult<Self> {
        cfg.validate()?;
        if classes < 2 {
            return Err(ModelError::BadParam {
                what: "classes",
                bound: "at least 2",
                value: classes as f64,
            });
        }
        Ok(match variant {
            Variant::Cama => ZooModel::Cama(CamaLite::new(cfg, in_shape, classes, seed)?),
            Variant::Caam => ZooModel::Caam(CaamLite::new(cfg, in_shape, classes, seed)?),
            Variant::CausalAdv => {
                ZooModel::CausalAdv(CausalAdvLite::new(cfg, in_shape, classes, seed)?)
            }
            Variant::Dice => ZooModel::Dice(DiceLite::new(cfg, in_shape, classes, seed)?),
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            ZooModel::Cama(_) => Variant::Cama,
            ZooModel::Caam(_) => Variant::Caam,
            ZooModel::CausalAdv(_) => Variant::CausalAdv,
            ZooModel::Dice(_) => Variant::Dice,
        }
    }

    pub fn classes(&self) -> usize {
        match self {
            ZooModel::Cama(m) => m.classes,
            ZooModel::Caam(m) => m.classes,
            ZooModel::CausalAdv(m) => m.classes,
            ZooModel::Dice(m) => m.classes,
        }
    }

    pub fn in_shape(&self) -> [usize; 3] {
        match self {
            ZooModel::Cama(m) => m.backbone.in_shape(),
            ZooModel::Caam(m) => m.backbone.in_shape(),
            ZooModel::CausalAdv(m) => m.backbone.in_shape(),
            ZooModel::Dice(m) => m.backbone.in_shape(),
        }
    }

    /// One pass over the training set: shuffles, batches, generates whatever
    /// auxiliary inputs the variant needs, and applies optimizer steps.
    /// Returns the mean training loss.
    pub fn train_epoch(
        &mut self,
        opt: &mut crate::autograd::Optimizer,
        xs: &[Tensor],
        ys: &[usize],
        epoch: usize,
        seed: u64,
    ) -> ModelResult<f64> {
        if xs.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        if xs.len() != ys.len() {
            return Err(ModelError::LabelMismatch { xs: xs.len(), ys: ys.len() });
        }
        let k = self.classes();
        if let Some(&bad) = ys.iter().find(|&&y| y >= k) {
            return Err(ModelError::LabelRange { label: bad, classes: k });
        }
        match self {
            ZooModel::Cama(m) => m.train_epoch(opt, xs, ys, epoch, seed),
            ZooModel::Caam(m) => m.train_epoch(opt, xs, ys, epoch, seed),
            ZooModel::CausalAdv(m) => m.train_epoch(opt, xs, ys, epoch, seed),
            ZooModel::Dice(m) => m.train_epoch(opt, xs, ys, epoch, seed),
        }
    }

    /// Content/style/logits from one forward pass on one image.
    pub fn taps(&self, x: &Tensor, y: usize) -> ModelResult<CausalTaps> {
        match self {
            ZooModel::Cama(m) => m.taps(x, y),
            ZooModel::Caam(m) => m.taps(x, y),
            ZooModel::CausalAdv(m) => m.taps(x, y),
            ZooModel::Dice(m) => m.taps(x, y),
        }
    }

    pub fn predict(&self, x: &Tensor) -> ModelResult<usize> {
        let mut tape = Tape::new();
        let xid = tape.constant(x.clone());
        let logits = self.logits_tape(&mut tape, xid)?;
        Ok(tape.value(logits).argmax())
    }

    /// Clean accuracy, evaluated in parallel across samples.
    pub fn accuracy(&self, xs: &[Tensor], ys: &[usize]) -> ModelResult<f64> {
        use rayon::prelude::*;
        if xs.len() != ys.len() {
            return Err(ModelError::LabelMismatch { xs: xs.len(), ys: ys.len() });
        }
        if xs.is_empty() {
            return Ok(0.0);
        }
        let hits: usize = xs
            .par_iter()
            .zip(ys.par_iter())
            .map(|(x, &y)| Ok(usize::from(self.predict(x)? == y)))
            .sum::<ModelResult<usize>>()?;
        Ok(hits as f64 / xs.len() as f64)
    }

    /// Named weights in a stable order, for checkpoints and inspection.
    pub fn params(&self) -> Vec<(String, &Tensor)> {
        match self {
            ZooModel::Cama(m) => m.params(),
            ZooModel::Caam(m) => m.params(),
            ZooModel::CausalAdv(m) => m.params(),
            ZooModel::Dice(m) => m.params(),
        }
    }

    pub(crate) fn set_param(&mut self, name: &str, value: Tensor) -> ModelResult<()> {
        match self {
            ZooModel::Cama(m) => m.set_param(name, value),
            ZooModel::Caam(m) => m.set_param(name, value),
            ZooModel::CausalAdv(m) => m.set_param(name, value),
            ZooModel::Dice(m) => m.set_param(name, value),
        }
    }

    pub fn save(&self, path: &std::path::Path) -> ModelResult<()> {
        checkpoint::save(self, path)
    }

    pub fn load(path: &std::path::Path, cfg: &ModelConfig) -> ModelResult<ZooModel> {
        checkpoint::load(path, cfg)
    }
}

impl WhiteBoxModel for ZooModel {
    fn num_classes(&self) -> usize {
        self.classes()
    }

    fn logits_tape(&self, tape: &mut Tape, x: TensorId) -> AgResult<TensorId> {
        match self {
            ZooModel::Cama(m) => m.logits_tape(tape, x),
            ZooModel::Caam(m) => m.logits_tape(tape, x),
            ZooModel::CausalAdv(m) => m.logits_tape(tape, x),
            ZooModel::Dice(m) => m.logits_tape(tape, x),
        }
    }
}

impl TapSource for ZooModel {
    fn taps(&self, x: &Tensor, y: usize) -> Result<(Tensor, Tensor), String> {
        let t = ZooModel::taps(self, x, y).map_err(|e| e.to_string())?;
        Ok((t.content, t.style))
    }
}

/// FNV-1a over the raw bits of a float slice; per-input noise seeds.
pub(crate) fn data_hash(values: &[f64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in values {
        for b in v.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

/// Shared guard for batched training inputs.
pub(crate) fn stack_batch(xs: &[&Tensor], in_shape: [usize; 3]) -> AgResult<Tensor> {
    let [c, h, w] = in_shape;
    let mut data = Vec::with_capacity(xs.len() * c * h * w);
    for x in xs {
        data.extend_from_slice(x.data());
    }
    Tensor::from_vec(vec![xs.len(), c, h, w], data)
}

/// One-hot rows, `[B,K]`, used as a constant selector matrix.
pub(crate) fn onehot(ys: &[usize], k: usize) -> Tensor {
    let mut data = vec![0.0; ys.len() * k];
    for (i, &y) in ys.iter().enumerate() {
        data[i * k + y] = 1.0;
    }
    Tensor::new_unchecked(vec![ys.len(), k], data)
}

/// Mixes a master seed with a purpose tag and two loop indices into a
/// sub-seed for nested randomized procedures. Every pipeline stage derives
/// its own stream through this, so adding a stage never shifts another
/// stage's randomness.
pub fn derive_seed(master: u64, tag: &str, a: u64, b: u64) -> u64 {
    crate::rng::tag_hash(tag)
        ^ master.rotate_left(13)
        ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ b.rotate_left(31)
}
