use rand::Rng;
use rand_distr::StandardNormal;

use super::{AgResult, AutogradError};

/// Dense row-major f64 tensor. `shape` may be empty, which denotes a scalar
/// holding exactly one element; in all cases `data.len()` equals the product
/// of the dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

pub(crate) fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    /// Builds a tensor after checking length and finiteness. All public
    /// constructors funnel through here so a tensor can never hold NaN/Inf.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> AgResult<Self> {
        if numel_of(&shape) != data.len() {
            return Err(AutogradError::DataLength { shape, len: data.len() });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(AutogradError::NonFiniteInput);
        }
        Ok(Self { shape, data, requires_grad: false, grad: None })
    }

    /// Internal constructor for op outputs whose values were already checked.
    pub(crate) fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(numel_of(&shape), data.len());
        Self { shape, data, requires_grad: false, grad: None }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![0.0; numel_of(shape)])
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::new_unchecked(shape.to_vec(), vec![1.0; numel_of(shape)])
    }

    pub fn full(shape: &[usize], value: f64) -> AgResult<Self> {
        Self::from_vec(shape.to_vec(), vec![value; numel_of(shape)])
    }

    pub fn scalar(value: f64) -> AgResult<Self> {
        Self::from_vec(vec![], vec![value])
    }

    /// Standard normal entries scaled by `std`.
    pub fn randn<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape))
            .map(|_| std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self::new_unchecked(shape.to_vec(), data)
    }

    pub fn uniform<R: Rng>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel_of(shape)).map(|_| rng.random_range(lo..hi)).collect();
        Self::new_unchecked(shape.to_vec(), data)
    }

    /// Builder-style toggle used when registering parameters.
    pub fn requires_grad(mut self, flag: bool) -> Self {
        self.requires_grad = flag;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> AgResult<f64> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(AutogradError::NonScalarOutput { shape: self.shape.clone() })
        }
    }

    /// Same data viewed under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> AgResult<Self> {
        if numel_of(shape) != self.data.len() {
            return Err(AutogradError::DataLength {
                shape: shape.to_vec(),
                len: self.data.len(),
            });
        }
        Ok(Self::new_unchecked(shape.to_vec(), self.data.clone()))
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, v) in self.data.iter().enumerate() {
            if *v > self.data[best] {
                best = i;
            }
        }
        best
    }
}
