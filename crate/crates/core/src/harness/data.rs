//! Synthetic image dataset with known generating factors: the class draws a
//! foreground glyph, a background-intensity confounder tracks the label with
//! tunable strength, and every sample keeps its ground-truth annotation so
//! generator properties stay testable.

use rand::Rng;

use super::{HarnessError, HarnessResult};
use crate::autograd::Tensor;
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    MnistIdx,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DatasetSpec {
    pub source: DataSource,
    /// square image side in pixels
    pub side: usize,
    pub classes: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> HarnessResult<()> {
        if self.classes < 2 || self.classes > TEMPLATES.len() {
            return Err(HarnessError::BadParam {
                what: "classes",
                bound: "between 2 and 10",
                value: self.classes as f64,
            });
        }
        // glyphs are 8x8 and jitter needs 2 pixels of margin on each side
        if self.side < 12 || self.side % 4 != 0 {
            return Err(HarnessError::BadParam {
                what: "side",
                bound: "at least 12 and divisible by 4",
                value: self.side as f64,
            });
        }
        if self.train != 4 * self.val {
            return Err(HarnessError::RatioViolation { train: self.train, val: self.val });
        }
        if self.train == 0 || self.test == 0 {
            return Err(HarnessError::BadParam {
                what: "split sizes",
                bound: "nonzero",
                value: 0.0,
            });
        }
        Ok(())
    }
}

/// Strength of the label/background coupling: 0 makes the background
/// independent of the class, 1 makes it a deterministic function of it.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SyntheticFactors {
    pub rho: f64,
}

/// Ground truth for one generated sample.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct FactorAnnotation {
    pub shape: usize,
    pub background: f64,
}

pub struct Dataset {
    pub name: String,
    pub classes: usize,
    pub in_shape: [usize; 3],
    pub train_x: Vec<Tensor>,
    pub train_y: Vec<usize>,
    pub val_x: Vec<Tensor>,
    pub val_y: Vec<usize>,
    pub test_x: Vec<Tensor>,
    pub test_y: Vec<usize>,
    /// per-sample generating factors; empty for ingested datasets
    pub train_factors: Vec<FactorAnnotation>,
    pub val_factors: Vec<FactorAnnotation>,
    pub test_factors: Vec<FactorAnnotation>,
}

/// 8x8 glyph bitmaps, one row per byte, most significant bit leftmost.
const TEMPLATES: [[u8; 8]; 10] = [
    [0xFF, 0x81, 0x81, 0x81, 0x81, 0x81, 0x81, 0xFF], // square outline
    [0x3C, 0x7E, 0xFF, 0xFF, 0xFF, 0xFF, 0x7E, 0x3C], // disk
    [0x18, 0x18, 0x18, 0xFF, 0xFF, 0x18, 0x18, 0x18], // plus
    [0x81, 0x42, 0x24, 0x18, 0x18, 0x24, 0x42, 0x81], // saltire
    [0x18, 0x18, 0x3C, 0x3C, 0x7E, 0x7E, 0xFF, 0xFF], // triangle
    [0xFF, 0x00, 0xFF, 0x00, 0xFF, 0x00, 0xFF, 0x00], // horizontal bars
    [0xAA, 0xAA, 0xAA, 0xAA, 0xAA, 0xAA, 0xAA, 0xAA], // vertical bars
    [0x18, 0x3C, 0x7E, 0xFF, 0xFF, 0x7E, 0x3C, 0x18], // diamond
    [0xC0, 0xC0, 0xC0, 0xC0, 0xC0, 0xC0, 0xFF, 0xFF], // corner
    [0xCC, 0xCC, 0x33, 0x33, 0xCC, 0xCC, 0x33, 0x33], // checkerboard
];

#[cfg(test)]
fn template_pixels(shape: usize) -> usize {
    TEMPLATES[shape].iter().map(|row| row.count_ones() as usize).sum()
}

fn draw_sample<R: Rng>(
    side: usize,
    classes: usize,
    rho: f64,
    rng: &mut R,
) -> (Tensor, usize, FactorAnnotation) {
    let k = rng.random_range(0..classes);
    let tied = rng.random_bool(rho);
    let background = if tied {
        0.1 + 0.7 * k as f64 / (classes - 1) as f64
    } else {
        rng.random_range(0.1..0.9)
    };
    let base = (side - 8) / 2;
    let dy = rng.random_range(-2i64..=2) as i64;
    let dx = rng.random_range(-2i64..=2) as i64;

    let mut img = vec![background; side * side];
    let glyph = &TEMPLATES[k];
    for (r, row) in glyph.iter().enumerate() {
        for c in 0..8 {
            if row & (0x80 >> c) != 0 {
                let y = (base as i64 + dy) as usize + r;
                let x = (base as i64 + dx) as usize + c;
                img[y * side + x] = 1.0;
            }
        }
    }
    let t = Tensor::from_vec(vec![1, side, side], img).expect("shape matches buffer");
    (t, k, FactorAnnotation { shape: k, background })
}

pub fn generate_synthetic(
    spec: &DatasetSpec,
    factors: &SyntheticFactors,
) -> HarnessResult<Dataset> {
    spec.validate()?;
    if !(0.0..=1.0).contains(&factors.rho) {
        return Err(HarnessError::BadParam {
            what: "rho",
            bound: "in [0,1]",
            value: factors.rho,
        });
    }

    // the training pool is drawn once and then randomly partitioned 4:1, so
    // train and val come from the identical distribution
    let pool_n = spec.train + spec.val;
    let mut pool_rng = stream(spec.seed, "synth-pool", 0);
    let pool: Vec<(Tensor, usize, FactorAnnotation)> = (0..pool_n)
        .map(|_| draw_sample(spec.side, spec.classes, factors.rho, &mut pool_rng))
        .collect();

    let mut order: Vec<usize> = (0..pool_n).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut stream(spec.seed, "synth-split", 0));
    }

    let mut ds = Dataset {
        name: "synthetic".to_string(),
        classes: spec.classes,
        in_shape: [1, spec.side, spec.side],
        train_x: Vec::with_capacity(spec.train),
        train_y: Vec::with_capacity(spec.train),
        val_x: Vec::with_capacity(spec.val),
        val_y: Vec::with_capacity(spec.val),
        test_x: Vec::with_capacity(spec.test),
        test_y: Vec::with_capacity(spec.test),
        train_factors: Vec::with_capacity(spec.train),
        val_factors: Vec::with_capacity(spec.val),
        test_factors: Vec::with_capacity(spec.test),
    };
    for (slot, &i) in order.iter().enumerate() {
        let (x, y, f) = pool[i].clone();
        if slot < spec.train {
            ds.train_x.push(x);
            ds.train_y.push(y);
            ds.train_factors.push(f);
        } else {
            ds.val_x.push(x);
            ds.val_y.push(y);
            ds.val_factors.push(f);
        }
    }

    let mut test_rng = stream(spec.seed, "synth-test", 0);
    for _ in 0..spec.test {
        let (x, y, f) = draw_sample(spec.side, spec.classes, factors.rho, &mut test_rng);
        ds.test_x.push(x);
        ds.test_y.push(y);
        ds.test_factors.push(f);
    }
    Ok(ds)
}
