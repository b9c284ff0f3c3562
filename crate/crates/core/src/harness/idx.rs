//! IDX image/label file ingestion and emission. Big-endian headers, u8
//! payload; pixels scale to [0,1] on read and quantize back on write.

use std::path::Path;

use super::{Dataset, HarnessError, HarnessResult};
use crate::autograd::Tensor;
use crate::rng::stream;

pub const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

struct ByteReader<'a> {
    data: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> HarnessResult<&'a [u8]> {
        if self.offset + n > self.data.len() {
            return Err(HarnessError::IdxTruncated { offset: self.data.len() });
        }
        let slice = &self.data[self.offset..self.offset + n];
        self.offset += n;
        Ok(slice)
    }

    fn u32be(&mut self) -> HarnessResult<u32> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Reads an IDX image file into unit-interval tensors of shape `[1,h,w]`.
pub fn read_idx_images(path: &Path) -> HarnessResult<Vec<Tensor>> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader { data: &bytes, offset: 0 };
    let magic = r.u32be()?;
    if magic != IDX_IMAGE_MAGIC {
        return Err(HarnessError::IdxMagic { found: magic, expected: IDX_IMAGE_MAGIC });
    }
    let n = r.u32be()? as usize;
    let h = r.u32be()? as usize;
    let w = r.u32be()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pixels = r.take(h * w)?;
        let data: Vec<f64> = pixels.iter().map(|&b| b as f64 / 255.0).collect();
        out.push(Tensor::from_vec(vec![1, h, w], data).expect("shape matches buffer"));
    }
    Ok(out)
}

/// Reads an IDX label file.
pub fn read_idx_labels(path: &Path) -> HarnessResult<Vec<usize>> {
    let bytes = std::fs::read(path)?;
    let mut r = ByteReader { data: &bytes, offset: 0 };
    let magic = r.u32be()?;
    if magic != IDX_LABEL_MAGIC {
        return Err(HarnessError::IdxMagic { found: magic, expected: IDX_LABEL_MAGIC });
    }
    let n = r.u32be()? as usize;
    Ok(r.take(n)?.iter().map(|&b| b as usize).collect())
}

fn write_atomic_bytes(path: &Path, bytes: &[u8]) -> HarnessResult<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let tmp = path.with_extension("tmp-write");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Writes images as an IDX file, quantizing each pixel to round(v*255).
/// All images must share one `[1,h,w]` shape.
pub fn write_idx_images(path: &Path, images: &[Tensor]) -> HarnessResult<()> {
    let shape = images
        .first()
        .map(|t| t.shape().to_vec())
        .unwrap_or_else(|| vec![1, 0, 0]);
    let (h, w) = (shape[1], shape[2]);
    let mut bytes = Vec::with_capacity(16 + images.len() * h * w);
    bytes.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(images.len() as u32).to_be_bytes());
    bytes.extend_from_slice(&(h as u32).to_be_bytes());
    bytes.extend_from_slice(&(w as u32).to_be_bytes());
    for img in images {
        debug_assert_eq!(img.shape(), shape.as_slice());
        for &v in img.data() {
            bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    write_atomic_bytes(path, &bytes)
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> HarnessResult<()> {
    let mut bytes = Vec::with_capacity(8 + labels.len());
    bytes.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    for &l in labels {
        bytes.push(l as u8);
    }
    write_atomic_bytes(path, &bytes)
}

/// Loads one image/label IDX pair and cross-checks the counts.
pub fn load_mnist_idx(
    images_path: &Path,
    labels_path: &Path,
) -> HarnessResult<(Vec<Tensor>, Vec<usize>)> {
    let images = read_idx_images(images_path)?;
    let labels = read_idx_labels(labels_path)?;
    if images.len() != labels.len() {
        return Err(HarnessError::IdxCount { images: images.len(), labels: labels.len() });
    }
    Ok((images, labels))
}

/// Builds a dataset from IDX pairs: optional seeded subsampling, then the
/// training pool randomly partitioned 4:1 into train and validation.
#[allow(clippy::too_many_arguments)]
pub fn mnist_dataset(
    train_images: &Path,
    train_labels: &Path,
    test_images: &Path,
    test_labels: &Path,
    take_train: Option<usize>,
    take_test: Option<usize>,
    seed: u64,
) -> HarnessResult<Dataset> {
    use rand::seq::SliceRandom;

    let (mut tx, mut ty) = load_mnist_idx(train_images, train_labels)?;
    let (mut ex, mut ey) = load_mnist_idx(test_images, test_labels)?;

    let subsample = |xs: &mut Vec<Tensor>, ys: &mut Vec<usize>, take: usize, tag: &str| {
        let mut order: Vec<usize> = (0..xs.len()).collect();
        order.shuffle(&mut stream(seed, tag, 0));
        order.truncate(take.min(xs.len()));
        order.sort_unstable();
        *xs = order.iter().map(|&i| xs[i].clone()).collect();
        *ys = order.iter().map(|&i| ys[i]).collect();
    };
    if let Some(take) = take_train {
        subsample(&mut tx, &mut ty, take, "idx-sub-train");
    }
    if let Some(take) = take_test {
        subsample(&mut ex, &mut ey, take, "idx-sub-test");
    }

    let n = tx.len();
    let n_val = n / 5;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut stream(seed, "idx-split", 0));

    let classes = ty
        .iter()
        .chain(&ey)
        .max()
        .map(|&m| m + 1)
        .unwrap_or(0)
        .max(2);
    let shape = tx
        .first()
        .map(|t| [t.shape()[0], t.shape()[1], t.shape()[2]])
        .unwrap_or([1, 0, 0]);

    let mut ds = Dataset {
        name: "mnist".to_string(),
        classes,
        in_shape: shape,
        train_x: Vec::with_capacity(n - n_val),
        train_y: Vec::with_capacity(n - n_val),
        val_x: Vec::with_capacity(n_val),
        val_y: Vec::with_capacity(n_val),
        test_x: ex,
        test_y: ey,
        train_factors: Vec::new(),
        val_factors: Vec::new(),
        test_factors: Vec::new(),
    };
    for (slot, &i) in order.iter().enumerate() {
        if slot < n_val {
            ds.val_x.push(tx[i].clone());
            ds.val_y.push(ty[i]);
        } else {
            ds.train_x.push(tx[i].clone());
            ds.train_y.push(ty[i]);
        }
    }
    Ok(ds)
}
