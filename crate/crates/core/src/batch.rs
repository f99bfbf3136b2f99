//! Image batches in `[0, 1]` pixel space.

use ndarray::{s, Array4, ArrayView4, Axis};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Rank-4 `[N, C, H, W]` array with every element finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch<T: Real = f32> {
    data: Array4<T>,
}

impl<T: Real> ImageBatch<T> {
    pub fn new(data: Array4<T>) -> Result<Self> {
        if data.shape()[0] == 0 {
            return Err(Error::invalid("image batch must contain at least one image"));
        }
        if let Some(v) = data
            .iter()
            .find(|v| !v.is_finite() || **v < T::zero() || **v > T::one())
        {
            return Err(Error::invalid(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(Self { data })
    }

    /// Clamps every element to `[0, 1]`; non-finite values map to 0.
    pub fn clipped(mut data: Array4<T>) -> Self {
        data.mapv_inplace(clamp_unit);
        Self { data }
    }

    pub fn data(&self) -> &Array4<T> {
        &self.data
    }

    pub fn view(&self) -> ArrayView4<'_, T> {
        self.data.view()
    }

    pub fn into_inner(self) -> Array4<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(C, H, W)`.
    pub fn image_shape(&self) -> (usize, usize, usize) {
        let s = self.data.shape();
        (s[1], s[2], s[3])
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            data: self.data.select(Axis(0), indices),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            data: self.data.slice(s![start..end, .., .., ..]).to_owned(),
        }
    }

    pub fn cast<U: Real>(&self) -> ImageBatch<U> {
        ImageBatch {
            data: self.data.mapv(|v| U::of(v.as_f64())),
        }
    }

    pub fn concat(parts: &[&ImageBatch<T>]) -> Result<Self> {
        let views: Vec<_> = parts.iter().map(|p| p.data.view()).collect();
        let data = ndarray::concatenate(Axis(0), &views).map_err(|e| Error::ShapeMismatch {
            expected: "batches with equal image shape".into(),
            actual: e.to_string(),
        })?;
        Ok(Self { data })
    }
}

#[inline]
fn clamp_unit<T: Real>(v: T) -> T {
    if v.is_nan() {
        T::zero()
    } else {
        v.max(T::zero()).min(T::one())
    }
}

/// Clamps an attacked batch back into the valid image range.
pub fn clip_to_image<T: Real>(x_adv: &Array4<T>) -> ImageBatch<T> {
    ImageBatch::clipped(x_adv.clone())
}

/// Images with integer class labels in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T: Real = f32> {
    pub images: ImageBatch<T>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledBatch<T> {
    pub fn new(images: ImageBatch<T>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if labels.len() != images.len() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} labels", images.len()),
                actual: format!("{} labels", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    pub fn slice(&self, start: usize, end: usize) -> Self {
        Self {
            images: self.images.slice(start, end),
            labels: self.labels[start..end].to_vec(),
        }
    }

    /// Splits into consecutive batches of at most `size` samples.
    pub fn chunks(&self, size: usize) -> impl Iterator<Item = LabeledBatch<T>> + '_ {
        let n = self.len();
        let size = size.max(1);
        (0..n).step_by(size).map(move |s| self.slice(s, (s + size).min(n)))
    }
}
