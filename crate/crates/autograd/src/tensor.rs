use std::fmt;
use std::sync::Arc;

/// Tensor shape, always `[batch, channels, height, width]`.
pub type Shape = [usize; 4];

pub fn numel(shape: &Shape) -> usize {
    shape.iter().product()
}

/// Dense NCHW f32 tensor with copy-on-write storage.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Shape,
    data: Arc<Vec<f32>>,
}

impl Tensor {
    pub fn from_vec(shape: Shape, data: Vec<f32>) -> Self {
        assert_eq!(
            numel(&shape),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: Shape) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: Shape, value: f32) -> Self {
        Self::from_vec(shape, vec![value; numel(&shape)])
    }

    pub fn scalar(value: f32) -> Self {
        Self::from_vec([1, 1, 1, 1], vec![value])
    }

    /// Per-channel vector laid out as `[1, C, 1, 1]`.
    pub fn channel_vector(values: Vec<f32>) -> Self {
        Self::from_vec([1, values.len(), 1, 1], values)
    }

    pub fn from_fn(shape: Shape, mut f: impl FnMut(usize) -> f32) -> Self {
        Self::from_vec(shape, (0..numel(&shape)).map(&mut f).collect())
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    pub fn into_vec(self) -> Vec<f32> {
        Arc::try_unwrap(self.data).unwrap_or_else(|shared| (*shared).clone())
    }

    pub fn reshape(&self, shape: Shape) -> Self {
        assert_eq!(numel(&shape), self.len(), "reshape must preserve element count");
        Self {
            shape,
            data: Arc::clone(&self.data),
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_vec(self.shape, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f32, f32) -> f32) -> Self {
        assert_eq!(self.shape, other.shape, "zip_map requires equal shapes");
        Self::from_vec(
            self.shape,
            self.data
                .iter()
                .zip(other.data.iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        )
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> f32 {
        let [_, cc, hh, ww] = self.shape;
        self.data[((n * cc + c) * hh + h) * ww + w]
    }

    /// Contiguous slice holding sample `n`.
    pub fn sample(&self, n: usize) -> &[f32] {
        let per = self.shape[1] * self.shape[2] * self.shape[3];
        &self.data[n * per..(n + 1) * per]
    }

    /// Sum accumulated in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.len() as f64
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() on a tensor with {} elements", self.len());
        self.data[0]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Stack samples with identical per-sample shape into one batch.
    pub fn stack(samples: &[Tensor]) -> Self {
        assert!(!samples.is_empty(), "cannot stack an empty list");
        let [_, c, h, w] = samples[0].shape;
        let mut data = Vec::with_capacity(samples.len() * c * h * w);
        let mut n = 0;
        for s in samples {
            assert_eq!([s.shape[1], s.shape[2], s.shape[3]], [c, h, w]);
            data.extend_from_slice(&s.data);
            n += s.shape[0];
        }
        Self::from_vec([n, c, h, w], data)
    }

    /// Sample `n` as a batch of one.
    pub fn select(&self, n: usize) -> Self {
        let [_, c, h, w] = self.shape;
        Self::from_vec([1, c, h, w], self.sample(n).to_vec())
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let preview: Vec<f32> = self.data.iter().take(8).copied().collect();
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("head", &preview)
            .finish()
    }
}
