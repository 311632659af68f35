use crate::real::Real;

/// Dense `(B, C, D, H, W)` tensor in row-major order. 2D data uses `D = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub shape: [usize; 5],
    pub data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: [usize; 5]) -> Self {
        Tensor { shape, data: vec![T::zero(); shape.iter().product()] }
    }

    pub fn from_vec(shape: [usize; 5], data: Vec<T>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "tensor shape {shape:?}");
        Tensor { shape, data }
    }

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    pub fn channels(&self) -> usize {
        self.shape[1]
    }

    pub fn spatial(&self) -> [usize; 3] {
        [self.shape[2], self.shape[3], self.shape[4]]
    }

    pub fn spatial_len(&self) -> usize {
        self.shape[2] * self.shape[3] * self.shape[4]
    }

    /// Contiguous `(C, D, H, W)` block of one batch element.
    pub fn sample(&self, b: usize) -> &[T] {
        let n = self.data.len() / self.shape[0];
        &self.data[b * n..(b + 1) * n]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [T] {
        let n = self.data.len() / self.shape[0];
        &mut self.data[b * n..(b + 1) * n]
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor { shape: self.shape, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    /// Concatenates along channels.
    pub fn concat_channels(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
        assert_eq!(a.shape[0], b.shape[0]);
        assert_eq!(a.spatial(), b.spatial());
        let (ca, cb) = (a.channels(), b.channels());
        let mut out = Tensor::zeros([a.shape[0], ca + cb, a.shape[2], a.shape[3], a.shape[4]]);
        let na = a.data.len() / a.shape[0];
        for bi in 0..a.shape[0] {
            let dst = out.sample_mut(bi);
            dst[..na].copy_from_slice(a.sample(bi));
            dst[na..].copy_from_slice(b.sample(bi));
        }
        out
    }

    /// Inverse of [`Tensor::concat_channels`] for gradients.
    pub fn split_channels(&self, first: usize) -> (Tensor<T>, Tensor<T>) {
        let s = self.spatial_len();
        let rest = self.channels() - first;
        let mut a = Tensor::zeros([self.shape[0], first, self.shape[2], self.shape[3], self.shape[4]]);
        let mut b = Tensor::zeros([self.shape[0], rest, self.shape[2], self.shape[3], self.shape[4]]);
        for bi in 0..self.shape[0] {
            let src = self.sample(bi);
            a.sample_mut(bi).copy_from_slice(&src[..first * s]);
            b.sample_mut(bi).copy_from_slice(&src[first * s..]);
        }
        (a, b)
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}
