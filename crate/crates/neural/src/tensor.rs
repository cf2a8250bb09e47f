use crate::error::{NeuralError, Result};
use crate::real::Real;

/// Dense row-major n-dimensional array.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<F> {
    shape: Vec<usize>,
    data: Vec<F>,
}

impl<F: Real> Tensor<F> {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![F::zero(); len] }
    }

    pub fn filled(shape: &[usize], value: F) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_vec(shape: &[usize], data: Vec<F>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(NeuralError::Shape(format!(
                "shape {shape:?} needs {len} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn scalar(value: F) -> Self {
        Self { shape: vec![1], data: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading (batch) extent.
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Number of elements per batch entry.
    pub fn sample_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != self.data.len() {
            return Err(NeuralError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(F) -> F) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn scale(&mut self, factor: F) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    /// `self += other`, shapes must agree.
    pub fn add_assign(&mut self, other: &Tensor<F>) -> Result<()> {
        if self.shape != other.shape {
            return Err(NeuralError::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape, self.shape
            )));
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn max_abs(&self) -> F {
        self.data.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }

    /// Precision conversion.
    pub fn cast<G: Real>(&self) -> Tensor<G> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| G::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    /// Index of the largest entry along axis 1 for every (batch, spatial)
    /// position of a `[n, c, ...]` tensor, returned n-major.
    pub fn argmax_axis1(&self) -> Vec<usize> {
        let n = self.batch();
        let c = self.shape.get(1).copied().unwrap_or(1);
        let spatial: usize = self.shape.iter().skip(2).product();
        let mut out = Vec::with_capacity(n * spatial);
        for b in 0..n {
            let base = b * c * spatial;
            for s in 0..spatial {
                let mut best = 0;
                let mut best_val = self.data[base + s];
                for k in 1..c {
                    let v = self.data[base + k * spatial + s];
                    if v > best_val {
                        best = k;
                        best_val = v;
                    }
                }
                out.push(best);
            }
        }
        out
    }

    /// Concatenate `[n, c_i, ...]` tensors along axis 1.
    pub fn concat_channels(parts: &[&Tensor<F>]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| NeuralError::Shape("concat of zero tensors".into()))?;
        let n = first.batch();
        let rest: Vec<usize> = first.shape.iter().skip(2).copied().collect();
        let spatial: usize = rest.iter().product();
        for p in parts {
            if p.shape.len() < 2 || p.batch() != n || p.shape[2..] != rest[..] {
                return Err(NeuralError::Shape(format!(
                    "cannot concatenate {:?} with {:?}",
                    p.shape, first.shape
                )));
            }
        }
        let channels: usize = parts.iter().map(|p| p.shape[1]).sum();
        let mut data = Vec::with_capacity(n * channels * spatial);
        for b in 0..n {
            for p in parts {
                let len = p.shape[1] * spatial;
                data.extend_from_slice(&p.data[b * len..(b + 1) * len]);
            }
        }
        let mut shape = vec![n, channels];
        shape.extend(rest);
        Ok(Self { shape, data })
    }

    /// Inverse of [`concat_channels`](Self::concat_channels).
    pub fn split_channels(&self, sizes: &[usize]) -> Result<Vec<Self>> {
        if self.shape.len() < 2 || sizes.iter().sum::<usize>() != self.shape[1] {
            return Err(NeuralError::Shape(format!(
                "cannot split {:?} into channel groups {sizes:?}",
                self.shape
            )));
        }
        let n = self.batch();
        let spatial: usize = self.shape.iter().skip(2).product();
        let total = self.shape[1] * spatial;
        let mut out = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &c in sizes {
            let mut data = Vec::with_capacity(n * c * spatial);
            for b in 0..n {
                let start = b * total + offset * spatial;
                data.extend_from_slice(&self.data[start..start + c * spatial]);
            }
            let mut shape = self.shape.clone();
            shape[1] = c;
            out.push(Self { shape, data });
            offset += c;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_length() {
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn concat_then_split_restores_parts() {
        let a = Tensor::<f64>::from_vec(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::<f64>::from_vec(&[2, 2, 2], (10..18).map(f64::from).collect()).unwrap();
        let c = Tensor::concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3, 2]);
        assert_eq!(&c.data()[..6], &[1.0, 2.0, 10.0, 11.0, 12.0, 13.0]);
        let parts = c.split_channels(&[1, 2]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
    }

    #[test]
    fn argmax_over_classes() {
        let t = Tensor::<f32>::from_vec(&[1, 3, 2], vec![0.1, 0.7, 0.8, 0.2, 0.1, 0.1]).unwrap();
        assert_eq!(t.argmax_axis1(), vec![1, 0]);
    }
}
