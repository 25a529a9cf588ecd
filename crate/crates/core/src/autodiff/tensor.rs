use super::AutodiffError;

/// Dense row-major `f64` array with an optional gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        if shape.is_empty() || shape.contains(&0) {
            return Err(AutodiffError::InvalidShape(shape));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::DataLength { shape, len: data.len() });
        }
        Ok(Self {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    /// Same as [`Tensor::new`] but flagged as trainable.
    pub fn param(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, AutodiffError> {
        Ok(Self::new(shape, data)?.with_requires_grad(true))
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self, AutodiffError> {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel])
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds an `m x n` matrix from row slices.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AutodiffError> {
        let m = rows.len();
        let n = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(m * n);
        for row in rows {
            if row.len() != n {
                return Err(AutodiffError::RaggedRows);
            }
            data.extend_from_slice(row);
        }
        Self::new(vec![m, n], data)
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Result<f64, AutodiffError> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(AutodiffError::NotScalar(self.shape.clone()))
        }
    }

    /// `(rows, cols)` of a rank-2 tensor; rank-1 tensors are treated as one row.
    pub fn dims2(&self) -> Result<(usize, usize), AutodiffError> {
        match self.shape.as_slice() {
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            _ => Err(AutodiffError::NotMatrix(self.shape.clone())),
        }
    }

    pub fn row(&self, i: usize) -> Result<&[f64], AutodiffError> {
        let (m, n) = self.dims2()?;
        if i >= m {
            return Err(AutodiffError::IndexOutOfRange { index: i, bound: m });
        }
        Ok(&self.data[i * n..(i + 1) * n])
    }

    /// Adds `delta` into the gradient accumulator, allocating it on first use.
    ///
    /// No-op for tensors that do not require gradients.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<(), AutodiffError> {
        if !self.requires_grad {
            return Ok(());
        }
        if delta.len() != self.data.len() {
            return Err(AutodiffError::DataLength {
                shape: self.shape.clone(),
                len: delta.len(),
            });
        }
        let grad = self.grad.get_or_insert_with(|| vec![0.0; delta.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor, AutodiffError> {
        let mut t = Tensor::new(shape, self.data.clone())?;
        t.requires_grad = self.requires_grad;
        Ok(t)
    }

    /// Index of the largest entry in each row.
    pub fn argmax_rows(&self) -> Result<Vec<usize>, AutodiffError> {
        let (m, n) = self.dims2()?;
        Ok((0..m).map(|i| argmax(&self.data[i * n..(i + 1) * n])).collect())
    }
}

/// First index of the maximum; NaN entries never win.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] || values[best].is_nan() {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(matches!(
            Tensor::new(vec![2, 3], vec![0.0; 5]),
            Err(AutodiffError::DataLength { .. })
        ));
        assert!(Tensor::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn grad_is_never_allocated_without_requires_grad() {
        let mut t = Tensor::new(vec![2], vec![1.0, 2.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(t.grad().is_none());

        let mut p = Tensor::param(vec![2], vec![1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        p.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(p.grad().unwrap(), &[2.0, 4.0]);
        p.zero_grad();
        assert_eq!(p.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn argmax_prefers_first_maximum() {
        assert_eq!(argmax(&[0.2, 0.5, 0.5]), 1);
        assert_eq!(argmax(&[f64::NAN, 0.1]), 1);
    }
}
