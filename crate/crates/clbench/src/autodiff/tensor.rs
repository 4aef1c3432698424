use crate::error::{Error, Result};

/// Dense row-major tensor of `f64` values.
///
/// Gradients are not stored here; they live either in [`super::ParamSet`]
/// (for trainable parameters) or in graph nodes during a backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if values.len() != expected {
            return Err(Error::Contract(format!(
                "tensor with shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            values: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            values: vec![v],
        }
    }

    /// Build a `[rows, cols]` matrix from nested slices. Convenience for tests
    /// and small fixtures.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        let mut values = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            values.extend_from_slice(row);
        }
        Self {
            shape: vec![r, c],
            values,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Number of rows when interpreted as a 2-d batch; scalars report 0.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Row width for a 2-d tensor.
    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(0)
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn scalar_value(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.values[0]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    /// Vertical concatenation of 2-d tensors with equal column counts.
    pub fn vcat(parts: &[&Tensor]) -> Result<Tensor> {
        let non_empty: Vec<&&Tensor> = parts.iter().filter(|t| t.rows() > 0).collect();
        let cols = match non_empty.first() {
            Some(t) => t.cols(),
            None => return Ok(Tensor::zeros(vec![0, 0])),
        };
        let mut values = Vec::new();
        let mut rows = 0;
        for t in &non_empty {
            if t.cols() != cols {
                return Err(Error::DimensionMismatch {
                    op: "vcat",
                    lhs: vec![rows, cols],
                    rhs: t.shape.clone(),
                });
            }
            values.extend_from_slice(&t.values);
            rows += t.rows();
        }
        Tensor::new(vec![rows, cols], values)
    }
}
