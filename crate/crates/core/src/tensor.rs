use crate::error::{Error, Result};

/// Row-major `(tokens, dim, heads)` array of finite `f64` values.
///
/// Element `(t, c, j)` lives at `(t * dim + c) * heads + j`. Engines work on
/// per-head contiguous copies obtained with [`HeadedTensor::head_matrix`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadedTensor {
    data: Vec<f64>,
    tokens: usize,
    dim: usize,
    heads: usize,
}

impl HeadedTensor {
    pub fn zeros(tokens: usize, dim: usize, heads: usize) -> Self {
        Self {
            data: vec![0.0; tokens * dim * heads],
            tokens,
            dim,
            heads,
        }
    }

    pub fn from_vec(data: Vec<f64>, tokens: usize, dim: usize, heads: usize) -> Result<Self> {
        if data.len() != tokens * dim * heads {
            return Err(Error::ShapeMismatch {
                what: "tensor storage",
                expected: vec![tokens * dim * heads],
                actual: vec![data.len()],
            });
        }
        if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::ShapeMismatch {
                what: "finite tensor entries (first non-finite index)",
                expected: vec![],
                actual: vec![pos],
            });
        }
        Ok(Self {
            data,
            tokens,
            dim,
            heads,
        })
    }

    pub fn from_fn(
        tokens: usize,
        dim: usize,
        heads: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut out = Self::zeros(tokens, dim, heads);
        for t in 0..tokens {
            for c in 0..dim {
                for j in 0..heads {
                    out.set(t, c, j, f(t, c, j));
                }
            }
        }
        out
    }

    /// Assembles a tensor from per-head `(tokens, dim)` matrices.
    pub fn from_head_matrices(mats: &[Vec<f64>], tokens: usize, dim: usize) -> Self {
        let heads = mats.len();
        let mut out = Self::zeros(tokens, dim, heads);
        for (j, m) in mats.iter().enumerate() {
            debug_assert_eq!(m.len(), tokens * dim);
            for t in 0..tokens {
                for c in 0..dim {
                    out.data[(t * dim + c) * heads + j] = m[t * dim + c];
                }
            }
        }
        out
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.tokens, self.dim, self.heads)
    }

    pub fn tokens(&self) -> usize {
        self.tokens
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, t: usize, c: usize, j: usize) -> f64 {
        self.data[(t * self.dim + c) * self.heads + j]
    }

    #[inline]
    pub fn set(&mut self, t: usize, c: usize, j: usize, v: f64) {
        self.data[(t * self.dim + c) * self.heads + j] = v;
    }

    /// Contiguous `(tokens, dim)` copy of one head.
    pub fn head_matrix(&self, j: usize) -> Vec<f64> {
        let mut m = Vec::with_capacity(self.tokens * self.dim);
        for t in 0..self.tokens {
            for c in 0..self.dim {
                m.push(self.get(t, c, j));
            }
        }
        m
    }

    /// Row `t` of head `j` as a vector.
    pub fn row(&self, t: usize, j: usize) -> Vec<f64> {
        (0..self.dim).map(|c| self.get(t, c, j)).collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape(), "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn expect_shape(
        &self,
        what: &'static str,
        tokens: usize,
        dim: usize,
        heads: usize,
    ) -> Result<()> {
        if self.shape() == (tokens, dim, heads) {
            Ok(())
        } else {
            Err(Error::ShapeMismatch {
                what,
                expected: vec![tokens, dim, heads],
                actual: vec![self.tokens, self.dim, self.heads],
            })
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_token_dim_head_row_major() {
        let t = HeadedTensor::from_fn(2, 3, 2, |t, c, j| (t * 100 + c * 10 + j) as f64);
        assert_eq!(t.as_slice()[(3 + 2) * 2 + 1], 121.0);
        assert_eq!(t.head_matrix(1), vec![1.0, 11.0, 21.0, 101.0, 111.0, 121.0]);
        let back = HeadedTensor::from_head_matrices(&[t.head_matrix(0), t.head_matrix(1)], 2, 3);
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_storage() {
        assert!(HeadedTensor::from_vec(vec![0.0; 5], 2, 3, 1).is_err());
        assert!(HeadedTensor::from_vec(vec![f64::NAN; 6], 2, 3, 1).is_err());
    }
}
