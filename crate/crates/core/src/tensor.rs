//! Dense tensors and attention masks.

use crate::error::{Error, Result};

/// Dense n-dimensional `f64` array with an optional gradient accumulator.
///
/// Gradient accumulation is add-assign; callers zero gradients explicitly
/// between optimizer steps.
#[derive(Debug, Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if data.len() != numel {
            return Err(Error::Dimension {
                op: "Tensor::from_vec",
                msg: format!("shape {:?} needs {} values, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
            requires_grad: false,
            grad: None,
        }
    }

    /// Enable gradient accumulation, allocating the same-shape accumulator.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        if self.grad.is_none() {
            self.grad = Some(vec![0.0; self.data.len()]);
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

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> Option<&mut [f64]> {
        self.grad.as_deref_mut()
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.fill(0.0);
        }
    }

    /// Add `delta` into the gradient accumulator.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        let g = self
            .grad
            .as_mut()
            .expect("accumulate_grad on tensor without grad");
        debug_assert_eq!(g.len(), delta.len());
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Causal (optionally windowed) attention mask over an L×L logit matrix.
///
/// The masked sentinel is an explicit flag rather than an arithmetic
/// negative infinity, so normalization never sees non-finite values. Row `m`
/// may attend to `n` iff `n <= m` and, with a window of size `w`,
/// `n + w > m`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    len: usize,
    window: Option<usize>,
}

impl Mask {
    pub fn causal(len: usize) -> Self {
        Mask { len, window: None }
    }

    pub fn windowed(len: usize, w: usize) -> Result<Self> {
        if w == 0 {
            return Err(Error::ZeroWindow);
        }
        Ok(Mask {
            len,
            window: Some(w),
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn window(&self) -> Option<usize> {
        self.window
    }

    /// Attendable column range `[start, end)` for row `m`.
    pub fn row_range(&self, m: usize) -> (usize, usize) {
        let start = match self.window {
            Some(w) => m.saturating_sub(w - 1),
            None => 0,
        };
        (start, m + 1)
    }

    pub fn allows(&self, m: usize, n: usize) -> bool {
        let (s, e) = self.row_range(m);
        n >= s && n < e
    }

    /// A mask restricted to the first `len` rows/columns.
    pub fn truncated(&self, len: usize) -> Mask {
        Mask {
            len,
            window: self.window,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_checks_count() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn grad_accumulates() {
        let mut t = Tensor::zeros(&[2]).with_grad();
        t.accumulate_grad(&[1.0, 2.0]);
        t.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(t.grad().unwrap(), &[1.5, 2.5]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn windowed_mask_ranges() {
        // w=2: token m attends to {m-1, m} only
        let m = Mask::windowed(5, 2).unwrap();
        assert_eq!(m.row_range(0), (0, 1));
        assert_eq!(m.row_range(3), (2, 4));
        assert!(m.allows(3, 2) && m.allows(3, 3));
        assert!(!m.allows(3, 1) && !m.allows(3, 4));
        assert!(Mask::windowed(5, 0).is_err());
    }

    #[test]
    fn wide_window_equals_causal() {
        let c = Mask::causal(7);
        let w = Mask::windowed(7, 7).unwrap();
        for m in 0..7 {
            assert_eq!(c.row_range(m), w.row_range(m));
        }
    }
}
