use crate::error::{Error, Result};

/// Dense row-major array of `f64` with an optional gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f64>) -> Result<Self> {
        let shape = shape.into();
        if shape.contains(&0) {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "tensor",
                shape,
                reason: format!("{} elements supplied", data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f64) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_fn(shape: impl Into<Vec<usize>>, mut f: impl FnMut(usize) -> f64) -> Self {
        let shape = shape.into();
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: (0..numel).map(&mut f).collect(),
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.data.len() || shape.contains(&0) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape,
                right: shape,
            });
        }
        self.shape = shape;
        if let Some(g) = &self.grad {
            debug_assert_eq!(g.len(), self.data.len());
        }
        Ok(self)
    }

    /// Element at a multi-index.
    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[self.offset(index)]
    }

    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.shape.len());
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &extent)| {
                debug_assert!(i < extent);
                acc * extent + i
            })
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Order-dependent 64-bit fingerprint of the raw bit patterns.
    pub fn checksum(&self) -> u64 {
        // FNV-1a over shape and payload bits.
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for &e in &self.shape {
            mix(e as u64);
        }
        for v in &self.data {
            mix(v.to_bits());
        }
        h
    }
}
