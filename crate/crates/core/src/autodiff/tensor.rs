use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Arithmetic precision of a graph.
///
/// Values are always carried in `f64`; in single precision every op output
/// (and every accumulated gradient) is rounded through `f32`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    Single,
    Double,
}

impl Precision {
    #[inline]
    pub fn round(self, v: f64) -> f64 {
        match self {
            Precision::Single => v as f32 as f64,
            Precision::Double => v,
        }
    }
}

/// Dense row-major array, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim("tensor", format!("zero extent in shape {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(&[n, n], |i| if i / n == i % n { 1.0 } else { 0.0 })
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Last-axis extent.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has rank >= 1")
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn at(&self, index: &[usize]) -> f64 {
        self.data[flat_index(&self.shape, index)]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn round_to(&mut self, precision: Precision) {
        if precision == Precision::Single {
            for v in &mut self.data {
                *v = precision.round(*v);
            }
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

pub(crate) fn flat_index(shape: &[usize], index: &[usize]) -> usize {
    assert_eq!(shape.len(), index.len(), "index rank mismatch");
    let mut flat = 0;
    for (&i, &e) in index.iter().zip(shape) {
        assert!(i < e, "index {index:?} out of bounds for {shape:?}");
        flat = flat * e + i;
    }
    flat
}

/// Boolean validity mask; `true` marks a valid (unpadded) position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "mask",
                format!("shape {shape:?} needs {n} flags, got {}", data.len()),
            ));
        }
        Ok(Mask {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn all_valid(shape: &[usize]) -> Self {
        Mask {
            shape: shape.to_vec(),
            data: vec![true; shape.iter().product()],
        }
    }

    /// `[batch × max_len]` mask from per-sample valid lengths.
    pub fn from_lengths(lengths: &[usize], max_len: usize) -> Self {
        let mut data = Vec::with_capacity(lengths.len() * max_len);
        for &len in lengths {
            data.extend((0..max_len).map(|t| t < len));
        }
        Mask {
            shape: vec![lengths.len(), max_len],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    /// Number of valid positions in each row of a `[batch × len]` mask.
    pub fn lengths(&self) -> Vec<usize> {
        let cols = *self.shape.last().unwrap();
        self.data
            .chunks(cols)
            .map(|row| row.iter().filter(|&&v| v).count())
            .collect()
    }

    /// Index of the last valid position in each row of a `[batch × len]` mask.
    pub fn last_valid(&self) -> Result<Vec<usize>> {
        let cols = *self.shape.last().unwrap();
        self.data
            .chunks(cols)
            .enumerate()
            .map(|(row, flags)| {
                flags
                    .iter()
                    .rposition(|&v| v)
                    .ok_or_else(|| Error::Data(format!("sequence {row} has no valid position")))
            })
            .collect()
    }

    /// Expand a `[batch × len_k]` key mask to attention-score shape
    /// `[batch × heads × len_q × len_k]`.
    pub fn expand_keys(&self, heads: usize, len_q: usize) -> Mask {
        let (b, lk) = (self.shape[0], self.shape[1]);
        let mut data = Vec::with_capacity(b * heads * len_q * lk);
        for row in self.data.chunks(lk) {
            for _ in 0..heads * len_q {
                data.extend_from_slice(row);
            }
        }
        Mask {
            shape: vec![b, heads, len_q, lk],
            data,
        }
    }

    /// Mask as 0/1 floats, shaped `[batch × len × 1]` for broadcasting over features.
    pub fn as_column_tensor(&self) -> Tensor {
        let mut shape = self.shape.clone();
        shape.push(1);
        Tensor {
            shape,
            data: self.data.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect(),
        }
    }
}
