use crate::error::invalid_arg;
use crate::Result;

/// Dense row-major `(d0, d1, d2)` float64 array.
///
/// Sequence values use `(batch, channels, time)`; parameters reuse the same
/// container with their own shape (a linear weight is `(out, in, 1)`, a bias
/// or norm scale is `(1, channels, 1)`, a scalar is `(1, 1, 1)`).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self::filled(dims, 0.0)
    }

    pub fn filled(dims: [usize; 3], value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f64>) -> Result<Self> {
        if data.len() != dims[0] * dims[1] * dims[2] {
            return Err(invalid_arg!(
                "buffer of length {} does not fit shape {:?}",
                data.len(),
                dims
            ));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: [usize; 3], mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims[0] * dims[1] * dims[2]);
        for a in 0..dims[0] {
            for b in 0..dims[1] {
                for c in 0..dims[2] {
                    data.push(f(a, b, c));
                }
            }
        }
        Self { dims, data }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            dims: [1, 1, 1],
            data: vec![value],
        }
    }

    #[inline]
    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn index(&self, a: usize, b: usize, c: usize) -> usize {
        debug_assert!(a < self.dims[0] && b < self.dims[1] && c < self.dims[2]);
        (a * self.dims[1] + b) * self.dims[2] + c
    }

    #[inline]
    pub fn get(&self, a: usize, b: usize, c: usize) -> f64 {
        self.data[self.index(a, b, c)]
    }

    #[inline]
    pub fn set(&mut self, a: usize, b: usize, c: usize, value: f64) {
        let i = self.index(a, b, c);
        self.data[i] = value;
    }

    /// Contiguous innermost row `[a, b, ..]`.
    #[inline]
    pub fn row(&self, a: usize, b: usize) -> &[f64] {
        let start = (a * self.dims[1] + b) * self.dims[2];
        &self.data[start..start + self.dims[2]]
    }

    #[inline]
    pub fn row_mut(&mut self, a: usize, b: usize) -> &mut [f64] {
        let start = (a * self.dims[1] + b) * self.dims[2];
        &mut self.data[start..start + self.dims[2]]
    }

    /// The single value of a `(1, 1, 1)` tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn add_assign(&mut self, other: &Tensor3) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.data {
            *v *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, dims: [usize; 3]) -> Result<Self> {
        Self::from_vec(dims, self.data)
    }
}

/// Per-sequence validity of time steps.
///
/// Stored as valid lengths, which makes the "valid steps precede padded
/// steps" property hold by construction.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    lengths: Vec<usize>,
    time: usize,
}

impl Mask {
    pub fn new(lengths: Vec<usize>, time: usize) -> Result<Self> {
        if let Some(&bad) = lengths.iter().find(|&&l| l > time) {
            return Err(invalid_arg!("valid length {bad} exceeds time dim {time}"));
        }
        Ok(Self { lengths, time })
    }

    pub fn full(batch: usize, time: usize) -> Self {
        Self {
            lengths: vec![time; batch],
            time,
        }
    }

    /// Builds a mask from a boolean `(B, T)` array; rejects non-monotone rows.
    pub fn from_bools(rows: &[Vec<bool>]) -> Result<Self> {
        let time = rows.first().map_or(0, Vec::len);
        let mut lengths = Vec::with_capacity(rows.len());
        for row in rows {
            if row.len() != time {
                return Err(invalid_arg!("ragged mask rows"));
            }
            let len = row.iter().take_while(|&&v| v).count();
            if row[len..].iter().any(|&v| v) {
                return Err(invalid_arg!("mask is not monotone"));
            }
            lengths.push(len);
        }
        Ok(Self { lengths, time })
    }

    pub fn to_bools(&self) -> Vec<Vec<bool>> {
        self.lengths
            .iter()
            .map(|&l| (0..self.time).map(|t| t < l).collect())
            .collect()
    }

    #[inline]
    pub fn batch(&self) -> usize {
        self.lengths.len()
    }

    #[inline]
    pub fn time(&self) -> usize {
        self.time
    }

    #[inline]
    pub fn lengths(&self) -> &[usize] {
        &self.lengths
    }

    #[inline]
    pub fn len_of(&self, b: usize) -> usize {
        self.lengths[b]
    }

    #[inline]
    pub fn is_valid(&self, b: usize, t: usize) -> bool {
        t < self.lengths[b]
    }

    pub fn count_valid(&self) -> usize {
        self.lengths.iter().sum()
    }

    /// Mask of a strided window op (convolution or pooling), keyed on the
    /// window centre: output `j` is valid iff input `j*stride + kernel/2 -
    /// padding` is valid. For kernel 3, stride 2, padding 1 this gives
    /// `ceil(len / 2)` valid steps, the same count an unpadded sequence of
    /// that length would produce.
    pub fn downsample(&self, out_time: usize, kernel: usize, stride: usize, padding: usize) -> Mask {
        let half = kernel / 2;
        let lengths = self
            .lengths
            .iter()
            .map(|&len| {
                // j valid iff j*stride + half - padding < len
                if len + padding <= half {
                    0
                } else {
                    (len + padding - half).div_ceil(stride).min(out_time)
                }
            })
            .collect();
        Mask {
            lengths,
            time: out_time,
        }
    }

    /// Zeroes every padded time step of a `(B, C, T)` tensor.
    pub fn apply(&self, t: &mut Tensor3) {
        let [b, c, time] = t.dims();
        debug_assert_eq!(b, self.batch());
        debug_assert_eq!(time, self.time);
        for bi in 0..b {
            let len = self.lengths[bi];
            if len == time {
                continue;
            }
            for ci in 0..c {
                t.row_mut(bi, ci)[len..].fill(0.0);
            }
        }
    }
}

/// A batched sequence value: `(B, C, T)` data, validity mask and optional
/// gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct SeqTensor {
    pub data: Tensor3,
    pub mask: Mask,
    pub grad: Option<Tensor3>,
    pub requires_grad: bool,
}

impl SeqTensor {
    /// Wraps data and mask; padded positions are zeroed.
    pub fn new(mut data: Tensor3, mask: Mask) -> Result<Self> {
        let [b, _, t] = data.dims();
        if mask.batch() != b || mask.time() != t {
            return Err(invalid_arg!(
                "mask ({}, {}) does not match data {:?}",
                mask.batch(),
                mask.time(),
                data.dims()
            ));
        }
        mask.apply(&mut data);
        Ok(Self {
            data,
            mask,
            grad: None,
            requires_grad: false,
        })
    }

    /// Fully valid sequence.
    pub fn dense(data: Tensor3) -> Self {
        let [b, _, t] = data.dims();
        Self {
            data,
            mask: Mask::full(b, t),
            grad: None,
            requires_grad: false,
        }
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn batch(&self) -> usize {
        self.data.dims()[0]
    }

    pub fn channels(&self) -> usize {
        self.data.dims()[1]
    }

    pub fn time(&self) -> usize {
        self.data.dims()[2]
    }
}
