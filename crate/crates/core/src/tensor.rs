//! Dense rank-4 tensors in `(N, C, H, W)` layout and the per-channel
//! reductions the normalization layers are built from.
//!
//! Every reduction goes through [`exact_sum`], which returns the correctly
//! rounded sum of its inputs. The result therefore does not depend on the
//! order in which samples are visited, so permuting a batch permutes the
//! normalized output bit for bit.

use crate::error::{Error, Result};

/// Extents of a [`Tensor4`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dims4 {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims4 {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Self { n, c, h, w }
    }

    /// Number of elements, `N·C·H·W`.
    pub const fn len(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `H·W`.
    pub const fn spatial(&self) -> usize {
        self.h * self.w
    }

    /// Same channel/spatial extents with a different batch size.
    pub const fn with_batch(&self, n: usize) -> Self {
        Self { n, ..*self }
    }
}

impl std::fmt::Display for Dims4 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Correctly rounded floating-point sum (Shewchuk's exact partials with a
/// final half-even correction).
///
/// The result is a function of the multiset of inputs only.
pub fn exact_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut partials: Vec<f64> = Vec::with_capacity(8);
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }

    let Some(mut n) = partials.len().checked_sub(1) else {
        return 0.0;
    };
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let y_rounded = hi - x;
        lo = y - y_rounded;
        if lo != 0.0 {
            break;
        }
    }
    // Round half to even when the remaining partials push past a tie.
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Rank-4 tensor of `f64` stored contiguously in row-major `(N, C, H, W)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    dims: Dims4,
    data: Vec<f64>,
}

impl Tensor4 {
    pub fn zeros(dims: Dims4) -> Self {
        Self {
            dims,
            data: vec![0.0; dims.len()],
        }
    }

    pub fn full(dims: Dims4, value: f64) -> Self {
        Self {
            dims,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_vec(dims: Dims4, data: Vec<f64>) -> Result<Self> {
        if data.len() != dims.len() {
            return Err(Error::Shape(format!(
                "{} elements supplied for dims {dims} (expected {})",
                data.len(),
                dims.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn from_fn(dims: Dims4, mut f: impl FnMut(usize, usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(dims.len());
        for n in 0..dims.n {
            for c in 0..dims.c {
                for h in 0..dims.h {
                    for w in 0..dims.w {
                        data.push(f(n, c, h, w));
                    }
                }
            }
        }
        Self { dims, data }
    }

    pub fn dims(&self) -> Dims4 {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn offset(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        ((n * self.dims.c + c) * self.dims.h + h) * self.dims.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.offset(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.offset(n, c, h, w);
        self.data[i] = value;
    }

    /// The `H·W` plane of sample `n`, channel `c`.
    #[inline]
    pub fn plane(&self, n: usize, c: usize) -> &[f64] {
        let hw = self.dims.spatial();
        let start = (n * self.dims.c + c) * hw;
        &self.data[start..start + hw]
    }

    #[inline]
    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [f64] {
        let hw = self.dims.spatial();
        let start = (n * self.dims.c + c) * hw;
        &mut self.data[start..start + hw]
    }

    /// All `C·H·W` values of sample `n`.
    pub fn sample_data(&self, n: usize) -> &[f64] {
        let chw = self.dims.c * self.dims.spatial();
        &self.data[n * chw..(n + 1) * chw]
    }

    /// Gathers the listed samples, in the given order, into a new tensor.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let mut data = Vec::with_capacity(indices.len() * self.dims.c * self.dims.spatial());
        for &n in indices {
            if n >= self.dims.n {
                return Err(Error::Index {
                    index: n,
                    len: self.dims.n,
                });
            }
            data.extend_from_slice(self.sample_data(n));
        }
        Ok(Self {
            dims: self.dims.with_batch(indices.len()),
            data,
        })
    }

    /// Concatenates tensors along the batch axis.
    pub fn concat(parts: &[Tensor4]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let mut n = 0;
        let mut data = Vec::new();
        for part in parts {
            let d = part.dims;
            if (d.c, d.h, d.w) != (first.dims.c, first.dims.h, first.dims.w) {
                return Err(Error::Shape(format!(
                    "cannot concatenate {d} with {}",
                    first.dims
                )));
            }
            n += d.n;
            data.extend_from_slice(&part.data);
        }
        Ok(Self {
            dims: first.dims.with_batch(n),
            data,
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            dims: self.dims,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|v| v * k)
    }

    fn check_subset(&self, subset: &[usize]) -> Result<()> {
        if subset.is_empty() {
            return Err(Error::DegenerateSubset("empty sample subset".into()));
        }
        if self.dims.spatial() == 0 {
            return Err(Error::DegenerateSubset("zero spatial extent".into()));
        }
        let mut seen = vec![false; self.dims.n];
        for &n in subset {
            if n >= self.dims.n {
                return Err(Error::Index {
                    index: n,
                    len: self.dims.n,
                });
            }
            if std::mem::replace(&mut seen[n], true) {
                return Err(Error::DegenerateSubset(format!(
                    "sample {n} listed twice"
                )));
            }
        }
        Ok(())
    }

    /// Per-channel mean over `subset × H × W`.
    pub fn channel_mean(&self, subset: &[usize]) -> Result<Vec<f64>> {
        self.check_subset(subset)?;
        let count = (subset.len() * self.dims.spatial()) as f64;
        Ok((0..self.dims.c)
            .map(|c| {
                exact_sum(subset.iter().flat_map(|&n| self.plane(n, c).iter().copied())) / count
            })
            .collect())
    }

    /// Per-channel biased variance over `subset × H × W`, computed in two
    /// passes around the supplied `mean`.
    pub fn channel_var(&self, subset: &[usize], mean: &[f64]) -> Result<Vec<f64>> {
        self.check_subset(subset)?;
        if mean.len() != self.dims.c {
            return Err(Error::Shape(format!(
                "mean has {} entries for {} channels",
                mean.len(),
                self.dims.c
            )));
        }
        let count = (subset.len() * self.dims.spatial()) as f64;
        Ok((0..self.dims.c)
            .map(|c| {
                let mu = mean[c];
                exact_sum(subset.iter().flat_map(|&n| {
                    self.plane(n, c).iter().map(move |&v| (v - mu) * (v - mu))
                })) / count
            })
            .collect())
    }

    /// Mean over the spatial axes, giving an `N × C` matrix.
    pub fn global_avg_pool(&self) -> Result<Matrix> {
        let hw = self.dims.spatial();
        if hw == 0 {
            return Err(Error::DegenerateSubset("zero spatial extent".into()));
        }
        let mut out = Matrix::zeros(self.dims.n, self.dims.c);
        for n in 0..self.dims.n {
            for c in 0..self.dims.c {
                out.set(n, c, exact_sum(self.plane(n, c).iter().copied()) / hw as f64);
            }
        }
        Ok(out)
    }
}

/// Row-major dense matrix, used for embeddings, logits and classifier weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} elements supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged rows".into()));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Reinterprets an `N × C` matrix as an `(N, C, 1, 1)` tensor.
    pub fn into_tensor(self) -> Tensor4 {
        Tensor4 {
            dims: Dims4::new(self.rows, self.cols, 1, 1),
            data: self.data,
        }
    }

    /// `self · otherᵀ`.
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "inner dimensions differ: {} vs {}",
                self.cols, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                let b = other.row(j);
                out.data[i * other.rows + j] = a.iter().zip(b).map(|(x, y)| x * y).sum();
            }
        }
        Ok(out)
    }
}

impl From<Tensor4> for Matrix {
    /// Flattens each sample to one row of `C·H·W` values.
    fn from(t: Tensor4) -> Self {
        let cols = t.dims.c * t.dims.spatial();
        Matrix {
            rows: t.dims.n,
            cols,
            data: t.data,
        }
    }
}
