//! Dense K-order arrays, factor sets and the multilinear composition map.
//!
//! # Layout
//!
//! Cell `(i_1, ..., i_K)` (0-based) lives at linear position
//! `i_1 + m_1 * (i_2 + m_2 * (i_3 + ...))`, i.e. the first index varies
//! fastest. For `K = 2` this is the column-major layout `nalgebra` uses.
//!
//! The mode-`k` fiber matrix has one column per combination of the
//! remaining indices, enumerated cyclically as
//! `(i_{k+1}, ..., i_K, i_1, ..., i_{k-1})` with the first listed index
//! varying fastest. Every kernel that pairs fibers with rows of the other
//! factors (see [`khatri_rao`]) uses this same order.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Modes other than `mode`, in canonical fiber order.
pub fn other_modes(order: usize, mode: usize) -> impl Iterator<Item = usize> {
    (mode + 1..order).chain(0..mode)
}

/// Calls `f(linear, index)` for every cell in linear order.
pub(crate) fn for_each_index(dims: &[usize], mut f: impl FnMut(usize, &[usize])) {
    let total: usize = dims.iter().product();
    let mut idx = vec![0usize; dims.len()];
    for lin in 0..total {
        f(lin, &idx);
        for (d, i) in dims.iter().zip(idx.iter_mut()) {
            *i += 1;
            if *i < *d {
                break;
            }
            *i = 0;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiwayArray {
    dims: Vec<usize>,
    data: Vec<f64>,
    /// `Some(observed)` when at least one cell is masked.
    observed: Option<Vec<bool>>,
}

impl MultiwayArray {
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let n: usize = dims.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!(
                "dims {:?} need {} cells, got {}",
                dims,
                n,
                data.len()
            )));
        }
        Ok(MultiwayArray {
            dims,
            data,
            observed: None,
        })
    }

    pub fn zeros(dims: Vec<usize>) -> Result<Self> {
        let n = dims.iter().product();
        Self::new(dims, vec![0.0; n])
    }

    pub fn from_fn(dims: Vec<usize>, mut f: impl FnMut(&[usize]) -> f64) -> Result<Self> {
        check_dims(&dims)?;
        let mut data = Vec::with_capacity(dims.iter().product());
        for_each_index(&dims, |_, idx| data.push(f(idx)));
        Self::new(dims, data)
    }

    /// Marks the given linear cell indices as unobserved.
    pub fn with_mask(mut self, masked: impl IntoIterator<Item = usize>) -> Result<Self> {
        for lin in masked {
            self.mask_cell(lin)?;
        }
        Ok(self)
    }

    pub fn mask_cell(&mut self, lin: usize) -> Result<()> {
        let n = self.data.len();
        if lin >= n {
            return Err(Error::Shape(format!("cell {lin} out of range for {n} cells")));
        }
        self.observed.get_or_insert_with(|| vec![true; n])[lin] = false;
        Ok(())
    }

    /// Drops the mask; masked cells keep whatever value they hold.
    pub fn without_mask(mut self) -> Self {
        self.observed = None;
        self
    }

    pub fn copy_mask_from(&mut self, other: &MultiwayArray) -> Result<()> {
        if other.dims != self.dims {
            return Err(Error::Shape(format!(
                "mask dims {:?} vs array dims {:?}",
                other.dims, self.dims
            )));
        }
        self.observed = other.observed.clone();
        Ok(())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn is_masked(&self) -> bool {
        self.observed.is_some()
    }

    #[inline]
    pub fn is_observed(&self, lin: usize) -> bool {
        self.observed.as_ref().is_none_or(|o| o[lin])
    }

    pub fn masked_indices(&self) -> Vec<usize> {
        match &self.observed {
            None => Vec::new(),
            Some(o) => o
                .iter()
                .enumerate()
                .filter_map(|(i, &seen)| (!seen).then_some(i))
                .collect(),
        }
    }

    pub fn n_observed(&self) -> usize {
        match &self.observed {
            None => self.data.len(),
            Some(o) => o.iter().filter(|&&b| b).count(),
        }
    }

    pub fn linear_index(&self, idx: &[usize]) -> Result<usize> {
        if idx.len() != self.dims.len() {
            return Err(Error::Shape(format!(
                "index of length {} for array of order {}",
                idx.len(),
                self.dims.len()
            )));
        }
        let mut lin = 0;
        for (k, (&i, &m)) in idx.iter().zip(&self.dims).enumerate().rev() {
            if i >= m {
                return Err(Error::Shape(format!("index {i} out of range {m} in mode {k}")));
            }
            lin = lin * m + i;
        }
        Ok(lin)
    }

    pub fn multi_index(&self, mut lin: usize) -> Vec<usize> {
        self.dims
            .iter()
            .map(|&m| {
                let i = lin % m;
                lin /= m;
                i
            })
            .collect()
    }

    pub fn get(&self, idx: &[usize]) -> Result<f64> {
        Ok(self.data[self.linear_index(idx)?])
    }

    pub fn set(&mut self, idx: &[usize], value: f64) -> Result<()> {
        let lin = self.linear_index(idx)?;
        self.data[lin] = value;
        Ok(())
    }

    /// Sum of squares over observed cells.
    pub fn sq_norm(&self) -> f64 {
        self.data
            .iter()
            .enumerate()
            .filter(|(i, _)| self.is_observed(*i))
            .map(|(_, v)| v * v)
            .sum()
    }

    /// `sum (self - other)^2` over the cells observed in `self`.
    pub fn sq_dist(&self, other: &MultiwayArray) -> Result<f64> {
        if self.dims != other.dims {
            return Err(Error::Shape(format!(
                "dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .enumerate()
            .filter(|(i, _)| self.is_observed(*i))
            .map(|(_, (a, b))| (a - b) * (a - b))
            .sum())
    }

    /// Mode-`mode` fiber matrix (`m_k x prod_{j != k} m_j`), 0-based mode.
    ///
    /// Masked cells are copied as stored; callers that care consult the mask.
    pub fn fibers(&self, mode: usize) -> Result<DMatrix<f64>> {
        self.check_mode(mode)?;
        let m = self.dims[mode];
        // Cell a + A (i + m b), with a over the earlier modes and b over the
        // later ones, sits in fiber column b + B a.
        let inner: usize = self.dims[..mode].iter().product();
        let outer: usize = self.dims[mode + 1..].iter().product();
        let mut out = DMatrix::zeros(m, inner * outer);
        for b in 0..outer {
            for i in 0..m {
                let base = inner * (i + m * b);
                for a in 0..inner {
                    out[(i, b + outer * a)] = self.data[base + a];
                }
            }
        }
        Ok(out)
    }

    /// Inverse of [`MultiwayArray::fibers`].
    pub fn from_fibers(dims: Vec<usize>, mode: usize, fibers: &DMatrix<f64>) -> Result<Self> {
        check_dims(&dims)?;
        if mode >= dims.len() {
            return Err(Error::InvalidMode {
                mode,
                order: dims.len(),
            });
        }
        let n: usize = dims.iter().product();
        if fibers.nrows() != dims[mode] || fibers.nrows() * fibers.ncols() != n {
            return Err(Error::Shape(format!(
                "{}x{} fiber matrix for dims {:?} mode {}",
                fibers.nrows(),
                fibers.ncols(),
                dims,
                mode
            )));
        }
        let mut data = vec![0.0; n];
        for_each_index(&dims, |lin, idx| {
            data[lin] = fibers[(idx[mode], fiber_column(&dims, mode, idx))];
        });
        Self::new(dims, data)
    }

    pub(crate) fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.order() {
            Err(Error::InvalidMode {
                mode,
                order: self.order(),
            })
        } else {
            Ok(())
        }
    }
}

/// Column of cell `idx` in the canonical mode-`mode` fiber matrix.
pub fn fiber_column(dims: &[usize], mode: usize, idx: &[usize]) -> usize {
    let mut col = 0;
    let mut stride = 1;
    for j in other_modes(dims.len(), mode) {
        col += idx[j] * stride;
        stride *= dims[j];
    }
    col
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::Shape(format!(
            "arrays need at least 2 modes, got {}",
            dims.len()
        )));
    }
    if dims.contains(&0) {
        return Err(Error::Shape(format!("zero-length mode in {dims:?}")));
    }
    Ok(())
}

/// K factor matrices `U^(k)` (`m_k x R`) sharing a common rank `R`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorSet {
    factors: Vec<DMatrix<f64>>,
}

impl FactorSet {
    pub fn new(factors: Vec<DMatrix<f64>>) -> Result<Self> {
        if factors.len() < 2 {
            return Err(Error::Shape(format!(
                "need at least 2 factor matrices, got {}",
                factors.len()
            )));
        }
        let rank = factors[0].ncols();
        if rank == 0 {
            return Err(Error::Shape("rank must be at least 1".into()));
        }
        for (k, f) in factors.iter().enumerate() {
            if f.ncols() != rank {
                return Err(Error::Shape(format!(
                    "factor {} has {} columns, expected {}",
                    k,
                    f.ncols(),
                    rank
                )));
            }
            if f.nrows() == 0 {
                return Err(Error::Shape(format!("factor {k} has no rows")));
            }
        }
        Ok(FactorSet { factors })
    }

    /// Checks the row counts against a declared dims vector.
    pub fn with_dims(factors: Vec<DMatrix<f64>>, dims: &[usize]) -> Result<Self> {
        let f = Self::new(factors)?;
        if f.dims() != dims {
            return Err(Error::Shape(format!(
                "factor rows {:?} vs dims {:?}",
                f.dims(),
                dims
            )));
        }
        Ok(f)
    }

    pub fn from_fn(dims: &[usize], rank: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(
            dims.iter()
                .enumerate()
                .map(|(k, &m)| DMatrix::from_fn(m, rank, |i, r| f(k, i, r)))
                .collect(),
        )
    }

    pub fn rank(&self) -> usize {
        self.factors[0].ncols()
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn factor(&self, k: usize) -> &DMatrix<f64> {
        &self.factors[k]
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    pub fn into_factors(self) -> Vec<DMatrix<f64>> {
        self.factors
    }

    /// Replaces factor `k`; the new matrix must keep its shape.
    pub fn set_factor(&mut self, k: usize, value: DMatrix<f64>) -> Result<()> {
        let old = &self.factors[k];
        if value.shape() != old.shape() {
            return Err(Error::Shape(format!(
                "factor {} is {:?}, replacement is {:?}",
                k,
                old.shape(),
                value.shape()
            )));
        }
        self.factors[k] = value;
        Ok(())
    }

    /// `theta[i_1..i_K] = sum_r prod_k U^(k)[i_k, r]`, computed as the
    /// mode-0 fiber matrix `U^(1) Z^T`, whose column-major storage is the
    /// linear order.
    pub fn compose(&self) -> MultiwayArray {
        let z = khatri_rao(self, 0).expect("mode 0 exists");
        let theta = &self.factors[0] * z.transpose();
        MultiwayArray::new(self.dims(), theta.as_slice().to_vec()).expect("factor dims are valid array dims")
    }

    /// Scales column `r` of factor `k` by `c`.
    pub fn scale_column(&mut self, k: usize, r: usize, c: f64) {
        self.factors[k].column_mut(r).scale_mut(c);
    }
}

/// Elementwise (Hadamard) product.
pub fn hadamard(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "hadamard of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.component_mul(b))
}

/// Row `c` is the Hadamard product of the rows of every factor except
/// `skip`, for the `c`-th index combination in canonical fiber order.
pub fn khatri_rao(f: &FactorSet, skip: usize) -> Result<DMatrix<f64>> {
    let order = f.order();
    if skip >= order {
        return Err(Error::InvalidMode { mode: skip, order });
    }
    let rank = f.rank();
    let rows: usize = other_modes(order, skip).map(|j| f.factor(j).nrows()).product();
    let mut z = DMatrix::zeros(rows, rank);
    let mut col = Vec::with_capacity(rows);
    let mut next = Vec::with_capacity(rows);
    for r in 0..rank {
        // Column r is a Kronecker product built up from the fastest mode.
        col.clear();
        col.push(1.0);
        for j in other_modes(order, skip) {
            let u = f.factor(j).column(r);
            next.clear();
            for &x in u.iter() {
                next.extend(col.iter().map(|c| c * x));
            }
            std::mem::swap(&mut col, &mut next);
        }
        z.column_mut(r).copy_from_slice(&col);
    }
    Ok(z)
}
