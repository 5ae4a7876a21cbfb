use crate::error::{Error, Result};

/// Dense row-major matrix of `f64`. Vectors are `n x 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct NumArray {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl NumArray {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        NumArray {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        NumArray {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(
                "from_vec",
                format!("{} values for a {rows}x{cols} array", data.len()),
            ));
        }
        Ok(NumArray { rows, cols, data })
    }

    pub fn scalar(v: f64) -> Self {
        NumArray {
            rows: 1,
            cols: 1,
            data: vec![v],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// The single value of a 1x1 array.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> NumArray {
        NumArray {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: f64, other: &NumArray) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `self · otherᵀ`: (n x k) times (m x k)ᵀ gives n x m.
    pub fn matmul_t(&self, other: &NumArray) -> Result<NumArray> {
        if self.cols != other.cols {
            return Err(Error::shape(
                "matmul_t",
                format!("{:?} against {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m, k) = (self.rows, other.rows, self.cols);
        let mut out = NumArray::zeros(n, m);
        for i in 0..n {
            let a = self.row(i);
            let o = &mut out.data[i * m..(i + 1) * m];
            for (j, oj) in o.iter_mut().enumerate() {
                *oj = dot(a, &other.data[j * k..(j + 1) * k]);
            }
        }
        Ok(out)
    }

    /// `self · other`: (n x k) times (k x m) gives n x m.
    pub fn matmul(&self, other: &NumArray) -> Result<NumArray> {
        if self.cols != other.rows {
            return Err(Error::shape(
                "matmul",
                format!("{:?} against {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m) = (self.rows, other.cols);
        let mut out = NumArray::zeros(n, m);
        for i in 0..n {
            let o = &mut out.data[i * m..(i + 1) * m];
            for (p, &a) in self.row(i).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, other.row(p), o);
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`: (k x n)ᵀ times (k x m) gives n x m.
    pub fn t_matmul(&self, other: &NumArray) -> Result<NumArray> {
        if self.rows != other.rows {
            return Err(Error::shape(
                "t_matmul",
                format!("{:?} against {:?}", self.shape(), other.shape()),
            ));
        }
        let (n, m) = (self.cols, other.cols);
        let mut out = NumArray::zeros(n, m);
        for p in 0..self.rows {
            let b = other.row(p);
            for (i, &a) in self.row(p).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                axpy(a, b, &mut out.data[i * m..(i + 1) * m]);
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> NumArray {
        let mut out = NumArray::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}
