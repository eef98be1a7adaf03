//! Dense complex matrices over a generic real scalar.
//!
//! Provides the handful of factorizations the link needs: Hermitian
//! eigendecomposition (Householder tridiagonalization followed by implicit
//! QL), LU solves with partial pivoting, and thin QR.

use std::fmt::Debug;
use std::ops::{Index, IndexMut};

use num_complex::Complex;
use num_traits::{Float, FromPrimitive, One, Zero};
use thiserror::Error;

/// Real scalar the numeric kernels are written against.
pub trait Real: Float + FromPrimitive + Debug + Send + Sync + 'static {
    /// Relative tolerance used for structural checks (Hermitian symmetry,
    /// singular pivots).
    fn structural_tol() -> Self;

    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal fits scalar type")
    }
}

impl Real for f64 {
    fn structural_tol() -> Self {
        1e-9
    }
}

impl Real for f32 {
    fn structural_tol() -> Self {
        1e-4
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not Hermitian (max asymmetry {0:e})")]
    NotHermitian(f64),
    #[error("eigen iteration did not converge within {0} iterations")]
    NoConvergence(usize),
    #[error("singular system")]
    Singular,
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![Complex::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!("{} entries for {rows}x{cols}", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_diag(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = Complex::new(v, T::zero());
        }
        m
    }

    /// Column vector from a slice.
    pub fn column_vector(v: &[Complex<T>]) -> Self {
        Self { rows: v.len(), cols: 1, data: v.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn column(&self, c: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|r| self[(r, c)]).collect()
    }

    pub fn set_column(&mut self, c: usize, v: &[Complex<T>]) {
        for (r, &x) in v.iter().enumerate() {
            self[(r, c)] = x;
        }
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)].conj())
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    pub fn matmul(&self, rhs: &Self) -> Result<Self, LinalgError> {
        if self.cols != rhs.rows {
            return Err(LinalgError::Shape(format!(
                "{}x{} * {}x{}",
                self.rows, self.cols, rhs.rows, rhs.cols
            )));
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for r in 0..self.rows {
            for k in 0..self.cols {
                let a = self.data[r * self.cols + k];
                if a.is_zero() {
                    continue;
                }
                let brow = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                let orow = &mut out.data[r * rhs.cols..(r + 1) * rhs.cols];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    /// Matrix-vector product.
    pub fn mul_vec(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        assert_eq!(v.len(), self.cols, "mul_vec dimension");
        (0..self.rows)
            .map(|r| {
                self.data[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .zip(v)
                    .fold(Complex::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect()
    }

    pub fn add(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a + b).collect(),
        }
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(&a, &b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    pub fn scale_real(&self, s: T) -> Self {
        self.scale(Complex::new(s, T::zero()))
    }

    pub fn add_diag(&self, s: T) -> Self {
        let mut out = self.clone();
        for i in 0..self.rows.min(self.cols) {
            out[(i, i)] = out[(i, i)] + Complex::new(s, T::zero());
        }
        out
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, z| acc + z.norm_sqr()).sqrt()
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, z| acc.max(z.norm()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    /// Largest deviation from Hermitian symmetry.
    pub fn hermitian_defect(&self) -> T {
        let mut worst = T::zero();
        for r in 0..self.rows {
            for c in r..self.cols {
                worst = worst.max((self[(r, c)] - self[(c, r)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: T) -> bool {
        self.rows == self.cols && self.hermitian_defect() <= tol * T::one().max(self.max_abs())
    }

    fn require_square(&self) -> Result<usize, LinalgError> {
        if self.rows != self.cols {
            return Err(LinalgError::NotSquare { rows: self.rows, cols: self.cols });
        }
        Ok(self.rows)
    }

    /// Solves `self * X = B` by LU decomposition with partial pivoting.
    pub fn solve(&self, b: &Self) -> Result<Self, LinalgError> {
        let n = self.require_square()?;
        if b.rows != n {
            return Err(LinalgError::Shape(format!("rhs has {} rows, system is {n}", b.rows)));
        }
        let scale = self.max_abs();
        if scale.is_zero() {
            return Err(LinalgError::Singular);
        }
        let tiny = scale * T::epsilon() * T::lit(n as f64 * 16.0);
        let mut a = self.data.clone();
        let mut x = b.data.clone();
        let m = b.cols;
        for k in 0..n {
            let (piv, pmag) = (k..n)
                .map(|r| (r, a[r * n + k].norm()))
                .fold((k, T::neg_infinity()), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmag <= tiny {
                return Err(LinalgError::Singular);
            }
            if piv != k {
                for c in 0..n {
                    a.swap(k * n + c, piv * n + c);
                }
                for c in 0..m {
                    x.swap(k * m + c, piv * m + c);
                }
            }
            let inv = Complex::<T>::one() / a[k * n + k];
            for r in k + 1..n {
                let f = a[r * n + k] * inv;
                if f.is_zero() {
                    continue;
                }
                for c in k..n {
                    let v = a[k * n + c];
                    a[r * n + c] = a[r * n + c] - f * v;
                }
                for c in 0..m {
                    let v = x[k * m + c];
                    x[r * m + c] = x[r * m + c] - f * v;
                }
            }
        }
        for k in (0..n).rev() {
            let inv = Complex::<T>::one() / a[k * n + k];
            for c in 0..m {
                let mut acc = x[k * m + c];
                for j in k + 1..n {
                    acc = acc - a[k * n + j] * x[j * m + c];
                }
                x[k * m + c] = acc * inv;
            }
        }
        Ok(Self { rows: n, cols: m, data: x })
    }

    pub fn inverse(&self) -> Result<Self, LinalgError> {
        let n = self.require_square()?;
        self.solve(&Self::identity(n))
    }

    /// Thin QR by Householder reflections: `self = Q R` with `Q` of shape
    /// rows×cols (orthonormal columns) and `R` cols×cols upper triangular
    /// with a real non-negative diagonal.
    pub fn qr(&self) -> Result<(Self, Self), LinalgError> {
        let (m, n) = (self.rows, self.cols);
        if m < n {
            return Err(LinalgError::Shape(format!("thin QR needs rows >= cols, got {m}x{n}")));
        }
        let mut r = self.clone();
        let mut q = Self::identity(m);
        for k in 0..n {
            let x: Vec<Complex<T>> = (k..m).map(|i| r[(i, k)]).collect();
            if let Some((u, beta)) = householder(&x) {
                apply_reflector_left(&mut r, k, &u, beta);
                apply_reflector_right(&mut q, k, &u, beta);
            }
        }
        // Rotate each row of R so the diagonal is real non-negative.
        for k in 0..n {
            let d = r[(k, k)];
            let mag = d.norm();
            if mag > T::zero() {
                let ph = d / Complex::new(mag, T::zero());
                for c in 0..n {
                    r[(k, c)] = r[(k, c)] * ph.conj();
                }
                for i in 0..m {
                    q[(i, k)] = q[(i, k)] * ph;
                }
            }
        }
        let q_thin = Self::from_fn(m, n, |i, j| q[(i, j)]);
        let r_sq = Self::from_fn(n, n, |i, j| if i > j { Complex::zero() } else { r[(i, j)] });
        Ok((q_thin, r_sq))
    }
}

impl<T> Index<(usize, usize)> for CMatrix<T> {
    type Output = Complex<T>;
    fn index(&self, (r, c): (usize, usize)) -> &Complex<T> {
        &self.data[r * self.cols + c]
    }
}

impl<T> IndexMut<(usize, usize)> for CMatrix<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[r * self.cols + c]
    }
}

/// Householder vector `u` and factor `beta` with `(I - beta u u^H) x = alpha e1`.
fn householder<T: Real>(x: &[Complex<T>]) -> Option<(Vec<Complex<T>>, T)> {
    let norm = x.iter().fold(T::zero(), |a, z| a + z.norm_sqr()).sqrt();
    if norm.is_zero() {
        return None;
    }
    let x0 = x[0];
    let phase = if x0.norm() > T::zero() { x0 / Complex::new(x0.norm(), T::zero()) } else { Complex::one() };
    let mut u = x.to_vec();
    u[0] = u[0] + phase * Complex::new(norm, T::zero());
    let unorm2 = u.iter().fold(T::zero(), |a, z| a + z.norm_sqr());
    if unorm2.is_zero() {
        return None;
    }
    Some((u, T::lit(2.0) / unorm2))
}

/// Rows `k..` of `a` ← (I - beta u u^H) rows.
fn apply_reflector_left<T: Real>(a: &mut CMatrix<T>, k: usize, u: &[Complex<T>], beta: T) {
    for c in 0..a.cols {
        let mut dot: Complex<T> = Complex::zero();
        for (i, ui) in u.iter().enumerate() {
            dot = dot + ui.conj() * a[(k + i, c)];
        }
        let f = dot * Complex::new(beta, T::zero());
        for (i, ui) in u.iter().enumerate() {
            a[(k + i, c)] = a[(k + i, c)] - *ui * f;
        }
    }
}

/// Columns `k..` of `a` ← columns (I - beta u u^H).
fn apply_reflector_right<T: Real>(a: &mut CMatrix<T>, k: usize, u: &[Complex<T>], beta: T) {
    for r in 0..a.rows {
        let mut dot: Complex<T> = Complex::zero();
        for (i, ui) in u.iter().enumerate() {
            dot = dot + a[(r, k + i)] * *ui;
        }
        let f = dot * Complex::new(beta, T::zero());
        for (i, ui) in u.iter().enumerate() {
            a[(r, k + i)] = a[(r, k + i)] - f * ui.conj();
        }
    }
}

#[derive(Debug, Clone)]
pub struct EigenResult<T> {
    /// Non-increasing.
    pub eigenvalues: Vec<T>,
    /// Column `i` pairs with `eigenvalues[i]`.
    pub eigenvectors: CMatrix<T>,
}

/// Iteration cap per eigenvalue for the QL sweep.
pub const EIG_MAX_ITER: usize = 30;

/// Eigendecomposition of a Hermitian matrix.
///
/// Eigenvalues are sorted descending; each eigenvector is unit-norm and its
/// first entry with magnitude above 1e-12 is rotated onto the non-negative
/// real axis.
pub fn hermitian_eig<T: Real>(r: &CMatrix<T>) -> Result<EigenResult<T>, LinalgError> {
    let n = r.require_square()?;
    let defect = r.hermitian_defect();
    if defect > T::structural_tol() * T::one().max(r.max_abs()) {
        return Err(LinalgError::NotHermitian(defect.to_f64().unwrap_or(f64::NAN)));
    }
    if n == 0 {
        return Ok(EigenResult { eigenvalues: vec![], eigenvectors: CMatrix::zeros(0, 0) });
    }

    // Reduce to Hermitian tridiagonal form A = Q T Q^H.
    let mut a = r.clone();
    let mut q = CMatrix::identity(n);
    for k in 0..n.saturating_sub(2) {
        let x: Vec<Complex<T>> = (k + 1..n).map(|i| a[(i, k)]).collect();
        if let Some((u, beta)) = householder(&x) {
            apply_reflector_left(&mut a, k + 1, &u, beta);
            apply_reflector_right(&mut a, k + 1, &u, beta);
            apply_reflector_right(&mut q, k + 1, &u, beta);
        }
    }

    // Diagonal unitary making the off-diagonal real non-negative.
    let mut d = vec![T::zero(); n];
    let mut e = vec![T::zero(); n];
    let mut phase = vec![Complex::<T>::one(); n];
    for k in 0..n {
        d[k] = a[(k, k)].re;
        if k + 1 < n {
            let sub = a[(k + 1, k)];
            let mag = sub.norm();
            e[k] = mag;
            phase[k + 1] = if mag > T::zero() { phase[k] * sub / Complex::new(mag, T::zero()) } else { phase[k] };
        }
    }

    let mut z = vec![T::zero(); n * n];
    for i in 0..n {
        z[i * n + i] = T::one();
    }
    tridiagonal_ql(&mut d, &mut e, &mut z, n)?;

    // V = Q · diag(phase) · Z
    let mut qd = q;
    for r_ in 0..n {
        for c in 0..n {
            qd[(r_, c)] = qd[(r_, c)] * phase[c];
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| d[j].partial_cmp(&d[i]).unwrap_or(std::cmp::Ordering::Equal));

    let mut vecs = CMatrix::zeros(n, n);
    let mut vals = Vec::with_capacity(n);
    for (col, &src) in order.iter().enumerate() {
        vals.push(d[src]);
        let mut v: Vec<Complex<T>> = (0..n)
            .map(|i| (0..n).fold(Complex::zero(), |acc, k| acc + qd[(i, k)] * Complex::new(z[k * n + src], T::zero())))
            .collect();
        let norm = v.iter().fold(T::zero(), |a, x| a + x.norm_sqr()).sqrt();
        if norm > T::zero() {
            for x in v.iter_mut() {
                *x = *x / Complex::new(norm, T::zero());
            }
        }
        fix_phase(&mut v);
        vecs.set_column(col, &v);
    }
    Ok(EigenResult { eigenvalues: vals, eigenvectors: vecs })
}

/// Rotates `v` so its first entry with magnitude > 1e-12 is real and
/// non-negative. Applying it twice is a no-op.
pub fn fix_phase<T: Real>(v: &mut [Complex<T>]) {
    let thresh = T::lit(1e-12);
    if let Some(lead) = v.iter().find(|x| x.norm() > thresh).copied() {
        let rot = lead.conj() / Complex::new(lead.norm(), T::zero());
        for x in v.iter_mut() {
            *x = *x * rot;
        }
        if let Some(first) = v.iter_mut().find(|x| x.norm() > thresh) {
            first.im = T::zero();
        }
    }
}

/// Implicit QL with Wilkinson shifts on a real symmetric tridiagonal matrix
/// (`d` diagonal, `e[i]` couples `i` and `i+1`). Eigenvectors accumulate into
/// the row-major `z`.
fn tridiagonal_ql<T: Real>(d: &mut [T], e: &mut [T], z: &mut [T], n: usize) -> Result<(), LinalgError> {
    let two = T::lit(2.0);
    for l in 0..n {
        let mut iter = 0;
        loop {
            let mut m = l;
            while m + 1 < n {
                let dd = d[m].abs() + d[m + 1].abs();
                if e[m].abs() <= T::epsilon() * dd {
                    break;
                }
                m += 1;
            }
            if m == l {
                break;
            }
            iter += 1;
            if iter > EIG_MAX_ITER {
                return Err(LinalgError::NoConvergence(EIG_MAX_ITER));
            }
            let mut g = (d[l + 1] - d[l]) / (two * e[l]);
            let mut r = g.hypot(T::one());
            g = d[m] - d[l] + e[l] / (g + r.abs().copysign(g));
            let (mut s, mut c, mut p) = (T::one(), T::one(), T::zero());
            let mut i = m;
            let mut early = false;
            while i > l {
                i -= 1;
                let f = s * e[i];
                let b = c * e[i];
                r = f.hypot(g);
                e[i + 1] = r;
                if r.is_zero() {
                    d[i + 1] = d[i + 1] - p;
                    e[m] = T::zero();
                    early = true;
                    break;
                }
                s = f / r;
                c = g / r;
                g = d[i + 1] - p;
                r = (d[i] - g) * s + two * c * b;
                p = s * r;
                d[i + 1] = g + p;
                g = c * r - b;
                for k in 0..n {
                    let zk1 = z[k * n + i + 1];
                    let zk = z[k * n + i];
                    z[k * n + i + 1] = s * zk + c * zk1;
                    z[k * n + i] = c * zk - s * zk1;
                }
            }
            if early {
                continue;
            }
            d[l] = d[l] - p;
            e[l] = g;
            e[m] = T::zero();
        }
    }
    Ok(())
}

/// Solves `(A + sigma2 I) X = B` for Hermitian positive-semidefinite `A`.
pub fn solve_hermitian_plus_diag<T: Real>(
    a: &CMatrix<T>,
    sigma2: T,
    b: &CMatrix<T>,
) -> Result<CMatrix<T>, LinalgError> {
    a.require_square()?;
    if !a.is_hermitian(T::structural_tol()) {
        return Err(LinalgError::NotHermitian(a.hermitian_defect().to_f64().unwrap_or(f64::NAN)));
    }
    if sigma2 < T::zero() {
        return Err(LinalgError::Shape("negative diagonal loading".into()));
    }
    a.add_diag(sigma2).solve(b)
}
