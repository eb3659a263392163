//! Small dense symmetric-matrix helpers and deterministic RNG streams.
//!
//! Everything here operates on matrices of edge length at most a few rows
//! (overlap and covariance matrices are P x P with P the total rank of the
//! weight stack), so we favor clarity and exactness over scalability and
//! delegate the heavy lifting to `nalgebra`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

/// Eigenvalues in `[-PSD_CLIP_EPS, 0)` are treated as zero when taking
/// matrix square roots; anything below that is a genuine PSD violation.
pub const PSD_CLIP_EPS: f64 = 1e-8;

/// A square matrix guaranteed symmetric by construction.
///
/// Used for overlap matrices `Q`, channel covariances `V` and Onsager terms,
/// where symmetry is an invariant rather than a coincidence.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Wraps a matrix, symmetrizing it as `(A + A^T) / 2`.
    pub fn from_matrix(a: &DMatrix<f64>) -> Self {
        symmetrize(a)
    }

    /// Builds from an exactly symmetric closure `f(i, j)`.
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        SymMatrix(m)
    }

    pub fn zeros(n: usize) -> Self {
        SymMatrix(DMatrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        SymMatrix(DMatrix::identity(n, n))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        SymMatrix(DMatrix::from_diagonal(&DVector::from_row_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    /// Read-only view of the underlying matrix.
    pub fn m(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    /// Sets `(i, j)` and `(j, i)` together, preserving symmetry.
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.0[(i, j)] = v;
        self.0[(j, i)] = v;
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn eigenvalues(&self) -> Vec<f64> {
        self.0.clone().symmetric_eigen().eigenvalues.iter().copied().collect()
    }

    /// Symmetric PSD square root via eigendecomposition.
    ///
    /// Eigenvalues in `[-eps, 0)` are clipped to zero; an eigenvalue below
    /// `-eps` returns [`Error::NotPsd`]. The result `B` is symmetric and
    /// satisfies `B * B = A` up to the clip.
    pub fn sqrt_psd_with_eps(&self, eps: f64) -> Result<SymMatrix> {
        if self.0.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { context: "sqrt_psd input" });
        }
        let eig = self.0.clone().symmetric_eigen();
        let mut vals = eig.eigenvalues.clone();
        for v in vals.iter_mut() {
            if *v < -eps {
                return Err(Error::NotPsd { min_eig: *v });
            }
            *v = v.max(0.0).sqrt();
        }
        let u = &eig.eigenvectors;
        let b = u * DMatrix::from_diagonal(&vals) * u.transpose();
        Ok(symmetrize(&b))
    }

    /// [`Self::sqrt_psd_with_eps`] with the default clip [`PSD_CLIP_EPS`].
    pub fn sqrt_psd(&self) -> Result<SymMatrix> {
        self.sqrt_psd_with_eps(PSD_CLIP_EPS)
    }

    /// Inverse through LU; errors if the matrix is singular.
    pub fn try_inverse(&self) -> Result<SymMatrix> {
        self.0
            .clone()
            .try_inverse()
            .map(|inv| symmetrize(&inv))
            .ok_or_else(|| Error::Domain("singular symmetric matrix has no inverse".into()))
    }

    /// Clips eigenvalues into `[lo, hi]`, preserving eigenvectors.
    pub fn clip_eigenvalues(&self, lo: f64, hi: f64) -> SymMatrix {
        let eig = self.0.clone().symmetric_eigen();
        let vals = eig.eigenvalues.map(|v| v.clamp(lo, hi));
        let u = &eig.eigenvectors;
        symmetrize(&(u * DMatrix::from_diagonal(&vals) * u.transpose()))
    }
}

impl std::ops::Add<&SymMatrix> for &SymMatrix {
    type Output = SymMatrix;
    fn add(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 + &rhs.0)
    }
}

impl std::ops::Sub<&SymMatrix> for &SymMatrix {
    type Output = SymMatrix;
    fn sub(self, rhs: &SymMatrix) -> SymMatrix {
        SymMatrix(&self.0 - &rhs.0)
    }
}

/// `(A + A^T) / 2`.
pub fn symmetrize(a: &DMatrix<f64>) -> SymMatrix {
    assert_eq!(a.nrows(), a.ncols(), "symmetrize needs a square matrix");
    let mut m = a.clone();
    for i in 0..a.nrows() {
        for j in (i + 1)..a.ncols() {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    SymMatrix(m)
}

/// Row-wise softmax with per-row max subtraction for overflow safety.
///
/// Each row of the result is positive and sums to one; a row of equal
/// entries maps to the uniform row `1 / ncols`.
pub fn row_softmax(a: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = a.clone();
    for r in 0..a.nrows() {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..a.ncols() {
            mx = mx.max(a[(r, c)]);
        }
        let mut sum = 0.0;
        for c in 0..a.ncols() {
            let e = (a[(r, c)] - mx).exp();
            out[(r, c)] = e;
            sum += e;
        }
        for c in 0..a.ncols() {
            out[(r, c)] /= sum;
        }
    }
    out
}

/// A named position in a counter-based random-number generator.
///
/// ChaCha exposes independent streams for a fixed seed; `(seed, stream)`
/// therefore addresses a reproducible generator regardless of which thread
/// or in which order it is consumed. Parallel loops assign one substream per
/// work item by index, which keeps results identical for any worker count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream: u64,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        RngStream { seed, stream: 0 }
    }

    /// A derived stream for work item `tag`. Mixing uses SplitMix64's
    /// multiplier so that nested derivations spread over the stream space.
    pub fn substream(&self, tag: u64) -> RngStream {
        let mixed = self
            .stream
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(tag)
            .wrapping_add(1);
        RngStream { seed: self.seed, stream: mixed }
    }

    /// Instantiates the generator positioned at this stream.
    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream);
        rng
    }
}

/// Matrix with independent standard normal entries, filled column-major.
pub fn gaussian_matrix(rng: &mut impl Rng, nrows: usize, ncols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(nrows, ncols, |_, _| rng.sample(StandardNormal))
}
