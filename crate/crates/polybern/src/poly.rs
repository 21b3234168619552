//! Sparse multivariate polynomials in the power basis, plus the axis-aligned
//! boxes they are bounded over.
//!
//! A polynomial is a map from exponent vectors to coefficients, kept in
//! canonical sparse form: no stored coefficient is exactly zero, and the
//! cached degree vector is the componentwise maximum over stored exponents.
//! All operations are pure; both types are immutable after construction and
//! safe to share across threads.

use std::collections::BTreeMap;

use crate::{Error, Result};

/// Exponent vector, one entry per variable.
pub type MultiIndex = Vec<u32>;

/// Sparse multivariate polynomial `sum_K a_K x^K` over `n` variables.
#[derive(Clone, Debug, PartialEq)]
pub struct Polynomial {
    n: usize,
    terms: BTreeMap<MultiIndex, f64>,
    degree: MultiIndex,
}

impl Polynomial {
    /// Builds a polynomial in canonical sparse form. Terms with equal
    /// exponents are accumulated; exact-zero coefficients are dropped.
    pub fn new(n: usize, terms: impl IntoIterator<Item = (MultiIndex, f64)>) -> Result<Self> {
        let mut map: BTreeMap<MultiIndex, f64> = BTreeMap::new();
        for (idx, c) in terms {
            if idx.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    got: idx.len(),
                });
            }
            *map.entry(idx).or_insert(0.0) += c;
        }
        map.retain(|_, c| *c != 0.0);
        Ok(Self::from_canonical(n, map))
    }

    fn from_canonical(n: usize, terms: BTreeMap<MultiIndex, f64>) -> Self {
        let mut degree = vec![0u32; n];
        for idx in terms.keys() {
            for (d, k) in degree.iter_mut().zip(idx) {
                *d = (*d).max(*k);
            }
        }
        Self { n, terms, degree }
    }

    pub fn zero(n: usize) -> Self {
        Self::from_canonical(n, BTreeMap::new())
    }

    pub fn constant(n: usize, c: f64) -> Self {
        Self::new(n, [(vec![0; n], c)]).expect("constant index has length n")
    }

    /// The monomial `x_i`.
    pub fn var(n: usize, i: usize) -> Self {
        assert!(i < n, "variable index out of range");
        let mut idx = vec![0; n];
        idx[i] = 1;
        Self::new(n, [(idx, 1.0)]).expect("index has length n")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn terms(&self) -> impl Iterator<Item = (&MultiIndex, f64)> {
        self.terms.iter().map(|(k, c)| (k, *c))
    }

    pub fn num_terms(&self) -> usize {
        self.terms.len()
    }

    pub fn coeff(&self, idx: &[u32]) -> f64 {
        self.terms.get(idx).copied().unwrap_or(0.0)
    }

    /// Componentwise maximum exponent; all zeros for the zero polynomial.
    pub fn degree_vector(&self) -> &[u32] {
        &self.degree
    }

    pub fn total_degree(&self) -> u32 {
        self.terms
            .keys()
            .map(|idx| idx.iter().sum())
            .max()
            .unwrap_or(0)
    }

    /// Number of entries a dense coefficient tensor of this polynomial needs.
    pub fn tensor_size(&self) -> u128 {
        self.degree.iter().map(|&l| l as u128 + 1).product()
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: x.len(),
            });
        }
        let mut acc = 0.0;
        for (idx, c) in &self.terms {
            let mut m = *c;
            for (xi, &k) in x.iter().zip(idx) {
                if k > 0 {
                    m *= xi.powi(k as i32);
                }
            }
            acc += m;
        }
        Ok(acc)
    }

    /// Formal partial derivative with respect to variable `i`.
    pub fn partial(&self, i: usize) -> Self {
        assert!(i < self.n, "variable index out of range");
        let mut map = BTreeMap::new();
        for (idx, c) in &self.terms {
            let k = idx[i];
            if k == 0 {
                continue;
            }
            let mut d = idx.clone();
            d[i] = k - 1;
            let v = c * k as f64;
            if v != 0.0 {
                *map.entry(d).or_insert(0.0) += v;
            }
        }
        map.retain(|_, c| *c != 0.0);
        Self::from_canonical(self.n, map)
    }

    /// The gradient as a vector of `n` polynomials.
    pub fn gradient(&self) -> Vec<Self> {
        (0..self.n).map(|i| self.partial(i)).collect()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let mut map = self.terms.clone();
        for (idx, c) in &other.terms {
            *map.entry(idx.clone()).or_insert(0.0) += c;
        }
        map.retain(|_, c| *c != 0.0);
        Ok(Self::from_canonical(self.n, map))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let mut map = self.terms.clone();
        for (idx, c) in &other.terms {
            *map.entry(idx.clone()).or_insert(0.0) -= c;
        }
        map.retain(|_, c| *c != 0.0);
        Ok(Self::from_canonical(self.n, map))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.check_dims(other)?;
        let mut map: BTreeMap<MultiIndex, f64> = BTreeMap::new();
        for (a_idx, a) in &self.terms {
            for (b_idx, b) in &other.terms {
                let idx: MultiIndex = a_idx.iter().zip(b_idx).map(|(x, y)| x + y).collect();
                *map.entry(idx).or_insert(0.0) += a * b;
            }
        }
        map.retain(|_, c| *c != 0.0);
        Ok(Self::from_canonical(self.n, map))
    }

    pub fn scale(&self, c: f64) -> Self {
        if c == 0.0 {
            return Self::zero(self.n);
        }
        let map = self.terms.iter().map(|(k, v)| (k.clone(), v * c)).collect();
        Self::from_canonical(self.n, map)
    }

    pub fn neg(&self) -> Self {
        self.scale(-1.0)
    }

    pub fn add_constant(&self, c: f64) -> Self {
        if c == 0.0 {
            return self.clone();
        }
        let mut map = self.terms.clone();
        *map.entry(vec![0; self.n]).or_insert(0.0) += c;
        map.retain(|_, v| *v != 0.0);
        Self::from_canonical(self.n, map)
    }

    /// Integer power by repeated squaring. `p^0` is the constant 1.
    pub fn integer_pow(&self, mut k: u32) -> Self {
        let mut result = Self::constant(self.n, 1.0);
        let mut base = self.clone();
        while k > 0 {
            if k & 1 == 1 {
                result = result.mul(&base).expect("same dimension");
            }
            k >>= 1;
            if k > 0 {
                base = base.mul(&base).expect("same dimension");
            }
        }
        result
    }

    /// Degree-2 Taylor polynomial of `self` around `center`, expanded back
    /// into the power basis. For inputs of total degree at most 2 the result
    /// is the input itself (termwise), so the remainder `p - T2` is exactly
    /// the zero polynomial.
    pub fn taylor_quadratic(&self, center: &[f64]) -> Result<Self> {
        if center.len() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: center.len(),
            });
        }
        if self.total_degree() <= 2 {
            return Ok(self.clone());
        }
        let n = self.n;
        let mut t2 = Self::constant(n, self.evaluate(center)?);
        let shifted: Vec<Self> = (0..n)
            .map(|i| Self::var(n, i).add_constant(-center[i]))
            .collect();
        let grad = self.gradient();
        for i in 0..n {
            let gi = grad[i].evaluate(center)?;
            if gi != 0.0 {
                t2 = t2.add(&shifted[i].scale(gi))?;
            }
        }
        for i in 0..n {
            let di = grad[i].clone();
            for j in i..n {
                let hij = di.partial(j).evaluate(center)?;
                if hij == 0.0 {
                    continue;
                }
                let factor = if i == j { 0.5 * hij } else { hij };
                let quad = shifted[i].mul(&shifted[j])?.scale(factor);
                t2 = t2.add(&quad)?;
            }
        }
        Ok(t2)
    }

    /// A Lipschitz constant for `self` on `region` in the 2-norm:
    /// `sqrt(sum_i m_i^2)` where `m_i` bounds `|d p / d x_i|` via the
    /// Bernstein range of each partial derivative.
    pub fn lipschitz_bound(&self, region: &IntervalBox) -> Result<f64> {
        if region.n() != self.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: region.n(),
            });
        }
        let mut sum = 0.0;
        for i in 0..self.n {
            let (lo, hi) = crate::bernstein::range_bound(&self.partial(i), region)?;
            let m = lo.abs().max(hi.abs());
            sum += m * m;
        }
        Ok(sum.sqrt())
    }

    fn check_dims(&self, other: &Self) -> Result<()> {
        if self.n != other.n {
            return Err(Error::DimensionMismatch {
                expected: self.n,
                got: other.n,
            });
        }
        Ok(())
    }
}

/// Axis-aligned hyperrectangle `[lower_1, upper_1] x ... x [lower_n, upper_n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl IntervalBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: upper.len(),
            });
        }
        for (dim, (lo, hi)) in lower.iter().zip(&upper).enumerate() {
            if !(lo <= hi) {
                return Err(Error::EmptyInterval { dim });
            }
        }
        Ok(Self { lower, upper })
    }

    /// The cube `[lo, hi]^n`.
    pub fn uniform(n: usize, lo: f64, hi: f64) -> Result<Self> {
        Self::new(vec![lo; n], vec![hi; n])
    }

    pub fn n(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn width(&self, dim: usize) -> f64 {
        self.upper[dim] - self.lower[dim]
    }

    pub fn widths(&self) -> Vec<f64> {
        (0..self.n()).map(|i| self.width(i)).collect()
    }

    pub fn volume(&self) -> f64 {
        (0..self.n()).map(|i| self.width(i)).product()
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| 0.5 * (lo + hi))
            .collect()
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.n()
            && x.iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(xi, (lo, hi))| *xi >= lo - tol && *xi <= hi + tol)
    }

    /// True when no coordinate interval straddles zero; endpoints at exactly
    /// zero count as orthant-pure.
    pub fn is_orthant_pure(&self) -> bool {
        self.straddling_dim().is_none()
    }

    pub(crate) fn straddling_dim(&self) -> Option<usize> {
        self.lower
            .iter()
            .zip(&self.upper)
            .position(|(lo, hi)| *lo < 0.0 && *hi > 0.0)
    }

    /// Splits every coordinate interval that straddles zero at zero. The
    /// resulting boxes are orthant-pure, disjoint up to shared faces, and
    /// union to `self`; their count is two to the number of straddling
    /// dimensions.
    pub fn split_orthants(&self) -> Vec<Self> {
        let mut out = vec![self.clone()];
        for dim in 0..self.n() {
            if !(self.lower[dim] < 0.0 && self.upper[dim] > 0.0) {
                continue;
            }
            let mut next = Vec::with_capacity(out.len() * 2);
            for bx in out {
                let (a, b) = bx.split_at(dim, 0.0);
                next.push(a);
                next.push(b);
            }
            out = next;
        }
        out
    }

    pub fn split_at(&self, dim: usize, point: f64) -> (Self, Self) {
        debug_assert!(point >= self.lower[dim] && point <= self.upper[dim]);
        let mut left = self.clone();
        let mut right = self.clone();
        left.upper[dim] = point;
        right.lower[dim] = point;
        (left, right)
    }

    /// Midpoint bisection along `dim`.
    pub fn bisect(&self, dim: usize) -> (Self, Self) {
        let mid = 0.5 * (self.lower[dim] + self.upper[dim]);
        self.split_at(dim, mid)
    }

    /// Index of the widest dimension after dividing each width by the
    /// matching reference width; ties resolve to the lowest index. Reference
    /// widths of zero mark degenerate dimensions and never win.
    pub fn widest_scaled_dim(&self, ref_widths: &[f64]) -> usize {
        let mut best = 0;
        let mut best_ratio = -1.0;
        for i in 0..self.n() {
            let r = if ref_widths[i] > 0.0 {
                self.width(i) / ref_widths[i]
            } else {
                0.0
            };
            if r > best_ratio {
                best_ratio = r;
                best = i;
            }
        }
        best
    }

    pub fn sample(&self, rng: &mut impl rand::Rng) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(lo, hi)| {
                if lo == hi {
                    *lo
                } else {
                    rng.gen_range(*lo..=*hi)
                }
            })
            .collect()
    }
}
