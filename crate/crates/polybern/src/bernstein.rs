//! Bernstein-form range enclosures.
//!
//! The dense path computes the full Bernstein coefficient tensor of a
//! polynomial over a box by composing, per axis, a Taylor shift to the box
//! origin, a width rescale, and the triangular power-to-Bernstein basis
//! change on the unit interval. The composition equals the direct
//! coefficient sum but costs `O(n * prod(l_i + 1) * l_max)` and keeps every
//! binomial as a product of ratios bounded by one, so degrees in the
//! hundreds stay finite.
//!
//! The fast path never materialises the tensor. On a single-orthant box the
//! Bernstein coefficients of each monomial lie between the monomial's values
//! at the two box corners of that axis, so summing per-term interval
//! products gives bounds that always contain the true coefficient range at a
//! cost independent of the tensor size.

use crate::poly::{IntervalBox, MultiIndex, Polynomial};
use crate::{Error, Result, TAU, TENSOR_CAP};

/// Full Bernstein coefficient tensor of a polynomial over a box.
#[derive(Clone, Debug)]
pub struct BernsteinForm {
    degree: MultiIndex,
    region: IntervalBox,
    dims: Vec<usize>,
    coeffs: Vec<f64>,
}

/// The four-feature summary fed to the action guide: range bounds for the
/// polynomial and for its gradient components.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EnclosureFeatures {
    pub p_min: f64,
    pub p_max: f64,
    pub grad_min: f64,
    pub grad_max: f64,
}

impl EnclosureFeatures {
    pub fn as_array(&self) -> [f64; 4] {
        [self.p_min, self.p_max, self.grad_min, self.grad_max]
    }
}

/// Sound sign decision for a polynomial over a box. `Positive` and
/// `Negative` are guarantees; `Ambiguous` carries no claim.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SignClass {
    Positive,
    Negative,
    Ambiguous,
}

impl BernsteinForm {
    pub fn degree(&self) -> &[u32] {
        &self.degree
    }

    pub fn region(&self) -> &IntervalBox {
        &self.region
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    /// Coefficient at multi-index `k`, `0 <= k <= degree` componentwise.
    pub fn coeff(&self, k: &[u32]) -> f64 {
        let mut pos = 0usize;
        for (i, &ki) in k.iter().enumerate() {
            pos = pos * self.dims[i] + ki as usize;
        }
        self.coeffs[pos]
    }

    /// Range enclosure: `(min coeff, max coeff)` bounds the polynomial on
    /// the whole box.
    pub fn enclosure(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &c in &self.coeffs {
            lo = lo.min(c);
            hi = hi.max(c);
        }
        (lo, hi)
    }
}

/// Range enclosure of a precomputed form; see [`BernsteinForm::enclosure`].
pub fn enclosure(form: &BernsteinForm) -> (f64, f64) {
    form.enclosure()
}

/// Full Bernstein coefficient tensor of `p` over `region` at the
/// polynomial's own degree vector.
pub fn bernstein_coefficients(p: &Polynomial, region: &IntervalBox) -> Result<BernsteinForm> {
    bernstein_coefficients_with_cap(p, region, TENSOR_CAP)
}

pub fn bernstein_coefficients_with_cap(
    p: &Polynomial,
    region: &IntervalBox,
    cap: usize,
) -> Result<BernsteinForm> {
    if region.n() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            got: region.n(),
        });
    }
    let size = p.tensor_size();
    if size > cap as u128 {
        return Err(Error::TensorTooLarge { size, cap });
    }
    let degree: MultiIndex = p.degree_vector().to_vec();
    let dims: Vec<usize> = degree.iter().map(|&l| l as usize + 1).collect();
    let mut data = vec![0.0; size as usize];

    // Scatter the sparse power coefficients into the dense tensor.
    for (idx, c) in p.terms() {
        let mut pos = 0usize;
        for (i, &k) in idx.iter().enumerate() {
            pos = pos * dims[i] + k as usize;
        }
        data[pos] += c;
    }

    for axis in 0..dims.len() {
        let shift = region.lower()[axis];
        let width = region.width(axis);
        let len = dims[axis];
        let mut buf = vec![0.0; len];
        for_each_fiber(&dims, axis, |base, stride| {
            for (j, b) in buf.iter_mut().enumerate() {
                *b = data[base + j * stride];
            }
            taylor_shift(&mut buf, shift);
            let mut pw = 1.0;
            for b in buf.iter_mut() {
                *b *= pw;
                pw *= width;
            }
            power_to_bernstein_unit(&buf, len - 1, |k, v| data[base + k * stride] = v);
        });
    }

    Ok(BernsteinForm {
        degree,
        region: region.clone(),
        dims,
        coeffs: data,
    })
}

/// In-place coefficients of `a(x + s)` via repeated Horner passes.
fn taylor_shift(a: &mut [f64], s: f64) {
    if s == 0.0 {
        return;
    }
    let m = a.len();
    for k in 0..m.saturating_sub(1) {
        for j in (k..m - 1).rev() {
            a[j] += s * a[j + 1];
        }
    }
}

/// Unit-interval basis change `b_k = sum_{j<=k} (C(k,j)/C(l,j)) a_j`. The
/// ratio is accumulated as a product of factors `(k-j+1)/(l-j+1) <= 1`, so
/// nothing overflows even at degrees past one thousand.
fn power_to_bernstein_unit(a: &[f64], l: usize, mut emit: impl FnMut(usize, f64)) {
    for k in 0..=l {
        let mut ratio = 1.0;
        let mut acc = a[0];
        for j in 1..=k {
            ratio *= (k - j + 1) as f64 / (l - j + 1) as f64;
            acc += ratio * a[j];
        }
        emit(k, acc);
    }
}

/// Visits every 1-D fiber along `axis` of a row-major tensor with extents
/// `dims`, yielding the fiber's base offset and stride.
fn for_each_fiber(dims: &[usize], axis: usize, mut f: impl FnMut(usize, usize)) {
    let inner: usize = dims[axis + 1..].iter().product();
    let outer: usize = dims[..axis].iter().product();
    let block = dims[axis] * inner;
    for o in 0..outer {
        for i in 0..inner {
            f(o * block + i, inner);
        }
    }
}

/// Bounds that bracket the full-tensor coefficient range of `p` over a
/// single-orthant box without computing the tensor: `lo <= min coeff` and
/// `hi >= max coeff`. Cost is `O(terms * n)`.
pub fn fast_minmax(p: &Polynomial, region: &IntervalBox) -> Result<(f64, f64)> {
    if region.n() != p.n() {
        return Err(Error::DimensionMismatch {
            expected: p.n(),
            got: region.n(),
        });
    }
    if let Some(dim) = region.straddling_dim() {
        return Err(Error::NotOrthantPure { dim });
    }
    let mut lo_sum = 0.0;
    let mut hi_sum = 0.0;
    for (idx, c) in p.terms() {
        let (mut flo, mut fhi) = (1.0f64, 1.0f64);
        for (i, &k) in idx.iter().enumerate() {
            if k == 0 {
                continue;
            }
            let e0 = region.lower()[i].powi(k as i32);
            let e1 = region.upper()[i].powi(k as i32);
            let (a, b) = (e0.min(e1), e0.max(e1));
            // Interval product: all one-axis coefficient sequences of a
            // monomial on an orthant interval stay inside [a, b].
            let cands = [flo * a, flo * b, fhi * a, fhi * b];
            flo = cands.iter().copied().fold(f64::INFINITY, f64::min);
            fhi = cands.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        }
        let (t_lo, t_hi) = if c >= 0.0 {
            (c * flo, c * fhi)
        } else {
            (c * fhi, c * flo)
        };
        lo_sum += t_lo;
        hi_sum += t_hi;
    }
    Ok((lo_sum, hi_sum))
}

/// Sound range bound on any box: envelope of [`fast_minmax`] over the
/// orthant pieces.
pub fn range_bound(p: &Polynomial, region: &IntervalBox) -> Result<(f64, f64)> {
    if region.is_orthant_pure() {
        return fast_minmax(p, region);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for piece in region.split_orthants() {
        let (a, b) = fast_minmax(p, &piece)?;
        lo = lo.min(a);
        hi = hi.max(b);
    }
    Ok((lo, hi))
}

/// Tensors at most this many entries are enclosed with the full Bernstein
/// form; larger ones fall back to the fast per-term bound.
const AUTO_FULL_CAP: u128 = 4096;

/// Sound range bound that picks the tight full-tensor enclosure when the
/// tensor is small and the cheap per-term bound otherwise.
pub(crate) fn enclosure_auto(p: &Polynomial, region: &IntervalBox) -> (f64, f64) {
    if p.tensor_size() <= AUTO_FULL_CAP {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for piece in region.split_orthants() {
            let form = bernstein_coefficients(p, &piece).expect("size under cap");
            let (a, b) = form.enclosure();
            lo = lo.min(a);
            hi = hi.max(b);
        }
        (lo, hi)
    } else {
        range_bound(p, region).expect("range_bound handles any box")
    }
}

/// The guide's four inputs: fast range bounds for `p` and the componentwise
/// extremes of the fast range bounds of its partial derivatives.
pub fn features(p: &Polynomial, region: &IntervalBox) -> Result<EnclosureFeatures> {
    let (p_min, p_max) = fast_minmax(p, region)?;
    let mut grad_min = f64::INFINITY;
    let mut grad_max = f64::NEG_INFINITY;
    for i in 0..p.n() {
        let (lo, hi) = fast_minmax(&p.partial(i), region)?;
        grad_min = grad_min.min(lo);
        grad_max = grad_max.max(hi);
    }
    if p.n() == 0 || !grad_min.is_finite() {
        grad_min = 0.0;
        grad_max = 0.0;
    }
    Ok(EnclosureFeatures {
        p_min,
        p_max,
        grad_min,
        grad_max,
    })
}

/// Sound sign of `p` on a single-orthant box, with the `TAU` slack keeping
/// floating-point noise from ever promoting `Ambiguous` to a false claim.
pub fn sign_classify(p: &Polynomial, region: &IntervalBox) -> Result<SignClass> {
    let (lo, hi) = fast_minmax(p, region)?;
    Ok(classify_bounds(lo, hi))
}

pub(crate) fn classify_bounds(lo: f64, hi: f64) -> SignClass {
    if lo > TAU {
        SignClass::Positive
    } else if hi < -TAU {
        SignClass::Negative
    } else {
        SignClass::Ambiguous
    }
}
