//! Independent brute-force adjudicators backing the derived test values and
//! the soundness property suites.
//!
//! Everything here is slow by design and deliberately shares no shortcut
//! code paths with the solver: evaluation is rebuilt term by term with
//! repeated multiplication, enclosures use only full coefficient tensors,
//! and satisfiability is decided by exhaustive lattice search plus
//! exhaustive subdivision. Agreement between this module and the solver is
//! evidence, not tautology.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bernstein;
use crate::parse::ProblemFile;
use crate::poly::{IntervalBox, Polynomial};
use crate::{par, Error, Result, TAU};

/// Verdict of the exhaustive adjudicator.
#[derive(Clone, Debug, PartialEq)]
pub enum OracleVerdict {
    SatPoint(Vec<f64>),
    ProvenUnsat,
    Inconclusive,
}

/// Term-by-term evaluation with repeated multiplication; no `powi`, no
/// sharing with `Polynomial::evaluate`.
pub fn naive_eval(p: &Polynomial, x: &[f64]) -> f64 {
    let mut total = 0.0;
    for (idx, c) in p.terms() {
        let mut m = c;
        for (i, &k) in idx.iter().enumerate() {
            for _ in 0..k {
                m *= x[i];
            }
        }
        total += m;
    }
    total
}

/// Central finite-difference gradient with step `h`.
pub fn finite_diff_gradient(p: &Polynomial, x: &[f64], h: f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut hi = x.to_vec();
            let mut lo = x.to_vec();
            hi[i] += h;
            lo[i] -= h;
            (naive_eval(p, &hi) - naive_eval(p, &lo)) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct GridExtrema {
    pub min: f64,
    pub argmin: Vec<f64>,
    pub max: f64,
    pub argmax: Vec<f64>,
}

/// Exhaustive lattice evaluation with `resolution` points per dimension
/// (endpoints included). The returned minimum is an upper bound on the true
/// minimum and the maximum a lower bound on the true maximum: the lattice
/// only visits finitely many points.
pub fn grid_extrema(p: &Polynomial, region: &IntervalBox, resolution: usize) -> Result<GridExtrema> {
    let n = region.n();
    let total = (resolution as u128).pow(n as u32);
    if total > 10_000_000 {
        return Err(Error::Config(format!(
            "grid budget exceeded: {resolution}^{n} points"
        )));
    }
    let total = total as usize;
    let chunk = 1 + total / 64;
    let chunks = par::map_range(total.div_ceil(chunk), |c| {
        let mut best: Option<GridExtrema> = None;
        for t in (c * chunk)..(total.min((c + 1) * chunk)) {
            let x = lattice_point(region, resolution, t);
            let v = naive_eval(p, &x);
            match &mut best {
                None => {
                    best = Some(GridExtrema {
                        min: v,
                        argmin: x.clone(),
                        max: v,
                        argmax: x,
                    })
                }
                Some(b) => {
                    if v < b.min {
                        b.min = v;
                        b.argmin = x.clone();
                    }
                    if v > b.max {
                        b.max = v;
                        b.argmax = x;
                    }
                }
            }
        }
        best
    });
    let mut out: Option<GridExtrema> = None;
    for b in chunks.into_iter().flatten() {
        match &mut out {
            None => out = Some(b),
            Some(o) => {
                if b.min < o.min {
                    o.min = b.min;
                    o.argmin = b.argmin;
                }
                if b.max > o.max {
                    o.max = b.max;
                    o.argmax = b.argmax;
                }
            }
        }
    }
    Ok(out.expect("lattice has at least one point"))
}

/// Sequential twin of [`grid_extrema`] for the benchmark suite.
pub fn grid_extrema_seq(
    p: &Polynomial,
    region: &IntervalBox,
    resolution: usize,
) -> Result<GridExtrema> {
    let n = region.n();
    let total = (resolution as u128).pow(n as u32);
    if total > 10_000_000 {
        return Err(Error::Config(format!(
            "grid budget exceeded: {resolution}^{n} points"
        )));
    }
    let mut out: Option<GridExtrema> = None;
    for t in 0..total as usize {
        let x = lattice_point(region, resolution, t);
        let v = naive_eval(p, &x);
        match &mut out {
            None => {
                out = Some(GridExtrema {
                    min: v,
                    argmin: x.clone(),
                    max: v,
                    argmax: x,
                })
            }
            Some(o) => {
                if v < o.min {
                    o.min = v;
                    o.argmin = x.clone();
                }
                if v > o.max {
                    o.max = v;
                    o.argmax = x;
                }
            }
        }
    }
    Ok(out.expect("lattice has at least one point"))
}

fn lattice_point(region: &IntervalBox, resolution: usize, mut t: usize) -> Vec<f64> {
    let n = region.n();
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let j = t % resolution;
        t /= resolution;
        x[i] = if resolution == 1 {
            0.5 * (region.lower()[i] + region.upper()[i])
        } else if j == resolution - 1 {
            region.upper()[i]
        } else {
            region.lower()[i] + region.width(i) * j as f64 / (resolution - 1) as f64
        };
    }
    x
}

/// Largest 2-norm of the gradient over the lattice.
pub fn grid_max_grad_norm(p: &Polynomial, region: &IntervalBox, resolution: usize) -> f64 {
    let grad = p.gradient();
    let total = (resolution as u128).pow(region.n() as u32) as usize;
    let norms = par::map_range(total, |t| {
        let x = lattice_point(region, resolution, t);
        grad.iter()
            .map(|g| {
                let v = naive_eval(g, &x);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    });
    norms.into_iter().fold(0.0, f64::max)
}

/// Decides a feasibility problem exhaustively: SAT by dense lattice search
/// with local refinement, UNSAT by exhaustive subdivision with full-tensor
/// Bernstein enclosures. Anything else is `Inconclusive`.
pub fn adjudicate(problem: &ProblemFile, resolution: usize, depth: u32) -> Result<OracleVerdict> {
    let n = problem.box_ref().n();
    if n > 3 {
        return Err(Error::Config(format!(
            "oracle adjudication is exhaustive and limited to n <= 3 (got {n})"
        )));
    }
    if problem.constraints.is_empty() {
        return Ok(OracleVerdict::SatPoint(problem.box_ref().center()));
    }
    if let Some(x) = lattice_sat_search(problem, resolution) {
        return Ok(OracleVerdict::SatPoint(x));
    }
    if unsat_by_subdivision(&problem.constraints, problem.box_ref(), depth) {
        return Ok(OracleVerdict::ProvenUnsat);
    }
    Ok(OracleVerdict::Inconclusive)
}

fn max_residual(problem: &ProblemFile, x: &[f64]) -> f64 {
    problem
        .constraints
        .iter()
        .map(|p| naive_eval(p, x))
        .fold(f64::NEG_INFINITY, f64::max)
}

fn lattice_sat_search(problem: &ProblemFile, resolution: usize) -> Option<Vec<f64>> {
    let region = problem.box_ref();
    let total = (resolution as u128).pow(region.n() as u32) as usize;
    let scored = par::map_range(total, |t| {
        let x = lattice_point(region, resolution, t);
        let r = max_residual(problem, &x);
        (r, x)
    });
    let (mut best_r, mut best_x) = scored
        .into_iter()
        .min_by(|a, b| a.0.total_cmp(&b.0))
        .expect("lattice nonempty");
    if best_r <= TAU {
        return Some(best_x);
    }
    // Local refinement around the most promising lattice point.
    let mut widths = region.widths();
    for _ in 0..24 {
        widths = widths.iter().map(|w| w * 0.25).collect();
        let local = IntervalBox::new(
            best_x
                .iter()
                .zip(&widths)
                .zip(region.lower())
                .map(|((c, w), lo)| (c - 0.5 * w).max(*lo))
                .collect(),
            best_x
                .iter()
                .zip(&widths)
                .zip(region.upper())
                .map(|((c, w), hi)| (c + 0.5 * w).min(*hi))
                .collect(),
        )
        .ok()?;
        let sub_res = 9;
        let total = (sub_res as u128).pow(local.n() as u32) as usize;
        for t in 0..total {
            let x = lattice_point(&local, sub_res, t);
            let r = max_residual(problem, &x);
            if r < best_r {
                best_r = r;
                best_x = x;
            }
        }
        if best_r <= TAU {
            return Some(best_x);
        }
    }
    None
}

/// Exhaustive-subdivision UNSAT proof: every leaf must have some constraint
/// with a full-tensor Bernstein lower bound above `TAU`. No fast min/max
/// shortcut is used anywhere on this path.
pub fn unsat_by_subdivision(pols: &[Polynomial], region: &IntervalBox, depth: u32) -> bool {
    if region.volume() == 0.0 {
        // Degenerate slice; fall back to a point check.
        let c = region.center();
        return pols.iter().any(|p| naive_eval(p, &c) > TAU);
    }
    for p in pols {
        if let Ok(form) = bernstein::bernstein_coefficients(p, region) {
            let (lo, _) = form.enclosure();
            if lo > TAU {
                return true;
            }
        }
    }
    if depth == 0 {
        return false;
    }
    let widths = region.widths();
    let dim = region.widest_scaled_dim(&widths.iter().map(|_| 1.0).collect::<Vec<_>>());
    let (a, b) = region.bisect(dim);
    unsat_by_subdivision(pols, &a, depth - 1) && unsat_by_subdivision(pols, &b, depth - 1)
}

/// Random sparse polynomial with coefficients uniform in [-1, 1]; used by
/// the randomized suites. Total degree stays at most `max_total_degree`.
pub fn random_polynomial(
    rng: &mut impl Rng,
    n: usize,
    max_total_degree: u32,
    max_terms: usize,
) -> Polynomial {
    let terms = rng.gen_range(1..=max_terms);
    let mut list = Vec::with_capacity(terms);
    for _ in 0..terms {
        let mut idx = vec![0u32; n];
        let mut budget = max_total_degree;
        for k in idx.iter_mut() {
            let d = rng.gen_range(0..=budget);
            *k = d;
            budget -= d;
        }
        list.push((idx, rng.gen_range(-1.0..1.0)));
    }
    Polynomial::new(n, list).expect("indices sized to n")
}

/// Random box with bounds drawn from [lo, hi]; may straddle zero.
pub fn random_box(rng: &mut impl Rng, n: usize, lo: f64, hi: f64) -> IntervalBox {
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.gen_range(lo..hi);
        let b = rng.gen_range(lo..hi);
        lower.push(a.min(b));
        upper.push(a.max(b) + 1e-3);
    }
    IntervalBox::new(lower, upper).expect("lower <= upper by construction")
}

/// Random box confined to a single orthant.
pub fn random_orthant_box(rng: &mut impl Rng, n: usize, scale: f64) -> IntervalBox {
    let mut lower = Vec::with_capacity(n);
    let mut upper = Vec::with_capacity(n);
    for _ in 0..n {
        let sign: f64 = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let a = rng.gen_range(0.0..scale);
        let b = rng.gen_range(0.0..scale);
        let (mut x, mut y) = (sign * a, sign * (a + b + 1e-3));
        if x > y {
            std::mem::swap(&mut x, &mut y);
        }
        lower.push(x);
        upper.push(y);
    }
    IntervalBox::new(lower, upper).expect("ordered by construction")
}

/// Deterministic RNG stream `k` derived from a base seed.
pub fn stream(seed: u64, k: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ k.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_extrema_hand_cases() {
        let p = Polynomial::new(1, [(vec![2], 1.0)]).unwrap();
        let b = IntervalBox::new(vec![-1.0], vec![1.0]).unwrap();
        let g = grid_extrema(&p, &b, 3).unwrap();
        assert_eq!(g.min, 0.0);
        assert_eq!(g.argmin, vec![0.0]);
        assert_eq!(g.max, 1.0);

        let c = Polynomial::constant(2, 7.0);
        let b = IntervalBox::uniform(2, 0.0, 1.0).unwrap();
        let g = grid_extrema(&c, &b, 4).unwrap();
        assert_eq!((g.min, g.max), (7.0, 7.0));
    }

    #[test]
    fn adjudicate_hand_cases() {
        let src = "vars x\nbox -1 1\nconstraint x^2 + 1";
        let problem = crate::parse::parse_problem_str(src).unwrap();
        assert_eq!(
            adjudicate(&problem, 41, 10).unwrap(),
            OracleVerdict::ProvenUnsat
        );

        let src = "vars x\nbox 0 1\nconstraint x - 10";
        let problem = crate::parse::parse_problem_str(src).unwrap();
        assert!(matches!(
            adjudicate(&problem, 11, 6).unwrap(),
            OracleVerdict::SatPoint(_)
        ));

        // Touching solution at x = 0: the lattice hits it exactly.
        let src = "vars x\nbox -1 1\nconstraint x^2";
        let problem = crate::parse::parse_problem_str(src).unwrap();
        match adjudicate(&problem, 41, 6).unwrap() {
            OracleVerdict::SatPoint(x) => assert!(x[0].abs() <= 1e-6),
            v => panic!("expected SatPoint, got {v:?}"),
        }
    }

    #[test]
    fn parallel_and_sequential_grids_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = random_polynomial(&mut rng, 2, 4, 9);
        let b = random_box(&mut rng, 2, -2.0, 2.0);
        let a = grid_extrema(&p, &b, 33).unwrap();
        let s = grid_extrema_seq(&p, &b, 33).unwrap();
        assert_eq!(a.min, s.min);
        assert_eq!(a.max, s.max);
        assert_eq!(a.argmin, s.argmin);
    }
}
