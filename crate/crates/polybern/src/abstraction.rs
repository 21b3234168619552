//! Quadratic over/under approximations and the three refinement actions.
//!
//! The sandwich is built from the degree-2 Taylor polynomial at the box
//! center plus a Bernstein range bound on the remainder, so `U <= p <= O`
//! holds on the box by construction. Sub/superlevel sets of the quadratic
//! bounds are resolved by recursive bisection with Bernstein sign checks,
//! which keeps every region a box, the solver's only region currency.

use crate::bernstein::{self, SignClass};
use crate::poly::{IntervalBox, Polynomial};
use crate::Result;

/// Default bisection depth for quadratic sign classification. Deeper
/// refinement is delegated to later solver iterations.
pub const DEFAULT_CLASSIFY_DEPTH: u32 = 4;

/// Sound quadratic sandwich `under <= p <= over` on `region`.
#[derive(Clone, Debug)]
pub struct QuadraticBounds {
    pub under: Polynomial,
    pub over: Polynomial,
    pub region: IntervalBox,
}

/// Refinement actions, ordered for deterministic tie-breaking.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Action {
    UnderApprox,
    OverApprox,
    Split,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::UnderApprox, Action::OverApprox, Action::Split];

    pub fn index(self) -> usize {
        match self {
            Action::UnderApprox => 0,
            Action::OverApprox => 1,
            Action::Split => 2,
        }
    }

    pub fn from_index(i: usize) -> Action {
        Action::ALL[i]
    }
}

impl std::fmt::Display for Action {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Action::UnderApprox => write!(f, "under_approx"),
            Action::OverApprox => write!(f, "over_approx"),
            Action::Split => write!(f, "split"),
        }
    }
}

/// Outcome of one refinement action on one region. The three lists
/// partition the input box up to shared faces: `positive` boxes have
/// `p > 0` everywhere, `negative` boxes have `p < 0` everywhere, and
/// `ambiguous` boxes carry no claim.
#[derive(Clone, Debug, Default)]
pub struct RegionPartition {
    pub positive: Vec<IntervalBox>,
    pub negative: Vec<IntervalBox>,
    pub ambiguous: Vec<IntervalBox>,
}

impl RegionPartition {
    pub fn ambiguous_volume(&self) -> f64 {
        self.ambiguous.iter().map(IntervalBox::volume).sum()
    }

    pub fn total_volume(&self) -> f64 {
        self.positive
            .iter()
            .chain(&self.negative)
            .chain(&self.ambiguous)
            .map(IntervalBox::volume)
            .sum()
    }
}

/// Richer result used by the solver: the partition plus the quadratic bound
/// that justified it, for certificate bookkeeping.
#[derive(Clone, Debug)]
pub struct ActionOutcome {
    pub partition: RegionPartition,
    pub volume_reduction: f64,
    /// The under-approximation behind `positive` boxes (UnderApprox only).
    pub under: Option<Polynomial>,
    /// The over-approximation behind `negative` boxes (OverApprox only).
    pub over: Option<Polynomial>,
}

/// Builds the quadratic sandwich: `T2 +` remainder lower bound below,
/// `T2 +` remainder upper bound above. For inputs of total degree at most 2
/// the remainder is exactly zero and `under == over == p` termwise.
pub fn quadratic_bounds(p: &Polynomial, region: &IntervalBox) -> Result<QuadraticBounds> {
    let t2 = p.taylor_quadratic(&region.center())?;
    let r = p.sub(&t2)?;
    let (r_lo, r_hi) = if r.is_zero() {
        (0.0, 0.0)
    } else {
        bernstein::enclosure_auto(&r, region)
    };
    Ok(QuadraticBounds {
        under: t2.add_constant(r_lo),
        over: t2.add_constant(r_hi),
        region: region.clone(),
    })
}

/// Classifies the sign of `q` (intended degree <= 2) over `region` by
/// recursive bisection of the widest scaled dimension, `depth` levels deep.
/// Boxes straddling zero are first cut at the orthant boundaries so every
/// sign check runs on a single orthant.
pub fn classify_quadratic(
    q: &Polynomial,
    region: &IntervalBox,
    depth: u32,
    ref_widths: &[f64],
) -> Result<RegionPartition> {
    let mut out = RegionPartition::default();
    for piece in region.split_orthants() {
        classify_rec(q, &piece, depth, ref_widths, &mut out)?;
    }
    Ok(out)
}

fn classify_rec(
    q: &Polynomial,
    region: &IntervalBox,
    depth: u32,
    ref_widths: &[f64],
    out: &mut RegionPartition,
) -> Result<()> {
    // Quadratics have tiny tensors, so the tight full enclosure is cheap;
    // enclosure_auto falls back to the fast bound past its size cap.
    let (lo, hi) = bernstein::enclosure_auto(q, region);
    match bernstein::classify_bounds(lo, hi) {
        SignClass::Positive => out.positive.push(region.clone()),
        SignClass::Negative => out.negative.push(region.clone()),
        SignClass::Ambiguous => {
            if depth == 0 || region.volume() == 0.0 {
                out.ambiguous.push(region.clone());
            } else {
                let dim = region.widest_scaled_dim(ref_widths);
                let (a, b) = region.bisect(dim);
                classify_rec(q, &a, depth - 1, ref_widths, out)?;
                classify_rec(q, &b, depth - 1, ref_widths, out)?;
            }
        }
    }
    Ok(())
}

/// Applies one refinement action for `p` on `region` and reports the drop in
/// ambiguous volume. Split always reports zero; its value is realised in
/// later iterations.
pub fn apply_action(
    p: &Polynomial,
    region: &IntervalBox,
    action: Action,
    depth: u32,
    ref_widths: &[f64],
) -> Result<(RegionPartition, f64)> {
    let out = apply_action_detail(p, region, action, depth, ref_widths)?;
    Ok((out.partition, out.volume_reduction))
}

pub(crate) fn apply_action_detail(
    p: &Polynomial,
    region: &IntervalBox,
    action: Action,
    depth: u32,
    ref_widths: &[f64],
) -> Result<ActionOutcome> {
    let vol = region.volume();
    match action {
        Action::UnderApprox => {
            let qb = quadratic_bounds(p, region)?;
            let raw = classify_quadratic(&qb.under, region, depth, ref_widths)?;
            // U <= p, so only U-positive boxes say anything about p.
            let mut ambiguous = raw.negative;
            ambiguous.extend(raw.ambiguous);
            let partition = RegionPartition {
                positive: raw.positive,
                negative: Vec::new(),
                ambiguous,
            };
            let reduction = vol - partition.ambiguous_volume();
            Ok(ActionOutcome {
                partition,
                volume_reduction: reduction,
                under: Some(qb.under),
                over: None,
            })
        }
        Action::OverApprox => {
            let qb = quadratic_bounds(p, region)?;
            let raw = classify_quadratic(&qb.over, region, depth, ref_widths)?;
            // p <= O, so only O-negative boxes say anything about p.
            let mut ambiguous = raw.positive;
            ambiguous.extend(raw.ambiguous);
            let partition = RegionPartition {
                positive: Vec::new(),
                negative: raw.negative,
                ambiguous,
            };
            let reduction = vol - partition.ambiguous_volume();
            Ok(ActionOutcome {
                partition,
                volume_reduction: reduction,
                under: None,
                over: Some(qb.over),
            })
        }
        Action::Split => {
            let dim = region.widest_scaled_dim(ref_widths);
            let (a, b) = region.bisect(dim);
            Ok(ActionOutcome {
                partition: RegionPartition {
                    positive: Vec::new(),
                    negative: Vec::new(),
                    ambiguous: vec![a, b],
                },
                volume_reduction: 0.0,
                under: None,
                over: None,
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn poly(n: usize, terms: &[(&[u32], f64)]) -> Polynomial {
        Polynomial::new(n, terms.iter().map(|(k, c)| (k.to_vec(), *c))).unwrap()
    }

    #[test]
    fn quadratic_inputs_collapse_the_sandwich() {
        let p = poly(2, &[(&[2, 0], 1.0), (&[1, 1], -0.5), (&[0, 0], 0.25)]);
        let b = IntervalBox::uniform(2, -1.0, 1.0).unwrap();
        let qb = quadratic_bounds(&p, &b).unwrap();
        assert_eq!(qb.under, p);
        assert_eq!(qb.over, p);
    }

    #[test]
    fn cubic_on_symmetric_interval() {
        // T2 of x^3 at 0 vanishes; the remainder is x^3 with range [-1, 1].
        let p = poly(1, &[(&[3], 1.0)]);
        let b = IntervalBox::uniform(1, -1.0, 1.0).unwrap();
        let qb = quadratic_bounds(&p, &b).unwrap();
        assert_eq!(qb.under, Polynomial::constant(1, -1.0));
        assert_eq!(qb.over, Polynomial::constant(1, 1.0));
    }

    #[test]
    fn sandwich_holds_on_random_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..50 {
            let n = rng.gen_range(1..=3usize);
            let p = oracle::random_polynomial(&mut rng, n, 6, 10);
            let b = oracle::random_box(&mut rng, n, -1.5, 1.5);
            let qb = quadratic_bounds(&p, &b).unwrap();
            for _ in 0..200 {
                let x = b.sample(&mut rng);
                let pv = p.evaluate(&x).unwrap();
                let uv = qb.under.evaluate(&x).unwrap();
                let ov = qb.over.evaluate(&x).unwrap();
                let slack = 1e-9 * pv.abs().max(1.0);
                assert!(uv <= pv + slack, "under {uv} above p {pv}");
                assert!(ov >= pv - slack, "over {ov} below p {pv}");
            }
        }
    }

    #[test]
    fn classify_halfspace() {
        let q = poly(1, &[(&[1], 1.0), (&[0], -0.5)]);
        let b = IntervalBox::new(vec![0.0], vec![1.0]).unwrap();
        let part = classify_quadratic(&q, &b, 3, &[1.0]).unwrap();
        let neg: f64 = part.negative.iter().map(IntervalBox::volume).sum();
        let pos: f64 = part.positive.iter().map(IntervalBox::volume).sum();
        let amb: f64 = part.ambiguous.iter().map(IntervalBox::volume).sum();
        assert!((neg + pos + amb - 1.0).abs() < 1e-12);
        assert!(neg >= 0.25 && pos >= 0.25);
        // Every classified box is on the correct side of x = 1/2.
        for bx in &part.negative {
            assert!(bx.upper()[0] <= 0.5 + 1e-12);
        }
        for bx in &part.positive {
            assert!(bx.lower()[0] >= 0.5 - 1e-12);
        }
        for bx in &part.ambiguous {
            assert!(bx.lower()[0] <= 0.5 && bx.upper()[0] >= 0.5 - 0.2);
        }
    }

    #[test]
    fn classify_constant_and_definite() {
        let one = Polynomial::constant(2, 1.0);
        let b = IntervalBox::uniform(2, 0.0, 1.0).unwrap();
        let part = classify_quadratic(&one, &b, 0, &[1.0, 1.0]).unwrap();
        assert_eq!(part.positive.len(), 1);
        assert!(part.negative.is_empty() && part.ambiguous.is_empty());

        let q = poly(2, &[(&[2, 0], 1.0), (&[0, 2], 1.0), (&[0, 0], -10.0)]);
        let part = classify_quadratic(&q, &b, 0, &[1.0, 1.0]).unwrap();
        assert_eq!(part.negative.len(), 1);
    }

    #[test]
    fn under_approx_prunes_definitely_positive() {
        let p = poly(1, &[(&[2], 1.0), (&[0], 1.0)]);
        let b = IntervalBox::new(vec![0.0], vec![1.0]).unwrap();
        let (part, reduction) =
            apply_action(&p, &b, Action::UnderApprox, DEFAULT_CLASSIFY_DEPTH, &[1.0]).unwrap();
        assert!((reduction - 1.0).abs() < 1e-12);
        assert!(part.ambiguous.is_empty());
    }

    #[test]
    fn split_reports_zero_reduction() {
        let p = poly(2, &[(&[3, 1], 1.0)]);
        let b = IntervalBox::uniform(2, 0.0, 1.0).unwrap();
        let (part, reduction) = apply_action(&p, &b, Action::Split, 4, &[1.0, 1.0]).unwrap();
        assert_eq!(reduction, 0.0);
        assert_eq!(part.ambiguous.len(), 2);
        assert!((part.total_volume() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn under_approx_on_positive_cubic_region() {
        let p = poly(1, &[(&[3], 1.0)]);
        let b = IntervalBox::new(vec![0.5], vec![1.0]).unwrap();
        let (part, reduction) = apply_action(&p, &b, Action::UnderApprox, 4, &[0.5]).unwrap();
        assert!(reduction >= 0.9 * b.volume(), "reduction {reduction}");
        // Analytic sign oracle: x^3 > 0 on [0.5, 1].
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for bx in &part.positive {
            for _ in 0..100 {
                let x = bx.sample(&mut rng);
                assert!(p.evaluate(&x).unwrap() > 0.0);
            }
        }
    }

    #[test]
    fn partitions_conserve_volume_and_signs() {
        let mut rng = ChaCha8Rng::seed_from_u64(131);
        for _ in 0..40 {
            let n = rng.gen_range(1..=2usize);
            let p = oracle::random_polynomial(&mut rng, n, 5, 8);
            let b = oracle::random_box(&mut rng, n, -1.5, 1.5);
            let action = Action::ALL[rng.gen_range(0..3)];
            let widths = b.widths();
            let (part, _) = apply_action(&p, &b, action, 4, &widths).unwrap();
            let total = part.total_volume();
            assert!(
                (total - b.volume()).abs() <= 1e-9 * b.volume().max(1.0),
                "volume {} vs {}",
                total,
                b.volume()
            );
            for bx in &part.positive {
                for _ in 0..50 {
                    let x = bx.sample(&mut rng);
                    assert!(p.evaluate(&x).unwrap() > 0.0, "positive box violated");
                }
            }
            for bx in &part.negative {
                for _ in 0..50 {
                    let x = bx.sample(&mut rng);
                    assert!(p.evaluate(&x).unwrap() < 0.0, "negative box violated");
                }
            }
        }
    }
}
