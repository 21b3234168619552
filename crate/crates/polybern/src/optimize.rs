//! Constrained polynomial optimization by reduction to gradient
//! feasibility.
//!
//! Interior extrema sit where the gradient vanishes, so the solver runs on
//! the constraint system `{d p/d x_i <= 0, -d p/d x_i <= 0}` plus the
//! user's constraints, keeping every region that might contain a zero of
//! the gradient. Boundary extrema are covered by an axis-aligned lattice
//! sweep of every face with pitch `2 sqrt(n) eps^(1/n)`. The objective is
//! evaluated on all surviving candidates; the reported extrema are within
//! `2 omega sqrt(n) eps^(1/n)` of the true optima, with `omega` a Bernstein
//! Lipschitz bound for the objective.
//!
//! The inner solve refines until every ambiguous region has per-axis width
//! at most `2 eps^(1/n)`, which keeps candidate regions small in every
//! direction (volume alone would admit long thin boxes whose centers are
//! far from their contents) and makes the error bound hold for box-shaped
//! regions.

use std::collections::BTreeSet;

use crate::parse::ProblemFile;
use crate::poly::{IntervalBox, Polynomial};
use crate::solver::{self, Endgame, Policy, SolverConfig};
use crate::{par, Error, Result, TAU};

#[derive(Clone, Debug)]
pub struct OptConfig {
    /// The accuracy knob: candidate regions shrink below this volume and
    /// the boundary lattice pitch is `2 sqrt(n) epsilon^(1/n)`.
    pub epsilon: f64,
    pub policy: Policy,
    pub max_iterations: u64,
}

impl OptConfig {
    pub fn for_problem(problem: &ProblemFile) -> Self {
        Self {
            epsilon: problem.epsilon,
            policy: Policy::RoundRobin,
            max_iterations: 2_000_000,
        }
    }
}

/// Extremum estimates with the accompanying error bound
/// `2 omega sqrt(n) eps^(1/n)`.
#[derive(Clone, Debug)]
pub struct OptResult {
    pub p_min_hat: f64,
    pub x_min: Vec<f64>,
    pub p_max_hat: f64,
    pub x_max: Vec<f64>,
    pub error_bound: f64,
    pub critical_regions: usize,
    pub boundary_samples: usize,
}

impl OptResult {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "min": {"value": self.p_min_hat, "point": self.x_min},
            "max": {"value": self.p_max_hat, "point": self.x_max},
            "error_bound": self.error_bound,
            "stats": {
                "critical_regions": self.critical_regions,
                "boundary_samples": self.boundary_samples,
            },
        })
    }
}

#[derive(Clone, Debug)]
pub enum OptOutcome {
    Ok(OptResult),
    /// No candidate satisfied the user constraints anywhere.
    Infeasible,
}

/// The `2n` constraints `d p/d x_i <= 0` and `-d p/d x_i <= 0`, interleaved
/// per coordinate; simultaneous satisfaction pins the gradient to zero.
pub fn grad_constraints(p: &Polynomial) -> Vec<Polynomial> {
    let mut out = Vec::with_capacity(2 * p.n());
    for i in 0..p.n() {
        let d = p.partial(i);
        out.push(d.clone());
        out.push(d.neg());
    }
    out
}

/// Axis-aligned lattice over every face of the box with step at most
/// `2 sqrt(n) eps^(1/n)` per direction, face corners always included.
/// Points are deduplicated; for `n = 1` the faces degenerate to the two
/// endpoints.
pub fn sample_boundaries(region: &IntervalBox, eps: f64) -> Vec<Vec<f64>> {
    let n = region.n();
    let h = boundary_pitch(n, eps);
    let mut seen: BTreeSet<Vec<u64>> = BTreeSet::new();
    let mut out = Vec::new();
    let mut push = |x: Vec<f64>| {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if seen.insert(key) {
            out.push(x);
        }
    };
    for dim in 0..n {
        for side in 0..2 {
            let fixed = if side == 0 {
                region.lower()[dim]
            } else {
                region.upper()[dim]
            };
            // Lattice over the remaining coordinates.
            let others: Vec<usize> = (0..n).filter(|i| *i != dim).collect();
            let counts: Vec<usize> = others
                .iter()
                .map(|&i| {
                    let w = region.width(i);
                    if w == 0.0 {
                        1
                    } else {
                        ((w / h).ceil() as usize).max(1) + 1
                    }
                })
                .collect();
            let total: usize = counts.iter().product();
            for mut t in 0..total {
                let mut x = vec![0.0; n];
                x[dim] = fixed;
                for (&i, &count) in others.iter().zip(&counts) {
                    let j = t % count;
                    t /= count;
                    x[i] = if count == 1 {
                        region.lower()[i]
                    } else if j == count - 1 {
                        region.upper()[i]
                    } else {
                        region.lower()[i] + region.width(i) * j as f64 / (count - 1) as f64
                    };
                }
                push(x);
            }
        }
    }
    out
}

pub fn boundary_pitch(n: usize, eps: f64) -> f64 {
    2.0 * (n as f64).sqrt() * eps.powf(1.0 / n as f64)
}

/// Minimizes and maximizes the problem's objective over its box subject to
/// its constraints.
pub fn optimize(problem: &ProblemFile, cfg: &OptConfig) -> Result<OptOutcome> {
    let p = problem
        .objective
        .as_ref()
        .ok_or(Error::MissingObjective)?
        .clone();
    let n = problem.box_ref().n();
    let eps = cfg.epsilon;
    let width_cap = 2.0 * eps.powf(1.0 / n as f64);

    let mut constraints = grad_constraints(&p);
    constraints.extend(problem.constraints.iter().cloned());
    let inner = ProblemFile::new(
        problem.variables.clone(),
        problem.box_ref().clone(),
        constraints,
        None,
        problem.epsilon,
    )?;

    let max_ref_width = problem
        .box_ref()
        .widths()
        .into_iter()
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let solver_cfg = SolverConfig {
        epsilon: eps,
        epsilon_absolute: true,
        max_width: Some(width_cap),
        max_iterations: cfg.max_iterations,
        endgame: Endgame::BranchPrune {
            delta: (eps.powf(1.0 / n as f64) / max_ref_width).clamp(1e-9, 0.5),
            max_depth: 60,
            leaf_budget: 2_000_000,
        },
        policy: cfg.policy.clone(),
        workers: 1,
        classify_depth: crate::abstraction::DEFAULT_CLASSIFY_DEPTH,
        record_trace: false,
    };
    let (_report, inventory) = solver::solve_with_inventory(&inner, &solver_cfg)?;

    // Candidate points: centers of gradient-feasible regions, endgame
    // witnesses, centers of undecided leaves (they may still hide critical
    // points), and the boundary lattice.
    let mut candidates: Vec<Vec<f64>> = Vec::new();
    for region in &inventory.neg_regions {
        candidates.push(region.center());
    }
    for (region, point) in &inventory.endgame_sat {
        candidates.push(point.clone());
        candidates.push(region.center());
    }
    for region in &inventory.undecided {
        candidates.push(region.center());
    }
    let critical_regions = candidates.len();
    let boundary = sample_boundaries(problem.box_ref(), eps);
    let boundary_samples = boundary.len();
    candidates.extend(boundary);

    // Only points satisfying the user constraints may be reported.
    let feasible: Vec<Vec<f64>> = par::map_vec(&candidates, |x| {
        let ok = problem
            .constraints
            .iter()
            .all(|c| c.evaluate(x).map(|v| v <= TAU).unwrap_or(false));
        if ok {
            Some(x.clone())
        } else {
            None
        }
    })
    .into_iter()
    .flatten()
    .collect();

    if feasible.is_empty() {
        return Ok(OptOutcome::Infeasible);
    }

    let values = par::map_vec(&feasible, |x| p.evaluate(x).expect("dims match"));
    let mut min_at = 0;
    let mut max_at = 0;
    for i in 1..values.len() {
        if values[i] < values[min_at] {
            min_at = i;
        }
        if values[i] > values[max_at] {
            max_at = i;
        }
    }

    let omega = p.lipschitz_bound(problem.box_ref())?;
    let error_bound = 2.0 * omega * (n as f64).sqrt() * eps.powf(1.0 / n as f64);

    Ok(OptOutcome::Ok(OptResult {
        p_min_hat: values[min_at],
        x_min: feasible[min_at].clone(),
        p_max_hat: values[max_at],
        x_max: feasible[max_at].clone(),
        error_bound,
        critical_regions,
        boundary_samples,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_problem_str;

    fn opt_src(src: &str) -> OptResult {
        let problem = parse_problem_str(src).unwrap();
        let cfg = OptConfig::for_problem(&problem);
        match optimize(&problem, &cfg).unwrap() {
            OptOutcome::Ok(r) => r,
            OptOutcome::Infeasible => panic!("unexpected infeasible"),
        }
    }

    #[test]
    fn grad_constraint_pairs() {
        let p = Polynomial::new(1, [(vec![2], 1.0)]).unwrap();
        let g = grad_constraints(&p);
        assert_eq!(g.len(), 2);
        assert_eq!(g[0], Polynomial::new(1, [(vec![1], 2.0)]).unwrap());
        assert_eq!(g[1], Polynomial::new(1, [(vec![1], -2.0)]).unwrap());
    }

    #[test]
    fn affine_gradient_system_is_unsat() {
        // Nonzero constant slope: the pair c <= 0 and -c <= 0 cannot hold.
        let p = Polynomial::var(2, 0).scale(3.0);
        let region = IntervalBox::uniform(2, -1.0, 1.0).unwrap();
        let problem = ProblemFile::new(
            vec!["x".into(), "y".into()],
            region,
            grad_constraints(&p),
            None,
            1e-3,
        )
        .unwrap();
        let report = solver::solve(&problem, &SolverConfig::for_problem(&problem)).unwrap();
        assert_eq!(report.outcome.status(), "unsat");
    }

    #[test]
    fn critical_region_contains_origin() {
        let p = Polynomial::new(2, [(vec![2, 0], 1.0), (vec![0, 2], 1.0)]).unwrap();
        let region = IntervalBox::uniform(2, -1.0, 1.0).unwrap();
        let problem = ProblemFile::new(
            vec!["x".into(), "y".into()],
            region,
            grad_constraints(&p),
            None,
            1e-3,
        )
        .unwrap();
        let mut cfg = SolverConfig::for_problem(&problem);
        cfg.epsilon_absolute = true;
        cfg.max_width = Some(0.2);
        let (_, inventory) = solver::solve_with_inventory(&problem, &cfg).unwrap();
        let near_origin = inventory
            .neg_regions
            .iter()
            .chain(inventory.undecided.iter())
            .chain(inventory.endgame_sat.iter().map(|(r, _)| r))
            .any(|r| r.contains(&[0.0, 0.0], 1e-9));
        assert!(near_origin, "no returned region contains the origin");
    }

    #[test]
    fn boundary_samples_1d_are_endpoints() {
        let b = IntervalBox::new(vec![0.0], vec![1.0]).unwrap();
        let pts = sample_boundaries(&b, 1e-3);
        assert_eq!(pts, vec![vec![0.0], vec![1.0]]);
    }

    #[test]
    fn boundary_samples_square_with_half_pitch() {
        // eps chosen so the pitch is exactly 1/2: each edge gets {0, .5, 1}
        // and corner dedup leaves 8 points.
        let eps = (0.5f64 / (2.0 * 2f64.sqrt())).powi(2);
        let b = IntervalBox::uniform(2, 0.0, 1.0).unwrap();
        assert!((boundary_pitch(2, eps) - 0.5).abs() < 1e-12);
        let pts = sample_boundaries(&b, eps);
        assert_eq!(pts.len(), 8);
    }

    #[test]
    fn boundary_spacing_respects_pitch() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let n = rng.gen_range(2..=3usize);
            let b = crate::oracle::random_box(&mut rng, n, -2.0, 2.0);
            let eps = 10f64.powf(rng.gen_range(-4.0..-1.0));
            let h = boundary_pitch(n, eps);
            let pts = sample_boundaries(&b, eps);
            // Per face: each sample's nearest same-face neighbour must be
            // within one lattice step in every stepped coordinate.
            for dim in 0..n {
                for side in 0..2 {
                    let fixed = if side == 0 { b.lower()[dim] } else { b.upper()[dim] };
                    let face: Vec<&Vec<f64>> =
                        pts.iter().filter(|x| x[dim] == fixed).collect();
                    if face.len() < 2 {
                        continue;
                    }
                    for x in &face {
                        let nearest = face
                            .iter()
                            .filter(|y| **y != *x)
                            .map(|y| {
                                x.iter()
                                    .zip(y.iter())
                                    .map(|(a, b)| (a - b) * (a - b))
                                    .sum::<f64>()
                                    .sqrt()
                            })
                            .fold(f64::INFINITY, f64::min);
                        assert!(
                            nearest <= h + 1e-12,
                            "isolated sample at {x:?} (nearest {nearest}, pitch {h})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn min_of_square_within_bound() {
        let r = opt_src("vars x\nbox -1 1\nobjective x^2\nepsilon 0.0001");
        // omega = 2 on [-1,1], so the bound is 2 * 2 * sqrt(1) * 1e-4.
        assert!((r.error_bound - 4e-4).abs() < 1e-12);
        assert!(r.p_min_hat >= 0.0 && r.p_min_hat <= r.error_bound);
        assert!((r.p_max_hat - 1.0).abs() <= r.error_bound);
    }

    #[test]
    fn cubic_max_attained_at_critical_point_and_corner() {
        let r = opt_src("vars x\nbox -2 2\nobjective x^3 - 3*x\nepsilon 0.0001");
        assert!((r.p_max_hat - 2.0).abs() <= r.error_bound, "{r:?}");
        assert!((r.p_min_hat + 2.0).abs() <= r.error_bound, "{r:?}");
    }

    #[test]
    fn constrained_corner_optimum() {
        let r = opt_src("vars x y\nbox 0 1\nbox 0 1\nobjective x + y\nconstraint -x\nepsilon 0.001");
        assert!(r.p_min_hat.abs() <= r.error_bound + 1e-12);
        // Extremizers must satisfy the constraint.
        assert!(-r.x_min[0] <= TAU);
        assert!(-r.x_max[0] <= TAU);
    }

    #[test]
    fn infeasible_constraints_reported() {
        let problem =
            parse_problem_str("vars x\nbox 0 1\nobjective x\nconstraint x + 1\n").unwrap();
        let cfg = OptConfig::for_problem(&problem);
        assert!(matches!(
            optimize(&problem, &cfg).unwrap(),
            OptOutcome::Infeasible
        ));
    }

    #[test]
    fn missing_objective_is_an_error() {
        let problem = parse_problem_str("vars x\nbox 0 1\nconstraint x\n").unwrap();
        let cfg = OptConfig::for_problem(&problem);
        assert!(matches!(
            optimize(&problem, &cfg),
            Err(Error::MissingObjective)
        ));
    }
}
