//! Benchmark suites: the seven classic polynomial-system feasibility
//! problems, the scalability smoke instances, and the random-problem
//! generator shared by tests and the `bench` subcommand.
//!
//! The seven named problems are standard global-optimization/polynomial-
//! system test cases (Schwefel, reaction-diffusion, Caprasse,
//! Lotka-Volterra, Butcher, magnetism, heart dipole); each file carries its
//! domain and a feasibility threshold chosen so the verdict is robust, and
//! the expected verdicts are frozen as golden data after cross-checking
//! against the brute-force oracle and the optimizer's bounds.

use rand::Rng;

use crate::oracle;
use crate::parse::{self, ProblemFile};
use crate::poly::Polynomial;

/// A named benchmark instance with its frozen expected verdict.
#[derive(Clone, Copy, Debug)]
pub struct Benchmark {
    pub name: &'static str,
    pub source: &'static str,
    pub expected: &'static str,
}

pub const PVS_SUITE: [Benchmark; 7] = [
    Benchmark {
        name: "schwefel",
        source: include_str!("../../../problems/pvs/schwefel.txt"),
        expected: "unsat",
    },
    Benchmark {
        name: "reaction_diffusion",
        source: include_str!("../../../problems/pvs/reaction_diffusion.txt"),
        expected: "sat",
    },
    Benchmark {
        name: "caprasse",
        source: include_str!("../../../problems/pvs/caprasse.txt"),
        expected: "sat",
    },
    Benchmark {
        name: "lotka_volterra",
        source: include_str!("../../../problems/pvs/lotka_volterra.txt"),
        expected: "unsat",
    },
    Benchmark {
        name: "butcher",
        source: include_str!("../../../problems/pvs/butcher.txt"),
        expected: "sat",
    },
    Benchmark {
        name: "magnetism",
        source: include_str!("../../../problems/pvs/magnetism.txt"),
        expected: "unsat",
    },
    Benchmark {
        name: "heart_dipole",
        source: include_str!("../../../problems/pvs/heart_dipole.txt"),
        expected: "sat",
    },
];

pub const SCALING_SUITE: [Benchmark; 2] = [
    Benchmark {
        name: "order200_2var",
        source: include_str!("../../../problems/scaling/order200_2var.txt"),
        expected: "sat",
    },
    Benchmark {
        name: "order6_10var",
        source: include_str!("../../../problems/scaling/order6_10var.txt"),
        expected: "unsat",
    },
];

pub fn parse_benchmark(b: &Benchmark) -> ProblemFile {
    parse::parse_problem_str(b.source).expect("shipped benchmark parses")
}

/// Random feasibility problems over `n <= n_max` variables with polynomial
/// total degree at most `deg_max` and up to `m_max` constraints,
/// deterministic in the seed.
pub fn random_feasibility_problem(
    seed: u64,
    index: u64,
    n_max: usize,
    deg_max: u32,
    m_max: usize,
) -> ProblemFile {
    let mut rng = oracle::stream(seed, index);
    let n = rng.gen_range(1..=n_max);
    let region = oracle::random_box(&mut rng, n, -1.5, 1.5);
    let m = rng.gen_range(1..=m_max);
    let constraints: Vec<Polynomial> = (0..m)
        .map(|_| oracle::random_polynomial(&mut rng, n, deg_max, 8))
        .collect();
    let variables = (0..n).map(|i| format!("x{}", i + 1)).collect();
    ProblemFile::new(variables, region, constraints, None, 1e-3)
        .expect("generated problem is well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_benchmarks_parse() {
        for b in PVS_SUITE.iter().chain(SCALING_SUITE.iter()) {
            let p = parse_benchmark(b);
            assert!(!p.constraints.is_empty(), "{} has no constraints", b.name);
        }
    }

    #[test]
    fn random_problems_are_reproducible() {
        let a = random_feasibility_problem(3, 7, 2, 4, 3);
        let b = random_feasibility_problem(3, 7, 2, 4, 3);
        assert_eq!(a.constraints, b.constraints);
        assert_eq!(a.box_ref(), b.box_ref());
    }
}
