//! Bounded-time template-polyhedron reachability for discrete polynomial
//! maps `x_{k+1} = f(x_k)`.
//!
//! Each step computes, for every template row `a`, a sound upper bound on
//! `max a . f(x)` over the current polytope by minimizing the composed
//! polynomial `-a . f` with the optimizer over the polytope's bounding box,
//! subject to its non-axis faces as linear constraints. The face offset is
//! inflated by the optimizer's error bound, so every true successor state
//! stays inside the reported polytope.
//!
//! Templates always contain the axis rows `+e_i` / `-e_i`; the bounding box
//! and the reported volume read off those rows directly.

use std::fmt::Write as _;
use std::path::Path;

use crate::optimize::{self, OptConfig, OptOutcome};
use crate::parse;
use crate::poly::{IntervalBox, Polynomial};
use crate::solver::Policy;
use crate::{par, Error, Result};

/// H-representation polytope `{x : A x <= b}`. The first `2n` rows of `A`
/// are required to be `+e_i` then `-e_i`.
#[derive(Clone, Debug)]
pub struct PolytopeH {
    a: Vec<Vec<f64>>,
    b: Vec<f64>,
}

impl PolytopeH {
    pub fn new(a: Vec<Vec<f64>>, b: Vec<f64>) -> Result<Self> {
        if a.len() != b.len() || a.is_empty() {
            return Err(Error::MissingAxisTemplate);
        }
        let n = a[0].len();
        if a.len() < 2 * n {
            return Err(Error::MissingAxisTemplate);
        }
        for i in 0..n {
            let plus_ok = a[i].iter().enumerate().all(|(j, v)| {
                if j == i {
                    *v == 1.0
                } else {
                    *v == 0.0
                }
            });
            let minus_ok = a[n + i].iter().enumerate().all(|(j, v)| {
                if j == i {
                    *v == -1.0
                } else {
                    *v == 0.0
                }
            });
            if !plus_ok || !minus_ok {
                return Err(Error::MissingAxisTemplate);
            }
        }
        let p = Self { a, b };
        p.bounding_box()?;
        Ok(p)
    }

    /// Polytope for a box under the given template: axis offsets from the
    /// box, non-axis offsets from the support function of the box.
    pub fn from_box(region: &IntervalBox, template: &[Vec<f64>]) -> Result<Self> {
        let b = template
            .iter()
            .map(|row| {
                // Support function of the box in direction `row`.
                row.iter()
                    .enumerate()
                    .map(|(i, c)| {
                        if *c >= 0.0 {
                            c * region.upper()[i]
                        } else {
                            c * region.lower()[i]
                        }
                    })
                    .sum()
            })
            .collect();
        Self::new(template.to_vec(), b)
    }

    pub fn rows(&self) -> usize {
        self.a.len()
    }

    pub fn n(&self) -> usize {
        self.a[0].len()
    }

    pub fn a(&self) -> &[Vec<f64>] {
        &self.a
    }

    pub fn b(&self) -> &[f64] {
        &self.b
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.a
            .iter()
            .zip(&self.b)
            .all(|(row, b)| row.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() <= b + tol)
    }

    /// The box over-approximation read off the mandatory axis rows:
    /// `lower_i = -b[n+i]`, `upper_i = b[i]`.
    pub fn bounding_box(&self) -> Result<IntervalBox> {
        let n = self.n();
        let mut lower = Vec::with_capacity(n);
        let mut upper = Vec::with_capacity(n);
        for i in 0..n {
            let lo = -self.b[n + i];
            let hi = self.b[i];
            if !(lo <= hi) {
                return Err(Error::InvertedFace { dim: i });
            }
            lower.push(lo);
            upper.push(hi);
        }
        IntervalBox::new(lower, upper)
    }
}

/// Box over-approximation of a polytope; see [`PolytopeH::bounding_box`].
pub fn bounding_box(q: &PolytopeH) -> Result<IntervalBox> {
    q.bounding_box()
}

/// Volume proxy: the volume of the axis-row box. Consistent across steps
/// and templates, and exact for axis templates.
pub fn volume(q: &PolytopeH) -> f64 {
    q.bounding_box().map(|b| b.volume()).unwrap_or(0.0)
}

/// Polynomial map: one component per state dimension.
#[derive(Clone, Debug)]
pub struct PolyMap {
    components: Vec<Polynomial>,
}

impl PolyMap {
    pub fn new(components: Vec<Polynomial>) -> Result<Self> {
        let n = components.len();
        for (i, c) in components.iter().enumerate() {
            if c.n() != n {
                return Err(Error::Config(format!(
                    "map component {i} has {} variables, expected {n}",
                    c.n()
                )));
            }
        }
        Ok(Self { components })
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn components(&self) -> &[Polynomial] {
        &self.components
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.components.iter().map(|c| c.evaluate(x)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TemplateKind {
    Axis,
    AxisOctagon,
}

/// Template rows: `+e_i`, `-e_i`, and for the octagonal variant all
/// pairwise `±(e_i ± e_j)`.
pub fn template_matrix(kind: TemplateKind, n: usize) -> Vec<Vec<f64>> {
    let mut rows = Vec::new();
    for i in 0..n {
        let mut r = vec![0.0; n];
        r[i] = 1.0;
        rows.push(r);
    }
    for i in 0..n {
        let mut r = vec![0.0; n];
        r[i] = -1.0;
        rows.push(r);
    }
    if kind == TemplateKind::AxisOctagon {
        for i in 0..n {
            for j in (i + 1)..n {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    let mut r = vec![0.0; n];
                    r[i] = si;
                    r[j] = sj;
                    rows.push(r);
                }
            }
        }
    }
    rows
}

#[derive(Clone, Debug)]
pub struct ReachStep {
    pub polytope: PolytopeH,
    /// Per-face error-bound slack added to keep the face sound.
    pub slack: Vec<f64>,
}

/// One image step: for each row of the next template, minimize
/// `-row . f(x)` over the bounding box of `q` subject to the non-axis faces
/// of `q`, then inflate the offset by the optimizer's error bound.
pub fn reach_step(
    q: &PolytopeH,
    f: &PolyMap,
    template: &[Vec<f64>],
    epsilon: f64,
    policy: &Policy,
) -> Result<ReachStep> {
    let n = f.n();
    if q.n() != n {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: q.n(),
        });
    }
    let rk = q.bounding_box()?;
    // Non-axis faces enter the per-face optimizations as constraints.
    let mut face_constraints = Vec::new();
    for (row, b) in q.a().iter().zip(q.b()).skip(2 * n) {
        let mut poly = Polynomial::constant(n, -b);
        for (j, c) in row.iter().enumerate() {
            if *c != 0.0 {
                poly = poly.add(&Polynomial::var(n, j).scale(*c))?;
            }
        }
        face_constraints.push(poly);
    }
    let variables: Vec<String> = (0..n).map(|i| format!("x{}", i + 1)).collect();

    let rows: Vec<Vec<f64>> = template.to_vec();
    let results = par::map_vec(&rows, |row| -> Result<(f64, f64)> {
        // g(x) = -(row . f)(x); min g = -(max row . f).
        let mut g = Polynomial::zero(n);
        for (j, c) in row.iter().enumerate() {
            if *c != 0.0 {
                g = g.add(&f.components()[j].scale(-c))?;
            }
        }
        let problem = parse::ProblemFile::new(
            variables.clone(),
            rk.clone(),
            face_constraints.clone(),
            Some(g),
            epsilon,
        )?;
        let cfg = OptConfig {
            epsilon,
            policy: policy.clone(),
            ..OptConfig::for_problem(&problem)
        };
        match optimize::optimize(&problem, &cfg)? {
            OptOutcome::Ok(r) => Ok((r.p_min_hat, r.error_bound)),
            OptOutcome::Infeasible => Err(Error::Config("empty polytope".into())),
        }
    });
    let mut b_next = Vec::with_capacity(rows.len());
    let mut slack = Vec::with_capacity(rows.len());
    for r in results {
        let (p_min, err) = r?;
        // -b <= min g  with min g >= p_min - err, so b = -(p_min - err).
        b_next.push(-(p_min - err));
        slack.push(err);
    }
    Ok(ReachStep {
        polytope: PolytopeH::new(rows, b_next)?,
        slack,
    })
}

#[derive(Clone, Debug)]
pub struct ReachResult {
    /// `polytopes[0]` is the initial set; one entry per step after it.
    pub polytopes: Vec<PolytopeH>,
    /// Per-step, per-face slack from the error-bound inflation.
    pub slacks: Vec<Vec<f64>>,
    /// Step index at which the set became empty, if it did.
    pub terminated_empty: Option<usize>,
}

/// Iterates [`reach_step`] `k` times from `q0`.
pub fn reach(
    q0: &PolytopeH,
    f: &PolyMap,
    template: &[Vec<f64>],
    k: usize,
    epsilon: f64,
    policy: &Policy,
) -> Result<ReachResult> {
    let mut polytopes = vec![q0.clone()];
    let mut slacks = Vec::new();
    for step in 0..k {
        match reach_step(polytopes.last().unwrap(), f, template, epsilon, policy) {
            Ok(s) => {
                slacks.push(s.slack.clone());
                polytopes.push(s.polytope);
            }
            Err(Error::Config(msg)) if msg == "empty polytope" => {
                return Ok(ReachResult {
                    polytopes,
                    slacks,
                    terminated_empty: Some(step),
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(ReachResult {
        polytopes,
        slacks,
        terminated_empty: None,
    })
}

/// CSV: one line per step with every face offset and the box-volume proxy.
pub fn reach_csv(result: &ReachResult) -> String {
    let mut out = String::from("step,face,b,volume\n");
    for (k, q) in result.polytopes.iter().enumerate() {
        let vol = volume(q);
        for (i, b) in q.b().iter().enumerate() {
            writeln!(out, "{k},{i},{b},{vol}").unwrap();
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Model files
// ---------------------------------------------------------------------------

/// A reachability model: `vars` names, one `map` line per component,
/// `init <lo> <hi>` per variable, `template axis|axis+octagon`, `steps K`,
/// optional `epsilon`.
#[derive(Clone, Debug)]
pub struct ReachModel {
    pub variables: Vec<String>,
    pub map: PolyMap,
    pub template: TemplateKind,
    pub init: IntervalBox,
    pub steps: usize,
    pub epsilon: f64,
}

impl ReachModel {
    pub fn initial_polytope(&self) -> Result<PolytopeH> {
        PolytopeH::from_box(&self.init, &template_matrix(self.template, self.init.n()))
    }
}

pub fn parse_model(path: impl AsRef<Path>) -> Result<ReachModel> {
    parse_model_str(&std::fs::read_to_string(path)?)
}

pub fn parse_model_str(text: &str) -> Result<ReachModel> {
    let mut variables: Option<Vec<String>> = None;
    let mut maps: Vec<Polynomial> = Vec::new();
    let mut template = TemplateKind::Axis;
    let mut lowers = Vec::new();
    let mut uppers = Vec::new();
    let mut steps: Option<usize> = None;
    let mut epsilon = 1e-3;

    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (keyword, rest) = match line.split_once(char::is_whitespace) {
            Some((k, r)) => (k, r.trim()),
            None => (line, ""),
        };
        let bad = |msg: String| Error::ModelFormat(format!("line {}: {msg}", lineno + 1));
        match keyword {
            "vars" => {
                variables = Some(rest.split_whitespace().map(str::to_string).collect());
            }
            "map" => {
                let vars = variables
                    .as_ref()
                    .ok_or_else(|| bad("map before vars".into()))?;
                maps.push(parse::parse_expr(rest, vars).map_err(Error::Parse)?);
            }
            "template" => {
                template = match rest {
                    "axis" => TemplateKind::Axis,
                    "axis+octagon" => TemplateKind::AxisOctagon,
                    other => return Err(bad(format!("unknown template `{other}`"))),
                };
            }
            "init" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(bad("init expects `init <lo> <hi>`".into()));
                }
                let lo: f64 = parts[0].parse().map_err(|_| bad("bad init number".into()))?;
                let hi: f64 = parts[1].parse().map_err(|_| bad("bad init number".into()))?;
                lowers.push(lo);
                uppers.push(hi);
            }
            "steps" => {
                steps = Some(rest.parse().map_err(|_| bad("bad step count".into()))?);
            }
            "epsilon" => {
                epsilon = rest.parse().map_err(|_| bad("bad epsilon".into()))?;
            }
            other => return Err(bad(format!("unknown directive `{other}`"))),
        }
    }
    let variables = variables.ok_or_else(|| Error::ModelFormat("missing vars".into()))?;
    let n = variables.len();
    if maps.len() != n {
        return Err(Error::ModelFormat(format!(
            "expected {n} map lines, found {}",
            maps.len()
        )));
    }
    if lowers.len() != n {
        return Err(Error::ModelFormat(format!(
            "expected {n} init lines, found {}",
            lowers.len()
        )));
    }
    Ok(ReachModel {
        variables,
        map: PolyMap::new(maps)?,
        template,
        init: IntervalBox::new(lowers, uppers)?,
        steps: steps.ok_or_else(|| Error::ModelFormat("missing steps".into()))?,
        epsilon,
    })
}
