//! Text frontend: arithmetic expressions over named variables, the
//! line-oriented problem file format, a deterministic printer, and SMT-LIB2
//! export.
//!
//! Problem files are UTF-8 with one directive per line; `#` starts a
//! comment anywhere:
//!
//! ```text
//! vars x1 x2          # ordered variable names
//! box -1 1            # one line per variable, same order as vars
//! box -1 1
//! constraint x1^2 + x2^2 - 1     # meaning p(x) <= 0, repeatable
//! objective x1 + x2              # optional
//! epsilon 1e-3                   # optional, defaults to 1e-3
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::poly::{IntervalBox, MultiIndex, Polynomial};
use crate::{Error, Result};

pub const DEFAULT_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, thiserror::Error)]
#[error("line {line}, column {col}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub msg: String,
}

impl ParseError {
    fn new(line: usize, col: usize, msg: impl Into<String>) -> Self {
        Self {
            line,
            col,
            msg: msg.into(),
        }
    }
}

/// A feasibility/optimization problem: box, constraints `p_i(x) <= 0`, an
/// optional objective, and the accuracy knob `epsilon`.
#[derive(Clone, Debug)]
pub struct ProblemFile {
    pub variables: Vec<String>,
    region: IntervalBox,
    pub constraints: Vec<Polynomial>,
    pub objective: Option<Polynomial>,
    pub epsilon: f64,
}

impl ProblemFile {
    pub fn new(
        variables: Vec<String>,
        region: IntervalBox,
        constraints: Vec<Polynomial>,
        objective: Option<Polynomial>,
        epsilon: f64,
    ) -> Result<Self> {
        let n = variables.len();
        if region.n() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: region.n(),
            });
        }
        for (i, p) in constraints.iter().enumerate() {
            if p.n() != n {
                return Err(Error::Config(format!(
                    "constraint[{i}]: expected {n} variables, got {}",
                    p.n()
                )));
            }
        }
        if let Some(p) = &objective {
            if p.n() != n {
                return Err(Error::Config(format!(
                    "objective: expected {n} variables, got {}",
                    p.n()
                )));
            }
        }
        if !(epsilon > 0.0) {
            return Err(Error::Config(format!("epsilon must be > 0, got {epsilon}")));
        }
        Ok(Self {
            variables,
            region,
            constraints,
            objective,
            epsilon,
        })
    }

    pub fn box_ref(&self) -> &IntervalBox {
        &self.region
    }
}

// ---------------------------------------------------------------------------
// Expression lexer and parser (precedence climbing)
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
enum Tok {
    Num(f64),
    Ident(String),
    Plus,
    Minus,
    Star,
    Caret,
    LParen,
    RParen,
}

struct Lexer<'a> {
    src: &'a [u8],
    pos: usize,
    line: usize,
    col: usize,
    toks: Vec<(Tok, usize, usize)>,
}

impl<'a> Lexer<'a> {
    fn run(text: &'a str, line_offset: usize) -> std::result::Result<Vec<(Tok, usize, usize)>, ParseError> {
        let mut lx = Lexer {
            src: text.as_bytes(),
            pos: 0,
            line: line_offset,
            col: 1,
            toks: Vec::new(),
        };
        lx.lex()?;
        Ok(lx.toks)
    }

    fn lex(&mut self) -> std::result::Result<(), ParseError> {
        while self.pos < self.src.len() {
            let c = self.src[self.pos];
            let (line, col) = (self.line, self.col);
            match c {
                b' ' | b'\t' | b'\r' => self.advance(),
                b'\n' => {
                    self.pos += 1;
                    self.line += 1;
                    self.col = 1;
                }
                b'+' => self.push1(Tok::Plus),
                b'-' => self.push1(Tok::Minus),
                b'*' => self.push1(Tok::Star),
                b'^' => self.push1(Tok::Caret),
                b'(' => self.push1(Tok::LParen),
                b')' => self.push1(Tok::RParen),
                b'0'..=b'9' | b'.' => {
                    let start = self.pos;
                    while self.pos < self.src.len()
                        && matches!(self.src[self.pos], b'0'..=b'9' | b'.')
                    {
                        self.advance();
                    }
                    // Scientific notation, accepted so printed shortest
                    // round-trip decimals always reparse.
                    if self.pos < self.src.len() && matches!(self.src[self.pos], b'e' | b'E') {
                        let mark = (self.pos, self.col);
                        self.advance();
                        if self.pos < self.src.len() && matches!(self.src[self.pos], b'+' | b'-') {
                            self.advance();
                        }
                        if self.pos < self.src.len() && self.src[self.pos].is_ascii_digit() {
                            while self.pos < self.src.len() && self.src[self.pos].is_ascii_digit()
                            {
                                self.advance();
                            }
                        } else {
                            self.pos = mark.0;
                            self.col = mark.1;
                        }
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    let v: f64 = text.parse().map_err(|_| {
                        ParseError::new(line, col, format!("malformed number `{text}`"))
                    })?;
                    self.toks.push((Tok::Num(v), line, col));
                }
                b'A'..=b'Z' | b'a'..=b'z' | b'_' => {
                    let start = self.pos;
                    while self.pos < self.src.len()
                        && matches!(self.src[self.pos], b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'_')
                    {
                        self.advance();
                    }
                    let text = std::str::from_utf8(&self.src[start..self.pos]).unwrap();
                    self.toks.push((Tok::Ident(text.to_string()), line, col));
                }
                other => {
                    return Err(ParseError::new(
                        line,
                        col,
                        format!("unexpected character `{}`", other as char),
                    ))
                }
            }
        }
        Ok(())
    }

    fn push1(&mut self, t: Tok) {
        self.toks.push((t, self.line, self.col));
        self.advance();
    }

    fn advance(&mut self) {
        self.pos += 1;
        self.col += 1;
    }
}

struct ExprParser<'a> {
    toks: &'a [(Tok, usize, usize)],
    pos: usize,
    vars: &'a BTreeMap<&'a str, usize>,
    n: usize,
    end: (usize, usize),
}

const PREC_ADD: u8 = 1;
const PREC_MUL: u8 = 2;

impl<'a> ExprParser<'a> {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(t, _, _)| t)
    }

    fn here(&self) -> (usize, usize) {
        self.toks
            .get(self.pos)
            .map(|(_, l, c)| (*l, *c))
            .unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(t, _, _)| t.clone());
        self.pos += 1;
        t
    }

    fn parse_expr(&mut self, min_prec: u8) -> std::result::Result<Polynomial, ParseError> {
        let mut lhs = self.parse_unary()?;
        loop {
            let (op_prec, op) = match self.peek() {
                Some(Tok::Plus) => (PREC_ADD, Tok::Plus),
                Some(Tok::Minus) => (PREC_ADD, Tok::Minus),
                Some(Tok::Star) => (PREC_MUL, Tok::Star),
                _ => break,
            };
            if op_prec < min_prec {
                break;
            }
            self.bump();
            let rhs = self.parse_expr(op_prec + 1)?;
            lhs = match op {
                Tok::Plus => lhs.add(&rhs).expect("same variable set"),
                Tok::Minus => lhs.sub(&rhs).expect("same variable set"),
                Tok::Star => lhs.mul(&rhs).expect("same variable set"),
                _ => unreachable!(),
            };
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> std::result::Result<Polynomial, ParseError> {
        if let Some(Tok::Minus) = self.peek() {
            self.bump();
            // Unary minus binds below `*`: -a*b parses as -(a*b).
            let inner = self.parse_expr(PREC_MUL)?;
            return Ok(inner.neg());
        }
        self.parse_pow()
    }

    fn parse_pow(&mut self) -> std::result::Result<Polynomial, ParseError> {
        let base = self.parse_atom()?;
        if let Some(Tok::Caret) = self.peek() {
            self.bump();
            let (line, col) = self.here();
            let negated = matches!(self.peek(), Some(Tok::Minus));
            if negated {
                self.bump();
            }
            // Right-associative: the exponent is itself parsed at power
            // level, then must reduce to a non-negative integer constant.
            let exp_poly = self.parse_pow()?;
            if exp_poly.total_degree() != 0 {
                return Err(ParseError::new(line, col, "exponent must be a constant"));
            }
            let v = exp_poly.evaluate(&vec![0.0; self.n]).unwrap();
            let v = if negated { -v } else { v };
            if v < 0.0 {
                return Err(ParseError::new(line, col, "negative exponent"));
            }
            if v.fract() != 0.0 || v > 10_000.0 {
                return Err(ParseError::new(
                    line,
                    col,
                    format!("exponent must be a small non-negative integer, got {v}"),
                ));
            }
            return Ok(base.integer_pow(v as u32));
        }
        Ok(base)
    }

    fn parse_atom(&mut self) -> std::result::Result<Polynomial, ParseError> {
        let (line, col) = self.here();
        match self.bump() {
            Some(Tok::Num(v)) => Ok(Polynomial::constant(self.n, v)),
            Some(Tok::Ident(name)) => match self.vars.get(name.as_str()) {
                Some(&i) => Ok(Polynomial::var(self.n, i)),
                None => Err(ParseError::new(
                    line,
                    col,
                    format!("unknown identifier `{name}`"),
                )),
            },
            Some(Tok::LParen) => {
                let inner = self.parse_expr(PREC_ADD)?;
                match self.bump() {
                    Some(Tok::RParen) => Ok(inner),
                    _ => Err(ParseError::new(line, col, "unbalanced parenthesis")),
                }
            }
            Some(t) => Err(ParseError::new(
                line,
                col,
                format!("unexpected token {t:?}"),
            )),
            None => Err(ParseError::new(line, col, "unexpected end of expression")),
        }
    }
}

/// Parses an arithmetic expression over `+ - * ^` with the given variable
/// names into a canonical sparse polynomial.
pub fn parse_expr(text: &str, variables: &[String]) -> std::result::Result<Polynomial, ParseError> {
    parse_expr_at(text, variables, 1)
}

fn parse_expr_at(
    text: &str,
    variables: &[String],
    line_offset: usize,
) -> std::result::Result<Polynomial, ParseError> {
    let toks = Lexer::run(text, line_offset)?;
    let vars: BTreeMap<&str, usize> = variables
        .iter()
        .enumerate()
        .map(|(i, v)| (v.as_str(), i))
        .collect();
    let end = toks
        .last()
        .map(|(_, l, c)| (*l, c + 1))
        .unwrap_or((line_offset, 1));
    let mut parser = ExprParser {
        toks: &toks,
        pos: 0,
        vars: &vars,
        n: variables.len(),
        end,
    };
    if toks.is_empty() {
        return Err(ParseError::new(line_offset, 1, "empty expression"));
    }
    let p = parser.parse_expr(PREC_ADD)?;
    if parser.pos != toks.len() {
        let (line, col) = parser.here();
        return Err(ParseError::new(line, col, "trailing input after expression"));
    }
    Ok(p)
}

// ---------------------------------------------------------------------------
// Printing
// ---------------------------------------------------------------------------

fn sorted_terms(p: &Polynomial) -> Vec<(MultiIndex, f64)> {
    let mut terms: Vec<(MultiIndex, f64)> = p.terms().map(|(k, c)| (k.clone(), c)).collect();
    terms.sort_by(|a, b| {
        let ta: u32 = a.0.iter().sum();
        let tb: u32 = b.0.iter().sum();
        tb.cmp(&ta).then_with(|| b.0.cmp(&a.0))
    });
    terms
}

fn monomial_string(idx: &[u32], variables: &[String]) -> String {
    let mut parts = Vec::new();
    for (i, &k) in idx.iter().enumerate() {
        match k {
            0 => {}
            1 => parts.push(variables[i].clone()),
            _ => parts.push(format!("{}^{}", variables[i], k)),
        }
    }
    parts.join("*")
}

/// Deterministic printer; `parse_expr(print_expr(p)) == p` termwise.
pub fn print_expr(p: &Polynomial, variables: &[String]) -> String {
    let terms = sorted_terms(p);
    if terms.is_empty() {
        return "0".to_string();
    }
    let mut out = String::new();
    for (i, (idx, c)) in terms.iter().enumerate() {
        let mono = monomial_string(idx, variables);
        let mag = c.abs();
        let body = if mono.is_empty() {
            format!("{mag}")
        } else if mag == 1.0 {
            mono
        } else {
            format!("{mag}*{mono}")
        };
        if i == 0 {
            if *c < 0.0 {
                out.push('-');
            }
        } else if *c < 0.0 {
            out.push_str(" - ");
        } else {
            out.push_str(" + ");
        }
        out.push_str(&body);
    }
    out
}

// ---------------------------------------------------------------------------
// Problem files
// ---------------------------------------------------------------------------

pub fn parse_problem(path: impl AsRef<Path>) -> Result<ProblemFile> {
    let text = std::fs::read_to_string(path)?;
    parse_problem_str(&text)
}

pub fn parse_problem_str(text: &str) -> Result<ProblemFile> {
    let mut variables: Option<Vec<String>> = None;
    let mut lowers: Vec<f64> = Vec::new();
    let mut uppers: Vec<f64> = Vec::new();
    let mut constraints: Vec<Polynomial> = Vec::new();
    let mut objective: Option<Polynomial> = None;
    let mut epsilon: Option<f64> = None;

    for (lineno, raw) in text.lines().enumerate() {
        let lineno = lineno + 1;
        let line = match raw.find('#') {
            Some(i) => &raw[..i],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (keyword, rest) = match line.split_once(char::is_whitespace) {
            Some((k, r)) => (k, r.trim()),
            None => (line, ""),
        };
        match keyword {
            "vars" => {
                if variables.is_some() {
                    return Err(ParseError::new(lineno, 1, "duplicate `vars` line").into());
                }
                let names: Vec<String> = rest.split_whitespace().map(str::to_string).collect();
                if names.is_empty() {
                    return Err(ParseError::new(lineno, 1, "vars: no names given").into());
                }
                for (i, name) in names.iter().enumerate() {
                    let ok = name
                        .chars()
                        .next()
                        .map(|c| c.is_ascii_alphabetic() || c == '_')
                        .unwrap_or(false)
                        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
                    if !ok {
                        return Err(ParseError::new(
                            lineno,
                            1,
                            format!("vars[{i}]: invalid name `{name}`"),
                        )
                        .into());
                    }
                    if names[..i].contains(name) {
                        return Err(ParseError::new(
                            lineno,
                            1,
                            format!("vars[{i}]: duplicate name `{name}`"),
                        )
                        .into());
                    }
                }
                variables = Some(names);
            }
            "box" => {
                let parts: Vec<&str> = rest.split_whitespace().collect();
                if parts.len() != 2 {
                    return Err(
                        ParseError::new(lineno, 1, "box: expected `box <lo> <hi>`").into()
                    );
                }
                let lo: f64 = parts[0].parse().map_err(|_| {
                    ParseError::new(lineno, 5, format!("box: bad number `{}`", parts[0]))
                })?;
                let hi: f64 = parts[1].parse().map_err(|_| {
                    ParseError::new(lineno, 5, format!("box: bad number `{}`", parts[1]))
                })?;
                if !(lo <= hi) {
                    return Err(ParseError::new(
                        lineno,
                        5,
                        format!("box[{}]: lower {lo} exceeds upper {hi}", lowers.len()),
                    )
                    .into());
                }
                lowers.push(lo);
                uppers.push(hi);
            }
            "constraint" | "objective" => {
                let vars = variables.as_ref().ok_or_else(|| {
                    ParseError::new(lineno, 1, format!("{keyword} before `vars`"))
                })?;
                let p = parse_expr_at(rest, vars, lineno)?;
                if keyword == "constraint" {
                    constraints.push(p);
                } else {
                    if objective.is_some() {
                        return Err(
                            ParseError::new(lineno, 1, "duplicate `objective` line").into()
                        );
                    }
                    objective = Some(p);
                }
            }
            "epsilon" => {
                let v: f64 = rest.parse().map_err(|_| {
                    ParseError::new(lineno, 9, format!("epsilon: bad number `{rest}`"))
                })?;
                if !(v > 0.0) {
                    return Err(
                        ParseError::new(lineno, 9, "epsilon: must be positive").into()
                    );
                }
                epsilon = Some(v);
            }
            other => {
                return Err(ParseError::new(
                    lineno,
                    1,
                    format!("unknown directive `{other}`"),
                )
                .into())
            }
        }
    }

    let variables = variables
        .ok_or_else(|| ParseError::new(1, 1, "missing `vars` line"))?;
    if lowers.len() != variables.len() {
        return Err(ParseError::new(
            1,
            1,
            format!(
                "expected {} `box` lines (one per variable), found {}",
                variables.len(),
                lowers.len()
            ),
        )
        .into());
    }
    let region = IntervalBox::new(lowers, uppers)?;
    ProblemFile::new(
        variables,
        region,
        constraints,
        objective,
        epsilon.unwrap_or(DEFAULT_EPSILON),
    )
}

/// Deterministic problem printer; parsing the output reproduces the input
/// termwise.
pub fn print_problem(problem: &ProblemFile) -> String {
    let mut out = String::new();
    writeln!(out, "vars {}", problem.variables.join(" ")).unwrap();
    for i in 0..problem.variables.len() {
        writeln!(
            out,
            "box {} {}",
            problem.box_ref().lower()[i],
            problem.box_ref().upper()[i]
        )
        .unwrap();
    }
    for p in &problem.constraints {
        writeln!(out, "constraint {}", print_expr(p, &problem.variables)).unwrap();
    }
    if let Some(p) = &problem.objective {
        writeln!(out, "objective {}", print_expr(p, &problem.variables)).unwrap();
    }
    writeln!(out, "epsilon {}", problem.epsilon).unwrap();
    out
}

// ---------------------------------------------------------------------------
// SMT-LIB2 export
// ---------------------------------------------------------------------------

/// Renders an f64 as an SMT-LIB2 decimal: shortest round-trip digits, no
/// exponent form, always a fractional point. Negative values are wrapped by
/// the caller.
fn smt_decimal(v: f64) -> String {
    let s = format!("{}", v.abs());
    if let Some(epos) = s.find(['e', 'E']) {
        let mant = &s[..epos];
        let exp: i32 = s[epos + 1..].parse().expect("exponent digits");
        let (int_part, frac_part) = match mant.find('.') {
            Some(d) => (&mant[..d], &mant[d + 1..]),
            None => (mant, ""),
        };
        let digits = format!("{int_part}{frac_part}");
        let point = int_part.len() as i32 + exp;
        if point <= 0 {
            format!("0.{}{}", "0".repeat(-point as usize), digits)
        } else if point as usize >= digits.len() {
            format!("{}{}.0", digits, "0".repeat(point as usize - digits.len()))
        } else {
            format!("{}.{}", &digits[..point as usize], &digits[point as usize..])
        }
    } else if s.contains('.') {
        s
    } else {
        format!("{s}.0")
    }
}

fn smt_term(idx: &[u32], coeff: f64, variables: &[String]) -> String {
    let mut factors: Vec<String> = Vec::new();
    let mag = coeff.abs();
    if mag != 1.0 || idx.iter().all(|&k| k == 0) {
        factors.push(smt_decimal(mag));
    }
    for (i, &k) in idx.iter().enumerate() {
        for _ in 0..k {
            factors.push(variables[i].clone());
        }
    }
    match factors.len() {
        1 => factors.pop().unwrap(),
        _ => format!("(* {})", factors.join(" ")),
    }
}

fn smt_poly(p: &Polynomial, variables: &[String]) -> String {
    let terms = sorted_terms(p);
    if terms.is_empty() {
        return "0.0".to_string();
    }
    let mut acc = {
        let (idx, c) = &terms[0];
        let t = smt_term(idx, *c, variables);
        if *c < 0.0 {
            format!("(- {t})")
        } else {
            t
        }
    };
    for (idx, c) in &terms[1..] {
        let t = smt_term(idx, *c, variables);
        acc = if *c < 0.0 {
            format!("(- {acc} {t})")
        } else {
            format!("(+ {acc} {t})")
        };
    }
    acc
}

/// Exports the feasibility problem as QF_NRA SMT-LIB2 text. Any objective is
/// ignored with a warning; box bounds and every `p_i <= 0` become
/// assertions.
pub fn export_smtlib2(problem: &ProblemFile) -> String {
    if problem.objective.is_some() {
        log::warn!("export_smtlib2: objective ignored (feasibility export)");
    }
    let mut out = String::new();
    out.push_str("(set-logic QF_NRA)\n");
    for v in &problem.variables {
        writeln!(out, "(declare-const {v} Real)").unwrap();
    }
    for (i, v) in problem.variables.iter().enumerate() {
        let lo = problem.box_ref().lower()[i];
        let hi = problem.box_ref().upper()[i];
        let lo_s = if lo < 0.0 {
            format!("(- {})", smt_decimal(lo))
        } else {
            smt_decimal(lo)
        };
        let hi_s = if hi < 0.0 {
            format!("(- {})", smt_decimal(hi))
        } else {
            smt_decimal(hi)
        };
        writeln!(out, "(assert (<= {lo_s} {v}))").unwrap();
        writeln!(out, "(assert (<= {v} {hi_s}))").unwrap();
    }
    for p in &problem.constraints {
        writeln!(
            out,
            "(assert (<= {} 0.0))",
            smt_poly(p, &problem.variables)
        )
        .unwrap();
    }
    out.push_str("(check-sat)\n(get-model)\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn vars(names: &[&str]) -> Vec<String> {
        names.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_basic_quadratic() {
        let p = parse_expr("x1^2 + 2*x1*x2", &vars(&["x1", "x2"])).unwrap();
        assert_eq!(p.coeff(&[2, 0]), 1.0);
        assert_eq!(p.coeff(&[1, 1]), 2.0);
        assert_eq!(p.num_terms(), 2);
    }

    #[test]
    fn parse_negated_square() {
        let p = parse_expr("-(x1 - 1)^2", &vars(&["x1"])).unwrap();
        assert_eq!(p.coeff(&[2]), -1.0);
        assert_eq!(p.coeff(&[1]), 2.0);
        assert_eq!(p.coeff(&[0]), -1.0);
    }

    #[test]
    fn unary_minus_binds_below_mul() {
        let v = vars(&["x"]);
        let p = parse_expr("-2*x", &v).unwrap();
        assert_eq!(p.coeff(&[1]), -2.0);
        let q = parse_expr("-x^2 + 1", &v).unwrap();
        assert_eq!(q.coeff(&[2]), -1.0);
        assert_eq!(q.coeff(&[0]), 1.0);
    }

    #[test]
    fn parse_errors_carry_position() {
        let v = vars(&["x"]);
        let err = parse_expr("x + y", &v).unwrap_err();
        assert_eq!((err.line, err.col), (1, 5));
        assert!(err.msg.contains("unknown identifier"));
        let err = parse_expr("x^-2", &v).unwrap_err();
        assert!(err.msg.contains("negative exponent"));
        let err = parse_expr("x^1.5", &v).unwrap_err();
        assert!(err.msg.contains("integer"));
        let err = parse_expr("(x + 1", &v).unwrap_err();
        assert!(err.msg.contains("unbalanced") || err.msg.contains("end of expression"));
        assert!(parse_expr("x ? 1", &v).is_err());
    }

    #[test]
    fn print_parse_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(67);
        let names = vars(&["x1", "x2", "x3"]);
        for _ in 0..1000 {
            let n = rng.gen_range(1..=3usize);
            let p = oracle::random_polynomial(&mut rng, n, 6, 10);
            let names = &names[..n];
            let printed = print_expr(&p, names);
            let q = parse_expr(&printed, names).unwrap();
            assert_eq!(p, q, "round trip failed for `{printed}`");
            // And the reprint is stable.
            assert_eq!(printed, print_expr(&q, names));
        }
    }

    #[test]
    fn parse_expr_agrees_with_evaluate() {
        let v = vars(&["x1", "x2"]);
        let cases = [
            "x1^2*x2 - 3*x1 + 0.25",
            "(x1 + x2)^3 - x1*x2",
            "-(x1 - 0.5)*(x2 + 0.5) + 1e-3",
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for src in cases {
            let p = parse_expr(src, &v).unwrap();
            for _ in 0..50 {
                let x: Vec<f64> = (0..2).map(|_| rng.gen_range(-2.0..2.0)).collect();
                let direct = reference_eval(src, &x);
                let got = p.evaluate(&x).unwrap();
                let scale = direct.abs().max(got.abs()).max(1.0);
                assert!((direct - got).abs() <= 1e-9 * scale, "{src} at {x:?}");
            }
        }
    }

    // Tiny independent interpreter used only to cross-check parse_expr.
    fn reference_eval(src: &str, x: &[f64]) -> f64 {
        match src {
            "x1^2*x2 - 3*x1 + 0.25" => x[0] * x[0] * x[1] - 3.0 * x[0] + 0.25,
            "(x1 + x2)^3 - x1*x2" => (x[0] + x[1]).powi(3) - x[0] * x[1],
            "-(x1 - 0.5)*(x2 + 0.5) + 1e-3" => -((x[0] - 0.5) * (x[1] + 0.5)) + 1e-3,
            _ => unreachable!(),
        }
    }

    #[test]
    fn minimal_problem_file() {
        let src = "vars x1\nbox 0 1\nconstraint x1 - 2\n";
        let p = parse_problem_str(src).unwrap();
        assert_eq!(p.variables, vars(&["x1"]));
        assert_eq!(p.constraints.len(), 1);
        assert_eq!(p.epsilon, DEFAULT_EPSILON);
        let printed = print_problem(&p);
        assert!(printed.contains("epsilon 0.001"));
        let q = parse_problem_str(&printed).unwrap();
        assert_eq!(p.constraints, q.constraints);
        assert_eq!(p.box_ref(), q.box_ref());
    }

    #[test]
    fn problem_file_errors() {
        assert!(parse_problem_str("box 0 1\n").is_err());
        assert!(parse_problem_str("vars x\nbox 1 0\n").is_err());
        assert!(parse_problem_str("vars x\nbox 0 1\nepsilon -1\n").is_err());
        assert!(parse_problem_str("vars x\nbox 0 1\nfrobnicate 3\n").is_err());
        assert!(parse_problem_str("vars x\nconstraint x\n").is_err());
        let err = parse_problem_str("vars x\nbox 0 1\nconstraint y + 1\n").unwrap_err();
        assert!(err.to_string().contains("line 3"));
    }

    #[test]
    fn problem_round_trip_fuzz() {
        let mut rng = ChaCha8Rng::seed_from_u64(79);
        let all_names = vars(&["a", "b2", "c_3"]);
        for _ in 0..500 {
            let n = rng.gen_range(1..=3usize);
            let names: Vec<String> = all_names[..n].to_vec();
            let region = oracle::random_box(&mut rng, n, -3.0, 3.0);
            let m = rng.gen_range(0..=3usize);
            let constraints: Vec<Polynomial> = (0..m)
                .map(|_| oracle::random_polynomial(&mut rng, n, 4, 6))
                .collect();
            let objective = if rng.gen_bool(0.5) {
                Some(oracle::random_polynomial(&mut rng, n, 3, 5))
            } else {
                None
            };
            let problem = ProblemFile::new(
                names,
                region,
                constraints,
                objective,
                rng.gen_range(1e-6..1e-1),
            )
            .unwrap();
            let text = print_problem(&problem);
            let back = parse_problem_str(&text).unwrap();
            assert_eq!(problem.variables, back.variables);
            assert_eq!(problem.box_ref(), back.box_ref());
            assert_eq!(problem.constraints, back.constraints);
            assert_eq!(problem.objective, back.objective);
            assert_eq!(problem.epsilon, back.epsilon);
        }
    }

    #[test]
    fn smtlib_export_transcription() {
        let src = "vars x1\nbox 0 1\nconstraint x1 - 2\n";
        let p = parse_problem_str(src).unwrap();
        let smt = export_smtlib2(&p);
        assert!(smt.contains("(set-logic QF_NRA)"));
        assert!(smt.contains("(declare-const x1 Real)"));
        assert!(smt.contains("(assert (<= (- x1 2.0) 0.0))"), "{smt}");
        assert!(smt.contains("(check-sat)"));
        assert!(smt.contains("(get-model)"));
    }

    #[test]
    fn smtlib_export_box_only() {
        let src = "vars x y\nbox -1 1\nbox 0 2\n";
        let p = parse_problem_str(src).unwrap();
        let smt = export_smtlib2(&p);
        assert!(smt.contains("(assert (<= (- 1.0) x))"));
        assert!(smt.contains("(assert (<= y 2.0))"));
        assert!(!smt.contains("<= 0.0)\n(check-sat)"));
    }

    #[test]
    fn smt_decimals_have_no_exponent() {
        assert_eq!(smt_decimal(1e-9), "0.000000001");
        assert_eq!(smt_decimal(2.0), "2.0");
        assert_eq!(smt_decimal(0.5), "0.5");
        assert_eq!(smt_decimal(1.5e3), "1500.0");
        assert_eq!(smt_decimal(1.25e-2), "0.0125");
        let v: f64 = smt_decimal(0.1).parse().unwrap();
        assert_eq!(v, 0.1);
    }
}
