//! The feasibility solver: orthant partition, per-region constraint
//! bookkeeping, Bernstein sign pruning, guided convex refinement, and a
//! resolution-complete branch-and-prune endgame (or an external SMT
//! hand-off).
//!
//! Every region is tracked with a bitmask of constraints already proven
//! negative on it. A region proven positive for any constraint is discarded
//! with a certificate entry; a region with every constraint proven negative
//! witnesses satisfiability at its center. Anything still ambiguous is
//! refined with the action chosen by the configured policy until the
//! largest ambiguous volume falls under the epsilon threshold, then handed
//! to the endgame.

use std::collections::BinaryHeap;
use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::abstraction::{self, Action};
use crate::bernstein::{self, SignClass};
use crate::guide::GuideModel;
use crate::parse::ProblemFile;
use crate::poly::{IntervalBox, Polynomial};
use crate::{par, Error, Result, TAU};

/// Constraint bookkeeping uses a 64-bit mask.
pub const MAX_CONSTRAINTS: usize = 64;

/// Action selection policy for ambiguous regions.
#[derive(Clone)]
pub enum Policy {
    /// Cycle under_approx, over_approx, split. The default when no guide
    /// model is supplied.
    RoundRobin,
    /// Uniformly random actions from a seeded stream; used to demonstrate
    /// that the guide affects speed, never soundness.
    UniformRandom { seed: u64 },
    /// Trained guide network.
    Guide(Arc<GuideModel>),
}

impl std::fmt::Debug for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Policy::RoundRobin => write!(f, "RoundRobin"),
            Policy::UniformRandom { seed } => write!(f, "UniformRandom({seed})"),
            Policy::Guide(_) => write!(f, "Guide"),
        }
    }
}

#[derive(Clone, Debug)]
pub enum Endgame {
    /// In-process recursive bisection: complete down to the resolution
    /// `delta` (per-axis width relative to the original box).
    BranchPrune {
        delta: f64,
        max_depth: u32,
        leaf_budget: u64,
    },
    /// Hand undecided regions to an external QF_NRA solver. The command
    /// receives the SMT-LIB2 file path as its last argument (or replaces
    /// `{}`), and must print `sat` or `unsat` on the first line.
    ExternalSmt { command: String },
}

impl Default for Endgame {
    fn default() -> Self {
        Endgame::BranchPrune {
            delta: 1e-4,
            max_depth: 60,
            leaf_budget: 2_000_000,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    /// Ambiguous-region volume threshold. Relative to the box volume unless
    /// `epsilon_absolute` is set.
    pub epsilon: f64,
    pub epsilon_absolute: bool,
    /// Extra refinement criterion: keep splitting regions whose per-axis
    /// width exceeds this absolute bound. The optimizer uses it to keep
    /// candidate regions small in every direction, not just in volume.
    pub max_width: Option<f64>,
    pub max_iterations: u64,
    pub endgame: Endgame,
    pub policy: Policy,
    pub workers: usize,
    pub classify_depth: u32,
    /// Record total ambiguous volume after every step (test instrumentation).
    pub record_trace: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            epsilon_absolute: false,
            max_width: None,
            max_iterations: 500_000,
            endgame: Endgame::default(),
            policy: Policy::RoundRobin,
            workers: 1,
            classify_depth: abstraction::DEFAULT_CLASSIFY_DEPTH,
            record_trace: false,
        }
    }
}

impl SolverConfig {
    /// Defaults with the problem's epsilon knob.
    pub fn for_problem(problem: &ProblemFile) -> Self {
        Self {
            epsilon: problem.epsilon,
            ..Self::default()
        }
    }
}

/// How a pruned box was proven positive.
#[derive(Clone, Debug)]
pub enum CertRoute {
    /// Bernstein lower bound of the constraint itself.
    Direct,
    /// Positivity of a quadratic under-approximation of the constraint,
    /// carried here for post-hoc re-verification.
    ViaUnder(Polynomial),
    /// An external solver answered unsat for this region.
    External,
}

/// One certificate entry: on `region`, constraint `constraint` is proven
/// strictly positive with the recorded lower bound, so no solution exists
/// there.
#[derive(Clone, Debug)]
pub struct CertEntry {
    pub region: IntervalBox,
    pub constraint: usize,
    pub lower_bound: Option<f64>,
    pub route: CertRoute,
}

#[derive(Clone, Debug)]
pub enum SolveOutcome {
    Sat {
        point: Vec<f64>,
        residuals: Vec<f64>,
    },
    Unsat {
        certificate: Vec<CertEntry>,
    },
    Unknown {
        reason: String,
        remaining_volume: f64,
    },
}

impl SolveOutcome {
    pub fn status(&self) -> &'static str {
        match self {
            SolveOutcome::Sat { .. } => "sat",
            SolveOutcome::Unsat { .. } => "unsat",
            SolveOutcome::Unknown { .. } => "unknown",
        }
    }
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct ActionCounts {
    pub under: u64,
    pub over: u64,
    pub split: u64,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct SolveStats {
    pub iterations: u64,
    pub regions_processed: u64,
    pub direct_prunes: u64,
    pub neg_marks: u64,
    pub pruned_volume: f64,
    pub action_counts: ActionCounts,
    pub endgame_leaves: u64,
    pub endgame_prunes: u64,
    pub remaining_ambiguous_volume: f64,
    #[serde(skip)]
    pub ambig_volume_trace: Vec<f64>,
    #[serde(skip)]
    pub wall: Option<std::time::Duration>,
}

#[derive(Clone, Debug)]
pub struct SolveReport {
    pub outcome: SolveOutcome,
    pub stats: SolveStats,
}

impl SolveReport {
    /// Machine-readable outcome. Wall-clock time is deliberately excluded
    /// so identical runs serialize identically.
    pub fn to_json(&self) -> serde_json::Value {
        let mut map = serde_json::Map::new();
        map.insert("status".into(), self.outcome.status().into());
        match &self.outcome {
            SolveOutcome::Sat { point, residuals } => {
                map.insert("witness".into(), serde_json::json!(point));
                map.insert("residuals".into(), serde_json::json!(residuals));
            }
            SolveOutcome::Unsat { certificate } => {
                let volume: f64 = certificate.iter().map(|c| c.region.volume()).sum();
                map.insert(
                    "certificate_summary".into(),
                    serde_json::json!({
                        "entries": certificate.len(),
                        "volume": volume,
                    }),
                );
            }
            SolveOutcome::Unknown {
                reason,
                remaining_volume,
            } => {
                map.insert("reason".into(), reason.as_str().into());
                map.insert(
                    "remaining_volume".into(),
                    serde_json::json!(remaining_volume),
                );
            }
        }
        map.insert(
            "stats".into(),
            serde_json::to_value(&self.stats).expect("stats serialize"),
        );
        serde_json::Value::Object(map)
    }
}

/// Satisfying-region inventory for the optimizer: regions where every
/// constraint is proven negative, endgame leaves whose center satisfies
/// everything, and endgame leaves left undecided (which may still hide
/// solutions).
#[derive(Clone, Debug, Default)]
pub struct RegionInventory {
    pub neg_regions: Vec<IntervalBox>,
    pub endgame_sat: Vec<(IntervalBox, Vec<f64>)>,
    pub undecided: Vec<IntervalBox>,
}

/// Splits the box at zero along every straddling coordinate; the result is
/// a disjoint orthant-pure cover.
pub fn partition_orthants(region: &IntervalBox) -> Vec<IntervalBox> {
    region.split_orthants()
}

/// Picks the constraint with the least accumulated proven-negative volume
/// along the region's ancestry among those not yet proven negative on the
/// region; ties go to the lowest index.
pub fn select_poly(neg_mask: u64, neg_vol: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in neg_vol.iter().enumerate() {
        if neg_mask >> i & 1 == 1 {
            continue;
        }
        match best {
            None => best = Some(i),
            Some(b) if *v < neg_vol[b] => best = Some(i),
            _ => {}
        }
    }
    best
}

struct ActiveRegion {
    region: IntervalBox,
    volume: f64,
    neg_mask: u64,
    neg_vol: Vec<f64>,
    seq: u64,
}

impl PartialEq for ActiveRegion {
    fn eq(&self, other: &Self) -> bool {
        self.seq == other.seq
    }
}
impl Eq for ActiveRegion {}
impl PartialOrd for ActiveRegion {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for ActiveRegion {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Largest volume first; ties pop in insertion order.
        self.volume
            .total_cmp(&other.volume)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

/// What one `step` call did.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum StepEvent {
    Pruned,
    NegMarked(usize),
    Refined(Action),
    MovedToEndgame,
    SatFound,
    Exhausted,
}

pub struct SolverState {
    pols: Vec<Polynomial>,
    region0: IntervalBox,
    vol0: f64,
    ref_widths: Vec<f64>,
    full_mask: u64,
    cfg: SolverConfig,
    heap: BinaryHeap<ActiveRegion>,
    terminal: Vec<ActiveRegion>,
    certs: Vec<CertEntry>,
    sat: Option<(Vec<f64>, Vec<f64>)>,
    neg_regions: Vec<IntervalBox>,
    collect_all: bool,
    stats: SolveStats,
    seq: u64,
    rr_counter: u64,
    rng: Option<rand_chacha::ChaCha8Rng>,
}

impl SolverState {
    pub fn new(problem: &ProblemFile, cfg: SolverConfig) -> Result<Self> {
        Self::with_constraints(problem.box_ref().clone(), problem.constraints.clone(), cfg)
    }

    pub(crate) fn with_constraints(
        region0: IntervalBox,
        pols: Vec<Polynomial>,
        cfg: SolverConfig,
    ) -> Result<Self> {
        if pols.len() > MAX_CONSTRAINTS {
            return Err(Error::TooManyConstraints {
                got: pols.len(),
                limit: MAX_CONSTRAINTS,
            });
        }
        if !(cfg.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        let m = pols.len();
        let full_mask = if m >= 64 { u64::MAX } else { (1u64 << m) - 1 };
        let rng = match cfg.policy {
            Policy::UniformRandom { seed } => Some(
                <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed),
            ),
            _ => None,
        };
        let mut state = Self {
            vol0: region0.volume(),
            ref_widths: region0.widths(),
            region0,
            pols,
            full_mask,
            cfg,
            heap: BinaryHeap::new(),
            terminal: Vec::new(),
            certs: Vec::new(),
            sat: None,
            neg_regions: Vec::new(),
            collect_all: false,
            stats: SolveStats::default(),
            seq: 0,
            rr_counter: 0,
            rng,
        };
        for piece in partition_orthants(&state.region0.clone()) {
            let neg_vol = vec![0.0; m];
            state.file_region(piece, 0, neg_vol);
        }
        Ok(state)
    }

    fn volume_threshold(&self) -> f64 {
        if self.cfg.epsilon_absolute {
            self.cfg.epsilon
        } else {
            self.cfg.epsilon * self.vol0
        }
    }

    fn needs_refine(&self, r: &ActiveRegion) -> bool {
        if r.volume >= self.volume_threshold() && r.volume > 0.0 {
            return true;
        }
        match self.cfg.max_width {
            Some(w) => (0..r.region.n()).any(|i| r.region.width(i) > w),
            None => false,
        }
    }

    fn file_region(&mut self, region: IntervalBox, neg_mask: u64, neg_vol: Vec<f64>) {
        let volume = region.volume();
        if neg_mask == self.full_mask && !self.pols.is_empty() {
            // Every constraint proven negative: any point of the region is a
            // witness.
            let point = region.center();
            let residuals: Vec<f64> = self
                .pols
                .iter()
                .map(|p| p.evaluate(&point).expect("dims match"))
                .collect();
            debug_assert!(residuals.iter().all(|r| *r <= TAU));
            if self.collect_all {
                self.neg_regions.push(region);
            } else if self.sat.is_none() && residuals.iter().all(|r| *r <= TAU) {
                self.sat = Some((point, residuals));
            }
            return;
        }
        let entry = ActiveRegion {
            region,
            volume,
            neg_mask,
            neg_vol,
            seq: self.seq,
        };
        self.seq += 1;
        self.heap.push(entry);
    }

    fn choose_action(&mut self, feats: &bernstein::EnclosureFeatures) -> Action {
        match &self.cfg.policy {
            Policy::RoundRobin => {
                let a = Action::ALL[(self.rr_counter % 3) as usize];
                self.rr_counter += 1;
                a
            }
            Policy::UniformRandom { .. } => {
                use rand::Rng;
                let rng = self.rng.as_mut().expect("rng present");
                Action::ALL[rng.gen_range(0..3usize)]
            }
            Policy::Guide(model) => model.action(feats),
        }
    }

    /// One refinement step: pops the largest ambiguous region and either
    /// prunes it, marks the selected constraint negative on it, refines it
    /// with the policy's action, or retires it to the endgame queue.
    pub fn step(&mut self) -> Result<StepEvent> {
        if self.sat.is_some() && !self.collect_all {
            return Ok(StepEvent::SatFound);
        }
        let Some(r) = self.heap.pop() else {
            return Ok(StepEvent::Exhausted);
        };
        if !self.needs_refine(&r) {
            self.terminal.push(r);
            return Ok(StepEvent::MovedToEndgame);
        }
        self.stats.iterations += 1;
        self.stats.regions_processed += 1;

        let i = select_poly(r.neg_mask, &r.neg_vol).expect("mask not full");
        let p = self.pols[i].clone();
        let feats = bernstein::features(&p, &r.region)?;
        // Under the tau-slack semantics a constraint bounded above by TAU
        // holds at every point of the region, even when it is not strictly
        // negative (for example the zero polynomial).
        let class = if feats.p_max <= TAU {
            SignClass::Negative
        } else {
            bernstein::classify_bounds(feats.p_min, feats.p_max)
        };
        let event = match class {
            SignClass::Positive => {
                self.certs.push(CertEntry {
                    region: r.region.clone(),
                    constraint: i,
                    lower_bound: Some(feats.p_min),
                    route: CertRoute::Direct,
                });
                self.stats.direct_prunes += 1;
                self.stats.pruned_volume += r.volume;
                StepEvent::Pruned
            }
            SignClass::Negative => {
                let mut neg_vol = r.neg_vol.clone();
                neg_vol[i] += r.volume;
                self.stats.neg_marks += 1;
                self.file_region(r.region.clone(), r.neg_mask | (1 << i), neg_vol);
                StepEvent::NegMarked(i)
            }
            SignClass::Ambiguous => {
                let action = self.choose_action(&feats);
                let outcome = abstraction::apply_action_detail(
                    &p,
                    &r.region,
                    action,
                    self.cfg.classify_depth,
                    &self.ref_widths,
                )?;
                match action {
                    Action::UnderApprox => self.stats.action_counts.under += 1,
                    Action::OverApprox => self.stats.action_counts.over += 1,
                    Action::Split => self.stats.action_counts.split += 1,
                }
                debug_assert!(
                    (outcome.partition.total_volume() - r.volume).abs()
                        <= 1e-9 * r.volume.max(1.0),
                    "refinement must conserve volume"
                );
                for pos in outcome.partition.positive {
                    let lower = outcome
                        .under
                        .as_ref()
                        .map(|u| bernstein::enclosure_auto(u, &pos).0);
                    self.stats.pruned_volume += pos.volume();
                    self.certs.push(CertEntry {
                        region: pos,
                        constraint: i,
                        lower_bound: lower,
                        route: CertRoute::ViaUnder(
                            outcome.under.clone().expect("positives imply under"),
                        ),
                    });
                }
                for neg in outcome.partition.negative {
                    let mut neg_vol = r.neg_vol.clone();
                    neg_vol[i] += neg.volume();
                    self.file_region(neg, r.neg_mask | (1 << i), neg_vol);
                }
                for amb in outcome.partition.ambiguous {
                    self.file_region(amb, r.neg_mask, r.neg_vol.clone());
                }
                StepEvent::Refined(action)
            }
        };
        if self.cfg.record_trace {
            let total: f64 = self.heap.iter().map(|a| a.volume).sum::<f64>()
                + self.terminal.iter().map(|a| a.volume).sum::<f64>();
            self.stats.ambig_volume_trace.push(total);
        }
        Ok(event)
    }

    fn run_refinement(&mut self) -> Result<bool> {
        loop {
            if self.sat.is_some() && !self.collect_all {
                return Ok(true);
            }
            if self.stats.iterations >= self.cfg.max_iterations {
                return Ok(false);
            }
            match self.step()? {
                StepEvent::SatFound | StepEvent::Exhausted => return Ok(true),
                _ => {}
            }
        }
    }
}

/// Feasibility decision for the problem's constraint system.
pub fn solve(problem: &ProblemFile, cfg: &SolverConfig) -> Result<SolveReport> {
    if cfg.workers > 1 {
        return solve_parallel(problem, cfg);
    }
    let (report, _) = solve_inner(problem, cfg, false)?;
    Ok(report)
}

/// Like [`solve`], but single-worker and additionally returns every
/// satisfying or undecided region instead of stopping at the first witness.
pub fn solve_with_inventory(
    problem: &ProblemFile,
    cfg: &SolverConfig,
) -> Result<(SolveReport, RegionInventory)> {
    solve_inner(problem, cfg, true)
}

fn solve_inner(
    problem: &ProblemFile,
    cfg: &SolverConfig,
    collect_all: bool,
) -> Result<(SolveReport, RegionInventory)> {
    let start = Instant::now();
    let mut state = SolverState::new(problem, cfg.clone())?;
    state.collect_all = collect_all;

    let mut inventory = RegionInventory::default();

    if state.pols.is_empty() {
        let point = state.region0.center();
        inventory.neg_regions.push(state.region0.clone());
        let report = SolveReport {
            outcome: SolveOutcome::Sat {
                point,
                residuals: Vec::new(),
            },
            stats: finish_stats(state.stats, start),
        };
        return Ok((report, inventory));
    }

    let finished = state.run_refinement()?;
    inventory.neg_regions = state.neg_regions.clone();

    if !collect_all {
        if let Some((point, residuals)) = &state.sat {
            let report = SolveReport {
                outcome: SolveOutcome::Sat {
                    point: point.clone(),
                    residuals: residuals.clone(),
                },
                stats: finish_stats(state.stats, start),
            };
            return Ok((report, inventory));
        }
    }

    if !finished {
        let remaining: f64 = state.heap.iter().map(|r| r.volume).sum::<f64>()
            + state.terminal.iter().map(|r| r.volume).sum::<f64>();
        let mut stats = state.stats;
        stats.remaining_ambiguous_volume = remaining;
        let report = SolveReport {
            outcome: SolveOutcome::Unknown {
                reason: "iteration budget exhausted".into(),
                remaining_volume: remaining,
            },
            stats: finish_stats(stats, start),
        };
        return Ok((report, inventory));
    }

    // Refinement drained the heap; whatever remains lives in the terminal
    // list and goes to the endgame.
    let mut leftovers: Vec<ActiveRegion> = std::mem::take(&mut state.terminal);
    leftovers.sort_by_key(|r| r.seq);

    let outcome = match &cfg.endgame {
        Endgame::BranchPrune {
            delta,
            max_depth,
            leaf_budget,
        } => {
            let regions: Vec<IntervalBox> = leftovers.iter().map(|r| r.region.clone()).collect();
            let (sat, leaves, prunes, pruned_volume) = run_branch_prune(
                &state.pols,
                &regions,
                &state.ref_widths,
                *delta,
                *max_depth,
                *leaf_budget,
                collect_all,
                &mut inventory,
                &mut state.certs,
            );
            state.stats.endgame_leaves = leaves;
            state.stats.endgame_prunes = prunes;
            state.stats.pruned_volume += pruned_volume;
            let found = state.sat.clone().or(sat).or_else(|| {
                inventory.endgame_sat.first().map(|(_, point)| {
                    let residuals = residuals_of(&state.pols, point);
                    (point.clone(), residuals)
                })
            });
            if let Some((point, residuals)) = found {
                SolveOutcome::Sat { point, residuals }
            } else if inventory.undecided.is_empty() {
                SolveOutcome::Unsat {
                    certificate: std::mem::take(&mut state.certs),
                }
            } else {
                let remaining: f64 = inventory.undecided.iter().map(|b| b.volume()).sum();
                state.stats.remaining_ambiguous_volume = remaining;
                SolveOutcome::Unknown {
                    reason: "endgame left undecided regions".into(),
                    remaining_volume: remaining,
                }
            }
        }
        Endgame::ExternalSmt { command } => {
            external_endgame(&state.pols, problem, &leftovers, command, &mut state.certs)?
        }
    };

    let report = SolveReport {
        outcome,
        stats: finish_stats(state.stats, start),
    };
    Ok((report, inventory))
}

fn residuals_of(pols: &[Polynomial], point: &[f64]) -> Vec<f64> {
    pols.iter()
        .map(|p| p.evaluate(point).expect("dims match"))
        .collect()
}

fn finish_stats(mut stats: SolveStats, start: Instant) -> SolveStats {
    stats.wall = Some(start.elapsed());
    stats
}

type Witness = (Vec<f64>, Vec<f64>);

struct EndgameCtx<'a> {
    pols: &'a [Polynomial],
    delta_widths: Vec<f64>,
    ref_widths: &'a [f64],
    budget: u64,
    max_depth: u32,
    collect_all: bool,
    sat: Option<Witness>,
    inventory: &'a mut RegionInventory,
    certs: &'a mut Vec<CertEntry>,
    leaves: u64,
    prunes: u64,
    pruned_volume: f64,
}

impl EndgameCtx<'_> {
    fn explore(&mut self, region: &IntervalBox, depth: u32) {
        if self.sat.is_some() && !self.collect_all {
            return;
        }
        if self.budget == 0 {
            self.inventory.undecided.push(region.clone());
            return;
        }
        self.budget -= 1;
        self.leaves += 1;

        // Cheap witness tests first: the center, then the corners. Corners
        // matter because orthant cuts and bisection lines land exactly on
        // touching solutions (x = 0 boundaries, pinch points at midpoints).
        let center = region.center();
        let residuals = residuals_of(self.pols, &center);
        if residuals.iter().all(|r| *r <= TAU) {
            if self.collect_all {
                self.inventory.endgame_sat.push((region.clone(), center));
            } else {
                self.sat = Some((center, residuals));
            }
            return;
        }
        let n = region.n();
        if n <= 6 {
            for corner in 0..(1usize << n) {
                let x: Vec<f64> = (0..n)
                    .map(|i| {
                        if corner >> i & 1 == 1 {
                            region.upper()[i]
                        } else {
                            region.lower()[i]
                        }
                    })
                    .collect();
                let residuals = residuals_of(self.pols, &x);
                if residuals.iter().all(|r| *r <= TAU) {
                    if self.collect_all {
                        self.inventory.endgame_sat.push((region.clone(), x));
                    } else {
                        self.sat = Some((x, residuals));
                    }
                    return;
                }
            }
        }

        // Positivity of any constraint closes the region.
        for (i, p) in self.pols.iter().enumerate() {
            let (lo, _) = bernstein::range_bound(p, region).expect("dims match");
            if lo > TAU {
                self.certs.push(CertEntry {
                    region: region.clone(),
                    constraint: i,
                    lower_bound: Some(lo),
                    route: CertRoute::Direct,
                });
                self.prunes += 1;
                self.pruned_volume += region.volume();
                return;
            }
        }

        let resolved = (0..region.n()).all(|i| region.width(i) <= self.delta_widths[i]);
        if resolved || depth >= self.max_depth {
            self.inventory.undecided.push(region.clone());
            return;
        }
        let dim = region.widest_scaled_dim(self.ref_widths);
        let (a, b) = region.bisect(dim);
        self.explore(&a, depth + 1);
        self.explore(&b, depth + 1);
    }
}

#[allow(clippy::too_many_arguments)]
fn run_branch_prune(
    pols: &[Polynomial],
    regions: &[IntervalBox],
    ref_widths: &[f64],
    delta: f64,
    max_depth: u32,
    leaf_budget: u64,
    collect_all: bool,
    inventory: &mut RegionInventory,
    certs: &mut Vec<CertEntry>,
) -> (Option<Witness>, u64, u64, f64) {
    let mut ctx = EndgameCtx {
        pols,
        delta_widths: ref_widths
            .iter()
            .map(|w| (w * delta).max(f64::MIN_POSITIVE))
            .collect(),
        ref_widths,
        budget: leaf_budget,
        max_depth,
        collect_all,
        sat: None,
        inventory,
        certs,
        leaves: 0,
        prunes: 0,
        pruned_volume: 0.0,
    };
    for r in regions {
        ctx.explore(r, 0);
        if ctx.sat.is_some() && !collect_all {
            break;
        }
    }
    (ctx.sat.take(), ctx.leaves, ctx.prunes, ctx.pruned_volume)
}

/// Resolution-complete branch-and-prune decision for a set of small
/// regions: Sat on the first center whose residuals all clear the slack,
/// Unsat when every leaf is pruned by some constraint's positive Bernstein
/// bound, Unknown when undecided leaves remain at the resolution floor.
pub fn endgame_branch_prune(
    regions: &[IntervalBox],
    pols: &[Polynomial],
    delta: f64,
    max_depth: u32,
) -> SolveOutcome {
    let Some(first) = regions.first() else {
        return SolveOutcome::Unsat {
            certificate: Vec::new(),
        };
    };
    let ref_widths = first.widths();
    let mut inventory = RegionInventory::default();
    let mut certs = Vec::new();
    let (sat, _, _, _) = run_branch_prune(
        pols,
        regions,
        &ref_widths,
        delta,
        max_depth,
        2_000_000,
        false,
        &mut inventory,
        &mut certs,
    );
    if let Some((point, residuals)) = sat {
        SolveOutcome::Sat { point, residuals }
    } else if inventory.undecided.is_empty() {
        SolveOutcome::Unsat { certificate: certs }
    } else {
        let remaining = inventory.undecided.iter().map(|b| b.volume()).sum();
        SolveOutcome::Unknown {
            reason: "endgame left undecided regions".into(),
            remaining_volume: remaining,
        }
    }
}

// ---------------------------------------------------------------------------
// External SMT endgame
// ---------------------------------------------------------------------------

fn external_endgame(
    pols: &[Polynomial],
    problem: &ProblemFile,
    leftovers: &[ActiveRegion],
    command: &str,
    certs: &mut Vec<CertEntry>,
) -> Result<SolveOutcome> {
    for r in leftovers {
        let sub = ProblemFile::new(
            problem.variables.clone(),
            r.region.clone(),
            pols.to_vec(),
            None,
            problem.epsilon,
        )?;
        let smt = crate::parse::export_smtlib2(&sub);
        let path = std::env::temp_dir().join(format!(
            "polybern-endgame-{}-{}.smt2",
            std::process::id(),
            r.seq
        ));
        std::fs::write(&path, &smt)?;
        let cmdline = if command.contains("{}") {
            command.replace("{}", &path.display().to_string())
        } else {
            format!("{} {}", command, path.display())
        };
        let output = std::process::Command::new("sh")
            .arg("-c")
            .arg(&cmdline)
            .output()?;
        let _ = std::fs::remove_file(&path);
        let stdout = String::from_utf8_lossy(&output.stdout);
        let first = stdout.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
        match first.trim() {
            "unsat" => {
                certs.push(CertEntry {
                    region: r.region.clone(),
                    constraint: 0,
                    lower_bound: None,
                    route: CertRoute::External,
                });
            }
            "sat" => {
                if let Some(point) = parse_smt_model(&stdout, &problem.variables) {
                    let residuals = residuals_of(pols, &point);
                    if residuals.iter().all(|v| *v <= TAU) {
                        return Ok(SolveOutcome::Sat { point, residuals });
                    }
                }
                return Ok(SolveOutcome::Unknown {
                    reason: "external solver answered sat but the model was unverifiable".into(),
                    remaining_volume: r.volume,
                });
            }
            other => {
                return Ok(SolveOutcome::Unknown {
                    reason: format!("external solver answered `{other}`"),
                    remaining_volume: r.volume,
                });
            }
        }
    }
    Ok(SolveOutcome::Unsat {
        certificate: std::mem::take(certs),
    })
}

/// Extracts variable assignments from a `(get-model)` answer. Understands
/// plain decimals plus the `(- x)` and `(/ a b)` forms solvers typically
/// print.
fn parse_smt_model(text: &str, variables: &[String]) -> Option<Vec<f64>> {
    let mut values = Vec::with_capacity(variables.len());
    for name in variables {
        let needle = format!("define-fun {name} ");
        let at = text.find(&needle)?;
        let rest = &text[at + needle.len()..];
        let real_at = rest.find("Real")?;
        values.push(parse_smt_value(&rest[real_at + 4..])?);
    }
    Some(values)
}

fn parse_smt_value(expr: &str) -> Option<f64> {
    let toks: Vec<String> = expr
        .replace('(', " ( ")
        .replace(')', " ) ")
        .split_whitespace()
        .take(16)
        .map(str::to_string)
        .collect();
    fn value(toks: &[String], pos: &mut usize) -> Option<f64> {
        match toks.get(*pos)?.as_str() {
            "(" => {
                *pos += 1;
                let op = toks.get(*pos)?.clone();
                *pos += 1;
                let a = value(toks, pos)?;
                let out = match op.as_str() {
                    "-" => {
                        if toks.get(*pos).map(String::as_str) == Some(")") {
                            -a
                        } else {
                            a - value(toks, pos)?
                        }
                    }
                    "/" => a / value(toks, pos)?,
                    _ => return None,
                };
                if toks.get(*pos).map(String::as_str) == Some(")") {
                    *pos += 1;
                    Some(out)
                } else {
                    None
                }
            }
            lit => {
                let v: f64 = lit.parse().ok()?;
                *pos += 1;
                Some(v)
            }
        }
    }
    let mut pos = 0;
    value(&toks, &mut pos)
}

// ---------------------------------------------------------------------------
// Region-parallel driver
// ---------------------------------------------------------------------------

/// Region-parallel solve: processes up to `workers` regions per round with
/// the same filing rules as the sequential path. Verdict soundness is
/// identical; only the refinement order differs, so byte-level determinism
/// is only guaranteed with one worker.
fn solve_parallel(problem: &ProblemFile, cfg: &SolverConfig) -> Result<SolveReport> {
    let start = Instant::now();
    let mut state = SolverState::new(problem, cfg.clone())?;
    if state.pols.is_empty() {
        let mut cfg1 = cfg.clone();
        cfg1.workers = 1;
        return solve(problem, &cfg1);
    }
    loop {
        if state.sat.is_some() || state.stats.iterations >= cfg.max_iterations {
            break;
        }
        let mut batch = Vec::new();
        while batch.len() < cfg.workers {
            match state.heap.pop() {
                Some(r) if state.needs_refine(&r) => batch.push(r),
                Some(r) => state.terminal.push(r),
                None => break,
            }
        }
        if batch.is_empty() {
            break;
        }
        state.stats.iterations += batch.len() as u64;
        state.stats.regions_processed += batch.len() as u64;
        let pols = state.pols.clone();
        let ref_widths = state.ref_widths.clone();
        let depth = cfg.classify_depth;
        let policy = cfg.policy.clone();
        type WorkItem = (usize, Option<(Action, abstraction::ActionOutcome)>, Option<f64>);
        let results: Vec<Result<WorkItem>> = par::map_vec(&batch, |r| {
            let i = select_poly(r.neg_mask, &r.neg_vol).expect("mask not full");
            let p = &pols[i];
            let feats = bernstein::features(p, &r.region)?;
            let class = if feats.p_max <= TAU {
                SignClass::Negative
            } else {
                bernstein::classify_bounds(feats.p_min, feats.p_max)
            };
            match class {
                SignClass::Positive => Ok((i, None, Some(feats.p_min))),
                SignClass::Negative => Ok((i, None, None)),
                SignClass::Ambiguous => {
                    let action = match &policy {
                        Policy::Guide(model) => model.action(&feats),
                        // The stateful policies are sequential by contract;
                        // the batch driver refines by splitting instead.
                        _ => Action::Split,
                    };
                    let outcome =
                        abstraction::apply_action_detail(p, &r.region, action, depth, &ref_widths)?;
                    Ok((i, Some((action, outcome)), None))
                }
            }
        });

        for (r, result) in batch.into_iter().zip(results) {
            let (i, refined, direct_lower) = result?;
            match (refined, direct_lower) {
                (None, Some(lower)) => {
                    state.stats.direct_prunes += 1;
                    state.stats.pruned_volume += r.volume;
                    state.certs.push(CertEntry {
                        region: r.region,
                        constraint: i,
                        lower_bound: Some(lower),
                        route: CertRoute::Direct,
                    });
                }
                (None, None) => {
                    let mut neg_vol = r.neg_vol.clone();
                    neg_vol[i] += r.volume;
                    state.stats.neg_marks += 1;
                    state.file_region(r.region, r.neg_mask | (1 << i), neg_vol);
                }
                (Some((action, outcome)), _) => {
                    match action {
                        Action::UnderApprox => state.stats.action_counts.under += 1,
                        Action::OverApprox => state.stats.action_counts.over += 1,
                        Action::Split => state.stats.action_counts.split += 1,
                    }
                    for pos in outcome.partition.positive {
                        let lower = outcome
                            .under
                            .as_ref()
                            .map(|u| bernstein::enclosure_auto(u, &pos).0);
                        state.stats.pruned_volume += pos.volume();
                        state.certs.push(CertEntry {
                            region: pos,
                            constraint: i,
                            lower_bound: lower,
                            route: CertRoute::ViaUnder(
                                outcome.under.clone().expect("positives imply under"),
                            ),
                        });
                    }
                    for neg in outcome.partition.negative {
                        let mut neg_vol = r.neg_vol.clone();
                        neg_vol[i] += neg.volume();
                        state.file_region(neg, r.neg_mask | (1 << i), neg_vol);
                    }
                    for amb in outcome.partition.ambiguous {
                        state.file_region(amb, r.neg_mask, r.neg_vol.clone());
                    }
                }
            }
        }
    }

    if let Some((point, residuals)) = state.sat.clone() {
        return Ok(SolveReport {
            outcome: SolveOutcome::Sat { point, residuals },
            stats: finish_stats(state.stats, start),
        });
    }
    if state.stats.iterations >= cfg.max_iterations && !state.heap.is_empty() {
        let remaining: f64 = state.heap.iter().map(|r| r.volume).sum::<f64>()
            + state.terminal.iter().map(|r| r.volume).sum::<f64>();
        return Ok(SolveReport {
            outcome: SolveOutcome::Unknown {
                reason: "iteration budget exhausted".into(),
                remaining_volume: remaining,
            },
            stats: finish_stats(state.stats, start),
        });
    }

    let mut leftovers: Vec<ActiveRegion> = std::mem::take(&mut state.terminal);
    leftovers.sort_by_key(|r| r.seq);
    let mut inventory = RegionInventory::default();
    let outcome = match &cfg.endgame {
        Endgame::BranchPrune {
            delta,
            max_depth,
            leaf_budget,
        } => {
            let regions: Vec<IntervalBox> = leftovers.iter().map(|r| r.region.clone()).collect();
            let (sat, leaves, prunes, pruned_volume) = run_branch_prune(
                &state.pols,
                &regions,
                &state.ref_widths,
                *delta,
                *max_depth,
                *leaf_budget,
                false,
                &mut inventory,
                &mut state.certs,
            );
            state.stats.endgame_leaves = leaves;
            state.stats.endgame_prunes = prunes;
            state.stats.pruned_volume += pruned_volume;
            if let Some((point, residuals)) = sat {
                SolveOutcome::Sat { point, residuals }
            } else if inventory.undecided.is_empty() {
                SolveOutcome::Unsat {
                    certificate: std::mem::take(&mut state.certs),
                }
            } else {
                let remaining = inventory.undecided.iter().map(|b| b.volume()).sum();
                SolveOutcome::Unknown {
                    reason: "endgame left undecided regions".into(),
                    remaining_volume: remaining,
                }
            }
        }
        Endgame::ExternalSmt { command } => {
            external_endgame(&state.pols, problem, &leftovers, command, &mut state.certs)?
        }
    };
    Ok(SolveReport {
        outcome,
        stats: finish_stats(state.stats, start),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parse::parse_problem_str;

    fn solve_src(src: &str) -> SolveReport {
        let problem = parse_problem_str(src).unwrap();
        let cfg = SolverConfig::for_problem(&problem);
        solve(&problem, &cfg).unwrap()
    }

    #[test]
    fn orthant_partition_counts() {
        let b = IntervalBox::uniform(2, -1.0, 1.0).unwrap();
        assert_eq!(partition_orthants(&b).len(), 4);
        let b = IntervalBox::new(vec![0.0, 2.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(partition_orthants(&b).len(), 1);
        let b = IntervalBox::new(vec![-1.0, 0.0, -2.0], vec![1.0, 1.0, 0.0]).unwrap();
        assert_eq!(partition_orthants(&b).len(), 2);
    }

    #[test]
    fn select_poly_tie_breaks() {
        assert_eq!(select_poly(0, &[0.0, 0.0, 0.0]), Some(0));
        assert_eq!(select_poly(0b001, &[0.0, 0.5, 0.2]), Some(2));
        assert_eq!(select_poly(0b111, &[0.0, 0.0, 0.0]), None);
        assert_eq!(select_poly(0, &[0.3]), Some(0));
    }

    #[test]
    fn largest_region_pops_first() {
        let region = IntervalBox::new(vec![0.0], vec![7.0]).unwrap();
        let p = Polynomial::var(1, 0).add_constant(-100.0);
        let mut state =
            SolverState::with_constraints(region, vec![p], SolverConfig::default()).unwrap();
        state.heap.clear();
        for (lo, hi) in [(0.0, 1.0), (1.0, 5.0), (5.0, 7.0)] {
            let r = IntervalBox::new(vec![lo], vec![hi]).unwrap();
            state.file_region(r, 0, vec![0.0]);
        }
        let top = state.heap.pop().unwrap();
        assert_eq!((top.region.lower()[0], top.region.upper()[0]), (1.0, 5.0));
    }

    #[test]
    fn unsat_by_immediate_positivity() {
        let report = solve_src("vars x y\nbox -1 1\nbox -1 1\nconstraint x^2 + y^2 + 1");
        match &report.outcome {
            SolveOutcome::Unsat { certificate } => {
                let vol: f64 = certificate.iter().map(|c| c.region.volume()).sum();
                assert!((vol - 4.0).abs() < 1e-9);
                assert!(certificate
                    .iter()
                    .all(|c| matches!(c.route, CertRoute::Direct)));
            }
            other => panic!("expected unsat, got {other:?}"),
        }
    }

    #[test]
    fn sat_by_immediate_negativity() {
        let report = solve_src("vars x\nbox 0 1\nconstraint -x^2 - 1");
        match &report.outcome {
            SolveOutcome::Sat { point, residuals } => {
                assert_eq!(point, &vec![0.5]);
                assert!((residuals[0] - (-1.25)).abs() < 1e-12);
            }
            other => panic!("expected sat, got {other:?}"),
        }
    }

    #[test]
    fn sat_against_trivial_bound() {
        let report = solve_src("vars x\nbox 0 1\nconstraint x - 10");
        match &report.outcome {
            SolveOutcome::Sat { residuals, .. } => assert!(residuals[0] <= -9.0),
            other => panic!("expected sat, got {other:?}"),
        }
    }

    #[test]
    fn pinch_point_resolves_to_sat() {
        // Both constraints hold only at x = 1/2; the first bisection
        // midpoint of [0, 1] lands exactly on it.
        let report = solve_src("vars x\nbox 0 1\nconstraint x - 0.5\nconstraint 0.5 - x");
        match &report.outcome {
            SolveOutcome::Sat { point, .. } => {
                assert!((point[0] - 0.5).abs() <= 1e-9, "point {point:?}")
            }
            other => panic!("expected sat, got {other:?}"),
        }
    }

    #[test]
    fn touching_solution_found_by_midpoint() {
        let report = solve_src("vars x\nbox -1 1\nconstraint x^2");
        match &report.outcome {
            SolveOutcome::Sat { point, .. } => assert_eq!(point[0], 0.0),
            other => panic!("expected sat, got {other:?}"),
        }
    }

    #[test]
    fn thin_unsat_needs_the_endgame() {
        let problem =
            parse_problem_str("vars x\nbox -0.01 0.01\nconstraint x^2 + 0.000001").unwrap();
        let cfg = SolverConfig::for_problem(&problem);
        let report = solve(&problem, &cfg).unwrap();
        match &report.outcome {
            SolveOutcome::Unsat { certificate } => {
                let vol: f64 = certificate.iter().map(|c| c.region.volume()).sum();
                assert!((vol - 0.02).abs() <= 1e-6 * 0.02, "coverage {vol}");
            }
            other => panic!("expected unsat, got {other:?}"),
        }
    }

    #[test]
    fn empty_constraint_list_is_sat() {
        let report = solve_src("vars x y\nbox -1 1\nbox 3 4");
        match &report.outcome {
            SolveOutcome::Sat { point, residuals } => {
                assert_eq!(point, &vec![0.0, 3.5]);
                assert!(residuals.is_empty());
            }
            other => panic!("expected sat, got {other:?}"),
        }
    }

    #[test]
    fn endgame_api_hand_cases() {
        let region = IntervalBox::new(vec![0.0], vec![1.0]).unwrap();
        let p = Polynomial::var(1, 0).add_constant(-2.0);
        let out = endgame_branch_prune(&[region], &[p], 1e-4, 40);
        assert!(matches!(out, SolveOutcome::Sat { .. }));

        let region = IntervalBox::new(vec![-0.01], vec![0.01]).unwrap();
        let p = Polynomial::new(1, [(vec![2], 1.0), (vec![0], 1e-6)]).unwrap();
        let out = endgame_branch_prune(&[region], &[p], 1e-4, 40);
        assert!(matches!(out, SolveOutcome::Unsat { .. }), "{out:?}");

        let region = IntervalBox::uniform(1, -1.0, 1.0).unwrap();
        let p = Polynomial::new(1, [(vec![2], 1.0)]).unwrap();
        let out = endgame_branch_prune(&[region], &[p], 1e-4, 40);
        match out {
            SolveOutcome::Sat { point, .. } => assert_eq!(point[0], 0.0),
            other => panic!("expected sat, got {other:?}"),
        }
    }

    #[test]
    fn ambiguous_volume_never_grows() {
        let problem = parse_problem_str(
            "vars x y\nbox -1 1\nbox -1 1\nconstraint x^2 + y^2 - 0.5\nepsilon 0.01",
        )
        .unwrap();
        let mut cfg = SolverConfig::for_problem(&problem);
        cfg.record_trace = true;
        let mut state = SolverState::new(&problem, cfg).unwrap();
        let mut previous: f64 = state.heap.iter().map(|r| r.volume).sum();
        for _ in 0..500 {
            match state.step().unwrap() {
                StepEvent::Exhausted | StepEvent::SatFound => break,
                _ => {}
            }
            if let Some(now) = state.stats.ambig_volume_trace.last() {
                assert!(
                    *now <= previous + 1e-9 * previous.max(1.0),
                    "ambiguous volume grew: {now} > {previous}"
                );
                previous = *now;
            }
        }
    }

    #[test]
    fn policies_agree_on_verdicts() {
        let srcs = [
            "vars x y\nbox -1 1\nbox -1 1\nconstraint x*y - 0.2\nconstraint -x - 0.1",
            "vars x y\nbox -1 1\nbox -1 1\nconstraint x^2 + y^2 + 0.3",
            "vars x\nbox -2 2\nconstraint x^3 - x + 0.1",
        ];
        for src in srcs {
            let problem = parse_problem_str(src).unwrap();
            let mut cfg = SolverConfig::for_problem(&problem);
            let a = solve(&problem, &cfg).unwrap();
            cfg.policy = Policy::UniformRandom { seed: 9 };
            let b = solve(&problem, &cfg).unwrap();
            assert_eq!(a.outcome.status(), b.outcome.status(), "{src}");
        }
    }

    #[test]
    fn parallel_and_sequential_verdicts_match() {
        let srcs = [
            "vars x y\nbox -1 1\nbox -1 1\nconstraint x^2 + y^2 + 1",
            "vars x y\nbox -1 1\nbox -1 1\nconstraint x + y - 0.3",
        ];
        for src in srcs {
            let problem = parse_problem_str(src).unwrap();
            let mut cfg = SolverConfig::for_problem(&problem);
            cfg.workers = 4;
            let par_report = solve(&problem, &cfg).unwrap();
            cfg.workers = 1;
            let seq_report = solve(&problem, &cfg).unwrap();
            assert_eq!(
                par_report.outcome.status(),
                seq_report.outcome.status(),
                "{src}"
            );
        }
    }

    #[test]
    fn external_endgame_with_mock_commands() {
        let dir = std::env::temp_dir().join("polybern-mock-smt");
        std::fs::create_dir_all(&dir).unwrap();
        let unsat = dir.join("unsat.sh");
        std::fs::write(&unsat, "#!/bin/sh\necho unsat\n").unwrap();
        let sat = dir.join("sat.sh");
        std::fs::write(
            &sat,
            "#!/bin/sh\necho sat\necho '(define-fun x () Real (- (/ 1.0 2.0)))'\n",
        )
        .unwrap();

        // Thin unsat instance: refinement leaves a sliver for the endgame.
        let problem =
            parse_problem_str("vars x\nbox -0.01 0.01\nconstraint x^2 + 0.000001").unwrap();
        let mut cfg = SolverConfig::for_problem(&problem);
        cfg.endgame = Endgame::ExternalSmt {
            command: format!("sh {}", unsat.display()),
        };
        let report = solve(&problem, &cfg).unwrap();
        assert_eq!(report.outcome.status(), "unsat");

        // Mock whose model is a real witness for x^2 - 1/4 <= 0.
        let problem = parse_problem_str("vars x\nbox -1 1\nconstraint x^2 - 0.25").unwrap();
        let mut cfg = SolverConfig::for_problem(&problem);
        cfg.epsilon = 2.0; // skip refinement, go straight to the endgame
        cfg.endgame = Endgame::ExternalSmt {
            command: format!("sh {}", sat.display()),
        };
        let report = solve(&problem, &cfg).unwrap();
        match &report.outcome {
            SolveOutcome::Sat { point, .. } => assert_eq!(point[0], -0.5),
            other => panic!("expected sat, got {other:?}"),
        }
    }

    #[test]
    fn smt_model_values_parse() {
        assert_eq!(parse_smt_value(" 0.5 )"), Some(0.5));
        assert_eq!(parse_smt_value(" (- 2.0) "), Some(-2.0));
        assert_eq!(parse_smt_value(" (/ 1.0 4.0) "), Some(0.25));
        assert_eq!(parse_smt_value(" (- (/ 3.0 2.0)) "), Some(-1.5));
    }

    #[test]
    fn report_json_is_deterministic() {
        let report = solve_src("vars x\nbox 0 1\nconstraint x - 10");
        let json = report.to_json();
        assert_eq!(json["status"], "sat");
        assert!(json["witness"].is_array());
        assert!(json["stats"]["iterations"].is_number());
        let report2 = solve_src("vars x\nbox 0 1\nconstraint x - 10");
        assert_eq!(
            serde_json::to_string(&json).unwrap(),
            serde_json::to_string(&report2.to_json()).unwrap()
        );
    }
}
