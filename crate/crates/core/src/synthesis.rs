//! Fixed-point game solvers producing lookup-table controllers.
//!
//! Reach and reach-avoid compute the least fixed point
//! `W ← W ∪ {x : ∃u. F(x,u) ⊆ W}` seeded with the target; safety computes the
//! greatest fixed point `W ← {x ∈ W : ∃u. F(x,u) ⊆ W}` seeded with the safe
//! set. Both sweeps only revisit predecessors of cells that changed in the
//! previous round.

use std::path::Path;

use nalgebra::Matrix4;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::abstraction::{read_framed, write_framed, GridSpec, SymbolicModel};
use crate::error::{Error, Result};

/// Dense bitset over cell indices.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CellSet {
    len: usize,
    words: Vec<u64>,
}

impl CellSet {
    pub fn new(len: usize) -> Self {
        CellSet {
            len,
            words: vec![0; len.div_ceil(64)],
        }
    }

    pub fn full(len: usize) -> Self {
        let mut s = CellSet::new(len);
        s.insert_range(0, len);
        s
    }

    pub fn from_indices(len: usize, cells: impl IntoIterator<Item = usize>) -> Self {
        let mut s = CellSet::new(len);
        for c in cells {
            s.insert(c);
        }
        s
    }

    pub fn from_fn(len: usize, mut pred: impl FnMut(usize) -> bool) -> Self {
        let mut s = CellSet::new(len);
        for c in 0..len {
            if pred(c) {
                s.insert(c);
            }
        }
        s
    }

    /// Universe size.
    pub fn capacity(&self) -> usize {
        self.len
    }

    #[inline]
    pub fn contains(&self, i: usize) -> bool {
        i < self.len && self.words[i / 64] >> (i % 64) & 1 == 1
    }

    #[inline]
    pub fn insert(&mut self, i: usize) {
        assert!(i < self.len, "cell {i} out of range {}", self.len);
        self.words[i / 64] |= 1 << (i % 64);
    }

    #[inline]
    pub fn remove(&mut self, i: usize) {
        if i < self.len {
            self.words[i / 64] &= !(1 << (i % 64));
        }
    }

    /// Inserts `start..start + n`.
    pub fn insert_range(&mut self, start: usize, n: usize) {
        let end = start + n;
        assert!(end <= self.len);
        let mut i = start;
        while i < end {
            let bit = i % 64;
            let take = (64 - bit).min(end - i);
            self.words[i / 64] |= mask(bit, take);
            i += take;
        }
    }

    /// Whether all of `start..start + n` are members.
    #[inline]
    pub fn contains_range(&self, start: usize, n: usize) -> bool {
        let end = start + n;
        let mut i = start;
        while i < end {
            let bit = i % 64;
            let take = (64 - bit).min(end - i);
            let m = mask(bit, take);
            if self.words[i / 64] & m != m {
                return false;
            }
            i += take;
        }
        true
    }

    /// Whether any of `start..start + n` is a member.
    #[inline]
    pub fn intersects_range(&self, start: usize, n: usize) -> bool {
        let end = start + n;
        let mut i = start;
        while i < end {
            let bit = i % 64;
            let take = (64 - bit).min(end - i);
            if self.words[i / 64] & mask(bit, take) != 0 {
                return true;
            }
            i += take;
        }
        false
    }

    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|w| *w == 0)
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(k, &w)| {
            let mut w = w;
            std::iter::from_fn(move || {
                if w == 0 {
                    None
                } else {
                    let b = w.trailing_zeros() as usize;
                    w &= w - 1;
                    Some(k * 64 + b)
                }
            })
        })
    }

    pub fn union_with(&mut self, other: &CellSet) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a |= b;
        }
    }

    pub fn difference_with(&mut self, other: &CellSet) {
        assert_eq!(self.len, other.len);
        for (a, b) in self.words.iter_mut().zip(&other.words) {
            *a &= !b;
        }
    }

    pub fn is_subset(&self, other: &CellSet) -> bool {
        self.len == other.len && self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0)
    }

    pub fn is_disjoint(&self, other: &CellSet) -> bool {
        self.words.iter().zip(&other.words).all(|(a, b)| a & b == 0)
    }

    fn clear(&mut self) {
        self.words.iter_mut().for_each(|w| *w = 0);
    }
}

#[inline]
fn mask(bit: usize, n: usize) -> u64 {
    if n == 64 {
        u64::MAX
    } else {
        ((1u64 << n) - 1) << bit
    }
}

/// Cells whose frequency row lies inside `[lo, hi]` (deviations, Hz).
pub fn frequency_rows_within(grid: &GridSpec, lo: f64, hi: f64) -> CellSet {
    frequency_rows(grid, grid.rows_within(0, lo, hi))
}

/// Cells whose frequency row meets `[lo, hi]` (deviations, Hz).
pub fn frequency_rows_meeting(grid: &GridSpec, lo: f64, hi: f64) -> CellSet {
    frequency_rows(grid, grid.rows_meeting(0, lo, hi))
}

fn frequency_rows(grid: &GridSpec, rows: std::ops::Range<usize>) -> CellSet {
    let stride = grid.total_cells() / grid.counts[0];
    let mut set = CellSet::new(grid.total_cells());
    set.insert_range(rows.start * stride, rows.len() * stride);
    set
}

/// Finite game arena: states, inputs and a (possibly blocked) successor relation.
pub trait Arena: Sync {
    fn n_states(&self) -> usize;
    fn n_inputs(&self) -> usize;

    /// `None` when the pair is blocked, else whether every successor is in `set`.
    fn successors_within(&self, x: usize, u: usize, set: &CellSet) -> Option<bool>;

    /// Largest rank among the successors of an unblocked pair.
    fn max_successor_rank(&self, x: usize, u: usize, rank: &[u32]) -> u32;

    /// Adds a superset of the predecessors of `y` (under any input) to `out`.
    fn mark_predecessors(&self, y: usize, out: &mut CellSet);

    /// Successor list of an unblocked pair; `None` when blocked.
    fn successor_list(&self, x: usize, u: usize) -> Option<Vec<usize>>;
}

/// [`SymbolicModel`] viewed as an arena; predecessors are derived from the
/// inverse of the affine centre map.
pub struct ModelArena<'a> {
    pub model: &'a SymbolicModel,
    phi_inv: Matrix4<f64>,
}

impl<'a> ModelArena<'a> {
    pub fn new(model: &'a SymbolicModel) -> Result<Self> {
        let phi_inv = model
            .map
            .phi_matrix()
            .try_inverse()
            .ok_or_else(|| Error::Numerical("transition matrix is singular".into()))?;
        Ok(ModelArena { model, phi_inv })
    }

    #[inline]
    fn for_each_row(&self, r: &[(usize, usize); 4], mut f: impl FnMut(usize, usize) -> bool) -> bool {
        let g = &self.model.grid;
        let n = r[3].1 - r[3].0 + 1;
        for a in r[0].0..=r[0].1 {
            for b in r[1].0..=r[1].1 {
                for c in r[2].0..=r[2].1 {
                    if !f(g.flat_index([a, b, c, r[3].0]), n) {
                        return false;
                    }
                }
            }
        }
        true
    }
}

impl Arena for ModelArena<'_> {
    fn n_states(&self) -> usize {
        self.model.total_cells()
    }

    fn n_inputs(&self) -> usize {
        self.model.n_inputs()
    }

    #[inline]
    fn successors_within(&self, x: usize, u: usize, set: &CellSet) -> Option<bool> {
        let r = self.model.successors(x, u).ranges()?;
        Some(self.for_each_row(&r, |start, n| set.contains_range(start, n)))
    }

    fn max_successor_rank(&self, x: usize, u: usize, rank: &[u32]) -> u32 {
        let mut best = 0;
        if let Some(r) = self.model.successors(x, u).ranges() {
            self.for_each_row(&r, |start, n| {
                best = rank[start..start + n].iter().fold(best, |m, v| m.max(*v));
                true
            });
        }
        best
    }

    fn mark_predecessors(&self, y: usize, out: &mut CellSet) {
        if let Some(r) = self.model.predecessor_box(&self.phi_inv, y) {
            self.for_each_row(&r, |start, n| {
                out.insert_range(start, n);
                true
            });
        }
    }

    fn successor_list(&self, x: usize, u: usize) -> Option<Vec<usize>> {
        let s = self.model.successors(x, u);
        (!s.is_out_of_domain()).then(|| s.cells(&self.model.grid))
    }
}

/// Explicit transition system with listed successors.
#[derive(Clone, Debug)]
pub struct ExplicitArena {
    n_inputs: usize,
    /// `succ[x * n_inputs + u]`; `None` marks a blocked pair.
    succ: Vec<Option<Vec<usize>>>,
    pred: Vec<Vec<usize>>,
}

impl ExplicitArena {
    pub fn new(n_states: usize, n_inputs: usize, succ: Vec<Option<Vec<usize>>>) -> Result<Self> {
        if succ.len() != n_states * n_inputs {
            return Err(Error::InvalidParameter("successor table has the wrong size".into()));
        }
        let mut pred = vec![Vec::new(); n_states];
        for (pair, s) in succ.iter().enumerate() {
            for &y in s.iter().flatten() {
                if y >= n_states {
                    return Err(Error::InvalidParameter(format!("successor {y} out of range")));
                }
                let x = pair / n_inputs;
                if pred[y].last() != Some(&x) {
                    pred[y].push(x);
                }
            }
        }
        Ok(ExplicitArena { n_inputs, succ, pred })
    }

    fn get(&self, x: usize, u: usize) -> Option<&[usize]> {
        self.succ[x * self.n_inputs + u].as_deref()
    }
}

impl Arena for ExplicitArena {
    fn n_states(&self) -> usize {
        self.pred.len()
    }

    fn n_inputs(&self) -> usize {
        self.n_inputs
    }

    fn successors_within(&self, x: usize, u: usize, set: &CellSet) -> Option<bool> {
        self.get(x, u).map(|s| s.iter().all(|y| set.contains(*y)))
    }

    fn max_successor_rank(&self, x: usize, u: usize, rank: &[u32]) -> u32 {
        self.get(x, u)
            .map_or(0, |s| s.iter().map(|y| rank[*y]).max().unwrap_or(0))
    }

    fn mark_predecessors(&self, y: usize, out: &mut CellSet) {
        for &x in &self.pred[y] {
            out.insert(x);
        }
    }

    fn successor_list(&self, x: usize, u: usize) -> Option<Vec<usize>> {
        self.get(x, u).map(<[usize]>::to_vec)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    Reach,
    ReachAvoid,
    Safety,
}

/// How one input is chosen among the admissible ones.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeterminizationRule {
    /// Smallest participation level; ties to the lowest input index.
    #[default]
    MinParticipation,
    /// Smallest worst-case successor rank, then smallest participation.
    MinRankThenMinU,
}

/// Picks one input for a cell from `(input index, worst successor rank)`
/// candidates. Input indices follow ascending participation.
pub fn pick_input(
    rule: DeterminizationRule,
    candidates: impl IntoIterator<Item = (usize, u32)>,
) -> Option<usize> {
    match rule {
        DeterminizationRule::MinParticipation => candidates.into_iter().map(|(i, _)| i).min(),
        DeterminizationRule::MinRankThenMinU => candidates
            .into_iter()
            .min_by_key(|&(i, r)| (r, i))
            .map(|(i, _)| i),
    }
}

/// Per-cell determinization; cells without admissible inputs map to `None`.
pub fn determinize(admissible: &[Vec<(usize, u32)>], rule: DeterminizationRule) -> Vec<Option<usize>> {
    admissible
        .iter()
        .map(|c| pick_input(rule, c.iter().copied()))
        .collect()
}

/// Policy entry meaning "cell not winning".
pub const NO_INPUT: u8 = u8::MAX;
/// Policy entry of target cells: no input is prescribed.
pub const HOLD: u8 = u8::MAX - 1;
pub const UNRANKED: u32 = u32::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Action {
    Input(usize),
    Hold,
}

/// Lookup-table controller produced by one of the solvers.
#[derive(Clone, Debug, PartialEq)]
pub struct Controller {
    pub kind: ControllerKind,
    pub name: String,
    pub rule: DeterminizationRule,
    pub winning: CellSet,
    pub target: CellSet,
    pub avoid: CellSet,
    policy: Vec<u8>,
    /// Rounds until inclusion (reach kinds); zero for safety winners.
    pub rank: Vec<u32>,
    pub levels: Vec<f64>,
    pub grid: Option<GridSpec>,
    pub config_hash: String,
    /// Fixed-point rounds performed.
    pub iterations: usize,
}

impl Controller {
    pub fn action(&self, cell: usize) -> Option<Action> {
        match *self.policy.get(cell)? {
            NO_INPUT => None,
            HOLD => Some(Action::Hold),
            i => Some(Action::Input(i as usize)),
        }
    }

    /// Overrides the table entry of one cell, keeping the winning set in sync.
    pub fn set_action(&mut self, cell: usize, action: Option<Action>) {
        self.policy[cell] = match action {
            None => NO_INPUT,
            Some(Action::Hold) => HOLD,
            Some(Action::Input(i)) => i as u8,
        };
        if action.is_some() {
            self.winning.insert(cell);
        } else {
            self.winning.remove(cell);
        }
    }

    pub fn input_level(&self, input: usize) -> f64 {
        self.levels[input]
    }

    pub fn policy_bytes(&self) -> &[u8] {
        &self.policy
    }

    pub fn winning_fraction(&self) -> f64 {
        self.winning.count() as f64 / self.winning.capacity().max(1) as f64
    }
}

fn check_sizes(arena: &impl Arena, sets: &[&CellSet]) -> Result<()> {
    if arena.n_inputs() >= HOLD as usize {
        return Err(Error::InvalidParameter(format!(
            "at most {} inputs supported",
            HOLD as usize - 1
        )));
    }
    for s in sets {
        if s.capacity() != arena.n_states() {
            return Err(Error::ContractViolation(format!(
                "cell set over {} cells used with an arena of {} cells",
                s.capacity(),
                arena.n_states()
            )));
        }
    }
    Ok(())
}

/// Reach controller: least fixed point seeded with `target`.
pub fn solve_reach(arena: &impl Arena, target: &CellSet, rule: DeterminizationRule) -> Result<Controller> {
    let avoid = CellSet::new(arena.n_states());
    let mut c = solve_reach_avoid(arena, target, &avoid, rule)?;
    c.kind = ControllerKind::Reach;
    Ok(c)
}

/// Reach-avoid controller: as [`solve_reach`], but `avoid` cells are never won,
/// so no chosen input can lead into them.
pub fn solve_reach_avoid(
    arena: &impl Arena,
    target: &CellSet,
    avoid: &CellSet,
    rule: DeterminizationRule,
) -> Result<Controller> {
    check_sizes(arena, &[target, avoid])?;
    if target.is_empty() {
        return Err(Error::ContractViolation("reach target is empty".into()));
    }
    if !target.is_disjoint(avoid) {
        return Err(Error::ContractViolation("target and avoid sets overlap".into()));
    }
    let n = arena.n_states();
    let mut won = target.clone();
    let mut policy = vec![NO_INPUT; n];
    let mut rank = vec![UNRANKED; n];
    for c in target.iter() {
        policy[c] = HOLD;
        rank[c] = 0;
    }

    let mut frontier: Vec<usize> = target.iter().collect();
    let mut candidates = CellSet::new(n);
    let mut round = 0u32;
    while !frontier.is_empty() {
        round += 1;
        candidates.clear();
        for &y in &frontier {
            arena.mark_predecessors(y, &mut candidates);
        }
        candidates.difference_with(&won);
        candidates.difference_with(avoid);
        let todo: Vec<usize> = candidates.iter().collect();

        let newly: Vec<(usize, usize)> = todo
            .par_iter()
            .filter_map(|&x| {
                let admissible = (0..arena.n_inputs())
                    .filter(|&u| arena.successors_within(x, u, &won) == Some(true));
                let input = match rule {
                    DeterminizationRule::MinParticipation => admissible.min(),
                    DeterminizationRule::MinRankThenMinU => pick_input(
                        rule,
                        admissible.map(|u| (u, arena.max_successor_rank(x, u, &rank))),
                    ),
                };
                input.map(|u| (x, u))
            })
            .collect();

        for &(x, u) in &newly {
            won.insert(x);
            policy[x] = u as u8;
            rank[x] = round;
        }
        frontier = newly.into_iter().map(|(x, _)| x).collect();
    }

    Ok(Controller {
        kind: ControllerKind::ReachAvoid,
        name: String::new(),
        rule,
        winning: won,
        target: target.clone(),
        avoid: avoid.clone(),
        policy,
        rank,
        levels: (0..arena.n_inputs()).map(|u| u as f64).collect(),
        grid: None,
        config_hash: String::new(),
        iterations: round.saturating_sub(1) as usize,
    })
}

/// Safety controller: greatest fixed point inside `safe`.
pub fn solve_safety(arena: &impl Arena, safe: &CellSet, rule: DeterminizationRule) -> Result<Controller> {
    check_sizes(arena, &[safe])?;
    if safe.is_empty() {
        return Err(Error::ContractViolation("safe set is empty".into()));
    }
    let n = arena.n_states();
    let mut won = safe.clone();
    let keeps = |x: usize, set: &CellSet| {
        (0..arena.n_inputs()).any(|u| arena.successors_within(x, u, set) == Some(true))
    };

    let mut todo: Vec<usize> = won.iter().collect();
    let mut candidates = CellSet::new(n);
    let mut rounds = 0;
    loop {
        let removed: Vec<usize> = todo.par_iter().copied().filter(|&x| !keeps(x, &won)).collect();
        if removed.is_empty() {
            break;
        }
        rounds += 1;
        for &x in &removed {
            won.remove(x);
        }
        candidates.clear();
        for &y in &removed {
            arena.mark_predecessors(y, &mut candidates);
        }
        // restrict to current winners
        for (c, w) in candidates.words.iter_mut().zip(&won.words) {
            *c &= w;
        }
        todo = candidates.iter().collect();
    }

    let mut policy = vec![NO_INPUT; n];
    let chosen: Vec<(usize, usize)> = won
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|&x| {
            let admissible = (0..arena.n_inputs())
                .filter(|&u| arena.successors_within(x, u, &won) == Some(true))
                .map(|u| (u, 0));
            (x, pick_input(rule, admissible).expect("winning cell has an admissible input"))
        })
        .collect();
    let mut rank = vec![UNRANKED; n];
    for (x, u) in chosen {
        policy[x] = u as u8;
        rank[x] = 0;
    }

    Ok(Controller {
        kind: ControllerKind::Safety,
        name: String::new(),
        rule,
        winning: won,
        target: CellSet::new(n),
        avoid: CellSet::new(n),
        policy,
        rank,
        levels: (0..arena.n_inputs()).map(|u| u as f64).collect(),
        grid: None,
        config_hash: String::new(),
        iterations: rounds,
    })
}

impl Controller {
    /// Attaches the grid, input levels and config hash of `model`.
    pub fn bind(mut self, model: &SymbolicModel, name: impl Into<String>) -> Self {
        self.grid = Some(model.grid.clone());
        self.levels = model.inputs.levels().to_vec();
        self.config_hash = model.config_hash.clone();
        self.name = name.into();
        self
    }

    /// Checks the closure invariants of the policy against `arena`.
    pub fn verify(&self, arena: &impl Arena) -> Result<()> {
        for x in self.winning.iter() {
            let Some(action) = self.action(x) else {
                return Err(Error::ContractViolation(format!("winning cell {x} has no policy")));
            };
            let u = match action {
                Action::Hold if self.target.contains(x) => continue,
                Action::Hold => {
                    return Err(Error::ContractViolation(format!("non-target cell {x} holds")))
                }
                Action::Input(u) => u,
            };
            let succ = arena
                .successor_list(x, u)
                .ok_or_else(|| Error::ContractViolation(format!("cell {x} uses a blocked input")))?;
            for y in succ {
                if !self.winning.contains(y) {
                    return Err(Error::ContractViolation(format!("cell {x} can leave the winning set")));
                }
                if self.kind != ControllerKind::Safety && self.rank[y] >= self.rank[x] {
                    return Err(Error::ContractViolation(format!("rank does not decrease from cell {x}")));
                }
            }
        }
        Ok(())
    }

    /// Re-picks the input of every ranked non-target cell: among the inputs
    /// whose successors all have a strictly smaller rank, the one whose level
    /// is closest to `level`, ties to the lower index. The winning set and the
    /// ranks are unchanged, so [`Controller::verify`] still holds.
    pub fn prefer_level(&mut self, arena: &impl Arena, level: f64) -> Result<()> {
        if self.kind == ControllerKind::Safety {
            return Err(Error::ContractViolation("level preference needs a ranked controller".into()));
        }
        if self.levels.len() != arena.n_inputs() || self.rank.len() != arena.n_states() {
            return Err(Error::ContractViolation("controller does not match the arena".into()));
        }
        let cells: Vec<usize> = self.winning.iter().filter(|&x| self.rank[x] > 0).collect();
        let rank = &self.rank;
        let levels = &self.levels;
        let picks: Vec<(usize, usize)> = cells
            .par_iter()
            .map(|&x| {
                let best = (0..arena.n_inputs())
                    .filter(|&u| arena.successors_within(x, u, &self.winning) == Some(true))
                    .filter(|&u| arena.max_successor_rank(x, u, rank) < rank[x])
                    .min_by(|&a, &b| {
                        (levels[a] - level)
                            .abs()
                            .total_cmp(&(levels[b] - level).abs())
                            .then(a.cmp(&b))
                    })
                    .expect("ranked cell keeps the input that ranked it");
                (x, best)
            })
            .collect();
        for (x, u) in picks {
            self.policy[x] = u as u8;
        }
        Ok(())
    }
}

const CONTROLLER_MAGIC: &[u8; 8] = b"FSYMCTRL";
pub const CONTROLLER_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ControllerHeader {
    version: u32,
    kind: ControllerKind,
    name: String,
    rule: DeterminizationRule,
    config_hash: String,
    levels: Vec<f64>,
    grid: Option<GridSpec>,
    iterations: usize,
    cells: usize,
    target: CellSet,
    avoid: CellSet,
}

impl Controller {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&ControllerHeader {
            version: CONTROLLER_FORMAT_VERSION,
            kind: self.kind,
            name: self.name.clone(),
            rule: self.rule,
            config_hash: self.config_hash.clone(),
            levels: self.levels.clone(),
            grid: self.grid.clone(),
            iterations: self.iterations,
            cells: self.policy.len(),
            target: self.target.clone(),
            avoid: self.avoid.clone(),
        })
        .expect("serializable");
        let mut body = Vec::with_capacity(self.policy.len() * 5);
        body.extend_from_slice(&self.policy);
        for r in &self.rank {
            body.extend_from_slice(&r.to_le_bytes());
        }
        let mut out = Vec::new();
        write_framed(&mut out, CONTROLLER_MAGIC, &header, &body).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = read_framed(&mut &bytes[..], CONTROLLER_MAGIC)?;
        let h: ControllerHeader = serde_json::from_slice(&header)
            .map_err(|e| Error::Format(format!("controller header: {e}")))?;
        if h.version != CONTROLLER_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported controller version {}", h.version)));
        }
        let n = h.cells;
        if body.len() != n * 5 || h.target.capacity() != n || h.avoid.capacity() != n {
            return Err(Error::Format("controller body does not match header".into()));
        }
        let policy = body[..n].to_vec();
        let rank: Vec<u32> = body[n..]
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let winning = CellSet::from_fn(n, |c| policy[c] != NO_INPUT);
        Ok(Controller {
            kind: h.kind,
            name: h.name,
            rule: h.rule,
            winning,
            target: h.target,
            avoid: h.avoid,
            policy,
            rank,
            levels: h.levels,
            grid: h.grid,
            config_hash: h.config_hash,
            iterations: h.iterations,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let c = Controller::from_bytes(&std::fs::read(path)?)?;
        if let Some(expected) = expected_hash {
            if c.config_hash != expected {
                return Err(Error::HashMismatch {
                    path: path.to_owned(),
                    expected: expected.to_owned(),
                    found: c.config_hash,
                });
            }
        }
        Ok(c)
    }

    /// `cell_index,f_lo,f_hi,g_lo,g_hi,l_lo,l_hi,p_lo,p_hi,u` over winning cells.
    pub fn to_csv(&self) -> Result<String> {
        let grid = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::ContractViolation("controller has no grid attached".into()))?;
        let mut out = String::from("cell_index,f_lo,f_hi,g_lo,g_hi,l_lo,l_hi,p_lo,p_hi,u\n");
        for cell in self.winning.iter() {
            let (lo, hi) = grid.cell_bounds(cell);
            let u = match self.action(cell) {
                Some(Action::Input(i)) => self.levels[i].to_string(),
                _ => "hold".to_string(),
            };
            out.push_str(&format!(
                "{cell},{},{},{},{},{},{},{},{},{u}\n",
                lo[0], hi[0], lo[1], hi[1], lo[2], hi[2], lo[3], hi[3]
            ));
        }
        Ok(out)
    }
}
