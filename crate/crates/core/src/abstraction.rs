//! Finite symbolic model of the sampled grid dynamics.
//!
//! The working region is split into a uniform grid of hyper-rectangular
//! cells. For every cell and input level the set of states reachable after
//! one sampling period, under any loss in the disturbance interval, is
//! bounded by a rectangle: the centre is propagated exactly and the radius
//! follows the growth-bound ODE `r' = L r + |Bw| Δw/2`, where `L` is the
//! Metzler majorant of `A`. Every cell meeting that rectangle is a successor.
//!
//! Successor sets are therefore axis-aligned blocks of cells and are stored
//! as eight per-dimension indices per `(cell, input)` pair.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Matrix4, SMatrix, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid_model::{StateVec, SystemMatrices};

const DIM: usize = 4;

/// Largest per-dimension cell count representable in the packed encoding.
pub const MAX_CELLS_PER_DIM: usize = 254;

/// Default working region bounds, in `[f, g, l, p]` order.
pub const GB_LOWER: [f64; DIM] = [-1.0, 0.0, 0.0, 0.0];
pub const GB_UPPER: [f64; DIM] = [0.1, 3.0, 2.0, 2.0];
/// Upper bounds of the wider region used for closed-loop runs; lower bounds
/// as [`GB_LOWER`].
pub const WIDE_UPPER: [f64; DIM] = [0.1, 4.0, 3.0, 3.0];

/// Default ceiling on the transition table size.
pub const DEFAULT_MEMORY_BUDGET: usize = 3 << 30;

/// Uniform partition of the working region.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: [f64; DIM],
    pub upper: [f64; DIM],
    pub eta: [f64; DIM],
    pub counts: [usize; DIM],
}

impl GridSpec {
    pub fn new(lower: [f64; DIM], upper: [f64; DIM], eta: [f64; DIM]) -> Result<Self> {
        let mut counts = [0usize; DIM];
        for i in 0..DIM {
            if !(upper[i] > lower[i]) {
                return Err(Error::InvalidParameter(format!(
                    "dimension {i}: upper {} must exceed lower {}",
                    upper[i], lower[i]
                )));
            }
            if !(eta[i] > 0.0) {
                return Err(Error::InvalidParameter(format!("dimension {i}: eta must be positive")));
            }
            let ratio = (upper[i] - lower[i]) / eta[i];
            let n = ratio.round();
            if n < 1.0 || (ratio - n).abs() > 1e-6 * n.max(1.0) {
                return Err(Error::InvalidParameter(format!(
                    "dimension {i}: extent {} is not a whole number of cells of width {}",
                    upper[i] - lower[i],
                    eta[i]
                )));
            }
            let n = n as usize;
            if n > MAX_CELLS_PER_DIM {
                return Err(Error::InvalidParameter(format!(
                    "dimension {i}: {n} cells exceeds the supported {MAX_CELLS_PER_DIM}"
                )));
            }
            counts[i] = n;
        }
        Ok(GridSpec {
            lower,
            upper,
            eta,
            counts,
        })
    }

    /// Working region `f ∈ [-1, 0.1]`, `g ∈ [0, 3]`, `l, p ∈ [0, 2]` with
    /// uniform width `eta`.
    pub fn gb(eta: f64) -> Result<Self> {
        GridSpec::new(GB_LOWER, GB_UPPER, [eta; DIM])
    }

    /// Region `f ∈ [-1, 0.1]`, `g ∈ [0, 4]`, `l, p ∈ [0, 3]`.
    pub fn wide(eta: f64) -> Result<Self> {
        GridSpec::new(GB_LOWER, WIDE_UPPER, [eta; DIM])
    }

    pub fn total_cells(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn flat_index(&self, idx: [usize; DIM]) -> usize {
        ((idx[0] * self.counts[1] + idx[1]) * self.counts[2] + idx[2]) * self.counts[3] + idx[3]
    }

    pub fn multi_index(&self, mut cell: usize) -> [usize; DIM] {
        let mut idx = [0; DIM];
        for i in (0..DIM).rev() {
            idx[i] = cell % self.counts[i];
            cell /= self.counts[i];
        }
        idx
    }

    /// Index of the cell row containing coordinate `v` along dimension `d`,
    /// or `None` outside the region. The upper boundary belongs to the last cell.
    #[inline]
    pub fn coord_index(&self, d: usize, v: f64) -> Option<usize> {
        if !(v >= self.lower[d] && v <= self.upper[d]) {
            return None;
        }
        let k = ((v - self.lower[d]) / self.eta[d]).floor() as usize;
        Some(k.min(self.counts[d] - 1))
    }

    pub fn cell_center(&self, cell: usize) -> StateVec {
        let idx = self.multi_index(cell);
        StateVec(std::array::from_fn(|i| self.lower[i] + (idx[i] as f64 + 0.5) * self.eta[i]))
    }

    /// Lower and upper corners of a cell.
    pub fn cell_bounds(&self, cell: usize) -> ([f64; DIM], [f64; DIM]) {
        let idx = self.multi_index(cell);
        let lo = std::array::from_fn(|i| self.lower[i] + idx[i] as f64 * self.eta[i]);
        let hi = std::array::from_fn(|i| self.lower[i] + (idx[i] + 1) as f64 * self.eta[i]);
        (lo, hi)
    }

    /// Cells whose row along `d` lies inside `[lo, hi]`.
    pub fn rows_within(&self, d: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let tol = 1e-9 * self.eta[d];
        let first = ((lo - self.lower[d]) / self.eta[d] - tol).ceil().max(0.0) as usize;
        let end = (((hi - self.lower[d]) / self.eta[d] + tol).floor().max(0.0) as usize).min(self.counts[d]);
        first..end.max(first)
    }

    /// Cells whose row along `d` meets `[lo, hi]`.
    pub fn rows_meeting(&self, d: usize, lo: f64, hi: f64) -> std::ops::Range<usize> {
        let tol = 1e-9 * self.eta[d];
        let first = ((lo - self.lower[d]) / self.eta[d] + tol).floor().max(0.0) as usize;
        let end = (((hi - self.lower[d]) / self.eta[d] - tol).ceil().max(0.0) as usize).min(self.counts[d]);
        first.min(self.counts[d])..end.max(first.min(self.counts[d]))
    }
}

/// Flat cell index of the state, `None` outside the working region.
pub fn state_to_cell(x: &StateVec, grid: &GridSpec) -> Option<usize> {
    let mut idx = [0; DIM];
    for d in 0..DIM {
        idx[d] = grid.coord_index(d, x[d])?;
    }
    Some(grid.flat_index(idx))
}

/// Finite set of participation levels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InputGrid {
    levels: Vec<f64>,
}

impl InputGrid {
    pub fn new(mut levels: Vec<f64>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::InvalidParameter("input grid is empty".into()));
        }
        if levels.iter().any(|u| !(0.0..=1.0).contains(u)) {
            return Err(Error::InvalidParameter("input levels must lie in [0, 1]".into()));
        }
        levels.sort_by(f64::total_cmp);
        if levels.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidParameter("input levels must be distinct".into()));
        }
        Ok(InputGrid { levels })
    }

    /// `n` evenly spaced levels from 0 to 1 inclusive.
    pub fn uniform(n: usize) -> Result<Self> {
        match n {
            0 => Err(Error::InvalidParameter("input grid is empty".into())),
            1 => InputGrid::new(vec![0.0]),
            _ => InputGrid::new((0..n).map(|k| k as f64 / (n - 1) as f64).collect()),
        }
    }

    pub fn levels(&self) -> &[f64] {
        &self.levels
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn level(&self, i: usize) -> f64 {
        self.levels[i]
    }
}

impl Default for InputGrid {
    fn default() -> Self {
        InputGrid::uniform(21).expect("non-empty")
    }
}

/// Axis-aligned box `center ± radius`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Rect {
    pub center: StateVec,
    pub radius: [f64; DIM],
}

impl Rect {
    pub fn lo(&self, d: usize) -> f64 {
        self.center[d] - self.radius[d]
    }
    pub fn hi(&self, d: usize) -> f64 {
        self.center[d] + self.radius[d]
    }
    pub fn contains(&self, x: &StateVec) -> bool {
        (0..DIM).all(|d| x[d] >= self.lo(d) && x[d] <= self.hi(d))
    }
}

/// Metzler majorant of a state matrix: diagonal kept, off-diagonals in absolute value.
pub fn growth_matrix(a: &Matrix4<f64>) -> Matrix4<f64> {
    Matrix4::from_fn(|i, j| if i == j { a[(i, j)] } else { a[(i, j)].abs() })
}

/// Solution at `tau` of `r' = L r + c` from `r(0) = r0`.
pub fn growth_radius(growth: &Matrix4<f64>, r0: &Vector4<f64>, c: &Vector4<f64>, tau: f64) -> Vector4<f64> {
    let mut m = SMatrix::<f64, 5, 5>::zeros();
    m.fixed_view_mut::<4, 4>(0, 0).copy_from(growth);
    m.fixed_view_mut::<4, 1>(0, 4).copy_from(c);
    let e = (m * tau).exp();
    e.fixed_view::<4, 4>(0, 0) * r0 + e.fixed_view::<4, 1>(0, 4)
}

/// Absolute slack added to every radius against rounding in the centre map.
const RADIUS_SLACK: f64 = 1e-9;

/// Affine one-period successor map shared by every cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuccessorMap {
    /// Row-major `Φ`.
    pub phi: [[f64; DIM]; DIM],
    pub gamma_u: [f64; DIM],
    /// `Γw` times the interval midpoint.
    pub offset_w: [f64; DIM],
    pub radius: [f64; DIM],
}

impl SuccessorMap {
    pub fn new(
        matrices: &SystemMatrices,
        grid: &GridSpec,
        w_range: (f64, f64),
        tau: f64,
    ) -> Result<Self> {
        check_w_range(w_range)?;
        let disc = matrices.discretize(tau)?;
        let growth = growth_matrix(&matrices.a);
        let half_w = 0.5 * (w_range.1 - w_range.0);
        let c = matrices.bw.abs() * half_w;
        let r0 = Vector4::from(grid.eta) * 0.5;
        let r = growth_radius(&growth, &r0, &c, tau);
        let w_c = 0.5 * (w_range.0 + w_range.1);
        Ok(SuccessorMap {
            phi: std::array::from_fn(|i| std::array::from_fn(|j| disc.phi[(i, j)])),
            gamma_u: std::array::from_fn(|i| disc.gamma_u[i]),
            offset_w: std::array::from_fn(|i| disc.gamma_w[i] * w_c),
            radius: std::array::from_fn(|i| r[i] + RADIUS_SLACK),
        })
    }

    #[inline]
    pub fn center(&self, c: &StateVec, u: f64) -> StateVec {
        StateVec(std::array::from_fn(|i| {
            let row = &self.phi[i];
            row[0] * c[0] + row[1] * c[1] + row[2] * c[2] + row[3] * c[3]
                + self.gamma_u[i] * u
                + self.offset_w[i]
        }))
    }

    pub fn phi_matrix(&self) -> Matrix4<f64> {
        Matrix4::from_fn(|i, j| self.phi[i][j])
    }
}

fn check_w_range(w_range: (f64, f64)) -> Result<()> {
    if !(w_range.0 <= w_range.1) || !w_range.0.is_finite() || !w_range.1.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "disturbance range [{}, {}] is not an interval",
            w_range.0, w_range.1
        )));
    }
    Ok(())
}

/// Over-approximating successor rectangle of `cell` under input `u`.
pub fn post_rect(
    grid: &GridSpec,
    cell: usize,
    u: f64,
    w_range: (f64, f64),
    tau: f64,
    matrices: &SystemMatrices,
) -> Result<Rect> {
    let map = SuccessorMap::new(matrices, grid, w_range, tau)?;
    Ok(Rect {
        center: map.center(&grid.cell_center(cell), u),
        radius: map.radius,
    })
}

/// Successor block of one `(cell, input)` pair, or out of domain.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
#[repr(transparent)]
pub struct Successors([u8; 2 * DIM]);

impl Successors {
    pub const OUT_OF_DOMAIN: Successors = Successors([u8::MAX; 2 * DIM]);

    fn block(lo: [usize; DIM], hi: [usize; DIM]) -> Self {
        let mut b = [0u8; 2 * DIM];
        for d in 0..DIM {
            b[d] = lo[d] as u8;
            b[DIM + d] = hi[d] as u8;
        }
        Successors(b)
    }

    #[inline]
    pub fn is_out_of_domain(&self) -> bool {
        self.0[0] == u8::MAX
    }

    /// Inclusive per-dimension `(lo, hi)` index ranges.
    #[inline]
    pub fn ranges(&self) -> Option<[(usize, usize); DIM]> {
        if self.is_out_of_domain() {
            None
        } else {
            Some(std::array::from_fn(|d| (self.0[d] as usize, self.0[DIM + d] as usize)))
        }
    }

    pub fn len(&self) -> usize {
        self.ranges()
            .map_or(0, |r| r.iter().map(|(lo, hi)| hi - lo + 1).product())
    }

    pub fn is_empty(&self) -> bool {
        self.is_out_of_domain()
    }

    pub fn contains(&self, grid: &GridSpec, cell: usize) -> bool {
        let idx = grid.multi_index(cell);
        self.ranges()
            .is_some_and(|r| (0..DIM).all(|d| r[d].0 <= idx[d] && idx[d] <= r[d].1))
    }

    /// Flat indices of every successor cell.
    pub fn cells(&self, grid: &GridSpec) -> Vec<usize> {
        let Some(r) = self.ranges() else {
            return Vec::new();
        };
        let mut out = Vec::with_capacity(self.len());
        for a in r[0].0..=r[0].1 {
            for b in r[1].0..=r[1].1 {
                for c in r[2].0..=r[2].1 {
                    for d in r[3].0..=r[3].1 {
                        out.push(grid.flat_index([a, b, c, d]));
                    }
                }
            }
        }
        out
    }
}

impl fmt::Debug for Successors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.ranges() {
            None => f.write_str("OutOfDomain"),
            Some(r) => f.debug_list().entries(r.iter()).finish(),
        }
    }
}

/// Block of cells meeting `rect`, or out of domain when the rectangle leaves
/// the working region along any dimension.
pub fn rect_to_successors(grid: &GridSpec, rect: &Rect) -> Successors {
    let mut lo = [0; DIM];
    let mut hi = [0; DIM];
    for d in 0..DIM {
        match (grid.coord_index(d, rect.lo(d)), grid.coord_index(d, rect.hi(d))) {
            (Some(a), Some(b)) => {
                lo[d] = a;
                hi[d] = b;
            }
            _ => return Successors::OUT_OF_DOMAIN,
        }
    }
    Successors::block(lo, hi)
}

/// `S_a = (X_a, U_a, F_a)`.
#[derive(Clone, Debug)]
pub struct SymbolicModel {
    pub grid: GridSpec,
    pub inputs: InputGrid,
    pub tau: f64,
    pub w_range: (f64, f64),
    pub map: SuccessorMap,
    pub config_hash: String,
    transitions: Vec<Successors>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ModelStats {
    pub cells: usize,
    pub inputs: usize,
    pub out_of_domain: usize,
    /// Sum of successor counts over in-domain pairs.
    pub transitions: u64,
}

impl SymbolicModel {
    #[inline]
    pub fn successors(&self, cell: usize, input: usize) -> Successors {
        self.transitions[cell * self.inputs.len() + input]
    }

    pub fn total_cells(&self) -> usize {
        self.grid.total_cells()
    }

    pub fn n_inputs(&self) -> usize {
        self.inputs.len()
    }

    pub fn transitions(&self) -> &[Successors] {
        &self.transitions
    }

    pub fn stats(&self) -> ModelStats {
        let mut s = ModelStats {
            cells: self.total_cells(),
            inputs: self.n_inputs(),
            ..Default::default()
        };
        for t in &self.transitions {
            if t.is_out_of_domain() {
                s.out_of_domain += 1;
            } else {
                s.transitions += t.len() as u64;
            }
        }
        s
    }

    /// Per-dimension index ranges containing every cell that can have a
    /// successor in `cell` under some input. A superset, used to find
    /// predecessors without storing them.
    pub fn predecessor_box(&self, phi_inv: &Matrix4<f64>, cell: usize) -> Option<[(usize, usize); DIM]> {
        let g = &self.grid;
        let y = g.cell_center(cell).to_vector();
        let h = Vector4::from_fn(|i, _| self.map.radius[i] + 0.5 * g.eta[i] + 1e-7);
        let abs_inv = phi_inv.abs();
        let spread = abs_inv * h;
        let gamma_u = Vector4::from(self.map.gamma_u);
        let offset = Vector4::from(self.map.offset_w);
        let levels = self.inputs.levels();
        let (u_lo, u_hi) = (levels[0], levels[levels.len() - 1]);
        let m0 = phi_inv * (y - offset - gamma_u * u_lo);
        let m1 = phi_inv * (y - offset - gamma_u * u_hi);
        let mut out = [(0, 0); DIM];
        for d in 0..DIM {
            let a = m0[d].min(m1[d]) - spread[d];
            let b = m0[d].max(m1[d]) + spread[d];
            // centres lower + (k + 1/2) eta inside [a, b]
            let ka = ((a - g.lower[d]) / g.eta[d] - 0.5 - 1e-6).ceil();
            let kb = ((b - g.lower[d]) / g.eta[d] - 0.5 + 1e-6).floor();
            let ka = ka.max(0.0);
            let kb = kb.min((g.counts[d] - 1) as f64);
            if ka > kb {
                return None;
            }
            out[d] = (ka as usize, kb as usize);
        }
        Some(out)
    }
}

/// Inputs to [`build_symbolic_model`] that determine its content; hashed
/// into every file derived from the model.
#[derive(Clone, Debug, Serialize)]
pub struct AbstractionKey<'a> {
    pub a: [[f64; DIM]; DIM],
    pub b: [f64; DIM],
    pub bw: [f64; DIM],
    pub grid: &'a GridSpec,
    pub inputs: &'a InputGrid,
    pub tau: f64,
    pub w_range: (f64, f64),
}

impl AbstractionKey<'_> {
    pub fn hash(&self) -> String {
        crate::io::hash_hex(&serde_json::to_vec(self).expect("serializable"))
    }
}

pub fn config_hash(
    matrices: &SystemMatrices,
    grid: &GridSpec,
    inputs: &InputGrid,
    tau: f64,
    w_range: (f64, f64),
) -> String {
    AbstractionKey {
        a: std::array::from_fn(|i| std::array::from_fn(|j| matrices.a[(i, j)])),
        b: std::array::from_fn(|i| matrices.b[i]),
        bw: std::array::from_fn(|i| matrices.bw[i]),
        grid,
        inputs,
        tau,
        w_range,
    }
    .hash()
}

pub fn build_symbolic_model(
    grid: &GridSpec,
    inputs: &InputGrid,
    w_range: (f64, f64),
    tau: f64,
    matrices: &SystemMatrices,
) -> Result<SymbolicModel> {
    build_symbolic_model_with_budget(grid, inputs, w_range, tau, matrices, DEFAULT_MEMORY_BUDGET)
}

pub fn build_symbolic_model_with_budget(
    grid: &GridSpec,
    inputs: &InputGrid,
    w_range: (f64, f64),
    tau: f64,
    matrices: &SystemMatrices,
    budget_bytes: usize,
) -> Result<SymbolicModel> {
    let cells = grid.total_cells();
    let n_in = inputs.len();
    let pairs = cells
        .checked_mul(n_in)
        .ok_or_else(|| Error::InvalidParameter("transition table size overflows".into()))?;
    let required_bytes = pairs.saturating_mul(std::mem::size_of::<Successors>());
    if required_bytes > budget_bytes {
        return Err(Error::MemoryBudget {
            cells,
            inputs: n_in,
            pairs,
            required_bytes,
            budget_bytes,
        });
    }
    let map = SuccessorMap::new(matrices, grid, w_range, tau)?;

    let mut transitions = vec![Successors::OUT_OF_DOMAIN; pairs];
    const CELLS_PER_CHUNK: usize = 4096;
    transitions
        .par_chunks_mut(CELLS_PER_CHUNK * n_in)
        .enumerate()
        .for_each(|(chunk, out)| {
            let first = chunk * CELLS_PER_CHUNK;
            for (k, row) in out.chunks_mut(n_in).enumerate() {
                let center = grid.cell_center(first + k);
                for (slot, &u) in row.iter_mut().zip(inputs.levels()) {
                    let rect = Rect {
                        center: map.center(&center, u),
                        radius: map.radius,
                    };
                    *slot = rect_to_successors(grid, &rect);
                }
            }
        });

    Ok(SymbolicModel {
        grid: grid.clone(),
        inputs: inputs.clone(),
        tau,
        w_range,
        map,
        config_hash: config_hash(matrices, grid, inputs, tau, w_range),
        transitions,
    })
}

const MODEL_MAGIC: &[u8; 8] = b"FSYMMODL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    version: u32,
    config_hash: String,
    grid: GridSpec,
    inputs: InputGrid,
    tau: f64,
    w_range: (f64, f64),
    map: SuccessorMap,
    pairs: usize,
}

/// Writes `magic | u32 header length | JSON header | packed transitions`.
pub(crate) fn write_framed(out: &mut impl Write, magic: &[u8; 8], header: &[u8], body: &[u8]) -> Result<()> {
    out.write_all(magic)?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(header)?;
    out.write_all(body)?;
    Ok(())
}

pub(crate) fn read_framed(input: &mut impl Read, magic: &[u8; 8]) -> Result<(Vec<u8>, Vec<u8>)> {
    let mut m = [0u8; 8];
    input.read_exact(&mut m)?;
    if &m != magic {
        return Err(Error::Format("bad magic".into()));
    }
    let mut len = [0u8; 4];
    input.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    input.read_exact(&mut header)?;
    let mut body = Vec::new();
    input.read_to_end(&mut body)?;
    Ok((header, body))
}

impl SymbolicModel {
    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&ModelHeader {
            version: MODEL_FORMAT_VERSION,
            config_hash: self.config_hash.clone(),
            grid: self.grid.clone(),
            inputs: self.inputs.clone(),
            tau: self.tau,
            w_range: self.w_range,
            map: self.map.clone(),
            pairs: self.transitions.len(),
        })
        .expect("serializable");
        let body: Vec<u8> = self.transitions.iter().flat_map(|s| s.0).collect();
        let mut out = Vec::with_capacity(body.len() + header.len() + 16);
        write_framed(&mut out, MODEL_MAGIC, &header, &body).expect("in-memory write");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, body) = read_framed(&mut &bytes[..], MODEL_MAGIC)?;
        let h: ModelHeader =
            serde_json::from_slice(&header).map_err(|e| Error::Format(format!("model header: {e}")))?;
        if h.version != MODEL_FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported model version {}", h.version)));
        }
        if h.pairs != h.grid.total_cells() * h.inputs.len() || body.len() != h.pairs * 2 * DIM {
            return Err(Error::Format("transition table size does not match header".into()));
        }
        let transitions = body
            .chunks_exact(2 * DIM)
            .map(|c| Successors(c.try_into().expect("chunk of 8")))
            .collect();
        Ok(SymbolicModel {
            grid: h.grid,
            inputs: h.inputs,
            tau: h.tau,
            w_range: h.w_range,
            map: h.map,
            config_hash: h.config_hash,
            transitions,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    /// Loads a model and checks its recorded hash against `expected_hash`.
    pub fn load(path: &Path, expected_hash: Option<&str>) -> Result<Self> {
        let model = SymbolicModel::from_bytes(&std::fs::read(path)?)?;
        if let Some(expected) = expected_hash {
            if model.config_hash != expected {
                return Err(Error::HashMismatch {
                    path: path.to_owned(),
                    expected: expected.to_owned(),
                    found: model.config_hash,
                });
            }
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid_model::{build_matrices, ChargingMode, GridParams, IntegrationMethod, NOMINAL_LOSS_W};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gb_matrices() -> SystemMatrices {
        build_matrices(&GridParams::gb(ChargingMode::Bi)).unwrap()
    }

    fn w_range() -> (f64, f64) {
        (0.95 * NOMINAL_LOSS_W, NOMINAL_LOSS_W)
    }

    #[test]
    fn default_grid_counts() {
        let g = GridSpec::gb(0.05).unwrap();
        assert_eq!(g.counts, [22, 60, 40, 40]);
        assert_eq!(g.total_cells(), 2_112_000);
        let g = GridSpec::gb(0.1).unwrap();
        assert_eq!(g.counts, [11, 30, 20, 20]);
    }

    #[test]
    fn grid_rejects_bad_extents() {
        assert!(GridSpec::new([0.0; 4], [1.0; 4], [0.3; 4]).is_err());
        assert!(GridSpec::new([0.0; 4], [0.0, 1.0, 1.0, 1.0], [0.5; 4]).is_err());
        assert!(GridSpec::new([0.0; 4], [1.0; 4], [0.0; 4]).is_err());
    }

    #[test]
    fn center_round_trips_and_outside() {
        let g = GridSpec::gb(0.05).unwrap();
        let cell = g.flat_index([3, 5, 7, 9]);
        assert_eq!(state_to_cell(&g.cell_center(cell), &g), Some(cell));
        assert_eq!(state_to_cell(&StateVec::new(-1.2, 0.5, 0.5, 0.5), &g), None);
        // upper boundary belongs to the last cell
        let top = state_to_cell(&StateVec::new(0.1, 3.0, 2.0, 2.0), &g).unwrap();
        assert_eq!(g.multi_index(top), [21, 59, 39, 39]);
        for cell in [0, 17, 12345, g.total_cells() - 1] {
            assert_eq!(g.flat_index(g.multi_index(cell)), cell);
        }
    }

    #[test]
    fn row_selection() {
        let g = GridSpec::gb(0.05).unwrap();
        // f in [-0.15, 0]
        assert_eq!(g.rows_within(0, -0.15, 0.0), 17..20);
        // cells meeting f < -0.8
        assert_eq!(g.rows_meeting(0, -10.0, -0.8), 0..4);
        let coarse = GridSpec::gb(0.1).unwrap();
        assert_eq!(coarse.rows_within(0, -0.15, 0.0), 9..10);
    }

    #[test]
    fn growth_matrix_is_metzler() {
        let a = gb_matrices().a;
        let l = growth_matrix(&a);
        assert!((l[(1, 0)] - 2.0).abs() < 1e-12);
        assert!((l[(2, 0)] - 1.0 / 3.0).abs() < 1e-6);
        for i in 0..4 {
            assert_eq!(l[(i, i)], a[(i, i)]);
            for j in 0..4 {
                if i != j {
                    assert!(l[(i, j)] >= 0.0);
                }
            }
        }
        let metzler = Matrix4::new(-1.0, 0.5, 0.0, 0.0, 0.2, -2.0, 0.0, 0.0, 0.0, 0.0, -1.0, 0.3, 0.0, 0.0, 0.0, -4.0);
        assert_eq!(growth_matrix(&metzler), metzler);
    }

    #[test]
    fn zero_growth_keeps_radius() {
        let r0 = Vector4::new(0.025, 0.025, 0.025, 0.025);
        let r = growth_radius(&Matrix4::zeros(), &r0, &Vector4::zeros(), 0.25);
        assert!((r - r0).amax() < 1e-15);
    }

    #[test]
    fn radius_is_monotone_in_tau() {
        let m = gb_matrices();
        let g = GridSpec::gb(0.05).unwrap();
        let mut prev = [0.0; 4];
        for k in 1..=40 {
            let tau = 0.05 * k as f64;
            let map = SuccessorMap::new(&m, &g, w_range(), tau).unwrap();
            assert!(map.radius.iter().zip(&prev).all(|(r, p)| *r >= p - 1e-15));
            prev = map.radius;
        }
    }

    #[test]
    fn monte_carlo_containment() {
        let m = gb_matrices();
        let g = GridSpec::gb(0.05).unwrap();
        let inputs = InputGrid::default();
        let (w_lo, w_hi) = w_range();
        let map = SuccessorMap::new(&m, &g, (w_lo, w_hi), 0.25).unwrap();
        let disc = m.discretize(0.25).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20_000 {
            let cell = rng.random_range(0..g.total_cells());
            let (lo, hi) = g.cell_bounds(cell);
            let x = StateVec(std::array::from_fn(|d| rng.random_range(lo[d]..hi[d])));
            let u = inputs.level(rng.random_range(0..inputs.len()));
            let w = rng.random_range(w_lo..=w_hi);
            let rect = Rect {
                center: map.center(&g.cell_center(cell), u),
                radius: map.radius,
            };
            assert!(rect.contains(&disc.step(&x, u, w)));
        }
    }

    #[test]
    fn contractive_single_cell_self_loops() {
        // x' = -x on [-1, 1]^4 with one cell: every input maps into the cell.
        let m = SystemMatrices {
            a: -Matrix4::identity(),
            b: Vector4::new(0.1, 0.0, 0.0, 0.0),
            bw: Vector4::zeros(),
        };
        let g = GridSpec::new([-1.0; 4], [1.0; 4], [2.0; 4]).unwrap();
        let inputs = InputGrid::new(vec![0.0, 1.0]).unwrap();
        let model = build_symbolic_model(&g, &inputs, (0.0, 0.0), 0.1, &m).unwrap();
        for u in 0..2 {
            assert_eq!(model.successors(0, u).cells(&g), vec![0]);
        }
    }

    #[test]
    fn refinement_never_removes_behaviour() {
        let m = gb_matrices();
        let coarse = GridSpec::new([-0.6, 0.8, 0.8, 0.8], [-0.2, 1.6, 1.6, 1.6], [0.1; 4]).unwrap();
        let fine = GridSpec::new([-0.6, 0.8, 0.8, 0.8], [-0.2, 1.6, 1.6, 1.6], [0.05; 4]).unwrap();
        let inputs = InputGrid::uniform(5).unwrap();
        let mc = build_symbolic_model(&coarse, &inputs, w_range(), 0.5, &m).unwrap();
        let mf = build_symbolic_model(&fine, &inputs, w_range(), 0.5, &m).unwrap();
        for fcell in 0..fine.total_cells() {
            let ccell = state_to_cell(&fine.cell_center(fcell), &coarse).unwrap();
            for u in 0..inputs.len() {
                let sf = mf.successors(fcell, u);
                let sc = mc.successors(ccell, u);
                if sc.is_out_of_domain() {
                    continue;
                }
                // every fine successor lies inside the coarse successor block
                assert!(!sf.is_out_of_domain(), "fine cell {fcell} blocked where coarse is not");
                for s in sf.cells(&fine) {
                    let back = state_to_cell(&fine.cell_center(s), &coarse).unwrap();
                    assert!(sc.contains(&coarse, back));
                }
            }
        }
    }

    #[test]
    fn predecessor_box_covers_real_predecessors() {
        let m = gb_matrices();
        let g = GridSpec::gb(0.1).unwrap();
        let inputs = InputGrid::uniform(6).unwrap();
        let model = build_symbolic_model(&g, &inputs, w_range(), 0.25, &m).unwrap();
        let phi_inv = model.map.phi_matrix().try_inverse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3000 {
            let x = rng.random_range(0..g.total_cells());
            let u = rng.random_range(0..inputs.len());
            for y in model.successors(x, u).cells(&g) {
                let bx = model.predecessor_box(&phi_inv, y).expect("x is a predecessor");
                let idx = g.multi_index(x);
                assert!((0..4).all(|d| bx[d].0 <= idx[d] && idx[d] <= bx[d].1));
            }
        }
    }

    #[test]
    fn memory_budget_is_enforced() {
        let g = GridSpec::gb(0.05).unwrap();
        let err = build_symbolic_model_with_budget(&g, &InputGrid::default(), w_range(), 0.25, &gb_matrices(), 1 << 20)
            .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2112000 cells") && msg.contains("21 inputs"), "{msg}");
    }

    #[test]
    fn build_is_deterministic_and_serializes() {
        let m = gb_matrices();
        let g = GridSpec::gb(0.1).unwrap();
        let inputs = InputGrid::uniform(5).unwrap();
        let a = build_symbolic_model(&g, &inputs, w_range(), 0.25, &m).unwrap();
        let b = build_symbolic_model(&g, &inputs, w_range(), 0.25, &m).unwrap();
        assert_eq!(a.transitions(), b.transitions());
        assert_eq!(a.config_hash, b.config_hash);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.bin");
        a.save(&path).unwrap();
        let back = SymbolicModel::load(&path, Some(&a.config_hash)).unwrap();
        assert_eq!(back.transitions(), a.transitions());
        assert_eq!(back.map, a.map);
        assert!(matches!(
            SymbolicModel::load(&path, Some("deadbeef")),
            Err(Error::HashMismatch { .. })
        ));
        let other = config_hash(&m, &g, &inputs, 0.5, w_range());
        assert_ne!(other, a.config_hash);
    }

    #[test]
    fn exact_successor_cells_are_recorded() {
        let m = gb_matrices();
        let g = GridSpec::gb(0.1).unwrap();
        let inputs = InputGrid::uniform(11).unwrap();
        let model = build_symbolic_model(&g, &inputs, w_range(), 0.25, &m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut checked = 0;
        while checked < 5000 {
            let cell = rng.random_range(0..g.total_cells());
            let ui = rng.random_range(0..inputs.len());
            let succ = model.successors(cell, ui);
            if succ.is_out_of_domain() {
                continue;
            }
            let (lo, hi) = g.cell_bounds(cell);
            let x = StateVec(std::array::from_fn(|d| rng.random_range(lo[d]..hi[d])));
            let w = rng.random_range(w_range().0..=w_range().1);
            let next = m.step(&x, inputs.level(ui), w, 0.25, IntegrationMethod::Exact).unwrap();
            let to = state_to_cell(&next, &g).expect("in domain");
            assert!(succ.contains(&g, to));
            checked += 1;
        }
    }
}
