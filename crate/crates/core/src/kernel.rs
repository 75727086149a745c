//! The 7-point Jacobi update and the serial sweeps built on it.

use std::str::FromStr;

use thiserror::Error;

use crate::grid::{Grid, GridError, LevelMap, Region, SharedGrid, SweepPlan, Traversal};

pub const SIXTH: f64 = 1.0 / 6.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("region {region:?} with its neighbourhood escapes the allocated cells")]
    OutOfBounds { region: Region },
    #[error("time level {level} outside 1..={levels}")]
    BadLevel { level: usize, levels: usize },
    #[error("invalid block size: {0}")]
    BadBlock(String),
}

/// Mean of the six face neighbours.
///
/// The summation order is fixed so that every sweep variant produces the same
/// bits for the same cell.
#[inline(always)]
pub fn stencil_point(xm: f64, xp: f64, ym: f64, yp: f64, zm: f64, zp: f64) -> f64 {
    (((xm + xp) + (ym + yp)) + (zm + zp)) * SIXTH
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BlockSize {
    pub bx: usize,
    pub by: usize,
    pub bz: usize,
}

impl BlockSize {
    pub fn new(bx: usize, by: usize, bz: usize) -> Self {
        Self { bx, by, bz }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.bx, self.by, self.bz]
    }

    /// Shrinks each extent to fit `extent`, keeping every extent at least 1.
    pub fn clamped_to(&self, extent: [usize; 3]) -> Self {
        let c = |b: usize, e: usize| b.min(e).max(1);
        Self::new(c(self.bx, extent[0]), c(self.by, extent[1]), c(self.bz, extent[2]))
    }

    pub fn check(&self, extent: [usize; 3]) -> Result<(), KernelError> {
        for (b, e) in self.as_array().into_iter().zip(extent) {
            if b == 0 || b > e {
                return Err(KernelError::BadBlock(format!(
                    "{self} does not fit extent {}x{}x{}",
                    extent[0], extent[1], extent[2]
                )));
            }
        }
        Ok(())
    }
}

impl std::fmt::Display for BlockSize {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.bx, self.by, self.bz)
    }
}

impl FromStr for BlockSize {
    type Err = KernelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| KernelError::BadBlock(format!("{s:?}: {e}")))?;
        match parts[..] {
            [bx, by, bz] if bx > 0 && by > 0 && bz > 0 => Ok(Self::new(bx, by, bz)),
            _ => Err(KernelError::BadBlock(format!("expected BXxBYxBZ with positive extents, got {s:?}"))),
        }
    }
}

/// Ghost faces whose cells ride along with a compressed-grid update.
///
/// In compressed storage every update moves the logical origin, so boundary
/// values next to a block must be copied to the new position along with it.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CarryFaces {
    pub lo: [bool; 3],
    pub hi: [bool; 3],
}

impl CarryFaces {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self {
            lo: [true; 3],
            hi: [true; 3],
        }
    }

    fn extend(&self, r: Region) -> Region {
        let mut e = r;
        for d in 0..3 {
            e.lo[d] -= self.lo[d] as isize;
            e.hi[d] += self.hi[d] as isize;
        }
        e
    }
}

/// One plain Jacobi sweep over the interior. This is the reference every other
/// variant is checked against, so it is kept as simple as possible.
pub fn sweep_naive(grid: &mut Grid) -> Result<(), KernelError> {
    let plan = grid.plan_sweep(1)?;
    let map = plan.level(1);
    let dims = grid.dims();
    let [_, sy, sz] = grid.strides();
    let (src, dst) = grid.level_arrays(map)?;
    let g = dims.ghost;
    let at = |i: usize, j: usize, k: usize| i + sy * j + sz * k;
    for k in g..g + dims.nz {
        for j in g..g + dims.ny {
            for i in g..g + dims.nx {
                dst[at(i, j, k)] = stencil_point(
                    src[at(i - 1, j, k)],
                    src[at(i + 1, j, k)],
                    src[at(i, j - 1, k)],
                    src[at(i, j + 1, k)],
                    src[at(i, j, k - 1)],
                    src[at(i, j, k + 1)],
                );
            }
        }
    }
    grid.commit(&plan);
    Ok(())
}

/// One sweep visiting the interior block by block.
pub fn sweep_spatial_blocked(grid: &mut Grid, bs: BlockSize) -> Result<(), KernelError> {
    let dims = grid.dims();
    bs.check(dims.interior())?;
    let plan = grid.plan_sweep(1)?;
    let map = plan.level(1);
    let strides = grid.strides();
    let (src, dst) = grid.level_arrays(map)?;
    let n = dims.interior();
    let b = bs.as_array();
    for k0 in (0..n[2]).step_by(b[2]) {
        for j0 in (0..n[1]).step_by(b[1]) {
            for i0 in (0..n[0]).step_by(b[0]) {
                let lo = [i0, j0, k0];
                let hi = [(i0 + b[0]).min(n[0]), (j0 + b[1]).min(n[1]), (k0 + b[2]).min(n[2])];
                blocked_rows(src, dst, strides, map.src_base, lo, hi);
            }
        }
    }
    grid.commit(&plan);
    Ok(())
}

fn blocked_rows(src: &[f64], dst: &mut [f64], s: [usize; 3], base: isize, lo: [usize; 3], hi: [usize; 3]) {
    let (sy, sz) = (s[1], s[2]);
    let len = hi[0] - lo[0];
    for k in lo[2]..hi[2] {
        for j in lo[1]..hi[1] {
            let c = (base as usize) + lo[0] + sy * j + sz * k;
            let out = &mut dst[c..c + len];
            let xm = &src[c - 1..c - 1 + len];
            let xp = &src[c + 1..c + 1 + len];
            let ym = &src[c - sy..c - sy + len];
            let yp = &src[c + sy..c + sy + len];
            let zm = &src[c - sz..c - sz + len];
            let zp = &src[c + sz..c + sz + len];
            for x in 0..len {
                out[x] = stencil_point(xm[x], xp[x], ym[x], yp[x], zm[x], zp[x]);
            }
        }
    }
}

/// Applies time level `level` of `plan` to `region`.
///
/// In two-grid storage this reads the previous level's array and writes the
/// other one. In compressed storage it writes one cell diagonally away from
/// the read position, and ghost cells on the `carry` faces adjacent to the
/// region are copied unchanged to their new position. `carry` is ignored for
/// two-grid storage, whose ghost cells never move.
pub fn update_block(grid: &mut Grid, plan: &SweepPlan, level: usize, region: Region, carry: CarryFaces) -> Result<(), KernelError> {
    if level == 0 || level > plan.levels() {
        return Err(KernelError::BadLevel {
            level,
            levels: plan.levels(),
        });
    }
    let carry = if plan.carries_ghosts() { carry } else { CarryFaces::none() };
    let dims = grid.dims();
    let ext = carry.extend(region);
    let reads_ok = region.is_empty() || within(&dims, CarryFaces::all().extend(region));
    if !reads_ok || !ext.is_empty() && !within(&dims, ext) {
        return Err(KernelError::OutOfBounds { region });
    }
    let map = plan.level(level);
    let traversal = plan.traversal();
    let shared = grid.shared();
    // SAFETY: the region and its one-cell neighbourhood lie inside the
    // allocation, and `&mut Grid` guarantees no concurrent access.
    unsafe { apply_region(shared, map, traversal, region, carry) };
    Ok(())
}

fn within(dims: &crate::grid::GridDims, r: Region) -> bool {
    let g = dims.ghost as isize;
    let n = dims.interior();
    (0..3).all(|d| r.lo[d] >= -g && r.hi[d] <= n[d] as isize + g)
}

/// Stencil update of `region` plus identity copies of the carried ghost cells.
///
/// Rows are visited in increasing (z, y) order for forward traversal and in
/// decreasing order for reverse traversal. In compressed storage the cell
/// overwritten by a write at `(i, j, k)` is the previous level of
/// `(i, j, k) ∓ (1, 1, 1)`, whose readers all live in rows visited earlier.
///
/// # Safety
///
/// `region` extended by one cell (and by the carried faces) must lie inside
/// the allocation, and no other thread may touch the written cells or write
/// the read cells while this runs.
pub(crate) unsafe fn apply_region(g: SharedGrid<'_>, map: LevelMap, traversal: Traversal, region: Region, carry: CarryFaces) {
    let ext = carry.extend(region);
    if ext.is_empty() {
        return;
    }
    let src = g.ptrs[map.src] as *const f64;
    let dst = g.ptrs[map.dst];
    let sy = g.strides[1] as isize;
    let sz = g.strides[2] as isize;
    let stencil_x = !region.is_empty();
    let row = |j: isize, k: isize| {
        let off = j * sy + k * sz;
        let s = src.offset(map.src_base + off);
        let d = dst.offset(map.dst_base + off);
        let in_region = stencil_x && j >= region.lo[1] && j < region.hi[1] && k >= region.lo[2] && k < region.hi[2];
        if in_region {
            copy_cells(s, d, ext.lo[0], region.lo[0]);
            stencil_row(s, d, region.lo[0], region.hi[0], sy, sz);
            copy_cells(s, d, region.hi[0], ext.hi[0]);
        } else {
            copy_cells(s, d, ext.lo[0], ext.hi[0]);
        }
    };
    debug_assert!({
        let lin = |p: [isize; 3]| p[0] + p[1] * sy + p[2] * sz;
        let (mut lo, mut hi) = (map.src_base + lin(ext.lo), map.src_base + lin(ext.hi) - 1 - sy - sz);
        if stencil_x {
            lo = lo.min(map.src_base + lin(region.lo) - sz);
            hi = hi.max(map.src_base + lin(region.hi) - 1 - sy);
        }
        lo = lo.min(map.dst_base + lin(ext.lo));
        hi = hi.max(map.dst_base + lin(ext.hi) - 1 - sy - sz);
        lo >= 0 && (hi as usize) < g.len
    });
    match traversal {
        Traversal::Forward => {
            for k in ext.lo[2]..ext.hi[2] {
                for j in ext.lo[1]..ext.hi[1] {
                    row(j, k);
                }
            }
        }
        Traversal::Reverse => {
            for k in (ext.lo[2]..ext.hi[2]).rev() {
                for j in (ext.lo[1]..ext.hi[1]).rev() {
                    row(j, k);
                }
            }
        }
    }
}

#[inline(always)]
unsafe fn copy_cells(s: *const f64, d: *mut f64, from: isize, to: isize) {
    for i in from..to {
        d.offset(i).write(s.offset(i).read());
    }
}

#[inline(always)]
unsafe fn stencil_row(s: *const f64, d: *mut f64, from: isize, to: isize, sy: isize, sz: isize) {
    for i in from..to {
        let c = s.offset(i);
        d.offset(i).write(stencil_point(
            c.offset(-1).read(),
            c.offset(1).read(),
            c.offset(-sy).read(),
            c.offset(sy).read(),
            c.offset(-sz).read(),
            c.offset(sz).read(),
        ));
    }
}
