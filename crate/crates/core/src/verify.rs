//! Reference results and field comparison.

use crate::grid::{Coord, Field, FillPattern, Grid, GridDims, GridError, Region, StorageMode};
use crate::kernel::{sweep_naive, KernelError};

/// `levels` naive sweeps from `pattern`.
pub fn oracle(dims: GridDims, pattern: FillPattern, levels: usize) -> Result<Field, KernelError> {
    let grid = Grid::allocate(dims, StorageMode::TwoGrid, pattern)?;
    oracle_from(&grid.to_field(), levels)
}

/// `levels` naive sweeps from an arbitrary starting field.
pub fn oracle_from(start: &Field, levels: usize) -> Result<Field, KernelError> {
    let mut grid = Grid::from_field(start, StorageMode::TwoGrid)?;
    for _ in 0..levels {
        sweep_naive(&mut grid)?;
    }
    Ok(grid.to_field())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Comparison {
    pub max_abs: f64,
    /// Relative to `max(|a|, |b|, 1e-300)`.
    pub max_rel: f64,
    /// Cell with the largest relative difference.
    pub location: Option<Coord>,
    pub bitwise: bool,
    pub passed: bool,
}

/// Compares every allocated cell. Any NaN difference fails.
pub fn compare(a: &Field, b: &Field, tol: f64) -> Result<Comparison, GridError> {
    if a.dims() != b.dims() {
        return Err(GridError::DimsMismatch { a: a.dims(), b: b.dims() });
    }
    let dims = a.dims();
    let g = dims.ghost as isize;
    let n = dims.interior();
    let all = Region::new([-g; 3], [n[0] as isize + g, n[1] as isize + g, n[2] as isize + g]);
    let mut cmp = Comparison {
        max_abs: 0.0,
        max_rel: 0.0,
        location: None,
        bitwise: true,
        passed: true,
    };
    for (c, (&x, &y)) in all.iter().zip(a.values().iter().zip(b.values())) {
        if x.to_bits() == y.to_bits() {
            continue;
        }
        cmp.bitwise = false;
        let abs = (x - y).abs();
        let rel = abs / x.abs().max(y.abs()).max(1e-300);
        if rel.is_nan() {
            cmp.max_abs = f64::NAN;
            cmp.max_rel = f64::NAN;
            cmp.location = Some(c);
            cmp.passed = false;
            return Ok(cmp);
        }
        cmp.max_abs = cmp.max_abs.max(abs);
        if rel > cmp.max_rel {
            cmp.max_rel = rel;
            cmp.location = Some(c);
        }
    }
    cmp.passed = cmp.max_rel <= tol;
    Ok(cmp)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaxPrincipleViolation {
    pub cell: Coord,
    pub value: f64,
    pub bounds: (f64, f64),
}

/// Every cell of `region` in `after` must lie within the range of `before`
/// over the region and its one-cell neighbourhood.
pub fn check_local_max_principle(before: &Field, after: &Field, region: Region) -> Result<(), MaxPrincipleViolation> {
    let mut hood = region;
    for d in 0..3 {
        hood.lo[d] -= 1;
        hood.hi[d] += 1;
    }
    let (lo, hi) = hood
        .iter()
        .map(|c| before.get(c))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)));
    for c in region.iter() {
        let v = after.get(c);
        if !(v >= lo && v <= hi) {
            return Err(MaxPrincipleViolation {
                cell: c,
                value: v,
                bounds: (lo, hi),
            });
        }
    }
    Ok(())
}

/// Interior (min, max) after each of `levels` naive sweeps, starting with the
/// initial state.
pub fn interior_range_trajectory(start: &Field, levels: usize) -> Result<Vec<(f64, f64)>, KernelError> {
    let region = Region::interior(&start.dims());
    let mut grid = Grid::from_field(start, StorageMode::TwoGrid)?;
    let range = |f: &Field| {
        region
            .iter()
            .map(|c| f.get(c))
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), v| (l.min(v), h.max(v)))
    };
    let mut out = vec![range(start)];
    for _ in 0..levels {
        sweep_naive(&mut grid)?;
        out.push(range(&grid.to_field()));
    }
    Ok(out)
}
