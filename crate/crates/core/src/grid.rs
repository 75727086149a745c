//! Storage for 3D scalar fields with a ghost shell.
//!
//! Two layouts are supported. [`StorageMode::TwoGrid`] keeps two arrays and
//! ping-pongs between them, one per time level. [`StorageMode::Compressed`]
//! keeps a single array with `slack` extra layers per dimension; every update
//! writes its result one cell diagonally away from where it read, so the
//! logical origin drifts through the slack by one cell per time level and
//! flips direction between sweeps.
//!
//! All arrays are row-major with x contiguous. Logical coordinates are signed:
//! the interior spans `0..n` per dimension and the ghost shell spans
//! `-ghost..0` and `n..n + ghost`.

use std::io::{self, BufRead, Write};
use std::marker::PhantomData;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

/// Signed logical cell coordinate `(i, j, k)`.
pub type Coord = [isize; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid extents must be positive, got {nx}x{ny}x{nz}")]
    EmptyExtent { nx: usize, ny: usize, nz: usize },
    #[error("ghost width must be at least 1")]
    NoGhost,
    #[error("allocation of {0:?} cells overflows address arithmetic")]
    Overflow([usize; 3]),
    #[error("slab depth {depth} exceeds ghost width {ghost}")]
    DepthExceedsGhost { depth: usize, ghost: usize },
    #[error("slab holds {expected} cells but {got} values were supplied")]
    SlabLength { expected: usize, got: usize },
    #[error("compressed grid has slack {slack} but a sweep of {levels} levels was requested")]
    InsufficientSlack { slack: usize, levels: usize },
    #[error("operation requires two-grid storage")]
    NotTwoGrid,
    #[error("field dims {a:?} do not match {b:?}")]
    DimsMismatch { a: GridDims, b: GridDims },
    #[error("malformed dump: {0}")]
    Dump(String),
    #[error("unknown fill pattern {0:?}; expected constant:V, linear, hotplate or random:SEED")]
    BadPattern(String),
}

/// Interior cell counts per dimension plus the ghost-shell width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct GridDims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub ghost: usize,
}

impl GridDims {
    pub fn new(nx: usize, ny: usize, nz: usize, ghost: usize) -> Result<Self, GridError> {
        let dims = Self { nx, ny, nz, ghost };
        dims.validate()?;
        Ok(dims)
    }

    pub fn cube(n: usize, ghost: usize) -> Result<Self, GridError> {
        Self::new(n, n, n, ghost)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(GridError::EmptyExtent {
                nx: self.nx,
                ny: self.ny,
                nz: self.nz,
            });
        }
        if self.ghost == 0 {
            return Err(GridError::NoGhost);
        }
        Ok(())
    }

    pub fn interior(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    /// Interior plus ghost shell on both sides.
    pub fn extent(&self) -> [usize; 3] {
        let g = 2 * self.ghost;
        [self.nx + g, self.ny + g, self.nz + g]
    }

    pub fn interior_cells(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn total_cells(&self) -> usize {
        self.extent().iter().product()
    }

    /// Whether `c` lies inside the interior or the ghost shell.
    pub fn contains(&self, c: Coord) -> bool {
        let g = self.ghost as isize;
        self.interior().iter().zip(c).all(|(&n, x)| x >= -g && x < n as isize + g)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Axis> {
        Self::ALL.get(i).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Side {
    Low,
    High,
}

impl Side {
    pub fn opposite(self) -> Side {
        match self {
            Side::Low => Side::High,
            Side::High => Side::Low,
        }
    }
}

/// One of the six faces of the interior box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Face {
    pub axis: Axis,
    pub side: Side,
}

impl Face {
    pub fn new(axis: Axis, side: Side) -> Self {
        Self { axis, side }
    }

    pub fn opposite(self) -> Face {
        Face::new(self.axis, self.side.opposite())
    }
}

/// Which tangential directions of a slab reach into the ghost shell.
///
/// A slab on an x face with `y` set spans `-depth..ny + depth` in y instead of
/// `0..ny`. The flag for the face's own axis is ignored.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct SlabExtent {
    pub extend: [bool; 3],
}

impl SlabExtent {
    pub fn interior() -> Self {
        Self::default()
    }

    pub fn with(mut self, axis: Axis) -> Self {
        self.extend[axis.index()] = true;
        self
    }
}

/// Initial condition. Ghost cells are filled by the same rule and then act as
/// fixed Dirichlet values.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FillPattern {
    Constant(f64),
    /// `value = i + j + k` over interior and ghost cells.
    Linear,
    /// Every cell with `i < 0` is 1, everything else 0.
    Hotplate,
    /// Uniform in `[0, 1)`, drawn in row-major order over the whole
    /// allocation from a ChaCha8 stream.
    Random(u64),
}

impl std::fmt::Display for FillPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FillPattern::Constant(v) => write!(f, "constant:{v}"),
            FillPattern::Linear => f.write_str("linear"),
            FillPattern::Hotplate => f.write_str("hotplate"),
            FillPattern::Random(seed) => write!(f, "random:{seed}"),
        }
    }
}

impl std::str::FromStr for FillPattern {
    type Err = GridError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GridError::BadPattern(s.to_string());
        let (name, arg) = match s.split_once(':') {
            Some((n, a)) => (n, Some(a)),
            None => (s, None),
        };
        match (name, arg) {
            ("linear", None) => Ok(FillPattern::Linear),
            ("hotplate", None) => Ok(FillPattern::Hotplate),
            ("constant", Some(v)) => v.parse().map(FillPattern::Constant).map_err(|_| bad()),
            ("random", Some(v)) => v.parse().map(FillPattern::Random).map_err(|_| bad()),
            _ => Err(bad()),
        }
    }
}

/// Inclusive-exclusive box of logical coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Region {
    pub lo: Coord,
    pub hi: Coord,
}

impl Region {
    pub fn new(lo: Coord, hi: Coord) -> Self {
        Self { lo, hi }
    }

    pub fn interior(dims: &GridDims) -> Self {
        let n = dims.interior();
        Self::new([0; 3], [n[0] as isize, n[1] as isize, n[2] as isize])
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|d| self.hi[d] <= self.lo[d])
    }

    pub fn cells(&self) -> usize {
        if self.is_empty() {
            return 0;
        }
        (0..3).map(|d| (self.hi[d] - self.lo[d]) as usize).product()
    }

    pub fn contains(&self, c: Coord) -> bool {
        (0..3).all(|d| c[d] >= self.lo[d] && c[d] < self.hi[d])
    }

    /// Iterates cells in row-major order (x fastest).
    pub fn iter(&self) -> impl Iterator<Item = Coord> + '_ {
        let r = *self;
        let empty = r.is_empty();
        (r.lo[2]..r.hi[2])
            .flat_map(move |k| (r.lo[1]..r.hi[1]).map(move |j| (j, k)))
            .flat_map(move |(j, k)| (r.lo[0]..r.hi[0]).map(move |i| [i, j, k]))
            .filter(move |_| !empty)
    }
}

/// Geometry of a slab of `depth` layers next to `face`. With `ghost == false`
/// the slab lies inside the interior, otherwise just beyond the face.
pub fn slab_region(dims: &GridDims, face: Face, depth: usize, extent: SlabExtent, ghost: bool) -> Region {
    let n = dims.interior();
    let depth = depth as isize;
    let mut lo = [0isize; 3];
    let mut hi = [n[0] as isize, n[1] as isize, n[2] as isize];
    for d in 0..3 {
        if d == face.axis.index() {
            continue;
        }
        if extent.extend[d] {
            lo[d] -= depth;
            hi[d] += depth;
        }
    }
    let a = face.axis.index();
    let na = n[a] as isize;
    let (l, h) = match (face.side, ghost) {
        (Side::Low, false) => (0, depth),
        (Side::Low, true) => (-depth, 0),
        (Side::High, false) => (na - depth, na),
        (Side::High, true) => (na, na + depth),
    };
    lo[a] = l;
    hi[a] = h;
    Region::new(lo, hi)
}

/// A plain snapshot of logical values, ghost shell included.
#[derive(Clone, Debug, PartialEq)]
pub struct Field {
    dims: GridDims,
    values: Vec<f64>,
}

impl Field {
    pub fn zeros(dims: GridDims) -> Result<Self, GridError> {
        dims.validate()?;
        checked_cells(dims.extent())?;
        Ok(Self {
            dims,
            values: vec![0.0; dims.total_cells()],
        })
    }

    pub fn filled(dims: GridDims, pattern: FillPattern) -> Result<Self, GridError> {
        let mut field = Self::zeros(dims)?;
        let region = Region::new([-(dims.ghost as isize); 3], {
            let e = dims.extent();
            let g = dims.ghost as isize;
            [e[0] as isize - g, e[1] as isize - g, e[2] as isize - g]
        });
        match pattern {
            FillPattern::Random(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                for v in field.values.iter_mut() {
                    *v = rng.gen::<f64>();
                }
            }
            _ => {
                for c in region.iter() {
                    let v = match pattern {
                        FillPattern::Constant(v) => v,
                        FillPattern::Linear => (c[0] + c[1] + c[2]) as f64,
                        FillPattern::Hotplate => {
                            if c[0] < 0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        FillPattern::Random(_) => unreachable!(),
                    };
                    field.set(c, v);
                }
            }
        }
        Ok(field)
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn index(&self, c: Coord) -> usize {
        debug_assert!(self.dims.contains(c), "{c:?} outside {:?}", self.dims);
        let e = self.dims.extent();
        let g = self.dims.ghost as isize;
        let i = (c[0] + g) as usize;
        let j = (c[1] + g) as usize;
        let k = (c[2] + g) as usize;
        i + e[0] * (j + e[1] * k)
    }

    #[inline]
    pub fn get(&self, c: Coord) -> f64 {
        self.values[self.index(c)]
    }

    #[inline]
    pub fn set(&mut self, c: Coord, v: f64) {
        let idx = self.index(c);
        self.values[idx] = v;
    }

    /// Writes `nx ny nz ghost` followed by one value per line over the whole
    /// allocation in row-major order. Values use the shortest representation
    /// that parses back to the same bits.
    pub fn write_dump<W: Write>(&self, mut out: W) -> io::Result<()> {
        let d = self.dims;
        writeln!(out, "{} {} {} {}", d.nx, d.ny, d.nz, d.ghost)?;
        for v in &self.values {
            writeln!(out, "{v:?}")?;
        }
        out.flush()
    }

    pub fn read_dump<R: BufRead>(input: R) -> Result<Self, GridError> {
        let mut lines = input.lines();
        let header = lines
            .next()
            .ok_or_else(|| GridError::Dump("missing header".into()))?
            .map_err(|e| GridError::Dump(e.to_string()))?;
        let nums = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| GridError::Dump(format!("bad header {header:?}: {e}")))?;
        let [nx, ny, nz, ghost] = nums[..] else {
            return Err(GridError::Dump(format!("header needs 4 fields, got {header:?}")));
        };
        let mut field = Self::zeros(GridDims::new(nx, ny, nz, ghost)?)?;
        let mut count = 0;
        for line in lines {
            let line = line.map_err(|e| GridError::Dump(e.to_string()))?;
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if count == field.values.len() {
                return Err(GridError::Dump("trailing values".into()));
            }
            field.values[count] = line
                .parse::<f64>()
                .map_err(|e| GridError::Dump(format!("bad value {line:?}: {e}")))?;
            count += 1;
        }
        if count != field.values.len() {
            return Err(GridError::Dump(format!("expected {} values, found {count}", field.values.len())));
        }
        Ok(field)
    }
}

fn checked_cells(extent: [usize; 3]) -> Result<usize, GridError> {
    extent
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .filter(|&n| n <= isize::MAX as usize / std::mem::size_of::<f64>())
        .ok_or(GridError::Overflow(extent))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageKind {
    TwoGrid,
    Compressed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StorageMode {
    TwoGrid,
    /// Single array with `slack` spare layers per dimension. A sweep may apply
    /// at most `slack` time levels.
    Compressed {
        slack: usize,
    },
}

impl StorageMode {
    /// Storage able to run sweeps of `levels` time levels.
    pub fn for_levels(kind: StorageKind, levels: usize) -> Self {
        match kind {
            StorageKind::TwoGrid => StorageMode::TwoGrid,
            StorageKind::Compressed => StorageMode::Compressed { slack: levels },
        }
    }

    pub fn kind(&self) -> StorageKind {
        match self {
            StorageMode::TwoGrid => StorageKind::TwoGrid,
            StorageMode::Compressed { .. } => StorageKind::Compressed,
        }
    }
}

/// Loop direction of a sweep. Compressed storage alternates between the two.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Traversal {
    Forward,
    Reverse,
}

impl Traversal {
    pub fn flipped(self) -> Self {
        match self {
            Traversal::Forward => Traversal::Reverse,
            Traversal::Reverse => Traversal::Forward,
        }
    }
}

/// Where one time level reads from and writes to.
///
/// `*_base` is the linear index of logical `(0, 0, 0)` in the chosen array.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelMap {
    pub(crate) src: usize,
    pub(crate) dst: usize,
    pub(crate) src_base: isize,
    pub(crate) dst_base: isize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Cursor {
    TwoGrid { current: usize },
    Compressed { offset: usize, next: Traversal },
}

/// Array mapping for every level of one sweep, computed ahead of time so
/// worker threads never touch the grid's bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepPlan {
    traversal: Traversal,
    maps: Vec<LevelMap>,
    start: Cursor,
    end: Cursor,
}

impl SweepPlan {
    pub fn traversal(&self) -> Traversal {
        self.traversal
    }

    pub fn levels(&self) -> usize {
        self.maps.len()
    }

    /// Mapping for level `tau` in `1..=levels`.
    pub fn level(&self, tau: usize) -> LevelMap {
        self.maps[tau - 1]
    }

    /// Whether the storage needs ghost cells to be carried along with the
    /// shifting origin.
    pub fn carries_ghosts(&self) -> bool {
        matches!(self.start, Cursor::Compressed { .. })
    }
}

#[derive(Clone, Debug)]
enum Storage {
    TwoGrid { arrays: [Vec<f64>; 2] },
    Compressed { data: Vec<f64>, slack: usize },
}

/// A field plus its time-level bookkeeping.
#[derive(Clone, Debug)]
pub struct Grid {
    dims: GridDims,
    storage: Storage,
    cursor: Cursor,
    strides: [usize; 3],
}

impl Grid {
    pub fn allocate(dims: GridDims, mode: StorageMode, pattern: FillPattern) -> Result<Self, GridError> {
        Self::from_field(&Field::filled(dims, pattern)?, mode)
    }

    pub fn from_field(field: &Field, mode: StorageMode) -> Result<Self, GridError> {
        let dims = field.dims;
        dims.validate()?;
        let ext = dims.extent();
        match mode {
            StorageMode::TwoGrid => {
                checked_cells(ext)?;
                Ok(Self {
                    dims,
                    storage: Storage::TwoGrid {
                        arrays: [field.values.clone(), field.values.clone()],
                    },
                    cursor: Cursor::TwoGrid { current: 0 },
                    strides: [1, ext[0], ext[0] * ext[1]],
                })
            }
            StorageMode::Compressed { slack } => {
                let ext = ext
                    .iter()
                    .map(|&e| e.checked_add(slack).ok_or(GridError::Overflow(ext)))
                    .collect::<Result<Vec<_>, _>>()?;
                let ext = [ext[0], ext[1], ext[2]];
                let cells = checked_cells(ext)?;
                let mut grid = Self {
                    dims,
                    storage: Storage::Compressed {
                        data: vec![0.0; cells],
                        slack,
                    },
                    cursor: Cursor::Compressed {
                        offset: slack,
                        next: Traversal::Forward,
                    },
                    strides: [1, ext[0], ext[0] * ext[1]],
                };
                grid.load(field)?;
                Ok(grid)
            }
        }
    }

    pub fn dims(&self) -> GridDims {
        self.dims
    }

    pub fn storage_kind(&self) -> StorageKind {
        match self.storage {
            Storage::TwoGrid { .. } => StorageKind::TwoGrid,
            Storage::Compressed { .. } => StorageKind::Compressed,
        }
    }

    /// Current shift of the logical origin inside a compressed allocation
    /// (always zero for two-grid storage).
    pub fn origin_offset(&self) -> [usize; 3] {
        match self.cursor {
            Cursor::TwoGrid { .. } => [0; 3],
            Cursor::Compressed { offset, .. } => [offset; 3],
        }
    }

    pub fn slack(&self) -> usize {
        match self.storage {
            Storage::TwoGrid { .. } => 0,
            Storage::Compressed { slack, .. } => slack,
        }
    }

    pub(crate) fn strides(&self) -> [usize; 3] {
        self.strides
    }

    fn base_for(&self, offset: usize) -> isize {
        let o = (self.dims.ghost + offset) as isize;
        o * (self.strides[0] + self.strides[1] + self.strides[2]) as isize
    }

    fn current(&self) -> (usize, isize) {
        match self.cursor {
            Cursor::TwoGrid { current } => (current, self.base_for(0)),
            Cursor::Compressed { offset, .. } => (0, self.base_for(offset)),
        }
    }

    fn array(&self, which: usize) -> &[f64] {
        match &self.storage {
            Storage::TwoGrid { arrays } => &arrays[which],
            Storage::Compressed { data, .. } => data,
        }
    }

    fn array_mut(&mut self, which: usize) -> &mut [f64] {
        match &mut self.storage {
            Storage::TwoGrid { arrays } => &mut arrays[which],
            Storage::Compressed { data, .. } => data,
        }
    }

    #[inline]
    fn linear(&self, base: isize, c: Coord) -> usize {
        let s = self.strides;
        (base + c[0] + c[1] * s[1] as isize + c[2] * s[2] as isize) as usize
    }

    /// Value at logical position `c` of the current time level.
    pub fn value_at(&self, c: Coord) -> f64 {
        debug_assert!(self.dims.contains(c), "{c:?} outside {:?}", self.dims);
        let (which, base) = self.current();
        self.array(which)[self.linear(base, c)]
    }

    /// Overwrites one cell of the current time level. Outside the interior
    /// the value is visible to every later level as well.
    pub fn set_value(&mut self, c: Coord, v: f64) {
        assert!(self.dims.contains(c), "{c:?} outside {:?}", self.dims);
        self.store(c, v);
    }

    fn store(&mut self, c: Coord, v: f64) {
        let (which, base) = self.current();
        let idx = self.linear(base, c);
        self.array_mut(which)[idx] = v;
        if let Storage::TwoGrid { arrays } = &mut self.storage {
            // Non-interior cells are mirrored so both time levels see them.
            if !Region::interior(&self.dims).contains(c) {
                arrays[1 - which][idx] = v;
            }
        }
    }

    /// Overwrites every logical cell with the values of `field`.
    pub fn load(&mut self, field: &Field) -> Result<(), GridError> {
        if field.dims != self.dims {
            return Err(GridError::DimsMismatch {
                a: field.dims,
                b: self.dims,
            });
        }
        let all = full_region(&self.dims);
        match &mut self.storage {
            Storage::TwoGrid { arrays } => {
                arrays[0].copy_from_slice(&field.values);
                arrays[1].copy_from_slice(&field.values);
            }
            Storage::Compressed { .. } => {
                for c in all.iter() {
                    self.store(c, field.get(c));
                }
            }
        }
        Ok(())
    }

    /// Snapshot of the current time level, ghost shell included.
    ///
    /// In compressed storage only the interior and the first ghost layer are
    /// maintained across sweeps; deeper ghost layers hold whatever the last
    /// halo exchange left at the current origin.
    pub fn to_field(&self) -> Field {
        let mut field = Field {
            dims: self.dims,
            values: vec![0.0; self.dims.total_cells()],
        };
        match &self.storage {
            Storage::TwoGrid { arrays } => {
                let Cursor::TwoGrid { current } = self.cursor else { unreachable!() };
                field.values.copy_from_slice(&arrays[current]);
            }
            Storage::Compressed { .. } => {
                for c in full_region(&self.dims).iter() {
                    field.set(c, self.value_at(c));
                }
            }
        }
        field
    }

    /// Packs `depth` interior layers next to `face`, row-major with x fastest.
    pub fn extract_layers(&self, face: Face, depth: usize, extent: SlabExtent) -> Result<Vec<f64>, GridError> {
        self.check_depth(depth)?;
        let region = slab_region(&self.dims, face, depth, extent, false);
        Ok(region.iter().map(|c| self.value_at(c)).collect())
    }

    /// Unpacks a slab produced by [`Grid::extract_layers`] on the opposite face
    /// of a neighbour into the ghost layers beyond `face`.
    pub fn inject_layers(&mut self, face: Face, depth: usize, extent: SlabExtent, values: &[f64]) -> Result<(), GridError> {
        self.check_depth(depth)?;
        let region = slab_region(&self.dims, face, depth, extent, true);
        if region.cells() != values.len() {
            return Err(GridError::SlabLength {
                expected: region.cells(),
                got: values.len(),
            });
        }
        for (c, &v) in region.iter().zip(values) {
            self.store(c, v);
        }
        Ok(())
    }

    fn check_depth(&self, depth: usize) -> Result<(), GridError> {
        if depth > self.dims.ghost {
            return Err(GridError::DepthExceedsGhost {
                depth,
                ghost: self.dims.ghost,
            });
        }
        Ok(())
    }

    /// Plans `count` consecutive sweeps of `levels` time levels each, starting
    /// from the current state. Nothing changes until [`Grid::commit`].
    pub fn plan_sweeps(&self, levels: usize, count: usize) -> Result<Vec<SweepPlan>, GridError> {
        let mut cursor = self.cursor;
        let mut plans = Vec::with_capacity(count);
        for _ in 0..count {
            let plan = self.plan_from(cursor, levels)?;
            cursor = plan.end;
            plans.push(plan);
        }
        Ok(plans)
    }

    pub fn plan_sweep(&self, levels: usize) -> Result<SweepPlan, GridError> {
        self.plan_from(self.cursor, levels)
    }

    fn plan_from(&self, start: Cursor, levels: usize) -> Result<SweepPlan, GridError> {
        match start {
            Cursor::TwoGrid { current } => {
                let base = self.base_for(0);
                let maps = (1..=levels)
                    .map(|tau| LevelMap {
                        src: (current + tau - 1) % 2,
                        dst: (current + tau) % 2,
                        src_base: base,
                        dst_base: base,
                    })
                    .collect();
                Ok(SweepPlan {
                    traversal: Traversal::Forward,
                    maps,
                    start,
                    end: Cursor::TwoGrid {
                        current: (current + levels) % 2,
                    },
                })
            }
            Cursor::Compressed { offset, next } => {
                let slack = self.slack();
                if levels > slack {
                    return Err(GridError::InsufficientSlack { slack, levels });
                }
                // Prefer the alternating direction, but fall back when the
                // origin has no room to travel that way.
                let traversal = match next {
                    Traversal::Forward if offset >= levels => Traversal::Forward,
                    Traversal::Reverse if offset + levels <= slack => Traversal::Reverse,
                    _ if offset >= levels => Traversal::Forward,
                    _ => Traversal::Reverse,
                };
                let at = |tau: usize| match traversal {
                    Traversal::Forward => offset - tau,
                    Traversal::Reverse => offset + tau,
                };
                let maps = (1..=levels)
                    .map(|tau| LevelMap {
                        src: 0,
                        dst: 0,
                        src_base: self.base_for(at(tau - 1)),
                        dst_base: self.base_for(at(tau)),
                    })
                    .collect();
                Ok(SweepPlan {
                    traversal,
                    maps,
                    start,
                    end: Cursor::Compressed {
                        offset: at(levels),
                        next: traversal.flipped(),
                    },
                })
            }
        }
    }

    /// Adopts the final time level of an executed plan as current.
    pub fn commit(&mut self, plan: &SweepPlan) {
        debug_assert_eq!(plan.start, self.cursor, "plan was made for a different state");
        self.cursor = plan.end;
    }

    /// Source and destination arrays of one two-grid level.
    pub(crate) fn level_arrays(&mut self, map: LevelMap) -> Result<(&[f64], &mut [f64]), GridError> {
        match &mut self.storage {
            Storage::TwoGrid { arrays } => {
                let [a, b] = arrays;
                Ok(if map.src == 0 { (&*a, b) } else { (&*b, a) })
            }
            Storage::Compressed { .. } => Err(GridError::NotTwoGrid),
        }
    }

    /// Raw shared view used by the kernels while worker threads run.
    pub(crate) fn shared(&mut self) -> SharedGrid<'_> {
        let strides = self.strides;
        let (ptrs, len) = match &mut self.storage {
            Storage::TwoGrid { arrays } => {
                let len = arrays[0].len();
                let [a, b] = arrays;
                ([a.as_mut_ptr(), b.as_mut_ptr()], len)
            }
            Storage::Compressed { data, .. } => {
                let p = data.as_mut_ptr();
                ([p, p], data.len())
            }
        };
        SharedGrid {
            ptrs,
            len,
            strides,
            _grid: PhantomData,
        }
    }
}

fn full_region(dims: &GridDims) -> Region {
    let g = dims.ghost as isize;
    let n = dims.interior();
    Region::new([-g; 3], [n[0] as isize + g, n[1] as isize + g, n[2] as isize + g])
}

/// Unsynchronized view of a grid's arrays, handed to worker threads.
///
/// Access discipline (one writer per cell per time level, readers only after
/// the producing update completed) is the caller's responsibility; the
/// pipeline's schedule and counters provide it.
#[derive(Clone, Copy)]
pub(crate) struct SharedGrid<'a> {
    pub(crate) ptrs: [*mut f64; 2],
    pub(crate) len: usize,
    pub(crate) strides: [usize; 3],
    _grid: PhantomData<&'a mut Grid>,
}

unsafe impl Send for SharedGrid<'_> {}
unsafe impl Sync for SharedGrid<'_> {}
