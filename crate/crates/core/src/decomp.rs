//! Domain decomposition with deep halos.
//!
//! Each rank owns a box of the global interior and keeps a ghost shell `h`
//! layers deep. After one halo exchange a rank can apply `h` time levels on
//! its own: level `s` updates the interior widened by `h - s` layers towards
//! every neighbour, so the final level lands exactly on the interior.
//!
//! Halos travel in three phases, x then y then z. Each phase's slabs include
//! the ghost layers filled by the earlier phases, which delivers edge and
//! corner data without any diagonal messages.

use std::str::FromStr;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::grid::{Axis, Coord, Face, Field, FillPattern, Grid, GridDims, GridError, Region, Side, SlabExtent, StorageKind, StorageMode};
use crate::kernel::BlockSize;
use crate::pipeline::{self, DomainSpec, PipelineConfig, PipelineError, RunOptions, SyncMode};
use crate::transport::{spawn_world, Endpoint, Expect, Message, TransportError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DecompError {
    #[error("bad layout: {0}")]
    Layout(String),
    #[error("{0}")]
    Extent(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("{0}")]
    World(String),
}

/// Ranks per dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Layout {
    pub px: usize,
    pub py: usize,
    pub pz: usize,
}

impl Layout {
    pub fn new(px: usize, py: usize, pz: usize) -> Self {
        Self { px, py, pz }
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.px, self.py, self.pz]
    }

    pub fn ranks(&self) -> usize {
        self.px * self.py * self.pz
    }

    pub fn rank_of(&self, c: [usize; 3]) -> usize {
        c[0] + self.px * (c[1] + self.py * c[2])
    }

    pub fn coords_of(&self, rank: usize) -> [usize; 3] {
        [rank % self.px, (rank / self.px) % self.py, rank / (self.px * self.py)]
    }
}

impl std::fmt::Display for Layout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.px, self.py, self.pz)
    }
}

impl FromStr for Layout {
    type Err = DecompError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts = s
            .split('x')
            .map(|p| p.trim().parse::<usize>())
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| DecompError::Layout(format!("{s:?}: {e}")))?;
        match parts[..] {
            [px, py, pz] if px > 0 && py > 0 && pz > 0 => Ok(Self::new(px, py, pz)),
            _ => Err(DecompError::Layout(format!("expected PXxPYxPZ with positive counts, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subdomain {
    pub rank: usize,
    pub coords: [usize; 3],
    /// Global index of local cell `(0, 0, 0)`.
    pub offset: [usize; 3],
    pub extent: [usize; 3],
    /// `neighbors[axis][0]` is the low-side rank, `[1]` the high-side one.
    pub neighbors: [[Option<usize>; 2]; 3],
}

impl Subdomain {
    pub fn neighbor(&self, face: Face) -> Option<usize> {
        self.neighbors[face.axis.index()][face.side as usize]
    }

    pub fn neighbor_count(&self) -> usize {
        self.neighbors.iter().flatten().filter(|n| n.is_some()).count()
    }

    /// Update domains for `depth` levels between exchanges.
    pub fn domain_spec(&self, depth: usize) -> DomainSpec {
        DomainSpec {
            interior: self.extent,
            neighbor_lo: std::array::from_fn(|d| self.neighbors[d][0].is_some()),
            neighbor_hi: std::array::from_fn(|d| self.neighbors[d][1].is_some()),
            depth,
        }
    }

    pub fn local_dims(&self, depth: usize) -> Result<GridDims, GridError> {
        GridDims::new(self.extent[0], self.extent[1], self.extent[2], depth)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decomposition {
    pub global: [usize; 3],
    pub layout: Layout,
    pub depth: usize,
    pub subdomains: Vec<Subdomain>,
}

/// Splits `global` into a `layout` grid of boxes. Extents that do not divide
/// evenly give one extra cell to the lowest coordinates. Every box must be at
/// least `depth` cells wide so that a halo never reaches past the neighbour.
pub fn decompose(global: [usize; 3], layout: Layout, depth: usize) -> Result<Decomposition, DecompError> {
    if depth == 0 {
        return Err(DecompError::Extent("halo depth must be at least 1".into()));
    }
    let p = layout.as_array();
    let mut splits: [Vec<(usize, usize)>; 3] = Default::default();
    for d in 0..3 {
        let (base, rem) = (global[d] / p[d], global[d] % p[d]);
        splits[d] = (0..p[d]).map(|c| (c * base + c.min(rem), base + usize::from(c < rem))).collect();
        let smallest = base;
        if smallest < depth {
            return Err(DecompError::Extent(format!(
                "axis {d}: {} cells over {} ranks leaves {smallest} per rank, below halo depth {depth}",
                global[d], p[d]
            )));
        }
    }
    let subdomains = (0..layout.ranks())
        .map(|rank| {
            let coords = layout.coords_of(rank);
            let neighbors = std::array::from_fn(|d| {
                let at = |c: usize| {
                    let mut n = coords;
                    n[d] = c;
                    layout.rank_of(n)
                };
                [coords[d].checked_sub(1).map(at), (coords[d] + 1 < p[d]).then(|| at(coords[d] + 1))]
            });
            Subdomain {
                rank,
                coords,
                offset: std::array::from_fn(|d| splits[d][coords[d]].0),
                extent: std::array::from_fn(|d| splits[d][coords[d]].1),
                neighbors,
            }
        })
        .collect();
    Ok(Decomposition {
        global,
        layout,
        depth,
        subdomains,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HaloPhase {
    pub axis: Axis,
    pub extent: SlabExtent,
}

/// Exchange schedule of one rank.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HaloPlan {
    pub depth: usize,
    pub phases: Vec<HaloPhase>,
    coords: [usize; 3],
    neighbors: [[Option<usize>; 2]; 3],
}

impl HaloPlan {
    pub fn new(sub: &Subdomain, depth: usize) -> Self {
        let x = SlabExtent::interior();
        let y = x.with(Axis::X);
        let z = y.with(Axis::Y);
        Self {
            depth,
            phases: vec![
                HaloPhase { axis: Axis::X, extent: x },
                HaloPhase { axis: Axis::Y, extent: y },
                HaloPhase { axis: Axis::Z, extent: z },
            ],
            coords: sub.coords,
            neighbors: sub.neighbors,
        }
    }

    /// Same slabs, executed in a different order.
    pub fn with_phase_order(mut self, order: [Axis; 3]) -> Self {
        let phases = self.phases.clone();
        self.phases = order
            .iter()
            .map(|a| *phases.iter().find(|p| p.axis == *a).expect("every axis has a phase"))
            .collect();
        self
    }

    pub fn messages_per_round(&self) -> usize {
        self.neighbors.iter().flatten().filter(|n| n.is_some()).count()
    }

    /// Faces of one phase in send order: even-coordinate ranks start low,
    /// odd ones high, so paired blocking sends never wait on each other.
    fn sides(&self, axis: Axis) -> [Side; 2] {
        if self.coords[axis.index()].is_multiple_of(2) {
            [Side::Low, Side::High]
        } else {
            [Side::High, Side::Low]
        }
    }
}

/// Cells of the slab a phase moves across one face of a box with `interior`
/// extents.
pub fn slab_cells(interior: [usize; 3], phase: &HaloPhase, depth: usize) -> usize {
    (0..3)
        .map(|d| {
            if d == phase.axis.index() {
                depth
            } else if phase.extent.extend[d] {
                interior[d] + 2 * depth
            } else {
                interior[d]
            }
        })
        .product()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ExchangeStats {
    pub sent: usize,
    pub received: usize,
    pub values_sent: usize,
}

impl std::ops::AddAssign for ExchangeStats {
    fn add_assign(&mut self, o: Self) {
        self.sent += o.sent;
        self.received += o.received;
        self.values_sent += o.values_sent;
    }
}

fn side_code(side: Side) -> u8 {
    match side {
        Side::Low => 0,
        Side::High => 1,
    }
}

/// One halo exchange round. Physical boundaries keep their ghost values.
pub fn exchange_halos(grid: &mut Grid, plan: &HaloPlan, ep: &Endpoint, round: u32) -> Result<ExchangeStats, DecompError> {
    let depth = u16::try_from(plan.depth).map_err(|_| DecompError::Extent(format!("halo depth {} too large", plan.depth)))?;
    let interior = grid.dims().interior();
    let cells_of = |phase: &HaloPhase| slab_cells(interior, phase, plan.depth);
    let mut stats = ExchangeStats::default();
    for phase in &plan.phases {
        let sides = plan.sides(phase.axis);
        let code = phase.axis.index() as u8;
        for side in sides {
            let Some(peer) = plan.neighbors[phase.axis.index()][side as usize] else {
                continue;
            };
            let slab = grid.extract_layers(Face::new(phase.axis, side), plan.depth, phase.extent)?;
            stats.values_sent += slab.len();
            ep.send(peer, &Message::new(round, code, side_code(side), depth, slab))?;
            stats.sent += 1;
        }
        for side in sides {
            let Some(peer) = plan.neighbors[phase.axis.index()][side as usize] else {
                continue;
            };
            let expect = Expect {
                sweep: Some(round),
                phase: Some(code),
                side: Some(side_code(side.opposite())),
                depth: Some(depth),
                values: Some(cells_of(phase)),
            };
            let slab = ep.recv(peer, &expect)?;
            grid.inject_layers(Face::new(phase.axis, side), plan.depth, phase.extent, &slab)?;
            stats.received += 1;
        }
    }
    Ok(stats)
}

/// How a rank applies its local time levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalEngine {
    /// One thread, one level at a time over the whole level domain.
    Serial,
    Pipeline(PipelineConfig),
}

impl LocalEngine {
    pub fn storage(&self) -> StorageKind {
        match self {
            LocalEngine::Serial => StorageKind::TwoGrid,
            LocalEngine::Pipeline(cfg) => cfg.storage,
        }
    }

    /// Levels per node sweep for a halo of `depth`.
    pub fn levels_per_sweep(&self, depth: usize) -> usize {
        match self {
            LocalEngine::Serial => depth,
            LocalEngine::Pipeline(cfg) => cfg.levels_per_sweep(),
        }
    }
}

/// Applies `depth` levels over the shrinking domains of `domain`.
pub fn outer_step(grid: &mut Grid, domain: &DomainSpec, engine: &LocalEngine, opts: &RunOptions<'_>) -> Result<(), DecompError> {
    let depth = domain.depth;
    let cfg = match engine {
        LocalEngine::Serial => PipelineConfig {
            updates_per_thread: depth,
            sync: SyncMode::Relaxed,
            block: BlockSize::new(usize::MAX, usize::MAX, usize::MAX),
            storage: grid.storage_kind(),
            ..PipelineConfig::default()
        },
        LocalEngine::Pipeline(cfg) => *cfg,
    };
    let u = cfg.levels_per_sweep();
    if !depth.is_multiple_of(u) {
        return Err(DecompError::Extent(format!(
            "halo depth {depth} is not a multiple of the {u} levels per node sweep"
        )));
    }
    pipeline::run_sweeps(grid, &cfg, domain, 0, depth / u, opts)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DistributedSpec {
    /// Global interior and its (Dirichlet) ghost shell.
    pub global: GridDims,
    pub pattern: FillPattern,
    pub layout: Layout,
    pub engine: LocalEngine,
    /// Levels between exchanges; a multiple of the engine's levels per sweep.
    pub depth: usize,
    pub outer_steps: usize,
    pub phase_order: [Axis; 3],
}

impl DistributedSpec {
    /// One node sweep of `cfg` per exchange.
    pub fn new(global: GridDims, pattern: FillPattern, layout: Layout, cfg: PipelineConfig, outer_steps: usize) -> Self {
        Self {
            global,
            pattern,
            layout,
            engine: LocalEngine::Pipeline(cfg),
            depth: cfg.levels_per_sweep(),
            outer_steps,
            phase_order: [Axis::X, Axis::Y, Axis::Z],
        }
    }

    pub fn total_levels(&self) -> usize {
        self.depth * self.outer_steps
    }
}

#[derive(Clone, Debug)]
pub struct RankOutput {
    pub rank: usize,
    /// Local snapshot, ghost shell included.
    pub field: Field,
    pub stats: ExchangeStats,
    pub rounds: usize,
    /// Wall time of the exchange and update loop, setup excluded.
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct DistributedRun {
    pub decomposition: Decomposition,
    pub ranks: Vec<RankOutput>,
    /// Global field: the initial ghost shell around the gathered interiors.
    pub gathered: Field,
}

/// Where a local cell of `sub` sits relative to the global field.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum CellOwner {
    Own,
    Neighbour,
    /// Inside the global ghost shell: a fixed boundary value.
    Boundary,
    /// Beyond the global ghost shell, never read.
    Outside,
}

fn classify(sub: &Subdomain, global: GridDims, c: Coord) -> (CellOwner, Coord) {
    let gg = global.ghost as isize;
    let n = global.interior();
    let at: Coord = std::array::from_fn(|d| sub.offset[d] as isize + c[d]);
    let owner = if (0..3).any(|d| at[d] < -gg || at[d] >= n[d] as isize + gg) {
        CellOwner::Outside
    } else if (0..3).any(|d| at[d] < 0 || at[d] >= n[d] as isize) {
        CellOwner::Boundary
    } else if (0..3).all(|d| c[d] >= 0 && c[d] < sub.extent[d] as isize) {
        CellOwner::Own
    } else {
        CellOwner::Neighbour
    };
    (owner, at)
}

fn local_region(sub: &Subdomain, depth: usize) -> Region {
    let g = depth as isize;
    Region::new([-g; 3], std::array::from_fn(|d| sub.extent[d] as isize + g))
}

/// Local starting field of `sub`: interior cells and every cell that maps to
/// the global ghost shell come from the global field. Cells owned by
/// neighbour ranks stay zero until the first exchange.
pub fn scatter(global: &Field, sub: &Subdomain, depth: usize) -> Result<Field, GridError> {
    let mut local = Field::zeros(sub.local_dims(depth)?)?;
    for c in local_region(sub, depth).iter() {
        let (owner, at) = classify(sub, global.dims(), c);
        if matches!(owner, CellOwner::Own | CellOwner::Boundary) {
            local.set(c, global.get(at));
        }
    }
    Ok(local)
}

/// Local cells of `sub` holding fixed boundary values, with those values.
///
/// Compressed storage only carries boundary cells next to the cells a level
/// updates. Boundary cells that flank the halo on another axis fall out of
/// the shrinking level domains, so they are rewritten after every exchange.
pub fn boundary_cells(global: &Field, sub: &Subdomain, depth: usize) -> Vec<(Coord, f64)> {
    local_region(sub, depth)
        .iter()
        .filter_map(|c| match classify(sub, global.dims(), c) {
            (CellOwner::Boundary, at) => Some((c, global.get(at))),
            _ => None,
        })
        .collect()
}

/// Runs every rank on the loopback transport and gathers the result.
pub fn run_distributed(spec: &DistributedSpec) -> Result<DistributedRun, DecompError> {
    run_distributed_with(spec, &RunOptions::default())
}

pub fn run_distributed_with(spec: &DistributedSpec, opts: &RunOptions<'_>) -> Result<DistributedRun, DecompError> {
    let decomposition = decompose(spec.global.interior(), spec.layout, spec.depth)?;
    let initial = Field::filled(spec.global, spec.pattern)?;
    let storage = StorageMode::for_levels(spec.engine.storage(), spec.engine.levels_per_sweep(spec.depth));
    let program = |ep: Endpoint| -> Result<RankOutput, DecompError> {
        let sub = &decomposition.subdomains[ep.rank()];
        let mut grid = Grid::from_field(&scatter(&initial, sub, spec.depth)?, storage)?;
        let plan = HaloPlan::new(sub, spec.depth).with_phase_order(spec.phase_order);
        let domain = sub.domain_spec(spec.depth);
        let boundary = boundary_cells(&initial, sub, spec.depth);
        let mut stats = ExchangeStats::default();
        let start = Instant::now();
        for step in 0..spec.outer_steps {
            stats += exchange_halos(&mut grid, &plan, &ep, step as u32)?;
            for &(c, v) in &boundary {
                grid.set_value(c, v);
            }
            outer_step(&mut grid, &domain, &spec.engine, opts)?;
        }
        Ok(RankOutput {
            rank: sub.rank,
            field: grid.to_field(),
            stats,
            rounds: spec.outer_steps,
            elapsed: start.elapsed(),
        })
    };
    let ranks = spawn_world(spec.layout.ranks(), program).map_err(|e| DecompError::World(e.to_string()))?;
    let mut gathered = initial;
    for (out, sub) in ranks.iter().zip(&decomposition.subdomains) {
        let interior = Region::new([0; 3], std::array::from_fn(|d| sub.extent[d] as isize));
        for c in interior.iter() {
            let at = std::array::from_fn(|d| sub.offset[d] as isize + c[d]);
            gathered.set(at, out.field.get(c));
        }
    }
    Ok(DistributedRun {
        decomposition,
        ranks,
        gathered,
    })
}
