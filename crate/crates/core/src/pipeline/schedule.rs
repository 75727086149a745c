use crate::grid::{Region, Traversal};
use crate::kernel::{BlockSize, CarryFaces};

use super::PipelineError;

/// The cells a pipeline updates at each time level.
///
/// On a single node this is just the interior. Under domain decomposition,
/// faces shared with a neighbour rank extend into the ghost shell by
/// `depth - level` cells, so the updated region shrinks by one layer per
/// level until it reaches the interior after `depth` levels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DomainSpec {
    pub interior: [usize; 3],
    pub neighbor_lo: [bool; 3],
    pub neighbor_hi: [bool; 3],
    pub depth: usize,
}

impl DomainSpec {
    pub fn physical(interior: [usize; 3]) -> Self {
        Self {
            interior,
            neighbor_lo: [false; 3],
            neighbor_hi: [false; 3],
            depth: 0,
        }
    }

    /// Region updated at global time level `level` (counted from 1 since the
    /// last halo exchange).
    pub fn level_region(&self, level: usize) -> Region {
        let ext = self.depth.saturating_sub(level) as isize;
        let mut r = Region::new([0; 3], [0; 3]);
        for d in 0..3 {
            r.lo[d] = if self.neighbor_lo[d] { -ext } else { 0 };
            r.hi[d] = self.interior[d] as isize + if self.neighbor_hi[d] { ext } else { 0 };
        }
        r
    }
}

/// Half-open interval along one axis.
type Span = (isize, isize);

/// Base blocks of one sweep and their shifted regions for every level.
///
/// Base blocks tile the domain of the sweep's first level. At level `tau` each
/// block moves by `tau - 1` cells towards the low corner (forward traversal)
/// or the high corner (reverse traversal), is clamped to that level's domain,
/// and the first and last block of every row absorb whatever the shift
/// uncovered at the domain edges. Per level the regions therefore still tile
/// the domain exactly, and a block only ever depends on blocks that precede
/// it in processing order.
#[derive(Clone, Debug)]
pub struct BlockSchedule {
    traversal: Traversal,
    levels: usize,
    counts: [usize; 3],
    /// `spans[tau - 1][axis][j]`.
    spans: Vec<[Vec<Span>; 3]>,
    domains: Vec<Region>,
    carry_lo: [bool; 3],
    carry_hi: [bool; 3],
}

impl BlockSchedule {
    /// `levels` time levels starting at global level `level_offset + 1`.
    pub fn build(
        domain: &DomainSpec,
        block: BlockSize,
        levels: usize,
        level_offset: usize,
        traversal: Traversal,
    ) -> Result<Self, PipelineError> {
        Self::build_with_counts(domain, block, None, levels, level_offset, traversal)
    }

    /// Block counts that tile `region` with `block`.
    pub fn counts_for(region: Region, block: BlockSize) -> [usize; 3] {
        let b = block.as_array();
        std::array::from_fn(|d| ((region.hi[d] - region.lo[d]) as usize).div_ceil(b[d].max(1)))
    }

    /// Like [`build`](Self::build), but with a fixed number of blocks per
    /// axis, so that sweeps over different level domains share one block
    /// grid. The last block of a row absorbs any surplus.
    pub fn build_with_counts(
        domain: &DomainSpec,
        block: BlockSize,
        counts: Option<[usize; 3]>,
        levels: usize,
        level_offset: usize,
        traversal: Traversal,
    ) -> Result<Self, PipelineError> {
        if levels == 0 {
            return Err(PipelineError::Schedule("a sweep needs at least one level".into()));
        }
        for (d, &n) in domain.interior.iter().enumerate() {
            if levels > n {
                return Err(PipelineError::Schedule(format!(
                    "{levels} levels per sweep exceed interior extent {n} along axis {d}"
                )));
            }
        }
        let base = domain.level_region(level_offset + 1);
        let b = block.as_array();
        let counts_hint = counts;
        let mut counts = [0; 3];
        let mut starts: [Vec<isize>; 3] = Default::default();
        for d in 0..3 {
            let extent = (base.hi[d] - base.lo[d]) as usize;
            if b[d] == 0 || b[d] > extent {
                return Err(PipelineError::Schedule(format!(
                    "block {block} does not fit first-level extent {extent} along axis {d}"
                )));
            }
            counts[d] = match counts_hint {
                Some(c) if c[d] >= 1 && c[d] <= extent.div_ceil(b[d]) => c[d],
                Some(c) => {
                    return Err(PipelineError::Schedule(format!(
                        "{} blocks of {block} cannot tile extent {extent} along axis {d}",
                        c[d]
                    )))
                }
                None => extent.div_ceil(b[d]),
            };
            starts[d] = (0..=counts[d])
                .map(|j| (base.lo[d] + (j * b[d]) as isize).min(base.hi[d]))
                .collect();
        }
        let mut spans = Vec::with_capacity(levels);
        let mut domains = Vec::with_capacity(levels);
        for tau in 1..=levels {
            let dom = domain.level_region(level_offset + tau);
            let shift = match traversal {
                Traversal::Forward => -(tau as isize - 1),
                Traversal::Reverse => tau as isize - 1,
            };
            let per_axis: [Vec<Span>; 3] = std::array::from_fn(|d| {
                let (lo, hi) = (dom.lo[d], dom.hi[d]);
                let m = counts[d];
                let edge = |j: usize| {
                    if j == 0 {
                        lo
                    } else if j == m {
                        hi
                    } else {
                        (starts[d][j] + shift).clamp(lo, hi)
                    }
                };
                (0..m).map(|j| (edge(j), edge(j + 1))).collect()
            });
            spans.push(per_axis);
            domains.push(dom);
        }
        let schedule = Self {
            traversal,
            levels,
            counts,
            spans,
            domains,
            carry_lo: std::array::from_fn(|d| !domain.neighbor_lo[d]),
            carry_hi: std::array::from_fn(|d| !domain.neighbor_hi[d]),
        };
        schedule.check_spans()?;
        Ok(schedule)
    }

    pub fn traversal(&self) -> Traversal {
        self.traversal
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn blocks(&self) -> usize {
        self.counts.iter().product()
    }

    pub fn counts(&self) -> [usize; 3] {
        self.counts
    }

    /// Block coordinates of the `p`-th block in processing order.
    pub fn block_at(&self, p: usize) -> [usize; 3] {
        let q = match self.traversal {
            Traversal::Forward => p,
            Traversal::Reverse => self.blocks() - 1 - p,
        };
        let [mx, my, _] = self.counts;
        [q % mx, (q / mx) % my, q / (mx * my)]
    }

    /// Region and carried ghost faces of the `p`-th block at level `tau`.
    pub fn region(&self, p: usize, tau: usize) -> (Region, CarryFaces) {
        let b = self.block_at(p);
        let spans = &self.spans[tau - 1];
        let mut r = Region::new([0; 3], [0; 3]);
        let mut carry = CarryFaces::none();
        for d in 0..3 {
            (r.lo[d], r.hi[d]) = spans[d][b[d]];
            carry.lo[d] = self.carry_lo[d] && b[d] == 0;
            carry.hi[d] = self.carry_hi[d] && b[d] + 1 == self.counts[d];
        }
        (r, carry)
    }

    pub fn level_domain(&self, tau: usize) -> Region {
        self.domains[tau - 1]
    }

    /// Per-axis spans must be contiguous and cover the level's domain; their
    /// products then tile it.
    fn check_spans(&self) -> Result<(), PipelineError> {
        for (tau, (axes, dom)) in self.spans.iter().zip(&self.domains).enumerate() {
            for (d, spans) in axes.iter().enumerate() {
                let mut at = dom.lo[d];
                for &(lo, hi) in spans {
                    if lo != at || hi < lo {
                        return Err(PipelineError::Schedule(format!(
                            "level {} axis {d}: span ({lo}, {hi}) does not continue at {at}",
                            tau + 1
                        )));
                    }
                    at = hi;
                }
                if at != dom.hi[d] {
                    return Err(PipelineError::Schedule(format!(
                        "level {} axis {d}: spans end at {at}, domain at {}",
                        tau + 1,
                        dom.hi[d]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Cell-by-cell check that every level's regions cover its domain exactly
    /// once.
    pub fn validate_partition(&self) -> Result<(), PipelineError> {
        for tau in 1..=self.levels {
            let dom = self.level_domain(tau);
            let ext: Vec<usize> = (0..3).map(|d| (dom.hi[d] - dom.lo[d]) as usize).collect();
            let mut hits = vec![0u8; dom.cells()];
            for p in 0..self.blocks() {
                let (r, _) = self.region(p, tau);
                for c in r.iter() {
                    if !dom.contains(c) {
                        return Err(PipelineError::Schedule(format!(
                            "level {tau}: block {p} leaves the domain at {c:?}"
                        )));
                    }
                    let i = (c[0] - dom.lo[0]) as usize + ext[0] * ((c[1] - dom.lo[1]) as usize + ext[1] * (c[2] - dom.lo[2]) as usize);
                    hits[i] += 1;
                    if hits[i] > 1 {
                        return Err(PipelineError::Schedule(format!("level {tau}: cell {c:?} updated twice")));
                    }
                }
            }
            if let Some(i) = hits.iter().position(|&h| h == 0) {
                return Err(PipelineError::Schedule(format!("level {tau}: cell #{i} never updated")));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(n: usize) -> DomainSpec {
        DomainSpec::physical([n; 3])
    }

    #[test]
    fn single_block_is_the_interior() {
        let s = BlockSchedule::build(&cube(6), BlockSize::new(6, 6, 6), 1, 0, Traversal::Forward).unwrap();
        assert_eq!(s.blocks(), 1);
        let (r, carry) = s.region(0, 1);
        assert_eq!(r, Region::new([0; 3], [6; 3]));
        assert_eq!(carry, CarryFaces::all());
    }

    #[test]
    fn shifted_blocks_partition_each_level() {
        for traversal in [Traversal::Forward, Traversal::Reverse] {
            let s = BlockSchedule::build(&cube(12), BlockSize::new(12, 4, 4), 2, 0, traversal).unwrap();
            assert_eq!(s.blocks(), 9);
            s.validate_partition().unwrap();
            let total: usize = (0..9).map(|p| s.region(p, 2).0.cells()).sum();
            assert_eq!(total, 12 * 12 * 12);
        }
    }

    #[test]
    fn forward_shift_moves_towards_origin() {
        let s = BlockSchedule::build(&cube(12), BlockSize::new(4, 4, 4), 3, 0, Traversal::Forward).unwrap();
        // Block (1, 1, 1) at level 3 starts two cells lower.
        let p = 1 + 3 + 9;
        assert_eq!(s.block_at(p), [1, 1, 1]);
        assert_eq!(s.region(p, 3).0, Region::new([2; 3], [6; 3]));
        // The last block absorbs the uncovered high layers.
        assert_eq!(s.region(26, 3).0, Region::new([6; 3], [12; 3]));
    }

    #[test]
    fn reverse_order_and_shift() {
        let s = BlockSchedule::build(&cube(12), BlockSize::new(4, 4, 4), 3, 0, Traversal::Reverse).unwrap();
        assert_eq!(s.block_at(0), [2, 2, 2]);
        assert_eq!(s.region(0, 3).0, Region::new([10; 3], [12; 3]));
        assert_eq!(s.region(26, 3).0, Region::new([0; 3], [6; 3]));
        s.validate_partition().unwrap();
    }

    #[test]
    fn too_many_levels_rejected() {
        let err = BlockSchedule::build(&cube(4), BlockSize::new(4, 4, 4), 5, 0, Traversal::Forward);
        assert!(matches!(err, Err(PipelineError::Schedule(_))));
    }

    #[test]
    fn shrinking_domain_partitions() {
        let domain = DomainSpec {
            interior: [10, 9, 8],
            neighbor_lo: [true, false, true],
            neighbor_hi: [false, true, true],
            depth: 4,
        };
        assert_eq!(domain.level_region(1), Region::new([-3, 0, -3], [10, 12, 11]));
        assert_eq!(domain.level_region(4), Region::new([0; 3], [10, 9, 8]));
        for traversal in [Traversal::Forward, Traversal::Reverse] {
            let s = BlockSchedule::build(&domain, BlockSize::new(3, 5, 2), 4, 0, traversal).unwrap();
            s.validate_partition().unwrap();
            let (_, carry) = s.region(0, 1);
            let b = s.block_at(0);
            assert!(!carry.lo[0]);
            assert_eq!(carry.lo[1], b[1] == 0);
        }
    }
}
