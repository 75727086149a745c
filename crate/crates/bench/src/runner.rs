//! Timed runs of every solver variant, with optional oracle verification.

use std::collections::HashMap;
use std::time::Instant;

use anyhow::{Context, Result};
use ptb_core::decomp::{run_distributed, DistributedSpec, LocalEngine};
use ptb_core::verify::{compare, oracle, Comparison};
use ptb_core::{
    run_node_sweeps, sweep_naive, sweep_spatial_blocked, BlockSize, Field, FillPattern, Grid, GridDims, PipelineConfig, StorageKind,
    StorageMode, SyncMode,
};

use crate::report::{median, BenchResult};

/// Relative L-infinity tolerance for oracle comparisons.
pub const TOLERANCE: f64 = 1e-13;

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Variant {
    /// Two-grid sweep, one time level at a time.
    Naive,
    /// Spatially blocked two-grid sweep.
    Blocked,
    /// Pipelined temporal blocking.
    Pipeline,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Blocked => "blocked",
            Variant::Pipeline => "pipeline",
        }
    }
}

pub fn sync_name(s: SyncMode) -> &'static str {
    match s {
        SyncMode::Barrier => "barrier",
        SyncMode::Relaxed => "relaxed",
    }
}

pub fn storage_name(s: StorageKind) -> &'static str {
    match s {
        StorageKind::TwoGrid => "twogrid",
        StorageKind::Compressed => "compressed",
    }
}

/// A single-node benchmark case.
#[derive(Clone, Debug)]
pub struct NodeCase {
    pub dims: GridDims,
    pub pattern: FillPattern,
    pub variant: Variant,
    pub cfg: PipelineConfig,
    /// Time levels for naive and blocked sweeps, node sweeps for the pipeline.
    pub sweeps: usize,
    pub reps: usize,
    pub verify: bool,
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub result: BenchResult,
    /// Final field of the last timed repetition.
    pub field: Field,
    pub comparison: Option<Comparison>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.comparison.is_none_or(|c| c.passed)
    }
}

fn result_row(variant: &str, dims: GridDims, cfg: &PipelineConfig, sweeps: usize) -> BenchResult {
    let [nx, ny, nz] = dims.interior();
    BenchResult {
        variant: variant.into(),
        nx,
        ny,
        nz,
        n: cfg.teams,
        t: cfg.team_size,
        updates_per_thread: cfg.updates_per_thread,
        dl: cfg.min_distance,
        du: cfg.max_distance,
        dt: cfg.team_delay,
        sync: sync_name(cfg.sync).into(),
        storage: storage_name(cfg.storage).into(),
        sweeps,
        seconds: 0.0,
        mlups: 0.0,
        verified: None,
    }
}

impl NodeCase {
    fn levels(&self) -> usize {
        match self.variant {
            Variant::Pipeline => self.sweeps * self.cfg.levels_per_sweep(),
            _ => self.sweeps,
        }
    }

    fn storage(&self) -> StorageMode {
        match self.variant {
            Variant::Pipeline => StorageMode::for_levels(self.cfg.storage, self.cfg.levels_per_sweep()),
            _ => StorageMode::TwoGrid,
        }
    }

    fn advance(&self, grid: &mut Grid, sweeps: usize) -> Result<()> {
        match self.variant {
            Variant::Naive => {
                for _ in 0..sweeps {
                    sweep_naive(grid)?;
                }
            }
            Variant::Blocked => {
                let block = self.cfg.block.clamped_to(self.dims.interior());
                for _ in 0..sweeps {
                    sweep_spatial_blocked(grid, block)?;
                }
            }
            Variant::Pipeline => run_node_sweeps(grid, &self.cfg, sweeps)?,
        }
        Ok(())
    }

    /// One untimed warmup sweep, then `reps` timed runs from the initial
    /// state. Allocation and reloading stay outside the timed region.
    pub fn run(&self) -> Result<Outcome> {
        let start = Field::filled(self.dims, self.pattern)?;
        let mut grid = Grid::from_field(&start, self.storage())?;
        let cfg = match self.variant {
            Variant::Pipeline => self.cfg,
            // Echo only what the serial variants actually use.
            _ => PipelineConfig {
                teams: 1,
                team_size: 1,
                updates_per_thread: 1,
                storage: StorageKind::TwoGrid,
                ..self.cfg
            },
        };
        let mut row = result_row(self.variant.name(), self.dims, &cfg, self.sweeps);
        self.advance(&mut grid, 1).context("warmup")?;
        let mut times = Vec::with_capacity(self.reps);
        for _ in 0..self.reps.max(1) {
            grid.load(&start)?;
            let t0 = Instant::now();
            self.advance(&mut grid, self.sweeps)?;
            times.push(t0.elapsed().as_secs_f64());
        }
        row.set_seconds(median(&times));
        let field = grid.to_field();
        let comparison = if self.verify {
            let expected = oracle(self.dims, self.pattern, self.levels())?;
            let c = compare(&field, &expected, TOLERANCE)?;
            row.verified = Some(c.passed);
            Some(c)
        } else {
            None
        };
        Ok(Outcome {
            result: row,
            field,
            comparison,
        })
    }
}

/// A loopback multi-rank benchmark case.
#[derive(Clone, Debug)]
pub struct DistCase {
    pub spec: DistributedSpec,
    pub reps: usize,
    pub verify: bool,
}

impl DistCase {
    /// Seconds per repetition are the slowest rank's exchange and update
    /// loop; rank setup and the gather are not timed.
    pub fn run(&self) -> Result<Outcome> {
        let cfg = match self.spec.engine {
            LocalEngine::Pipeline(cfg) => cfg,
            LocalEngine::Serial => PipelineConfig {
                updates_per_thread: self.spec.depth,
                ..PipelineConfig::default()
            },
        };
        let mut row = result_row("dist", self.spec.global, &cfg, self.spec.outer_steps);
        let warmup = DistributedSpec {
            outer_steps: 1,
            ..self.spec.clone()
        };
        run_distributed(&warmup).context("warmup")?;
        let mut times = Vec::new();
        let mut last = None;
        for _ in 0..self.reps.max(1) {
            let run = run_distributed(&self.spec)?;
            let slowest = run.ranks.iter().map(|r| r.elapsed.as_secs_f64()).fold(0.0, f64::max);
            times.push(slowest);
            last = Some(run);
        }
        row.set_seconds(median(&times));
        let field = last.expect("at least one repetition").gathered;
        let comparison = if self.verify {
            let expected = oracle(self.spec.global, self.spec.pattern, self.spec.total_levels())?;
            let c = compare(&field, &expected, TOLERANCE)?;
            row.verified = Some(c.passed);
            Some(c)
        } else {
            None
        };
        Ok(Outcome {
            result: row,
            field,
            comparison,
        })
    }
}

/// One cell of the oracle-equivalence matrix.
#[derive(Clone, Debug)]
pub struct MatrixEntry {
    pub cfg: PipelineConfig,
    pub levels: usize,
    pub comparison: Comparison,
}

/// Pipeline configurations of the full matrix: both storage schemes, both
/// synchronisation modes, one or two teams of 1, 2 or 4 threads doing 1 or 2
/// updates each, maximum distance 1, 2 or 4 and team delay 0 or 8.
pub fn matrix_configs(block: BlockSize) -> Vec<PipelineConfig> {
    let mut out = Vec::new();
    for storage in [StorageKind::TwoGrid, StorageKind::Compressed] {
        for sync in [SyncMode::Barrier, SyncMode::Relaxed] {
            for teams in [1, 2] {
                for team_size in [1, 2, 4] {
                    for updates_per_thread in [1, 2] {
                        for max_distance in [1, 2, 4] {
                            for team_delay in [0, 8] {
                                let cfg = PipelineConfig {
                                    teams,
                                    team_size,
                                    updates_per_thread,
                                    min_distance: 1,
                                    max_distance,
                                    team_delay,
                                    sync,
                                    storage,
                                    block,
                                };
                                if cfg.validate().is_ok() {
                                    out.push(cfg);
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Runs `sweeps` node sweeps of every configuration and compares each to the
/// naive oracle, computing each distinct oracle only once.
pub fn run_matrix(dims: GridDims, pattern: FillPattern, sweeps: usize, configs: &[PipelineConfig]) -> Result<Vec<MatrixEntry>> {
    let start = Field::filled(dims, pattern)?;
    let mut oracles: HashMap<usize, Field> = HashMap::new();
    let mut out = Vec::with_capacity(configs.len());
    for cfg in configs {
        let levels = sweeps * cfg.levels_per_sweep();
        if let std::collections::hash_map::Entry::Vacant(e) = oracles.entry(levels) {
            e.insert(oracle(dims, pattern, levels)?);
        }
        let mut grid = Grid::from_field(&start, StorageMode::for_levels(cfg.storage, cfg.levels_per_sweep()))?;
        run_node_sweeps(&mut grid, cfg, sweeps).with_context(|| format!("{cfg:?}"))?;
        let comparison = compare(&grid.to_field(), &oracles[&levels], TOLERANCE)?;
        out.push(MatrixEntry {
            cfg: *cfg,
            levels,
            comparison,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(variant: Variant, sweeps: usize) -> NodeCase {
        NodeCase {
            dims: GridDims::cube(16, 1).unwrap(),
            pattern: FillPattern::Random(3),
            variant,
            cfg: PipelineConfig {
                team_size: 2,
                block: BlockSize::new(16, 4, 4),
                ..PipelineConfig::default()
            },
            sweeps,
            reps: 2,
            verify: true,
        }
    }

    #[test]
    fn naive_single_sweep_counts_cells() {
        let out = case(Variant::Naive, 1).run().unwrap();
        assert_eq!(out.result.updates(), 4096);
        assert_eq!(out.result.verified, Some(true));
        assert!(out.comparison.unwrap().bitwise);
        assert_eq!((out.result.n, out.result.t, out.result.updates_per_thread), (1, 1, 1));
    }

    #[test]
    fn pipeline_counts_all_levels() {
        let out = case(Variant::Pipeline, 3).run().unwrap();
        assert_eq!(out.result.updates(), 4096 * 3 * 4);
        assert!(out.passed());
        assert!(out.result.mlups > 0.0 && out.result.mlups.is_finite());
    }

    #[test]
    fn compressed_reps_restart_from_the_initial_state() {
        let mut c = case(Variant::Pipeline, 1);
        c.cfg.storage = StorageKind::Compressed;
        c.reps = 3;
        assert!(c.run().unwrap().passed());
    }

    #[test]
    fn matrix_has_every_combination() {
        let configs = matrix_configs(BlockSize::new(8, 8, 8));
        assert_eq!(configs.len(), 2 * 2 * 2 * 3 * 2 * 3 * 2);
    }
}
