use std::time::Duration;

use ptb_core::pipeline::{instrumented_run, instrumented_run_with, RunOptions};
use ptb_core::verify::{compare, oracle};
use ptb_core::{run_node_sweeps, BlockSize, FillPattern, Grid, GridDims, PipelineConfig, StorageKind, StorageMode, SyncMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid(n: usize, cfg: &PipelineConfig, pattern: FillPattern) -> Grid {
    let mode = StorageMode::for_levels(cfg.storage, cfg.levels_per_sweep());
    Grid::allocate(GridDims::cube(n, 1).unwrap(), mode, pattern).unwrap()
}

#[test]
fn deep_pipeline_both_sync_modes() {
    let dims = GridDims::cube(48, 1).unwrap();
    let expected = oracle(dims, FillPattern::Random(11), 32).unwrap();
    for storage in [StorageKind::TwoGrid, StorageKind::Compressed] {
        for sync in [SyncMode::Relaxed, SyncMode::Barrier] {
            let cfg = PipelineConfig {
                teams: 2,
                team_size: 4,
                updates_per_thread: 2,
                sync,
                storage,
                block: BlockSize::new(48, 8, 8),
                ..PipelineConfig::default()
            };
            let mut g = grid(48, &cfg, FillPattern::Random(11));
            run_node_sweeps(&mut g, &cfg, 2).unwrap();
            let cmp = compare(&g.to_field(), &expected, 1e-13).unwrap();
            assert!(cmp.bitwise, "{storage:?} {sync:?}: {cmp:?}");
        }
    }
}

#[test]
fn barrier_mode_keeps_minimum_distance() {
    let cfg = PipelineConfig {
        teams: 2,
        team_size: 2,
        updates_per_thread: 1,
        team_delay: 3,
        sync: SyncMode::Barrier,
        block: BlockSize::new(16, 4, 4),
        ..PipelineConfig::default()
    };
    let mut g = grid(16, &cfg, FillPattern::Random(1));
    let trace = instrumented_run(&mut g, &cfg, 3).unwrap();
    assert_eq!(trace.events.len(), 3 * 4 * 16);
    assert_eq!(trace.violations().count(), 0);
    for e in &trace.events {
        if let Some(p) = e.c_prev {
            let want = if e.thread == 2 { 1 + 3 } else { 1 };
            assert!(p >= e.c_self + want || p == 16, "{e:?}");
        }
    }
}

#[test]
fn unit_distances_give_lockstep_bounds() {
    let cfg = PipelineConfig {
        team_size: 4,
        updates_per_thread: 1,
        min_distance: 1,
        max_distance: 1,
        block: BlockSize::new(12, 3, 3),
        ..PipelineConfig::default()
    };
    let mut g = grid(12, &cfg, FillPattern::Random(2));
    let trace = instrumented_run(&mut g, &cfg, 2).unwrap();
    for e in &trace.events {
        if let Some(p) = e.c_prev {
            assert!(p > e.c_self, "{e:?}");
        }
        if let Some(n) = e.c_next {
            assert!(e.c_self <= n + 1, "{e:?}");
        }
    }
    let expected = oracle(g.dims(), FillPattern::Random(2), 8).unwrap();
    assert!(compare(&g.to_field(), &expected, 0.0).unwrap().bitwise);
}

#[test]
fn jittered_runs_never_start_early() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for run in 0..20 {
        let du = rng.gen_range(1..=8);
        let cfg = PipelineConfig {
            teams: rng.gen_range(1..=2),
            team_size: rng.gen_range(1..=3),
            updates_per_thread: rng.gen_range(1..=2),
            max_distance: du,
            team_delay: rng.gen_range(0..=2),
            storage: if run % 2 == 0 {
                StorageKind::TwoGrid
            } else {
                StorageKind::Compressed
            },
            block: BlockSize::new(rng.gen_range(2..=16), rng.gen_range(1..=6), rng.gen_range(1..=6)),
            ..PipelineConfig::default()
        };
        let mut g = grid(16, &cfg, FillPattern::Random(run));
        let opts = RunOptions {
            trace: true,
            jitter_seed: Some(run),
            spin_timeout: Some(Duration::from_secs(60)),
            ..RunOptions::default()
        };
        let trace = instrumented_run_with(&mut g, &cfg, 2, &opts).unwrap();
        assert_eq!(trace.violations().count(), 0, "{cfg:?}");
        let expected = oracle(g.dims(), FillPattern::Random(run), 2 * cfg.levels_per_sweep()).unwrap();
        assert!(compare(&g.to_field(), &expected, 0.0).unwrap().bitwise, "{cfg:?}");
    }
}

#[test]
fn worker_hook_runs_once_per_thread() {
    use std::sync::atomic::{AtomicUsize, Ordering};
    let seen = AtomicUsize::new(0);
    let hook = |i: usize| {
        seen.fetch_or(1 << i, Ordering::Relaxed);
    };
    let cfg = PipelineConfig {
        teams: 2,
        team_size: 2,
        updates_per_thread: 1,
        block: BlockSize::new(8, 4, 4),
        ..PipelineConfig::default()
    };
    let mut g = grid(8, &cfg, FillPattern::Constant(1.0));
    let opts = RunOptions {
        worker_init: Some(&hook),
        ..RunOptions::default()
    };
    instrumented_run_with(&mut g, &cfg, 1, &opts).unwrap();
    assert_eq!(seen.load(Ordering::Relaxed), 0b1111);
}
