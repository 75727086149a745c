//! Command-line front end.

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ptb_core::decomp::{decompose, DistributedSpec, Layout};
use ptb_core::model::{efficiency, multihalo_ratio, multihalo_time, pipelined_speedup, MachineParams, NetworkParams};
use ptb_core::pipeline::{BlockSchedule, DomainSpec};
use ptb_core::{Axis, BlockSize, Field, FillPattern, GridDims, PipelineConfig, StorageKind, SyncMode, Traversal};

use crate::report::{report, BenchResult, Format};
use crate::runner::{matrix_configs, run_matrix, storage_name, sync_name, DistCase, NodeCase, Outcome, Variant};

#[derive(Debug, Parser)]
#[command(name = "ptb", version, about = "Pipelined temporal blocking for the 3D Jacobi stencil")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Time solver variants and report MLUP/s.
    Bench(BenchArgs),
    /// Compare pipelined runs against the naive oracle.
    Verify(VerifyArgs),
    /// Evaluate the analytic performance models.
    Model(ModelArgs),
    /// Run a decomposed problem on in-process ranks.
    Dist(DistArgs),
}

#[derive(Debug, Args)]
struct GridArgs {
    /// Interior edge length of a cubic grid.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long)]
    nx: Option<usize>,
    #[arg(long)]
    ny: Option<usize>,
    #[arg(long)]
    nz: Option<usize>,
    /// constant:V, linear, hotplate or random:SEED.
    #[arg(long, default_value = "random:1")]
    pattern: FillPattern,
}

impl GridArgs {
    fn dims(&self, ghost: usize) -> Result<GridDims, Failure> {
        let n = |v: Option<usize>| v.unwrap_or(self.size);
        GridDims::new(n(self.nx), n(self.ny), n(self.nz), ghost).map_err(|e| Failure::Usage(e.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SyncArg {
    Barrier,
    Relaxed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum StorageArg {
    Twogrid,
    Compressed,
}

#[derive(Debug, Args)]
struct PipelineArgs {
    /// Thread teams.
    #[arg(long, default_value_t = 1)]
    teams: usize,
    /// Threads per team.
    #[arg(long, default_value_t = 4)]
    team_size: usize,
    /// Updates each thread applies to a block.
    #[arg(short = 'T', long = "updates", default_value_t = 2)]
    updates: usize,
    /// Minimum distance to the predecessor thread, in blocks.
    #[arg(long, default_value_t = 1)]
    dl: usize,
    /// Maximum distance to the successor thread, in blocks.
    #[arg(long, default_value_t = 4)]
    du: usize,
    /// Extra distance between the last thread of one team and the next team.
    #[arg(long, default_value_t = 0)]
    dt: usize,
    /// Block extents; larger values are clamped to the grid.
    #[arg(long, default_value = "120x20x20")]
    block: BlockSize,
    #[arg(long, value_enum, default_value_t = SyncArg::Relaxed)]
    sync: SyncArg,
    #[arg(long, value_enum, default_value_t = StorageArg::Twogrid)]
    storage: StorageArg,
}

impl PipelineArgs {
    fn config(&self) -> PipelineConfig {
        PipelineConfig {
            teams: self.teams,
            team_size: self.team_size,
            updates_per_thread: self.updates,
            min_distance: self.dl,
            max_distance: self.du,
            team_delay: self.dt,
            sync: match self.sync {
                SyncArg::Barrier => SyncMode::Barrier,
                SyncArg::Relaxed => SyncMode::Relaxed,
            },
            storage: match self.storage {
                StorageArg::Twogrid => StorageKind::TwoGrid,
                StorageArg::Compressed => StorageKind::Compressed,
            },
            block: self.block,
        }
    }
}

#[derive(Debug, Args)]
struct OutputArgs {
    /// Timed repetitions; the median is reported.
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Skip the comparison against the naive oracle.
    #[arg(long)]
    no_verify: bool,
    /// Write the final field of the last run to this file.
    #[arg(long)]
    dump: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum VariantArg {
    Naive,
    Blocked,
    Pipeline,
    /// Naive, blocked, and the pipeline with every storage and sync mode.
    All,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long, value_enum, default_value_t = VariantArg::Pipeline)]
    variant: VariantArg,
    /// Time levels for naive and blocked sweeps, node sweeps for the pipeline.
    #[arg(long, default_value_t = 4)]
    sweeps: usize,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    output: OutputArgs,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long, default_value_t = 2)]
    sweeps: usize,
    /// Check every storage, sync, team and distance combination instead of
    /// the one given on the command line. Only --block is taken from it.
    #[arg(long)]
    matrix: bool,
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
}

#[derive(Debug, Args)]
struct ModelArgs {
    /// Emit pipelined speedups instead of the multi-layer halo table.
    #[arg(long)]
    speedup: bool,
    /// Threads per team.
    #[arg(long = "t", value_delimiter = ',', default_values_t = [1, 2, 4, 8])]
    team_sizes: Vec<usize>,
    /// Updates per thread.
    #[arg(long = "T", value_delimiter = ',', default_values_t = [1, 2, 4])]
    updates: Vec<usize>,
    /// Single-thread memory bandwidth, GB/s.
    #[arg(long, default_value_t = 10.0)]
    mem_bw_single: f64,
    /// Saturated memory bandwidth, GB/s.
    #[arg(long, default_value_t = 20.0)]
    mem_bw_saturated: f64,
    /// Shared cache bandwidth, GB/s.
    #[arg(long, default_value_t = 80.0)]
    cache_bw: f64,
    /// Subdomain edge lengths.
    #[arg(long = "L", value_delimiter = ',', default_values_t = [8, 16, 32, 64, 128, 512])]
    lengths: Vec<usize>,
    /// Halo depths.
    #[arg(long = "h", value_delimiter = ',', default_values_t = [1, 2, 4, 8, 16, 32])]
    depths: Vec<usize>,
    /// Network bandwidth, GB/s.
    #[arg(long, default_value_t = 3.2)]
    bandwidth: f64,
    /// Message latency, microseconds.
    #[arg(long, default_value_t = 1.8)]
    latency_us: f64,
    /// Node update rate, MLUP/s.
    #[arg(long, default_value_t = 2000.0)]
    node_rate: f64,
}

#[derive(Debug, Args)]
struct DistArgs {
    /// Process grid, e.g. 2x2x1.
    #[arg(long, conflicts_with = "ranks")]
    layout: Option<Layout>,
    /// Number of ranks, arranged as evenly as possible.
    #[arg(long)]
    ranks: Option<usize>,
    /// Halo exchanges, each followed by one node sweep.
    #[arg(long, default_value_t = 2)]
    outer_steps: usize,
    /// Order of the exchange phases. Anything but xyz loses edge and corner
    /// halo data; useful to see verification fail.
    #[arg(long, default_value = "xyz", value_parser = parse_phase_order)]
    phase_order: [Axis; 3],
    #[command(flatten)]
    grid: GridArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(flatten)]
    output: OutputArgs,
}

fn parse_phase_order(s: &str) -> Result<[Axis; 3], String> {
    let axes: Vec<Axis> = s
        .chars()
        .map(|c| match c {
            'x' => Ok(Axis::X),
            'y' => Ok(Axis::Y),
            'z' => Ok(Axis::Z),
            _ => Err(format!("unknown axis {c:?}")),
        })
        .collect::<Result<_, _>>()?;
    match axes[..] {
        [a, b, c] if a != b && b != c && a != c => Ok([a, b, c]),
        _ => Err("expected a permutation of xyz".into()),
    }
}

/// Splits `ranks` into three factors, largest first along z.
fn balanced_layout(ranks: usize) -> Layout {
    let mut f = [1usize; 3];
    let mut rest = ranks;
    let mut p = 2;
    let mut primes = Vec::new();
    while rest > 1 {
        while rest.is_multiple_of(p) {
            primes.push(p);
            rest /= p;
        }
        p += 1;
    }
    for q in primes.into_iter().rev() {
        let smallest = (0..3).min_by_key(|&d| (f[d], std::cmp::Reverse(d))).expect("three axes");
        f[smallest] *= q;
    }
    Layout::new(f[0], f[1], f[2])
}

enum Failure {
    Usage(String),
    Verification(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

/// Runs the `ptb` command line. Returns the process exit code: 0 on success,
/// 1 when a run fails or does not match the oracle, 2 on invalid arguments.
pub fn cli_main<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
                return 2;
            }
            let _ = write!(out, "{text}");
            return 0;
        }
    };
    let result = match cli.command {
        Command::Bench(a) => bench(a, out, err),
        Command::Verify(a) => verify(a, out),
        Command::Model(a) => model(a, out),
        Command::Dist(a) => dist(a, out, err),
    };
    match result {
        Ok(()) => 0,
        Err(Failure::Usage(m)) => {
            let _ = writeln!(err, "error: {m}");
            2
        }
        Err(Failure::Verification(m)) => {
            let _ = writeln!(err, "verification failed: {m}");
            1
        }
        Err(Failure::Runtime(e)) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}

/// Rejects configurations the pipeline cannot schedule on `domain`.
fn check_schedule(cfg: &PipelineConfig, domain: &DomainSpec) -> Result<(), Failure> {
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let first = domain.level_region(1);
    let extent = std::array::from_fn(|d| (first.hi[d] - first.lo[d]) as usize);
    BlockSchedule::build(domain, cfg.block.clamped_to(extent), cfg.levels_per_sweep(), 0, Traversal::Forward)
        .map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(())
}

fn write_dump(path: &PathBuf, field: &Field) -> Result<(), Failure> {
    let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    field.write_dump(&mut w)?;
    w.flush()?;
    Ok(())
}

fn finish(outcomes: &[Outcome], output: &OutputArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let rows: Vec<BenchResult> = outcomes.iter().map(|o| o.result.clone()).collect();
    write!(out, "{}", report(&rows, output.format))?;
    if let (Some(path), Some(last)) = (&output.dump, outcomes.last()) {
        write_dump(path, &last.field)?;
    }
    let failed: Vec<String> = outcomes
        .iter()
        .filter(|o| !o.passed())
        .map(|o| {
            let c = o.comparison.expect("failed outcomes carry a comparison");
            format!(
                "{} {}/{}: max rel {:e} at {:?}",
                o.result.variant, o.result.storage, o.result.sync, c.max_rel, c.location
            )
        })
        .collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Failure::Verification(failed.join("; ")))
    }
}

fn bench(a: BenchArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let dims = a.grid.dims(1)?;
    let base = a.pipeline.config();
    let mut cases = Vec::new();
    let node = |variant, cfg| NodeCase {
        dims,
        pattern: a.grid.pattern,
        variant,
        cfg,
        sweeps: a.sweeps,
        reps: a.output.reps,
        verify: !a.output.no_verify,
    };
    let pipelines = |cases: &mut Vec<NodeCase>, all: bool| {
        let storages = if all {
            vec![StorageKind::TwoGrid, StorageKind::Compressed]
        } else {
            vec![base.storage]
        };
        let syncs = if all {
            vec![SyncMode::Barrier, SyncMode::Relaxed]
        } else {
            vec![base.sync]
        };
        for &storage in &storages {
            for &sync in &syncs {
                cases.push(node(Variant::Pipeline, PipelineConfig { storage, sync, ..base }));
            }
        }
    };
    match a.variant {
        VariantArg::Naive => cases.push(node(Variant::Naive, base)),
        VariantArg::Blocked => cases.push(node(Variant::Blocked, base)),
        VariantArg::Pipeline => pipelines(&mut cases, false),
        VariantArg::All => {
            cases.push(node(Variant::Naive, base));
            cases.push(node(Variant::Blocked, base));
            pipelines(&mut cases, true);
        }
    }
    if a.sweeps == 0 {
        return Err(Failure::Usage("--sweeps must be at least 1".into()));
    }
    if cases.iter().any(|c| c.variant == Variant::Pipeline) {
        check_schedule(&base, &DomainSpec::physical(dims.interior()))?;
    }
    let mut outcomes = Vec::new();
    for c in &cases {
        let o = c.run()?;
        let _ = writeln!(err, "{}: {:.1} MLUP/s", o.result.variant, o.result.mlups);
        outcomes.push(o);
    }
    finish(&outcomes, &a.output, out)
}

fn verify(a: VerifyArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let dims = a.grid.dims(1)?;
    let base = a.pipeline.config();
    let configs = if a.matrix { matrix_configs(base.block) } else { vec![base] };
    if a.sweeps == 0 {
        return Err(Failure::Usage("--sweeps must be at least 1".into()));
    }
    for cfg in &configs {
        check_schedule(cfg, &DomainSpec::physical(dims.interior()))?;
    }
    let entries = run_matrix(dims, a.grid.pattern, a.sweeps, &configs)?;
    writeln!(out, "n,t,T,dl,du,dt,sync,storage,levels,max_abs,max_rel,bitwise,passed")?;
    for e in &entries {
        let c = &e.cfg;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{:e},{:e},{},{}",
            c.teams,
            c.team_size,
            c.updates_per_thread,
            c.min_distance,
            c.max_distance,
            c.team_delay,
            sync_name(c.sync),
            storage_name(c.storage),
            e.levels,
            e.comparison.max_abs,
            e.comparison.max_rel,
            e.comparison.bitwise,
            e.comparison.passed
        )?;
    }
    let failed = entries.iter().filter(|e| !e.comparison.passed).count();
    if failed > 0 {
        return Err(Failure::Verification(format!(
            "{failed} of {} configurations differ from the oracle",
            entries.len()
        )));
    }
    Ok(())
}

fn model(a: ModelArgs, out: &mut dyn Write) -> Result<(), Failure> {
    let positive = [
        a.mem_bw_single,
        a.mem_bw_saturated,
        a.cache_bw,
        a.bandwidth,
        a.latency_us,
        a.node_rate,
    ];
    if positive.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
        return Err(Failure::Usage("bandwidths, latency and rates must be positive".into()));
    }
    if a.speedup {
        if a.team_sizes.contains(&0) || a.updates.contains(&0) {
            return Err(Failure::Usage("--t and --T must be at least 1".into()));
        }
        let p = MachineParams {
            mem_bw_saturated: a.mem_bw_saturated * 1e9,
            mem_bw_single: a.mem_bw_single * 1e9,
            cache_bw: a.cache_bw * 1e9,
        };
        writeln!(out, "t,T,speedup")?;
        for &t in &a.team_sizes {
            for &tt in &a.updates {
                writeln!(out, "{t},{tt},{}", pipelined_speedup(&p, t, tt))?;
            }
        }
        return Ok(());
    }
    if a.lengths.contains(&0) || a.depths.contains(&0) {
        return Err(Failure::Usage("--L and --h must be at least 1".into()));
    }
    let net = NetworkParams {
        bandwidth: a.bandwidth * 1e9,
        latency: a.latency_us * 1e-6,
        node_rate: a.node_rate * 1e6,
    };
    writeln!(out, "L,h,bulk_s,face_s,comm_s,ratio,efficiency")?;
    for &l in &a.lengths {
        for &h in &a.depths {
            let m = multihalo_time(l, h, &net);
            writeln!(
                out,
                "{l},{h},{:e},{:e},{:e},{},{}",
                m.bulk,
                m.face,
                m.comm,
                multihalo_ratio(l, h, &net),
                efficiency(l, h, &net)
            )?;
        }
    }
    Ok(())
}

fn dist(a: DistArgs, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), Failure> {
    let global = a.grid.dims(1)?;
    let cfg = a.pipeline.config();
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let layout = match (a.layout, a.ranks) {
        (Some(l), _) => l,
        (None, Some(0)) => return Err(Failure::Usage("--ranks must be at least 1".into())),
        (None, Some(r)) => balanced_layout(r),
        (None, None) => Layout::new(2, 1, 1),
    };
    if a.outer_steps == 0 {
        return Err(Failure::Usage("--outer-steps must be at least 1".into()));
    }
    let spec = DistributedSpec {
        phase_order: a.phase_order,
        ..DistributedSpec::new(global, a.grid.pattern, layout, cfg, a.outer_steps)
    };
    let decomposition = decompose(global.interior(), layout, spec.depth).map_err(|e| Failure::Usage(e.to_string()))?;
    for sub in &decomposition.subdomains {
        check_schedule(&cfg, &sub.domain_spec(spec.depth)).map_err(|f| match f {
            Failure::Usage(m) => Failure::Usage(format!("rank {}: {m}", sub.rank)),
            other => other,
        })?;
    }
    let _ = writeln!(err, "layout {layout}, halo depth {}", spec.depth);
    let case = DistCase {
        spec,
        reps: a.output.reps,
        verify: !a.output.no_verify,
    };
    let outcome = case.run().map_err(|e| anyhow!("{e:#}"))?;
    finish(&[outcome], &a.output, out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layouts_are_balanced() {
        assert_eq!(balanced_layout(1), Layout::new(1, 1, 1));
        assert_eq!(balanced_layout(2), Layout::new(1, 1, 2));
        assert_eq!(balanced_layout(8), Layout::new(2, 2, 2));
        assert_eq!(balanced_layout(12), Layout::new(2, 2, 3));
        assert_eq!(balanced_layout(7), Layout::new(1, 1, 7));
        assert_eq!(balanced_layout(12).ranks(), 12);
    }

    #[test]
    fn phase_orders() {
        assert_eq!(parse_phase_order("zyx").unwrap(), [Axis::Z, Axis::Y, Axis::X]);
        assert!(parse_phase_order("xxz").is_err());
        assert!(parse_phase_order("xy").is_err());
        assert!(parse_phase_order("xyw").is_err());
    }
}
