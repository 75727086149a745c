//! Analytic performance models.
//!
//! All bandwidths are in bytes per second. One Jacobi update moves 16 bytes
//! through memory at best: an 8-byte load and an 8-byte store.

const BYTES_PER_UPDATE: f64 = 16.0;
const BYTES_PER_VALUE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MachineParams {
    /// Memory bandwidth with all cores of the socket streaming.
    pub mem_bw_saturated: f64,
    /// Memory bandwidth a single thread can draw.
    pub mem_bw_single: f64,
    /// Bandwidth of the shared outer-level cache.
    pub cache_bw: f64,
}

impl Default for MachineParams {
    /// Ratios typical of a quad-core socket: saturated memory bandwidth twice
    /// the single-thread value, shared cache eight times.
    fn default() -> Self {
        Self {
            mem_bw_saturated: 20e9,
            mem_bw_single: 10e9,
            cache_bw: 80e9,
        }
    }
}

/// STREAM figures of a two-socket quad-core node, per socket and total.
pub const SOCKET_BANDWIDTH: f64 = 18.5e9;
pub const NODE_BANDWIDTH: f64 = 37e9;

/// Upper bound on updates per second for a memory-bound sweep.
pub fn baseline_perf(mem_bw: f64) -> f64 {
    mem_bw / BYTES_PER_UPDATE
}

/// Time per cell for the `t·T` updates one team applies to a block: the first
/// streams from memory on one thread, the rest run from the shared cache.
pub fn team_block_time(p: &MachineParams, team_size: usize, updates_per_thread: usize) -> f64 {
    let tt = (team_size * updates_per_thread) as f64;
    BYTES_PER_UPDATE / p.mem_bw_single * (1.0 + (tt - 1.0) * p.mem_bw_single / p.cache_bw)
}

/// Expected gain of one pipelined team over the memory-bound baseline on the
/// same socket. Tends to `cache_bw / mem_bw_saturated` for long pipelines.
pub fn pipelined_speedup(p: &MachineParams, team_size: usize, updates_per_thread: usize) -> f64 {
    let tt = (team_size * updates_per_thread) as f64;
    p.mem_bw_single / p.mem_bw_saturated * (tt / (1.0 + (tt - 1.0) * (p.mem_bw_single / p.cache_bw)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NetworkParams {
    /// Unidirectional point-to-point bandwidth.
    pub bandwidth: f64,
    /// Per-message latency in seconds.
    pub latency: f64,
    /// Stencil updates per second of one node, independent of subdomain size.
    pub node_rate: f64,
}

impl Default for NetworkParams {
    /// QDR InfiniBand and a node running at 2000 MLUP/s.
    fn default() -> Self {
        Self {
            bandwidth: 3.2e9,
            latency: 1.8e-6,
            node_rate: 2.0e9,
        }
    }
}

/// Cost of one outer step (exchange plus `h` local updates) on an `L³`
/// subdomain.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MultihaloTime {
    /// The `h · L³` updates that would be done anyway.
    pub bulk: f64,
    /// Extra updates on the shrinking halo layers.
    pub face: f64,
    /// Halo exchange.
    pub comm: f64,
}

impl MultihaloTime {
    pub fn compute(&self) -> f64 {
        self.bulk + self.face
    }

    pub fn total(&self) -> f64 {
        self.compute() + self.comm
    }
}

/// Halo-exchange time for halo depth `h`: three directional phases, each
/// sending two faces one after the other. Later phases carry slabs widened by
/// the halos already received.
pub fn exchange_time(l: usize, h: usize, net: &NetworkParams) -> f64 {
    let (l, h) = (l as f64, h as f64);
    let areas = [l * l, (l + 2.0 * h) * l, (l + 2.0 * h) * (l + 2.0 * h)];
    areas
        .iter()
        .map(|a| 2.0 * (net.latency + BYTES_PER_VALUE * h * a / net.bandwidth))
        .sum()
}

pub fn multihalo_time(l: usize, h: usize, net: &NetworkParams) -> MultihaloTime {
    let cells: f64 = (1..=h).map(|s| ((l + 2 * (h - s)) as f64).powi(3)).sum();
    let compute = cells / net.node_rate;
    let bulk = (h as f64) * (l as f64).powi(3) / net.node_rate;
    MultihaloTime {
        bulk,
        face: compute - bulk,
        comm: exchange_time(l, h, net),
    }
}

/// Time per local update with single-layer halos divided by the same with
/// depth `h`. Values above 1 favour the deep halo.
pub fn multihalo_ratio(l: usize, h: usize, net: &NetworkParams) -> f64 {
    let single = multihalo_time(l, 1, net).total();
    let deep = multihalo_time(l, h, net).total() / h as f64;
    single / deep
}

/// Fraction of an outer step spent computing.
pub fn efficiency(l: usize, h: usize, net: &NetworkParams) -> f64 {
    let t = multihalo_time(l, h, net);
    t.compute() / t.total()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn baseline_points() {
        assert_eq!(baseline_perf(NODE_BANDWIDTH), 2.3125e9);
        assert_eq!(baseline_perf(SOCKET_BANDWIDTH), 1.15625e9);
        assert_eq!(baseline_perf(16.0), 1.0);
    }

    #[test]
    fn team_block_time_points() {
        let p = MachineParams::default();
        let t = team_block_time(&p, 4, 2);
        assert!((t - 3.0e-9).abs() < 1e-24, "{t}");
        let no_cache = MachineParams {
            cache_bw: f64::INFINITY,
            ..p
        };
        assert_eq!(team_block_time(&no_cache, 1, 1), 16.0 / p.mem_bw_single);
        assert_eq!(team_block_time(&p, 1, 1), team_block_time(&no_cache, 1, 1));
    }

    #[test]
    fn speedup_points() {
        let p = MachineParams::default();
        assert_eq!(pipelined_speedup(&p, 4, 1), 16.0 / 11.0);
        assert_eq!(pipelined_speedup(&p, 4, 2), 32.0 / 15.0);
        let far = pipelined_speedup(&p, 1, 1_000_000);
        assert!((far / 4.0 - 1.0).abs() < 1e-3);
    }

    #[test]
    fn speedup_consistent_with_block_time() {
        let p = MachineParams::default();
        for tt in 1..50 {
            let v = team_block_time(&p, tt, 1) * pipelined_speedup(&p, tt, 1) / tt as f64 * (p.mem_bw_saturated / 16.0);
            assert!((v - 1.0).abs() < 1e-14);
        }
    }

    #[test]
    fn single_halo_has_no_face_work() {
        let net = NetworkParams::default();
        let t = multihalo_time(20, 1, &net);
        assert_eq!(t.face, 0.0);
        let expected = 2.0 * 3.0 * net.latency + 2.0 * 8.0 * (400.0 + 440.0 + 484.0) / net.bandwidth;
        assert!((t.comm - expected).abs() < 1e-20);
        assert_eq!(multihalo_ratio(20, 1, &net), 1.0);
    }

    #[test]
    fn two_layer_compute_volume() {
        let net = NetworkParams {
            node_rate: 1.0,
            ..NetworkParams::default()
        };
        assert_eq!(multihalo_time(4, 2, &net).compute(), 280.0);
    }
}
