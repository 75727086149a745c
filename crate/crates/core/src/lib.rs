//! Pipelined temporal blocking for the 3D Jacobi stencil.
//!
//! Grids in two-array or compressed single-array storage ([`grid`]), the
//! stencil and serial sweeps ([`kernel`]), the multi-threaded block pipeline
//! ([`pipeline`]), deep-halo domain decomposition over an in-process message
//! transport ([`decomp`], [`transport`]), analytic performance models
//! ([`model`]) and reference results for testing ([`verify`]).

pub mod decomp;
pub mod grid;
pub mod kernel;
pub mod model;
pub mod pipeline;
pub mod transport;
pub mod verify;

pub use grid::{Axis, Face, Field, FillPattern, Grid, GridDims, GridError, Region, Side, SlabExtent, StorageKind, StorageMode, Traversal};
pub use kernel::{stencil_point, sweep_naive, sweep_spatial_blocked, update_block, BlockSize, CarryFaces, KernelError};
pub use pipeline::{run_node_sweeps, PipelineConfig, PipelineError, SyncMode};
