//! Multi-level tiling of a small data-parallel IR: the IR itself, an n-d
//! array library, a reference interpreter, the tiling transformation, an
//! empirical tile-size autotuner and a trace-driven cache simulator.

pub mod autotuner;
pub mod bench;
pub mod cachesim;
pub mod ir;
pub mod ndarray;
pub mod semantics;
pub mod tiling;
