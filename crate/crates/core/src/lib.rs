//! Signal-resolved density matrices for quantum feedback driven by
//! measurement records.

pub mod discrete;
pub mod jump;
pub mod error;
pub mod inversion;
pub mod limits;
pub mod linops;
pub mod model;
pub mod signals;
pub mod trajectories;

pub use error::{Error, Result};
pub use linops::{CMatrix, SuperOp, C64};
pub use model::{InstrumentSet, Jump, Outcome, QuantumModel};
pub use signals::{Signal, SignalRule};
