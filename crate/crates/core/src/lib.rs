//! Concurrent self-adjusting SplayNet tree networks.
//!
//! A deterministic, time-slot synchronous simulator of the distributed splay
//! protocol (locks, priority buffers, message routines) together with the
//! potential-function instrumentation used to measure its amortized cost.

pub mod analysis;
pub mod buffer;
pub mod oracle;
pub mod protocol;
pub mod rotation;
pub mod simulator;
pub mod topology;
pub mod workload;

pub use buffer::{Buffer, BufferEntry, EntryKey};
pub use rotation::{RotationEffect, RotationError, RotationKind};
pub use topology::{NodeId, Side, Tree, TreeNode};
