//! Networks split into components, each with an optional auxiliary head.

mod arch;
mod layer;
mod model;

pub use arch::{format_shape, parse_shape, ArchitectureSpec, AuxHead, Preset};
pub use layer::{BnBuffer, Layer, Mode, StatsLog, BN_MOMENTUM};
pub use model::{build, component_losses, group_blocks, Component, ForwardPass, PartitionedModel};

#[cfg(test)]
mod tests;
