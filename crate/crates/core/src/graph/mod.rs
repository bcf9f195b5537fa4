//! Layered network engine with exact manual backpropagation and static cost
//! accounting.

pub mod arch;
pub mod gradcheck;
mod kernels;
pub mod layer;
pub mod network;
pub mod params;
pub mod profile;
#[cfg(test)]
mod tests;

pub use arch::Architecture;
pub use kernels::Mode;
pub use layer::{LayerSpec, ParamName};
pub use network::{Block, BlockCache, Network, SegmentCache};
pub use params::{Net, Param, ParamKey, ParamStore};
pub use profile::{account, AccountRow, LayerCost, ModelProfile, NetProfile};
