//! File formats and commands behind the `caccsim` binary.

pub mod analyze;
pub mod compare;
pub mod io;
pub mod manifest;
pub mod simulate;
pub mod sweep;

pub use analyze::cmd_analyze;
pub use compare::cmd_compare;
pub use simulate::cmd_simulate;
pub use sweep::cmd_sweep;
