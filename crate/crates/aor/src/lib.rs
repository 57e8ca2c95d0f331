//! Command-line runner and viewer server for object-anchored assistant
//! sessions built on `aor-core`.

pub mod backends;
pub mod server;
pub mod session;

pub use backends::{DetectorSpec, MllmSpec};
pub use session::{prepare, replay_file, run, state_json, RunOptions, RunSummary};
