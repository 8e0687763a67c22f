//! Service layer and run-directory format behind the `byztwin` binary.

pub mod api;
pub mod rundir;
pub mod runs;
