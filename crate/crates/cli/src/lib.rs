//! Command line and HTTP front end for `dialogic-core`.
//!
//! Both surfaces share the store-backed workflows in [`ops`], so a run
//! started over HTTP and one started from the shell leave identical files.

pub mod api;
pub mod chat;
pub mod cli;
pub mod ops;
