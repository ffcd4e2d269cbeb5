//! Standard-library side of the polymath engine: the live chat client,
//! the on-disk formats and the command-line interface.

pub mod cli;
pub mod client;
pub mod formats;
