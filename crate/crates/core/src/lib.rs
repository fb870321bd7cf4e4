//! A message-driven parallel runtime with GPU-aware communication over a
//! tagged point-to-point transport.

pub mod bench;
pub mod channel;
pub mod cli;
pub mod config;
pub mod device;
pub mod devmsg;
pub mod jacobi;
pub mod mpi;
pub mod runtime;
pub mod tag;
pub mod time;
pub mod transport;
