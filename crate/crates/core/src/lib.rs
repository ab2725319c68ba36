pub mod client;
pub mod cluster;
pub mod bench;
pub mod codec;
pub mod error;
pub mod gc;
pub mod meta;
pub mod placement;
pub mod retry;
pub mod slice;
pub mod storage;
pub mod wire;

pub use client::{Client, ClientOptions, File, FsConfig, OpenFlags, Stat, Yanked};
pub use error::{Error, Result};
pub use retry::{Fd, Transaction};
