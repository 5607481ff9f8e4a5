//! Brick file service: HTTP server, engine-side transports and the fetch
//! worker pool.

mod pool;
mod server;
mod transport;

pub use pool::FetchPool;
pub use server::{route, BrickServer, Reply};
pub use transport::{FetchError, HttpTransport, InProcessTransport, RetryPolicy, Transport};
