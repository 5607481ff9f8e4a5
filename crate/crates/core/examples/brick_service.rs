//! Serves an in-memory volume over HTTP and fetches from it concurrently.

use std::sync::Arc;

use resoct::paging::BrickRequest;
use resoct::service::{BrickServer, FetchPool, HttpTransport, Transport};
use resoct::volume::{BrickStore, BuildOptions, Hierarchy, MemoryStore};

fn main() -> resoct::Result<()> {
    let raw = resoct::synth::shell_vessels(64, 1, 5);
    let h = Hierarchy::build(
        &raw,
        &BuildOptions {
            levels: 3,
            brick_size: [16; 3],
            ..Default::default()
        },
    )?;
    let store: Arc<dyn BrickStore> = Arc::new(MemoryStore::new(Arc::new(h)));
    let server = BrickServer::start(store, "127.0.0.1:0", 4)?;
    println!("serving at {}", server.url());

    let client = Arc::new(HttpTransport::new(&server.url()));
    let m = client.manifest()?;
    println!("{} channel(s), {} levels", m.channels, m.levels.len());

    let mut pool = FetchPool::new(4);
    let g = m.levels[0].brick_grid;
    for z in 0..g[2] {
        for y in 0..g[1] {
            for x in 0..g[0] {
                let c = client.clone();
                pool.submit(move || {
                    c.brick(BrickRequest {
                        channel: 0,
                        level: 0,
                        coord: [x, y, z],
                    })
                    .map(|b| b.len())
                });
            }
        }
    }
    let sizes = pool.wait_all();
    let total: usize = sizes.iter().filter_map(|(_, r)| r.as_ref().ok()).sum();
    println!("fetched {} bricks, {total} compressed bytes", sizes.len());

    let mm = client.region_minmax(0, 0, [0, 0, 0], [32, 32, 32])?;
    println!("min/max of the first octant: {mm:?}");
    server.shutdown();
    Ok(())
}
