//! Renders one view with each cache management method, compares every
//! result with the reference renderer and writes PNGs.

use std::sync::Arc;

use resoct::render::{render_reference, BrickedVolume, Camera, ChannelSettings};
use resoct::service::{InProcessTransport, Transport};
use resoct::session::{Method, Session, SessionConfig};
use resoct::transfer::TransferFunction;
use resoct::volume::{BrickStore, BuildOptions, Hierarchy, MemoryStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = resoct::synth::shell_vessels(128, 2, 9);
    let h = Arc::new(Hierarchy::build(
        &raw,
        &BuildOptions {
            levels: 3,
            brick_size: [32; 3],
            ..Default::default()
        },
    )?);
    let store: Arc<dyn BrickStore> = Arc::new(MemoryStore::new(h));
    let transport: Arc<dyn Transport> = Arc::new(InProcessTransport::new(store));
    let mapping = vec![0, 1];
    let channels = vec![
        ChannelSettings::new(
            0,
            TransferFunction::ramp(40.0, 200.0, [1.0, 0.7, 0.4], 0.3),
            3,
        ),
        ChannelSettings::new(
            1,
            TransferFunction::ramp(60.0, 220.0, [0.3, 0.8, 1.0], 0.5),
            3,
        ),
    ];
    let cam = Camera::orbit(2.0, 25.0, 40.0);
    let vol = BrickedVolume::from_transport(transport.as_ref(), &mapping)?;
    let out_dir = std::env::temp_dir().join("resoct-compare");
    std::fs::create_dir_all(&out_dir)?;

    for method in Method::ALL {
        let cfg = SessionConfig {
            method,
            mapping: mapping.clone(),
            check_invariants: false,
            ..Default::default()
        };
        let mut s = Session::new(transport.clone(), cfg.clone())?;
        let (out, frames) = s.run_until_converged(&cam, &channels, 60)?;
        let reference = render_reference(&vol, &cam, &channels, &cfg.render)?;
        let last = s.history().last().unwrap();
        println!(
            "{:<10} {frames:>3} frames, {:>5} bricks, {:>9} cache bytes, {:>9} traversal steps, identical to reference: {}",
            method.name(),
            last.required_bricks,
            last.cache_bytes,
            last.traversal_steps,
            out.image.bit_identical(&reference.image)
        );
        let path = out_dir.join(format!("{}.png", method.name()));
        std::fs::write(&path, out.image.to_png())?;
    }
    println!("images in {}", out_dir.display());
    Ok(())
}
