//! Runs a session behind the WebSocket protocol and drives it with a
//! scripted client: orbit the camera, then swap a channel.

use std::net::TcpListener;
use std::sync::Arc;
use std::time::Duration;

use resoct::render::{Camera, ChannelSettings};
use resoct::service::{InProcessTransport, Transport};
use resoct::session::protocol::{
    serve, ClientMessage, ProtocolClient, ServerMessage, ViewState, WireChannel,
};
use resoct::session::{Session, SessionConfig};
use resoct::transfer::TransferFunction;
use resoct::volume::{BrickStore, BuildOptions, Hierarchy, MemoryStore};

fn drain(c: &mut ProtocolClient) -> resoct::Result<usize> {
    let mut frames = 0;
    while let Some(msg) = c.recv_timeout(Duration::from_secs(2))? {
        match msg {
            ServerMessage::Frame { .. } => frames += 1,
            ServerMessage::Stats {
                frame_id,
                required_bricks,
                cache_bytes,
                ..
            } => {
                println!("  frame {frame_id}: {required_bricks} bricks, {cache_bytes} cache bytes")
            }
            other => println!("  {other:?}"),
        }
    }
    Ok(frames)
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = resoct::synth::shell_vessels(64, 3, 2);
    let h = Hierarchy::build(
        &raw,
        &BuildOptions {
            levels: 3,
            brick_size: [16; 3],
            ..Default::default()
        },
    )?;
    let store: Arc<dyn BrickStore> = Arc::new(MemoryStore::new(Arc::new(h)));
    let transport: Arc<dyn Transport> = Arc::new(InProcessTransport::new(store));
    let cfg = SessionConfig {
        mapping: vec![0],
        check_invariants: false,
        ..Default::default()
    };
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr().unwrap();
    let engine = std::thread::spawn(move || -> resoct::Result<()> {
        let mut session = Session::new(transport, cfg)?;
        let tf = TransferFunction::ramp(30.0, 220.0, [1.0, 0.8, 0.6], 0.4);
        let mut view = ViewState {
            camera: Camera::orbit(2.0, 20.0, 0.0),
            channels: vec![ChannelSettings::new(0, tf, 3)],
        };
        serve(listener, &mut session, &mut view, Some(1))
    });

    let mut c = ProtocolClient::connect(addr)?;
    println!("{:?}", c.recv()?);
    println!("initial view: {} frames", drain(&mut c)?);
    for az in [45.0, 90.0] {
        c.send(&ClientMessage::camera(&Camera::orbit(2.0, 20.0, az)))?;
        println!("azimuth {az}: {} frames", drain(&mut c)?);
    }
    c.send(&ClientMessage::SetChannels {
        channels: vec![WireChannel {
            slot: 0,
            dataset_channel: 2,
            tf_control_points: TransferFunction::ramp(50.0, 200.0, [0.4, 1.0, 0.5], 0.5),
            level_range: [0, 2],
            importance: 0,
        }],
    })?;
    println!("after swapping to channel 2: {} frames", drain(&mut c)?);
    c.close()?;
    engine.join().unwrap()?;
    Ok(())
}
