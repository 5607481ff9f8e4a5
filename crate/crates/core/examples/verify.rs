//! Ingests a small volume and runs the verification suite over it.

use resoct::cli::verify_dataset;
use resoct::session::SessionConfig;
use resoct::volume::{BuildOptions, Hierarchy};

fn main() -> resoct::Result<()> {
    let raw = resoct::synth::shell_vessels(48, 2, 4);
    let h = Hierarchy::build(
        &raw,
        &BuildOptions {
            levels: 3,
            brick_size: [16; 3],
            ..Default::default()
        },
    )?;
    let dir = std::env::temp_dir().join("resoct-verify-example");
    h.write(&dir)?;
    let mut base = SessionConfig {
        check_invariants: false,
        ..Default::default()
    };
    base.render.width = 48;
    base.render.height = 48;
    let results = verify_dataset(&dir, 4, 1, &base);
    for r in &results {
        println!("{r}");
    }
    if results.iter().any(|r| !r.passed) {
        std::process::exit(1);
    }
    Ok(())
}
