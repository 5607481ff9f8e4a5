//! Builds a synthetic two-channel volume, writes it to disk and reads a
//! brick back.

use resoct::volume::{decompress_brick, BrickStore, BuildOptions, DiskStore, Hierarchy};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let raw = resoct::synth::shell_vessels(64, 2, 3);
    let opts = BuildOptions {
        levels: 3,
        brick_size: [16; 3],
        ..Default::default()
    };
    let h = Hierarchy::build(&raw, &opts)?;
    let dir = std::env::temp_dir().join("resoct-ingest-example");
    h.write(&dir)?;

    let store = DiskStore::open(&dir)?;
    let m = store.manifest();
    for (l, lvl) in m.levels.iter().enumerate() {
        println!(
            "level {l}: dims {:?}, bricks {:?}",
            lvl.dims, lvl.brick_grid
        );
    }
    let bytes = store.brick_bytes(1, 0, [1, 1, 1])?;
    let voxels = decompress_brick(&bytes, m.brick_voxels())?;
    println!(
        "brick c1/l0/1_1_1: {} bytes compressed, {} voxels, max {}",
        bytes.len(),
        voxels.len(),
        voxels.iter().max().unwrap()
    );
    println!("written to {}", dir.display());
    Ok(())
}
