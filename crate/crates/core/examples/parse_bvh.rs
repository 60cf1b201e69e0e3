//! Parse a BVH file, print its hierarchy, and write it back out.
//!
//! `cargo run --example parse_bvh -- [file.bvh]`

use retarget::bvh::{parse_bvh, read_bvh, write_bvh};

fn main() -> anyhow::Result<()> {
    let path = std::env::args().nth(1).unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/tests/fixtures/xyz_order.bvh").into());
    let doc = read_bvh(&path)?;
    let sk = &doc.skeleton;
    for (i, j) in sk.joints().iter().enumerate() {
        println!("{}{}", "  ".repeat(sk.depth(i)), j.name);
    }
    print!("{}", doc.summary());
    let again = parse_bvh(&write_bvh(&doc))?;
    println!("round trip keeps topology: {}", again.skeleton.topology() == sk.topology());
    Ok(())
}
