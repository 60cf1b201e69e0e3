//! Generate a small synthetic dataset and list its evaluation splits.
//!
//! `cargo run --example synth_dataset -- [out_dir]`

use retarget::dataset::{synthesize, SynthConfig};

fn main() -> anyhow::Result<()> {
    let cfg = SynthConfig { characters: 4, clips_per_kind: 1, frames: 48, ..Default::default() };
    let ds = synthesize(&cfg)?;
    for c in &ds.manifest.characters {
        println!("{:<12} joints {:>2} seen {}", c.name, c.joints, c.seen);
    }
    for s in &ds.manifest.splits {
        println!("split {:<24} {} cases", s.tag.name(), s.cases.len());
    }
    if let Some(out) = std::env::args().nth(1) {
        ds.write(out.as_ref())?;
        println!("wrote {out}");
    }
    Ok(())
}
