//! Score a checkpoint on every split of a synthetic dataset.
//!
//! `cargo run --release --example evaluate -- <checkpoint> <dataset_dir>`

use retarget::dataset::Dataset;
use retarget::eval::evaluate_checkpoint;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    anyhow::ensure!(args.len() == 3, "usage: evaluate <checkpoint> <dataset_dir>");
    let ds = Dataset::load(args[2].as_ref())?;
    let report = evaluate_checkpoint::<f32>(args[1].as_ref(), &ds, 0)?;
    print!("{}", report.table());
    Ok(())
}
