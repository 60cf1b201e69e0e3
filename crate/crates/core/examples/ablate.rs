//! Run the ablation matrix from a config file and print the table.
//!
//! `cargo run --release --example ablate -- [config.json] [out_dir]`

use retarget::eval::{run_ablation_matrix, AblationConfig};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let config = args.get(1).cloned().unwrap_or_else(|| concat!(env!("CARGO_MANIFEST_DIR"), "/configs/ablation_desk.json").into());
    let out = args.get(2).cloned().unwrap_or_else(|| std::env::temp_dir().join("retarget_ablation").display().to_string());
    let report = run_ablation_matrix(&AblationConfig::from_json_file(config.as_ref())?, out.as_ref(), |line| println!("{line}"))?;
    print!("{}", report.table());
    for (seed, won) in report.full_wins() {
        println!("seed {seed}: full config best {won}");
    }
    Ok(())
}
