//! Train a tiny model on synthetic humanoids and save a checkpoint.
//!
//! `cargo run --release --example train_tiny -- [steps] [out_dir]`

use retarget::dataset::{synthesize, SynthConfig};
use retarget::model::ModelConfig;
use retarget::training::{TrainConfig, Trainer, TrainingData};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(40);
    let out = args.get(2).cloned().unwrap_or_else(|| std::env::temp_dir().join("retarget_train_tiny").display().to_string());
    let ds = synthesize(&SynthConfig { characters: 3, clips_per_kind: 1, frames: 32, ..Default::default() })?;
    let cfg =
        TrainConfig { steps, lr: 1e-3, window_length: 16, checkpoint_every: 0, model: ModelConfig::tiny(16, 2, 1), ..Default::default() };
    let data = TrainingData::from_motions(ds.training_pairs()?, cfg.window_length, cfg.stride())?;
    let mut trainer = Trainer::<f32>::new(cfg, data)?;
    trainer.run(out.as_ref(), |r| {
        if r.step % 10 == 0 {
            println!("step {:>4} total {:.4e} rec {:.4e} cyc {:.4e} root {:.4e}", r.step, r.l_total, r.l_rec, r.l_cyc, r.l_root);
        }
    })?;
    println!("checkpoint {out}/final.ckpt");
    Ok(())
}
