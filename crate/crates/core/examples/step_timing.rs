//! Time training steps for a given attention layout.
//!
//! `cargo run --release --example step_timing -- [full|factorized] [steps]`

use std::time::Instant;

use retarget::model::AttentionLayout;
use retarget::synth::{generate_humanoid, generate_motion, HumanoidParams, MotionKind, NamingStyle};
use retarget::training::{TrainConfig, Trainer, TrainingData};

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let layout = match args.get(1).map(String::as_str) {
        Some("factorized") => AttentionLayout::Factorized,
        _ => AttentionLayout::Full,
    };
    let steps: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(3);

    let mut pairs = Vec::new();
    for c in 0..4u64 {
        let sk = generate_humanoid(&HumanoidParams::default(), NamingStyle::ALL[c as usize % 3], c)?;
        for (k, kind) in MotionKind::ALL.into_iter().enumerate() {
            let m = generate_motion(&sk, kind, 64, 30.0, 10 * c + k as u64)?;
            pairs.push((sk.clone(), m));
        }
    }
    let data = TrainingData::from_motions(pairs.iter().map(|(s, m)| (s, m)), 64, 64)?;
    let mut cfg = TrainConfig::default();
    cfg.model.encoder.attention = layout;
    cfg.model.decoder.attention = layout;
    let mut trainer = Trainer::<f32>::new(cfg, data)?;
    println!("{layout:?}: {} parameters", trainer.store.num_scalars());
    for _ in 0..steps {
        let t = Instant::now();
        let rec = trainer.train_step()?;
        println!("step {} {:.2}s total {:.4e}", rec.step, t.elapsed().as_secs_f64(), rec.l_total);
    }
    Ok(())
}
