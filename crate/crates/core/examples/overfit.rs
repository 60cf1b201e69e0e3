//! Overfit a small synthetic set and report reconstruction error as training proceeds.
//!
//! `cargo run --release --example overfit -- [steps] [lr] [eval_every] [full|factorized] [dim] [layers] [window]`

use std::time::Instant;

use retarget::model::AttentionLayout;
use retarget::skeleton::Motion;
use retarget::synth::{generate_humanoid, generate_motion, HumanoidParams, MotionKind, NamingStyle};
use retarget::training::{position_mse, retarget, TrainConfig, Trainer, TrainingData};

fn main() -> anyhow::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize| args.get(i).map(String::as_str);
    let steps: u64 = arg(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let lr: f64 = arg(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let every: u64 = arg(3).and_then(|s| s.parse().ok()).unwrap_or(25);
    let layout = match arg(4) {
        Some("full") => AttentionLayout::Full,
        _ => AttentionLayout::Factorized,
    };
    let dim: usize = arg(5).and_then(|s| s.parse().ok()).unwrap_or(64);
    let layers: usize = arg(6).and_then(|s| s.parse().ok()).unwrap_or(4);
    let window: usize = arg(7).and_then(|s| s.parse().ok()).unwrap_or(64);

    let mut clips = Vec::new();
    for c in 0..4u64 {
        let sk = generate_humanoid(&HumanoidParams::default(), NamingStyle::ALL[c as usize % 3], c)?;
        for (k, kind) in MotionKind::ALL.into_iter().enumerate() {
            clips.push((sk.clone(), generate_motion(&sk, kind, window, 30.0, 10 * c + k as u64)?));
        }
    }
    let mut baseline = 0.0;
    for (sk, m) in &clips {
        let rest = Motion::rest(sk.len(), m.frame_count(), m.root_positions()[0].into(), m.fps())?;
        baseline += position_mse(sk, &rest, m)?;
    }
    println!("rest-pose baseline mse {:.4e}", baseline / clips.len() as f64);

    let data = TrainingData::from_motions(clips.iter().map(|(s, m)| (s, m)), window, window)?;
    let mut cfg = TrainConfig { lr, steps, window_length: window, ..Default::default() };
    cfg.model.encoder.attention = layout;
    cfg.model.decoder.attention = layout;
    cfg.model.encoder.dim = dim;
    cfg.model.decoder.dim = dim;
    cfg.model.encoder.temporal_layers = layers;
    cfg.model.decoder.layers = layers;
    let mut trainer = Trainer::<f32>::new(cfg, data)?;

    let start = Instant::now();
    let mut first_cyc = None;
    while trainer.step < steps {
        let rec = trainer.train_step()?;
        let first = *first_cyc.get_or_insert(rec.l_cyc);
        if trainer.step % every == 0 || trainer.step == steps {
            let (mut mse, mut rot_only) = (0.0, 0.0);
            for (sk, m) in &clips {
                let out = retarget(&trainer.model, &trainer.store, sk, m, sk, window, 0)?;
                mse += position_mse(sk, &out, m)?;
                let fixed_root = Motion::new(m.root_positions().to_vec(), out.rotations().to_vec(), m.fps())?;
                rot_only += position_mse(sk, &fixed_root, m)?;
            }
            println!(
                "step {:>5} {:>7.1}s l_rec {:.4e} l_cyc {:.4e} ({:.1}% of start) l_root {:.4e} recon mse {:.4e} (true root {:.4e})",
                trainer.step,
                start.elapsed().as_secs_f64(),
                rec.l_rec,
                rec.l_cyc,
                100.0 * rec.l_cyc / first,
                rec.l_root,
                mse / clips.len() as f64,
                rot_only / clips.len() as f64
            );
        }
    }
    Ok(())
}
