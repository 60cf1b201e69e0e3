use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use retarget::bvh::{read_bvh, write_bvh, BvhDocument};
use retarget::dataset::{synthesize, Dataset, SynthConfig};
use retarget::eval::{evaluate_checkpoint, run_ablation_matrix, AblationConfig};
use retarget::training::{retarget, LoadedModel, Precision, TrainConfig, Trainer, TrainingData};
use retarget::{Error, Result};
use retarget_nn::Scalar;

#[derive(Parser)]
#[command(name = "retarget", version, about = "Motion retargeting across skeleton topologies")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Float {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Command {
    /// Print the hierarchy and motion summary of a BVH file.
    Parse {
        file: PathBuf,
        /// Only print the summary.
        #[arg(long)]
        summary: bool,
    },
    /// Generate a synthetic dataset with manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: PathBuf,
        /// Overrides the seed in the config.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train on a synthetic dataset, writing checkpoints and loss.csv.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Retarget a BVH clip onto another skeleton.
    Retarget {
        #[arg(long)]
        src: PathBuf,
        #[arg(long = "target-skeleton")]
        target_skeleton: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Float::F32)]
        precision: Float,
    },
    /// Evaluate a checkpoint on every split of a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value_t = Float::F32)]
        precision: Float,
    },
    /// Train and evaluate the ablation rows.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Parse { file, summary } => {
            let doc = read_bvh(&file)?;
            if !summary {
                let sk = &doc.skeleton;
                for (i, j) in sk.joints().iter().enumerate() {
                    let indent = "  ".repeat(sk.depth(i));
                    println!("{indent}{} [{:.4} {:.4} {:.4}]", j.name, j.offset.x, j.offset.y, j.offset.z);
                }
            }
            print!("{}", doc.summary());
        }
        Command::Synth { out, config, seed } => {
            let mut cfg = SynthConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = synthesize(&cfg)?;
            ds.write(&out)?;
            println!(
                "wrote {} characters, {} clips, {} training clips to {}",
                ds.manifest.characters.len(),
                ds.manifest.clips.len(),
                ds.manifest.train.len(),
                out.display()
            );
        }
        Command::Train { data, config, out, seed } => {
            let mut cfg = TrainConfig::from_json_file(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let ds = Dataset::load(&data)?;
            let windows = TrainingData::from_motions(ds.training_pairs()?, cfg.window_length, cfg.stride())?;
            match cfg.precision {
                Precision::F32 => train::<f32>(cfg, windows, &out)?,
                Precision::F64 => train::<f64>(cfg, windows, &out)?,
            }
        }
        Command::Retarget { src, target_skeleton, ckpt, out, seed, precision } => match precision {
            Float::F32 => retarget_file::<f32>(&src, &target_skeleton, &ckpt, &out, seed)?,
            Float::F64 => retarget_file::<f64>(&src, &target_skeleton, &ckpt, &out, seed)?,
        },
        Command::Eval { ckpt, data, report, seed, precision } => {
            let ds = Dataset::load(&data)?;
            let rep = match precision {
                Float::F32 => evaluate_checkpoint::<f32>(&ckpt, &ds, seed)?,
                Float::F64 => evaluate_checkpoint::<f64>(&ckpt, &ds, seed)?,
            };
            write_json(&report, &rep)?;
            print!("{}", rep.table());
        }
        Command::Ablate { config, out } => {
            let cfg = AblationConfig::from_json_file(&config)?;
            let rep = run_ablation_matrix(&cfg, &out, |line| info!("{line}"))?;
            write_json(&out.join("ablation.json"), &rep)?;
            print!("{}", rep.table());
        }
    }
    Ok(())
}

fn train<F: Scalar>(cfg: TrainConfig, data: TrainingData, out: &Path) -> Result<()> {
    let mut trainer = Trainer::<F>::new(cfg, data)?;
    trainer.run(out, |r| {
        if r.step % 10 == 0 {
            info!("step {} l_total {:.5e} l_rec {:.5e} l_cyc {:.5e} l_root {:.5e}", r.step, r.l_total, r.l_rec, r.l_cyc, r.l_root);
        }
    })?;
    Ok(())
}

fn retarget_file<F: Scalar>(src: &Path, target: &Path, ckpt: &Path, out: &Path, seed: u64) -> Result<()> {
    let loaded = LoadedModel::<F>::load(ckpt)?;
    let source = read_bvh(src)?;
    let target = read_bvh(target)?.skeleton;
    let motion = retarget(&loaded.model, &loaded.store, &source.skeleton, &source.motion, &target, loaded.meta.window_length, seed)?;
    fs::write(out, write_bvh(&BvhDocument::from_motion(target, motion)?))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(Error::from)
}
