//! Retarget a clip onto a split-joint variant and score it against the exact answer.
//!
//! `cargo run --release --example retarget_clip -- [checkpoint]`
//!
//! Without a checkpoint an untrained tiny model is used.

use retarget::model::{Model, ModelConfig};
use retarget::synth::{
    generate_humanoid, generate_motion, joints_with_roles, paired_variant, HumanoidParams, MotionKind, NamingStyle, Role, VariantTransform,
};
use retarget::training::{position_mse, retarget, LoadedModel};
use retarget_nn::ParamStore;

fn main() -> anyhow::Result<()> {
    let (model, store, window) = match std::env::args().nth(1) {
        Some(path) => {
            let l = LoadedModel::<f32>::load(path.as_ref())?;
            (l.model, l.store, l.meta.window_length)
        }
        None => {
            let mut store = ParamStore::new();
            (Model::new(ModelConfig::tiny(16, 2, 1), &mut store, 0)?, store, 16)
        }
    };
    let sk = generate_humanoid(&HumanoidParams::default(), NamingStyle::Camel, 0)?;
    let motion = generate_motion(&sk, MotionKind::Wave, 2 * window, 30.0, 1)?;
    let split = VariantTransform::Split { joints: joints_with_roles(&sk, &[Role::ForeArm]), ratio: 0.5 };
    let (variant, truth) = paired_variant(&sk, &motion, &split)?;
    let out = retarget(&model, &store, &sk, &motion, &variant, window, 0)?;
    println!("{} joints -> {} joints, {} frames", sk.len(), variant.len(), out.frame_count());
    println!("height-normalized mse against ground truth {:.4e}", position_mse(&variant, &out, &truth)?);
    Ok(())
}
