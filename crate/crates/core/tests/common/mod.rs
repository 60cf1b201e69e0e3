#![allow(dead_code)]

use nalgebra::{Matrix3, Matrix4, UnitQuaternion, Vector3, Vector4};
use rand::Rng;
use retarget::matrix_to_rotation6d;
use retarget::skeleton::{JointSpec, Motion, Skeleton};

pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    let q = Vector4::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let q = if q.norm() < 1e-3 { Vector4::new(0.0, 0.0, 0.0, 1.0) } else { q };
    UnitQuaternion::from_quaternion(nalgebra::Quaternion::from(q)).to_rotation_matrix().into_inner()
}

/// A random tree in topological order with `n` joints.
pub fn random_skeleton<R: Rng>(rng: &mut R, n: usize) -> Skeleton {
    let joints = (0..n)
        .map(|i| {
            let parent = (i > 0).then(|| rng.gen_range(0..i));
            let offset = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            JointSpec::new(format!("j{i}"), parent, offset)
        })
        .collect();
    Skeleton::new("random", joints).unwrap()
}

pub fn random_motion<R: Rng>(rng: &mut R, n: usize, frames: usize) -> Motion {
    let root = (0..frames).map(|_| Vector3::new(rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0))).collect();
    let rots = (0..frames).map(|_| (0..n).map(|_| matrix_to_rotation6d(&random_rotation(rng)).unwrap()).collect()).collect();
    Motion::new(root, rots, 30.0).unwrap()
}

/// Global positions from products of homogeneous transforms along each root path.
pub fn fk_oracle(skeleton: &Skeleton, motion: &Motion) -> Vec<Vec<Vector3<f64>>> {
    let homogeneous = |r: &Matrix3<f64>, t: &Vector3<f64>| {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(r);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(t);
        m
    };
    (0..motion.frame_count())
        .map(|f| {
            (0..skeleton.len())
                .map(|j| {
                    let mut path = vec![j];
                    while let Some(p) = skeleton.parent(*path.last().unwrap()) {
                        path.push(p);
                    }
                    let mut m = Matrix4::identity();
                    for &k in path.iter().rev() {
                        let r = motion.rotation(f, k).to_matrix().unwrap();
                        let t = match skeleton.parent(k) {
                            None => motion.root_positions()[f],
                            Some(_) => skeleton.joint(k).offset,
                        };
                        // Offsets live in the parent's frame, so translate before this joint rotates.
                        m *= homogeneous(&Matrix3::identity(), &t) * homogeneous(&r, &Vector3::zeros());
                    }
                    (m * Vector4::new(0.0, 0.0, 0.0, 1.0)).xyz()
                })
                .collect()
        })
        .collect()
}

/// Two 10-joint humanoids with different names and proportions.
pub fn ten_joint_pair() -> (Skeleton, Skeleton) {
    let build = |names: [&str; 10], s: f64| {
        let parents = [None, Some(0), Some(1), Some(0), Some(0), Some(3), Some(4), Some(1), Some(1), Some(2)];
        let offsets = [
            [0.0, 1.0, 0.0],
            [0.0, 0.25, 0.0],
            [0.0, 0.25, 0.0],
            [0.1, -0.05, 0.0],
            [-0.1, -0.05, 0.0],
            [0.0, -0.45, 0.0],
            [0.0, -0.45, 0.0],
            [0.2, 0.2, 0.0],
            [-0.2, 0.2, 0.0],
            [0.0, 0.2, 0.0],
        ];
        let joints = (0..10).map(|i| JointSpec::new(names[i], parents[i], offsets[i].map(|v| v * s))).collect();
        Skeleton::new(names[0], joints).unwrap()
    };
    (
        build(["Hips", "Spine", "Neck", "LeftUpLeg", "RightUpLeg", "LeftLeg", "RightLeg", "LeftArm", "RightArm", "Head"], 1.0),
        build(["pelvis", "spine_01", "neck_01", "thigh_l", "thigh_r", "calf_l", "calf_r", "upperarm_l", "upperarm_r", "head"], 1.2),
    )
}

/// Finite-difference check of the full weighted loss on a tiny model and two
/// 10-joint skeletons, in both retargeting directions.
pub fn tiny_total_loss_check(per_param: Option<usize>) -> retarget_nn::GradCheckReport {
    use rand::SeedableRng;
    use retarget::model::{decoder_noise, motion_features, Mode, Model, ModelConfig};
    use retarget::synth::{generate_motion, MotionKind};
    use retarget::training::{pair_losses, LossNormalizers, LossOptions, LossWeights, PairBatch};
    use retarget_nn::{Ctx, ParamStore};

    let (a, b) = ten_joint_pair();
    let mut cfg = ModelConfig::tiny(16, 2, 1);
    cfg.decoder.dropout = 0.0;
    let mut store = ParamStore::<f64>::new();
    let model = Model::new(cfg, &mut store, 7).unwrap();
    let infos = vec![model.prepare(&a).unwrap(), model.prepare(&b).unwrap()];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let mut batches = Vec::new();
    for (src, tgt) in [(0usize, 1usize), (1, 0)] {
        let sk = if src == 0 { &a } else { &b };
        let m = generate_motion(sk, MotionKind::Composite, 8, 30.0, src as u64).unwrap();
        let input = motion_features::<f64>(&infos[src], &[&m], true).unwrap();
        batches.push(PairBatch {
            source: src,
            target: tgt,
            input,
            noise_rec: decoder_noise(8, 1, infos[src].joint_count(), &mut rng),
            noise_ret: decoder_noise(8, 1, infos[tgt].joint_count(), &mut rng),
            fps: 30.0,
        });
    }
    let norms = LossNormalizers::for_batch(&batches, &infos, model.config().tokens(), 16);
    let opts = LossOptions { weights: LossWeights::default(), stop_gradient: false, use_positions: true };
    retarget_nn::grad_check_params(
        &store,
        |g, s| {
            let ctx = Ctx::new(g, s);
            let mode = Mode::eval();
            let mut total = None;
            for batch in &batches {
                let t = pair_losses(&ctx, &model, &infos, batch, &norms, &opts, &mode)
                    .map_err(|e| retarget_nn::NnError::Invalid(e.to_string()))?
                    .total;
                total = Some(match total {
                    None => t,
                    Some(acc) => t.add(acc)?,
                });
            }
            Ok(total.expect("two batches"))
        },
        per_param,
    )
    .unwrap()
}
