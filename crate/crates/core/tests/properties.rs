mod common;

use common::{fk_oracle, random_motion, random_rotation, random_skeleton};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retarget::bvh::{merge_joint_chain, parse_bvh, split_joint, write_bvh, BvhDocument};
use retarget::grouping::{classify_joints, KeywordTable, Part};
use retarget::skeleton::Rotation6D;
use retarget::synth::{generate_humanoid, generate_motion, HumanoidParams, MotionKind, NamingStyle};
use retarget::{forward_kinematics, matrix_to_rotation6d, rotation6d_to_matrix};

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fk_matches_transform_products(seed in any::<u64>(), n in 1usize..=12, frames in 1usize..4) {
        let mut r = rng(seed);
        let sk = random_skeleton(&mut r, n);
        let m = random_motion(&mut r, n, frames);
        let fk = forward_kinematics(&sk, &m).unwrap();
        for (a, b) in fk.iter().flatten().zip(fk_oracle(&sk, &m).iter().flatten()) {
            prop_assert!((a - b).amax() < 1e-9);
        }
    }

    #[test]
    fn rotation_round_trip(seed in any::<u64>()) {
        let m = random_rotation(&mut rng(seed));
        let back = rotation6d_to_matrix(&matrix_to_rotation6d(&m).unwrap()).unwrap();
        prop_assert!((back - m).amax() < 1e-9);
        prop_assert!((back.transpose() * back - nalgebra::Matrix3::identity()).amax() < 1e-9);
        prop_assert!((back.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn gram_schmidt_output_is_a_rotation(a in prop::array::uniform3(-5.0f64..5.0), b in prop::array::uniform3(-5.0f64..5.0)) {
        let ra = nalgebra::Vector3::from(a);
        let rb = nalgebra::Vector3::from(b);
        prop_assume!(ra.norm() > 1e-3 && ra.cross(&rb).norm() > 1e-3);
        let m = Rotation6D::new(a, b).to_matrix().unwrap();
        prop_assert!((m.transpose() * m - nalgebra::Matrix3::identity()).amax() < 1e-9);
        prop_assert!((m.determinant() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn split_keeps_fk_and_merge_undoes_it(seed in any::<u64>(), n in 2usize..=10, ratio in 0.01f64..0.99) {
        let mut r = rng(seed);
        let sk = random_skeleton(&mut r, n);
        let m = random_motion(&mut r, n, 3);
        let joint = 1 + (seed as usize % (n - 1));
        let (ssk, sm) = split_joint(&sk, &m, joint, ratio).unwrap();
        let before = forward_kinematics(&sk, &m).unwrap();
        let after = forward_kinematics(&ssk, &sm).unwrap();
        for (f0, f1) in before.iter().zip(&after) {
            for (j, p) in f0.iter().enumerate() {
                let k = if j >= joint { j + 1 } else { j };
                prop_assert!((p - f1[k]).amax() < 1e-9);
            }
        }
        let (msk, mm) = merge_joint_chain(&ssk, &sm, &[joint, joint + 1]).unwrap();
        prop_assert_eq!(msk.topology(), sk.topology());
        for (a, b) in before.iter().flatten().zip(forward_kinematics(&msk, &mm).unwrap().iter().flatten()) {
            prop_assert!((a - b).amax() < 1e-6);
        }
    }

    #[test]
    fn bvh_round_trip_of_random_skeletons(seed in any::<u64>(), n in 1usize..=12, frames in 1usize..5) {
        let mut r = rng(seed);
        let sk = random_skeleton(&mut r, n);
        let m = random_motion(&mut r, n, frames);
        let first = parse_bvh(&write_bvh(&BvhDocument::from_motion(sk, m).unwrap())).unwrap();
        let second = parse_bvh(&write_bvh(&first)).unwrap();
        prop_assert_eq!(first.skeleton.topology(), second.skeleton.topology());
        let (a, b) = (&first.motion, &second.motion);
        for t in 0..a.frame_count() {
            prop_assert!((a.root_positions()[t] - b.root_positions()[t]).amax() < 1e-4);
            for j in 0..a.joint_count() {
                let d = a.rotation(t, j).to_matrix().unwrap() - b.rotation(t, j).to_matrix().unwrap();
                prop_assert!(d.amax() < 1e-4);
            }
        }
    }

    #[test]
    fn humanoid_grouping_covers_every_joint(seed in 0u64..500, style in 0usize..3, lo in 1usize..4, extra in 0usize..3) {
        let params = HumanoidParams { spine: [lo, lo + extra], ..Default::default() };
        let sk = generate_humanoid(&params, NamingStyle::ALL[style], seed).unwrap();
        let g = classify_joints(&sk, &KeywordTable::default()).unwrap();
        let mut seen = vec![0usize; sk.len()];
        for part in Part::ALL {
            prop_assert!(!g.group(part).is_empty(), "{:?}", part);
            for &j in g.group(part) {
                seen[j] += 1;
            }
        }
        let shared: Vec<usize> = g.shared().iter().map(|s| s.0).collect();
        for (j, c) in seen.iter().enumerate() {
            let expected = 1 + shared.iter().filter(|&&s| s == j).count();
            prop_assert_eq!(*c, expected, "joint {}", sk.joint(j).name.clone());
        }
    }

    #[test]
    fn synthetic_motion_is_finite(seed in 0u64..200, kind in 0usize..4) {
        let sk = generate_humanoid(&HumanoidParams::default(), NamingStyle::Camel, seed).unwrap();
        let m = generate_motion(&sk, MotionKind::ALL[kind], 16, 30.0, seed).unwrap();
        for p in forward_kinematics(&sk, &m).unwrap().iter().flatten() {
            prop_assert!(p.iter().all(|v| v.is_finite()));
        }
    }
}
