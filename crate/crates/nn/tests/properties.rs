use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use retarget_nn::{attention_pool, Graph, Tensor};

fn pooled(tokens: &Tensor<f64>, queries: &Tensor<f64>, valid: &[bool]) -> Tensor<f64> {
    let g = Graph::new();
    let z = attention_pool(g.constant(tokens.clone()), g.constant(queries.clone()), Some(valid)).unwrap();
    let v = z.value().clone();
    v
}

proptest! {
    #[test]
    fn pooling_ignores_masked_padding(seed in 0u64..1000, n in 1usize..6, pad in 1usize..4, m in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 4;
        let tokens = Tensor::<f64>::uniform(&[2, n, d], -2.0, 2.0, &mut rng);
        let queries = Tensor::<f64>::uniform(&[m, d], 0.0, 1.0, &mut rng);
        let base = pooled(&tokens, &queries, &vec![true; 2 * n]);

        let mut padded = Vec::new();
        let mut valid = Vec::new();
        for row in tokens.data().chunks(n * d) {
            padded.extend_from_slice(row);
            padded.extend(std::iter::repeat_n(0.0, pad * d));
            valid.extend(std::iter::repeat_n(true, n));
            valid.extend(std::iter::repeat_n(false, pad));
        }
        let padded = Tensor::new(&[2, n + pad, d], padded).unwrap();
        let out = pooled(&padded, &queries, &valid);
        prop_assert!(out.max_abs_diff(&base) < 1e-6);
    }

    #[test]
    fn pooling_is_permutation_invariant(seed in 0u64..1000, n in 2usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 3;
        let tokens = Tensor::<f64>::uniform(&[1, n, d], -1.0, 1.0, &mut rng);
        let queries = Tensor::<f64>::uniform(&[2, d], 0.0, 1.0, &mut rng);
        let mut rows: Vec<&[f64]> = tokens.data().chunks(d).collect();
        rows.reverse();
        let reversed = Tensor::new(&[1, n, d], rows.concat()).unwrap();
        let a = pooled(&tokens, &queries, &vec![true; n]);
        let b = pooled(&reversed, &queries, &vec![true; n]);
        prop_assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn masked_softmax_rows_sum_to_one(seed in 0u64..1000, n in 1usize..8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::<f64>::uniform(&[3, n], -5.0, 5.0, &mut rng);
        let mask: Vec<bool> = (0..3 * n).map(|i| i % n != 0 && (i * 7 + seed as usize).is_multiple_of(3)).collect();
        let g = Graph::new();
        let y = g.constant(x).masked_fill(&mask, &[3, n]).unwrap().softmax().unwrap();
        for row in y.value().data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
