//! Randomized invariants for the commentary families and supporting
//! machinery.

use commentary_core::commentary::{blend_lambdas, example_weights, gaussian_mask_batch};
use commentary_core::models::{init_params, Activation, MlpSpec, OutputHead};
use commentary_core::param::{ParamVector, PhiValues};
use commentary_core::tensor::Tape;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn phi_flatten_round_trips(values in prop::collection::vec(-1e3f64..1e3, 1..40)) {
        let n = values.len();
        let phi = PhiValues::from_flat(vec![vec![n]], &values).unwrap();
        prop_assert_eq!(phi.flatten(), values.clone());
        let tape = Tape::new();
        let p = phi.leaves(&tape).unwrap();
        prop_assert_eq!(ParamVector::new(p.tensors).flatten(), values);
    }

    #[test]
    fn teacher_weights_stay_in_the_unit_interval(
        seed in 0u64..1000,
        inputs in prop::collection::vec(-5.0f64..5.0, 8),
        iteration in 0usize..100,
    ) {
        let teacher = MlpSpec::new(
            vec![5, 4, 1],
            Activation::Relu,
            OutputHead::SigmoidScalar,
        ).unwrap();
        let tape = Tape::new();
        let phi = init_params(&teacher, seed, &tape).unwrap();
        let x = tape.leaf(inputs, &[2, 4]).unwrap();
        let w = example_weights(&teacher, &phi, &x, iteration, 100).unwrap();
        prop_assert_eq!(w.shape(), vec![2]);
        for v in w.values().iter() {
            prop_assert!(*v > 0.0 && *v < 1.0);
        }
    }

    #[test]
    fn lambdas_stay_in_their_half_open_band(
        grid in prop::collection::vec(-30.0f64..30.0, 9),
        a in 0usize..3,
        b in 0usize..3,
    ) {
        let tape = Tape::new();
        let g = tape.leaf(grid, &[3, 3]).unwrap();
        let l = blend_lambdas(&g, &[(a, b)], 3).unwrap();
        let v = l.values()[0];
        prop_assert!((0.5..=1.0).contains(&v), "lambda {}", v);
    }

    #[test]
    fn shuffling_the_grid_permutes_the_lambda_multiset(
        grid in prop::collection::vec(-5.0f64..5.0, 4),
        swap in any::<bool>(),
    ) {
        // A shuffled grid must yield the same multiset of lambdas over
        // all label pairs (the ablation changes assignment, not values).
        let all_pairs: Vec<(usize, usize)> =
            (0..2).flat_map(|i| (0..2).map(move |j| (i, j))).collect();
        let tape = Tape::new();
        let g1 = tape.leaf(grid.clone(), &[2, 2]).unwrap();
        let mut shuffled = grid.clone();
        if swap {
            shuffled.swap(0, 3);
            shuffled.swap(1, 2);
        }
        let g2 = tape.leaf(shuffled, &[2, 2]).unwrap();
        let mut l1 = blend_lambdas(&g1, &all_pairs, 2).unwrap().values().to_vec();
        let mut l2 = blend_lambdas(&g2, &all_pairs, 2).unwrap().values().to_vec();
        l1.sort_by(f64::total_cmp);
        l2.sort_by(f64::total_cmp);
        prop_assert_eq!(l1, l2);
    }

    #[test]
    fn gaussian_masks_are_positive_and_bounded(
        cy in -4.0f64..12.0,
        cx in -4.0f64..12.0,
        sigma in 0.5f64..5.0,
    ) {
        let tape = Tape::new();
        let c = tape.leaf(vec![cy, cx], &[1, 2]).unwrap();
        let m = gaussian_mask_batch(&c, sigma, 8, 8).unwrap();
        for v in m.values().iter() {
            prop_assert!(*v > 0.0 && *v <= 1.0);
        }
    }

    #[test]
    fn random_op_chains_replay_bit_exactly(
        xs in prop::collection::vec(0.1f64..2.0, 6),
        ops in prop::collection::vec(0u8..5, 1..8),
    ) {
        let tape = Tape::new();
        let mut t = tape.leaf(xs, &[6]).unwrap();
        for op in ops {
            t = match op {
                0 => t.sigmoid(),
                1 => t.tanh(),
                2 => t.exp().scale(0.5),
                3 => t.add_scalar(0.25).sqrt(),
                _ => t.mul(&t).unwrap().add_scalar(0.1).log(),
            };
        }
        let _ = t.sum();
        prop_assert!(tape.replay_is_deterministic());
    }
}
