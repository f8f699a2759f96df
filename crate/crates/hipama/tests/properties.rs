//! Property tests for the numeric invariants that hold for all inputs,
//! not just the hand-picked cases.

use proptest::prelude::*;

use hipama::data::{generate_synthetic, make_batches, scale_label, unscale_label, Batch};
use hipama::model::{Hipama, Mode, ModelConfig, PredictionSet};
use hipama::tensor::Tensor;

fn small_model() -> Hipama {
    Hipama::new(ModelConfig {
        width: 8,
        heads: 2,
        ..ModelConfig::default()
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_normalized_and_non_negative(
        rows in 1usize..5,
        cols in 1usize..7,
        values in prop::collection::vec(-30.0f64..30.0, 1..35),
    ) {
        prop_assume!(values.len() >= rows * cols);
        let data: Vec<f64> = values[..rows * cols].to_vec();
        let s = Tensor::new(data, &[rows, cols]).softmax(1);
        let out = s.to_vec();
        for r in 0..rows {
            let row = &out[r * cols..(r + 1) * cols];
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12, "row sum {}", sum);
        }
    }

    #[test]
    fn label_scaling_round_trips_on_grid(k in 0u32..=2560) {
        let raw = k as f64 / 256.0;
        prop_assert_eq!(unscale_label(scale_label(raw)), raw);
    }

    #[test]
    fn batching_preserves_the_multiset_of_ids(
        n in 2usize..30,
        batch_size in 1usize..9,
        seed in 0u64..1000,
    ) {
        let (samples, _) = generate_synthetic(n, 77, 0.0);
        let batches = make_batches(&samples, batch_size, Some(seed), 42, 50).unwrap();
        let mut seen: Vec<String> = batches.iter().flat_map(|b| b.utt_ids.clone()).collect();
        let mut expected: Vec<String> = samples.iter().map(|s| s.utt_id.clone()).collect();
        seen.sort();
        expected.sort();
        prop_assert_eq!(seen, expected);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn padding_never_changes_real_outputs(
        n in 1usize..4,
        seed in 0u64..50,
        extra in 1usize..9,
    ) {
        let model = small_model();
        let (samples, _) = generate_synthetic(n, seed, 0.2);
        let base = Batch::from_samples(&samples, 42, 50, None).unwrap();
        let padded = Batch::from_samples(&samples, 42, 50, Some(base.t_len + extra)).unwrap();
        let a = PredictionSet::from_output(&model.forward(&base, Mode::Eval), &base);
        let b = PredictionSet::from_output(&model.forward(&padded, Mode::Eval), &padded);
        for (bi, &len) in base.lengths.iter().enumerate() {
            for t in 0..len {
                let d = (a.phoneme_scores[bi * base.t_len + t]
                    - b.phoneme_scores[bi * padded.t_len + t])
                    .abs();
                prop_assert!(d <= 1e-12, "phoneme delta {}", d);
            }
        }
        for ((_, wa), (_, wb)) in a.word_scores.iter().zip(&b.word_scores) {
            for (x, y) in wa.iter().zip(wb) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
        for ((_, ua), (_, ub)) in a.utt_scores.iter().zip(&b.utt_scores) {
            for (x, y) in ua.iter().zip(ub) {
                prop_assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn synthetic_labels_recompute_from_quality(n in 1usize..12, seed in 0u64..200) {
        let (samples, _) = generate_synthetic(n, seed, 0.5);
        for s in &samples {
            let mut word_lens = vec![0usize; s.n_words()];
            for &w in &s.word_index {
                word_lens[w] += 1;
            }
            let (words, utt) = hipama::data::synthetic_labels(&word_lens, &s.phoneme_accuracy);
            prop_assert_eq!(&words, &s.word_labels);
            prop_assert_eq!(&utt, &s.utt_labels);
        }
    }
}
