use mbkit::data::{make_batch, masked_count, Corpus, Corruption, MASK};
use proptest::prelude::*;

#[test]
fn nsp_labels_are_balanced() {
    let corpus = Corpus::generate(11, 128, 400).unwrap();
    let (mut ones, mut total) = (0, 0);
    for seed in 0..160 {
        let b = make_batch(&corpus, 64, 32, seed).unwrap();
        ones += b.nsp_labels.iter().sum::<usize>();
        total += b.nsp_labels.len();
    }
    assert!(total >= 10_000);
    let frac = ones as f64 / total as f64;
    assert!((frac - 0.5).abs() <= 0.02, "{frac}");
}

#[test]
fn replacement_mix_is_80_10_10() {
    let corpus = Corpus::generate(12, 128, 400).unwrap();
    let mut counts = [0usize; 3];
    let mut seed = 0;
    while counts.iter().sum::<usize>() < 10_000 {
        let b = make_batch(&corpus, 64, 48, seed).unwrap();
        for (i, c) in b.corruption.iter().enumerate() {
            let pos = b.mlm_positions[i];
            match c {
                Corruption::Mask => {
                    assert_eq!(b.token_ids[pos], MASK);
                    counts[0] += 1
                }
                Corruption::Random => counts[1] += 1,
                Corruption::Keep => {
                    assert_eq!(b.token_ids[pos], b.mlm_labels[i]);
                    counts[2] += 1
                }
            }
        }
        seed += 1;
    }
    let n = counts.iter().sum::<usize>() as f64;
    for (c, want) in counts.iter().zip([0.8, 0.1, 0.1]) {
        assert!((*c as f64 / n - want).abs() <= 0.02, "{counts:?}");
    }
}

#[test]
fn twenty_valid_tokens_get_three_masks() {
    assert_eq!(masked_count(20), 3);
    let corpus = Corpus::generate(13, 64, 200).unwrap();
    let mut seen = false;
    for seed in 0..50 {
        let b = make_batch(&corpus, 16, 20, seed).unwrap();
        for s in 0..16 {
            if b.valid_in(s) == 20 {
                assert_eq!(b.masked_in(s), 3);
                seen = true;
            }
        }
    }
    assert!(seen);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]
    #[test]
    fn batch_invariants(seed in 0u64..1000, b in 1usize..8, t in 8usize..40) {
        let corpus = Corpus::generate(seed % 7, 50, 30).unwrap();
        let batch = make_batch(&corpus, b, t, seed).unwrap();
        prop_assert_eq!(&batch, &make_batch(&corpus, b, t, seed).unwrap());
        for s in 0..b {
            prop_assert_eq!(batch.masked_in(s), masked_count(batch.valid_in(s)));
        }
        prop_assert_eq!(batch.mlm_positions.len(), batch.mlm_labels.len());
        for &p in &batch.mlm_positions {
            prop_assert!(batch.attention_mask[p]);
        }
        prop_assert!(batch.token_ids.iter().all(|&id| id < corpus.vocab_size()));
    }
}
