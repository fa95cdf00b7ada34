use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use charnmt::decoder::{length_penalty, rescore};
use charnmt::encoder::{EncoderConfig, PoolMode, PoolSpec};
use charnmt::eval::corpus_computation_ratio;
use charnmt::hm::{compression_loss, ZMatrix};
use charnmt::tokenize::{build_char_vocab, SPECIALS};
use charnmt::{bleu, build_batches, learn_bpe, CompressionPenaltyConfig, Graph, Pair, PenaltyForm, Scheduler, SchedulerConfig, Tensor, VocabKind};

fn words() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::collection::vec("[a-e]{1,6}", 4..8).prop_map(|w| w.join(" ")), 1..12)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matmul_matches_naive(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<f64> = (0..m * k).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let b: Vec<f64> = (0..k * n).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let mut g = Graph::<f64>::new();
        let va = g.constant(Tensor::new(vec![m, k], a.clone()).unwrap());
        let vb = g.constant(Tensor::new(vec![k, n], b.clone()).unwrap());
        let c = g.matmul(va, vb);
        let got = g.value(c);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|x| a[i * k + x] * b[x * n + j]).sum();
                prop_assert!((got.get(i, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn char_vocab_round_trips(lines in words()) {
        let v = build_char_vocab(lines.iter().map(String::as_str), 496).unwrap();
        for l in &lines {
            prop_assert_eq!(&v.decode(&v.encode(l)), l);
        }
    }

    #[test]
    fn bpe_round_trips_and_grows_by_merges(lines in words(), extra in 0usize..15) {
        // The space character is replaced by the word marker, so the base size is the same.
        let base = build_char_vocab(lines.iter().map(String::as_str), 496).unwrap().len();
        let (v, merges) = learn_bpe(lines.iter().map(String::as_str), base - SPECIALS.len() + extra).unwrap();
        prop_assert_eq!(v.kind(), VocabKind::Bpe);
        prop_assert!(v.len() <= base + extra);
        prop_assert!(v.len() <= base + merges.len());
        for l in &lines {
            let ids = v.encode(l);
            prop_assert_eq!(&v.decode(&ids), l);
            for w in l.split_whitespace() {
                prop_assert_eq!(merges.apply_to_word(w).concat(), format!("\u{2581}{w}"));
            }
        }
    }

    #[test]
    fn bleu_bounds(hyps in words(), seed in any::<u64>()) {
        let b = bleu(&hyps, &hyps).unwrap();
        prop_assert!((b.bleu - 100.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut refs = hyps.clone();
        rand::seq::SliceRandom::shuffle(refs.as_mut_slice(), &mut rng);
        let b = bleu(&hyps, &refs).unwrap();
        prop_assert!((0.0..=100.0 + 1e-9).contains(&b.bleu));
    }

    #[test]
    fn corrected_penalty_is_a_band(t in 1usize..200, z in 0usize..200, a1 in 0.0f64..0.5, width in 0.0f64..0.5, w in 0.01f64..5.0) {
        let z = z.min(t);
        let cfg = CompressionPenaltyConfig { alpha1: a1, alpha2: a1 + width, weight: w, form: PenaltyForm::Corrected, ..Default::default() };
        let loss = compression_loss(&[z], t, &cfg).unwrap();
        prop_assert!(loss >= 0.0);
        let inside = z as f64 >= a1 * t as f64 && z as f64 <= (a1 + width) * t as f64;
        prop_assert_eq!(loss == 0.0, inside);
    }

    #[test]
    fn pooled_lengths_shrink(t in 1usize..300, s1 in 1usize..5, s2 in 1usize..5) {
        let cfg = EncoderConfig {
            num_bilstm_layers: 4,
            pooling: vec![
                PoolSpec { after_layer: 1, stride: s1, mode: PoolMode::Mean },
                PoolSpec { after_layer: 3, stride: s2, mode: PoolMode::Max },
            ],
            ..Default::default()
        };
        let l = cfg.layer_lengths(t);
        prop_assert_eq!(l[0], t);
        prop_assert!(l.windows(2).all(|w| w[1] <= w[0] && w[1] >= 1));
        prop_assert_eq!(l[1], t.div_ceil(s1));
        let r = corpus_computation_ratio(&[l], &[t]).unwrap();
        prop_assert!(r > 0.0 && r <= 1.0);
    }

    #[test]
    fn zmatrix_ratio_matches_updates(rows in prop::collection::vec(prop::collection::vec(0u8..2, 6), 1..5)) {
        // Force nesting: a gate can only be open where the layer below is.
        let mut z = rows;
        for l in 1..z.len() {
            for t in 0..6 {
                z[l][t] &= z[l - 1][t];
            }
        }
        let tilde = z.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let zm = ZMatrix::new(z.clone(), tilde).unwrap();
        prop_assert_eq!(zm.nesting_violations(), 0);
        let counts = zm.counts();
        prop_assert!(counts.windows(2).all(|w| w[1] <= w[0]));
        // Layer 1 runs every step; layer l runs where layer l-1 fired.
        let mut fractions = vec![1.0];
        fractions.extend(counts[..counts.len() - 1].iter().map(|&c| c as f64 / 6.0));
        let want = fractions.iter().sum::<f64>() / fractions.len() as f64;
        prop_assert!((zm.computation_ratio() - want).abs() < 1e-12);
    }

    #[test]
    fn batches_partition_and_respect_cap(lens in prop::collection::vec((1usize..30, 1usize..30), 1..60), cap in 30usize..200, seed in any::<u64>()) {
        let pairs: Vec<Pair> = lens.iter().map(|&(s, t)| Pair { src: vec![4; s], tgt: vec![5; t] }).collect();
        let batches = build_batches(&pairs, cap, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut seen: Vec<usize> = batches.iter().flatten().copied().collect();
        seen.sort();
        prop_assert_eq!(seen, (0..pairs.len()).collect::<Vec<_>>());
        for b in &batches {
            let width = b.iter().map(|&i| pairs[i].tokens()).max().unwrap();
            prop_assert!(width * b.len() <= cap);
        }
    }

    #[test]
    fn scheduler_lr_never_rises(trace in prop::collection::vec(1.0f64..50.0, 1..60)) {
        let mut s = Scheduler::new(SchedulerConfig { initial_lr: 1e-3, halve_after: 300, min_halving_gap: 200, stop_after: 1000 });
        let mut lr = s.lr;
        for p in trace {
            if s.stopped {
                break;
            }
            s.update(p, 100).unwrap();
            prop_assert!(s.lr <= lr);
            lr = s.lr;
        }
    }

    #[test]
    fn rescore_prefers_higher_log_prob(lp in -50.0f64..0.0, gap in 0.001f64..10.0, len in 1usize..40, alpha in 0.0f64..2.0) {
        prop_assert!(rescore(lp, len, &[], alpha, 0.0) > rescore(lp - gap, len, &[], alpha, 0.0));
        prop_assert!(length_penalty(len + 1, alpha) >= length_penalty(len, alpha));
    }
}
