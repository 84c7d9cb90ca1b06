use std::collections::BTreeMap;

use oner::attention::{self, LogitMode, VerifyDims};
use oner::encoder::{self, EncoderConfig, ModalitySample, Weights};
use oner::eval::{self, Direction};
use oner::objectives::{self, ema_update};
use oner::optim::lr_schedule;
use oner::params::ParamSet;
use oner::synth::{self, SynthConfig, MASK, PAD};
use oner::train::TrainConfig;
use oner::{Tape, Tensor};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-4i32..=4, rows * cols).prop_map(move |v| Tensor::new(vec![rows, cols], v.into_iter().map(|x| x as f32 * 0.25).collect()).unwrap())
}

/// Paired feature sets plus a signed coordinate permutation (an exact rotation).
fn paired_features() -> impl Strategy<Value = (Tensor, Tensor, Vec<usize>, Vec<bool>)> {
    (2usize..12, 2usize..6)
        .prop_flat_map(|(n, d)| (matrix(n, d), matrix(n, d), Just((0..d).collect::<Vec<_>>()).prop_shuffle(), prop::collection::vec(any::<bool>(), d)))
}

fn rotate(t: &Tensor, perm: &[usize], flip: &[bool]) -> Tensor {
    let d = t.cols();
    Tensor::from_fn(&[t.rows(), d], |i| {
        let (r, c) = (i / d, i % d);
        let v = t.at(r, perm[c]);
        if flip[c] {
            -v
        } else {
            v
        }
    })
}

fn permute_rows(t: &Tensor, order: &[usize]) -> Tensor {
    t.select_rows(order).unwrap()
}

fn tiny_data() -> SynthConfig {
    SynthConfig { grid_size: 3, patch_dim: 4, num_shapes: 3, num_colors: 2, ..SynthConfig::default() }
}

fn tiny_weights(seed: u64) -> Weights {
    let mut cfg = TrainConfig {
        encoder: EncoderConfig { depth: 1, width: 8, heads: 2, mlp_ratio: 2, proj_hidden: 8, proj_dim: 8, pred_hidden: 8, ..EncoderConfig::default() },
        ..TrainConfig::default()
    };
    cfg.fit_encoder_to(&tiny_data());
    Weights::init(cfg.encoder, seed).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_reconstructs_and_betas_form_a_distribution(seed in any::<u64>(), max_len in 1usize..24) {
        let dims = VerifyDims { min_len: 1, max_len, ..VerifyDims::default() };
        let r = attention::verify_decomposition::<f64>(4, &dims, seed, LogitMode::Random).unwrap();
        prop_assert!(r.max_residual() <= 1e-9);
        prop_assert!(r.max_beta_sum_error() <= 1e-12);
        for row in &r.rows {
            prop_assert!(row.betas.iter().all(|&b| (0.0..=1.0).contains(&b)));
            prop_assert!(row.l_x <= max_len && row.l_y <= max_len);
        }
    }

    #[test]
    fn equal_logits_and_lengths_give_equal_betas(seed in any::<u64>()) {
        let r = attention::verify_decomposition::<f64>(4, &VerifyDims::default(), seed, LogitMode::Uniform).unwrap();
        prop_assert!(r.max_beta_deviation() <= 1e-12);
    }

    #[test]
    fn recall_is_monotone_in_k_and_complete_at_n((q, g, perm, flip) in paired_features()) {
        let n = q.rows();
        let ks: Vec<usize> = (1..=n).collect();
        let r = eval::retrieval_recall(&q, &g, &ks, Direction::TextToImage).unwrap();
        for w in r.recall.windows(2) {
            prop_assert!(w[0].1 <= w[1].1);
        }
        prop_assert_eq!(r.at(n), Some(1.0));
        let rotated = eval::retrieval_recall(&rotate(&q, &perm, &flip), &rotate(&g, &perm, &flip), &ks, Direction::TextToImage).unwrap();
        prop_assert_eq!(rotated.recall, r.recall);
    }

    #[test]
    fn recall_ignores_pair_order_without_ties(n in 2usize..10, seed in any::<u64>()) {
        // continuous features: ties have probability zero
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || Tensor::from_fn(&[n, 5], |_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0));
        let (q, g) = (draw(), draw());
        let mut order: Vec<usize> = (0..n).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut rng);
        let ks = [1, 2, 3];
        let a = eval::retrieval_recall(&q, &g, &ks, Direction::ImageToText).unwrap();
        let b = eval::retrieval_recall(&permute_rows(&q, &order), &permute_rows(&g, &order), &ks, Direction::ImageToText).unwrap();
        prop_assert_eq!(a.recall, b.recall);
    }

    #[test]
    fn gap_statistics_survive_rotation_and_pair_order((img, txt, perm, flip) in paired_features(), seed in any::<u64>()) {
        let base = eval::modality_gap(&img, &txt).unwrap();
        let rot = eval::modality_gap(&rotate(&img, &perm, &flip), &rotate(&txt, &perm, &flip)).unwrap();
        prop_assert!((base.centroid_distance - rot.centroid_distance).abs() <= 1e-6);
        prop_assert!((base.pair_alignment - rot.pair_alignment).abs() <= 1e-6);
        let mut order: Vec<usize> = (0..img.rows()).collect();
        rand::seq::SliceRandom::shuffle(&mut order[..], &mut ChaCha8Rng::seed_from_u64(seed));
        let shuffled = eval::modality_gap(&permute_rows(&img, &order), &permute_rows(&txt, &order)).unwrap();
        prop_assert!((base.centroid_distance - shuffled.centroid_distance).abs() <= 1e-6);
        prop_assert!((base.pair_alignment - shuffled.pair_alignment).abs() <= 1e-6);
        prop_assert!((0.0..=1.0).contains(&base.modality_separability));
    }

    #[test]
    fn auc_depends_only_on_score_order(scores in prop::collection::vec(-20i32..20, 2..40), labels in prop::collection::vec(any::<bool>(), 40)) {
        let s: Vec<f32> = scores.iter().map(|&v| v as f32 / 8.0).collect();
        let pos = &labels[..s.len()];
        let Some(a) = eval::auc(&s, pos) else {
            prop_assert!(pos.iter().all(|&p| p) || pos.iter().all(|&p| !p));
            return Ok(());
        };
        prop_assert!((0.0..=1.0).contains(&a));
        let warped: Vec<f32> = s.iter().map(|v| v * v * v + 3.0 * v - 7.0).collect();
        prop_assert_eq!(eval::auc(&warped, pos), Some(a));
        let flipped: Vec<f32> = s.iter().map(|v| -v).collect();
        prop_assert!((eval::auc(&flipped, pos).unwrap() + a - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn schedule_warms_up_then_decays_to_zero(total in 1usize..400, warm_frac in 0.0f64..0.9, peak in 1e-5f64..1e-1) {
        let warmup = (total as f64 * warm_frac) as usize;
        let lrs: Vec<f64> = (0..=total).map(|s| lr_schedule(s, total, warmup, peak)).collect();
        prop_assert!(lrs.iter().all(|&l| (0.0..=peak * (1.0 + 1e-12)).contains(&l)));
        for s in 1..=total {
            if s <= warmup {
                prop_assert!(lrs[s] >= lrs[s - 1]);
            } else {
                prop_assert!(lrs[s] <= lrs[s - 1] + 1e-18);
            }
        }
        if total > warmup {
            prop_assert!(lrs[total] <= 1e-8 * peak);
        }
    }

    #[test]
    fn text_masking_spares_padding(symbols in prop::collection::vec(0u32..12, 0..30), ratio in 0.0f64..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (masked, positions) = objectives::mask_text(&symbols, ratio, &mut rng);
        prop_assert_eq!(masked.len(), symbols.len());
        for (i, (&m, &s)) in masked.iter().zip(&symbols).enumerate() {
            if positions.contains(&i) {
                prop_assert_eq!(m, MASK);
                prop_assert_ne!(s, PAD);
            } else {
                prop_assert_eq!(m, s);
            }
        }
        let (_, none) = objectives::mask_text(&symbols, 0.0, &mut rng);
        prop_assert!(none.is_empty());
    }

    #[test]
    fn identical_rows_give_log_batch_size(n in 2usize..40, tau in 0.01f32..1.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let row: Vec<f32> = (0..6).map(|_| rand::Rng::gen_range(&mut rng, -1.0f32..1.0)).collect();
        let batch = Tensor::from_fn(&[n, 6], |i| row[i % 6]).l2_normalize_rows();
        let mut tape = Tape::new();
        let l = tape.param(batch.clone());
        let r = tape.constant(batch);
        let t = tape.constant(Tensor::scalar(tau));
        let loss = objectives::info_nce(&mut tape, l, r, t).unwrap();
        prop_assert!((tape.value(loss).item().unwrap() as f64 - (n as f64).ln()).abs() <= 1e-5);
    }

    #[test]
    fn ema_stays_between_endpoints(a in prop::collection::vec(-3.0f32..3.0, 1..20), m in 0.0f32..=1.0) {
        let b: Vec<f32> = a.iter().rev().map(|v| v * 0.5 + 0.25).collect();
        let mut online = ParamSet::new();
        online.insert("w", Tensor::new(vec![b.len()], b.clone()).unwrap());
        let mut momentum = ParamSet::new();
        momentum.insert("w", Tensor::new(vec![a.len()], a.clone()).unwrap());
        ema_update(&online, &mut momentum, m).unwrap();
        for ((&x, &y), &z) in a.iter().zip(&b).zip(momentum.tensors()[0].data()) {
            prop_assert!(z >= x.min(y) && z <= x.max(y));
        }
        if m == 1.0 {
            prop_assert_eq!(momentum.tensors()[0].data(), &a[..]);
        }
        if m == 0.0 {
            prop_assert_eq!(momentum.tensors()[0].data(), &b[..]);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn text_describes_exactly_the_text_visible_objects(seed in any::<u64>(), index in 0u64..1000, decoy in prop::bool::ANY) {
        let cfg = SynthConfig { decoy: if decoy { 0.5 } else { 0.0 }, ..SynthConfig::default() };
        let rec = synth::generate_records(&cfg, seed, index..index + 1).unwrap().remove(0);
        prop_assert!(rec.text.len() <= cfg.max_text_len());
        let parsed = synth::parse_text(&rec.text, &cfg.vocab()).unwrap();
        let mut expected = BTreeMap::new();
        for c in synth::clauses(&rec.scene) {
            *expected.entry(c).or_insert(0) += 1;
        }
        prop_assert_eq!(parsed, expected);
        let g = cfg.grid_size;
        let mut mask = vec![false; g * g];
        for o in rec.scene.objects.iter().filter(|o| o.in_image()) {
            for c in o.cells(g) {
                mask[c] = true;
            }
        }
        prop_assert_eq!(rec.mask, mask);
    }

    #[test]
    fn padded_texts_have_fixed_length(seed in any::<u64>(), extra in 0usize..6) {
        let base = SynthConfig::default();
        let len = base.max_text_len() + extra;
        let cfg = SynthConfig { text_len: Some(len), ..base };
        for rec in synth::generate_records(&cfg, seed, 0..8).unwrap() {
            prop_assert_eq!(rec.text.len(), len);
        }
    }

    #[test]
    fn batched_encoding_matches_single_samples(seed in 0u64..1000, count in 1usize..5) {
        let data = tiny_data();
        let w = tiny_weights(seed);
        let recs = synth::generate_records(&data, seed, 0..count as u64).unwrap();
        let mut samples: Vec<ModalitySample> = Vec::new();
        for r in &recs {
            samples.push(r.image_sample().unwrap());
            samples.push(r.text_sample());
            samples.push(r.mixture_sample().unwrap());
        }
        let refs: Vec<&ModalitySample> = samples.iter().collect();
        let batched = encoder::encode_batch(&w, &refs, None).unwrap();
        for (i, s) in samples.iter().enumerate() {
            let single = encoder::encode(&w, s, None).unwrap();
            for (a, b) in batched.row(i).iter().zip(single.vector.data()) {
                prop_assert!((a - b).abs() <= 1e-5);
            }
        }
    }
}
