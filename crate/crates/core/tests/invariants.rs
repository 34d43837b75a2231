use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use tscmamba::dataio::{generate_selective_copy, SelectiveCopySpec};
use tscmamba::fusion::{fuse, FusionMode};
use tscmamba::head::{depthwise_pool, PoolMode};
use tscmamba::scanning::{reverse, scan_with, ScanScheme};
use tscmamba::ssm::{discretize, MambaBlock, SsmConfig};
use tscmamba::temporal::ppv_max;
use tscmamba::{ParamStore, Tape, Tensor};

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = Tensor> {
    prop::collection::vec(-3.0f64..3.0, rows * cols).prop_map(move |d| Tensor::new([rows, cols], d).unwrap())
}

fn block(d_model: usize, seed: u64) -> (MambaBlock, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SsmConfig {
        d_state: 4,
        ..SsmConfig::new(d_model)
    };
    let b = MambaBlock::init(&mut store, "m.", cfg, &mut rng).unwrap();
    (b, store)
}

// Wilson-Hilferty approximation of the chi-square quantile.
fn chi_square_critical(df: f64, z: f64) -> f64 {
    let h = 2.0 / (9.0 * df);
    df * (1.0 - h + z * h.sqrt()).powi(3)
}

fn chi_square(counts: &[usize]) -> f64 {
    let n: usize = counts.iter().sum();
    let e = n as f64 / counts.len() as f64;
    counts.iter().map(|&c| (c as f64 - e).powi(2) / e).sum()
}

const Z_999: f64 = 3.090_232;

#[test]
fn copy_generator_is_uniform() {
    let spec = SelectiveCopySpec::new(64, 16, 16);
    let data = generate_selective_copy(&spec, 625, 7).unwrap();
    let content = (spec.vocab_size - 2) as usize;
    let mut tokens = vec![0usize; content];
    let mut slots = vec![0usize; spec.sequence_length];
    for (t, p) in data.targets.iter().zip(&data.positions) {
        for &tok in t {
            tokens[tok as usize - 1] += 1;
        }
        for &i in p {
            slots[i] += 1;
        }
    }
    assert_eq!(tokens.iter().sum::<usize>(), 10_000);
    let tok_crit = chi_square_critical((content - 1) as f64, Z_999);
    let slot_crit = chi_square_critical((spec.sequence_length - 1) as f64, Z_999);
    assert!(chi_square(&tokens) < tok_crit, "tokens {} >= {tok_crit}", chi_square(&tokens));
    assert!(chi_square(&slots) < slot_crit, "positions {} >= {slot_crit}", chi_square(&slots));
}

#[test]
fn wilson_hilferty_matches_tables() {
    assert!((chi_square_critical(13.0, Z_999) - 34.528).abs() < 0.2);
    assert!((chi_square_critical(63.0, Z_999) - 103.442).abs() < 0.3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn reverse_is_an_involution(v in matrix(7, 3)) {
        let tape = Tape::new();
        let x = tape.constant(v.clone());
        let back = reverse(reverse(x).unwrap()).unwrap().to_tensor();
        prop_assert_eq!(back, v);
    }

    #[test]
    fn forward_block_is_causal(v in matrix(10, 3), w in matrix(10, 3), cut in 1usize..9, seed in 0u64..8) {
        let (b, store) = block(3, seed);
        let tape = Tape::new();
        let bound = b.bind(&tape, &store);
        let mut mixed = v.data().to_vec();
        mixed[cut * 3..].copy_from_slice(&w.data()[cut * 3..]);
        let ya = bound.forward(tape.constant(v)).unwrap().to_tensor();
        let yb = bound.forward(tape.constant(Tensor::new([10, 3], mixed).unwrap())).unwrap().to_tensor();
        prop_assert_eq!(&ya.data()[..cut * 3], &yb.data()[..cut * 3]);
    }

    #[test]
    fn flipped_scan_is_anticausal(v in matrix(10, 3), w in matrix(10, 3), cut in 1usize..9, seed in 0u64..8) {
        let (b, store) = block(3, seed);
        let tape = Tape::new();
        let bound = b.bind(&tape, &store);
        let mut mixed = v.data().to_vec();
        mixed[..cut * 3].copy_from_slice(&w.data()[..cut * 3]);
        let ya = scan_with(&bound, tape.constant(v), ScanScheme::Flipped).unwrap().to_tensor();
        let yb = scan_with(&bound, tape.constant(Tensor::new([10, 3], mixed).unwrap()), ScanScheme::Flipped).unwrap().to_tensor();
        // row r of the flipped scheme only sees input rows M-1-r..M
        let keep = 10 - cut;
        prop_assert_eq!(&ya.data()[..keep * 3], &yb.data()[..keep * 3]);
    }

    #[test]
    fn tango_is_sum_of_directions(v in matrix(6, 3), seed in 0u64..8) {
        let (b, store) = block(3, seed);
        let tape = Tape::new();
        let bound = b.bind(&tape, &store);
        let x = tape.constant(v);
        let f = scan_with(&bound, x, ScanScheme::Forward).unwrap().to_tensor();
        let r = scan_with(&bound, x, ScanScheme::Flipped).unwrap().to_tensor();
        let t = scan_with(&bound, x, ScanScheme::Tango).unwrap().to_tensor();
        for ((a, b), c) in f.data().iter().zip(r.data()).zip(t.data()) {
            prop_assert!((a + b - c).abs() < 1e-12);
        }
    }

    #[test]
    fn ppv_is_a_fraction(out in prop::collection::vec(-5.0f64..5.0, 1..60)) {
        let [ppv, max] = ppv_max(&out);
        prop_assert!((0.0..=1.0).contains(&ppv));
        prop_assert!(out.iter().all(|&o| o <= max));
    }

    #[test]
    fn pooling_ignores_channel_order(v in matrix(5, 4), rot in 0usize..5) {
        let rows: Vec<&[f64]> = v.data().chunks(4).collect();
        let permuted: Vec<f64> = (0..5).flat_map(|r| rows[(r + rot) % 5].to_vec()).collect();
        for mode in [PoolMode::Average, PoolMode::Max] {
            let tape = Tape::new();
            let a = depthwise_pool(tape.constant(v.clone()), mode).unwrap().to_tensor();
            let b = depthwise_pool(tape.constant(Tensor::new([5, 4], permuted.clone()).unwrap()), mode).unwrap().to_tensor();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_ignores_logit_shift(v in matrix(3, 4), shift in -50.0f64..50.0, labels in prop::collection::vec(0usize..4, 3)) {
        let tape = Tape::new();
        let moved = Tensor::new([3, 4], v.data().iter().map(|x| x + shift).collect()).unwrap();
        let a = tape.constant(v).cross_entropy(&labels).unwrap().item();
        let b = tape.constant(moved).cross_entropy(&labels).unwrap().item();
        prop_assert!((a - b).abs() < 1e-9);
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn balanced_fusion_is_symmetric(w in matrix(2, 5), v in matrix(2, 5)) {
        for mode in [FusionMode::Additive, FusionMode::Multiplicative] {
            let tape = Tape::new();
            let one = tape.constant(Tensor::scalar(1.0));
            let a = fuse(mode, one, tape.constant(w.clone()), tape.constant(v.clone())).unwrap().to_tensor();
            let b = fuse(mode, one, tape.constant(v.clone()), tape.constant(w.clone())).unwrap().to_tensor();
            for (x, y) in a.data().iter().zip(b.data()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn additive_fusion_is_a_scaled_convex_combination(w in matrix(2, 5), v in matrix(2, 5), lambda in 0.0f64..=2.0) {
        let tape = Tape::new();
        let l = tape.constant(Tensor::scalar(lambda));
        let out = fuse(FusionMode::Additive, l, tape.constant(w.clone()), tape.constant(v.clone())).unwrap().to_tensor();
        for ((o, a), b) in out.data().iter().zip(w.data()).zip(v.data()) {
            let half = o / 2.0;
            prop_assert!(half >= a.min(*b) - 1e-12 && half <= a.max(*b) + 1e-12);
        }
    }

    #[test]
    fn discretized_state_decays(a in -20.0f64..-1e-3, b in -5.0f64..5.0, delta in 1e-12f64..10.0) {
        let (a_bar, b_bar) = discretize(a, b, delta);
        prop_assert!(a_bar > 0.0 && a_bar < 1.0);
        prop_assert!(b_bar.abs() <= (b / a).abs() + 1e-12);
        prop_assert!(b_bar.abs() <= (b * delta).abs() * (1.0 + 1e-12));
    }
}
