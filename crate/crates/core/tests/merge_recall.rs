use lulc_core::chipper::{chip_grid, ChipIndex};
use lulc_core::geo::{AffineGeoTransform, LabelMask, NUM_CLASSES};
use lulc_core::inference::{ensemble, merge_chips, recall_per_class, ProbabilityChip};
use ndarray::{Array2, Array3};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_chip(rng: &mut ChaCha8Rng, index: ChipIndex) -> ProbabilityChip<f64> {
    let n = index.chip_size;
    let mut p = Array3::<f64>::from_shape_fn((NUM_CLASSES, n, n), |_| rng.gen_range(0.01..1.0));
    for i in 0..n {
        for j in 0..n {
            let s: f64 = (0..NUM_CLASSES).map(|c| p[[c, i, j]]).sum();
            for c in 0..NUM_CLASSES {
                p[[c, i, j]] /= s;
            }
        }
    }
    ProbabilityChip::new(p, index).unwrap()
}

fn chips_on_grid(seed: u64, shape: (usize, usize), size: usize, stride: usize) -> Vec<ProbabilityChip<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    chip_grid(shape, size, stride).unwrap().into_iter().map(|ix| random_chip(&mut rng, ix)).collect()
}

/// Per pixel, per class: maximum over every chip covering it.
fn brute_force_max(chips: &[ProbabilityChip<f64>], shape: (usize, usize)) -> Array3<f64> {
    let mut out = Array3::<f64>::from_elem((NUM_CLASSES, shape.0, shape.1), f64::NEG_INFINITY);
    for r in 0..shape.0 {
        for c in 0..shape.1 {
            for chip in chips {
                let ix = chip.index;
                if r >= ix.row_off && r < ix.row_off + ix.chip_size && c >= ix.col_off && c < ix.col_off + ix.chip_size {
                    for k in 0..NUM_CLASSES {
                        out[[k, r, c]] = out[[k, r, c]].max(chip.probs[[k, r - ix.row_off, c - ix.col_off]]);
                    }
                }
            }
        }
    }
    out
}

#[test]
fn merge_matches_brute_force_on_edge_flush_grid() {
    let shape = (300, 300);
    let chips = chips_on_grid(1, shape, 64, 48);
    // the last chip sits flush with the far edges
    assert!(chips.iter().any(|c| c.index.row_off == 236 && c.index.col_off == 236));
    let m = merge_chips(&chips, shape, &AffineGeoTransform::identity(), "").unwrap();
    assert_eq!(m.probs, brute_force_max(&chips, shape));
    assert!(m.coverage.iter().all(|&c| c > 0));
}

#[test]
fn merging_a_chip_with_itself_is_idempotent() {
    let chips = chips_on_grid(2, (32, 32), 32, 32);
    let once = merge_chips(&chips, (32, 32), &AffineGeoTransform::identity(), "").unwrap();
    let doubled: Vec<_> = chips.iter().chain(&chips).cloned().collect();
    let twice = merge_chips(&doubled, (32, 32), &AffineGeoTransform::identity(), "").unwrap();
    assert_eq!(once.probs, twice.probs);
    assert_eq!(once.probs, chips[0].probs);
}

fn random_case(seed: u64, n: usize) -> (lulc_core::Mosaic64, LabelMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let index = ChipIndex { row_off: 0, col_off: 0, chip_size: n };
    let chip = random_chip(&mut rng, index);
    let t = AffineGeoTransform::identity();
    let m = merge_chips(&[chip], (n, n), &t, "").unwrap();
    let gt = LabelMask::new(Array2::from_shape_fn((n, n), |_| rng.gen_range(0..NUM_CLASSES as u8)), t, "").unwrap();
    (m, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    #[test]
    fn merge_is_order_invariant(seed in 0u64..10_000) {
        let shape = (80, 96);
        let chips = chips_on_grid(seed, shape, 32, 20);
        let t = AffineGeoTransform::identity();
        let base = merge_chips(&chips, shape, &t, "").unwrap();
        let mut shuffled = chips.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed + 1));
        prop_assert_eq!(merge_chips(&shuffled, shape, &t, "").unwrap(), base);
    }

    #[test]
    fn ensemble_stays_on_the_simplex(seed in 0u64..10_000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ix = ChipIndex { row_off: 0, col_off: 0, chip_size: 16 };
        let e = ensemble(&random_chip(&mut rng, ix), &random_chip(&mut rng, ix)).unwrap();
        prop_assert!(e.simplex_error() <= 1e-5);
    }

    #[test]
    fn recall_is_monotone_in_threshold(seed in 0u64..10_000, a in 0.01f64..0.99, b in 0.01f64..0.99) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let (m, gt) = random_case(seed, 24);
        let r_lo = recall_per_class(&m, &gt, lo).unwrap();
        let r_hi = recall_per_class(&m, &gt, hi).unwrap();
        for (x, y) in r_lo.0.iter().zip(&r_hi.0) {
            if let (Some(x), Some(y)) = (x, y) {
                prop_assert!(y <= x);
            }
        }
    }
}
