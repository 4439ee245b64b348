mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use retouch_core::image::{BlendMask, MaskProvenance};
use retouch_core::maskops::{
    blend_latents, compose_adaptive_mask, distance_transform, normalize_half_to_one, or_masks,
    remove_small_components, resize_binary, ComponentLabeling,
};
use retouch_core::Tensor;

#[test]
fn distance_transform_matches_brute_force_on_200_random_masks() {
    let mut r = rng(0xD157);
    let mut checked = 0;
    while checked < 200 {
        let h = r.random_range(1..=32);
        let w = r.random_range(1..=32);
        let density = r.random_range(0.05..0.95);
        let bits = random_bits(&mut r, h, w, density);
        let Some(expected) = brute_force_edt(&bits, h, w) else {
            continue;
        };
        let got = distance_transform(&mask_from(h, w, &bits));
        for (p, (&g, &e)) in got.data().iter().zip(&expected).enumerate() {
            assert_eq!(g, e, "mask {checked} ({h}x{w}) pixel {p}");
        }
        checked += 1;
    }
}

#[test]
fn distance_transform_fixed_cases() {
    let zero = mask_from(4, 6, &[false; 24]);
    assert!(distance_transform(&zero).data().iter().all(|&v| v == 0.0));

    let center = mask_from_rows(&[".....", ".....", "..#..", ".....", "....."]);
    let d = distance_transform(&center);
    for (p, &v) in d.data().iter().enumerate() {
        assert_eq!(v, if p == 12 { 1.0 } else { 0.0 });
    }

    // a 7x7 square: the centre is 4 steps from the nearest zero
    let mut bits = vec![false; 81];
    for r in 1..8 {
        for c in 1..8 {
            bits[r * 9 + c] = true;
        }
    }
    assert_eq!(distance_transform(&mask_from(9, 9, &bits)).data()[40], 4.0);
}

#[test]
fn distance_transform_all_foreground_uses_the_diagonal() {
    let d = distance_transform(&mask_from(3, 4, &[true; 12]));
    assert!(d.data().iter().all(|&v| v == 5.0));
}

#[test]
fn small_components_match_flood_fill_and_are_idempotent() {
    let mut r = rng(0xC0C0);
    for case in 0..150 {
        let h = r.random_range(1..=32);
        let w = r.random_range(1..=32);
        let density = r.random_range(0.05..0.6);
        let bits = random_bits(&mut r, h, w, density);
        let v = r.random_range(0..=24);
        let m = mask_from(h, w, &bits);
        let once = remove_small_components(&m, v);
        assert_eq!(once.to_bools(), flood_fill_filter(&bits, h, w, v), "case {case}");
        let twice = remove_small_components(&once, v);
        assert_eq!(twice.to_bools(), once.to_bools(), "case {case} not idempotent");
    }
}

#[test]
fn labeling_matches_flood_fill() {
    let mut r = rng(7);
    for _ in 0..50 {
        let (h, w) = (r.random_range(1..=24), r.random_range(1..=24));
        let bits = random_bits(&mut r, h, w, 0.4);
        let lab = ComponentLabeling::of(&bits, h, w);
        let mut expected: Vec<usize> = flood_fill_components(&bits, h, w).iter().map(Vec::len).collect();
        let mut got = lab.volumes.clone();
        expected.sort_unstable();
        got.sort_unstable();
        assert_eq!(got, expected);
        assert_eq!(lab.volumes.iter().sum::<usize>(), bits.iter().filter(|&&b| b).count());
        let max = lab.labels.iter().copied().max().unwrap_or(0) as usize;
        assert_eq!(max, lab.volumes.len());
    }
}

#[test]
fn volume_3_and_50_components_with_threshold_10() {
    let mut bits = vec![false; 20 * 20];
    for p in [(0, 0), (0, 1), (1, 1)] {
        bits[p.0 * 20 + p.1] = true;
    }
    for r in 10..15 {
        for c in 5..15 {
            bits[r * 20 + c] = true;
        }
    }
    let out = remove_small_components(&mask_from(20, 20, &bits), 10).to_bools();
    assert_eq!(out.iter().filter(|&&b| b).count(), 50);
    assert!(!out[0] && !out[1] && !out[21]);
    assert_eq!(remove_small_components(&mask_from(20, 20, &bits), 0).to_bools(), bits);
}

#[test]
fn composite_matches_step_by_step_recomputation() {
    let (mc, disk) = checkerboard_fixture();
    let c = compose_adaptive_mask(&mask_from(8, 8, &mc), &mask_from(32, 32, &disk), 20).unwrap();
    let expected = composite_oracle(&mc, (8, 8), &disk, (32, 32), 20);
    for (p, (&g, &e)) in c.blend.data().data().iter().zip(&expected).enumerate() {
        assert!((g - e).abs() < 1e-12, "pixel {p}: {g} vs {e}");
    }
    // the lone 4x4 block is below the volume threshold, the checkerboard survives
    assert_eq!(c.confident.count_foreground(), 8 * 16);
    let sum: f64 = expected.iter().sum();
    assert!((sum - 618.111_782_879_115_9).abs() < 1e-9, "oracle sum drifted: {sum}");
}

#[test]
fn composite_floor_and_surviving_foreground() {
    let mut r = rng(0xF100);
    for _ in 0..40 {
        let mc = random_bits(&mut r, 8, 8, 0.3);
        let density = r.random_range(0.0..0.5);
        let sam = random_bits(&mut r, 32, 32, density);
        let c = compose_adaptive_mask(&mask_from(8, 8, &mc), &mask_from(32, 32, &sam), 16).unwrap();
        let kept = c.confident.to_bools();
        for (p, &m) in c.blend.data().data().iter().enumerate() {
            assert!((0.5..=1.0).contains(&m), "value {m} outside [0.5, 1]");
            if kept[p] {
                assert_eq!(m, 1.0);
            }
        }
    }
}

#[test]
fn composite_of_empty_masks_is_half() {
    let c = compose_adaptive_mask(&mask_from(8, 8, &[false; 64]), &mask_from(16, 16, &[false; 256]), 16).unwrap();
    assert!(c.blend.data().data().iter().all(|&v| v == 0.5));
    assert_eq!(c.blend.provenance, MaskProvenance::Composite);
}

#[test]
fn resize_and_or_examples() {
    let m = mask_from_rows(&["#.", ".."]);
    let up = resize_binary(&m, (4, 4)).unwrap();
    let expected = mask_from_rows(&["##..", "##..", "....", "...."]);
    assert_eq!(up.to_bools(), expected.to_bools());
    assert_eq!(resize_binary(&m, (2, 2)).unwrap().to_bools(), m.to_bools());
    assert!(resize_binary(&m, (0, 4)).is_err());

    let a = mask_from_rows(&["#.", ".."]);
    let b = mask_from_rows(&["..", ".#"]);
    assert_eq!(or_masks(&a, &b).unwrap().to_bools(), mask_from_rows(&["#.", ".#"]).to_bools());
    assert!(or_masks(&a, &mask_from_rows(&["#"])).is_err());
}

#[test]
fn normalization_examples() {
    let d = Tensor::new(&[1, 3], vec![0.0, 2.0, 4.0]).unwrap();
    assert_eq!(normalize_half_to_one(&d).data(), &[0.5, 0.75, 1.0]);
    assert!(normalize_half_to_one(&Tensor::<f64>::zeros(&[2, 2])).data().iter().all(|&v| v == 0.5));
    assert!(normalize_half_to_one(&Tensor::full(&[2, 2], 3.0)).data().iter().all(|&v| v == 1.0));
}

#[test]
fn blend_endpoints_are_exact() {
    let mut r = rng(5);
    let phi_t = Tensor::from_fn(&[64, 6], |_| r.random_range(-3.0..3.0));
    let phi_o = Tensor::from_fn(&[64, 6], |_| r.random_range(-3.0..3.0));
    let full = |v: f64| BlendMask::new(Tensor::full(&[32, 32], v), MaskProvenance::Composite).unwrap();
    assert!(blend_latents(&phi_t, &phi_o, &full(1.0), (8, 8)).unwrap().bit_eq(&phi_t));
    assert!(blend_latents(&phi_t, &phi_o, &full(0.0), (8, 8)).unwrap().bit_eq(&phi_o));
    let mid = blend_latents(&phi_t, &phi_o, &full(0.5), (8, 8)).unwrap();
    for ((m, a), b) in mid.data().iter().zip(phi_t.data()).zip(phi_o.data()) {
        assert!((m - (a + b) / 2.0).abs() <= 1e-6);
    }
    assert!(blend_latents(&phi_t, &phi_o, &full(0.5), (4, 4)).is_err());
}

fn bits_strategy(max: usize) -> impl Strategy<Value = (usize, usize, Vec<bool>)> {
    (1..=max, 1..=max).prop_flat_map(|(h, w)| (Just(h), Just(w), prop::collection::vec(any::<bool>(), h * w)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edt_is_zero_exactly_on_background((h, w, bits) in bits_strategy(20)) {
        let d = distance_transform(&mask_from(h, w, &bits));
        if bits.iter().any(|&b| !b) {
            for (p, &v) in d.data().iter().enumerate() {
                prop_assert_eq!(v == 0.0, !bits[p]);
            }
        }
    }

    #[test]
    fn removal_is_monotone_in_threshold((h, w, bits) in bits_strategy(16), v in 0usize..20, dv in 0usize..10) {
        let m = mask_from(h, w, &bits);
        let lo = remove_small_components(&m, v).to_bools();
        let hi = remove_small_components(&m, v + dv).to_bools();
        for (a, b) in lo.iter().zip(&hi) {
            prop_assert!(!*b || *a);
        }
    }

    #[test]
    fn or_is_commutative_associative_idempotent(
        (h, w, a) in bits_strategy(12),
        seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let b = random_bits(&mut r, h, w, 0.5);
        let c = random_bits(&mut r, h, w, 0.5);
        let (ma, mb, mc) = (mask_from(h, w, &a), mask_from(h, w, &b), mask_from(h, w, &c));
        prop_assert_eq!(or_masks(&ma, &mb).unwrap().to_bools(), or_masks(&mb, &ma).unwrap().to_bools());
        let left = or_masks(&or_masks(&ma, &mb).unwrap(), &mc).unwrap();
        let right = or_masks(&ma, &or_masks(&mb, &mc).unwrap()).unwrap();
        prop_assert_eq!(left.to_bools(), right.to_bools());
        prop_assert_eq!(or_masks(&ma, &ma).unwrap().to_bools(), a);
    }

    #[test]
    fn blending_a_tensor_with_itself_is_identity(seed in any::<u64>(), m in 0.0f64..=1.0) {
        let mut r = rng(seed);
        let phi = Tensor::from_fn(&[16, 3], |_| r.random_range(-5.0..5.0));
        let mask = BlendMask::new(Tensor::full(&[8, 8], m), MaskProvenance::Composite).unwrap();
        let out = blend_latents(&phi, &phi, &mask, (4, 4)).unwrap();
        for (a, b) in out.data().iter().zip(phi.data()) {
            prop_assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn resize_binary_stays_binary((h, w, bits) in bits_strategy(8), fh in 1usize..4, fw in 1usize..4) {
        let up = resize_binary(&mask_from(h, w, &bits), (h * fh, w * fw)).unwrap();
        prop_assert!(up.is_binary());
        prop_assert_eq!(up.count_foreground(), bits.iter().filter(|&&b| b).count() * fh * fw);
    }
}
