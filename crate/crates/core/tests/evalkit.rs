mod common;

use common::*;
use proptest::prelude::*;
use rand::Rng;
use retouch_core::evalkit::{
    center_density, center_point_stats, export_embeddings, identity_score, inception_score_from_posteriors,
    mean_cross_cosine, sigma2_avg, subject_center, DEFAULT_DENSITY_RES, DEFAULT_DENSITY_SIGMA,
};
use retouch_core::image::Image;
use retouch_core::plugins::{ImageEmbedder, Segmenter, StubImageEmbedder, StubSegmenter};
use retouch_core::Result;

#[test]
fn center_examples() {
    let full = mask_from(6, 10, &[true; 60]);
    assert_eq!(subject_center(&full).unwrap(), (0.5, 0.5));
    let mut bits = vec![false; 60];
    bits[0] = true;
    assert_eq!(subject_center(&mask_from(6, 10, &bits)).unwrap(), (0.5 / 10.0, 0.5 / 6.0));
    assert!(subject_center(&mask_from(6, 10, &[false; 60])).is_err());
}

#[test]
fn l_shaped_center_matches_scan() {
    let m = mask_from_rows(&[
        "..........",
        ".#........",
        ".#........",
        ".#........",
        ".######...",
        "..........",
    ]);
    let bits = m.to_bools();
    let (mut r0, mut r1, mut c0, mut c1) = (usize::MAX, 0, usize::MAX, 0);
    for (p, &b) in bits.iter().enumerate() {
        if b {
            let (r, c) = (p / 10, p % 10);
            r0 = r0.min(r);
            r1 = r1.max(r);
            c0 = c0.min(c);
            c1 = c1.max(c);
        }
    }
    let expected = (((c0 + c1) as f64 / 2.0 + 0.5) / 10.0, ((r0 + r1) as f64 / 2.0 + 0.5) / 6.0);
    let got = subject_center(&m).unwrap();
    assert!((got.0 - expected.0).abs() < 1e-12 && (got.1 - expected.1).abs() < 1e-12);
    assert!((got.0 - 0.4).abs() < 1e-12 && (got.1 - 3.0 / 6.0).abs() < 1e-12);
}

#[test]
fn variance_fixtures() {
    assert_eq!(sigma2_avg(&[(0.3, 0.7); 5]).unwrap(), 0.0);
    assert!((sigma2_avg(&[(0.25, 0.5), (0.75, 0.5)]).unwrap() - 0.03125).abs() < 1e-12);
    assert!(sigma2_avg(&[]).is_err());
}

#[test]
fn inception_fixtures() {
    let uniform = vec![vec![0.25; 4]; 3];
    assert!((inception_score_from_posteriors(&uniform).unwrap() - 1.0).abs() < 1e-6);
    let one_hot = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    assert!((inception_score_from_posteriors(&one_hot).unwrap() - 2.0).abs() < 1e-6);
}

#[test]
fn similarity_fixtures() {
    let a = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
    let b = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
    // cosines: (1,0)·(0,1)=0, (1,0)·(1,0)=1, (.6,.8)·(0,1)=.8, (.6,.8)·(1,0)=.6
    assert!((mean_cross_cosine(&a, &b).unwrap() - 2.4 / 4.0).abs() < 1e-12);
    assert!(mean_cross_cosine(&[vec![1.0, 0.0]], &[vec![0.0, 3.0]]).unwrap().abs() < 1e-12);

    let imgs = uniform_placement_images();
    let score = identity_score(&imgs, &imgs[..1], &StubImageEmbedder).unwrap();
    assert!(score < 1.0);
    let same = identity_score(&imgs[..1], &imgs[..1], &StubImageEmbedder).unwrap();
    assert!((same - 1.0).abs() < 1e-6);
}

#[test]
fn uniform_placement_is_more_diverse_than_centered() {
    let stats = |imgs: Vec<Image<f32>>| -> f64 {
        let masks = imgs.iter().map(|i| StubSegmenter.segment(i)).collect::<Result<Vec<_>>>().unwrap();
        center_point_stats(&masks, DEFAULT_DENSITY_SIGMA, DEFAULT_DENSITY_RES).unwrap().sigma2_avg
    };
    let uniform = stats(uniform_placement_images());
    let centered = stats(centered_placement_images());
    assert!(uniform > centered, "{uniform} vs {centered}");
    assert_eq!(stats(uniform_placement_images()), uniform);
    // nine cells at x, y in {11.5, 32.5, 53.5}/64 have variance 2 * (21/64)^2 / 3
    let expected = 2.0 * (21.0f64 / 64.0).powi(2) / 3.0;
    assert!((uniform - expected).abs() < 1e-12, "{uniform} vs {expected}");
}

#[test]
fn embeddings_export_as_a_matrix() {
    let imgs = uniform_placement_images();
    let vecs: Vec<Vec<f64>> = imgs.iter().map(|i| StubImageEmbedder.embed_image(i).unwrap()).collect();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("emb.ltr");
    export_embeddings(&vecs, &path).unwrap();
    let t = retouch_core::load_tensor::<f32>(&path).unwrap();
    assert_eq!(t.shape(), &[9, vecs[0].len()]);
    assert!(export_embeddings(&[vec![1.0], vec![1.0, 2.0]], &path).is_err());
}

fn centers_strategy() -> impl Strategy<Value = Vec<(f64, f64)>> {
    prop::collection::vec((0.0f64..0.8, 0.0f64..0.8), 1..20)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn density_sums_to_one(centers in centers_strategy(), res in 1usize..40) {
        let d = center_density(&centers, 0.05, res).unwrap();
        prop_assert!((d.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn variance_ignores_order_and_shift(centers in centers_strategy(), seed in any::<u64>(), dx in 0.0f64..0.2, dy in 0.0f64..0.2) {
        let base = sigma2_avg(&centers).unwrap();
        prop_assert!(base >= 0.0);
        let mut shuffled = centers.clone();
        let mut r = rng(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, r.random_range(0..=i));
        }
        prop_assert!((sigma2_avg(&shuffled).unwrap() - base).abs() < 1e-12);
        let moved: Vec<_> = centers.iter().map(|&(x, y)| (x + dx, y + dy)).collect();
        prop_assert!((sigma2_avg(&moved).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn inception_is_bounded_by_class_count(seed in any::<u64>(), n in 2usize..10, k in 2usize..8) {
        let mut r = rng(seed);
        let posts: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.0..1.0f64).powi(4) + 1e-9).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let is = inception_score_from_posteriors(&posts).unwrap();
        prop_assert!(is >= 1.0 - 1e-9 && is <= k as f64 + 1e-9);
    }
}
