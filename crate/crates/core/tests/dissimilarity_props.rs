mod common;

use common::*;
use objsal::dissimilarity::{
    appearance_channel, dissimilarity_scores, rasterize_scores, ChannelKind, ObjectSet, Similarity, DEFAULT_COSINE_EPS,
};
use objsal::tensor::{Detection, FeatureMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-12;

fn random_objects(rng: &mut ChaCha8Rng, n: usize) -> Vec<FeatureMap> {
    let (h, w, d) = (
        rng.random_range(1..=4),
        rng.random_range(1..=4),
        rng.random_range(1..=3),
    );
    (0..n)
        .map(|_| FeatureMap::from_fn(h, w, d, |_, _, _| rng.random_range(0.0..1.0)).unwrap())
        .collect()
}

fn dummy_boxes(n: usize) -> Vec<Detection> {
    (0..n)
        .map(|i| Detection::new(i as f64, 0.0, i as f64 + 1.0, 1.0, 0.9))
        .collect()
}

fn scores(objects: &[FeatureMap]) -> Vec<f64> {
    let set = ObjectSet::new(
        dummy_boxes(objects.len())
            .into_iter()
            .zip(objects.iter().cloned())
            .collect(),
    )
    .unwrap();
    dissimilarity_scores(&set, DEFAULT_COSINE_EPS)
}

fn close(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= TOL)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn matches_brute_force(seed in any::<u64>(), n in 0usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objs = random_objects(&mut rng, n);
        let got = scores(&objs);
        prop_assert!(close(&got, &brute_dissimilarity(&objs, DEFAULT_COSINE_EPS)), "{got:?}");
        prop_assert!(got.iter().all(|s| (0.0..=1.0).contains(s)));
    }

    #[test]
    fn permutation_invariant(seed in any::<u64>(), n in 2usize..=5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let objs = random_objects(&mut rng, n);
        let base = scores(&objs);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, rng.random_range(0..=i));
        }
        let shuffled: Vec<FeatureMap> = perm.iter().map(|&i| objs[i].clone()).collect();
        let want: Vec<f64> = perm.iter().map(|&i| base[i]).collect();
        prop_assert!(close(&scores(&shuffled), &want));
    }

    #[test]
    fn positive_scaling_invariant(seed in any::<u64>(), n in 2usize..=5, c in 0.01f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut objs = random_objects(&mut rng, n);
        let base = scores(&objs);
        let k = rng.random_range(0..n);
        let o = &objs[k];
        objs[k] = FeatureMap::from_fn(o.height(), o.width(), o.channels(), |y, x, ch| c * o.get(y, x, ch)).unwrap();
        prop_assert!(close(&scores(&objs), &base));
    }
}

#[test]
fn zero_outside_boxes() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let global = FeatureMap::from_fn(12, 16, 3, |_, _, _| rng.random_range(0.0..1.0)).unwrap();
    let dets = vec![
        Detection::new(4.0, 4.0, 20.0, 16.0, 0.9),
        Detection::new(36.0, 20.0, 56.0, 44.0, 0.8),
    ];
    let set = ObjectSet::extract(&global, &dets, 64, 48).unwrap();
    let ch = appearance_channel(&set, &Similarity::default(), 12, 16, 64, 48).unwrap();
    for y in 0..12 {
        for x in 0..16 {
            let inside = (1..5).contains(&x) && (1..4).contains(&y) || (9..14).contains(&x) && (5..11).contains(&y);
            if !inside {
                assert_eq!(ch.grid.get(y, x), 0.0, "({y}, {x})");
            }
        }
    }
}

#[test]
fn overlap_takes_the_mean() {
    let dets = vec![
        Detection::new(0.0, 0.0, 2.0, 2.0, 0.9),
        Detection::new(1.0, 1.0, 3.0, 3.0, 0.9),
    ];
    let m = rasterize_scores(&dets, &[0.2, 0.8], ChannelKind::Appearance, 4, 4, 4, 4).unwrap();
    assert_eq!(m.grid.get(1, 1), 0.5);
    assert_eq!(m.grid.get(0, 0), 0.2);
    assert_eq!(m.grid.get(2, 2), 0.8);
    assert_eq!(m.grid.get(3, 3), 0.0);
}
