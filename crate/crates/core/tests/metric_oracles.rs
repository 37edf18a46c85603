mod common;

use common::*;
use objsal::metrics::{auc_judd, cc_metric, negative_pool, shuffled_auc, sim_metric};
use objsal::readout::{cc_prime, fit_center_bias};
use objsal::tensor::{FixationMap, Grid};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn random_distribution(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Grid {
    let g = Grid::from_fn(h, w, |_, _| rng.random::<f64>());
    let s = g.sum();
    Grid::from_fn(h, w, |y, x| g.get(y, x) / s)
}

#[test]
fn auc_judd_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..300 {
        let (p, f) = random_instance(&mut rng);
        let got = auc_judd(&p, &f).unwrap();
        assert!((got - auc_judd_oracle(&p, &f)).abs() <= 1e-9);
    }
}

#[test]
fn shuffled_auc_matches_pairwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..200u64 {
        let (p, f) = random_instance(&mut rng);
        let (h, w) = (p.height(), p.width());
        let others: Vec<FixationMap> = (0..3)
            .map(|_| {
                let k = rng.random_range(1..=10);
                random_fixations(&mut rng, h, w, k)
            })
            .collect();
        let pool: Vec<usize> = (0..h * w)
            .filter(|&i| !f.data()[i] && others.iter().any(|o| o.data()[i]))
            .collect();
        assert_eq!(negative_pool(&f, &others).unwrap(), pool);
        if pool.is_empty() {
            assert!(shuffled_auc(&p, &f, &others, 5, case).is_err());
            continue;
        }
        let pos: Vec<f64> = f.indices().iter().map(|&i| p.data()[i]).collect();
        let mut draw = ChaCha8Rng::seed_from_u64(case);
        let take = f.count().min(pool.len());
        let mut want = 0.0;
        for _ in 0..5 {
            let neg: Vec<f64> = sample(&mut draw, pool.len(), take)
                .into_iter()
                .map(|k| p.data()[pool[k]])
                .collect();
            want += pairwise_auc(&pos, &neg);
        }
        want /= 5.0;
        let got = shuffled_auc(&p, &f, &others, 5, case).unwrap();
        assert!((got - want).abs() <= 1e-9, "case {case}: {got} vs {want}");
    }
}

#[test]
fn random_maps_score_chance_auc() {
    let mut mean = 0.0;
    for seed in 0..200 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let p = Grid::from_fn(16, 16, |_, _| rng.random::<f64>());
        let f = random_fixations(&mut rng, 16, 16, 10);
        mean += auc_judd(&p, &f).unwrap() / 200.0;
    }
    assert!((mean - 0.5).abs() < 0.03, "{mean}");
}

#[test]
fn centre_biased_prediction_is_penalised_by_shuffled_auc() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (h, w) = (16, 16);
    let prior = Grid::from_fn(h, w, |y, x| {
        let (dy, dx) = (y as f64 - 7.5, x as f64 - 7.5);
        (-(dx * dx + dy * dy) / 18.0).exp()
    });
    let normal = Normal::<f64>::new(7.5, 2.0).unwrap();
    let clustered = |rng: &mut ChaCha8Rng| {
        let mut f = FixationMap::empty(h, w);
        while f.count() < 10 {
            let y = normal.sample(rng).round().clamp(0.0, 15.0) as usize;
            let x = normal.sample(rng).round().clamp(0.0, 15.0) as usize;
            f.set(y, x, true);
        }
        f
    };
    let f = clustered(&mut rng);
    let others: Vec<FixationMap> = (0..8).map(|_| clustered(&mut rng)).collect();
    let judd = auc_judd(&prior, &f).unwrap();
    let shuffled = shuffled_auc(&prior, &f, &others, 10, 0).unwrap();
    assert!(shuffled < judd, "sAUC {shuffled} vs AUC-Judd {judd}");
}

#[test]
fn independent_maps_are_uncorrelated() {
    let (mut cc, mut ccp) = (0.0, 0.0);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = random_distribution(&mut rng, 32, 32);
        let q = random_distribution(&mut rng, 32, 32);
        cc += cc_metric(&p, &q).unwrap() / 100.0;
        ccp += cc_prime(&p, &q).unwrap() / 100.0;
    }
    assert!(cc.abs() < 0.05, "{cc}");
    assert!((ccp - 1.0).abs() < 0.15, "{ccp}");
}

#[test]
fn sim_of_half_overlap() {
    let p = Grid::new(1, 4, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
    let q = Grid::new(1, 4, vec![0.25; 4]).unwrap();
    assert_eq!(sim_metric(&p, &q).unwrap(), 0.5);
}

#[test]
fn centre_bias_fit_recovers_sigma() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (h, w) = (201, 201);
    let normal = Normal::<f64>::new(100.0, 5.0).unwrap();
    // Each fixation gets its own map so repeated pixels are all counted.
    let maps: Vec<FixationMap> = (0..10_000)
        .map(|_| {
            let y = normal.sample(&mut rng).round() as usize;
            let x = normal.sample(&mut rng).round() as usize;
            FixationMap::from_points(h, w, &[(y, x)]).unwrap()
        })
        .collect();
    let cb = fit_center_bias(&maps).unwrap();
    assert!((cb.sigma_x - 5.0).abs() < 0.25, "{}", cb.sigma_x);
    assert!((cb.sigma_y - 5.0).abs() < 0.25, "{}", cb.sigma_y);
    assert!((cb.mu_x - 100.0).abs() < 0.5 && (cb.mu_y - 100.0).abs() < 0.5);
}
