use amoe_core::eir::{ClubNet, EirConfig, EirEstimator};
use amoe_core::experts::ExpertGroup;
use amoe_core::feature_io::{gen_synthetic, SyntheticSpec};
use amoe_core::optim::{Adam, AdamConfig};
use amoe_core::params::ParamStore;
use amoe_core::tensor::Mat;
use amoe_core::trainer::{TrainConfig, Trainer};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn gaussian(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_shape_fn((r, c), |_| StandardNormal.sample(rng))
}

#[test]
fn batches_below_two_are_rejected() {
    let data = gen_synthetic(&SyntheticSpec {
        n_classes: 1,
        train_per_class: 4,
        test_per_class: 2,
        grid_h: 6,
        grid_w: 6,
        dim: 8,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let config = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    assert!(Trainer::new(config, &data).is_err());
}

#[test]
fn estimate_is_invariant_to_relabelling_samples() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let net = ClubNet::new(&mut store, "c", 3, 6, &mut rng);
    let b = 12;
    let x = gaussian(&mut rng, b, 3);
    let y = &x * 0.7 + gaussian(&mut rng, b, 3) * 0.5;
    let mut perm: Vec<usize> = (0..b).collect();
    perm.shuffle(&mut rng);
    let base = net.estimate_value(&store, &x, &y, &perm);

    // Reorder samples by sigma; the negative pairing follows the relabelling.
    let mut sigma: Vec<usize> = (0..b).collect();
    sigma.shuffle(&mut rng);
    let mut inv = vec![0; b];
    for (i, &s) in sigma.iter().enumerate() {
        inv[s] = i;
    }
    let xs = Mat::from_shape_fn((b, 3), |(i, j)| x[[sigma[i], j]]);
    let ys = Mat::from_shape_fn((b, 3), |(i, j)| y[[sigma[i], j]]);
    let perm_s: Vec<usize> = (0..b).map(|i| inv[perm[sigma[i]]]).collect();
    let relabelled = net.estimate_value(&store, &xs, &ys, &perm_s);
    assert!((base - relabelled).abs() < 1e-12, "{base} vs {relabelled}");
}

#[test]
fn fitted_mean_tracks_the_partner_representation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let net = ClubNet::new(&mut store, "c", 2, 16, &mut rng);
    let mut opt = Adam::new(AdamConfig::plain(1e-2), &store);
    let x = gaussian(&mut rng, 512, 2);
    let y = &x * 0.8;
    for _ in 0..1500 {
        net.fit_step(&mut store, &mut opt, &x, &y);
    }
    let mut g = amoe_core::tensor::Graph::new();
    let xv = g.constant(x.clone());
    let (mu, _) = net.forward(&mut g, &store, xv, amoe_core::nn::Bind::Frozen);
    let err = (g.value(mu) - &y).mapv(f64::abs).mean().unwrap();
    assert!(err < 0.05, "mean |mu - z_k| = {err}");
}

#[test]
fn zero_learning_rate_leaves_estimators_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let groups = [ExpertGroup::Patch, ExpertGroup::Patch, ExpertGroup::Global, ExpertGroup::Global];
    let config = EirConfig {
        lr: 0.0,
        ..EirConfig::default()
    };
    let mut est = EirEstimator::new(&groups, 4, config, &mut rng).unwrap();
    let before = est.store.clone();
    let reps: Vec<Mat> = (0..4).map(|_| gaussian(&mut rng, 8, 4)).collect();
    for _ in 0..5 {
        est.update(&reps);
    }
    assert_eq!(est.store, before);
}

#[test]
fn negative_learning_rate_is_a_config_error() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let config = EirConfig {
        lr: -1.0,
        ..EirConfig::default()
    };
    assert!(EirEstimator::new(&[ExpertGroup::Patch; 2], 4, config, &mut rng).is_err());
}
