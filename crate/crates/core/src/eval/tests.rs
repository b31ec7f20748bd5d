use super::*;
use crate::rng::Rng;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng as _, SeedableRng};

fn gaussian_blobs(n: usize, dim: usize, sep: f64, seed: u64) -> LabeledSplit {
    let mut rng = Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * dim);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % 2;
        let sign = if c == 0 { -1.0 } else { 1.0 };
        for j in 0..dim {
            let noise: f64 = rng.gen_range(-1.0..1.0);
            data.push(if j == 0 { sign * sep + noise } else { noise });
        }
        y.push(c);
    }
    LabeledSplit::new(Tensor::matrix(n, dim, data).unwrap(), y).unwrap()
}

fn task(all: &LabeledSplit, classes: usize, seed: u64) -> FrozenTaskData {
    FrozenTaskData::split("t", classes, all, 0.6, 0.2, seed).unwrap()
}

fn xor(n: usize, seed: u64) -> LabeledSplit {
    let mut rng = Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut y = Vec::new();
    for _ in 0..n {
        let a: f64 = rng.gen_range(-1.0..1.0);
        let b: f64 = rng.gen_range(-1.0..1.0);
        data.extend([a, b]);
        y.push(usize::from((a > 0.0) != (b > 0.0)));
    }
    LabeledSplit::new(Tensor::matrix(n, 2, data).unwrap(), y).unwrap()
}

#[test]
fn separable_logreg() {
    let data = task(&gaussian_blobs(600, 5, 3.0, 1), 2, 1);
    let r = train_logreg(&data, &ClassifierConfig::default(), 0).unwrap();
    assert!(r.test >= 0.99, "{}", r.test);
    assert_eq!(r.metric, MetricKind::Accuracy);
}

#[test]
fn permuted_labels_are_near_chance() {
    let all = gaussian_blobs(1000, 5, 3.0, 2);
    let mut y = all.y.clone();
    y.shuffle(&mut Rng::seed_from_u64(9));
    let shuffled = LabeledSplit::new(all.x.clone(), y).unwrap();
    let data = task(&shuffled, 2, 3);
    let r = train_logreg(&data, &ClassifierConfig::default(), 0).unwrap();
    let n = data.test.len() as f64;
    let sigma = (0.25 / n).sqrt();
    assert!((r.test - 0.5).abs() <= 3.0 * sigma, "{} vs 3σ={}", r.test, 3.0 * sigma);
}

#[test]
fn single_class_is_rejected() {
    let x = Tensor::zeros(&[4, 2]);
    let s = LabeledSplit::new(x, vec![0; 4]).unwrap();
    let data = FrozenTaskData::new("t", 2, s.clone(), s.clone(), s).unwrap();
    assert!(train_logreg(&data, &ClassifierConfig::default(), 0).is_err());
}

#[test]
fn xor_needs_the_hidden_layer() {
    let data = task(&xor(800, 4), 2, 4);
    let cfg = ClassifierConfig::default();
    let lin = train_logreg(&data, &cfg, 0).unwrap();
    let mlp = train_mlp_probe(&data, 16, &cfg, 0).unwrap();
    assert!(lin.test <= 0.6, "logreg {}", lin.test);
    assert!(mlp.test >= 0.95, "mlp {}", mlp.test);
}

#[test]
fn zero_width_probe_is_logreg() {
    let data = task(&gaussian_blobs(400, 4, 1.0, 5), 2, 5);
    let cfg = ClassifierConfig::default();
    let a = train_logreg(&data, &cfg, 3).unwrap();
    let b = train_mlp_probe(&data, 0, &cfg, 3).unwrap();
    assert!((a.test - b.test).abs() <= 0.02);
    let c = train_mlp_probe(&data, 8, &cfg, 3).unwrap();
    assert_eq!(c, train_mlp_probe(&data, 8, &cfg, 3).unwrap());
}

#[test]
fn training_accuracy_dominates() {
    let all = gaussian_blobs(300, 6, 0.5, 6);
    let data = FrozenTaskData::new("t", 2, all.clone(), all.clone(), all.clone()).unwrap();
    let held = task(&all, 2, 6);
    let same = train_logreg(&data, &ClassifierConfig::default(), 0).unwrap();
    let out = train_logreg(&held, &ClassifierConfig::default(), 0).unwrap();
    assert!(same.test >= out.test);
}

#[test]
fn features_are_untouched() {
    let data = task(&gaussian_blobs(200, 3, 1.0, 7), 2, 7);
    let before = data.clone();
    train_logreg(&data, &ClassifierConfig::default(), 0).unwrap();
    learning_curve(&data, &[40, 80], &ClassifierConfig::default(), 0).unwrap();
    assert_eq!(before, data);
}

#[test]
fn f1_for_binary_tasks() {
    let mut data = task(&gaussian_blobs(300, 3, 3.0, 8), 2, 8);
    data.report_f1 = true;
    let r = train_logreg(&data, &ClassifierConfig::default(), 0).unwrap();
    assert_eq!(r.metric, MetricKind::AccuracyF1);
    assert!(r.test_f1.unwrap() > 0.95);
    assert_eq!(f1_positive(&[1, 1, 0, 0], &[1, 0, 1, 0]), 0.5);
}

#[test]
fn pearson_examples() {
    let x = [1.0, 2.0, 3.0, 4.0];
    assert!((pearson(&x, &[1.0, 3.0, 2.0, 4.0]).unwrap() - 0.8).abs() < 1e-12);
    assert!((pearson(&x, &x.map(|v| 2.0 * v)).unwrap() - 1.0).abs() < 1e-12);
    assert!((pearson(&x, &x.map(|v| -v)).unwrap() + 1.0).abs() < 1e-12);
    assert!(pearson(&x, &[1.0; 4]).is_err());
    assert!(pearson(&x, &[1.0, 2.0]).is_err());
}

proptest! {
    #[test]
    fn pearson_symmetric_and_affine_invariant(
        pts in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..30),
        a in 0.1f64..5.0, b in -5.0f64..5.0,
    ) {
        let x: Vec<f64> = pts.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
        if let (Ok(r), Ok(s)) = (pearson(&x, &y), pearson(&y, &x)) {
            prop_assert!((r - s).abs() < 1e-12);
            let xt: Vec<f64> = x.iter().map(|v| a * v + b).collect();
            prop_assert!((pearson(&xt, &y).unwrap() - r).abs() < 1e-12);
        }
    }
}

fn unit(theta: f64) -> [f64; 2] {
    [theta.cos(), theta.sin()]
}

#[test]
fn cosine_similarity_protocol() {
    let n = 40;
    let mut a = Vec::new();
    let mut b = Vec::new();
    let mut gold = Vec::new();
    for i in 0..n {
        let t = i as f64 * 0.07;
        a.extend(unit(0.3));
        b.extend(unit(0.3 + t));
        gold.push(t.cos());
    }
    let split = ScoredSplit::new(
        Tensor::matrix(n, 2, a.clone()).unwrap(),
        Tensor::matrix(n, 2, b.clone()).unwrap(),
        gold.clone(),
    )
    .unwrap();
    let data = SimilarityData {
        name: "sts".into(),
        train: None,
        dev: None,
        test: split.clone(),
    };
    let r = similarity_eval(&data, SimilarityMode::Cosine, &ClassifierConfig::default(), 0).unwrap();
    assert!((r.test - 1.0).abs() < 1e-12);

    let anti = ScoredSplit::new(split.a.clone(), split.b.clone(), gold.iter().map(|g| -g).collect()).unwrap();
    let data = SimilarityData { test: anti, ..data };
    let r = similarity_eval(&data, SimilarityMode::Cosine, &ClassifierConfig::default(), 0).unwrap();
    assert!(r.test < -0.99);

    let same = ScoredSplit::new(split.a.clone(), split.a.clone(), vec![5.0; n]).unwrap();
    let data = SimilarityData { test: same, ..data };
    assert!(similarity_eval(&data, SimilarityMode::Cosine, &ClassifierConfig::default(), 0).is_err());

    let zero = ScoredSplit::new(Tensor::zeros(&[2, 2]), Tensor::zeros(&[2, 2]), vec![0.0, 1.0]).unwrap();
    let data = SimilarityData { test: zero, ..data };
    assert!(similarity_eval(&data, SimilarityMode::Cosine, &ClassifierConfig::default(), 0).is_err());
}

#[test]
fn trained_similarity_fits_a_linear_target() {
    let mut rng = Rng::seed_from_u64(11);
    let make = |n: usize, rng: &mut Rng| {
        let a: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f64> = (0..n * 3).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let gold = (0..n).map(|i| a[3 * i] * b[3 * i] + 0.5 * (a[3 * i + 1] - b[3 * i + 1])).collect();
        ScoredSplit::new(Tensor::matrix(n, 3, a).unwrap(), Tensor::matrix(n, 3, b).unwrap(), gold).unwrap()
    };
    let data = SimilarityData {
        name: "sick".into(),
        train: Some(make(300, &mut rng)),
        dev: Some(make(100, &mut rng)),
        test: make(100, &mut rng),
    };
    let r = similarity_eval(&data, SimilarityMode::Trained, &ClassifierConfig::default(), 0).unwrap();
    assert!(r.test > 0.95, "{}", r.test);
    assert!(r.hyperparameters.contains_key("l2"));
}

fn noise(n: usize, dim: usize, seed: u64) -> Tensor {
    let mut rng = Rng::seed_from_u64(seed);
    Tensor::matrix(n, dim, (0..n * dim).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn pool_prefers_the_signal_encoder() {
    for seed in 0..3 {
        let all = gaussian_blobs(400, 4, 2.0, 20 + seed);
        let junk = noise(400, 4, 30 + seed);
        let sets = [("signal".to_string(), &all.x), ("noise".to_string(), &junk)];
        let r = weighted_pool_analysis(&sets, &all.y, 2, &PoolConfig::default(), seed).unwrap();
        assert!((r.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        assert!(r.alpha[0] > r.alpha[1], "{:?}", r.alpha);
    }
}

#[test]
fn pool_single_and_identical_encoders() {
    let all = gaussian_blobs(300, 3, 1.0, 40);
    let one = weighted_pool_analysis(&[("a".into(), &all.x)], &all.y, 2, &PoolConfig::default(), 1).unwrap();
    assert_eq!(one.alpha, vec![1.0]);
    let two = weighted_pool_analysis(&[("a".into(), &all.x), ("b".into(), &all.x)], &all.y, 2, &PoolConfig::default(), 1).unwrap();
    assert!((one.accuracy - two.accuracy).abs() <= 0.02);
    let short = noise(10, 3, 1);
    assert!(weighted_pool_analysis(&[("a".into(), &all.x), ("b".into(), &short)], &all.y, 2, &PoolConfig::default(), 1).is_err());
}

#[test]
fn probe_identical_sets_is_chance() {
    let x = noise(300, 6, 50);
    let r = discriminator_probe(&[&x, &x], &ClassifierConfig::default(), 0).unwrap();
    let n = 120.0;
    assert!((r.accuracy - 0.5).abs() <= 3.0 * (0.25f64 / n).sqrt(), "{}", r.accuracy);
    assert_eq!(r.chance, 0.5);
}

#[test]
fn probe_finds_marker_dimensions() {
    let mut a = noise(200, 6, 51);
    let mut b = noise(200, 6, 52);
    for i in 0..200 {
        a.data_mut()[i * 6] += 3.0;
        b.data_mut()[i * 6] -= 3.0;
    }
    let r = discriminator_probe(&[&a, &b], &ClassifierConfig::default(), 0).unwrap();
    assert!(r.accuracy >= 0.95);
}

#[test]
fn subsample_is_stratified() {
    let labels: Vec<usize> = (0..97).map(|i| if i % 3 == 0 { 1 } else { 0 }).collect();
    let full1 = labels.iter().filter(|&&l| l == 1).count() as f64;
    for size in [5, 10, 33, 60, 97] {
        let idx = stratified_subsample(&labels, 2, size, &mut Rng::seed_from_u64(size as u64)).unwrap();
        assert_eq!(idx.len(), size);
        let ones = idx.iter().filter(|&&i| labels[i] == 1).count() as f64;
        let expect = full1 * size as f64 / labels.len() as f64;
        assert!((ones - expect).abs() <= 1.0);
    }
    assert!(stratified_subsample(&labels, 2, 98, &mut Rng::seed_from_u64(0)).is_err());
}

#[test]
fn curve_end_matches_plain_run_and_trends_up() {
    let cfg = ClassifierConfig::default();
    let mut lo = 0.0;
    let mut hi = 0.0;
    for seed in 0..3 {
        let data = task(&gaussian_blobs(500, 8, 1.0, 60 + seed), 2, seed);
        let n = data.train.len();
        let pts = learning_curve(&data, &[10, n], &cfg, seed).unwrap();
        assert_eq!(pts[1].test, train_logreg(&data, &cfg, seed).unwrap().test);
        lo += pts[0].test / 3.0;
        hi += pts[1].test / 3.0;
    }
    assert!(hi >= lo - 0.02);
    let csv = curve_csv(&[CurvePoint {
        size: 3,
        dev: 0.5,
        test: 0.25,
    }]);
    assert_eq!(csv, "size,dev_accuracy,test_accuracy\n3,0.5,0.25\n");
}
