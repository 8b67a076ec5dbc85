mod common;

use common::{pearson, random_net, synthetic_stream};
use dropgate::methods::{
    fisher_diagonal, mtl_train, train_continual, Method, MethodConfig, PooledSampler,
};
use dropgate::seeded_rng;
use ndarray::Array2;
use rand::Rng;

fn small(method: Method) -> MethodConfig {
    let mut c = MethodConfig::defaults(method);
    c.hidden_layers = vec![24, 24];
    c.epochs_per_task = 2;
    c.memory_per_task = 40;
    c.ewc_fisher_samples = 60;
    c
}

#[test]
fn single_task_runs_agree_across_non_dropout_methods() {
    let stream = synthetic_stream(1, 7);
    let reference = train_continual(&small(Method::Sgd), &stream, 11).unwrap();
    assert_eq!(reference.accuracy.num_tasks(), 1);
    assert!(reference.accuracy.get(0, 0).unwrap() > 0.5, "fixture should be learnable");
    for method in [Method::Ewc, Method::Agem, Method::Ogd] {
        let r = train_continual(&small(method), &stream, 11).unwrap();
        assert_eq!(r.accuracy, reference.accuracy, "{method}");
        assert_eq!(r.net.flat_params(), reference.net.flat_params(), "{method}");
    }
    // Dropout is the only thing that changes a one-task run.
    let dropout = train_continual(&small(Method::SgdDropout), &stream, 11).unwrap();
    assert_ne!(dropout.net.flat_params(), reference.net.flat_params());
}

#[test]
fn pooled_training_of_one_task_is_plain_sgd() {
    let stream = synthetic_stream(3, 5);
    let mut sgd = small(Method::Sgd);
    sgd.lr_decay = 1.0;
    let single = train_continual(&sgd, &stream.truncated(1), 4).unwrap();
    let pooled = mtl_train(&small(Method::Mtl), &stream, 1, 4).unwrap();
    assert_eq!(pooled.accuracy, single.accuracy);
    assert_eq!(pooled.net.flat_params(), single.net.flat_params());
}

#[test]
fn pooled_training_fills_the_matrix() {
    let stream = synthetic_stream(3, 5);
    let r = train_continual(&small(Method::Mtl), &stream, 2).unwrap();
    assert!(r.accuracy.is_complete());
    assert_eq!(r.accuracy.num_tasks(), 3);
}

#[test]
fn every_method_completes_and_replays() {
    let stream = synthetic_stream(3, 9);
    for method in Method::ALL {
        let a = train_continual(&small(method), &stream, 3).unwrap();
        let b = train_continual(&small(method), &stream, 3).unwrap();
        assert!(a.accuracy.is_complete(), "{method}");
        assert_eq!(a.accuracy, b.accuracy, "{method}");
        assert_eq!(a.curves, b.curves, "{method}");
        let c = train_continual(&small(method), &stream, 4).unwrap();
        assert_ne!(a.net.flat_params(), c.net.flat_params(), "{method}: seed must matter");
    }
}

#[test]
fn per_epoch_curves_cover_every_seen_task() {
    let stream = synthetic_stream(3, 9);
    let r = train_continual(&small(Method::Sgd), &stream, 1).unwrap();
    // Epochs 1..2 of task t evaluate tasks 0..=t: 2·(1+2+3) points.
    assert_eq!(r.curves.len(), 12);
    let mut quiet = small(Method::Sgd);
    quiet.eval_every_epoch = false;
    let q = train_continual(&quiet, &stream, 1).unwrap();
    assert_eq!(q.curves.len(), 6);
    assert_eq!(q.accuracy, r.accuracy);
}

#[test]
fn fisher_estimates_agree_between_sample_sizes() {
    let mut rng = seeded_rng(21);
    let net = random_net(&[20, 16, 16, 10], 1.0, &mut rng);
    let inputs = |n: usize, rng: &mut dropgate::Rng| Array2::from_shape_fn((n, 20), |_| rng.gen_range(-1.0..1.0));
    let small_x = inputs(1000, &mut rng);
    let large_x = inputs(10_000, &mut rng);
    let f_small = fisher_diagonal(&net, small_x.view(), &mut rng).unwrap();
    let f_large = fisher_diagonal(&net, large_x.view(), &mut rng).unwrap();
    let r = pearson(&f_small, &f_large);
    assert!(r > 0.95, "correlation {r}");
}

#[test]
fn pooled_sampler_is_uniform_over_tasks_and_labels() {
    // Three tasks of 500 examples whose labels cycle 0..9.
    let sampler = PooledSampler::new(&[500, 500, 500]);
    let mut rng = seeded_rng(8);
    let mut task_counts = [0usize; 3];
    let mut label_counts = [0usize; 10];
    let mut draws = 0;
    // Only the first batch of each epoch, so every draw is a fresh shuffle
    // rather than a full (trivially balanced) pass.
    while draws < 100_000 {
        for &g in sampler.epoch_order(&mut rng).iter().take(64) {
            let (t, i) = sampler.locate(g);
            task_counts[t] += 1;
            label_counts[i % 10] += 1;
            draws += 1;
        }
    }
    // Within 2 percentage points of uniform.
    for c in task_counts {
        let f = c as f64 / draws as f64;
        assert!((f - 1.0 / 3.0).abs() < 0.02, "task frequency {f}");
    }
    for c in label_counts {
        let f = c as f64 / draws as f64;
        assert!((f - 0.1).abs() < 0.02, "label frequency {f}");
    }
}

#[test]
fn sampler_maps_global_indices() {
    let s = PooledSampler::new(&[3, 0, 2]);
    assert_eq!(s.total(), 5);
    let located: Vec<_> = (0..5).map(|g| s.locate(g)).collect();
    assert_eq!(located, vec![(0, 0), (0, 1), (0, 2), (2, 0), (2, 1)]);
}
