use ndarray::{Array1, Array2, Axis};
use proptest::prelude::*;
use protoqda::protonet::{
    accuracy, class_posteriors, classifier_backward, cross_entropy, predict, PrototypeSet,
};

fn matrix(rows: usize, dim: usize) -> impl Strategy<Value = Array2<f64>> {
    proptest::collection::vec(-3.0f64..3.0, rows * dim)
        .prop_map(move |v| Array2::from_shape_vec((rows, dim), v).unwrap())
}

fn set(p: &Array2<f64>) -> PrototypeSet {
    PrototypeSet::new((0..p.nrows()).map(|c| format!("c{c}")).collect(), p.clone()).unwrap()
}

/// Brute-force nearest prototype with ties to the lowest index.
fn nearest(q: ndarray::ArrayView1<'_, f64>, p: &Array2<f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, row) in p.rows().into_iter().enumerate() {
        let d: f64 = q.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum();
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn posteriors_are_distributions(q in matrix(6, 4), p in matrix(3, 4)) {
        let post = class_posteriors(q.view(), &set(&p)).unwrap();
        for row in post.probs.rows() {
            prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn prediction_matches_brute_force(q in matrix(8, 3), p in matrix(4, 3)) {
        let pred = predict(q.view(), &set(&p)).unwrap();
        for (i, row) in q.rows().into_iter().enumerate() {
            prop_assert_eq!(pred[i], nearest(row, &p));
        }
    }

    #[test]
    fn shared_translation_and_scale_keep_predictions(
        q in matrix(8, 3),
        p in matrix(4, 3),
        shift in proptest::collection::vec(-5.0f64..5.0, 3),
        scale in 0.1f64..10.0,
    ) {
        let shift = Array1::from(shift);
        let base = predict(q.view(), &set(&p)).unwrap();
        let moved = predict((&q + &shift).view(), &set(&(&p + &shift))).unwrap();
        let scaled = predict((&q * scale).view(), &set(&(&p * scale))).unwrap();
        // exact float ties may flip under rescaling; random data has none
        prop_assert_eq!(&base, &moved);
        prop_assert_eq!(&base, &scaled);
    }

    #[test]
    fn shared_translation_keeps_posteriors(
        q in matrix(5, 3),
        p in matrix(3, 3),
        shift in proptest::collection::vec(-5.0f64..5.0, 3),
    ) {
        let shift = Array1::from(shift);
        let a = class_posteriors(q.view(), &set(&p)).unwrap();
        let b = class_posteriors((&q + &shift).view(), &set(&(&p + &shift))).unwrap();
        for (x, y) in a.probs.iter().zip(b.probs.iter()) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_sum_to_zero(q in matrix(7, 4), p in matrix(3, 4)) {
        let labels: Vec<usize> = (0..7).map(|i| i % 3).collect();
        let g = classifier_backward(q.view(), &set(&p), &labels).unwrap();
        let total = g.queries.sum_axis(Axis(0)) + g.prototypes.sum_axis(Axis(0));
        prop_assert!(total.iter().all(|x| x.abs() < 1e-9));
    }
}

#[test]
fn small_prototype_step_lowers_loss() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
    for trial in 0..50 {
        let q = Array2::from_shape_simple_fn((10, 5), || rng.random_range(-1.0..1.0));
        let p = Array2::from_shape_simple_fn((5, 5), || rng.random_range(-1.0..1.0));
        let labels: Vec<usize> = (0..10).map(|i| i % 5).collect();
        let g = classifier_backward(q.view(), &set(&p), &labels).unwrap();
        let stepped = &p - &(&g.prototypes * 1e-3);
        let after = cross_entropy(&class_posteriors(q.view(), &set(&stepped)).unwrap(), &labels).unwrap();
        assert!(after < g.loss, "trial {trial}: {after} >= {}", g.loss);
    }
}

#[test]
fn far_separated_queries_are_all_correct() {
    let p = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 100.0 } else { 0.0 });
    let q = Array2::from_shape_fn((8, 4), |(i, j)| if i % 4 == j { 99.0 } else { 0.5 });
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let pred = predict(q.view(), &set(&p)).unwrap();
    assert_eq!(accuracy(&pred, &labels), 1.0);
}

#[test]
fn hopeless_queries_hit_the_floor_without_gradient() {
    let p = ndarray::array![[0.0, 0.0], [100.0, 0.0]];
    let q = ndarray::array![[0.0, 0.0]];
    let g = classifier_backward(q.view(), &set(&p), &[1]).unwrap();
    assert_eq!(g.loss, 50.0);
    assert!(g.queries.iter().chain(g.prototypes.iter()).all(|&x| x == 0.0));
}
