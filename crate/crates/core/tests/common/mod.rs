#![allow(dead_code)]

use ndarray::{Array1, Array2};
use protoqda::episodes::{gen_synthetic_episode, Episode, SyntheticSpec};
use protoqda::wordrep::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn normal_matrix(rows: usize, cols: usize, rng: &mut impl Rng) -> Array2<f64> {
    let normal = Normal::new(0.0, 1.0).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || normal.sample(rng))
}

/// Relative error with an absolute floor for near-zero components.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Central difference of `f` at `x` in direction `i` with step `h`.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// A random episode with `tokens` vectors per sample and label vectors drawn
/// independently of the samples.
pub fn random_episode(n_way: usize, k: usize, m: usize, dim: usize, tokens: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..n_way).map(|c| format!("class-{c}")).collect();
    let centers = normal_matrix(n_way, dim, &mut rng);
    let sample = |c: usize, id: String, rng: &mut ChaCha8Rng| {
        let mut v = normal_matrix(tokens, dim, rng) * 0.7;
        for mut row in v.rows_mut() {
            row += &centers.row(c);
        }
        TokenSequence::new(vec!["t".into(); tokens], v, names[c].clone(), id).unwrap()
    };
    let support = (0..n_way)
        .map(|c| (0..k).map(|i| sample(c, format!("{c}-s{i}"), &mut rng)).collect())
        .collect();
    let mut query = Vec::new();
    let mut query_labels = Vec::new();
    for c in 0..n_way {
        for i in 0..m {
            query.push(sample(c, format!("{c}-q{i}"), &mut rng));
            query_labels.push(c);
        }
    }
    let labels = normal_matrix(n_way, dim, &mut rng);
    Episode {
        n_way,
        k_shot: k,
        m_query: m,
        support,
        query,
        query_labels,
        label_names: protoqda::wordrep::LabelNameVectors {
            names,
            vectors: labels,
        },
        episode_seed: seed,
    }
}

pub fn gaussian_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        n_way: 5,
        k_shot: 1,
        m_query: 25,
        dim: 16,
        class_center_scale: 1.0,
        intra_class_stddev: 0.5,
        seed,
    }
}

pub fn synthetic(spec: &SyntheticSpec) -> (Episode, Array2<f64>) {
    gen_synthetic_episode(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed)).unwrap()
}

pub fn dist(a: ndarray::ArrayView1<'_, f64>, b: ndarray::ArrayView1<'_, f64>) -> f64 {
    let d: Array1<f64> = &a - &b;
    d.dot(&d).sqrt()
}
