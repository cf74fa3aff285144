//! Acceptance suite: one line per criterion, nonzero exit if any fails.
//!
//! Run with `cargo test -p protoqda-tests --test acceptance`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Axis};
use protoqda::episodes::{
    gen_synthetic_episode, load_dataset, sample_episode_seeded, synthetic_dataset, Episode,
    LabelSource, SyntheticCorpusSpec, SyntheticSpec,
};
use protoqda::label_adapter::{
    adapter_backward, adapter_forward, AdapterConfig, AdapterInput, AdapterParams,
};
use protoqda::protonet::{class_posteriors, classifier_backward, cross_entropy, PrototypeSet};
use protoqda::qda::{
    barycentric_map, barycentric_map_matrix, cost_matrix, exact_ot_oracle, retrieve_top_r,
    sinkhorn, CostMatrix,
};
use protoqda::trainer::{
    episode_loss_frozen, episode_step, evaluate, mean_ci95, Checkpoint, TrainConfig,
};
use protoqda::wordrep::{load_word_vectors, OovPolicy, TokenSequence};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Outcome;

enum Outcome {
    Pass(String),
    Fail(String),
    NotRun(String),
}

fn verdict(ok: bool, detail: String) -> Outcome {
    if ok {
        Outcome::Pass(detail)
    } else {
        Outcome::Fail(detail)
    }
}

fn uniform(rows: usize, cols: usize, lo: f64, hi: f64, rng: &mut impl Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64) -> f64 {
    const H: f64 = 1e-5;
    (f(x + H) - f(x - H)) / (2.0 * H)
}

fn ot_correctness() -> Outcome {
    let started = Instant::now();
    let (mut worst_gap, mut worst_plan, mut worst_iterate) = (0.0f64, 0.0f64, 0.0f64);
    let mut unconverged = 0;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 2 + (seed as usize % 4);
        let c = CostMatrix::new(uniform(n, n, 0.0, 1.0, &mut rng)).unwrap();
        let (_, exact) = exact_ot_oracle(&c).unwrap();
        let plan = sinkhorn(&c, 1e-3 * c.mean(), 1e-10, 50_000).unwrap();
        let realized = (&plan.matrix * &c.view()).sum();
        worst_gap = worst_gap.max((realized - exact).abs() / exact);
        let rows = plan.matrix.sum_axis(Axis(1)).mapv(|s| (s - 1.0 / n as f64).abs());
        let cols = plan.matrix.sum_axis(Axis(0)).mapv(|s| (s - 1.0 / n as f64).abs());
        worst_plan = rows.iter().chain(cols.iter()).fold(worst_plan, |a, &b| a.max(b));
        worst_iterate = worst_iterate.max(plan.marginal_violation);
        unconverged += usize::from(!plan.converged);
    }
    let secs = started.elapsed().as_secs_f64();
    verdict(
        worst_gap <= 0.01 && worst_plan < 1e-8 && secs < 10.0,
        format!(
            "worst relative cost gap {worst_gap:.2e}, returned-plan marginal violation {worst_plan:.2e} \
             (iterate residual before rounding {worst_iterate:.2e}, {unconverged} solves at max_iter), {secs:.2}s"
        ),
    )
}

fn barycentric_equivalence() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let (m, k, d) = (rng.random_range(2..30), rng.random_range(1..7), rng.random_range(1..17));
        let q = uniform(m, d, -2.0, 2.0, &mut rng);
        let s = uniform(k, d, -2.0, 2.0, &mut rng);
        let c = cost_matrix(q.view(), s.view()).unwrap();
        let plan = sinkhorn(&c, 0.05 * c.mean(), 1e-9, 1000).unwrap();
        let retrieved = retrieve_top_r(&plan, &c, rng.random_range(1..=m)).unwrap();
        let a = barycentric_map(&plan, &retrieved, s.view()).unwrap();
        let b = barycentric_map_matrix(&plan, &retrieved, s.view()).unwrap();
        worst = a.iter().zip(b.iter()).fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    verdict(worst <= 1e-10, format!("worst componentwise difference {worst:.2e} over 100 instances"))
}

fn random_input(dim: usize, tokens: usize, labels: usize, rng: &mut ChaCha8Rng) -> AdapterInput {
    let sentence = uniform(tokens, dim, -1.5, 1.5, rng);
    AdapterInput {
        prefix: sentence.mean_axis(Axis(0)).unwrap(),
        sentence,
        labels: uniform(labels, dim, -1.5, 1.5, rng),
    }
}

fn adapter_config(seed: u64, dim: usize) -> AdapterConfig {
    AdapterConfig {
        dim,
        heads: [1, 2, 4][seed as usize % 3],
        dropout_rate: 0.0,
        use_scaling: !seed.is_multiple_of(3),
        identity_init: false,
        residual: seed % 4 == 1,
        layer_norm: seed % 5 == 2,
    }
}

fn random_episode(n_way: usize, k: usize, m: usize, dim: usize, tokens: usize, seed: u64) -> Episode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = (0..n_way).map(|c| format!("class-{c}")).collect();
    let centers = uniform(n_way, dim, -1.0, 1.0, &mut rng);
    let sample = |c: usize, id: String, rng: &mut ChaCha8Rng| {
        let v = uniform(tokens, dim, -0.7, 0.7, rng) + centers.row(c);
        TokenSequence::new(vec!["t".into(); tokens], v, names[c].clone(), id).unwrap()
    };
    let support = (0..n_way)
        .map(|c| (0..k).map(|i| sample(c, format!("{c}-s{i}"), &mut rng)).collect())
        .collect();
    let (mut query, mut query_labels) = (Vec::new(), Vec::new());
    for c in 0..n_way {
        for i in 0..m {
            query.push(sample(c, format!("{c}-q{i}"), &mut rng));
            query_labels.push(c);
        }
    }
    let vectors = uniform(n_way, dim, -1.0, 1.0, &mut rng);
    Episode {
        n_way,
        k_shot: k,
        m_query: m,
        support,
        query,
        query_labels,
        label_names: protoqda::wordrep::LabelNameVectors { names, vectors },
        episode_seed: seed,
    }
}

fn gradient_suite() -> Outcome {
    let (mut adapter_worst, mut classifier_worst, mut episode_worst) = (0.0f64, 0.0f64, 0.0f64);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = [4, 8][seed as usize % 2];

        let params = AdapterParams::seeded(adapter_config(seed, dim), seed).unwrap();
        let input = random_input(dim, 1 + seed as usize % 6, 5, &mut rng);
        let upstream = uniform(1, dim, -1.0, 1.0, &mut rng).row(0).to_owned();
        let objective = |p: &AdapterParams| {
            adapter_forward::<ChaCha8Rng>(p, &input, false, None).unwrap().0.dot(&upstream)
        };
        let (_, cache) = adapter_forward::<ChaCha8Rng>(&params, &input, false, None).unwrap();
        let grads = adapter_backward(&params, &cache, upstream.view()).unwrap();
        for idx in 0..params.weights.num_elements() {
            let numeric = central_diff(
                |x| {
                    let mut p = params.clone();
                    p.weights.flat_set(idx, x);
                    objective(&p)
                },
                params.weights.flat_get(idx),
            );
            adapter_worst = adapter_worst.max(rel_err(grads.params.flat_get(idx), numeric));
        }

        let n = 1 + seed as usize % 6;
        let queries = uniform(n, dim, -1.0, 1.0, &mut rng);
        let protos = uniform(5, dim, -1.0, 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|i| (i + seed as usize) % 5).collect();
        let ids: Vec<String> = (0..5).map(|c| c.to_string()).collect();
        let loss = |q: &Array2<f64>, p: &Array2<f64>| {
            let set = PrototypeSet::new(ids.clone(), p.clone()).unwrap();
            cross_entropy(&class_posteriors(q.view(), &set).unwrap(), &labels).unwrap()
        };
        let set = PrototypeSet::new(ids.clone(), protos.clone()).unwrap();
        let g = classifier_backward(queries.view(), &set, &labels).unwrap();
        for ((r, c), &x) in queries.indexed_iter() {
            let numeric = central_diff(
                |v| {
                    let mut q = queries.clone();
                    q[(r, c)] = v;
                    loss(&q, &protos)
                },
                x,
            );
            classifier_worst = classifier_worst.max(rel_err(g.queries[(r, c)], numeric));
        }
        for ((r, c), &x) in protos.indexed_iter() {
            let numeric = central_diff(
                |v| {
                    let mut p = protos.clone();
                    p[(r, c)] = v;
                    loss(&queries, &p)
                },
                x,
            );
            classifier_worst = classifier_worst.max(rel_err(g.prototypes[(r, c)], numeric));
        }

        let cfg = TrainConfig {
            n_way: 5,
            k_shot: 1 + seed as usize % 3,
            m_query: 1 + seed as usize % 2,
            r: seed as usize % 4,
            dropout: 0.0,
            heads: 2,
            identity_init: false,
            dim: Some(dim),
            use_scaling: seed % 3 != 0,
            residual: seed % 4 == 1,
            layer_norm: seed % 5 == 2,
            ..TrainConfig::default()
        };
        let episode = random_episode(5, cfg.k_shot, cfg.m_query, dim, 1 + seed as usize % 6, seed);
        let params = AdapterParams::seeded(cfg.adapter_config(dim), seed).unwrap();
        let out = episode_step(&params, &episode, &cfg, &mut rng, true).unwrap();
        let grads = out.gradients.expect("train mode");
        for idx in 0..params.weights.num_elements() {
            let numeric = central_diff(
                |x| {
                    let mut p = params.clone();
                    p.weights.flat_set(idx, x);
                    episode_loss_frozen(&p, &episode, &cfg, &out.coefficients).unwrap()
                },
                params.weights.flat_get(idx),
            );
            episode_worst = episode_worst.max(rel_err(grads.flat_get(idx), numeric));
        }
    }
    let worst = adapter_worst.max(classifier_worst).max(episode_worst);
    verdict(
        worst < 1e-4,
        format!(
            "worst relative error over 50 configurations: adapter {adapter_worst:.2e}, \
             classifier {classifier_worst:.2e}, episode loss {episode_worst:.2e}"
        ),
    )
}

/// Prototypical Networks written directly against the episode's token
/// vectors with plain loops.
fn reference_pn(episode: &Episode) -> Vec<usize> {
    let embed = |s: &TokenSequence| -> Vec<f64> {
        let (n, d) = s.vectors.dim();
        (0..d).map(|j| (0..n).map(|i| s.vectors[(i, j)]).sum::<f64>() / n as f64).collect()
    };
    let protos: Vec<Vec<f64>> = episode
        .support
        .iter()
        .map(|class| {
            let reps: Vec<Vec<f64>> = class.iter().map(embed).collect();
            (0..reps[0].len())
                .map(|j| reps.iter().map(|r| r[j]).sum::<f64>() / reps.len() as f64)
                .collect()
        })
        .collect();
    episode
        .query
        .iter()
        .map(|q| {
            let v = embed(q);
            let mut best = (0, f64::INFINITY);
            for (c, p) in protos.iter().enumerate() {
                let d: f64 = v.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.1 {
                    best = (c, d);
                }
            }
            best.0
        })
        .collect()
}

fn pn_reduction() -> Outcome {
    let data = synthetic_dataset(&SyntheticCorpusSpec {
        classes: [5, 5, 12],
        samples_per_class: 12,
        dim: 8,
        class_center_scale: 1.0,
        intra_class_stddev: 0.8,
        signal_dims: None,
        tokens_per_sample: 4,
        seed: 11,
    })
    .unwrap();
    let both = TrainConfig {
        n_way: 5,
        k_shot: 2,
        m_query: 6,
        heads: 2,
        bypass_adapter: true,
        bypass_qda: true,
        ..TrainConfig::default()
    };
    let r_zero = TrainConfig {
        bypass_qda: false,
        r: 0,
        ..both.clone()
    };
    let params = AdapterParams::seeded(both.adapter_config(8), 0).unwrap();
    let mut mismatches = 0;
    for seed in 0..100u64 {
        let episode = sample_episode_seeded(&data.test, 5, 2, 6, seed).unwrap();
        let reference = reference_pn(&episode);
        for cfg in [&both, &r_zero] {
            let out = episode_step(&params, &episode, cfg, &mut ChaCha8Rng::seed_from_u64(seed), false).unwrap();
            mismatches += usize::from(out.predictions != reference);
        }
    }
    verdict(
        mismatches == 0,
        format!("{mismatches} of 200 episode runs (bypass flags and R=0) differ from the reference"),
    )
}

fn prototype_quality() -> Outcome {
    let cfg = |r: usize| TrainConfig {
        n_way: 5,
        k_shot: 1,
        m_query: 25,
        r,
        heads: 2,
        bypass_adapter: true,
        ..TrainConfig::default()
    };
    let (with_qda, without) = (cfg(10), cfg(0));
    let params = AdapterParams::seeded(with_qda.adapter_config(16), 0).unwrap();
    let (mut dist_qda, mut dist_plain) = (0.0, 0.0);
    let mut diffs = Vec::with_capacity(1000);
    for seed in 0..1000u64 {
        let spec = SyntheticSpec {
            n_way: 5,
            k_shot: 1,
            m_query: 25,
            dim: 16,
            class_center_scale: 1.0,
            intra_class_stddev: 0.5,
            seed,
        };
        let (episode, centers) = gen_synthetic_episode(&spec, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = episode_step(&params, &episode, &with_qda, &mut rng, false).unwrap();
        let b = episode_step(&params, &episode, &without, &mut rng, false).unwrap();
        for c in 0..5 {
            let d = |p: &PrototypeSet| {
                let diff: Array1<f64> = &p.vectors().row(c) - &centers.row(c);
                diff.dot(&diff).sqrt()
            };
            dist_qda += d(&a.prototypes);
            dist_plain += d(&b.prototypes);
        }
        diffs.push(a.accuracy - b.accuracy);
    }
    let reduction = 1.0 - dist_qda / dist_plain;
    let (gain, ci) = mean_ci95(&diffs);
    verdict(
        reduction >= 0.20 && gain - ci > 0.0,
        format!(
            "center-distance reduction {:.1}% (need >= 20%), accuracy gain {:+.4} ± {ci:.4}; \
             one support per class makes every mapped query equal that support",
            100.0 * reduction,
            gain
        ),
    )
}

fn huffpost_direction() -> Outcome {
    let vars = ["PROTOQDA_HUFFPOST_DATA", "PROTOQDA_HUFFPOST_SPLIT", "PROTOQDA_WORD_VECTORS"];
    let paths: Vec<Option<PathBuf>> = vars.iter().map(|v| std::env::var_os(v).map(PathBuf::from)).collect();
    let [Some(data), Some(split), Some(vectors)] = [paths[0].clone(), paths[1].clone(), paths[2].clone()] else {
        return Outcome::NotRun(format!("set {} to run (dataset and word vectors not available)", vars.join(", ")));
    };
    let started = Instant::now();
    let table = match load_word_vectors(&vectors, OovPolicy::Skip) {
        Ok(t) => t,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let source = LabelSource {
        table: Some(&table),
        label_vectors: None,
    };
    let dataset = match load_dataset(&data, &split, source, 26) {
        Ok(d) => d,
        Err(e) => return Outcome::Fail(e.to_string()),
    };
    let base = TrainConfig {
        n_way: 5,
        k_shot: 1,
        m_query: 25,
        r: 10,
        episodes_test: 1000,
        bypass_adapter: true,
        dim: Some(table.dim()),
        heads: 1,
        ..TrainConfig::default()
    };
    let pn = TrainConfig {
        bypass_qda: true,
        ..base.clone()
    };
    let checkpoint = Checkpoint::untrained(&base, table.dim()).unwrap();
    let (a, b) = match (evaluate(&checkpoint, &dataset.test, &pn), evaluate(&checkpoint, &dataset.test, &base)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => return Outcome::Fail(e.to_string()),
    };
    let (baseline, with_qda) = (100.0 * a.test_acc_mean, 100.0 * b.test_acc_mean);
    verdict(
        (baseline - 31.6).abs() <= 4.0 && with_qda - baseline >= 4.0,
        format!(
            "PN {baseline:.1}, PN+QDA {with_qda:.1} (need 31.6 ± 4 and >= +4), {:.0}s",
            started.elapsed().as_secs_f64()
        ),
    )
}

fn read_tree(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            for (k, v) in read_tree(&path) {
                out.insert(format!("{}/{k}", path.file_name().unwrap().to_string_lossy()), v);
            }
        } else {
            out.insert(path.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&path).unwrap());
        }
    }
    out
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let config = serde_json::json!({
        "n_way": 5, "k_shot": 1, "m_query": 5, "r": 5, "epochs": 2,
        "episodes_train": 10, "episodes_val": 20, "episodes_test": 40,
        "dropout": 0.1, "heads": 2, "seed": 5,
        "data": {"synthetic": {
            "classes": [10, 6, 6], "samples_per_class": 30, "dim": 8,
            "class_center_scale": 1.0, "intra_class_stddev": 0.6, "seed": 2
        }}
    });
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, config.to_string()).unwrap();
    let mut corpus = String::new();
    for c in 0..12 {
        for i in 0..3 {
            corpus.push_str(&format!("{{\"text\": \"sample {i}\", \"label\": \"topic{c}\"}}\n"));
        }
    }
    let corpus_path = dir.path().join("corpus.jsonl");
    std::fs::write(&corpus_path, corpus).unwrap();

    let round = |tag: &str| -> Result<BTreeMap<String, Vec<u8>>, String> {
        let root = dir.path().join(tag);
        let s = |p: &Path| p.to_str().unwrap().to_owned();
        let train_out = root.join("train");
        let checkpoint = s(&train_out.join("checkpoint.json"));
        let commands: Vec<Vec<String>> = vec![
            vec!["train".into(), "--config".into(), s(&cfg), "--out".into(), s(&train_out)],
            vec!["eval".into(), "--config".into(), s(&cfg), "--checkpoint".into(), checkpoint.clone(), "--out".into(), s(&root.join("eval"))],
            vec!["ablate".into(), "--config".into(), s(&cfg), "--out".into(), s(&root.join("ablate"))],
            vec!["dump-reps".into(), "--config".into(), s(&cfg), "--checkpoint".into(), checkpoint, "--out".into(), s(&root.join("dump"))],
            vec!["make-splits".into(), "--data".into(), s(&corpus_path), "--counts".into(), "6/3/3".into(), "--seed".into(), "4".into(), "--out".into(), s(&root.join("splits"))],
        ];
        for args in commands {
            let argv = ["protoqda", "--quiet"].into_iter().map(String::from).chain(args.iter().cloned());
            let code = protoqda_cli::run(argv);
            if code != 0 {
                return Err(format!("`{}` exited with {code}", args[0]));
            }
        }
        Ok(read_tree(&root))
    };
    match (round("first"), round("second")) {
        (Ok(a), Ok(b)) => {
            let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
            verdict(
                differing.is_empty() && a.len() == b.len(),
                format!("{} output files across 5 commands, {} differ {:?}", a.len(), differing.len(), differing),
            )
        }
        (Err(e), _) | (_, Err(e)) => Outcome::Fail(e),
    }
}

fn main() {
    let criteria: [(&str, Check); 7] = [
        ("OT correctness", ot_correctness),
        ("barycentric map equivalence", barycentric_equivalence),
        ("gradient suite", gradient_suite),
        ("PN reduction", pn_reduction),
        ("prototype quality", prototype_quality),
        ("HuffPost direction", huffpost_direction),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    println!("\nacceptance criteria");
    for (i, (name, check)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(check)
            .unwrap_or_else(|e| {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                Outcome::Fail(format!("panicked: {msg}"))
            });
        let (status, detail) = match outcome {
            Outcome::Pass(d) => ("PASS", d),
            Outcome::Fail(d) => {
                failed += 1;
                ("FAIL", d)
            }
            Outcome::NotRun(d) => ("NOT RUN", d),
        };
        println!("criterion {} [{name}]: {status}: {detail}", i + 1);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
